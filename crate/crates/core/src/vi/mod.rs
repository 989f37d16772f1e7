//! Batch variational inference: full mean-field updates, the collapsed
//! engine with the soft-count surrogate, and hyperparameter steps.

mod collapsed;
mod full;
pub mod hyper;
pub mod sticks;

use std::collections::HashMap;
use std::io::Write;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition_law::Partition;
use crate::records::RecordTable;
use crate::rng::{self, derive_seed};
use crate::svi::SviSummary;

pub use collapsed::{collapsed_sweep, fit_collapsed_vi, fit_collapsed_vi_state, surrogate_elbo, CollapsedState};
pub use full::{
    fit_full_vi, fit_full_vi_state, full_elbo, full_sweep, update_entities_full, update_responsibilities_full, EntityPosterior,
    FullState,
};
pub use hyper::{expectation_gradient, update_hyperparams, HyperContext, HyperPriors, HyperStep};
pub use sticks::{e_log_pi, stick_elbo_terms, stick_prior, update_sticks, StickConvention, StickState};

/// Dense row-major `n × K` assignment probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Responsibilities {
    n: usize,
    k: usize,
    values: Vec<f64>,
}

impl Responsibilities {
    pub fn new(n: usize, k: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 || k == 0 || values.len() != n * k {
            return Err(Error::InvalidParameter(format!(
                "responsibilities of shape {n} x {k} need {} entries, got {}",
                n * k,
                values.len()
            )));
        }
        for (i, row) in values.chunks_exact(k).enumerate() {
            let total: f64 = row.iter().sum();
            if row.iter().any(|&r| !(0.0..=1.0 + 1e-12).contains(&r)) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidParameter(format!("row {i} is not a probability vector")));
            }
        }
        Ok(Responsibilities { n, k, values })
    }

    pub fn uniform(n: usize, k: usize) -> Self {
        Responsibilities {
            n,
            k,
            values: vec![1.0 / k as f64; n * k],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_clusters(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.k..(i + 1) * self.k]
    }

    #[inline]
    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.k..(i + 1) * self.k]
    }

    pub(crate) fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// `N_k = sum_i r_ik`.
    pub fn masses(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.k];
        for row in self.values.chunks_exact(self.k) {
            for (m, &r) in out.iter_mut().zip(row) {
                *m += r;
            }
        }
        out
    }

    /// `-sum r ln r` with `0 ln 0 = 0`.
    pub fn entropy(&self) -> f64 {
        row_entropy(&self.values)
    }

    /// `sum_ik r_ik w_k`.
    pub fn weighted_sum(&self, weights: &[f64]) -> f64 {
        self.values
            .chunks_exact(self.k)
            .map(|row| row.iter().zip(weights).map(|(r, w)| r * w).sum::<f64>())
            .sum()
    }

    /// Row-wise argmax (ties to the lowest index).
    pub fn argmax(&self, i: usize) -> usize {
        argmax(self.row(i))
    }

    /// Row-wise argmax, relabelled by first appearance.
    pub fn point_estimate(&self) -> Partition {
        let labels: Vec<usize> = (0..self.n).map(|i| self.argmax(i)).collect();
        Partition::from_labels(&labels).expect("n > 0")
    }
}

pub(crate) fn row_entropy(values: &[f64]) -> f64 {
    -values.iter().filter(|&&r| r > 0.0).map(|&r| r * r.ln()).sum::<f64>()
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &r) in row.iter().enumerate().skip(1) {
        if r > row[best] {
            best = k;
        }
    }
    best
}

/// In-place softmax of log-weights; returns the log normalizer.
pub(crate) fn normalize_log_row(row: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = 1.0 / total;
    row.iter_mut().for_each(|v| *v *= inv);
    max + total.ln()
}

/// Starting responsibilities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Identical records start in a shared cluster; the largest groups take
    /// the first clusters and any overflow groups land on random clusters.
    #[default]
    DuplicateHash,
    /// Every row is an independent flat-Dirichlet draw.
    Random,
}

pub fn initial_responsibilities(
    table: &RecordTable,
    num_clusters: usize,
    mode: InitMode,
    noise: f64,
    seed: u64,
) -> Responsibilities {
    let (n, k) = (table.n(), num_clusters);
    let mut rng = rng::seeded(derive_seed(seed, 0));
    let mut values = vec![0.0; n * k];
    let fill_noise = |row: &mut [f64], rng: &mut rng::Rng| {
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = -(1.0 - rng.random::<f64>()).ln();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    };
    match mode {
        InitMode::Random => {
            for row in values.chunks_exact_mut(k) {
                fill_noise(row, &mut rng);
            }
        }
        InitMode::DuplicateHash => {
            let mut groups: HashMap<&[u32], usize> = HashMap::new();
            let mut group_of = Vec::with_capacity(n);
            let mut sizes: Vec<usize> = Vec::new();
            for row in table.rows() {
                let next = groups.len();
                let g = *groups.entry(row).or_insert(next);
                if g == sizes.len() {
                    sizes.push(0);
                }
                sizes[g] += 1;
                group_of.push(g);
            }
            let mut order: Vec<usize> = (0..sizes.len()).collect();
            order.sort_by(|&x, &y| sizes[y].cmp(&sizes[x]).then(x.cmp(&y)));
            let mut cluster_of_group = vec![0; sizes.len()];
            for (rank, &g) in order.iter().enumerate() {
                cluster_of_group[g] = if rank < k { rank } else { rng.random_range(0..k) };
            }
            for (row, &g) in values.chunks_exact_mut(k).zip(&group_of) {
                fill_noise(row, &mut rng);
                row.iter_mut().for_each(|v| *v *= noise);
                row[cluster_of_group[g]] += 1.0 - noise;
            }
        }
    }
    Responsibilities { n, k, values }
}

/// Settings shared by the batch engines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Truncation level; defaults to the number of records.
    #[serde(rename = "K")]
    pub num_clusters: Option<usize>,
    pub max_iters: usize,
    pub elbo_rel_tol: f64,
    pub init: InitMode,
    /// Mass spread over all clusters by the duplicate-hash start.
    pub init_noise: f64,
    pub hyper_update: bool,
    pub priors: HyperPriors,
    pub newton_damping: f64,
    pub stick_convention: StickConvention,
    /// Starting (or fixed) prior strength per record.
    pub lambda: f64,
    /// Starting (or fixed) discount.
    pub alpha: f64,
    /// Collapsed sweeps remove each record's own mass before updating it.
    /// Disabling gives a simultaneous update against frozen counts.
    pub exclude_self: bool,
    /// Keep a record's previous responsibilities when the new ones would
    /// lower the bound.
    pub monotone_guard: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            num_clusters: None,
            max_iters: 500,
            elbo_rel_tol: 1e-6,
            init: InitMode::DuplicateHash,
            init_noise: 0.01,
            hyper_update: true,
            priors: HyperPriors::default(),
            newton_damping: 0.5,
            stick_convention: StickConvention::Index,
            lambda: 0.5,
            alpha: 0.25,
            exclude_self: true,
            monotone_guard: true,
        }
    }
}

/// Consecutive small relative changes needed to declare convergence.
pub const CONVERGENCE_WINDOW: usize = 3;

impl FitConfig {
    pub fn clusters_for(&self, n: usize) -> usize {
        self.num_clusters.unwrap_or(n)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        let k = self.clusters_for(n);
        if k < 2 {
            return bad(format!("truncation level K must be at least 2 (got {k})"));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be positive".into());
        }
        if !(self.elbo_rel_tol > 0.0) {
            return bad("elbo_rel_tol must be positive".into());
        }
        if !(0.0..1.0).contains(&self.init_noise) {
            return bad(format!("init_noise {} outside [0, 1)", self.init_noise));
        }
        if !(self.newton_damping > 0.0 && self.newton_damping <= 1.0) {
            return bad(format!("newton_damping {} outside (0, 1]", self.newton_damping));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive (got {})", self.lambda));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1)", self.alpha));
        }
        if self.hyper_update {
            self.priors.validate()?;
            let (lo, hi) = hyper::HYPER_BOUNDS;
            if !(lo..=hi).contains(&self.lambda) || !(lo..=hi).contains(&self.alpha) {
                return bad(format!(
                    "with hyperparameter updates lambda and alpha must start in [{lo}, {hi}] (got {}, {})",
                    self.lambda, self.alpha
                ));
            }
        }
        Ok(())
    }
}

pub(crate) fn has_converged(trace: &[f64], tol: f64) -> bool {
    trace.len() > CONVERGENCE_WINDOW
        && trace
            .windows(2)
            .rev()
            .take(CONVERGENCE_WINDOW)
            .all(|w| (w[1] - w[0]).abs() <= tol * w[1].abs().max(1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    Full,
    Collapsed,
    Svi,
}

/// Serialized outcome of a fit. Cluster ids are 1-based and numbered by
/// first appearance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub engine: Engine,
    pub elbo_trace: Vec<f64>,
    pub lambda: f64,
    pub alpha: f64,
    #[serde(rename = "K")]
    pub num_clusters: usize,
    pub iterations: usize,
    pub converged: bool,
    pub hard_assignment: Vec<usize>,
    pub cluster_sizes: Vec<usize>,
    pub k_hat: usize,
    pub wallclock_seconds: f64,
    pub seed: u64,
    #[serde(flatten, default, skip_serializing_if = "Option::is_none")]
    pub svi: Option<SviSummary>,
}

impl FitResult {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        engine: Engine,
        elbo_trace: Vec<f64>,
        lambda: f64,
        alpha: f64,
        num_clusters: usize,
        converged: bool,
        estimate: &Partition,
        wallclock_seconds: f64,
        seed: u64,
    ) -> Self {
        FitResult {
            engine,
            iterations: elbo_trace.len(),
            elbo_trace,
            lambda,
            alpha,
            num_clusters,
            converged,
            hard_assignment: estimate.labels().iter().map(|&l| l + 1).collect(),
            cluster_sizes: estimate.block_sizes().to_vec(),
            k_hat: estimate.num_blocks(),
            wallclock_seconds,
            seed,
            svi: None,
        }
    }

    pub fn partition(&self) -> Result<Partition> {
        Partition::from_labels(&self.hard_assignment)
    }

    /// Copy with the wallclock zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> FitResult {
        FitResult {
            wallclock_seconds: 0.0,
            ..self.clone()
        }
    }

    /// `record_id,cluster_id` rows, both 1-based.
    pub fn write_assignment_csv<W: Write>(&self, out: W) -> Result<()> {
        crate::eval::write_assignment_csv(&self.partition()?, "cluster_id", out)
    }
}
