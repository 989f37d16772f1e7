//! Stochastic variational inference over the collapsed model.
//!
//! Each step reads the global soft counts and sticks, computes local
//! responsibilities for a mini-batch, scales the batch statistics up to the
//! full data size and blends them into the global state with a decaying
//! step size.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{HitMissConstants, SoftCounts};
use crate::partition_law::Partition;
use crate::records::{RecordTable, Schema};
use crate::rng::{self, derive_seed};
use crate::vi::{
    e_log_pi, initial_responsibilities, stick_elbo_terms, update_sticks, Engine, FitConfig, FitResult,
    Responsibilities, StickState,
};

/// Sparse responsibility row: `(cluster, weight)` pairs in ascending
/// cluster order.
pub type SparseRow = Vec<(usize, f64)>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SviConfig {
    pub batch_size: usize,
    pub t0: f64,
    pub kappa: f64,
    pub epochs: usize,
    /// Keep only the `top_v` largest responsibilities per record.
    pub top_v: Option<usize>,
    /// Constant step size in place of the decaying schedule.
    pub fixed_step: Option<f64>,
}

impl Default for SviConfig {
    fn default() -> Self {
        SviConfig {
            batch_size: 256,
            t0: 1.0,
            kappa: 0.9,
            epochs: 30,
            top_v: None,
            fixed_step: None,
        }
    }
}

impl SviConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.batch_size == 0 || self.batch_size > n {
            return bad(format!("batch size {} outside [1, {n}]", self.batch_size));
        }
        if !(self.kappa > 0.5 && self.kappa <= 1.0) {
            return bad(format!("kappa {} outside (0.5, 1]", self.kappa));
        }
        if !(self.t0 >= 0.0 && self.t0.is_finite()) {
            return bad(format!("t0 must be non-negative (got {})", self.t0));
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.top_v == Some(0) {
            return bad("top_v must be at least 1".into());
        }
        if let Some(rho) = self.fixed_step {
            if !(rho > 0.0 && rho <= 1.0) {
                return bad(format!("fixed_step {rho} outside (0, 1]"));
            }
        }
        Ok(())
    }
}

/// `rho_t = (t0 + t)^(-kappa)`, or the fixed step when one is set.
pub fn step_size(t: usize, cfg: &SviConfig) -> f64 {
    match cfg.fixed_step {
        Some(rho) => rho,
        None => (cfg.t0 + t as f64).powf(-cfg.kappa),
    }
}

/// Keeps the `v` largest entries (ties to the lower index) and renormalizes.
pub fn top_v_sparsify(row: &[f64], v: usize) -> SparseRow {
    assert!(v >= 1, "top_v must be at least 1");
    if v >= row.len() {
        return dense_to_sparse(row);
    }
    let mut idx: Vec<usize> = (0..row.len()).collect();
    let order = |&a: &usize, &b: &usize| row[b].total_cmp(&row[a]).then(a.cmp(&b));
    idx.select_nth_unstable_by(v - 1, order);
    idx.truncate(v);
    idx.sort_unstable();
    let total: f64 = idx.iter().map(|&k| row[k]).sum();
    idx.into_iter()
        .filter(|&k| row[k] > 0.0)
        .map(|k| (k, row[k] / total))
        .collect()
}

/// [`top_v_sparsify`] applied to the softmax of `logits`, exponentiating
/// only the kept entries.
fn top_v_from_logits(logits: &[f64], v: usize) -> SparseRow {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    if v < idx.len() {
        let order = |&a: &usize, &b: &usize| logits[b].total_cmp(&logits[a]).then(a.cmp(&b));
        idx.select_nth_unstable_by(v - 1, order);
        idx.truncate(v);
        idx.sort_unstable();
    }
    let max = idx.iter().map(|&k| logits[k]).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = idx.iter().map(|&k| (logits[k] - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    idx.into_iter()
        .zip(weights)
        .filter(|&(_, w)| w > 0.0)
        .map(|(k, w)| (k, w / total))
        .collect()
}

/// Non-zero entries of a dense row.
pub fn dense_to_sparse(row: &[f64]) -> SparseRow {
    row.iter().enumerate().filter(|(_, &r)| r > 0.0).map(|(k, &r)| (k, r)).collect()
}

/// Per-record sparse responsibilities.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseResponsibilities {
    num_clusters: usize,
    rows: Vec<SparseRow>,
}

impl SparseResponsibilities {
    pub fn new(num_clusters: usize, rows: Vec<SparseRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidParameter("no rows".into()));
        }
        for (i, row) in rows.iter().enumerate() {
            let total: f64 = row.iter().map(|&(_, w)| w).sum();
            let ordered = row.windows(2).all(|p| p[0].0 < p[1].0);
            let valid = row.iter().all(|&(k, w)| k < num_clusters && w > 0.0);
            if !ordered || !valid || (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidParameter(format!("row {i} is not a sparse probability vector")));
            }
        }
        Ok(SparseResponsibilities { num_clusters, rows })
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn num_clusters(&self) -> usize {
        self.num_clusters
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    /// Stored (cluster, weight) pairs over all records.
    pub fn entries(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// Largest weight; the lowest cluster index on ties.
    pub fn argmax(&self, i: usize) -> usize {
        let mut best = self.rows[i][0];
        for &(k, w) in &self.rows[i][1..] {
            if w > best.1 {
                best = (k, w);
            }
        }
        best.0
    }

    pub fn to_dense(&self) -> Responsibilities {
        let k = self.num_clusters;
        let mut values = vec![0.0; self.rows.len() * k];
        for (i, row) in self.rows.iter().enumerate() {
            for &(c, w) in row {
                values[i * k + c] = w;
            }
        }
        Responsibilities::new(self.rows.len(), k, values).expect("validated rows")
    }
}

/// Local responsibilities of one batch with the entropy of each row.
enum LocalRows {
    Dense { k: usize, values: Vec<f64> },
    Sparse(Vec<SparseRow>),
}

impl LocalRows {
    fn into_sparse(self) -> Vec<SparseRow> {
        match self {
            LocalRows::Dense { k, values } => values.chunks_exact(k).map(dense_to_sparse).collect(),
            LocalRows::Sparse(rows) => rows,
        }
    }
}

/// Normalizes logits in place and returns the entropy of the result.
fn softmax_entropy(row: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut total, mut moment) = (0.0, 0.0);
    for v in row.iter_mut() {
        let shifted = *v - max;
        *v = shifted.exp();
        total += *v;
        moment += *v * shifted;
    }
    let inv = 1.0 / total;
    row.iter_mut().for_each(|v| *v *= inv);
    total.ln() - moment * inv
}

fn sparse_entropy(row: &[(usize, f64)]) -> f64 {
    row.iter().map(|&(_, r)| -r * r.ln()).sum()
}

/// `K × W` to `W × K`.
fn transpose(values: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = values[r * cols + c];
        }
    }
    out
}

/// Accumulates `scale * r_ik` into value-major counts (`W × K`) and masses.
struct BatchAccumulator<'a> {
    table: &'a RecordTable,
    consts: &'a HitMissConstants,
    k: usize,
    scale: f64,
    counts: Vec<f64>,
    masses: Vec<f64>,
}

impl<'a> BatchAccumulator<'a> {
    fn new(table: &'a RecordTable, consts: &'a HitMissConstants, k: usize, batch_len: usize) -> Self {
        BatchAccumulator {
            table,
            consts,
            k,
            scale: table.n() as f64 / batch_len as f64,
            counts: vec![0.0; consts.width() * k],
            masses: vec![0.0; k],
        }
    }

    fn add_dense(&mut self, i: usize, row: &[f64]) {
        let (k, s) = (self.k, self.scale);
        for (m, &r) in self.masses.iter_mut().zip(row) {
            *m += s * r;
        }
        for (a, &v) in self.table.row(i).iter().enumerate() {
            let col = self.consts.column(a, v);
            for (c, &r) in self.counts[col * k..(col + 1) * k].iter_mut().zip(row) {
                *c += s * r;
            }
        }
    }

    fn add_sparse(&mut self, i: usize, row: &[(usize, f64)]) {
        let k = self.k;
        for &(cl, r) in row {
            let r = self.scale * r;
            self.masses[cl] += r;
            for (a, &v) in self.table.row(i).iter().enumerate() {
                self.counts[self.consts.column(a, v) * k + cl] += r;
            }
        }
    }

    /// Cluster-major counts and masses.
    fn finish(self) -> (Vec<f64>, Vec<f64>) {
        (transpose(&self.counts, self.consts.width(), self.k), self.masses)
    }
}

/// Batch estimate of the full-data soft counts from one row per batch
/// record: `(n / |B|) sum_{i in B} r_ik 1{x_il = d}`.
pub fn scaled_batch_counts(
    batch: &[usize],
    rows: &[SparseRow],
    table: &RecordTable,
    consts: &HitMissConstants,
    num_clusters: usize,
) -> SoftCounts {
    assert_eq!(batch.len(), rows.len(), "one row per batch record");
    let mut acc = BatchAccumulator::new(table, consts, num_clusters, batch.len());
    for (&i, row) in batch.iter().zip(rows) {
        acc.add_sparse(i, row);
    }
    let (counts, masses) = acc.finish();
    let mut out = SoftCounts::new(num_clusters, consts);
    out.blend_raw(&counts, &masses, 1.0);
    out
}

/// Global variational state blended across steps.
#[derive(Clone, Debug)]
pub struct SviState {
    pub counts: SoftCounts,
    pub sticks: StickState,
    /// Steps taken so far.
    pub steps: usize,
}

/// Frozen global quantities read by the local step.
struct LocalView {
    gamma: Vec<f64>,
    /// Add-one log ratios, value-major (`W × K`).
    ratios: Vec<f64>,
}

impl LocalView {
    fn logits(&self, x: &[u32], consts: &HitMissConstants, out: &mut [f64]) {
        let k = self.gamma.len();
        out.copy_from_slice(&self.gamma);
        for (a, &v) in x.iter().enumerate() {
            let col = consts.column(a, v);
            for (o, &t) in out.iter_mut().zip(&self.ratios[col * k..(col + 1) * k]) {
                *o += t;
            }
        }
    }
}

impl SviState {
    /// Global state implied by full responsibilities.
    pub fn from_responsibilities(
        table: &RecordTable,
        consts: &HitMissConstants,
        resp: &Responsibilities,
        lambda: f64,
        alpha: f64,
        fit: &FitConfig,
    ) -> Self {
        let counts = SoftCounts::from_responsibilities(table, resp.as_slice(), consts);
        let theta = lambda * table.n() as f64;
        let sticks = update_sticks(&resp.masses(), alpha, theta, fit.stick_convention);
        SviState {
            counts,
            sticks,
            steps: 0,
        }
    }

    fn view(&self, consts: &HitMissConstants) -> LocalView {
        let k = self.counts.num_clusters();
        LocalView {
            gamma: e_log_pi(&self.sticks),
            ratios: transpose(&self.counts.add_one_ratio_table(), k, consts.width()),
        }
    }

    /// Rows and their entropies.
    fn local(
        &self,
        records: &[usize],
        table: &RecordTable,
        consts: &HitMissConstants,
        top_v: Option<usize>,
    ) -> (LocalRows, Vec<f64>) {
        let view = self.view(consts);
        let k = view.gamma.len();
        match top_v {
            None => {
                let mut values = vec![0.0; records.len() * k];
                let entropy = values
                    .par_chunks_mut(k)
                    .zip(records.par_iter())
                    .map(|(row, &i)| {
                        view.logits(table.row(i), consts, row);
                        softmax_entropy(row)
                    })
                    .collect();
                (LocalRows::Dense { k, values }, entropy)
            }
            Some(v) => {
                let rows: Vec<SparseRow> = records
                    .par_iter()
                    .map_init(
                        || vec![0.0; k],
                        |logits, &i| {
                            view.logits(table.row(i), consts, logits);
                            top_v_from_logits(logits, v)
                        },
                    )
                    .collect();
                let entropy = rows.iter().map(|r| sparse_entropy(r)).collect();
                (LocalRows::Sparse(rows), entropy)
            }
        }
    }

    /// Local rows for `records` against the current (frozen) global state:
    /// `ln r_ik = gamma_k + sum_l ln f_soft(+x_il) - ln f_soft`, then top-V
    /// when configured.
    pub fn local_rows(
        &self,
        records: &[usize],
        table: &RecordTable,
        consts: &HitMissConstants,
        top_v: Option<usize>,
    ) -> Vec<SparseRow> {
        self.local(records, table, consts, top_v).0.into_sparse()
    }

    /// Hard assignment of every record against the current global state,
    /// lowest cluster on ties.
    fn argmax_labels(&self, table: &RecordTable, consts: &HitMissConstants) -> Vec<usize> {
        let view = self.view(consts);
        let k = view.gamma.len();
        (0..table.n())
            .into_par_iter()
            .map_init(
                || vec![0.0; k],
                |logits, i| {
                    view.logits(table.row(i), consts, logits);
                    crate::vi::argmax(logits)
                },
            )
            .collect()
    }
}

#[allow(clippy::too_many_arguments)]
fn step_impl(
    state: &mut SviState,
    batch: &[usize],
    table: &RecordTable,
    consts: &HitMissConstants,
    lambda: f64,
    alpha: f64,
    fit: &FitConfig,
    cfg: &SviConfig,
) -> Result<(LocalRows, Vec<f64>)> {
    if batch.is_empty() || batch.len() > table.n() {
        return Err(Error::InvalidParameter(format!(
            "batch of {} records from {}",
            batch.len(),
            table.n()
        )));
    }
    let k = state.sticks.num_components();
    let (rows, entropy) = state.local(batch, table, consts, cfg.top_v);
    let mut acc = BatchAccumulator::new(table, consts, k, batch.len());
    match &rows {
        LocalRows::Dense { values, .. } => {
            for (&i, row) in batch.iter().zip(values.chunks_exact(k)) {
                acc.add_dense(i, row);
            }
        }
        LocalRows::Sparse(sparse) => {
            for (&i, row) in batch.iter().zip(sparse) {
                acc.add_sparse(i, row);
            }
        }
    }
    let (counts, masses) = acc.finish();
    let theta = lambda * table.n() as f64;
    let stick_estimate = update_sticks(&masses, alpha, theta, fit.stick_convention);
    state.steps += 1;
    let rho = step_size(state.steps, cfg);
    state.counts.blend_raw(&counts, &masses, rho);
    state.sticks = state.sticks.blend(&stick_estimate, rho);
    Ok((rows, entropy))
}

/// One stochastic step on `batch`. Uses step `t = steps + 1` of the
/// schedule, blends counts and stick shapes, and returns the local rows.
#[allow(clippy::too_many_arguments)]
pub fn svi_step(
    state: &mut SviState,
    batch: &[usize],
    table: &RecordTable,
    consts: &HitMissConstants,
    lambda: f64,
    alpha: f64,
    fit: &FitConfig,
    cfg: &SviConfig,
) -> Result<Vec<SparseRow>> {
    step_impl(state, batch, table, consts, lambda, alpha, fit, cfg).map(|(rows, _)| rows.into_sparse())
}

/// Training-time responsibility storage (dense `n × K` or sparse rows)
/// with the entropy of every stored row.
struct Store {
    k: usize,
    dense: Option<Vec<f64>>,
    sparse: Vec<SparseRow>,
    entropy: Vec<f64>,
    entries: usize,
}

impl Store {
    fn new(init: Responsibilities, top_v: Option<usize>) -> Store {
        let (n, k) = (init.n(), init.num_clusters());
        match top_v {
            Some(v) => {
                let sparse: Vec<SparseRow> = (0..n).map(|i| top_v_sparsify(init.row(i), v)).collect();
                let entropy = sparse.iter().map(|r| sparse_entropy(r)).collect();
                let entries = sparse.iter().map(Vec::len).sum();
                Store {
                    k,
                    dense: None,
                    sparse,
                    entropy,
                    entries,
                }
            }
            None => Store {
                k,
                entropy: (0..n).map(|i| crate::vi::row_entropy(init.row(i))).collect(),
                dense: Some(init.into_values()),
                sparse: Vec::new(),
                entries: n * k,
            },
        }
    }

    fn put(&mut self, batch: &[usize], rows: LocalRows, entropy: Vec<f64>) {
        let k = self.k;
        for (&i, h) in batch.iter().zip(entropy) {
            self.entropy[i] = h;
        }
        match (rows, self.dense.as_mut()) {
            (LocalRows::Dense { values, .. }, Some(dense)) => {
                for (&i, row) in batch.iter().zip(values.chunks_exact(k)) {
                    dense[i * k..(i + 1) * k].copy_from_slice(row);
                }
            }
            (LocalRows::Sparse(rows), None) => {
                for (&i, row) in batch.iter().zip(rows) {
                    self.entries = self.entries + row.len() - self.sparse[i].len();
                    self.sparse[i] = row;
                }
            }
            _ => unreachable!("store and local rows share the top-V setting"),
        }
    }

    /// `sum_ik r_ik gamma_k`.
    fn weighted(&self, gamma: &[f64]) -> f64 {
        match &self.dense {
            Some(dense) => dense
                .chunks_exact(self.k)
                .map(|row| row.iter().zip(gamma).map(|(r, g)| r * g).sum::<f64>())
                .sum(),
            None => self
                .sparse
                .iter()
                .map(|row| row.iter().map(|&(c, r)| r * gamma[c]).sum::<f64>())
                .sum(),
        }
    }
}

/// SVI-specific fields of a [`FitResult`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SviSummary {
    pub batch_size: usize,
    pub kappa: f64,
    pub t0: f64,
    pub top_v: Option<usize>,
    pub epochs: usize,
    pub steps: usize,
    /// Largest number of stored responsibility entries during training.
    pub peak_responsibility_entries: usize,
}

/// Bound estimate from the global state and the stored rows.
fn estimate_elbo(
    state: &SviState,
    store: &Store,
    data_constant: f64,
    lambda: f64,
    alpha: f64,
    n: usize,
    fit: &FitConfig,
) -> f64 {
    let gamma = e_log_pi(&state.sticks);
    data_constant
        + state.counts.total_log_f_soft()
        + store.weighted(&gamma)
        + store.entropy.iter().sum::<f64>()
        + stick_elbo_terms(&state.sticks, alpha, lambda * n as f64, fit.stick_convention)
}

/// Runs `epochs` passes of shuffled mini-batches, then assigns every record
/// by argmax against the final global state. Hyperparameters stay at their
/// configured values. The trace holds one bound estimate per epoch.
pub fn fit_svi(table: &RecordTable, schema: &Schema, fit: &FitConfig, cfg: &SviConfig, seed: u64) -> Result<FitResult> {
    let start = Instant::now();
    let n = table.n();
    let fit_checked = FitConfig {
        hyper_update: false,
        ..fit.clone()
    };
    fit_checked.validate(n)?;
    cfg.validate(n)?;
    schema.check_table(table)?;
    let consts = HitMissConstants::new(schema)?;
    let k = fit.clusters_for(n);
    let (lambda, alpha) = (fit.lambda, fit.alpha);

    let init = initial_responsibilities(table, k, fit.init, fit.init_noise, seed);
    let mut state = SviState::from_responsibilities(table, &consts, &init, lambda, alpha, fit);
    let mut store = Store::new(init, cfg.top_v);
    let mut peak = store.entries;
    let data_constant = consts.data_constant(table);

    let mut rng = rng::seeded(derive_seed(seed, 1));
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (rows, entropy) = step_impl(&mut state, batch, table, &consts, lambda, alpha, fit, cfg)?;
            store.put(batch, rows, entropy);
            peak = peak.max(store.entries);
        }
        let elbo = estimate_elbo(&state, &store, data_constant, lambda, alpha, n, fit);
        if !elbo.is_finite() {
            return Err(Error::Numerical(format!("SVI bound estimate became {elbo}")));
        }
        trace.push(elbo);
    }

    let estimate = Partition::from_labels(&state.argmax_labels(table, &consts))?;
    let mut result = FitResult::new(
        Engine::Svi,
        trace,
        lambda,
        alpha,
        k,
        true,
        &estimate,
        start.elapsed().as_secs_f64(),
        seed,
    );
    result.iterations = state.steps;
    result.svi = Some(SviSummary {
        batch_size: cfg.batch_size,
        kappa: cfg.kappa,
        t0: cfg.t0,
        top_v: cfg.top_v,
        epochs: cfg.epochs,
        steps: state.steps,
        peak_responsibility_entries: peak,
    });
    Ok(result)
}
