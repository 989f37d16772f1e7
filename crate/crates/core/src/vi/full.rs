//! Full mean-field VI with explicit categorical posteriors over the latent
//! entity values.

use std::time::Instant;

use rayon::prelude::*;

use super::hyper::{update_hyperparams, HyperContext};
use super::sticks::{e_log_pi, stick_elbo_terms, update_sticks, StickState};
use super::{has_converged, initial_responsibilities, normalize_log_row, row_entropy, Engine, FitConfig, FitResult,
    Responsibilities};
use crate::error::{Error, Result};
use crate::likelihood::HitMissConstants;
use crate::records::{RecordTable, Schema};
use crate::special_math::lse;

/// `phi[k][l][d] = q(y_kl = d)`, stored row-major `K × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityPosterior {
    num_clusters: usize,
    width: usize,
    values: Vec<f64>,
}

impl EntityPosterior {
    pub fn num_clusters(&self) -> usize {
        self.num_clusters
    }

    /// Posterior over values of attribute `attr` in cluster `k`.
    pub fn probs(&self, k: usize, attr: usize, consts: &HitMissConstants) -> &[f64] {
        let base = k * self.width;
        let cols = consts.columns(attr);
        &self.values[base + cols.start..base + cols.end]
    }

    #[inline]
    fn at(&self, k: usize, col: usize) -> f64 {
        self.values[k * self.width + col]
    }

    /// `-sum phi ln phi + sum phi ln theta`, i.e. `E[ln p(y)] - E[ln q(y)]`.
    fn prior_minus_entropy(&self, consts: &HitMissConstants) -> f64 {
        self.values
            .chunks_exact(self.width)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, &p)| p > 0.0)
                    .map(|(col, &p)| p * (consts.ln_theta(col) - p.ln()))
                    .sum::<f64>()
            })
            .sum()
    }
}

/// `ln phi_kld = ln theta_ld + n_kld ln(1 + c_ld) + const` with
/// `n_kld = sum_i r_ik 1{x_il = d}`, normalized per (k, l).
pub fn update_entities_full(
    table: &RecordTable,
    resp: &Responsibilities,
    consts: &HitMissConstants,
) -> EntityPosterior {
    let (k, w) = (resp.num_clusters(), consts.width());
    let mut values = vec![0.0; k * w];
    for (i, row) in table.rows().enumerate() {
        for (cl, &r) in resp.row(i).iter().enumerate() {
            if r == 0.0 {
                continue;
            }
            for (a, &x) in row.iter().enumerate() {
                values[cl * w + consts.column(a, x)] += r;
            }
        }
    }
    for row in values.chunks_exact_mut(w) {
        for a in 0..consts.num_attributes() {
            let cols = consts.columns(a);
            let block = &mut row[cols.clone()];
            for (v, col) in block.iter_mut().zip(cols) {
                *v = consts.ln_theta(col) + *v * consts.log1p_c(col);
            }
            let z = lse(block);
            block.iter_mut().for_each(|v| *v = (*v - z).exp());
        }
    }
    EntityPosterior {
        num_clusters: k,
        width: w,
        values,
    }
}

/// `ln r_ik = gamma_k + sum_l phi_{k,l,x_il} ln(1 + c_{l,x_il}) + const`.
pub fn update_responsibilities_full(
    table: &RecordTable,
    phi: &EntityPosterior,
    sticks: &StickState,
    consts: &HitMissConstants,
) -> Responsibilities {
    let gamma = e_log_pi(sticks);
    let k = gamma.len();
    let mut resp = Responsibilities::uniform(table.n(), k);
    resp.as_mut_slice()
        .par_chunks_mut(k)
        .enumerate()
        .for_each(|(i, out)| {
            let row = table.row(i);
            for (cl, o) in out.iter_mut().enumerate() {
                *o = gamma[cl]
                    + row
                        .iter()
                        .enumerate()
                        .map(|(a, &x)| {
                            let col = consts.column(a, x);
                            phi.at(cl, col) * consts.log1p_c(col)
                        })
                        .sum::<f64>();
            }
            normalize_log_row(out);
        });
    resp
}

/// State of the full mean-field engine.
#[derive(Clone, Debug)]
pub struct FullState {
    pub resp: Responsibilities,
    pub phi: EntityPosterior,
    pub sticks: StickState,
    pub lambda: f64,
    pub alpha: f64,
}

impl FullState {
    /// Optimal entity posteriors and sticks for the given responsibilities.
    pub fn new(
        table: &RecordTable,
        consts: &HitMissConstants,
        resp: Responsibilities,
        lambda: f64,
        alpha: f64,
        cfg: &FitConfig,
    ) -> Self {
        let sticks = update_sticks(&resp.masses(), alpha, lambda * table.n() as f64, cfg.stick_convention);
        let phi = update_entities_full(table, &resp, consts);
        FullState {
            resp,
            phi,
            sticks,
            lambda,
            alpha,
        }
    }
}

/// Entity posteriors, then responsibilities, then sticks, then (if
/// enabled) hyperparameters. Returns the bound afterwards.
pub fn full_sweep(state: &mut FullState, table: &RecordTable, consts: &HitMissConstants, cfg: &FitConfig) -> Result<f64> {
    let n = table.n();
    state.phi = update_entities_full(table, &state.resp, consts);
    state.resp = update_responsibilities_full(table, &state.phi, &state.sticks, consts);
    let theta = state.lambda * n as f64;
    state.sticks = update_sticks(&state.resp.masses(), state.alpha, theta, cfg.stick_convention);
    if cfg.hyper_update {
        let ctx = HyperContext {
            sticks: &state.sticks,
            n,
            priors: cfg.priors,
            convention: cfg.stick_convention,
        };
        match update_hyperparams(&ctx, state.lambda, state.alpha, cfg.newton_damping) {
            Ok(step) => (state.lambda, state.alpha) = (step.lambda, step.alpha),
            Err(e) if e.is_numerical() => {}
            Err(e) => return Err(e),
        }
    }
    let elbo = full_elbo(state, table, consts, cfg);
    if !elbo.is_finite() {
        return Err(Error::Numerical(format!("full-VI objective became {elbo}")));
    }
    Ok(elbo)
}

/// The full evidence bound, plus the hyperprior densities when
/// hyperparameters are being learned.
pub fn full_elbo(state: &FullState, table: &RecordTable, consts: &HitMissConstants, cfg: &FitConfig) -> f64 {
    let n = table.n();
    let k = state.resp.num_clusters();
    let mut likelihood = consts.data_constant(table);
    for (i, row) in table.rows().enumerate() {
        let r = state.resp.row(i);
        for cl in 0..k {
            if r[cl] == 0.0 {
                continue;
            }
            let inner: f64 = row
                .iter()
                .enumerate()
                .map(|(a, &x)| {
                    let col = consts.column(a, x);
                    state.phi.at(cl, col) * consts.log1p_c(col)
                })
                .sum();
            likelihood += r[cl] * inner;
        }
    }
    let theta = state.lambda * n as f64;
    let gamma = e_log_pi(&state.sticks);
    let mut total = likelihood
        + state.phi.prior_minus_entropy(consts)
        + state.resp.weighted_sum(&gamma)
        + stick_elbo_terms(&state.sticks, state.alpha, theta, cfg.stick_convention)
        + row_entropy(state.resp.as_slice());
    if cfg.hyper_update {
        total += cfg.priors.log_density(state.lambda, state.alpha);
    }
    total
}

pub fn fit_full_vi(table: &RecordTable, schema: &Schema, cfg: &FitConfig, seed: u64) -> Result<FitResult> {
    fit_full_vi_state(table, schema, cfg, seed).map(|(result, _)| result)
}

/// [`fit_full_vi`] that also returns the final variational state.
pub fn fit_full_vi_state(
    table: &RecordTable,
    schema: &Schema,
    cfg: &FitConfig,
    seed: u64,
) -> Result<(FitResult, FullState)> {
    let start = Instant::now();
    let n = table.n();
    cfg.validate(n)?;
    schema.check_table(table)?;
    let consts = HitMissConstants::new(schema)?;
    let k = cfg.clusters_for(n);

    let resp = initial_responsibilities(table, k, cfg.init, cfg.init_noise, seed);
    let mut state = FullState::new(table, &consts, resp, cfg.lambda, cfg.alpha, cfg);
    let mut trace = Vec::new();
    let mut converged = false;
    while trace.len() < cfg.max_iters {
        let elbo = full_sweep(&mut state, table, &consts, cfg).map_err(|e| match e {
            Error::Numerical(msg) => Error::Numerical(format!("{msg} at iteration {}", trace.len() + 1)),
            other => other,
        })?;
        trace.push(elbo);
        if has_converged(&trace, cfg.elbo_rel_tol) {
            converged = true;
            break;
        }
    }
    let estimate = state.resp.point_estimate();
    let result = FitResult::new(
        Engine::Full,
        trace,
        state.lambda,
        state.alpha,
        k,
        converged,
        &estimate,
        start.elapsed().as_secs_f64(),
        seed,
    );
    Ok((result, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::records::generate_synthetic;
    use crate::vi::sticks::StickConvention;

    fn one_attr(theta: Vec<f64>, beta: f64) -> (Schema, HitMissConstants) {
        let schema = Schema::new(vec!["a".into()], vec![theta], vec![beta]).unwrap();
        let consts = HitMissConstants::new(&schema).unwrap();
        (schema, consts)
    }

    #[test]
    fn empty_cluster_entities_follow_the_prior() {
        let (_, consts) = one_attr(vec![0.1, 0.2, 0.7], 0.1);
        let table = RecordTable::new(vec![3], vec![0, 2]).unwrap();
        let resp = Responsibilities::new(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let phi = update_entities_full(&table, &resp, &consts);
        for (p, t) in phi.probs(1, 0, &consts).iter().zip([0.1, 0.2, 0.7]) {
            assert!((p - t).abs() < 1e-15);
        }
    }

    #[test]
    fn entities_match_exact_conditional() {
        let theta = vec![0.1, 0.2, 0.3, 0.4];
        let beta = 0.2;
        let (_, consts) = one_attr(theta.clone(), beta);
        let values: Vec<usize> = vec![0, 0, 2, 3, 0];
        let table = RecordTable::new(vec![4], values.iter().map(|&v| v as u32).collect()).unwrap();
        let resp = Responsibilities::new(5, 1, vec![1.0; 5]).unwrap();
        let phi = update_entities_full(&table, &resp, &consts);
        let joint: Vec<f64> = (0..4)
            .map(|y| {
                theta[y]
                    * values
                        .iter()
                        .map(|&x| (1.0 - beta) * f64::from(u8::from(x == y)) + beta * theta[x])
                        .product::<f64>()
            })
            .collect();
        let z: f64 = joint.iter().sum();
        for (p, j) in phi.probs(0, 0, &consts).iter().zip(&joint) {
            assert!((p - j / z).abs() < 1e-10);
        }
    }

    #[test]
    fn single_record_concentrates_entity() {
        let (_, consts) = one_attr(vec![0.25; 4], 0.001);
        let table = RecordTable::new(vec![4], vec![2]).unwrap();
        let resp = Responsibilities::new(1, 1, vec![1.0]).unwrap();
        let phi = update_entities_full(&table, &resp, &consts);
        assert!(phi.probs(0, 0, &consts)[2] > 0.99);
    }

    #[test]
    fn symmetric_inputs_give_uniform_rows() {
        let (_, consts) = one_attr(vec![0.5, 0.5], 0.1);
        let table = RecordTable::new(vec![2], vec![0, 1]).unwrap();
        let phi = EntityPosterior {
            num_clusters: 3,
            width: 2,
            values: vec![0.5; 6],
        };
        // equal expected log weights: a_k = 1, b_k = K - k
        let sticks = StickState::new(vec![1.0, 1.0], vec![2.0, 1.0]).unwrap();
        let gamma = e_log_pi(&sticks);
        assert!((gamma[0] - gamma[1]).abs() < 1e-12 && (gamma[1] - gamma[2]).abs() < 1e-12);
        let resp = update_responsibilities_full(&table, &phi, &sticks, &consts);
        for v in resp.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn responsibility_update_maximizes_over_the_row() {
        // 3 records, K = 2, L = 1, D = 2: grid search one row of the bound
        let (_, consts) = one_attr(vec![0.3, 0.7], 0.2);
        let table = RecordTable::new(vec![2], vec![0, 1, 0]).unwrap();
        let cfg = FitConfig {
            hyper_update: false,
            ..FitConfig::default()
        };
        let phi = EntityPosterior {
            num_clusters: 2,
            width: 2,
            values: vec![0.8, 0.2, 0.35, 0.65],
        };
        let sticks = StickState::new(vec![1.3], vec![2.1]).unwrap();
        let updated = update_responsibilities_full(&table, &phi, &sticks, &consts);
        let base = updated.as_slice().to_vec();
        let objective = |r0: f64| {
            let mut values = base.clone();
            values[0] = r0;
            values[1] = 1.0 - r0;
            let state = FullState {
                resp: Responsibilities::new(3, 2, values).unwrap(),
                phi: phi.clone(),
                sticks: sticks.clone(),
                lambda: 0.5,
                alpha: 0.25,
            };
            full_elbo(&state, &table, &consts, &cfg)
        };
        let best = (0..=100_000)
            .map(|s| s as f64 / 100_000.0)
            .max_by(|a, b| objective(*a).partial_cmp(&objective(*b)).unwrap())
            .unwrap();
        assert!((best - base[0]).abs() < 1e-4, "{best} vs {}", base[0]);
    }

    #[test]
    fn elbo_is_monotone_and_fit_is_deterministic() {
        let schema = Schema::uniform(3, 6, 0.05).unwrap();
        let (table, _) = generate_synthetic(120, &schema, 40, 11).unwrap();
        let cfg = FitConfig {
            num_clusters: Some(30),
            max_iters: 40,
            ..FitConfig::default()
        };
        let (a, state) = fit_full_vi_state(&table, &schema, &cfg, 5).unwrap();
        for w in a.elbo_trace.windows(2) {
            assert!(w[1] - w[0] >= -1e-8 * w[0].abs(), "{} -> {}", w[0], w[1]);
        }
        let total: f64 = state.resp.masses().iter().sum();
        assert!((total - 120.0).abs() < 1e-9);
        let b = fit_full_vi(&table, &schema, &cfg, 5).unwrap();
        assert_eq!(a.without_timing(), b.without_timing());
    }

    #[test]
    fn previous_index_convention_runs() {
        let schema = Schema::uniform(2, 4, 0.05).unwrap();
        let (table, _) = generate_synthetic(40, &schema, 10, 2).unwrap();
        let cfg = FitConfig {
            num_clusters: Some(10),
            max_iters: 5,
            stick_convention: StickConvention::PreviousIndex,
            ..FitConfig::default()
        };
        assert!(fit_full_vi(&table, &schema, &cfg, 1).is_ok());
    }
}
