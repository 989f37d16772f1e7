//! Collapsed VI: entity values integrated out, soft-count surrogate bound.

use std::time::Instant;

use super::hyper::{update_hyperparams, HyperContext};
use super::sticks::{e_log_pi, stick_elbo_terms, update_sticks, StickState};
use super::{has_converged, initial_responsibilities, normalize_log_row, row_entropy, Engine, FitConfig, FitResult,
    Responsibilities};
use crate::error::{Error, Result};
use crate::likelihood::{HitMissConstants, SoftCounts};
use crate::records::{RecordTable, Schema};

/// Responsibilities, their soft counts, sticks and hyperparameters.
#[derive(Clone, Debug)]
pub struct CollapsedState {
    pub resp: Responsibilities,
    pub counts: SoftCounts,
    pub sticks: StickState,
    pub lambda: f64,
    pub alpha: f64,
}

impl CollapsedState {
    /// Counts and optimal sticks for the given responsibilities.
    pub fn new(
        table: &RecordTable,
        consts: &HitMissConstants,
        resp: Responsibilities,
        lambda: f64,
        alpha: f64,
        cfg: &FitConfig,
    ) -> Self {
        let counts = SoftCounts::from_responsibilities(table, resp.as_slice(), consts);
        let theta = lambda * table.n() as f64;
        let sticks = update_sticks(&resp.masses(), alpha, theta, cfg.stick_convention);
        CollapsedState {
            resp,
            counts,
            sticks,
            lambda,
            alpha,
        }
    }
}

/// The soft-count bound: data constant, `sum ln f_soft`, expected log
/// weights, stick terms and assignment entropy, plus the hyperprior
/// densities when hyperparameters are being learned.
pub fn surrogate_elbo(state: &CollapsedState, table: &RecordTable, consts: &HitMissConstants, cfg: &FitConfig) -> f64 {
    let theta = state.lambda * table.n() as f64;
    let gamma = e_log_pi(&state.sticks);
    let mut total = consts.data_constant(table)
        + state.counts.total_log_f_soft()
        + state.resp.weighted_sum(&gamma)
        + stick_elbo_terms(&state.sticks, state.alpha, theta, cfg.stick_convention)
        + state.resp.entropy();
    if cfg.hyper_update {
        total += cfg.priors.log_density(state.lambda, state.alpha);
    }
    total
}

/// One pass over the records in index order, then sticks, then (if
/// enabled) hyperparameters. Returns the surrogate bound afterwards.
pub fn collapsed_sweep(
    state: &mut CollapsedState,
    table: &RecordTable,
    consts: &HitMissConstants,
    cfg: &FitConfig,
) -> Result<f64> {
    let n = table.n();
    let k = state.resp.num_clusters();
    let num_attrs = table.num_attributes();
    let gamma = e_log_pi(&state.sticks);
    let mut logits = vec![0.0; k];

    if cfg.exclude_self {
        let mut old = vec![0.0; k];
        let mut before = vec![0.0; k];
        for i in 0..n {
            let row = table.row(i);
            old.copy_from_slice(state.resp.row(i));
            if cfg.monotone_guard {
                for (cl, b) in before.iter_mut().enumerate() {
                    *b = cluster_log_f(&state.counts, cl, num_attrs);
                }
            }
            for (cl, &r) in old.iter().enumerate() {
                state.counts.add_record(cl, row, -r);
            }
            for (cl, logit) in logits.iter_mut().enumerate() {
                let mut v = gamma[cl];
                for (a, &x) in row.iter().enumerate() {
                    v += state.counts.add_one_ratio(cl, a, x);
                }
                *logit = v;
            }
            normalize_log_row(&mut logits);
            for (cl, &r) in logits.iter().enumerate() {
                state.counts.add_record(cl, row, r);
            }
            if cfg.monotone_guard {
                let mut gain = row_entropy(&logits) - row_entropy(&old);
                for cl in 0..k {
                    gain += (logits[cl] - old[cl]) * gamma[cl];
                    gain += cluster_log_f(&state.counts, cl, num_attrs) - before[cl];
                }
                if gain < 0.0 {
                    for (cl, (&r_new, &r_old)) in logits.iter().zip(&old).enumerate() {
                        state.counts.add_record(cl, row, -r_new);
                        state.counts.add_record(cl, row, r_old);
                    }
                    continue;
                }
            }
            state.resp.row_mut(i).copy_from_slice(&logits);
        }
    } else {
        let ratios = state.counts.add_one_ratio_table();
        let w = consts.width();
        for i in 0..n {
            let row = table.row(i);
            let out = state.resp.row_mut(i);
            for (cl, o) in out.iter_mut().enumerate() {
                *o = gamma[cl]
                    + (0..num_attrs)
                        .map(|a| ratios[cl * w + consts.column(a, row[a])])
                        .sum::<f64>();
            }
            normalize_log_row(out);
        }
    }
    // rebuild from scratch so rounding does not accumulate across sweeps
    state.counts = SoftCounts::from_responsibilities(table, state.resp.as_slice(), consts);

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

    let elbo = surrogate_elbo(state, table, consts, cfg);
    if !elbo.is_finite() {
        for cl in 0..k {
            for a in 0..num_attrs {
                if !state.counts.log_f_soft(cl, a).is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite soft likelihood at cluster {}, attribute {}",
                        cl + 1,
                        a + 1
                    )));
                }
            }
        }
        return Err(Error::Numerical(format!("surrogate bound became {elbo}")));
    }
    Ok(elbo)
}

fn cluster_log_f(counts: &SoftCounts, cl: usize, num_attrs: usize) -> f64 {
    (0..num_attrs).map(|a| counts.log_f_soft(cl, a)).sum()
}

pub fn fit_collapsed_vi(table: &RecordTable, schema: &Schema, cfg: &FitConfig, seed: u64) -> Result<FitResult> {
    fit_collapsed_vi_state(table, schema, cfg, seed).map(|(result, _)| result)
}

/// [`fit_collapsed_vi`] that also returns the final state.
pub fn fit_collapsed_vi_state(
    table: &RecordTable,
    schema: &Schema,
    cfg: &FitConfig,
    seed: u64,
) -> Result<(FitResult, CollapsedState)> {
    let start = Instant::now();
    let n = table.n();
    cfg.validate(n)?;
    schema.check_table(table)?;
    let consts = HitMissConstants::new(schema)?;
    let k = cfg.clusters_for(n);

    let resp = initial_responsibilities(table, k, cfg.init, cfg.init_noise, seed);
    let mut state = CollapsedState::new(table, &consts, resp, cfg.lambda, cfg.alpha, cfg);
    let mut trace = Vec::new();
    let mut converged = false;
    while trace.len() < cfg.max_iters {
        trace.push(collapsed_sweep(&mut state, table, &consts, cfg)?);
        if has_converged(&trace, cfg.elbo_rel_tol) {
            converged = true;
            break;
        }
    }
    let estimate = state.resp.point_estimate();
    let result = FitResult::new(
        Engine::Collapsed,
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
