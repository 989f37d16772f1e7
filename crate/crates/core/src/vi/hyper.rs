//! Updates of the prior strength `lambda` and discount `alpha`.
//!
//! Both carry Beta hyperpriors. The objective is every term of the bound
//! that depends on them: the stick prior expectations (including the Beta
//! normalizer) plus the two hyperprior log densities.

use serde::{Deserialize, Serialize};

use super::sticks::{stick_prior, StickConvention, StickState};
use crate::error::{Error, Result};
use crate::special_math::{ln_beta, psi, psi1};

/// Smallest and largest values either hyperparameter may take.
pub const HYPER_BOUNDS: (f64, f64) = (1e-4, 1.0 - 1e-4);

const MAX_HALVINGS: usize = 40;
const FALLBACK_STEP: f64 = 0.01;

/// Beta hyperprior shapes for `lambda` and `alpha`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperPriors {
    pub lambda_a: f64,
    pub lambda_b: f64,
    pub alpha_a: f64,
    pub alpha_b: f64,
}

impl Default for HyperPriors {
    fn default() -> Self {
        HyperPriors {
            lambda_a: 2.0,
            lambda_b: 2.0,
            alpha_a: 2.0,
            alpha_b: 2.0,
        }
    }
}

impl HyperPriors {
    pub fn validate(&self) -> Result<()> {
        let shapes = [self.lambda_a, self.lambda_b, self.alpha_a, self.alpha_b];
        if shapes.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidParameter("hyperprior shapes must be positive".into()));
        }
        Ok(())
    }

    /// `ln Beta(lambda) + ln Beta(alpha)` under the hyperpriors.
    pub fn log_density(&self, lambda: f64, alpha: f64) -> f64 {
        let ln_pdf = |x: f64, a: f64, b: f64| (a - 1.0) * x.ln() + (b - 1.0) * (-x).ln_1p() - ln_beta(a, b);
        ln_pdf(lambda, self.lambda_a, self.lambda_b) + ln_pdf(alpha, self.alpha_a, self.alpha_b)
    }
}

/// Inputs shared by the objective and its derivatives.
#[derive(Clone, Copy, Debug)]
pub struct HyperContext<'a> {
    pub sticks: &'a StickState,
    pub n: usize,
    pub priors: HyperPriors,
    pub convention: StickConvention,
}

impl HyperContext<'_> {
    /// Stick prior terms at `(lambda, alpha)` plus the hyperprior densities.
    pub fn objective(&self, lambda: f64, alpha: f64) -> f64 {
        let theta = lambda * self.n as f64;
        let lv = self.sticks.e_log_v();
        let l1mv = self.sticks.e_log_1mv();
        let sticks: f64 = (0..lv.len())
            .map(|j| {
                let (a0, b0) = stick_prior(j, alpha, theta, self.convention);
                -ln_beta(a0, b0) + (a0 - 1.0) * lv[j] + (b0 - 1.0) * l1mv[j]
            })
            .sum();
        sticks + self.priors.log_density(lambda, alpha)
    }

    /// `(d/d lambda, d/d alpha)` of [`Self::objective`].
    pub fn gradient(&self, lambda: f64, alpha: f64) -> (f64, f64) {
        let n = self.n as f64;
        let theta = lambda * n;
        let lv = self.sticks.e_log_v();
        let l1mv = self.sticks.e_log_1mv();
        let (mut g_lambda, mut g_alpha) = (0.0, 0.0);
        let psi_discount = psi(1.0 - alpha);
        for j in 0..lv.len() {
            let m = self.convention.multiplier(j);
            let b0 = theta + m * alpha;
            let psi_b0 = psi(b0);
            let psi_sum = psi(1.0 - alpha + b0);
            g_lambda += n * (psi_sum - psi_b0 + l1mv[j]);
            g_alpha += -lv[j] + m * l1mv[j] + psi_discount - m * psi_b0 + (m - 1.0) * psi_sum;
        }
        let p = &self.priors;
        g_lambda += (p.lambda_a - 1.0) / lambda - (p.lambda_b - 1.0) / (1.0 - lambda);
        g_alpha += (p.alpha_a - 1.0) / alpha - (p.alpha_b - 1.0) / (1.0 - alpha);
        (g_lambda, g_alpha)
    }

    /// Diagonal of the Hessian of [`Self::objective`].
    pub fn hessian_diagonal(&self, lambda: f64, alpha: f64) -> (f64, f64) {
        let n = self.n as f64;
        let theta = lambda * n;
        let (mut h_lambda, mut h_alpha) = (0.0, 0.0);
        let tri_discount = psi1(1.0 - alpha);
        for j in 0..self.sticks.e_log_v().len() {
            let m = self.convention.multiplier(j);
            let b0 = theta + m * alpha;
            let tri_b0 = psi1(b0);
            let tri_sum = psi1(1.0 - alpha + b0);
            h_lambda += n * n * (tri_sum - tri_b0);
            h_alpha += -tri_discount - m * m * tri_b0 + (m - 1.0) * (m - 1.0) * tri_sum;
        }
        let p = &self.priors;
        h_lambda -= (p.lambda_a - 1.0) / (lambda * lambda) + (p.lambda_b - 1.0) / ((1.0 - lambda) * (1.0 - lambda));
        h_alpha -= (p.alpha_a - 1.0) / (alpha * alpha) + (p.alpha_b - 1.0) / ((1.0 - alpha) * (1.0 - alpha));
        (h_lambda, h_alpha)
    }
}

/// The expectation-only gradient
/// `(n sum_k E[ln(1 - v_k)], sum_k E[ln v_k] - k E[ln(1 - v_k)])`
/// over the `K - 1` sticks, without normalizer or hyperprior terms.
pub fn expectation_gradient(sticks: &StickState, n: usize) -> (f64, f64) {
    let lv = sticks.e_log_v();
    let l1mv = sticks.e_log_1mv();
    let g_lambda = n as f64 * l1mv.iter().sum::<f64>();
    let g_alpha = (0..lv.len()).map(|j| lv[j] - (j + 1) as f64 * l1mv[j]).sum();
    (g_lambda, g_alpha)
}

/// Outcome of one hyperparameter update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HyperStep {
    pub lambda: f64,
    pub alpha: f64,
    /// Objective gain, never negative.
    pub gain: f64,
}

/// One damped diagonal-Newton step on `(lambda, alpha)`, clamped to
/// [`HYPER_BOUNDS`] and halved until the objective does not decrease.
/// Directions with non-negative curvature fall back to a short gradient
/// step.
pub fn update_hyperparams(ctx: &HyperContext<'_>, lambda: f64, alpha: f64, damping: f64) -> Result<HyperStep> {
    let (lo, hi) = HYPER_BOUNDS;
    if !(lo..=hi).contains(&lambda) || !(lo..=hi).contains(&alpha) {
        return Err(Error::InvalidParameter(format!(
            "hyperparameter updates need lambda and alpha in [{lo}, {hi}] (got {lambda}, {alpha})"
        )));
    }
    let (g_l, g_a) = ctx.gradient(lambda, alpha);
    let (h_l, h_a) = ctx.hessian_diagonal(lambda, alpha);
    if !(g_l.is_finite() && g_a.is_finite() && h_l.is_finite() && h_a.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite hyperparameter gradient at lambda = {lambda}, alpha = {alpha}"
        )));
    }
    let direction = |g: f64, h: f64| {
        if h < 0.0 {
            -damping * g / h
        } else {
            FALLBACK_STEP * g.signum()
        }
    };
    let (mut d_l, mut d_a) = (direction(g_l, h_l), direction(g_a, h_a));
    let base = ctx.objective(lambda, alpha);
    for _ in 0..MAX_HALVINGS {
        let new_l = (lambda + d_l).clamp(lo, hi);
        let new_a = (alpha + d_a).clamp(lo, hi);
        let value = ctx.objective(new_l, new_a);
        if value >= base {
            return Ok(HyperStep {
                lambda: new_l,
                alpha: new_a,
                gain: value - base,
            });
        }
        d_l *= 0.5;
        d_a *= 0.5;
    }
    Ok(HyperStep {
        lambda,
        alpha,
        gain: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn random_sticks(rng: &mut rng::Rng, count: usize) -> StickState {
        let a = (0..count).map(|_| 0.2 + 20.0 * rng.random::<f64>()).collect();
        let b = (0..count).map(|_| 0.2 + 200.0 * rng.random::<f64>()).collect();
        StickState::new(a, b).unwrap()
    }

    #[test]
    fn flat_expectation_gradient() {
        let n = 37;
        let sticks = StickState::new(vec![1.0; 9], vec![1.0; 9]).unwrap();
        let (g_l, _) = expectation_gradient(&sticks, n);
        assert!((g_l + (n * 9) as f64).abs() < 1e-10);
    }

    #[test]
    fn expectation_gradient_sign_for_long_tails() {
        let sticks = StickState::new(vec![1.0; 4], vec![1e4; 4]).unwrap();
        assert!(expectation_gradient(&sticks, 10).0 < 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rng::seeded(21);
        for convention in [StickConvention::Index, StickConvention::PreviousIndex] {
            for _ in 0..20 {
                let sticks = random_sticks(&mut rng, 30);
                let ctx = HyperContext {
                    sticks: &sticks,
                    n: 200,
                    priors: HyperPriors::default(),
                    convention,
                };
                let lambda = 0.05 + 0.9 * rng.random::<f64>();
                let alpha = 0.05 + 0.9 * rng.random::<f64>();
                let (g_l, g_a) = ctx.gradient(lambda, alpha);
                let h = 1e-6;
                let fd_l = (ctx.objective(lambda + h, alpha) - ctx.objective(lambda - h, alpha)) / (2.0 * h);
                let fd_a = (ctx.objective(lambda, alpha + h) - ctx.objective(lambda, alpha - h)) / (2.0 * h);
                assert!((g_l - fd_l).abs() <= 1e-5 * fd_l.abs().max(1.0), "{g_l} vs {fd_l}");
                assert!((g_a - fd_a).abs() <= 1e-5 * fd_a.abs().max(1.0), "{g_a} vs {fd_a}");

                let (h_l, h_a) = ctx.hessian_diagonal(lambda, alpha);
                let fd_hl = (ctx.gradient(lambda + h, alpha).0 - ctx.gradient(lambda - h, alpha).0) / (2.0 * h);
                let fd_ha = (ctx.gradient(lambda, alpha + h).1 - ctx.gradient(lambda, alpha - h).1) / (2.0 * h);
                assert!((h_l - fd_hl).abs() <= 1e-4 * fd_hl.abs().max(1.0), "{h_l} vs {fd_hl}");
                assert!((h_a - fd_ha).abs() <= 1e-4 * fd_ha.abs().max(1.0), "{h_a} vs {fd_ha}");
            }
        }
    }

    #[test]
    fn step_never_decreases_objective_and_stays_in_bounds() {
        let mut rng = rng::seeded(3);
        for _ in 0..50 {
            let sticks = random_sticks(&mut rng, 10);
            let ctx = HyperContext {
                sticks: &sticks,
                n: 50,
                priors: HyperPriors::default(),
                convention: StickConvention::Index,
            };
            let (lambda, alpha) = (rng.random_range(0.01..0.99), rng.random_range(0.01..0.99));
            let step = update_hyperparams(&ctx, lambda, alpha, 0.5).unwrap();
            assert!(step.gain >= 0.0);
            assert!(ctx.objective(step.lambda, step.alpha) >= ctx.objective(lambda, alpha));
            for v in [step.lambda, step.alpha] {
                assert!((HYPER_BOUNDS.0..=HYPER_BOUNDS.1).contains(&v));
            }
        }
    }

    #[test]
    fn repeated_steps_reach_a_stationary_point() {
        let mut rng = rng::seeded(8);
        let sticks = random_sticks(&mut rng, 20);
        let ctx = HyperContext {
            sticks: &sticks,
            n: 100,
            priors: HyperPriors::default(),
            convention: StickConvention::Index,
        };
        let (mut l, mut a) = (0.5, 0.25);
        for _ in 0..200 {
            let s = update_hyperparams(&ctx, l, a, 0.5).unwrap();
            (l, a) = (s.lambda, s.alpha);
        }
        let (g_l, g_a) = ctx.gradient(l, a);
        let interior = |x: f64| x > HYPER_BOUNDS.0 && x < HYPER_BOUNDS.1;
        if interior(l) {
            assert!(g_l.abs() < 1e-3, "{g_l}");
        }
        if interior(a) {
            assert!(g_a.abs() < 1e-3, "{g_a}");
        }
    }

    #[test]
    fn out_of_range_start_is_rejected() {
        let sticks = StickState::new(vec![1.0], vec![1.0]).unwrap();
        let ctx = HyperContext {
            sticks: &sticks,
            n: 10,
            priors: HyperPriors::default(),
            convention: StickConvention::Index,
        };
        assert!(update_hyperparams(&ctx, 1.5, 0.2, 0.5).is_err());
    }
}
