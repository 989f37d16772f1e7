//! Truncated stick-breaking posterior `q(v_k) = Beta(a_k, b_k)`.
//!
//! With `K` components there are `K - 1` sticks; the last component takes
//! whatever mass the sticks leave over.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special_math::{ln_beta, psi};

/// Which multiple of `alpha` enters the prior second shape of stick `k`
/// (1-based): `theta + k alpha` or `theta + (k - 1) alpha`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StickConvention {
    #[default]
    Index,
    PreviousIndex,
}

impl StickConvention {
    /// Multiplier of `alpha` for the zero-based stick `j`.
    #[inline]
    pub fn multiplier(self, j: usize) -> f64 {
        match self {
            StickConvention::Index => (j + 1) as f64,
            StickConvention::PreviousIndex => j as f64,
        }
    }
}

/// Prior shapes `(1 - alpha, theta + m_j alpha)` of zero-based stick `j`.
#[inline]
pub fn stick_prior(j: usize, alpha: f64, theta: f64, convention: StickConvention) -> (f64, f64) {
    (1.0 - alpha, theta + convention.multiplier(j) * alpha)
}

/// Shapes of the `K - 1` sticks with cached log expectations. Zero sticks
/// (a single component) is allowed.
#[derive(Clone, Debug, PartialEq)]
pub struct StickState {
    a: Vec<f64>,
    b: Vec<f64>,
    e_log_v: Vec<f64>,
    e_log_1mv: Vec<f64>,
}

impl StickState {
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::InvalidParameter(format!(
                "stick shapes need equal lengths (got {} and {})",
                a.len(),
                b.len()
            )));
        }
        if a.iter().chain(&b).any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::InvalidParameter("stick shapes must be positive".into()));
        }
        Ok(Self::from_shapes(a, b))
    }

    fn from_shapes(a: Vec<f64>, b: Vec<f64>) -> Self {
        let mut e_log_v = Vec::with_capacity(a.len());
        let mut e_log_1mv = Vec::with_capacity(a.len());
        for (&x, &y) in a.iter().zip(&b) {
            let total = psi(x + y);
            e_log_v.push(psi(x) - total);
            e_log_1mv.push(psi(y) - total);
        }
        StickState {
            a,
            b,
            e_log_v,
            e_log_1mv,
        }
    }

    /// Posterior equal to the prior for `num_components` components.
    pub fn prior(num_components: usize, alpha: f64, theta: f64, convention: StickConvention) -> Self {
        update_sticks(&vec![0.0; num_components], alpha, theta, convention)
    }

    pub fn num_components(&self) -> usize {
        self.a.len() + 1
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    /// `E[ln v_k]` per stick.
    pub fn e_log_v(&self) -> &[f64] {
        &self.e_log_v
    }

    /// `E[ln(1 - v_k)]` per stick.
    pub fn e_log_1mv(&self) -> &[f64] {
        &self.e_log_1mv
    }

    /// `(1 - rho) self + rho other` in shape coordinates.
    pub fn blend(&self, other: &StickState, rho: f64) -> StickState {
        assert_eq!(self.a.len(), other.a.len(), "blend shape");
        let mix = |x: &[f64], y: &[f64]| -> Vec<f64> {
            x.iter().zip(y).map(|(p, q)| (1.0 - rho) * p + rho * q).collect()
        };
        Self::from_shapes(mix(&self.a, &other.a), mix(&self.b, &other.b))
    }
}

/// Optimal sticks given per-component masses `N_k`:
/// `a_k = 1 - alpha + N_k`, `b_k = theta + m_k alpha + sum_{j > k} N_j`.
pub fn update_sticks(masses: &[f64], alpha: f64, theta: f64, convention: StickConvention) -> StickState {
    assert!(!masses.is_empty(), "need at least one component");
    let sticks = masses.len() - 1;
    let mut a = vec![0.0; sticks];
    let mut b = vec![0.0; sticks];
    let mut tail = masses[sticks];
    for j in (0..sticks).rev() {
        let (a0, b0) = stick_prior(j, alpha, theta, convention);
        a[j] = a0 + masses[j];
        b[j] = b0 + tail;
        tail += masses[j];
    }
    StickState::from_shapes(a, b)
}

/// `E[ln pi_k]`: own stick plus the leftover of all earlier sticks; the last
/// component uses the leftover only.
pub fn e_log_pi(sticks: &StickState) -> Vec<f64> {
    let mut out = Vec::with_capacity(sticks.num_components());
    let mut leftover = 0.0;
    for (lv, l1mv) in sticks.e_log_v.iter().zip(&sticks.e_log_1mv) {
        out.push(lv + leftover);
        leftover += l1mv;
    }
    out.push(leftover);
    out
}

/// `E[ln p(v)] - E[ln q(v)]` summed over sticks, i.e. minus the total
/// Kullback-Leibler divergence from prior to posterior.
pub fn stick_elbo_terms(sticks: &StickState, alpha: f64, theta: f64, convention: StickConvention) -> f64 {
    (0..sticks.a.len())
        .map(|j| {
            let (a0, b0) = stick_prior(j, alpha, theta, convention);
            let (a, b) = (sticks.a[j], sticks.b[j]);
            let (lv, l1mv) = (sticks.e_log_v[j], sticks.e_log_1mv[j]);
            let log_prior = -ln_beta(a0, b0) + (a0 - 1.0) * lv + (b0 - 1.0) * l1mv;
            let log_q = -ln_beta(a, b) + (a - 1.0) * lv + (b - 1.0) * l1mv;
            log_prior - log_q
        })
        .sum()
}
