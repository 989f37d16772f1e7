//! Scalar kernels shared by the partition, likelihood and inference code.
//!
//! Everything here is pure. The checked entry points validate their domain
//! and return [`Error::Domain`]; the `psi`/`psi1` variants skip validation
//! for use in inner loops where arguments are positive by construction.

use crate::error::{Error, Result};

/// A quantity stored on the natural-log scale.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, serde::Serialize, serde::Deserialize)]
pub struct LogValue(f64);

impl LogValue {
    pub const ZERO_PROBABILITY: LogValue = LogValue(f64::NEG_INFINITY);

    pub fn new(value: f64) -> Self {
        LogValue(value)
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn exp(self) -> f64 {
        self.0.exp()
    }
}

impl From<LogValue> for f64 {
    fn from(v: LogValue) -> f64 {
        v.0
    }
}

const DIGAMMA_SHIFT: f64 = 6.0;

// B_{2k} / (2k) for k = 1..7
const DIGAMMA_COEFFS: [f64; 7] = [
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
];

// B_{2k} for k = 1..7
const TRIGAMMA_COEFFS: [f64; 7] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
];

/// Digamma without domain checks. `x` must be positive and finite.
#[inline]
pub fn psi(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < DIGAMMA_SHIFT {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv2 = 1.0 / (x * x);
    // Horner in 1/x^2 over the Bernoulli tail
    let mut series = 0.0;
    for &c in DIGAMMA_COEFFS.iter().rev() {
        series = series * inv2 + c;
    }
    acc + x.ln() - 0.5 / x - series * inv2
}

/// Trigamma without domain checks. `x` must be positive and finite.
#[inline]
pub fn psi1(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < DIGAMMA_SHIFT {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let mut series = 0.0;
    for &c in TRIGAMMA_COEFFS.iter().rev() {
        series = series * inv2 + c;
    }
    acc + inv + 0.5 * inv2 + series * inv2 * inv
}

fn check_positive(function: &'static str, name: &str, x: f64) -> Result<()> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(Error::domain(
            function,
            format!("{name} must be positive and finite, got {x}"),
        ))
    }
}

/// ψ(x), the logarithmic derivative of the gamma function.
pub fn digamma(x: f64) -> Result<f64> {
    check_positive("digamma", "x", x)?;
    Ok(psi(x))
}

/// ψ′(x).
pub fn trigamma(x: f64) -> Result<f64> {
    check_positive("trigamma", "x", x)?;
    Ok(psi1(x))
}

/// ln Γ(x) for x > 0 (unchecked).
#[inline]
pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

/// ln B(a, b) = ln Γ(a) + ln Γ(b) − ln Γ(a + b).
pub fn log_beta(a: f64, b: f64) -> Result<f64> {
    check_positive("log_beta", "a", a)?;
    check_positive("log_beta", "b", b)?;
    Ok(ln_beta(a, b))
}

#[inline]
pub(crate) fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Max-shifted ln Σ exp(v).
///
/// Returns −∞ when every element is −∞.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::domain("log_sum_exp", "empty sequence"));
    }
    Ok(lse(values))
}

#[inline]
pub(crate) fn lse(values: &[f64]) -> f64 {
    if values.len() == 1 {
        return values[0];
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// ln(exp(a) + exp(b)).
#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

const RISING_DIRECT_LIMIT: u64 = 256;

/// ln (a)_(u), the log of the u-th rising factorial a(a+1)…(a+u−1).
pub fn rising_factorial_log(a: f64, u: u64) -> Result<f64> {
    check_positive("rising_factorial_log", "a", a)?;
    Ok(ln_rising(a, u))
}

#[inline]
pub(crate) fn ln_rising(a: f64, u: u64) -> f64 {
    if u == 0 {
        0.0
    } else if u <= RISING_DIRECT_LIMIT {
        (0..u).map(|i| (a + i as f64).ln()).sum()
    } else {
        ln_gamma(a + u as f64) - ln_gamma(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // 50-digit reference values (mpmath digamma / polygamma(1, .)).
    const REFERENCE: [(f64, f64, f64); 13] = [
        (0.001, -1000.5755719318103005, 1000001.642533195869),
        (0.01, -100.5608854578686745, 10001.62121352831322),
        (0.5, -1.9635100260214234794, 4.9348022005446793094),
        (1.0, -0.57721566490153286061, 1.6449340668482264365),
        (1.5, 0.036489973978576520559, 0.93480220054467930942),
        (2.0, 0.42278433509846713939, 0.64493406684822643647),
        (3.7, 1.1671535393615113859, 0.3100378576700383191),
        (5.999, 1.7059363290792256641, 0.18135575138433859239),
        (6.0, 1.7061176684318004727, 0.18132295573711532536),
        (6.001, 1.7062989749946425043, 0.18129017191772063288),
        (10.0, 2.2517525890667211076, 0.10516633568168574612),
        (123.456, 4.8118293238289853873, 0.0081329458342781980101),
        (1e6, 13.815510057964190771, 1.0000005000001666667e-6),
    ];

    #[test]
    fn digamma_matches_reference() {
        for &(x, want, _) in &REFERENCE {
            let got = digamma(x).unwrap();
            assert!((got - want).abs() <= 1e-12, "psi({x}) = {got}, want {want}");
        }
    }

    #[test]
    fn trigamma_matches_reference() {
        for &(x, _, want) in &REFERENCE {
            let got = trigamma(x).unwrap();
            // absolute contract, plus relative for the huge value near 0
            let tol = 1e-10_f64.max(want.abs() * 1e-14);
            assert!((got - want).abs() <= tol, "psi1({x}) = {got}, want {want}");
        }
    }

    #[test]
    fn documented_values() {
        assert!((digamma(1.0).unwrap() + 0.5772156649).abs() < 1e-10);
        assert!((digamma(2.0).unwrap() - digamma(1.0).unwrap() - 1.0).abs() < 1e-14);
        let half = -0.577_215_664_901_532_9 - 2.0 * std::f64::consts::LN_2;
        assert!((digamma(0.5).unwrap() - half).abs() < 1e-13);
        let pi2_6 = std::f64::consts::PI.powi(2) / 6.0;
        assert!((trigamma(1.0).unwrap() - pi2_6).abs() < 1e-12);
        assert!((trigamma(3.0).unwrap() - trigamma(4.0).unwrap() - 1.0 / 9.0).abs() < 1e-14);
        assert!((trigamma(10.0).unwrap() - 0.1051663357).abs() < 1e-10);
    }

    #[test]
    fn domain_errors() {
        for bad in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(digamma(bad).is_err());
            assert!(trigamma(bad).is_err());
            assert!(log_beta(bad, 1.0).is_err());
            assert!(log_beta(1.0, bad).is_err());
            assert!(rising_factorial_log(bad, 3).is_err());
        }
        assert!(log_sum_exp(&[]).is_err());
    }

    #[test]
    fn recurrence_and_positivity_on_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            // log-uniform over (1e-3, 1e6)
            let x = 10f64.powf(rng.random_range(-3.0..6.0));
            let lhs = psi(x + 1.0) - psi(x) - 1.0 / x;
            assert!(lhs.abs() <= 1e-12 * (1.0 + 1.0 / x), "x = {x}, residual {lhs}");
            assert!(psi1(x) > 0.0);
        }
    }

    #[test]
    fn log_beta_values() {
        assert_eq!(log_beta(1.0, 1.0).unwrap(), 0.0);
        let want = (1.0f64 / 12.0).ln();
        assert!(((log_beta(2.0, 3.0).unwrap() - want) / want).abs() < 1e-12);
        assert_eq!(log_beta(0.3, 7.2).unwrap(), log_beta(7.2, 0.3).unwrap());
        let want = 0.51828183794768253964;
        assert!(((log_beta(0.3, 7.2).unwrap() - want) / want).abs() < 1e-12);
        let want = 6.900271629687954954;
        assert!(((log_beta(1e-3, 1e3).unwrap() - want) / want).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_cases() {
        assert_eq!(log_sum_exp(&[-1000.0]).unwrap(), -1000.0);
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - 0.6931471806).abs() < 1e-10);
        let got = log_sum_exp(&[1000.0, 1000.0, 1000.0]).unwrap();
        assert!((got - (1000.0 + 3f64.ln())).abs() < 1e-12);
        assert_eq!(
            log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap(),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn log_sum_exp_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let len = rng.random_range(1..20);
            let v: Vec<f64> = (0..len).map(|_| rng.random_range(-50.0..50.0)).collect();
            let c = rng.random_range(-500.0..500.0);
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let a = log_sum_exp(&shifted).unwrap();
            let b = log_sum_exp(&v).unwrap() + c;
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn log_add_exp_agrees_with_lse() {
        for (a, b) in [(0.0, 0.0), (-3.0, 2.0), (700.0, 699.0), (f64::NEG_INFINITY, 1.5)] {
            let want = lse(&[a, b]);
            assert!((log_add_exp(a, b) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rising_factorial_cases() {
        assert_eq!(rising_factorial_log(0.7, 0).unwrap(), 0.0);
        assert!((rising_factorial_log(1.0, 4).unwrap() - 24f64.ln()).abs() < 1e-14);
        let want = (0.5f64 * 1.5 * 2.5).ln();
        assert!((rising_factorial_log(0.5, 3).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn rising_factorial_telescopes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let a = 10f64.powf(rng.random_range(-2.0..5.0));
            let u = rng.random_range(0..2000u64);
            let v = rng.random_range(0..2000u64);
            let whole = ln_rising(a, u + v);
            let parts = ln_rising(a, u) + ln_rising(a + u as f64, v);
            assert!(
                (whole - parts).abs() <= 1e-12 * whole.abs().max(1.0),
                "a={a} u={u} v={v}: {whole} vs {parts}"
            );
        }
    }

    #[test]
    fn log_value_round_trip() {
        for v in [-700.0, -3.2, 0.0, 1.0, 700.0] {
            let lv = LogValue::new(v);
            assert!(((lv.exp().ln() - v) / v.abs().max(1.0)).abs() < 1e-15);
        }
        assert_eq!(LogValue::ZERO_PROBABILITY.exp(), 0.0);
    }
}
