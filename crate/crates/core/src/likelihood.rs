//! Collapsed hit-miss likelihood.
//!
//! With the latent entity value of cluster `k` marginalized out, attribute
//! `l` contributes (up to the per-record constant `ln(beta theta_x)`)
//!
//! ```text
//! f = 1 - sum_{d in U} theta_d + sum_{d in U} theta_d (1 + c_d)^{n_d},   c_d = (1 - beta) / (beta theta_d)
//! ```
//!
//! where `U` holds the values seen in the cluster. Replacing the integer
//! counts by responsibility-weighted soft counts gives the surrogate
//! `f_soft`. Everything is evaluated in the log domain.

use crate::error::{Error, Result};
use crate::records::{RecordTable, Schema};
use crate::special_math::lse;

/// Per-value constants of the hit-miss model, laid out attribute by
/// attribute over one flat column index.
#[derive(Clone, Debug)]
pub struct HitMissConstants {
    offsets: Vec<usize>,
    beta: Vec<f64>,
    theta: Vec<f64>,
    ln_theta: Vec<f64>,
    c: Vec<f64>,
    log1p_c: Vec<f64>,
    ln_beta_theta: Vec<f64>,
}

impl HitMissConstants {
    pub fn new(schema: &Schema) -> Result<Self> {
        let mut offsets = Vec::with_capacity(schema.num_attributes() + 1);
        let mut constants = HitMissConstants {
            offsets: Vec::new(),
            beta: schema.betas().to_vec(),
            theta: Vec::new(),
            ln_theta: Vec::new(),
            c: Vec::new(),
            log1p_c: Vec::new(),
            ln_beta_theta: Vec::new(),
        };
        offsets.push(0);
        for attr in 0..schema.num_attributes() {
            let beta = schema.beta(attr);
            if beta <= 0.0 {
                return Err(Error::DegenerateLikelihood { attribute: attr, beta });
            }
            for &t in schema.theta(attr) {
                let c = (1.0 - beta) / (beta * t);
                constants.theta.push(t);
                constants.ln_theta.push(t.ln());
                constants.c.push(c);
                constants.log1p_c.push(c.ln_1p());
                constants.ln_beta_theta.push((beta * t).ln());
            }
            offsets.push(constants.theta.len());
        }
        constants.offsets = offsets;
        Ok(constants)
    }

    pub fn num_attributes(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Total number of (attribute, value) columns.
    pub fn width(&self) -> usize {
        self.theta.len()
    }

    pub fn domain_size(&self, attr: usize) -> usize {
        self.offsets[attr + 1] - self.offsets[attr]
    }

    /// Flat column index of value `d` of attribute `attr`.
    #[inline]
    pub fn column(&self, attr: usize, d: u32) -> usize {
        self.offsets[attr] + d as usize
    }

    #[inline]
    pub fn columns(&self, attr: usize) -> std::ops::Range<usize> {
        self.offsets[attr]..self.offsets[attr + 1]
    }

    pub fn beta(&self, attr: usize) -> f64 {
        self.beta[attr]
    }

    #[inline]
    pub fn theta(&self, col: usize) -> f64 {
        self.theta[col]
    }

    #[inline]
    pub fn ln_theta(&self, col: usize) -> f64 {
        self.ln_theta[col]
    }

    #[inline]
    pub fn c(&self, col: usize) -> f64 {
        self.c[col]
    }

    #[inline]
    pub fn log1p_c(&self, col: usize) -> f64 {
        self.log1p_c[col]
    }

    /// `ln(beta_l theta_ld)`, the per-record constant pulled out of `f`.
    #[inline]
    pub fn ln_beta_theta(&self, col: usize) -> f64 {
        self.ln_beta_theta[col]
    }

    /// `sum_i sum_l ln(beta_l theta_{l, x_il})` over a whole table.
    pub fn data_constant(&self, table: &RecordTable) -> f64 {
        table
            .rows()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(a, &x)| self.ln_beta_theta(self.column(a, x)))
                    .sum::<f64>()
            })
            .sum()
    }
}

fn log_f_terms(counts: impl Iterator<Item = f64>, attr: usize, consts: &HitMissConstants) -> f64 {
    let mut terms = Vec::new();
    // sum theta over unseen values; equals 1 - sum_U theta without cancellation
    let mut miss = 0.0;
    for (col, n) in consts.columns(attr).zip(counts) {
        if n > 0.0 {
            terms.push(consts.ln_theta(col) + n * consts.log1p_c(col));
        } else {
            miss += consts.theta(col);
        }
    }
    if terms.is_empty() {
        return 0.0;
    }
    if miss > 0.0 {
        terms.push(miss.ln());
    }
    lse(&terms)
}

/// `ln f` for one cluster and attribute given integer counts per value.
pub fn log_f_exact(counts: &[u64], attr: usize, consts: &HitMissConstants) -> f64 {
    assert_eq!(counts.len(), consts.domain_size(attr), "count vector length");
    log_f_terms(counts.iter().map(|&n| n as f64), attr, consts)
}

/// `ln f_soft` for one cluster and attribute given soft counts per value.
pub fn log_f_soft(counts: &[f64], attr: usize, consts: &HitMissConstants) -> f64 {
    assert_eq!(counts.len(), consts.domain_size(attr), "count vector length");
    debug_assert!(counts.iter().all(|&n| n >= 0.0));
    log_f_terms(counts.iter().copied(), attr, consts)
}

const SCALE_CEILING: f64 = 1e100;

/// Soft counts `n[k][l][d]` with per-cluster masses and a cached,
/// rescaled `f_soft` accumulator per (cluster, attribute).
///
/// For each (k, l) the cache keeps a log scale `m` and scaled terms
/// `u_d = theta_d (1 + c_d)^{n_d} e^{-m}` with their sum `s`, so that
/// `ln f_soft = m + ln s`.
#[derive(Clone, Debug)]
pub struct SoftCounts {
    num_clusters: usize,
    offsets: Vec<usize>,
    theta: Vec<f64>,
    ln_theta: Vec<f64>,
    c: Vec<f64>,
    log1p_c: Vec<f64>,
    counts: Vec<f64>,
    scaled: Vec<f64>,
    log_scale: Vec<f64>,
    sums: Vec<f64>,
    mass: Vec<f64>,
}

impl SoftCounts {
    /// All-zero counts for `num_clusters` clusters.
    pub fn new(num_clusters: usize, consts: &HitMissConstants) -> Self {
        let w = consts.width();
        let l = consts.num_attributes();
        let mut scaled = Vec::with_capacity(num_clusters * w);
        for _ in 0..num_clusters {
            scaled.extend_from_slice(&consts.theta);
        }
        SoftCounts {
            num_clusters,
            offsets: consts.offsets.clone(),
            theta: consts.theta.clone(),
            ln_theta: consts.ln_theta.clone(),
            c: consts.c.clone(),
            log1p_c: consts.log1p_c.clone(),
            counts: vec![0.0; num_clusters * w],
            scaled,
            log_scale: vec![0.0; num_clusters * l],
            sums: (0..num_clusters)
                .flat_map(|_| (0..l).map(|a| consts.theta[consts.columns(a)].iter().sum::<f64>()))
                .collect(),
            mass: vec![0.0; num_clusters],
        }
    }

    /// Counts accumulated from a dense row-major `n × K` responsibility
    /// matrix.
    pub fn from_responsibilities(table: &RecordTable, resp: &[f64], consts: &HitMissConstants) -> Self {
        let n = table.n();
        assert!(n > 0 && resp.len() % n == 0, "responsibility shape");
        let k = resp.len() / n;
        let mut sc = SoftCounts::new(k, consts);
        let w = sc.width();
        for (i, row) in table.rows().enumerate() {
            for (cl, &r) in resp[i * k..(i + 1) * k].iter().enumerate() {
                if r == 0.0 {
                    continue;
                }
                sc.mass[cl] += r;
                for (a, &x) in row.iter().enumerate() {
                    sc.counts[cl * w + sc.offsets[a] + x as usize] += r;
                }
            }
        }
        sc.refresh();
        sc
    }

    pub fn num_clusters(&self) -> usize {
        self.num_clusters
    }

    pub fn num_attributes(&self) -> usize {
        self.offsets.len() - 1
    }

    #[inline]
    fn width(&self) -> usize {
        self.theta.len()
    }

    #[inline]
    fn slot(&self, k: usize, attr: usize) -> usize {
        k * self.num_attributes() + attr
    }

    /// Soft counts of cluster `k`, attribute `attr`, indexed by value.
    pub fn counts(&self, k: usize, attr: usize) -> &[f64] {
        let base = k * self.width();
        &self.counts[base + self.offsets[attr]..base + self.offsets[attr + 1]]
    }

    #[inline]
    pub fn count(&self, k: usize, attr: usize, d: u32) -> f64 {
        self.counts[k * self.width() + self.offsets[attr] + d as usize]
    }

    /// All counts, row-major `K × width`.
    pub fn raw_counts(&self) -> &[f64] {
        &self.counts
    }

    /// Per-cluster mass `N_k`.
    pub fn masses(&self) -> &[f64] {
        &self.mass
    }

    #[inline]
    pub fn log_f_soft(&self, k: usize, attr: usize) -> f64 {
        let s = self.slot(k, attr);
        self.log_scale[s] + self.sums[s].ln()
    }

    /// `sum_{k,l} ln f_soft`.
    pub fn total_log_f_soft(&self) -> f64 {
        (0..self.num_clusters)
            .flat_map(|k| (0..self.num_attributes()).map(move |a| (k, a)))
            .map(|(k, a)| self.log_f_soft(k, a))
            .sum()
    }

    /// Change in `ln f_soft(k, attr)` if the count of value `d` moved by
    /// `delta`. Requires `count + delta >= 0`.
    pub fn log_f_soft_ratio(&self, k: usize, attr: usize, d: u32, delta: f64) -> f64 {
        if delta == 0.0 {
            return 0.0;
        }
        let col = self.offsets[attr] + d as usize;
        let idx = k * self.width() + col;
        assert!(
            self.counts[idx] + delta >= -1e-9,
            "soft count would become negative"
        );
        let s = self.sums[self.slot(k, attr)];
        let u = self.scaled[idx];
        if delta > 0.0 {
            (u * (delta * self.log1p_c[col]).exp_m1() / s).ln_1p()
        } else {
            // sum the other terms directly to avoid cancelling against u
            let base = k * self.width();
            let rest: f64 = (self.offsets[attr]..self.offsets[attr + 1])
                .filter(|&j| j != col)
                .map(|j| self.scaled[base + j])
                .sum();
            let new_n = (self.counts[idx] + delta).max(0.0);
            let new_u = self.scaled_term(col, new_n, self.log_scale[self.slot(k, attr)]);
            (rest + new_u).ln() - s.ln()
        }
    }

    /// Fast path of [`Self::log_f_soft_ratio`] for `delta = 1`.
    #[inline]
    pub fn add_one_ratio(&self, k: usize, attr: usize, d: u32) -> f64 {
        let col = self.offsets[attr] + d as usize;
        let u = self.scaled[k * self.width() + col];
        (self.c[col] * u / self.sums[self.slot(k, attr)]).ln_1p()
    }

    /// `add_one_ratio` for every (k, column), row-major `K × width`.
    pub fn add_one_ratio_table(&self) -> Vec<f64> {
        let w = self.width();
        let mut out = vec![0.0; self.num_clusters * w];
        for k in 0..self.num_clusters {
            for a in 0..self.num_attributes() {
                let inv_s = 1.0 / self.sums[self.slot(k, a)];
                for col in self.offsets[a]..self.offsets[a + 1] {
                    out[k * w + col] = (self.c[col] * self.scaled[k * w + col] * inv_s).ln_1p();
                }
            }
        }
        out
    }

    #[inline]
    fn scaled_term(&self, col: usize, n: f64, log_scale: f64) -> f64 {
        (self.ln_theta[col] + n * self.log1p_c[col] - log_scale).exp()
    }

    /// Moves one count by `delta` without touching the cluster mass.
    pub fn shift_count(&mut self, k: usize, attr: usize, d: u32, delta: f64) {
        if delta == 0.0 {
            return;
        }
        let col = self.offsets[attr] + d as usize;
        let idx = k * self.width() + col;
        let slot = self.slot(k, attr);
        let old_n = self.counts[idx];
        let mut new_n = old_n + delta;
        if new_n < 0.0 {
            assert!(new_n > -1e-9, "soft count would become negative");
            new_n = 0.0;
        }
        self.counts[idx] = new_n;
        let old_u = self.scaled[idx];
        let new_u = if new_n == 0.0 {
            self.scaled_term(col, 0.0, self.log_scale[slot])
        } else {
            old_u * ((new_n - old_n) * self.log1p_c[col]).exp()
        };
        self.scaled[idx] = new_u;
        let old_s = self.sums[slot];
        let new_s = old_s - old_u + new_u;
        if new_s < 0.5 * old_s || !new_s.is_finite() || new_s > SCALE_CEILING {
            self.rescale_slot(k, attr);
        } else {
            self.sums[slot] = new_s;
        }
    }

    /// Adds `weight` times a record's indicator row to cluster `k`.
    pub fn add_record(&mut self, k: usize, row: &[u32], weight: f64) {
        if weight == 0.0 {
            return;
        }
        self.mass[k] += weight;
        if self.mass[k] < 0.0 {
            self.mass[k] = 0.0;
        }
        for (a, &x) in row.iter().enumerate() {
            self.shift_count(k, a, x, weight);
        }
    }

    /// Recomputes the scale and scaled terms of one (k, l) from the counts.
    fn rescale_slot(&mut self, k: usize, attr: usize) {
        let base = k * self.width();
        let slot = self.slot(k, attr);
        let cols = self.offsets[attr]..self.offsets[attr + 1];
        let m = cols
            .clone()
            .map(|col| self.ln_theta[col] + self.counts[base + col] * self.log1p_c[col])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for col in cols {
            let u = self.scaled_term(col, self.counts[base + col], m);
            self.scaled[base + col] = u;
            s += u;
        }
        self.log_scale[slot] = m;
        self.sums[slot] = s;
    }

    /// Rebuilds every cached accumulator from the stored counts.
    pub fn refresh(&mut self) {
        for c in self.counts.iter_mut() {
            if *c < 0.0 {
                *c = 0.0;
            }
        }
        for m in self.mass.iter_mut() {
            if *m < 0.0 {
                *m = 0.0;
            }
        }
        for k in 0..self.num_clusters {
            for a in 0..self.num_attributes() {
                self.rescale_slot(k, a);
            }
        }
    }

    /// `self <- (1 - rho) self + rho other`, then refresh.
    pub fn blend(&mut self, other: &SoftCounts, rho: f64) {
        self.blend_raw(&other.counts, &other.mass, rho);
    }

    /// [`Self::blend`] against bare `K × width` counts and `K` masses.
    pub fn blend_raw(&mut self, counts: &[f64], masses: &[f64], rho: f64) {
        assert_eq!(self.counts.len(), counts.len(), "blend shape");
        assert_eq!(self.mass.len(), masses.len(), "blend shape");
        let keep = 1.0 - rho;
        for (a, b) in self.counts.iter_mut().zip(counts) {
            *a = keep * *a + rho * b;
        }
        for (a, b) in self.mass.iter_mut().zip(masses) {
            *a = keep * *a + rho * b;
        }
        self.refresh();
    }

    /// Multiplies every count and mass by `factor`, then refreshes.
    pub fn scale(&mut self, factor: f64) {
        self.counts.iter_mut().for_each(|c| *c *= factor);
        self.mass.iter_mut().for_each(|m| *m *= factor);
        self.refresh();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn consts(theta: Vec<f64>, beta: f64) -> HitMissConstants {
        let schema = Schema::new(vec!["a".into()], vec![theta], vec![beta]).unwrap();
        HitMissConstants::new(&schema).unwrap()
    }

    /// Direct marginalization over the latent entity value.
    fn brute_force_log_f(counts: &[u64], theta: &[f64], beta: f64) -> f64 {
        let records: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(d, &n)| std::iter::repeat_n(d, n as usize))
            .collect();
        let marginal: f64 = (0..theta.len())
            .map(|y| {
                theta[y]
                    * records
                        .iter()
                        .map(|&x| (1.0 - beta) * f64::from(u8::from(x == y)) + beta * theta[x])
                        .product::<f64>()
            })
            .sum();
        marginal.ln() - records.iter().map(|&x| (beta * theta[x]).ln()).sum::<f64>()
    }

    #[test]
    fn zero_distortion_is_rejected() {
        let schema = Schema::new(vec!["a".into()], vec![vec![0.5, 0.5]], vec![0.0]).unwrap();
        assert!(matches!(
            HitMissConstants::new(&schema),
            Err(Error::DegenerateLikelihood { attribute: 0, .. })
        ));
    }

    #[test]
    fn empty_and_singleton_clusters() {
        let k = consts(vec![0.1, 0.2, 0.3, 0.4], 0.05);
        assert_eq!(log_f_exact(&[0, 0, 0, 0], 0, &k), 0.0);
        assert_eq!(log_f_soft(&[0.0; 4], 0, &k), 0.0);
        for d in 0..4 {
            let mut n = [0u64; 4];
            n[d] = 1;
            assert!((log_f_exact(&n, 0, &k) - (1.0f64 / 0.05).ln()).abs() < 1e-13);
        }
    }

    #[test]
    fn exact_matches_brute_force() {
        let theta = vec![0.1, 0.2, 0.3, 0.4];
        for beta in [0.01, 0.3, 0.9] {
            let k = consts(theta.clone(), beta);
            for a in 0..=3u64 {
                for b in 0..=3 - a {
                    for c in 0..=3 - a - b {
                        for d in 0..=3 - a - b - c {
                            let n = [a, b, c, d];
                            let want = brute_force_log_f(&n, &theta, beta);
                            let got = log_f_exact(&n, 0, &k);
                            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{n:?}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn large_counts_stay_finite() {
        let k = consts(vec![0.001, 0.999], 1e-4);
        let v = log_f_exact(&[100_000, 3], 0, &k);
        assert!(v.is_finite() && v > 1e5);
        let all = log_f_exact(&[5, 5], 0, &k);
        assert!(all.is_finite());
    }

    #[test]
    fn soft_is_monotone_in_each_count() {
        let k = consts(vec![0.25; 4], 0.1);
        let mut n = vec![0.3, 0.0, 1.7, 0.2];
        let mut prev = log_f_soft(&n, 0, &k);
        for step in 0..20 {
            n[step % 4] += 0.05;
            let next = log_f_soft(&n, 0, &k);
            assert!(next > prev);
            prev = next;
        }
    }

    fn fresh_log_f(sc: &SoftCounts, k: usize, a: usize, consts: &HitMissConstants) -> f64 {
        log_f_soft(sc.counts(k, a), a, consts)
    }

    fn random_setup(seed: u64) -> (HitMissConstants, SoftCounts, rng::Rng) {
        let schema = Schema::new(
            vec!["a".into(), "b".into()],
            vec![vec![0.1, 0.6, 0.3], vec![0.05, 0.05, 0.4, 0.5]],
            vec![0.02, 0.2],
        )
        .unwrap();
        let consts = HitMissConstants::new(&schema).unwrap();
        let sc = SoftCounts::new(3, &consts);
        (consts, sc, rng::seeded(seed))
    }

    #[test]
    fn ratio_matches_recomputation() {
        let (consts, mut sc, mut rng) = random_setup(5);
        for _ in 0..1000 {
            let (k, a) = (rng.random_range(0..3), rng.random_range(0..2));
            let d = rng.random_range(0..consts.domain_size(a)) as u32;
            sc.shift_count(k, a, d, rng.random::<f64>() * 3.0);
            let (k, a) = (rng.random_range(0..3), rng.random_range(0..2));
            let d = rng.random_range(0..consts.domain_size(a)) as u32;
            let cur = sc.count(k, a, d);
            let delta = rng.random_range(-cur..3.0);
            let before = fresh_log_f(&sc, k, a, &consts);
            let mut moved = sc.counts(k, a).to_vec();
            moved[d as usize] += delta;
            let after = log_f_soft(&moved, a, &consts);
            let got = sc.log_f_soft_ratio(k, a, d, delta);
            assert!((got - (after - before)).abs() < 1e-9, "{got} vs {}", after - before);
        }
        assert_eq!(sc.log_f_soft_ratio(0, 0, 0, 0.0), 0.0);
    }

    #[test]
    fn add_one_from_zero() {
        let (consts, mut sc, _) = random_setup(0);
        sc.shift_count(1, 1, 3, 0.7);
        let col = consts.column(1, 2);
        let s = sc.log_f_soft(1, 1).exp();
        let want = (s + consts.theta(col) * consts.c(col)).ln() - s.ln();
        assert!((sc.add_one_ratio(1, 1, 2) - want).abs() < 1e-13);
        assert!((sc.log_f_soft_ratio(1, 1, 2, 1.0) - want).abs() < 1e-13);
        let table = sc.add_one_ratio_table();
        assert!((table[consts.width() + col] - sc.add_one_ratio(1, 1, 2)).abs() < 1e-15);
    }

    #[test]
    fn cache_drift_is_bounded() {
        let (consts, mut sc, mut rng) = random_setup(9);
        for _ in 0..10_000 {
            let (k, a) = (rng.random_range(0..3), rng.random_range(0..2));
            let d = rng.random_range(0..consts.domain_size(a)) as u32;
            let cur = sc.count(k, a, d);
            let delta = if rng.random::<f64>() < 0.55 {
                rng.random::<f64>() * 4.0
            } else {
                -cur * rng.random::<f64>()
            };
            sc.shift_count(k, a, d, delta);
        }
        for k in 0..3 {
            for a in 0..2 {
                let fresh = fresh_log_f(&sc, k, a, &consts);
                assert!((sc.log_f_soft(k, a) - fresh).abs() <= 1e-6 * fresh.abs().max(1.0));
            }
        }
    }

    #[test]
    fn mass_tracks_records_and_blend_interpolates() {
        let schema = Schema::uniform(2, 3, 0.1).unwrap();
        let consts = HitMissConstants::new(&schema).unwrap();
        let table = RecordTable::new(vec![3, 3], vec![0, 1, 2, 2, 0, 1]).unwrap();
        let resp = vec![0.25, 0.75, 1.0, 0.0, 0.5, 0.5];
        let sc = SoftCounts::from_responsibilities(&table, &resp, &consts);
        assert_eq!(sc.masses(), &[1.75, 1.25]);
        for k in 0..2 {
            for a in 0..2 {
                let total: f64 = sc.counts(k, a).iter().sum();
                assert!((total - sc.masses()[k]).abs() < 1e-15);
            }
        }
        let mut blended = SoftCounts::new(2, &consts);
        blended.blend(&sc, 0.25);
        assert!((blended.count(0, 0, 0) - 0.25 * 0.75).abs() < 1e-15);
        assert!((blended.log_f_soft(0, 0) - fresh_log_f(&blended, 0, 0, &consts)).abs() < 1e-12);
    }
}
