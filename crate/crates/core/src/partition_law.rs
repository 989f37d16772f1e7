//! Ewens–Pitman and microclustering Ewens–Pitman random partitions.
//!
//! Provides exact EPPF evaluation, sequential-seating samplers, the
//! first-order asymptotic constants for the number of blocks and the number
//! of blocks of each size, and a Monte Carlo report used to check the
//! microclustering behaviour empirically.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, derive_seed};
use crate::special_math::{ln_gamma, ln_rising, LogValue};
use crate::summary::Summary;

/// A set partition of `[n]` stored as block labels `0..K` assigned in order
/// of first appearance.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Partition {
    labels: Vec<usize>,
    sizes: Vec<usize>,
}

impl Partition {
    /// Canonicalizes an arbitrary labelling: blocks are renumbered in order
    /// of first appearance.
    pub fn from_labels<T: Copy + Eq + Hash>(labels: &[T]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidPartition("partition of an empty set".into()));
        }
        let mut map: HashMap<T, usize> = HashMap::new();
        let mut canon = Vec::with_capacity(labels.len());
        let mut sizes = Vec::new();
        for &l in labels {
            let next = map.len();
            let c = *map.entry(l).or_insert(next);
            if c == sizes.len() {
                sizes.push(0);
            }
            sizes[c] += 1;
            canon.push(c);
        }
        Ok(Partition {
            labels: canon,
            sizes,
        })
    }

    /// Accepts labels that are already canonical (contiguous, first-appearance
    /// ordered) and rejects anything else.
    pub fn from_canonical(labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidPartition("partition of an empty set".into()));
        }
        let mut sizes: Vec<usize> = Vec::new();
        for (i, &l) in labels.iter().enumerate() {
            match l.cmp(&sizes.len()) {
                std::cmp::Ordering::Less => sizes[l] += 1,
                std::cmp::Ordering::Equal => sizes.push(1),
                std::cmp::Ordering::Greater => {
                    return Err(Error::InvalidPartition(format!(
                        "element {i} has label {l} before label {} appeared",
                        sizes.len()
                    )))
                }
            }
        }
        Ok(Partition { labels, sizes })
    }

    pub fn singletons(n: usize) -> Self {
        Partition {
            labels: (0..n).collect(),
            sizes: vec![1; n],
        }
    }

    pub fn one_block(n: usize) -> Self {
        Partition {
            labels: vec![0; n],
            sizes: vec![n],
        }
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn num_blocks(&self) -> usize {
        self.sizes.len()
    }

    /// Zero-based block label of every element.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Block sizes indexed by label.
    pub fn block_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn blocks(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.sizes.len()];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    pub fn stats(&self) -> PartitionStats {
        let mut m_r = BTreeMap::new();
        for &s in &self.sizes {
            *m_r.entry(s).or_insert(0) += 1;
        }
        PartitionStats {
            n: self.n(),
            k_n: self.num_blocks(),
            n_max: self.sizes.iter().copied().max().unwrap_or(0),
            m_r,
        }
    }
}

/// Summary counts of a partition: number of blocks `k_n`, number of blocks
/// of each size `m_r[r]`, and the largest block size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionStats {
    pub n: usize,
    pub k_n: usize,
    pub m_r: BTreeMap<usize, usize>,
    pub n_max: usize,
}

impl PartitionStats {
    pub fn blocks_of_size(&self, r: usize) -> usize {
        self.m_r.get(&r).copied().unwrap_or(0)
    }
}

/// Discount `alpha` in [0, 1) and strength `theta` > 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpParams {
    alpha: f64,
    theta: f64,
}

impl EpParams {
    pub fn new(alpha: f64, theta: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if !(theta.is_finite() && theta > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "theta must be positive, got {theta}"
            )));
        }
        Ok(EpParams { alpha, theta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }
}

/// Discount `alpha` in [0, 1) and rate `lambda` > 0; the strength for a
/// sample of size `n` is `lambda * n`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MepParams {
    alpha: f64,
    lambda: f64,
}

impl MepParams {
    pub fn new(alpha: f64, lambda: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "lambda must be positive, got {lambda}"
            )));
        }
        Ok(MepParams { alpha, lambda })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn theta(&self, n: usize) -> f64 {
        self.lambda * n as f64
    }

    /// The EP law this prior induces on partitions of `[n]`.
    pub fn at(&self, n: usize) -> EpParams {
        EpParams {
            alpha: self.alpha,
            theta: self.theta(n.max(1)),
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "alpha must lie in [0, 1), got {alpha}"
        )))
    }
}

/// Normalized log-probability of the set partition under EP(alpha, theta).
pub fn eppf_log_prob(partition: &Partition, params: &EpParams) -> LogValue {
    let (alpha, theta) = (params.alpha, params.theta);
    let n = partition.n() as u64;
    let k = partition.num_blocks();
    let mut lp: f64 = (1..k).map(|i| (theta + i as f64 * alpha).ln()).sum();
    lp -= ln_rising(theta + 1.0, n - 1);
    for &s in partition.block_sizes() {
        lp += ln_rising(1.0 - alpha, s as u64 - 1);
    }
    LogValue::new(lp)
}

/// Sequential-seating draw from EP(alpha, theta) on `[n]`.
pub fn sample_ep<R: rand::Rng + ?Sized>(n: usize, params: &EpParams, rng: &mut R) -> Result<Partition> {
    if n == 0 {
        return Err(Error::InvalidParameter("n must be at least 1".into()));
    }
    let (alpha, theta) = (params.alpha, params.theta);
    let mut labels = Vec::with_capacity(n);
    let mut sizes: Vec<usize> = Vec::new();
    labels.push(0);
    sizes.push(1);
    for seated in 1..n {
        let k = sizes.len() as f64;
        let u = rng.random::<f64>() * (theta + seated as f64);
        let c = if u < theta + k * alpha {
            sizes.push(0);
            sizes.len() - 1
        } else {
            // an existing block with probability ∝ |c| − alpha: propose via a
            // uniformly chosen seated element (∝ |c|), accept w.p. (|c| − alpha)/|c|
            loop {
                let c = labels[rng.random_range(0..seated)];
                let size = sizes[c] as f64;
                if alpha == 0.0 || rng.random::<f64>() * size < size - alpha {
                    break c;
                }
            }
        };
        sizes[c] += 1;
        labels.push(c);
    }
    Ok(Partition { labels, sizes })
}

/// Draw from M-EP(alpha, lambda) on `[n]`; the strength `lambda * n` is fixed
/// for the target size before seating begins.
pub fn sample_mep(n: usize, params: &MepParams, seed: u64) -> Result<Partition> {
    let mut rng = rng::seeded(seed);
    sample_ep(n, &params.at(n), &mut rng)
}

/// Limit of `K_n / n` under M-EP(alpha, lambda).
pub fn asymptotic_cluster_rate(params: &MepParams) -> f64 {
    let (alpha, lambda) = (params.alpha, params.lambda);
    let log_ratio = (1.0 / lambda).ln_1p();
    if alpha == 0.0 {
        lambda * log_ratio
    } else {
        lambda / alpha * (alpha * log_ratio).exp_m1()
    }
}

/// Limit of `M_{r,n} / n`, the number of blocks of size `r` per element.
pub fn asymptotic_size_rate(params: &MepParams, r: usize) -> Result<f64> {
    if r == 0 {
        return Err(Error::InvalidParameter("block size r must be >= 1".into()));
    }
    let (alpha, lambda) = (params.alpha, params.lambda);
    let rf = r as f64;
    if alpha == 0.0 {
        Ok(lambda * (-rf * lambda.ln_1p()).exp() / rf)
    } else {
        let log = ln_rising(1.0 - alpha, r as u64 - 1) - ln_gamma(rf + 1.0)
            + (1.0 - alpha) * lambda.ln()
            + (alpha - rf) * lambda.ln_1p();
        Ok(log.exp())
    }
}

/// Statistic tracked by [`microclustering_report`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PartitionStat {
    /// `K_n / n`
    Blocks,
    /// `M_{r,n} / n`
    BlocksOfSize(usize),
    /// `N_(1),n / n`
    LargestBlock,
}

impl PartitionStat {
    pub const REPORTED: [PartitionStat; 5] = [
        PartitionStat::Blocks,
        PartitionStat::BlocksOfSize(1),
        PartitionStat::BlocksOfSize(2),
        PartitionStat::BlocksOfSize(3),
        PartitionStat::LargestBlock,
    ];

    pub fn name(&self) -> String {
        match self {
            PartitionStat::Blocks => "k_n".into(),
            PartitionStat::BlocksOfSize(r) => format!("m_{r}"),
            PartitionStat::LargestBlock => "n_max".into(),
        }
    }

    fn eval(&self, stats: &PartitionStats) -> f64 {
        let count = match self {
            PartitionStat::Blocks => stats.k_n,
            PartitionStat::BlocksOfSize(r) => stats.blocks_of_size(*r),
            PartitionStat::LargestBlock => stats.n_max,
        };
        count as f64 / stats.n as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub n: usize,
    pub stat: PartitionStat,
    pub summary: Summary,
}

/// Monte Carlo summary of normalized partition statistics over `reps` M-EP
/// draws for every `n` in `n_grid`.
pub fn microclustering_report(
    params: &MepParams,
    n_grid: &[usize],
    reps: usize,
    seed: u64,
) -> Result<Vec<ReportRow>> {
    if reps == 0 {
        return Err(Error::InvalidParameter("reps must be at least 1".into()));
    }
    if n_grid.is_empty() || n_grid.contains(&0) {
        return Err(Error::InvalidParameter("n_grid must be non-empty with n >= 1".into()));
    }
    if n_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParameter("n_grid must be strictly ascending".into()));
    }
    let mut rows = Vec::new();
    for (j, &n) in n_grid.iter().enumerate() {
        let grid_seed = derive_seed(seed, j as u64);
        let draws: Vec<PartitionStats> = (0..reps)
            .into_par_iter()
            .map(|r| sample_mep(n, params, derive_seed(grid_seed, r as u64)).map(|p| p.stats()))
            .collect::<Result<_>>()?;
        for stat in PartitionStat::REPORTED {
            let values: Vec<f64> = draws.iter().map(|s| stat.eval(s)).collect();
            let summary = Summary::of(&values).expect("reps >= 1 finite values");
            rows.push(ReportRow { n, stat, summary });
        }
    }
    Ok(rows)
}

/// Writes report rows as CSV with header `n,stat,mean,q05,q50,q95`.
pub fn write_report_csv<W: Write>(rows: &[ReportRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["n", "stat", "mean", "q05", "q50", "q95"])?;
    for row in rows {
        w.write_record([
            row.n.to_string(),
            row.stat.name(),
            row.summary.mean.to_string(),
            row.summary.q05.to_string(),
            row.summary.q50.to_string(),
            row.summary.q95.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<report>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Restricted-growth-string enumeration of all set partitions of [n].
    fn all_partitions(n: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut a = vec![0usize; n];
        fn rec(i: usize, max: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if i == a.len() {
                out.push(a.clone());
                return;
            }
            for v in 0..=max + 1 {
                a[i] = v;
                rec(i + 1, max.max(v), a, out);
            }
        }
        if n > 0 {
            rec(1, 0, &mut a, &mut out);
        }
        out
    }

    #[test]
    fn canonicalization() {
        let p = Partition::from_labels(&["b", "a", "b", "c"]).unwrap();
        assert_eq!(p.labels(), &[0, 1, 0, 2]);
        assert_eq!(p.block_sizes(), &[2, 1, 1]);
        assert!(Partition::from_canonical(vec![0, 2, 1]).is_err());
        assert!(Partition::from_canonical(vec![]).is_err());
        assert!(Partition::from_labels::<u8>(&[]).is_err());
        assert_eq!(Partition::from_canonical(vec![0, 1, 0]).unwrap().num_blocks(), 2);
    }

    #[test]
    fn stats_are_consistent() {
        let p = Partition::from_labels(&[0, 0, 1, 2, 2, 2, 3]).unwrap();
        let s = p.stats();
        assert_eq!(s.k_n, 4);
        assert_eq!(s.n_max, 3);
        assert_eq!(s.m_r.iter().map(|(r, m)| r * m).sum::<usize>(), 7);
        assert_eq!(s.m_r.values().sum::<usize>(), 4);
        assert_eq!(s.blocks_of_size(1), 2);
    }

    #[test]
    fn parameter_ranges() {
        assert!(EpParams::new(1.0, 1.0).is_err());
        assert!(EpParams::new(-0.1, 1.0).is_err());
        assert!(EpParams::new(0.5, 0.0).is_err());
        assert!(MepParams::new(0.2, -1.0).is_err());
        assert_eq!(MepParams::new(0.2, 0.5).unwrap().theta(10), 5.0);
    }

    #[test]
    fn eppf_small_cases() {
        let p = EpParams::new(0.3, 2.0).unwrap();
        assert_eq!(eppf_log_prob(&Partition::one_block(1), &p).value(), 0.0);
        let ewens = EpParams::new(0.0, 1.0).unwrap();
        let lp = eppf_log_prob(&Partition::singletons(2), &ewens).value();
        assert!((lp - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn eppf_sums_to_one_over_bell_numbers() {
        let parts = all_partitions(4);
        assert_eq!(parts.len(), 15);
        let p = EpParams::new(0.3, 2.0).unwrap();
        let total: f64 = parts
            .iter()
            .map(|l| eppf_log_prob(&Partition::from_canonical(l.clone()).unwrap(), &p).exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eppf_exchangeable() {
        let p = EpParams::new(0.4, 1.7).unwrap();
        let a = Partition::from_labels(&[0, 0, 0, 1, 1, 2]).unwrap();
        let b = Partition::from_labels(&[5, 3, 5, 3, 9, 5]).unwrap();
        assert_eq!(eppf_log_prob(&a, &p), eppf_log_prob(&b, &p));
    }

    #[test]
    fn sampler_matches_eppf_for_n4() {
        let params = EpParams::new(0.35, 1.3).unwrap();
        let parts = all_partitions(4);
        let mut rng = rng::seeded(2024);
        let draws = 1_000_000usize;
        let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
        for _ in 0..draws {
            let p = sample_ep(4, &params, &mut rng).unwrap();
            *counts.entry(p.labels().to_vec()).or_insert(0) += 1;
        }
        for l in parts {
            let prob = eppf_log_prob(&Partition::from_canonical(l.clone()).unwrap(), &params).exp();
            let freq = counts.get(&l).copied().unwrap_or(0) as f64 / draws as f64;
            let se = (prob * (1.0 - prob) / draws as f64).sqrt();
            assert!((freq - prob).abs() < 4.0 * se, "{l:?}: {freq} vs {prob}");
        }
    }

    #[test]
    fn sampler_edge_cases() {
        let params = MepParams::new(0.5, 1.0).unwrap();
        let p = sample_mep(1, &params, 9).unwrap();
        assert_eq!(p.num_blocks(), 1);
        assert_eq!(sample_mep(500, &params, 9).unwrap(), sample_mep(500, &params, 9).unwrap());
        assert!(sample_mep(0, &params, 9).is_err());
    }

    #[test]
    fn ewens_cluster_rate_monte_carlo() {
        let params = MepParams::new(0.0, 1.0).unwrap();
        let n = 5000;
        let ratios: Vec<f64> = (0..200)
            .map(|r| sample_mep(n, &params, derive_seed(77, r)).unwrap().num_blocks() as f64 / n as f64)
            .collect();
        let mean = ratios.iter().sum::<f64>() / 200.0;
        let var = ratios.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 199.0;
        let se = (var / 200.0).sqrt();
        let target = std::f64::consts::LN_2;
        assert!((mean - target).abs() <= 3.0 * se + 2.0 / n as f64, "{mean} vs {target}");
    }

    #[test]
    fn cluster_rate_closed_forms() {
        let ewens = MepParams::new(0.0, 1.0).unwrap();
        assert!((asymptotic_cluster_rate(&ewens) - 0.6931471806).abs() < 1e-10);
        let tiny = MepParams::new(1e-8, 1.0).unwrap();
        assert!((asymptotic_cluster_rate(&tiny) - asymptotic_cluster_rate(&ewens)).abs() < 1e-6);
        let half = MepParams::new(0.5, 1.0).unwrap();
        assert!((asymptotic_cluster_rate(&half) - 2.0 * (2f64.sqrt() - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn size_rate_closed_forms() {
        let ewens = MepParams::new(0.0, 1.0).unwrap();
        assert!((asymptotic_size_rate(&ewens, 1).unwrap() - 0.5).abs() < 1e-15);
        let mass: f64 = (1..=200).map(|r| r as f64 * asymptotic_size_rate(&ewens, r).unwrap()).sum();
        assert!((mass - 1.0).abs() < 1e-10);
        let p = MepParams::new(0.25, 0.5).unwrap();
        let blocks: f64 = (1..=200).map(|r| asymptotic_size_rate(&p, r).unwrap()).sum();
        assert!((blocks - asymptotic_cluster_rate(&p)).abs() < 1e-8);
        assert!(asymptotic_size_rate(&p, 0).is_err());
    }

    #[test]
    fn report_shape_and_csv() {
        let params = MepParams::new(0.5, 1.0).unwrap();
        let rows = microclustering_report(&params, &[50, 100], 10, 1).unwrap();
        assert_eq!(rows.len(), 2 * PartitionStat::REPORTED.len());
        let mut buf = Vec::new();
        write_report_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("n,stat,mean,q05,q50,q95\n"));
        assert!(microclustering_report(&params, &[100, 50], 10, 1).is_err());
        assert!(microclustering_report(&params, &[100], 0, 1).is_err());
    }
}
