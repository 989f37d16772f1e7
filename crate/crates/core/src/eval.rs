//! Partition agreement, point estimates, assignment files and the
//! replicated benchmark.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition_law::Partition;
use crate::records::{generate_synthetic, Schema};
use crate::rng::derive_seed;
use crate::summary::Summary;
use crate::svi::{fit_svi, SparseResponsibilities, SviConfig};
use crate::vi::{argmax, fit_collapsed_vi, fit_full_vi, Engine, FitConfig, FitResult, Responsibilities};

fn choose2(x: usize) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index under the permutation model. Two partitions with no
/// room for chance correction (both trivial) score 1.
pub fn adjusted_rand_index(p1: &Partition, p2: &Partition) -> Result<f64> {
    if p1.n() != p2.n() {
        return Err(Error::InvalidParameter(format!(
            "partitions cover {} and {} elements",
            p1.n(),
            p2.n()
        )));
    }
    let mut table: HashMap<(usize, usize), usize> = HashMap::new();
    for (&a, &b) in p1.labels().iter().zip(p2.labels()) {
        *table.entry((a, b)).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let rows: f64 = p1.block_sizes().iter().map(|&s| choose2(s)).sum();
    let cols: f64 = p2.block_sizes().iter().map(|&s| choose2(s)).sum();
    let total = choose2(p1.n());
    let expected = if total > 0.0 { rows * cols / total } else { 0.0 };
    let max_index = 0.5 * (rows + cols);
    let denom = max_index - expected;
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok((index - expected) / denom)
}

/// Anything that can report a per-row argmax cluster.
pub trait ArgmaxRows {
    fn num_rows(&self) -> usize;
    fn row_argmax(&self, i: usize) -> usize;
}

impl ArgmaxRows for Responsibilities {
    fn num_rows(&self) -> usize {
        self.n()
    }

    fn row_argmax(&self, i: usize) -> usize {
        argmax(self.row(i))
    }
}

impl ArgmaxRows for SparseResponsibilities {
    fn num_rows(&self) -> usize {
        self.n()
    }

    fn row_argmax(&self, i: usize) -> usize {
        self.argmax(i)
    }
}

/// Row-wise argmax (ties to the lowest cluster index), relabelled by first
/// appearance.
pub fn point_estimate<R: ArgmaxRows + ?Sized>(resp: &R) -> Result<Partition> {
    let labels: Vec<usize> = (0..resp.num_rows()).map(|i| resp.row_argmax(i)).collect();
    Partition::from_labels(&labels)
}

/// Writes `record_id,<id_column>` rows with 1-based ids.
pub fn write_assignment_csv<W: Write>(partition: &Partition, id_column: &str, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["record_id", id_column])?;
    for (i, &l) in partition.labels().iter().enumerate() {
        w.write_record([(i + 1).to_string(), (l + 1).to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<assignment>", e))?;
    Ok(())
}

/// Reads a two-column assignment file (`record_id` plus any label column).
/// Record ids must be exactly `1..=n` in any order; labels are arbitrary
/// strings.
pub fn read_assignment_csv(path: &Path) -> Result<Partition> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_assignment(file, &path.display().to_string())
}

pub fn parse_assignment<R: Read>(reader: R, source: &str) -> Result<Partition> {
    let ingest = |row: usize, column: usize, message: String| Error::Ingestion {
        path: source.into(),
        row,
        column,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::Input {
        path: source.into(),
        message: e.to_string(),
    })?;
    if header.len() != 2 || header.get(0).map(str::trim) != Some("record_id") {
        return Err(Error::Input {
            path: source.into(),
            message: "expected header `record_id,<label>`".into(),
        });
    }
    let mut pairs: Vec<(usize, String)> = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let row = idx + 2;
        let rec = rec.map_err(|e| ingest(row, 0, e.to_string()))?;
        let id: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| ingest(row, 1, format!("record id {:?} is not a positive integer", &rec[0])))?;
        pairs.push((id, rec[1].trim().to_string()));
    }
    if pairs.is_empty() {
        return Err(Error::Input {
            path: source.into(),
            message: "no assignments".into(),
        });
    }
    let n = pairs.len();
    let mut labels: Vec<Option<String>> = vec![None; n];
    for (idx, (id, label)) in pairs.into_iter().enumerate() {
        if id == 0 || id > n || labels[id - 1].is_some() {
            return Err(ingest(idx + 2, 1, format!("record ids must be a permutation of 1..={n}")));
        }
        labels[id - 1] = Some(label);
    }
    let labels: Vec<String> = labels.into_iter().map(|l| l.expect("filled")).collect();
    let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
    Partition::from_labels(&refs)
}

/// Comparison of an estimated partition against a reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub ari: f64,
    pub k_hat: usize,
    pub k_true: usize,
    /// Cluster size -> number of estimated clusters of that size.
    pub size_histogram: BTreeMap<usize, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wallclock_seconds: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl EvalReport {
    pub fn compare(estimate: &Partition, truth: &Partition) -> Result<Self> {
        let mut size_histogram = BTreeMap::new();
        for &s in estimate.block_sizes() {
            *size_histogram.entry(s).or_insert(0) += 1;
        }
        Ok(EvalReport {
            n: estimate.n(),
            ari: adjusted_rand_index(estimate, truth)?,
            k_hat: estimate.num_blocks(),
            k_true: truth.num_blocks(),
            size_histogram,
            wallclock_seconds: None,
            config: None,
        })
    }
}

/// One engine in a benchmark grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchEngine {
    pub engine: Engine,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_v: Option<usize>,
}

impl BenchEngine {
    pub fn label(&self) -> String {
        let base = match self.engine {
            Engine::Full => "full",
            Engine::Collapsed => "collapsed",
            Engine::Svi => "svi",
        };
        match self.top_v {
            Some(v) => format!("{base}-v{v}"),
            None => base.to_string(),
        }
    }
}

/// Replicated generate, fit, evaluate runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub replicates: usize,
    pub n: usize,
    pub num_attributes: usize,
    pub domain_size: usize,
    pub entities: usize,
    pub beta: f64,
    pub engines: Vec<BenchEngine>,
    pub fit: FitConfig,
    pub svi: SviConfig,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            replicates: 10,
            n: 2000,
            num_attributes: 5,
            domain_size: 10,
            entities: 500,
            beta: 0.01,
            engines: vec![BenchEngine {
                engine: Engine::Collapsed,
                top_v: None,
            }],
            fit: FitConfig::default(),
            svi: SviConfig::default(),
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 || self.n == 0 || self.entities == 0 {
            return Err(Error::InvalidParameter("replicates, n and entities must be positive".into()));
        }
        if self.engines.is_empty() {
            return Err(Error::InvalidParameter("benchmark needs at least one engine".into()));
        }
        self.schema()?;
        self.fit.validate(self.n)?;
        if self.engines.iter().any(|e| e.engine == Engine::Svi) {
            self.svi.validate(self.n)?;
        }
        Ok(())
    }

    pub fn schema(&self) -> Result<Schema> {
        Schema::uniform(self.num_attributes, self.domain_size, self.beta)
    }
}

/// One fitted replicate of one engine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub replicate: usize,
    pub engine: String,
    pub ari: Option<f64>,
    pub k_hat: Option<usize>,
    pub k_true: usize,
    pub iterations: Option<usize>,
    pub wallclock_seconds: Option<f64>,
    pub error: Option<String>,
}

/// Mean and 5%/95% quantiles of one metric for one engine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchAggregate {
    pub engine: String,
    pub metric: String,
    pub mean: f64,
    pub q05: f64,
    pub q95: f64,
    pub completed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub aggregates: Vec<BenchAggregate>,
}

fn run_engine(
    spec: &BenchEngine,
    table: &crate::records::RecordTable,
    schema: &Schema,
    cfg: &BenchConfig,
    seed: u64,
) -> Result<FitResult> {
    match spec.engine {
        Engine::Full => fit_full_vi(table, schema, &cfg.fit, seed),
        Engine::Collapsed => fit_collapsed_vi(table, schema, &cfg.fit, seed),
        Engine::Svi => {
            let svi = SviConfig {
                top_v: spec.top_v.or(cfg.svi.top_v),
                ..cfg.svi.clone()
            };
            fit_svi(table, schema, &cfg.fit, &svi, seed)
        }
    }
}

/// Runs every replicate (in parallel, seeds derived per replicate) and
/// summarizes ARI, estimated cluster count and wallclock per engine.
/// Failed fits are recorded in their row and skipped by the aggregates.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let schema = cfg.schema()?;
    let per_replicate: Vec<Vec<BenchRow>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|rep| {
            let rep_seed = derive_seed(cfg.seed, rep as u64);
            let (table, truth) = generate_synthetic(cfg.n, &schema, cfg.entities, derive_seed(rep_seed, 0))?;
            let rows = cfg
                .engines
                .iter()
                .enumerate()
                .map(|(e, spec)| {
                    let fit = run_engine(spec, &table, &schema, cfg, derive_seed(rep_seed, 1 + e as u64));
                    let scored = fit.and_then(|f| {
                        let ari = adjusted_rand_index(&f.partition()?, &truth.partition)?;
                        Ok((f, ari))
                    });
                    match scored {
                        Ok((f, ari)) => BenchRow {
                            replicate: rep + 1,
                            engine: spec.label(),
                            ari: Some(ari),
                            k_hat: Some(f.k_hat),
                            k_true: truth.partition.num_blocks(),
                            iterations: Some(f.iterations),
                            wallclock_seconds: Some(f.wallclock_seconds),
                            error: None,
                        },
                        Err(err) => BenchRow {
                            replicate: rep + 1,
                            engine: spec.label(),
                            ari: None,
                            k_hat: None,
                            k_true: truth.partition.num_blocks(),
                            iterations: None,
                            wallclock_seconds: None,
                            error: Some(err.to_string()),
                        },
                    }
                })
                .collect();
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let rows: Vec<BenchRow> = per_replicate.into_iter().flatten().collect();

    let mut aggregates = Vec::new();
    for spec in &cfg.engines {
        let label = spec.label();
        let mine: Vec<&BenchRow> = rows.iter().filter(|r| r.engine == label && r.error.is_none()).collect();
        let metrics: [(&str, Vec<f64>); 3] = [
            ("ari", mine.iter().filter_map(|r| r.ari).collect()),
            ("k_hat", mine.iter().filter_map(|r| r.k_hat.map(|k| k as f64)).collect()),
            ("wallclock_seconds", mine.iter().filter_map(|r| r.wallclock_seconds).collect()),
        ];
        for (metric, values) in metrics {
            if let Some(s) = Summary::of(&values) {
                aggregates.push(BenchAggregate {
                    engine: label.clone(),
                    metric: metric.into(),
                    mean: s.mean,
                    q05: s.q05,
                    q95: s.q95,
                    completed: values.len(),
                });
            }
        }
    }
    Ok(BenchReport { rows, aggregates })
}

/// Per-replicate rows: `replicate,engine,ari,k_hat,k_true,iterations,wallclock_seconds,error`.
pub fn write_bench_rows_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "replicate",
        "engine",
        "ari",
        "k_hat",
        "k_true",
        "iterations",
        "wallclock_seconds",
        "error",
    ])?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for r in rows {
        w.write_record([
            r.replicate.to_string(),
            r.engine.clone(),
            opt(r.ari.map(|v| v.to_string())),
            opt(r.k_hat.map(|v| v.to_string())),
            r.k_true.to_string(),
            opt(r.iterations.map(|v| v.to_string())),
            opt(r.wallclock_seconds.map(|v| v.to_string())),
            opt(r.error.clone()),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<bench>", e))?;
    Ok(())
}

/// Aggregates: `engine,metric,mean,q05,q95,completed`.
pub fn write_bench_summary_csv<W: Write>(aggregates: &[BenchAggregate], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["engine", "metric", "mean", "q05", "q95", "completed"])?;
    for a in aggregates {
        w.write_record([
            a.engine.clone(),
            a.metric.clone(),
            a.mean.to_string(),
            a.q05.to_string(),
            a.q95.to_string(),
            a.completed.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<bench>", e))?;
    Ok(())
}
