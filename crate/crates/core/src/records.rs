//! Categorical record tables, the hit-miss record generator, and CSV
//! ingestion.
//!
//! Category codes are zero-based in memory and one-based in files.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition_law::{sample_ep, MepParams, Partition};
use crate::rng::{self, sample_categorical};

/// Additive smoothing used by [`empirical_theta`].
pub const THETA_SMOOTHING: f64 = 0.5;

const SIMPLEX_TOL: f64 = 1e-12;

/// Attribute layout and the fixed hit-miss constants: per-attribute value
/// frequencies `theta[l]` and distortion rates `beta[l]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    names: Vec<String>,
    theta: Vec<Vec<f64>>,
    beta: Vec<f64>,
}

impl Schema {
    pub fn new(names: Vec<String>, theta: Vec<Vec<f64>>, beta: Vec<f64>) -> Result<Self> {
        if theta.is_empty() {
            return Err(Error::InvalidParameter("schema needs at least one attribute".into()));
        }
        if names.len() != theta.len() || beta.len() != theta.len() {
            return Err(Error::InvalidParameter(format!(
                "schema arity mismatch: {} names, {} frequency vectors, {} distortion rates",
                names.len(),
                theta.len(),
                beta.len()
            )));
        }
        for (l, t) in theta.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::InvalidParameter(format!("attribute {l} has an empty domain")));
            }
            if t.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
                return Err(Error::InvalidParameter(format!(
                    "attribute {l}: every frequency must be positive"
                )));
            }
            let sum: f64 = t.iter().sum();
            if (sum - 1.0).abs() > SIMPLEX_TOL * t.len() as f64 {
                return Err(Error::InvalidParameter(format!(
                    "attribute {l}: frequencies sum to {sum}, not 1"
                )));
            }
        }
        for (l, &b) in beta.iter().enumerate() {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidParameter(format!(
                    "attribute {l}: distortion rate {b} outside [0, 1)"
                )));
            }
        }
        Ok(Schema { names, theta, beta })
    }

    /// `num_attributes` attributes with uniform frequencies over `domain_size`
    /// values and a shared distortion rate.
    pub fn uniform(num_attributes: usize, domain_size: usize, beta: f64) -> Result<Self> {
        let names = (1..=num_attributes).map(|l| format!("x{l}")).collect();
        let theta = vec![vec![1.0 / domain_size as f64; domain_size]; num_attributes];
        Schema::new(names, theta, vec![beta; num_attributes])
    }

    pub fn num_attributes(&self) -> usize {
        self.theta.len()
    }

    pub fn domain_size(&self, attr: usize) -> usize {
        self.theta[attr].len()
    }

    pub fn domain_sizes(&self) -> Vec<usize> {
        self.theta.iter().map(Vec::len).collect()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn theta(&self, attr: usize) -> &[f64] {
        &self.theta[attr]
    }

    pub fn beta(&self, attr: usize) -> f64 {
        self.beta[attr]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    /// Same schema with the distortion rates replaced.
    pub fn with_beta(&self, beta: Vec<f64>) -> Result<Self> {
        Schema::new(self.names.clone(), self.theta.clone(), beta)
    }

    pub fn check_table(&self, table: &RecordTable) -> Result<()> {
        if table.domain_sizes() != self.domain_sizes().as_slice() {
            return Err(Error::InvalidParameter(format!(
                "record domains {:?} do not match schema domains {:?}",
                table.domain_sizes(),
                self.domain_sizes()
            )));
        }
        Ok(())
    }
}

/// An `n × L` matrix of zero-based category codes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecordTable {
    domain_sizes: Vec<usize>,
    values: Vec<u32>,
}

impl RecordTable {
    /// `values` is row-major with `domain_sizes.len()` columns.
    pub fn new(domain_sizes: Vec<usize>, values: Vec<u32>) -> Result<Self> {
        let l = domain_sizes.len();
        if l == 0 {
            return Err(Error::InvalidParameter("record table needs at least one column".into()));
        }
        if values.len() % l != 0 {
            return Err(Error::InvalidParameter(format!(
                "{} cells do not fill rows of width {l}",
                values.len()
            )));
        }
        for (idx, &v) in values.iter().enumerate() {
            let (row, col) = (idx / l, idx % l);
            if v as usize >= domain_sizes[col] {
                return Err(Error::InvalidParameter(format!(
                    "record {row}, attribute {col}: code {v} outside domain of size {}",
                    domain_sizes[col]
                )));
            }
        }
        Ok(RecordTable {
            domain_sizes,
            values,
        })
    }

    pub fn n(&self) -> usize {
        self.values.len() / self.domain_sizes.len()
    }

    pub fn num_attributes(&self) -> usize {
        self.domain_sizes.len()
    }

    pub fn domain_sizes(&self) -> &[usize] {
        &self.domain_sizes
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[u32] {
        let l = self.domain_sizes.len();
        &self.values[i * l..(i + 1) * l]
    }

    #[inline]
    pub fn value(&self, i: usize, attr: usize) -> u32 {
        self.values[i * self.domain_sizes.len() + attr]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u32]> {
        self.values.chunks_exact(self.domain_sizes.len())
    }
}

/// The latent truth behind a generated table.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub partition: Partition,
    /// One row of zero-based codes per block of `partition`.
    pub entities: Vec<Vec<u32>>,
}

/// How records are allocated to latent entities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EntityAllocation {
    /// Each record picks one of `entities` latent entities uniformly.
    Uniform { entities: usize },
    /// The record partition is an M-EP draw; one entity per block.
    Mep { alpha: f64, lambda: f64 },
}

/// Benchmark generator: `m_entities` latent entities, uniform allocation.
pub fn generate_synthetic(
    n: usize,
    schema: &Schema,
    m_entities: usize,
    seed: u64,
) -> Result<(RecordTable, GroundTruth)> {
    generate_with_allocation(n, schema, EntityAllocation::Uniform { entities: m_entities }, seed)
}

pub fn generate_with_allocation(
    n: usize,
    schema: &Schema,
    allocation: EntityAllocation,
    seed: u64,
) -> Result<(RecordTable, GroundTruth)> {
    if n == 0 {
        return Err(Error::InvalidParameter("n must be at least 1".into()));
    }
    let mut rng = rng::seeded(seed);
    let l = schema.num_attributes();
    let draw_entity = |rng: &mut rng::Rng| -> Vec<u32> {
        (0..l)
            .map(|a| sample_categorical(rng, schema.theta(a)) as u32)
            .collect()
    };

    let (partition, entities) = match allocation {
        EntityAllocation::Uniform { entities: m } => {
            if m == 0 {
                return Err(Error::InvalidParameter("need at least one latent entity".into()));
            }
            let pool: Vec<Vec<u32>> = (0..m).map(|_| draw_entity(&mut rng)).collect();
            let z: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
            let partition = Partition::from_labels(&z)?;
            // keep used entities only, in first-appearance order
            let mut used = vec![None; partition.num_blocks()];
            for (i, &c) in partition.labels().iter().enumerate() {
                used[c].get_or_insert(z[i]);
            }
            let entities: Vec<Vec<u32>> = used
                .into_iter()
                .map(|e| pool[e.expect("every block has a member")].clone())
                .collect();
            (partition, entities)
        }
        EntityAllocation::Mep { alpha, lambda } => {
            let params = MepParams::new(alpha, lambda)?;
            let partition = sample_ep(n, &params.at(n), &mut rng)?;
            let entities = (0..partition.num_blocks()).map(|_| draw_entity(&mut rng)).collect();
            (partition, entities)
        }
    };

    let mut values = Vec::with_capacity(n * l);
    for &c in partition.labels() {
        let entity: &Vec<u32> = &entities[c];
        for (a, &clean) in entity.iter().enumerate() {
            let v = if rng.random::<f64>() < schema.beta(a) {
                sample_categorical(&mut rng, schema.theta(a)) as u32
            } else {
                clean
            };
            values.push(v);
        }
    }
    let table = RecordTable::new(schema.domain_sizes(), values)?;
    Ok((table, GroundTruth { partition, entities }))
}

/// Smoothed per-attribute frequencies `(count + 0.5) / (n + 0.5 D)`.
pub fn empirical_theta(table: &RecordTable) -> Vec<Vec<f64>> {
    let n = table.n() as f64;
    (0..table.num_attributes())
        .map(|a| {
            let d = table.domain_sizes()[a];
            let mut counts = vec![0usize; d];
            for row in table.rows() {
                counts[row[a] as usize] += 1;
            }
            let denom = n + THETA_SMOOTHING * d as f64;
            counts
                .into_iter()
                .map(|c| (c as f64 + THETA_SMOOTHING) / denom)
                .collect()
        })
        .collect()
}

/// Optional column description accompanying a record file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SchemaSpec {
    #[serde(default)]
    pub columns: Vec<ColumnSpec>,
    /// One shared rate or one per column.
    #[serde(default)]
    pub beta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    #[serde(default)]
    pub domain_size: Option<usize>,
}

impl SchemaSpec {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Describes an existing schema so it can be saved next to a table.
    pub fn describe(schema: &Schema) -> Self {
        SchemaSpec {
            columns: schema
                .names()
                .iter()
                .enumerate()
                .map(|(a, name)| ColumnSpec {
                    name: name.clone(),
                    domain_size: Some(schema.domain_size(a)),
                })
                .collect(),
            beta: schema.betas().to_vec(),
        }
    }
}

/// A loaded table with its inferred schema and, for string-coded columns,
/// the category dictionary (index = zero-based code).
#[derive(Clone, Debug)]
pub struct LoadedRecords {
    pub table: RecordTable,
    pub schema: Schema,
    pub dictionaries: Vec<Option<Vec<String>>>,
}

/// Reads a headed CSV of categorical cells.
///
/// Columns where every cell is a positive integer are taken as one-based
/// codes; any other column is dictionary-encoded in first-appearance order.
/// `beta` overrides the schema's distortion rates; one of the two must supply
/// them.
pub fn load_records(path: &Path, spec: Option<&SchemaSpec>, beta: Option<f64>) -> Result<LoadedRecords> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(file, &path.display().to_string(), spec, beta)
}

pub fn read_records<R: Read>(
    reader: R,
    source: &str,
    spec: Option<&SchemaSpec>,
    beta: Option<f64>,
) -> Result<LoadedRecords> {
    let ingest = |row: usize, column: usize, message: String| Error::Ingestion {
        path: source.to_string(),
        row,
        column,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Input {
            path: source.into(),
            message: e.to_string(),
        })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::Input {
            path: source.into(),
            message: "missing header row".into(),
        });
    }
    let l = header.len();

    let fixed_domains: Vec<Option<usize>> = match spec {
        Some(s) if !s.columns.is_empty() => {
            if s.columns.len() != l {
                return Err(Error::Input {
                    path: source.into(),
                    message: format!("schema lists {} columns, file has {l}", s.columns.len()),
                });
            }
            s.columns.iter().map(|c| c.domain_size).collect()
        }
        _ => vec![None; l],
    };

    let mut cells: Vec<Vec<String>> = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        // row numbers are 1-based and count the header line
        let row = idx + 2;
        let rec = rec.map_err(|e| ingest(row, 0, e.to_string()))?;
        if rec.len() != l {
            return Err(ingest(
                row,
                rec.len().min(l) + 1,
                format!("ragged row: expected {l} fields, found {}", rec.len()),
            ));
        }
        let fields: Vec<String> = rec.iter().map(|f| f.trim().to_string()).collect();
        if let Some(col) = fields.iter().position(String::is_empty) {
            return Err(ingest(row, col + 1, "empty cell (missing values are not supported)".into()));
        }
        cells.push(fields);
    }
    if cells.is_empty() {
        return Err(Error::Input {
            path: source.into(),
            message: "no records".into(),
        });
    }
    let n = cells.len();

    let mut domain_sizes = vec![0usize; l];
    let mut dictionaries = vec![None; l];
    let mut values = vec![0u32; n * l];
    for col in 0..l {
        let integer_coded = cells
            .iter()
            .all(|r| r[col].parse::<u32>().map(|v| v >= 1).unwrap_or(false));
        if integer_coded {
            let mut max_code = 0usize;
            for (i, r) in cells.iter().enumerate() {
                let code = r[col].parse::<u32>().expect("checked above") - 1;
                if let Some(d) = fixed_domains[col] {
                    if code as usize >= d {
                        return Err(ingest(
                            i + 2,
                            col + 1,
                            format!("unknown category {}: domain size is {d}", r[col]),
                        ));
                    }
                }
                max_code = max_code.max(code as usize + 1);
                values[i * l + col] = code;
            }
            domain_sizes[col] = fixed_domains[col].unwrap_or(max_code);
        } else {
            let mut dict: HashMap<&str, u32> = HashMap::new();
            let mut order: Vec<String> = Vec::new();
            for (i, r) in cells.iter().enumerate() {
                let next = dict.len() as u32;
                let code = *dict.entry(r[col].as_str()).or_insert_with(|| {
                    order.push(r[col].clone());
                    next
                });
                if let Some(d) = fixed_domains[col] {
                    if code as usize >= d {
                        return Err(ingest(
                            i + 2,
                            col + 1,
                            format!("unknown category {:?}: domain size is {d}", r[col]),
                        ));
                    }
                }
                values[i * l + col] = code;
            }
            domain_sizes[col] = fixed_domains[col].unwrap_or(order.len());
            dictionaries[col] = Some(order);
        }
    }

    let table = RecordTable::new(domain_sizes, values)?;
    let betas = match (beta, spec.map(|s| s.beta.as_slice())) {
        (Some(b), _) => vec![b; l],
        (None, Some(bs)) if bs.len() == 1 => vec![bs[0]; l],
        (None, Some(bs)) if bs.len() == l => bs.to_vec(),
        (None, Some(bs)) if !bs.is_empty() => {
            return Err(Error::Input {
                path: source.into(),
                message: format!("schema gives {} distortion rates for {l} columns", bs.len()),
            })
        }
        _ => {
            return Err(Error::Input {
                path: source.into(),
                message: "distortion rate beta must be supplied (schema file or --beta)".into(),
            })
        }
    };
    let schema = Schema::new(header, empirical_theta(&table), betas)?;
    Ok(LoadedRecords {
        table,
        schema,
        dictionaries,
    })
}

/// Writes a table as a headed CSV of one-based integer codes.
pub fn write_records<W: Write>(table: &RecordTable, names: &[String], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(names)?;
    for row in table.rows() {
        w.write_record(row.iter().map(|v| (v + 1).to_string()))?;
    }
    w.flush().map_err(|e| Error::io("<records>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_validation() {
        assert!(Schema::uniform(2, 3, 0.01).is_ok());
        assert!(Schema::uniform(2, 3, 1.0).is_err());
        assert!(Schema::new(vec!["a".into()], vec![vec![0.5, 0.4]], vec![0.1]).is_err());
        assert!(Schema::new(vec!["a".into()], vec![vec![1.0, 0.0]], vec![0.1]).is_err());
        assert!(Schema::new(vec![], vec![vec![1.0]], vec![0.1]).is_err());
    }

    #[test]
    fn table_validation() {
        assert!(RecordTable::new(vec![2, 3], vec![0, 2, 1, 0]).is_ok());
        assert!(RecordTable::new(vec![2, 3], vec![2, 0]).is_err());
        assert!(RecordTable::new(vec![2, 3], vec![0, 1, 1]).is_err());
    }

    #[test]
    fn zero_distortion_copies_entities() {
        let schema = Schema::uniform(4, 6, 0.0).unwrap();
        let (table, truth) = generate_synthetic(300, &schema, 50, 8).unwrap();
        for (i, &c) in truth.partition.labels().iter().enumerate() {
            assert_eq!(table.row(i), truth.entities[c].as_slice());
        }
        assert_eq!(truth.entities.len(), truth.partition.num_blocks());
    }

    #[test]
    fn generator_is_reproducible() {
        let schema = Schema::uniform(5, 10, 0.05).unwrap();
        let a = generate_synthetic(500, &schema, 100, 3).unwrap();
        let b = generate_synthetic(500, &schema, 100, 3).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        let c = generate_synthetic(500, &schema, 100, 4).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn coupon_collector_block_count() {
        // E[K] = M (1 - (1 - 1/M)^n)
        let schema = Schema::uniform(5, 10, 0.01).unwrap();
        let (n, m) = (2000usize, 500usize);
        let expected = m as f64 * (1.0 - (1.0 - 1.0 / m as f64).powi(n as i32));
        assert!((expected - 490.9).abs() < 0.05);
        let reps = 40;
        let ks: Vec<f64> = (0..reps)
            .map(|r| generate_synthetic(n, &schema, m, r).unwrap().1.partition.num_blocks() as f64)
            .collect();
        let mean = ks.iter().sum::<f64>() / reps as f64;
        let sd = (ks.iter().map(|k| (k - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        assert!((mean - expected).abs() < 4.0 * sd / (reps as f64).sqrt() + 0.5);
    }

    #[test]
    fn distortion_disagreement_rate() {
        let (beta, d, n) = (0.05, 10usize, 20_000usize);
        let schema = Schema::uniform(3, d, beta).unwrap();
        let (table, truth) = generate_synthetic(n, &schema, 5000, 17).unwrap();
        let p = beta * (1.0 - 1.0 / d as f64);
        let se = (p * (1.0 - p) / n as f64).sqrt();
        for a in 0..3 {
            let diff = (0..n)
                .filter(|&i| table.value(i, a) != truth.entities[truth.partition.labels()[i]][a])
                .count() as f64
                / n as f64;
            assert!((diff - p).abs() < 3.0 * se, "attr {a}: {diff} vs {p}");
        }
    }

    #[test]
    fn mep_allocation_variant() {
        let schema = Schema::uniform(3, 5, 0.01).unwrap();
        let (table, truth) =
            generate_with_allocation(400, &schema, EntityAllocation::Mep { alpha: 0.25, lambda: 0.5 }, 2)
                .unwrap();
        assert_eq!(table.n(), 400);
        let stats = truth.partition.stats();
        assert_eq!(stats.m_r.iter().map(|(r, m)| r * m).sum::<usize>(), 400);
        assert_eq!(truth.entities.len(), stats.k_n);
    }

    #[test]
    fn empirical_theta_smoothing() {
        let table = RecordTable::new(vec![2], vec![0; 10]).unwrap();
        let theta = empirical_theta(&table);
        assert!((theta[0][0] - 10.5 / 11.0).abs() < 1e-15);
        assert!((theta[0][1] - 0.5 / 11.0).abs() < 1e-15);

        let table = RecordTable::new(vec![4], (0..12).map(|i| i % 4).collect()).unwrap();
        let theta = empirical_theta(&table);
        let want = (3.0 + 0.5) / (12.0 + 2.0);
        assert!(theta[0].iter().all(|&t| (t - want).abs() < 1e-15));
    }

    #[test]
    fn load_string_coded() {
        let csv = "first,second\na,b\na,c\nb,b\n";
        let loaded = read_records(csv.as_bytes(), "mem", None, Some(0.05)).unwrap();
        assert_eq!(loaded.table.n(), 3);
        assert_eq!(loaded.table.domain_sizes(), &[2, 2]);
        assert_eq!(loaded.table.row(1), &[0, 1]);
        // empirical θ₁ = (2/3, 1/3) before smoothing
        let raw = [2.0 / 3.0, 1.0 / 3.0];
        let smooth: Vec<f64> = raw.iter().map(|p| (p * 3.0 + 0.5) / 4.0).collect();
        assert!((loaded.schema.theta(0)[0] - smooth[0]).abs() < 1e-15);
        assert_eq!(loaded.dictionaries[0].as_deref(), Some(&["a".to_string(), "b".to_string()][..]));
    }

    #[test]
    fn load_errors() {
        let err = read_records("a,b\n".as_bytes(), "mem", None, Some(0.1)).unwrap_err();
        assert!(err.to_string().contains("no records"));
        let err = read_records("a,b\n1,2\n3\n".as_bytes(), "mem", None, Some(0.1)).unwrap_err();
        assert!(matches!(err, Error::Ingestion { row: 3, .. }), "{err}");
        let err = read_records("a\n1\n".as_bytes(), "mem", None, None).unwrap_err();
        assert!(err.to_string().contains("beta"));

        let spec = SchemaSpec {
            columns: vec![ColumnSpec {
                name: "a".into(),
                domain_size: Some(2),
            }],
            beta: vec![0.1],
        };
        let err = read_records("a\nx\ny\nz\n".as_bytes(), "mem", Some(&spec), None).unwrap_err();
        assert!(matches!(err, Error::Ingestion { row: 4, column: 1, .. }), "{err}");
        let err = read_records("a\n1\n3\n".as_bytes(), "mem", Some(&spec), None).unwrap_err();
        assert!(matches!(err, Error::Ingestion { row: 3, column: 1, .. }), "{err}");
    }

    #[test]
    fn write_then_load_round_trips() {
        let schema = Schema::uniform(3, 7, 0.05).unwrap();
        let (table, _) = generate_synthetic(200, &schema, 40, 5).unwrap();
        let mut buf = Vec::new();
        write_records(&table, schema.names(), &mut buf).unwrap();
        let spec = SchemaSpec::describe(&schema);
        let loaded = read_records(buf.as_slice(), "mem", Some(&spec), None).unwrap();
        assert_eq!(loaded.table, table);
        assert_eq!(loaded.schema.betas(), schema.betas());
    }
}
