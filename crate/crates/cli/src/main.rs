//! `mepvi` command-line front end.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use mepvi::eval::{
    read_assignment_csv, run_benchmark, write_assignment_csv, write_bench_rows_csv, write_bench_summary_csv,
    BenchConfig, BenchEngine, EvalReport,
};
use mepvi::partition_law::{microclustering_report, write_report_csv, MepParams};
use mepvi::records::{generate_with_allocation, load_records, write_records, EntityAllocation, Schema, SchemaSpec};
use mepvi::svi::{fit_svi, SviConfig};
use mepvi::vi::{fit_collapsed_vi, fit_full_vi, Engine, FitConfig, FitResult};
use mepvi::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "mepvi", version, about = "Variational entity resolution under microclustering partition priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a record table with its ground-truth partition.
    Generate(GenerateArgs),
    /// Fit a record table and write the fit summary and hard assignment.
    Fit(FitArgs),
    /// Compare an estimated assignment against a reference assignment.
    Eval(EvalArgs),
    /// Replicated generate, fit and evaluate runs.
    Bench(BenchArgs),
    /// Monte Carlo summaries of partition statistics under the prior.
    PartitionSim(PartitionSimArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EngineArg {
    Full,
    Collapsed,
    Svi,
}

impl From<EngineArg> for Engine {
    fn from(e: EngineArg) -> Self {
        match e {
            EngineArg::Full => Engine::Full,
            EngineArg::Collapsed => Engine::Collapsed,
            EngineArg::Svi => Engine::Svi,
        }
    }
}

/// Flags shared by the commands that fit models.
#[derive(Args, Debug, Default)]
struct ModelFlags {
    /// Truncation level.
    #[arg(long = "K", value_name = "INT")]
    num_clusters: Option<usize>,
    /// Discount (starting value when hyperparameters are learned).
    #[arg(long, value_name = "FLOAT")]
    alpha: Option<f64>,
    /// Prior strength per record (starting value when learned).
    #[arg(long, value_name = "FLOAT")]
    lambda: Option<f64>,
    /// Keep alpha and lambda fixed.
    #[arg(long)]
    fixed_hyper: bool,
    /// Records per stochastic step (capped at the record count by default).
    #[arg(long, value_name = "INT")]
    batch_size: Option<usize>,
    /// Keep only the largest V responsibilities per record (stochastic engine).
    #[arg(long, value_name = "INT")]
    top_v: Option<usize>,
    /// Passes over the data for the stochastic engine.
    #[arg(long, value_name = "INT")]
    epochs: Option<usize>,
}

impl ModelFlags {
    fn apply(&self, fit: &mut FitConfig, svi: &mut SviConfig) {
        if self.num_clusters.is_some() {
            fit.num_clusters = self.num_clusters;
        }
        if let Some(a) = self.alpha {
            fit.alpha = a;
        }
        if let Some(l) = self.lambda {
            fit.lambda = l;
        }
        if self.fixed_hyper {
            fit.hyper_update = false;
        }
        if let Some(b) = self.batch_size {
            svi.batch_size = b;
        }
        if self.top_v.is_some() {
            svi.top_v = self.top_v;
        }
        if let Some(e) = self.epochs {
            svi.epochs = e;
        }
    }
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// JSON run configuration.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Random seed; runs with the same seed and settings are reproducible.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Number of records.
    #[arg(long, value_name = "INT")]
    n: Option<usize>,
    /// Number of latent entities (uniform allocation).
    #[arg(long, value_name = "INT")]
    entities: Option<usize>,
    /// Distortion probability shared by all attributes.
    #[arg(long, value_name = "FLOAT")]
    beta: Option<f64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// JSON run configuration.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Record CSV (header row of attribute names).
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    /// Optional JSON column description for the record file.
    #[arg(long, value_name = "PATH")]
    schema: Option<PathBuf>,
    /// Random seed; runs with the same seed and settings are reproducible.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    engine: Option<EngineArg>,
    /// Distortion probability shared by all attributes.
    #[arg(long, value_name = "FLOAT")]
    beta: Option<f64>,
    #[command(flatten)]
    model: ModelFlags,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Estimated assignment CSV.
    estimate: PathBuf,
    /// Reference assignment CSV.
    truth: PathBuf,
    /// Fit summary whose wallclock and settings are echoed in the report.
    #[arg(long, value_name = "PATH")]
    fit: Option<PathBuf>,
    /// Output directory; the report goes to standard output when omitted.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// JSON benchmark configuration.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Random seed; runs with the same seed and settings are reproducible.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Run a single engine instead of the configured grid.
    #[arg(long, value_enum)]
    engine: Option<EngineArg>,
    #[arg(long, value_name = "FLOAT")]
    beta: Option<f64>,
    #[arg(long, value_name = "INT")]
    replicates: Option<usize>,
    #[arg(long, value_name = "INT")]
    n: Option<usize>,
    #[arg(long, value_name = "INT")]
    entities: Option<usize>,
    #[command(flatten)]
    model: ModelFlags,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PartitionSimArgs {
    /// JSON run configuration.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Random seed; runs with the same seed and settings are reproducible.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    #[arg(long, value_name = "FLOAT")]
    alpha: Option<f64>,
    #[arg(long, value_name = "FLOAT")]
    lambda: Option<f64>,
    /// Comma-separated record counts, ascending.
    #[arg(long, value_name = "INT,...", value_delimiter = ',')]
    n: Option<Vec<usize>>,
    /// Draws per record count.
    #[arg(long, value_name = "INT")]
    reps: Option<usize>,
    /// Output directory; the CSV goes to standard output when omitted.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenerateConfig {
    n: usize,
    num_attributes: usize,
    domain_size: usize,
    beta: f64,
    allocation: EntityAllocation,
    seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            n: 2000,
            num_attributes: 5,
            domain_size: 10,
            beta: 0.01,
            allocation: EntityAllocation::Uniform { entities: 500 },
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FitRunConfig {
    data: Option<PathBuf>,
    schema: Option<PathBuf>,
    beta: Option<f64>,
    engine: Engine,
    fit: FitConfig,
    svi: SviConfig,
    seed: u64,
}

impl Default for FitRunConfig {
    fn default() -> Self {
        FitRunConfig {
            data: None,
            schema: None,
            beta: None,
            engine: Engine::Collapsed,
            fit: FitConfig::default(),
            svi: SviConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PartitionSimConfig {
    alpha: f64,
    lambda: f64,
    n: Vec<usize>,
    reps: usize,
    seed: u64,
}

impl Default for PartitionSimConfig {
    fn default() -> Self {
        PartitionSimConfig {
            alpha: 0.5,
            lambda: 1.0,
            n: vec![1000, 10000],
            reps: 100,
            seed: 0,
        }
    }
}

fn is_broken_pipe(e: &Error) -> bool {
    let mut cur: Option<&(dyn std::error::Error + 'static)> = Some(e);
    while let Some(err) = cur {
        if let Some(io) = err.downcast_ref::<std::io::Error>() {
            return io.kind() == std::io::ErrorKind::BrokenPipe;
        }
        cur = err.source();
    }
    false
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Generate(args) => generate(args),
        Command::Fit(args) => fit(args),
        Command::Eval(args) => eval(args),
        Command::Bench(args) => bench(args),
        Command::PartitionSim(args) => partition_sim(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        // reader closed the pipe early, as with `| head`
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numerical(_) | Error::Domain { .. } => ExitCode::from(EXIT_NUMERICAL),
                _ => ExitCode::from(EXIT_CONFIG),
            }
        }
    }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> mepvi::Result<T> {
    path.map_or_else(|| Ok(T::default()), read_json)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> mepvi::Result<T> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Input {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn create_output(dir: &Path, name: &str) -> mepvi::Result<BufWriter<File>> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|source| Error::Io { path, source })
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> mepvi::Result<()> {
    let mut out = create_output(dir, name)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out).and_then(|_| out.flush()).map_err(|source| Error::Io {
        path: dir.join(name),
        source,
    })
}

fn generate(args: GenerateArgs) -> mepvi::Result<()> {
    let mut cfg: GenerateConfig = read_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(n) = args.n {
        cfg.n = n;
    }
    if let Some(m) = args.entities {
        cfg.allocation = EntityAllocation::Uniform { entities: m };
    }
    if let Some(beta) = args.beta {
        cfg.beta = beta;
    }
    let schema = Schema::uniform(cfg.num_attributes, cfg.domain_size, cfg.beta)?;
    let (table, truth) = generate_with_allocation(cfg.n, &schema, cfg.allocation, cfg.seed)?;

    write_json(&args.out, "config.json", &cfg)?;
    write_records(&table, schema.names(), create_output(&args.out, "records.csv")?)?;
    write_assignment_csv(&truth.partition, "entity_id", create_output(&args.out, "truth.csv")?)?;
    write_json(&args.out, "schema.json", &SchemaSpec::describe(&schema))
}

fn fit(args: FitArgs) -> mepvi::Result<()> {
    let mut cfg: FitRunConfig = read_config(args.config.as_deref())?;
    if args.data.is_some() {
        cfg.data = args.data;
    }
    if args.schema.is_some() {
        cfg.schema = args.schema;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(engine) = args.engine {
        cfg.engine = engine.into();
    }
    if args.beta.is_some() {
        cfg.beta = args.beta;
    }
    args.model.apply(&mut cfg.fit, &mut cfg.svi);

    let data = cfg.data.clone().ok_or_else(|| Error::InvalidParameter("no record file given (use --data)".into()))?;
    let spec = cfg.schema.as_deref().map(SchemaSpec::from_json_file).transpose()?;
    let loaded = load_records(&data, spec.as_ref(), cfg.beta)?;
    if args.model.batch_size.is_none() {
        cfg.svi.batch_size = cfg.svi.batch_size.min(loaded.table.n());
    }

    let result: FitResult = match cfg.engine {
        Engine::Full => fit_full_vi(&loaded.table, &loaded.schema, &cfg.fit, cfg.seed)?,
        Engine::Collapsed => fit_collapsed_vi(&loaded.table, &loaded.schema, &cfg.fit, cfg.seed)?,
        Engine::Svi => fit_svi(&loaded.table, &loaded.schema, &cfg.fit, &cfg.svi, cfg.seed)?,
    };

    write_json(&args.out, "config.json", &cfg)?;
    write_json(&args.out, "fit.json", &result)?;
    result.write_assignment_csv(create_output(&args.out, "assignment.csv")?)
}

fn eval(args: EvalArgs) -> mepvi::Result<()> {
    let estimate = read_assignment_csv(&args.estimate)?;
    let truth = read_assignment_csv(&args.truth)?;
    let mut report = EvalReport::compare(&estimate, &truth)?;
    if let Some(path) = &args.fit {
        let fit: FitResult = read_json(path)?;
        report.wallclock_seconds = Some(fit.wallclock_seconds);
        let mut echo = serde_json::to_value(&fit)?;
        if let Some(map) = echo.as_object_mut() {
            for key in ["elbo_trace", "hard_assignment", "cluster_sizes"] {
                map.remove(key);
            }
        }
        report.config = Some(echo);
    }
    match &args.out {
        Some(dir) => write_json(dir, "eval.json", &report),
        None => {
            let text = serde_json::to_string_pretty(&report)?;
            writeln!(std::io::stdout().lock(), "{text}").map_err(|source| Error::Io {
                path: "<stdout>".into(),
                source,
            })
        }
    }
}

fn bench(args: BenchArgs) -> mepvi::Result<()> {
    let mut cfg: BenchConfig = read_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(engine) = args.engine {
        cfg.engines = vec![BenchEngine {
            engine: engine.into(),
            top_v: None,
        }];
    }
    if let Some(beta) = args.beta {
        cfg.beta = beta;
    }
    if let Some(r) = args.replicates {
        cfg.replicates = r;
    }
    if let Some(n) = args.n {
        cfg.n = n;
    }
    if let Some(m) = args.entities {
        cfg.entities = m;
    }
    args.model.apply(&mut cfg.fit, &mut cfg.svi);
    if args.model.batch_size.is_none() {
        cfg.svi.batch_size = cfg.svi.batch_size.min(cfg.n);
    }

    let report = run_benchmark(&cfg)?;
    write_json(&args.out, "config.json", &cfg)?;
    write_bench_rows_csv(&report.rows, create_output(&args.out, "bench_rows.csv")?)?;
    write_bench_summary_csv(&report.aggregates, create_output(&args.out, "bench_summary.csv")?)
}

fn partition_sim(args: PartitionSimArgs) -> mepvi::Result<()> {
    let mut cfg: PartitionSimConfig = read_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(a) = args.alpha {
        cfg.alpha = a;
    }
    if let Some(l) = args.lambda {
        cfg.lambda = l;
    }
    if let Some(n) = args.n {
        cfg.n = n;
    }
    if let Some(r) = args.reps {
        cfg.reps = r;
    }
    let params = MepParams::new(cfg.alpha, cfg.lambda)?;
    let rows = microclustering_report(&params, &cfg.n, cfg.reps, cfg.seed)?;
    match &args.out {
        Some(dir) => {
            write_json(dir, "config.json", &cfg)?;
            write_report_csv(&rows, create_output(dir, "partition_sim.csv")?)
        }
        None => write_report_csv(&rows, std::io::stdout().lock()),
    }
}
