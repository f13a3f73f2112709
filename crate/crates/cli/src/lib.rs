//! Command implementations behind the `gtpool` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use gtpool_core::graphio::{build_features, erdos_renyi, parse_tudataset, Dataset, Graph};
use gtpool_core::model::{GtPoolNet, ModelConfig};
use gtpool_core::numcore::{Rng, Tape};
use gtpool_core::sampler::{
    brute_force_select, rws_interval, rwsv_interval, sample_points, select, SampleSpec, SamplerMethod,
    ScoreDistribution,
};
use gtpool_core::trainer::{self, normalize_key, sweep_table, MetricsReport, RunConfig};
use thiserror::Error;

pub const DATA_ROOT_ENV: &str = "GTPOOL_DATA_ROOT";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] gtpool_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    /// 1 for configuration problems, 2 for everything that fails at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(gtpool_core::Error::Config(_)) => 1,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "gtpool", version, about = "Graph classification with transformer pooling and roulette-wheel node sampling")]
pub struct Cli {
    /// Log verbosity (error, warn, info, debug).
    #[arg(long, global = true, default_value = "warn")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cross-validate a model and write report.json and curves.csv.
    Train(RunArgs),
    /// Cross-validate once per value of one configuration key.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Key to vary, e.g. mu, lambda, layers, sampler.
        #[arg(long)]
        axis: String,
        /// Comma-separated values for the axis.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Time forward and backward passes over mini-batches.
    Profile {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        /// Skip the backward pass (not supported: backward timings would be meaningless).
        #[arg(long)]
        no_grad: bool,
    },
    /// Forward+backward time of the default model on random graphs.
    BenchScale(BenchArgs),
    /// Show the roulette wheel, intervals and selections for a score vector.
    SampleDemo {
        /// Comma-separated positive scores (normalised internally).
        #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
        scores: Vec<f64>,
        #[arg(long, default_value_t = 0.5)]
        mu: f64,
        /// topk, rws, rwsv or all.
        #[arg(long, default_value = "all")]
        method: String,
    },
}

/// Run configuration flags; each overrides the same-named config-file key.
#[derive(Debug, Default, Clone, Args)]
pub struct RunArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<String>,
    /// Directory holding `<NAME>/<NAME>_A.txt` etc. Defaults to $GTPOOL_DATA_ROOT, then `data`.
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<String>,
    #[arg(long)]
    pub sampler: Option<String>,
    #[arg(long)]
    pub mu: Option<String>,
    #[arg(long)]
    pub lambda: Option<String>,
    #[arg(long)]
    pub layers: Option<String>,
    #[arg(long)]
    pub heads: Option<String>,
    #[arg(long)]
    pub hidden: Option<String>,
    #[arg(long)]
    pub batch: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub wd: Option<String>,
    #[arg(long)]
    pub dropout: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub patience: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub repeats: Option<String>,
    #[arg(long)]
    pub folds: Option<String>,
    #[arg(long)]
    pub val_fraction: Option<String>,
    #[arg(long)]
    pub score_gating: Option<String>,
    #[arg(long)]
    pub jobs: Option<String>,
    /// Parent directory for run directories.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "500,1000,1200")]
    pub nodes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.4,0.6,0.8")]
    pub densities: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Memory budget in MiB; defaults to the available system memory.
    #[arg(long)]
    pub mem_budget_mb: Option<u64>,
}

/// Configuration resolved from defaults, an optional file and flags.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub run: RunConfig,
    pub data_root: PathBuf,
    pub out: PathBuf,
}

impl RunArgs {
    fn overrides(&self) -> Vec<(&'static str, &str)> {
        let pairs: [(&'static str, &Option<String>); 19] = [
            ("dataset", &self.dataset),
            ("features", &self.features),
            ("sampler", &self.sampler),
            ("mu", &self.mu),
            ("lambda", &self.lambda),
            ("layers", &self.layers),
            ("heads", &self.heads),
            ("hidden", &self.hidden),
            ("batch", &self.batch),
            ("lr", &self.lr),
            ("wd", &self.wd),
            ("dropout", &self.dropout),
            ("epochs", &self.epochs),
            ("patience", &self.patience),
            ("seed", &self.seed),
            ("repeats", &self.repeats),
            ("folds", &self.folds),
            ("val_fraction", &self.val_fraction),
            ("score_gating", &self.score_gating),
        ];
        let mut out: Vec<_> = pairs
            .into_iter()
            .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
            .collect();
        if let Some(j) = &self.jobs {
            out.push(("jobs", j));
        }
        out
    }

    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> Result<Resolved> {
        let mut run = RunConfig::default();
        let mut data_root = None;
        let mut out = None;
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            for (i, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    CliError::Config(format!("{} line {}: expected `key = value`", path.display(), i + 1))
                })?;
                let value = value.trim();
                match normalize_key(key).as_str() {
                    "data_root" => data_root = Some(PathBuf::from(value)),
                    "out" => out = Some(PathBuf::from(value)),
                    k => run
                        .set(k, value)
                        .map_err(|e| CliError::Config(format!("{} line {}: {e}", path.display(), i + 1)))?,
                }
            }
        }
        for (k, v) in self.overrides() {
            run.set(k, v).map_err(|e| CliError::Config(e.to_string()))?;
        }
        run.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let data_root = self
            .data_root
            .clone()
            .or(data_root)
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"));
        let out = if self.out == Path::new("runs") {
            out.unwrap_or_else(|| self.out.clone())
        } else {
            self.out.clone()
        };
        Ok(Resolved { run, data_root, out })
    }
}

/// Reads `<root>/<name>` and attaches node features.
pub fn load_dataset(root: &Path, run: &RunConfig) -> Result<Dataset> {
    let dir = root.join(&run.dataset);
    if !dir.is_dir() {
        return Err(CliError::Io {
            path: dir,
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        });
    }
    let raw = parse_tudataset(&dir)?;
    Ok(build_features(&raw, run.features)?)
}

/// Creates a fresh directory under `parent`; never reuses an existing one.
pub fn create_run_dir(parent: &Path, label: &str) -> Result<PathBuf> {
    fs::create_dir_all(parent).map_err(io_err(parent))?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    for attempt in 0u32.. {
        let name = if attempt == 0 {
            format!("{label}-{stamp}")
        } else {
            format!("{label}-{stamp}-{attempt}")
        };
        let dir = parent.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io_err(&dir)(e)),
        }
    }
    unreachable!("u32 range exhausted")
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(io_err(path))
}

pub fn write_report(dir: &Path, report: &MetricsReport) -> Result<()> {
    write_file(&dir.join("report.json"), &report.to_json())?;
    write_file(&dir.join("curves.csv"), &report.curves_csv())?;
    write_file(&dir.join("config.txt"), &report.config.to_text())
}

/// `train`: returns the report and the run directory it was written to.
pub fn cmd_train(args: &RunArgs) -> Result<(MetricsReport, PathBuf)> {
    let cfg = args.resolve()?;
    let dataset = load_dataset(&cfg.data_root, &cfg.run)?;
    let dir = create_run_dir(&cfg.out, &format!("{}-{}", cfg.run.dataset, cfg.run.sampler))?;
    let ckpt = dir.join("checkpoints");
    fs::create_dir_all(&ckpt).map_err(io_err(&ckpt))?;
    let report = trainer::cross_validate_in(&cfg.run, &dataset, Some(&ckpt))?;
    write_report(&dir, &report)?;
    println!("{}", report.summary());
    println!("run directory: {}", dir.display());
    Ok((report, dir))
}

/// `sweep`: one report per value plus `sweep.csv`.
pub fn cmd_sweep(args: &RunArgs, axis: &str, values: &[String]) -> Result<(Vec<trainer::SweepEntry>, PathBuf)> {
    let cfg = args.resolve()?;
    let dataset = load_dataset(&cfg.data_root, &cfg.run)?;
    let entries = trainer::sweep(&cfg.run, &dataset, axis, values)?;
    let dir = create_run_dir(&cfg.out, &format!("{}-sweep-{}", cfg.run.dataset, normalize_key(axis)))?;
    for e in &entries {
        let sub = dir.join(format!("{}={}", e.axis, e.value));
        fs::create_dir_all(&sub).map_err(io_err(&sub))?;
        write_report(&sub, &e.report)?;
    }
    let table = sweep_table(&entries);
    write_file(&dir.join("sweep.csv"), &table)?;
    print!("{table}");
    println!("run directory: {}", dir.display());
    Ok((entries, dir))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileResult {
    pub forward_ms: (f64, f64),
    pub backward_ms: (f64, f64),
    pub iters: usize,
    pub batch: usize,
    pub num_parameters: usize,
}

impl ProfileResult {
    pub fn table(&self, label: &str) -> String {
        format!(
            "model\tparams\tforward_ms\tbackward_ms\n{label}\t{}\t{:.2} ± {:.2}\t{:.2} ± {:.2}\n",
            self.num_parameters, self.forward_ms.0, self.forward_ms.1, self.backward_ms.0, self.backward_ms.1
        )
    }
}

/// Times forward and backward passes over mini-batches of `batch` graphs on
/// the calling thread. Warm-up iterations are not measured.
pub fn profile_model(model: &GtPoolNet, graphs: &[Graph], batch: usize, warmup: usize, iters: usize, seed: u64) -> Result<ProfileResult> {
    if graphs.is_empty() || batch == 0 {
        return Err(CliError::Config("profiling needs at least one graph and batch ≥ 1".into()));
    }
    if iters < 100 {
        return Err(CliError::Config(format!("profiling needs ≥ 100 measured iterations, got {iters}")));
    }
    let mut fwd = Vec::with_capacity(iters);
    let mut bwd = Vec::with_capacity(iters);
    let mut cursor = 0;
    for it in 0..warmup + iters {
        let mut rng = Rng::derive(seed, &[it as u64]);
        let tapes: Vec<Tape> = (0..batch).map(|_| Tape::new()).collect();
        let t0 = Instant::now();
        let mut losses = Vec::with_capacity(batch);
        for tape in &tapes {
            let g = &graphs[cursor % graphs.len()];
            cursor += 1;
            let logits = model.forward(tape, g, true, &mut rng)?;
            losses.push(logits.cross_entropy(&[g.label.min(model.config.num_classes - 1)])?);
        }
        let t1 = Instant::now();
        for loss in losses {
            loss.tape().backward(loss)?;
        }
        let t2 = Instant::now();
        if it >= warmup {
            fwd.push((t1 - t0).as_secs_f64() * 1e3);
            bwd.push((t2 - t1).as_secs_f64() * 1e3);
        }
    }
    Ok(ProfileResult {
        forward_ms: trainer::mean_std(&fwd),
        backward_ms: trainer::mean_std(&bwd),
        iters,
        batch,
        num_parameters: model.count_parameters(),
    })
}

pub fn cmd_profile(args: &RunArgs, warmup: usize, iters: usize, no_grad: bool) -> Result<ProfileResult> {
    if no_grad {
        return Err(CliError::Config(
            "profiling without gradients would report a zero backward time; drop --no-grad".into(),
        ));
    }
    let cfg = args.resolve()?;
    let dataset = load_dataset(&cfg.data_root, &cfg.run)?;
    let model = GtPoolNet::new(
        cfg.run.model_config(dataset.feature_dim, dataset.num_classes.max(2)),
        cfg.run.seed,
    )?;
    let result = profile_model(&model, &dataset.graphs, cfg.run.batch, warmup, iters, cfg.run.seed)?;
    print!("{}", result.table(&format!("gtpool-{}", cfg.run.sampler)));
    Ok(result)
}

/// One cell of the scalability table.
#[derive(Clone, Debug, PartialEq)]
pub enum BenchCell {
    Millis(f64),
    OutOfMemory,
    Failed(String),
}

impl std::fmt::Display for BenchCell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BenchCell::Millis(ms) => write!(f, "{ms:.2}"),
            BenchCell::OutOfMemory => f.write_str("OOM"),
            BenchCell::Failed(msg) => write!(f, "error: {msg}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchTable {
    pub nodes: Vec<usize>,
    pub densities: Vec<f64>,
    /// `cells[i][j]` is for `nodes[i]`, `densities[j]`.
    pub cells: Vec<Vec<BenchCell>>,
}

impl BenchTable {
    pub fn render(&self) -> String {
        let mut out = String::from("nodes");
        for d in &self.densities {
            let _ = write!(out, "\t{:.0}%", d * 100.0);
        }
        out.push('\n');
        for (n, row) in self.nodes.iter().zip(&self.cells) {
            let _ = write!(out, "{n}");
            for c in row {
                let _ = write!(out, "\t{c}");
            }
            out.push('\n');
        }
        out
    }

    pub fn get(&self, n: usize, density: f64) -> Option<&BenchCell> {
        let i = self.nodes.iter().position(|&x| x == n)?;
        let j = self.densities.iter().position(|&d| (d - density).abs() < 1e-12)?;
        Some(&self.cells[i][j])
    }
}

/// Model used for scalability runs: default hyperparameters, scalar input.
pub fn bench_model_config() -> ModelConfig {
    RunConfig::default().model_config(1, 2)
}

/// Upper estimate of peak bytes for one forward+backward on an `n`-node
/// graph; dominated by the `n×n` attention buffers and their adjoints.
pub fn estimate_bytes(n: usize, cfg: &ModelConfig) -> u64 {
    let mut total = 0u64;
    let mut size = n as u64;
    let d = cfg.hidden as u64;
    for _ in 0..cfg.layers {
        // per head: logits, scaled, softmax, masked, each with an adjoint; plus the shared mask
        let square = size * size * (cfg.heads as u64 * 8 + 1);
        let rows = size * d * 40;
        total += 8 * (square + rows);
        size = gtpool_core::sampler::num_to_sample(size as usize, cfg.mu) as u64;
    }
    total
}

fn available_memory() -> Option<u64> {
    let info = fs::read_to_string("/proc/meminfo").ok()?;
    let line = info.lines().find(|l| l.starts_with("MemAvailable:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

pub fn cmd_bench_scale(args: &BenchArgs) -> Result<BenchTable> {
    if args.nodes.iter().any(|&n| n < 2) {
        return Err(CliError::Config("node counts must be ≥ 2".into()));
    }
    if args.densities.iter().any(|&d| !(d > 0.0 && d <= 1.0)) {
        return Err(CliError::Config("densities must be in (0, 1]".into()));
    }
    let budget = args
        .mem_budget_mb
        .map(|mb| mb * 1024 * 1024)
        .or_else(available_memory)
        .unwrap_or(u64::MAX);
    let cfg = bench_model_config();
    let model = GtPoolNet::new(cfg, args.seed)?;
    let mut cells = Vec::with_capacity(args.nodes.len());
    for &n in &args.nodes {
        let mut row = Vec::with_capacity(args.densities.len());
        for &density in &args.densities {
            let cell = if estimate_bytes(n, &cfg) > budget {
                BenchCell::OutOfMemory
            } else {
                bench_cell(&model, n, density, args.seed)
            };
            log::info!("n = {n}, density = {density}: {cell}");
            row.push(cell);
        }
        cells.push(row);
    }
    let table = BenchTable {
        nodes: args.nodes.clone(),
        densities: args.densities.clone(),
        cells,
    };
    print!("{}", table.render());
    Ok(table)
}

fn bench_cell(model: &GtPoolNet, n: usize, density: f64, seed: u64) -> BenchCell {
    let graph = match erdos_renyi(n, density, seed) {
        Ok(g) => g,
        Err(e) => return BenchCell::Failed(e.to_string()),
    };
    let run = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| -> gtpool_core::Result<f64> {
        let tape = Tape::new();
        let mut rng = Rng::new(seed);
        let start = Instant::now();
        let logits = model.forward(&tape, &graph, true, &mut rng)?;
        let loss = logits.cross_entropy(&[0])?;
        tape.backward(loss)?;
        Ok(start.elapsed().as_secs_f64() * 1e3)
    }));
    match run {
        Ok(Ok(ms)) => BenchCell::Millis(ms),
        Ok(Err(e)) => BenchCell::Failed(e.to_string()),
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            if msg.contains("capacity") || msg.contains("alloc") {
                BenchCell::OutOfMemory
            } else {
                BenchCell::Failed(msg)
            }
        }
    }
}

fn node_name(i: usize) -> String {
    if i < 26 {
        ((b'a' + i as u8) as char).to_string()
    } else {
        format!("#{i}")
    }
}

/// Selections per method, in the order they were requested.
pub type DemoSelections = Vec<(SamplerMethod, Vec<usize>)>;

pub fn cmd_sample_demo(scores: &[f64], mu: f64, method: &str) -> Result<(String, DemoSelections)> {
    let dist = ScoreDistribution::from_positive_scores(scores)?;
    let methods: Vec<SamplerMethod> = if method.eq_ignore_ascii_case("all") {
        SamplerMethod::ALL.to_vec()
    } else {
        vec![method.parse()?]
    };
    let n = dist.len();
    let mut out = String::new();
    let _ = writeln!(out, "node\tpmf\tcdf\trws_interval\trwsv_interval");
    for i in 0..n {
        let (a, b) = rws_interval(&dist, i);
        let (c, d) = rwsv_interval(&dist, i);
        let _ = writeln!(
            out,
            "{}\t{:.4}\t{:.4}\t({a:.4}, {b:.4}]\t({c:.4}, {d:.4}]",
            node_name(i),
            dist.pmf()[i],
            dist.cdf()[i]
        );
    }
    let points: Vec<String> = sample_points(n, mu).iter().map(|k| format!("{k:.4}")).collect();
    let _ = writeln!(out, "sample points (μ = {mu}): {}", points.join(", "));
    let mut selections = Vec::new();
    for m in methods {
        let spec = SampleSpec::new(mu, m)?;
        let idx = select(&dist, &spec)?;
        debug_assert_eq!(idx, brute_force_select(&dist, &spec));
        let names: Vec<String> = idx.iter().map(|&i| node_name(i)).collect();
        let _ = writeln!(out, "{m}: {{{}}}", names.join(", "));
        selections.push((m, idx));
    }
    print!("{out}");
    Ok((out, selections))
}

/// Dispatches a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(&args).map(|_| ()),
        Command::Sweep { run, axis, values } => cmd_sweep(&run, &axis, &values).map(|_| ()),
        Command::Profile {
            run,
            iters,
            warmup,
            no_grad,
        } => cmd_profile(&run, warmup, iters, no_grad).map(|_| ()),
        Command::BenchScale(args) => cmd_bench_scale(&args).map(|_| ()),
        Command::SampleDemo { scores, mu, method } => cmd_sample_demo(&scores, mu, &method).map(|_| ()),
    }
}
