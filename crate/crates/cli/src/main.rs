mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nuquant::diagnostics::{
    collision_stats, compare_bias, density_ranks, pca2d, points_csv, usage_all_levels, usage_csv,
    BiasReport, CollisionStats, UsageStats,
};
use nuquant::embedding::{
    gen_synthetic, ids_path, load_embeddings, save_embeddings, SyntheticSpec,
};
use nuquant::neighbors::{build_neighbor_table, neighbors_to_jsonl, DEFAULT_K};
use nuquant::quantizer::{
    quantize_set, read_sids, train, write_sids, QuantizerModel, SemanticId, TrainConfig, UpdateRule,
};
use nuquant::transform::TransformKind;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use config::{set, ConfigFile};

#[derive(Debug, Parser)]
#[command(
    name = "nuquant",
    version,
    about = "Non-uniform residual quantization of embeddings into semantic IDs"
)]
struct Cli {
    /// JSON file with option values; flags take precedence over it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Worker threads for the parallel phases (0 = all cores). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Log progress to standard error.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a skewed synthetic embedding set.
    Synth(SynthArgs),
    /// Train a quantizer on an embedding set.
    Train(TrainArgs),
    /// Assign semantic IDs with a trained model.
    Quantize(QuantizeArgs),
    /// Per-level codebook usage of a semantic ID table.
    Stats(StatsArgs),
    /// Usage divergence between two semantic ID tables.
    Compare(CompareArgs),
    /// 2-d PCA projection with density ranks.
    Pca(PcaArgs),
    /// Top-k inner-product neighbors of every item.
    Neighbors(NeighborsArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    dense_mass: Option<f64>,
    #[arg(long)]
    cluster_spread: Option<f64>,
    #[arg(long)]
    tail_spread: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    items: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    codes: Option<usize>,
    /// Latent dimension (autoencoder only).
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, value_parser = ["identity", "ks", "logistic"])]
    transform: Option<String>,
    #[arg(long)]
    per_dimension: bool,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    lambda_nuq: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    autoencoder: bool,
    #[arg(long, value_parser = ["gradient", "ema"])]
    update: Option<String>,
    #[arg(long)]
    out_model: PathBuf,
}

#[derive(Debug, Args)]
struct QuantizeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Append a per-tuple suffix that makes every ID unique.
    #[arg(long)]
    dedup: bool,
    /// `.jsonl` writes JSON lines, anything else CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[arg(long)]
    sids: PathBuf,
    /// Codebook size; inferred from the largest code when omitted.
    #[arg(long)]
    codes: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Also write `level,code,count` plot data here.
    #[arg(long)]
    usage_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    generated: PathBuf,
    #[arg(long)]
    codes: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PcaArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct NeighborsArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(nuquant::Error),
}

impl From<nuquant::Error> for CliError {
    fn from(e: nuquant::Error) -> Self {
        CliError::Lib(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Lib(e) if e.is_config() => 1,
            CliError::Lib(e) if e.is_numerical() => 3,
            CliError::Lib(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Record of one run, written as `<primary output>.manifest.json`.
#[derive(Debug, Serialize)]
struct RunManifest {
    tool: &'static str,
    version: &'static str,
    subcommand: &'static str,
    config: Value,
    inputs: BTreeMap<&'static str, String>,
    outputs: BTreeMap<&'static str, String>,
    seed: Option<u64>,
    threads: usize,
    wall_clock_secs: f64,
}

fn manifest_path(primary: &Path) -> PathBuf {
    let mut name = primary.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    primary.with_file_name(name)
}

struct Run {
    subcommand: &'static str,
    config: Value,
    inputs: BTreeMap<&'static str, String>,
    outputs: BTreeMap<&'static str, String>,
    seed: Option<u64>,
    primary: PathBuf,
}

impl Run {
    fn new(subcommand: &'static str, primary: &Path) -> Self {
        let mut outputs = BTreeMap::new();
        outputs.insert("primary", primary.display().to_string());
        Self {
            subcommand,
            config: Value::Null,
            inputs: BTreeMap::new(),
            outputs,
            seed: None,
            primary: primary.to_path_buf(),
        }
    }

    fn input(mut self, name: &'static str, path: &Path) -> Self {
        self.inputs.insert(name, path.display().to_string());
        self
    }

    fn output(&mut self, name: &'static str, path: &Path) {
        self.outputs.insert(name, path.display().to_string());
    }

    fn finish(self, threads: usize, started: Instant) -> CliResult<()> {
        let manifest = RunManifest {
            tool: "nuquant",
            version: nuquant::VERSION,
            subcommand: self.subcommand,
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
            seed: self.seed,
            threads,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        };
        let path = manifest_path(&self.primary);
        let mut text = serde_json::to_string_pretty(&manifest).map_err(nuquant::Error::from)?;
        text.push('\n');
        write_file(&path, text)
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| nuquant::Error::io(path, e).into())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(nuquant::Error::from)?;
    text.push('\n');
    write_file(path, text)
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config serializes")
}

fn synth(args: SynthArgs, file: &ConfigFile) -> CliResult<Run> {
    let mut spec: SyntheticSpec = file.resolve("synth", SyntheticSpec::default())?;
    set(&mut spec.n_dense_clusters, args.clusters);
    set(&mut spec.dense_mass, args.dense_mass);
    set(&mut spec.cluster_spread, args.cluster_spread);
    set(&mut spec.tail_spread, args.tail_spread);
    set(&mut spec.dim, args.dim);
    set(&mut spec.n_items, args.items);
    set(&mut spec.seed, args.seed);
    spec.validate()?;
    let set = gen_synthetic(&spec)?;
    save_embeddings(&set, &args.out)?;
    let mut run = Run::new("synth", &args.out);
    run.output("ids", &ids_path(&args.out));
    run.config = to_value(&spec);
    run.seed = Some(spec.seed);
    Ok(run)
}

fn train_cmd(args: TrainArgs, file: &ConfigFile) -> CliResult<Run> {
    let mut cfg: TrainConfig = file.resolve("train", TrainConfig::default())?;
    set(&mut cfg.levels, args.levels);
    set(&mut cfg.codebook_size, args.codes);
    set(&mut cfg.latent_dim, args.dim);
    set(&mut cfg.mu, args.mu);
    set(&mut cfg.lambda_nuq, args.lambda_nuq);
    set(&mut cfg.epochs, args.epochs);
    set(&mut cfg.learning_rate, args.lr);
    set(&mut cfg.batch_size, args.batch);
    set(&mut cfg.seed, args.seed);
    if let Some(t) = args.transform {
        cfg.transform = t.parse::<TransformKind>()?;
    }
    if let Some(u) = args.update {
        cfg.update_rule = u.parse::<UpdateRule>()?;
    }
    cfg.per_dimension |= args.per_dimension;
    cfg.use_autoencoder |= args.autoencoder;
    cfg.validate()?;

    let data = load_embeddings(&args.input)?;
    let model = train(&data, &cfg)?;
    model.save(&args.out_model)?;
    if let Some(last) = model.history.last() {
        log::info!(
            "final loss {:.6} after {} epochs",
            last.loss,
            model.history.len()
        );
    }
    let mut run = Run::new("train", &args.out_model).input("embeddings", &args.input);
    // The effective configuration, e.g. latent_dim resolved against the data.
    run.config = to_value(&model.config);
    run.seed = Some(cfg.seed);
    Ok(run)
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct QuantizeConfig {
    dedup: bool,
}

fn quantize_cmd(args: QuantizeArgs, file: &ConfigFile) -> CliResult<Run> {
    let mut cfg: QuantizeConfig = file.resolve("quantize", QuantizeConfig::default())?;
    cfg.dedup |= args.dedup;
    let model = QuantizerModel::load(&args.model)?;
    let data = load_embeddings(&args.input)?;
    let rows = quantize_set(&data, &model, cfg.dedup)?;
    write_sids(&args.out, &rows)?;
    let mut run = Run::new("quantize", &args.out)
        .input("embeddings", &args.input)
        .input("model", &args.model);
    run.config = to_value(&cfg);
    Ok(run)
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct CodesConfig {
    codes: Option<usize>,
}

fn infer_codes(tables: &[&[SemanticId]]) -> usize {
    tables
        .iter()
        .flat_map(|t| t.iter())
        .flat_map(|s| s.codes.iter())
        .max()
        .map_or(1, |&c| c as usize + 1)
}

fn load_sid_codes(path: &Path) -> CliResult<Vec<SemanticId>> {
    Ok(read_sids(path)?.into_iter().map(|r| r.sid).collect())
}

#[derive(Debug, Serialize)]
struct StatsReport {
    items: usize,
    codes: usize,
    levels: Vec<UsageStats>,
    collisions: CollisionStats,
}

fn stats_cmd(args: StatsArgs, file: &ConfigFile) -> CliResult<Run> {
    let mut cfg: CodesConfig = file.resolve("stats", CodesConfig::default())?;
    set(&mut cfg.codes, args.codes.map(Some));
    let sids = load_sid_codes(&args.sids)?;
    let codes = cfg.codes.unwrap_or_else(|| infer_codes(&[&sids]));
    let levels = usage_all_levels(&sids, codes)?;
    let report = StatsReport {
        items: sids.len(),
        codes,
        collisions: collision_stats(&sids)?,
        levels,
    };
    write_json(&args.out, &report)?;
    let mut run = Run::new("stats", &args.out).input("sids", &args.sids);
    if let Some(p) = &args.usage_csv {
        write_file(p, usage_csv(&report.levels))?;
        run.output("usage_csv", p);
    }
    run.config = json!({ "codes": codes });
    Ok(run)
}

fn compare_cmd(args: CompareArgs, file: &ConfigFile) -> CliResult<Run> {
    let mut cfg: CodesConfig = file.resolve("compare", CodesConfig::default())?;
    set(&mut cfg.codes, args.codes.map(Some));
    let target = load_sid_codes(&args.target)?;
    let generated = load_sid_codes(&args.generated)?;
    let codes = cfg
        .codes
        .unwrap_or_else(|| infer_codes(&[&target, &generated]));
    let report: BiasReport = compare_bias(&target, &generated, codes)?;
    write_json(&args.out, &report)?;
    let mut run = Run::new("compare", &args.out)
        .input("target", &args.target)
        .input("generated", &args.generated);
    run.config = json!({ "codes": codes });
    Ok(run)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct PcaConfig {
    bins: usize,
    seed: u64,
}

impl Default for PcaConfig {
    fn default() -> Self {
        Self { bins: 50, seed: 0 }
    }
}

fn pca_cmd(args: PcaArgs, file: &ConfigFile) -> CliResult<Run> {
    let mut cfg: PcaConfig = file.resolve("pca", PcaConfig::default())?;
    set(&mut cfg.bins, args.bins);
    set(&mut cfg.seed, args.seed);
    if cfg.bins == 0 {
        return Err(CliError::Usage("--bins must be at least 1".into()));
    }
    let data = load_embeddings(&args.input)?;
    let pca = pca2d(&data, cfg.seed)?;
    let ranks = density_ranks(&pca.coords, cfg.bins);
    write_file(&args.out, points_csv(&pca.coords, &ranks))?;
    log::info!(
        "explained variance {:.4} {:.4}",
        pca.explained[0],
        pca.explained[1]
    );
    let mut run = Run::new("pca", &args.out).input("embeddings", &args.input);
    run.config = to_value(&cfg);
    run.seed = Some(cfg.seed);
    Ok(run)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct NeighborsConfig {
    k: usize,
}

impl Default for NeighborsConfig {
    fn default() -> Self {
        Self { k: DEFAULT_K }
    }
}

fn neighbors_cmd(args: NeighborsArgs, file: &ConfigFile) -> CliResult<Run> {
    let mut cfg: NeighborsConfig = file.resolve("neighbors", NeighborsConfig::default())?;
    set(&mut cfg.k, args.k);
    if cfg.k == 0 {
        return Err(CliError::Usage("--k must be at least 1".into()));
    }
    let data = load_embeddings(&args.input)?;
    let table = build_neighbor_table(&data, cfg.k)?;
    write_file(&args.out, neighbors_to_jsonl(&table)?)?;
    let mut run = Run::new("neighbors", &args.out).input("embeddings", &args.input);
    run.config = to_value(&cfg);
    Ok(run)
}

fn run(cli: Cli) -> CliResult<()> {
    let started = Instant::now();
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    let file = ConfigFile::load(cli.config.as_deref())?;
    let mut run = match cli.command {
        Command::Synth(a) => synth(a, &file),
        Command::Train(a) => train_cmd(a, &file),
        Command::Quantize(a) => quantize_cmd(a, &file),
        Command::Stats(a) => stats_cmd(a, &file),
        Command::Compare(a) => compare_cmd(a, &file),
        Command::Pca(a) => pca_cmd(a, &file),
        Command::Neighbors(a) => neighbors_cmd(a, &file),
    }?;
    if let Some(path) = &cli.config {
        run.inputs.insert("config", path.display().to_string());
    }
    run.finish(cli.threads, started)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
