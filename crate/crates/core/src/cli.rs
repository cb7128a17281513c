//! Command-line front end.
//!
//! Usage errors exit with status 2, runtime failures with status 1. Both
//! print a single `error: <kind>: <message>` line on stderr.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{load_dataset, save_dataset, select_top_genes, synth_generate, StDataset, SynthConfig};
use crate::error::{Error, Result};
use crate::metrics::cross_validate;
use crate::numerics::{Leaves, ParamTree};
use crate::training::{predict_dataset, train, ConfigOverrides, ModelParams, StepUnit, TrainConfig, TrainReport};

pub const PARAMS_FILE: &str = "params.ckpt";
pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_FILE: &str = "report.csv";

#[derive(Parser, Debug)]
#[command(
    name = "nh2st",
    version,
    about = "Predict spatial gene expression from patch features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with a planted linear map
    Synth(SynthArgs),
    /// Train a model and write a checkpoint directory
    Train(TrainArgs),
    /// k-fold cross-validation with the configuration of a checkpoint
    Eval(EvalArgs),
    /// Predict expression for every spot of a dataset
    Predict(PredictArgs),
    /// Cross-validate every combination of a hyperparameter grid
    Ablate(AblateArgs),
    /// Write x,y,pred,label for one gene
    ExportHeatmap(HeatmapArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    /// Grid side length; the dataset has grid² spots
    #[arg(long, default_value_t = 8)]
    grid: usize,
    #[arg(long, default_value_t = 32)]
    genes: usize,
    #[arg(long, default_value_t = 128)]
    patch_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Standard deviation of the spatially smoothed noise
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Noise correlation length in grid units
    #[arg(long, default_value_t = 1.5)]
    corr_len: f64,
    /// Write raw counts instead of log-normalized values
    #[arg(long)]
    counts: bool,
}

/// Hyperparameter flags. Each one overrides the config file.
#[derive(Args, Debug, Default)]
struct ConfigFlags {
    /// Embedding width N [default: 64]
    #[arg(long = "feature-dim")]
    feature_dim: Option<usize>,
    /// Patch feature length P [default: from dataset]
    #[arg(long)]
    patch_dim: Option<usize>,
    /// Genes kept n [default: from dataset, or 32 for raw counts]
    #[arg(long)]
    genes: Option<usize>,
    /// Attention tokens T [default: 8]
    #[arg(long)]
    tokens: Option<usize>,
    /// Spatial neighbors K [default: 8]
    #[arg(long)]
    neighbors: Option<usize>,
    /// Hypergraph layers L [default: 2]
    #[arg(long)]
    layers: Option<usize>,
    /// Hyperedge size [default: 3]
    #[arg(long)]
    tau_deg: Option<usize>,
    /// Contrastive temperature [default: 0.05]
    #[arg(long)]
    tau_temp: Option<f64>,
    /// Spot-level contrastive weight [default: 1]
    #[arg(long)]
    lambda1: Option<f64>,
    /// Neighborhood contrastive weight [default: 0.5]
    #[arg(long)]
    lambda2: Option<f64>,
    /// Initial learning rate [default: 0.0001]
    #[arg(long)]
    lr: Option<f64>,
    /// Learning-rate decay factor [default: 0.9]
    #[arg(long)]
    decay_rate: Option<f64>,
    /// Decay period [default: 50]
    #[arg(long)]
    step_size: Option<usize>,
    /// Unit of the decay period [default: epoch]
    #[arg(long, value_enum)]
    step_unit: Option<StepUnit>,
    /// Batch size B [default: 8]
    #[arg(long)]
    batch_size: Option<usize>,
    /// [default: 20]
    #[arg(long)]
    epochs: Option<usize>,
    /// Initialization and shuffle seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigFlags {
    fn overrides(&self) -> ConfigOverrides {
        ConfigOverrides {
            feature_dim: self.feature_dim,
            patch_dim: self.patch_dim,
            genes: self.genes,
            tokens: self.tokens,
            neighbors: self.neighbors,
            layers: self.layers,
            tau_deg: self.tau_deg,
            tau_temp: self.tau_temp,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lr: self.lr,
            decay_rate: self.decay_rate,
            step_size: self.step_size,
            step_unit: self.step_unit,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// TOML file of hyperparameters
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint directory to create
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory whose configuration is evaluated
    #[arg(long)]
    ckpt: PathBuf,
    /// Number of folds
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Report CSV [default: stdout]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Prediction CSV [default: stdout]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Grid axes such as K=4,8,16,25 L=1,2,3,4. Keys: K, L, N, T, B,
    /// tau_deg, tau_temp, lambda1, lambda2, lambdas (pairs a:b), lr, epochs
    #[arg(long, num_args = 1.., required = true)]
    grid: Vec<String>,
    /// Number of folds per combination
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Result CSV [default: stdout]
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Args, Debug)]
struct HeatmapArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Gene name
    #[arg(long)]
    gene: String,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return 2;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.kind());
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Ablate(a) => ablate(a),
        Command::ExportHeatmap(a) => export_heatmap(a),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn emit(out: Option<&Path>, contents: &str) -> Result<()> {
    match out {
        Some(p) => write_file(p, contents),
        None => {
            print!("{contents}");
            Ok(())
        }
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        grid_side: a.grid,
        patch_dim: a.patch_dim,
        genes: a.genes,
        noise_sigma: a.noise,
        corr_len: a.corr_len,
        emit_counts: a.counts,
    };
    save_dataset(&synth_generate(&cfg, a.seed)?, &a.out)
}

/// Resolves the training config: defaults, then dataset shape, then the
/// config file, then flags.
fn resolve_config(ds: &StDataset, file: Option<&Path>, flags: &ConfigFlags) -> Result<TrainConfig> {
    let from_file = match file {
        Some(p) => ConfigOverrides::from_file(p)?,
        None => ConfigOverrides::default(),
    };
    let merged = from_file.merged(&flags.overrides());
    let mut cfg = TrainConfig {
        patch_dim: ds.patch_dim(),
        genes: if ds.is_normalized() {
            ds.genes()
        } else {
            TrainConfig::default().genes.min(ds.genes())
        },
        ..TrainConfig::default()
    };
    merged.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

/// Applies gene selection to raw counts and checks the gene count.
fn prepare_dataset(ds: StDataset, genes: usize) -> Result<StDataset> {
    let ds = if ds.is_normalized() {
        ds
    } else {
        select_top_genes(&ds, genes)?
    };
    if ds.genes() != genes {
        return Err(Error::DimensionMismatch(format!(
            "dataset has {} genes, model expects {genes}",
            ds.genes()
        )));
    }
    Ok(ds)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let raw = load_dataset(&a.data)?;
    let cfg = resolve_config(&raw, a.config.as_deref(), &a.flags)?;
    let ds = prepare_dataset(raw, cfg.genes)?;
    let (params, mut report) = train::<f64>(&ds, &cfg)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let ckpt = a.out.join(PARAMS_FILE);
    params.to_tree().save(&ckpt)?;
    report.checkpoint = Some(ckpt);
    write_file(&a.out.join(CONFIG_FILE), &cfg.to_toml())?;
    write_file(&a.out.join(REPORT_FILE), &report.to_csv())
}

/// Reads a checkpoint directory written by `train`.
pub fn load_checkpoint(dir: &Path) -> Result<(TrainConfig, ModelParams<f64>)> {
    let cfg_path = dir.join(CONFIG_FILE);
    if !cfg_path.is_file() {
        return Err(Error::MissingFile(cfg_path));
    }
    let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let cfg = TrainConfig::from_toml(&text).map_err(|e| match e {
        Error::Parse { msg, .. } => Error::parse(&cfg_path, msg),
        other => other,
    })?;
    cfg.validate()?;
    let tree = ParamTree::load(&dir.join(PARAMS_FILE))?;
    let mut params = ModelParams::init(&cfg)?;
    params.load_tree(&tree)?;
    Ok((cfg, params))
}

fn eval(a: EvalArgs) -> Result<()> {
    let (cfg, _) = load_checkpoint(&a.ckpt)?;
    let ds = prepare_dataset(load_dataset(&a.data)?, cfg.genes)?;
    let cv = cross_validate(&ds, &cfg, a.k, cfg.seed)?;
    emit(a.out.as_deref(), &cv.to_csv())
}

fn predict_cmd(a: PredictArgs) -> Result<()> {
    let (cfg, params) = load_checkpoint(&a.ckpt)?;
    let ds = prepare_dataset(load_dataset(&a.data)?, cfg.genes)?;
    let pred = predict_dataset(&params, &ds)?;
    let mut out = String::from("spot_id");
    for g in ds.gene_names() {
        out.push(',');
        out.push_str(g);
    }
    out.push('\n');
    for (i, s) in ds.spots().iter().enumerate() {
        out.push_str(&s.spot_id);
        for v in pred.row(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    emit(a.out.as_deref(), &out)
}

fn export_heatmap(a: HeatmapArgs) -> Result<()> {
    let (cfg, params) = load_checkpoint(&a.ckpt)?;
    let ds = prepare_dataset(load_dataset(&a.data)?, cfg.genes)?;
    let g = ds
        .gene_index(&a.gene)
        .ok_or_else(|| Error::UnknownGene(a.gene.clone()))?;
    let pred = predict_dataset(&params, &ds)?;
    let mut out = String::from("x,y,pred,label\n");
    for (i, s) in ds.spots().iter().enumerate() {
        let _ = writeln!(out, "{},{},{},{}", s.coord.0, s.coord.1, pred[(i, g)], s.expr[g]);
    }
    write_file(&a.out, &out)
}

/// One axis of an ablation grid: a key and its raw values.
#[derive(Clone, Debug, PartialEq)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<String>,
}

/// Parses `KEY=v1,v2,...`.
pub fn parse_grid_axis(spec: &str) -> Result<GridAxis> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("grid axis {spec:?} is not KEY=v1,v2,...")))?;
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
    if values.iter().any(String::is_empty) {
        return Err(Error::invalid(format!("grid axis {spec:?} has an empty value")));
    }
    let axis = GridAxis {
        key: key.trim().to_string(),
        values,
    };
    let mut probe = TrainConfig::default();
    for v in &axis.values {
        apply_grid_value(&mut probe, &axis.key, v)?;
    }
    Ok(axis)
}

fn parse_num<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::invalid(format!("grid value {v:?} for {key} is not a number")))
}

fn apply_grid_value(cfg: &mut TrainConfig, key: &str, v: &str) -> Result<()> {
    match key {
        "K" => cfg.neighbors = parse_num(key, v)?,
        "L" => cfg.layers = parse_num(key, v)?,
        "N" => cfg.feature_dim = parse_num(key, v)?,
        "T" => cfg.tokens = parse_num(key, v)?,
        "B" => cfg.batch_size = parse_num(key, v)?,
        "tau_deg" => cfg.tau_deg = parse_num(key, v)?,
        "tau_temp" => cfg.tau_temp = parse_num(key, v)?,
        "lambda1" => cfg.lambda1 = parse_num(key, v)?,
        "lambda2" => cfg.lambda2 = parse_num(key, v)?,
        "lambdas" => {
            let (l1, l2) = v
                .split_once(':')
                .ok_or_else(|| Error::invalid(format!("lambdas value {v:?} is not a:b")))?;
            cfg.lambda1 = parse_num(key, l1)?;
            cfg.lambda2 = parse_num(key, l2)?;
        }
        "lr" => cfg.lr = parse_num(key, v)?,
        "epochs" => cfg.epochs = parse_num(key, v)?,
        other => return Err(Error::invalid(format!("unknown grid key {other:?}"))),
    }
    Ok(())
}

/// Every combination of the axes, the first axis varying slowest.
pub fn grid_combinations(axes: &[GridAxis]) -> Vec<Vec<&str>> {
    let mut combos: Vec<Vec<&str>> = vec![Vec::new()];
    for axis in axes {
        combos = combos
            .into_iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut c = prefix.clone();
                    c.push(v.as_str());
                    c
                })
            })
            .collect();
    }
    combos
}

fn ablate(a: AblateArgs) -> Result<()> {
    let axes = a.grid.iter().map(|s| parse_grid_axis(s)).collect::<Result<Vec<_>>>()?;
    let raw = load_dataset(&a.data)?;
    let base = resolve_config(&raw, a.config.as_deref(), &a.flags)?;
    let ds = prepare_dataset(raw, base.genes)?;

    let mut out = String::new();
    for axis in &axes {
        let _ = write!(out, "{},", axis.key);
    }
    out.push_str("mse_mean,mse_std,mae_mean,mae_std,pcc_mean,pcc_std\n");
    for combo in grid_combinations(&axes) {
        let mut cfg = base.clone();
        for (axis, v) in axes.iter().zip(&combo) {
            apply_grid_value(&mut cfg, &axis.key, v)?;
        }
        // Hyperedges cannot be larger than a neighborhood.
        cfg.tau_deg = cfg.tau_deg.min(cfg.neighbors + 1);
        cfg.validate()?;
        let cv = cross_validate(&ds, &cfg, a.k, cfg.seed)?;
        for v in &combo {
            let _ = write!(out, "{v},");
        }
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            cv.mse.mean, cv.mse.std, cv.mae.mean, cv.mae.std, cv.pcc.mean, cv.pcc.std
        );
    }
    emit(a.out.as_deref(), &out)
}

/// Flag help text and the report header, for tests that check them.
#[doc(hidden)]
pub fn help_text(subcommand: &str) -> String {
    use clap::CommandFactory;
    let mut cmd = Cli::command();
    cmd.find_subcommand_mut(subcommand)
        .map(|c| c.render_long_help().to_string())
        .unwrap_or_default()
}

#[doc(hidden)]
pub fn report_header() -> &'static str {
    TrainReport::CSV_HEADER
}
