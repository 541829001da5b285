//! The `avalign` command line: argument definitions and the five commands.
//!
//! Every command resolves its [`RunConfig`] before touching the filesystem.
//! Outputs land in `<run root>/<command>-<digest prefix>`, where the run
//! root is `--run-root`, else `$AVALIGN_RUN_ROOT`, else `runs`.

pub mod ablate;
pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

pub use ablate::{run_matrix, AblationReport, Cell, Matrix, RunOutcome};
pub use config::{parse_config_text, read_config_file, Assignments, RunConfig};

use crate::analyze::{self, AnalysisTap};
use crate::data::{generate_splits, write_dataset, Manifest, Sample, Split, MANIFEST_FILE};
use crate::encoder::{load_checkpoint, save_checkpoint, FusionModel, FusionVariant};
use crate::error::{Error, Result};
use crate::posenc::PosEncKind;
use crate::train::{evaluate, train, write_metrics_csv, write_train_log};

pub const RUN_ROOT_ENV: &str = "AVALIGN_RUN_ROOT";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved";
const DIGEST_PREFIX: usize = 12;

#[derive(Debug, Parser)]
#[command(name = "avalign", version, about = "Time-aligned audio-visual fusion experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic alignment dataset.
    GenData(GenDataArgs),
    /// Train one model and save checkpoints and metrics.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Train an ablation matrix over several seeds.
    Ablate(AblateArgs),
    /// Probe feature dynamics of one or two checkpoints.
    Analyze(AnalyzeArgs),
}

/// Config sources shared by every command.
#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory; must not exist or be empty.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct ModelFlags {
    /// Dataset directory (`paths.data`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub fusion: Option<String>,
    #[arg(long)]
    pub posenc: Option<String>,
    /// Matching-loss weight; 0 disables the loss.
    #[arg(long)]
    pub lambda_ctm: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub run_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub flags: ModelFlags,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Preset matrix: `fusion` (every fusion strategy) or `posenc` (every
    /// encoding without and with the matching loss).
    #[arg(long, conflicts_with_all = ["fusions", "posencs", "ctm"])]
    pub table: Option<String>,
    /// Comma-separated fusion variants for a custom matrix.
    #[arg(long, value_delimiter = ',')]
    pub fusions: Vec<String>,
    /// Comma-separated positional encodings for a custom matrix.
    #[arg(long, value_delimiter = ',')]
    pub posencs: Vec<String>,
    /// Comma-separated `on`/`off` matching-loss settings for a custom matrix.
    #[arg(long, value_delimiter = ',')]
    pub ctm: Vec<String>,
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    #[command(flatten)]
    pub flags: ModelFlags,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// One checkpoint for trajectories, two for a paired comparison.
    #[arg(long, required = true, num_args = 1)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value = "ctm")]
    pub tap: AnalysisTap,
    #[arg(long, default_value_t = analyze::DEFAULT_BINS)]
    pub bins: usize,
    /// Clips whose trajectories are written, per checkpoint.
    #[arg(long, default_value_t = 5)]
    pub trajectories: usize,
    #[arg(long)]
    pub run_root: Option<PathBuf>,
}

/// Failure classes mapped to exit codes by the binary.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration; nothing was run.
    Usage(Error),
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(e) | CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

fn usage<T>(r: Result<T>) -> Result<T, CliError> {
    r.map_err(CliError::Usage)
}

fn runtime<T>(r: Result<T>) -> Result<T, CliError> {
    r.map_err(CliError::Runtime)
}

/// Runs one parsed command; progress goes to stdout.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => cmd_ablate(&a).map(|_| ()),
        Command::Analyze(a) => cmd_analyze(&a).map(|_| ()),
    }
}

/// File, then `--set`, then dedicated flags.
pub fn resolve_config(cfg: &ConfigArgs, flags: Assignments) -> Result<RunConfig> {
    let mut layers = Vec::new();
    if let Some(path) = &cfg.config {
        layers.push(read_config_file(path)?);
    }
    layers.push(cfg.set.iter().map(|s| config::parse_assignment(s)).collect::<Result<_>>()?);
    layers.push(flags);
    RunConfig::resolve(&layers)
}

fn push<T: ToString>(out: &mut Assignments, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        out.push((key.to_string(), v.to_string()));
    }
}

fn model_flag_assignments(f: &ModelFlags) -> Assignments {
    let mut out = Assignments::new();
    push(&mut out, "paths.data", &f.data.as_ref().map(|p| p.display().to_string()));
    push(&mut out, "model.fusion", &f.fusion);
    push(&mut out, "model.posenc", &f.posenc);
    push(&mut out, "ctm.lambda", &f.lambda_ctm);
    push(&mut out, "train.epochs", &f.epochs);
    push(&mut out, "train.lr", &f.lr);
    push(&mut out, "train.batch_size", &f.batch_size);
    push(&mut out, "train.seed", &f.seed);
    out
}

/// `--run-root`, else the environment override, else `runs`.
pub fn run_root(flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(RUN_ROOT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from("runs"),
    }
}

/// `<root>/<command>-<first hex digits of digest>`.
pub fn run_dir(root: &Path, command: &str, digest: &str) -> PathBuf {
    root.join(format!("{command}-{}", &digest[..DIGEST_PREFIX.min(digest.len())]))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require_dataset(cfg: &RunConfig) -> Result<&Path> {
    cfg.dataset
        .as_deref()
        .ok_or_else(|| Error::Config("no dataset given (use --data or paths.data)".into()))
}

/// Reads and validates the manifest under `dir`.
pub fn open_dataset(dir: &Path, n_classes: usize) -> Result<Manifest> {
    let manifest = Manifest::read(&dir.join(MANIFEST_FILE))?;
    manifest.validate(dir, n_classes)?;
    Ok(manifest)
}

fn load(dir: &Path, m: &Manifest, split: Split, cfg: &RunConfig) -> Result<Vec<Sample>> {
    m.load_split(dir, split, cfg.model.n_classes, cfg.model.d_in_audio, cfg.model.d_in_video)
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    let mut flags = Assignments::new();
    push(&mut flags, "data.seed", &a.seed);
    push(&mut flags, "data.n_train", &a.n_train);
    push(&mut flags, "data.n_test", &a.n_test);
    let cfg = usage(resolve_config(&a.cfg, flags))?;
    usage(cfg.synthetic_spec().validate())?;
    let (tr, te) = runtime(generate_splits(&cfg.synthetic_spec(), cfg.n_train, cfg.n_test))?;
    runtime(write_dataset(&a.out, &[(Split::Train, &tr), (Split::Test, &te)]))?;
    println!("wrote {} train and {} test clips to {}", tr.len(), te.len(), a.out.display());
    Ok(())
}

/// Artifacts of one `train` invocation.
#[derive(Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
    pub final_accuracy: Option<f64>,
    pub best_accuracy: Option<f64>,
}

pub fn cmd_train(a: &TrainArgs) -> Result<TrainOutput, CliError> {
    let cfg = usage(resolve_config(&a.cfg, model_flag_assignments(&a.flags)))?;
    let data_dir = usage(require_dataset(&cfg))?.to_path_buf();
    let manifest = runtime(open_dataset(&data_dir, cfg.model.n_classes))?;
    let train_set = runtime(load(&data_dir, &manifest, Split::Train, &cfg))?;
    let eval_split = if manifest.split(Split::Val).next().is_some() { Split::Val } else { Split::Test };
    let eval_set = runtime(load(&data_dir, &manifest, eval_split, &cfg))?;
    let eval = (!eval_set.is_empty()).then_some(eval_set.as_slice());

    let dir = run_dir(&run_root(a.flags.run_root.as_deref()), "train", &cfg.digest());
    runtime(create_dir(&dir))?;
    runtime(write(&dir.join(RESOLVED_CONFIG_FILE), &cfg.to_text()))?;
    println!("run directory {}", dir.display());

    let mut model = runtime(FusionModel::new(cfg.model.clone(), cfg.train.seed))?;
    let run = runtime(train(&mut model, &train_set, eval, &cfg.train, cfg.ctm_for_training(), &mut |e| {
        let acc = e.accuracy.map(|x| format!(" {eval_split} accuracy {x:.4}")).unwrap_or_default();
        println!("epoch {:>3} lr {:.3e} cls {:.4} ctm {:.4}{acc}", e.epoch, e.lr, e.cls_loss, e.ctm_loss);
    }))?;

    runtime(write_metrics_csv(&dir.join("metrics.csv"), &run))?;
    runtime(write_train_log(&dir.join("train.jsonl"), &run))?;
    runtime(save_checkpoint(&dir.join("checkpoint_final.bin"), &model))?;
    if let Some(best) = &run.best_params {
        let mut m = model.clone();
        runtime(m.params_mut().load_from(best))?;
        runtime(save_checkpoint(&dir.join("checkpoint_best.bin"), &m))?;
    }
    let summary = serde_json::json!({
        "eval_split": eval_split.to_string(),
        "final_accuracy": run.final_accuracy(),
        "best_epoch": run.best_epoch,
        "best_accuracy": run.best_accuracy,
        "parameters": model.count_parameters(),
    });
    runtime(write(&dir.join("summary.json"), &format!("{summary:#}\n")))?;
    if let (Some(f), Some(b)) = (run.final_accuracy(), run.best_accuracy) {
        println!("final accuracy {f:.4}, best {b:.4} at epoch {}", run.best_epoch.unwrap_or(0));
    }
    Ok(TrainOutput { dir, final_accuracy: run.final_accuracy(), best_accuracy: run.best_accuracy })
}

pub fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    if !a.data.join(MANIFEST_FILE).is_file() {
        return Err(CliError::Runtime(Error::Config(format!("no dataset manifest in {}", a.data.display()))));
    }
    let model = runtime(load_checkpoint(&a.checkpoint))?;
    let c = model.config();
    let manifest = runtime(open_dataset(&a.data, c.n_classes))?;
    let samples = runtime(manifest.load_split(&a.data, a.split, c.n_classes, c.d_in_audio, c.d_in_video))?;
    let rep = runtime(evaluate(&model, &samples, a.batch_size))?;
    println!("{} clips, accuracy {:.4}", rep.n, rep.accuracy);
    println!("confusion (rows = label, columns = prediction):");
    for row in &rep.confusion {
        println!("  {}", row.iter().map(|n| format!("{n:>5}")).collect::<String>());
    }
    Ok(())
}

fn parse_list<T: std::str::FromStr<Err = Error>>(items: &[String]) -> Result<Vec<T>> {
    items.iter().map(|s| s.trim().parse()).collect()
}

fn parse_ctm_list(items: &[String]) -> Result<Vec<bool>> {
    items
        .iter()
        .map(|s| match s.trim() {
            "on" | "true" | "with" => Ok(true),
            "off" | "false" | "without" => Ok(false),
            other => Err(Error::Config(format!("ctm setting must be on or off, got '{other}'"))),
        })
        .collect()
}

/// Matrix requested on the command line.
pub fn ablation_matrix(a: &AblateArgs) -> Result<Matrix> {
    match a.table.as_deref() {
        Some("fusion") | Some("2") => Ok(Matrix::fusion_table()),
        Some("posenc") | Some("3") => Ok(Matrix::posenc_table()),
        Some(other) => Err(Error::Config(format!("unknown table '{other}' (expected fusion or posenc)"))),
        None => {
            let fusions: Vec<FusionVariant> = parse_list(&a.fusions)?;
            let posencs: Vec<PosEncKind> = parse_list(&a.posencs)?;
            let ctm = parse_ctm_list(&a.ctm)?;
            Ok(Matrix::product(&fusions, &posencs, &ctm))
        }
    }
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<AblationReport, CliError> {
    let cfg = usage(resolve_config(&a.cfg, model_flag_assignments(&a.flags)))?;
    let matrix = usage(ablation_matrix(a))?;
    if matrix.is_empty() {
        return Err(CliError::Usage(Error::Config(
            "empty ablation matrix: pass --table or non-empty --fusions, --posencs and --ctm".into(),
        )));
    }
    if a.seeds == 0 {
        return Err(CliError::Usage(Error::Config("--seeds must be at least 1".into())));
    }
    let data_dir = usage(require_dataset(&cfg))?.to_path_buf();
    let manifest = runtime(open_dataset(&data_dir, cfg.model.n_classes))?;
    let train_set = runtime(load(&data_dir, &manifest, Split::Train, &cfg))?;
    let test_set = runtime(load(&data_dir, &manifest, Split::Test, &cfg))?;

    let key = format!("{}\nmatrix = {}\nseeds = {}\n", cfg.to_text(), matrix.describe(), a.seeds);
    let dir = run_dir(&run_root(a.flags.run_root.as_deref()), "ablate", &hex::encode(Sha256::digest(key.as_bytes())));
    runtime(create_dir(&dir))?;
    runtime(write(&dir.join(RESOLVED_CONFIG_FILE), &key))?;
    println!("run directory {}", dir.display());

    let report = runtime(run_matrix(&cfg, &matrix, a.seeds, &train_set, &test_set, &mut |o, _| match (&o.accuracy, &o.error) {
        (Some(acc), _) => println!("{} seed {}: accuracy {acc:.4}", o.cell.label(), o.seed),
        (_, Some(e)) => println!("{} seed {}: FAILED {e}", o.cell.label(), o.seed),
        _ => {}
    }))?;
    runtime(write(&dir.join("results.csv"), &ablate::results_csv(&report)))?;
    runtime(write(&dir.join("table.csv"), &ablate::table_csv(&report)))?;
    runtime(write(&dir.join("runs.csv"), &ablate::runs_csv(&report)))?;
    print!("{}", ablate::table_csv(&report));
    Ok(report)
}

/// Output file stem for checkpoint `i`: its file stem, made unique.
fn model_names(paths: &[PathBuf]) -> Vec<String> {
    let stems: Vec<String> = paths
        .iter()
        .map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
        .collect();
    let unique = stems.len() == 1 || stems.windows(2).all(|w| w[0] != w[1]) && !stems.iter().any(String::is_empty);
    if unique {
        stems
    } else {
        (0..paths.len()).map(|i| format!("model{i}")).collect()
    }
}

pub fn cmd_analyze(a: &AnalyzeArgs) -> Result<PathBuf, CliError> {
    if a.checkpoint.len() > 2 {
        return Err(CliError::Usage(Error::Config("analyze takes one or two checkpoints".into())));
    }
    if !a.data.join(MANIFEST_FILE).is_file() {
        return Err(CliError::Runtime(Error::Config(format!("no dataset manifest in {}", a.data.display()))));
    }
    let manifest = runtime(Manifest::read(&a.data.join(MANIFEST_FILE)))?;
    let models = runtime(a.checkpoint.iter().map(|p| load_checkpoint(p)).collect::<Result<Vec<_>>>())?;
    let c = models[0].config();
    if models.iter().any(|m| (m.config().d_in_audio, m.config().d_in_video) != (c.d_in_audio, c.d_in_video)) {
        return Err(CliError::Usage(Error::Config("checkpoints expect different feature widths".into())));
    }
    runtime(manifest.validate(&a.data, c.n_classes))?;
    let samples = runtime(manifest.load_split(&a.data, a.split, c.n_classes, c.d_in_audio, c.d_in_video))?;

    let mut key = format!("data = {}\nsplit = {}\ntap = {:?}\nbins = {}\n", a.data.display(), a.split, a.tap, a.bins);
    for p in &a.checkpoint {
        let bytes = runtime(fs::read(p).map_err(|e| Error::io(p, e)))?;
        key.push_str(&format!("checkpoint = {}\n", hex::encode(Sha256::digest(&bytes))));
    }
    let dir = run_dir(&run_root(a.run_root.as_deref()), "analyze", &hex::encode(Sha256::digest(key.as_bytes())));
    runtime(create_dir(&dir))?;
    runtime(write(&dir.join(RESOLVED_CONFIG_FILE), &key))?;

    let names = model_names(&a.checkpoint);
    for (model, name) in models.iter().zip(&names) {
        let tdir = dir.join("trajectories").join(name);
        runtime(create_dir(&tdir))?;
        for s in samples.iter().take(a.trajectories) {
            let (au, vi) = runtime(analyze::sample_trajectories(model, s, a.tap))?;
            runtime(write(&tdir.join(format!("{}.csv", s.id)), &analyze::trajectory_csv(&au, &vi)))?;
        }
    }
    if models.len() == 2 {
        let (da, db) = runtime(analyze::dataset_agreement_report(&models[0], &models[1], &samples, a.tap, a.bins))?;
        for (name, d) in names.iter().zip([&da, &db]) {
            runtime(write(&dir.join(format!("histogram_{name}.csv")), &analyze::histogram_csv(d)))?;
            let mut per = String::from("id,agreement\n");
            for (id, v) in &d.per_sample {
                per.push_str(&format!("{id},{v}\n"));
            }
            runtime(write(&dir.join(format!("agreement_{name}.csv")), &per))?;
        }
        let summary = analyze::summary_csv(&[(&names[0], &da), (&names[1], &db)]);
        runtime(write(&dir.join("summary.csv"), &summary))?;
        print!("{summary}");
    }
    println!("analysis written to {}", dir.display());
    Ok(dir)
}
