//! The `mvssl` command line.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::analysis::{checkpoint_cka, mean_actmap_dice, MetricsReport};
use crate::config::RunConfig;
use crate::data::{generate_synthetic, make_splits, Dataset, Splits, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::finetune::{evaluate, run_finetune, Task, TaskModel};
use crate::image::GrayImage;
use crate::models::{Checkpoint, EncoderArch};
use crate::pretrain::{run_pretraining, RunOutputs};

#[derive(Debug, Parser)]
#[command(name = "mvssl", version, about = "Multi-view contrastive pre-training, fine-tuning and analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic two-view dataset.
    GenData(GenDataArgs),
    /// Self-supervised pre-training.
    Pretrain(PretrainArgs),
    /// Fine-tune a task network on a label proportion.
    Finetune(FinetuneArgs),
    /// Score task checkpoints on the test split.
    Eval(EvalArgs),
    /// Representation analyses.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub patients: usize,
    #[arg(long, default_value_t = 0.15)]
    pub missing_rate: f32,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Overwrite an existing dataset in `--out`.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to start from (two-stage pre-training).
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda: Option<f32>,
    #[arg(long)]
    pub unpaired_fraction: Option<f64>,
    /// Continue from `--out` if it exists.
    #[arg(long)]
    pub resume: bool,
    /// With `--resume`, start again from an empty memory bank.
    #[arg(long, requires = "resume")]
    pub fresh_bank: bool,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub task: Task,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub proportion: Option<u32>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Pre-trained checkpoint; random initialization when absent.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of trials, seeded `seed, seed+1, ...`.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub task: Task,
    /// Task checkpoints, one trial each.
    #[arg(long, num_args = 1.., required_unless_present = "random")]
    pub ckpt: Vec<PathBuf>,
    /// Evaluate this many untrained networks instead of checkpoints.
    #[arg(long, conflicts_with = "ckpt")]
    pub random: Option<u64>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Baseline report for a paired t-test over trials.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Activation-map Dice against nodule masks on the test split.
    Actmap(ActmapArgs),
    /// Layer-wise CKA between two checkpoints on the test split.
    Cka(CkaArgs),
}

#[derive(Debug, Args)]
pub struct ActmapArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f32>>,
    /// Backbone stage to read (default: last).
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CkaArgs {
    #[arg(long)]
    pub ckpt_a: PathBuf,
    #[arg(long)]
    pub ckpt_b: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for `cka.csv` and `cka.png`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub max_samples: usize,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// `out` with `suffix` appended to its file name.
fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().map(OsString::from).unwrap_or_default();
    name.push(suffix);
    out.with_file_name(name)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn print_json(value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    writeln!(std::io::stdout(), "{text}").map_err(|e| Error::io("<stdout>", e))
}

fn open_data(dir: &Path, cfg: &RunConfig) -> Result<(Dataset, Splits)> {
    let data = Dataset::load(dir)?;
    let splits = make_splits(&data.records, &cfg.splits, cfg.split_seed)?;
    Ok((data, splits))
}

/// Test-split images (and masks where present), at most `cap` of them.
fn test_images(data: &Dataset, splits: &Splits, cap: usize) -> (Vec<GrayImage>, Vec<Option<GrayImage>>) {
    splits
        .test
        .iter()
        .flat_map(|&i| data.patients[i].views())
        .take(cap)
        .map(|v| (v.image.clone(), v.mask.clone()))
        .unzip()
}

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    let occupied = std::fs::read_dir(&args.out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied {
        if !args.force {
            return Err(Error::InvalidArgument(format!(
                "{} is not empty; pass --force to overwrite",
                args.out.display()
            )));
        }
        for sub in ["images", "masks"] {
            let d = args.out.join(sub);
            if d.exists() {
                std::fs::remove_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            }
        }
        let m = args.out.join(MANIFEST_FILE);
        if m.exists() {
            std::fs::remove_file(&m).map_err(|e| Error::io(&m, e))?;
        }
    }
    let (_, summary) = generate_synthetic(&args.out, args.patients, args.missing_rate, args.size, args.seed)?;
    print_json(&summary)
}

pub fn pretrain(args: &PretrainArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = Some(s);
    }
    cfg = cfg.effective();
    let p = &mut cfg.pretrain;
    if let Some(e) = args.epochs {
        p.epochs = e;
    }
    if let Some(l) = args.lambda {
        p.lambda = l;
    }
    if let Some(u) = args.unpaired_fraction {
        p.unpaired_fraction = u;
    }
    if args.init.is_some() {
        p.init_checkpoint = args.init.clone();
    }
    cfg.validate()?;
    let (data, splits) = open_data(&args.data, &cfg)?;
    create_parent(&args.out)?;
    let mut written = cfg.clone();
    written.pretrain = cfg.pretrain.effective();
    written.save(sidecar(&args.out, ".config.toml"))?;
    let pool = splits.pretrain(cfg.pretrain.unpaired_fraction);
    log::info!(
        "pre-training on {} patients ({} paired) from {}",
        pool.len(),
        pool.iter().filter(|&&i| data.patients[i].is_paired()).count(),
        args.data.display()
    );
    let outputs = RunOutputs {
        checkpoint: Some(args.out.clone()),
        log: Some(sidecar(&args.out, ".log.jsonl")),
        resume: args.resume,
        fresh_bank: args.fresh_bank,
    };
    let out = run_pretraining(&cfg.pretrain, &cfg.encoder, &cfg.augment, &data.patients, &pool, &outputs)?;
    if let Some(last) = out.history.last() {
        log::info!("final mean loss {:.5}", last.mean_loss);
    }
    Ok(())
}

#[derive(Serialize)]
struct TrialSummary {
    seed: u64,
    lr0: f32,
    best_epoch: usize,
    val_metric: f64,
    test_metric: f64,
}

pub fn finetune(args: &FinetuneArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = Some(s);
    }
    cfg = cfg.effective();
    cfg.finetune.task = args.task;
    if let Some(r) = args.proportion {
        cfg.finetune.proportion = r;
    }
    if let Some(e) = args.epochs {
        cfg.finetune.epochs = e;
    }
    if args.seeds == 0 {
        return Err(Error::InvalidArgument("--seeds must be at least 1".into()));
    }
    cfg.validate()?;
    let init = args.init.as_ref().map(Checkpoint::load).transpose()?;
    let (data, splits) = open_data(&args.data, &cfg)?;
    create_dir(&args.out)?;
    cfg.save(args.out.join("config.toml"))?;
    let mut trials = Vec::new();
    let mut summaries = Vec::new();
    for k in 0..args.seeds {
        let mut ft = cfg.finetune.clone();
        ft.seed = cfg.finetune.seed + k;
        let out = run_finetune(&ft, &cfg.encoder, &cfg.augment, &data.patients, &splits, init.as_ref())?;
        let test = evaluate(&out.model, &data.patients, &splits.test)?;
        let dir = args.out.join(format!("seed-{}", ft.seed));
        create_dir(&dir)?;
        out.model.to_checkpoint().save(dir.join("model.ckpt"))?;
        let mut lines = Vec::new();
        for rec in &out.history {
            lines.extend(serde_json::to_vec(rec)?);
            lines.push(b'\n');
        }
        let hist = dir.join("history.jsonl");
        std::fs::write(&hist, lines).map_err(|e| Error::io(&hist, e))?;
        log::info!(
            "seed {}: best epoch {} val {:.4} test {} {:.4}",
            ft.seed,
            out.best_epoch,
            out.best_metric,
            ft.task.metric(),
            test
        );
        trials.push(test);
        summaries.push(TrialSummary {
            seed: ft.seed,
            lr0: out.lr0,
            best_epoch: out.best_epoch,
            val_metric: out.best_metric,
            test_metric: test,
        });
    }
    write_json(&args.out.join("trials.json"), &summaries)?;
    let report = MetricsReport::new(args.task.name(), args.task.metric(), trials, cfg.hash(), data.manifest_hash()?);
    report.save(args.out.join("report.json"))?;
    print_json(&report)
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?.effective();
    cfg.validate()?;
    let (data, splits) = open_data(&args.data, &cfg)?;
    let mut trials = Vec::new();
    if let Some(n) = args.random {
        for s in 0..n {
            let model = TaskModel::new(args.task, &cfg.encoder, s)?;
            trials.push(evaluate(&model, &data.patients, &splits.test)?);
        }
    }
    for path in &args.ckpt {
        let ckpt = Checkpoint::load(path)?;
        let model = TaskModel::from_checkpoint(args.task, &cfg.encoder, &ckpt, cfg.finetune.allow_fingerprint_mismatch)?;
        trials.push(evaluate(&model, &data.patients, &splits.test)?);
    }
    let mut report = MetricsReport::new(args.task.name(), args.task.metric(), trials, cfg.hash(), data.manifest_hash()?);
    if let Some(other) = &args.compare {
        let baseline = MetricsReport::load(other)?;
        report.compare(&baseline)?;
    }
    if let Some(out) = &args.out {
        create_parent(out)?;
        report.save(out)?;
    }
    print_json(&report)
}

#[derive(Serialize)]
struct ActmapTable {
    thresholds: Vec<f32>,
    dice: Vec<f64>,
    images: usize,
}

pub fn actmap(args: &ActmapArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(t) = &args.thresholds {
        cfg.activation.thresholds = t.clone();
    }
    if args.layer.is_some() {
        cfg.activation.layer = args.layer;
    }
    cfg.validate()?;
    let (data, splits) = open_data(&args.data, &cfg)?;
    let ckpt = Checkpoint::load(&args.ckpt)?;
    ckpt.verify(cfg.encoder.fingerprint(), false)?;
    let (arch, mut store) = EncoderArch::build(&cfg.encoder, 0)?;
    ckpt.load_into(&mut store, "", "backbone.")?;
    let (images, masks): (Vec<GrayImage>, Vec<GrayImage>) = {
        let (i, m) = test_images(&data, &splits, usize::MAX);
        i.into_iter().zip(m).filter_map(|(i, m)| m.map(|m| (i, m))).unzip()
    };
    if images.is_empty() {
        return Err(Error::Data("no test views with masks".into()));
    }
    let dice = mean_actmap_dice(&arch.backbone, &store, &images, &masks, &cfg.activation)?;
    let mut out = String::from("threshold  dice\n");
    for (t, d) in cfg.activation.thresholds.iter().zip(&dice) {
        out.push_str(&format!("{t:<9}  {d:.4}\n"));
    }
    print!("{out}");
    if let Some(p) = &args.out {
        create_parent(p)?;
        write_json(p, &ActmapTable { thresholds: cfg.activation.thresholds.clone(), dice, images: images.len() })?;
    }
    Ok(())
}

pub fn cka(args: &CkaArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    cfg.validate()?;
    let (data, splits) = open_data(&args.data, &cfg)?;
    let (images, _) = test_images(&data, &splits, args.max_samples);
    let a = Checkpoint::load(&args.ckpt_a)?;
    let b = Checkpoint::load(&args.ckpt_b)?;
    let grid = checkpoint_cka(&cfg.encoder, &a, &b, &images)?;
    create_dir(&args.out)?;
    grid.write_csv(args.out.join("cka.csv"))?;
    grid.write_png(args.out.join("cka.png"), 16)?;
    let diag: Vec<String> = grid.diagonal().iter().map(|v| format!("{v:.4}")).collect();
    println!("{} probe images; diagonal {}", images.len(), diag.join(" "));
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Finetune(a) => finetune(a),
        Command::Eval(a) => eval(a),
        Command::Analyze(AnalyzeCommand::Actmap(a)) => actmap(a),
        Command::Analyze(AnalyzeCommand::Cka(a)) => cka(a),
    }
}

/// Parses `std::env::args`, runs the command and returns the exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn sidecar_appends() {
        assert_eq!(sidecar(Path::new("runs/a.ckpt"), ".log.jsonl"), PathBuf::from("runs/a.ckpt.log.jsonl"));
    }

    #[test]
    fn thresholds_parse_as_list() {
        let cli = Cli::try_parse_from(["mvssl", "analyze", "actmap", "--ckpt", "c", "--data", "d", "--thresholds", "0.3,0.5"]).unwrap();
        match cli.command {
            Command::Analyze(AnalyzeCommand::Actmap(a)) => assert_eq!(a.thresholds, Some(vec![0.3, 0.5])),
            other => panic!("{other:?}"),
        }
    }
}
