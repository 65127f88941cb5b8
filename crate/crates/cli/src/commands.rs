use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use viewcon::nn::load_checkpoint;
use viewcon::signal::{generate_synthetic_dataset, load_dataset, save_dataset, GeneratorParams, Profile, SyncedSample};
use viewcon::{Error, Result};

use crate::config::{parse_baseline_views, ExperimentConfig, Shots};
use crate::protocol::{self, CheckpointExtras, CHECKPOINT_DIR};
use crate::report::write_report_from_dirs;

#[derive(Debug, Parser)]
#[command(name = "viewcon", version, about = "Multi-view contrastive pretraining for spectrogram activity recognition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic synchronized multi-view dataset container.
    Generate(GenerateArgs),
    /// Contrastive pretraining of both view encoders on the training split.
    Pretrain(PretrainArgs),
    /// Freeze pretrained encoders and fine-tune a classifier.
    Finetune(FinetuneArgs),
    /// Supervised encoder + classifier from scratch, no pretraining.
    Baseline(BaselineArgs),
    /// Comparison tables and SVG charts from run directories.
    Report(ReportArgs),
    /// Full sweep: pretraining, fine-tuning and baselines over seeds and shots.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.9)]
    pub rho: f64,
    #[arg(long, default_value_t = 0.15)]
    pub sigma: f64,
    /// `full` (CSI 65x501, PWR 100x41) or `desk` (CSI 16x48, PWR 24x16).
    #[arg(long, default_value = "full")]
    pub profile: String,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// View pair, e.g. `csi1,csi2` or `csi1,pwr`.
    #[arg(long)]
    pub views: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Pretraining run directory or its checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// 1, 5, 10 (any positive count) or `all`.
    #[arg(long, default_value = "10")]
    pub shots: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the configuration stored in the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `csi1` (single receiver) or `joint` (both CSI receivers pooled).
    #[arg(long)]
    pub views: Option<String>,
    #[arg(long, default_value = "10")]
    pub shots: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated seeds, e.g. `0,1,2,3,4`.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Comma-separated shot counts, e.g. `1,5,10`.
    #[arg(long)]
    pub shots: Option<String>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Finetune(a) => finetune(a),
        Command::Baseline(a) => baseline(a),
        Command::Report(a) => report(a),
        Command::Experiment(a) => experiment(a),
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn required(opt: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    opt.ok_or_else(|| Error::Argument(format!("--{what} is required (or set \"{what}\" in the config)")))
}

fn load_data(cfg: &ExperimentConfig) -> Result<Vec<SyncedSample>> {
    let path = required(cfg.data.clone(), "data")?;
    Ok(load_dataset(&path)?.0)
}

fn generate(a: GenerateArgs) -> Result<()> {
    let params = GeneratorParams::new(a.per_class, a.sigma, a.rho, a.seed, Profile::by_name(&a.profile)?);
    let samples = generate_synthetic_dataset(&params)?;
    let manifest = save_dataset(&samples, Some(&params), &a.out)?;
    println!(
        "wrote {} samples ({} per class, profile {}, seed {}) to {}",
        manifest.samples.len(),
        a.per_class,
        a.profile,
        a.seed,
        a.out.display()
    );
    Ok(())
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if a.data.is_some() {
        cfg.data = a.data;
    }
    if a.out.is_some() {
        cfg.out = a.out;
    }
    if let Some(v) = a.views {
        cfg.views = v;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let out = required(cfg.out.clone(), "out")?;
    let samples = load_data(&cfg)?;
    let (train, test) = protocol::split(&cfg, &samples)?;
    let o = protocol::run_pretrain(&cfg, &train, &test, cfg.seed, Some(&out))?;
    println!(
        "pretrained {} epochs on {} samples: loss {:.4} -> {:.4}, held-out alignment gap {:.3}",
        o.record.epochs(),
        train.len(),
        o.record.loss.first().copied().unwrap_or(f64::NAN),
        o.record.loss.last().copied().unwrap_or(f64::NAN),
        o.alignment_after.gap()
    );
    Ok(())
}

fn checkpoint_dir(p: &Path) -> PathBuf {
    let nested = p.join(CHECKPOINT_DIR);
    if nested.join(viewcon::signal::container::MANIFEST).is_file() {
        nested
    } else {
        p.to_path_buf()
    }
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    let ckpt = checkpoint_dir(&a.checkpoint);
    let (bundle, manifest) = load_checkpoint(&ckpt)?;
    let extras = CheckpointExtras::from_value(&manifest.extras)?;
    let mut cfg = match a.config.as_deref() {
        Some(p) => ExperimentConfig::load(p)?,
        None => extras.config.clone(),
    };
    cfg.split = extras.config.split.clone();
    if a.data.is_some() {
        cfg.data = a.data;
    }
    cfg.out = Some(a.out.clone());
    let seed = a.seed.unwrap_or(extras.seed);
    cfg.seed = seed;
    let shots: Shots = a.shots.parse()?;
    let samples = load_data(&cfg)?;
    let (train, test) = protocol::split(&cfg, &samples)?;
    let o = protocol::run_finetune(&cfg, &bundle, Some(&ckpt), &train, &test, seed, shots, Some(&a.out))?;
    if o.frozen_bytes_identical != Some(true) {
        return Err(Error::Numeric("frozen encoder parameters changed during fine-tuning".into()));
    }
    println!(
        "fine-tuned on {} labelled samples (shots {shots}): macro F1 {:.4}, accuracy {:.4} on {} held-out samples",
        o.record.subset_ids.as_ref().map_or(0, Vec::len),
        o.summary.report.macro_f1,
        o.summary.report.accuracy,
        o.summary.report.n_samples
    );
    Ok(())
}

fn baseline(a: BaselineArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if a.data.is_some() {
        cfg.data = a.data;
    }
    if a.out.is_some() {
        cfg.out = a.out;
    }
    if let Some(v) = a.views {
        cfg.baseline_views = v;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let views = parse_baseline_views(&cfg.baseline_views)?;
    let shots: Shots = a.shots.parse()?;
    let out = required(cfg.out.clone(), "out")?;
    let samples = load_data(&cfg)?;
    let (train, test) = protocol::split(&cfg, &samples)?;
    let o = protocol::run_baseline(&cfg, views, &train, &test, cfg.seed, shots, Some(&out))?;
    println!(
        "baseline ({}) on {} labelled samples: macro F1 {:.4}, accuracy {:.4}",
        cfg.baseline_views,
        o.record.subset_ids.as_ref().map_or(0, Vec::len),
        o.summary.report.macro_f1,
        o.summary.report.accuracy
    );
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let r = write_report_from_dirs(&a.runs, &a.out)?;
    for f in r.files {
        println!("{}", f.display());
    }
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::Argument(format!("invalid {what} '{x}'")))
        })
        .collect()
}

fn experiment(a: ExperimentArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if a.data.is_some() {
        cfg.data = a.data;
    }
    if a.out.is_some() {
        cfg.out = a.out;
    }
    if let Some(s) = a.seeds {
        cfg.seeds = parse_list(&s, "seed")?;
    }
    if let Some(s) = a.shots {
        cfg.shots = s.split(',').map(|x| x.trim().parse()).collect::<Result<_>>()?;
    }
    cfg.validate()?;
    let out = required(cfg.out.clone(), "out")?;
    let samples = load_data(&cfg)?;
    let o = protocol::run_protocol(&cfg, &samples, Some(&out))?;
    for p in &o.comparison.curves {
        println!(
            "{:<16} shots {:>3}: mean macro F1 {:.4} over {} run(s)",
            p.method,
            viewcon::eval::shots_label(p.shots),
            p.mean_macro_f1,
            p.n_runs
        );
    }
    Ok(())
}
