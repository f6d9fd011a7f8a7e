//! Command-line front end. The `spcl` binary parses [`Cli`] and calls [`run`].

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::experiment::feature_ccd;
use crate::gradcheck;
use crate::metrics::{mean_defined, MetricReport};
use crate::synthdata::io::{render_labels, write_dataset, DatasetDir};
use crate::synthdata::{Domain, DomainShiftParams, Image, LabelMap, SceneSpec};
use crate::trainer::{evaluate, Checkpoint, Dataset, EvalSet, Stage, Trainer};

#[derive(Debug, Parser)]
#[command(
    name = "spcl",
    version,
    about = "Prototype contrastive domain adaptation for segmentation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Source,
    Target,
}

impl From<Split> for Domain {
    fn from(s: Split) -> Domain {
        match s {
            Split::Source => Domain::Source,
            Split::Target => Domain::Target,
        }
    }
}

#[derive(Debug, Clone, clap::Args)]
pub struct TrainArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory (overrides `data` in the config).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Final checkpoint path; periodic checkpoints go next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Metrics CSV path (default: `<out>.metrics.csv`).
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic two-domain dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value = "default")]
        shift_preset: String,
    },
    /// Source warm-up followed by prototype contrastive adaptation.
    Train(TrainArgs),
    /// Self-training on pseudo labels from an adapted checkpoint (`--resume`).
    Selftrain(TrainArgs),
    /// Segmentation metrics of a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Target)]
        split: Split,
        /// Directory for color-rendered prediction maps.
        #[arg(long)]
        render: Option<PathBuf>,
        /// Report path (default: standard output).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Class center distance of encoder features on both splits.
    Ccd {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        max_images: usize,
    },
    /// Finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth {
            out,
            count,
            seed,
            height,
            width,
            classes,
            shift_preset,
        } => {
            let spec = SceneSpec::desk(seed)
                .with_classes(classes)
                .with_size(height, width);
            let shift = DomainShiftParams::preset(&shift_preset)?;
            write_dataset(&out, &spec, &shift, count)
                .with_context(|| format!("writing {}", out.display()))?;
            eprintln!("wrote {count} scenes per domain to {}", out.display());
            Ok(())
        }
        Command::Train(args) => train(&args, &[Stage::Warmup, Stage::Adapt]),
        Command::Selftrain(args) => {
            if args.resume.is_none() {
                bail!("selftrain needs --resume with an adapted checkpoint");
            }
            train(&args, &[Stage::SelfTrain])
        }
        Command::Eval {
            ckpt,
            data,
            split,
            render,
            out,
        } => eval(
            &ckpt,
            &data,
            split.into(),
            render.as_deref(),
            out.as_deref(),
        ),
        Command::Ccd {
            ckpt,
            data,
            out,
            max_images,
        } => ccd(&ckpt, &data, &out, max_images),
        Command::Gradcheck { trials, seed } => {
            let report = gradcheck::run(trials, seed)?;
            let mut stdout = std::io::stdout().lock();
            for c in &report.cases {
                let verdict = if c.passed() { "ok" } else { "FAIL" };
                writeln!(
                    stdout,
                    "{:<24} {:>3} instances  max rel error {:.3e}  {verdict}",
                    c.name, c.instances, c.max_rel_error
                )?;
            }
            writeln!(
                stdout,
                "prototype gradient zero: {}",
                report.prototype_grad_zero
            )?;
            writeln!(
                stdout,
                "max relative error {:.3e} (tolerance {:.0e})",
                report.max_rel_error(),
                gradcheck::TOLERANCE
            )?;
            if !report.passed() {
                bail!("gradient check failed");
            }
            Ok(())
        }
    }
}

fn load_config(args: &TrainArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&args.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Periodic checkpoint path next to `out`.
pub fn periodic_path(out: &Path, stage: Stage, iteration: usize) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".{}-{iteration:06}", stage.name()));
    out.with_file_name(name)
}

pub fn metrics_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".metrics.csv");
    out.with_file_name(name)
}

fn train(args: &TrainArgs, stages: &[Stage]) -> anyhow::Result<()> {
    let cfg = load_config(args)?;
    let root = args
        .data
        .clone()
        .or(cfg.data.clone())
        .context("no dataset: pass --data or set `data` in the config")?;
    let dir = DatasetDir::open(&root)?;
    let data = Dataset::from_dir(&dir)?;
    let eval = EvalSet::from_dir(&dir, data.tail.clone())?;
    let mut trainer = match &args.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.classes != data.classes {
                bail!(
                    "checkpoint has {} classes, dataset has {}",
                    ck.classes,
                    data.classes
                );
            }
            Trainer::from_checkpoint(cfg.train.clone(), &ck)?
        }
        None => Trainer::new(cfg.train.clone(), data.classes)?,
    };
    let out = args.out.clone();
    let last = *stages.last().unwrap();
    let mut save = |ck: &Checkpoint| -> crate::Result<()> {
        if ck.complete && ck.stage == last {
            return Ok(());
        }
        let path = if ck.complete {
            let mut name = out.file_name().unwrap_or_default().to_os_string();
            name.push(format!(".{}", ck.stage.name()));
            out.with_file_name(name)
        } else {
            periodic_path(&out, ck.stage, ck.iteration)
        };
        ck.save(&path)
    };
    let first = trainer.stage;
    for &stage in stages.iter().filter(|&&s| s >= first) {
        trainer.run_stage(stage, &data, Some(&eval), &mut save)?;
        if let Some(row) = trainer.log.iter().rev().find(|r| r.split == "target") {
            eprintln!("{} done: target mIoU {:.4}", stage.name(), row.miou);
        }
    }
    trainer.checkpoint().save(&out)?;
    let metrics = args.metrics.clone().unwrap_or_else(|| metrics_path(&out));
    fs::write(&metrics, trainer.metrics_csv())?;
    Ok(())
}

fn eval(
    ckpt: &Path,
    data: &Path,
    split: Domain,
    render: Option<&Path>,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let model = ck.model()?;
    let dir = DatasetDir::open(data)?;
    let source = dir.samples(Domain::Source)?;
    let tail = crate::synthdata::tail_classes(&crate::synthdata::class_pixel_shares(
        source.iter().map(|s| &s.labels),
        dir.classes,
    ));
    let samples = match split {
        Domain::Source => source,
        Domain::Target => dir.samples(Domain::Target)?,
    };
    let cm = evaluate(&model, &samples, 8)?;
    let report = MetricReport::from_confusion(&cm, &tail);
    match out {
        Some(p) => fs::write(p, report.to_csv())?,
        None => print!("{}", report.to_csv()),
    }
    if let Some(dir) = render {
        fs::create_dir_all(dir)?;
        for chunk in samples.chunks(8) {
            let images: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
            let pred = model.infer(&images)?.predictions();
            let per = pred.len() / chunk.len();
            for (s, p) in chunk.iter().zip(pred.chunks(per)) {
                let map = LabelMap {
                    height: s.image.height,
                    width: s.image.width,
                    data: p.to_vec(),
                };
                fs::write(
                    dir.join(format!("pred_{}.ppm", s.index)),
                    render_labels(&map),
                )?;
            }
        }
    }
    Ok(())
}

fn ccd(ckpt: &Path, data: &Path, out: &Path, max_images: usize) -> anyhow::Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let model = ck.model()?;
    let dir = DatasetDir::open(data)?;
    let mut text = String::from("domain,class,ccd\n");
    for domain in [Domain::Source, Domain::Target] {
        let samples = dir.samples(domain)?;
        let values = feature_ccd(&model, &samples, max_images, ck.seed)?;
        for (c, v) in values.iter().enumerate() {
            text.push_str(&format!(
                "{},{c},{}\n",
                domain.name(),
                v.map_or("nan".into(), |v| v.to_string())
            ));
        }
        let mean = mean_defined(&values);
        text.push_str(&format!(
            "{},mean,{}\n",
            domain.name(),
            mean.map_or("nan".into(), |v| v.to_string())
        ));
    }
    fs::write(out, text)?;
    Ok(())
}
