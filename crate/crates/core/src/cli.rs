//! `segkit` subcommands.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_config, InferenceConfig, RunConfig};
use crate::data::{check_dataset, Loader, SampleRecord};
use crate::error::{Error, Result};
use crate::eval::{eval_transforms, evaluate, predict_image, Metrics};
use crate::model::SegModel;
use crate::training::{Checkpoint, TrainState, Trainer, LATEST_CHECKPOINT};

pub const SNAPSHOT_FILE: &str = "config.snapshot";
const BUNDLE_CONFIG: &str = "bundle/config";

#[derive(Debug, Parser)]
#[command(name = "segkit", version, about = "Config-driven semantic segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from `latest.ckpt` in the output directory.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// `key.path=value` overrides applied on top of the file.
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on the validation list.
    Val {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        weights: PathBuf,
    },
    /// Write label and pseudo-colour PNGs for one image.
    Predict {
        #[command(flatten)]
        source: ModelSource,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate the train and val lists before training.
    CheckData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Package weights and the inference config into one bundle file.
    Export {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
#[group(required = true, multiple = true)]
pub struct ModelSource {
    #[arg(long, requires = "weights", conflicts_with = "bundle")]
    config: Option<PathBuf>,
    #[arg(long, requires = "config", conflicts_with = "bundle")]
    weights: Option<PathBuf>,
    #[arg(long)]
    bundle: Option<PathBuf>,
}

/// Result of a subcommand that ran to completion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// The command worked but found problems (e.g. data violations).
    Failed,
}

/// 0 success, 1 domain failure, 2 environment failure (missing or unreadable files).
pub fn exit_code(result: &Result<Outcome>) -> i32 {
    match result {
        Ok(Outcome::Success) => 0,
        Ok(Outcome::Failed) => 1,
        Err(e) if e.is_environment() => 2,
        Err(_) => 1,
    }
}

/// Parse `args`, run, and report; returns the process exit code.
pub fn main_with_args<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = write!(out, "{e}");
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            let _ = writeln!(err, "{}", line.trim());
            return 1;
        }
    };
    let result = run(cli.command, out);
    if let Err(e) = &result {
        let _ = writeln!(err, "error: {}", e.to_string().replace('\n', "; "));
    }
    exit_code(&result)
}

pub fn run(command: Command, out: &mut dyn Write) -> Result<Outcome> {
    match command {
        Command::Train {
            config,
            resume,
            seed,
            overrides,
        } => {
            let mut overrides = overrides;
            if let Some(s) = seed {
                overrides.push(format!("seed={s}"));
            }
            cmd_train(&parse_config(&config, &overrides)?, resume, out)
        }
        Command::Val { config, weights } => {
            let metrics = cmd_val(&parse_config(&config, &[])?, &weights)?;
            say(out, format_args!("{metrics}"))?;
            Ok(Outcome::Success)
        }
        Command::Predict { source, image, out: dir } => {
            let (inference, weights) = match (&source.bundle, &source.config, &source.weights) {
                (Some(b), _, _) => load_bundle(b)?,
                (None, Some(c), Some(w)) => (parse_config(c, &[])?.inference(), Checkpoint::load(w)?),
                _ => return Err(Error::Config("predict needs --bundle or both --config and --weights".into())),
            };
            let (label, color) = cmd_predict(&inference, &weights, &image, &dir)?;
            say(out, format_args!("{}\n{}", label.display(), color.display()))?;
            Ok(Outcome::Success)
        }
        Command::CheckData { config } => cmd_check_data(&parse_config(&config, &[])?, out),
        Command::Export { config, weights, out: path } => {
            cmd_export(&parse_config(&config, &[])?, &weights, &path)?;
            say(out, format_args!("{}", path.display()))?;
            Ok(Outcome::Success)
        }
    }
}

fn say(out: &mut dyn Write, args: std::fmt::Arguments<'_>) -> Result<()> {
    writeln!(out, "{args}").map_err(|e| Error::io("<stdout>", e))
}

fn records_of(cfg: &RunConfig, split: &str) -> Result<Vec<SampleRecord>> {
    let ds = match split {
        "val" => cfg.val.as_ref().unwrap_or(&cfg.train),
        _ => &cfg.train,
    };
    ds.records().map_err(|e| e.context(format!("{split} dataset")))
}

/// Whole-image evaluation loader over the val list, or the train list when no val list is set.
fn eval_loader(cfg: &RunConfig) -> Result<Loader> {
    Loader::new(
        records_of(cfg, "val")?,
        eval_transforms(&cfg.transforms),
        1,
        cfg.seed,
        false,
        cfg.schedule.workers,
    )
}

pub fn cmd_train(cfg: &RunConfig, resume: bool, out: &mut dyn Write) -> Result<Outcome> {
    let settings = cfg.train_settings();
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let snapshot = cfg.snapshot();
    let snap_path = dir.join(SNAPSHOT_FILE);
    fs::write(&snap_path, &snapshot).map_err(|e| Error::io(&snap_path, e))?;

    let train = Loader::new(
        records_of(cfg, "train")?,
        cfg.transforms.clone(),
        cfg.batch_size(),
        cfg.seed,
        true,
        cfg.schedule.workers,
    )?;
    let val = eval_loader(cfg)?;

    let model = SegModel::<f32>::build(&cfg.model, cfg.seed)?;
    let state = if resume {
        let latest = dir.join(LATEST_CHECKPOINT);
        if !latest.exists() {
            return Err(Error::io(&latest, std::io::Error::from(std::io::ErrorKind::NotFound)).context("resume"));
        }
        let state = TrainState::resume(model, &Checkpoint::load(&latest)?, &settings)?;
        say(out, format_args!("resumed from iteration {}", state.iter))?;
        state
    } else {
        let mut state = TrainState::new(model, &settings)?;
        if let Some(src) = &cfg.finetune_from {
            let report = Checkpoint::load(src)?.load_matching(&mut state.model.params)?;
            say(out, format_args!("finetune: loaded {} parameters, skipped {}", report.loaded.len(), report.skipped.len()))?;
            for (name, why) in &report.skipped {
                say(out, format_args!("  skipped {name}: {why}"))?;
            }
        }
        state
    };

    let mut trainer = Trainer::new(settings, state, &train, Some(&val))?.with_config_text(cfg.inference().snapshot());
    let mut write_err = None;
    trainer.run(|r| {
        let miou = r.miou.map(|m| format!(" miou {m:.4}")).unwrap_or_default();
        if let Err(e) = writeln!(out, "iter {} lr {:.6e} loss {:.4}{miou}", r.iter, r.lr, r.loss) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(Error::io("<stdout>", e));
    }
    Ok(Outcome::Success)
}

/// Build the configured model and load `weights` exactly.
fn load_model(inference: &InferenceConfig, weights: &Checkpoint) -> Result<SegModel<f32>> {
    let mut model = SegModel::<f32>::build(&inference.model, 0)?;
    weights.restore_params(&mut model.params)?;
    Ok(model)
}

pub fn cmd_val(cfg: &RunConfig, weights: &Path) -> Result<Metrics> {
    let mut model = load_model(&cfg.inference(), &Checkpoint::load(weights)?)?;
    evaluate(&mut model, &eval_loader(cfg)?, cfg.loss.ignore_index)
}

pub fn load_bundle(path: &Path) -> Result<(InferenceConfig, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    let text = std::str::from_utf8(ckpt.bytes(BUNDLE_CONFIG)?)
        .map_err(|_| Error::Format(format!("{}: embedded config is not UTF-8", path.display())))?;
    let inference = InferenceConfig::parse(text).map_err(|e| e.context(format!("{} embedded config", path.display())))?;
    Ok((inference, ckpt))
}

pub fn cmd_predict(inference: &InferenceConfig, weights: &Checkpoint, image: &Path, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let mut model = load_model(inference, weights)?;
    predict_image(&mut model, image, &inference.preprocess, out_dir)
}

pub fn cmd_check_data(cfg: &RunConfig, out: &mut dyn Write) -> Result<Outcome> {
    let mut ok = true;
    let mut splits = vec![("train", &cfg.train)];
    if let Some(v) = &cfg.val {
        splits.push(("val", v));
    }
    for (split, ds) in splits {
        let records = ds.records().map_err(|e| e.context(format!("{split} dataset")))?;
        let report = check_dataset(&records, cfg.num_classes(), cfg.loss.ignore_index);
        say(out, format_args!("{split}: {}", ds.list_path().display()))?;
        say(out, format_args!("{report}"))?;
        ok &= report.is_ok();
    }
    Ok(if ok { Outcome::Success } else { Outcome::Failed })
}

/// Model parameters plus the inference config; no training state and no paths.
pub fn cmd_export(cfg: &RunConfig, weights: &Path, out_path: &Path) -> Result<()> {
    let inference = cfg.inference();
    let model = load_model(&inference, &Checkpoint::load(weights)?)?;
    let mut bundle = Checkpoint::new();
    bundle.put_params(&model.params);
    bundle.insert_bytes(BUNDLE_CONFIG, inference.snapshot().as_bytes());
    if let Some(parent) = out_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    bundle.save(out_path)
}
