use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lsm_yolo::checkpoint;
use lsm_yolo::data::{load_dataset, load_image, AnnotationFormat};
use lsm_yolo::eval::{evaluate_model, EvalConfig};
use lsm_yolo::network::ModelConfig;
use lsm_yolo::train::{train, TrainConfig};

#[derive(Parser)]
#[command(name = "lsm", version, about = "Lightweight medical ROI detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes history.jsonl, best.ckpt and last.ckpt.
    Train {
        #[arg(long)]
        model_cfg: PathBuf,
        #[arg(long)]
        train_cfg: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
        /// JSON report path (default: eval.json next to the checkpoint).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Draw detections onto copies of the input images.
    Detect {
        #[arg(long)]
        ckpt: PathBuf,
        /// Glob pattern, e.g. 'images/*.png'.
        #[arg(long)]
        images: String,
        #[arg(long, default_value_t = 0.25)]
        score_thr: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grad-CAM overlay for one image at a named layer.
    Cam {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        layer: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter and FLOP breakdown of a model config.
    Profile {
        #[arg(long)]
        model_cfg: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Write a synthetic dataset in either annotation layout.
    Synth {
        #[arg(long, value_enum)]
        kind: SynthKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        val: Option<usize>,
        #[arg(long, value_enum, default_value_t = Format::Yolo)]
        format: Format,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    BloodCells,
    BrainTumor,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Yolo,
    Index,
}

enum CliError {
    Lib(lsm_yolo::Error),
    Usage(String),
}

impl From<lsm_yolo::Error> for CliError {
    fn from(e: lsm_yolo::Error) -> Self {
        CliError::Lib(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn seed_override(cfg: &mut TrainConfig) -> CliResult<()> {
    if let Ok(v) = std::env::var("LSM_SEED") {
        cfg.seed = v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("LSM_SEED must be an unsigned integer, got {v:?}")))?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Usage(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| {
        CliError::Lib(lsm_yolo::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Train {
            model_cfg,
            train_cfg,
            data,
            out,
        } => {
            let mc = ModelConfig::load(&model_cfg)?;
            let mut tc = TrainConfig::load(&train_cfg)?;
            seed_override(&mut tc)?;
            let dataset = load_dataset(&data, None)?;
            let (_, outcome) = train(&mc, &tc, &dataset, &out)?;
            if let Some(last) = outcome.history.last() {
                println!("epochs {} final loss {:.4}", outcome.history.len(), last.loss.total);
            }
            match (outcome.best_ap, outcome.best_epoch) {
                (Some(ap), Some(ep)) => println!("best AP50:95 {ap:.4} at epoch {ep}"),
                _ => println!("no validation metrics recorded"),
            }
            println!("artifacts in {}", out.display());
        }
        Command::Eval {
            ckpt,
            data,
            split,
            report,
        } => {
            let (model, _) = checkpoint::load(&ckpt)?;
            let dataset = load_dataset(&data, None)?;
            let set = match split {
                Split::Train => &dataset.train,
                Split::Val => &dataset.val,
            };
            if set.class_names.len() != model.config().num_classes {
                return Err(lsm_yolo::Error::ConfigMismatch(format!(
                    "checkpoint has {} classes, dataset has {}",
                    model.config().num_classes,
                    set.class_names.len()
                ))
                .into());
            }
            let metrics = evaluate_model(&model, set, &EvalConfig::default())?;
            print!("{}", metrics.table());
            let path = report.unwrap_or_else(|| ckpt.with_file_name("eval.json"));
            write_json(&path, &metrics)?;
        }
        Command::Detect {
            ckpt,
            images,
            score_thr,
            out,
        } => {
            let (model, meta) = checkpoint::load(&ckpt)?;
            let mut paths: Vec<PathBuf> = glob::glob(&images)
                .map_err(|e| CliError::Usage(format!("bad glob {images:?}: {e}")))?
                .filter_map(|p| p.ok())
                .collect();
            paths.sort();
            if paths.is_empty() {
                return Err(CliError::Usage(format!("no files match {images:?}")));
            }
            let cfg = EvalConfig {
                score_thr,
                ..EvalConfig::default()
            };
            let records = lsm_yolo::detect::detect_files(&model, &meta.class_names, &paths, &cfg, &out)?;
            let failed = records.iter().filter(|r| r.error.is_some()).count();
            let boxes: usize = records.iter().map(|r| r.detections.len()).sum();
            println!("{} images, {boxes} detections, {failed} unreadable", records.len());
        }
        Command::Cam {
            ckpt,
            image,
            layer,
            out,
        } => {
            let (model, _) = checkpoint::load(&ckpt)?;
            let img = load_image(&image)?;
            let (_, overlay) = lsm_yolo::cam::cam_image(&model, &img, &layer)?;
            lsm_yolo::cam::save_overlay(&overlay, &out)?;
        }
        Command::Profile { model_cfg, json } => {
            let cfg = match model_cfg {
                Some(p) => ModelConfig::load(&p)?,
                None => ModelConfig::default(),
            };
            let report = lsm_yolo::profile::profile(&cfg)?;
            if json {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&report).map_err(|e| CliError::Usage(e.to_string()))?
                );
            } else {
                print!("{}", report.table());
            }
        }
        Command::Synth {
            kind,
            out,
            train,
            val,
            format,
            seed,
        } => {
            let mut spec = match kind {
                SynthKind::BloodCells => lsm_yolo::synth::SynthSpec::blood_cells(),
                SynthKind::BrainTumor => lsm_yolo::synth::SynthSpec::brain_tumor(),
            };
            spec = spec.clone().with_counts(train.unwrap_or(spec.train), val.unwrap_or(spec.val));
            let format = match format {
                Format::Yolo => AnnotationFormat::Yolo,
                Format::Index => AnnotationFormat::Index,
            };
            lsm_yolo::synth::write_dataset(&out, &spec, format, seed)?;
            println!("{} train / {} val images in {}", spec.train, spec.val, out.display());
        }
    }
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let head = msg.split("Usage:").next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {}", one_line(head));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Lib(e)) => {
            eprintln!("error: {}", one_line(&e.to_string()));
            ExitCode::FAILURE
        }
        Err(CliError::Usage(m)) => {
            eprintln!("error: usage: {}", one_line(&m));
            ExitCode::from(2)
        }
    }
}
