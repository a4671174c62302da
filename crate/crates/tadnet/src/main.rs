//! Command-line driver: dataset synthesis, training, inference,
//! evaluation, and figure rendering.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tadnet::harness::config::RunConfig;
use tadnet::harness::data::{self, AnnotationFile, Subset};
use tadnet::harness::train::{self, Checkpoint};
use tadnet::harness::{report, synth, HarnessError};
use tadnet::infer_eval::{default_thresholds, evaluate_map, Detection};
use tadnet::model::Model;

#[derive(Parser)]
#[command(name = "tadnet", about = "temporal action detection: train, infer, evaluate")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Flat key-value config file (dotted keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// `section.key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset (features + annotations).
    Synth {
        #[command(flatten)]
        common: Common,
        /// Generator seed; overrides `synth.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for feature files and annotations.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a prepared dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Parameter-init and shuffling seed.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory for checkpoints and the metric log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the detection pipeline and write a prediction dump.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Subset to process: training | validation | testing.
        #[arg(long, default_value = "validation")]
        split: String,
        /// Prediction JSON output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a prediction dump against annotations.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Prediction dump produced by `infer`.
        predictions: PathBuf,
        /// Subset restriction for the ground truth.
        #[arg(long)]
        split: Option<String>,
        /// Comma-separated tIoU thresholds (default 0.5:0.05:0.95).
        #[arg(long)]
        thresholds: Option<String>,
        /// Where to write the machine-readable result JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render loss curves and PR curves as SVG files.
    Report {
        #[command(flatten)]
        common: Common,
        /// metrics.jsonl from a training run.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Prediction dump for PR curves.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Subset restriction for PR ground truth.
        #[arg(long)]
        split: Option<String>,
        /// tIoU threshold for the PR curves.
        #[arg(long, default_value_t = 0.5)]
        thresholds: f64,
        /// Output directory for the figures.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig, HarnessError> {
    RunConfig::load(common.config.as_deref(), &common.overrides)
}

fn parse_split(s: Option<&str>) -> Result<Option<Subset>, HarnessError> {
    s.map(|v| v.parse::<Subset>()).transpose()
}

fn parse_thresholds(s: Option<&str>) -> Result<Vec<f64>, HarnessError> {
    match s {
        None => Ok(default_thresholds()),
        Some(text) => text
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| HarnessError::Config(format!("bad threshold '{p}'")))
                    .and_then(|v| {
                        if (0.0..=1.0).contains(&v) {
                            Ok(v)
                        } else {
                            Err(HarnessError::Config(format!("threshold {v} outside [0, 1]")))
                        }
                    })
            })
            .collect(),
    }
}

fn annotations_path(run: &RunConfig) -> Result<PathBuf, HarnessError> {
    if run.data.annotations.is_empty() {
        return Err(HarnessError::Config("data.annotations is not set".into()));
    }
    Ok(PathBuf::from(&run.data.annotations))
}

fn features_dir(run: &RunConfig) -> Result<PathBuf, HarnessError> {
    if run.data.features_dir.is_empty() {
        return Err(HarnessError::Config("data.features_dir is not set".into()));
    }
    Ok(PathBuf::from(&run.data.features_dir))
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.cmd {
        Cmd::Synth { common, seed, out } => {
            let mut run = load_config(&common)?;
            if let Some(s) = seed {
                run.synth.seed = s;
            }
            let ann = synth::generate(&run.synth, &out)?;
            println!(
                "synthesized {} videos ({} classes) into {}",
                ann.database.len(),
                ann.labels.len(),
                out.display()
            );
            Ok(())
        }
        Cmd::Train { common, seed, checkpoint, out } => {
            let run = load_config(&common)?;
            let ann = AnnotationFile::load(&annotations_path(&run)?)?;
            let fdir = features_dir(&run)?;
            let (samples, skipped) =
                train::load_split(&run.model, &ann, &fdir, Some(Subset::Training))?;
            report_skipped(&skipped);
            std::fs::create_dir_all(&out)
                .map_err(|e| HarnessError::Data(format!("create {}: {e}", out.display())))?;
            let resume = match checkpoint {
                Some(path) => {
                    let ck = Checkpoint::load(&path)?;
                    let mut model = Model::new(run.model.clone(), seed);
                    let adam = ck.restore(&mut model, &run)?;
                    println!("resuming from {} at epoch {}", path.display(), ck.epochs_done);
                    Some((model, adam, ck.epochs_done))
                }
                None => None,
            };
            let outcome = train::train(&run, seed, &samples, resume, Some(&out))?;
            let last = outcome.log.last().map(|s| s.loss.total).unwrap_or(f64::NAN);
            println!(
                "trained {} epochs, {} steps, final batch loss {last:.4}; artifacts in {}",
                run.train.epochs,
                outcome.log.len(),
                out.display()
            );
            Ok(())
        }
        Cmd::Infer { common, checkpoint, split, out } => {
            let run = load_config(&common)?;
            let subset = parse_split(Some(&split))?;
            let ann = AnnotationFile::load(&annotations_path(&run)?)?;
            let fdir = features_dir(&run)?;
            let (samples, skipped) = train::load_split(&run.model, &ann, &fdir, subset)?;
            report_skipped(&skipped);
            let ck = Checkpoint::load(&checkpoint)?;
            let mut model = Model::new(run.model.clone(), 0);
            ck.restore(&mut model, &run)?;
            let dump = train::infer_split(&model, &samples, &ann.labels);
            data::save_predictions(&out, &dump)?;
            println!("wrote predictions for {} videos to {}", dump.len(), out.display());
            Ok(())
        }
        Cmd::Eval { common, predictions, split, thresholds, out } => {
            let run = load_config(&common)?;
            let ann = AnnotationFile::load(&annotations_path(&run)?)?;
            let subset = parse_split(split.as_deref())?;
            let thresholds = parse_thresholds(thresholds.as_deref())?;
            let result = eval_dump(&predictions, &ann, subset, &thresholds)?;
            println!("tIoU      mAP");
            for (t, m) in result.thresholds.iter().zip(&result.map_per_threshold) {
                println!("{t:.2}     {m:.4}");
            }
            println!("average mAP: {:.4}", result.average_map);
            if let Some(path) = out {
                data::atomic_write(
                    &path,
                    serde_json::to_string_pretty(&result).expect("result encodes").as_bytes(),
                )?;
            }
            Ok(())
        }
        Cmd::Report { common, metrics, predictions, split, thresholds, out } => {
            let run = load_config(&common)?;
            std::fs::create_dir_all(&out)
                .map_err(|e| HarnessError::Data(format!("create {}: {e}", out.display())))?;
            let mut rendered = 0;
            if let Some(mpath) = metrics {
                let series = report::loss_series_from_log(&mpath)?;
                report::render_svg("training losses", &series, &out.join("losses.svg"))?;
                rendered += 1;
            }
            if let Some(ppath) = predictions {
                let ann = AnnotationFile::load(&annotations_path(&run)?)?;
                let subset = parse_split(split.as_deref())?;
                let preds = load_detections(&ppath, &ann)?;
                let gts = ann.ground_truth_seconds(subset)?;
                let series = report::pr_series(&preds, &gts, &ann.labels, thresholds);
                report::render_svg(
                    &format!("precision/recall @ tIoU {thresholds}"),
                    &series,
                    &out.join("pr_curves.svg"),
                )?;
                rendered += 1;
            }
            if rendered == 0 {
                return Err(HarnessError::Config(
                    "report needs --metrics and/or --predictions".into(),
                ));
            }
            println!("wrote {rendered} figure(s) to {}", out.display());
            Ok(())
        }
    }
}

fn report_skipped(skipped: &[String]) {
    if !skipped.is_empty() {
        eprintln!("skipped {} videos with missing feature files: {skipped:?}", skipped.len());
    }
}

fn load_detections(
    path: &Path,
    ann: &AnnotationFile,
) -> Result<BTreeMap<String, Vec<Detection>>, HarnessError> {
    let dump = data::load_predictions(path)?;
    dump.iter()
        .map(|(vid, entries)| Ok((vid.clone(), data::entries_to_detections(entries, ann)?)))
        .collect()
}

fn eval_dump(
    predictions: &Path,
    ann: &AnnotationFile,
    subset: Option<Subset>,
    thresholds: &[f64],
) -> Result<tadnet::infer_eval::EvalResult, HarnessError> {
    let preds = load_detections(predictions, ann)?;
    let gts = ann.ground_truth_seconds(subset)?;
    Ok(evaluate_map(&preds, &gts, thresholds))
}
