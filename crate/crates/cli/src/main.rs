//! `refinebox` command-line tool.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use serde::Serialize;

use refinebox::eval::{analyze, coco_eval, mean_matched_iou, AnalyzeOptions, EvalSummary};
use refinebox::io::{
    assemble_samples, export_samples, load_ckpt, load_coco, load_results, read_dump, save_ckpt,
    save_coco, save_results, write_dump, write_report,
};
use refinebox::synth::gen_synthetic;
use refinebox::train::{refine_topk, train, EpochMetrics, TrainSample};
use refinebox::{load_config, Config, Error, ImageSize, MatchWeights, Result};

#[derive(Parser)]
#[command(
    name = "refinebox",
    version,
    about = "Box refinement over frozen detectors"
)]
struct Cli {
    /// Overrides the seed of the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Only warnings and errors on standard error.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic frozen detector: train_/val_ gt.json, preds.json, features.rfbx.
    GenSynth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the refinement network.
    Train {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Validation split, reported after every epoch.
        #[arg(long, requires_all = ["val_preds", "val_features"])]
        val_gt: Option<PathBuf>,
        #[arg(long)]
        val_preds: Option<PathBuf>,
        #[arg(long)]
        val_features: Option<PathBuf>,
        /// Per-epoch metrics as JSON.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Refine the boxes of a results file.
    Refine {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        topk: Option<usize>,
    },
    /// COCO metrics and mean matched IoU.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ideal localization / classification analysis.
    Analyze {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// IoU thresholds in percent for the per-threshold table.
        #[arg(long, value_delimiter = ',', default_value = "50,75")]
        thresholds: Vec<u32>,
    },
}

#[derive(Serialize)]
struct EvalReport {
    #[serde(flatten)]
    summary: EvalSummary,
    matched: usize,
    mean_matched_iou: f64,
}

fn config(path: Option<&Path>, seed: Option<u64>) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => load_config(p)?,
        None => Config::default(),
    };
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn load_samples(gt: &Path, preds: &Path, features: &Path) -> Result<Vec<TrainSample>> {
    let ds = load_coco(gt)?;
    let dets = load_results(preds, Some(&ds))?;
    assemble_samples(&ds, &dets, read_dump(features)?)
}

fn gen_synth(cfg: &Config, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.into(),
        source: e,
    })?;
    let data = gen_synthetic(&cfg.synth_config())?;
    let (tr, va) = data.split(cfg.train_images);
    for (prefix, split) in [("train", &tr), ("val", &va)] {
        let (ds, preds, records) = export_samples(&split.samples, &split.categories);
        save_coco(&ds, &out.join(format!("{prefix}_gt.json")))?;
        save_results(&preds, &out.join(format!("{prefix}_preds.json")))?;
        write_dump(&out.join(format!("{prefix}_features.rfbx")), &records)?;
        info!(
            "{prefix}: {} images, {} objects, {} predictions",
            ds.images.len(),
            ds.annotations.len(),
            preds.len()
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenSynth { config: c, out } => gen_synth(&config(c.as_deref(), cli.seed)?, &out),
        Cmd::Train {
            gt,
            preds,
            features,
            config: c,
            out,
            val_gt,
            val_preds,
            val_features,
            metrics,
        } => {
            let cfg = config(c.as_deref(), cli.seed)?;
            let samples = load_samples(&gt, &preds, &features)?;
            let val = match (val_gt, val_preds, val_features) {
                (Some(g), Some(p), Some(f)) => Some(load_samples(&g, &p, &f)?),
                _ => None,
            };
            let res = train(&samples, val.as_deref(), &cfg.train, &cfg.refiner)?;
            save_ckpt(&out, &res.params, &cfg.refiner)?;
            if let Some(m) = metrics {
                write_report::<Vec<EpochMetrics>>(&m, &res.history)?;
            }
            Ok(())
        }
        Cmd::Refine {
            ckpt,
            preds,
            features,
            out,
            topk,
        } => {
            let (params, mut rcfg) = load_ckpt(&ckpt)?;
            if let Some(k) = topk {
                rcfg.top_k = k;
            }
            let dets = load_results(&preds, None)?;
            let records = read_dump(&features)?;
            let mut refined = Vec::with_capacity(dets.len());
            for r in records {
                let sample = TrainSample {
                    image_id: r.image_id,
                    image: ImageSize::new(
                        r.pyramid.image_width as f64,
                        r.pyramid.image_height as f64,
                    ),
                    predictions: dets
                        .iter()
                        .filter(|d| d.image_id == r.image_id)
                        .cloned()
                        .collect(),
                    backbone: r.pyramid,
                    gts: Vec::new(),
                };
                refined.extend(refine_topk(&sample, &params, &rcfg)?);
            }
            if refined.len() != dets.len() {
                return Err(Error::Data {
                    path: preds.display().to_string(),
                    msg: format!(
                        "{} predictions belong to images missing from the feature dump",
                        dets.len() - refined.len()
                    ),
                });
            }
            info!("refined {} predictions (top {})", refined.len(), rcfg.top_k);
            save_results(&refined, &out)
        }
        Cmd::Eval { gt, preds, out } => {
            let ds = load_coco(&gt)?;
            let dets = load_results(&preds, Some(&ds))?;
            let summary = coco_eval(&dets, &ds.annotations, &ds.category_ids())?;
            let (mean_matched_iou, matched) = mean_matched_iou(
                &dets,
                &ds.annotations,
                &ds.image_sizes(),
                &MatchWeights::default(),
            )?;
            info!(
                "AP {:.4}, mean matched IoU {:.4}",
                summary.ap, mean_matched_iou
            );
            write_report(
                &out,
                &EvalReport {
                    summary,
                    matched,
                    mean_matched_iou,
                },
            )
        }
        Cmd::Analyze {
            gt,
            preds,
            out,
            thresholds,
        } => {
            let ds = load_coco(&gt)?;
            let dets = load_results(&preds, Some(&ds))?;
            let opts = AnalyzeOptions {
                thresholds,
                ..Default::default()
            };
            let rep = analyze(
                &dets,
                &ds.annotations,
                &ds.category_ids(),
                &ds.image_sizes(),
                &opts,
            )?;
            info!(
                "AP {:.4}, ideal localization {:.4}, ideal classification {:.4}",
                rep.actual.ap, rep.ideal_localization.ap, rep.ideal_classification.ap
            );
            write_report(&out, &rep)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
