//! `dualview` command-line surface: synthetic dataset generation, training,
//! evaluation (model or external predictions), and single-case inference.
//!
//! Exit codes: 0 success, 2 usage error, 1 runtime error.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ndarray::Array2;

use dualview_core::autodiff::param::ParamStore;
use dualview_core::checkpoint::{apply_checkpoint, load_checkpoint, Checkpoint};
use dualview_core::datagen::{generate_dataset, load_dataset, load_image, rle_encode};
use dualview_core::eval::{load_predictions, plot_froc, save_predictions, PredictedInstance, PredictionCase, PredictionFile, SCORE_FLOOR};
use dualview_core::fusion::resize_bilinear;
use dualview_core::model::{decode_output, image_plane, AblationMode, Detection, Model};
use dualview_core::trainer::{evaluate, evaluate_predictions, Evaluation, Trainer};
use dualview_core::{Error, FileConfig, ImagePair, Laterality, Result, View};

#[derive(Parser)]
#[command(name = "dualview", version, about = "Dual-view mammography lesion detection, linking, and evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic phantom dataset.
    Synth {
        /// Configuration file ([phantom] section applies).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset seed; fully determines the output.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        n_cases: usize,
        /// Output directory (images/ and manifest.json are written here).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a generated dataset.
    Train {
        /// Configuration file ([model] and [train] sections apply).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory (as produced by `synth`).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = AblationMode::Full)]
        ablation: AblationMode,
        /// Overrides the training seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from an existing checkpoint, continuing its step count.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Output directory (checkpoint.ckpt and metrics.jsonl are written here).
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint or an external prediction file on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Prediction interchange file (standalone metric mode).
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// FPI budgets to report recall at.
        #[arg(long, value_delimiter = ',', default_values_t = [0.25, 0.5, 1.0])]
        fpi: Vec<f64>,
        /// Directory for the FROC plot and matched predictions.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run one CC/MLO pair through a checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CC view image (8- or 16-bit grayscale).
        #[arg(long)]
        cc: PathBuf,
        /// MLO view image (8- or 16-bit grayscale).
        #[arg(long)]
        mlo: PathBuf,
        /// Output directory (overlays and instances.json are written here).
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.cmd) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn usage_error(msg: &str) -> ! {
    eprintln!("error: {msg}");
    std::process::exit(2);
}

fn load_config(path: &Option<PathBuf>) -> Result<FileConfig> {
    match path {
        Some(p) => FileConfig::load(p),
        None => Ok(FileConfig::default()),
    }
}

fn model_from_checkpoint(path: &Path) -> Result<(Checkpoint, ParamStore<f32>, Model<f32>)> {
    let ckpt = load_checkpoint(path)?;
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, 0, &ckpt.config, ckpt.mode)?;
    apply_checkpoint(&ckpt, &store, &ckpt.config, ckpt.mode)?;
    Ok((ckpt, store, model))
}

fn print_evaluation(ev: &Evaluation, out: &Path) -> Result<()> {
    print!("{}", ev.report.to_text());
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let plot = out.join("froc.png");
    plot_froc(&ev.curve, &plot)?;
    println!("FROC plot: {}", plot.display());
    Ok(())
}

/// Rounds up to the nearest positive multiple of 32 (the backbone stride).
fn align32(n: usize) -> usize {
    n.max(1).div_ceil(32) * 32
}

fn prepare_view(img: Array2<f32>, target: (usize, usize), name: &str) -> Array2<f32> {
    if img.dim() != target {
        eprintln!(
            "warning: resizing {name} view from {:?} to {:?} (input must be a matching multiple of 32)",
            img.dim(),
            target
        );
        return resize_bilinear(&img, target.0, target.1);
    }
    img
}

fn detections_json(view: View, dets: &[Detection]) -> Vec<PredictedInstance> {
    dets.iter()
        .map(|d| PredictedInstance {
            view: view.as_str().to_string(),
            rle: rle_encode(&d.mask),
            score: d.score,
            malignancy: d.malignancy,
        })
        .collect()
}

fn overlay(base: &Array2<f32>, dets: &[Detection], path: &Path) -> Result<()> {
    let (h, w) = base.dim();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for ((i, j), &v) in base.indexed_iter() {
        let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        img.put_pixel(j as u32, i as u32, image::Rgb([g, g, g]));
    }
    for d in dets {
        // Red boundary: mask pixels with at least one non-mask 4-neighbor.
        for ((i, j), &m) in d.mask.indexed_iter() {
            if !m {
                continue;
            }
            let boundary = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)].iter().any(|&(di, dj)| {
                let (ni, nj) = (i as i64 + di, j as i64 + dj);
                ni < 0 || nj < 0 || ni >= h as i64 || nj >= w as i64 || !d.mask[(ni as usize, nj as usize)]
            });
            if boundary {
                img.put_pixel(j as u32, i as u32, image::Rgb([220, 40, 40]));
            }
        }
    }
    img.save(path)
        .map_err(|e| Error::Image { path: path.display().to_string(), detail: e.to_string() })
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth { config, seed, n_cases, out } => {
            let cfg = load_config(&config)?;
            let manifest = generate_dataset(seed, &cfg.phantom, n_cases, &out)?;
            println!(
                "wrote {} cases; manifest at {}",
                manifest.cases.len(),
                out.join("manifest.json").display()
            );
            Ok(())
        }
        Cmd::Train { config, data, ablation, seed, resume, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let dataset = load_dataset(&data)?;
            let mut trainer = Trainer::new(&cfg.model, &cfg.train, ablation)?;
            if let Some(r) = resume {
                trainer.resume(&load_checkpoint(&r)?)?;
            }
            let report = trainer.train(&dataset, Some(&dataset), Some(&out))?;
            println!(
                "trained to step {} ({} mode); loss {:.4} -> {:.4}; checkpoint at {}",
                report.steps,
                ablation,
                report.first_loss,
                report.final_loss,
                out.join("checkpoint.ckpt").display()
            );
            Ok(())
        }
        Cmd::Eval { checkpoint, predictions, data, fpi, out } => {
            let dataset = load_dataset(&data)?;
            let ev = match (&checkpoint, &predictions) {
                (Some(c), _) => {
                    let (_, _store, model) = model_from_checkpoint(c)?;
                    evaluate(&model, &dataset, &fpi)?
                }
                (None, Some(p)) => evaluate_predictions(&load_predictions(p)?, &dataset, &fpi)?,
                (None, None) => usage_error("provide --checkpoint or --predictions"),
            };
            print_evaluation(&ev, &out)
        }
        Cmd::Infer { checkpoint, cc, mlo, out } => {
            let (_, _store, model) = model_from_checkpoint(&checkpoint)?;
            let cc_img = load_image(&cc)?;
            let mlo_img = load_image(&mlo)?;
            let target = (align32(cc_img.dim().0), align32(cc_img.dim().1));
            let cc_img = prepare_view(cc_img, target, "cc");
            let mlo_img = prepare_view(mlo_img, target, "mlo");
            let pair = ImagePair::new(cc_img, mlo_img, "input".into(), Laterality::Left)?;
            let fwd = model.forward(&image_plane(pair.cc()), &image_plane(pair.mlo()))?;
            let dec = decode_output(&fwd, target.0, target.1, SCORE_FLOOR, 0.5);

            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            overlay(pair.cc(), &dec.cc, &out.join("cc_overlay.png"))?;
            overlay(pair.mlo(), &dec.mlo, &out.join("mlo_overlay.png"))?;

            let mut detections = detections_json(View::Cc, &dec.cc);
            detections.extend(detections_json(View::Mlo, &dec.mlo));
            let file = PredictionFile {
                image_size: target.0,
                cases: vec![PredictionCase { name: "input".into(), detections }],
            };
            save_predictions(&file, &out.join("instances.json"))?;

            println!("cc: {} detections, mlo: {} detections", dec.cc.len(), dec.mlo.len());
            for d in dec.cc.iter() {
                println!("  cc  q{:<3} score {:.3} malignancy {:.3}", d.query, d.score, d.malignancy);
            }
            for d in dec.mlo.iter() {
                println!("  mlo q{:<3} score {:.3} malignancy {:.3}", d.query, d.score, d.malignancy);
            }
            if dec.links.is_empty() {
                println!("links: none decoded");
            } else {
                for (c, m, s) in &dec.links {
                    println!("link: cc q{c} <-> mlo q{m} (score {s:.3})");
                }
            }
            println!("artifacts in {}", out.display());
            Ok(())
        }
    }
}
