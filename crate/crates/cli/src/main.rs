use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use image::{Rgb, RgbImage};

use cvanet::data::{
    frame_path, generate_dataset, load_dataset, load_manifest, save_dataset, BBox, Dataset, DatasetConfig,
    LesionClass, Split,
};
use cvanet::eval::{classification_accuracy, evaluate, load_predictions, save_predictions, EvalMode, EvalOptions};
use cvanet::train::{ablate, predict, train, AblationGrid, EpochStats, Model, Progress, RunConfig, RunRecord};

#[derive(Parser)]
#[command(name = "cvanet", version, about = "Lesion detection in videos with clip- and video-level feature fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        videos: usize,
        #[arg(long, default_value_t = 24)]
        frames: usize,
        /// Frame size as H,W.
        #[arg(long, default_value = "96,96", value_parser = parse_res)]
        res: (usize, usize),
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
    },
    /// Train one configuration and evaluate it on the test split.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory; overrides the config's `dataset`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset's test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "class-agnostic", value_parser = parse_mode)]
        mode: EvalMode,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train every grid entry once per seed and tabulate mean AP.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write per-frame predictions of a checkpoint as JSON lines.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Predict every video instead of the test split only.
        #[arg(long)]
        all: bool,
    },
    /// Draw ground truth (green) and predictions (red: malignant, yellow:
    /// benign) onto the frames as PPM images.
    Render {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        min_score: f64,
    },
}

fn parse_res(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(',').ok_or("expected H,W")?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(h)?, parse(w)?))
}

fn parse_mode(s: &str) -> Result<EvalMode, String> {
    EvalMode::parse(s).ok_or_else(|| format!("unknown mode {s:?} (class-agnostic or class-aware)"))
}

struct Log;

impl Progress for Log {
    fn epoch(&mut self, s: &EpochStats) {
        let m = &s.mean;
        eprintln!(
            "epoch {:>3}  loss {:.4}  cls {:.4}  l1 {:.4}  giou {:.4}  video {:.4}",
            s.epoch + 1,
            m.total,
            m.classification,
            m.l1,
            m.giou,
            m.video
        );
    }
}

fn dataset_for(path: Option<&Path>) -> Result<Dataset> {
    match path {
        Some(p) => load_dataset(p).with_context(|| format!("loading dataset {}", p.display())),
        None => {
            eprintln!("no dataset given, generating the default synthetic dataset");
            Ok(generate_dataset(&DatasetConfig::default())?)
        }
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn print_record(r: &RunRecord) {
    print!("{}", r.report.to_table(&r.config.label()));
    println!("video classification accuracy: {:.3}", r.classification_accuracy);
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { out, videos, frames, res, seed, test_fraction } => {
            let cfg = DatasetConfig { videos, frames, height: res.0, width: res.1, test_fraction, seed };
            let ds = generate_dataset(&cfg)?;
            save_dataset(&ds, &out)?;
            let n_test = ds.split(Split::Test).count();
            println!("wrote {} videos ({} train, {} test) to {}", ds.len(), ds.len() - n_test, n_test, out.display());
        }
        Command::Train { config, out, data } => {
            let cfg = RunConfig::load(&config)?;
            let ds = dataset_for(data.as_deref().or(cfg.dataset.as_deref()))?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let outcome = train(&cfg, &ds, &mut Log)?;
            outcome.model.save(&out.join("checkpoint.bin"))?;
            write_json(&out.join("record.json"), &outcome.record)?;
            let preds = predict(&outcome.model, &ds, Some(Split::Test))?;
            save_predictions(&out.join("predictions.jsonl"), &preds)?;
            print_record(&outcome.record);
        }
        Command::Eval { checkpoint, data, mode, report } => {
            let model = Model::load(&checkpoint)?;
            let ds = load_dataset(&data)?;
            let preds = predict(&model, &ds, Some(Split::Test))?;
            let manifest = load_manifest(&data)?;
            let rep = evaluate(&preds, &manifest, &EvalOptions { mode, split: Some(Split::Test) })?;
            if let Some(path) = report {
                fs::write(&path, rep.to_json()? + "\n").with_context(|| format!("writing {}", path.display()))?;
            }
            print!("{}", rep.to_table(&model.config.label()));
            let acc = classification_accuracy(&preds, &manifest, Some(Split::Test))?;
            println!("video classification accuracy: {acc:.3}");
        }
        Command::Ablate { grid, seeds, out, data } => {
            let grid = AblationGrid::load(&grid)?;
            let data = match data {
                Some(d) => Some(d),
                None => {
                    let first = grid.runs.first().and_then(|r| r.dataset.clone());
                    if grid.runs.iter().any(|r| r.dataset != first) {
                        bail!("grid entries use different datasets; pass --data");
                    }
                    first
                }
            };
            let ds = dataset_for(data.as_deref())?;
            let records_dir = out.join("records");
            fs::create_dir_all(&records_dir).with_context(|| format!("creating {}", records_dir.display()))?;
            let mut write_err = None;
            let (_, table) = ablate(
                &grid.runs,
                &seeds,
                &ds,
                |r| {
                    let name = format!("{}_seed{}.json", r.config.label().replace('+', "_"), r.config.seed);
                    eprintln!("{name}: AP {:.3} AP50 {:.3}", r.report.ap, r.report.ap50);
                    if let Err(e) = write_json(&records_dir.join(name), r) {
                        write_err.get_or_insert(e);
                    }
                },
                &mut Log,
            )?;
            if let Some(e) = write_err {
                return Err(e);
            }
            write_json(&out.join("table.json"), &table)?;
            let text = table.to_text();
            fs::write(out.join("table.txt"), &text)?;
            print!("{text}");
        }
        Command::Predict { checkpoint, data, out, all } => {
            let model = Model::load(&checkpoint)?;
            let ds = load_dataset(&data)?;
            let preds = predict(&model, &ds, (!all).then_some(Split::Test))?;
            save_predictions(&out, &preds)?;
            println!("wrote {} frame records to {}", preds.len(), out.display());
        }
        Command::Render { preds, data, out, min_score } => {
            let preds = load_predictions(&preds)?;
            let manifest = load_manifest(&data)?;
            let mut written = 0;
            for rec in &preds {
                let video = manifest
                    .get(&rec.video_id)
                    .with_context(|| format!("video {} is not in the dataset", rec.video_id))?;
                let Some(gt) = video.boxes.get(rec.frame) else {
                    bail!("{} has no frame {}", rec.video_id, rec.frame);
                };
                let src = frame_path(&data, &rec.video_id, rec.frame);
                let gray = image::open(&src).with_context(|| format!("reading {}", src.display()))?.to_luma8();
                let mut img = RgbImage::from_fn(gray.width(), gray.height(), |x, y| {
                    let v = gray.get_pixel(x, y)[0];
                    Rgb([v, v, v])
                });
                draw_box(&mut img, gt, Rgb([0, 220, 0]));
                for ((b, &s), &c) in rec.boxes.iter().zip(&rec.scores).zip(&rec.classes) {
                    if s >= min_score {
                        let color = match c {
                            LesionClass::Malignant => Rgb([230, 30, 30]),
                            LesionClass::Benign => Rgb([240, 220, 0]),
                        };
                        draw_box(&mut img, b, color);
                    }
                }
                let dir = out.join(&rec.video_id);
                fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                let path = dir.join(format!("frame_{:04}.ppm", rec.frame));
                img.save(&path).with_context(|| format!("writing {}", path.display()))?;
                written += 1;
            }
            println!("rendered {written} frames to {}", out.display());
        }
    }
    Ok(())
}

/// One-pixel rectangle outline, clipped to the image.
fn draw_box(img: &mut RgbImage, b: &BBox, color: Rgb<u8>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let clamp = |v: f64, hi: i64| (v.round() as i64).clamp(0, hi - 1);
    let (x0, y0, x1, y1) = (clamp(b[0], w), clamp(b[1], h), clamp(b[2] - 1.0, w), clamp(b[3] - 1.0, h));
    for x in x0..=x1 {
        img.put_pixel(x as u32, y0 as u32, color);
        img.put_pixel(x as u32, y1 as u32, color);
    }
    for y in y0..=y1 {
        img.put_pixel(x0 as u32, y as u32, color);
        img.put_pixel(x1 as u32, y as u32, color);
    }
}
