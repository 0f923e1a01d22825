use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{to_pixel_detections, Model};
use super::RunConfig;
use crate::data::{augment, sample_clip, Augmentation, BBox, Clip, Dataset, Frame, Manifest, ShufflePlan, Split, VideoSample};
use crate::error::{Error, Result};
use crate::eval::{classification_accuracy, evaluate, EvalOptions, EvalReport, PredictionRecord};
use crate::head::{detection_loss, hungarian_match, match_cost, video_class_loss, DetectionSet, GroundTruth};
use crate::tensor::{AdamConfig, AdamState, Graph};

/// Detections scoring below this are not exported.
pub const MIN_EXPORT_SCORE: f64 = 0.05;
/// AP50 the full variant must reach on the default synthetic data.
pub const TARGET_AP50: f64 = 0.5;
const SAMPLE_CROP_MIN: f64 = 0.8;
const EVAL_SHUFFLE_SALT: u64 = 0x5eed_e7a1;

/// Loss terms of one optimizer step (already weighted in `total`).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub total: f64,
    pub classification: f64,
    pub l1: f64,
    pub giou: f64,
    pub video: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub mean: StepLoss,
}

/// Everything needed to reproduce and audit one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub config_hash: String,
    pub epochs: Vec<EpochStats>,
    /// Total loss of the first optimizer steps, for determinism checks.
    pub first_step_losses: Vec<f64>,
    pub report: EvalReport,
    pub classification_accuracy: f64,
    pub grad_clip: f64,
    pub target_ap50: f64,
    pub wall_clock_secs: f64,
}

/// Ground truth of a clip's centre frame in normalised coordinates.
pub fn clip_ground_truth(clip: &Clip) -> GroundTruth {
    let f = &clip.frames[1];
    GroundTruth::from_pixels(&clip.boxes, clip.label, f.height, f.width)
}

/// Per-step training sample after augmentation.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub frames: [Frame; 3],
    pub shuffled: [Frame; 3],
    pub boxes: Vec<BBox>,
}

fn to_array(v: Vec<Frame>) -> [Frame; 3] {
    v.try_into().expect("three frames")
}

/// Whole-sample augmentation (flip, resized crop) on all six frames, then
/// the configured augmentation on the shuffled stream alone.
pub fn prepare_sample(config: &RunConfig, clip: &Clip, rng: &mut ChaCha8Rng) -> Result<TrainSample> {
    let (h, w) = (clip.frames[1].height, clip.frames[1].width);
    let mut all: Vec<Frame> = clip.frames.iter().chain(&clip.shuffled).cloned().collect();
    let mut boxes = clip.boxes.clone();
    if config.sample_augmentation {
        if rng.random_bool(0.5) {
            (all, boxes) = augment(&all, &boxes, &Augmentation::HorizontalFlip, 0)?;
        }
        let f = rng.random_range(SAMPLE_CROP_MIN..=1.0);
        let crop = Augmentation::RandomCrop {
            height: ((h as f64 * f).round() as usize).clamp(1, h),
            width: ((w as f64 * f).round() as usize).clamp(1, w),
        };
        (all, boxes) = augment(&all, &boxes, &crop, rng.random())?;
        (all, boxes) = augment(&all, &boxes, &Augmentation::Resize { height: h, width: w }, 0)?;
    }
    let shuffled = all.split_off(3);
    let kind = config.augmentation.build(h, w);
    let (shuffled, _) = augment(&shuffled, &[], &kind, rng.random())?;
    Ok(TrainSample { frames: to_array(all), shuffled: to_array(shuffled), boxes })
}

/// One forward/backward pass and optimizer update.
pub fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    sample: &TrainSample,
    gt: &GroundTruth,
    label: crate::data::LesionClass,
    lr: f64,
) -> Result<StepLoss> {
    let weights = model.config.loss;
    let mut g = Graph::new();
    let fwd = model.forward_clip(&mut g, &sample.frames, &sample.shuffled)?;
    let set = DetectionSet::from_graph(&g, &fwd.head);
    let matching = hungarian_match(&match_cost(&set, gt, &weights)?)?;
    let det = detection_loss(&mut g, &fwd.head, gt, &matching, &weights)?;
    let mut total = det.total;
    let mut video = 0.0;
    if let Some(pred) = &fwd.video {
        let v = video_class_loss(&mut g, pred, label)?;
        video = g.value(v).item();
        let weighted = g.scale(v, weights.video);
        total = g.add(total, weighted)?;
    }
    let loss = StepLoss {
        total: g.value(total).item(),
        classification: g.value(det.classification).item(),
        l1: g.value(det.l1).item(),
        giou: g.value(det.giou).item(),
        video,
        grad_norm: 0.0,
    };
    g.backward(total)?;
    model.store.collect_grads(&g)?;
    let grad_norm = model.store.clip_grad_norm(model.config.grad_clip);
    adam.step_with_lr(model.store.tensors_mut(), lr)?;
    Ok(StepLoss { grad_norm, ..loss })
}

/// Learning rate at optimizer step `step` (0-based).
pub fn learning_rate(config: &RunConfig, step: usize) -> f64 {
    if config.warmup_steps > 0 && step < config.warmup_steps {
        config.learning_rate * (step + 1) as f64 / config.warmup_steps as f64
    } else {
        config.learning_rate
    }
}

/// Observer for per-step progress.
pub trait Progress {
    fn step(&mut self, _epoch: usize, _step: usize, _loss: &StepLoss) {}
    fn epoch(&mut self, _stats: &EpochStats) {}
}

impl Progress for () {}

/// Result of [`train`]: the final model and its record.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub record: RunRecord,
}

const RECORDED_STEPS: usize = 10;

/// Train on the training split and evaluate the final model on the test
/// split.
pub fn train(config: &RunConfig, dataset: &Dataset, progress: &mut dyn Progress) -> Result<TrainOutcome> {
    config.validate()?;
    let start = Instant::now();
    let train_videos: Vec<&VideoSample> = dataset.split(Split::Train).collect();
    if train_videos.is_empty() {
        return Err(Error::Dataset("no training videos".into()));
    }
    for v in &train_videos {
        if v.resolution() != (config.backbone.height, config.backbone.width) {
            return Err(Error::Config(format!(
                "{}: resolution {:?} differs from the model input {}×{}",
                v.id,
                v.resolution(),
                config.backbone.height,
                config.backbone.width
            )));
        }
    }

    let mut model = Model::new(config.clone())?;
    let adam_config = AdamConfig {
        learning_rate: config.learning_rate,
        weight_decay: config.weight_decay,
        ..Default::default()
    };
    let mut adam = AdamState::new(adam_config, model.store.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7472_6169_6e00);

    let positions: Vec<(usize, usize)> = train_videos
        .iter()
        .enumerate()
        .flat_map(|(vi, v)| (0..v.frame_count()).map(move |k| (vi, k)))
        .collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut first_step_losses = Vec::with_capacity(RECORDED_STEPS);
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let plans: Vec<ShufflePlan> =
            train_videos.iter().map(|v| ShufflePlan::random(v.frame_count(), rng.random())).collect();
        let mut order = positions.clone();
        order.shuffle(&mut rng);
        let mut sum = StepLoss::default();
        for &(vi, k) in &order {
            let video = train_videos[vi];
            let clip = sample_clip(video, k, &plans[vi])?;
            let sample = prepare_sample(config, &clip, &mut rng)?;
            let (h, w) = video.resolution();
            let gt = GroundTruth::from_pixels(&sample.boxes, video.label, h, w);
            let loss = train_step(&mut model, &mut adam, &sample, &gt, video.label, learning_rate(config, step))?;
            if !loss.total.is_finite() {
                return Err(Error::Config(format!("loss diverged at step {step}: {loss:?}")));
            }
            if first_step_losses.len() < RECORDED_STEPS {
                first_step_losses.push(loss.total);
            }
            progress.step(epoch, step, &loss);
            accumulate(&mut sum, &loss);
            step += 1;
        }
        let stats = EpochStats { epoch, steps: order.len(), mean: scaled(&sum, 1.0 / order.len() as f64) };
        progress.epoch(&stats);
        epochs.push(stats);
    }

    let manifest = Manifest::from_dataset(dataset);
    let preds = predict(&model, dataset, Some(Split::Test))?;
    let report = evaluate(&preds, &manifest, &EvalOptions { mode: config.eval_mode, split: Some(Split::Test) })?;
    let accuracy = classification_accuracy(&preds, &manifest, Some(Split::Test))?;
    let record = RunRecord {
        config: config.clone(),
        config_hash: config.hash(),
        epochs,
        first_step_losses,
        report,
        classification_accuracy: accuracy,
        grad_clip: config.grad_clip,
        target_ap50: TARGET_AP50,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome { model, record })
}

fn accumulate(sum: &mut StepLoss, l: &StepLoss) {
    sum.total += l.total;
    sum.classification += l.classification;
    sum.l1 += l.l1;
    sum.giou += l.giou;
    sum.video += l.video;
    sum.grad_norm += l.grad_norm;
}

fn scaled(l: &StepLoss, s: f64) -> StepLoss {
    StepLoss {
        total: l.total * s,
        classification: l.classification * s,
        l1: l.l1 * s,
        giou: l.giou * s,
        video: l.video * s,
        grad_norm: l.grad_norm * s,
    }
}

/// Fixed shuffle used at inference for the video at `index` of the dataset.
pub fn eval_plan(config: &RunConfig, index: usize, frames: usize) -> ShufflePlan {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ EVAL_SHUFFLE_SALT);
    let mut seed = 0;
    for _ in 0..=index {
        seed = rng.random();
    }
    ShufflePlan::random(frames, seed)
}

/// Predictions of one video: one record per frame (possibly with no
/// detections).
pub fn predict_video(model: &Model, video: &VideoSample, plan: &ShufflePlan) -> Result<Vec<PredictionRecord>> {
    let (h, w) = video.resolution();
    (0..video.frame_count())
        .map(|k| {
            let clip = sample_clip(video, k, plan)?;
            let mut g = Graph::new();
            let fwd = model.forward_clip(&mut g, &clip.frames, &clip.shuffled)?;
            let set = DetectionSet::from_graph(&g, &fwd.head);
            let dets = to_pixel_detections(&set, h, w, MIN_EXPORT_SCORE);
            Ok(PredictionRecord {
                video_id: video.id.clone(),
                frame: k,
                boxes: dets.iter().map(|d| d.bbox).collect(),
                scores: dets.iter().map(|d| d.score).collect(),
                classes: dets.iter().map(|d| d.class).collect(),
            })
        })
        .collect()
}

/// Predictions for every video of `split` (all videos for `None`).
pub fn predict(model: &Model, dataset: &Dataset, split: Option<Split>) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for (i, e) in dataset.entries.iter().enumerate() {
        if split.is_some_and(|s| s != e.split) {
            continue;
        }
        let plan = eval_plan(&model.config, i, e.video.frame_count());
        out.extend(predict_video(model, &e.video, &plan)?);
    }
    Ok(out)
}
