//! COCO-style average precision over exported per-frame predictions.
//!
//! For each IoU threshold `t ∈ {0.50, 0.55, …, 0.95}` all detections are
//! ranked by score, each is greedily matched to the unmatched ground truth
//! of its frame with the highest IoU ≥ `t`, and AP(t) is the mean of the
//! interpolated precision at the 101 recall levels `0, 0.01, …, 1`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{validate_box, BBox, LesionClass, Manifest, Split};
use crate::error::{Error, Result};
use crate::head::iou;

pub const RECALL_POINTS: usize = 101;

/// The ten IoU thresholds 0.50:0.05:0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// One exported line: every detection kept for one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub video_id: String,
    pub frame: usize,
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
    pub classes: Vec<LesionClass>,
}

impl PredictionRecord {
    pub fn validate(&self) -> Result<()> {
        let n = self.boxes.len();
        if self.scores.len() != n || self.classes.len() != n {
            return Err(Error::Eval(format!(
                "{} frame {}: {} boxes, {} scores, {} classes",
                self.video_id,
                self.frame,
                n,
                self.scores.len(),
                self.classes.len()
            )));
        }
        if let Some(s) = self.scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::Eval(format!("{} frame {}: score {s}", self.video_id, self.frame)));
        }
        Ok(())
    }
}

pub fn write_predictions<W: Write>(records: &[PredictionRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io("<predictions>", e))?;
    }
    out.flush().map_err(|e| Error::io("<predictions>", e))
}

pub fn save_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_predictions(records, std::io::BufWriter::new(file))
}

/// Parse JSON lines; blank lines are skipped.
pub fn read_predictions<R: BufRead>(input: R) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<predictions>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: PredictionRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Eval(format!("line {}: malformed prediction record: {e}", i + 1)))?;
        r.validate().map_err(|e| Error::Eval(format!("line {}: {e}", i + 1)))?;
        out.push(r);
    }
    Ok(out)
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_predictions(BufReader::new(file))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Any detection may match any lesion.
    #[default]
    ClassAgnostic,
    /// Detections match only lesions of their own class; AP is averaged
    /// over classes that have ground truth.
    ClassAware,
}

impl EvalMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "class-agnostic" => Some(EvalMode::ClassAgnostic),
            "class-aware" => Some(EvalMode::ClassAware),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    pub mode: EvalMode,
    /// Videos to score; `None` scores every video in the manifest.
    pub split: Option<Split>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { mode: EvalMode::ClassAgnostic, split: Some(Split::Test) }
    }
}

/// Precision–recall curve at one IoU threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub iou_threshold: f64,
    /// Set in class-aware mode.
    pub category: Option<LesionClass>,
    /// Raw curve, one point per ranked detection.
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    /// Interpolated precision at the 101 recall levels.
    pub interpolated: Vec<f64>,
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoBreakdown {
    pub video_id: String,
    pub ground_truths: usize,
    pub detections: usize,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub thresholds: Vec<f64>,
    pub ap_per_threshold: Vec<f64>,
    pub curves: Vec<PrCurve>,
    pub per_video: Vec<VideoBreakdown>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Single-row table, see [`format_table`].
    pub fn to_table(&self, label: &str) -> String {
        format_table(&[(label.to_string(), [self.ap, self.ap50, self.ap75])])
    }
}

/// Aligned text table with columns AP, AP50, AP75 (×100, one decimal).
pub fn format_table(rows: &[(String, [f64; 3])]) -> String {
    let width = rows.iter().map(|(l, _)| l.chars().count()).max().unwrap_or(0).max("Method".len());
    let mut s = String::new();
    let _ = writeln!(s, "{:<width$}  {:>6}  {:>6}  {:>6}", "Method", "AP", "AP50", "AP75");
    for (label, v) in rows {
        let _ = writeln!(
            s,
            "{:<width$}  {:>6.1}  {:>6.1}  {:>6.1}",
            label,
            100.0 * v[0],
            100.0 * v[1],
            100.0 * v[2]
        );
    }
    s
}

/// A scored box with the frame it belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub frame: usize,
    pub bbox: BBox,
    pub score: f64,
    pub class: LesionClass,
}

/// Ground-truth box of one frame (`frame` indexes a caller-defined list).
#[derive(Clone, Debug, PartialEq)]
pub struct GtBox {
    pub frame: usize,
    pub bbox: BBox,
    pub class: LesionClass,
}

/// AP at one IoU threshold for a flat set of detections and ground
/// truths. Detections are ranked by descending score, ties keeping input
/// order.
pub fn average_precision(detections: &[Detection], gts: &[GtBox], threshold: f64) -> Result<PrCurve> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));
    let mut by_frame: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, gt) in gts.iter().enumerate() {
        by_frame.entry(gt.frame).or_default().push(i);
    }
    let mut matched = vec![false; gts.len()];
    let n_gt = gts.len() as f64;
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    for (rank, &di) in order.iter().enumerate() {
        let det = &detections[di];
        let mut best: Option<(usize, f64)> = None;
        for &gi in by_frame.get(&det.frame).map_or(&[][..], Vec::as_slice) {
            if matched[gi] {
                continue;
            }
            let o = iou(&det.bbox, &gts[gi].bbox)?;
            if o >= threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((gi, o));
            }
        }
        if let Some((gi, _)) = best {
            matched[gi] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(if gts.is_empty() { 0.0 } else { tp as f64 / n_gt });
    }
    let interpolated = interpolate(&recall, &precision);
    let ap = if gts.is_empty() { 0.0 } else { interpolated.iter().sum::<f64>() / RECALL_POINTS as f64 };
    Ok(PrCurve { iou_threshold: threshold, category: None, recall, precision, interpolated, ap })
}

/// Precision made non-increasing in recall, read at the 101 recall levels
/// (0 beyond the largest recall reached).
fn interpolate(recall: &[f64], precision: &[f64]) -> Vec<f64> {
    let mut envelope = precision.to_vec();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    (0..RECALL_POINTS)
        .map(|k| {
            let r = k as f64 / (RECALL_POINTS - 1) as f64;
            let idx = recall.partition_point(|&x| x < r);
            envelope.get(idx).copied().unwrap_or(0.0)
        })
        .collect()
}

struct Scene {
    detections: Vec<Detection>,
    gts: Vec<GtBox>,
    /// Frame key → video index.
    frame_video: Vec<usize>,
}

fn build_scene<'m>(preds: &[PredictionRecord], manifest: &'m Manifest, opts: &EvalOptions) -> Result<(Scene, Vec<&'m str>)> {
    let mut video_index: HashMap<&str, usize> = HashMap::new();
    let mut videos = Vec::new();
    let mut frame_base = Vec::new();
    let mut gts = Vec::new();
    let mut frame_video = Vec::new();
    for v in &manifest.videos {
        if opts.split.is_some_and(|s| s != v.split) {
            continue;
        }
        video_index.insert(v.id.as_str(), videos.len());
        frame_base.push(frame_video.len());
        for (k, b) in v.boxes.iter().enumerate() {
            gts.push(GtBox { frame: frame_video.len() + k, bbox: *b, class: v.label });
        }
        frame_video.extend(std::iter::repeat_n(videos.len(), v.frame_count));
        videos.push(v.id.as_str());
    }
    let known: HashSet<&str> = manifest.videos.iter().map(|v| v.id.as_str()).collect();
    let mut seen = HashSet::new();
    let mut detections = Vec::new();
    for r in preds {
        r.validate()?;
        if !known.contains(r.video_id.as_str()) {
            return Err(Error::Eval(format!("prediction for unknown video {:?}", r.video_id)));
        }
        let mv = manifest.get(&r.video_id).expect("known id");
        if r.frame >= mv.frame_count {
            return Err(Error::Eval(format!(
                "{}: frame {} outside 0..{}",
                r.video_id, r.frame, mv.frame_count
            )));
        }
        if !seen.insert((r.video_id.as_str(), r.frame)) {
            return Err(Error::Eval(format!("{}: duplicate record for frame {}", r.video_id, r.frame)));
        }
        let Some(&vi) = video_index.get(r.video_id.as_str()) else {
            continue;
        };
        let [h, w] = mv.resolution;
        for ((b, &score), &class) in r.boxes.iter().zip(&r.scores).zip(&r.classes) {
            validate_box(b, h, w).map_err(|e| Error::Eval(format!("{} frame {}: {e}", r.video_id, r.frame)))?;
            detections.push(Detection { frame: frame_base[vi] + r.frame, bbox: *b, score, class });
        }
    }
    Ok((Scene { detections, gts, frame_video }, videos))
}

fn score_scene(detections: &[Detection], gts: &[GtBox], mode: EvalMode) -> Result<(Vec<f64>, Vec<PrCurve>)> {
    let mut per_threshold = Vec::with_capacity(10);
    let mut curves = Vec::new();
    for t in iou_thresholds() {
        match mode {
            EvalMode::ClassAgnostic => {
                let c = average_precision(detections, gts, t)?;
                per_threshold.push(c.ap);
                curves.push(c);
            }
            EvalMode::ClassAware => {
                let mut aps = Vec::new();
                for class in LesionClass::ALL {
                    let g: Vec<GtBox> = gts.iter().filter(|x| x.class == class).cloned().collect();
                    if g.is_empty() {
                        continue;
                    }
                    let d: Vec<Detection> = detections.iter().filter(|x| x.class == class).cloned().collect();
                    let mut c = average_precision(&d, &g, t)?;
                    c.category = Some(class);
                    aps.push(c.ap);
                    curves.push(c);
                }
                per_threshold.push(if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 });
            }
        }
    }
    Ok((per_threshold, curves))
}

/// Score prediction records against the manifest's ground truth.
///
/// Records for videos outside `opts.split` are validated and ignored;
/// records naming unknown videos or frames are errors.
pub fn evaluate(preds: &[PredictionRecord], manifest: &Manifest, opts: &EvalOptions) -> Result<EvalReport> {
    let (scene, videos) = build_scene(preds, manifest, opts)?;
    let (ap_per_threshold, curves) = score_scene(&scene.detections, &scene.gts, opts.mode)?;

    let mut per_video = Vec::with_capacity(videos.len());
    for (vi, id) in videos.iter().enumerate() {
        let d: Vec<Detection> =
            scene.detections.iter().filter(|x| scene.frame_video[x.frame] == vi).cloned().collect();
        let g: Vec<GtBox> = scene.gts.iter().filter(|x| scene.frame_video[x.frame] == vi).cloned().collect();
        let (aps, _) = score_scene(&d, &g, opts.mode)?;
        per_video.push(VideoBreakdown {
            video_id: id.to_string(),
            ground_truths: g.len(),
            detections: d.len(),
            ap: aps.iter().sum::<f64>() / aps.len() as f64,
            ap50: aps[0],
            ap75: aps[5],
        });
    }

    Ok(EvalReport {
        mode: opts.mode,
        ap: ap_per_threshold.iter().sum::<f64>() / ap_per_threshold.len() as f64,
        ap50: ap_per_threshold[0],
        ap75: ap_per_threshold[5],
        thresholds: iou_thresholds(),
        ap_per_threshold,
        curves,
        per_video,
    })
}

/// Video-level accuracy: each frame votes with the class of its
/// top-scoring detection and each video takes the majority (ties go to the
/// class with the larger summed vote score). A video whose frames cast no
/// vote counts as wrong; a video with no records at all is an error.
pub fn classification_accuracy(preds: &[PredictionRecord], manifest: &Manifest, split: Option<Split>) -> Result<f64> {
    let mut votes: BTreeMap<&str, [(usize, f64); 2]> = BTreeMap::new();
    for r in preds {
        r.validate()?;
        let Some(v) = manifest.get(&r.video_id) else {
            return Err(Error::Eval(format!("prediction for unknown video {:?}", r.video_id)));
        };
        let entry = votes.entry(v.id.as_str()).or_default();
        let best = r.scores.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)));
        if let Some((i, &s)) = best {
            let slot = &mut entry[r.classes[i].index()];
            slot.0 += 1;
            slot.1 += s;
        }
    }
    let mut total = 0;
    let mut correct = 0;
    for v in manifest.videos.iter().filter(|v| split.is_none_or(|s| s == v.split)) {
        let Some(&[b, m]) = votes.get(v.id.as_str()) else {
            return Err(Error::Eval(format!("no predictions for video {:?}", v.id)));
        };
        total += 1;
        let predicted = match (b.0.cmp(&m.0), b.1.total_cmp(&m.1)) {
            _ if b.0 + m.0 == 0 => None,
            (std::cmp::Ordering::Greater, _) => Some(LesionClass::Benign),
            (std::cmp::Ordering::Less, _) => Some(LesionClass::Malignant),
            (_, std::cmp::Ordering::Less) => Some(LesionClass::Malignant),
            _ => Some(LesionClass::Benign),
        };
        if predicted == Some(v.label) {
            correct += 1;
        }
    }
    if total == 0 {
        return Err(Error::Eval("no videos to classify".into()));
    }
    Ok(correct as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ManifestVideo;

    fn manifest() -> Manifest {
        Manifest {
            videos: vec![ManifestVideo {
                id: "a".into(),
                label: LesionClass::Benign,
                frame_count: 3,
                resolution: [20, 20],
                boxes: vec![[1.0, 1.0, 5.0, 5.0], [2.0, 2.0, 6.0, 8.0], [0.0, 0.0, 10.0, 10.0]],
                split: Split::Test,
            }],
        }
    }

    fn record(frame: usize, boxes: Vec<BBox>, scores: Vec<f64>) -> PredictionRecord {
        let n = boxes.len();
        PredictionRecord { video_id: "a".into(), frame, boxes, scores, classes: vec![LesionClass::Benign; n] }
    }

    #[test]
    fn perfect_and_empty() {
        let m = manifest();
        let perfect: Vec<_> = m.videos[0].boxes.iter().enumerate().map(|(k, b)| record(k, vec![*b], vec![1.0])).collect();
        let r = evaluate(&perfect, &m, &EvalOptions::default()).unwrap();
        assert_eq!((r.ap, r.ap50, r.ap75), (1.0, 1.0, 1.0));
        let r = evaluate(&[], &m, &EvalOptions::default()).unwrap();
        assert_eq!((r.ap, r.ap50, r.ap75), (0.0, 0.0, 0.0));
    }

    #[test]
    fn one_hit_one_false_positive_over_two_truths() {
        let gts = vec![
            GtBox { frame: 0, bbox: [0.0, 0.0, 2.0, 2.0], class: LesionClass::Benign },
            GtBox { frame: 1, bbox: [0.0, 0.0, 2.0, 2.0], class: LesionClass::Benign },
        ];
        let dets = vec![
            Detection { frame: 0, bbox: [0.0, 0.0, 2.0, 2.0], score: 0.9, class: LesionClass::Benign },
            Detection { frame: 0, bbox: [5.0, 5.0, 6.0, 6.0], score: 0.8, class: LesionClass::Benign },
        ];
        let c = average_precision(&dets, &gts, 0.5).unwrap();
        assert_eq!(c.recall, vec![0.5, 0.5]);
        assert_eq!(c.precision, vec![1.0, 0.5]);
        assert_eq!(c.ap, 51.0 / 101.0);
    }

    #[test]
    fn unknown_ids_are_errors() {
        let m = manifest();
        let mut r = record(0, vec![], vec![]);
        r.video_id = "zzz".into();
        assert!(evaluate(&[r], &m, &EvalOptions::default()).is_err());
        assert!(evaluate(&[record(3, vec![], vec![])], &m, &EvalOptions::default()).is_err());
        assert!(read_predictions("{\"video_id\":\"a\"}\n".as_bytes()).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let recs = vec![record(0, vec![[1.0, 2.0, 3.0, 4.0]], vec![0.25]), record(1, vec![], vec![])];
        let mut buf = Vec::new();
        write_predictions(&recs, &mut buf).unwrap();
        assert_eq!(read_predictions(buf.as_slice()).unwrap(), recs);
    }

    #[test]
    fn table_format() {
        let t = format_table(&[("Basic".into(), [0.278, 0.5, 0.3])]);
        assert!(t.contains("27.8"), "{t}");
        assert!(t.lines().next().unwrap().contains("AP50"));
    }

    #[test]
    fn accuracy_counts() {
        let mut m = manifest();
        for (i, label) in [LesionClass::Malignant, LesionClass::Benign, LesionClass::Malignant].into_iter().enumerate() {
            let mut v = m.videos[0].clone();
            v.id = format!("v{i}");
            v.label = label;
            m.videos.push(v);
        }
        let vote = |id: &str, class| PredictionRecord {
            video_id: id.into(),
            frame: 0,
            boxes: vec![[0.0, 0.0, 1.0, 1.0]],
            scores: vec![0.9],
            classes: vec![class],
        };
        let preds = vec![
            vote("a", LesionClass::Benign),
            vote("v0", LesionClass::Malignant),
            vote("v1", LesionClass::Benign),
            vote("v2", LesionClass::Benign),
        ];
        assert_eq!(classification_accuracy(&preds, &m, None).unwrap(), 0.75);
        assert!(classification_accuracy(&preds[..3], &m, None).is_err());
    }
}
