use serde::{Deserialize, Serialize};

use super::boxes::{cxcywh_to_xyxy, giou, xyxy_to_cxcywh};
use super::{DetectionSet, HeadOutput, MatchResult, VideoPrediction, NUM_CLASSES};
use crate::data::{BBox, LesionClass};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Class index of the no-object slot.
pub const NO_OBJECT: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub video: f64,
    /// Relative weight of unmatched (no-object) queries in the class NLL.
    pub no_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { cls: 2.0, l1: 5.0, giou: 2.0, video: 1.0, no_object: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.cls, self.l1, self.giou, self.video, self.no_object];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Ground truth of one frame with boxes normalised to `(cx, cy, w, h)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub boxes: Vec<[f64; 4]>,
    pub classes: Vec<usize>,
}

impl GroundTruth {
    /// Pixel corner boxes of a `height×width` frame, all of one class.
    pub fn from_pixels(boxes: &[BBox], class: LesionClass, height: usize, width: usize) -> Self {
        let (h, w) = (height as f64, width as f64);
        GroundTruth {
            boxes: boxes.iter().map(|b| xyxy_to_cxcywh(&[b[0] / w, b[1] / h, b[2] / w, b[3] / h])).collect(),
            classes: vec![class.index(); boxes.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

fn nll(p: f64) -> f64 {
    -p.max(f64::MIN_POSITIVE).ln()
}

/// `cost[j][q] = λ_cls·(−ln p_q(c_j)) + λ_l1·‖b_q − b_j‖₁ + λ_giou·(1 − gIoU(b_q, b_j))`.
pub fn match_cost(pred: &DetectionSet, gt: &GroundTruth, weights: &LossWeights) -> Result<Vec<Vec<f64>>> {
    weights.validate()?;
    gt.boxes
        .iter()
        .zip(&gt.classes)
        .map(|(gb, &c)| {
            let g_xyxy = cxcywh_to_xyxy(gb);
            pred.boxes
                .iter()
                .zip(&pred.class_probs)
                .map(|(pb, probs)| {
                    let l1: f64 = pb.iter().zip(gb).map(|(a, b)| (a - b).abs()).sum();
                    let gi = giou(&cxcywh_to_xyxy(pb), &g_xyxy)?;
                    Ok(weights.cls * nll(probs[c]) + weights.l1 * l1 + weights.giou * (1.0 - gi))
                })
                .collect()
        })
        .collect()
}

/// Scalar loss terms on the graph; `total` already includes the weights.
#[derive(Clone, Copy, Debug)]
pub struct DetectionLoss {
    pub total: Var,
    /// Weighted-mean class NLL (before `λ_cls`).
    pub classification: Var,
    /// Mean ℓ1 box distance per ground truth (before `λ_l1`).
    pub l1: Var,
    /// Mean `1 − gIoU` per ground truth (before `λ_giou`).
    pub giou: Var,
}

/// Set-prediction loss of one frame.
///
/// Matched queries are pushed towards their ground-truth class with weight
/// 1 and unmatched queries towards no-object with weight `no_object`; the
/// class term is the weighted mean NLL. Box terms are averaged over ground
/// truths.
pub fn detection_loss(
    g: &mut Graph,
    out: &HeadOutput,
    gt: &GroundTruth,
    matching: &MatchResult,
    weights: &LossWeights,
) -> Result<DetectionLoss> {
    weights.validate()?;
    let n_queries = g.shape(out.logits)[0];
    if matching.assignment.len() != gt.len() {
        return Err(Error::invalid(
            "detection_loss",
            format!("{} matches for {} ground truths", matching.assignment.len(), gt.len()),
        ));
    }
    if let Some(&c) = gt.classes.iter().find(|&&c| c >= NO_OBJECT) {
        return Err(Error::invalid("detection_loss", format!("ground-truth class {c} is not a lesion class")));
    }
    if matching.assignment.iter().any(|&q| q >= n_queries) {
        return Err(Error::invalid("detection_loss", "match refers to a query that does not exist"));
    }
    let targets = matching.query_targets(n_queries);

    let mut mask = vec![0.0; n_queries * NUM_CLASSES];
    let mut total_weight = 0.0;
    for (q, t) in targets.iter().enumerate() {
        let (class, w) = match t {
            Some(j) => (gt.classes[*j], 1.0),
            None => (NO_OBJECT, weights.no_object),
        };
        mask[q * NUM_CLASSES + class] = w;
        total_weight += w;
    }
    let log_probs = g.log_softmax(out.logits, 1)?;
    let classification = if total_weight > 0.0 {
        mask.iter_mut().for_each(|m| *m /= total_weight);
        let mask = g.constant(Tensor::new(&[n_queries, NUM_CLASSES], mask)?);
        let picked = g.mul(log_probs, mask)?;
        let s = g.sum(picked);
        g.neg(s)
    } else {
        g.constant(Tensor::scalar(0.0))
    };

    let (l1, giou_loss) = if gt.is_empty() {
        (g.constant(Tensor::scalar(0.0)), g.constant(Tensor::scalar(0.0)))
    } else {
        let n = gt.len();
        let pred = g.gather_rows(out.boxes, &matching.assignment)?;
        let target = g.constant(Tensor::new(&[n, 4], gt.boxes.iter().flatten().copied().collect())?);
        let diff = g.sub(pred, target)?;
        let abs = g.abs(diff);
        let l1_sum = g.sum(abs);
        let l1 = g.scale(l1_sum, 1.0 / n as f64);
        let gi = giou_rows(g, pred, &gt.boxes)?;
        let gi_sum = g.sum(gi);
        let gi_mean = g.scale(gi_sum, -1.0 / n as f64);
        (l1, g.add_scalar(gi_mean, 1.0))
    };

    let a = g.scale(classification, weights.cls);
    let b = g.scale(l1, weights.l1);
    let c = g.scale(giou_loss, weights.giou);
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(DetectionLoss { total, classification, l1, giou: giou_loss })
}

/// Differentiable gIoU between predicted `(cx, cy, w, h)` rows `[n×4]` and
/// fixed targets, as an `[n×1]` column.
fn giou_rows(g: &mut Graph, pred: Var, targets: &[[f64; 4]]) -> Result<Var> {
    let n = targets.len();
    let col = |k: usize| -> Vec<f64> { targets.iter().map(|t| cxcywh_to_xyxy(t)[k]).collect() };
    let mut gt = Vec::with_capacity(4);
    for k in 0..4 {
        gt.push(g.constant(Tensor::new(&[n, 1], col(k))?));
    }
    let area_gt: Vec<f64> = targets.iter().map(|t| t[2] * t[3]).collect();
    let area_gt = g.constant(Tensor::new(&[n, 1], area_gt)?);

    let cx = g.narrow(pred, 1, 0, 1)?;
    let cy = g.narrow(pred, 1, 1, 1)?;
    let w = g.narrow(pred, 1, 2, 1)?;
    let h = g.narrow(pred, 1, 3, 1)?;
    let hw = g.scale(w, 0.5);
    let hh = g.scale(h, 0.5);
    let x1 = g.sub(cx, hw)?;
    let x2 = g.add(cx, hw)?;
    let y1 = g.sub(cy, hh)?;
    let y2 = g.add(cy, hh)?;

    let ix2 = g.minimum(x2, gt[2])?;
    let ix1 = g.maximum(x1, gt[0])?;
    let iy2 = g.minimum(y2, gt[3])?;
    let iy1 = g.maximum(y1, gt[1])?;
    let iw = g.sub(ix2, ix1)?;
    let iw = g.clamp_min(iw, 0.0);
    let ih = g.sub(iy2, iy1)?;
    let ih = g.clamp_min(ih, 0.0);
    let inter = g.mul(iw, ih)?;
    let area_p = g.mul(w, h)?;
    let sum_areas = g.add(area_p, area_gt)?;
    let union = g.sub(sum_areas, inter)?;
    let iou = g.div(inter, union)?;

    let ex2 = g.maximum(x2, gt[2])?;
    let ex1 = g.minimum(x1, gt[0])?;
    let ey2 = g.maximum(y2, gt[3])?;
    let ey1 = g.minimum(y1, gt[1])?;
    let ew = g.sub(ex2, ex1)?;
    let eh = g.sub(ey2, ey1)?;
    let enclosing = g.mul(ew, eh)?;
    let slack = g.sub(enclosing, union)?;
    let penalty = g.div(slack, enclosing)?;
    g.sub(iou, penalty)
}

/// `−ln p(label)` of the video classifier, computed from its logits.
pub fn video_class_loss(g: &mut Graph, pred: &VideoPrediction, label: LesionClass) -> Result<Var> {
    let lp = g.log_softmax(pred.logits, 1)?;
    let picked = g.narrow(lp, 1, label.index(), 1)?;
    let s = g.sum(picked);
    Ok(g.neg(s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::{hungarian_match, video_classify};

    fn head_output(g: &mut Graph, logits: Vec<f64>, boxes: Vec<f64>) -> HeadOutput {
        let n = boxes.len() / 4;
        let logits = g.leaf(Tensor::new(&[n, 3], logits).unwrap());
        let class_probs = g.softmax(logits, 1).unwrap();
        let boxes = g.leaf(Tensor::new(&[n, 4], boxes).unwrap());
        HeadOutput { logits, class_probs, boxes, z: boxes }
    }

    #[test]
    fn uniform_single_query_is_ln3() {
        let mut g = Graph::new();
        let out = head_output(&mut g, vec![0.0; 3], vec![0.5, 0.5, 0.2, 0.2]);
        let gt = GroundTruth { boxes: vec![[0.3, 0.3, 0.1, 0.4]], classes: vec![1] };
        let w = LossWeights { cls: 1.0, l1: 0.0, giou: 0.0, ..Default::default() };
        let m = MatchResult { assignment: vec![0], cost: 0.0 };
        let loss = detection_loss(&mut g, &out, &gt, &m, &w).unwrap();
        assert!((g.value(loss.total).item() - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let mut g = Graph::new();
        let b = [0.4, 0.6, 0.3, 0.2];
        let out = head_output(&mut g, vec![60.0, 0.0, 0.0, 0.0, 0.0, 60.0], [b, [0.5; 4]].concat());
        let gt = GroundTruth { boxes: vec![b], classes: vec![0] };
        let set = DetectionSet::from_graph(&g, &out);
        let m = hungarian_match(&match_cost(&set, &gt, &LossWeights::default()).unwrap()).unwrap();
        assert_eq!(m.assignment, vec![0]);
        let loss = detection_loss(&mut g, &out, &gt, &m, &LossWeights::default()).unwrap();
        let v = g.value(loss.total).item();
        assert!((0.0..1e-6).contains(&v), "{v}");
    }

    #[test]
    fn negative_weight_is_rejected() {
        let w = LossWeights { giou: -1.0, ..Default::default() };
        assert!(w.validate().is_err());
    }

    #[test]
    fn video_loss_cases() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::ones(&[3, 2]));
        let w = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::zeros(&[2]));
        let p = video_classify(&mut g, z, w, b).unwrap();
        let l = video_class_loss(&mut g, &p, LesionClass::Malignant).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-15);
        let b = g.constant(Tensor::new(&[2], vec![0.0, 800.0]).unwrap());
        let p = video_classify(&mut g, z, w, b).unwrap();
        let l = video_class_loss(&mut g, &p, LesionClass::Malignant).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }
}
