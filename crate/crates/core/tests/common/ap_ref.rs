//! Brute-force precision/recall and AP, plus random scenes to score.

use cvanet::data::{BBox, LesionClass, Manifest, ManifestVideo, Split};
use cvanet::eval::{EvalMode, EvalOptions, PredictionRecord};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::rng;

pub const SIZE: f64 = 64.0;

pub fn area(b: &BBox) -> f64 {
    (b[2] - b[0]) * (b[3] - b[1])
}

pub fn overlap(a: &BBox, b: &BBox) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    inter / (area(a) + area(b) - inter)
}

pub struct Flat {
    /// (frame key, box, score, class)
    pub dets: Vec<(usize, BBox, f64, LesionClass)>,
    pub gts: Vec<(usize, BBox, LesionClass)>,
}

pub fn flatten(preds: &[PredictionRecord], manifest: &Manifest) -> Flat {
    let key = |id: &str, k: usize| {
        let vi = manifest.videos.iter().position(|v| v.id == id).unwrap();
        vi * 1000 + k
    };
    let mut dets = Vec::new();
    for r in preds {
        for i in 0..r.boxes.len() {
            dets.push((key(&r.video_id, r.frame), r.boxes[i], r.scores[i], r.classes[i]));
        }
    }
    let gts = manifest
        .videos
        .iter()
        .flat_map(|v| v.boxes.iter().enumerate().map(move |(k, b)| (k, *b, v.label, v.id.clone())))
        .map(|(k, b, c, id)| (key(&id, k), b, c))
        .collect();
    Flat { dets, gts }
}

/// Precision/recall after every rank, then 101-point interpolated AP, all
/// by direct enumeration.
pub fn brute_ap(dets: &[(usize, BBox, f64, LesionClass)], gts: &[(usize, BBox, LesionClass)], t: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    // stable ranking: equal scores keep record order
    let mut ranked: Vec<usize> = (0..dets.len()).collect();
    for i in 1..ranked.len() {
        let mut j = i;
        while j > 0 && dets[ranked[j]].2 > dets[ranked[j - 1]].2 {
            ranked.swap(j, j - 1);
            j -= 1;
        }
    }
    let mut taken = vec![false; gts.len()];
    let mut points = Vec::new();
    let mut tp = 0.0;
    for (n, &d) in ranked.iter().enumerate() {
        let (frame, b, _, _) = dets[d];
        let mut best: Option<usize> = None;
        for (gi, g) in gts.iter().enumerate() {
            if g.0 != frame || taken[gi] {
                continue;
            }
            let o = overlap(&b, &g.1);
            if o >= t && best.is_none_or(|bi| o > overlap(&b, &gts[bi].1)) {
                best = Some(gi);
            }
        }
        if let Some(gi) = best {
            taken[gi] = true;
            tp += 1.0;
        }
        points.push((tp / gts.len() as f64, tp / (n + 1) as f64));
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        sum += points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
    }
    sum / 101.0
}

pub fn brute_report(flat: &Flat, mode: EvalMode) -> Vec<f64> {
    (0..10)
        .map(|i| {
            let t = (50 + 5 * i) as f64 / 100.0;
            match mode {
                EvalMode::ClassAgnostic => brute_ap(&flat.dets, &flat.gts, t),
                EvalMode::ClassAware => {
                    let aps: Vec<f64> = LesionClass::ALL
                        .iter()
                        .filter(|&&c| flat.gts.iter().any(|g| g.2 == c))
                        .map(|&c| {
                            let d: Vec<_> = flat.dets.iter().filter(|x| x.3 == c).cloned().collect();
                            let g: Vec<_> = flat.gts.iter().filter(|x| x.2 == c).cloned().collect();
                            brute_ap(&d, &g, t)
                        })
                        .collect();
                    aps.iter().sum::<f64>() / aps.len() as f64
                }
            }
        })
        .collect()
}

pub fn random_box(r: &mut ChaCha8Rng) -> BBox {
    let (w, h) = (r.random_range(4.0..24.0), r.random_range(4.0..24.0));
    let (x, y) = (r.random_range(0.0..SIZE - w), r.random_range(0.0..SIZE - h));
    [x, y, x + w, y + h]
}

pub fn jitter(b: &BBox, r: &mut ChaCha8Rng, amount: f64) -> BBox {
    let mut out = *b;
    for v in &mut out {
        *v += r.random_range(-amount..amount);
    }
    let out = [out[0].clamp(0.0, SIZE - 1.0), out[1].clamp(0.0, SIZE - 1.0), out[2], out[3]];
    [out[0], out[1], out[2].clamp(out[0] + 0.5, SIZE), out[3].clamp(out[1] + 0.5, SIZE)]
}

pub fn random_scene(seed: u64) -> (Vec<PredictionRecord>, Manifest) {
    let mut r = rng(seed);
    let n_videos = r.random_range(1..=3);
    let mut videos = Vec::new();
    let mut preds = Vec::new();
    for v in 0..n_videos {
        let frames = r.random_range(2..=5);
        let label = if r.random_bool(0.5) { LesionClass::Benign } else { LesionClass::Malignant };
        let boxes: Vec<BBox> = (0..frames).map(|_| random_box(&mut r)).collect();
        let id = format!("v{v}");
        for (k, gt) in boxes.iter().enumerate() {
            if r.random_bool(0.15) {
                continue;
            }
            let n = r.random_range(0..=3);
            let mut rec = PredictionRecord { video_id: id.clone(), frame: k, boxes: vec![], scores: vec![], classes: vec![] };
            for _ in 0..n {
                let b = if r.random_bool(0.6) { jitter(gt, &mut r, 4.0) } else { random_box(&mut r) };
                rec.boxes.push(b);
                rec.scores.push(r.random_range(0.0..1.0));
                rec.classes.push(if r.random_bool(0.7) { label } else { LesionClass::ALL[r.random_range(0..2)] });
            }
            preds.push(rec);
        }
        videos.push(ManifestVideo {
            id,
            label,
            frame_count: frames,
            resolution: [SIZE as usize, SIZE as usize],
            boxes,
            split: Split::Test,
        });
    }
    (preds, Manifest { videos })
}

pub fn opts(mode: EvalMode) -> EvalOptions {
    EvalOptions { mode, split: Some(Split::Test) }
}
