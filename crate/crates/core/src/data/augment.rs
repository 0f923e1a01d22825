use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BBox, Frame};
use crate::error::{Error, Result};

/// A concrete augmentation. Every frame passed to [`augment`] in one call
/// receives the identical transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Augmentation {
    None,
    HorizontalFlip,
    VerticalFlip,
    /// Crop a window of the given size at a random offset. When boxes are
    /// supplied the window is chosen to contain all of them if it can.
    RandomCrop { height: usize, width: usize },
    CenterCrop { height: usize, width: usize },
    Resize { height: usize, width: usize },
    /// Set each pixel to 0 or 1 (equal odds) with probability `p`.
    RandomPepper { p: f64 },
    /// Rotate about the frame centre by a uniform angle in
    /// `[-max_degrees, max_degrees]`, filling with black.
    RandomRotation { max_degrees: f64 },
}

/// Named augmentation as written in run configs; parameters are derived
/// from the frame size by [`AugmentKind::build`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    None,
    HorizontalFlip,
    VerticalFlip,
    RandomCrop,
    CenterCrop,
    Resize,
    RandomPepper,
    RandomRotation,
}

pub const DEFAULT_PEPPER: f64 = 0.02;
const CROP_FRACTION: f64 = 0.8;
const RESIZE_FRACTION: f64 = 0.75;
const MAX_ROTATION_DEGREES: f64 = 15.0;

impl AugmentKind {
    pub fn build(self, height: usize, width: usize) -> Augmentation {
        let frac = |n: usize, f: f64| ((n as f64 * f).round() as usize).max(1);
        match self {
            AugmentKind::None => Augmentation::None,
            AugmentKind::HorizontalFlip => Augmentation::HorizontalFlip,
            AugmentKind::VerticalFlip => Augmentation::VerticalFlip,
            AugmentKind::RandomCrop => Augmentation::RandomCrop {
                height: frac(height, CROP_FRACTION),
                width: frac(width, CROP_FRACTION),
            },
            AugmentKind::CenterCrop => Augmentation::CenterCrop {
                height: frac(height, CROP_FRACTION),
                width: frac(width, CROP_FRACTION),
            },
            AugmentKind::Resize => Augmentation::Resize {
                height: frac(height, RESIZE_FRACTION),
                width: frac(width, RESIZE_FRACTION),
            },
            AugmentKind::RandomPepper => Augmentation::RandomPepper { p: DEFAULT_PEPPER },
            AugmentKind::RandomRotation => Augmentation::RandomRotation { max_degrees: MAX_ROTATION_DEGREES },
        }
    }
}

fn check_box(b: BBox) -> Result<BBox> {
    if b[2] - b[0] > 1e-9 && b[3] - b[1] > 1e-9 {
        Ok(b)
    } else {
        Err(Error::InvalidBox(b, "augmentation pushed the box out of the frame"))
    }
}

fn crop(frames: &[Frame], boxes: &[BBox], top: usize, left: usize, ch: usize, cw: usize) -> Result<(Vec<Frame>, Vec<BBox>)> {
    let out = frames
        .iter()
        .map(|f| {
            let mut pixels = Vec::with_capacity(ch * cw);
            for y in top..top + ch {
                pixels.extend_from_slice(&f.pixels[y * f.width + left..][..cw]);
            }
            Frame { height: ch, width: cw, pixels }
        })
        .collect();
    let (l, t) = (left as f64, top as f64);
    let boxes = boxes
        .iter()
        .map(|b| {
            check_box([
                (b[0] - l).clamp(0.0, cw as f64),
                (b[1] - t).clamp(0.0, ch as f64),
                (b[2] - l).clamp(0.0, cw as f64),
                (b[3] - t).clamp(0.0, ch as f64),
            ])
        })
        .collect::<Result<_>>()?;
    Ok((out, boxes))
}

/// Offset range for one axis that keeps `[lo, hi]` inside the window, or
/// the whole feasible range when the boxes do not fit.
fn crop_range(lo: f64, hi: f64, window: usize, full: usize) -> (usize, usize) {
    let max_off = full - window;
    let a = (hi.ceil() as isize - window as isize).max(0) as usize;
    let b = (lo.floor().max(0.0) as usize).min(max_off);
    if a <= b {
        (a, b)
    } else {
        (0, max_off)
    }
}

pub fn resize_frame(f: &Frame, height: usize, width: usize) -> Frame {
    let (sy, sx) = (f.height as f64 / height as f64, f.width as f64 / width as f64);
    let mut pixels = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            pixels.push(f.sample((x as f64 + 0.5) * sx, (y as f64 + 0.5) * sy, 0.0));
        }
    }
    Frame { height, width, pixels }
}

pub fn resize_box(b: &BBox, from: (usize, usize), to: (usize, usize)) -> BBox {
    let (sy, sx) = (to.0 as f64 / from.0 as f64, to.1 as f64 / from.1 as f64);
    [b[0] * sx, b[1] * sy, b[2] * sx, b[3] * sy]
}

/// Apply one augmentation identically to every frame and transform the
/// boxes to match. Frames must share one resolution.
pub fn augment(frames: &[Frame], boxes: &[BBox], aug: &Augmentation, seed: u64) -> Result<(Vec<Frame>, Vec<BBox>)> {
    let first = frames.first().ok_or_else(|| Error::Dataset("augment: no frames".into()))?;
    let (h, w) = (first.height, first.width);
    if frames.iter().any(|f| (f.height, f.width) != (h, w)) {
        return Err(Error::Dataset("augment: frames differ in resolution".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (wf, hf) = (w as f64, h as f64);
    match *aug {
        Augmentation::None => Ok((frames.to_vec(), boxes.to_vec())),
        Augmentation::HorizontalFlip => {
            let out = frames
                .iter()
                .map(|f| {
                    let mut pixels = f.pixels.clone();
                    pixels.chunks_exact_mut(w).for_each(<[f64]>::reverse);
                    Frame { pixels, ..*f }
                })
                .collect();
            Ok((out, boxes.iter().map(|b| [wf - b[2], b[1], wf - b[0], b[3]]).collect()))
        }
        Augmentation::VerticalFlip => {
            let out = frames
                .iter()
                .map(|f| {
                    let pixels = f.pixels.chunks_exact(w).rev().flatten().copied().collect();
                    Frame { pixels, ..*f }
                })
                .collect();
            Ok((out, boxes.iter().map(|b| [b[0], hf - b[3], b[2], hf - b[1]]).collect()))
        }
        Augmentation::RandomCrop { height: ch, width: cw } | Augmentation::CenterCrop { height: ch, width: cw } => {
            if ch == 0 || cw == 0 || ch > h || cw > w {
                return Err(Error::Dataset(format!("crop {ch}×{cw} does not fit frame {h}×{w}")));
            }
            let (top, left) = if matches!(aug, Augmentation::CenterCrop { .. }) {
                ((h - ch) / 2, (w - cw) / 2)
            } else {
                let union = boxes.iter().fold([f64::MAX, f64::MAX, f64::MIN, f64::MIN], |u, b| {
                    [u[0].min(b[0]), u[1].min(b[1]), u[2].max(b[2]), u[3].max(b[3])]
                });
                let (xr, yr) = if boxes.is_empty() {
                    ((0, w - cw), (0, h - ch))
                } else {
                    (crop_range(union[0], union[2], cw, w), crop_range(union[1], union[3], ch, h))
                };
                (rng.random_range(yr.0..=yr.1), rng.random_range(xr.0..=xr.1))
            };
            crop(frames, boxes, top, left, ch, cw)
        }
        Augmentation::Resize { height: nh, width: nw } => {
            if nh == 0 || nw == 0 {
                return Err(Error::Dataset("resize to an empty frame".into()));
            }
            let out = frames.iter().map(|f| resize_frame(f, nh, nw)).collect();
            Ok((out, boxes.iter().map(|b| resize_box(b, (h, w), (nh, nw))).collect()))
        }
        Augmentation::RandomPepper { p } => {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Dataset(format!("pepper fraction {p} outside [0, 1]")));
            }
            if p == 0.0 {
                return Ok((frames.to_vec(), boxes.to_vec()));
            }
            let mask: Vec<Option<f64>> = (0..h * w)
                .map(|_| {
                    let hit = rng.random_bool(p);
                    let white = rng.random_bool(0.5);
                    hit.then_some(if white { 1.0 } else { 0.0 })
                })
                .collect();
            let out = frames
                .iter()
                .map(|f| {
                    let pixels = f.pixels.iter().zip(&mask).map(|(&v, m)| m.unwrap_or(v)).collect();
                    Frame { pixels, ..*f }
                })
                .collect();
            Ok((out, boxes.to_vec()))
        }
        Augmentation::RandomRotation { max_degrees } => {
            let angle = if max_degrees > 0.0 {
                rng.random_range(-max_degrees..=max_degrees).to_radians()
            } else {
                0.0
            };
            let (s, c) = angle.sin_cos();
            let (cx, cy) = (wf / 2.0, hf / 2.0);
            let rotate = |x: f64, y: f64, s: f64| {
                let (dx, dy) = (x - cx, y - cy);
                (cx + dx * c - dy * s, cy + dx * s + dy * c)
            };
            let out = frames
                .iter()
                .map(|f| {
                    let mut pixels = Vec::with_capacity(h * w);
                    for y in 0..h {
                        for x in 0..w {
                            let (sx, sy) = rotate(x as f64 + 0.5, y as f64 + 0.5, -s);
                            pixels.push(f.sample(sx, sy, 0.0));
                        }
                    }
                    Frame { pixels, ..*f }
                })
                .collect();
            let boxes = boxes
                .iter()
                .map(|b| {
                    let corners = [(b[0], b[1]), (b[2], b[1]), (b[0], b[3]), (b[2], b[3])].map(|(x, y)| rotate(x, y, s));
                    let xs = corners.map(|p| p.0);
                    let ys = corners.map(|p| p.1);
                    check_box([
                        xs.iter().copied().fold(f64::MAX, f64::min).clamp(0.0, wf),
                        ys.iter().copied().fold(f64::MAX, f64::min).clamp(0.0, hf),
                        xs.iter().copied().fold(f64::MIN, f64::max).clamp(0.0, wf),
                        ys.iter().copied().fold(f64::MIN, f64::max).clamp(0.0, hf),
                    ])
                })
                .collect::<Result<_>>()?;
            Ok((out, boxes))
        }
    }
}
