use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetEntry, Frame, LesionClass, Split, VideoSample};
use crate::error::{Error, Result};

/// Shape of a single synthetic video.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub class: LesionClass,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 3 {
            return Err(Error::Config(format!("video needs at least 3 frames, got {}", self.frames)));
        }
        if self.height < 32 || self.width < 32 {
            return Err(Error::Config(format!(
                "resolution {}×{} below the 32×32 minimum",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

const SAMPLES_ON_BOUNDARY: usize = 720;
const SPECKLE_SHAPE: f64 = 4.0;

/// Lesion geometry for one frame: a rotated ellipse whose radius is
/// modulated by a star-shaped perturbation (zero for benign lesions).
#[derive(Clone, Debug, PartialEq)]
pub struct LesionShape {
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
    pub angle: f64,
    /// `(amplitude, frequency, phase)` terms added to the unit radius.
    pub harmonics: Vec<(f64, f64, f64)>,
}

impl LesionShape {
    fn radius(&self, phi: f64) -> f64 {
        1.0 + self.harmonics.iter().map(|&(a, m, p)| a * (m * phi + p).cos()).sum::<f64>()
    }

    /// Signed distance to the boundary in normalised lesion units; negative
    /// inside.
    fn level(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (s, c) = self.angle.sin_cos();
        let u = (dx * c + dy * s) / self.semi_axes.0;
        let v = (-dx * s + dy * c) / self.semi_axes.1;
        let rho = (u * u + v * v).sqrt();
        rho - self.radius(v.atan2(u))
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.level(x, y) <= 0.0
    }

    pub fn boundary_point(&self, phi: f64) -> (f64, f64) {
        let r = self.radius(phi);
        let (u, v) = (self.semi_axes.0 * r * phi.cos(), self.semi_axes.1 * r * phi.sin());
        let (s, c) = self.angle.sin_cos();
        (self.center.0 + u * c - v * s, self.center.1 + u * s + v * c)
    }

    /// Tight box around the sampled boundary, clipped to the frame.
    pub fn bounding_box(&self, height: usize, width: usize) -> [f64; 4] {
        let (mut x1, mut y1, mut x2, mut y2) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for i in 0..SAMPLES_ON_BOUNDARY {
            let (x, y) = self.boundary_point(2.0 * PI * i as f64 / SAMPLES_ON_BOUNDARY as f64);
            x1 = x1.min(x);
            y1 = y1.min(y);
            x2 = x2.max(x);
            y2 = y2.max(y);
        }
        [
            x1.max(0.0),
            y1.max(0.0),
            x2.min(width as f64),
            y2.min(height as f64),
        ]
    }
}

struct Track {
    shapes: Vec<LesionShape>,
    contrast: f64,
}

fn track(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Track {
    let (h, w, t) = (cfg.height as f64, cfg.width as f64, cfg.frames);
    let cx0 = rng.random_range(0.35..0.65) * w;
    let cy0 = rng.random_range(0.40..0.62) * h;
    let vx = rng.random_range(-0.25..0.25);
    let vy = rng.random_range(-0.2..0.2);
    let wobble = (rng.random_range(0.5..1.5), rng.random_range(0.0..2.0 * PI));
    let a_max = rng.random_range(0.12..0.2) * w.min(h);
    let b_max = a_max * rng.random_range(0.55..0.9);
    let angle0 = rng.random_range(-0.5..0.5);
    let spin = rng.random_range(-0.01..0.01);
    let peak = rng.random_range(0.35..0.65) * (t - 1) as f64;
    // Drawn for both classes so a shared seed gives the same trajectory.
    let m1 = rng.random_range(5..=8) as f64;
    let m2 = rng.random_range(9..=13) as f64;
    let p1 = rng.random_range(0.0..2.0 * PI);
    let p2 = rng.random_range(0.0..2.0 * PI);
    let harmonics = match cfg.class {
        LesionClass::Benign => vec![],
        LesionClass::Malignant => vec![(0.16, m1, p1), (0.09, m2, p2)],
    };
    let contrast = match cfg.class {
        LesionClass::Benign => 0.34,
        LesionClass::Malignant => 0.24,
    };

    let shapes = (0..t)
        .map(|k| {
            let kf = k as f64;
            // Appearance → largest section → disappearance.
            let u = if kf <= peak {
                if peak > 0.0 { kf / peak } else { 1.0 }
            } else {
                let tail = (t - 1) as f64 - peak;
                if tail > 0.0 { ((t - 1) as f64 - kf) / tail } else { 1.0 }
            };
            let scale = 0.3 + 0.7 * (0.5 * PI * u).sin();
            let cx = (cx0 + vx * kf + wobble.0 * (0.4 * kf + wobble.1).sin()).clamp(0.25 * w, 0.75 * w);
            let cy = (cy0 + vy * kf + wobble.0 * (0.3 * kf + wobble.1).cos()).clamp(0.3 * h, 0.7 * h);
            LesionShape {
                center: (cx, cy),
                semi_axes: (a_max * scale, b_max * scale),
                angle: angle0 + spin * kf,
                harmonics: harmonics.clone(),
            }
        })
        .collect();
    Track { shapes, contrast }
}

/// Per-frame lesion geometry of the video `generate_video(seed, cfg)` would
/// produce.
pub fn lesion_shapes(seed: u64, cfg: &SynthConfig) -> Result<Vec<LesionShape>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(track(&mut rng, cfg).shapes)
}

/// Render a video of a hypoechoic lesion over a layered, speckled
/// background. Benign lesions are smooth ellipses; malignant ones have a
/// star-perturbed boundary and lower contrast. The lesion grows to its
/// largest section and shrinks again over the video while drifting slowly.
pub fn generate_video(seed: u64, cfg: &SynthConfig) -> Result<VideoSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let Track { shapes, contrast } = track(&mut rng, cfg);
    let (h, w) = (cfg.height, cfg.width);

    // Static tissue background: a bright fascia band and two low-frequency
    // undulations.
    let band_y = rng.random_range(0.12..0.25) * h as f64;
    let band_width = rng.random_range(2.0..5.0);
    let f1 = rng.random_range(0.5..1.5);
    let f2 = rng.random_range(0.8..2.0);
    let ph1 = rng.random_range(0.0..2.0 * PI);
    let ph2 = rng.random_range(0.0..2.0 * PI);
    let background: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
            let band = 0.25 * (-((y - band_y) / band_width).powi(2)).exp();
            let depth = -0.12 * y / h as f64;
            0.52 + band
                + depth
                + 0.06 * (2.0 * PI * (f1 * y / h as f64) + ph1).sin()
                + 0.05 * (2.0 * PI * (f2 * x / w as f64 + 0.5 * y / h as f64) + ph2).sin()
        })
        .collect();

    let speckle = Gamma::new(SPECKLE_SHAPE, 1.0 / SPECKLE_SHAPE).expect("valid gamma");
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut boxes = Vec::with_capacity(cfg.frames);
    for shape in &shapes {
        let edge_px = 0.5 * (shape.semi_axes.0 + shape.semi_axes.1);
        let pixels: Vec<f64> = (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
                let d = shape.level(x, y) * edge_px;
                let inside = (0.5 - d / 1.5).clamp(0.0, 1.0);
                let bg = background[i];
                let clean = bg * (1.0 - inside) + (bg - contrast).max(0.05) * inside;
                let noise: f64 = speckle.sample(&mut rng);
                (clean * noise).clamp(0.0, 1.0)
            })
            .collect();
        let mut frame = Frame::new(h, w, pixels)?;
        frame.quantize();
        frames.push(frame);
        boxes.push(shape.bounding_box(h, w));
    }

    let video = VideoSample {
        id: format!("synthetic-{seed:016x}"),
        label: cfg.class,
        frames,
        boxes,
    };
    video.validate()?;
    Ok(video)
}

/// Parameters of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub videos: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            videos: 50,
            frames: 24,
            height: 96,
            width: 96,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Generate a class-balanced dataset (alternating benign/malignant) with a
/// seeded random train/test split of `round(videos · test_fraction)` test
/// videos.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.videos == 0 {
        return Err(Error::Config("dataset needs at least one video".into()));
    }
    if !(0.0..=1.0).contains(&cfg.test_fraction) {
        return Err(Error::Config(format!("test fraction {} outside [0, 1]", cfg.test_fraction)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seeds: Vec<u64> = (0..cfg.videos).map(|_| rng.random()).collect();
    let mut order: Vec<usize> = (0..cfg.videos).collect();
    order.shuffle(&mut rng);
    let n_test = (cfg.videos as f64 * cfg.test_fraction).round() as usize;
    let mut split = vec![Split::Train; cfg.videos];
    for &i in &order[..n_test] {
        split[i] = Split::Test;
    }

    let entries = seeds
        .iter()
        .enumerate()
        .map(|(i, &seed)| {
            let class = if i % 2 == 0 { LesionClass::Benign } else { LesionClass::Malignant };
            let synth = SynthConfig { height: cfg.height, width: cfg.width, frames: cfg.frames, class };
            let mut video = generate_video(seed, &synth)?;
            video.id = format!("video_{i:03}");
            Ok(DatasetEntry { video, split: split[i] })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { entries })
}
