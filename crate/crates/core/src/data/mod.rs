//! Synthetic lesion videos: generation, clip sampling, augmentation and
//! on-disk storage.

mod augment;
mod clip;
mod io;
mod synth;

pub use augment::{augment, AugmentKind, Augmentation};
pub use clip::{sample_clip, Clip, ShufflePlan};
pub use io::{frame_path, load_dataset, load_manifest, save_dataset, Manifest, ManifestVideo, FRAME_FILE_DIGITS};
pub use synth::{generate_dataset, generate_video, lesion_shapes, DatasetConfig, LesionShape, SynthConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box `[x1, y1, x2, y2]` in absolute pixel coordinates.
pub type BBox = [f64; 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LesionClass {
    Benign,
    Malignant,
}

impl LesionClass {
    pub const ALL: [LesionClass; 2] = [LesionClass::Benign, LesionClass::Malignant];

    pub fn index(self) -> usize {
        match self {
            LesionClass::Benign => 0,
            LesionClass::Malignant => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LesionClass::Benign => "benign",
            LesionClass::Malignant => "malignant",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "benign" => Some(LesionClass::Benign),
            "malignant" => Some(LesionClass::Malignant),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Grayscale image, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Frame {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::Dataset(format!(
                "frame {height}×{width} cannot hold {} pixels",
                pixels.len()
            )));
        }
        Ok(Frame { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Frame { height, width, pixels: vec![value; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centres at
    /// integer + 0.5); `fill` outside the image.
    pub fn sample(&self, x: f64, y: f64, fill: f64) -> f64 {
        let fx = x - 0.5;
        let fy = y - 0.5;
        if fx < -0.5 || fy < -0.5 || fx > self.width as f64 - 0.5 || fy > self.height as f64 - 0.5 {
            return fill;
        }
        let x0 = fx.floor().clamp(0.0, (self.width - 1) as f64) as usize;
        let y0 = fy.floor().clamp(0.0, (self.height - 1) as f64) as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = (fx - x0 as f64).clamp(0.0, 1.0);
        let ty = (fy - y0 as f64).clamp(0.0, 1.0);
        let top = self.get(y0, x0) * (1.0 - tx) + self.get(y0, x1) * tx;
        let bottom = self.get(y1, x0) * (1.0 - tx) + self.get(y1, x1) * tx;
        top * (1.0 - ty) + bottom * ty
    }

    /// Round every pixel to the nearest multiple of 1/255 so that 8-bit
    /// storage is lossless.
    pub fn quantize(&mut self) {
        for p in &mut self.pixels {
            *p = (p.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Frame::new(height, width, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }
}

/// One annotated video: ordered frames with one box per frame and a single
/// lesion class for the whole video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub label: LesionClass,
    pub frames: Vec<Frame>,
    pub boxes: Vec<BBox>,
}

impl VideoSample {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.frames[0].height, self.frames[0].width)
    }

    /// Check the structural invariants: at least three frames, one
    /// resolution, one box per frame, every box inside the frame.
    pub fn validate(&self) -> Result<()> {
        let id = &self.id;
        if self.frames.len() < 3 {
            return Err(Error::Dataset(format!("{id}: {} frames, need at least 3", self.frames.len())));
        }
        if self.boxes.len() != self.frames.len() {
            return Err(Error::Dataset(format!(
                "{id}: {} boxes for {} frames",
                self.boxes.len(),
                self.frames.len()
            )));
        }
        let (h, w) = self.resolution();
        if let Some(k) = self.frames.iter().position(|f| (f.height, f.width) != (h, w)) {
            return Err(Error::Dataset(format!("{id}: frame {k} resolution differs from frame 0")));
        }
        for (k, b) in self.boxes.iter().enumerate() {
            validate_box(b, h, w).map_err(|e| Error::Dataset(format!("{id}: frame {k}: {e}")))?;
        }
        Ok(())
    }
}

/// `0 ≤ x1 < x2 ≤ w` and `0 ≤ y1 < y2 ≤ h`.
pub fn validate_box(b: &BBox, height: usize, width: usize) -> Result<()> {
    let [x1, y1, x2, y2] = *b;
    if !b.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidBox(*b, "non-finite coordinate"));
    }
    if !(x1 < x2 && y1 < y2) {
        return Err(Error::InvalidBox(*b, "box requires x1 < x2 and y1 < y2"));
    }
    if x1 < 0.0 || y1 < 0.0 || x2 > width as f64 || y2 > height as f64 {
        return Err(Error::InvalidBox(*b, "box leaves the frame"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEntry {
    pub video: VideoSample,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub entries: Vec<DatasetEntry>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &VideoSample> {
        self.entries.iter().filter(move |e| e.split == split).map(|e| &e.video)
    }

    pub fn get(&self, id: &str) -> Option<&DatasetEntry> {
        self.entries.iter().find(|e| e.video.id == id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
