//! Small convolutional backbone producing a three-level feature pyramid.
//!
//! ```text
//! frame [1×H×W]
//!   stem: conv3×3 (stride s) → relu
//!   stage i (i = 1..3): conv3×3 → relu → conv3×3 stride 2 → relu → instance norm
//!   level i = conv1×1 (c_i → d) of the stage-i output
//! ```
//!
//! With the default stem stride of 2 a 96×96 frame yields levels of 24×24,
//! 12×12 and 6×6.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Frame;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub height: usize,
    pub width: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub channels: [usize; 3],
    /// Common width of every pyramid level after projection.
    pub d: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            height: 96,
            width: 96,
            stem_channels: 16,
            stem_stride: 2,
            channels: [32, 64, 128],
            d: 64,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("backbone input resolution must be positive".into()));
        }
        if self.stem_stride == 0 {
            return Err(Error::Config("stem stride must be at least 1".into()));
        }
        if self.stem_channels == 0 || self.d == 0 || self.channels.contains(&0) {
            return Err(Error::Config("backbone channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Spatial size `(h, w)` of each pyramid level.
    pub fn level_sizes(&self) -> [(usize, usize); 3] {
        let down = |n: usize, s: usize| (n + 2 - 3) / s + 1;
        let mut hw = (down(self.height, self.stem_stride), down(self.width, self.stem_stride));
        let mut out = [(0, 0); 3];
        for slot in &mut out {
            hw = (down(hw.0, 2), down(hw.1, 2));
            *slot = hw;
        }
        out
    }
}

/// Pyramid levels, each `[d×h_i×w_i]`, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Var>) -> Self {
        FeaturePyramid { levels }
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn shapes(&self, g: &Graph) -> Vec<Vec<usize>> {
        self.levels.iter().map(|&v| g.shape(v).to_vec()).collect()
    }
}

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, rng: &mut R) -> Self {
        let w = store.add_kaiming(format!("{name}.weight"), &[c_out, c_in, k, k], c_in * k * k, rng);
        let b = store.add_zeros(format!("{name}.bias"), &[c_out]);
        Conv { w, b }
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var, stride: usize, padding: usize) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, Some(b), stride, padding)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    conv: Conv,
    down: Conv,
    proj: Conv,
}

/// One backbone instance; the same weights serve the ordered and shuffled
/// streams.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    stem: Conv,
    stages: Vec<Stage>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let stem = Conv::new(store, "backbone.stem", 1, config.stem_channels, 3, rng);
        let mut c_prev = config.stem_channels;
        let stages = config
            .channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let stage = Stage {
                    conv: Conv::new(store, &format!("backbone.stage{}.conv", i + 1), c_prev, c, 3, rng),
                    down: Conv::new(store, &format!("backbone.stage{}.down", i + 1), c, c, 3, rng),
                    proj: Conv::new(store, &format!("backbone.proj{}", i + 1), c, config.d, 1, rng),
                };
                c_prev = c;
                stage
            })
            .collect();
        Ok(Backbone { config, stem, stages })
    }

    /// Every parameter owned by the backbone.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.stem.w, self.stem.b];
        for s in &self.stages {
            for c in [&s.conv, &s.down, &s.proj] {
                ids.extend([c.w, c.b]);
            }
        }
        ids
    }

    /// Centre pixel intensities around zero so the stem sees a balanced input.
    pub fn frame_tensor(&self, frame: &Frame) -> Result<Tensor> {
        let (h, w) = (self.config.height, self.config.width);
        if (frame.height, frame.width) != (h, w) {
            return Err(Error::invalid(
                "backbone",
                format!("frame is {}×{}, backbone expects {h}×{w}", frame.height, frame.width),
            ));
        }
        Tensor::new(&[1, h, w], frame.pixels.iter().map(|p| 4.0 * (p - 0.5)).collect())
    }

    pub fn extract(&self, g: &mut Graph, store: &ParamStore, frame: &Frame) -> Result<FeaturePyramid> {
        let x = self.frame_tensor(frame)?;
        let x = g.constant(x);
        self.forward(g, store, x)
    }

    /// Pyramid of an input already on the graph (`[1×H×W]`).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<FeaturePyramid> {
        let mut h = self.stem.apply(g, store, x, self.config.stem_stride, 1)?;
        h = g.relu(h);
        let mut levels = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            h = s.conv.apply(g, store, h, 1, 1)?;
            h = g.relu(h);
            h = s.down.apply(g, store, h, 2, 1)?;
            h = g.relu(h);
            h = instance_norm(g, h)?;
            levels.push(s.proj.apply(g, store, h, 1, 0)?);
        }
        Ok(FeaturePyramid::new(levels))
    }
}

/// Per-channel normalisation over the spatial axes of `[c×h×w]`.
pub fn instance_norm(g: &mut Graph, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let flat = g.reshape(x, &[shape[0], shape[1] * shape[2]])?;
    let n = g.layer_norm(flat, NORM_EPS);
    g.reshape(n, &shape)
}
