use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::RunConfig;
use crate::backbone::{Backbone, FeaturePyramid};
use crate::data::{BBox, Frame, LesionClass};
use crate::error::{Error, Result};
use crate::fusion::{FusedPyramid, InterFusion, IntraFusion};
use crate::head::{cxcywh_to_xyxy, DetectionHead, DetectionSet, HeadOutput, VideoClassifier, VideoPrediction, NO_OBJECT};
use crate::tensor::{load_checkpoint, save_checkpoint, Checkpoint, Graph, ParamId, ParamStore, Var};

const CHECKPOINT_FORMAT: &str = "cvanet-checkpoint-1";

/// Every parameter of the network. All stages are allocated regardless of
/// the variant so that runs with equal seeds start from equal weights; the
/// variant only decides which stages take part in the forward pass.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub inter: InterFusion,
    pub intra: IntraFusion,
    pub head: DetectionHead,
    pub video: VideoClassifier,
}

/// Graph handles of one clip forward pass. `l` and `g` hold the pyramids
/// that were actually computed (`[k−1, k, k+1]` order).
#[derive(Clone, Debug)]
pub struct ClipForward {
    pub l: [Option<FeaturePyramid>; 3],
    pub g: [Option<FeaturePyramid>; 3],
    pub p: [Option<FeaturePyramid>; 3],
    pub q: FeaturePyramid,
    pub inter_attention: Vec<Var>,
    pub intra_attention: Vec<Var>,
    pub head: HeadOutput,
    pub video: Option<VideoPrediction>,
}

impl Model {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, config.backbone.clone(), &mut rng)?;
        let d = config.backbone.d;
        let inter = InterFusion::new(&mut store, d, 3, config.fusion, &mut rng);
        let intra = IntraFusion::new(&mut store, d, 3, config.fusion, &mut rng);
        let head = DetectionHead::new(&mut store, config.head.clone(), &mut rng)?;
        let video = VideoClassifier::new(&mut store, d, &mut rng);
        Ok(Model { config, store, backbone, inter, intra, head, video })
    }

    /// Backbone pyramid of `frame`, reusing an earlier result for an
    /// identical frame.
    fn pyramid<'f>(
        &self,
        g: &mut Graph,
        cache: &mut Vec<(&'f Frame, FeaturePyramid)>,
        frame: &'f Frame,
    ) -> Result<FeaturePyramid> {
        if let Some((_, p)) = cache.iter().find(|(f, _)| *f == frame) {
            return Ok(p.clone());
        }
        let p = self.backbone.extract(g, &self.store, frame)?;
        cache.push((frame, p.clone()));
        Ok(p)
    }

    /// Run the network on one clip. Only the pyramids the variant needs
    /// are computed: `basic` uses `L_k` alone, inter fusion adds `G`,
    /// intra fusion adds the neighbouring frames.
    pub fn forward_clip(&self, g: &mut Graph, frames: &[Frame; 3], shuffled: &[Frame; 3]) -> Result<ClipForward> {
        let variant = self.config.variant;
        let slots: &[usize] = if variant.intra() { &[0, 1, 2] } else { &[1] };
        let mut cache = Vec::new();
        let mut l: [Option<FeaturePyramid>; 3] = Default::default();
        let mut gp: [Option<FeaturePyramid>; 3] = Default::default();
        let mut p: [Option<FeaturePyramid>; 3] = Default::default();
        let mut inter_attention = Vec::new();
        for &s in slots {
            let local = self.pyramid(g, &mut cache, &frames[s])?;
            if variant.inter() {
                let global = self.pyramid(g, &mut cache, &shuffled[s])?;
                let FusedPyramid { pyramid, attention } = self.inter.forward(g, &self.store, &local, &global)?;
                if s == 1 {
                    inter_attention = attention;
                }
                gp[s] = Some(global);
                p[s] = Some(pyramid);
            } else {
                p[s] = Some(local.clone());
            }
            l[s] = Some(local);
        }
        let (q, intra_attention) = if variant.intra() {
            let [a, b, c] = p.clone().map(|x| x.expect("computed for intra variants"));
            let FusedPyramid { pyramid, attention } = self.intra.forward(g, &self.store, &a, &b, &c)?;
            (pyramid, attention)
        } else {
            (p[1].clone().expect("centre pyramid"), Vec::new())
        };
        let head = self.head.forward(g, &self.store, &q)?;
        let video = if self.config.use_video_classifier {
            Some(self.video.forward(g, &self.store, head.z)?)
        } else {
            None
        };
        Ok(ClipForward { l, g: gp, p, q, inter_attention, intra_attention, head, video })
    }

    /// Parameters that the configured variant actually uses.
    pub fn active_params(&self) -> Vec<ParamId> {
        let mut ids = self.backbone.param_ids();
        if self.config.variant.inter() {
            ids.extend(self.inter.param_ids());
        }
        if self.config.variant.intra() {
            ids.extend(self.intra.param_ids());
        }
        ids.extend(self.head.param_ids());
        if self.config.use_video_classifier {
            ids.extend(self.video.param_ids());
        }
        ids
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut metadata = BTreeMap::new();
        metadata.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
        metadata.insert("config".to_string(), self.config.to_json()?);
        let tensors = self
            .store
            .iter()
            .map(|(name, t)| {
                let mut t = t.clone();
                t.set_requires_grad(false);
                (name.to_string(), t)
            })
            .collect();
        Ok(Checkpoint { metadata, tensors })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        match ckpt.metadata.get("format") {
            Some(f) if f == CHECKPOINT_FORMAT => {}
            other => return Err(Error::Checkpoint(format!("unsupported checkpoint format {other:?}"))),
        }
        let config = ckpt
            .metadata
            .get("config")
            .ok_or_else(|| Error::Checkpoint("missing run config".into()))?;
        let config = RunConfig::from_json(config)?;
        let mut model = Model::new(config)?;
        model.store.load_named(ckpt.tensors)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.to_checkpoint()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(load_checkpoint(path)?)
    }
}

/// One exported detection in pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelDetection {
    pub bbox: BBox,
    pub score: f64,
    pub class: LesionClass,
}

/// Convert a prediction set to pixel boxes. A detection's score is its
/// largest lesion-class probability, which equals
/// `(1 − p(no-object)) · max_c p(c | object)`. Detections scoring below
/// `min_score` or collapsing to an empty box after clipping are dropped.
pub fn to_pixel_detections(set: &DetectionSet, height: usize, width: usize, min_score: f64) -> Vec<PixelDetection> {
    let (h, w) = (height as f64, width as f64);
    let mut out: Vec<PixelDetection> = set
        .boxes
        .iter()
        .zip(&set.class_probs)
        .filter_map(|(b, p)| {
            let (class, score) = if p[0] >= p[1] { (LesionClass::Benign, p[0]) } else { (LesionClass::Malignant, p[1]) };
            debug_assert!(score <= 1.0 - p[NO_OBJECT] + 1e-12);
            if score < min_score {
                return None;
            }
            let c = cxcywh_to_xyxy(b);
            let bbox = [
                (c[0] * w).clamp(0.0, w),
                (c[1] * h).clamp(0.0, h),
                (c[2] * w).clamp(0.0, w),
                (c[3] * h).clamp(0.0, h),
            ];
            (bbox[2] > bbox[0] && bbox[3] > bbox[1]).then_some(PixelDetection { bbox, score, class })
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}
