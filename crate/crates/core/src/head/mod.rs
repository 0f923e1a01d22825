//! Set-prediction head: a dense multi-scale transformer over the fused
//! pyramid, per-query class/box predictors and the video-level classifier.

mod boxes;
mod loss;
mod matching;

pub use boxes::{cxcywh_to_xyxy, giou, iou, xyxy_to_cxcywh};
pub use loss::{detection_loss, match_cost, video_class_loss, DetectionLoss, GroundTruth, LossWeights, NO_OBJECT};
pub use matching::{hungarian_match, MatchResult};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeaturePyramid;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Lesion classes plus the no-object slot.
pub const NUM_CLASSES: usize = 3;
const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub d: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    pub queries: usize,
    pub levels: usize,
    /// Width (in normalised image units) of the Gaussian prior that
    /// centres each query's cross-attention on its reference point.
    pub prior_sigma: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            d: 64,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_dim: 128,
            queries: 10,
            levels: 3,
            prior_sigma: 0.1,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % 4 != 0 {
            return Err(Error::Config(format!("head width {} must be a positive multiple of 4", self.d)));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide width {}", self.heads, self.d)));
        }
        if self.queries == 0 || self.levels == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("queries, levels and ffn_dim must be positive".into()));
        }
        if !(self.prior_sigma > 0.0 && self.prior_sigma.is_finite()) {
            return Err(Error::Config(format!("prior width {} must be positive", self.prior_sigma)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Dense {
            w: store.add_xavier(format!("{name}.weight"), d_in, d_out, rng),
            b: store.add_zeros(format!("{name}.bias"), &[d_out]),
        }
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, Some(b))
    }

    fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

#[derive(Clone, Debug)]
struct MultiHeadAttention {
    q: Dense,
    k: Dense,
    v: Dense,
    out: Dense,
    heads: usize,
}

impl MultiHeadAttention {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        MultiHeadAttention {
            q: Dense::new(store, &format!("{name}.q"), d, d, rng),
            k: Dense::new(store, &format!("{name}.k"), d, d, rng),
            v: Dense::new(store, &format!("{name}.v"), d, d, rng),
            out: Dense::new(store, &format!("{name}.out"), d, d, rng),
            heads,
        }
    }

    fn ids(&self) -> Vec<ParamId> {
        [self.q, self.k, self.v, self.out].iter().flat_map(Dense::ids).collect()
    }

    /// Scaled dot-product attention of `query[n×d]` over `key/value[m×d]`.
    fn apply(&self, g: &mut Graph, store: &ParamStore, query: Var, key: Var, value: Var) -> Result<Var> {
        self.apply_biased(g, store, query, key, value, None)
    }

    /// As [`apply`](Self::apply), adding `bias[n×m]` to every head's logits.
    fn apply_biased(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        key: Var,
        value: Var,
        bias: Option<Var>,
    ) -> Result<Var> {
        let q = self.q.apply(g, store, query)?;
        let k = self.k.apply(g, store, key)?;
        let v = self.v.apply(g, store, value)?;
        let d = g.shape(q)[1];
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.narrow(q, 1, h * dh, dh)?;
            let kh = g.narrow(k, 1, h * dh, dh)?;
            let vh = g.narrow(v, 1, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let mut s = g.scale(s, scale);
            if let Some(b) = bias {
                s = g.add(s, b)?;
            }
            let a = g.softmax(s, 1)?;
            outs.push(g.matmul(a, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        self.out.apply(g, store, cat)
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    up: Dense,
    down: Dense,
}

impl FeedForward {
    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.apply(g, store, x)?;
        let h = g.relu(h);
        self.down.apply(g, store, h)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn: MultiHeadAttention,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    cross_attn: MultiHeadAttention,
    ffn: FeedForward,
}

fn add_norm(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    let s = g.add(x, y)?;
    Ok(g.layer_norm(s, NORM_EPS))
}

/// Graph handles of one head evaluation.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `[N×3]` logits over benign, malignant, no-object.
    pub logits: Var,
    pub class_probs: Var,
    /// `[N×4]` boxes `(cx, cy, w, h)` normalised to `[0, 1]`.
    pub boxes: Var,
    /// `[(Σ h_i·w_i + N)×d]`: encoder memory followed by decoder outputs.
    pub z: Var,
}

/// Fixed-size prediction set of one frame, detached from the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionSet {
    pub class_probs: Vec<[f64; NUM_CLASSES]>,
    pub boxes: Vec<[f64; 4]>,
}

impl DetectionSet {
    pub fn from_graph(g: &Graph, out: &HeadOutput) -> Self {
        let probs = g.value(out.class_probs).data();
        let boxes = g.value(out.boxes).data();
        DetectionSet {
            class_probs: probs.chunks_exact(NUM_CLASSES).map(|c| c.try_into().expect("3 classes")).collect(),
            boxes: boxes.chunks_exact(4).map(|c| c.try_into().expect("4 coords")).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// 2-D sinusoidal encoding of an `h×w` grid as `[hw×d]`: the first half of
/// the channels encodes the row, the second half the column, each as
/// interleaved sin/cos pairs of geometrically spaced frequencies.
pub fn positional_encoding(h: usize, w: usize, d: usize) -> Tensor {
    let half = d / 2;
    let two_pi = 2.0 * std::f64::consts::PI;
    let freq = |i: usize| 10000f64.powf((2 * (i / 2)) as f64 / half as f64);
    Tensor::from_fn(&[h * w, d], |idx| {
        let (pos, ch) = (idx / d, idx % d);
        let (coord, n, ch) = if ch < half { (pos / w, h, ch) } else { (pos % w, w, ch - half) };
        let x = (coord as f64 + 0.5) / n as f64 * two_pi / freq(ch);
        if ch % 2 == 0 {
            x.sin()
        } else {
            x.cos()
        }
    })
}

#[derive(Clone, Debug)]
pub struct DetectionHead {
    pub config: HeadConfig,
    level_embed: ParamId,
    query_embed: ParamId,
    /// `[N×d]` initial decoder content, learned alongside the positional
    /// query embedding.
    query_content: ParamId,
    /// `[N×2]` logits of the query reference centres `(cx, cy)`.
    reference: ParamId,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    class_out: Dense,
    box_hidden: Dense,
    box_out: Dense,
}

impl DetectionHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: HeadConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let HeadConfig { d, heads, ffn_dim, .. } = config;
        let ffn = |store: &mut ParamStore, name: &str, rng: &mut R| FeedForward {
            up: Dense::new(store, &format!("{name}.up"), d, ffn_dim, rng),
            down: Dense::new(store, &format!("{name}.down"), ffn_dim, d, rng),
        };
        let level_embed = store.add("head.level_embed", Tensor::randn(&[config.levels, d], 1.0, rng));
        let query_embed = store.add("head.query_embed", Tensor::randn(&[config.queries, d], 1.0, rng));
        let query_content = store.add("head.query_content", Tensor::randn(&[config.queries, d], 1.0, rng));
        let reference = store.add(
            "head.reference",
            Tensor::from_fn(&[config.queries, 2], |_| logit(rng.random_range(REFERENCE_SPAN))),
        );
        let encoder = (0..config.encoder_layers)
            .map(|i| EncoderLayer {
                attn: MultiHeadAttention::new(store, &format!("head.enc{i}.attn"), d, heads, rng),
                ffn: ffn(store, &format!("head.enc{i}.ffn"), rng),
            })
            .collect();
        let decoder = (0..config.decoder_layers)
            .map(|i| DecoderLayer {
                self_attn: MultiHeadAttention::new(store, &format!("head.dec{i}.self"), d, heads, rng),
                cross_attn: MultiHeadAttention::new(store, &format!("head.dec{i}.cross"), d, heads, rng),
                ffn: ffn(store, &format!("head.dec{i}.ffn"), rng),
            })
            .collect();
        let class_out = Dense::new(store, "head.class", d, NUM_CLASSES, rng);
        let box_hidden = Dense::new(store, "head.box.hidden", d, d, rng);
        let box_out = Dense::new(store, "head.box.out", d, 4, rng);
        Ok(DetectionHead { config, level_embed, query_embed, query_content, reference, encoder, decoder, class_out, box_hidden, box_out })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.level_embed, self.query_embed, self.query_content, self.reference];
        for l in &self.encoder {
            ids.extend(l.attn.ids());
            ids.extend(l.ffn.up.ids().into_iter().chain(l.ffn.down.ids()));
        }
        for l in &self.decoder {
            ids.extend(l.self_attn.ids());
            ids.extend(l.cross_attn.ids());
            ids.extend(l.ffn.up.ids().into_iter().chain(l.ffn.down.ids()));
        }
        for dense in [self.class_out, self.box_hidden, self.box_out] {
            ids.extend(dense.ids());
        }
        ids
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, features: &FeaturePyramid) -> Result<HeadOutput> {
        let d = self.config.d;
        if features.len() != self.config.levels {
            return Err(Error::invalid(
                "head_forward",
                format!("head expects {} levels, got {}", self.config.levels, features.len()),
            ));
        }
        let level_embed = g.param(store, self.level_embed);
        let mut tokens = Vec::with_capacity(features.len());
        let mut positions = Vec::with_capacity(features.len());
        let mut sizes = Vec::with_capacity(features.len());
        for (i, &level) in features.levels.iter().enumerate() {
            let s = g.shape(level).to_vec();
            if s.len() != 3 || s[0] != d {
                return Err(Error::invalid("head_forward", format!("level {i} is {s:?}, expected [{d}×h×w]")));
            }
            tokens.push(crate::fusion::to_tokens(g, level)?);
            let pe = g.constant(positional_encoding(s[1], s[2], d));
            let le = g.gather_rows(level_embed, &vec![i; s[1] * s[2]])?;
            positions.push(g.add(pe, le)?);
            sizes.push((s[1], s[2]));
        }
        let mut memory = concat_rows(g, &tokens)?;
        let pos = concat_rows(g, &positions)?;

        for layer in &self.encoder {
            let qk = g.add(memory, pos)?;
            let a = layer.attn.apply(g, store, qk, qk, memory)?;
            memory = add_norm(g, memory, a)?;
            let f = layer.ffn.apply(g, store, memory)?;
            memory = add_norm(g, memory, f)?;
        }

        let n = self.config.queries;
        let query_pos = g.param(store, self.query_embed);
        let ref_logit = g.param(store, self.reference);
        let ref_xy = g.sigmoid(ref_logit);
        let prior = spatial_prior(g, ref_xy, &sizes, self.config.prior_sigma)?;
        let mut tgt = g.param(store, self.query_content);
        let mem_key = g.add(memory, pos)?;
        for layer in &self.decoder {
            let q = g.add(tgt, query_pos)?;
            let a = layer.self_attn.apply(g, store, q, q, tgt)?;
            tgt = add_norm(g, tgt, a)?;
            let q = g.add(tgt, query_pos)?;
            let c = layer.cross_attn.apply_biased(g, store, q, mem_key, memory, Some(prior))?;
            tgt = add_norm(g, tgt, c)?;
            let f = layer.ffn.apply(g, store, tgt)?;
            tgt = add_norm(g, tgt, f)?;
        }

        let logits = self.class_out.apply(g, store, tgt)?;
        let class_probs = g.softmax(logits, 1)?;
        let hidden = self.box_hidden.apply(g, store, tgt)?;
        let hidden = g.relu(hidden);
        let raw = self.box_out.apply(g, store, hidden)?;
        let zeros = g.constant(Tensor::zeros(&[n, 2]));
        let anchor = g.concat(&[ref_logit, zeros], 1)?;
        let raw = g.add(raw, anchor)?;
        let boxes = g.sigmoid(raw);
        let z = g.concat(&[memory, tgt], 0)?;
        Ok(HeadOutput { logits, class_probs, boxes, z })
    }
}

const REFERENCE_SPAN: std::ops::Range<f64> = 0.15..0.85;

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Normalised centres `(x, y)` of every token, level by level.
fn token_centres(sizes: &[(usize, usize)]) -> Vec<(f64, f64)> {
    sizes
        .iter()
        .flat_map(|&(h, w)| {
            (0..h * w).map(move |i| (((i % w) as f64 + 0.5) / w as f64, ((i / w) as f64 + 0.5) / h as f64))
        })
        .collect()
}

/// `[N×T]` attention bias `−‖r_q − x_t‖² / (2σ²)` between reference points
/// `ref_xy[N×2]` and the token centres of the given level sizes.
pub fn spatial_prior(g: &mut Graph, ref_xy: Var, sizes: &[(usize, usize)], sigma: f64) -> Result<Var> {
    let n = g.shape(ref_xy)[0];
    let centres = token_centres(sizes);
    let t = centres.len();
    let ones = g.constant(Tensor::ones(&[1, t]));
    let mut d2 = None;
    for axis in 0..2 {
        let r = g.narrow(ref_xy, 1, axis, 1)?;
        let r = g.matmul(r, ones)?;
        let x = g.constant(Tensor::from_fn(&[n, t], |i| {
            let c = centres[i % t];
            if axis == 0 {
                c.0
            } else {
                c.1
            }
        }));
        let diff = g.sub(r, x)?;
        let sq = g.mul(diff, diff)?;
        d2 = Some(match d2 {
            None => sq,
            Some(acc) => g.add(acc, sq)?,
        });
    }
    let d2 = d2.expect("two axes");
    Ok(g.scale(d2, -0.5 / (sigma * sigma)))
}

fn concat_rows(g: &mut Graph, xs: &[Var]) -> Result<Var> {
    if xs.len() == 1 {
        Ok(xs[0])
    } else {
        g.concat(xs, 0)
    }
}

/// Video-level benign/malignant classifier on the long-range feature `Z`.
#[derive(Clone, Debug)]
pub struct VideoClassifier {
    dense: Dense,
}

/// Graph handles of the video classifier.
#[derive(Clone, Copy, Debug)]
pub struct VideoPrediction {
    pub pooled: Var,
    pub logits: Var,
    /// `[1×2]` probabilities of benign, malignant.
    pub probs: Var,
}

impl VideoClassifier {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d: usize, rng: &mut R) -> Self {
        VideoClassifier { dense: Dense::new(store, "video.class", d, 2, rng) }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.dense.ids().to_vec()
    }

    /// Mean-pool the tokens of `z[n×d]`, one linear layer, softmax.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<VideoPrediction> {
        let w = g.param(store, self.dense.w);
        let b = g.param(store, self.dense.b);
        video_classify(g, z, w, b)
    }
}

/// [`VideoClassifier::forward`] with explicit weights `w[d×2]`, `b[2]`.
pub fn video_classify(g: &mut Graph, z: Var, w: Var, b: Var) -> Result<VideoPrediction> {
    let s = g.shape(z).to_vec();
    if s.len() != 2 {
        return Err(Error::invalid("video_classify", format!("expected [tokens×d], got {s:?}")));
    }
    let pooled = g.mean_axis(z, 0)?;
    let pooled = g.reshape(pooled, &[1, s[1]])?;
    let logits = g.linear(pooled, w, Some(b))?;
    let probs = g.softmax(logits, 1)?;
    Ok(VideoPrediction { pooled, logits, probs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> HeadConfig {
        HeadConfig { d: 8, heads: 2, encoder_layers: 1, decoder_layers: 1, ffn_dim: 8, queries: 2, levels: 1, prior_sigma: 0.5 }
    }

    #[test]
    fn shapes_and_normalisation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cfg = HeadConfig { levels: 2, queries: 5, ..tiny() };
        let head = DetectionHead::new(&mut store, cfg, &mut rng).unwrap();
        let mut g = Graph::new();
        let l1 = g.constant(Tensor::randn(&[8, 3, 2], 1.0, &mut rng));
        let l2 = g.constant(Tensor::randn(&[8, 2, 1], 1.0, &mut rng));
        let out = head.forward(&mut g, &store, &FeaturePyramid::new(vec![l1, l2])).unwrap();
        assert_eq!(g.shape(out.class_probs), &[5, 3]);
        assert_eq!(g.shape(out.boxes), &[5, 4]);
        assert_eq!(g.shape(out.z), &[6 + 2 + 5, 8]);
        let set = DetectionSet::from_graph(&g, &out);
        for p in &set.class_probs {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(set.boxes.iter().flatten().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let head = DetectionHead::new(&mut store, tiny(), &mut rng).unwrap();
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[6, 2, 2]));
        assert!(head.forward(&mut g, &store, &FeaturePyramid::new(vec![l])).is_err());
    }

    #[test]
    fn zero_weights_give_even_odds() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::from_fn(&[4, 3], |i| i as f64));
        let w = g.constant(Tensor::zeros(&[3, 2]));
        let b = g.constant(Tensor::zeros(&[2]));
        let p = video_classify(&mut g, z, w, b).unwrap();
        assert_eq!(g.value(p.probs).data(), &[0.5, 0.5]);
    }

    #[test]
    fn positional_encoding_distinguishes_positions() {
        let pe = positional_encoding(3, 4, 8);
        let rows: Vec<&[f64]> = pe.data().chunks_exact(8).collect();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                assert!(rows[i].iter().zip(rows[j]).any(|(a, b)| (a - b).abs() > 1e-6));
            }
        }
    }
}
