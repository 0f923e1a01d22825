//! Finite-difference checks of every differentiable operation and of the
//! composite blocks. Each check panics on the first failure.

use super::{param_gradcheck, probe, rng, H, TOL};
use cvanet::backbone::{instance_norm, Backbone, BackboneConfig, FeaturePyramid};
use cvanet::fusion::{FusionOptions, InterFusion, InterSimilarity, IntraFusion};
use cvanet::gradcheck::check_gradients;
use cvanet::head::{
    detection_loss, spatial_prior, video_class_loss, video_classify, DetectionHead, GroundTruth, HeadConfig,
    LossWeights, MatchResult, VideoPrediction,
};
use cvanet::data::LesionClass;
use cvanet::tensor::{Graph, ParamStore, Tensor, Var};

const SEEDS: u64 = 10;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// Entries pushed at least `gap` away from `at`, keeping their sign.
fn away_from(t: Tensor, at: f64, gap: f64) -> Tensor {
    let shape = t.shape().to_vec();
    let data = t.into_data().into_iter().map(|v| if v >= at { v.max(at + gap) } else { v.min(at - gap) }).collect();
    Tensor::new(&shape, data).unwrap()
}

fn assert_op(name: &str, inputs: impl Fn(u64) -> Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
    for seed in 0..SEEDS {
        let report = check_gradients(&inputs(seed), H, None, |g, v| {
            let out = f(g, v);
            Ok(probe(g, out, seed))
        })
        .unwrap();
        let err = report.max_relative_error();
        assert!(err < TOL, "{name} seed {seed}: relative error {err:e}");
    }
}

pub fn elementwise_binary() {
    let two = |s: u64| vec![randn(&[3, 4], s), randn(&[3, 4], s + 100)];
    assert_op("add", two, |g, v| g.add(v[0], v[1]).unwrap());
    assert_op("sub", two, |g, v| g.sub(v[0], v[1]).unwrap());
    assert_op("mul", two, |g, v| g.mul(v[0], v[1]).unwrap());
    assert_op(
        "div",
        |s| vec![randn(&[3, 4], s), away_from(randn(&[3, 4], s + 100), 0.0, 0.5)],
        |g, v| g.div(v[0], v[1]).unwrap(),
    );
    // keep the operands apart so no probe crosses the switch point
    let apart = |s: u64| {
        let a = randn(&[3, 4], s);
        let d = away_from(randn(&[3, 4], s + 100), 0.0, 0.1);
        let b: Vec<f64> = a.data().iter().zip(d.data()).map(|(x, y)| x + y).collect();
        vec![a, Tensor::new(&[3, 4], b).unwrap()]
    };
    assert_op("maximum", apart, |g, v| g.maximum(v[0], v[1]).unwrap());
    assert_op("minimum", apart, |g, v| g.minimum(v[0], v[1]).unwrap());
    assert_op(
        "add_broadcast",
        |s| vec![randn(&[2, 3, 4], s), randn(&[4], s + 100)],
        |g, v| g.add_broadcast(v[0], v[1]).unwrap(),
    );
}

pub fn elementwise_unary() {
    let one = |s: u64| vec![randn(&[2, 5], s)];
    assert_op("scale", one, |g, v| g.scale(v[0], -1.7));
    assert_op("add_scalar", one, |g, v| g.add_scalar(v[0], 0.3));
    assert_op("neg", one, |g, v| g.neg(v[0]));
    assert_op("sigmoid", one, |g, v| g.sigmoid(v[0]));
    assert_op("exp", one, |g, v| g.exp(v[0]));
    let kinked = |s: u64| vec![away_from(randn(&[2, 5], s), 0.0, 0.05)];
    assert_op("relu", kinked, |g, v| g.relu(v[0]));
    assert_op("abs", kinked, |g, v| g.abs(v[0]));
    assert_op("clamp_min", |s| vec![away_from(randn(&[2, 5], s), 0.2, 0.05)], |g, v| g.clamp_min(v[0], 0.2));
    assert_op(
        "ln",
        |s| vec![Tensor::uniform(&[2, 5], 0.3, 3.0, &mut rng(s))],
        |g, v| g.ln(v[0]),
    );
}

pub fn reductions_and_normalisers() {
    let one = |s: u64| vec![randn(&[3, 4], s)];
    assert_op("sum", one, |g, v| g.sum(v[0]));
    assert_op("mean", one, |g, v| g.mean(v[0]));
    assert_op("mean_axis0", one, |g, v| g.mean_axis(v[0], 0).unwrap());
    assert_op("mean_axis1", one, |g, v| g.mean_axis(v[0], 1).unwrap());
    assert_op("softmax", one, |g, v| g.softmax(v[0], 1).unwrap());
    assert_op("softmax_axis0", one, |g, v| g.softmax(v[0], 0).unwrap());
    assert_op("log_softmax", one, |g, v| g.log_softmax(v[0], 1).unwrap());
    assert_op("layer_norm", one, |g, v| g.layer_norm(v[0], 1e-5));
    assert_op("instance_norm", |s| vec![randn(&[3, 4, 5], s)], |g, v| instance_norm(g, v[0]).unwrap());
}

pub fn shape_ops() {
    let one = |s: u64| vec![randn(&[2, 3, 4], s)];
    assert_op("reshape", one, |g, v| g.reshape(v[0], &[6, 4]).unwrap());
    assert_op("transpose", |s| vec![randn(&[3, 5], s)], |g, v| g.transpose(v[0]).unwrap());
    assert_op("narrow", one, |g, v| g.narrow(v[0], 2, 1, 2).unwrap());
    assert_op(
        "concat",
        |s| vec![randn(&[2, 3], s), randn(&[2, 1], s + 100), randn(&[2, 2], s + 200)],
        |g, v| g.concat(v, 1).unwrap(),
    );
    assert_op("gather_rows", |s| vec![randn(&[4, 3], s)], |g, v| g.gather_rows(v[0], &[2, 0, 2, 3, 2]).unwrap());
}

pub fn linear_algebra() {
    assert_op("matmul", |s| vec![randn(&[3, 4], s), randn(&[4, 2], s + 100)], |g, v| g.matmul(v[0], v[1]).unwrap());
    assert_op(
        "linear",
        |s| vec![randn(&[3, 4], s), randn(&[4, 5], s + 100), randn(&[5], s + 200)],
        |g, v| g.linear(v[0], v[1], Some(v[2])).unwrap(),
    );
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        assert_op(
            &format!("conv2d s{stride} p{pad}"),
            |s| vec![randn(&[2, 5, 6], s), randn(&[3, 2, 3, 3], s + 100), randn(&[3], s + 200)],
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap(),
        );
    }
    assert_op(
        "conv2d 1x1 no bias",
        |s| vec![randn(&[3, 4, 4], s), randn(&[2, 3, 1, 1], s + 100)],
        |g, v| g.conv2d(v[0], v[1], None, 1, 0).unwrap(),
    );
}

pub fn attention_prior() {
    assert_op(
        "spatial_prior",
        |s| vec![randn(&[3, 2], s)],
        |g, v| {
            let r = g.sigmoid(v[0]);
            spatial_prior(g, r, &[(3, 2), (1, 2)], 0.3).unwrap()
        },
    );
}

fn pyramid_inputs(seed: u64, count: usize, c: usize) -> Vec<Tensor> {
    let sizes = [(3, 3), (2, 2), (1, 2)];
    (0..count)
        .flat_map(|k| sizes.map(|(h, w)| randn(&[c, h, w], seed * 31 + k as u64 * 7 + h as u64)))
        .collect()
}

fn fusion_option_sets() -> Vec<FusionOptions> {
    vec![
        FusionOptions::default(),
        FusionOptions { residual: true, scaled: true, inter_similarity: InterSimilarity::Local, gated: false },
        FusionOptions { gated: true, scaled: true, ..Default::default() },
    ]
}

/// Gates start at zero, which would hide the block gradients.
fn open_gates(store: &mut ParamStore, stage: &str, seed: u64) {
    for lvl in 1..=3u64 {
        if let Some(id) = store.id_of(&format!("{stage}.level{lvl}.gate")) {
            store.get_mut(id).data_mut()[0] = 0.3 + 0.1 * lvl as f64 + 0.01 * seed as f64;
        }
    }
}

pub fn inter_fusion_stack() {
    let c = 4;
    for opts in fusion_option_sets() {
        for seed in 0..SEEDS {
            let mut store = ParamStore::new();
            let inter = InterFusion::new(&mut store, c, 3, opts, &mut rng(seed));
            open_gates(&mut store, "inter", seed);
            let run = |g: &mut Graph, store: &ParamStore, v: &[Var]| {
                let local = FeaturePyramid::new(v[..3].to_vec());
                let global = FeaturePyramid::new(v[3..].to_vec());
                let fused = inter.forward(g, store, &local, &global).unwrap();
                let parts: Vec<Var> =
                    fused.pyramid.levels.iter().enumerate().map(|(i, &l)| probe(g, l, seed + i as u64)).collect();
                parts.into_iter().reduce(|a, b| g.add(a, b).unwrap()).unwrap()
            };
            let inputs = pyramid_inputs(seed, 2, c);
            let report = check_gradients(&inputs, H, None, |g, v| Ok(run(g, &store, v))).unwrap();
            assert!(report.max_relative_error() < TOL, "inter inputs seed {seed}: {:e}", report.max_relative_error());
            let ids = inter.param_ids();
            let err = param_gradcheck(&mut store, &ids, 16, |g, store| {
                let v: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
                run(g, store, &v)
            });
            assert!(err < TOL, "inter params seed {seed}: {err:e}");
        }
    }
}

pub fn intra_fusion_stack() {
    let c = 4;
    for opts in fusion_option_sets() {
        for seed in 0..SEEDS {
            let mut store = ParamStore::new();
            let intra = IntraFusion::new(&mut store, c, 3, opts, &mut rng(seed));
            open_gates(&mut store, "intra", seed);
            let run = |g: &mut Graph, store: &ParamStore, v: &[Var]| {
                let [a, b, c] = [0, 1, 2].map(|k| FeaturePyramid::new(v[3 * k..3 * k + 3].to_vec()));
                let fused = intra.forward(g, store, &a, &b, &c).unwrap();
                let parts: Vec<Var> =
                    fused.pyramid.levels.iter().enumerate().map(|(i, &l)| probe(g, l, seed + i as u64)).collect();
                parts.into_iter().reduce(|a, b| g.add(a, b).unwrap()).unwrap()
            };
            let inputs = pyramid_inputs(seed, 3, c);
            let report = check_gradients(&inputs, H, None, |g, v| Ok(run(g, &store, v))).unwrap();
            assert!(report.max_relative_error() < TOL, "intra inputs seed {seed}: {:e}", report.max_relative_error());
            let ids = intra.param_ids();
            let err = param_gradcheck(&mut store, &ids, 16, |g, store| {
                let v: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
                run(g, store, &v)
            });
            assert!(err < TOL, "intra params seed {seed}: {err:e}");
        }
    }
}

fn tiny_head() -> HeadConfig {
    HeadConfig { d: 8, heads: 2, encoder_layers: 1, decoder_layers: 1, ffn_dim: 8, queries: 2, levels: 1, prior_sigma: 0.5 }
}

pub fn head_with_losses() {
    let gt = GroundTruth { boxes: vec![[0.4, 0.55, 0.3, 0.2]], classes: vec![1] };
    let matching = MatchResult { assignment: vec![1], cost: 0.0 };
    let weights = LossWeights::default();
    for seed in 0..SEEDS {
        let mut store = ParamStore::new();
        let head = DetectionHead::new(&mut store, tiny_head(), &mut rng(seed)).unwrap();
        let w = store.add("video.weight", randn(&[8, 2], seed + 50));
        let b = store.add("video.bias", randn(&[2], seed + 60));
        let run = |g: &mut Graph, store: &ParamStore, x: Var| {
            let out = head.forward(g, store, &FeaturePyramid::new(vec![x])).unwrap();
            let det = detection_loss(g, &out, &gt, &matching, &weights).unwrap();
            let (wv, bv) = (g.param(store, w), g.param(store, b));
            let video = video_classify(g, out.z, wv, bv).unwrap();
            let v = video_class_loss(g, &video, LesionClass::Benign).unwrap();
            g.add(det.total, v).unwrap()
        };
        let x = randn(&[8, 2, 2], seed);
        let report = check_gradients(std::slice::from_ref(&x), H, None, |g, v| Ok(run(g, &store, v[0]))).unwrap();
        assert!(report.max_relative_error() < TOL, "head input seed {seed}: {:e}", report.max_relative_error());
        let mut ids = head.param_ids();
        ids.extend([w, b]);
        let err = param_gradcheck(&mut store, &ids, 8, |g, store| {
            let xv = g.constant(x.clone());
            run(g, store, xv)
        });
        assert!(err < TOL, "head params seed {seed}: {err:e}");
    }
}

pub fn video_classifier() {
    assert_op(
        "video_classify",
        |s| vec![randn(&[5, 4], s), randn(&[4, 2], s + 100), randn(&[2], s + 200)],
        |g, v| {
            let VideoPrediction { probs, .. } = video_classify(g, v[0], v[1], v[2]).unwrap();
            probs
        },
    );
}

pub fn backbone() {
    let cfg = BackboneConfig { height: 12, width: 12, stem_channels: 2, stem_stride: 2, channels: [2, 3, 2], d: 3 };
    for seed in 0..SEEDS {
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, cfg.clone(), &mut rng(seed)).unwrap();
        let run = |g: &mut Graph, store: &ParamStore, x: Var| {
            let p = bb.forward(g, store, x).unwrap();
            let parts: Vec<Var> = p.levels.iter().enumerate().map(|(i, &l)| probe(g, l, seed + i as u64)).collect();
            parts.into_iter().reduce(|a, b| g.add(a, b).unwrap()).unwrap()
        };
        let x = randn(&[1, 12, 12], seed);
        let report = check_gradients(std::slice::from_ref(&x), H, Some(24), |g, v| Ok(run(g, &store, v[0]))).unwrap();
        assert!(report.max_relative_error() < TOL, "backbone input seed {seed}: {:e}", report.max_relative_error());
        let ids = bb.param_ids();
        let err = param_gradcheck(&mut store, &ids, 6, |g, store| {
            let xv = g.constant(x.clone());
            run(g, store, xv)
        });
        assert!(err < TOL, "backbone params seed {seed}: {err:e}");
    }
}
