#![allow(dead_code)]

pub mod ap_ref;
pub mod assign_ref;
pub mod fusion_ref;
pub mod grad_suite;

use cvanet::data::{generate_dataset, Dataset, DatasetConfig};
use cvanet::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use cvanet::train::RunConfig;
use cvanet::backbone::BackboneConfig;
use cvanet::head::HeadConfig;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
/// Gradients smaller than this (e.g. key biases, which softmax cancels)
/// are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Contract `x` with a fixed random tensor so every output coordinate
/// contributes to the scalar.
pub fn probe(g: &mut Graph, x: Var, seed: u64) -> Var {
    let shape = g.shape(x).to_vec();
    let r = g.constant(Tensor::randn(&shape, 1.0, &mut rng(seed ^ 0x9e37)));
    let m = g.mul(x, r).unwrap();
    g.sum(m)
}

/// Central-difference check of parameter gradients. Returns the largest
/// per-parameter relative error over at most `coords` coordinates each.
pub fn param_gradcheck(
    store: &mut ParamStore,
    ids: &[ParamId],
    coords: usize,
    f: impl Fn(&mut Graph, &ParamStore) -> Var,
) -> f64 {
    let mut g = Graph::new();
    let loss = f(&mut g, store);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            let n = store.get(id).numel();
            g.param_var(id).and_then(|v| g.grad(v)).map_or_else(|| vec![0.0; n], <[f64]>::to_vec)
        })
        .collect();
    let eval = |store: &ParamStore| {
        let mut g = Graph::new();
        let out = f(&mut g, store);
        g.value(out).item()
    };
    let mut picker = rng(0x7061_7261);
    let mut worst: f64 = 0.0;
    for (k, &id) in ids.iter().enumerate() {
        let n = store.get(id).numel();
        let picked: Vec<usize> = if n > coords { sample(&mut picker, n, coords).into_vec() } else { (0..n).collect() };
        let (mut diff2, mut an2, mut nu2) = (0.0, 0.0, 0.0);
        for i in picked {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + H;
            let plus = eval(store);
            store.get_mut(id).data_mut()[i] = orig - H;
            let minus = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * H);
            let a = analytic[k][i];
            diff2 += (a - numeric) * (a - numeric);
            an2 += a * a;
            nu2 += numeric * numeric;
        }
        let denom = an2.sqrt().max(nu2.sqrt()).max(GRAD_FLOOR);
        worst = worst.max(diff2.sqrt() / denom);
    }
    worst
}

/// Small but complete network for fast end-to-end tests: 32×32 frames,
/// width 8.
pub fn tiny_config() -> RunConfig {
    RunConfig {
        epochs: 1,
        learning_rate: 1e-3,
        backbone: BackboneConfig {
            height: 32,
            width: 32,
            stem_channels: 4,
            stem_stride: 2,
            channels: [4, 8, 8],
            d: 8,
        },
        head: HeadConfig { d: 8, heads: 2, encoder_layers: 1, decoder_layers: 1, ffn_dim: 16, queries: 4, ..Default::default() },
        ..RunConfig::default()
    }
}

pub fn tiny_dataset() -> Dataset {
    generate_dataset(&DatasetConfig { videos: 4, frames: 5, height: 32, width: 32, test_fraction: 0.5, seed: 3 }).unwrap()
}
