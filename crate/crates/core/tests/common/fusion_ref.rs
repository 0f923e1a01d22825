//! Loop-based evaluation of the fusion formulas, term by term.

use cvanet::fusion::BoundProjection;
use cvanet::tensor::{Graph, Tensor};
use rand::Rng;

use super::rng;

/// Dense matrix as nested rows, for the loop-based reference.
pub type Mat = Vec<Vec<f64>>;

/// `[c×h×w]` feature map to `hw` rows of `c` values.
pub fn tokens(t: &Tensor) -> Mat {
    let (c, hw) = (t.shape()[0], t.shape()[1] * t.shape()[2]);
    (0..hw).map(|p| (0..c).map(|ch| t.data()[ch * hw + p]).collect()).collect()
}

pub fn project(x: &Mat, w: &Tensor, b: &Tensor) -> Mat {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| (0..dout).map(|j| b.data()[j] + (0..din).map(|i| row[i] * w.data()[i * dout + j]).sum::<f64>()).collect())
        .collect()
}

/// `softmax_rows(q·kᵀ)·v` evaluated term by term.
pub fn attention(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    q.iter()
        .map(|qi| {
            let logits: Vec<f64> = k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum()).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v[0].len()).map(|c| e.iter().zip(v).map(|(ej, vj)| ej / z * vj[c]).sum()).collect()
        })
        .collect()
}

/// Token rows back to `[c×h×w]` order.
pub fn untokens(x: &Mat) -> Vec<f64> {
    let (hw, c) = (x.len(), x[0].len());
    (0..c * hw).map(|i| x[i % hw][i / hw]).collect()
}

pub struct Proj {
    pub w: Tensor,
    pub b: Tensor,
}

pub fn random_case(seed: u64) -> (usize, usize, usize) {
    let mut r = rng(seed);
    (r.random_range(1..=4), r.random_range(1..=5), r.random_range(1..=5))
}

pub fn proj(c: usize, seed: u64) -> Proj {
    Proj { w: Tensor::randn(&[c, c], 0.6, &mut rng(seed)), b: Tensor::randn(&[c], 0.3, &mut rng(seed + 1)) }
}

pub fn bind(g: &mut Graph, p: &Proj) -> BoundProjection {
    BoundProjection { weight: g.constant(p.w.clone()), bias: g.constant(p.b.clone()) }
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
