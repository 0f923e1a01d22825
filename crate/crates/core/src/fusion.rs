//! Inter-video and intra-video attention fusion.
//!
//! Feature maps `X[c×h×w]` are handled in token form `T(X)[hw×c]` (spatial
//! positions flattened row-major, channels last). With `proj` a per-position
//! channel linear map, the inter-video block computes
//!
//! ```text
//! A = softmax_rows( T(G) · T(L̃)ᵀ )          hw×hw
//! P = reshape( T(L̂)ᵀ · Aᵀ, [c, h, w] )       L̂ = proj_hat(L), L̃ = proj_tilde(L)
//! ```
//!
//! and the intra-video block
//!
//! ```text
//! B = softmax_rows( T(P̂_k) · T(P̂_{k+1})ᵀ )
//! Q = reshape( T(P̂_{k−1})ᵀ · Bᵀ, [c, h, w] )
//! ```
//!
//! `T(X)ᵀ` is the `[c×hw]` matrix obtained by a plain row-major reshape of
//! `X`, so the outputs are the `(c×hw)·(hw×hw)` products reshaped back.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeaturePyramid;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Var};

/// Which pair of features forms the inter-video similarity matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterSimilarity {
    /// `T(G) · T(L̃)ᵀ`: the shuffled stream queries the ordered one.
    #[default]
    Global,
    /// `T(L) · T(L̃)ᵀ`: both sides from the ordered stream, `G` unused.
    Local,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionOptions {
    /// Add the block input to its output.
    pub residual: bool,
    /// Divide similarities by `√c` before the softmax.
    pub scaled: bool,
    pub inter_similarity: InterSimilarity,
    /// Stacks only: every level returns `input + γ·block(input)` with a
    /// learned scalar `γ` that starts at zero. Takes precedence over
    /// `residual`.
    pub gated: bool,
}

#[derive(Clone, Copy, Debug)]
struct Projection {
    w: ParamId,
    b: ParamId,
}

impl Projection {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: usize, rng: &mut R) -> Self {
        Projection {
            w: store.add_xavier(format!("{name}.weight"), c, c, rng),
            b: store.add_zeros(format!("{name}.bias"), &[c]),
        }
    }
}

/// Parameters of one projection as bound on a graph, for callers that drive
/// the per-level functions directly.
#[derive(Clone, Copy, Debug)]
pub struct BoundProjection {
    pub weight: Var,
    pub bias: Var,
}

/// `[c×h×w]` → `[hw×c]`.
pub fn to_tokens(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::invalid("to_tokens", format!("expected [c×h×w], got {s:?}")));
    }
    let m = g.reshape(x, &[s[0], s[1] * s[2]])?;
    g.transpose(m)
}

/// `[hw×c]` → `[c×h×w]`.
pub fn from_tokens(g: &mut Graph, t: Var, h: usize, w: usize) -> Result<Var> {
    let c = g.shape(t)[1];
    let m = g.transpose(t)?;
    g.reshape(m, &[c, h, w])
}

fn project(g: &mut Graph, tokens: Var, p: BoundProjection) -> Result<Var> {
    g.linear(tokens, p.weight, Some(p.bias))
}

/// Attention output and its row-stochastic `hw×hw` matrix.
#[derive(Clone, Copy, Debug)]
pub struct Fused {
    pub output: Var,
    pub attention: Var,
}

fn attend(g: &mut Graph, query: Var, key: Var, value: Var, scaled: bool) -> Result<(Var, Var)> {
    let kt = g.transpose(key)?;
    let mut sim = g.matmul(query, kt)?;
    if scaled {
        let c = g.shape(query)[1] as f64;
        sim = g.scale(sim, 1.0 / c.sqrt());
    }
    let a = g.softmax(sim, 1)?;
    debug_assert_rows_normalized(g, a);
    Ok((g.matmul(a, value)?, a))
}

fn debug_assert_rows_normalized(g: &Graph, a: Var) {
    if cfg!(debug_assertions) {
        let t = g.value(a);
        let n = t.shape()[1];
        for (r, row) in t.data().chunks_exact(n).enumerate() {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() <= 1e-9, "attention row {r} sums to {s}");
        }
    }
}

fn check_same(g: &Graph, op: &'static str, xs: &[Var]) -> Result<()> {
    let first = g.shape(xs[0]);
    if first.len() != 3 {
        return Err(Error::invalid(op, format!("expected [c×h×w], got {first:?}")));
    }
    for &x in &xs[1..] {
        if g.shape(x) != first {
            return Err(Error::shape(op, first, g.shape(x)));
        }
    }
    Ok(())
}

/// One inter-video attention block on a single pyramid level.
pub fn inter_fuse_level(
    g: &mut Graph,
    local: Var,
    global: Var,
    hat: BoundProjection,
    tilde: BoundProjection,
    opts: FusionOptions,
) -> Result<Fused> {
    check_same(g, "inter_fuse_level", &[local, global])?;
    let (h, w) = (g.shape(local)[1], g.shape(local)[2]);
    let l_tok = to_tokens(g, local)?;
    let l_hat = project(g, l_tok, hat)?;
    let l_tilde = project(g, l_tok, tilde)?;
    let query = match opts.inter_similarity {
        InterSimilarity::Global => to_tokens(g, global)?,
        InterSimilarity::Local => l_tok,
    };
    let (out, attention) = attend(g, query, l_tilde, l_hat, opts.scaled)?;
    let mut output = from_tokens(g, out, h, w)?;
    if opts.residual {
        output = g.add(output, local)?;
    }
    Ok(Fused { output, attention })
}

/// One intra-video attention block on a single pyramid level.
pub fn intra_fuse_level(
    g: &mut Graph,
    prev: Var,
    cur: Var,
    next: Var,
    proj: [BoundProjection; 3],
    opts: FusionOptions,
) -> Result<Fused> {
    check_same(g, "intra_fuse_level", &[prev, cur, next])?;
    let (h, w) = (g.shape(cur)[1], g.shape(cur)[2]);
    let [p_prev, p_cur, p_next] = proj;
    let t_prev = to_tokens(g, prev)?;
    let t_cur = to_tokens(g, cur)?;
    let t_next = to_tokens(g, next)?;
    let hat_prev = project(g, t_prev, p_prev)?;
    let hat_cur = project(g, t_cur, p_cur)?;
    let hat_next = project(g, t_next, p_next)?;
    let (out, attention) = attend(g, hat_cur, hat_next, hat_prev, opts.scaled)?;
    let mut output = from_tokens(g, out, h, w)?;
    if opts.residual {
        output = g.add(output, cur)?;
    }
    Ok(Fused { output, attention })
}

/// `input + γ·out` with `γ` a `[1×1]` parameter.
fn gate(g: &mut Graph, input: Var, out: Var, gamma: Var) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let flat = g.reshape(out, &[1, shape.iter().product()])?;
    let scaled = g.matmul(gamma, flat)?;
    let scaled = g.reshape(scaled, &shape)?;
    g.add(input, scaled)
}

fn gates(store: &mut ParamStore, stage: &str, levels: usize, options: FusionOptions) -> Vec<ParamId> {
    if !options.gated {
        return Vec::new();
    }
    (1..=levels).map(|i| store.add_zeros(format!("{stage}.level{i}.gate"), &[1, 1])).collect()
}

fn block_options(options: FusionOptions) -> FusionOptions {
    FusionOptions { residual: options.residual && !options.gated, ..options }
}

/// Fused pyramid plus the attention matrix of every level.
#[derive(Clone, Debug)]
pub struct FusedPyramid {
    pub pyramid: FeaturePyramid,
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct InterFusion {
    levels: Vec<[Projection; 2]>,
    gates: Vec<ParamId>,
    pub options: FusionOptions,
}

impl InterFusion {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, c: usize, levels: usize, options: FusionOptions, rng: &mut R) -> Self {
        let projections = (1..=levels)
            .map(|i| {
                [
                    Projection::new(store, &format!("inter.level{i}.hat"), c, rng),
                    Projection::new(store, &format!("inter.level{i}.tilde"), c, rng),
                ]
            })
            .collect();
        let gates = gates(store, "inter", levels, options);
        InterFusion { levels: projections, gates, options }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.levels.iter().flatten().flat_map(|p| [p.w, p.b]).chain(self.gates.iter().copied()).collect()
    }

    /// Level-wise [`inter_fuse_level`] with level-specific weights.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, local: &FeaturePyramid, global: &FeaturePyramid) -> Result<FusedPyramid> {
        if local.len() != self.levels.len() || global.len() != self.levels.len() {
            return Err(Error::invalid(
                "inter_fuse",
                format!("{} weight levels, pyramids have {} and {}", self.levels.len(), local.len(), global.len()),
            ));
        }
        let mut levels = Vec::with_capacity(local.len());
        let mut attention = Vec::with_capacity(local.len());
        for (i, [hat, tilde]) in self.levels.iter().enumerate() {
            let hat = bind(g, store, hat);
            let tilde = bind(g, store, tilde);
            let f = inter_fuse_level(g, local.levels[i], global.levels[i], hat, tilde, block_options(self.options))?;
            levels.push(match self.gates.get(i) {
                Some(&gamma) => {
                    let gamma = g.param(store, gamma);
                    gate(g, local.levels[i], f.output, gamma)?
                }
                None => f.output,
            });
            attention.push(f.attention);
        }
        Ok(FusedPyramid { pyramid: FeaturePyramid::new(levels), attention })
    }
}

#[derive(Clone, Debug)]
pub struct IntraFusion {
    levels: Vec<[Projection; 3]>,
    gates: Vec<ParamId>,
    pub options: FusionOptions,
}

impl IntraFusion {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, c: usize, levels: usize, options: FusionOptions, rng: &mut R) -> Self {
        let projections = (1..=levels)
            .map(|i| {
                ["prev", "cur", "next"].map(|role| Projection::new(store, &format!("intra.level{i}.{role}"), c, rng))
            })
            .collect();
        let gates = gates(store, "intra", levels, options);
        IntraFusion { levels: projections, gates, options }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.levels.iter().flatten().flat_map(|p| [p.w, p.b]).chain(self.gates.iter().copied()).collect()
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        prev: &FeaturePyramid,
        cur: &FeaturePyramid,
        next: &FeaturePyramid,
    ) -> Result<FusedPyramid> {
        let n = self.levels.len();
        if [prev.len(), cur.len(), next.len()].iter().any(|&l| l != n) {
            return Err(Error::invalid(
                "intra_fuse",
                format!("{n} weight levels, pyramids have {}, {} and {}", prev.len(), cur.len(), next.len()),
            ));
        }
        let mut levels = Vec::with_capacity(n);
        let mut attention = Vec::with_capacity(n);
        for (i, projs) in self.levels.iter().enumerate() {
            let bound = projs.map(|p| bind(g, store, &p));
            let f = intra_fuse_level(g, prev.levels[i], cur.levels[i], next.levels[i], bound, block_options(self.options))?;
            levels.push(match self.gates.get(i) {
                Some(&gamma) => {
                    let gamma = g.param(store, gamma);
                    gate(g, cur.levels[i], f.output, gamma)?
                }
                None => f.output,
            });
            attention.push(f.attention);
        }
        Ok(FusedPyramid { pyramid: FeaturePyramid::new(levels), attention })
    }
}

fn bind(g: &mut Graph, store: &ParamStore, p: &Projection) -> BoundProjection {
    BoundProjection { weight: g.param(store, p.w), bias: g.param(store, p.b) }
}
