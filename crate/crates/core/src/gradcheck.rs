//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

/// Outcome of a gradient check over every input.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` per input.
    pub relative_errors: Vec<f64>,
    pub coordinates_checked: usize,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compare reverse-mode gradients of a scalar function against central
/// differences with step `h`.
///
/// `f` receives a fresh graph and one tracked leaf per input. When
/// `max_coords` is set, at most that many coordinates per input are probed,
/// chosen by a fixed-seed sampler.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, max_coords: Option<usize>, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = probe.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut relative_errors = Vec::with_capacity(inputs.len());
    let mut checked = 0;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let (mut diff2, mut an2, mut nu2) = (0.0, 0.0, 0.0);
        for &i in &coords {
            let orig = input.data()[i];
            probe[k].data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[k][i];
            diff2 += (a - numeric) * (a - numeric);
            an2 += a * a;
            nu2 += numeric * numeric;
        }
        checked += coords.len();
        let denom = an2.sqrt().max(nu2.sqrt());
        relative_errors.push(if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom });
    }
    Ok(GradCheckReport {
        relative_errors,
        coordinates_checked: checked,
    })
}
