//! Central finite-difference verification of reverse-mode gradients.

use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng64;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Coordinates sampled per input (all of them when the input is smaller).
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-5, samples: 64, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// `|a - b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the tape gradient of the scalar `f` against central differences
/// `(f(x + eps) - f(x - eps)) / (2 eps)` on a seeded random subsample of
/// coordinates of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let base = g.value(out).item();
    if eval(&f, inputs)?.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic);
    }

    let mut rng = Rng64::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, coords_checked: 0, worst: (0, 0) };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("leaf gradient");
        let n = inputs[k].numel();
        let coords: Vec<usize> = if n <= cfg.samples {
            (0..n).collect()
        } else {
            sample(&mut rng, n, cfg.samples).into_vec()
        };
        for c in coords {
            let x0 = inputs[k].data()[c];
            probe[k].data_mut()[c] = x0 + cfg.eps;
            let fp = eval(&f, &probe)?;
            probe[k].data_mut()[c] = x0 - cfg.eps;
            let fm = eval(&f, &probe)?;
            probe[k].data_mut()[c] = x0;
            let numeric = (fp - fm) / (2.0 * cfg.eps);
            let err = relative_error(analytic.data()[c], numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = (k, c);
            }
        }
    }
    Ok(report)
}
