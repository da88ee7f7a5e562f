//! Linear-complexity attention through positive orthogonal random features,
//! and the quadratic softmax attention it approximates.

use alloc::vec::Vec;

use rand::SeedableRng;

use crate::config::ScalerMode;
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::math;
use crate::rng::{normal, Rng64};
use crate::tensor::Tensor;

/// Denominator floor of the normalised attention.
pub const DENOM_FLOOR: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EAConfig {
    pub num_heads: usize,
    /// Per-head feature dimension.
    pub d: usize,
    /// Number of random features.
    pub m: usize,
    pub seed: u64,
    pub scaler_mode: ScalerMode,
}

/// `m x d` projection. `rows` keeps the orthonormal QR rows, `p` the rows
/// after scaling.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionMatrix {
    pub rows: Tensor,
    pub p: Tensor,
    pub scaler_mode: ScalerMode,
}

impl ProjectionMatrix {
    pub fn m(&self) -> usize {
        self.p.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.p.shape()[1]
    }
}

/// Orthonormal basis of the columns of a square row-major matrix by modified
/// Gram-Schmidt with one reorthogonalisation pass. Returns the basis vectors
/// as rows.
fn orthonormal_columns(a: &[f64], n: usize) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let mut v: Vec<f64> = (0..n).map(|i| a[i * n + j]).collect();
        for _ in 0..2 {
            for u in &q {
                let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(x, u)| *x -= dot * u);
            }
        }
        let norm = math::sqrt(v.iter().map(|x| x * x).sum());
        v.iter_mut().for_each(|x| *x /= norm);
        q.push(v);
    }
    q
}

/// Draws `ceil(m/d)` Gaussian `d x d` blocks, orthogonalises each and stacks
/// the rows, truncated to `m`.
pub fn make_projection_with(rng: &mut Rng64, d: usize, m: usize, mode: ScalerMode) -> ProjectionMatrix {
    let mut rows = Vec::with_capacity(m * d);
    while rows.len() < m * d {
        let g: Vec<f64> = (0..d * d).map(|_| normal(rng)).collect();
        for r in orthonormal_columns(&g, d) {
            if rows.len() < m * d {
                rows.extend_from_slice(&r);
            }
        }
    }
    let rows = Tensor::from_parts(alloc::vec![m, d], rows);
    let scale = match mode {
        ScalerMode::Unit => 1.0,
        ScalerMode::SqrtD => math::sqrt(d as f64),
    };
    let p = rows.scale(scale);
    ProjectionMatrix { rows, p, scaler_mode: mode }
}

pub fn make_projection(cfg: &EAConfig) -> Result<ProjectionMatrix> {
    if cfg.m == 0 || cfg.d == 0 {
        return Err(Error::InvalidArgument(alloc::format!("projection needs m, d >= 1, got m={} d={}", cfg.m, cfg.d)));
    }
    let mut rng = Rng64::seed_from_u64(cfg.seed);
    Ok(make_projection_with(&mut rng, cfg.d, cfg.m, cfg.scaler_mode))
}

/// `exp(x P^T - |x|^2 / 2 - c_x)` with `c_x` the largest projected value of
/// each token.
pub fn phi(x: &Tensor, p: &ProjectionMatrix) -> Result<Tensor> {
    let d = p.d();
    if x.shape()[x.rank() - 1] != d {
        return Err(shape_err("phi", alloc::format!("last extent of {:?} must be {d}", x.shape())));
    }
    let m = p.m();
    let tokens = x.numel() / d;
    let mut out = Vec::with_capacity(tokens * m);
    let pd = p.p.data();
    for t in x.data().chunks(d) {
        let half_sq = 0.5 * t.iter().map(|v| v * v).sum::<f64>();
        let proj: Vec<f64> = pd.chunks(d).map(|row| row.iter().zip(t).map(|(a, b)| a * b).sum()).collect();
        let c = proj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        out.extend(proj.iter().map(|v| math::exp(v - half_sq - c)));
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = m;
    Ok(Tensor::from_parts(shape, out))
}

fn check_qkv(op: &'static str, g: &Graph, q: Var, k: Var, v: Var) -> Result<()> {
    let (qs, ks, vs) = (g.shape(q), g.shape(k), g.shape(v));
    if qs.len() < 2 || qs != ks || qs != vs {
        return Err(shape_err(op, alloc::format!("q {qs:?}, k {ks:?}, v {vs:?} must match with rank >= 2")));
    }
    Ok(())
}

/// Random-feature attention on `[.., L, d]` operands sharing one projection
/// `p_t` (the `d x m` transpose of `P`, bound as a constant).
///
/// Queries are stabilised per token, keys by one maximum over all tokens of
/// the head so that it cancels between numerator and denominator. Nothing of
/// size `L x L` is formed.
pub fn efficient_attention_graph(g: &mut Graph, q: Var, k: Var, v: Var, p_t: Var) -> Result<Var> {
    check_qkv("efficient_attention", g, q, k, v)?;
    let rank = g.shape(q).len();
    let d = g.shape(q)[rank - 1];
    if g.shape(p_t) != [d, g.shape(p_t)[1]] {
        return Err(shape_err("efficient_attention", alloc::format!("projection {:?} does not match d={d}", g.shape(p_t))));
    }
    let pre = math::exp(-0.25 * math::ln(d as f64));
    let features = |g: &mut Graph, x: Var, per_token: bool| -> Result<Var> {
        let x = g.scale(x, pre);
        let proj = g.matmul(x, p_t)?;
        let sq = g.square(x);
        let sq = g.sum_axis(sq, rank - 1)?;
        let half = g.scale(sq, 0.5);
        let mut c = g.max_axis(proj, rank - 1)?;
        if !per_token {
            c = g.max_axis(c, rank - 2)?;
        }
        let c = g.detach(c);
        let e = g.sub(proj, half)?;
        let e = g.sub(e, c)?;
        Ok(g.exp(e))
    };
    let fq = features(g, q, true)?;
    let fk = features(g, k, false)?;
    let fk_t = g.transpose_last(fk)?;
    let kv = g.matmul(fk_t, v)?;
    let num = g.matmul(fq, kv)?;
    let ksum = g.sum_axis(fk, rank - 2)?;
    let ksum_t = g.transpose_last(ksum)?;
    let den = g.matmul(fq, ksum_t)?;
    let den = g.clamp_min(den, DENOM_FLOOR);
    g.div(num, den)
}

/// `softmax(Q K^T / sqrt(d)) V` on `[.., L, d]` operands.
pub fn exact_attention_graph(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    check_qkv("exact_attention", g, q, k, v)?;
    let rank = g.shape(q).len();
    let d = g.shape(q)[rank - 1];
    let kt = g.transpose_last(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, 1.0 / math::sqrt(d as f64));
    let w = g.softmax(logits, rank - 1)?;
    g.matmul(w, v)
}

pub fn efficient_attention(q: &Tensor, k: &Tensor, v: &Tensor, p: &ProjectionMatrix) -> Result<Tensor> {
    if q.rank() >= 2 && q.shape()[q.rank() - 2] == 0 {
        return Err(Error::InvalidArgument("attention over zero tokens".into()));
    }
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let pt = g.constant(p.p.transpose_last()?);
    let out = efficient_attention_graph(&mut g, qv, kv, vv, pt)?;
    Ok(g.value(out).clone())
}

pub fn exact_softmax_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = exact_attention_graph(&mut g, qv, kv, vv)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use alloc::vec;

    fn cfg(d: usize, m: usize, seed: u64, mode: ScalerMode) -> EAConfig {
        EAConfig { num_heads: 1, d, m, seed, scaler_mode: mode }
    }

    fn gram_block_error(rows: &Tensor, d: usize) -> f64 {
        let (m, r) = (rows.shape()[0], rows.data());
        let mut worst: f64 = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i / d != j / d {
                    continue;
                }
                let dot: f64 = (0..d).map(|c| r[i * d + c] * r[j * d + c]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - want).abs());
            }
        }
        worst
    }

    #[test]
    fn square_projection_is_orthonormal() {
        for seed in 0..5 {
            let p = make_projection(&cfg(16, 16, seed, ScalerMode::Unit)).unwrap();
            assert!(gram_block_error(&p.rows, 16) < 1e-10);
            assert!(p.p.bit_eq(&p.rows));
        }
    }

    #[test]
    fn stacked_blocks_are_each_orthonormal() {
        let p = make_projection(&cfg(8, 20, 3, ScalerMode::SqrtD)).unwrap();
        assert_eq!(p.p.shape(), &[20, 8]);
        assert!(gram_block_error(&p.rows, 8) < 1e-10);
        let r = p.rows.data();
        let cross: f64 = (0..8).map(|c| r[c] * r[8 * 8 + c]).sum();
        assert!(cross.abs() > 1e-6);
        let n0: f64 = p.p.data()[..8].iter().map(|v| v * v).sum();
        assert!((n0 - 8.0).abs() < 1e-10);
    }

    #[test]
    fn projection_is_seed_deterministic() {
        let a = make_projection(&cfg(4, 9, 11, ScalerMode::SqrtD)).unwrap();
        let b = make_projection(&cfg(4, 9, 11, ScalerMode::SqrtD)).unwrap();
        assert!(a.p.bit_eq(&b.p));
    }

    #[test]
    fn phi_of_zero_is_ones() {
        let p = make_projection(&cfg(4, 6, 0, ScalerMode::SqrtD)).unwrap();
        let f = phi(&Tensor::zeros(&[3, 4]), &p).unwrap();
        assert!(f.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn phi_peak_and_literal_formula() {
        let p = make_projection(&cfg(5, 12, 1, ScalerMode::SqrtD)).unwrap();
        let mut rng = seeded(2);
        let x = Tensor::randn(&[7, 5], &mut rng);
        let f = phi(&x, &p).unwrap();
        for t in 0..7 {
            let xt = &x.data()[t * 5..t * 5 + 5];
            let sq: f64 = xt.iter().map(|v| v * v).sum();
            let row = &f.data()[t * 12..t * 12 + 12];
            let peak = row.iter().copied().fold(0.0, f64::max);
            assert!((peak - math::exp(-0.5 * sq)).abs() < 1e-15);
            let proj: Vec<f64> = (0..12).map(|r| (0..5).map(|c| p.p.data()[r * 5 + c] * xt[c]).sum()).collect();
            let cx = proj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for r in 0..12 {
                let lit = math::exp(proj[r] - 0.5 * sq - cx);
                assert!((row[r] - lit).abs() < 1e-12);
                assert!(row[r] > 0.0 && row[r] <= 1.0);
            }
        }
    }

    #[test]
    fn single_token_returns_value_row() {
        let mut rng = seeded(4);
        let p = make_projection(&cfg(4, 8, 0, ScalerMode::SqrtD)).unwrap();
        let q = Tensor::randn(&[2, 1, 4], &mut rng);
        let k = Tensor::randn(&[2, 1, 4], &mut rng);
        let v = Tensor::randn(&[2, 1, 4], &mut rng);
        let ea = efficient_attention(&q, &k, &v, &p).unwrap();
        assert!(ea.max_abs_diff(&v) < 1e-12);
        let ex = exact_softmax_attention(&q, &k, &v).unwrap();
        assert!(ex.max_abs_diff(&v) < 1e-12);
    }

    #[test]
    fn identical_keys_give_mean_of_values() {
        let mut rng = seeded(5);
        let p = make_projection(&cfg(4, 8, 0, ScalerMode::SqrtD)).unwrap();
        let q = Tensor::randn(&[1, 6, 4], &mut rng);
        let row = Tensor::randn(&[1, 1, 4], &mut rng);
        let k = Tensor::concat(&[&row; 6], 1).unwrap();
        let v = Tensor::randn(&[1, 6, 4], &mut rng);
        let ea = efficient_attention(&q, &k, &v, &p).unwrap();
        let ex = exact_softmax_attention(&q, &k, &v).unwrap();
        for t in 0..6 {
            for c in 0..4 {
                let mean: f64 = (0..6).map(|s| v.data()[s * 4 + c]).sum::<f64>() / 6.0;
                assert!((ea.data()[t * 4 + c] - mean).abs() < 1e-12);
                assert!((ex.data()[t * 4 + c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exact_attention_hand_computed() {
        // q = k = I3 scaled so the logits are 0/1 after the 1/sqrt(3) factor.
        let s = math::sqrt(math::sqrt(3.0));
        let q = Tensor::eye(3).scale(s).reshape(&[1, 3, 3]).unwrap();
        let v = Tensor::new(vec![1, 3, 3], vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0]).unwrap();
        let out = exact_softmax_attention(&q, &q, &v).unwrap();
        let e = math::exp(1.0);
        let z = e + 2.0;
        let want = [
            [e / z, 2.0 / z, 3.0 / z],
            [1.0 / z, 2.0 * e / z, 3.0 / z],
            [1.0 / z, 2.0 / z, 3.0 * e / z],
        ];
        for r in 0..3 {
            for c in 0..3 {
                assert!((out.data()[r * 3 + c] - want[r][c]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn exact_attention_rows_are_convex_even_with_large_logits() {
        let mut rng = seeded(8);
        let q = Tensor::randn(&[1, 5, 3], &mut rng).scale(40.0);
        let k = Tensor::randn(&[1, 5, 3], &mut rng).scale(40.0);
        let v = Tensor::randn(&[1, 5, 3], &mut rng);
        let out = exact_softmax_attention(&q, &k, &v).unwrap();
        for c in 0..3 {
            let col: Vec<f64> = (0..5).map(|s| v.data()[s * 3 + c]).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for t in 0..5 {
                let o = out.data()[t * 3 + c];
                assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn no_quadratic_intermediate() {
        let mut rng = seeded(9);
        let l = 50;
        let p = make_projection(&cfg(4, 8, 0, ScalerMode::SqrtD)).unwrap();
        let mut g = Graph::new();
        let q = g.constant(Tensor::randn(&[2, l, 4], &mut rng));
        let k = g.constant(Tensor::randn(&[2, l, 4], &mut rng));
        let v = g.constant(Tensor::randn(&[2, l, 4], &mut rng));
        let pt = g.constant(p.p.transpose_last().unwrap());
        efficient_attention_graph(&mut g, q, k, v, pt).unwrap();
        for (_, s) in g.node_shapes() {
            assert!(s.iter().filter(|&&e| e == l).count() < 2, "{s:?}");
        }
    }

    #[test]
    fn degenerate_sizes_rejected() {
        assert!(Tensor::new(vec![1, 0, 4], vec![]).is_err());
        assert!(matches!(make_projection(&cfg(4, 0, 0, ScalerMode::Unit)), Err(Error::InvalidArgument(_))));
    }
}
