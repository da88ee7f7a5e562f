use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// `c (+)= op(a) · op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`,
/// all row-major. `ta`/`tb` say whether the stored buffer is the transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above describe exactly the row-major buffers whose
    // lengths were checked against m, k, n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// Right operand is a single matrix shared across the batch.
    pub shared_rhs: bool,
    pub out_shape: Vec<usize>,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(shape_err("matmul", alloc::format!("operands must be rank >= 2: {a:?} x {b:?}")));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(shape_err("matmul", alloc::format!("inner extents differ: {a:?} x {b:?}")));
    }
    let batch_a = &a[..a.len() - 2];
    let shared_rhs = b.len() == 2;
    if !shared_rhs && batch_a != &b[..b.len() - 2] {
        return Err(shape_err("matmul", alloc::format!("batch extents differ: {a:?} x {b:?}")));
    }
    let mut out_shape = batch_a.to_vec();
    out_shape.push(m);
    out_shape.push(n);
    Ok(MatmulDims { batch: batch_a.iter().product(), m, k, n, shared_rhs, out_shape })
}

pub(crate) fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![0.0; d.batch * d.m * d.n];
    for i in 0..d.batch {
        let bb = if d.shared_rhs { b.data() } else { &b.data()[i * d.k * d.n..(i + 1) * d.k * d.n] };
        gemm(
            d.m,
            d.k,
            d.n,
            &a.data()[i * d.m * d.k..(i + 1) * d.m * d.k],
            false,
            bb,
            false,
            &mut out[i * d.m * d.n..(i + 1) * d.m * d.n],
            false,
        );
    }
    Ok(Tensor::from_parts(d.out_shape, out))
}

pub(crate) fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let d = matmul_dims(a.shape(), b.shape())?;
    let mut ga = vec![0.0; a.numel()];
    let mut gb = vec![0.0; b.numel()];
    for i in 0..d.batch {
        let gi = &g.data()[i * d.m * d.n..(i + 1) * d.m * d.n];
        let ai = &a.data()[i * d.m * d.k..(i + 1) * d.m * d.k];
        let (bb, gbb) = if d.shared_rhs {
            (b.data(), &mut gb[..])
        } else {
            (&b.data()[i * d.k * d.n..(i + 1) * d.k * d.n], &mut gb[i * d.k * d.n..(i + 1) * d.k * d.n])
        };
        // dA = G · Bᵀ
        gemm(d.m, d.n, d.k, gi, false, bb, true, &mut ga[i * d.m * d.k..(i + 1) * d.m * d.k], false);
        // dB (+)= Aᵀ · G
        gemm(d.k, d.m, d.n, ai, true, gi, false, gbb, d.shared_rhs);
    }
    Ok((
        Tensor::from_parts(a.shape().to_vec(), ga),
        Tensor::from_parts(b.shape().to_vec(), gb),
    ))
}

pub(crate) fn matmul_flops(a: &[usize], b: &[usize]) -> u64 {
    match matmul_dims(a, b) {
        Ok(d) => 2 * (d.batch * d.m * d.k * d.n) as u64,
        Err(_) => 0,
    }
}
