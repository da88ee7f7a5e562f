use alloc::vec;
use alloc::vec::Vec;

use super::conv::ConvSpec;
use crate::error::Result;
use crate::tensor::Tensor;

/// Flat input index of the maximum inside each pooling window (first one wins ties).
fn argmax_windows(x: &Tensor, spec: &ConvSpec) -> Result<(Vec<usize>, usize, usize)> {
    let (n, c, h, w) = x.dims4("max_pool")?;
    let (ho, wo) = spec.output_hw("max_pool", h, w)?;
    let d = x.data();
    let p = spec.padding as isize;
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut at = usize::MAX;
                for i in 0..spec.kernel_h {
                    let iy = (oy * spec.stride + i * spec.dilation) as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for j in 0..spec.kernel_w {
                        let ix = (ox * spec.stride + j * spec.dilation) as isize - p;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if d[idx] > best || at == usize::MAX {
                            best = d[idx];
                            at = idx;
                        }
                    }
                }
                arg.push(at);
            }
        }
    }
    Ok((arg, ho, wo))
}

pub(crate) fn max_pool_forward(x: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let (n, c, _, _) = x.dims4("max_pool")?;
    let (arg, ho, wo) = argmax_windows(x, spec)?;
    let out = arg.iter().map(|&i| x.data()[i]).collect();
    Ok(Tensor::from_parts(vec![n, c, ho, wo], out))
}

pub(crate) fn max_pool_backward(x: &Tensor, spec: &ConvSpec, g: &Tensor) -> Result<Tensor> {
    let (arg, _, _) = argmax_windows(x, spec)?;
    let mut dx = vec![0.0; x.numel()];
    for (o, &i) in arg.iter().enumerate() {
        dx[i] += g.data()[o];
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), dx))
}

pub(crate) fn gap_forward(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("global_avg_pool")?;
    let hw = h * w;
    let out = x.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
    Ok(Tensor::from_parts(vec![n, c, 1, 1], out))
}

pub(crate) fn gap_backward(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4("global_avg_pool")?;
    let hw = h * w;
    let mut dx = Vec::with_capacity(x.numel());
    for &gv in g.data() {
        dx.extend(core::iter::repeat_n(gv / hw as f64, hw));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), dx))
}
