use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct ReluCtx<T> {
    input: Tensor<T>,
}

pub fn relu<T: Real>(x: &Tensor<T>) -> (Tensor<T>, ReluCtx<T>) {
    let y = x.map(|v| if v > T::zero() { v } else { T::zero() });
    (y, ReluCtx { input: x.clone() })
}

/// Subgradient 0 at the kink.
pub fn relu_backward<T: Real>(ctx: &ReluCtx<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.expect_shape(ctx.input.shape(), "relu grad_out")?;
    let values = ctx
        .input
        .values()
        .iter()
        .zip(grad_out.values())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(ctx.input.shape(), values)
}

#[derive(Clone, Debug)]
pub struct MaxPoolCtx {
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    argmax: Vec<usize>,
}

/// 2×2×2 max pooling with stride 2; ties go to the lowest flat input index.
pub fn maxpool3d<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, MaxPoolCtx)> {
    let [n, c, d, h, w] = x.dims5("maxpool3d input")?;
    if d < 2 || h < 2 || w < 2 {
        return Err(Error::dim(format!(
            "maxpool3d needs every spatial extent >= 2, got {d}x{h}x{w}"
        )));
    }
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let src = x.values();
    let mut out = Vec::with_capacity(n * c * od * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    for plane in 0..n * c {
        let base = plane * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best_idx = base + ((2 * z) * h + 2 * y) * w + 2 * xx;
                    let mut best = src[best_idx];
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = base + ((2 * z + dz) * h + 2 * y + dy) * w + 2 * xx + dx;
                                if src[idx] > best {
                                    best = src[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
    }
    let mut out_shape = x.shape().to_vec();
    let r = out_shape.len();
    out_shape[r - 3..].copy_from_slice(&[od, oh, ow]);
    let y = Tensor::from_vec(&out_shape, out)?;
    Ok((
        y,
        MaxPoolCtx {
            in_shape: x.shape().to_vec(),
            out_shape,
            argmax,
        },
    ))
}

pub fn maxpool3d_backward<T: Real>(ctx: &MaxPoolCtx, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.expect_shape(&ctx.out_shape, "maxpool3d grad_out")?;
    let mut gin = Tensor::zeros(&ctx.in_shape);
    let dst = gin.values_mut();
    for (&idx, &g) in ctx.argmax.iter().zip(grad_out.values()) {
        dst[idx] += g;
    }
    Ok(gin)
}

/// Nearest-neighbour upsampling by 2 along every spatial axis.
pub fn upsample3d_nearest<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, d, h, w] = x.dims5("upsample3d input")?;
    let (ud, uh, uw) = (2 * d, 2 * h, 2 * w);
    let src = x.values();
    let mut out = vec![T::zero(); n * c * ud * uh * uw];
    for (plane, dst) in out.chunks_exact_mut(ud * uh * uw).enumerate() {
        let sp = &src[plane * d * h * w..][..d * h * w];
        for z in 0..ud {
            for y in 0..uh {
                let row = &sp[((z / 2) * h + y / 2) * w..][..w];
                let drow = &mut dst[(z * uh + y) * uw..][..uw];
                for (xx, v) in drow.iter_mut().enumerate() {
                    *v = row[xx / 2];
                }
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 3..].copy_from_slice(&[ud, uh, uw]);
    Tensor::from_vec(&shape, out)
}

/// Sums the eight children of every parent voxel.
pub fn upsample3d_backward<T: Real>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, ud, uh, uw] = grad_out.dims5("upsample3d grad_out")?;
    if ud % 2 != 0 || uh % 2 != 0 || uw % 2 != 0 {
        return Err(Error::dim(format!(
            "upsample3d grad_out extents must be even, got {ud}x{uh}x{uw}"
        )));
    }
    let (d, h, w) = (ud / 2, uh / 2, uw / 2);
    let src = grad_out.values();
    let mut out = vec![T::zero(); n * c * d * h * w];
    for (plane, dst) in out.chunks_exact_mut(d * h * w).enumerate() {
        let sp = &src[plane * ud * uh * uw..][..ud * uh * uw];
        for z in 0..ud {
            for y in 0..uh {
                let row = &sp[(z * uh + y) * uw..][..uw];
                let drow = &mut dst[((z / 2) * h + y / 2) * w..][..w];
                for (xx, &g) in row.iter().enumerate() {
                    drow[xx / 2] += g;
                }
            }
        }
    }
    let mut shape = grad_out.shape().to_vec();
    let r = shape.len();
    shape[r - 3..].copy_from_slice(&[d, h, w]);
    Tensor::from_vec(&shape, out)
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    b.expect_shape(a.shape(), "add")?;
    let values = a.values().iter().zip(b.values()).map(|(&x, &y)| x + y).collect();
    Tensor::from_vec(a.shape(), values)
}

/// Both summands receive the incoming gradient unchanged.
pub fn add_backward<T: Real>(grad_out: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    (grad_out.clone(), grad_out.clone())
}

/// `Σ (pred − target)²`, accumulated in double precision.
pub fn mse_sum<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    target.expect_shape(pred.shape(), "mse_sum")?;
    Ok(pred
        .values()
        .iter()
        .zip(target.values())
        .map(|(&p, &t)| {
            let d = (p - t).wide();
            d * d
        })
        .sum())
}

pub fn mse_sum_backward<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    target.expect_shape(pred.shape(), "mse_sum")?;
    let two = T::of(2.0);
    let values = pred
        .values()
        .iter()
        .zip(target.values())
        .map(|(&p, &t)| two * (p - t))
        .collect();
    Tensor::from_vec(pred.shape(), values)
}
