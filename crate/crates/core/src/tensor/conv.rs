use std::borrow::Cow;

use rayon::prelude::*;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Saved state of a [`conv3d_forward`] call.
#[derive(Clone, Debug)]
pub struct Conv3dCtx<T> {
    input: Tensor<T>,
    weights: Tensor<T>,
    stride: usize,
    pad: usize,
    out_shape: Vec<usize>,
}

impl<T> Conv3dCtx<T> {
    pub fn input(&self) -> &Tensor<T> {
        &self.input
    }
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    // input extent
    d: usize,
    h: usize,
    w: usize,
    // padded extent
    dp: usize,
    hp: usize,
    wp: usize,
    // output extent
    od: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(input: [usize; 5], weights: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [batch, c_in, d, h, w] = input;
        let &[c_out, wc_in, k, k2, k3] = weights else {
            return Err(Error::dim(format!(
                "conv3d weights must be [C_out, C_in, k, k, k], got {weights:?}"
            )));
        };
        if wc_in != c_in {
            return Err(Error::dim(format!(
                "conv3d: input has {c_in} channels but weights expect {wc_in}"
            )));
        }
        if k != k2 || k != k3 || k % 2 == 0 {
            return Err(Error::dim(format!("conv3d kernel must be cubic and odd, got {k}x{k2}x{k3}")));
        }
        if stride == 0 {
            return Err(Error::dim("conv3d stride must be positive"));
        }
        let (dp, hp, wp) = (d + 2 * pad, h + 2 * pad, w + 2 * pad);
        if dp < k || hp < k || wp < k {
            return Err(Error::dim(format!(
                "conv3d: padded input {dp}x{hp}x{wp} smaller than kernel {k}"
            )));
        }
        Ok(Geometry {
            batch,
            c_in,
            c_out,
            k,
            stride,
            pad,
            d,
            h,
            w,
            dp,
            hp,
            wp,
            od: (dp - k) / stride + 1,
            oh: (hp - k) / stride + 1,
            ow: (wp - k) / stride + 1,
        })
    }

    fn in_plane(&self) -> usize {
        self.d * self.h * self.w
    }

    fn padded_plane(&self) -> usize {
        self.dp * self.hp * self.wp
    }

    fn out_plane(&self) -> usize {
        self.od * self.oh * self.ow
    }

    /// Span of the stride-1 accumulator laid out with padded row pitch.
    fn span(&self) -> usize {
        (self.od - 1) * self.hp * self.wp + (self.oh - 1) * self.wp + self.ow
    }

    fn tap_offset(&self, kd: usize, kh: usize, kw: usize) -> usize {
        (kd * self.hp + kh) * self.wp + kw
    }

    fn weight_index(&self, co: usize, ci: usize, kd: usize, kh: usize, kw: usize) -> usize {
        (((co * self.c_in + ci) * self.k + kd) * self.k + kh) * self.k + kw
    }

    fn out_shape(&self, rank5: bool) -> Vec<usize> {
        if rank5 {
            vec![self.batch, self.c_out, self.od, self.oh, self.ow]
        } else {
            vec![self.c_out, self.od, self.oh, self.ow]
        }
    }
}

fn pad_volume<'a, T: Real>(values: &'a [T], g: &Geometry) -> Cow<'a, [T]> {
    if g.pad == 0 {
        return Cow::Borrowed(values);
    }
    let p = g.pad;
    let mut out = vec![T::zero(); g.batch * g.c_in * g.padded_plane()];
    for (src, dst) in values
        .chunks_exact(g.in_plane())
        .zip(out.chunks_exact_mut(g.padded_plane()))
    {
        for z in 0..g.d {
            for y in 0..g.h {
                let s = (z * g.h + y) * g.w;
                let t = ((z + p) * g.hp + y + p) * g.wp + p;
                dst[t..t + g.w].copy_from_slice(&src[s..s + g.w]);
            }
        }
    }
    Cow::Owned(out)
}

#[inline]
fn axpy<T: Real>(acc: &mut [T], alpha: T, x: &[T]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += alpha * v;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    let s0 = (lanes[0] + lanes[4]) + (lanes[2] + lanes[6]);
    let s1 = (lanes[1] + lanes[5]) + (lanes[3] + lanes[7]);
    (s0 + s1) + tail
}

/// 3-D convolution with zero padding.
///
/// Accepts `[C_in, D, H, W]` or `[N, C_in, D, H, W]` input and returns the
/// output with the same rank. Every output voxel is accumulated as
/// `bias + Σ w·x` with the taps visited in `(c_in, kd, kh, kw)` order.
pub fn conv3d_forward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Conv3dCtx<T>)> {
    let g = Geometry::new(input.dims5("conv3d input")?, weights.shape(), stride, pad)?;
    if bias.len() != g.c_out {
        return Err(Error::dim(format!(
            "conv3d bias has {} entries, expected {}",
            bias.len(),
            g.c_out
        )));
    }
    let padded = pad_volume(input.values(), &g);
    let w = weights.values();
    let b = bias.values();
    let mut out = vec![T::zero(); g.batch * g.c_out * g.out_plane()];

    out.par_chunks_mut(g.out_plane())
        .enumerate()
        .for_each(|(task, plane)| {
            let (n, co) = (task / g.c_out, task % g.c_out);
            let src_batch = &padded[n * g.c_in * g.padded_plane()..][..g.c_in * g.padded_plane()];
            if g.stride == 1 {
                let span = g.span();
                let mut acc = vec![b[co]; span];
                for ci in 0..g.c_in {
                    let src = &src_batch[ci * g.padded_plane()..][..g.padded_plane()];
                    for kd in 0..g.k {
                        for kh in 0..g.k {
                            for kw in 0..g.k {
                                let off = g.tap_offset(kd, kh, kw);
                                axpy(&mut acc, w[g.weight_index(co, ci, kd, kh, kw)], &src[off..off + span]);
                            }
                        }
                    }
                }
                for z in 0..g.od {
                    for y in 0..g.oh {
                        let s = z * g.hp * g.wp + y * g.wp;
                        let t = (z * g.oh + y) * g.ow;
                        plane[t..t + g.ow].copy_from_slice(&acc[s..s + g.ow]);
                    }
                }
            } else {
                plane.fill(b[co]);
                let s = g.stride;
                for ci in 0..g.c_in {
                    let src = &src_batch[ci * g.padded_plane()..][..g.padded_plane()];
                    for kd in 0..g.k {
                        for kh in 0..g.k {
                            for kw in 0..g.k {
                                let wv = w[g.weight_index(co, ci, kd, kh, kw)];
                                for z in 0..g.od {
                                    for y in 0..g.oh {
                                        let base = ((z * s + kd) * g.hp + y * s + kh) * g.wp + kw;
                                        let row = &mut plane[(z * g.oh + y) * g.ow..][..g.ow];
                                        for (x, o) in row.iter_mut().enumerate() {
                                            *o += wv * src[base + x * s];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });

    let out_shape = g.out_shape(input.shape().len() == 5);
    let out = Tensor::from_vec(&out_shape, out)?;
    let ctx = Conv3dCtx {
        input: input.clone(),
        weights: weights.clone(),
        stride,
        pad,
        out_shape,
    };
    Ok((out, ctx))
}

/// Vector-Jacobian product of [`conv3d_forward`].
pub fn conv3d_backward<T: Real>(ctx: &Conv3dCtx<T>, grad_out: &Tensor<T>) -> Result<ConvGrads<T>> {
    grad_out.expect_shape(&ctx.out_shape, "conv3d grad_out")?;
    let g = Geometry::new(
        ctx.input.dims5("conv3d input")?,
        ctx.weights.shape(),
        ctx.stride,
        ctx.pad,
    )?;
    let padded = pad_volume(ctx.input.values(), &g);
    let w = ctx.weights.values();
    let go = grad_out.values();
    let op = g.out_plane();
    let pp = g.padded_plane();

    // Output gradient re-laid in padded row pitch (stride 1 only).
    let spread: Vec<T> = if g.stride == 1 {
        let span = g.span();
        let mut v = vec![T::zero(); g.batch * g.c_out * span];
        for (src, dst) in go.chunks_exact(op).zip(v.chunks_exact_mut(span)) {
            for z in 0..g.od {
                for y in 0..g.oh {
                    let s = (z * g.oh + y) * g.ow;
                    let t = z * g.hp * g.wp + y * g.wp;
                    dst[t..t + g.ow].copy_from_slice(&src[s..s + g.ow]);
                }
            }
        }
        v
    } else {
        Vec::new()
    };

    let mut grad_bias = vec![T::zero(); g.c_out];
    for (co, gb) in grad_bias.iter_mut().enumerate() {
        for n in 0..g.batch {
            *gb += go[(n * g.c_out + co) * op..][..op].iter().copied().sum::<T>();
        }
    }

    let kvol = g.k * g.k * g.k;
    let mut grad_w = vec![T::zero(); g.c_out * g.c_in * kvol];
    grad_w
        .par_chunks_mut(g.c_in * kvol)
        .enumerate()
        .for_each(|(co, gw)| {
            for ci in 0..g.c_in {
                for kd in 0..g.k {
                    for kh in 0..g.k {
                        for kw in 0..g.k {
                            let mut total = T::zero();
                            for n in 0..g.batch {
                                let src = &padded[(n * g.c_in + ci) * pp..][..pp];
                                if g.stride == 1 {
                                    let span = g.span();
                                    let off = g.tap_offset(kd, kh, kw);
                                    let gs = &spread[(n * g.c_out + co) * span..][..span];
                                    total += dot(gs, &src[off..off + span]);
                                } else {
                                    let s = g.stride;
                                    let gp = &go[(n * g.c_out + co) * op..][..op];
                                    for z in 0..g.od {
                                        for y in 0..g.oh {
                                            let base = ((z * s + kd) * g.hp + y * s + kh) * g.wp + kw;
                                            let row = &gp[(z * g.oh + y) * g.ow..][..g.ow];
                                            for (x, &gv) in row.iter().enumerate() {
                                                total += gv * src[base + x * s];
                                            }
                                        }
                                    }
                                }
                            }
                            gw[((ci * g.k + kd) * g.k + kh) * g.k + kw] = total;
                        }
                    }
                }
            }
        });

    let mut grad_pad = vec![T::zero(); g.batch * g.c_in * pp];
    grad_pad
        .par_chunks_mut(pp)
        .enumerate()
        .for_each(|(task, dst)| {
            let (n, ci) = (task / g.c_in, task % g.c_in);
            for co in 0..g.c_out {
                for kd in 0..g.k {
                    for kh in 0..g.k {
                        for kw in 0..g.k {
                            let wv = w[g.weight_index(co, ci, kd, kh, kw)];
                            if g.stride == 1 {
                                let span = g.span();
                                let off = g.tap_offset(kd, kh, kw);
                                let gs = &spread[(n * g.c_out + co) * span..][..span];
                                axpy(&mut dst[off..off + span], wv, gs);
                            } else {
                                let s = g.stride;
                                let gp = &go[(n * g.c_out + co) * op..][..op];
                                for z in 0..g.od {
                                    for y in 0..g.oh {
                                        let base = ((z * s + kd) * g.hp + y * s + kh) * g.wp + kw;
                                        let row = &gp[(z * g.oh + y) * g.ow..][..g.ow];
                                        for (x, &gv) in row.iter().enumerate() {
                                            dst[base + x * s] += wv * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });

    let grad_in = if g.pad == 0 {
        grad_pad
    } else {
        let p = g.pad;
        let mut v = vec![T::zero(); g.batch * g.c_in * g.in_plane()];
        for (src, dst) in grad_pad.chunks_exact(pp).zip(v.chunks_exact_mut(g.in_plane())) {
            for z in 0..g.d {
                for y in 0..g.h {
                    let s = ((z + p) * g.hp + y + p) * g.wp + p;
                    let t = (z * g.h + y) * g.w;
                    dst[t..t + g.w].copy_from_slice(&src[s..s + g.w]);
                }
            }
        }
        v
    };

    Ok(ConvGrads {
        input: Tensor::from_vec(ctx.input.shape(), grad_in)?,
        weights: Tensor::from_vec(ctx.weights.shape(), grad_w)?,
        bias: grad_bias,
    })
}
