//! Parameter-bound layer wrappers over the raw kernels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    batchnorm3d_backward, batchnorm3d_forward, conv3d_backward, conv3d_forward, maxpool3d,
    maxpool3d_backward, relu, relu_backward, upsample3d_backward, upsample3d_nearest, BatchNormCtx,
    Conv3dCtx, Layer, LayerParams, MaxPoolCtx, ParamId, Real, ReluCtx, Tensor,
};
use crate::error::Result;

/// Deterministic per-parameter stream: the same `(seed, name)` always
/// yields the same values, independent of construction order.
pub(crate) fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv3d {
    /// Registers `{name}.weight` (He-normal, fan-in scaled) and `{name}.bias` (zeros).
    pub fn register<T: Real>(
        params: &mut LayerParams<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        seed: u64,
    ) -> Result<Self> {
        let wname = format!("{name}.weight");
        let fan_in = (c_in * k * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let mut rng = param_rng(seed, &wname);
        let n = c_out * c_in * k * k * k;
        let w: Vec<T> = (0..n).map(|_| T::of(normal.sample(&mut rng))).collect();
        let weight = params.insert(wname, Tensor::from_vec(&[c_out, c_in, k, k, k], w)?)?;
        let bias = params.insert(format!("{name}.bias"), Tensor::zeros(&[c_out]))?;
        Ok(Conv3d {
            weight,
            bias,
            stride,
            pad: (k - 1) / 2,
        })
    }
}

impl<T: Real> Layer<T> for Conv3d {
    type Ctx = Conv3dCtx<T>;

    fn forward(&self, params: &LayerParams<T>, input: &Tensor<T>) -> Result<(Tensor<T>, Self::Ctx)> {
        conv3d_forward(input, params.get(self.weight), params.get(self.bias), self.stride, self.pad)
    }

    fn backward(&self, params: &mut LayerParams<T>, ctx: &Self::Ctx, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g = conv3d_backward(ctx, grad_out)?;
        params.accumulate(self.weight, g.weights.values());
        params.accumulate(self.bias, &g.bias);
        Ok(g.input)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct BatchNorm3d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mode: Mode,
}

impl BatchNorm3d {
    pub fn register<T: Real>(params: &mut LayerParams<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm3d {
            gamma: params.insert(format!("{name}.gamma"), Tensor::full(&[channels], T::one()))?,
            beta: params.insert(format!("{name}.beta"), Tensor::zeros(&[channels]))?,
            running_mean: params.insert_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]))?,
            running_var: params.insert_buffer(format!("{name}.running_var"), Tensor::full(&[channels], T::one()))?,
            mode: Mode::Train,
        })
    }

    pub fn with_mode(&self, mode: Mode) -> Self {
        BatchNorm3d { mode, ..self.clone() }
    }
}

impl<T: Real> Layer<T> for BatchNorm3d {
    type Ctx = BatchNormCtx<T>;

    fn forward(&self, params: &LayerParams<T>, input: &Tensor<T>) -> Result<(Tensor<T>, Self::Ctx)> {
        batchnorm3d_forward(
            input,
            params.get(self.gamma),
            params.get(self.beta),
            params.get(self.running_mean),
            params.get(self.running_var),
            self.mode == Mode::Train,
        )
    }

    /// Also commits the batch statistics of a train-mode context to the
    /// running buffers, so they advance once per optimization step.
    fn backward(&self, params: &mut LayerParams<T>, ctx: &Self::Ctx, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (gin, gg, gb) = batchnorm3d_backward(ctx, grad_out)?;
        params.accumulate(self.gamma, &gg);
        params.accumulate(self.beta, &gb);
        if let Some((m, v)) =
            ctx.updated_running(params.get(self.running_mean).values(), params.get(self.running_var).values())
        {
            params.get_mut(self.running_mean).values_mut().copy_from_slice(&m);
            params.get_mut(self.running_var).values_mut().copy_from_slice(&v);
        }
        Ok(gin)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Relu;

impl<T: Real> Layer<T> for Relu {
    type Ctx = ReluCtx<T>;

    fn forward(&self, _: &LayerParams<T>, input: &Tensor<T>) -> Result<(Tensor<T>, Self::Ctx)> {
        Ok(relu(input))
    }

    fn backward(&self, _: &mut LayerParams<T>, ctx: &Self::Ctx, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        relu_backward(ctx, grad_out)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct MaxPool3d;

impl<T: Real> Layer<T> for MaxPool3d {
    type Ctx = MaxPoolCtx;

    fn forward(&self, _: &LayerParams<T>, input: &Tensor<T>) -> Result<(Tensor<T>, Self::Ctx)> {
        maxpool3d(input)
    }

    fn backward(&self, _: &mut LayerParams<T>, ctx: &Self::Ctx, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        maxpool3d_backward(ctx, grad_out)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Upsample3d;

impl<T: Real> Layer<T> for Upsample3d {
    type Ctx = ();

    fn forward(&self, _: &LayerParams<T>, input: &Tensor<T>) -> Result<(Tensor<T>, Self::Ctx)> {
        Ok((upsample3d_nearest(input)?, ()))
    }

    fn backward(&self, _: &mut LayerParams<T>, _: &Self::Ctx, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        upsample3d_backward(grad_out)
    }
}
