use crate::error::Result;
use crate::tensor::layers::{BatchNorm3d, Conv3d, Mode};
use crate::tensor::{
    add, maxpool3d, maxpool3d_backward, relu, relu_backward, upsample3d_backward, upsample3d_nearest,
    BatchNormCtx, Conv3dCtx, Layer, LayerParams, MaxPoolCtx, Real, ReluCtx, Tensor,
};

/// Pre-activation residual block: `x' + conv(relu(bn(conv(relu(bn(x))))))`,
/// where `x'` is `x` or its 1×1×1 projection when channel counts differ.
#[derive(Clone, Debug)]
pub(crate) struct Residual {
    bn1: Option<BatchNorm3d>,
    conv1: Conv3d,
    bn2: Option<BatchNorm3d>,
    conv2: Conv3d,
    proj: Option<Conv3d>,
}

pub(crate) struct ResidualCtx<T> {
    bn1: Option<BatchNormCtx<T>>,
    relu1: ReluCtx<T>,
    conv1: Conv3dCtx<T>,
    bn2: Option<BatchNormCtx<T>>,
    relu2: ReluCtx<T>,
    conv2: Conv3dCtx<T>,
    proj: Option<Conv3dCtx<T>>,
}

fn bn_forward<T: Real>(
    bn: &Option<BatchNorm3d>,
    p: &LayerParams<T>,
    x: Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Option<BatchNormCtx<T>>)> {
    match bn {
        Some(bn) => {
            let (y, c) = bn.with_mode(mode).forward(p, &x)?;
            Ok((y, Some(c)))
        }
        None => Ok((x, None)),
    }
}

fn bn_backward<T: Real>(
    bn: &Option<BatchNorm3d>,
    p: &mut LayerParams<T>,
    ctx: &Option<BatchNormCtx<T>>,
    g: Tensor<T>,
) -> Result<Tensor<T>> {
    match (bn, ctx) {
        (Some(bn), Some(c)) => bn.backward(p, c, &g),
        _ => Ok(g),
    }
}

pub(crate) fn add_into<T: Real>(acc: &mut Tensor<T>, other: &Tensor<T>) {
    for (a, &b) in acc.values_mut().iter_mut().zip(other.values()) {
        *a += b;
    }
}

impl Residual {
    pub(crate) fn register<T: Real>(
        p: &mut LayerParams<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        batchnorm: bool,
        seed: u64,
    ) -> Result<Self> {
        let bn1 = batchnorm
            .then(|| BatchNorm3d::register(p, &format!("{name}.bn1"), c_in))
            .transpose()?;
        let conv1 = Conv3d::register(p, &format!("{name}.conv1"), c_in, c_out, 3, 1, seed)?;
        let bn2 = batchnorm
            .then(|| BatchNorm3d::register(p, &format!("{name}.bn2"), c_out))
            .transpose()?;
        let conv2 = Conv3d::register(p, &format!("{name}.conv2"), c_out, c_out, 3, 1, seed)?;
        // Each block starts as its skip path, so stacked sums do not blow up at init.
        p.get_mut(conv2.weight).values_mut().fill(T::of(0.0));
        let proj = (c_in != c_out)
            .then(|| Conv3d::register(p, &format!("{name}.proj"), c_in, c_out, 1, 1, seed))
            .transpose()?;
        Ok(Residual {
            bn1,
            conv1,
            bn2,
            conv2,
            proj,
        })
    }

    pub(crate) fn forward<T: Real>(
        &self,
        p: &LayerParams<T>,
        x: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, ResidualCtx<T>)> {
        let (a, bn1) = bn_forward(&self.bn1, p, x.clone(), mode)?;
        let (a, relu1) = relu(&a);
        let (a, conv1) = self.conv1.forward(p, &a)?;
        let (a, bn2) = bn_forward(&self.bn2, p, a, mode)?;
        let (a, relu2) = relu(&a);
        let (mut y, conv2) = self.conv2.forward(p, &a)?;
        let proj = match &self.proj {
            Some(pc) => {
                let (s, c) = pc.forward(p, x)?;
                add_into(&mut y, &s);
                Some(c)
            }
            None => {
                add_into(&mut y, x);
                None
            }
        };
        Ok((
            y,
            ResidualCtx {
                bn1,
                relu1,
                conv1,
                bn2,
                relu2,
                conv2,
                proj,
            },
        ))
    }

    pub(crate) fn backward<T: Real>(
        &self,
        p: &mut LayerParams<T>,
        ctx: &ResidualCtx<T>,
        g: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let a = self.conv2.backward(p, &ctx.conv2, g)?;
        let a = relu_backward(&ctx.relu2, &a)?;
        let a = bn_backward(&self.bn2, p, &ctx.bn2, a)?;
        let a = self.conv1.backward(p, &ctx.conv1, &a)?;
        let a = relu_backward(&ctx.relu1, &a)?;
        let mut gx = bn_backward(&self.bn1, p, &ctx.bn1, a)?;
        match (&self.proj, &ctx.proj) {
            (Some(pc), Some(c)) => add_into(&mut gx, &pc.backward(p, c, g)?),
            _ => add_into(&mut gx, g),
        }
        Ok(gx)
    }
}

#[derive(Clone, Debug)]
enum Inner {
    Deeper(Box<Hourglass>),
    Leaf(Residual),
}

enum InnerCtx<T> {
    Deeper(Box<HourglassCtx<T>>),
    Leaf(ResidualCtx<T>),
}

/// Recursive encoder-decoder: the upper branch keeps full resolution, the
/// lower branch pools, recurses, and is upsampled back before the sum.
#[derive(Clone, Debug)]
pub(crate) struct Hourglass {
    up: Residual,
    low1: Residual,
    inner: Inner,
    low3: Residual,
}

pub(crate) struct HourglassCtx<T> {
    up: ResidualCtx<T>,
    pool: MaxPoolCtx,
    low1: ResidualCtx<T>,
    inner: InnerCtx<T>,
    low3: ResidualCtx<T>,
}

impl Hourglass {
    pub(crate) fn register<T: Real>(
        p: &mut LayerParams<T>,
        name: &str,
        depth: usize,
        channels: usize,
        batchnorm: bool,
        seed: u64,
    ) -> Result<Self> {
        let up = Residual::register(p, &format!("{name}.up"), channels, channels, batchnorm, seed)?;
        let low1 = Residual::register(p, &format!("{name}.low1"), channels, channels, batchnorm, seed)?;
        let inner = if depth > 1 {
            Inner::Deeper(Box::new(Hourglass::register(
                p,
                &format!("{name}.inner"),
                depth - 1,
                channels,
                batchnorm,
                seed,
            )?))
        } else {
            Inner::Leaf(Residual::register(p, &format!("{name}.low2"), channels, channels, batchnorm, seed)?)
        };
        let low3 = Residual::register(p, &format!("{name}.low3"), channels, channels, batchnorm, seed)?;
        Ok(Hourglass { up, low1, inner, low3 })
    }

    pub(crate) fn forward<T: Real>(
        &self,
        p: &LayerParams<T>,
        x: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, HourglassCtx<T>)> {
        let (up, up_ctx) = self.up.forward(p, x, mode)?;
        let (pooled, pool) = maxpool3d(x)?;
        let (l1, low1) = self.low1.forward(p, &pooled, mode)?;
        let (l2, inner) = match &self.inner {
            Inner::Deeper(h) => {
                let (y, c) = h.forward(p, &l1, mode)?;
                (y, InnerCtx::Deeper(Box::new(c)))
            }
            Inner::Leaf(r) => {
                let (y, c) = r.forward(p, &l1, mode)?;
                (y, InnerCtx::Leaf(c))
            }
        };
        let (l3, low3) = self.low3.forward(p, &l2, mode)?;
        let y = add(&up, &upsample3d_nearest(&l3)?)?;
        Ok((
            y,
            HourglassCtx {
                up: up_ctx,
                pool,
                low1,
                inner,
                low3,
            },
        ))
    }

    pub(crate) fn backward<T: Real>(
        &self,
        p: &mut LayerParams<T>,
        ctx: &HourglassCtx<T>,
        g: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut gx = self.up.backward(p, &ctx.up, g)?;
        let gl = upsample3d_backward(g)?;
        let gl = self.low3.backward(p, &ctx.low3, &gl)?;
        let gl = match (&self.inner, &ctx.inner) {
            (Inner::Deeper(h), InnerCtx::Deeper(c)) => h.backward(p, c, &gl)?,
            (Inner::Leaf(r), InnerCtx::Leaf(c)) => r.backward(p, c, &gl)?,
            _ => unreachable!("context built by the matching forward"),
        };
        let gl = self.low1.backward(p, &ctx.low1, &gl)?;
        add_into(&mut gx, &maxpool3d_backward(&ctx.pool, &gl)?);
        Ok(gx)
    }
}

/// Multiplier on the He draw for the heatmap-producing conv, keeping initial outputs near zero.
const HEAD_INIT_SCALE: f64 = 0.01;

/// Two consecutive 1×1×1 convolutions with a ReLU between them.
#[derive(Clone, Debug)]
pub(crate) struct Head {
    conv1: Conv3d,
    conv2: Conv3d,
}

pub(crate) struct HeadCtx<T> {
    conv1: Conv3dCtx<T>,
    relu: ReluCtx<T>,
    conv2: Conv3dCtx<T>,
}

impl Head {
    pub(crate) fn register<T: Real>(
        p: &mut LayerParams<T>,
        name: &str,
        channels: usize,
        outputs: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(Head {
            conv1: Conv3d::register(p, &format!("{name}.conv1"), channels, channels, 1, 1, seed)?,
            conv2: {
                let c = Conv3d::register(p, &format!("{name}.conv2"), channels, outputs, 1, 1, seed)?;
                for v in p.get_mut(c.weight).values_mut() {
                    *v = *v * T::of(HEAD_INIT_SCALE);
                }
                c
            },
        })
    }

    pub(crate) fn forward<T: Real>(&self, p: &LayerParams<T>, x: &Tensor<T>) -> Result<(Tensor<T>, HeadCtx<T>)> {
        let (a, conv1) = self.conv1.forward(p, x)?;
        let (a, relu) = relu(&a);
        let (y, conv2) = self.conv2.forward(p, &a)?;
        Ok((y, HeadCtx { conv1, relu, conv2 }))
    }

    pub(crate) fn backward<T: Real>(
        &self,
        p: &mut LayerParams<T>,
        ctx: &HeadCtx<T>,
        g: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let a = self.conv2.backward(p, &ctx.conv2, g)?;
        let a = relu_backward(&ctx.relu, &a)?;
        self.conv1.backward(p, &ctx.conv1, &a)
    }
}
