//! Stacked 3-D hourglass network.
//!
//! ```text
//! voxels ─ conv3 s2 ─ res ─┬─ hourglass ─ res ─┬─ head ─▶ joints (every stack)
//!                          │                   ├─ head ─▶ bones  (all but last)
//!                          │                   │
//!                          └──────(+)──────────┴─ feat + 1×1×1(joints) ─▶ next stack
//! ```
//!
//! Only joint heatmaps are remixed into the next stack; bone heads are a pure
//! supervision branch on the shared stack features.

mod blocks;
pub mod checkpoint;

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::layers::{Conv3d, Mode};
use crate::tensor::{Layer, LayerParams, Real, Tensor};

use blocks::{add_into, Head, HeadCtx, Hourglass, HourglassCtx, Residual, ResidualCtx};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HourglassConfig {
    pub input_res: usize,
    pub output_res: usize,
    pub stacks: usize,
    pub channels: usize,
    /// Pool/upsample levels inside each hourglass.
    pub hg_depth: usize,
    pub joints: usize,
    pub bones: usize,
    pub bone_heads_enabled: bool,
    pub batchnorm: bool,
}

impl Default for HourglassConfig {
    fn default() -> Self {
        HourglassConfig {
            input_res: 64,
            output_res: 32,
            stacks: 2,
            channels: 128,
            hg_depth: 3,
            joints: 21,
            bones: 20,
            bone_heads_enabled: true,
            batchnorm: true,
        }
    }
}

impl HourglassConfig {
    /// Small network used by gradient checks: 8³ input, 4 channels, one level.
    pub fn miniature() -> Self {
        HourglassConfig {
            input_res: 8,
            output_res: 4,
            stacks: 2,
            channels: 4,
            hg_depth: 1,
            joints: 2,
            bones: 1,
            bone_heads_enabled: true,
            batchnorm: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.output_res == 0 || self.input_res != 2 * self.output_res {
            return fail(format!(
                "input_res ({}) must be twice output_res ({})",
                self.input_res, self.output_res
            ));
        }
        if self.hg_depth == 0 || self.output_res % (1 << self.hg_depth) != 0 || self.output_res >> self.hg_depth < 2 {
            return fail(format!(
                "output_res {} cannot be halved {} times down to at least 2",
                self.output_res, self.hg_depth
            ));
        }
        if self.stacks == 0 || self.channels == 0 || self.joints == 0 {
            return fail("stacks, channels and joints must be positive".into());
        }
        if self.bone_heads_enabled && self.bones == 0 {
            return fail("bone heads enabled but bones == 0".into());
        }
        Ok(())
    }

    pub fn stem_channels(&self) -> usize {
        (self.channels / 2).max(1)
    }

    /// Number of stacks that carry a bone head.
    pub fn bone_stacks(&self) -> usize {
        if self.bone_heads_enabled {
            self.stacks - 1
        } else {
            0
        }
    }

    /// Closed-form output shapes `(joint maps per stack, bone maps per stack)` for a batch of `n`.
    pub fn output_shapes(&self, n: usize) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        let r = self.output_res;
        (
            vec![vec![n, self.joints, r, r, r]; self.stacks],
            vec![vec![n, self.bones, r, r, r]; self.bone_stacks()],
        )
    }

    /// Chebyshev radius, in output voxels, outside which a single input voxel
    /// cannot influence the joint head of stack `stack` (0-based).
    pub fn receptive_radius(&self, stack: usize) -> usize {
        fn hourglass(depth: usize) -> usize {
            let inner = if depth > 1 { hourglass(depth - 1) } else { 2 };
            2usize.max(2 * (2 + inner + 2) + 1)
        }
        1 + 2 + (stack + 1) * (hourglass(self.hg_depth) + 2)
    }

    pub(crate) fn to_pairs(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("input_res".into(), self.input_res.to_string());
        m.insert("output_res".into(), self.output_res.to_string());
        m.insert("stacks".into(), self.stacks.to_string());
        m.insert("channels".into(), self.channels.to_string());
        m.insert("hg_depth".into(), self.hg_depth.to_string());
        m.insert("joints".into(), self.joints.to_string());
        m.insert("bones".into(), self.bones.to_string());
        m.insert("bone_heads_enabled".into(), self.bone_heads_enabled.to_string());
        m.insert("batchnorm".into(), self.batchnorm.to_string());
        m
    }

    pub(crate) fn from_pairs(m: &BTreeMap<String, String>) -> Result<Self> {
        fn get<V: std::str::FromStr>(m: &BTreeMap<String, String>, k: &str) -> Result<V> {
            m.get(k)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("architecture is missing `{k}`")))?
                .parse()
                .map_err(|_| Error::CorruptCheckpoint(format!("architecture field `{k}` is malformed")))
        }
        let c = HourglassConfig {
            input_res: get(m, "input_res")?,
            output_res: get(m, "output_res")?,
            stacks: get(m, "stacks")?,
            channels: get(m, "channels")?,
            hg_depth: get(m, "hg_depth")?,
            joints: get(m, "joints")?,
            bones: get(m, "bones")?,
            bone_heads_enabled: get(m, "bone_heads_enabled")?,
            batchnorm: get(m, "batchnorm")?,
        };
        c.validate()
            .map_err(|e| Error::CorruptCheckpoint(format!("stored architecture is invalid: {e}")))?;
        Ok(c)
    }
}

#[derive(Clone, Debug)]
struct Stack {
    hourglass: Hourglass,
    post: Residual,
    joint_head: Head,
    bone_head: Option<Head>,
    remix: Option<Conv3d>,
}

struct StackCtx<T> {
    hourglass: HourglassCtx<T>,
    post: ResidualCtx<T>,
    joint_head: HeadCtx<T>,
    bone_head: Option<HeadCtx<T>>,
    remix: Option<crate::tensor::Conv3dCtx<T>>,
}

/// Parameter-free description of the layer graph; weights live in a [`LayerParams`].
#[derive(Clone, Debug)]
pub struct Network {
    config: HourglassConfig,
    stem: Conv3d,
    stem_res: Residual,
    stacks: Vec<Stack>,
}

/// Saved state of a train-mode forward pass.
pub struct ForwardState<T> {
    batch: usize,
    mode: Mode,
    stem: crate::tensor::Conv3dCtx<T>,
    stem_res: ResidualCtx<T>,
    stacks: Vec<StackCtx<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outputs<T> {
    /// Joint heatmaps for every stack, `[N, J, R, R, R]` (or `[J, R, R, R]` for unbatched input).
    pub joints: Vec<Tensor<T>>,
    /// Bone heatmaps for stacks `0..S−1`.
    pub bones: Vec<Tensor<T>>,
}

/// Output cotangents; `None` entries contribute nothing.
#[derive(Clone, Debug, Default)]
pub struct OutputGrads<T> {
    pub joints: Vec<Option<Tensor<T>>>,
    pub bones: Vec<Option<Tensor<T>>>,
}

impl Network {
    fn build<T: Real>(config: &HourglassConfig, params: &mut LayerParams<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let bn = config.batchnorm;
        let stem = Conv3d::register(params, "stem.conv", 1, config.stem_channels(), 3, 2, seed)?;
        let stem_res = Residual::register(params, "stem.res", config.stem_channels(), c, bn, seed)?;
        let mut stacks = Vec::with_capacity(config.stacks);
        for s in 0..config.stacks {
            let last = s + 1 == config.stacks;
            let name = format!("stack{s}");
            stacks.push(Stack {
                hourglass: Hourglass::register(params, &format!("{name}.hg"), config.hg_depth, c, bn, seed)?,
                post: Residual::register(params, &format!("{name}.post"), c, c, bn, seed)?,
                joint_head: Head::register(params, &format!("{name}.joint_head"), c, config.joints, seed)?,
                bone_head: (config.bone_heads_enabled && !last)
                    .then(|| Head::register(params, &format!("{name}.bone_head"), c, config.bones, seed))
                    .transpose()?,
                remix: (!last)
                    .then(|| Conv3d::register(params, &format!("{name}.remix"), config.joints, c, 1, 1, seed))
                    .transpose()?,
            });
        }
        Ok(Network {
            config: config.clone(),
            stem,
            stem_res,
            stacks,
        })
    }

    fn check_input<T: Real>(&self, x: &Tensor<T>) -> Result<usize> {
        let r = self.config.input_res;
        match *x.shape() {
            [n, 1, a, b, c] if n > 0 && a == r && b == r && c == r => Ok(n),
            [1, a, b, c] if a == r && b == r && c == r => Ok(1),
            _ => Err(Error::dim(format!(
                "network expects [N, 1, {r}, {r}, {r}] or [1, {r}, {r}, {r}] voxels, got {:?}",
                x.shape()
            ))),
        }
    }

    fn forward<T: Real>(
        &self,
        p: &LayerParams<T>,
        x: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Outputs<T>, ForwardState<T>)> {
        let batch = self.check_input(x)?;
        let (h, stem) = self.stem.forward(p, x)?;
        let (mut h, stem_res) = self.stem_res.forward(p, &h, mode)?;
        let mut out = Outputs {
            joints: Vec::new(),
            bones: Vec::new(),
        };
        let mut ctxs = Vec::with_capacity(self.stacks.len());
        for stack in &self.stacks {
            let (y, hourglass) = stack.hourglass.forward(p, &h, mode)?;
            let (feat, post) = stack.post.forward(p, &y, mode)?;
            let (joints, joint_head) = stack.joint_head.forward(p, &feat)?;
            let bone_head = match &stack.bone_head {
                Some(head) => {
                    let (bones, c) = head.forward(p, &feat)?;
                    out.bones.push(bones);
                    Some(c)
                }
                None => None,
            };
            let remix = match &stack.remix {
                Some(conv) => {
                    let (m, c) = conv.forward(p, &joints)?;
                    add_into(&mut h, &feat);
                    add_into(&mut h, &m);
                    Some(c)
                }
                None => None,
            };
            out.joints.push(joints);
            ctxs.push(StackCtx {
                hourglass,
                post,
                joint_head,
                bone_head,
                remix,
            });
        }
        Ok((
            out,
            ForwardState {
                batch,
                mode,
                stem,
                stem_res,
                stacks: ctxs,
            },
        ))
    }

    fn backward<T: Real>(
        &self,
        p: &mut LayerParams<T>,
        state: &ForwardState<T>,
        grads: &OutputGrads<T>,
    ) -> Result<Tensor<T>> {
        let (jshapes, bshapes) = self.config.output_shapes(state.batch);
        let rank5 = state.stem.input().shape().len() == 5;
        let fit = |s: &[usize]| if rank5 { s.to_vec() } else { s[1..].to_vec() };
        if grads.joints.len() > self.stacks.len() || grads.bones.len() > bshapes.len() {
            return Err(Error::dim("more output gradients than network outputs"));
        }
        // Gradient flowing into the input of the stack currently being processed.
        let mut g_next: Option<Tensor<T>> = None;
        for (s, (stack, ctx)) in self.stacks.iter().zip(&state.stacks).enumerate().rev() {
            let jshape = fit(&jshapes[s]);
            let mut g_joints = match grads.joints.get(s).and_then(Option::as_ref) {
                Some(g) => {
                    g.expect_shape(&jshape, "joint heatmap gradient")?;
                    g.clone()
                }
                None => Tensor::zeros(&jshape),
            };
            if let (Some(conv), Some(c), Some(gn)) = (&stack.remix, &ctx.remix, &g_next) {
                add_into(&mut g_joints, &conv.backward(p, c, gn)?);
            }
            let mut g_feat = stack.joint_head.backward(p, &ctx.joint_head, &g_joints)?;
            if let (Some(head), Some(c)) = (&stack.bone_head, &ctx.bone_head) {
                if let Some(gb) = grads.bones.get(s).and_then(Option::as_ref) {
                    gb.expect_shape(&fit(&bshapes[s]), "bone heatmap gradient")?;
                    add_into(&mut g_feat, &head.backward(p, c, gb)?);
                }
            }
            if let Some(gn) = &g_next {
                add_into(&mut g_feat, gn);
            }
            let g_y = stack.post.backward(p, &ctx.post, &g_feat)?;
            let mut g_in = stack.hourglass.backward(p, &ctx.hourglass, &g_y)?;
            if let Some(gn) = &g_next {
                add_into(&mut g_in, gn);
            }
            g_next = Some(g_in);
        }
        let g = self.stem_res.backward(p, &state.stem_res, &g_next.expect("at least one stack"))?;
        self.stem.backward(p, &state.stem, &g)
    }
}

/// Full parameter set plus architecture.
pub struct HourglassModel<T> {
    network: Network,
    params: LayerParams<T>,
    stored: Option<ForwardState<T>>,
}

impl<T: Real> Clone for HourglassModel<T> {
    /// Clones architecture and parameters; a stored forward state is not carried over.
    fn clone(&self) -> Self {
        HourglassModel {
            network: self.network.clone(),
            params: self.params.clone(),
            stored: None,
        }
    }
}

impl<T: Real> std::fmt::Debug for HourglassModel<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HourglassModel")
            .field("config", &self.network.config)
            .field("params", &self.params.len())
            .field("stored_state", &self.stored.is_some())
            .finish()
    }
}

/// A train-mode forward awaiting its backward.
pub struct PendingBackward<T> {
    state: ForwardState<T>,
}

impl<T: Real> HourglassModel<T> {
    /// He-normal fan-in init for conv weights, zero biases. Each parameter
    /// draws from its own stream keyed by `(seed, name)`, so shared layers get
    /// identical values across configs that differ only in optional heads.
    pub fn build(config: &HourglassConfig, seed: u64) -> Result<Self> {
        let mut params = LayerParams::new();
        let network = Network::build(config, &mut params, seed)?;
        Ok(HourglassModel {
            network,
            params,
            stored: None,
        })
    }

    pub fn config(&self) -> &HourglassConfig {
        &self.network.config
    }

    pub fn params(&self) -> &LayerParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut LayerParams<T> {
        &mut self.params
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    /// Eval-mode forward; read-only, so a model can be shared across threads.
    pub fn predict(&self, voxels: &Tensor<T>) -> Result<Outputs<T>> {
        Ok(self.network.forward(&self.params, voxels, Mode::Eval)?.0)
    }

    /// Forward pass that retains the state needed by [`HourglassModel::backward`].
    pub fn forward(&self, voxels: &Tensor<T>, mode: Mode) -> Result<(Outputs<T>, PendingBackward<T>)> {
        let (out, state) = self.network.forward(&self.params, voxels, mode)?;
        Ok((out, PendingBackward { state }))
    }

    /// Accumulates parameter gradients for the given output cotangents and
    /// returns the input gradient. Train-mode batch-norm statistics are
    /// committed here.
    pub fn backward(&mut self, pending: PendingBackward<T>, grads: &OutputGrads<T>) -> Result<Tensor<T>> {
        if pending.state.mode != Mode::Train {
            return Err(Error::State("backward needs a train-mode forward state".into()));
        }
        self.network.backward(&mut self.params, &pending.state, grads)
    }

    /// Train-mode forward that keeps its state inside the model for [`HourglassModel::backward_stored`].
    pub fn forward_train(&mut self, voxels: &Tensor<T>) -> Result<Outputs<T>> {
        let (out, state) = self.network.forward(&self.params, voxels, Mode::Train)?;
        self.stored = Some(state);
        Ok(out)
    }

    /// Consumes the state left by [`HourglassModel::forward_train`].
    pub fn backward_stored(&mut self, grads: &OutputGrads<T>) -> Result<Tensor<T>> {
        let state = self
            .stored
            .take()
            .ok_or_else(|| Error::State("backward called without a stored forward state".into()))?;
        self.backward(PendingBackward { state }, grads)
    }

    /// Adds `N(0, std²)` noise to every trainable weight tensor (biases and
    /// BN affines are left alone). Used by gradient checks so that
    /// zero-initialized branches carry signal.
    pub fn jitter(&mut self, std: f64, seed: u64) {
        let normal = Normal::new(0.0, std).expect("finite std");
        let ids: Vec<_> = self.params.trainable_ids().collect();
        for id in ids {
            let name = self.params.name(id).to_string();
            if !name.ends_with(".weight") {
                continue;
            }
            let mut rng = crate::tensor::layers::param_rng(seed ^ 0x6a69_7474_6572, &name);
            for v in self.params.get_mut(id).values_mut() {
                *v += T::of(normal.sample(&mut rng));
            }
        }
    }

    /// Joint and bone channel counts must match exactly.
    pub fn expect_layout(&self, joints: usize, bones: usize) -> Result<()> {
        let c = self.config();
        if c.joints != joints || (c.bone_heads_enabled && c.bones != bones) {
            return Err(Error::dim(format!(
                "model predicts {} joints / {} bones, caller expects {joints} / {bones}",
                c.joints, c.bones
            )));
        }
        Ok(())
    }

    /// Re-derives every parameter shape from the config and compares.
    pub fn shape_audit(&self) -> Result<()> {
        let fresh = HourglassModel::<T>::build(self.config(), 0)?;
        if fresh.params.len() != self.params.len() {
            return Err(Error::dim("parameter count differs from the architecture"));
        }
        for ((_, a, ta), (_, b, tb)) in self.params.iter().zip(fresh.params.iter()) {
            if a != b || ta.shape() != tb.shape() {
                return Err(Error::dim(format!("parameter `{a}` {:?} does not match `{b}` {:?}", ta.shape(), tb.shape())));
            }
        }
        Ok(())
    }
}

/// Eval-mode network viewed as a single map from voxels to all outputs
/// concatenated, for finite-difference checks.
pub struct FlatNetwork<'a> {
    pub network: &'a Network,
}

impl<T: Real> Layer<T> for FlatNetwork<'_> {
    type Ctx = (ForwardState<T>, Vec<Vec<usize>>);

    fn forward(&self, params: &LayerParams<T>, input: &Tensor<T>) -> Result<(Tensor<T>, Self::Ctx)> {
        let (out, state) = self.network.forward(params, input, Mode::Eval)?;
        let mut values = Vec::new();
        let mut shapes = Vec::new();
        for t in out.joints.iter().chain(&out.bones) {
            values.extend_from_slice(t.values());
            shapes.push(t.shape().to_vec());
        }
        let n = values.len();
        Ok((Tensor::from_vec(&[n], values)?, (state, shapes)))
    }

    fn backward(&self, params: &mut LayerParams<T>, ctx: &Self::Ctx, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (state, shapes) = ctx;
        let mut offset = 0;
        let mut parts = Vec::new();
        for s in shapes {
            let n: usize = s.iter().product();
            parts.push(Some(Tensor::from_vec(s, grad_out.values()[offset..offset + n].to_vec())?));
            offset += n;
        }
        let bones = parts.split_off(self.network.config.stacks);
        self.network.backward(params, state, &OutputGrads { joints: parts, bones })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_voxels(r: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[1, 1, r, r, r], (0..r * r * r).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    // Hand count from the layer table; see `param_count_formula` for the general form.
    const DEFAULT_PARAM_COUNT: usize = 20_215_742;

    fn param_count_formula(c: &HourglassConfig) -> usize {
        let conv = |ci: usize, co: usize, k: usize| co * ci * k * k * k + co;
        let bn = |ch: usize| if c.batchnorm { 2 * ch } else { 0 };
        let res = |ci: usize, co: usize| {
            bn(ci) + conv(ci, co, 3) + bn(co) + conv(co, co, 3) + if ci != co { conv(ci, co, 1) } else { 0 }
        };
        let ch = c.channels;
        let c0 = (ch / 2).max(1);
        let hourglass = (3 * c.hg_depth + 1) * res(ch, ch);
        let mut total = conv(1, c0, 3) + res(c0, ch);
        for s in 0..c.stacks {
            total += hourglass + res(ch, ch) + conv(ch, ch, 1) + conv(ch, c.joints, 1);
            if s + 1 < c.stacks {
                total += conv(c.joints, ch, 1);
                if c.bone_heads_enabled {
                    total += conv(ch, ch, 1) + conv(ch, c.bones, 1);
                }
            }
        }
        total
    }

    #[test]
    fn default_parameter_count() {
        let cfg = HourglassConfig::default();
        assert_eq!(param_count_formula(&cfg), DEFAULT_PARAM_COUNT);
        let m = HourglassModel::<f32>::build(&cfg, 0).unwrap();
        assert_eq!(m.params().trainable_count(), DEFAULT_PARAM_COUNT);
        m.shape_audit().unwrap();
        for cfg in [
            HourglassConfig::miniature(),
            HourglassConfig { bone_heads_enabled: false, ..HourglassConfig::miniature() },
            HourglassConfig { batchnorm: true, stacks: 3, hg_depth: 2, input_res: 16, output_res: 8, ..HourglassConfig::miniature() },
        ] {
            let m = HourglassModel::<f64>::build(&cfg, 1).unwrap();
            assert_eq!(m.params().trainable_count(), param_count_formula(&cfg), "{cfg:?}");
        }
    }

    #[test]
    fn last_stack_has_no_bone_head() {
        let m = HourglassModel::<f32>::build(&HourglassConfig::default(), 0).unwrap();
        assert!(m.params().iter().any(|(_, n, _)| n.starts_with("stack0.bone_head")));
        assert!(!m.params().iter().any(|(_, n, _)| n.starts_with("stack1.bone_head")));
        assert!(!m.params().iter().any(|(_, n, _)| n.starts_with("stack1.remix")));
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            HourglassConfig { input_res: 60, ..Default::default() },
            HourglassConfig { hg_depth: 5, ..Default::default() },
            HourglassConfig { stacks: 0, ..Default::default() },
            HourglassConfig { bones: 0, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(HourglassModel::<f32>::build(&c, 0), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn same_seed_bitwise_identical() {
        let cfg = HourglassConfig::miniature();
        let a = HourglassModel::<f32>::build(&cfg, 9).unwrap();
        let b = HourglassModel::<f32>::build(&cfg, 9).unwrap();
        let c = HourglassModel::<f32>::build(&cfg, 10).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn trunk_params_independent_of_bone_heads() {
        let cfg = HourglassConfig::miniature();
        let with = HourglassModel::<f64>::build(&cfg, 3).unwrap();
        let without = HourglassModel::<f64>::build(&HourglassConfig { bone_heads_enabled: false, ..cfg }, 3).unwrap();
        for (_, name, t) in without.params().iter() {
            assert_eq!(with.params().by_name(name), Some(t), "{name}");
        }
    }

    #[test]
    fn output_shapes_follow_config() {
        // Default resolutions, stacks and channel layout with a slim trunk.
        let cfg = HourglassConfig { channels: 2, ..Default::default() };
        let m = HourglassModel::<f32>::build(&cfg, 0).unwrap();
        let x = Tensor::zeros(&[1, 64, 64, 64]);
        let out = m.predict(&x).unwrap();
        assert_eq!(out.joints.len(), 2);
        assert_eq!(out.bones.len(), 1);
        for j in &out.joints {
            assert_eq!(j.shape(), &[21, 32, 32, 32]);
        }
        assert_eq!(out.bones[0].shape(), &[20, 32, 32, 32]);
        let (js, bs) = HourglassConfig::default().output_shapes(1);
        assert_eq!(js, vec![vec![1, 21, 32, 32, 32]; 2]);
        assert_eq!(bs, vec![vec![1, 20, 32, 32, 32]]);
        assert!(m.predict(&Tensor::zeros(&[1, 32, 32, 32])).is_err());
    }

    #[test]
    fn zero_input_zero_heads_gives_bias() {
        let cfg = HourglassConfig::miniature();
        let mut m = HourglassModel::<f64>::build(&cfg, 0).unwrap();
        let names: Vec<String> = m
            .params()
            .iter()
            .filter(|(_, n, _)| n.contains("_head.conv2"))
            .map(|(_, n, _)| n.to_string())
            .collect();
        for n in &names {
            let id = m.params().id(n).unwrap();
            let t = m.params_mut().get_mut(id);
            let fill = if n.ends_with("bias") { 0.25 } else { 0.0 };
            t.values_mut().iter_mut().for_each(|v| *v = fill);
        }
        let out = m.predict(&Tensor::zeros(&[1, 8, 8, 8])).unwrap();
        for t in out.joints.iter().chain(&out.bones) {
            assert!(t.values().iter().all(|&v| v == 0.25));
        }
    }

    #[test]
    fn zero_output_grads_give_zero_param_grads() {
        let cfg = HourglassConfig::miniature();
        let mut m = HourglassModel::<f64>::build(&cfg, 0).unwrap();
        let (out, pending) = m.forward(&random_voxels(8, 1), Mode::Train).unwrap();
        let grads = OutputGrads {
            joints: out.joints.iter().map(|t| Some(Tensor::zeros(t.shape()))).collect(),
            bones: out.bones.iter().map(|t| Some(Tensor::zeros(t.shape()))).collect(),
        };
        m.params_mut().zero_grads();
        m.backward(pending, &grads).unwrap();
        for (_, _, t) in m.params().iter() {
            if let Some(g) = t.grad() {
                assert!(g.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn stack2_loss_reaches_stem() {
        let cfg = HourglassConfig::miniature();
        let mut m = HourglassModel::<f64>::build(&cfg, 0).unwrap();
        let (out, pending) = m.forward(&random_voxels(8, 2), Mode::Train).unwrap();
        let grads = OutputGrads {
            joints: vec![None, Some(Tensor::full(out.joints[1].shape(), 1.0))],
            bones: vec![],
        };
        m.params_mut().zero_grads();
        m.backward(pending, &grads).unwrap();
        let stem = m.params().by_name("stem.conv.weight").unwrap();
        assert!(stem.grad().unwrap().iter().any(|&v| v != 0.0));
        let bone = m.params().by_name("stack0.bone_head.conv2.weight").unwrap();
        assert!(bone.grad().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn miniature_full_model_gradcheck() {
        let cfg = HourglassConfig::miniature();
        let mut m = HourglassModel::<f64>::build(&cfg, 5).unwrap();
        m.jitter(0.05, 1);
        let net = m.network().clone();
        let r = gradcheck(&FlatNetwork { network: &net }, m.params_mut(), &random_voxels(8, 3), 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = HourglassConfig { batchnorm: true, ..HourglassConfig::miniature() };
        let m = HourglassModel::<f32>::build(&cfg, 5).unwrap();
        let x = random_voxels(8, 4).cast::<f32>();
        assert_eq!(m.predict(&x).unwrap(), m.predict(&x).unwrap());
    }

    #[test]
    fn receptive_field_probe() {
        let cfg = HourglassConfig {
            input_res: 64,
            output_res: 32,
            stacks: 1,
            channels: 2,
            hg_depth: 1,
            joints: 1,
            bones: 0,
            bone_heads_enabled: false,
            batchnorm: false,
        };
        let mut m = HourglassModel::<f64>::build(&cfg, 0).unwrap();
        m.jitter(0.05, 2);
        let mut x = Tensor::<f64>::zeros(&[1, 64, 64, 64]);
        x.values_mut()[0] = 1.0;
        let base = m.predict(&x).unwrap().joints.remove(0);
        // Grow the occupied neighbourhood of the corner voxel.
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    let o = x.offset(&[0, i, j, k]);
                    x.values_mut()[o] = 1.0;
                }
            }
        }
        let probed = m.predict(&x).unwrap().joints.remove(0);
        let radius = cfg.receptive_radius(0);
        assert!(radius < 32);
        let mut changed_inside = false;
        for (f, (a, b)) in base.values().iter().zip(probed.values()).enumerate() {
            let idx = base.unravel(f);
            let cheb = idx[1].max(idx[2]).max(idx[3]);
            if cheb > radius {
                assert_eq!(a, b, "voxel {idx:?} outside radius {radius} changed");
            } else if a != b {
                changed_inside = true;
            }
        }
        assert!(changed_inside);
    }

    #[test]
    fn backward_without_state_is_state_error() {
        let cfg = HourglassConfig::miniature();
        let mut m = HourglassModel::<f64>::build(&cfg, 0).unwrap();
        let g = OutputGrads::default();
        assert!(matches!(m.backward_stored(&g), Err(Error::State(_))));
        m.forward_train(&random_voxels(8, 2)).unwrap();
        m.backward_stored(&g).unwrap();
        assert!(matches!(m.backward_stored(&g), Err(Error::State(_))));
        let (_, eval) = m.forward(&random_voxels(8, 2), Mode::Eval).unwrap();
        assert!(matches!(m.backward(eval, &g), Err(Error::State(_))));
    }

    #[test]
    fn backward_checks_grad_shapes() {
        let cfg = HourglassConfig::miniature();
        let mut m = HourglassModel::<f64>::build(&cfg, 0).unwrap();
        let (_, pending) = m.forward(&random_voxels(8, 2), Mode::Train).unwrap();
        let grads = OutputGrads {
            joints: vec![Some(Tensor::zeros(&[1, 3, 4, 4, 4]))],
            bones: vec![],
        };
        assert!(m.backward(pending, &grads).is_err());
    }
}
