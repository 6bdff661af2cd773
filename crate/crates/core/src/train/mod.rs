//! Losses, RMSProp, augmentation, and the epoch loop.

mod augment;
mod loss;
mod optim;

use std::fmt;
use std::sync::mpsc::sync_channel;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use augment::{augment, AugmentConfig, AugmentDraw};
pub use loss::{loss_bones, loss_joints, total_loss, LossBreakdown};
pub use optim::{lr_schedule, rmsprop_step, RmsState};

use crate::error::{Error, Result};
use crate::heatmap::Skeleton;
use crate::hourglass::HourglassModel;
use crate::sample::{prepare, stack_volumes, stack_voxels, PreprocessConfig, Prepared, RawSample, SampleSource};
use crate::tensor::layers::Mode;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every_epochs: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub rmsprop_alpha: f64,
    pub rmsprop_eps: f64,
    pub bone_loss_enabled: bool,
    pub seed: u64,
    /// Stop after this many optimizer steps in total, if set.
    pub max_steps: Option<u64>,
    /// Preprocessing threads; forced to 1 in deterministic mode.
    pub workers: usize,
    /// Prepared batches buffered ahead of the training thread.
    pub queue_depth: usize,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_init: 1e-5,
            lr_decay_factor: 0.3,
            lr_decay_every_epochs: 5,
            batch_size: 16,
            epochs: 20,
            rmsprop_alpha: 0.99,
            rmsprop_eps: 1e-8,
            bone_loss_enabled: true,
            seed: 0,
            max_steps: None,
            workers: 1,
            queue_depth: 2,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init > 0.0) {
            return Err(Error::config(format!("lr_init must be positive, got {}", self.lr_init)));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::config(format!("lr_decay_factor must lie in (0, 1], got {}", self.lr_decay_factor)));
        }
        if self.batch_size == 0 || self.lr_decay_every_epochs == 0 || self.queue_depth == 0 {
            return Err(Error::config("batch_size, lr_decay_every_epochs and queue_depth must be positive"));
        }
        if !(self.rmsprop_alpha >= 0.0 && self.rmsprop_alpha < 1.0) || !(self.rmsprop_eps > 0.0) {
            return Err(Error::config("rmsprop_alpha must lie in [0, 1) and rmsprop_eps must be positive"));
        }
        Ok(())
    }

    fn effective_workers(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.workers.max(1)
        }
    }
}

/// What a training sample becomes before it reaches the model.
#[derive(Clone, Debug)]
pub struct TrainSetup {
    pub skeleton: Skeleton,
    pub preprocess: PreprocessConfig,
    pub augment: AugmentConfig,
}

/// One optimizer step. The losses are per-sample sums averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
}

impl fmt::Display for LossRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} step={} lr={:e} L_j={:e} L_b={:e} L={:e}",
            self.epoch, self.step, self.lr, self.loss.joints, self.loss.bones, self.loss.total
        )
    }
}

impl LossRecord {
    pub fn parse(line: &str) -> Option<Self> {
        let mut fields = std::collections::HashMap::new();
        for kv in line.split_whitespace() {
            let (k, v) = kv.split_once('=')?;
            fields.insert(k, v);
        }
        let f = |k: &str| fields.get(k)?.parse::<f64>().ok();
        Some(LossRecord {
            epoch: fields.get("epoch")?.parse().ok()?,
            step: fields.get("step")?.parse().ok()?,
            lr: f("lr")?,
            loss: LossBreakdown {
                joints: f("L_j")?,
                bones: f("L_b")?,
                total: f("L")?,
            },
        })
    }
}

/// Mean total loss per epoch, in epoch order.
pub fn epoch_means(log: &[LossRecord]) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for r in log {
        match out.last_mut() {
            Some((e, sum, n)) if *e == r.epoch => {
                *sum += r.loss.total;
                *n += 1;
            }
            _ => out.push((r.epoch, r.loss.total, 1)),
        }
    }
    out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a simple combination
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Sample order for `epoch`; a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, 1, epoch as u64)));
    order
}

/// Augments and prepares one sample. A draw that pushes a joint more than a
/// voxel outside the recomputed cube is re-drawn once; if that also fails the
/// sample is used unaugmented.
pub fn prepare_training_sample(
    raw: &RawSample,
    setup: &TrainSetup,
    with_bones: bool,
    seed: u64,
    epoch: usize,
    index: usize,
) -> Result<Prepared> {
    if setup.augment.enabled {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 2 + epoch as u64, index as u64));
        for _ in 0..2 {
            let (cloud, pose, _) = augment(&raw.cloud, &raw.pose, &setup.augment, &mut rng);
            match prepare(&RawSample { cloud, pose }, &setup.skeleton, &setup.preprocess, with_bones) {
                Err(Error::OutOfVolume { .. }) => continue,
                other => return other,
            }
        }
    }
    prepare(raw, &setup.skeleton, &setup.preprocess, with_bones)
}

struct Batch {
    epoch: usize,
    samples: Vec<Prepared>,
}

/// Runs optimizer steps from `state.step` until `cfg.epochs` epochs (or
/// `cfg.max_steps` steps) are complete, calling `on_step` after each one.
///
/// Resuming with the saved model and `state` continues the same trajectory.
pub fn train<T: Real>(
    model: &mut HourglassModel<T>,
    data: &dyn SampleSource,
    setup: &TrainSetup,
    cfg: &TrainConfig,
    state: &mut RmsState<T>,
    on_step: &mut dyn FnMut(&LossRecord) -> Result<()>,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    setup.augment.validate()?;
    let mc = model.config().clone();
    if data.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if setup.preprocess.input_res != mc.input_res || setup.preprocess.output_res != mc.output_res {
        return Err(Error::config("preprocessing resolutions differ from the model's"));
    }
    model.expect_layout(setup.skeleton.joints(), setup.skeleton.bone_count())?;
    let with_bones = cfg.bone_loss_enabled;
    if with_bones && mc.bone_stacks() == 0 && mc.stacks > 1 {
        return Err(Error::config("bone loss enabled but the model has no bone heads"));
    }

    let n = data.len();
    let per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let mut end = per_epoch * cfg.epochs as u64;
    if let Some(m) = cfg.max_steps {
        end = end.min(m);
    }
    let start = state.step;
    if start >= end {
        return Ok(Vec::new());
    }

    let workers = cfg.effective_workers();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("cannot start preprocessing pool: {e}")))?;

    let mut log = Vec::new();
    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel::<Result<Batch>>(cfg.queue_depth);
        scope.spawn(move || {
            let mut order_epoch = usize::MAX;
            let mut order = Vec::new();
            for step in start..end {
                let epoch = (step / per_epoch) as usize;
                if epoch != order_epoch {
                    order = epoch_order(n, cfg.seed, epoch);
                    order_epoch = epoch;
                }
                let b = (step % per_epoch) as usize;
                let ids = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(n)];
                let work = |&i: &usize| data.get(i).and_then(|raw| prepare_training_sample(&raw, setup, with_bones, cfg.seed, epoch, i));
                let samples: Result<Vec<_>> = if workers > 1 {
                    pool.install(|| ids.par_iter().map(work).collect())
                } else {
                    ids.iter().map(work).collect()
                };
                let failed = samples.is_err();
                if tx.send(samples.map(|samples| Batch { epoch, samples })).is_err() || failed {
                    return;
                }
            }
        });

        for step in start..end {
            let batch = rx
                .recv()
                .map_err(|_| Error::State("preprocessing worker stopped early".into()))??;
            let lr = lr_schedule(batch.epoch, cfg);
            let voxels = stack_voxels::<T>(&batch.samples.iter().map(|p| &p.voxels).collect::<Vec<_>>())?;
            let joints = stack_volumes::<T>(&batch.samples.iter().map(|p| &p.joints).collect::<Vec<_>>())?;
            let bones = if with_bones && mc.bone_stacks() > 0 {
                Some(stack_volumes::<T>(&batch.samples.iter().map(|p| &p.bones).collect::<Vec<_>>())?)
            } else {
                None
            };
            let (out, pending) = model.forward(&voxels, Mode::Train)?;
            let (loss, grads) = total_loss(&out, &joints, bones.as_ref())?;
            if !loss.total.is_finite() {
                return Err(Error::Divergence {
                    name: format!(
                        "loss at epoch {} step {} (L_j={}, L_b={})",
                        batch.epoch,
                        step + 1,
                        loss.joints,
                        loss.bones
                    ),
                });
            }
            model.backward(pending, &grads)?;
            rmsprop_step(model.params_mut(), state, lr, cfg)?;
            let record = LossRecord {
                epoch: batch.epoch,
                step: state.step,
                lr,
                loss,
            };
            on_step(&record)?;
            log.push(record);
        }
        Ok(())
    })?;
    Ok(log)
}
