//! Squared-error losses over every supervised stack.

use crate::error::{Error, Result};
use crate::hourglass::{OutputGrads, Outputs};
use crate::tensor::{Real, Tensor};

fn batch_size(t: &Tensor<impl Real>) -> usize {
    if t.shape().len() == 5 {
        t.shape()[0]
    } else {
        1
    }
}

/// `Σ_stacks Σ_channels Σ_voxels (pred − target)²`, averaged over the batch.
fn stacked_sum<T: Real>(preds: &[Tensor<T>], target: &Tensor<T>, what: &str) -> Result<f64> {
    let n = batch_size(target) as f64;
    let mut total = 0.0;
    for (s, p) in preds.iter().enumerate() {
        if p.shape() != target.shape() {
            return Err(Error::dim(format!(
                "{what} stack {s}: prediction {:?} vs target {:?}",
                p.shape(),
                target.shape()
            )));
        }
        total += crate::tensor::mse_sum(p, target)?;
    }
    Ok(total / n)
}

fn stacked_grad<T: Real>(preds: &[Tensor<T>], target: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
    let scale = T::of(2.0 / batch_size(target) as f64);
    preds
        .iter()
        .map(|p| {
            let vals = p
                .values()
                .iter()
                .zip(target.values())
                .map(|(&a, &b)| scale * (a - b))
                .collect();
            Some(Tensor::from_vec(p.shape(), vals).expect("same shape as prediction"))
        })
        .collect()
}

/// Joint loss over all stacks.
pub fn loss_joints<T: Real>(preds: &[Tensor<T>], target: &Tensor<T>) -> Result<f64> {
    stacked_sum(preds, target, "joint")
}

/// Bone loss; `preds` holds one entry per stack that carries a bone head.
pub fn loss_bones<T: Real>(preds: &[Tensor<T>], target: &Tensor<T>) -> Result<f64> {
    stacked_sum(preds, target, "bone")
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub joints: f64,
    pub bones: f64,
    pub total: f64,
}

/// Both losses and the cotangents of their sum. With `bone_loss` off the
/// bone term is zero and no gradient is sent to the bone heads.
pub fn total_loss<T: Real>(
    out: &Outputs<T>,
    joint_target: &Tensor<T>,
    bone_target: Option<&Tensor<T>>,
) -> Result<(LossBreakdown, OutputGrads<T>)> {
    let joints = loss_joints(&out.joints, joint_target)?;
    let mut grads = OutputGrads {
        joints: stacked_grad(&out.joints, joint_target),
        bones: Vec::new(),
    };
    let bones = match bone_target {
        Some(t) => {
            grads.bones = stacked_grad(&out.bones, t);
            loss_bones(&out.bones, t)?
        }
        None => 0.0,
    };
    Ok((
        LossBreakdown {
            joints,
            bones,
            total: joints + bones,
        },
        grads,
    ))
}
