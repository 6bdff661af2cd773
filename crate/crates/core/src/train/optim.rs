use std::collections::BTreeMap;
use std::path::Path;

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::hourglass::checkpoint::{Container, Entry};
use crate::tensor::{LayerParams, Real, Tensor};

/// Per-parameter mean-square accumulators plus loop position.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsState<T> {
    /// `(name, accumulator)` for each trainable parameter, in store order.
    pub accumulators: Vec<(String, Vec<T>)>,
    /// Optimizer steps taken so far.
    pub step: u64,
}

impl<T: Real> RmsState<T> {
    pub fn new(params: &LayerParams<T>) -> Self {
        let accumulators = params
            .trainable_ids()
            .map(|id| (params.name(id).to_string(), vec![T::zero(); params.get(id).len()]))
            .collect();
        RmsState { accumulators, step: 0 }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), "rmsprop".to_string());
        meta.insert("step".to_string(), self.step.to_string());
        let entries = self
            .accumulators
            .iter()
            .map(|(name, v)| Entry {
                name: name.clone(),
                trainable: false,
                tensor: Tensor::from_vec(&[v.len()], v.clone()).expect("non-empty accumulator"),
            })
            .collect();
        Container { meta, entries }.write(path)
    }

    /// Loads accumulators for `params`, checking names and sizes.
    pub fn load(path: &Path, params: &LayerParams<T>) -> Result<Self> {
        let c = Container::<T>::read(path)?;
        let corrupt = |m: String| Error::CorruptCheckpoint(m);
        if c.meta.get("kind").map(String::as_str) != Some("rmsprop") {
            return Err(corrupt("not an optimizer-state file".into()));
        }
        let step = c
            .meta
            .get("step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt("optimizer state is missing `step`".into()))?;
        let fresh = RmsState::new(params);
        if fresh.accumulators.len() != c.entries.len() {
            return Err(corrupt(format!(
                "{} accumulators stored, model has {} trainable tensors",
                c.entries.len(),
                fresh.accumulators.len()
            )));
        }
        let mut accumulators = Vec::with_capacity(c.entries.len());
        for ((name, v), e) in fresh.accumulators.iter().zip(c.entries) {
            if *name != e.name || v.len() != e.tensor.len() {
                return Err(corrupt(format!("accumulator `{}` does not match `{name}`", e.name)));
            }
            accumulators.push((e.name, e.tensor.into_values()));
        }
        Ok(RmsState { accumulators, step })
    }
}

/// `v ← α·v + (1−α)·g²`, `p ← p − lr·g / (√v + ε)`, then zeroes every gradient.
///
/// All gradients are checked for finiteness before anything is modified.
pub fn rmsprop_step<T: Real>(params: &mut LayerParams<T>, state: &mut RmsState<T>, lr: f64, cfg: &TrainConfig) -> Result<()> {
    let ids: Vec<_> = params.trainable_ids().collect();
    if ids.len() != state.accumulators.len() {
        return Err(Error::State("optimizer state does not match the parameter set".into()));
    }
    for &id in &ids {
        if let Some(g) = params.get(id).grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    name: params.name(id).to_string(),
                });
            }
        }
    }
    let alpha = T::of(cfg.rmsprop_alpha);
    let keep = T::of(1.0 - cfg.rmsprop_alpha);
    let eps = T::of(cfg.rmsprop_eps);
    let lr = T::of(lr);
    for (&id, (_, acc)) in ids.iter().zip(state.accumulators.iter_mut()) {
        let t = params.get_mut(id);
        let (values, grad) = t.split_grad_mut();
        for ((p, v), g) in values.iter_mut().zip(acc.iter_mut()).zip(grad.iter_mut()) {
            *v = alpha * *v + keep * *g * *g;
            *p -= lr * *g / (v.sqrt() + eps);
            *g = T::zero();
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                name: format!("{}[{bad}]", params.name(id)),
            });
        }
    }
    state.step += 1;
    Ok(())
}

/// `lr_init · decay_factor^⌊epoch / decay_every⌋`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr_init * cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_every_epochs.max(1)) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(p: f64, g: f64) -> LayerParams<f64> {
        let mut params = LayerParams::new();
        let id = params.insert("p", Tensor::from_vec(&[1], vec![p]).unwrap()).unwrap();
        params.accumulate(id, &[g]);
        params
    }

    #[test]
    fn zero_gradient_is_noop_and_decays_v() {
        let cfg = TrainConfig::default();
        let mut params = scalar_params(0.7, 0.0);
        let mut st = RmsState::new(&params);
        st.accumulators[0].1[0] = 2.0;
        rmsprop_step(&mut params, &mut st, 1e-3, &cfg).unwrap();
        assert_eq!(params.by_name("p").unwrap().values(), &[0.7]);
        assert_eq!(st.accumulators[0].1[0], 0.99 * 2.0);
    }

    #[test]
    fn hand_computed_single_step() {
        let cfg = TrainConfig::default();
        let mut params = scalar_params(0.0, 1.0);
        let mut st = RmsState::new(&params);
        rmsprop_step(&mut params, &mut st, 1e-5, &cfg).unwrap();
        let expected = -1e-5 * 1.0 / (0.01f64.sqrt() + 1e-8);
        let got = params.by_name("p").unwrap().values()[0];
        assert!((got - expected).abs() <= 1e-12 * expected.abs(), "{got} vs {expected}");
        assert_eq!(params.by_name("p").unwrap().grad().unwrap(), &[0.0]);
    }

    #[test]
    fn descends_on_quadratic() {
        let cfg = TrainConfig::default();
        let mut params = scalar_params(1.0, 0.0);
        let mut st = RmsState::new(&params);
        let id = params.id("p").unwrap();
        let mut prev = 1.0f64;
        for _ in 0..200 {
            let p = params.get(id).values()[0];
            params.accumulate(id, &[2.0 * p]);
            rmsprop_step(&mut params, &mut st, 1e-3, &cfg).unwrap();
            let now = params.get(id).values()[0].abs();
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let cfg = TrainConfig::default();
        let mut params = scalar_params(0.0, f64::NAN);
        let mut st = RmsState::new(&params);
        match rmsprop_step(&mut params, &mut st, 1e-5, &cfg) {
            Err(Error::Divergence { name }) => assert_eq!(name, "p"),
            other => panic!("{other:?}"),
        }
        assert_eq!(params.by_name("p").unwrap().values(), &[0.0]);
    }

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 1e-5);
        assert_eq!(lr_schedule(4, &cfg), 1e-5);
        assert!((lr_schedule(5, &cfg) - 3e-6).abs() < 1e-18);
        assert!((lr_schedule(19, &cfg) - 1e-5 * 0.3f64.powi(3)).abs() < 1e-18);
    }

    #[test]
    fn state_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("opt.state");
        let params = scalar_params(0.0, 1.0);
        let mut st = RmsState::new(&params);
        st.accumulators[0].1[0] = 0.125;
        st.step = 17;
        st.save(&path).unwrap();
        assert_eq!(RmsState::load(&path, &params).unwrap(), st);
        let mut other = LayerParams::<f64>::new();
        other.insert("q", Tensor::zeros(&[1])).unwrap();
        assert!(RmsState::load(&path, &other).is_err());
    }
}
