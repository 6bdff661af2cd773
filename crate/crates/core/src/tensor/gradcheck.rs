use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LayerParams, Real, Tensor};
use crate::error::Result;

/// A deterministic differentiable map with parameters held in a [`LayerParams`] store.
///
/// `backward` accumulates parameter gradients into the store and returns the
/// gradient with respect to the input.
pub trait Layer<T: Real> {
    type Ctx;

    fn forward(&self, params: &LayerParams<T>, input: &Tensor<T>) -> Result<(Tensor<T>, Self::Ctx)>;

    fn backward(
        &self,
        params: &mut LayerParams<T>,
        ctx: &Self::Ctx,
        grad_out: &Tensor<T>,
    ) -> Result<Tensor<T>>;
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Where the worst entry was found (`"input"` or a parameter name) and its flat index.
    pub worst: (String, usize),
    pub entries_checked: usize,
}

const REL_FLOOR: f64 = 1e-6;

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares analytic gradients against central differences
/// `(f(x+ε) − f(x−ε)) / 2ε` over every input entry and every trainable
/// parameter entry. The scalar objective is a fixed random projection of the
/// layer output.
pub fn gradcheck<T: Real, L: Layer<T>>(
    layer: &L,
    params: &mut LayerParams<T>,
    input: &Tensor<T>,
    epsilon: f64,
) -> Result<GradcheckReport> {
    let (out, ctx) = layer.forward(params, input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_f00d);
    let proj: Vec<T> = (0..out.len()).map(|_| T::of(rng.random_range(-1.0..1.0))).collect();
    let proj_t = Tensor::from_vec(out.shape(), proj.clone())?;

    params.zero_grads();
    let grad_in = layer.backward(params, &ctx, &proj_t)?;

    let objective = |params: &LayerParams<T>, x: &Tensor<T>| -> Result<f64> {
        let (y, _) = layer.forward(params, x)?;
        Ok(y.values().iter().zip(&proj).map(|(a, b)| a.wide() * b.wide()).sum())
    };
    let eps = T::of(epsilon);

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: (String::from("input"), 0),
        entries_checked: 0,
    };
    let note = |report: &mut GradcheckReport, what: &str, i: usize, a: f64, n: f64| {
        let e = rel_error(a, n);
        report.entries_checked += 1;
        if e > report.max_rel_error || !e.is_finite() {
            report.max_rel_error = if e.is_finite() { e } else { f64::INFINITY };
            report.worst = (what.to_string(), i);
        }
    };

    let mut x = input.clone();
    for i in 0..x.len() {
        let orig = x.values()[i];
        x.values_mut()[i] = orig + eps;
        let fp = objective(params, &x)?;
        x.values_mut()[i] = orig - eps;
        let fm = objective(params, &x)?;
        x.values_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * epsilon);
        note(&mut report, "input", i, grad_in.values()[i].wide(), numeric);
    }

    let ids: Vec<_> = params.trainable_ids().collect();
    for id in ids {
        let name = params.name(id).to_string();
        let analytic: Vec<f64> = params
            .get(id)
            .grad()
            .map(|g| g.iter().map(|v| v.wide()).collect())
            .unwrap_or_else(|| vec![0.0; params.get(id).len()]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = params.get(id).values()[i];
            params.get_mut(id).values_mut()[i] = orig + eps;
            let fp = objective(params, input)?;
            params.get_mut(id).values_mut()[i] = orig - eps;
            let fm = objective(params, input)?;
            params.get_mut(id).values_mut()[i] = orig;
            note(&mut report, &name, i, a, (fp - fm) / (2.0 * epsilon));
        }
    }
    Ok(report)
}
