//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it is an
//! independent oracle for the backward kernels on the tape.
//!
//! Entries where the perturbation straddles a ReLU (or bilinear) kink have no
//! meaningful central difference. They are detected by comparing the
//! estimates at `step` and `step / 2`, which agree to O(step^2) on smooth
//! stretches, and are counted in `skipped` instead of being scored.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::network::{Binder, NetworkWeights};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over the checked entries.
    pub rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Up to `max` distinct indices into `0..len`, sorted; all of them when `len <= max`.
pub fn sample_indices(len: usize, max: usize, seed: u64) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = sample(&mut rng, len, max).into_vec();
    v.sort_unstable();
    v
}

/// Central differences of `f` at `x` for the given flat indices.
pub fn central_difference(x: &Tensor, indices: &[usize], step: f64, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut xp = x.clone();
    indices.iter().map(|&i| central_at(&mut xp, i, step, &mut f)).collect()
}

fn central_at(xp: &mut Tensor, i: usize, step: f64, f: &mut impl FnMut(&Tensor) -> f64) -> f64 {
    let orig = xp.data()[i];
    xp.data_mut()[i] = orig + step;
    let fp = f(xp);
    xp.data_mut()[i] = orig - step;
    let fm = f(xp);
    xp.data_mut()[i] = orig;
    (fp - fm) / (2.0 * step)
}

/// Central differences that drop entries sitting on a kink.
/// Returns `(index, estimate)` for the kept entries.
pub fn smooth_central_difference(
    x: &Tensor,
    indices: &[usize],
    step: f64,
    mut f: impl FnMut(&Tensor) -> f64,
) -> Vec<(usize, f64)> {
    let mut xp = x.clone();
    indices
        .iter()
        .filter_map(|&i| {
            let d1 = central_at(&mut xp, i, step, &mut f);
            let d2 = central_at(&mut xp, i, step / 2.0, &mut f);
            let tol = 1e-6 * d1.abs().max(d2.abs()) + 1e-9;
            ((d1 - d2).abs() <= tol).then_some((i, d1))
        })
        .collect()
}

fn score(name: String, analytic: &Tensor, idx: &[usize], kept: &[(usize, f64)]) -> GradCheck {
    let a: Vec<f64> = kept.iter().map(|&(i, _)| analytic.data()[i]).collect();
    let n: Vec<f64> = kept.iter().map(|&(_, d)| d).collect();
    GradCheck {
        name,
        rel_err: relative_error(&a, &n),
        checked: kept.len(),
        skipped: idx.len() - kept.len(),
    }
}

/// Check gradients of a scalar built by `build` with respect to every
/// parameter tensor in `weights` and every tensor in `inputs`.
///
/// `build` receives a tape, a trainable binder over the weights and the
/// input variables, and returns the scalar to differentiate.
pub fn check_model<F>(
    weights: &NetworkWeights,
    inputs: &[Tensor],
    step: f64,
    max_per_tensor: usize,
    build: F,
) -> Vec<GradCheck>
where
    F: Fn(&mut Tape, &mut Binder<'_, Var>, &[Var]) -> Var,
{
    let eval = |w: &NetworkWeights, xs: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let mut p = Binder::trainable(w);
        let vars: Vec<Var> = xs.iter().map(|x| t.variable(x.clone())).collect();
        let s = build(&mut t, &mut p, &vars);
        t.scalar(s)
    };

    let mut t = Tape::new();
    let mut p = Binder::trainable(weights);
    let vars: Vec<Var> = inputs.iter().map(|x| t.variable(x.clone())).collect();
    let root = build(&mut t, &mut p, &vars);
    let grads = t.backward(root);
    let pgrads = p.collect(&grads);

    let mut out = Vec::new();
    for (k, ((name, w), g)) in weights.iter().zip(&pgrads).enumerate() {
        let idx = sample_indices(w.len(), max_per_tensor, k as u64);
        let mut ws = weights.clone();
        let kept = smooth_central_difference(w, &idx, step, |wp| {
            *ws.by_name_mut(name).expect("weight name") = wp.clone();
            eval(&ws, inputs)
        });
        out.push(score(name.to_string(), g, &idx, &kept));
    }
    for (k, (x, v)) in inputs.iter().zip(&vars).enumerate() {
        let g = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let idx = sample_indices(x.len(), max_per_tensor, 1000 + k as u64);
        let mut xs = inputs.to_vec();
        let kept = smooth_central_difference(x, &idx, step, |xp| {
            xs[k] = xp.clone();
            eval(weights, &xs)
        });
        out.push(score(format!("input.{k}"), &g, &idx, &kept));
    }
    out
}

/// Largest relative error in a report, with the offending entry.
pub fn worst(report: &[GradCheck]) -> Option<&GradCheck> {
    report.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
}

/// Fraction of sampled entries dropped as kinks.
pub fn skipped_fraction(report: &[GradCheck]) -> f64 {
    let skipped: usize = report.iter().map(|r| r.skipped).sum();
    let total: usize = report.iter().map(|r| r.skipped + r.checked).sum();
    if total == 0 {
        0.0
    } else {
        skipped as f64 / total as f64
    }
}
