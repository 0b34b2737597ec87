//! Central-difference gradient checking against the autograd tape.
//!
//! The finite-difference side only ever evaluates the forward pass; it never
//! reads a gradient from the tape, so it is an independent check.

use crate::autograd::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub numeric_norm: f64,
    pub entries_checked: usize,
}

fn compare(analytic: &[f64], numeric: &[f64]) -> GradCheckReport {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let an = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = an.max(nn).max(1e-300);
    let max_abs = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    GradCheckReport {
        max_rel_err: if an == 0.0 && nn == 0.0 { 0.0 } else { diff / denom },
        max_abs_err: max_abs,
        numeric_norm: nn,
        entries_checked: analytic.len(),
    }
}

/// Check d(loss)/d(input) where the loss is built by `build` from an input
/// leaf.
pub fn check_input_gradient<F>(input: &Tensor, step: f64, build: F) -> GradCheckReport
where
    F: Fn(&mut Graph, Var) -> Var,
{
    let store = ParamStore::default();
    let mut g = Graph::new(&store);
    let x = g.input_with_grad(input.clone());
    let loss = build(&mut g, x);
    g.backward(loss);
    let analytic = g
        .grad(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(input.rows(), input.cols()));

    let eval = |t: Tensor| {
        let mut g = Graph::new(&store);
        let x = g.constant(t);
        let l = build(&mut g, x);
        g.scalar(l)
    };
    let mut numeric = vec![0.0; input.len()];
    for (i, n) in numeric.iter_mut().enumerate() {
        let mut plus = input.clone();
        plus.data_mut()[i] += step;
        let mut minus = input.clone();
        minus.data_mut()[i] -= step;
        *n = (eval(plus) - eval(minus)) / (2.0 * step);
    }
    compare(analytic.data(), &numeric)
}

/// Check d(loss)/d(param) for one parameter tensor of `store`.
///
/// At most `max_entries` evenly spaced entries are perturbed.
pub fn check_param_gradient<F>(
    store: &ParamStore,
    param: ParamId,
    step: f64,
    max_entries: usize,
    build: F,
) -> GradCheckReport
where
    F: Fn(&mut Graph) -> Var,
{
    let mut g = Graph::new(store);
    let loss = build(&mut g);
    g.backward(loss);
    let total = store.value(param).len();
    let analytic_full = g
        .param_grads()
        .into_iter()
        .find(|(id, _)| *id == param)
        .map(|(_, t)| t)
        .unwrap_or_else(|| {
            let v = store.value(param);
            Tensor::zeros(v.rows(), v.cols())
        });

    let stride = (total / max_entries.max(1)).max(1);
    let picks: Vec<usize> = (0..total).step_by(stride).take(max_entries).collect();
    let mut work = store.clone();
    let mut eval_at = |idx: usize, delta: f64| {
        let orig = store.value(param).data()[idx];
        work.value_mut(param).data_mut()[idx] = orig + delta;
        let mut g = Graph::new(&work);
        let l = build(&mut g);
        let v = g.scalar(l);
        work.value_mut(param).data_mut()[idx] = orig;
        v
    };
    let mut analytic = Vec::with_capacity(picks.len());
    let mut numeric = Vec::with_capacity(picks.len());
    for &i in &picks {
        let n = (eval_at(i, step) - eval_at(i, -step)) / (2.0 * step);
        numeric.push(n);
        analytic.push(analytic_full.data()[i]);
    }
    compare(&analytic, &numeric)
}
