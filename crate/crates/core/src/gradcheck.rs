//! Central finite-difference gradient checking.
//!
//! Used by the unit, integration and acceptance tests. The numerical side only
//! ever evaluates forward passes, so it stays independent of the adjoint rules
//! it checks.

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default perturbation.
pub const STEP: f64 = 1e-6;

/// Below this norm a gradient is indistinguishable from zero with a central
/// difference at [`STEP`]: rounding in the forward pass alone contributes about
/// `1e-16 / STEP` per coordinate. Key biases under softmax attention are one
/// example of a gradient that is exactly zero in theory.
pub const ZERO_FLOOR: f64 = 1e-8;

/// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`, or the absolute
/// difference when both norms are below [`ZERO_FLOOR`].
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < ZERO_FLOOR {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Checks `f` with respect to each of `inputs`, returning the worst relative error.
///
/// `f` must build a scalar on the supplied (eval-mode) tape.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map_or_else(|| vec![0.0; t.numel()], |g| g.data().to_vec())
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).item())
    };

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; inputs[i].numel()];
        for (j, n) in numeric.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + STEP;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - STEP;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            *n = (up - down) / (2.0 * STEP);
        }
        worst = worst.max(relative_error(a, &numeric));
    }
    Ok(worst)
}

/// Per-parameter relative errors of `loss(store)` against finite differences.
///
/// `analytic` is the gradient produced by backward for the same store.
pub fn check_params<F>(
    store: &ParamStore,
    analytic: &[Option<Tensor>],
    loss: F,
) -> Result<Vec<(String, f64)>>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    let mut work = store.clone();
    let mut out = Vec::new();
    for id in store.ids() {
        let n = store.get(id).numel();
        let mut numeric = vec![0.0; n];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + STEP;
            let up = loss(&work)?;
            work.get_mut(id).data_mut()[j] = orig - STEP;
            let down = loss(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * STEP);
        }
        let a = analytic[id.index()]
            .as_ref()
            .map_or_else(|| vec![0.0; n], |g| g.data().to_vec());
        out.push((store.name(id).to_string(), relative_error(&a, &numeric)));
    }
    Ok(out)
}

/// Runs `build` once with backward, then checks every parameter of `store`.
pub fn check_store<F>(store: &ParamStore, build: F) -> Result<Vec<(String, f64)>>
where
    F: for<'a> Fn(&'a ParamStore, &mut Tape<'a>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = build(store, &mut tape)?;
    tape.backward(loss)?;
    let analytic = tape.param_grads(store);
    check_params(store, &analytic, |s| {
        let mut t = Tape::new();
        let l = build(s, &mut t)?;
        Ok(t.value(l).item())
    })
}
