//! Central-difference verification of the backward pass.

use super::{Graph, TensorId};
use crate::error::{Error, Result};
use crate::params::ParamSet;

/// Compares analytic gradients against central finite differences for every
/// element of every tensor in `params`, and returns the worst relative error
/// `|a - n| / max(|a|, |n|, 1e-6)`.
///
/// `f` must be a deterministic function of the bound parameters (no dropout,
/// no RNG) that records a scalar loss on the given graph. It is evaluated
/// once analytically and twice per parameter element numerically.
pub fn grad_check<F>(params: &ParamSet, f: F, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[TensorId]) -> Result<TensorId>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "grad_check step must be positive, got {step}"
        )));
    }

    // Analytic pass.
    let mut g = Graph::new();
    let ids = params.bind(&mut g);
    let loss = f(&mut g, &ids)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|id| grads.get(id).cloned().unwrap_or_default())
        .collect();

    // Numeric passes on a scratch copy.
    let mut scratch = params.clone();
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let ids = p.bind(&mut g);
        let loss = f(&mut g, &ids)?;
        if g.tensor(loss).numel() != 1 {
            return Err(Error::InvalidArgument(
                "grad_check function must produce a scalar".into(),
            ));
        }
        Ok(g.value(loss))
    };

    let mut max_err = 0.0f64;
    // Index-driven on purpose: each probe mutates `scratch` between `eval`
    // calls, so iterator borrows cannot span the loop body.
    #[allow(clippy::needless_range_loop)]
    for ti in 0..scratch.len() {
        for j in 0..scratch.tensors()[ti].data.len() {
            let orig = scratch.tensors()[ti].data[j];
            scratch.tensors_mut()[ti].data[j] = orig + step;
            let lp = eval(&scratch)?;
            scratch.tensors_mut()[ti].data[j] = orig - step;
            let lm = eval(&scratch)?;
            scratch.tensors_mut()[ti].data[j] = orig;

            let numeric = (lp - lm) / (2.0 * step);
            let a = analytic[ti][j];
            // The loss is O(1), so `lp - lm` resolves to about one f64 ulp
            // (~1e-16) and the central difference carries ~1e-16/step of
            // absolute noise regardless of the true gradient. Entries whose
            // gradient sits below this floor are compared absolutely against
            // floor·tolerance instead of drowning the check in quantization
            // noise.
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            let err = (a - numeric).abs() / denom;
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}
