//! Central finite-difference gradient verification.

use crate::error::{NumError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(NumError::Invalid(format!(
            "grad_check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Max over coordinates of `|analytic − numeric| / max(1, |analytic|)` for a
/// scalar function of one input tensor.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |p: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(p, false);
        let y = f(&mut tape, x)?;
        scalar_of(&tape, y)
    };
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let y = f(&mut tape, x)?;
    scalar_of(&tape, y)?;
    let grads = tape.backward(y)?;
    let zeros = vec![0.0; point.len()];
    let analytic = grads.get(x).unwrap_or(&zeros).to_vec();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let (fp, fm) = (eval(plus)?, eval(minus)?);
        if !fp.is_finite() || !fm.is_finite() {
            return Err(NumError::NonFinite(i));
        }
        worst = worst.max(rel_err(a, (fp - fm) / (2.0 * eps)));
    }
    Ok(worst)
}

/// Same measure over selected `(parameter, flat index)` coordinates of a store.
pub fn grad_check_params<F>(store: &mut ParamStore, coords: &[(ParamId, usize)], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let y = f(&mut tape, store)?;
    scalar_of(&tape, y)?;
    let grads = tape.backward(y)?;
    let pg = tape.param_grads(&grads);
    let mut worst: f64 = 0.0;
    for (n, &(id, i)) in coords.iter().enumerate() {
        let analytic = pg.get(id).map_or(0.0, |g| g[i]);
        let orig = store.get(id).data()[i];
        let mut eval_at = |v: f64| -> Result<f64> {
            store.get_mut(id).data_mut()[i] = v;
            let mut t = Tape::new();
            let y = f(&mut t, store)?;
            scalar_of(&t, y)
        };
        let fp = eval_at(orig + eps);
        let fm = eval_at(orig - eps);
        store.get_mut(id).data_mut()[i] = orig;
        let (fp, fm) = (fp?, fm?);
        if !fp.is_finite() || !fm.is_finite() {
            return Err(NumError::NonFinite(n));
        }
        worst = worst.max(rel_err(analytic, (fp - fm) / (2.0 * eps)));
    }
    Ok(worst)
}
