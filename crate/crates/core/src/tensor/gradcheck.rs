//! Central finite-difference check of graph gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

fn evaluate<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.constant(x.clone())?;
    let out = f(&mut g, xv)?;
    let value = g.value(out);
    if value.len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            value.shape()
        )));
    }
    Ok(value.item())
}

/// Max over every coordinate of `|analytic − numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, x: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_at(f, x, epsilon, &coords)
}

/// Same as [`grad_check`] restricted to the listed flat coordinates.
pub fn grad_check_at<F>(f: F, x: &Tensor, epsilon: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::Contract(format!("epsilon must lie in (0, 1e-2], got {epsilon}")));
    }
    let mut g = Graph::new();
    let xv = g.leaf(x.clone().requiring_grad())?;
    let out = f(&mut g, xv)?;
    g.backward(out)?;
    let analytic = g
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let plus = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig - epsilon;
        let minus = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
