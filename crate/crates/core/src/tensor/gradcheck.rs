use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// max over coordinates of |analytic − numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Relative error used by every gradient check in the crate.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Checks the gradient of the scalar graph built by `f` at `point`.
///
/// `f` receives a fresh tape and the leaf holding the (possibly perturbed)
/// point, and must return a one-element output.
pub fn grad_check<G>(mut f: G, point: &Tensor<f64>, h: f64) -> Result<GradCheck>
where
    G: FnMut(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut eval = |x: Tensor<f64>, want_grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(x, want_grad);
        let out = f(&mut tape, leaf)?;
        let value = tape.value(out).item();
        let grad = if want_grad {
            let g = tape.backward(out)?;
            Some(g.tensor(leaf).into_data())
        } else {
            None
        };
        Ok((value, grad))
    };

    let (base, grad) = eval(point.clone(), true)?;
    if !base.is_finite() {
        return Err(Error::Numerical("non-finite value at the unperturbed point".into()));
    }
    let analytic = grad.unwrap_or_default();
    let mut numeric = Vec::with_capacity(point.numel());
    let mut worst = (0.0, 0);
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let (fp, _) = eval(plus, false)?;
        let (fm, _) = eval(minus, false)?;
        let nd = (fp - fm) / (2.0 * h);
        if !nd.is_finite() || !analytic[i].is_finite() {
            return Err(Error::Numerical(format!("non-finite gradient at coordinate {i}")));
        }
        let err = relative_error(analytic[i], nd);
        if err > worst.0 {
            worst = (err, i);
        }
        numeric.push(nd);
    }
    Ok(GradCheck {
        max_rel_error: worst.0,
        worst_coordinate: worst.1,
        analytic,
        numeric,
    })
}
