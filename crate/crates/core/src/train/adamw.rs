use crate::config::OptimConfig;
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Adam with decoupled weight decay and bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Completed update count.
    pub t: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(params: &ParamStore<F>, cfg: &OptimConfig) -> Self {
        let zeros: Vec<Tensor<F>> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update. `grads[i]` is the gradient of parameter `i`, or
    /// `None` when the parameter took no part in the loss; such parameters
    /// are left untouched, moments included.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &[Option<Tensor<F>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        if !(lr >= 0.0) {
            return Err(Error::Contract(format!("learning rate {lr} must be non-negative")));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                let p = params.by_index(i);
                if g.shape() != p.value.shape() {
                    return Err(Error::shape(
                        "adamw",
                        format!("gradient {:?} for {} {:?}", g.shape(), p.name, p.value.shape()),
                    ));
                }
                if !g.is_finite() {
                    return Err(Error::Numerical(format!("non-finite gradient for {}", p.name)));
                }
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let (one_b1, one_b2) = (F::of(1.0 - self.beta1), F::of(1.0 - self.beta2));
        let c1 = F::of(1.0 - self.beta1.powi(t));
        let c2 = F::of(1.0 - self.beta2.powi(t));
        let eps = F::of(self.eps);
        let lr_f = F::of(lr);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = params.by_index_mut(i);
            let shrink = F::of(if p.decay { 1.0 - lr * self.weight_decay } else { 1.0 });
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &gj), mj), vj) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mj = b1 * *mj + one_b1 * gj;
                *vj = b2 * *vj + one_b2 * gj * gj;
                let mhat = *mj / c1;
                let vhat = *vj / c2;
                *w = *w * shrink - lr_f * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm<F: Scalar>(grads: &mut [Option<Tensor<F>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter().map(|v| v.f64() * v.f64()))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = F::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
