//! Finite-difference checks of the full training loss at 64-bit precision.

use std::time::{Duration, Instant};

use crate::config::{LossConfig, ModelConfig, ReconSpace};
use crate::data::{generate_corpus, make_batch, BatchMode, Corpus, SyntheticSpec, Tokenizer};
use crate::error::{Error, Result};
use crate::masking::{sample_mask, MaskPlan};
use crate::model::{BatchInputs, RilsModel};
use crate::objectives::{total_loss, LossOptions};
use crate::rng::derive_rng;
use crate::tensor::{relative_error, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;

/// A tiny 64-bit model with one batch and one set of masks.
pub struct Toy {
    pub model: RilsModel<f64>,
    pub inputs: BatchInputs<f64>,
    pub plans: Vec<MaskPlan>,
    pub loss: LossConfig,
    /// Matched set at the unperturbed point, held fixed under perturbation.
    pub matched: Vec<usize>,
}

/// One block per tower, `D_v = D_t = 16`, `D_e = 8`, 16×16 images in
/// 4-pixel patches (`N = 16`).
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch_size: 4,
        vision_width: 16,
        vision_depth: 1,
        vision_heads: 2,
        decoder_depth: 1,
        decoder_heads: 2,
        text_width: 16,
        text_depth: 1,
        text_heads: 2,
        embed_dim: 8,
        max_len: 8,
        prototypes: 8,
        ..ModelConfig::default()
    }
}

impl Toy {
    /// Builds a batch of `b` synthetic pairs and initializes the model,
    /// moving to the next model seed until at least `min_matched` images are
    /// matched.
    pub fn new(loss: LossConfig, b: usize, seed: u64, min_matched: usize) -> Result<Self> {
        let cfg = toy_model_config();
        let spec = SyntheticSpec::default().with_canvas(cfg.image_size).with_seed(seed);
        let tok = spec.tokenizer(cfg.max_len);
        let corpus = Corpus::from_pairs(generate_corpus(&spec, b)?);
        let idx: Vec<usize> = (0..b).collect();
        let batch = make_batch(&corpus, &idx, &tok, BatchMode::Eval)?;
        let inputs = BatchInputs::from_batch(&batch, cfg.patch_size)?;
        let mut rng = derive_rng(seed, &[0x6D61]);
        let plans = (0..b)
            .map(|_| sample_mask(cfg.n_patches(), loss.mask_ratio, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        for attempt in 0..64 {
            let model = RilsModel::init(&cfg, tok.vocab_size(), loss.space, seed + attempt);
            let mut fwd = model.forward(false);
            let out = total_loss(&mut fwd, &inputs, &plans, &loss, &LossOptions::default())?;
            let matched = out.trace.matched;
            drop(fwd);
            if matched.len() >= min_matched {
                return Ok(Self {
                    model,
                    inputs,
                    plans,
                    loss,
                    matched,
                });
            }
        }
        Err(Error::Numerical(format!("no model seed gives {min_matched} matched images")))
    }

    fn options(&self, targets: Option<Tensor<f64>>) -> LossOptions<f64> {
        LossOptions {
            targets,
            matched: Some(self.matched.clone()),
        }
    }

    fn value(&self, model: &RilsModel<f64>, targets: Option<&Tensor<f64>>) -> Result<f64> {
        let mut fwd = model.forward(false);
        let out = total_loss(&mut fwd, &self.inputs, &self.plans, &self.loss, &self.options(targets.cloned()))?;
        Ok(out.breakdown.l_total)
    }

    /// Reverse-mode gradients of every loaded parameter, by parameter index.
    pub fn analytic(&self) -> Result<Vec<(usize, Vec<f64>)>> {
        let mut fwd = self.model.forward(true);
        let out = total_loss(&mut fwd, &self.inputs, &self.plans, &self.loss, &self.options(None))?;
        let g = fwd.tape.backward(out.total)?;
        Ok(fwd
            .loaded_params()
            .into_iter()
            .map(|(i, v)| (i, g.tensor(v).into_data()))
            .collect())
    }

    /// Soft-reconstruction targets at the unperturbed point, if the loss has
    /// any.
    pub fn targets(&self) -> Result<Option<Tensor<f64>>> {
        let mut fwd = self.model.forward(false);
        let out = total_loss(&mut fwd, &self.inputs, &self.plans, &self.loss, &self.options(None))?;
        Ok(out.trace.soft.map(|s| fwd.tape.value(s.target).clone()))
    }

    /// Central difference of the loss along one parameter coordinate.
    pub fn numeric(&self, param: usize, coord: usize, h: f64, targets: Option<&Tensor<f64>>) -> Result<f64> {
        let mut m = self.model.clone();
        let x0 = m.params.by_index(param).value.data()[coord];
        m.params.by_index_mut(param).value.data_mut()[coord] = x0 + h;
        let fp = self.value(&m, targets)?;
        m.params.by_index_mut(param).value.data_mut()[coord] = x0 - h;
        let fm = self.value(&m, targets)?;
        Ok((fp - fm) / (2.0 * h))
    }
}

#[derive(Clone, Debug)]
pub struct ParamError {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub coordinates: usize,
    pub matched: usize,
    pub per_param: Vec<ParamError>,
    pub elapsed: Duration,
}

/// Compares reverse-mode gradients of the total loss with central
/// differences over every coordinate of every parameter the loss touches.
///
/// The soft targets sit behind a stop-gradient, so the differenced function
/// holds them at their unperturbed values, as it does the matched set.
pub fn gradcheck_total_loss(toy: &Toy, h: f64) -> Result<GradcheckReport> {
    let start = Instant::now();
    let targets = toy.targets()?;
    let analytic = toy.analytic()?;
    let mut per_param = Vec::with_capacity(analytic.len());
    let mut worst = (0.0f64, String::new());
    let mut coordinates = 0;
    for (i, grad) in &analytic {
        let name = toy.model.params.by_index(*i).name.clone();
        let mut max = 0.0f64;
        for (k, &a) in grad.iter().enumerate() {
            let n = toy.numeric(*i, k, h, targets.as_ref())?;
            let e = relative_error(a, n);
            if !e.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient at {name}[{k}]")));
            }
            if e > worst.0 {
                worst = (e, format!("{name}[{k}]"));
            }
            max = max.max(e);
        }
        coordinates += grad.len();
        per_param.push(ParamError {
            name,
            coordinates: grad.len(),
            max_rel_error: max,
        });
    }
    Ok(GradcheckReport {
        max_rel_error: worst.0,
        worst: worst.1,
        coordinates,
        matched: toy.matched.len(),
        per_param,
        elapsed: start.elapsed(),
    })
}

#[derive(Clone, Debug)]
pub struct StopGradientReport {
    /// Whether the full-image patch projections received no gradient.
    pub target_branch_detached: bool,
    /// Max relative error between the gradient of the real loss and central
    /// differences of the loss with targets frozen at the unperturbed point.
    pub frozen_max_rel_error: f64,
    /// Max relative gap between the real-loss gradient and central
    /// differences of the loss with live targets, on the same coordinates.
    pub live_max_rel_gap: f64,
    pub coordinates: usize,
}

/// Path-ablation check of the stop-gradient on the soft targets.
///
/// Differentiating the real loss must agree with finite differences of the
/// loss whose targets are frozen constants, and must disagree with finite
/// differences that let the targets move, on parameters that feed both
/// branches.
pub fn stop_gradient_check(toy: &Toy, h: f64, params: &[&str]) -> Result<StopGradientReport> {
    let targets = toy
        .targets()?
        .ok_or_else(|| Error::Contract("configuration has no soft reconstruction".into()))?;
    let mut fwd = toy.model.forward(true);
    let out = total_loss(&mut fwd, &toy.inputs, &toy.plans, &toy.loss, &toy.options(None))?;
    let g = fwd.tape.backward(out.total)?;
    let target_branch_detached = g.get(out.trace.encoded.patch_proj).is_none();
    let analytic: Vec<(usize, Vec<f64>)> = params
        .iter()
        .map(|name| {
            let v = fwd.param(name)?;
            let i = toy.model.params.index_of(name).expect("loaded above");
            Ok((i, g.tensor(v).into_data()))
        })
        .collect::<Result<_>>()?;
    drop(fwd);

    let mut frozen = 0.0f64;
    let mut live = 0.0f64;
    let mut coordinates = 0;
    for (i, grad) in &analytic {
        for (k, &a) in grad.iter().enumerate() {
            frozen = frozen.max(relative_error(a, toy.numeric(*i, k, h, Some(&targets))?));
            live = live.max(relative_error(a, toy.numeric(*i, k, h, None)?));
            coordinates += 1;
        }
    }
    Ok(StopGradientReport {
        target_branch_detached,
        frozen_max_rel_error: frozen,
        live_max_rel_gap: live,
        coordinates,
    })
}

/// The default suite: language space, matched filter on, `B = 4`.
pub fn default_toy(seed: u64) -> Result<Toy> {
    let loss = LossConfig {
        space: ReconSpace::Language,
        matched_filter: true,
        ..LossConfig::default()
    };
    Toy::new(loss, 4, seed, 2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_dimensions() {
        let toy = default_toy(0).unwrap();
        assert_eq!(toy.model.config.n_patches(), 16);
        assert_eq!(toy.inputs.len(), 4);
        assert!(toy.matched.len() >= 2);
    }

    #[test]
    fn numeric_matches_analytic_on_logit_scale() {
        let toy = default_toy(0).unwrap();
        let i = toy.model.params.index_of("logit_scale").unwrap();
        let a = toy.analytic().unwrap().into_iter().find(|(j, _)| *j == i).unwrap().1[0];
        let n = toy.numeric(i, 0, DEFAULT_STEP, None).unwrap();
        assert!(relative_error(a, n) < 1e-6, "{a} vs {n}");
    }
}
