//! Contrastive alignment, masked reconstruction in language space (plus the
//! pixel and prototype alternatives) and their weighted total.

use serde::{Deserialize, Serialize};

use crate::config::{LossConfig, ReconSpace};
use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::model::{BatchInputs, DecodedImage, EncodedImage, Forward};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Scalar values of every loss component for one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_contra: f64,
    pub l_recon: f64,
    pub l_total: f64,
    pub matched_fraction: f64,
    pub l_i2t: f64,
    pub l_t2i: f64,
}

/// Contrastive loss variables.
#[derive(Clone, Copy, Debug)]
pub struct Contrastive {
    pub loss: Var,
    pub i2t: Var,
    pub t2i: Var,
    /// `B × B` scaled similarities, image rows against text columns.
    pub logits: Var,
}

fn finite<F: Scalar>(tape: &Tape<F>, v: Var, what: &str) -> Result<()> {
    if !tape.value(v).is_finite() {
        return Err(Error::Numerical(format!("{what} is not finite")));
    }
    Ok(())
}

/// Mean cross-entropy of each row of `logits` against its diagonal entry.
fn diagonal_cross_entropy<F: Scalar>(tape: &mut Tape<F>, logits: Var, b: usize) -> Result<Var> {
    let logp = tape.log_softmax(logits);
    let flat = tape.reshape(logp, &[b * b, 1])?;
    let diag: Vec<usize> = (0..b).map(|i| i * b + i).collect();
    let d = tape.gather_rows(flat, &diag)?;
    let s = tape.sum(d);
    Ok(tape.scale(s, -1.0 / b as f64))
}

/// Symmetric image-text InfoNCE with logits `⟨z^I_i, z^T_j⟩ · inv_sigma`.
/// `inv_sigma` is a one-element variable holding `1/σ`.
pub fn contrastive_loss<F: Scalar>(tape: &mut Tape<F>, zi: Var, zt: Var, inv_sigma: Var) -> Result<Contrastive> {
    let b = tape.value(zi).rows();
    if b == 0 {
        return Err(Error::Contract("contrastive loss needs a non-empty batch".into()));
    }
    if tape.value(zt).rows() != b {
        return Err(Error::shape(
            "contrastive_loss",
            format!("{b} images vs {} texts", tape.value(zt).rows()),
        ));
    }
    let sim = tape.matmul_nt(zi, zt)?;
    let logits = tape.scale_by(sim, inv_sigma)?;
    finite(tape, logits, "contrastive logits")?;
    let i2t = diagonal_cross_entropy(tape, logits, b)?;
    let lt = tape.transpose(logits)?;
    let t2i = diagonal_cross_entropy(tape, lt, b)?;
    let both = tape.add(i2t, t2i)?;
    let loss = tape.scale(both, 0.5);
    Ok(Contrastive { loss, i2t, t2i, logits })
}

fn check_tau(tau: f64, field: &str) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::config(field, format!("temperature {tau} must be positive")));
    }
    Ok(())
}

/// `⟨row_k, z_l⟩ / τ` for every patch row `k` and text (or prototype) `l`.
pub fn patch_text_logits<F: Scalar>(tape: &mut Tape<F>, rows: Var, zt: Var, tau: f64) -> Result<Var> {
    check_tau(tau, "tau")?;
    let sim = tape.matmul_nt(rows, zt)?;
    Ok(tape.scale(sim, 1.0 / tau))
}

/// Row-stochastic `N × B` matrix: softmax over texts of patch-text similarity.
pub fn patch_text_distribution<F: Scalar>(tape: &mut Tape<F>, rows: Var, zt: Var, tau: f64) -> Result<Var> {
    let logits = patch_text_logits(tape, rows, zt, tau)?;
    Ok(tape.softmax(logits))
}

/// Images whose most similar in-batch text is their own caption. Ties go
/// to the diagonal. `sim` is any positive rescaling of the `B × B`
/// image-text similarity matrix.
pub fn matched_set<F: Scalar>(sim: &Tensor<F>) -> Vec<usize> {
    (0..sim.rows())
        .filter(|&i| {
            let row = sim.row(i);
            row.iter().all(|&v| v <= row[i])
        })
        .collect()
}

/// Rows `i·N + k` for `i ∈ images` and `k ∈ M_i`, image-major.
pub fn masked_rows(plans: &[MaskPlan], images: &[usize]) -> Vec<usize> {
    images
        .iter()
        .flat_map(|&i| {
            let n = plans[i].n_patches();
            plans[i].masked().iter().map(move |&k| i * n + k)
        })
        .collect()
}

/// Reconstruction loss variables in a distribution space.
#[derive(Clone, Copy, Debug)]
pub struct SoftReconstruction {
    pub loss: Var,
    /// Target distribution `p` after stop-gradient.
    pub target: Var,
    /// Prediction logits `⟨g̃, z⟩/τ_pred` before the softmax.
    pub pred_logits: Var,
}

/// Mean over selected masked patches of `−Σ p · log q`, where
/// `p = sg(softmax(f̃ zᵀ/τ_target))` and `q = softmax(g̃ zᵀ/τ_pred)`.
///
/// `targets`, when given, replaces `softmax(f̃ zᵀ/τ_target)` with a fixed
/// matrix (one row per selected patch). Returns `None` when nothing is
/// selected.
#[allow(clippy::too_many_arguments)]
pub fn soft_reconstruction<F: Scalar>(
    tape: &mut Tape<F>,
    f_proj: Var,
    g_proj: Var,
    bank: Var,
    plans: &[MaskPlan],
    images: &[usize],
    tau_target: f64,
    tau_pred: f64,
    targets: Option<&Tensor<F>>,
) -> Result<Option<SoftReconstruction>> {
    check_tau(tau_target, "loss.tau_target")?;
    check_tau(tau_pred, "loss.tau_pred")?;
    let rows = masked_rows(plans, images);
    if rows.is_empty() {
        return Ok(None);
    }
    let p = match targets {
        Some(t) => {
            if t.shape() != [rows.len(), tape.value(bank).rows()] {
                return Err(Error::shape(
                    "reconstruction targets",
                    format!("{:?} for {} rows over {} texts", t.shape(), rows.len(), tape.value(bank).rows()),
                ));
            }
            tape.constant(t.clone())
        }
        None => {
            let f = tape.gather_rows(f_proj, &rows)?;
            patch_text_distribution(tape, f, bank, tau_target)?
        }
    };
    let target = tape.stop_gradient(p);
    let g = tape.gather_rows(g_proj, &rows)?;
    let pred_logits = patch_text_logits(tape, g, bank, tau_pred)?;
    let logq = tape.log_softmax(pred_logits);
    let prod = tape.mul(target, logq)?;
    let per_row = tape.sum_axis(prod, 1)?;
    if let Some(r) = tape.value(per_row).data().iter().position(|v| !v.is_finite()) {
        let n = plans[0].n_patches();
        let row = rows[r];
        return Err(Error::Numerical(format!(
            "reconstruction loss not finite at image {}, patch {}",
            row / n,
            row % n
        )));
    }
    let s = tape.sum(per_row);
    let loss = tape.scale(s, -1.0 / rows.len() as f64);
    Ok(Some(SoftReconstruction {
        loss,
        target,
        pred_logits,
    }))
}

/// Language-space reconstruction over the matched images `c`.
#[allow(clippy::too_many_arguments)]
pub fn reconstruction_loss_language<F: Scalar>(
    tape: &mut Tape<F>,
    f_proj: Var,
    g_proj: Var,
    zt: Var,
    plans: &[MaskPlan],
    c: &[usize],
    tau_target: f64,
    tau_pred: f64,
) -> Result<Var> {
    let r = soft_reconstruction(tape, f_proj, g_proj, zt, plans, c, tau_target, tau_pred, None)?;
    Ok(r.map_or_else(|| tape.constant(Tensor::scalar(F::zero())), |r| r.loss))
}

/// Prototype-space reconstruction over every image. `prototypes` must
/// already have unit-norm rows.
pub fn reconstruction_loss_prototype<F: Scalar>(
    tape: &mut Tape<F>,
    f_proj: Var,
    g_proj: Var,
    prototypes: Var,
    plans: &[MaskPlan],
    tau_target: f64,
    tau_pred: f64,
) -> Result<Var> {
    let all: Vec<usize> = (0..plans.len()).collect();
    let r = soft_reconstruction(tape, f_proj, g_proj, prototypes, plans, &all, tau_target, tau_pred, None)?;
    Ok(r.map_or_else(|| tape.constant(Tensor::scalar(F::zero())), |r| r.loss))
}

/// Mean squared error between predicted and true pixels of masked patches.
/// `pred` and `patches` are both `B·N × P·P·C`.
pub fn reconstruction_loss_pixel<F: Scalar>(
    tape: &mut Tape<F>,
    pred: Var,
    patches: &Tensor<F>,
    plans: &[MaskPlan],
) -> Result<Var> {
    if tape.value(pred).shape() != patches.shape() {
        return Err(Error::shape(
            "reconstruction_loss_pixel",
            format!("prediction {:?} vs target {:?}", tape.value(pred).shape(), patches.shape()),
        ));
    }
    let all: Vec<usize> = (0..plans.len()).collect();
    let rows = masked_rows(plans, &all);
    if rows.is_empty() {
        return Ok(tape.constant(Tensor::scalar(F::zero())));
    }
    let p = tape.gather_rows(pred, &rows)?;
    let t = tape.constant(patches.gather_rows(&rows)?);
    let d = tape.sub(p, t)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq);
    let count = rows.len() * patches.cols();
    Ok(tape.scale(s, 1.0 / count as f64))
}

/// Optional hooks into [`total_loss`] used by verification code.
#[derive(Clone, Debug, Default)]
pub struct LossOptions<F> {
    /// Fixed reconstruction targets replacing the full-image branch.
    pub targets: Option<Tensor<F>>,
    /// Fixed matched set replacing the one computed from the batch.
    pub matched: Option<Vec<usize>>,
}

/// Everything [`total_loss`] built, for inspection.
#[derive(Clone, Debug)]
pub struct LossTrace {
    pub encoded: EncodedImage,
    pub text: Var,
    pub contrastive: Contrastive,
    pub decoded: Option<DecodedImage>,
    pub recon: Option<Var>,
    pub soft: Option<SoftReconstruction>,
    pub matched: Vec<usize>,
}

pub struct LossOutput {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub trace: LossTrace,
}

/// `λ1 · l_contra + λ2 · l_recon` for one batch.
///
/// The masked encoder and decoder run only when the configuration
/// reconstructs (`space ≠ none` and `λ2 ≠ 0`).
pub fn total_loss<F: Scalar>(
    fwd: &mut Forward<'_, F>,
    inputs: &BatchInputs<F>,
    plans: &[MaskPlan],
    cfg: &LossConfig,
    opts: &LossOptions<F>,
) -> Result<LossOutput> {
    let b = inputs.len();
    let encoded = fwd.vision_encode_full(&inputs.patches)?;
    let text = fwd.language_encode(&inputs.tokens)?;
    let scale = fwd.logit_scale()?;
    let inv_sigma = fwd.tape.exp(scale);
    let contrastive = contrastive_loss(&mut fwd.tape, encoded.global, text, inv_sigma)?;
    let matched = match &opts.matched {
        Some(m) => m.clone(),
        None => matched_set(fwd.tape.value(contrastive.logits)),
    };

    let mut decoded = None;
    let mut soft = None;
    let mut recon = None;
    if cfg.reconstructs() {
        let visible = fwd.vision_encode_masked(&inputs.patches, plans)?;
        let dec = fwd.vision_decode(visible, plans)?;
        decoded = Some(dec);
        recon = Some(match cfg.space {
            ReconSpace::Language | ReconSpace::Prototype => {
                let (bank, images) = if cfg.space == ReconSpace::Language {
                    let images = if cfg.matched_filter {
                        matched.clone()
                    } else {
                        (0..b).collect()
                    };
                    (text, images)
                } else {
                    (fwd.prototypes()?, (0..b).collect())
                };
                let r = soft_reconstruction(
                    &mut fwd.tape,
                    encoded.patch_proj,
                    dec.patch_proj,
                    bank,
                    plans,
                    &images,
                    cfg.tau_target,
                    cfg.tau_pred,
                    opts.targets.as_ref(),
                )?;
                soft = r;
                r.map_or_else(|| fwd.tape.constant(Tensor::scalar(F::zero())), |r| r.loss)
            }
            ReconSpace::Pixel => {
                let pred = fwd.pixel_head(dec.feats)?;
                reconstruction_loss_pixel(&mut fwd.tape, pred, &inputs.patches, plans)?
            }
            ReconSpace::None => unreachable!("reconstructs() excludes none"),
        });
    }

    let tape = &mut fwd.tape;
    let contra_term = (cfg.lambda1 != 0.0).then(|| tape.scale(contrastive.loss, cfg.lambda1));
    let recon_term = recon.map(|r| tape.scale(r, cfg.lambda2));
    let total = match (contra_term, recon_term) {
        (Some(c), Some(r)) => tape.add(c, r)?,
        (Some(c), None) => c,
        (None, Some(r)) => r,
        (None, None) => tape.constant(Tensor::scalar(F::zero())),
    };

    let val = |v: Var| tape.value(v).item().f64();
    let breakdown = LossBreakdown {
        l_contra: val(contrastive.loss),
        l_recon: recon.map_or(0.0, val),
        l_total: val(total),
        matched_fraction: matched.len() as f64 / b as f64,
        l_i2t: val(contrastive.i2t),
        l_t2i: val(contrastive.t2i),
    };
    if !breakdown.l_total.is_finite() {
        return Err(Error::Numerical(format!(
            "total loss not finite (l_contra {}, l_recon {})",
            breakdown.l_contra, breakdown.l_recon
        )));
    }
    Ok(LossOutput {
        total,
        breakdown,
        trace: LossTrace {
            encoded,
            text,
            contrastive,
            decoded,
            recon,
            soft,
            matched,
        },
    })
}

#[cfg(test)]
mod tests;
