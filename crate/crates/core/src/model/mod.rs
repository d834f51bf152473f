//! Vision encoder, vision decoder and language encoder with their
//! projection heads.
//!
//! Parameters live in a [`ParamStore`]; a forward pass borrows the model
//! through a [`Forward`], which records onto a fresh tape and loads each
//! parameter the first time it is used. Parameters of a branch that never
//! runs therefore never appear on the tape.

mod params;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use params::{Param, ParamStore};

use crate::config::{ModelConfig, ReconSpace};
use crate::data::{ImageTextBatch, TokenSequence};
use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// All learnable parameters plus the architecture that interprets them.
#[derive(Clone, Debug, PartialEq)]
pub struct RilsModel<F> {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub space: ReconSpace,
    pub params: ParamStore<F>,
}

fn trunc_normal(rng: &mut ChaCha8Rng, std: f64, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

struct Init<'a> {
    store: ParamStore<f64>,
    rng: &'a mut ChaCha8Rng,
    std: f64,
}

impl Init<'_> {
    fn matrix(&mut self, name: String, shape: &[usize]) {
        let t = trunc_normal(self.rng, self.std, shape);
        self.store.push(name, t, true);
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize, bias: bool) {
        self.matrix(format!("{prefix}.w"), &[d_in, d_out]);
        if bias {
            self.store.push(format!("{prefix}.b"), Tensor::zeros(&[d_out]), false);
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) {
        self.store.push(format!("{prefix}.g"), Tensor::full(&[d], 1.0), false);
        self.store.push(format!("{prefix}.b"), Tensor::zeros(&[d]), false);
    }

    fn block(&mut self, prefix: &str, d: usize, mlp_ratio: usize) {
        self.norm(&format!("{prefix}.ln1"), d);
        self.linear(&format!("{prefix}.qkv"), d, 3 * d, true);
        self.linear(&format!("{prefix}.proj"), d, d, true);
        self.norm(&format!("{prefix}.ln2"), d);
        self.linear(&format!("{prefix}.fc1"), d, mlp_ratio * d, true);
        self.linear(&format!("{prefix}.fc2"), mlp_ratio * d, d, true);
    }
}

impl RilsModel<f64> {
    /// Freshly initialized model: truncated-normal matrices, zero biases,
    /// unit layer-norm gains, `logit_scale = ln(1/σ_init)`.
    pub fn init(config: &ModelConfig, vocab_size: usize, space: ReconSpace, seed: u64) -> Self {
        let c = config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: ParamStore::default(),
            rng: &mut rng,
            std: c.init_std,
        };
        let (dv, dt, de, n) = (c.vision_width, c.text_width, c.embed_dim, c.n_patches());

        init.linear("vision.patch", c.patch_dim(), dv, true);
        init.matrix("vision.pos".into(), &[n, dv]);
        for i in 0..c.vision_depth {
            init.block(&format!("vision.blocks.{i}"), dv, c.mlp_ratio);
        }
        init.norm("vision.ln", dv);

        init.matrix("decoder.mask_token".into(), &[1, dv]);
        init.matrix("decoder.pos".into(), &[n, dv]);
        for i in 0..c.decoder_depth {
            init.block(&format!("decoder.blocks.{i}"), dv, c.mlp_ratio);
        }
        init.norm("decoder.ln", dv);

        init.matrix("text.token".into(), &[vocab_size, dt]);
        init.matrix("text.pos".into(), &[c.max_len, dt]);
        for i in 0..c.text_depth {
            init.block(&format!("text.blocks.{i}"), dt, c.mlp_ratio);
        }
        init.norm("text.ln", dt);

        init.linear("head.theta", dv, de, false);
        init.linear("head.phi", dt, de, false);
        init.store
            .push("logit_scale", Tensor::scalar((1.0 / c.sigma_init).ln()), false);

        match space {
            ReconSpace::Prototype => init.matrix("prototypes".into(), &[c.prototypes, de]),
            ReconSpace::Pixel => init.linear("pixel_head", dv, c.patch_dim(), true),
            ReconSpace::Language | ReconSpace::None => {}
        }

        Self {
            config: config.clone(),
            vocab_size,
            space,
            params: init.store,
        }
    }
}

impl<F: Scalar> RilsModel<F> {
    pub fn cast<G: Scalar>(&self) -> RilsModel<G> {
        RilsModel {
            config: self.config.clone(),
            vocab_size: self.vocab_size,
            space: self.space,
            params: self.params.cast(),
        }
    }

    /// Current contrastive temperature σ.
    pub fn sigma(&self) -> f64 {
        let ls = self.params.get("logit_scale").expect("logit_scale exists").value.item().f64();
        (-ls).exp()
    }

    /// Caps `1/σ` at the configured maximum.
    pub fn clamp_logit_scale(&mut self) {
        let cap = self.config.max_inv_sigma.ln();
        let i = self.params.index_of("logit_scale").expect("logit_scale exists");
        let v = &mut self.params.by_index_mut(i).value.data_mut()[0];
        if v.f64() > cap {
            *v = F::of(cap);
        }
    }

    pub fn forward(&self, trainable: bool) -> Forward<'_, F> {
        Forward::new(self, trainable)
    }
}

/// Outputs of the full-image vision encoder for a batch of `B` images.
#[derive(Clone, Copy, Debug)]
pub struct EncodedImage {
    /// Patch features `f`, `B·N × D_v`.
    pub feats: Var,
    /// Mean-pooled features, `B × D_v`.
    pub pooled: Var,
    /// Projected, normalized patch features `f̃`, `B·N × D_e`.
    pub patch_proj: Var,
    /// Global embedding `z^I`, `B × D_e`.
    pub global: Var,
}

/// Decoder outputs covering all `N` positions of each image.
#[derive(Clone, Copy, Debug)]
pub struct DecodedImage {
    /// `g`, `B·N × D_v`; row `b·N + k` is patch `k` of image `b`.
    pub feats: Var,
    /// `g̃`, `B·N × D_e`.
    pub patch_proj: Var,
}

/// Model inputs in the model's precision.
#[derive(Clone, Debug)]
pub struct BatchInputs<F> {
    /// `B·N × P·P·C` patch pixels.
    pub patches: Tensor<F>,
    pub tokens: Vec<TokenSequence>,
}

impl<F: Scalar> BatchInputs<F> {
    pub fn from_batch(batch: &ImageTextBatch, patch: usize) -> Result<Self> {
        let raw = batch.patches(patch)?;
        let pd = patch * patch * batch.image_shape()[1];
        let rows = if pd == 0 { 0 } else { raw.len() / pd };
        let patches = Tensor::new(vec![rows, pd], raw.into_iter().map(|v| F::of(v as f64)).collect())?;
        Ok(Self {
            patches,
            tokens: batch.tokens.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// One forward pass: a tape plus lazily loaded parameters.
pub struct Forward<'m, F> {
    pub tape: Tape<F>,
    model: &'m RilsModel<F>,
    loaded: Vec<Option<Var>>,
    trainable: bool,
}

impl<'m, F: Scalar> Forward<'m, F> {
    pub fn new(model: &'m RilsModel<F>, trainable: bool) -> Self {
        Self {
            tape: Tape::new(),
            model,
            loaded: vec![None; model.params.len()],
            trainable,
        }
    }

    pub fn model(&self) -> &'m RilsModel<F> {
        self.model
    }

    /// The tape variable holding parameter `name`, loading it on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let i = self
            .model
            .params
            .index_of(name)
            .ok_or_else(|| Error::Contract(format!("model has no parameter {name}")))?;
        if let Some(v) = self.loaded[i] {
            return Ok(v);
        }
        let value = self.model.params.by_index(i).value.clone();
        let v = self.tape.leaf(value, self.trainable);
        self.loaded[i] = Some(v);
        Ok(v)
    }

    /// `(parameter index, variable)` for every parameter used so far.
    pub fn loaded_params(&self) -> Vec<(usize, Var)> {
        self.loaded
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (i, v)))
            .collect()
    }

    pub fn is_loaded(&self, name: &str) -> bool {
        self.model.params.index_of(name).is_some_and(|i| self.loaded[i].is_some())
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let y = self.tape.matmul(x, w)?;
        let bias = format!("{prefix}.b");
        if self.model.params.index_of(&bias).is_some() {
            let b = self.param(&bias)?;
            return self.tape.add_row(y, b);
        }
        Ok(y)
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.g"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        self.tape.layer_norm(x, g, b, self.model.config.ln_eps)
    }

    /// Pre-norm transformer block over rows grouped into sequences of `seq`.
    fn block(&mut self, x: Var, prefix: &str, seq: usize, heads: usize, causal: bool) -> Result<Var> {
        let h = self.norm(x, &format!("{prefix}.ln1"))?;
        let qkv = self.linear(h, &format!("{prefix}.qkv"))?;
        let a = self.tape.attention(qkv, seq, heads, causal)?;
        let a = self.linear(a, &format!("{prefix}.proj"))?;
        let x = self.tape.add(x, a)?;
        let h = self.norm(x, &format!("{prefix}.ln2"))?;
        let h = self.linear(h, &format!("{prefix}.fc1"))?;
        let h = self.tape.gelu(h);
        let h = self.linear(h, &format!("{prefix}.fc2"))?;
        self.tape.add(x, h)
    }

    fn stack(&mut self, mut x: Var, tower: &str, depth: usize, seq: usize, heads: usize, causal: bool) -> Result<Var> {
        for i in 0..depth {
            x = self.block(x, &format!("{tower}.blocks.{i}"), seq, heads, causal)?;
        }
        self.norm(x, &format!("{tower}.ln"))
    }

    /// Row-wise `l2_normalize(x · θ)`.
    pub fn project_vision(&mut self, x: Var) -> Result<Var> {
        let y = self.linear(x, "head.theta")?;
        Ok(self.tape.l2_normalize(y))
    }

    fn check_patches(&self, patches: &Tensor<F>) -> Result<usize> {
        let c = &self.model.config;
        let n = c.n_patches();
        if patches.shape().len() != 2 || patches.cols() != c.patch_dim() || patches.rows() % n != 0 {
            return Err(Error::config(
                "model.image_size",
                format!(
                    "patch matrix {:?} does not match {} patches of {} values per image",
                    patches.shape(),
                    n,
                    c.patch_dim()
                ),
            ));
        }
        Ok(patches.rows() / n)
    }

    fn embed_patches(&mut self, patches: Tensor<F>, positions: &[usize]) -> Result<Var> {
        let x = self.tape.constant(patches);
        let x = self.linear(x, "vision.patch")?;
        let pos = self.param("vision.pos")?;
        let pos = self.tape.gather_rows(pos, positions)?;
        self.tape.add(x, pos)
    }

    /// Encodes complete images given as `B·N` patch rows.
    pub fn vision_encode_full(&mut self, patches: &Tensor<F>) -> Result<EncodedImage> {
        let b = self.check_patches(patches)?;
        let c = self.model.config.clone();
        let n = c.n_patches();
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
        let x = self.embed_patches(patches.clone(), &positions)?;
        let feats = self.stack(x, "vision", c.vision_depth, n, c.vision_heads, false)?;
        let grouped = self.tape.reshape(feats, &[b, n, c.vision_width])?;
        let pooled = self.tape.mean_axis(grouped, 1)?;
        let global = self.project_vision(pooled)?;
        let patch_proj = self.project_vision(feats)?;
        Ok(EncodedImage {
            feats,
            pooled,
            patch_proj,
            global,
        })
    }

    fn check_plans(&self, plans: &[MaskPlan], b: usize) -> Result<usize> {
        let n = self.model.config.n_patches();
        if plans.len() != b {
            return Err(Error::Contract(format!("{} mask plans for {b} images", plans.len())));
        }
        let nv = plans.first().map_or(n, MaskPlan::n_visible);
        for (i, p) in plans.iter().enumerate() {
            if p.n_patches() != n {
                return Err(Error::Contract(format!(
                    "plan {i} covers {} patches, images have {n}",
                    p.n_patches()
                )));
            }
            if p.n_visible() != nv {
                return Err(Error::Contract(format!(
                    "plan {i} keeps {} patches, plan 0 keeps {nv}",
                    p.n_visible()
                )));
            }
        }
        if nv == 0 {
            return Err(Error::Contract("mask plans leave no visible patch".into()));
        }
        Ok(nv)
    }

    /// Encodes only the visible patches. Row `b·|V| + j` holds visible patch
    /// `plans[b].encoder_order()[j]`.
    pub fn vision_encode_masked(&mut self, patches: &Tensor<F>, plans: &[MaskPlan]) -> Result<Var> {
        let b = self.check_patches(patches)?;
        let nv = self.check_plans(plans, b)?;
        let c = self.model.config.clone();
        let n = c.n_patches();
        let mut rows = Vec::with_capacity(b * nv);
        let mut positions = Vec::with_capacity(b * nv);
        for (i, p) in plans.iter().enumerate() {
            for &k in p.encoder_order() {
                rows.push(i * n + k);
                positions.push(k);
            }
        }
        let visible = patches.gather_rows(&rows)?;
        let x = self.embed_patches(visible, &positions)?;
        self.stack(x, "vision", c.vision_depth, nv, c.vision_heads, false)
    }

    /// Fills masked positions with the mask token, restores patch order and
    /// runs the decoder.
    pub fn vision_decode(&mut self, visible: Var, plans: &[MaskPlan]) -> Result<DecodedImage> {
        let b = plans.len();
        let nv = self.check_plans(plans, b)?;
        let c = self.model.config.clone();
        let n = c.n_patches();
        let rows = self.tape.value(visible).rows();
        if rows != b * nv {
            return Err(Error::Contract(format!("{rows} visible rows for {b} images of {nv} visible patches")));
        }
        let token = self.param("decoder.mask_token")?;
        let pool = self.tape.concat_rows(&[visible, token])?;
        let mut idx = Vec::with_capacity(b * n);
        for (i, p) in plans.iter().enumerate() {
            for &slot in p.restore() {
                idx.push(if slot < nv { i * nv + slot } else { b * nv });
            }
        }
        let x = self.tape.gather_rows(pool, &idx)?;
        let pos = self.param("decoder.pos")?;
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
        let pos = self.tape.gather_rows(pos, &positions)?;
        let x = self.tape.add(x, pos)?;
        let feats = self.stack(x, "decoder", c.decoder_depth, n, c.decoder_heads, false)?;
        let patch_proj = self.project_vision(feats)?;
        Ok(DecodedImage { feats, patch_proj })
    }

    /// Linear pixel predictions from decoder features (pixel space only).
    pub fn pixel_head(&mut self, decoded: Var) -> Result<Var> {
        self.linear(decoded, "pixel_head")
    }

    /// The prototype bank with unit-norm rows (prototype space only).
    pub fn prototypes(&mut self) -> Result<Var> {
        let p = self.param("prototypes")?;
        Ok(self.tape.l2_normalize(p))
    }

    /// `ln(1/σ)` as a one-element variable.
    pub fn logit_scale(&mut self) -> Result<Var> {
        self.param("logit_scale")
    }

    /// Text embeddings `z^T`, `B × D_e`, from the hidden state at each EOT.
    pub fn language_encode(&mut self, tokens: &[TokenSequence]) -> Result<Var> {
        let c = self.model.config.clone();
        let l = c.max_len;
        let mut ids = Vec::with_capacity(tokens.len() * l);
        let mut eot_rows = Vec::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.len() != l {
                return Err(Error::Tokenize(format!("sequence {i} has length {}, expected {l}", t.len())));
            }
            t.check_markers()
                .map_err(|e| Error::Tokenize(format!("sequence {i}: {e}")))?;
            for &id in &t.ids {
                if id as usize >= self.model.vocab_size {
                    return Err(Error::Tokenize(format!(
                        "token {id} outside vocabulary of {}",
                        self.model.vocab_size
                    )));
                }
                ids.push(id as usize);
            }
            eot_rows.push(i * l + t.eot_pos);
        }
        let table = self.param("text.token")?;
        let x = self.tape.gather_rows(table, &ids)?;
        let pos = self.param("text.pos")?;
        let positions: Vec<usize> = (0..tokens.len()).flat_map(|_| 0..l).collect();
        let pos = self.tape.gather_rows(pos, &positions)?;
        let x = self.tape.add(x, pos)?;
        let h = self.stack(x, "text", c.text_depth, l, c.text_heads, true)?;
        let h = self.tape.gather_rows(h, &eot_rows)?;
        let z = self.linear(h, "head.phi")?;
        Ok(self.tape.l2_normalize(z))
    }
}

#[cfg(test)]
mod tests;
