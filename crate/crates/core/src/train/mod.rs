//! Optimization loop: AdamW under a warmup-cosine schedule, temperature
//! clamping, metrics and checkpoints.
//!
//! All randomness in step `s` (batch choice, augmentation, masks) is drawn
//! from generators keyed by `(seed, s)`, so a run resumed from a checkpoint
//! replays exactly what the uninterrupted run would have done.

mod adamw;
pub mod checkpoint;
mod schedule;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use adamw::{clip_grad_norm, AdamW};
pub use checkpoint::Checkpoint;
pub use schedule::Schedule;

use crate::config::RunConfig;
use crate::data::{
    generate_corpus, load_corpus, make_batch, split_indices, BatchMode, BatchSampler, Corpus, SyntheticSpec,
    Tokenizer, WordTokenizer,
};
use crate::error::{Error, Result};
use crate::masking::{sample_mask, MaskPlan};
use crate::model::{BatchInputs, RilsModel};
use crate::objectives::{total_loss, LossBreakdown, LossOptions};
use crate::rng::{derive_rng, derive_seed};
use crate::tensor::{Scalar, Tensor};

const INIT_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;
const MASK_STREAM: u64 = 3;
const SAMPLE_STREAM: u64 = 4;

/// One metrics line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub lr: f64,
    pub l_contra: f64,
    pub l_recon: f64,
    pub l_total: f64,
    pub matched_fraction: f64,
    pub sigma: f64,
}

/// Forward, backward and one AdamW update at learning rate `lr`, followed by
/// the temperature clamp.
pub fn train_step<F: Scalar>(
    model: &mut RilsModel<F>,
    inputs: &BatchInputs<F>,
    plans: &[MaskPlan],
    opt: &mut AdamW<F>,
    lr: f64,
    cfg: &RunConfig,
) -> Result<LossBreakdown> {
    let (breakdown, mut grads) = {
        let mut fwd = model.forward(true);
        let out = total_loss(&mut fwd, inputs, plans, &cfg.loss, &LossOptions::default())?;
        let g = fwd.tape.backward(out.total)?;
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; model.params.len()];
        for (i, v) in fwd.loaded_params() {
            grads[i] = Some(g.tensor(v));
        }
        (out.breakdown, grads)
    };
    if let Some(max) = cfg.optim.grad_clip {
        clip_grad_norm(&mut grads, max);
    }
    opt.step(&mut model.params, &grads, lr)?;
    model.clamp_logit_scale();
    Ok(breakdown)
}

/// The synthetic grammar used for captions, prompts and labels.
pub fn synthetic_spec(cfg: &RunConfig) -> SyntheticSpec {
    SyntheticSpec::default()
        .with_canvas(cfg.model.image_size)
        .with_seed(cfg.data.seed)
}

/// The configured corpus: the manifest under `data.dir`, or a generated
/// synthetic corpus. Samples are labelled from their captions.
pub fn build_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let spec = synthetic_spec(cfg);
    match &cfg.data.dir {
        Some(dir) => load_corpus(dir)?.label_with(&spec).into_memory(),
        None => Ok(Corpus::from_pairs(generate_corpus(&spec, cfg.data.n_pairs)?)),
    }
}

/// Model initialization is keyed by the training seed.
pub fn init_model(cfg: &RunConfig, vocab_size: usize) -> RilsModel<f32> {
    let seed = derive_seed(cfg.train.seed, &[INIT_STREAM]);
    RilsModel::init(&cfg.model, vocab_size, cfg.loss.space, seed).cast()
}

/// A training run in progress.
pub struct Trainer {
    pub config: RunConfig,
    pub model: RilsModel<f32>,
    pub optimizer: AdamW<f32>,
    /// Number of completed steps.
    pub step: usize,
    pub corpus: Corpus,
    pub tokenizer: WordTokenizer,
    sampler: BatchSampler,
    schedule: Schedule,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        let corpus = build_corpus(&config)?;
        Self::with_corpus(config, corpus)
    }

    pub fn with_corpus(config: RunConfig, corpus: Corpus) -> Result<Self> {
        config.validate()?;
        let tokenizer = synthetic_spec(&config).tokenizer(config.model.max_len);
        let model = init_model(&config, tokenizer.vocab_size());
        let optimizer = AdamW::new(&model.params, &config.optim);
        Self::assemble(config, corpus, tokenizer, model, optimizer, 0)
    }

    /// Continues from `ckpt`. The corpus must be the one the run started on.
    pub fn resume(ckpt: Checkpoint, corpus: Corpus) -> Result<Self> {
        let tokenizer = synthetic_spec(&ckpt.config).tokenizer(ckpt.config.model.max_len);
        if tokenizer.vocab_size() != ckpt.model.vocab_size {
            return Err(Error::Checkpoint {
                field: "text.token".into(),
                reason: format!(
                    "vocabulary of {} tokens, tokenizer has {}",
                    ckpt.model.vocab_size,
                    tokenizer.vocab_size()
                ),
            });
        }
        Self::assemble(ckpt.config, corpus, tokenizer, ckpt.model, ckpt.optimizer, ckpt.step)
    }

    fn assemble(
        config: RunConfig,
        corpus: Corpus,
        tokenizer: WordTokenizer,
        model: RilsModel<f32>,
        optimizer: AdamW<f32>,
        step: usize,
    ) -> Result<Self> {
        let (train_idx, _) = split_indices(&corpus)?;
        let sampler = BatchSampler::new(&corpus, train_idx, derive_seed(config.train.seed, &[SAMPLE_STREAM]))?;
        let schedule = Schedule::from_config(&config)?;
        Ok(Self {
            config,
            model,
            optimizer,
            step,
            corpus,
            tokenizer,
            sampler,
            schedule,
        })
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn class_distinct_batches(&self) -> bool {
        self.sampler.class_distinct(self.config.train.batch_size)
    }

    /// Batch and masks of 1-based step `step`.
    pub fn step_inputs(&self, step: usize) -> Result<(BatchInputs<f32>, Vec<MaskPlan>)> {
        let cfg = &self.config;
        let indices = self.sampler.batch(step, cfg.train.batch_size)?;
        let seed = cfg.train.seed;
        let mut aug = derive_rng(seed, &[step as u64, AUGMENT_STREAM]);
        let mode = if cfg.data.augment {
            BatchMode::Train {
                crop_scale: cfg.data.crop_scale,
                rng: &mut aug,
            }
        } else {
            BatchMode::Eval
        };
        let batch = make_batch(&self.corpus, &indices, &self.tokenizer, mode)?;
        let mut mask_rng = derive_rng(seed, &[step as u64, MASK_STREAM]);
        let n = cfg.model.n_patches();
        let plans = (0..batch.len())
            .map(|_| sample_mask(n, cfg.loss.mask_ratio, &mut mask_rng))
            .collect::<Result<Vec<_>>>()?;
        Ok((BatchInputs::from_batch(&batch, cfg.model.patch_size)?, plans))
    }

    /// Runs the next step and returns its metrics.
    pub fn step(&mut self) -> Result<MetricsRecord> {
        let step = self.step + 1;
        if step > self.config.train.steps {
            return Err(Error::Contract(format!("run already finished {} steps", self.config.train.steps)));
        }
        let (inputs, plans) = self.step_inputs(step)?;
        let lr = self.schedule.lr_at(step)?;
        let sigma = self.model.sigma();
        let b = train_step(&mut self.model, &inputs, &plans, &mut self.optimizer, lr, &self.config)
            .map_err(|e| Error::Numerical(format!("step {step}: {e}")))?;
        if !self.model.params.all_finite() {
            return Err(Error::Numerical(format!(
                "step {step}: parameters not finite (l_contra {}, l_recon {})",
                b.l_contra, b.l_recon
            )));
        }
        self.step = step;
        Ok(MetricsRecord {
            step,
            lr,
            l_contra: b.l_contra,
            l_recon: b.l_recon,
            l_total: b.l_total,
            matched_fraction: b.matched_fraction,
            sigma,
        })
    }

    /// Runs until `until` steps are complete, passing each record to `sink`.
    pub fn run_until(&mut self, until: usize, mut sink: impl FnMut(&MetricsRecord) -> Result<()>) -> Result<()> {
        while self.step < until.min(self.config.train.steps) {
            let rec = self.step()?;
            sink(&rec)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
        }
    }
}

/// Serializes one record as a JSON line.
pub fn metrics_line(rec: &MetricsRecord) -> String {
    serde_json::to_string(rec).expect("metrics serialize")
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                offset: i + 1,
                reason: format!("metrics line {}: {e}", i + 1),
            })
        })
        .collect()
}

/// Files produced by [`pretrain`].
#[derive(Clone, Debug)]
pub struct RunOutputs {
    pub config: PathBuf,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub records: Vec<MetricsRecord>,
}

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Full run into `out`: resolved config, metrics and checkpoints.
pub fn pretrain(config: RunConfig, corpus: Corpus, out: &Path) -> Result<RunOutputs> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let config_path = out.join(CONFIG_FILE);
    std::fs::write(&config_path, config.to_toml()).map_err(|e| Error::io(&config_path, e))?;
    let metrics_path = out.join(METRICS_FILE);
    let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut w = BufWriter::new(file);
    let mut trainer = Trainer::with_corpus(config, corpus)?;
    let every = trainer.config.train.checkpoint_every;
    let total = trainer.config.train.steps;
    let mut records = Vec::with_capacity(total);
    while trainer.step < total {
        let rec = trainer.step()?;
        writeln!(w, "{}", metrics_line(&rec)).map_err(|e| Error::io(&metrics_path, e))?;
        records.push(rec);
        if every > 0 && rec.step % every == 0 && rec.step < total {
            let p = out.join(format!("step_{:06}.ckpt", rec.step));
            trainer.checkpoint().save(&p)?;
        }
    }
    w.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let ckpt = out.join(FINAL_CHECKPOINT);
    trainer.checkpoint().save(&ckpt)?;
    Ok(RunOutputs {
        config: config_path,
        metrics: metrics_path,
        checkpoint: ckpt,
        records,
    })
}

/// Exponential moving average of `values` with smoothing factor `alpha`.
pub fn smoothed(values: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = None;
    for &v in values {
        let s = match acc {
            None => v,
            Some(a) => alpha * v + (1.0 - alpha) * a,
        };
        acc = Some(s);
        out.push(s);
    }
    out
}
