//! Desk-scale ablation grids: reconstruction space, mask ratio, loss
//! coefficients and decoder depth.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{ReconSpace, RunConfig};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::eval::{low_shot_probe_report, zero_shot_report, ProbeConfig};
use crate::train::{pretrain, smoothed, synthetic_spec, MetricsRecord, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    Space,
    MaskRatio,
    Lambda,
    DecoderDepth,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::Space, Axis::MaskRatio, Axis::Lambda, Axis::DecoderDepth];

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Space => "space",
            Axis::MaskRatio => "mask-ratio",
            Axis::Lambda => "lambda",
            Axis::DecoderDepth => "decoder-depth",
        }
    }

    /// The grid along this axis, every other setting taken from `base`.
    pub fn variants(self, base: &RunConfig) -> Vec<Variant> {
        let with = |label: String, f: &dyn Fn(&mut RunConfig)| {
            let mut config = base.clone();
            f(&mut config);
            Variant { label, config }
        };
        match self {
            Axis::Space => [ReconSpace::Language, ReconSpace::Pixel, ReconSpace::Prototype]
                .into_iter()
                .map(|s| with(s.to_string(), &|c| c.loss.space = s))
                .collect(),
            Axis::MaskRatio => [0.60, 0.75, 0.90]
                .into_iter()
                .map(|r| with(format!("{r:.2}"), &|c| c.loss.mask_ratio = r))
                .collect(),
            Axis::Lambda => [(1.0, 0.5, "2:1"), (1.0, 1.0, "1:1"), (1.0, 2.0, "1:2")]
                .into_iter()
                .map(|(l1, l2, label)| {
                    with(label.to_string(), &|c| {
                        c.loss.lambda1 = l1;
                        c.loss.lambda2 = l2;
                    })
                })
                .collect(),
            Axis::DecoderDepth => [1, 2, 4]
                .into_iter()
                .map(|d| with(d.to_string(), &|c| c.model.decoder_depth = d))
                .collect(),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::config("axis", format!("unknown ablation axis `{s}`")))
    }
}

/// One point of an ablation grid.
#[derive(Clone, Debug)]
pub struct Variant {
    pub label: String,
    pub config: RunConfig,
}

/// Scores of one trained variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub seed: u64,
    pub zero_shot: f64,
    pub probe_mean: f64,
    pub probe_std: f64,
    pub final_l_total: f64,
    pub final_matched_fraction: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: Axis,
    pub shots: usize,
    pub rows: Vec<AblationRow>,
}

/// Smoothing factor for the end-of-run loss and matched fraction.
pub const SMOOTHING: f64 = 0.05;

/// Trains `config` and scores it: held-out zero-shot accuracy and a
/// `shots`-per-class probe averaged over three sampling seeds.
pub fn score_run(
    label: &str,
    config: &RunConfig,
    corpus: &Corpus,
    shots: usize,
    out: Option<&Path>,
) -> Result<AblationRow> {
    let start = std::time::Instant::now();
    let (model, records) = match out {
        Some(dir) => {
            let outputs = pretrain(config.clone(), corpus.clone(), dir)?;
            let ckpt = crate::train::Checkpoint::load(&outputs.checkpoint)?;
            (ckpt.model, outputs.records)
        }
        None => {
            let mut trainer = Trainer::with_corpus(config.clone(), corpus.clone())?;
            let mut records: Vec<MetricsRecord> = Vec::with_capacity(config.train.steps);
            trainer.run_until(config.train.steps, |r| {
                records.push(*r);
                Ok(())
            })?;
            (trainer.model, records)
        }
    };
    let spec = synthetic_spec(config);
    let tok = spec.tokenizer(config.model.max_len);
    let hash = config.hash();
    let zs = zero_shot_report(&model, &tok, corpus, &spec, &hash)?;
    let probe = low_shot_probe_report(&model, corpus, &spec, shots, &[0, 1, 2], &ProbeConfig::default(), &hash)?;
    let last = |f: fn(&MetricsRecord) -> f64| {
        let v: Vec<f64> = records.iter().map(f).collect();
        smoothed(&v, SMOOTHING).last().copied().unwrap_or(f64::NAN)
    };
    Ok(AblationRow {
        label: label.to_string(),
        seed: config.train.seed,
        zero_shot: zs.metrics["accuracy"],
        probe_mean: probe.metrics["accuracy_mean"],
        probe_std: probe.metrics["accuracy_std"],
        final_l_total: last(|r| r.l_total),
        final_matched_fraction: last(|r| r.matched_fraction),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs every variant of `axis` once per training seed. When `out` is
/// given each run writes its own directory `<out>/<label>_seed<seed>`.
pub fn run_ablation(
    axis: Axis,
    base: &RunConfig,
    corpus: &Corpus,
    seeds: &[u64],
    shots: usize,
    out: Option<&Path>,
    mut progress: impl FnMut(&AblationRow),
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for &seed in seeds {
        for v in axis.variants(base) {
            let mut config = v.config;
            config.train.seed = seed;
            config.validate()?;
            let dir = out.map(|o| o.join(format!("{}_seed{seed}", v.label.replace(':', "-"))));
            let row = score_run(&v.label, &config, corpus, shots, dir.as_deref())?;
            progress(&row);
            rows.push(row);
        }
    }
    Ok(AblationReport { axis, shots, rows })
}

impl AblationReport {
    pub fn row(&self, label: &str, seed: u64) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label && r.seed == seed)
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn labels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.label) {
                out.push(r.label.clone());
            }
        }
        out
    }

    /// Seeds on which variant `a` scores at least as high zero-shot as `b`.
    pub fn zero_shot_at_least(&self, a: &str, b: &str) -> Vec<u64> {
        self.seeds()
            .into_iter()
            .filter(|&s| match (self.row(a, s), self.row(b, s)) {
                (Some(x), Some(y)) => x.zero_shot >= y.zero_shot,
                _ => false,
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One line per run, then per-variant means across seeds.
    pub fn table(&self) -> String {
        let lw = self.labels().iter().map(String::len).max().unwrap_or(0).max(self.axis.as_str().len());
        let probe = format!("{}-shot", self.shots);
        let mut s = format!(
            "{:<lw$}  {:>4}  {:>8}  {:>15}  {:>8}  {:>7}  {:>7}\n",
            self.axis.as_str(),
            "seed",
            "ZS",
            probe,
            "l_total",
            "matched",
            "secs"
        );
        for r in &self.rows {
            s += &format!(
                "{:<lw$}  {:>4}  {:>8.4}  {:>7.4} ± {:.4}  {:>8.4}  {:>7.3}  {:>7.1}\n",
                r.label, r.seed, r.zero_shot, r.probe_mean, r.probe_std, r.final_l_total, r.final_matched_fraction, r.seconds
            );
        }
        s += "\n";
        for label in self.labels() {
            let rows: Vec<&AblationRow> = self.rows.iter().filter(|r| r.label == label).collect();
            let n = rows.len() as f64;
            let zs = rows.iter().map(|r| r.zero_shot).sum::<f64>() / n;
            let pr = rows.iter().map(|r| r.probe_mean).sum::<f64>() / n;
            s += &format!("{:<lw$}  mean  {zs:>8.4}  {pr:>7.4}\n", label);
        }
        s
    }
}
