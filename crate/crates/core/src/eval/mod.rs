//! Evaluation protocols: zero-shot classification, low-shot linear probe
//! and image-text retrieval. Nothing here mutates the model.

mod probe;
mod protocols;
mod report;

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;

pub use probe::{linear_probe, standardize, ProbeConfig, ProbeResult};
pub use protocols::{
    held_out, labelled, low_shot_probe_report, mean_std, retrieval_report, zero_shot_report, Labelled,
};
pub use report::EvalReport;

use crate::data::{Image, SyntheticSpec, Tokenizer};
use crate::error::{Error, Result};
use crate::model::RilsModel;
use crate::tensor::{Scalar, Tensor};

const CHUNK: usize = 64;

/// Image embeddings of a set of images.
#[derive(Clone, Debug)]
pub struct ImageFeatures {
    /// Normalized global embeddings `z^I`, `n × D_e`.
    pub global: Tensor<f64>,
    /// Mean-pooled encoder features before projection, `n × D_v`.
    pub pooled: Tensor<f64>,
}

fn stack(parts: Vec<Tensor<f64>>, cols: usize) -> Result<Tensor<f64>> {
    if parts.is_empty() {
        return Ok(Tensor::zeros(&[0, cols]));
    }
    Tensor::concat_rows(&parts)
}

/// Encodes images in chunks without recording gradients.
pub fn encode_images<F: Scalar>(model: &RilsModel<F>, images: &[Image]) -> Result<ImageFeatures> {
    let patch = model.config.patch_size;
    let mut global = Vec::new();
    let mut pooled = Vec::new();
    for chunk in images.chunks(CHUNK) {
        let mut raw = Vec::new();
        for img in chunk {
            raw.extend(img.patchify(patch)?);
        }
        let pd = model.config.patch_dim();
        let t = Tensor::new(vec![raw.len() / pd, pd], raw.into_iter().map(|v| F::of(v as f64)).collect())?;
        let mut fwd = model.forward(false);
        let e = fwd.vision_encode_full(&t)?;
        global.push(fwd.tape.value(e.global).cast());
        pooled.push(fwd.tape.value(e.pooled).cast());
    }
    Ok(ImageFeatures {
        global: stack(global, model.config.embed_dim)?,
        pooled: stack(pooled, model.config.vision_width)?,
    })
}

/// Normalized text embeddings `z^T` of `captions`.
pub fn encode_texts<F: Scalar>(model: &RilsModel<F>, tokenizer: &dyn Tokenizer, captions: &[String]) -> Result<Tensor<f64>> {
    let mut out = Vec::new();
    for chunk in captions.chunks(CHUNK) {
        let tokens: Vec<_> = chunk.iter().map(|c| tokenizer.encode(c)).collect();
        let mut fwd = model.forward(false);
        let z = fwd.language_encode(&tokens)?;
        out.push(fwd.tape.value(z).cast());
    }
    stack(out, model.config.embed_dim)
}

fn normalize_row(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
}

/// Averages each class's prompt embeddings and re-normalizes.
/// `prompt_embeddings[c]` holds one unit row per template.
pub fn class_prototypes(prompt_embeddings: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    if prompt_embeddings.is_empty() {
        return Err(Error::Contract("zero-shot classification needs at least one class".into()));
    }
    let rows = prompt_embeddings
        .iter()
        .enumerate()
        .map(|(c, t)| {
            if t.rows() == 0 {
                return Err(Error::Contract(format!("class {c} has no prompts")));
            }
            let mut mean = vec![0.0; t.cols()];
            for r in 0..t.rows() {
                for (m, v) in mean.iter_mut().zip(t.row(r)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= t.rows() as f64);
            normalize_row(&mut mean);
            Ok(mean)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class per image: the prototype with the highest cosine.
pub fn predict(images: &Tensor<f64>, prototypes: &Tensor<f64>) -> Vec<usize> {
    (0..images.rows())
        .map(|i| {
            let x = images.row(i);
            let sims: Vec<f64> = (0..prototypes.rows())
                .map(|c| prototypes.row(c).iter().zip(x).map(|(a, b)| a * b).sum())
                .collect();
            argmax(&sims)
        })
        .collect()
}

/// Zero-shot result over a labelled set.
#[derive(Clone, Debug, PartialEq)]
pub struct ZeroShot {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64
}

/// Classifies `images` against prompts `class_prompts[c]` (one string per
/// template) and scores against `labels`.
pub fn zero_shot_classify<F: Scalar>(
    model: &RilsModel<F>,
    tokenizer: &dyn Tokenizer,
    images: &[Image],
    labels: &[usize],
    class_prompts: &[Vec<String>],
) -> Result<ZeroShot> {
    if class_prompts.len() < 2 {
        return Err(Error::Contract(format!(
            "zero-shot classification needs at least two classes, got {}",
            class_prompts.len()
        )));
    }
    if labels.len() != images.len() {
        return Err(Error::Contract(format!("{} labels for {} images", labels.len(), images.len())));
    }
    let embedded = class_prompts
        .iter()
        .map(|p| encode_texts(model, tokenizer, p))
        .collect::<Result<Vec<_>>>()?;
    let protos = class_prototypes(&embedded)?;
    let feats = encode_images(model, images)?;
    let predictions = predict(&feats.global, &protos);
    Ok(ZeroShot {
        accuracy: accuracy(&predictions, labels),
        predictions,
    })
}

/// Prompts for every class of the synthetic grammar: each template filled
/// with the class's color and shape.
pub fn synthetic_prompts(spec: &SyntheticSpec) -> Vec<Vec<String>> {
    (0..spec.n_classes())
        .map(|c| {
            let (color, shape) = spec.class_parts(c);
            spec.templates
                .iter()
                .map(|t| SyntheticSpec::fill_template(t, color, shape))
                .collect()
        })
        .collect()
}

/// Picks exactly `n_per_class` samples of each class in `0..n_classes`,
/// uniformly without replacement. `labelled` pairs a sample index with its
/// class. The result is ordered by class, then by draw.
pub fn low_shot_sample<R: Rng + ?Sized>(
    labelled: &[(usize, usize)],
    n_classes: usize,
    n_per_class: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = (0..n_classes).map(|c| (c, Vec::new())).collect();
    for &(i, c) in labelled {
        by_class
            .get_mut(&c)
            .ok_or_else(|| Error::Data(format!("label {c} outside {n_classes} classes")))?
            .push(i);
    }
    let mut out = Vec::with_capacity(n_classes * n_per_class);
    for (c, members) in &by_class {
        if members.len() < n_per_class {
            return Err(Error::Data(format!(
                "class {c} has {} samples, {n_per_class} requested",
                members.len()
            )));
        }
        out.extend(index::sample(rng, members.len(), n_per_class).into_iter().map(|k| members[k]));
    }
    Ok(out)
}

/// Recall@k in both directions.
#[derive(Clone, Debug, PartialEq)]
pub struct Recall {
    pub ks: Vec<usize>,
    pub image_to_text: Vec<f64>,
    pub text_to_image: Vec<f64>,
}

/// Position of `target` when `scores` is sorted by descending score with
/// ties kept in index order.
fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < target))
        .count()
}

/// Retrieval recall where image `i` is paired with caption `i`.
pub fn retrieval_recall(zi: &Tensor<f64>, zt: &Tensor<f64>, ks: &[usize]) -> Result<Recall> {
    let n = zi.rows();
    if zt.rows() != n {
        return Err(Error::Contract(format!("{n} images vs {} captions", zt.rows())));
    }
    for &k in ks {
        if k == 0 || k > n {
            return Err(Error::Contract(format!("recall@{k} outside a gallery of {n}")));
        }
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let sim: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| dot(zi.row(i), zt.row(j))).collect()).collect();
    let i2t: Vec<usize> = (0..n).map(|i| rank_of(&sim[i], i)).collect();
    let t2i: Vec<usize> = (0..n)
        .map(|j| {
            let col: Vec<f64> = (0..n).map(|i| sim[i][j]).collect();
            rank_of(&col, j)
        })
        .collect();
    let recall = |ranks: &[usize], k: usize| ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64;
    Ok(Recall {
        ks: ks.to_vec(),
        image_to_text: ks.iter().map(|&k| recall(&i2t, k)).collect(),
        text_to_image: ks.iter().map(|&k| recall(&t2i, k)).collect(),
    })
}

#[cfg(test)]
mod tests;
