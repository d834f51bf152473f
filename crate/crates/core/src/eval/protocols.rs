//! Protocols run against a corpus split: held-out zero-shot accuracy,
//! low-shot probes drawn from the training split, held-out retrieval.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    encode_images, encode_texts, linear_probe, low_shot_sample, retrieval_recall, synthetic_prompts,
    zero_shot_classify, EvalReport, ProbeConfig,
};
use crate::data::{split_indices, Corpus, Image, SyntheticSpec, Tokenizer};
use crate::error::{Error, Result};
use crate::model::RilsModel;
use crate::tensor::{Scalar, Tensor};

/// Images, captions and class labels of a subset of a corpus.
pub struct Labelled {
    pub indices: Vec<usize>,
    pub images: Vec<Image>,
    pub captions: Vec<String>,
    pub labels: Vec<usize>,
}

/// Loads `indices`, labelling each entry by its stored class or, failing
/// that, by parsing its caption.
pub fn labelled(corpus: &Corpus, indices: &[usize], spec: &SyntheticSpec) -> Result<Labelled> {
    let mut out = Labelled {
        indices: indices.to_vec(),
        images: Vec::with_capacity(indices.len()),
        captions: Vec::with_capacity(indices.len()),
        labels: Vec::with_capacity(indices.len()),
    };
    for &i in indices {
        let pair = corpus.get(i)?;
        let label = pair
            .class_id
            .or_else(|| spec.parse_caption(&pair.caption))
            .ok_or_else(|| Error::Data(format!("entry {i} has no class and caption `{}` names none", pair.caption)))?;
        if label >= spec.n_classes() {
            return Err(Error::Data(format!("entry {i} has class {label} outside {} classes", spec.n_classes())));
        }
        out.images.push(pair.image);
        out.captions.push(pair.caption);
        out.labels.push(label);
    }
    Ok(out)
}

pub fn held_out(corpus: &Corpus, spec: &SyntheticSpec) -> Result<Labelled> {
    let (_, held) = split_indices(corpus)?;
    if held.is_empty() {
        return Err(Error::Data("corpus has no held-out entries".into()));
    }
    labelled(corpus, &held, spec)
}

pub fn zero_shot_report<F: Scalar>(
    model: &RilsModel<F>,
    tokenizer: &dyn Tokenizer,
    corpus: &Corpus,
    spec: &SyntheticSpec,
    config_hash: &str,
) -> Result<EvalReport> {
    let held = held_out(corpus, spec)?;
    let zs = zero_shot_classify(model, tokenizer, &held.images, &held.labels, &synthetic_prompts(spec))?;
    Ok(EvalReport::new("zero-shot", config_hash)
        .metric("accuracy", zs.accuracy)
        .metric("chance", 1.0 / spec.n_classes() as f64)
        .count("images", held.images.len())
        .count("classes", spec.n_classes()))
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `shots`-per-class linear probe on pre-projection features, trained on a
/// sample of the training split and scored on the held-out split, once per
/// seed.
pub fn low_shot_probe_report<F: Scalar>(
    model: &RilsModel<F>,
    corpus: &Corpus,
    spec: &SyntheticSpec,
    shots: usize,
    seeds: &[u64],
    probe: &ProbeConfig,
    config_hash: &str,
) -> Result<EvalReport> {
    if seeds.is_empty() {
        return Err(Error::Contract("low-shot probe needs at least one seed".into()));
    }
    let (train_idx, _) = split_indices(corpus)?;
    let pool: Vec<(usize, usize)> = train_idx
        .iter()
        .map(|&i| {
            let label = corpus
                .class_id(i)?
                .or_else(|| corpus.caption(i).ok().and_then(|c| spec.parse_caption(c)))
                .ok_or_else(|| Error::Data(format!("entry {i} has no class")))?;
            Ok((i, label))
        })
        .collect::<Result<_>>()?;
    let held = held_out(corpus, spec)?;
    let test_x = encode_images(model, &held.images)?.pooled;

    let mut accs = Vec::with_capacity(seeds.len());
    let mut report = EvalReport::new(format!("{shots}-shot probe"), config_hash);
    for &seed in seeds {
        let chosen = low_shot_sample(&pool, spec.n_classes(), shots, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let train = labelled(corpus, &chosen, spec)?;
        let train_x = encode_images(model, &train.images)?.pooled;
        let r = linear_probe(&train_x, &train.labels, &test_x, &held.labels, probe)?;
        report = report.metric(format!("accuracy_seed{seed}"), r.accuracy);
        accs.push(r.accuracy);
    }
    let (mean, std) = mean_std(&accs);
    Ok(report
        .metric("accuracy_mean", mean)
        .metric("accuracy_std", std)
        .count("train", shots * spec.n_classes())
        .count("test", held.images.len())
        .count("seeds", seeds.len()))
}

/// Held-out image-text retrieval with each image's own caption.
pub fn retrieval_report<F: Scalar>(
    model: &RilsModel<F>,
    tokenizer: &dyn Tokenizer,
    corpus: &Corpus,
    spec: &SyntheticSpec,
    ks: &[usize],
    config_hash: &str,
) -> Result<EvalReport> {
    let held = held_out(corpus, spec)?;
    let zi: Tensor<f64> = encode_images(model, &held.images)?.global;
    let zt = encode_texts(model, tokenizer, &held.captions)?;
    let r = retrieval_recall(&zi, &zt, ks)?;
    let mut report = EvalReport::new("retrieval", config_hash).count("gallery", held.images.len());
    for (i, k) in r.ks.iter().enumerate() {
        report = report
            .metric(format!("i2t_r@{k}"), r.image_to_text[i])
            .metric(format!("t2i_r@{k}"), r.text_to_image[i]);
    }
    Ok(report)
}
