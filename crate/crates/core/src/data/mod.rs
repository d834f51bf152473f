//! Image-text pairs: synthetic generation, tokenization, file formats,
//! augmentation and batching.

pub mod augment;
pub mod corpus;
mod image;
pub mod ppm;
pub mod synthetic;
pub mod tokenizer;

use std::collections::BTreeMap;

use rand::seq::{index, IndexedRandom};
use rand::RngCore;

pub use corpus::{load_corpus, write_corpus, Corpus};
pub use image::Image;
pub use synthetic::{generate_corpus, generate_pair, SyntheticSpec};
pub use tokenizer::{TokenSequence, Tokenizer, WordTokenizer};

use crate::error::{Error, Result};
use crate::rng::{derive_rng, splitmix64};

#[derive(Clone, Debug, PartialEq)]
pub struct ImageTextPair {
    pub image: Image,
    pub caption: String,
    /// Class label, used only by evaluation.
    pub class_id: Option<usize>,
}

/// `B` aligned images and token sequences, in index order.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTextBatch {
    pub images: Vec<Image>,
    pub tokens: Vec<TokenSequence>,
    pub captions: Vec<String>,
    pub class_ids: Vec<Option<usize>>,
    pub sample_ids: Vec<u64>,
}

impl ImageTextBatch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `[B, C, H, W]`.
    pub fn image_shape(&self) -> [usize; 4] {
        let (c, h, w) = self
            .images
            .first()
            .map_or((0, 0, 0), |i| (i.channels(), i.height(), i.width()));
        [self.len(), c, h, w]
    }

    /// `[B, max_len]`.
    pub fn token_shape(&self) -> [usize; 2] {
        [self.len(), self.tokens.first().map_or(0, TokenSequence::len)]
    }

    /// All images cut into patches: `B·N` rows of `P·P·C` values.
    pub fn patches(&self, patch: usize) -> Result<Vec<f32>> {
        let mut out = Vec::new();
        for img in &self.images {
            out.extend(img.patchify(patch)?);
        }
        Ok(out)
    }

    /// Keeps the rows at `keep`, in that order.
    pub fn select(&self, keep: &[usize]) -> Self {
        Self {
            images: keep.iter().map(|&i| self.images[i].clone()).collect(),
            tokens: keep.iter().map(|&i| self.tokens[i].clone()).collect(),
            captions: keep.iter().map(|&i| self.captions[i].clone()).collect(),
            class_ids: keep.iter().map(|&i| self.class_ids[i]).collect(),
            sample_ids: keep.iter().map(|&i| self.sample_ids[i]).collect(),
        }
    }
}

/// Whether batch images are augmented.
pub enum BatchMode<'r> {
    Eval,
    Train {
        crop_scale: (f64, f64),
        rng: &'r mut dyn RngCore,
    },
}

pub fn make_batch(
    corpus: &Corpus,
    indices: &[usize],
    tokenizer: &dyn Tokenizer,
    mut mode: BatchMode<'_>,
) -> Result<ImageTextBatch> {
    let mut batch = ImageTextBatch {
        images: Vec::with_capacity(indices.len()),
        tokens: Vec::with_capacity(indices.len()),
        captions: Vec::with_capacity(indices.len()),
        class_ids: Vec::with_capacity(indices.len()),
        sample_ids: Vec::with_capacity(indices.len()),
    };
    for &i in indices {
        let pair = corpus.get(i)?;
        let image = match &mut mode {
            BatchMode::Eval => pair.image,
            BatchMode::Train { crop_scale, rng } => augment::random_resized_crop(&pair.image, *crop_scale, *rng),
        };
        batch.images.push(image);
        batch.tokens.push(tokenizer.encode(&pair.caption));
        batch.captions.push(pair.caption);
        batch.class_ids.push(pair.class_id);
        batch.sample_ids.push(corpus.sample_id(i)?);
    }
    Ok(batch)
}

/// Stable 90/10 split: a sample is held out when its id hashes to 0 mod 10.
pub fn is_held_out(sample_id: u64) -> bool {
    splitmix64(sample_id) % 10 == 0
}

/// Corpus positions of the training and held-out samples.
pub fn split_indices(corpus: &Corpus) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for i in 0..corpus.len() {
        if is_held_out(corpus.sample_id(i)?) {
            held.push(i);
        } else {
            train.push(i);
        }
    }
    Ok((train, held))
}

const SAMPLER_STREAM: u64 = 0x5A4D;

/// Draws training batches as a pure function of `(seed, step)`.
///
/// When every sample is labelled and the batch is no larger than the number
/// of classes, each batch holds one sample from each of `B` distinct classes,
/// so no two captions in a batch describe the same class. Otherwise samples
/// are drawn uniformly without replacement.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    indices: Vec<usize>,
    by_class: Option<Vec<Vec<usize>>>,
    seed: u64,
}

impl BatchSampler {
    pub fn new(corpus: &Corpus, indices: Vec<usize>, seed: u64) -> Result<Self> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut labelled = true;
        for &i in &indices {
            match corpus.class_id(i)? {
                Some(c) => groups.entry(c).or_default().push(i),
                None => labelled = false,
            }
        }
        let by_class = labelled.then(|| groups.into_values().collect());
        Ok(Self { indices, by_class, seed })
    }

    pub fn class_distinct(&self, batch_size: usize) -> bool {
        self.by_class.as_ref().is_some_and(|g| batch_size <= g.len())
    }

    pub fn batch(&self, step: usize, batch_size: usize) -> Result<Vec<usize>> {
        let mut rng = derive_rng(self.seed, &[step as u64, SAMPLER_STREAM]);
        if let Some(groups) = self.by_class.as_ref().filter(|g| batch_size <= g.len()) {
            return Ok(index::sample(&mut rng, groups.len(), batch_size)
                .into_iter()
                .map(|g| *groups[g].choose(&mut rng).expect("non-empty class"))
                .collect());
        }
        if batch_size > self.indices.len() {
            return Err(Error::Data(format!(
                "batch of {batch_size} from {} samples",
                self.indices.len()
            )));
        }
        Ok(index::sample(&mut rng, self.indices.len(), batch_size)
            .into_iter()
            .map(|k| self.indices[k])
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn corpus(n: usize) -> (Corpus, SyntheticSpec) {
        let spec = SyntheticSpec::default().with_seed(2);
        (Corpus::from_pairs(generate_corpus(&spec, n).unwrap()), spec)
    }

    #[test]
    fn singleton_batch_shapes() {
        let (c, spec) = corpus(3);
        let tok = spec.tokenizer(16);
        let b = make_batch(&c, &[2], &tok, BatchMode::Eval).unwrap();
        assert_eq!(b.image_shape(), [1, 3, 32, 32]);
        assert_eq!(b.token_shape(), [1, 16]);
        assert_eq!(b.sample_ids, vec![3]);
    }

    #[test]
    fn eval_mode_is_repeatable() {
        let (c, spec) = corpus(5);
        let tok = spec.tokenizer(16);
        let a = make_batch(&c, &[4, 0, 2], &tok, BatchMode::Eval).unwrap();
        let b = make_batch(&c, &[4, 0, 2], &tok, BatchMode::Eval).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.images[0], c.get(4).unwrap().image);
    }

    #[test]
    fn train_mode_reproducible_with_seed() {
        let (c, spec) = corpus(5);
        let tok = spec.tokenizer(16);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            make_batch(
                &c,
                &[0, 1, 2, 3],
                &tok,
                BatchMode::Train {
                    crop_scale: (0.5, 1.0),
                    rng: &mut rng,
                },
            )
            .unwrap()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7).images, run(8).images);
        assert!(run(7).images.iter().all(|i| i.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn out_of_range_index_errors() {
        let (c, spec) = corpus(2);
        let err = make_batch(&c, &[0, 2], &spec.tokenizer(16), BatchMode::Eval).unwrap_err();
        assert!(matches!(err, Error::Index { index: 2, bound: 2, .. }));
    }

    #[test]
    fn split_is_roughly_ninety_ten_and_stable() {
        let held = (1..=10_000u64).filter(|&id| is_held_out(id)).count();
        assert!((900..1100).contains(&held), "{held}");
        let (c, _) = corpus(50);
        assert_eq!(split_indices(&c).unwrap(), split_indices(&c).unwrap());
    }

    #[test]
    fn sampler_draws_distinct_classes() {
        let (c, _) = corpus(400);
        let s = BatchSampler::new(&c, (0..400).collect(), 3).unwrap();
        assert!(s.class_distinct(16));
        for step in 0..20 {
            let b = s.batch(step, 16).unwrap();
            let mut classes: Vec<_> = b.iter().map(|&i| c.class_id(i).unwrap().unwrap()).collect();
            classes.sort();
            classes.dedup();
            assert_eq!(classes.len(), 16);
        }
        assert_eq!(s.batch(5, 16).unwrap(), s.batch(5, 16).unwrap());
        assert_ne!(s.batch(5, 16).unwrap(), s.batch(6, 16).unwrap());
    }

    #[test]
    fn sampler_falls_back_to_uniform() {
        let (c, _) = corpus(40);
        let s = BatchSampler::new(&c, (0..40).collect(), 3).unwrap();
        let b = s.batch(0, 20).unwrap();
        let mut d = b.clone();
        d.sort();
        d.dedup();
        assert_eq!(d.len(), 20);
        assert!(s.batch(0, 41).is_err());
    }
}
