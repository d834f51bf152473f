//! Synthetic colored-shape corpus with templated captions.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Image, ImageTextPair, WordTokenizer};
use crate::error::{Error, Result};

/// Smallest shape extent in pixels on any canvas.
pub const MIN_EXTENT: usize = 4;

/// Shape extents are drawn uniformly from this fraction range of the canvas.
pub const EXTENT_RANGE: (f32, f32) = (0.5, 0.75);

/// Caption and prompt templates; `{color}` and `{shape}` are substituted.
pub const TEMPLATES: [&str; 3] = [
    "a photo of a {color} {shape}",
    "a {color} {shape}",
    "an image of a {color} {shape}",
];

const PALETTE: [(&str, [f32; 3]); 8] = [
    ("red", [0.9, 0.15, 0.1]),
    ("green", [0.15, 0.8, 0.2]),
    ("blue", [0.15, 0.3, 0.95]),
    ("yellow", [0.95, 0.9, 0.15]),
    ("magenta", [0.9, 0.2, 0.85]),
    ("cyan", [0.2, 0.9, 0.9]),
    ("white", [0.95, 0.95, 0.95]),
    ("orange", [1.0, 0.55, 0.1]),
];

const SHAPES: [&str; 5] = ["square", "circle", "triangle", "cross", "diamond"];

/// Parameters of the synthetic corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub shapes: Vec<String>,
    pub colors: Vec<String>,
    pub canvas: usize,
    pub templates: Vec<String>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// Four shapes in four colors: 16 classes on a 32-pixel canvas.
    fn default() -> Self {
        Self {
            shapes: ["square", "circle", "triangle", "cross"].map(String::from).to_vec(),
            colors: ["red", "green", "blue", "yellow"].map(String::from).to_vec(),
            canvas: 32,
            templates: TEMPLATES.map(String::from).to_vec(),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_canvas(mut self, canvas: usize) -> Self {
        self.canvas = canvas;
        self
    }

    pub fn n_classes(&self) -> usize {
        self.shapes.len() * self.colors.len()
    }

    pub fn validate(&self) -> Result<()> {
        if (self.canvas as f32 * EXTENT_RANGE.0) < MIN_EXTENT as f32 {
            return Err(Error::config(
                "canvas",
                format!("{} px canvas cannot hold a {MIN_EXTENT} px shape", self.canvas),
            ));
        }
        for s in &self.shapes {
            if !SHAPES.contains(&s.as_str()) {
                return Err(Error::config("shapes", format!("no rasterizer for `{s}`")));
            }
        }
        for c in &self.colors {
            if !PALETTE.iter().any(|(n, _)| n == c) {
                return Err(Error::config("colors", format!("unknown color `{c}`")));
            }
        }
        if self.shapes.is_empty() || self.colors.is_empty() || self.templates.is_empty() {
            return Err(Error::config("spec", "shapes, colors and templates must be non-empty"));
        }
        Ok(())
    }

    /// `class_id = color_index · |shapes| + shape_index`.
    pub fn class_id(&self, color: usize, shape: usize) -> usize {
        color * self.shapes.len() + shape
    }

    pub fn class_parts(&self, class_id: usize) -> (&str, &str) {
        let n = self.shapes.len();
        (&self.colors[class_id / n], &self.shapes[class_id % n])
    }

    /// Human-readable class names, e.g. `"red square"`.
    pub fn class_names(&self) -> Vec<String> {
        (0..self.n_classes())
            .map(|c| {
                let (color, shape) = self.class_parts(c);
                format!("{color} {shape}")
            })
            .collect()
    }

    pub fn fill_template(template: &str, color: &str, shape: &str) -> String {
        template.replace("{color}", color).replace("{shape}", shape)
    }

    /// Recovers the class from a caption by its color and shape words.
    pub fn parse_caption(&self, caption: &str) -> Option<usize> {
        let words: Vec<String> = caption.split_whitespace().map(str::to_lowercase).collect();
        let color = self.colors.iter().position(|c| words.contains(c))?;
        let shape = self.shapes.iter().position(|s| words.contains(s))?;
        Some(self.class_id(color, shape))
    }

    /// Tokenizer covering every word the templates can produce.
    pub fn tokenizer(&self, max_len: usize) -> WordTokenizer {
        let mut words: Vec<String> = self
            .templates
            .iter()
            .flat_map(|t| t.split_whitespace())
            .filter(|w| !w.starts_with('{'))
            .map(String::from)
            .collect();
        words.extend(self.colors.iter().cloned());
        words.extend(self.shapes.iter().cloned());
        WordTokenizer::new(words, max_len)
    }
}

fn inside(shape: &str, dx: f32, dy: f32, half: f32) -> bool {
    // (dx, dy) is the offset from the shape centre.
    match shape {
        "square" => dx.abs() <= half && dy.abs() <= half,
        "circle" => dx * dx + dy * dy <= half * half,
        "triangle" => {
            // Upright isosceles triangle with base at dy = +half.
            let t = (dy + half) / (2.0 * half);
            (0.0..=1.0).contains(&t) && dx.abs() <= t * half
        }
        "cross" => {
            let arm = half / 3.0;
            (dx.abs() <= arm && dy.abs() <= half) || (dy.abs() <= arm && dx.abs() <= half)
        }
        "diamond" => dx.abs() + dy.abs() <= half,
        _ => false,
    }
}

/// Draws one shape of one color at a random position and scale on a dark
/// canvas, captioned from a random template.
pub fn generate_pair<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Result<ImageTextPair> {
    spec.validate()?;
    let canvas = spec.canvas;
    let color = rng.random_range(0..spec.colors.len());
    let shape = rng.random_range(0..spec.shapes.len());
    let class_id = spec.class_id(color, shape);
    let extent = rng.random_range(canvas as f32 * EXTENT_RANGE.0..=canvas as f32 * EXTENT_RANGE.1);
    let half = extent / 2.0;
    let cx = rng.random_range(half..=canvas as f32 - half);
    let cy = rng.random_range(half..=canvas as f32 - half);
    let rgb = PALETTE
        .iter()
        .find(|(n, _)| *n == spec.colors[color])
        .map(|(_, v)| *v)
        .expect("validated color");
    let jitter: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.08..0.08));
    let background = rng.random_range(0.02..0.15f32);

    let mut img = Image::filled(3, canvas, canvas, 0.0);
    for y in 0..canvas {
        for x in 0..canvas {
            let noise: f32 = rng.random_range(-0.03..0.03);
            let hit = inside(&spec.shapes[shape], x as f32 + 0.5 - cx, y as f32 + 0.5 - cy, half);
            for c in 0..3 {
                let v = if hit { rgb[c] + jitter[c] } else { background };
                img.set(c, y, x, (v + noise).clamp(0.0, 1.0));
            }
        }
    }
    let template = spec.templates.choose(rng).expect("non-empty templates");
    let (cname, sname) = spec.class_parts(class_id);
    let caption = SyntheticSpec::fill_template(template, cname, sname);
    Ok(ImageTextPair {
        image: img,
        caption,
        class_id: Some(class_id),
    })
}

/// Generates `n` pairs; a pure function of `(spec, n)`.
pub fn generate_corpus(spec: &SyntheticSpec, n: usize) -> Result<Vec<ImageTextPair>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..n).map(|_| generate_pair(spec, &mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Tokenizer;

    #[test]
    fn same_seed_same_pair() {
        let spec = SyntheticSpec::default();
        let a = generate_pair(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = generate_pair(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn captions_parse_back_to_class() {
        let spec = SyntheticSpec::default();
        for class in 0..spec.n_classes() {
            let (c, s) = spec.class_parts(class);
            for t in &spec.templates {
                let caption = SyntheticSpec::fill_template(t, c, s);
                assert_eq!(spec.parse_caption(&caption), Some(class), "{caption}");
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let p = generate_pair(&spec, &mut rng).unwrap();
            assert_eq!(spec.parse_caption(&p.caption), p.class_id);
        }
    }

    #[test]
    fn all_classes_appear_in_1000_draws() {
        let spec = SyntheticSpec::default().with_seed(3);
        let corpus = generate_corpus(&spec, 1000).unwrap();
        let mut seen = vec![0usize; spec.n_classes()];
        for p in &corpus {
            seen[p.class_id.unwrap()] += 1;
        }
        assert!(seen.iter().all(|&c| c > 0), "{seen:?}");
    }

    #[test]
    fn pixels_in_unit_range_and_shape_visible() {
        let spec = SyntheticSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let p = generate_pair(&spec, &mut rng).unwrap();
            assert!(p.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let bright = p.image.data().iter().filter(|&&v| v > 0.5).count();
            assert!(bright > 10, "shape too faint: {bright}");
        }
    }

    #[test]
    fn tiny_canvas_rejected() {
        let spec = SyntheticSpec::default().with_canvas(6);
        assert!(matches!(generate_pair(&spec, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Config { .. })));
    }

    #[test]
    fn every_caption_tokenizes_with_one_eot() {
        let spec = SyntheticSpec::default();
        let tok = spec.tokenizer(16);
        for class in 0..spec.n_classes() {
            let (c, s) = spec.class_parts(class);
            for t in &spec.templates {
                let seq = tok.encode(&SyntheticSpec::fill_template(t, c, s));
                seq.validate().unwrap();
                assert!(!seq.ids.contains(&crate::data::tokenizer::UNK));
            }
        }
    }
}
