//! Image-caption datasets held in memory or behind a manifest file.

use std::path::{Path, PathBuf};

use super::synthetic::SyntheticSpec;
use super::{ppm, Image, ImageTextPair};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.tsv";

#[derive(Clone, Debug)]
enum Source {
    Memory(Image),
    File(PathBuf),
}

#[derive(Clone, Debug)]
struct Entry {
    id: u64,
    source: Source,
    caption: String,
    class_id: Option<usize>,
}

/// An immutable, indexable collection of image-caption pairs.
///
/// Manifest-backed corpora decode images on access. Every sample carries a
/// stable id: its 1-based manifest line number, or position + 1 in memory.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    entries: Vec<Entry>,
}

impl Corpus {
    pub fn from_pairs(pairs: Vec<ImageTextPair>) -> Self {
        let entries = pairs
            .into_iter()
            .enumerate()
            .map(|(i, p)| Entry {
                id: i as u64 + 1,
                source: Source::Memory(p.image),
                caption: p.caption,
                class_id: p.class_id,
            })
            .collect();
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn entry(&self, index: usize) -> Result<&Entry> {
        self.entries.get(index).ok_or(Error::Index {
            op: "corpus",
            index,
            bound: self.entries.len(),
        })
    }

    pub fn get(&self, index: usize) -> Result<ImageTextPair> {
        let e = self.entry(index)?;
        let image = match &e.source {
            Source::Memory(img) => img.clone(),
            Source::File(path) => ppm::read_ppm(path)?,
        };
        Ok(ImageTextPair {
            image,
            caption: e.caption.clone(),
            class_id: e.class_id,
        })
    }

    pub fn caption(&self, index: usize) -> Result<&str> {
        Ok(&self.entry(index)?.caption)
    }

    pub fn class_id(&self, index: usize) -> Result<Option<usize>> {
        Ok(self.entry(index)?.class_id)
    }

    pub fn sample_id(&self, index: usize) -> Result<u64> {
        Ok(self.entry(index)?.id)
    }

    /// Assigns class labels by parsing captions against `spec`.
    pub fn label_with(mut self, spec: &SyntheticSpec) -> Self {
        for e in &mut self.entries {
            e.class_id = spec.parse_caption(&e.caption);
        }
        self
    }

    /// Decodes every file-backed image into memory.
    pub fn into_memory(self) -> Result<Self> {
        let entries = self
            .entries
            .into_iter()
            .map(|mut e| {
                if let Source::File(path) = &e.source {
                    e.source = Source::Memory(ppm::read_ppm(path)?);
                }
                Ok(e)
            })
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST)
    } else {
        path.to_path_buf()
    }
}

/// Reads a tab-separated `image_path<TAB>caption` manifest. `path` may be the
/// manifest itself or the directory containing `manifest.tsv`; image paths are
/// relative to the manifest's directory. Images are not decoded here.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let manifest = manifest_path(path);
    let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let root = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let bad = |line: usize, reason: String| Error::Manifest {
        path: manifest.clone(),
        line,
        reason,
    };
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            return Err(bad(line, "blank line".into()));
        }
        let (rel, caption) = raw
            .split_once('\t')
            .ok_or_else(|| bad(line, "expected `image_path<TAB>caption`".into()))?;
        if rel.is_empty() || caption.contains('\t') {
            return Err(bad(line, "expected exactly two non-empty fields".into()));
        }
        let file = root.join(rel);
        if !file.is_file() {
            return Err(bad(line, format!("image {} not found", file.display())));
        }
        entries.push(Entry {
            id: line as u64,
            source: Source::File(file),
            caption: caption.to_string(),
            class_id: None,
        });
    }
    Ok(Corpus { entries })
}

/// Writes `images/NNNNNN.ppm` files plus `manifest.tsv` under `dir`.
pub fn write_corpus(pairs: &[ImageTextPair], dir: &Path) -> Result<PathBuf> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut manifest = String::new();
    for (i, p) in pairs.iter().enumerate() {
        if p.caption.contains(['\t', '\n']) {
            return Err(Error::Data(format!("caption {i} contains a tab or newline")));
        }
        let rel = format!("images/{i:06}.ppm");
        ppm::write_ppm(&p.image, &dir.join(&rel))?;
        manifest.push_str(&rel);
        manifest.push('\t');
        manifest.push_str(&p.caption);
        manifest.push('\n');
    }
    let path = dir.join(MANIFEST);
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::generate_corpus;

    #[test]
    fn two_line_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = generate_corpus(&SyntheticSpec::default(), 2).unwrap();
        write_corpus(&pairs, dir.path()).unwrap();
        let c = load_corpus(dir.path()).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.sample_id(1).unwrap(), 2);
        assert_eq!(c.caption(0).unwrap(), pairs[0].caption);
    }

    #[test]
    fn blank_line_names_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = generate_corpus(&SyntheticSpec::default(), 2).unwrap();
        let m = write_corpus(&pairs, dir.path()).unwrap();
        let text = std::fs::read_to_string(&m).unwrap();
        let (first, rest) = text.split_once('\n').unwrap();
        std::fs::write(&m, format!("{first}\n\n{rest}")).unwrap();
        match load_corpus(&m) {
            Err(Error::Manifest { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected manifest error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_and_missing_lines() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join(MANIFEST);
        std::fs::write(&m, "no tab here\n").unwrap();
        assert!(matches!(load_corpus(&m), Err(Error::Manifest { line: 1, .. })));
        std::fs::write(&m, "images/missing.ppm\ta red square\n").unwrap();
        assert!(matches!(load_corpus(&m), Err(Error::Manifest { line: 1, .. })));
    }

    #[test]
    fn written_corpus_reloads_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec::default().with_seed(8);
        let pairs = generate_corpus(&spec, 12).unwrap();
        write_corpus(&pairs, dir.path()).unwrap();
        let c = load_corpus(dir.path()).unwrap().label_with(&spec);
        for (i, p) in pairs.iter().enumerate() {
            let q = c.get(i).unwrap();
            assert_eq!(q.caption, p.caption);
            assert_eq!(q.class_id, p.class_id);
            for (a, b) in p.image.data().iter().zip(q.image.data()) {
                assert!((a - b).abs() <= 1.0 / 255.0);
            }
        }
    }

    #[test]
    fn out_of_range_index() {
        let c = Corpus::from_pairs(Vec::new());
        assert!(matches!(c.get(0), Err(Error::Index { index: 0, bound: 0, .. })));
    }
}
