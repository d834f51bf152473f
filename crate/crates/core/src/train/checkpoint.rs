//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RILS"  u32 version
//! u64 config length, config TOML bytes
//! u64 step, u64 optimizer update count
//! u32 tensor count, then per tensor:
//!     u32 name length, name bytes, u32 rank, rank × u64 extents,
//!     f32 values
//! ```
//!
//! Parameters are written first, followed by the optimizer's first and
//! second moments under the names `m/<param>` and `v/<param>`.

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{ParamStore, RilsModel};
use crate::tensor::Tensor;

use super::AdamW;

pub const MAGIC: &[u8; 4] = b"RILS";
pub const VERSION: u32 = 1;

/// A complete, resumable training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: usize,
    pub model: RilsModel<f32>,
    pub optimizer: AdamW<f32>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape().len() as u32);
    for &e in t.shape() {
        put_u64(out, e as u64);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let cfg = self.config.to_toml();
        put_u64(&mut out, cfg.len() as u64);
        out.extend_from_slice(cfg.as_bytes());
        put_u64(&mut out, self.step as u64);
        put_u64(&mut out, self.optimizer.t);
        let params = &self.model.params;
        put_u32(&mut out, 3 * params.len() as u32);
        for p in params.iter() {
            put_tensor(&mut out, &p.name, &p.value);
        }
        for (prefix, moments) in [("m", &self.optimizer.m), ("v", &self.optimizer.v)] {
            for (p, t) in params.iter().zip(moments) {
                put_tensor(&mut out, &format!("{prefix}/{}", p.name), t);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take("magic", 4)? != MAGIC {
            return Err(Error::Checkpoint {
                field: "magic".into(),
                reason: "not a checkpoint file".into(),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint {
                field: "version".into(),
                reason: format!("found {version}, this build reads {VERSION}"),
            });
        }
        let len = r.len("config length")?;
        let text = std::str::from_utf8(r.take("config", len)?).map_err(|e| Error::Checkpoint {
            field: "config".into(),
            reason: e.to_string(),
        })?;
        let config = RunConfig::from_toml(text).map_err(|e| Error::Checkpoint {
            field: "config".into(),
            reason: e.to_string(),
        })?;
        let step = r.u64("step")? as usize;
        let t = r.u64("optimizer step")?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count);
        for i in 0..count {
            tensors.push(r.tensor(i)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint {
                field: "trailer".into(),
                reason: format!("{} unexpected bytes after the last tensor", bytes.len() - r.pos),
            });
        }
        if count % 3 != 0 {
            return Err(Error::Checkpoint {
                field: "tensor count".into(),
                reason: format!("{count} is not parameters plus two moments each"),
            });
        }
        let n = count / 3;
        let vocab = tensors
            .iter()
            .find(|(name, _)| name == "text.token")
            .map(|(_, t)| t.shape()[0])
            .ok_or_else(|| Error::Checkpoint {
                field: "text.token".into(),
                reason: "missing".into(),
            })?;
        let template: RilsModel<f32> = RilsModel::init(&config.model, vocab, config.loss.space, 0).cast();
        if template.params.len() != n {
            return Err(Error::Checkpoint {
                field: "tensor count".into(),
                reason: format!("{n} parameters, configuration implies {}", template.params.len()),
            });
        }
        let mut params = ParamStore::default();
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for (i, p) in template.params.iter().enumerate() {
            for (slot, expect) in [(i, p.name.clone()), (n + i, format!("m/{}", p.name)), (2 * n + i, format!("v/{}", p.name))] {
                let (name, t) = &tensors[slot];
                if *name != expect || t.shape() != p.value.shape() {
                    return Err(Error::Checkpoint {
                        field: expect,
                        reason: format!("found {name} {:?}, expected {:?}", t.shape(), p.value.shape()),
                    });
                }
            }
            params.push(p.name.clone(), tensors[i].1.clone(), p.decay);
            m.push(tensors[n + i].1.clone());
            v.push(tensors[2 * n + i].1.clone());
        }
        let mut optimizer = AdamW::new(&params, &config.optim);
        optimizer.t = t;
        optimizer.m = m;
        optimizer.v = v;
        Ok(Self {
            model: RilsModel {
                config: config.model.clone(),
                vocab_size: vocab,
                space: config.loss.space,
                params,
            },
            config,
            step,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, field: &str, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint {
                field: field.into(),
                reason: format!("truncated: need {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(field, 4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(field, 8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, field: &str) -> Result<usize> {
        let v = self.u64(field)?;
        usize::try_from(v).map_err(|_| Error::Checkpoint {
            field: field.into(),
            reason: format!("{v} does not fit in memory"),
        })
    }

    fn tensor(&mut self, i: usize) -> Result<(String, Tensor<f32>)> {
        let field = format!("tensor {i}");
        let name_len = self.u32(&format!("{field} name length"))? as usize;
        let name = std::str::from_utf8(self.take(&format!("{field} name"), name_len)?)
            .map_err(|e| Error::Checkpoint {
                field: format!("{field} name"),
                reason: e.to_string(),
            })?
            .to_string();
        let rank = self.u32(&format!("{name} rank"))? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint {
                field: format!("{name} rank"),
                reason: format!("implausible rank {rank}"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.len(&format!("{name} extents"))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Checkpoint {
                field: format!("{name} extents"),
                reason: format!("{shape:?} overflows"),
            })?;
        let raw = self.take(&format!("{name} values"), numel)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).expect("extents match value count");
        Ok((name, t))
    }
}
