//! Binary PPM (P6, maxval 255) reading and writing.

use std::path::Path;

use super::Image;
use crate::error::{Error, Result};

pub fn encode_ppm(image: &Image) -> Result<Vec<u8>> {
    if image.channels() != 3 {
        return Err(Error::shape("write_ppm", format!("P6 holds 3 channels, image has {}", image.channels())));
    }
    let (h, w) = (image.height(), image.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((image.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Parse {
                offset: start,
                reason: format!("{what} out of range"),
            })
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut cur = Cursor { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(cur.err("bad magic, expected P6"));
    }
    cur.pos = 2;
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Parse {
            offset: maxval_at,
            reason: format!("maxval {maxval} unsupported, expected 255"),
        });
    }
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(cur.err("expected a single whitespace byte before raster"));
    }
    cur.pos += 1;
    let need = width * height * 3;
    let raster = &bytes[cur.pos..];
    if raster.len() < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            reason: format!("truncated raster: {} of {need} bytes", raster.len()),
        });
    }
    let mut img = Image::filled(3, height, width, 0.0);
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                img.set(c, y, x, raster[(y * width + x) * 3 + c] as f32 / 255.0);
            }
        }
    }
    Ok(img)
}

pub fn write_ppm(image: &Image, path: &Path) -> Result<()> {
    let bytes = encode_ppm(image)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}
