//! Binary (P5) greymaps.

use std::path::Path;

use evfuse_core::metrics::BinaryMask;
use evfuse_core::tensor::Tensor;

use crate::error::{CliError, Result};
use crate::fsio;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Greymap {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u16>,
}

impl Greymap {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval < 256 {
            out.extend(self.pixels.iter().map(|&p| p as u8));
        } else {
            out.extend(self.pixels.iter().flat_map(|p| p.to_be_bytes()));
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, String> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated header".into());
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "header is not ASCII")?.to_string());
        }
        if fields[0] != "P5" {
            return Err(format!("expected P5, found {}", fields[0]));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header number {s}"));
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval == 0 || maxval > 65535 {
            return Err(format!("maxval {maxval} out of range"));
        }
        pos += 1;
        let n = width * height;
        let wide = maxval > 255;
        let data = bytes.get(pos..).unwrap_or(&[]);
        if data.len() != n * if wide { 2 } else { 1 } {
            return Err(format!("pixel data is {} bytes for {width}x{height}", data.len()));
        }
        let pixels: Vec<u16> = if wide {
            data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
        } else {
            data.iter().map(|&b| b as u16).collect()
        };
        if pixels.iter().any(|&p| p as usize > maxval) {
            return Err("pixel above maxval".into());
        }
        Ok(Self { width, height, maxval: maxval as u16, pixels })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fsio::read(path)?).map_err(|e| CliError::format(path, e))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, &self.encode())
    }
}

/// Linear 16-bit quantisation of an `[H, W]` image; returns the map and the
/// `(lo, hi)` values of codes 0 and 65535.
pub fn quantize16(img: &Tensor) -> (Greymap, f64, f64) {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let lo = img.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = img.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let pixels = img
        .data()
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span * 65535.0 + 0.5).floor().clamp(0.0, 65535.0) as u16 } else { 0 })
        .collect();
    (Greymap { width: w, height: h, maxval: 65535, pixels }, lo, hi)
}

pub fn dequantize(g: &Greymap, lo: f64, hi: f64) -> Tensor {
    let scale = (hi - lo) / g.maxval as f64;
    Tensor::new(vec![g.height, g.width], g.pixels.iter().map(|&p| lo + p as f64 * scale).collect()).expect("greymap dims are nonzero")
}

/// Values in `[0, 1]` as 8-bit codes `floor(255 v + 0.5)`.
pub fn unit8(values: &[f64], height: usize, width: usize) -> Greymap {
    let pixels = values.iter().map(|&v| (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u16).collect();
    Greymap { width, height, maxval: 255, pixels }
}

/// Class indices spread over `0..=255`; two classes map to 0 and 255.
pub fn labels8(labels: &[usize], classes: usize, height: usize, width: usize) -> Greymap {
    let step = 255 / (classes.max(2) - 1);
    Greymap { width, height, maxval: 255, pixels: labels.iter().map(|&c| (c * step) as u16).collect() }
}

pub fn mask8(m: &BinaryMask) -> Greymap {
    Greymap {
        width: m.width(),
        height: m.height(),
        maxval: 255,
        pixels: m.data().iter().map(|&b| if b { 255 } else { 0 }).collect(),
    }
}

/// Nonzero pixels are foreground.
pub fn to_mask(g: &Greymap) -> BinaryMask {
    BinaryMask::from_bools(g.height, g.width, g.pixels.iter().map(|&p| p != 0).collect()).expect("greymap dims match its pixels")
}
