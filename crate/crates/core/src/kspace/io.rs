//! On-disk formats for masks and complex images.
//!
//! * Mask: a directory with `manifest.json` (`width`, `height`, `ratio`,
//!   `seed`) and `columns.bin`, one `u8` (0 or 1) per column.
//! * Complex image: `<stem>.cf32` holding little-endian `f32` pairs
//!   `(re, im)` in row-major order, plus `<stem>.json` with the shape and
//!   intensity scale.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ComplexImage, SamplingMask};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskManifest {
    pub width: usize,
    pub height: usize,
    pub ratio: f64,
    pub seed: u64,
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json { path: path.into(), source: e })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: path.into(), source: e })
}

pub fn save_mask(dir: &Path, mask: &SamplingMask, ratio: f64, seed: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = MaskManifest { width: mask.width(), height: mask.height(), ratio, seed };
    write_json(&dir.join("manifest.json"), &manifest)?;
    let bits: Vec<u8> = mask.kept().iter().map(|&k| k as u8).collect();
    let path = dir.join("columns.bin");
    fs::write(&path, bits).map_err(|e| Error::io(path, e))
}

pub fn load_mask(dir: &Path) -> Result<(SamplingMask, MaskManifest)> {
    let manifest: MaskManifest = read_json(&dir.join("manifest.json"))?;
    let path = dir.join("columns.bin");
    let bits = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bits.len() != manifest.width {
        return Err(Error::load(&path, format!("{} column flags for width {}", bits.len(), manifest.width)));
    }
    if let Some(b) = bits.iter().find(|&&b| b > 1) {
        return Err(Error::load(&path, format!("column flag {b} is not 0 or 1")));
    }
    let mask = SamplingMask::from_columns(manifest.height, bits.iter().map(|&b| b == 1).collect())?;
    Ok((mask, manifest))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexSidecar {
    pub height: usize,
    pub width: usize,
    pub intensity_scale: f64,
}

/// Interleaved little-endian `f32` bytes of an image.
pub fn complex_to_bytes(img: &ComplexImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(img.len() * 8);
    for (re, im) in img.real().iter().zip(img.imag()) {
        out.extend_from_slice(&(*re as f32).to_le_bytes());
        out.extend_from_slice(&(*im as f32).to_le_bytes());
    }
    out
}

pub fn complex_from_bytes(bytes: &[u8], height: usize, width: usize, path: &Path) -> Result<ComplexImage> {
    if bytes.len() != height * width * 8 {
        return Err(Error::load(
            path,
            format!("{} bytes, expected {} for a {height}x{width} complex image", bytes.len(), height * width * 8),
        ));
    }
    let mut re = Vec::with_capacity(height * width);
    let mut im = Vec::with_capacity(height * width);
    for pair in bytes.chunks_exact(8) {
        re.push(f32::from_le_bytes(pair[..4].try_into().unwrap()) as f64);
        im.push(f32::from_le_bytes(pair[4..].try_into().unwrap()) as f64);
    }
    ComplexImage::new(height, width, re, im)
}

fn stem_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("cf32"), stem.with_extension("json"))
}

pub fn write_complex(stem: &Path, img: &ComplexImage) -> Result<()> {
    let (data, side) = stem_paths(stem);
    if let Some(parent) = data.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(&data, complex_to_bytes(img)).map_err(|e| Error::io(&data, e))?;
    write_json(
        &side,
        &ComplexSidecar { height: img.height(), width: img.width(), intensity_scale: img.intensity_scale },
    )
}

pub fn read_complex(stem: &Path) -> Result<ComplexImage> {
    let (data, side) = stem_paths(stem);
    let meta: ComplexSidecar = read_json(&side)?;
    let bytes = fs::read(&data).map_err(|e| Error::io(&data, e))?;
    Ok(complex_from_bytes(&bytes, meta.height, meta.width, &data)?.with_scale(meta.intensity_scale))
}
