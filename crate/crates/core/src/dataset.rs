//! MNIST IDX ingestion, 28x28 -> 4x4 average pooling, and pulse encoding.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::timeslot::PulseVector;
use crate::vmm::QuantizerSpec;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

const CACHE_MAGIC: &[u8; 8] = b"TDVMM4X4";
const CACHE_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Grayscale images with intensities in [0, 1], stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    pub width: usize,
    pub height: usize,
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn take(&self, n: usize) -> ImageDataset {
        let n = n.min(self.len());
        ImageDataset {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone()
        }
    }

    pub fn mean_intensity(&self) -> f64 {
        let total: f64 = self.images.iter().flatten().sum();
        total / (self.len() * self.pixels()).max(1) as f64
    }
}

fn format_err(path: &Path, offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        message: message.into(),
    }
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(path, at as u64, "file truncated inside header"))
}

/// Parses an IDX image file: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(format_err(path, 0, format!("bad image magic {magic:#010x}")));
    }
    let n = read_u32(bytes, 4, path)? as usize;
    let rows = read_u32(bytes, 8, path)? as usize;
    let cols = read_u32(bytes, 12, path)? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(format_err(
            path,
            bytes.len() as u64,
            format!("truncated: expected {need} pixel bytes, found {}", body.len()),
        ));
    }
    Ok((n, rows, cols, body[..need].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(format_err(path, 0, format!("bad label magic {magic:#010x}")));
    }
    let n = read_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(format_err(
            path,
            bytes.len() as u64,
            format!("truncated: expected {n} labels, found {}", body.len()),
        ));
    }
    if let Some(pos) = body[..n].iter().position(|&l| l > 9) {
        return Err(format_err(path, 8 + pos as u64, "label outside 0..=9"));
    }
    Ok(body[..n].to_vec())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an IDX image/label file pair; intensities are scaled to [0, 1].
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<ImageDataset> {
    let img_bytes = read_file(images)?;
    let lbl_bytes = read_file(labels)?;
    let (n, rows, cols, pixels) = parse_idx_images(&img_bytes, images)?;
    let labels_v = parse_idx_labels(&lbl_bytes, labels)?;
    if labels_v.len() != n {
        return Err(format_err(
            labels,
            4,
            format!("{} labels for {n} images in {}", labels_v.len(), images.display()),
        ));
    }
    let px = rows * cols;
    let images_v = if px == 0 {
        vec![Vec::new(); n]
    } else {
        pixels
            .chunks_exact(px)
            .map(|c| c.iter().map(|&b| b as f64 / 255.0).collect())
            .collect()
    };
    Ok(ImageDataset {
        width: cols,
        height: rows,
        images: images_v,
        labels: labels_v,
        split,
    })
}

/// Standard MNIST file names inside `dir`.
pub fn mnist_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let p = split.prefix();
    (
        dir.join(format!("{p}-images-idx3-ubyte")),
        dir.join(format!("{p}-labels-idx1-ubyte")),
    )
}

pub fn load_mnist(dir: &Path, split: Split) -> Result<ImageDataset> {
    let (i, l) = mnist_paths(dir, split);
    load_idx(&i, &l, split)
}

/// Average pooling over non-overlapping `factor x factor` blocks.
pub fn average_pool(ds: &ImageDataset, factor: usize) -> Result<ImageDataset> {
    if factor == 0 || !ds.width.is_multiple_of(factor) || !ds.height.is_multiple_of(factor) {
        return Err(Error::arg(format!(
            "{}x{} images cannot be pooled by {factor}",
            ds.height, ds.width
        )));
    }
    let (ow, oh) = (ds.width / factor, ds.height / factor);
    let area = (factor * factor) as f64;
    let images = ds
        .images
        .iter()
        .map(|img| {
            let mut out = vec![0.0; ow * oh];
            for r in 0..ds.height {
                for c in 0..ds.width {
                    out[(r / factor) * ow + c / factor] += img[r * ds.width + c];
                }
            }
            out.iter_mut().for_each(|v| *v = (*v / area).clamp(0.0, 1.0));
            out
        })
        .collect();
    Ok(ImageDataset {
        width: ow,
        height: oh,
        images,
        labels: ds.labels.clone(),
        split: ds.split,
    })
}

pub fn downsample_4x4(ds: &ImageDataset) -> Result<ImageDataset> {
    if ds.width != 28 || ds.height != 28 {
        return Err(Error::arg(format!(
            "expected 28x28 images, got {}x{}",
            ds.height, ds.width
        )));
    }
    average_pool(ds, 7)
}

/// Encodes 4x4 images as 16-wordline pulse vectors, row-major.
pub fn encode_pulses(
    ds: &ImageDataset,
    quantizer: &QuantizerSpec,
    time_unit: f64,
) -> Result<Vec<PulseVector>> {
    if ds.width != 4 || ds.height != 4 {
        return Err(Error::arg(format!(
            "pulse encoding needs 4x4 images, got {}x{}",
            ds.height, ds.width
        )));
    }
    quantizer.validate()?;
    ds.images
        .iter()
        .map(|img| encode_image(img, quantizer, time_unit))
        .collect()
}

pub fn encode_image(img: &[f64], quantizer: &QuantizerSpec, time_unit: f64) -> Result<PulseVector> {
    PulseVector::from_codes(img.iter().map(|&v| quantizer.code(v)).collect(), time_unit)
}

fn cache_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("tdvmm-4x4-{}.cache", split.name()))
}

fn source_checksum(images: &[u8], labels: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(images);
    h.update(labels);
    let mut out = [0u8; 32];
    out.copy_from_slice(h.finalize().as_slice());
    out
}

fn encode_cache(ds: &ImageDataset, checksum: &[u8; 32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(45 + ds.len() * (1 + 16 * 8));
    out.extend_from_slice(CACHE_MAGIC);
    out.push(CACHE_VERSION);
    out.extend_from_slice(checksum);
    out.extend_from_slice(&(ds.len() as u32).to_le_bytes());
    for (img, &label) in ds.images.iter().zip(&ds.labels) {
        out.push(label);
        for v in img {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_cache(bytes: &[u8], checksum: &[u8; 32], split: Split) -> Option<ImageDataset> {
    let header = 8 + 1 + 32 + 4;
    if bytes.len() < header
        || &bytes[..8] != CACHE_MAGIC
        || bytes[8] != CACHE_VERSION
        || &bytes[9..41] != checksum
    {
        return None;
    }
    let n = u32::from_le_bytes(bytes[41..45].try_into().ok()?) as usize;
    let rec = 1 + 16 * 8;
    let body = &bytes[header..];
    if body.len() != n * rec {
        return None;
    }
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for r in body.chunks_exact(rec) {
        labels.push(r[0]);
        images.push(
            r[1..]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect(),
        );
    }
    Some(ImageDataset {
        width: 4,
        height: 4,
        images,
        labels,
        split,
    })
}

/// 4x4 MNIST split, pooled from the IDX files in `dir`. The pooled form is
/// cached next to the sources, keyed by their SHA-256.
pub fn load_mnist_4x4(dir: &Path, split: Split) -> Result<ImageDataset> {
    let (ip, lp) = mnist_paths(dir, split);
    let img_bytes = read_file(&ip)?;
    let lbl_bytes = read_file(&lp)?;
    let checksum = source_checksum(&img_bytes, &lbl_bytes);
    let cache = cache_path(dir, split);
    if let Ok(bytes) = std::fs::read(&cache) {
        if let Some(ds) = decode_cache(&bytes, &checksum, split) {
            return Ok(ds);
        }
        log::info!("stale 4x4 cache {}, rebuilding", cache.display());
    }
    let full = load_idx(&ip, &lp, split)?;
    let small = downsample_4x4(&full)?;
    if let Err(e) = std::fs::write(&cache, encode_cache(&small, &checksum)) {
        log::warn!("could not write 4x4 cache {}: {e}", cache.display());
    }
    Ok(small)
}
