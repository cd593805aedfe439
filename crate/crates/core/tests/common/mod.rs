//! Shared fixtures for the integration tests.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use tdvmm::experiment::ExperimentConfig;

fn idx_images(n: usize, side: usize, pixel: impl Fn(usize, usize, usize) -> u8) -> Vec<u8> {
    let mut out = vec![0, 0, 8, 3];
    for d in [n, side, side] {
        out.extend((d as u32).to_be_bytes());
    }
    for k in 0..n {
        for r in 0..side {
            for c in 0..side {
                out.push(pixel(k, r, c));
            }
        }
    }
    out
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 8, 1];
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// MNIST-shaped IDX files whose class is a bright 7x7 block at one of the
/// sixteen 4x4-pooled positions, with a little deterministic texture.
pub fn write_fake_mnist(dir: &Path, train: usize, test: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for (prefix, n, salt) in [("train", train, 0usize), ("t10k", test, 7)] {
        let labels: Vec<u8> = (0..n).map(|k| (k % 10) as u8).collect();
        let img = idx_images(n, 28, |k, r, c| {
            let y = labels[k] as usize;
            let (br, bc) = (y / 4, y % 4);
            let h = (k * 28 * 28 + r * 28 + c + salt) as u64;
            let texture = (h.wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 57) as u8;
            if r / 7 == br && c / 7 == bc {
                128 + texture
            } else {
                texture
            }
        });
        std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), img).unwrap();
        std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), idx_labels(&labels)).unwrap();
    }
}

/// Small, fast configuration over fake data in `dir`.
pub fn small_config(data: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        data_dir: Some(data.to_path_buf()),
        ..ExperimentConfig::default()
    };
    c.training.epochs = 10;
    c.training.calibration_samples = 64;
    c.extraction.seeds = 2;
    c.extraction.methods = vec![tdvmm::extraction::WemMethod::Wem3, tdvmm::extraction::WemMethod::Wem4];
    c.extraction.stimuli.count = 96;
    c.extraction.test_count = 64;
    c.lut.check_samples = 500;
    c
}

/// Workspace MNIST directory: `$TDVMM_DATA_DIR`, else `<workspace>/data/mnist`.
pub fn real_mnist_dir() -> PathBuf {
    match std::env::var_os("TDVMM_DATA_DIR") {
        Some(d) if !d.is_empty() => PathBuf::from(d),
        _ => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"),
    }
}

/// Every file under `dir` except the manifest, as (relative path, bytes).
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                if rel != "manifest.json" {
                    out.push((rel, std::fs::read(&p).unwrap()));
                }
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out
}
