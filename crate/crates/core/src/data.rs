//! Procedural image corpus and its on-disk layout: one CMT1 file per image
//! plus a manifest of SHA-256 digests that is verified on load.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{ComaError, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "coma-dataset 1";

/// Kinds of procedural image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Gradient,
    Checkerboard,
    Blobs,
    Grating,
}

const PATTERNS: [Pattern; 4] = [Pattern::Gradient, Pattern::Checkerboard, Pattern::Blobs, Pattern::Grating];

fn color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// Image `index` of the corpus for `seed`: `3 × size × size`, values in `[0, 1]`.
pub fn synth_image(seed: u64, index: u64, size: usize) -> Tensor<f32> {
    let mut rng = stream_rng(seed, Stream::Data, index);
    let pattern = PATTERNS[rng.random_range(0..PATTERNS.len())];
    let s = size as f64;
    let mut img = vec![0.0_f64; 3 * size * size];
    let mut paint = |f: &mut dyn FnMut(f64, f64, usize) -> f64| {
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    img[(c * size + y) * size + x] = f((x as f64 + 0.5) / s, (y as f64 + 0.5) / s, c);
                }
            }
        }
    };
    match pattern {
        Pattern::Gradient => {
            let angle = rng.random_range(0.0..2.0 * PI);
            let (a, b) = (color(&mut rng), color(&mut rng));
            let (dx, dy) = (angle.cos(), angle.sin());
            let span = dx.abs() + dy.abs();
            paint(&mut |x, y, c| {
                let t = ((x - 0.5) * dx + (y - 0.5) * dy) / span + 0.5;
                a[c] + (b[c] - a[c]) * t
            });
        }
        Pattern::Checkerboard => {
            let cells = [2.0, 4.0, 8.0][rng.random_range(0..3)];
            let (a, b) = (color(&mut rng), color(&mut rng));
            let (ox, oy) = (rng.random::<f64>(), rng.random::<f64>());
            paint(&mut |x, y, c| {
                let parity = ((x * cells + ox).floor() + (y * cells + oy).floor()) as i64 % 2;
                if parity == 0 {
                    a[c]
                } else {
                    b[c]
                }
            });
        }
        Pattern::Blobs => {
            let background = color(&mut rng);
            let blobs: Vec<([f64; 2], f64, [f64; 3])> = (0..rng.random_range(1..=4))
                .map(|_| ([rng.random(), rng.random()], rng.random_range(0.05..0.25), color(&mut rng)))
                .collect();
            paint(&mut |x, y, c| {
                let mut v = background[c];
                for (centre, sigma, col) in &blobs {
                    let r2 = (x - centre[0]).powi(2) + (y - centre[1]).powi(2);
                    let w = (-r2 / (2.0 * sigma * sigma)).exp();
                    v = v * (1.0 - w) + col[c] * w;
                }
                v
            });
        }
        Pattern::Grating => {
            let freq = rng.random_range(1.0..6.0);
            let angle = rng.random_range(0.0..PI);
            let phase = color(&mut rng).map(|p| p * 2.0 * PI);
            let (mean, amp) = (color(&mut rng), color(&mut rng));
            let (dx, dy) = (angle.cos(), angle.sin());
            paint(&mut |x, y, c| {
                let u = 2.0 * PI * freq * (x * dx + y * dy) + phase[c];
                mean[c] + 0.5 * amp[c] * u.sin()
            });
        }
    }
    let data = img.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    Tensor::from_vec([3, size, size], data).expect("shape matches data")
}

pub fn synth_dataset(seed: u64, count: usize, size: usize) -> Vec<Tensor<f32>> {
    (0..count as u64).map(|i| synth_image(seed, i, size)).collect()
}

fn file_name(i: usize) -> String {
    format!("img_{i:05}.cmt")
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes the images and the manifest into `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, images: &[Tensor<f32>]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    for (i, img) in images.iter().enumerate() {
        let bytes = img.to_bytes();
        let name = file_name(i);
        fs::write(dir.join(&name), &bytes)?;
        manifest.push_str(&format!("{}  {name}\n", sha256_hex(&bytes)));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest)?;
    Ok(path)
}

/// Loads every image listed in `dir/manifest.txt`, verifying digests and
/// that all images share one resolution.
pub fn load_dataset(dir: &Path) -> Result<Vec<Tensor<f32>>> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(ComaError::Format(format!("{} is not a dataset manifest", dir.join(MANIFEST).display())));
    }
    let mut images: Vec<Tensor<f32>> = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (digest, name) = line
            .split_once("  ")
            .ok_or_else(|| ComaError::Format(format!("manifest line {}: expected `<sha256>  <file>`", n + 2)))?;
        if name.contains('/') || name.contains('\\') || name.starts_with('.') {
            return Err(ComaError::Format(format!("manifest line {}: file name {name:?} outside the dataset", n + 2)));
        }
        let bytes = fs::read(dir.join(name))?;
        if sha256_hex(&bytes) != digest {
            return Err(ComaError::Format(format!("checksum mismatch for {name}")));
        }
        let img = Tensor::<f32>::read_from(&mut bytes.as_slice())?;
        if img.rank() != 3 || img.shape()[0] != 3 || img.shape()[1] != img.shape()[2] {
            return Err(ComaError::Format(format!("{name}: expected a 3×S×S image, got {:?}", img.shape())));
        }
        if let Some(first) = images.first() {
            if first.shape() != img.shape() {
                return Err(ComaError::Format(format!(
                    "{name}: resolution {:?} differs from {:?}",
                    img.shape(),
                    first.shape()
                )));
            }
        }
        images.push(img);
    }
    if images.is_empty() {
        return Err(ComaError::Format("dataset manifest lists no images".into()));
    }
    Ok(images)
}
