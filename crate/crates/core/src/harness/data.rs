//! Training data: procedural textures or a directory of images.

use std::path::Path;

use numcore::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::harness::imageio::{read_image, resize};

/// One smooth procedural texture `[1, 3, size, size]` in `[0, 1]`: a color
/// gradient plus a few low-frequency sinusoids per channel.
pub fn synthetic_texture(size: usize, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size as f64;
    let mut waves = Vec::new();
    for _ in 0..3 {
        let base = rng.gen_range(0.25..0.75);
        let gy = rng.gen_range(-0.2..0.2);
        let gx = rng.gen_range(-0.2..0.2);
        let terms: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.gen_range(0.03..0.08),
                    rng.gen_range(-2.5..2.5),
                    rng.gen_range(-2.5..2.5),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        waves.push((base, gy, gx, terms));
    }
    Tensor::from_fn([1, 3, size, size], |i| {
        let (c, y, x) = (i / (size * size), (i / size) % size, i % size);
        let (u, v) = (y as f64 / n, x as f64 / n);
        let (base, gy, gx, terms) = &waves[c];
        let mut val = base + gy * (u - 0.5) + gx * (v - 0.5);
        for &(a, fy, fx, ph) in terms {
            val += a * (std::f64::consts::TAU * (fy * u + fx * v) + ph).sin();
        }
        val.clamp(0.0, 1.0)
    })
    .map_err(Into::into)
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<Tensor>,
    pub val: Vec<Tensor>,
}

impl Dataset {
    /// `count` textures; every tenth goes to validation.
    pub fn synthetic(count: usize, size: usize, seed: u64) -> Result<Self> {
        let mut ds = Dataset::default();
        for i in 0..count {
            let t = synthetic_texture(size, seed.wrapping_mul(1_000_003).wrapping_add(i as u64))?;
            if i % 10 == 9 {
                ds.val.push(t);
            } else {
                ds.train.push(t);
            }
        }
        Ok(ds)
    }

    /// All PNG/PPM/PGM files in `dir`, resized to `size × size`. A file goes
    /// to validation when the FNV-1a hash of its name is 0 mod 10.
    pub fn from_dir(dir: &Path, size: usize) -> Result<Self> {
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm" | "pgm"))
            })
            .collect();
        entries.sort();
        if entries.is_empty() {
            return Err(Error::Data(format!("no images in {}", dir.display())));
        }
        let mut ds = Dataset::default();
        for p in entries {
            let img = resize(&read_image(&p)?, size, size)?;
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            if fnv1a(name.as_bytes()) % 10 == 0 {
                ds.val.push(img);
            } else {
                ds.train.push(img);
            }
        }
        if ds.train.is_empty() {
            return Err(Error::Data(format!("all images in {} fell into validation", dir.display())));
        }
        Ok(ds)
    }

    /// Validation images, or the training images when there are none.
    pub fn eval_set(&self) -> &[Tensor] {
        if self.val.is_empty() {
            &self.train
        } else {
            &self.val
        }
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Stacks `[1, C, H, W]` tensors along the batch axis.
pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::contract("empty batch"))?;
    let mut shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::contract("batch items differ in shape"));
        }
        data.extend_from_slice(t.data());
    }
    shape[0] = items.len();
    Ok(Tensor::new(shape, data)?)
}
