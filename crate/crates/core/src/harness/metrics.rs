//! Pixel-level image metrics for images in `[0, 1]`.

use numcore::Tensor;

use crate::error::{Error, Result};

pub const PSNR_CAP: f64 = 99.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn check(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!("metric inputs {:?} and {:?} differ", a.shape(), b.shape())));
    }
    if a.numel() == 0 {
        return Err(Error::contract("metric inputs are empty"));
    }
    Ok(())
}

pub fn l1(a: &Tensor, b: &Tensor) -> Result<f64> {
    check(a, b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.numel() as f64)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    check(a, b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.numel() as f64)
}

/// `10·log10(1 / MSE)`, capped at [`PSNR_CAP`] when MSE < 1e-10.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m < 1e-10 { PSNR_CAP } else { (10.0 * (1.0 / m).log10()).min(PSNR_CAP) })
}

fn gaussian(size: usize) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h × w` plane.
fn filter(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over the valid region of an 11×11 Gaussian window (σ = 1.5),
/// averaged over all channels and images of `[B, C, H, W]` inputs. Images
/// smaller than the window use the largest odd window that fits.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check(a, b)?;
    let s = a.shape();
    if s.len() != 4 {
        return Err(Error::contract(format!("ssim expects [B,C,H,W], got {s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let k = gaussian(size);
    let plane = h * w;
    let mut total = 0.0;
    let mut planes = 0;
    for (pa, pb) in a.data().chunks(plane).zip(b.data().chunks(plane)) {
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| x * y).collect();
        let (mu_a, mu_b) = (filter(pa, h, w, &k), filter(pb, h, w, &k));
        let (saa, sbb, sab) = (filter(&aa, h, w, &k), filter(&bb, h, w, &k), filter(&ab, h, w, &k));
        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = saa[i] - ma * ma;
            let vb = sbb[i] - mb * mb;
            let cov = sab[i] - ma * mb;
            acc += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
        }
        total += acc / mu_a.len() as f64;
        planes += 1;
    }
    Ok(total / planes as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Scores {
    pub l1: f64,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn score(a: &Tensor, b: &Tensor) -> Result<Scores> {
    Ok(Scores {
        l1: l1(a, b)?,
        psnr: psnr(a, b)?,
        ssim: ssim(a, b)?,
    })
}
