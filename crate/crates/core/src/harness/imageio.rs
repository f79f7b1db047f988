//! PNG/PGM reading and writing, and resampling.
//!
//! Images are `[1, 3, H, W]` tensors in `[0, 1]`. Masks are stored as 8-bit
//! grayscale (PGM `P5` or PNG) where 0 marks a masked pixel; pixel values of
//! 128 and above read as visible.

use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};
use numcore::Tensor;

use crate::error::{Error, Result};
use crate::refine::upsample_bilinear;

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let data = (0..3 * h * w)
        .map(|i| {
            let (c, p) = (i / (h * w), i % (h * w));
            raw[p * 3 + c] as f64 / 255.0
        })
        .collect();
    Ok(Tensor::new([1, 3, h, w], data)?)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes the first image of a `[B, 3, H, W]` batch as 8-bit RGB.
pub fn write_image(t: &Tensor, path: &Path) -> Result<()> {
    let s = t.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::contract(format!("cannot write {s:?} as an RGB image")));
    }
    let (h, w) = (s[2], s[3]);
    let plane = h * w;
    let bytes = (0..3 * plane).map(|i| to_byte(t.data()[(i % 3) * plane + i / 3])).collect();
    let img = RgbImage::from_raw(w as u32, h as u32, bytes).ok_or_else(|| image_err(path, "buffer size"))?;
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn read_mask(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.as_raw().iter().map(|&v| if v >= 128 { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::new([1, 1, h, w], data)?)
}

/// Writes a `[1, 1, H, W]` binary mask as binary PGM (`P5`, 0/255).
pub fn write_mask(mask: &Tensor, path: &Path) -> Result<()> {
    let s = mask.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::contract(format!("cannot write {s:?} as a mask")));
    }
    let plane = s[2] * s[3];
    let bytes = mask.data()[..plane].iter().map(|&v| to_byte(v)).collect();
    let img = GrayImage::from_raw(s[3] as u32, s[2] as u32, bytes).ok_or_else(|| image_err(path, "buffer size"))?;
    img.save_with_format(path, ImageFormat::Pnm).map_err(|e| image_err(path, e))
}

/// Area-average downscale by an integer factor.
pub fn downscale_area(x: &Tensor, factor: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || factor == 0 || s[2] % factor != 0 || s[3] % factor != 0 {
        return Err(Error::config(format!("cannot area-downscale {s:?} by {factor}")));
    }
    let (h, w) = (s[2], s[3]);
    let (oh, ow) = (h / factor, w / factor);
    let norm = (factor * factor) as f64;
    let mut out = Vec::with_capacity(s[0] * s[1] * oh * ow);
    for plane in x.data().chunks(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for y in oy * factor..(oy + 1) * factor {
                    acc += plane[y * w + ox * factor..y * w + (ox + 1) * factor].iter().sum::<f64>();
                }
                out.push(acc / norm);
            }
        }
    }
    Ok(Tensor::new([s[0], s[1], oh, ow], out)?)
}

/// General bilinear resampling with half-pixel centers.
fn resample_bilinear(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let taps = |o: usize, n: usize, on: usize| {
        let src = ((o as f64 + 0.5) * n as f64 / on as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = src.floor() as usize;
        (lo, (lo + 1).min(n - 1), src - lo as f64)
    };
    let mut out = Vec::with_capacity(s[0] * s[1] * oh * ow);
    for plane in x.data().chunks(h * w) {
        for oy in 0..oh {
            let (y0, y1, fy) = taps(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1, fx) = taps(ox, w, ow);
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Ok(Tensor::new([s[0], s[1], oh, ow], out)?)
}

/// Resizes `[B, C, H, W]` to `oh × ow`: area averaging for integer
/// downscales, bilinear otherwise.
pub fn resize(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || oh == 0 || ow == 0 {
        return Err(Error::contract(format!("cannot resize {s:?} to {oh}x{ow}")));
    }
    let (h, w) = (s[2], s[3]);
    if (h, w) == (oh, ow) {
        return Ok(x.clone());
    }
    if h % oh == 0 && w % ow == 0 && h / oh == w / ow {
        return downscale_area(x, h / oh);
    }
    if oh % h == 0 && ow % w == 0 && oh / h == ow / w {
        return upsample_bilinear(x, oh / h);
    }
    resample_bilinear(x, oh, ow)
}
