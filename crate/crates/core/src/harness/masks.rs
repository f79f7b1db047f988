//! Center and free-form masks. Masks are `[1, 1, H, W]` with 1 = visible
//! and 0 = masked.

use numcore::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const MAX_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Center,
    FreeForm,
}

/// Free-form stroke parameters. All ranges are inclusive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSpec {
    pub kind: MaskKind,
    /// Accepted masked-area fraction.
    pub ratio: (f64, f64),
    pub strokes: (usize, usize),
    /// Brush diameter in pixels.
    pub width: (usize, usize),
    /// Random-walk segments per stroke.
    pub length: (usize, usize),
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec {
            kind: MaskKind::FreeForm,
            ratio: (0.2, 0.3),
            strokes: (1, 8),
            width: (3, 8),
            length: (3, 10),
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.ratio;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::config(format!("invalid mask ratio bounds [{lo}, {hi}]")));
        }
        for (name, (a, b)) in [("strokes", self.strokes), ("width", self.width), ("length", self.length)] {
            if a == 0 || a > b {
                return Err(Error::config(format!("invalid mask {name} range [{a}, {b}]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedMask {
    pub mask: Tensor,
    /// `mean(1 − mask)`.
    pub ratio: f64,
}

impl GeneratedMask {
    fn new(mask: Tensor) -> Self {
        let ratio = masked_ratio(&mask);
        GeneratedMask { mask, ratio }
    }
}

pub fn masked_ratio(mask: &Tensor) -> f64 {
    mask.data().iter().map(|m| 1.0 - m).sum::<f64>() / mask.numel() as f64
}

/// A centered `h/2 × w/2` hole.
pub fn generate_center_mask(h: usize, w: usize) -> Result<GeneratedMask> {
    if h < 2 || w < 2 {
        return Err(Error::config(format!("center mask needs at least 2x2, got {h}x{w}")));
    }
    let (mh, mw) = (h / 2, w / 2);
    let (top, left) = ((h - mh) / 2, (w - mw) / 2);
    let mask = Tensor::from_fn([1, 1, h, w], |i| {
        let (y, x) = (i / w, i % w);
        let hole = (top..top + mh).contains(&y) && (left..left + mw).contains(&x);
        if hole {
            0.0
        } else {
            1.0
        }
    })?;
    Ok(GeneratedMask::new(mask))
}

fn stamp(buf: &mut [f64], h: usize, w: usize, cy: f64, cx: f64, diameter: usize) {
    let r = diameter as f64 / 2.0;
    let y0 = (cy - r).floor().max(0.0) as usize;
    let x0 = (cx - r).floor().max(0.0) as usize;
    let y1 = ((cy + r).ceil() as usize).min(h);
    let x1 = ((cx + r).ceil() as usize).min(w);
    for y in y0..y1 {
        for x in x0..x1 {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            if dy * dy + dx * dx <= r * r {
                buf[y * w + x] = 0.0;
            }
        }
    }
}

fn draw_stroke<R: Rng>(buf: &mut [f64], h: usize, w: usize, spec: &MaskSpec, rng: &mut R) {
    let width = rng.gen_range(spec.width.0..=spec.width.1);
    let segments = rng.gen_range(spec.length.0..=spec.length.1);
    let mut y = rng.gen_range(0.0..h as f64);
    let mut x = rng.gen_range(0.0..w as f64);
    let mut angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let step = width.max(2) as f64;
    stamp(buf, h, w, y, x, width);
    for _ in 0..segments {
        angle += rng.gen_range(-1.0..1.0);
        let (ny, nx) = (
            (y + step * angle.sin()).clamp(0.0, h as f64 - 1e-9),
            (x + step * angle.cos()).clamp(0.0, w as f64 - 1e-9),
        );
        let n = (step.ceil() as usize).max(1);
        for k in 1..=n {
            let t = k as f64 / n as f64;
            stamp(buf, h, w, y + (ny - y) * t, x + (nx - x) * t, width);
        }
        y = ny;
        x = nx;
    }
}

/// Random-walk brush strokes, redrawn until the masked fraction lands in
/// `spec.ratio`. Strokes are added one at a time and an attempt stops as
/// soon as the lower bound is reached.
pub fn generate_freeform_mask(h: usize, w: usize, spec: &MaskSpec, seed: u64) -> Result<GeneratedMask> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (h * w) as f64;
    for _ in 0..MAX_ATTEMPTS {
        let mut buf = vec![1.0; h * w];
        let strokes = rng.gen_range(spec.strokes.0..=spec.strokes.1);
        let mut ratio = 0.0;
        for _ in 0..strokes {
            draw_stroke(&mut buf, h, w, spec, &mut rng);
            ratio = buf.iter().map(|m| 1.0 - m).sum::<f64>() / n;
            if ratio >= spec.ratio.0 {
                break;
            }
        }
        if ratio >= spec.ratio.0 && ratio <= spec.ratio.1 {
            return Ok(GeneratedMask::new(Tensor::new([1, 1, h, w], buf)?));
        }
    }
    Err(Error::MaskGeneration(format!(
        "no mask with ratio in [{}, {}] after {MAX_ATTEMPTS} attempts",
        spec.ratio.0, spec.ratio.1
    )))
}

/// Dispatches on `spec.kind`.
pub fn generate_mask(h: usize, w: usize, spec: &MaskSpec, seed: u64) -> Result<GeneratedMask> {
    match spec.kind {
        MaskKind::Center => generate_center_mask(h, w),
        MaskKind::FreeForm => generate_freeform_mask(h, w, spec, seed),
    }
}
