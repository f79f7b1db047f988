//! High-resolution refinement network and the attention-aware layer (AAL).
//!
//! The AAL computes attention among decoded features `x_d`, then splits the
//! keys by visibility: visible keys copy from the encoder features `x_e`,
//! masked keys from `x_d` itself. The two branches are blended per position
//! with weights derived from each branch's maximum attention score, so that
//! neither branch can dominate merely by being larger.

use numcore::{Tape, Tensor, Var};
use rand::Rng;

use crate::embed::{mask_downsample, DownsampleRule, MaskedImage};
use crate::decoder::compose;
use crate::error::{Error, Result};
use crate::params::{init, Bound, ParamId, ParamStore};

/// Downsampling between the refine input and its bottleneck.
pub const REFINE_DIVISOR: usize = 8;
/// Downsampling between the refine input and the AAL features.
pub const AAL_FACTOR: usize = 4;

const LOGIT_CLAMP: f64 = 1e-3;

/// Bilinear upsampling by an integer factor with half-pixel centers and
/// clamped borders.
pub fn upsample_bilinear(x: &Tensor, factor: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || factor == 0 {
        return Err(Error::contract(format!("bilinear upsample needs [B,C,H,W] and factor > 0, got {s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    let (oh, ow) = (h * factor, w * factor);
    let taps = |o: usize, n: usize| {
        let src = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, src - lo as f64)
    };
    let ys: Vec<_> = (0..oh).map(|o| taps(o, h)).collect();
    let xs: Vec<_> = (0..ow).map(|o| taps(o, w)).collect();
    let mut out = Vec::with_capacity(s[0] * s[1] * oh * ow);
    for plane in x.data().chunks(h * w) {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Ok(Tensor::new([s[0], s[1], oh, ow], out)?)
}

/// Fills the masked pixels of `original` with the coarse prediction,
/// bilinearly upsampled to the original resolution.
pub fn recompose(original: &MaskedImage, coarse: &Tensor) -> Result<Tensor> {
    let (h, w) = (original.height(), original.width());
    let cs = coarse.shape();
    if cs.len() != 4 || cs[0] != original.batch() || cs[1] != 3 || cs[2] == 0 || cs[3] == 0 {
        return Err(Error::contract(format!("coarse output {cs:?} is not a [B,3,h,w] image")));
    }
    if h % cs[2] != 0 || w % cs[3] != 0 || h / cs[2] != w / cs[3] {
        return Err(Error::config(format!(
            "{h}x{w} is not an integer multiple of the coarse {}x{} resolution",
            cs[2], cs[3]
        )));
    }
    let up = upsample_bilinear(coarse, h / cs[2])?;
    compose(original.mask(), original.image(), &up)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AalConfig {
    pub channels: usize,
    pub att_dim: usize,
    /// Scale attention logits by `1/√att_dim`.
    pub scale_logits: bool,
}

#[derive(Debug, Clone)]
pub struct AalParams {
    pub config: AalConfig,
    /// `[att_dim, C, 1, 1]`
    pub phi: ParamId,
    /// `[att_dim, C, 1, 1]`
    pub theta: ParamId,
    pub gamma_scale: ParamId,
    pub gamma_bias: ParamId,
    pub alpha_scale: ParamId,
    pub alpha_bias: ParamId,
}

impl AalParams {
    pub fn build<R: Rng>(store: &mut ParamStore, prefix: &str, config: AalConfig, rng: &mut R) -> Result<Self> {
        let (c, a) = (config.channels, config.att_dim);
        let std = (1.0 / c as f64).sqrt();
        let shape = [a, c, 1, 1];
        Ok(AalParams {
            config,
            phi: store.param(&format!("{prefix}.phi"), &shape, || init::normal(rng, &shape, std))?,
            theta: store.param(&format!("{prefix}.theta"), &shape, || init::normal(rng, &shape, std))?,
            gamma_scale: store.param(&format!("{prefix}.gamma.scale"), &[1], || init::ones(&[1]))?,
            gamma_bias: store.param(&format!("{prefix}.gamma.bias"), &[1], || init::zeros(&[1]))?,
            alpha_scale: store.param(&format!("{prefix}.alpha.scale"), &[1], || init::ones(&[1]))?,
            alpha_bias: store.param(&format!("{prefix}.alpha.bias"), &[1], || init::zeros(&[1]))?,
        })
    }
}

/// Everything the AAL computed, for inspection and testing.
#[derive(Debug, Clone)]
pub struct AalOutput {
    /// `x_d + z`.
    pub output: Var,
    /// Blended attention result `[B, C, h, w]`.
    pub z: Var,
    pub z_v: Var,
    pub z_m: Var,
    /// Per-position branch weights `[B, h·w]`; `w_v + w_m == 1` exactly.
    pub w_v: Tensor,
    pub w_m: Tensor,
}

/// `[C, P]` features of batch item `b` as `[P, C]` rows.
fn rows(tape: &mut Tape, x: Var, b: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let item = tape.slice(x, 0, b, b + 1)?;
    let flat = tape.reshape(item, &[s[1], s[2] * s[3]])?;
    Ok(tape.transpose(flat)?)
}

/// Broadcasts `[P]` to `[P, C]`.
fn spread(tape: &mut Tape, v: Var, c: usize) -> Result<Var> {
    let p = tape.shape(v)[0];
    let col = tape.reshape(v, &[p, 1])?;
    Ok(tape.index_select(col, 1, &vec![0; c])?)
}

/// Attention restricted to the key columns `keys`, mixing the rows of
/// `values`. Returns the `[P, C]` result and per-query maximum logits.
fn branch(tape: &mut Tape, logits: Var, keys: &[usize], values: Var) -> Result<(Var, Var)> {
    let a = tape.index_select(logits, 1, keys)?;
    let (max, _) = tape.max_axis(a, 1)?;
    let attn = tape.softmax(a, 1)?;
    let v = tape.index_select(values, 0, keys)?;
    Ok((tape.matmul(attn, v)?, max))
}

fn affine(tape: &mut Tape, bound: &Bound, x: Var, scale: ParamId, bias: ParamId) -> Result<Var> {
    let y = tape.mul(x, bound[scale])?;
    Ok(tape.add(y, bound[bias])?)
}

/// Applies the AAL to `x_e`, `x_d: [B, C, h, w]` with the binary
/// `feat_mask: [B, 1, h, w]` (1 = visible).
pub fn attention_aware_layer(
    tape: &mut Tape,
    bound: &Bound,
    params: &AalParams,
    x_e: Var,
    x_d: Var,
    feat_mask: &Tensor,
) -> Result<AalOutput> {
    let s = tape.shape(x_d).to_vec();
    if s.len() != 4 || tape.shape(x_e) != s.as_slice() {
        return Err(Error::contract(format!("x_e {:?} and x_d {s:?} must match", tape.shape(x_e))));
    }
    let (bsz, c, h, w) = (s[0], s[1], s[2], s[3]);
    if feat_mask.shape() != [bsz, 1, h, w] || feat_mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::contract("feature mask must be binary [B,1,h,w] matching the features"));
    }
    let p = h * w;
    let phi = tape.conv2d(x_d, bound[params.phi], None, 1, 0)?;
    let theta = tape.conv2d(x_d, bound[params.theta], None, 1, 0)?;

    let (mut zs, mut zvs, mut zms) = (Vec::new(), Vec::new(), Vec::new());
    let mut w_v = Vec::with_capacity(bsz * p);
    let mut w_m = Vec::with_capacity(bsz * p);
    for b in 0..bsz {
        let m = &feat_mask.data()[b * p..(b + 1) * p];
        let visible: Vec<usize> = (0..p).filter(|&i| m[i] == 1.0).collect();
        let masked: Vec<usize> = (0..p).filter(|&i| m[i] == 0.0).collect();

        let q = rows(tape, phi, b)?;
        let kt = tape.slice(theta, 0, b, b + 1)?;
        let kt = tape.reshape(kt, &[params.config.att_dim, p])?;
        let mut logits = tape.matmul(q, kt)?;
        if params.config.scale_logits {
            logits = tape.scale(logits, 1.0 / (params.config.att_dim as f64).sqrt());
        }
        let xe = rows(tape, x_e, b)?;
        let xd = rows(tape, x_d, b)?;

        let zero = || Tensor::zeros([p, c]);
        let (z_v, z_m, wv, wm) = match (visible.is_empty(), masked.is_empty()) {
            (false, false) => {
                let (z_v, max_v) = branch(tape, logits, &visible, xe)?;
                let (z_m, max_m) = branch(tape, logits, &masked, xd)?;
                let sv = affine(tape, bound, max_v, params.gamma_scale, params.gamma_bias)?;
                let sm = affine(tape, bound, max_m, params.alpha_scale, params.alpha_bias)?;
                let pair = tape.pair_softmax(sv, sm)?;
                let wv = tape.slice(pair, 0, 0, 1)?;
                let wv = tape.reshape(wv, &[p])?;
                let wm = tape.slice(pair, 0, 1, 2)?;
                let wm = tape.reshape(wm, &[p])?;
                (z_v, z_m, wv, wm)
            }
            (true, _) => {
                let (z_m, _) = branch(tape, logits, &masked, xd)?;
                let z_v = tape.constant(zero()?);
                let wv = tape.constant(Tensor::zeros([p])?);
                let wm = tape.constant(Tensor::ones([p])?);
                (z_v, z_m, wv, wm)
            }
            (false, true) => {
                let (z_v, _) = branch(tape, logits, &visible, xe)?;
                let z_m = tape.constant(zero()?);
                let wv = tape.constant(Tensor::ones([p])?);
                let wm = tape.constant(Tensor::zeros([p])?);
                (z_v, z_m, wv, wm)
            }
        };
        w_v.extend_from_slice(tape.value(wv).data());
        w_m.extend_from_slice(tape.value(wm).data());
        let wv_c = spread(tape, wv, c)?;
        let wm_c = spread(tape, wm, c)?;
        let a = tape.mul(wv_c, z_v)?;
        let bb = tape.mul(wm_c, z_m)?;
        let z = tape.add(a, bb)?;
        for (dst, v) in [(&mut zs, z), (&mut zvs, z_v), (&mut zms, z_m)] {
            let t = tape.transpose(v)?;
            dst.push(tape.reshape(t, &[1, c, h, w])?);
        }
    }
    let z = tape.concat(&zs, 0)?;
    let z_v = tape.concat(&zvs, 0)?;
    let z_m = tape.concat(&zms, 0)?;
    let output = tape.add(x_d, z)?;
    Ok(AalOutput {
        output,
        z,
        z_v,
        z_m,
        w_v: Tensor::new([bsz, p], w_v)?,
        w_m: Tensor::new([bsz, p], w_m)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    /// Width of the full-resolution stage; deeper stages use twice this.
    pub width: usize,
    pub att_dim: usize,
    pub scale_logits: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            width: 8,
            att_dim: 8,
            scale_logits: true,
        }
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    w: ParamId,
    b: ParamId,
    gain: ParamId,
    bias: ParamId,
}

impl ConvBlock {
    fn build<R: Rng>(store: &mut ParamStore, prefix: &str, cin: usize, cout: usize, rng: &mut R) -> Result<Self> {
        let shape = [cout, cin, 3, 3];
        Ok(ConvBlock {
            w: store.param(&format!("{prefix}.conv.w"), &shape, || init::he(rng, &shape, cin * 9))?,
            b: store.param(&format!("{prefix}.conv.b"), &[cout], || init::zeros(&[cout]))?,
            gain: store.param(&format!("{prefix}.norm.gain"), &[cout], || init::ones(&[cout]))?,
            bias: store.param(&format!("{prefix}.norm.bias"), &[cout], || init::zeros(&[cout]))?,
        })
    }

    fn apply(&self, tape: &mut Tape, bound: &Bound, x: Var, stride: usize) -> Result<Var> {
        let y = tape.conv2d(x, bound[self.w], Some(bound[self.b]), stride, 1)?;
        let y = tape.layer_norm(y, bound[self.gain], bound[self.bias], 1)?;
        Ok(tape.gelu(y))
    }
}

#[derive(Debug, Clone)]
pub struct RefineParams {
    config: RefineConfig,
    enc: [ConvBlock; 4],
    dec: [ConvBlock; 3],
    pub aal: AalParams,
    head_w: ParamId,
    head_b: ParamId,
}

impl RefineParams {
    /// The output head starts at zero so that an untrained refiner returns
    /// its (clamped) input.
    pub fn build<R: Rng>(store: &mut ParamStore, prefix: &str, config: RefineConfig, rng: &mut R) -> Result<Self> {
        let (c, c2) = (config.width, 2 * config.width);
        if c == 0 || config.att_dim == 0 {
            return Err(Error::config("refine width and attention dim must be positive"));
        }
        let enc = [
            ConvBlock::build(store, &format!("{prefix}.enc0"), 4, c, rng)?,
            ConvBlock::build(store, &format!("{prefix}.enc1"), c, c2, rng)?,
            ConvBlock::build(store, &format!("{prefix}.enc2"), c2, c2, rng)?,
            ConvBlock::build(store, &format!("{prefix}.bottleneck"), c2, c2, rng)?,
        ];
        let dec = [
            ConvBlock::build(store, &format!("{prefix}.dec0"), c2, c2, rng)?,
            ConvBlock::build(store, &format!("{prefix}.dec1"), c2, c2, rng)?,
            ConvBlock::build(store, &format!("{prefix}.dec2"), c2, c, rng)?,
        ];
        let aal = AalParams::build(
            store,
            &format!("{prefix}.aal"),
            AalConfig {
                channels: c2,
                att_dim: config.att_dim,
                scale_logits: config.scale_logits,
            },
            rng,
        )?;
        let head_w = store.param(&format!("{prefix}.head.w"), &[3, c, 3, 3], || init::zeros(&[3, c, 3, 3]))?;
        let head_b = store.param(&format!("{prefix}.head.b"), &[3], || init::zeros(&[3]))?;
        Ok(RefineParams {
            config,
            enc,
            dec,
            aal,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &RefineConfig {
        &self.config
    }
}

#[derive(Debug, Clone)]
pub struct RefineOutput {
    pub image: Var,
    pub aal: AalOutput,
}

/// Refines `merged: [B, 3, H, W]` (coarse fill recomposed with the visible
/// pixels) given the binary `mask: [B, 1, H, W]`. `H` and `W` must be
/// multiples of [`REFINE_DIVISOR`].
pub fn refine_forward(tape: &mut Tape, bound: &Bound, params: &RefineParams, merged: Var, mask: &Tensor) -> Result<RefineOutput> {
    let s = tape.shape(merged).to_vec();
    if s.len() != 4 || s[1] != 3 || mask.shape() != [s[0], 1, s[2], s[3]] {
        return Err(Error::contract(format!("refine input {s:?} with mask {:?}", mask.shape())));
    }
    for (what, v) in [("refine height", s[2]), ("refine width", s[3])] {
        if v == 0 || v % REFINE_DIVISOR != 0 {
            return Err(Error::Divisibility {
                what,
                value: v,
                divisor: REFINE_DIVISOR,
            });
        }
    }
    let m = tape.constant(mask.clone());
    let x = tape.concat(&[merged, m], 1)?;
    let e0 = params.enc[0].apply(tape, bound, x, 1)?;
    let e1 = params.enc[1].apply(tape, bound, e0, 2)?;
    let x_e = params.enc[2].apply(tape, bound, e1, 2)?;
    let bottleneck = params.enc[3].apply(tape, bound, x_e, 2)?;

    let up = tape.upsample_nearest(bottleneck, 2)?;
    let x_d = params.dec[0].apply(tape, bound, up, 1)?;
    let feat_mask = mask_downsample(mask, AAL_FACTOR, DownsampleRule::Strict)?;
    let aal = attention_aware_layer(tape, bound, &params.aal, x_e, x_d, &feat_mask)?;

    let up = tape.upsample_nearest(aal.output, 2)?;
    let d1 = params.dec[1].apply(tape, bound, up, 1)?;
    let d1 = tape.add(d1, e1)?;
    let up = tape.upsample_nearest(d1, 2)?;
    let d2 = params.dec[2].apply(tape, bound, up, 1)?;
    let d2 = tape.add(d2, e0)?;
    let residual = tape.conv2d(d2, bound[params.head_w], Some(bound[params.head_b]), 1, 1)?;

    // logit(clamp(merged)); pixels the clamp touches are held constant
    let inside = |v: f64| v > LOGIT_CLAMP && v < 1.0 - LOGIT_CLAMP;
    let value = tape.value(merged);
    let keep = value.map(|v| inside(v) as u8 as f64)?;
    let pinned = value.map(|v| if inside(v) { 0.0 } else { v.clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP) })?;
    let keep = tape.constant(keep);
    let pinned = tape.constant(pinned);
    let kept = tape.mul(merged, keep)?;
    let clamped = tape.add(kept, pinned)?;
    let lo = tape.ln(clamped);
    let neg = tape.neg(clamped);
    let rest = tape.add_scalar(neg, 1.0);
    let hi = tape.ln(rest);
    let prior = tape.sub(lo, hi)?;
    let logits = tape.add(residual, prior)?;
    Ok(RefineOutput {
        image: tape.sigmoid(logits),
        aal,
    })
}
