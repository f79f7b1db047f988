//! Restrictive token embedding.
//!
//! Each block applies a 1×1 projection, channel layer-norm and GELU per
//! pixel, then a 2×2/stride-2 partial convolution. Receptive fields of the
//! resulting tokens are disjoint `2^B × 2^B` patches, and the mask travels
//! alongside as a float coverage value that becomes the token weight.

use numcore::{PconvScaling, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{init, Bound, ParamId, ParamStore};

/// Lower clamp applied to token weights leaving the embedder.
pub const MIN_TOKEN_WEIGHT: f64 = 0.02;

/// An image batch with its visibility mask (1 = visible). Masked pixels are
/// zeroed on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedImage {
    image: Tensor,
    mask: Tensor,
}

impl MaskedImage {
    /// `image: [B, 3, H, W]` in `[0, 1]`, `mask: [B, 1, H, W]` in `{0, 1}`.
    pub fn new(image: Tensor, mask: Tensor) -> Result<Self> {
        let (is, ms) = (image.shape(), mask.shape());
        if is.len() != 4 || ms.len() != 4 || is[1] != 3 || ms[1] != 1 || is[0] != ms[0] || is[2..] != ms[2..] {
            return Err(Error::contract(format!(
                "image {is:?} and mask {ms:?} are not an aligned [B,3,H,W]/[B,1,H,W] pair"
            )));
        }
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::contract("mask must be binary"));
        }
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract("image values must lie in [0, 1]"));
        }
        let plane = is[2] * is[3];
        let mut zeroed = image;
        for (i, v) in zeroed.data_mut().iter_mut().enumerate() {
            let b = i / (3 * plane);
            *v *= mask.data()[b * plane + i % plane];
        }
        Ok(MaskedImage { image: zeroed, mask })
    }

    pub fn image(&self) -> &Tensor {
        &self.image
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    pub fn batch(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[3]
    }

    pub fn into_parts(self) -> (Tensor, Tensor) {
        (self.image, self.mask)
    }
}

/// Token sequence `[B, N, C]` with one visibility weight per token.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    pub tokens: Var,
    /// `[B, N]`, each in `[MIN_TOKEN_WEIGHT, 1]`.
    pub weights: Tensor,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedKind {
    /// Non-overlapping partial-conv blocks with float mask propagation.
    Restrictive,
    /// Ordinary overlapping 3×3 convolutions over image and mask; every
    /// token gets weight 1.
    LargeRf,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbedConfig {
    pub kind: EmbedKind,
    pub blocks: usize,
    pub base_width: usize,
    pub pconv_canonical: bool,
}

impl EmbedConfig {
    /// Channel width after block `i`; doubles per block.
    pub fn width(&self, i: usize) -> usize {
        self.base_width << i
    }

    pub fn token_dim(&self) -> usize {
        self.width(self.blocks - 1)
    }

    /// Side length of one token's patch.
    pub fn patch(&self) -> usize {
        1 << self.blocks
    }

    pub fn scaling(&self) -> PconvScaling {
        if self.pconv_canonical {
            PconvScaling::Canonical
        } else {
            PconvScaling::InverseCoverage
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.base_width == 0 {
            return Err(Error::config("embed blocks and base width must be positive"));
        }
        Ok(())
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        for v in [h, w] {
            if v % self.patch() != 0 {
                return Err(Error::Divisibility {
                    what: "input size",
                    value: v,
                    divisor: self.patch(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct EmbedBlock {
    proj_w: ParamId,
    proj_b: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
    down_w: ParamId,
    down_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct EmbedParams {
    config: EmbedConfig,
    blocks: Vec<EmbedBlock>,
}

impl EmbedParams {
    pub fn build<R: Rng>(store: &mut ParamStore, prefix: &str, config: EmbedConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            let cin = match (i, config.kind) {
                (0, EmbedKind::Restrictive) => 3,
                (0, EmbedKind::LargeRf) => 4,
                _ => config.width(i - 1),
            };
            let c = config.width(i);
            let (pk, dk) = match config.kind {
                EmbedKind::Restrictive => (1, 2),
                EmbedKind::LargeRf => (3, 3),
            };
            let p = format!("{prefix}.block{i}");
            blocks.push(EmbedBlock {
                proj_w: store.param(&format!("{p}.proj.w"), &[c, cin, pk, pk], || init::he(rng, &[c, cin, pk, pk], cin * pk * pk))?,
                proj_b: store.param(&format!("{p}.proj.b"), &[c], || init::zeros(&[c]))?,
                ln_gain: store.param(&format!("{p}.norm.gain"), &[c], || init::ones(&[c]))?,
                ln_bias: store.param(&format!("{p}.norm.bias"), &[c], || init::zeros(&[c]))?,
                down_w: store.param(&format!("{p}.down.w"), &[c, c, dk, dk], || init::he(rng, &[c, c, dk, dk], c * dk * dk))?,
                down_b: store.param(&format!("{p}.down.b"), &[c], || init::zeros(&[c]))?,
            });
        }
        Ok(EmbedParams { config, blocks })
    }

    pub fn config(&self) -> &EmbedConfig {
        &self.config
    }
}

/// Partial convolution with float mask update; see [`Tape::partial_conv2d`].
pub fn partial_conv2d(
    tape: &mut Tape,
    x: Var,
    mask: &Tensor,
    w: Var,
    b: Var,
    stride: usize,
    scaling: PconvScaling,
) -> Result<(Var, Tensor)> {
    Ok(tape.partial_conv2d(x, mask, w, b, stride, 0, scaling)?)
}

/// Flattens `[B, C, h, w]` features row-major into `[B, h·w, C]` tokens.
pub(crate) fn to_tokens(tape: &mut Tape, features: Var) -> Result<(Var, usize, usize)> {
    let s = tape.shape(features).to_vec();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let t = tape.permute(features, &[0, 2, 3, 1])?;
    Ok((tape.reshape(t, &[b, h * w, c])?, h, w))
}

/// Runs the embedder of `params.config().kind` on `image` (a `[B,3,H,W]`
/// tape value) with visibility `mask`.
pub fn embed(tape: &mut Tape, bound: &Bound, params: &EmbedParams, image: Var, mask: &Tensor) -> Result<TokenGrid> {
    match params.config.kind {
        EmbedKind::Restrictive => restrictive_embed(tape, bound, params, image, mask),
        EmbedKind::LargeRf => large_rf_embed(tape, bound, params, image, mask),
    }
}

/// The restrictive CNN embedder.
pub fn restrictive_embed(
    tape: &mut Tape,
    bound: &Bound,
    params: &EmbedParams,
    image: Var,
    mask: &Tensor,
) -> Result<TokenGrid> {
    let s = tape.shape(image).to_vec();
    params.config.check_input(s[2], s[3])?;
    let scaling = params.config.scaling();
    let mut x = image;
    let mut m = mask.clone();
    for blk in &params.blocks {
        x = tape.conv2d(x, bound[blk.proj_w], Some(bound[blk.proj_b]), 1, 0)?;
        x = tape.layer_norm(x, bound[blk.ln_gain], bound[blk.ln_bias], 1)?;
        x = tape.gelu(x);
        let (y, m2) = partial_conv2d(tape, x, &m, bound[blk.down_w], bound[blk.down_b], 2, scaling)?;
        x = y;
        m = m2;
    }
    let (tokens, grid_h, grid_w) = to_tokens(tape, x)?;
    let weights = Tensor::new(
        [s[0], grid_h * grid_w],
        m.data().iter().map(|&w| w.clamp(MIN_TOKEN_WEIGHT, 1.0)).collect(),
    )?;
    Ok(TokenGrid {
        tokens,
        weights,
        grid_h,
        grid_w,
    })
}

/// Overlapping-RF baseline embedder: stacked 3×3 convolutions over
/// `[image ⊙ mask, mask]`, stride 2 per block, all token weights 1.
pub fn large_rf_embed(
    tape: &mut Tape,
    bound: &Bound,
    params: &EmbedParams,
    image: Var,
    mask: &Tensor,
) -> Result<TokenGrid> {
    let s = tape.shape(image).to_vec();
    params.config.check_input(s[2], s[3])?;
    let m = tape.constant(mask.clone());
    let mut x = tape.concat(&[image, m], 1)?;
    for blk in &params.blocks {
        x = tape.conv2d(x, bound[blk.proj_w], Some(bound[blk.proj_b]), 1, 1)?;
        x = tape.layer_norm(x, bound[blk.ln_gain], bound[blk.ln_bias], 1)?;
        x = tape.gelu(x);
        x = tape.conv2d(x, bound[blk.down_w], Some(bound[blk.down_b]), 2, 1)?;
    }
    let (tokens, grid_h, grid_w) = to_tokens(tape, x)?;
    Ok(TokenGrid {
        tokens,
        weights: Tensor::ones([s[0], grid_h * grid_w])?,
        grid_h,
        grid_w,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DownsampleRule {
    /// 1 iff every covered pixel is visible.
    Strict,
    /// Fraction of covered pixels that are visible.
    Mean,
}

/// Reduces a `[B, 1, H, W]` mask by an integer `factor`.
pub fn mask_downsample(mask: &Tensor, factor: usize, rule: DownsampleRule) -> Result<Tensor> {
    let s = mask.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::contract(format!("mask must be [B,1,H,W], got {s:?}")));
    }
    if factor == 0 {
        return Err(Error::config("downsample factor must be positive"));
    }
    for v in [s[2], s[3]] {
        if v % factor != 0 {
            return Err(Error::Divisibility {
                what: "mask size",
                value: v,
                divisor: factor,
            });
        }
    }
    let (b, h, w) = (s[0], s[2], s[3]);
    let (oh, ow) = (h / factor, w / factor);
    let area = (factor * factor) as f64;
    let mut out = Vec::with_capacity(b * oh * ow);
    for n in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut total = 0.0;
                let mut all = true;
                for y in oy * factor..(oy + 1) * factor {
                    for x in ox * factor..(ox + 1) * factor {
                        let v = mask.data()[(n * h + y) * w + x];
                        total += v;
                        all &= v == 1.0;
                    }
                }
                out.push(match rule {
                    DownsampleRule::Strict => f64::from(u8::from(all)),
                    DownsampleRule::Mean => total / area,
                });
            }
        }
    }
    Ok(Tensor::new([b, 1, oh, ow], out)?)
}
