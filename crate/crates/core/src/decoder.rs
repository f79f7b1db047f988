//! One-step CNN decoder from encoded tokens back to an image.

use numcore::{Tape, Tensor, Var};
use rand::Rng;

use crate::embed::MaskedImage;
use crate::encoder::{weighted_self_attention, AttentionConfig, AttentionParams, WeightAxis};
use crate::error::{Error, Result};
use crate::params::{init, Bound, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderConfig {
    /// Upsampling stages; equals the embedder block count.
    pub stages: usize,
    /// Embedder base width; stage widths mirror the embedder.
    pub base_width: usize,
    /// Heads of the optional unweighted self-attention applied to tokens
    /// before decoding. `None` disables it.
    pub attention_heads: Option<usize>,
}

impl DecoderConfig {
    pub fn width(&self, i: usize) -> usize {
        self.base_width << i
    }

    pub fn token_dim(&self) -> usize {
        self.width(self.stages.saturating_sub(1))
    }
}

#[derive(Debug, Clone)]
struct Stage {
    conv_w: ParamId,
    conv_b: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
}

#[derive(Debug, Clone)]
struct TokenAttention {
    heads: usize,
    ln_gain: ParamId,
    ln_bias: ParamId,
    attn: AttentionParams,
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    config: DecoderConfig,
    attention: Option<TokenAttention>,
    stages: Vec<Stage>,
    head_w: ParamId,
    head_b: ParamId,
}

impl DecoderParams {
    pub fn build<R: Rng>(store: &mut ParamStore, prefix: &str, config: DecoderConfig, rng: &mut R) -> Result<Self> {
        if config.stages == 0 || config.base_width == 0 {
            return Err(Error::config("decoder needs at least one stage and a positive width"));
        }
        let c = config.token_dim();
        let attention = match config.attention_heads {
            Some(heads) => {
                if heads == 0 || c % heads != 0 {
                    return Err(Error::config(format!("decoder attention: dim {c} not divisible by {heads} heads")));
                }
                Some(TokenAttention {
                    heads,
                    ln_gain: store.param(&format!("{prefix}.attn.norm.gain"), &[c], || init::ones(&[c]))?,
                    ln_bias: store.param(&format!("{prefix}.attn.norm.bias"), &[c], || init::zeros(&[c]))?,
                    attn: AttentionParams::build(store, &format!("{prefix}.attn"), c, rng)?,
                })
            }
            None => None,
        };
        let mut stages = Vec::with_capacity(config.stages);
        let mut cin = c;
        for s in 0..config.stages {
            let cout = config.width(config.stages - 1 - s);
            let p = format!("{prefix}.stage{s}");
            stages.push(Stage {
                conv_w: store.param(&format!("{p}.conv.w"), &[cout, cin, 3, 3], || init::he(rng, &[cout, cin, 3, 3], cin * 9))?,
                conv_b: store.param(&format!("{p}.conv.b"), &[cout], || init::zeros(&[cout]))?,
                ln_gain: store.param(&format!("{p}.norm.gain"), &[cout], || init::ones(&[cout]))?,
                ln_bias: store.param(&format!("{p}.norm.bias"), &[cout], || init::zeros(&[cout]))?,
            });
            cin = cout;
        }
        let head_w = store.param(&format!("{prefix}.head.w"), &[3, cin, 3, 3], || {
            init::normal(rng, &[3, cin, 3, 3], (1.0 / (cin * 9) as f64).sqrt())
        })?;
        let head_b = store.param(&format!("{prefix}.head.b"), &[3], || init::zeros(&[3]))?;
        Ok(DecoderParams {
            config,
            attention,
            stages,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }
}

/// Decodes `encoded: [B, N, C]` laid out on a `grid_h × grid_w` grid into a
/// `[B, 3, 2^stages·grid_h, 2^stages·grid_w]` image in (0, 1).
pub fn decode(tape: &mut Tape, bound: &Bound, params: &DecoderParams, encoded: Var, grid: (usize, usize)) -> Result<Var> {
    let s = tape.shape(encoded).to_vec();
    let (gh, gw) = grid;
    if s.len() != 3 || s[1] != gh * gw {
        return Err(Error::contract(format!("tokens {s:?} do not fill a {gh}x{gw} grid")));
    }
    let (b, n, c) = (s[0], s[1], s[2]);
    if c != params.config.token_dim() {
        return Err(Error::config(format!(
            "decoder expects {}-dim tokens, got {c}",
            params.config.token_dim()
        )));
    }
    let mut z = encoded;
    if let Some(ta) = &params.attention {
        let normed = tape.layer_norm(z, bound[ta.ln_gain], bound[ta.ln_bias], 2)?;
        let cfg = AttentionConfig {
            heads: ta.heads,
            weighted: false,
            axis: WeightAxis::Keys,
            renormalize_rows: false,
        };
        let trace = weighted_self_attention(tape, bound, &ta.attn, &cfg, normed, &Tensor::ones([b, n])?)?;
        z = tape.add(z, trace.output)?;
    }
    let grid = tape.reshape(z, &[b, gh, gw, c])?;
    let mut x = tape.permute(grid, &[0, 3, 1, 2])?;
    for st in &params.stages {
        x = tape.upsample_nearest(x, 2)?;
        x = tape.conv2d(x, bound[st.conv_w], Some(bound[st.conv_b]), 1, 1)?;
        x = tape.layer_norm(x, bound[st.ln_gain], bound[st.ln_bias], 1)?;
        x = tape.gelu(x);
    }
    let logits = tape.conv2d(x, bound[params.head_w], Some(bound[params.head_b]), 1, 1)?;
    Ok(tape.sigmoid(logits))
}

/// `mask ⊙ image + (1 − mask) ⊙ fill`, broadcasting the single-channel mask.
pub fn compose(mask: &Tensor, image: &Tensor, fill: &Tensor) -> Result<Tensor> {
    let s = image.shape();
    if fill.shape() != s {
        return Err(Error::contract(format!("cannot compose {:?} with {:?}", fill.shape(), s)));
    }
    if s.len() != 4 || mask.shape() != [s[0], 1, s[2], s[3]] {
        return Err(Error::contract(format!("mask {:?} does not match image {s:?}", mask.shape())));
    }
    let plane = s[2] * s[3];
    let (im, fl, m) = (image.data(), fill.data(), mask.data());
    let data = (0..im.len())
        .map(|i| {
            let mv = m[(i / (s[1] * plane)) * plane + i % plane];
            if mv == 1.0 {
                im[i]
            } else if mv == 0.0 {
                fl[i]
            } else {
                mv * im[i] + (1.0 - mv) * fl[i]
            }
        })
        .collect();
    Ok(Tensor::new(s.to_vec(), data)?)
}

/// Keeps the visible pixels of `input` and takes the rest from `coarse`.
pub fn compose_output(coarse: &Tensor, input: &MaskedImage) -> Result<Tensor> {
    compose(input.mask(), input.image(), coarse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(attention: Option<usize>) -> (ParamStore, DecoderParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let cfg = DecoderConfig {
            stages: 2,
            base_width: 4,
            attention_heads: attention,
        };
        let p = DecoderParams::build(&mut store, "dec", cfg, &mut rng).unwrap();
        (store, p)
    }

    #[test]
    fn output_size_and_range() {
        for heads in [None, Some(2)] {
            let (store, p) = build(heads);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape, &[]);
            let z = tape.constant(Tensor::randn([2, 6, 8], 3.0, &mut rng).unwrap());
            let out = decode(&mut tape, &bound, &p, z, (2, 3)).unwrap();
            assert_eq!(tape.shape(out), &[2, 3, 8, 12]);
            assert!(tape.value(out).data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let (store, p) = build(None);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, &[]);
        let z = tape.constant(Tensor::zeros([1, 6, 8]).unwrap());
        assert!(decode(&mut tape, &bound, &p, z, (2, 2)).is_err());
    }

    #[test]
    fn every_token_receives_gradient() {
        let (store, p) = build(None);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, &[]);
        let z = tape.leaf(Tensor::randn([1, 4, 8], 1.0, &mut rng).unwrap());
        let out = decode(&mut tape, &bound, &p, z, (2, 2)).unwrap();
        let loss = tape.sum(out);
        tape.backward(loss).unwrap();
        let g = tape.grad(z).unwrap();
        for token in g.data().chunks(8) {
            assert!(token.iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn composition_keeps_visible_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let image = Tensor::uniform([1, 3, 4, 4], 0.0, 1.0, &mut rng).unwrap();
        let mask = Tensor::from_fn([1, 1, 4, 4], |i| ((i / 4 + i % 4) % 2) as f64).unwrap();
        let input = MaskedImage::new(image.clone(), mask.clone()).unwrap();
        let coarse = Tensor::uniform([1, 3, 4, 4], 0.0, 1.0, &mut rng).unwrap();
        let out = compose_output(&coarse, &input).unwrap();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let got = out.get(&[0, c, y, x]).unwrap();
                    let want = if (x + y) % 2 == 1 { &image } else { &coarse };
                    assert_eq!(got.to_bits(), want.get(&[0, c, y, x]).unwrap().to_bits());
                }
            }
        }
        let again = compose(&mask, &image, &out).unwrap();
        assert_eq!(again, out);

        let full = MaskedImage::new(image.clone(), Tensor::ones([1, 1, 4, 4]).unwrap()).unwrap();
        assert_eq!(compose_output(&coarse, &full).unwrap(), image);
        let none = MaskedImage::new(image, Tensor::zeros([1, 1, 4, 4]).unwrap()).unwrap();
        assert_eq!(compose_output(&coarse, &none).unwrap(), coarse);
    }
}
