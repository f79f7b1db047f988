//! Transformer encoder with visibility-weighted multi-head self-attention.
//!
//! Per head, attention is `A = softmax(q·kᵀ/√C_h)`; the weighted form scales
//! it by the token weights before mixing values, `A_m[i,j] = A[i,j]·w[j]`.
//! After each layer the weights are amplified, `w ← √w`.

use numcore::{Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{init, Bound, ParamId, ParamStore};

/// Which axis of the attention matrix the token weights scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightAxis {
    /// `A[i,j]·w[j]`: shifts attention mass toward visible keys.
    Keys,
    /// `A[i,j]·w[i]`: scales whole query rows.
    Queries,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub weighted: bool,
    pub axis: WeightAxis,
    pub renormalize_rows: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub mlp_ratio: usize,
    pub tokens: usize,
    pub attention: AttentionConfig,
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.attention.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.attention.heads == 0 || self.dim % self.attention.heads != 0 {
            return Err(Error::config(format!(
                "token dim {} is not divisible by {} heads",
                self.dim, self.attention.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("mlp ratio must be positive"));
        }
        Ok(())
    }
}

/// Fused qkv projection `[C, 3C]` (columns: all q heads, all k heads, all v
/// heads) plus the output projection.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_qkv: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

impl AttentionParams {
    pub fn build<R: Rng>(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut R) -> Result<Self> {
        let std = (1.0 / dim as f64).sqrt();
        Ok(AttentionParams {
            w_qkv: store.param(&format!("{prefix}.qkv.w"), &[dim, 3 * dim], || init::normal(rng, &[dim, 3 * dim], std))?,
            w_out: store.param(&format!("{prefix}.out.w"), &[dim, dim], || init::normal(rng, &[dim, dim], std))?,
            b_out: store.param(&format!("{prefix}.out.b"), &[dim], || init::zeros(&[dim]))?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub pos: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub attn: AttentionParams,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
}

impl LayerParams {
    pub fn build<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        let (c, n, hidden) = (cfg.dim, cfg.tokens, cfg.dim * cfg.mlp_ratio);
        let p = |s: &str| format!("{prefix}.{s}");
        Ok(LayerParams {
            pos: store.param(&p("pos"), &[n, c], || init::normal(rng, &[n, c], 0.02))?,
            ln1_gain: store.param(&p("ln1.gain"), &[c], || init::ones(&[c]))?,
            ln1_bias: store.param(&p("ln1.bias"), &[c], || init::zeros(&[c]))?,
            attn: AttentionParams::build(store, &p("attn"), c, rng)?,
            ln2_gain: store.param(&p("ln2.gain"), &[c], || init::ones(&[c]))?,
            ln2_bias: store.param(&p("ln2.bias"), &[c], || init::zeros(&[c]))?,
            mlp_w1: store.param(&p("mlp.w1"), &[c, hidden], || init::he(rng, &[c, hidden], c))?,
            mlp_b1: store.param(&p("mlp.b1"), &[hidden], || init::zeros(&[hidden]))?,
            mlp_w2: store.param(&p("mlp.w2"), &[hidden, c], || init::normal(rng, &[hidden, c], (1.0 / hidden as f64).sqrt()))?,
            mlp_b2: store.param(&p("mlp.b2"), &[c], || init::zeros(&[c]))?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub layers: Vec<LayerParams>,
}

impl EncoderParams {
    pub fn build<R: Rng>(store: &mut ParamStore, prefix: &str, config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.layers)
            .map(|i| LayerParams::build(store, &format!("{prefix}.layer{i}"), &config, rng))
            .collect::<Result<_>>()?;
        Ok(EncoderParams { config, layers })
    }
}

/// Tape values produced by one attention call, kept for inspection.
#[derive(Debug, Clone, Copy)]
pub struct AttentionTrace {
    pub output: Var,
    /// Post-softmax scores `[B·H, N, N]`.
    pub scores: Var,
    /// Scores after weighting (same var as `scores` when unweighted).
    pub weighted_scores: Var,
}

/// Repeats `x: [rows, cols]` (as `[1, rows·cols]`) `times` along a new
/// leading axis.
fn tile_leading(tape: &mut Tape, x: Var, times: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let flat = tape.reshape(x, &[1, shape.iter().product()])?;
    let tiled = tape.index_select(flat, 0, &vec![0; times])?;
    let mut out = vec![times];
    out.extend(shape);
    Ok(tape.reshape(tiled, &out)?)
}

/// Multi-head self-attention over `z: [B, N, C]`, optionally scaled by the
/// token weights `w: [B, N]` (all entries in `(0, 1]`).
pub fn weighted_self_attention(
    tape: &mut Tape,
    bound: &Bound,
    params: &AttentionParams,
    cfg: &AttentionConfig,
    z: Var,
    w: &Tensor,
) -> Result<AttentionTrace> {
    let s = tape.shape(z).to_vec();
    if s.len() != 3 {
        return Err(Error::contract(format!("attention input must be [B,N,C], got {s:?}")));
    }
    let (b, n, c) = (s[0], s[1], s[2]);
    let h = cfg.heads;
    if h == 0 || c % h != 0 {
        return Err(Error::config(format!("dim {c} not divisible by {h} heads")));
    }
    if w.shape() != [b, n] {
        return Err(Error::contract(format!("weights {:?} do not match tokens [{b}, {n}]", w.shape())));
    }
    if w.data().iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
        return Err(Error::contract("token weights must lie in (0, 1]"));
    }
    let ch = c / h;

    let flat = tape.reshape(z, &[b * n, c])?;
    let qkv = tape.matmul(flat, bound[params.w_qkv])?;
    let qkv = tape.reshape(qkv, &[b, n, 3, h, ch])?;
    let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
    let qkv = tape.reshape(qkv, &[3, b * h, n, ch])?;
    let mut parts = [qkv; 3];
    for (i, part) in parts.iter_mut().enumerate() {
        let sl = tape.slice(qkv, 0, i, i + 1)?;
        *part = tape.reshape(sl, &[b * h, n, ch])?;
    }
    let [q, k, v] = parts;

    let kt = tape.transpose(k)?;
    let logits = tape.bmm(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (ch as f64).sqrt());
    let scores = tape.softmax(logits, 2)?;

    let weighted_scores = if cfg.weighted {
        let mut m = Vec::with_capacity(b * h * n * n);
        for bi in 0..b {
            let row = &w.data()[bi * n..(bi + 1) * n];
            for _ in 0..h {
                for i in 0..n {
                    match cfg.axis {
                        WeightAxis::Keys => m.extend_from_slice(row),
                        WeightAxis::Queries => m.extend(std::iter::repeat(row[i]).take(n)),
                    }
                }
            }
        }
        let m = tape.constant(Tensor::new([b * h, n, n], m)?);
        let mut a = tape.mul(scores, m)?;
        if cfg.renormalize_rows {
            let sums = tape.sum_axis(a, 2)?;
            let sums = tape.reshape(sums, &[b * h, n, 1])?;
            let sums = tape.index_select(sums, 2, &vec![0; n])?;
            a = tape.div(a, sums)?;
        }
        a
    } else {
        scores
    };

    let mixed = tape.bmm(weighted_scores, v)?;
    let mixed = tape.reshape(mixed, &[b, h, n, ch])?;
    let mixed = tape.permute(mixed, &[0, 2, 1, 3])?;
    let mixed = tape.reshape(mixed, &[b * n, c])?;
    let out = tape.matmul(mixed, bound[params.w_out])?;
    let out = tape.add_bias(out, bound[params.b_out], 1)?;
    let output = tape.reshape(out, &[b, n, c])?;
    Ok(AttentionTrace {
        output,
        scores,
        weighted_scores,
    })
}

/// `w ← √w`, elementwise. Not recorded on any tape.
pub fn amplify_weights(w: &Tensor) -> Result<Tensor> {
    Ok(w.map(f64::sqrt)?)
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub tokens: Var,
    /// Weights seen by each layer, followed by the final amplified weights
    /// (`layers + 1` entries).
    pub weights: Vec<Tensor>,
}

fn mlp(tape: &mut Tape, bound: &Bound, p: &LayerParams, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let flat = tape.reshape(x, &[s[0] * s[1], s[2]])?;
    let hdn = tape.matmul(flat, bound[p.mlp_w1])?;
    let hdn = tape.add_bias(hdn, bound[p.mlp_b1], 1)?;
    let hdn = tape.gelu(hdn);
    let out = tape.matmul(hdn, bound[p.mlp_w2])?;
    let out = tape.add_bias(out, bound[p.mlp_b2], 1)?;
    Ok(tape.reshape(out, &s)?)
}

/// One pre-norm block: position embedding, weighted attention, MLP.
pub fn encoder_layer(
    tape: &mut Tape,
    bound: &Bound,
    p: &LayerParams,
    cfg: &EncoderConfig,
    z: Var,
    w: &Tensor,
) -> Result<Var> {
    let batch = tape.shape(z)[0];
    let pos = tile_leading(tape, bound[p.pos], batch)?;
    let z = tape.add(z, pos)?;
    let normed = tape.layer_norm(z, bound[p.ln1_gain], bound[p.ln1_bias], 2)?;
    let attn = weighted_self_attention(tape, bound, &p.attn, &cfg.attention, normed, w)?;
    let z = tape.add(z, attn.output)?;
    let normed = tape.layer_norm(z, bound[p.ln2_gain], bound[p.ln2_bias], 2)?;
    let m = mlp(tape, bound, p, normed)?;
    Ok(tape.add(z, m)?)
}

pub fn encoder_forward(
    tape: &mut Tape,
    bound: &Bound,
    params: &EncoderParams,
    tokens: Var,
    weights: &Tensor,
) -> Result<EncoderOutput> {
    let s = tape.shape(tokens).to_vec();
    if s.len() != 3 || s[2] != params.config.dim {
        return Err(Error::config(format!(
            "encoder expects [B, N, {}] tokens, got {s:?}",
            params.config.dim
        )));
    }
    if s[1] != params.config.tokens {
        return Err(Error::config(format!(
            "encoder position embedding holds {} tokens but the input has {}",
            params.config.tokens, s[1]
        )));
    }
    let mut z = tokens;
    let mut w = weights.clone();
    let mut history = Vec::with_capacity(params.layers.len() + 1);
    for layer in &params.layers {
        z = encoder_layer(tape, bound, layer, &params.config, z, &w)?;
        let next = amplify_weights(&w)?;
        history.push(std::mem::replace(&mut w, next));
    }
    history.push(w);
    Ok(EncoderOutput { tokens: z, weights: history })
}
