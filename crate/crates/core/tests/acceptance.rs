//! Acceptance run: one PASS/FAIL line per headline criterion.
//!
//! Built with `harness = false` so the report is never captured. The process
//! exits nonzero if any hard criterion fails; the ablation ordering is only
//! a warning.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use numcore::{finite_diff_check_many, PconvScaling, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tfill::embed::{embed, EmbedConfig, EmbedKind, EmbedParams};
use tfill::encoder::{
    encoder_forward, weighted_self_attention, AttentionConfig, AttentionParams, EncoderConfig, EncoderParams,
    WeightAxis,
};
use tfill::harness::ablation::{ablate, Rung};
use tfill::harness::checkpoint::Checkpoint;
use tfill::harness::config::RunConfig;
use tfill::harness::data::Dataset;
use tfill::harness::masks::generate_center_mask;
use tfill::harness::metrics::{l1, psnr, score, ssim, PSNR_CAP};
use tfill::harness::train::{train, Trainer};
use tfill::model::{CoarseConfig, CoarseModel, RefineModel};
use tfill::objective::{
    generator_gan_loss, perceptual_loss, pixel_loss, total_loss, DiscriminatorParams, LossTerms, LossWeights,
    PerceptualExtractor,
};
use tfill::params::{Bound, ParamStore};
use tfill::probe::{jacobian_flow, FLOW_THRESHOLD};
use tfill::refine::{attention_aware_layer, AalConfig, AalParams, RefineConfig};
use tfill::{CheckpointError, Error, Result};

type Outcome = (bool, String);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Scalar reduction through fixed random weights.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::randn(tape.shape(y).to_vec(), 1.0, &mut rng(seed ^ 0x5eed))?;
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn signed(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = r.gen_range(0.1..2.0);
        if r.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
    .unwrap()
}

fn half_mask(b: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn([b, 1, h, w], |i| if (i % (h * w)) / w < h / 2 { 0.0 } else { 1.0 }).unwrap()
}

// ---------------------------------------------------------------- gradients

const FD_EPS: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> numcore::Result<Var>>;

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, bool, OpFn)> {
    let s = |v: &[&[usize]]| v.iter().map(|x| x.to_vec()).collect::<Vec<_>>();
    let pmask = Tensor::from_fn([1, 1, 4, 4], |i| [0.0, 0.25, 1.0, 0.5, 0.0, 0.0, 0.0, 0.0][i % 8]).unwrap();
    let pmask2 = pmask.clone();
    vec![
        ("sqrt", s(&[&[3, 4]]), true, Box::new(|t, x| Ok(t.sqrt(x[0])))),
        ("exp", s(&[&[3, 4]]), false, Box::new(|t, x| Ok(t.exp(x[0])))),
        ("ln", s(&[&[3, 4]]), true, Box::new(|t, x| Ok(t.ln(x[0])))),
        ("gelu", s(&[&[3, 4]]), false, Box::new(|t, x| Ok(t.gelu(x[0])))),
        ("relu", s(&[&[3, 4]]), false, Box::new(|t, x| Ok(t.relu(x[0])))),
        ("leaky_relu", s(&[&[3, 4]]), false, Box::new(|t, x| Ok(t.leaky_relu(x[0], 0.2)))),
        ("sigmoid", s(&[&[3, 4]]), false, Box::new(|t, x| Ok(t.sigmoid(x[0])))),
        ("tanh", s(&[&[3, 4]]), false, Box::new(|t, x| Ok(t.tanh(x[0])))),
        ("softplus", s(&[&[3, 4]]), false, Box::new(|t, x| Ok(t.softplus(x[0])))),
        ("abs", s(&[&[3, 4]]), false, Box::new(|t, x| Ok(t.abs(x[0])))),
        ("square", s(&[&[3, 4]]), false, Box::new(|t, x| Ok(t.square(x[0])))),
        ("neg", s(&[&[3, 4]]), false, Box::new(|t, x| Ok(t.neg(x[0])))),
        ("scale", s(&[&[3, 4]]), false, Box::new(|t, x| Ok(t.scale(x[0], -1.3)))),
        ("add_scalar", s(&[&[3, 4]]), false, Box::new(|t, x| Ok(t.add_scalar(x[0], 0.4)))),
        ("add", s(&[&[2, 3], &[2, 3]]), false, Box::new(|t, x| t.add(x[0], x[1]))),
        ("sub", s(&[&[2, 3], &[2, 3]]), false, Box::new(|t, x| t.sub(x[0], x[1]))),
        ("mul", s(&[&[2, 3], &[2, 3]]), false, Box::new(|t, x| t.mul(x[0], x[1]))),
        ("div", s(&[&[2, 3], &[2, 3]]), true, Box::new(|t, x| t.div(x[0], x[1]))),
        ("mul_broadcast", s(&[&[2, 3], &[1]]), false, Box::new(|t, x| t.mul(x[0], x[1]))),
        ("matmul", s(&[&[3, 4], &[4, 2]]), false, Box::new(|t, x| t.matmul(x[0], x[1]))),
        ("bmm", s(&[&[2, 3, 4], &[2, 4, 2]]), false, Box::new(|t, x| t.bmm(x[0], x[1]))),
        ("reshape", s(&[&[2, 6]]), false, Box::new(|t, x| t.reshape(x[0], &[4, 3]))),
        ("permute", s(&[&[2, 3, 4]]), false, Box::new(|t, x| t.permute(x[0], &[1, 2, 0]))),
        ("transpose", s(&[&[3, 5]]), false, Box::new(|t, x| t.transpose(x[0]))),
        ("concat", s(&[&[2, 2], &[2, 3]]), false, Box::new(|t, x| t.concat(&[x[0], x[1]], 1))),
        ("slice", s(&[&[3, 5]]), false, Box::new(|t, x| t.slice(x[0], 1, 1, 4))),
        ("index_select", s(&[&[3, 5]]), false, Box::new(|t, x| t.index_select(x[0], 1, &[4, 0, 4]))),
        ("upsample_nearest", s(&[&[1, 2, 2, 3]]), false, Box::new(|t, x| t.upsample_nearest(x[0], 2))),
        ("sum", s(&[&[3, 4]]), false, Box::new(|t, x| Ok(t.sum(x[0])))),
        ("mean", s(&[&[3, 4]]), false, Box::new(|t, x| Ok(t.mean(x[0])))),
        ("sum_axis", s(&[&[3, 4, 2]]), false, Box::new(|t, x| t.sum_axis(x[0], 1))),
        ("max_axis", s(&[&[3, 4, 2]]), false, Box::new(|t, x| Ok(t.max_axis(x[0], 1)?.0))),
        ("softmax", s(&[&[2, 3, 4]]), false, Box::new(|t, x| t.softmax(x[0], 1))),
        ("pair_softmax", s(&[&[2, 3], &[2, 3]]), false, Box::new(|t, x| t.pair_softmax(x[0], x[1]))),
        ("layer_norm", s(&[&[2, 4, 3, 3], &[4], &[4]]), false, Box::new(|t, x| t.layer_norm(x[0], x[1], x[2], 1))),
        ("add_bias", s(&[&[2, 3, 4], &[3]]), false, Box::new(|t, x| t.add_bias(x[0], x[1], 1))),
        (
            "conv2d",
            s(&[&[2, 2, 5, 5], &[3, 2, 3, 3], &[3]]),
            false,
            Box::new(|t, x| t.conv2d(x[0], x[1], Some(x[2]), 2, 1)),
        ),
        (
            "partial_conv2d",
            s(&[&[1, 2, 4, 4], &[3, 2, 2, 2], &[3]]),
            false,
            Box::new(move |t, x| Ok(t.partial_conv2d(x[0], &pmask, x[1], x[2], 2, 0, PconvScaling::InverseCoverage)?.0)),
        ),
        (
            "partial_conv2d_canonical",
            s(&[&[1, 2, 4, 4], &[3, 2, 3, 3], &[3]]),
            false,
            Box::new(move |t, x| Ok(t.partial_conv2d(x[0], &pmask2, x[1], x[2], 1, 1, PconvScaling::Canonical)?.0)),
        ),
    ]
}

/// Gradient check over every parameter of `store` plus `extra` inputs.
fn model_check(
    store: &ParamStore,
    extra: &[Tensor],
    f: impl Fn(&mut Tape, &Bound, &[Var]) -> Result<Var>,
) -> Result<(f64, usize)> {
    let n = store.len();
    let mut inputs: Vec<Tensor> = store.iter().map(|(_, _, t)| t.clone()).collect();
    inputs.extend_from_slice(extra);
    let report = finite_diff_check_many(
        |tape, vars| {
            let bound = Bound::from_vars(vars[..n].to_vec());
            let y = f(tape, &bound, &vars[n..]).expect("model forward");
            Ok(project(tape, y, 17).expect("projection"))
        },
        &inputs,
        FD_EPS,
    )?;
    if std::env::var_os("ACCEPTANCE_DEBUG").is_some() {
        let names: Vec<&str> = store.iter().map(|(_, n, _)| n).collect();
        eprintln!("{report:?} {:?}", names.get(report.worst.0));
    }
    Ok((report.max_rel_error, report.coordinates))
}

fn tiny_coarse(kind: EmbedKind) -> CoarseConfig {
    CoarseConfig {
        size: 8,
        embed: EmbedConfig {
            kind,
            blocks: 2,
            base_width: 4,
            pconv_canonical: false,
        },
        layers: 1,
        mlp_ratio: 2,
        attention: AttentionConfig {
            heads: 2,
            weighted: true,
            axis: WeightAxis::Keys,
            renormalize_rows: false,
        },
        decoder_heads: Some(2),
    }
}

fn gradient_integrity() -> Result<Outcome> {
    let start = Instant::now();
    let mut worst = (0.0f64, "");
    for (seed, (name, shapes, positive, f)) in op_cases().into_iter().enumerate() {
        let mut r = rng(seed as u64);
        let inputs: Vec<Tensor> = shapes
            .iter()
            .map(|s| if positive { Tensor::uniform(s.clone(), 0.5, 2.0, &mut r).unwrap() } else { signed(s, &mut r) })
            .collect();
        let rep = finite_diff_check_many(
            |t, x| {
                let y = f(t, x)?;
                let w = t.constant(Tensor::randn(t.shape(y).to_vec(), 1.0, &mut rng(seed as u64 + 99))?);
                let p = t.mul(y, w)?;
                Ok(t.sum(p))
            },
            &inputs,
            FD_EPS,
        )?;
        if rep.max_rel_error > worst.0 {
            worst = (rep.max_rel_error, name);
        }
    }
    let mut detail = format!("ops max {:.2e} ({})", worst.0, worst.1);
    let mut ok = worst.0 < FD_TOL;

    for kind in [EmbedKind::Restrictive, EmbedKind::LargeRf] {
        let mut store = ParamStore::new();
        let model = CoarseModel::build(&mut store, tiny_coarse(kind), &mut rng(3))?;
        let img = Tensor::uniform([1, 3, 8, 8], 0.0, 1.0, &mut rng(4))?;
        let mask = Tensor::from_fn([1, 1, 8, 8], |i| if i % 8 < 3 && i / 8 > 2 { 0.0 } else { 1.0 })?;
        let (err, n) = model_check(&store, &[img], |t, b, x| Ok(model.forward(t, b, x[0], &mask)?.image))?;
        ok &= err < FD_TOL && n - 192 <= 10_000;
        detail.push_str(&format!("; coarse {kind:?} {err:.2e} ({} params)", n - 192));
    }

    let mut store = ParamStore::new();
    let cfg = RefineConfig {
        width: 4,
        att_dim: 4,
        scale_logits: true,
    };
    let model = RefineModel::build(&mut store, cfg, &mut rng(5))?;
    // the zero-initialized head would hide every upstream gradient
    for name in ["refine.head.w", "refine.head.b"] {
        let id = store.by_name(name).unwrap();
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::randn(shape, 0.3, &mut rng(6))?;
    }
    let img = Tensor::uniform([1, 3, 16, 16], 0.05, 0.95, &mut rng(7))?;
    let mask = half_mask(1, 16, 16);
    let (err, n) = model_check(&store, &[img], |t, b, x| Ok(model.forward(t, b, x[0], &mask)?.image))?;
    ok &= err < FD_TOL && n - 768 <= 10_000;
    detail.push_str(&format!("; refine {err:.2e} ({} params)", n - 768));

    let ext = PerceptualExtractor::new(11)?;
    let mut dstore = ParamStore::new();
    let disc = DiscriminatorParams::build(&mut dstore, &mut rng(8))?;
    let gt = Tensor::uniform([1, 3, 16, 16], 0.0, 1.0, &mut rng(9))?;
    // keep |gen - gt| away from the kink of the absolute value
    let mut r = rng(10);
    let gen = Tensor::from_fn([1, 3, 16, 16], |i| {
        let g = gt.data()[i];
        let d = r.gen_range(0.05..0.3);
        if g > 0.5 { g - d } else { g + d }
    })?;
    let (err, _) = model_check(&dstore, &[gen], |t, b, x| {
        let g = t.constant(gt.clone());
        let terms = LossTerms {
            pixel: pixel_loss(t, x[0], g)?,
            perceptual: perceptual_loss(t, &ext, x[0], g)?,
            gan: generator_gan_loss(t, b, &disc, x[0])?,
        };
        total_loss(t, terms, &LossWeights::default())
    })?;
    ok &= err < FD_TOL;
    detail.push_str(&format!("; objective {err:.2e}"));

    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 120.0;
    detail.push_str(&format!("; {secs:.1}s"));
    Ok((ok, detail))
}

// ---------------------------------------------------------------- partial conv

/// Direct per-window evaluation. Returns `(output, new mask)`.
#[allow(clippy::too_many_arguments)]
fn pconv_oracle(
    x: &Tensor,
    m: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
    canonical: bool,
) -> (Vec<f64>, Vec<f64>) {
    let (bn, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let xv = |n: usize, c: usize, y: usize, xx: usize| x.data()[((n * cin + c) * h + y) * wd + xx];
    let mv = |n: usize, y: usize, xx: usize| m.data()[(n * h + y) * wd + xx];
    let wv = |oc: usize, c: usize, ky: usize, kx: usize| w.data()[((oc * cin + c) * k + ky) * k + kx];
    let s = (k * k) as f64;
    let (mut out, mut mask) = (Vec::new(), Vec::new());
    for n in 0..bn {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut cov = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        let (y, xx) = ((oy * stride + ky) as isize - pad as isize, (ox * stride + kx) as isize - pad as isize);
                        if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                            cov += mv(n, y as usize, xx as usize);
                        }
                    }
                }
                mask.push(cov / s);
            }
        }
    }
    for n in 0..bn {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let cov = mask[(n * oh + oy) * ow + ox] * s;
                    if cov == 0.0 {
                        out.push(0.0);
                        continue;
                    }
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (y, xx) = ((oy * stride + ky) as isize - pad as isize, (ox * stride + kx) as isize - pad as isize);
                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                    let (y, xx) = (y as usize, xx as usize);
                                    acc += wv(oc, c, ky, kx) * xv(n, c, y, xx) * mv(n, y, xx);
                                }
                            }
                        }
                    }
                    let scale = if canonical { s / cov } else { 1.0 / cov };
                    out.push(acc * scale + b.data()[oc]);
                }
            }
        }
    }
    (out, mask)
}

fn pconv_oracle_check() -> Result<Outcome> {
    let mut r = rng(1000);
    let (mut max_err, mut empty_windows) = (0.0f64, 0usize);
    let mut exact_zero = true;
    for trial in 0..1000 {
        let bn = r.gen_range(1..3);
        let cin = r.gen_range(1..4);
        let o = r.gen_range(1..4);
        let k = r.gen_range(1..4);
        let stride = r.gen_range(1..3);
        let pad = r.gen_range(0..2);
        let h = r.gen_range(k.max(2)..7);
        let wd = r.gen_range(k.max(2)..7);
        let canonical = trial % 4 == 3;
        let x = Tensor::randn([bn, cin, h, wd], 1.0, &mut r)?;
        let zero_rows = r.gen_range(0..h);
        let m = Tensor::from_fn([bn, 1, h, wd], |i| {
            let row = (i / wd) % h;
            if row < zero_rows || trial % 10 == 0 {
                0.0
            } else {
                match r.gen_range(0..3) {
                    0 => 0.0,
                    1 => 1.0,
                    _ => r.gen_range(0.0..1.0),
                }
            }
        })?;
        let w = Tensor::randn([o, cin, k, k], 1.0, &mut r)?;
        let b = Tensor::randn([o], 1.0, &mut r)?;
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
        let scaling = if canonical { PconvScaling::Canonical } else { PconvScaling::InverseCoverage };
        let (y, m2) = tape.partial_conv2d(xv, &m, wv, bv, stride, pad, scaling)?;
        let (want, want_mask) = pconv_oracle(&x, &m, &w, &b, stride, pad, canonical);
        for (a, e) in tape.value(y).data().iter().zip(&want) {
            max_err = max_err.max((a - e).abs());
        }
        for (a, e) in m2.data().iter().zip(&want_mask) {
            max_err = max_err.max((a - e).abs());
        }
        // the all-masked branch must be exactly (0, 0), bias included
        let p = want_mask.len() / bn;
        for (i, &mv) in want_mask.iter().enumerate() {
            if mv == 0.0 {
                empty_windows += 1;
                let (n, q) = (i / p, i % p);
                exact_zero &= m2.data()[i] == 0.0;
                exact_zero &= (0..o).all(|oc| tape.value(y).data()[(n * o + oc) * p + q] == 0.0);
            }
        }
    }
    let ok = max_err <= 1e-12 && exact_zero && empty_windows > 0;
    Ok((ok, format!("1000 instances, max |diff| {max_err:.2e}, {empty_windows} all-masked windows exactly (0, 0): {exact_zero}")))
}

// ---------------------------------------------------------------- weighted attention

fn attention_degeneracy() -> Result<Outcome> {
    let mut store = ParamStore::new();
    let params = AttentionParams::build(&mut store, "attn", 8, &mut rng(20))?;
    let weighted = AttentionConfig {
        heads: 2,
        weighted: true,
        axis: WeightAxis::Keys,
        renormalize_rows: false,
    };
    let plain = AttentionConfig { weighted: false, ..weighted };
    let z = Tensor::randn([2, 5, 8], 1.0, &mut rng(21))?;

    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, &[]);
    let zv = tape.constant(z);
    let a = weighted_self_attention(&mut tape, &bound, &params, &weighted, zv, &Tensor::ones([2, 5])?)?;
    let b = weighted_self_attention(&mut tape, &bound, &params, &plain, zv, &Tensor::ones([2, 5])?)?;
    let bitwise = tape.value(a.output) == tape.value(b.output);

    let z2 = tape.constant(Tensor::randn([1, 2, 8], 1.0, &mut rng(22))?);
    let t = weighted_self_attention(&mut tape, &bound, &params, &weighted, z2, &Tensor::new([1, 2], vec![1.0, 0.25])?)?;
    let (s, ws) = (tape.value(t.scores).data(), tape.value(t.weighted_scores).data());
    let mut column = true;
    for row in 0..s.len() / 2 {
        column &= ws[2 * row] == s[2 * row];
        column &= ws[2 * row + 1] == 0.25 * s[2 * row + 1];
    }
    Ok((bitwise && column, format!("all-ones bitwise equal: {bitwise}; w=[1,0.25] column exactly 0.25x: {column}")))
}

// ---------------------------------------------------------------- amplification

fn amplification() -> Result<Outcome> {
    let layers = 4;
    let cfg = EncoderConfig {
        layers,
        dim: 8,
        mlp_ratio: 2,
        tokens: 6,
        attention: AttentionConfig {
            heads: 2,
            weighted: true,
            axis: WeightAxis::Keys,
            renormalize_rows: false,
        },
    };
    let mut store = ParamStore::new();
    let params = EncoderParams::build(&mut store, "enc", cfg, &mut rng(30))?;
    let mut r = rng(31);
    let w0 = Tensor::from_fn([2, 6], |i| if i == 0 { 1.0 } else { r.gen_range(1e-3..1.0) })?;
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, &[]);
    let z = tape.constant(Tensor::randn([2, 6, 8], 1.0, &mut r)?);
    let out = encoder_forward(&mut tape, &bound, &params, z, &w0)?;
    let mut ok = out.weights.len() == layers + 1 && out.weights[0] == w0;
    for pair in out.weights.windows(2) {
        for (a, b) in pair[0].data().iter().zip(pair[1].data()) {
            ok &= *b == a.sqrt() && b >= a && *b <= 1.0;
        }
    }

    // the same through a full model whose weights come from the embedder
    let mut store = ParamStore::new();
    let mut c = tiny_coarse(EmbedKind::Restrictive);
    c.layers = 3;
    let model = CoarseModel::build(&mut store, c, &mut rng(32))?;
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, &[]);
    let img = tape.constant(Tensor::uniform([1, 3, 8, 8], 0.0, 1.0, &mut r)?);
    let mask = Tensor::from_fn([1, 1, 8, 8], |i| if i % 3 == 0 || i < 16 { 0.0 } else { 1.0 })?;
    let w = model.forward(&mut tape, &bound, img, &mask)?.weights;
    let partial = w[0].data().iter().any(|&v| v < 1.0);
    for pair in w.windows(2) {
        for (a, b) in pair[0].data().iter().zip(pair[1].data()) {
            ok &= *b == a.sqrt() && b >= a && *b <= 1.0;
        }
    }
    ok &= partial && w.len() == 4;
    Ok((ok, format!("{layers}-layer encoder and 3-layer model: w(i+1) == sqrt(w(i)) bitwise, nondecreasing, <= 1")))
}

// ---------------------------------------------------------------- AAL

struct AalCase {
    x_e: Tensor,
    x_d: Tensor,
    mask: Tensor,
    phi: Tensor,
    theta: Tensor,
    affine: [f64; 4],
    scale: bool,
}

/// Dense evaluation of the layer: returns `(z, w_v)` in `[B,C,h,w]` and
/// `[B,P]` layouts.
fn aal_oracle(k: &AalCase) -> (Vec<f64>, Vec<f64>) {
    let s = k.x_d.shape();
    let (bn, c, p) = (s[0], s[1], s[2] * s[3]);
    let a = k.phi.shape()[0];
    let proj = |w: &Tensor, n: usize, i: usize, d: usize| (0..c).map(|ch| w.data()[d * c + ch] * k.x_d.data()[(n * c + ch) * p + i]).sum::<f64>();
    let mut z = vec![0.0; bn * c * p];
    let mut wv_all = vec![0.0; bn * p];
    for n in 0..bn {
        let vis: Vec<bool> = (0..p).map(|i| k.mask.data()[n * p + i] == 1.0).collect();
        for i in 0..p {
            let logits: Vec<f64> = (0..p)
                .map(|j| {
                    let dot: f64 = (0..a).map(|d| proj(&k.phi, n, i, d) * proj(&k.theta, n, j, d)).sum();
                    if k.scale {
                        dot / (a as f64).sqrt()
                    } else {
                        dot
                    }
                })
                .collect();
            let branch = |want: bool, src: &Tensor| -> Option<(Vec<f64>, f64)> {
                let keys: Vec<usize> = (0..p).filter(|&j| vis[j] == want).collect();
                if keys.is_empty() {
                    return None;
                }
                let mx = keys.iter().map(|&j| logits[j]).fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = keys.iter().map(|&j| (logits[j] - mx).exp()).collect();
                let tot: f64 = e.iter().sum();
                let out = (0..c)
                    .map(|ch| keys.iter().zip(&e).map(|(&j, &ej)| ej / tot * src.data()[(n * c + ch) * p + j]).sum())
                    .collect();
                Some((out, mx))
            };
            let (zv, zm) = (branch(true, &k.x_e), branch(false, &k.x_d));
            let (wv, zi): (f64, Vec<f64>) = match (zv, zm) {
                (Some((zv, mv)), Some((zm, mm))) => {
                    let sv = k.affine[0] * mv + k.affine[1];
                    let sm = k.affine[2] * mm + k.affine[3];
                    let wv = 1.0 / (1.0 + (sm - sv).exp());
                    (wv, zv.iter().zip(&zm).map(|(a, b)| wv * a + (1.0 - wv) * b).collect())
                }
                (Some((zv, _)), None) => (1.0, zv),
                (None, Some((zm, _))) => (0.0, zm),
                (None, None) => unreachable!(),
            };
            wv_all[n * p + i] = wv;
            for ch in 0..c {
                z[(n * c + ch) * p + i] = zi[ch];
            }
        }
    }
    (z, wv_all)
}

fn run_aal(k: &AalCase) -> Result<(Tensor, Tensor, Tensor, Tensor, Tensor, Tensor)> {
    let c = k.x_d.shape()[1];
    let cfg = AalConfig {
        channels: c,
        att_dim: k.phi.shape()[0],
        scale_logits: k.scale,
    };
    let mut store = ParamStore::new();
    let p = AalParams::build(&mut store, "aal", cfg, &mut rng(0))?;
    *store.get_mut(p.phi) = k.phi.clone();
    *store.get_mut(p.theta) = k.theta.clone();
    for (id, v) in [p.gamma_scale, p.gamma_bias, p.alpha_scale, p.alpha_bias].into_iter().zip(k.affine) {
        *store.get_mut(id) = Tensor::new([1], vec![v])?;
    }
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, &[]);
    let xe = tape.constant(k.x_e.clone());
    let xd = tape.constant(k.x_d.clone());
    let out = attention_aware_layer(&mut tape, &bound, &p, xe, xd, &k.mask)?;
    Ok((
        tape.value(out.z).clone(),
        tape.value(out.z_v).clone(),
        tape.value(out.z_m).clone(),
        out.w_v,
        out.w_m,
        tape.value(out.output).clone(),
    ))
}

fn random_aal(r: &mut ChaCha8Rng, mask: Option<f64>) -> Result<AalCase> {
    let bn = r.gen_range(1..3);
    let c = r.gen_range(2..6);
    let (h, w) = (r.gen_range(2..5), r.gen_range(2..5));
    let a = r.gen_range(1..5);
    let p = h * w;
    let mut m = Tensor::from_fn([bn, 1, h, w], |_| mask.unwrap_or(if r.gen_bool(0.5) { 1.0 } else { 0.0 }))?;
    if mask.is_none() {
        // make sure both key sets are present
        for n in 0..bn {
            m.data_mut()[n * p] = 1.0;
            m.data_mut()[n * p + p - 1] = 0.0;
        }
    }
    Ok(AalCase {
        x_e: Tensor::randn([bn, c, h, w], 1.0, r)?,
        x_d: Tensor::randn([bn, c, h, w], 1.0, r)?,
        mask: m,
        phi: Tensor::randn([a, c, 1, 1], 1.0, r)?,
        theta: Tensor::randn([a, c, 1, 1], 1.0, r)?,
        affine: [r.gen_range(0.2..2.0), r.gen_range(-1.0..1.0), r.gen_range(0.2..2.0), r.gen_range(-1.0..1.0)],
        scale: r.gen_bool(0.5),
    })
}

fn aal_contract() -> Result<Outcome> {
    let mut r = rng(40);
    let (mut sum_one, mut recon, mut max_err) = (true, true, 0.0f64);
    for _ in 0..100 {
        let k = random_aal(&mut r, None)?;
        let (z, zv, zm, wv, wm, out) = run_aal(&k)?;
        sum_one &= wv.data().iter().zip(wm.data()).all(|(a, b)| a + b == 1.0);
        let (bn, c, p) = (z.shape()[0], z.shape()[1], z.shape()[2] * z.shape()[3]);
        for n in 0..bn {
            for ch in 0..c {
                for i in 0..p {
                    let at = (n * c + ch) * p + i;
                    let (a, b) = (wv.data()[n * p + i], wm.data()[n * p + i]);
                    recon &= z.data()[at] == a * zv.data()[at] + b * zm.data()[at];
                    recon &= out.data()[at] == k.x_d.data()[at] + z.data()[at];
                }
            }
        }
        let (want, want_wv) = aal_oracle(&k);
        for (a, e) in z.data().iter().zip(&want).chain(wv.data().iter().zip(&want_wv)) {
            max_err = max_err.max((a - e).abs());
        }
    }

    let mut fallback = true;
    for (fill, branch_is_v) in [(0.0, false), (1.0, true)] {
        for _ in 0..10 {
            let k = random_aal(&mut r, Some(fill))?;
            let (z, zv, zm, wv, wm, _) = run_aal(&k)?;
            let (want, _) = aal_oracle(&k);
            fallback &= if branch_is_v {
                wv.data().iter().all(|&v| v == 1.0) && wm.data().iter().all(|&v| v == 0.0) && z == zv
            } else {
                wm.data().iter().all(|&v| v == 1.0) && wv.data().iter().all(|&v| v == 0.0) && z == zm
            };
            fallback &= z.data().iter().zip(&want).all(|(a, e)| (a - e).abs() <= 1e-10);
        }
    }
    let ok = sum_one && recon && max_err <= 1e-10 && fallback;
    Ok((
        ok,
        format!("100 instances: w_v+w_m==1 {sum_one}, bitwise z {recon}, oracle max |diff| {max_err:.2e}, fallbacks {fallback}"),
    ))
}

// ---------------------------------------------------------------- information flow

fn information_flow() -> Result<Outcome> {
    let start = Instant::now();
    let mut r = rng(50);
    let ws: Vec<Tensor> = (0..3).map(|_| Tensor::randn([3, 3, 3, 3], 1.0, &mut r).unwrap()).collect();
    let convs = |t: &mut Tape, x: Var, _: &Tensor| -> Result<Var> {
        let mut y = x;
        for w in &ws {
            let w = t.constant(w.clone());
            y = t.conv2d(y, w, None, 1, 1)?;
        }
        Ok(y)
    };
    let img = Tensor::uniform([1, 3, 64, 64], 0.0, 1.0, &mut r)?;
    let ones = Tensor::ones([1, 1, 64, 64])?;
    let mut conv_ok = true;
    let mut centre_support = 0;
    for pos in [(32, 32), (0, 0), (63, 10)] {
        let map = jacobian_flow(&convs, "conv3", &img, &ones, pos)?;
        for row in 0..64usize {
            for col in 0..64usize {
                if row.abs_diff(pos.0) > 3 || col.abs_diff(pos.1) > 3 {
                    conv_ok &= map.at(row, col) == 0.0;
                }
            }
        }
        conv_ok &= map.support() <= 49;
        if pos == (32, 32) {
            centre_support = map.support();
        }
    }

    let cfg = CoarseConfig {
        size: 64,
        embed: EmbedConfig {
            kind: EmbedKind::Restrictive,
            blocks: 4,
            base_width: 8,
            pconv_canonical: false,
        },
        layers: 1,
        mlp_ratio: 4,
        attention: AttentionConfig {
            heads: 4,
            weighted: true,
            axis: WeightAxis::Keys,
            renormalize_rows: false,
        },
        decoder_heads: None,
    };
    let mut store = ParamStore::new();
    let model = CoarseModel::build(&mut store, cfg, &mut rng(51))?;
    let mask = generate_center_mask(64, 64)?.mask;
    let net = |t: &mut Tape, x: Var, m: &Tensor| -> Result<Var> {
        let bound = store.bind(t, &[]);
        Ok(model.forward(t, &bound, x, m)?.image)
    };
    let map = jacobian_flow(&net, "tfill", &img, &mask, (32, 32))?;
    let (mut vis, mut hit) = (0, 0);
    let (mut patches, mut patch_hits) = (0, 0);
    for pr in 0..4 {
        for pc in 0..4 {
            let (mut any_vis, mut any_hit) = (false, false);
            for row in pr * 16..(pr + 1) * 16 {
                for col in pc * 16..(pc + 1) * 16 {
                    if mask.data()[row * 64 + col] == 1.0 {
                        vis += 1;
                        any_vis = true;
                        if map.at(row, col) > FLOW_THRESHOLD {
                            hit += 1;
                            any_hit = true;
                        }
                    }
                }
            }
            patches += any_vis as usize;
            patch_hits += (any_vis && any_hit) as usize;
        }
    }
    let frac = hit as f64 / vis as f64;
    let secs = start.elapsed().as_secs_f64();
    let ok = conv_ok && centre_support == 49 && frac >= 0.99 && patch_hits == patches && secs < 60.0;
    Ok((
        ok,
        format!(
            "3x3 conv stack support {centre_support} (<= 49, zero outside: {conv_ok}); \
             transformer flow at {:.2}% of visible pixels, {patch_hits}/{patches} visible patches; {secs:.1}s",
            100.0 * frac
        ),
    ))
}

// ---------------------------------------------------------------- restrictive RF

fn restrictive_rf() -> Result<Outcome> {
    let mut ok = true;
    let mut detail = Vec::new();
    for blocks in [1usize, 2, 3, 4] {
        let size = 4 << blocks;
        let cfg = EmbedConfig {
            kind: EmbedKind::Restrictive,
            blocks,
            base_width: 4,
            pconv_canonical: false,
        };
        let mut store = ParamStore::new();
        let params = EmbedParams::build(&mut store, "embed", cfg, &mut rng(60 + blocks as u64))?;
        let tokens = |t: &mut Tape, x: Var, m: &Tensor| -> Result<Var> {
            let bound = store.bind(t, &[]);
            let g = embed(t, &bound, &params, x, m)?;
            let c = t.shape(g.tokens)[2];
            let y = t.permute(g.tokens, &[0, 2, 1])?;
            Ok(t.reshape(y, &[1, c, g.grid_h, g.grid_w])?)
        };
        let img = Tensor::uniform([1, 3, size, size], 0.0, 1.0, &mut rng(70))?;
        let ones = Tensor::ones([1, 1, size, size])?;
        let patch = 1 << blocks;
        let grid = size / patch;
        let mut exact = true;
        for tr in 0..grid {
            for tc in 0..grid {
                let map = jacobian_flow(&tokens, "embed", &img, &ones, (tr, tc))?;
                exact &= map.support() == patch * patch;
                for row in 0..size {
                    for col in 0..size {
                        let inside = row / patch == tr && col / patch == tc;
                        exact &= (map.at(row, col) > FLOW_THRESHOLD) == inside;
                    }
                }
            }
        }
        ok &= exact;
        detail.push(format!("B={blocks}: {0}x{0} per token {exact}", patch));
    }
    Ok((ok, detail.join(", ")))
}

// ---------------------------------------------------------------- overfit smoke

fn overfit_smoke() -> Result<Outcome> {
    let start = Instant::now();
    let config = RunConfig::parse(
        "size = 64\nblocks = 4\nbase_width = 8\nlayers = 2\nheads = 4\nbatch = 4\n\
         mask = center\nresample_masks = false\nsynthetic_count = 8\nsteps = 2000\nval_every = 0\nseed = 0\n",
    )?;
    let mut trainer = Trainer::new(config)?;
    let data = trainer.load_dataset()?;
    trainer.run(&data)?;
    let masks = trainer.training_masks(&data)?;
    let raw = trainer.evaluate_raw(&data.train, &masks)?;
    let composed = trainer.evaluate(&data.train, &masks)?;
    let secs = start.elapsed().as_secs_f64();
    let ok = raw.l1 < 0.03 && raw.psnr > 25.0 && composed.l1 < 0.03 && composed.psnr > 25.0 && secs < 1200.0;
    Ok((
        ok,
        format!(
            "8 images, 2000 steps: raw L1 {:.4} PSNR {:.2}; composed L1 {:.4} PSNR {:.2}; {secs:.0}s",
            raw.l1, raw.psnr, composed.l1, composed.psnr
        ),
    ))
}

// ---------------------------------------------------------------- ablation

const ABLATION_STEPS: usize = 150;

fn ablation_direction() -> Result<Outcome> {
    let out = std::env::temp_dir().join(format!("tfill-acceptance-ablation-{}", std::process::id()));
    let base = RunConfig::parse(&format!(
        "size = 32\nrefine_size = 64\nblocks = 2\nbase_width = 16\nlayers = 2\nheads = 4\nbatch = 4\n\
         steps = {ABLATION_STEPS}\nval_every = 0\nmask = freeform\nmask_ratio_min = 0.2\nmask_ratio_max = 0.3\nout = {}\n",
        out.display()
    ))?;
    let data = Dataset::synthetic(40, 64, 0)?;
    let report = ablate(&base, &[Rung::A, Rung::E, Rung::F], &[0, 1, 2], &data);
    let _ = std::fs::remove_dir_all(&out);
    let report = report?;
    let ordering = report.ordering();
    let ok = ordering.len() == 2 && ordering.iter().all(|(_, h)| *h);
    let rows: Vec<String> = report
        .rows
        .iter()
        .map(|r| {
            let seeds: Vec<String> = r.per_seed.iter().map(|s| format!("{:.5}", s.l1)).collect();
            format!("{:?} median {:.5} [{}]", r.rung, r.median.l1, seeds.join(", "))
        })
        .collect();
    let checks: Vec<String> = ordering.iter().map(|(l, h)| format!("{l} {}", if *h { "holds" } else { "violated" })).collect();
    Ok((ok, format!("{ABLATION_STEPS} steps/rung; {}; {}", rows.join("; "), checks.join(", "))))
}

// ---------------------------------------------------------------- determinism

fn determinism() -> Result<Outcome> {
    let dir = tempfile::tempdir().map_err(|e| Error::Data(e.to_string()))?;
    let text = |out: &std::path::Path, steps: usize| {
        format!(
            "size = 16\nblocks = 2\nbase_width = 4\nlayers = 1\nheads = 2\nmlp_ratio = 2\nbatch = 2\n\
             steps = {steps}\nval_every = 2\nsynthetic_count = 6\nseed = 3\nout = {}\n",
            out.display()
        )
    };
    // the output directory is part of the stored config, so both runs share it
    let a = dir.path().join("run");
    let read = |p: std::path::PathBuf| std::fs::read(p).unwrap();
    let ra = train(&RunConfig::parse(&text(&a, 5))?)?;
    let (log_a, ckpt_a) = (read(a.join("metrics.jsonl")), read(a.join("coarse.ckpt")));
    let rb = train(&RunConfig::parse(&text(&a, 5))?)?;
    let same_log = read(a.join("metrics.jsonl")) == log_a && ra.log == rb.log;
    let same_ckpt = ra.checkpoint.checksum() == rb.checkpoint.checksum() && read(a.join("coarse.ckpt")) == ckpt_a;

    let bytes = ra.checkpoint.to_bytes();
    let back = Checkpoint::from_bytes(&bytes)?;
    let loaded = Checkpoint::load(&a.join("coarse.ckpt"))?;
    let lossless = back == ra.checkpoint && back.to_bytes() == bytes && loaded == ra.checkpoint;

    let mut corrupt = bytes.clone();
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 0x40;
    let rejected = matches!(Checkpoint::from_bytes(&corrupt), Err(CheckpointError::ChecksumMismatch));
    let path = dir.path().join("corrupt.ckpt");
    std::fs::write(&path, &corrupt).map_err(|e| Error::Data(e.to_string()))?;
    let rejected_file = matches!(Checkpoint::load(&path), Err(Error::Checkpoint(CheckpointError::ChecksumMismatch)));

    let zero = Trainer::new(RunConfig::parse(&text(&a, 0))?)?;
    let fresh = Trainer::new(RunConfig::parse(&text(&a, 0))?)?;
    let init_equal = zero.checkpoint()? == fresh.checkpoint()?;

    let ok = same_log && same_ckpt && lossless && rejected && rejected_file && init_equal;
    Ok((
        ok,
        format!(
            "identical logs {same_log}, checksums {same_ckpt}, bitwise round-trip {lossless}, \
             corruption rejected {}, zero-step init stable {init_equal}",
            rejected && rejected_file
        ),
    ))
}

// ---------------------------------------------------------------- metrics

fn metric_correctness() -> Result<Outcome> {
    let mut r = rng(80);
    let a = Tensor::uniform([1, 3, 24, 24], 0.0, 1.0, &mut r)?;
    let s = score(&a, &a)?;
    let identical = s.psnr == PSNR_CAP && s.ssim == 1.0 && s.l1 == 0.0;
    let flat = Tensor::full([1, 3, 16, 16], 0.5)?;
    let shifted = Tensor::full([1, 3, 16, 16], 0.6)?;
    let p = psnr(&flat, &shifted)?;
    let twenty = (p - 20.0).abs() < 1e-9 && (l1(&flat, &shifted)? - 0.1).abs() < 1e-12;
    let mut sym = 0.0f64;
    for _ in 0..20 {
        let x = Tensor::uniform([1, 3, 20, 20], 0.0, 1.0, &mut r)?;
        let y = Tensor::uniform([1, 3, 20, 20], 0.0, 1.0, &mut r)?;
        sym = sym.max((ssim(&x, &y)? - ssim(&y, &x)?).abs());
    }
    let ok = identical && twenty && sym <= 1e-12;
    Ok((ok, format!("identical -> 99/1/0 {identical}; MSE 0.01 -> {p:.6} dB; SSIM asymmetry {sym:.1e}")))
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let criteria: [(&str, bool, fn() -> Result<Outcome>); 11] = [
        ("gradient integrity", true, gradient_integrity),
        ("partial-conv oracle", true, pconv_oracle_check),
        ("weighted-attention degeneracy", true, attention_degeneracy),
        ("weight amplification", true, amplification),
        ("AAL contract", true, aal_contract),
        ("information flow", true, information_flow),
        ("restrictive RF", true, restrictive_rf),
        ("overfit smoke", true, overfit_smoke),
        ("ablation direction", false, ablation_direction),
        ("determinism & persistence", true, determinism),
        ("metric correctness", true, metric_correctness),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, hard, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let (ok, detail) = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(Ok(v)) => v,
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".into()),
        };
        let tag = match (ok, hard) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "FAIL (red flag, not fatal)",
        };
        println!("{tag} {name}: {detail} [{:.1}s]", start.elapsed().as_secs_f64());
        if !ok && hard {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
