//! Every differentiable op against central finite differences, plus the
//! tape-level properties (accumulation, determinism).

use numcore::{finite_diff_check, finite_diff_check_many, PconvScaling, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-5;
const EPS: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random tensor with entries bounded away from zero, keeping kinked ops
/// (relu, abs) off their non-differentiable point.
fn away_from_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
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

/// Reduces `y` to a scalar through fixed random weights so that no
/// gradient collapses to a constant.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed ^ 0x9e37_79b9);
    let w = Tensor::randn(tape.shape(y).to_vec(), 1.0, &mut r)?;
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn check_unary(name: &str, f: impl Fn(&mut Tape, Var) -> Var, positive: bool) {
    for seed in 0..10 {
        let mut r = rng(seed);
        let x = if positive {
            Tensor::uniform([3, 4], 0.2, 3.0, &mut r).unwrap()
        } else {
            away_from_zero(&[3, 4], &mut r)
        };
        let err = finite_diff_check(
            |t, x| {
                let y = f(t, x);
                project(t, y, seed)
            },
            &x,
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "{name} seed {seed}: rel err {err}");
    }
}

#[test]
fn unary_ops() {
    check_unary("sqrt", |t, x| t.sqrt(x), true);
    check_unary("exp", |t, x| t.exp(x), false);
    check_unary("ln", |t, x| t.ln(x), true);
    check_unary("gelu", |t, x| t.gelu(x), false);
    check_unary("relu", |t, x| t.relu(x), false);
    check_unary("leaky_relu", |t, x| t.leaky_relu(x, 0.2), false);
    check_unary("sigmoid", |t, x| t.sigmoid(x), false);
    check_unary("tanh", |t, x| t.tanh(x), false);
    check_unary("softplus", |t, x| t.softplus(x), false);
    check_unary("abs", |t, x| t.abs(x), false);
    check_unary("square", |t, x| t.square(x), false);
    check_unary("neg", |t, x| t.neg(x), false);
    check_unary("scale", |t, x| t.scale(x, -1.7), false);
    check_unary("add_scalar", |t, x| t.add_scalar(x, 0.3), false);
}

fn check_many(name: &str, shapes: &[&[usize]], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>, positive: bool) {
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let inputs: Vec<Tensor> = shapes
            .iter()
            .map(|s| {
                if positive {
                    Tensor::uniform(s.to_vec(), 0.5, 2.0, &mut r).unwrap()
                } else {
                    away_from_zero(s, &mut r)
                }
            })
            .collect();
        let report = finite_diff_check_many(
            |t, xs| {
                let y = f(t, xs)?;
                project(t, y, seed)
            },
            &inputs,
            EPS,
        )
        .unwrap();
        assert!(report.max_rel_error < TOL, "{name} seed {seed}: {report:?}");
    }
}

#[test]
fn binary_ops() {
    check_many("add", &[&[2, 3], &[2, 3]], |t, x| t.add(x[0], x[1]), false);
    check_many("sub", &[&[2, 3], &[2, 3]], |t, x| t.sub(x[0], x[1]), false);
    check_many("mul", &[&[2, 3], &[2, 3]], |t, x| t.mul(x[0], x[1]), false);
    check_many("div", &[&[2, 3], &[2, 3]], |t, x| t.div(x[0], x[1]), true);
    check_many("mul_scalar_broadcast", &[&[2, 3], &[]], |t, x| t.mul(x[0], x[1]), false);
    check_many("sub_scalar_lhs", &[&[1], &[4]], |t, x| t.sub(x[0], x[1]), false);
}

#[test]
fn matmul_gradient_tight() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let a = Tensor::randn([3, 4], 1.0, &mut r).unwrap();
        let b = Tensor::randn([4, 2], 1.0, &mut r).unwrap();
        let report = finite_diff_check_many(
            |t, x| {
                let c = t.matmul(x[0], x[1])?;
                Ok(t.sum(c))
            },
            &[a, b],
            EPS,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}

#[test]
fn linear_algebra_ops() {
    check_many("matmul", &[&[3, 4], &[4, 5]], |t, x| t.matmul(x[0], x[1]), false);
    check_many("bmm", &[&[2, 3, 4], &[2, 4, 2]], |t, x| t.bmm(x[0], x[1]), false);
}

#[test]
fn layout_ops() {
    check_many("reshape", &[&[2, 6]], |t, x| t.reshape(x[0], &[3, 4]), false);
    check_many("permute", &[&[2, 3, 4]], |t, x| t.permute(x[0], &[2, 0, 1]), false);
    check_many("transpose", &[&[3, 5]], |t, x| t.transpose(x[0]), false);
    check_many("concat", &[&[2, 2, 3], &[2, 1, 3]], |t, x| t.concat(&[x[0], x[1]], 1), false);
    check_many("slice", &[&[3, 5]], |t, x| t.slice(x[0], 1, 1, 4), false);
    check_many("index_select", &[&[3, 5]], |t, x| t.index_select(x[0], 1, &[4, 0, 4]), false);
    check_many("upsample_nearest", &[&[1, 2, 2, 3]], |t, x| t.upsample_nearest(x[0], 2), false);
}

#[test]
fn reductions() {
    check_many("sum", &[&[3, 4]], |t, x| Ok(t.sum(x[0])), false);
    check_many("mean", &[&[3, 4]], |t, x| Ok(t.mean(x[0])), false);
    check_many("sum_axis", &[&[3, 4, 2]], |t, x| t.sum_axis(x[0], 1), false);
    check_many("max_axis", &[&[3, 4, 2]], |t, x| Ok(t.max_axis(x[0], 1)?.0), false);
    check_many("softmax_last", &[&[3, 4]], |t, x| t.softmax(x[0], 1), false);
    check_many("softmax_inner", &[&[2, 3, 4]], |t, x| t.softmax(x[0], 1), false);
    check_many("pair_softmax", &[&[2, 3], &[2, 3]], |t, x| t.pair_softmax(x[0], x[1]), false);
}

#[test]
fn normalization() {
    check_many("layer_norm_last", &[&[3, 5], &[5], &[5]], |t, x| t.layer_norm(x[0], x[1], x[2], 1), false);
    check_many(
        "layer_norm_channels",
        &[&[2, 4, 3, 3], &[4], &[4]],
        |t, x| t.layer_norm(x[0], x[1], x[2], 1),
        false,
    );
    check_many("add_bias", &[&[2, 3, 4], &[3]], |t, x| t.add_bias(x[0], x[1], 1), false);
}

#[test]
fn convolution() {
    check_many(
        "conv2d_3x3_pad",
        &[&[2, 2, 5, 5], &[3, 2, 3, 3], &[3]],
        |t, x| t.conv2d(x[0], x[1], Some(x[2]), 1, 1),
        false,
    );
    check_many(
        "conv2d_strided",
        &[&[1, 3, 6, 6], &[2, 3, 3, 3], &[2]],
        |t, x| t.conv2d(x[0], x[1], Some(x[2]), 2, 1),
        false,
    );
    check_many(
        "conv2d_no_bias",
        &[&[1, 2, 4, 4], &[2, 2, 2, 2]],
        |t, x| t.conv2d(x[0], x[1], None, 2, 0),
        false,
    );
}

#[test]
fn partial_convolution() {
    for scaling in [PconvScaling::InverseCoverage, PconvScaling::Canonical] {
        for seed in 0..10 {
            let mut r = rng(200 + seed);
            // float mask with some fully masked windows
            let mask = Tensor::from_fn([2, 1, 4, 4], |i| {
                if (i / 8) % 3 == 1 {
                    0.0
                } else {
                    [0.0, 0.25, 1.0, 0.5][r.gen_range(0..4)]
                }
            })
            .unwrap();
            let inputs = [
                away_from_zero(&[2, 3, 4, 4], &mut r),
                away_from_zero(&[2, 3, 2, 2], &mut r),
                away_from_zero(&[2], &mut r),
            ];
            let report = finite_diff_check_many(
                |t, x| {
                    let (y, _) = t.partial_conv2d(x[0], &mask, x[1], x[2], 2, 0, scaling)?;
                    project(t, y, seed)
                },
                &inputs,
                EPS,
            )
            .unwrap();
            assert!(report.max_rel_error < TOL, "{scaling:?} seed {seed}: {report:?}");
        }
    }
}

#[test]
fn composite_graph() {
    // attention-shaped composite: softmax(x·Wᵀ) · v, normalized, gelu
    check_many(
        "composite",
        &[&[4, 3], &[3, 3], &[4, 3], &[3], &[3]],
        |t, x| {
            let wt = t.transpose(x[1])?;
            let s = t.matmul(x[0], wt)?;
            let s = t.scale(s, 0.5);
            let kt = t.transpose(x[0])?;
            let scores = t.matmul(s, kt)?;
            let a = t.softmax(scores, 1)?;
            let z = t.matmul(a, x[2])?;
            let n = t.layer_norm(z, x[3], x[4], 1)?;
            Ok(t.gelu(n))
        },
        false,
    );
}

#[test]
fn duplicated_use_equals_duplicated_leaf() {
    // f(x) = g(x, x) must see the sum of the two partials, i.e. the same
    // gradient as ∂g/∂a + ∂g/∂b evaluated with two independent leaves.
    let mut r = rng(7);
    let x = Tensor::randn([5], 1.0, &mut r).unwrap();
    let g = |t: &mut Tape, a: Var, b: Var| -> Result<Var> {
        let e = t.exp(a);
        let p = t.mul(e, b)?;
        let s = t.tanh(p);
        Ok(t.sum(s))
    };

    let mut shared = Tape::new();
    let xv = shared.leaf(x.clone());
    let out = g(&mut shared, xv, xv).unwrap();
    shared.backward(out).unwrap();

    let mut split = Tape::new();
    let a = split.leaf(x.clone());
    let b = split.leaf(x);
    let out = g(&mut split, a, b).unwrap();
    split.backward(out).unwrap();

    let expected: Vec<f64> = split
        .grad(a)
        .unwrap()
        .data()
        .iter()
        .zip(split.grad(b).unwrap().data())
        .map(|(p, q)| p + q)
        .collect();
    for (got, want) in shared.grad(xv).unwrap().data().iter().zip(&expected) {
        assert!((got - want).abs() <= 1e-14 * want.abs().max(1.0));
    }
}

#[test]
fn bitwise_determinism() {
    let run = || {
        let mut r = rng(42);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::randn([1, 2, 6, 6], 1.0, &mut r).unwrap());
        let w = tape.leaf(Tensor::randn([3, 2, 3, 3], 0.3, &mut r).unwrap());
        let y = tape.conv2d(x, w, None, 1, 1).unwrap();
        let y = tape.gelu(y);
        let s = tape.softmax(y, 1).unwrap();
        let l = tape.mean(s);
        tape.backward(l).unwrap();
        (tape.value(s).clone(), tape.grad(w).unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.data(), b.data());
    assert_eq!(ga.data(), gb.data());
}

#[test]
fn layer_norm_statistics() {
    let mut r = rng(3);
    let n = 4096;
    let x = Tensor::randn([2, n], 3.0, &mut r).unwrap();
    let gain_v = 1.7;
    let bias_v = -0.4;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let g = tape.constant(Tensor::full([n], gain_v).unwrap());
    let b = tape.constant(Tensor::full([n], bias_v).unwrap());
    let y = tape.layer_norm(xv, g, b, 1).unwrap();
    for row in tape.value(y).data().chunks(n) {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - bias_v).abs() < 1e-3, "mean {mean}");
        assert!((var - gain_v * gain_v).abs() < 1e-3, "var {var}");
    }
}

#[test]
fn all_visible_partial_conv_is_scaled_conv() {
    let mut r = rng(11);
    let x = Tensor::randn([1, 3, 4, 4], 1.0, &mut r).unwrap();
    let w = Tensor::randn([2, 3, 2, 2], 1.0, &mut r).unwrap();
    let b = Tensor::randn([2], 1.0, &mut r).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let wv = tape.constant(w.clone());
    let bv = tape.constant(b.clone());
    let mask = Tensor::ones([1, 1, 4, 4]).unwrap();
    let (p, m) = tape
        .partial_conv2d(xv, &mask, wv, bv, 2, 0, PconvScaling::InverseCoverage)
        .unwrap();
    assert!(m.data().iter().all(|&v| v == 1.0));
    let scaled = tape.constant(w.map(|v| v / 4.0).unwrap());
    let c = tape.conv2d(xv, scaled, Some(bv), 2, 0).unwrap();
    for (a, b) in tape.value(p).data().iter().zip(tape.value(c).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}
