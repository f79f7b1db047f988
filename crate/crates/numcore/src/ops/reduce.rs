use crate::error::{Result, TensorError};
use crate::ops::shape::{check_axis, split_axis};
use crate::tape::{Op, Tape, Var};
use crate::tensor::{numel_of, Tensor};

fn removed_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

pub(crate) fn sum_axis_backward(in_shape: &[usize], axis: usize, g: &[f64]) -> Vec<f64> {
    let (outer, len, inner) = split_axis(in_shape, axis);
    let mut gx = vec![0.0; numel_of(in_shape)];
    for o in 0..outer {
        for k in 0..len {
            for i in 0..inner {
                gx[(o * len + k) * inner + i] = g[o * inner + i];
            }
        }
    }
    gx
}

pub(crate) fn max_axis_backward(in_shape: &[usize], axis: usize, argmax: &[usize], g: &[f64]) -> Vec<f64> {
    let (outer, len, inner) = split_axis(in_shape, axis);
    let mut gx = vec![0.0; numel_of(in_shape)];
    for o in 0..outer {
        for i in 0..inner {
            let j = o * inner + i;
            gx[(o * len + argmax[j]) * inner + i] += g[j];
        }
    }
    gx
}

pub(crate) fn softmax_backward(y: &Tensor, axis: usize, g: &[f64]) -> Vec<f64> {
    let (outer, len, inner) = split_axis(y.shape(), axis);
    let yd = y.data();
    let mut gx = vec![0.0; yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let dot: f64 = (0..len).map(|k| g[idx(k)] * yd[idx(k)]).sum();
            for k in 0..len {
                gx[idx(k)] = yd[idx(k)] * (g[idx(k)] - dot);
            }
        }
    }
    gx
}

pub(crate) fn pair_softmax_backward(a: Var, b: Var, out: &Tensor, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
    let n = out.numel() / 2;
    let (wa, wb) = out.data().split_at(n);
    let (ga, gb) = g.split_at(n);
    let d: Vec<f64> = (0..n).map(|i| (ga[i] - gb[i]) * wa[i] * wb[i]).collect();
    let neg = d.iter().map(|v| -v).collect();
    vec![(a, d), (b, neg)]
}

/// Two-way softmax of logits `a` and `b`. The larger weight is evaluated
/// directly and the smaller as its complement, so `w_a + w_b == 1` holds
/// exactly in floating point.
pub fn pair_softmax_values(a: f64, b: f64) -> (f64, f64) {
    let d = a - b;
    if d >= 0.0 {
        let wa = 1.0 / (1.0 + (-d).exp());
        (wa, 1.0 - wa)
    } else {
        let wb = 1.0 / (1.0 + d.exp());
        (1.0 - wb, wb)
    }
}

impl Tape {
    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::from_parts(vec![], vec![s]), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.sum() / v.numel() as f64;
        self.push(Tensor::from_parts(vec![], vec![m]), Op::Mean(x))
    }

    /// Sums along `axis`, dropping it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        check_axis("sum_axis", v.shape(), axis)?;
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += v.data()[(o * len + k) * inner + i];
                }
            }
        }
        let shape = removed_axis(v.shape(), axis);
        Ok(self.push(Tensor::from_parts(shape, data), Op::SumAxis(x, axis)))
    }

    /// Maximum along `axis` (dropped) with the winning index per slice. Ties
    /// resolve to the first index, and only that position receives gradient.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        let v = self.value(x);
        check_axis("max_axis", v.shape(), axis)?;
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let mut data = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_v = v.data()[o * len * inner + i];
                for k in 1..len {
                    let c = v.data()[(o * len + k) * inner + i];
                    if c > best_v {
                        best = k;
                        best_v = c;
                    }
                }
                data.push(best_v);
                argmax.push(best);
            }
        }
        let shape = removed_axis(v.shape(), axis);
        let out = self.push(
            Tensor::from_parts(shape, data),
            Op::MaxAxis {
                x,
                axis,
                argmax: argmax.clone(),
            },
        );
        Ok((out, argmax))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        check_axis("softmax", v.shape(), axis)?;
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let src = v.data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| src[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (src[idx(k)] - max).exp();
                    data[idx(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    data[idx(k)] /= total;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(v.shape().to_vec(), data), Op::Softmax(x, axis)))
    }

    /// Elementwise two-way softmax of same-shape logits; output is `[2, ..shape]`
    /// with `out[0] + out[1] == 1` exactly at every position.
    pub fn pair_softmax(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(TensorError::mismatch("pair_softmax", av.shape(), bv.shape()));
        }
        let n = av.numel();
        let mut data = vec![0.0; 2 * n];
        for i in 0..n {
            let (wa, wb) = pair_softmax_values(av.data()[i], bv.data()[i]);
            data[i] = wa;
            data[n + i] = wb;
        }
        let mut shape = vec![2];
        shape.extend_from_slice(av.shape());
        Ok(self.push(Tensor::from_parts(shape, data), Op::PairSoftmax(a, b)))
    }
}
