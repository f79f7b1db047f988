//! Layout ops. All of them copy; the graph never holds aliasing views.

use crate::error::{Result, TensorError};
use crate::tape::{Op, Tape, Var};
use crate::tensor::{numel_of, Tensor};

/// Splits `shape` around `axis` into `(outer, len, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        Err(TensorError::InvalidAxis {
            op,
            axis,
            rank: shape.len(),
        })
    } else {
        Ok(())
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `data` (laid out as `shape`) into the order given by `perm`.
fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let rank = shape.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

pub(crate) fn permute_backward(in_shape: &[usize], perm: &[usize], g: &[f64]) -> Vec<f64> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut inverse = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    permute_data(g, &out_shape, &inverse)
}

pub(crate) fn concat_backward(shapes: &[&[usize]], axis: usize, g: &[f64]) -> Vec<Vec<f64>> {
    let outer: usize = shapes[0][..axis].iter().product();
    let inner: usize = shapes[0][axis + 1..].iter().product();
    let total: usize = shapes.iter().map(|s| s[axis]).sum();
    let mut grads: Vec<Vec<f64>> = shapes.iter().map(|s| Vec::with_capacity(numel_of(s))).collect();
    for o in 0..outer {
        let mut off = 0;
        for (grad, s) in grads.iter_mut().zip(shapes) {
            let len = s[axis] * inner;
            let base = (o * total) * inner + off;
            grad.extend_from_slice(&g[base..base + len]);
            off += len;
        }
    }
    grads
}

pub(crate) fn slice_backward(in_shape: &[usize], axis: usize, start: usize, out_shape: &[usize], g: &[f64]) -> Vec<f64> {
    let (outer, len, inner) = split_axis(in_shape, axis);
    let take = out_shape[axis];
    let mut gx = vec![0.0; numel_of(in_shape)];
    for o in 0..outer {
        let dst = (o * len + start) * inner;
        let src = o * take * inner;
        gx[dst..dst + take * inner].copy_from_slice(&g[src..src + take * inner]);
    }
    gx
}

pub(crate) fn index_select_backward(in_shape: &[usize], axis: usize, indices: &[usize], g: &[f64]) -> Vec<f64> {
    let (outer, len, inner) = split_axis(in_shape, axis);
    let k = indices.len();
    let mut gx = vec![0.0; numel_of(in_shape)];
    for o in 0..outer {
        for (j, &src) in indices.iter().enumerate() {
            let dst = (o * len + src) * inner;
            let from = (o * k + j) * inner;
            for i in 0..inner {
                gx[dst + i] += g[from + i];
            }
        }
    }
    gx
}

pub(crate) fn upsample_nearest_backward(in_shape: &[usize], factor: usize, g: &[f64]) -> Vec<f64> {
    let (planes, h, w) = (in_shape[0] * in_shape[1], in_shape[2], in_shape[3]);
    let ow = w * factor;
    let mut gx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for y in 0..h * factor {
            for x in 0..ow {
                gx[(p * h + y / factor) * w + x / factor] += g[(p * h * factor + y) * ow + x];
            }
        }
    }
    gx
}

impl Tape {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let rank = v.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::invalid("permute", format!("{perm:?} is not a permutation of rank {rank}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| v.shape()[p]).collect();
        let data = permute_data(v.data(), v.shape(), perm);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Permute(x, perm.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.value(x).rank();
        if rank < 2 {
            return Err(TensorError::invalid("transpose", "rank must be at least 2"));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let base = self.value(*first).shape().to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for &x in xs {
            let s = self.value(x).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let v = self.value(x);
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(xs.to_vec(), axis)))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let v = self.value(x);
        check_axis("slice", v.shape(), axis)?;
        if start >= end || end > v.shape()[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!("range {start}..{end} invalid for axis of length {}", v.shape()[axis]),
            ));
        }
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let take = end - start;
        let mut data = Vec::with_capacity(outer * take * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            data.extend_from_slice(&v.data()[base..base + take * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = take;
        Ok(self.push(Tensor::from_parts(shape, data), Op::Slice { x, axis, start }))
    }

    /// Gathers the given positions along `axis`; repeated indices are allowed.
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let v = self.value(x);
        check_axis("index_select", v.shape(), axis)?;
        let (outer, len, inner) = split_axis(v.shape(), axis);
        if indices.is_empty() || indices.iter().any(|&i| i >= len) {
            return Err(TensorError::invalid(
                "index_select",
                format!("indices must be a non-empty subset of 0..{len}"),
            ));
        }
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * len + i) * inner;
                data.extend_from_slice(&v.data()[base..base + inner]);
            }
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = indices.len();
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::IndexSelect {
                x,
                axis,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Replicates each pixel of a `[B, C, H, W]` tensor into a
    /// `factor × factor` block.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let v = self.value(x);
        if factor < 1 {
            return Err(TensorError::invalid("upsample_nearest", "factor must be at least 1"));
        }
        if v.rank() != 4 {
            return Err(TensorError::invalid("upsample_nearest", format!("expected rank 4, got {:?}", v.shape())));
        }
        let s = v.shape();
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let mut data = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            for y in 0..oh {
                let row = &v.data()[(p * h + y / factor) * w..(p * h + y / factor + 1) * w];
                for x in 0..ow {
                    data.push(row[x / factor]);
                }
            }
        }
        let shape = vec![s[0], s[1], oh, ow];
        Ok(self.push(Tensor::from_parts(shape, data), Op::UpsampleNearest(x, factor)))
    }
}
