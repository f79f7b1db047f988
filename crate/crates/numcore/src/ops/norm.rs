use crate::error::{Result, TensorError};
use crate::ops::shape::{check_axis, split_axis};
use crate::tape::{Op, Tape, Var};
use crate::tensor::{numel_of, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub(crate) fn layer_norm_backward(
    (x, gain, bias): (Var, Var, Var),
    shape: &[usize],
    gain_v: &Tensor,
    axis: usize,
    xhat: &[f64],
    inv_std: &[f64],
    g: &[f64],
) -> Vec<(Var, Vec<f64>)> {
    let (outer, len, inner) = split_axis(shape, axis);
    let gd = gain_v.data();
    let mut gx = vec![0.0; numel_of(shape)];
    let mut ggain = vec![0.0; len];
    let mut gbias = vec![0.0; len];
    let mut dxhat = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let mut mean_d = 0.0;
            let mut mean_dx = 0.0;
            for k in 0..len {
                let j = idx(k);
                ggain[k] += g[j] * xhat[j];
                gbias[k] += g[j];
                dxhat[k] = g[j] * gd[k];
                mean_d += dxhat[k];
                mean_dx += dxhat[k] * xhat[j];
            }
            mean_d /= len as f64;
            mean_dx /= len as f64;
            let s = inv_std[o * inner + i];
            for k in 0..len {
                let j = idx(k);
                gx[j] = s * (dxhat[k] - mean_d - xhat[j] * mean_dx);
            }
        }
    }
    vec![(x, gx), (gain, ggain), (bias, gbias)]
}

pub(crate) fn add_bias_backward(x: Var, shape: &[usize], bias: Var, axis: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut gb = vec![0.0; len];
    for o in 0..outer {
        for (k, acc) in gb.iter_mut().enumerate() {
            let base = (o * len + k) * inner;
            *acc += g[base..base + inner].iter().sum::<f64>();
        }
    }
    vec![(x, g.to_vec()), (bias, gb)]
}

impl Tape {
    /// Normalizes every slice along `axis` to zero mean and unit (biased)
    /// variance, with `LAYER_NORM_EPS` added under the root, then applies
    /// the per-position affine `gain`, `bias` (both `[len(axis)]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        check_axis("layer_norm", v.shape(), axis)?;
        let (outer, len, inner) = split_axis(v.shape(), axis);
        for p in [gain, bias] {
            let s = self.value(p).shape();
            if s != [len] {
                return Err(TensorError::mismatch("layer_norm", v.shape(), s));
            }
        }
        let (gd, bd) = (self.value(gain).data(), self.value(bias).data());
        let src = v.data();
        let mut out = vec![0.0; src.len()];
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let mean = (0..len).map(|k| src[idx(k)]).sum::<f64>() / len as f64;
                let var = (0..len).map(|k| (src[idx(k)] - mean).powi(2)).sum::<f64>() / len as f64;
                let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                inv_std[o * inner + i] = s;
                for k in 0..len {
                    let j = idx(k);
                    xhat[j] = (src[j] - mean) * s;
                    out[j] = xhat[j] * gd[k] + bd[k];
                }
            }
        }
        let shape = v.shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                xhat,
                inv_std,
            },
        ))
    }

    /// Adds `bias[k]` to every element whose index along `axis` is `k`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        check_axis("add_bias", v.shape(), axis)?;
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let b = self.value(bias);
        if b.shape() != [len] {
            return Err(TensorError::mismatch("add_bias", v.shape(), b.shape()));
        }
        let mut out = v.data().to_vec();
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                out[base..base + inner].iter_mut().for_each(|e| *e += b.data()[k]);
            }
        }
        let shape = v.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddBias { x, bias, axis }))
    }
}
