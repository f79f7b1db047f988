use crate::error::{Result, TensorError};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`
pub(crate) fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
pub(crate) fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
}

pub(crate) fn matmul_backward(a: Var, av: &Tensor, b: Var, bv: &Tensor, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
    let (m, k) = (av.shape()[0], av.shape()[1]);
    let n = bv.shape()[1];
    let mut ga = vec![0.0; m * k];
    let mut gb = vec![0.0; k * n];
    gemm_nt(g, bv.data(), &mut ga, m, k, n);
    gemm_tn(av.data(), g, &mut gb, m, k, n);
    vec![(a, ga), (b, gb)]
}

pub(crate) fn bmm_backward(a: Var, av: &Tensor, b: Var, bv: &Tensor, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
    let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
    let n = bv.shape()[2];
    let mut ga = vec![0.0; batch * m * k];
    let mut gb = vec![0.0; batch * k * n];
    for t in 0..batch {
        let gs = &g[t * m * n..(t + 1) * m * n];
        gemm_nt(gs, &bv.data()[t * k * n..(t + 1) * k * n], &mut ga[t * m * k..(t + 1) * m * k], m, k, n);
        gemm_tn(&av.data()[t * m * k..(t + 1) * m * k], gs, &mut gb[t * k * n..(t + 1) * k * n], m, k, n);
    }
    vec![(a, ga), (b, gb)]
}

impl Tape {
    /// `[M×K] · [K×N] → [M×N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(TensorError::mismatch("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(av.data(), bv.data(), &mut out, m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    /// Batched product `[G×M×K] · [G×K×N] → [G×M×N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 3 || bv.rank() != 3 || av.shape()[0] != bv.shape()[0] || av.shape()[2] != bv.shape()[1] {
            return Err(TensorError::mismatch("bmm", av.shape(), bv.shape()));
        }
        let (batch, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
        let mut out = vec![0.0; batch * m * n];
        for t in 0..batch {
            gemm_nn(
                &av.data()[t * m * k..(t + 1) * m * k],
                &bv.data()[t * k * n..(t + 1) * k * n],
                &mut out[t * m * n..(t + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Ok(self.push(Tensor::from_parts(vec![batch, m, n], out), Op::BatchMatMul(a, b)))
    }
}
