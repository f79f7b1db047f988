//! 2-D cross-correlation (im2col + GEMM) and the float-mask partial
//! convolution used by the token embedder.

use crate::error::{Result, TensorError};
use crate::ops::linalg::{gemm_nn, gemm_nt, gemm_tn};
use crate::tape::{Op, PconvScaling, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub batch: usize,
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Geometry {
    fn new(op: &'static str, x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
            return Err(TensorError::mismatch(op, x, w));
        }
        if stride == 0 {
            return Err(TensorError::invalid(op, "stride must be at least 1"));
        }
        let (h, wd, kh, kw) = (x[2], x[3], w[2], w[3]);
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(TensorError::KernelTooLarge {
                op,
                kernel: [kh, kw],
                input: [h + 2 * pad, wd + 2 * pad],
            });
        }
        Ok(Geometry {
            batch: x[0],
            in_c: x[1],
            h,
            w: wd,
            out_c: w[0],
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Input coordinate read by output `(oy, ox)` at kernel tap `(ky, kx)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }
}

/// Unfolds one image `[C, H, W]` into `[C·kh·kw, oh·ow]`.
fn im2col(g: &Geometry, img: &[f64], cols: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.in_c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * p;
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        cols[row + oy * g.ow + ox] = match g.source(oy, ox, ky, kx) {
                            Some((y, x)) => img[(c * g.h + y) * g.w + x],
                            None => 0.0,
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &Geometry, cols: &[f64], img: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.in_c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * p;
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            img[(c * g.h + y) * g.w + x] += cols[row + oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_backward(
    x: Var,
    w: Var,
    b: Option<Var>,
    wv: &Tensor,
    g: &Geometry,
    cols: &[f64],
    grad: &[f64],
) -> Vec<(Var, Vec<f64>)> {
    let (ck, p, o) = (g.patch(), g.positions(), g.out_c);
    let plane = g.in_c * g.h * g.w;
    let mut gx = vec![0.0; g.batch * plane];
    let mut gw = vec![0.0; o * ck];
    let mut gb = vec![0.0; o];
    let mut gcols = vec![0.0; ck * p];
    for n in 0..g.batch {
        let gout = &grad[n * o * p..(n + 1) * o * p];
        let c = &cols[n * ck * p..(n + 1) * ck * p];
        gemm_nt(gout, c, &mut gw, o, ck, p);
        for (oc, acc) in gb.iter_mut().enumerate() {
            *acc += gout[oc * p..(oc + 1) * p].iter().sum::<f64>();
        }
        gcols.iter_mut().for_each(|v| *v = 0.0);
        gemm_tn(wv.data(), gout, &mut gcols, o, ck, p);
        col2im(g, &gcols, &mut gx[n * plane..(n + 1) * plane]);
    }
    let mut out = vec![(x, gx), (w, gw)];
    if let Some(b) = b {
        out.push((b, gb));
    }
    out
}

pub(crate) fn partial_conv2d_backward(
    (x, w, b): (Var, Var, Var),
    wv: &Tensor,
    g: &Geometry,
    cols: &[f64],
    scale: &[f64],
    mask: &[f64],
    grad: &[f64],
) -> Vec<(Var, Vec<f64>)> {
    let (ck, p, o) = (g.patch(), g.positions(), g.out_c);
    let plane = g.in_c * g.h * g.w;
    let mut gx = vec![0.0; g.batch * plane];
    let mut gw = vec![0.0; o * ck];
    let mut gb = vec![0.0; o];
    let mut gcols = vec![0.0; ck * p];
    let mut scaled = vec![0.0; o * p];
    for n in 0..g.batch {
        let gout = &grad[n * o * p..(n + 1) * o * p];
        let sc = &scale[n * p..(n + 1) * p];
        for oc in 0..o {
            for q in 0..p {
                scaled[oc * p + q] = gout[oc * p + q] * sc[q];
                if sc[q] > 0.0 {
                    gb[oc] += gout[oc * p + q];
                }
            }
        }
        gemm_nt(&scaled, &cols[n * ck * p..(n + 1) * ck * p], &mut gw, o, ck, p);
        gcols.iter_mut().for_each(|v| *v = 0.0);
        gemm_tn(wv.data(), &scaled, &mut gcols, o, ck, p);
        let gimg = &mut gx[n * plane..(n + 1) * plane];
        col2im(g, &gcols, gimg);
        let m = &mask[n * g.h * g.w..(n + 1) * g.h * g.w];
        for c in 0..g.in_c {
            for (v, &mv) in gimg[c * g.h * g.w..(c + 1) * g.h * g.w].iter_mut().zip(m) {
                *v *= mv;
            }
        }
    }
    vec![(x, gx), (w, gw), (b, gb)]
}

impl Tape {
    /// Cross-correlation of `x: [B, C, H, W]` with `w: [O, C, kh, kw]`, optional
    /// bias `[O]`, zero padding `padding` on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let geom = Geometry::new("conv2d", xv.shape(), wv.shape(), stride, padding)?;
        if let Some(b) = b {
            let bs = self.value(b).shape();
            if bs != [geom.out_c] {
                return Err(TensorError::mismatch("conv2d", wv.shape(), bs));
            }
        }
        let (ck, p, o) = (geom.patch(), geom.positions(), geom.out_c);
        let plane = geom.in_c * geom.h * geom.w;
        let mut cols = vec![0.0; geom.batch * ck * p];
        let mut out = vec![0.0; geom.batch * o * p];
        for n in 0..geom.batch {
            let c = &mut cols[n * ck * p..(n + 1) * ck * p];
            im2col(&geom, &xv.data()[n * plane..(n + 1) * plane], c);
            let dst = &mut out[n * o * p..(n + 1) * o * p];
            if let Some(b) = b {
                for (oc, &bv) in self.value(b).data().iter().enumerate() {
                    dst[oc * p..(oc + 1) * p].iter_mut().for_each(|v| *v = bv);
                }
            }
            gemm_nn(wv.data(), c, dst, o, ck, p);
        }
        let shape = vec![geom.batch, o, geom.oh, geom.ow];
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv2d { x, w, b, geom, cols }))
    }

    /// Partial convolution with a float-valued mask update.
    ///
    /// `mask` is `[B, 1, H, W]` with values in `[0, 1]`, shared by all
    /// channels. For each window with coverage `Σm > 0` the output is
    /// `scale · W(x ⊙ m) + b`, where `scale` is `1/Σm` or `S/Σm`
    /// (`S = kh·kw`) depending on `scaling`; uncovered windows produce exactly
    /// zero, bias included. The returned mask is `Σm / S` per window and is
    /// not part of the differentiable graph.
    pub fn partial_conv2d(
        &mut self,
        x: Var,
        mask: &Tensor,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
        scaling: PconvScaling,
    ) -> Result<(Var, Tensor)> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let geom = Geometry::new("partial_conv2d", xv.shape(), wv.shape(), stride, padding)?;
        let ms = mask.shape();
        if ms.len() != 4 || ms[0] != geom.batch || ms[1] != 1 || ms[2] != geom.h || ms[3] != geom.w {
            return Err(TensorError::mismatch("partial_conv2d", xv.shape(), ms));
        }
        if mask.data().iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(TensorError::invalid("partial_conv2d", "mask values must lie in [0, 1]"));
        }
        if bv.shape() != [geom.out_c] {
            return Err(TensorError::mismatch("partial_conv2d", wv.shape(), bv.shape()));
        }
        let (ck, p, o) = (geom.patch(), geom.positions(), geom.out_c);
        let window = (geom.kh * geom.kw) as f64;
        let plane = geom.in_c * geom.h * geom.w;
        let hw = geom.h * geom.w;
        let mut cols = vec![0.0; geom.batch * ck * p];
        let mut scale = vec![0.0; geom.batch * p];
        let mut new_mask = vec![0.0; geom.batch * p];
        let mut out = vec![0.0; geom.batch * o * p];
        let mut masked = vec![0.0; plane];
        for n in 0..geom.batch {
            let m = &mask.data()[n * hw..(n + 1) * hw];
            let img = &xv.data()[n * plane..(n + 1) * plane];
            for c in 0..geom.in_c {
                for (j, (dst, &src)) in masked[c * hw..(c + 1) * hw].iter_mut().zip(&img[c * hw..(c + 1) * hw]).enumerate() {
                    *dst = src * m[j];
                }
            }
            let c = &mut cols[n * ck * p..(n + 1) * ck * p];
            im2col(&geom, &masked, c);
            for oy in 0..geom.oh {
                for ox in 0..geom.ow {
                    let mut covered = 0.0;
                    for ky in 0..geom.kh {
                        for kx in 0..geom.kw {
                            if let Some((y, x)) = geom.source(oy, ox, ky, kx) {
                                covered += m[y * geom.w + x];
                            }
                        }
                    }
                    let q = oy * geom.ow + ox;
                    new_mask[n * p + q] = covered / window;
                    scale[n * p + q] = if covered > 0.0 {
                        match scaling {
                            PconvScaling::InverseCoverage => 1.0 / covered,
                            PconvScaling::Canonical => window / covered,
                        }
                    } else {
                        0.0
                    };
                }
            }
            let dst = &mut out[n * o * p..(n + 1) * o * p];
            gemm_nn(wv.data(), c, dst, o, ck, p);
            let sc = &scale[n * p..(n + 1) * p];
            for oc in 0..o {
                let bias = bv.data()[oc];
                for q in 0..p {
                    let v = &mut dst[oc * p + q];
                    *v = if sc[q] > 0.0 { *v * sc[q] + bias } else { 0.0 };
                }
            }
        }
        let shape = vec![geom.batch, o, geom.oh, geom.ow];
        let mask_out = Tensor::from_parts(vec![geom.batch, 1, geom.oh, geom.ow], new_mask);
        let var = self.push(
            Tensor::from_parts(shape, out),
            Op::PartialConv2d {
                x,
                w,
                b,
                geom,
                cols,
                scale,
                mask: mask.data().to_vec(),
            },
        );
        Ok((var, mask_out))
    }
}
