//! Jacobian information-flow probes.
//!
//! A probe picks one output position, sums it over channels, and
//! backpropagates to the input image. The per-pixel L2 norm of that
//! gradient over input channels is the pixel's flow into the position.

use std::fmt::Write as _;
use std::path::Path;

use numcore::{Tape, Tensor, Var};

use crate::error::{Error, Result};

/// Flow below this is treated as a structural zero.
pub const FLOW_THRESHOLD: f64 = 1e-12;

/// A forward function `(tape, image [1,3,H,W], mask [1,1,H,W]) → [1,C,h,w]`.
pub trait FlowModel {
    fn forward(&self, tape: &mut Tape, image: Var, mask: &Tensor) -> Result<Var>;
}

impl<F> FlowModel for F
where
    F: Fn(&mut Tape, Var, &Tensor) -> Result<Var>,
{
    fn forward(&self, tape: &mut Tape, image: Var, mask: &Tensor) -> Result<Var> {
        self(tape, image, mask)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowMap {
    /// `[H, W]`, nonnegative.
    pub values: Tensor,
    pub pos: (usize, usize),
    pub model: String,
}

impl FlowMap {
    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values.data()[row * self.width() + col]
    }

    /// Pixels whose flow exceeds [`FLOW_THRESHOLD`].
    pub fn support(&self) -> usize {
        self.values.data().iter().filter(|&&v| v > FLOW_THRESHOLD).count()
    }
}

/// Flow from every input pixel into output position `pos` of `model`.
pub fn jacobian_flow(
    model: &dyn FlowModel,
    name: &str,
    image: &Tensor,
    mask: &Tensor,
    pos: (usize, usize),
) -> Result<FlowMap> {
    let s = image.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::contract(format!("probe input must be a single [1,C,H,W] image, got {s:?}")));
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let mut tape = Tape::new();
    let x = tape.leaf(image.clone());
    let out = model.forward(&mut tape, x, mask)?;
    let os = tape.shape(out).to_vec();
    if os.len() != 4 || os[0] != 1 {
        return Err(Error::contract(format!("probed model must return [1,C,h,w], got {os:?}")));
    }
    let (row, col) = pos;
    if row >= os[2] || col >= os[3] {
        return Err(Error::config(format!(
            "probe position ({row}, {col}) outside the {}x{} output",
            os[2], os[3]
        )));
    }
    let sel = tape.slice(out, 2, row, row + 1)?;
    let sel = tape.slice(sel, 3, col, col + 1)?;
    let s = tape.sum(sel);
    tape.backward(s)?;
    let plane = h * w;
    let values = match tape.grad(x) {
        Some(g) => (0..plane)
            .map(|p| (0..c).map(|ch| g.data()[ch * plane + p].powi(2)).sum::<f64>().sqrt())
            .collect(),
        None => vec![0.0; plane],
    };
    Ok(FlowMap {
        values: Tensor::new([h, w], values)?,
        pos,
        model: name.to_string(),
    })
}

/// The `k` strongest pixels as `(row, col, value)`, descending, ties broken
/// in row-major order.
pub fn top_k_flow(map: &FlowMap, k: usize) -> Result<Vec<(usize, usize, f64)>> {
    let n = map.values.numel();
    if k > n {
        return Err(Error::config(format!("k = {k} exceeds the {n} pixels of the flow map")));
    }
    let w = map.width();
    let mut idx: Vec<usize> = (0..n).collect();
    let v = map.values.data();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    Ok(idx.into_iter().take(k).map(|i| (i / w, i % w, v[i])).collect())
}

/// Empirical receptive field of `pos`: the number of pixels with nonzero
/// flow, probed on `image`.
pub fn rf_support(model: &dyn FlowModel, image: &Tensor, mask: &Tensor, pos: (usize, usize)) -> Result<usize> {
    Ok(jacobian_flow(model, "", image, mask, pos)?.support())
}

/// Writes `flow.png` (8-bit, max-normalized) and `flow.txt` (raw values,
/// one row per line) into `dir`.
pub fn write_flow(map: &FlowMap, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let max = map.values.data().iter().cloned().fold(0.0, f64::max);
    let bytes: Vec<u8> = map
        .values
        .data()
        .iter()
        .map(|&v| if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 })
        .collect();
    let png = dir.join("flow.png");
    image::GrayImage::from_raw(map.width() as u32, map.height() as u32, bytes)
        .ok_or_else(|| Error::contract("heatmap buffer size"))?
        .save(&png)
        .map_err(|e| Error::Image {
            path: png.clone(),
            msg: e.to_string(),
        })?;
    let mut text = format!("# model={} pos={},{}\n", map.model, map.pos.0, map.pos.1);
    for row in map.values.data().chunks(map.width()) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(text, "{}", line.join(" "));
    }
    let txt = dir.join("flow.txt");
    std::fs::write(&txt, text).map_err(|e| Error::io(&txt, e))
}
