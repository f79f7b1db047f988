//! End-to-end completion: coarse inference at low resolution, recomposition
//! at full resolution, optional refinement.

use std::path::Path;

use numcore::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::compose_output;
use crate::embed::{mask_downsample, DownsampleRule, MaskedImage};
use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::{RunConfig, Stage};
use crate::harness::imageio::resize;
use crate::model::{CoarseModel, RefineModel};
use crate::params::ParamStore;
use crate::refine::{recompose, REFINE_DIVISOR};

/// A model together with the parameters it reads.
#[derive(Debug, Clone)]
pub struct Loaded<M> {
    pub model: M,
    pub store: ParamStore,
    pub config: RunConfig,
}

const SKIP: [&str; 2] = ["optim.", "disc."];

pub fn load_coarse(path: &Path) -> Result<Loaded<CoarseModel>> {
    let ckpt = Checkpoint::load(path)?;
    let config = ckpt.expect_stage(Stage::Coarse)?;
    let mut store = ckpt.to_store(&SKIP)?;
    let before = store.len();
    let model = CoarseModel::build(&mut store, config.coarse(), &mut ChaCha8Rng::seed_from_u64(0))?;
    if store.len() != before {
        return Err(Error::config(format!("{} is missing coarse parameters", path.display())));
    }
    Ok(Loaded { model, store, config })
}

pub fn load_refine(path: &Path) -> Result<Loaded<RefineModel>> {
    let ckpt = Checkpoint::load(path)?;
    let config = ckpt.expect_stage(Stage::Refine)?;
    let mut store = ckpt.to_store(&SKIP)?;
    let before = store.len();
    let model = RefineModel::build(&mut store, config.refine(), &mut ChaCha8Rng::seed_from_u64(0))?;
    if store.len() != before {
        return Err(Error::config(format!("{} is missing refine parameters", path.display())));
    }
    Ok(Loaded { model, store, config })
}

/// Runs the coarse model on a downscaled copy of `input` and fills the
/// masked pixels of `input` with the upsampled prediction. Returns
/// `(raw coarse output, recomposed full-resolution image)`.
pub fn coarse_merge(model: &CoarseModel, store: &ParamStore, input: &MaskedImage) -> Result<(Tensor, Tensor)> {
    let s = model.config.size;
    let (h, w) = (input.height(), input.width());
    if h != w || h % s != 0 {
        return Err(Error::config(format!(
            "input {h}x{w} must be square and a multiple of the coarse resolution {s}"
        )));
    }
    let factor = h / s;
    let small_mask = mask_downsample(input.mask(), factor, DownsampleRule::Strict)?;
    let small = MaskedImage::new(resize(input.image(), s, s)?, small_mask)?;
    let coarse = model.infer(store, small.image(), small.mask())?;
    let merged = recompose(input, &coarse)?;
    Ok((coarse, merged))
}

#[derive(Debug, Clone)]
pub struct Completion {
    /// Coarse prediction merged into the visible pixels at full resolution.
    pub coarse: Tensor,
    pub refined: Option<Tensor>,
}

impl Completion {
    pub fn best(&self) -> &Tensor {
        self.refined.as_ref().unwrap_or(&self.coarse)
    }
}

/// Completes `image: [B, 3, H, W]` under `mask: [B, 1, H, W]`.
pub fn complete(
    coarse: &Loaded<CoarseModel>,
    refine: Option<&Loaded<RefineModel>>,
    image: &Tensor,
    mask: &Tensor,
) -> Result<Completion> {
    let input = MaskedImage::new(image.clone(), mask.clone())?;
    let (_, merged) = coarse_merge(&coarse.model, &coarse.store, &input)?;
    let refined = match refine {
        Some(r) => {
            if input.height() % REFINE_DIVISOR != 0 {
                return Err(Error::Divisibility {
                    what: "refine input size",
                    value: input.height(),
                    divisor: REFINE_DIVISOR,
                });
            }
            let out = r.model.infer(&r.store, &merged, input.mask())?;
            Some(compose_output(&out, &input)?)
        }
        None => None,
    };
    Ok(Completion { coarse: merged, refined })
}
