//! Alternating generator/discriminator training for either stage.

use std::io::Write as _;
use std::path::Path;

use numcore::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::compose_output;
use crate::embed::MaskedImage;
use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::{RunConfig, Stage};
use crate::harness::data::{stack, Dataset};
use crate::harness::masks::generate_mask;
use crate::harness::metrics::{score, Scores};
use crate::harness::optim::Adam;
use crate::harness::pipeline::{coarse_merge, load_coarse, Loaded};
use crate::model::{CoarseModel, RefineModel};
use crate::objective::{
    discriminator_loss, generator_gan_loss, perceptual_loss, pixel_loss, total_loss, DiscriminatorParams, LossTerms,
    PerceptualExtractor,
};
use crate::params::{Bound, ParamGroup, ParamStore};

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub g_loss: f64,
    pub d_loss: f64,
    pub pixel: f64,
    pub perceptual: f64,
    pub gan: f64,
    pub l1: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct StepLosses {
    g: f64,
    d: f64,
    pixel: f64,
    perceptual: f64,
    gan: f64,
}

enum Generator {
    Coarse(CoarseModel),
    Refine { coarse: Box<Loaded<CoarseModel>>, refine: RefineModel },
}

/// Training state for one stage.
pub struct Trainer {
    pub config: RunConfig,
    pub store: ParamStore,
    generator: Generator,
    disc: DiscriminatorParams,
    extractor: PerceptualExtractor,
    adam: Adam,
    rng: ChaCha8Rng,
    fixed_masks: Vec<Tensor>,
    step: usize,
}

fn mask_seed(base: u64, salt: u64, index: usize) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt.wrapping_add(index as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

const TRAIN_SALT: u64 = 0x7472_6169_6e;
const EVAL_SALT: u64 = 0x6576_616c;

impl Trainer {
    /// Builds a freshly initialized stage. The refine stage loads its frozen
    /// coarse model from `config.coarse_checkpoint`.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let generator = match config.stage {
            Stage::Coarse => Generator::Coarse(CoarseModel::build(&mut store, config.coarse(), &mut init_rng)?),
            Stage::Refine => {
                let path = config
                    .coarse_checkpoint
                    .as_ref()
                    .ok_or_else(|| Error::config("the refine stage needs coarse_checkpoint"))?;
                let coarse = Box::new(load_coarse(path)?);
                let refine = RefineModel::build(&mut store, config.refine(), &mut init_rng)?;
                Generator::Refine { coarse, refine }
            }
        };
        let disc = DiscriminatorParams::build(&mut store, &mut init_rng)?;
        Ok(Trainer {
            extractor: PerceptualExtractor::new(config.perceptual_seed)?,
            adam: Adam::new(config.lr, config.beta1, config.beta2),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ TRAIN_SALT),
            fixed_masks: Vec::new(),
            step: 0,
            store,
            generator,
            disc,
            config,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Working resolution of this stage.
    pub fn resolution(&self) -> usize {
        match self.config.stage {
            Stage::Coarse => self.config.size,
            Stage::Refine => self.config.refine_size,
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let size = self.resolution();
        match &self.config.data {
            Some(dir) => Dataset::from_dir(dir, size),
            None => Dataset::synthetic(self.config.synthetic_count, size, self.config.seed),
        }
    }

    fn mask_for(&mut self, index: usize, salt: u64) -> Result<Tensor> {
        let r = self.resolution();
        Ok(generate_mask(r, r, &self.config.mask, mask_seed(self.config.seed, salt, index))?.mask)
    }

    /// Fixed evaluation mask for image `index` of an evaluation set.
    pub fn eval_mask(&mut self, index: usize) -> Result<Tensor> {
        self.mask_for(index, EVAL_SALT)
    }

    /// The mask image `index` gets when masks are not resampled.
    fn train_mask(&mut self, index: usize) -> Result<Tensor> {
        while self.fixed_masks.len() <= index {
            let m = self.mask_for(self.fixed_masks.len(), TRAIN_SALT)?;
            self.fixed_masks.push(m);
        }
        Ok(self.fixed_masks[index].clone())
    }

    /// Generator forward on `tape`: returns the prediction that the losses
    /// see (raw, or composed when configured).
    fn predict(&self, tape: &mut Tape, bound: &Bound, input: &MaskedImage, gt: &Tensor) -> Result<Var> {
        let raw = match &self.generator {
            Generator::Coarse(model) => {
                let x = tape.constant(input.image().clone());
                model.forward(tape, bound, x, input.mask())?.image
            }
            Generator::Refine { coarse, refine } => {
                let (_, merged) = coarse_merge(&coarse.model, &coarse.store, input)?;
                let x = tape.constant(merged);
                refine.forward(tape, bound, x, input.mask())?.image
            }
        };
        if !self.config.loss_on_composed {
            return Ok(raw);
        }
        let s = gt.shape();
        let plane = s[2] * s[3];
        let m = input.mask().data();
        let hole = Tensor::from_fn(s.to_vec(), |i| 1.0 - m[(i / (3 * plane)) * plane + i % plane])?;
        let keep = compose_output(&Tensor::zeros(s.to_vec())?, input)?;
        let hole = tape.constant(hole);
        let keep = tape.constant(keep);
        let filled = tape.mul(raw, hole)?;
        Ok(tape.add(filled, keep)?)
    }

    fn train_step(&mut self, data: &Dataset) -> Result<StepLosses> {
        let n = data.train.len();
        let b = self.config.batch;
        let mut images = Vec::with_capacity(b);
        let mut masks = Vec::with_capacity(b);
        for k in 0..b {
            let idx = (self.step * b + k) % n;
            images.push(&data.train[idx]);
            let m = if self.config.resample_masks {
                let r = self.resolution();
                let seed = self.rng.gen();
                generate_mask(r, r, &self.config.mask, seed)?.mask
            } else {
                self.train_mask(idx)?
            };
            masks.push(m);
        }
        let gt = stack(&images)?;
        let mask = stack(&masks.iter().collect::<Vec<_>>())?;
        let input = MaskedImage::new(gt.clone(), mask)?;
        let w = self.config.loss;
        let use_gan = w.gan != 0.0;

        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, &[ParamGroup::Generator]);
        let pred = self.predict(&mut tape, &bound, &input, &gt)?;
        let target = tape.constant(gt.clone());
        let pixel = pixel_loss(&mut tape, pred, target)?;
        let perceptual = if w.perceptual != 0.0 {
            perceptual_loss(&mut tape, &self.extractor, pred, target)?
        } else {
            tape.constant(Tensor::scalar(0.0)?)
        };
        let gan = if use_gan {
            generator_gan_loss(&mut tape, &bound, &self.disc, pred)?
        } else {
            tape.constant(Tensor::scalar(0.0)?)
        };
        let loss = total_loss(&mut tape, LossTerms { pixel, perceptual, gan }, &w)?;
        tape.backward(loss)?;
        self.adam.step(&mut self.store, &tape, &bound, ParamGroup::Generator)?;
        let mut out = StepLosses {
            g: tape.value(loss).item()?,
            d: 0.0,
            pixel: tape.value(pixel).item()?,
            perceptual: tape.value(perceptual).item()?,
            gan: tape.value(gan).item()?,
        };

        if use_gan {
            let fake = tape.value(pred).clone();
            let mut tape = Tape::new();
            let bound = self.store.bind(&mut tape, &[ParamGroup::Discriminator]);
            let real = tape.constant(gt);
            let fake = tape.constant(fake);
            let dl = discriminator_loss(&mut tape, &bound, &self.disc, real, fake)?;
            tape.backward(dl)?;
            self.adam.step(&mut self.store, &tape, &bound, ParamGroup::Discriminator)?;
            out.d = tape.value(dl).item()?;
        }
        self.step += 1;
        Ok(out)
    }

    /// Composed-output metrics of the current generator, one image at a time.
    pub fn evaluate(&self, images: &[Tensor], masks: &[Tensor]) -> Result<Scores> {
        self.evaluate_with(images, masks, true)
    }

    /// Metrics of the raw prediction, without pasting back visible pixels.
    pub fn evaluate_raw(&self, images: &[Tensor], masks: &[Tensor]) -> Result<Scores> {
        self.evaluate_with(images, masks, false)
    }

    fn evaluate_with(&self, images: &[Tensor], masks: &[Tensor], composed: bool) -> Result<Scores> {
        if images.is_empty() || images.len() != masks.len() {
            return Err(Error::contract("evaluation needs one mask per image"));
        }
        let mut acc = Scores::default();
        for (img, m) in images.iter().zip(masks) {
            let input = MaskedImage::new(img.clone(), m.clone())?;
            let out = match &self.generator {
                Generator::Coarse(model) => model.infer(&self.store, input.image(), input.mask())?,
                Generator::Refine { coarse, refine } => {
                    let (_, merged) = coarse_merge(&coarse.model, &coarse.store, &input)?;
                    refine.infer(&self.store, &merged, input.mask())?
                }
            };
            let out = if composed { compose_output(&out, &input)? } else { out };
            let s = score(&out, img)?;
            acc.l1 += s.l1;
            acc.psnr += s.psnr;
            acc.ssim += s.ssim;
        }
        let k = images.len() as f64;
        Ok(Scores {
            l1: acc.l1 / k,
            psnr: acc.psnr / k,
            ssim: acc.ssim / k,
        })
    }

    /// Metrics on `images` under their fixed evaluation masks.
    pub fn validate(&mut self, images: &[Tensor]) -> Result<Scores> {
        let masks = (0..images.len()).map(|i| self.eval_mask(i)).collect::<Result<Vec<_>>>()?;
        self.evaluate(images, &masks)
    }

    /// Metrics on the training images under the masks they are trained with
    /// (fixed masks only; otherwise the evaluation masks).
    pub fn training_scores(&mut self, data: &Dataset) -> Result<Scores> {
        let masks = self.training_masks(data)?;
        self.evaluate(&data.train, &masks)
    }

    /// Masks paired with `data.train` for evaluation: the fixed training
    /// masks, or the evaluation masks when masks are resampled per step.
    pub fn training_masks(&mut self, data: &Dataset) -> Result<Vec<Tensor>> {
        (0..data.train.len())
            .map(|i| if self.config.resample_masks { self.eval_mask(i) } else { self.train_mask(i) })
            .collect()
    }

    /// Runs `config.steps` steps, validating every `val_every` steps and at
    /// the end. Each validation appends a record to the returned log.
    pub fn run(&mut self, data: &Dataset) -> Result<Vec<LogRecord>> {
        if data.train.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        let mut log = Vec::new();
        let every = self.config.val_every;
        while self.step < self.config.steps {
            let last = self.train_step(data)?;
            if (every > 0 && self.step % every == 0) || self.step == self.config.steps {
                let s = self.validate(data.eval_set())?;
                log.push(LogRecord {
                    step: self.step,
                    g_loss: last.g,
                    d_loss: last.d,
                    pixel: last.pixel,
                    perceptual: last.perceptual,
                    gan: last.gan,
                    l1: s.l1,
                    psnr: s.psnr,
                    ssim: s.ssim,
                });
            }
        }
        Ok(log)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut extra = self.adam.state(&self.store)?;
        extra.push(("train.step".into(), Tensor::new([1], vec![self.step as f64])?));
        Ok(Checkpoint::from_store(&self.config, &self.store, extra))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
}

pub fn write_log(log: &[LogRecord], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in log {
        let line = serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Trains one stage end to end and writes `<stage>.ckpt` and
/// `metrics.jsonl` under `config.out`.
pub fn train(config: &RunConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone())?;
    let data = trainer.load_dataset()?;
    let log = trainer.run(&data)?;
    let checkpoint = trainer.checkpoint()?;
    std::fs::create_dir_all(&config.out).map_err(|e| Error::io(&config.out, e))?;
    checkpoint.save(&config.out.join(format!("{}.ckpt", config.stage.as_str())))?;
    write_log(&log, &config.out.join("metrics.jsonl"))?;
    Ok(TrainOutcome { checkpoint, log })
}
