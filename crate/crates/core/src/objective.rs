//! Training losses: pixel L1, a perceptual term over a frozen random conv
//! pyramid, and a non-saturating logistic GAN loss with a small
//! discriminator.

use numcore::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{init, Bound, ParamId, ParamStore};

const LEAKY_SLOPE: f64 = 0.2;
const PERCEPTUAL_WIDTHS: [usize; 3] = [8, 16, 16];
const DISC_WIDTHS: [usize; 4] = [8, 16, 32, 32];

fn same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::contract(format!(
            "{what}: shapes {:?} and {:?} differ",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

/// Mean absolute error over all elements.
pub fn pixel_loss(tape: &mut Tape, gen: Var, gt: Var) -> Result<Var> {
    same_shape(tape, gen, gt, "pixel loss")?;
    let d = tape.sub(gen, gt)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// Fixed random feature pyramid standing in for a pretrained network.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptualExtractor {
    seed: u64,
    levels: Vec<(Tensor, Tensor)>,
}

impl PerceptualExtractor {
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let mut levels = Vec::new();
        for &c in &PERCEPTUAL_WIDTHS {
            let w = init::he(&mut rng, &[c, cin, 3, 3], cin * 9)?;
            let b = Tensor::randn([c], 0.1, &mut rng)?;
            levels.push((w, b));
            cin = c;
        }
        Ok(PerceptualExtractor { seed, levels })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Activations of every level.
    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.levels.len());
        let mut h = x;
        for (w, b) in &self.levels {
            let w = tape.constant(w.clone());
            let b = tape.constant(b.clone());
            h = tape.conv2d(h, w, Some(b), 2, 1)?;
            h = tape.leaky_relu(h, LEAKY_SLOPE);
            out.push(h);
        }
        Ok(out)
    }
}

/// Sum over pyramid levels of the mean absolute feature difference.
pub fn perceptual_loss(tape: &mut Tape, ext: &PerceptualExtractor, gen: Var, gt: Var) -> Result<Var> {
    same_shape(tape, gen, gt, "perceptual loss")?;
    let fg = ext.features(tape, gen)?;
    let ft = ext.features(tape, gt)?;
    let mut total: Option<Var> = None;
    for (a, b) in fg.into_iter().zip(ft) {
        let d = tape.sub(a, b)?;
        let d = tape.abs(d);
        let m = tape.mean(d);
        total = Some(match total {
            Some(t) => tape.add(t, m)?,
            None => m,
        });
    }
    total.ok_or_else(|| Error::contract("empty perceptual pyramid"))
}

/// Strided conv stack with a linear logit head. Parameter names start with
/// `disc.` so they land in the discriminator group.
#[derive(Debug, Clone)]
pub struct DiscriminatorParams {
    stages: Vec<(ParamId, ParamId)>,
    head_w: ParamId,
    head_b: ParamId,
}

impl DiscriminatorParams {
    pub fn build<R: Rng>(store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let mut cin = 3;
        let mut stages = Vec::new();
        for (i, &c) in DISC_WIDTHS.iter().enumerate() {
            let shape = [c, cin, 3, 3];
            let w = store.param(&format!("disc.stage{i}.w"), &shape, || init::he(rng, &shape, cin * 9))?;
            let b = store.param(&format!("disc.stage{i}.b"), &[c], || init::zeros(&[c]))?;
            stages.push((w, b));
            cin = c;
        }
        let head_w = store.param("disc.head.w", &[cin, 1], || init::normal(rng, &[cin, 1], (1.0 / cin as f64).sqrt()))?;
        let head_b = store.param("disc.head.b", &[1], || init::zeros(&[1]))?;
        Ok(DiscriminatorParams { stages, head_w, head_b })
    }
}

/// One logit per image, shape `[B]`.
pub fn discriminate(tape: &mut Tape, bound: &Bound, d: &DiscriminatorParams, x: Var) -> Result<Var> {
    let mut h = x;
    for &(w, b) in &d.stages {
        h = tape.conv2d(h, bound[w], Some(bound[b]), 2, 1)?;
        h = tape.leaky_relu(h, LEAKY_SLOPE);
    }
    let s = tape.shape(h).to_vec();
    let flat = tape.reshape(h, &[s[0], s[1], s[2] * s[3]])?;
    let pooled = tape.sum_axis(flat, 2)?;
    let pooled = tape.scale(pooled, 1.0 / (s[2] * s[3]) as f64);
    let logit = tape.matmul(pooled, bound[d.head_w])?;
    let logit = tape.add_bias(logit, bound[d.head_b], 1)?;
    Ok(tape.reshape(logit, &[s[0]])?)
}

/// `mean softplus(−D(fake))`.
pub fn generator_gan_loss(tape: &mut Tape, bound: &Bound, d: &DiscriminatorParams, fake: Var) -> Result<Var> {
    let logit = discriminate(tape, bound, d, fake)?;
    let neg = tape.neg(logit);
    let sp = tape.softplus(neg);
    Ok(tape.mean(sp))
}

/// `mean softplus(−D(real)) + mean softplus(D(fake))`.
pub fn discriminator_loss(tape: &mut Tape, bound: &Bound, d: &DiscriminatorParams, real: Var, fake: Var) -> Result<Var> {
    same_shape(tape, real, fake, "discriminator loss")?;
    let lr = discriminate(tape, bound, d, real)?;
    let lr = tape.neg(lr);
    let lr = tape.softplus(lr);
    let lr = tape.mean(lr);
    let lf = discriminate(tape, bound, d, fake)?;
    let lf = tape.softplus(lf);
    let lf = tape.mean(lf);
    Ok(tape.add(lr, lf)?)
}

/// Both GAN losses on one tape: `(g_loss, d_loss)`.
pub fn gan_losses(tape: &mut Tape, bound: &Bound, d: &DiscriminatorParams, real: Var, fake: Var) -> Result<(Var, Var)> {
    let g = generator_gan_loss(tape, bound, d, fake)?;
    let dl = discriminator_loss(tape, bound, d, real, fake)?;
    Ok((g, dl))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub pixel: f64,
    pub perceptual: f64,
    pub gan: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            pixel: 1.0,
            perceptual: 1.0,
            gan: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub pixel: Var,
    pub perceptual: Var,
    pub gan: Var,
}

/// Weighted sum of the generator loss terms. Zero-weight terms are left
/// out of the graph entirely.
pub fn total_loss(tape: &mut Tape, terms: LossTerms, weights: &LossWeights) -> Result<Var> {
    let mut total = None;
    for (v, wt) in [(terms.pixel, weights.pixel), (terms.perceptual, weights.perceptual), (terms.gan, weights.gan)] {
        if !tape.value(v).is_scalar() {
            return Err(Error::contract("loss terms must be scalars"));
        }
        if wt == 0.0 {
            continue;
        }
        let scaled = if wt == 1.0 { v } else { tape.scale(v, wt) };
        total = Some(match total {
            Some(t) => tape.add(t, scaled)?,
            None => scaled,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn scalar(tape: &mut Tape, v: f64) -> Var {
        tape.constant(Tensor::scalar(v).unwrap())
    }

    #[test]
    fn pixel_loss_cases() {
        let mut tape = Tape::new();
        let gt = tape.constant(Tensor::zeros([1, 3, 2, 2]).unwrap());
        let gen = tape.constant(Tensor::full([1, 3, 2, 2], 0.5).unwrap());
        let l = pixel_loss(&mut tape, gen, gt).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.5);
        let l = pixel_loss(&mut tape, gt, gt).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);
        let other = tape.constant(Tensor::zeros([1, 3, 2, 1]).unwrap());
        assert!(pixel_loss(&mut tape, gen, other).is_err());
    }

    #[test]
    fn perceptual_loss_detects_single_pixel_changes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..100u64 {
            let ext = PerceptualExtractor::new(trial).unwrap();
            let a = Tensor::uniform([1, 3, 8, 8], 0.0, 1.0, &mut rng).unwrap();
            let mut b = a.clone();
            let i = rng.gen_range(0..b.numel());
            b.data_mut()[i] = rng.gen_range(0.0..1.0);
            let mut tape = Tape::new();
            let (va, vb) = (tape.constant(a), tape.constant(b));
            let same = perceptual_loss(&mut tape, &ext, va, va).unwrap();
            assert_eq!(tape.value(same).item().unwrap(), 0.0);
            let diff = perceptual_loss(&mut tape, &ext, va, vb).unwrap();
            assert!(tape.value(diff).item().unwrap() > 0.0);
        }
        assert_eq!(PerceptualExtractor::new(3).unwrap(), PerceptualExtractor::new(3).unwrap());
    }

    #[test]
    fn gan_losses_at_zero_logit() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = DiscriminatorParams::build(&mut store, &mut rng).unwrap();
        // zero head weights force D ≡ 0
        *store.get_mut(d.head_w) = Tensor::zeros([32, 1]).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, &[]);
        let real = tape.constant(Tensor::uniform([2, 3, 16, 16], 0.0, 1.0, &mut rng).unwrap());
        let fake = tape.constant(Tensor::uniform([2, 3, 16, 16], 0.0, 1.0, &mut rng).unwrap());
        let (g, dl) = gan_losses(&mut tape, &bound, &d, real, fake).unwrap();
        assert!((tape.value(g).item().unwrap() - LN_2).abs() < 1e-15);
        assert!((tape.value(dl).item().unwrap() - 2.0 * LN_2).abs() < 1e-15);
    }

    #[test]
    fn total_loss_cases() {
        let mut tape = Tape::new();
        let terms = LossTerms {
            pixel: scalar(&mut tape, 0.3),
            perceptual: scalar(&mut tape, 0.2),
            gan: scalar(&mut tape, 0.5),
        };
        let t = total_loss(&mut tape, terms, &LossWeights::default()).unwrap();
        assert!((tape.value(t).item().unwrap() - 1.0).abs() < 1e-15);
        let only_pixel = LossWeights {
            pixel: 1.0,
            perceptual: 0.0,
            gan: 0.0,
        };
        let t = total_loss(&mut tape, terms, &only_pixel).unwrap();
        assert_eq!(tape.value(t).item().unwrap(), 0.3);
        let zeros = LossTerms {
            pixel: scalar(&mut tape, 0.0),
            perceptual: scalar(&mut tape, 0.0),
            gan: scalar(&mut tape, 0.0),
        };
        let t = total_loss(&mut tape, zeros, &LossWeights::default()).unwrap();
        assert_eq!(tape.value(t).item().unwrap(), 0.0);
    }
}
