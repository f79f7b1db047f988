//! The A–F ablation ladder.
//!
//! | rung | change over the previous rung |
//! |------|-------------------------------|
//! | A | conv encoder-decoder: overlapping-RF embed, no attention |
//! | B | + self-attention on the decoder tokens |
//! | C | + restrictive embed |
//! | D | + transformer encoder (unweighted) |
//! | E | + visibility-weighted attention |
//! | F | + refinement network |
//!
//! All rungs are scored at the refine resolution through the full
//! completion pipeline, on the same validation images and masks.

use std::fmt::Write as _;
use std::str::FromStr;

use numcore::Tensor;

use crate::embed::EmbedKind;
use crate::error::{Error, Result};
use crate::harness::config::{RunConfig, Stage};
use crate::harness::data::Dataset;
use crate::harness::imageio::resize;
use crate::harness::masks::generate_mask;
use crate::harness::metrics::{score, Scores};
use crate::harness::pipeline::{complete, load_coarse, Loaded};
use crate::harness::train::Trainer;
use crate::model::RefineModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Rung {
    A,
    B,
    C,
    D,
    E,
    F,
}

impl Rung {
    pub const ALL: [Rung; 6] = [Rung::A, Rung::B, Rung::C, Rung::D, Rung::E, Rung::F];

    pub fn describe(self) -> &'static str {
        match self {
            Rung::A => "conv encoder-decoder",
            Rung::B => "+ decoder attention",
            Rung::C => "+ restrictive embed",
            Rung::D => "+ transformer encoder",
            Rung::E => "+ weighted attention",
            Rung::F => "+ refine network",
        }
    }

    /// Coarse-stage configuration of this rung (F shares E's).
    pub fn coarse_config(self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        c.stage = Stage::Coarse;
        c.embed_kind = if self >= Rung::C { EmbedKind::Restrictive } else { EmbedKind::LargeRf };
        c.decoder_attention = self >= Rung::B;
        c.layers = if self >= Rung::D { base.layers.max(1) } else { 0 };
        c.weighted = self >= Rung::E;
        c
    }
}

impl FromStr for Rung {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Rung::A),
            "B" | "b" => Ok(Rung::B),
            "C" | "c" => Ok(Rung::C),
            "D" | "d" => Ok(Rung::D),
            "E" | "e" => Ok(Rung::E),
            "F" | "f" => Ok(Rung::F),
            _ => Err(Error::config(format!("invalid ladder entry '{s}'"))),
        }
    }
}

pub fn parse_ladder(s: &str) -> Result<Vec<Rung>> {
    let mut v = s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect::<Result<Vec<Rung>>>()?;
    if v.is_empty() {
        return Err(Error::config("empty ladder"));
    }
    v.sort();
    v.dedup();
    Ok(v)
}

#[derive(Debug, Clone)]
pub struct RungResult {
    pub rung: Rung,
    pub per_seed: Vec<Scores>,
    pub median: Scores,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<RungResult>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl AblationReport {
    pub fn row(&self, rung: Rung) -> Option<&RungResult> {
        self.rows.iter().find(|r| r.rung == rung)
    }

    /// Ordering checks `E ≤ A` and `F ≤ E` on median L1, for the rungs
    /// present: `(label, holds)`.
    pub fn ordering(&self) -> Vec<(&'static str, bool)> {
        let l1 = |r| self.row(r).map(|x| x.median.l1);
        let mut out = Vec::new();
        if let (Some(e), Some(a)) = (l1(Rung::E), l1(Rung::A)) {
            out.push(("L1(E) <= L1(A)", e <= a));
        }
        if let (Some(f), Some(e)) = (l1(Rung::F), l1(Rung::E)) {
            out.push(("L1(F) <= L1(E)", f <= e));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "rung  {:<24} {:>9} {:>9} {:>7}   per-seed L1", "config", "L1", "PSNR", "SSIM");
        for r in &self.rows {
            let seeds: Vec<String> = r.per_seed.iter().map(|x| format!("{:.5}", x.l1)).collect();
            let _ = writeln!(
                s,
                "{:<5} {:<24} {:>9.5} {:>9.3} {:>7.4}   [{}]",
                format!("{:?}", r.rung),
                r.rung.describe(),
                r.median.l1,
                r.median.psnr,
                r.median.ssim,
                seeds.join(", ")
            );
        }
        for (label, ok) in self.ordering() {
            let _ = writeln!(s, "{label}: {}", if ok { "holds" } else { "VIOLATED (red flag)" });
        }
        s
    }
}

/// Evaluation images and masks at `base.refine_size`.
fn eval_set(base: &RunConfig, data: &Dataset) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let r = base.refine_size;
    let images = data.eval_set().to_vec();
    let masks = (0..images.len())
        .map(|i| Ok(generate_mask(r, r, &base.mask, base.seed.wrapping_add(7919 * (i as u64 + 1)))?.mask))
        .collect::<Result<Vec<_>>>()?;
    Ok((images, masks))
}

fn score_pipeline(
    coarse: &Loaded<crate::model::CoarseModel>,
    refine: Option<&Loaded<RefineModel>>,
    images: &[Tensor],
    masks: &[Tensor],
) -> Result<Scores> {
    let mut acc = Scores::default();
    for (img, m) in images.iter().zip(masks) {
        let out = complete(coarse, refine, img, m)?;
        let s = score(out.best(), img)?;
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

/// Runs `ladder` for every seed. `data` is at `base.refine_size`; coarse
/// rungs train on its area-downscaled copy. Checkpoints go under
/// `base.out/seed<k>/<rung>`.
pub fn ablate(base: &RunConfig, ladder: &[Rung], seeds: &[u64], data: &Dataset) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::config("ablation needs at least one seed"));
    }
    let small = |v: &[Tensor]| v.iter().map(|t| resize(t, base.size, base.size)).collect::<Result<Vec<_>>>();
    let coarse_data = Dataset {
        train: small(&data.train)?,
        val: small(&data.val)?,
    };
    let (images, masks) = eval_set(base, data)?;
    let mut per: Vec<Vec<Scores>> = vec![Vec::new(); ladder.len()];
    for &seed in seeds {
        let root = base.out.join(format!("seed{seed}"));
        for (i, &rung) in ladder.iter().enumerate() {
            let coarse_rung = if rung == Rung::F { Rung::E } else { rung };
            let mut cfg = coarse_rung.coarse_config(base);
            cfg.seed = seed;
            let coarse_path = root.join(format!("{coarse_rung:?}")).join("coarse.ckpt");
            if !coarse_path.exists() {
                let mut t = Trainer::new(cfg.clone())?;
                t.run(&coarse_data)?;
                t.checkpoint()?.save(&coarse_path)?;
            }
            let coarse = load_coarse(&coarse_path)?;
            let s = if rung == Rung::F {
                let mut rc = cfg.clone();
                rc.stage = Stage::Refine;
                rc.coarse_checkpoint = Some(coarse_path.clone());
                let mut t = Trainer::new(rc.clone())?;
                t.run(data)?;
                let path = root.join("F").join("refine.ckpt");
                t.checkpoint()?.save(&path)?;
                let refine = crate::harness::pipeline::load_refine(&path)?;
                score_pipeline(&coarse, Some(&refine), &images, &masks)?
            } else {
                score_pipeline(&coarse, None, &images, &masks)?
            };
            per[i].push(s);
        }
    }
    let rows = ladder
        .iter()
        .zip(per)
        .map(|(&rung, per_seed)| {
            let med = |f: fn(&Scores) -> f64| median(per_seed.iter().map(f).collect());
            RungResult {
                rung,
                median: Scores {
                    l1: med(|s| s.l1),
                    psnr: med(|s| s.psnr),
                    ssim: med(|s| s.ssim),
                },
                per_seed,
            }
        })
        .collect();
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        rows,
    })
}
