//! Run configuration in a plain `key = value` format.
//!
//! Lines starting with `#` and blank lines are ignored, trailing `# ...`
//! comments are stripped, and unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::embed::{EmbedConfig, EmbedKind};
use crate::encoder::{AttentionConfig, WeightAxis};
use crate::error::{Error, Result};
use crate::harness::masks::{MaskKind, MaskSpec};
use crate::model::CoarseConfig;
use crate::objective::LossWeights;
use crate::refine::{RefineConfig, REFINE_DIVISOR};

/// Environment variable overriding the configured seed.
pub const SEED_ENV: &str = "TFILL_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Coarse,
    Refine,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Coarse => "coarse",
            Stage::Refine => "refine",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coarse" => Ok(Stage::Coarse),
            "refine" => Ok(Stage::Refine),
            _ => Err(Error::config(format!("unknown stage '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub stage: Stage,
    pub seed: u64,
    /// Coarse-stage resolution.
    pub size: usize,
    /// Refine-stage resolution.
    pub refine_size: usize,

    pub embed_kind: EmbedKind,
    pub blocks: usize,
    pub base_width: usize,
    pub pconv_canonical: bool,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub weighted: bool,
    pub weight_axis: WeightAxis,
    pub renormalize_rows: bool,
    pub decoder_attention: bool,

    pub refine_width: usize,
    pub refine_att_dim: usize,
    pub refine_scale_logits: bool,

    pub loss: LossWeights,
    pub perceptual_seed: u64,
    /// Compute losses on the composed output instead of the raw prediction.
    pub loss_on_composed: bool,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch: usize,
    pub steps: usize,
    pub val_every: usize,

    pub mask: MaskSpec,
    /// Draw a fresh mask per training sample each step, or fix one per image.
    pub resample_masks: bool,

    /// Image directory; `None` uses the synthetic texture set.
    pub data: Option<PathBuf>,
    pub synthetic_count: usize,
    pub out: PathBuf,
    pub coarse_checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            stage: Stage::Coarse,
            seed: 0,
            size: 64,
            refine_size: 128,
            embed_kind: EmbedKind::Restrictive,
            blocks: 4,
            base_width: 16,
            pconv_canonical: false,
            layers: 4,
            heads: 4,
            mlp_ratio: 4,
            weighted: true,
            weight_axis: WeightAxis::Keys,
            renormalize_rows: false,
            decoder_attention: false,
            refine_width: 8,
            refine_att_dim: 8,
            refine_scale_logits: true,
            loss: LossWeights::default(),
            perceptual_seed: 1234,
            loss_on_composed: false,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch: 4,
            steps: 1000,
            val_every: 100,
            mask: MaskSpec::default(),
            resample_masks: true,
            data: None,
            synthetic_count: 64,
            out: PathBuf::from("runs/default"),
            coarse_checkpoint: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("invalid value '{v}' for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!("invalid boolean '{v}' for {key}"))),
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies [`SEED_ENV`] if it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = parse(SEED_ENV, v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "stage" => self.stage = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            "size" => self.size = parse(key, v)?,
            "refine_size" => self.refine_size = parse(key, v)?,
            "embed" => {
                self.embed_kind = match v {
                    "restrictive" => EmbedKind::Restrictive,
                    "large_rf" => EmbedKind::LargeRf,
                    _ => return Err(Error::config(format!("unknown embed '{v}'"))),
                }
            }
            "blocks" => self.blocks = parse(key, v)?,
            "base_width" => self.base_width = parse(key, v)?,
            "pconv_canonical" => self.pconv_canonical = parse_bool(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, v)?,
            "weighted" => self.weighted = parse_bool(key, v)?,
            "weight_axis" => {
                self.weight_axis = match v {
                    "keys" => WeightAxis::Keys,
                    "queries" => WeightAxis::Queries,
                    _ => return Err(Error::config(format!("unknown weight_axis '{v}'"))),
                }
            }
            "renormalize_rows" => self.renormalize_rows = parse_bool(key, v)?,
            "decoder_attention" => self.decoder_attention = parse_bool(key, v)?,
            "refine_width" => self.refine_width = parse(key, v)?,
            "refine_att_dim" => self.refine_att_dim = parse(key, v)?,
            "refine_scale_logits" => self.refine_scale_logits = parse_bool(key, v)?,
            "w_pixel" => self.loss.pixel = parse(key, v)?,
            "w_perceptual" => self.loss.perceptual = parse(key, v)?,
            "w_gan" => self.loss.gan = parse(key, v)?,
            "perceptual_seed" => self.perceptual_seed = parse(key, v)?,
            "loss_on_composed" => self.loss_on_composed = parse_bool(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "val_every" => self.val_every = parse(key, v)?,
            "mask" => {
                self.mask.kind = match v {
                    "center" => MaskKind::Center,
                    "freeform" => MaskKind::FreeForm,
                    _ => return Err(Error::config(format!("unknown mask kind '{v}'"))),
                }
            }
            "mask_ratio_min" => self.mask.ratio.0 = parse(key, v)?,
            "mask_ratio_max" => self.mask.ratio.1 = parse(key, v)?,
            "mask_strokes_min" => self.mask.strokes.0 = parse(key, v)?,
            "mask_strokes_max" => self.mask.strokes.1 = parse(key, v)?,
            "mask_width_min" => self.mask.width.0 = parse(key, v)?,
            "mask_width_max" => self.mask.width.1 = parse(key, v)?,
            "mask_length_min" => self.mask.length.0 = parse(key, v)?,
            "mask_length_max" => self.mask.length.1 = parse(key, v)?,
            "resample_masks" => self.resample_masks = parse_bool(key, v)?,
            "data" => self.data = opt_path(v).filter(|p| p.as_os_str() != "synthetic"),
            "synthetic_count" => self.synthetic_count = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "coarse_checkpoint" => self.coarse_checkpoint = opt_path(v),
            _ => return Err(Error::config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.coarse().validate()?;
        if self.stage == Stage::Refine && self.refine_size % REFINE_DIVISOR != 0 {
            return Err(Error::Divisibility {
                what: "refine_size",
                value: self.refine_size,
                divisor: REFINE_DIVISOR,
            });
        }
        if self.stage == Stage::Refine && (self.refine_size < self.size || self.refine_size % self.size != 0) {
            return Err(Error::config(format!(
                "refine_size {} must be a multiple of size {}",
                self.refine_size, self.size
            )));
        }
        if self.batch == 0 {
            return Err(Error::config("batch must be positive"));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("lr must be positive and betas in [0, 1)"));
        }
        self.mask.validate()
    }

    pub fn coarse(&self) -> CoarseConfig {
        CoarseConfig {
            size: self.size,
            embed: EmbedConfig {
                kind: self.embed_kind,
                blocks: self.blocks,
                base_width: self.base_width,
                pconv_canonical: self.pconv_canonical,
            },
            layers: self.layers,
            mlp_ratio: self.mlp_ratio,
            attention: AttentionConfig {
                heads: self.heads,
                weighted: self.weighted,
                axis: self.weight_axis,
                renormalize_rows: self.renormalize_rows,
            },
            decoder_heads: self.decoder_attention.then_some(self.heads),
        }
    }

    pub fn refine(&self) -> RefineConfig {
        RefineConfig {
            width: self.refine_width,
            att_dim: self.refine_att_dim,
            scale_logits: self.refine_scale_logits,
        }
    }

    /// Serializes every key; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let b = |v: bool| if v { "true" } else { "false" };
        let p = |v: &Option<PathBuf>| v.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("stage", self.stage.as_str().into());
        kv("seed", self.seed.to_string());
        kv("size", self.size.to_string());
        kv("refine_size", self.refine_size.to_string());
        kv(
            "embed",
            match self.embed_kind {
                EmbedKind::Restrictive => "restrictive",
                EmbedKind::LargeRf => "large_rf",
            }
            .into(),
        );
        kv("blocks", self.blocks.to_string());
        kv("base_width", self.base_width.to_string());
        kv("pconv_canonical", b(self.pconv_canonical).into());
        kv("layers", self.layers.to_string());
        kv("heads", self.heads.to_string());
        kv("mlp_ratio", self.mlp_ratio.to_string());
        kv("weighted", b(self.weighted).into());
        kv(
            "weight_axis",
            match self.weight_axis {
                WeightAxis::Keys => "keys",
                WeightAxis::Queries => "queries",
            }
            .into(),
        );
        kv("renormalize_rows", b(self.renormalize_rows).into());
        kv("decoder_attention", b(self.decoder_attention).into());
        kv("refine_width", self.refine_width.to_string());
        kv("refine_att_dim", self.refine_att_dim.to_string());
        kv("refine_scale_logits", b(self.refine_scale_logits).into());
        kv("w_pixel", format!("{:?}", self.loss.pixel));
        kv("w_perceptual", format!("{:?}", self.loss.perceptual));
        kv("w_gan", format!("{:?}", self.loss.gan));
        kv("perceptual_seed", self.perceptual_seed.to_string());
        kv("loss_on_composed", b(self.loss_on_composed).into());
        kv("lr", format!("{:?}", self.lr));
        kv("beta1", format!("{:?}", self.beta1));
        kv("beta2", format!("{:?}", self.beta2));
        kv("batch", self.batch.to_string());
        kv("steps", self.steps.to_string());
        kv("val_every", self.val_every.to_string());
        kv(
            "mask",
            match self.mask.kind {
                MaskKind::Center => "center",
                MaskKind::FreeForm => "freeform",
            }
            .into(),
        );
        kv("mask_ratio_min", format!("{:?}", self.mask.ratio.0));
        kv("mask_ratio_max", format!("{:?}", self.mask.ratio.1));
        kv("mask_strokes_min", self.mask.strokes.0.to_string());
        kv("mask_strokes_max", self.mask.strokes.1.to_string());
        kv("mask_width_min", self.mask.width.0.to_string());
        kv("mask_width_max", self.mask.width.1.to_string());
        kv("mask_length_min", self.mask.length.0.to_string());
        kv("mask_length_max", self.mask.length.1.to_string());
        kv("resample_masks", b(self.resample_masks).into());
        kv("data", self.data.as_ref().map_or("synthetic".to_string(), |p| p.display().to_string()));
        kv("synthetic_count", self.synthetic_count.to_string());
        kv("out", self.out.display().to_string());
        kv("coarse_checkpoint", p(&self.coarse_checkpoint));
        s
    }
}
