//! Coarse and refine stage models assembled from the building blocks.

use numcore::{Tape, Tensor, Var};
use rand::Rng;

use crate::decoder::{decode, DecoderConfig, DecoderParams};
use crate::embed::{embed, EmbedConfig, EmbedParams};
use crate::encoder::{encoder_forward, AttentionConfig, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::refine::{refine_forward, RefineConfig, RefineOutput, RefineParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoarseConfig {
    /// Square input resolution.
    pub size: usize,
    pub embed: EmbedConfig,
    pub layers: usize,
    pub mlp_ratio: usize,
    pub attention: AttentionConfig,
    /// Heads of the decoder-side token attention, if any.
    pub decoder_heads: Option<usize>,
}

impl CoarseConfig {
    pub fn grid(&self) -> usize {
        self.size / self.embed.patch()
    }

    pub fn validate(&self) -> Result<()> {
        self.embed.validate()?;
        self.embed.check_input(self.size, self.size)
    }

    fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            dim: self.embed.token_dim(),
            mlp_ratio: self.mlp_ratio,
            tokens: self.grid() * self.grid(),
            attention: self.attention,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoarseModel {
    pub config: CoarseConfig,
    pub embed: EmbedParams,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

#[derive(Debug, Clone)]
pub struct CoarseOutput {
    pub image: Var,
    /// Token weights seen by each encoder layer, then the final ones.
    pub weights: Vec<Tensor>,
}

impl CoarseModel {
    /// Registers all parameters under `coarse.*`. Parameters already in
    /// `store` (e.g. loaded from a checkpoint) are reused unchanged.
    pub fn build<R: Rng>(store: &mut ParamStore, config: CoarseConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let embed = EmbedParams::build(store, "coarse.embed", config.embed, rng)?;
        let encoder = EncoderParams::build(store, "coarse.encoder", config.encoder(), rng)?;
        let decoder = DecoderParams::build(
            store,
            "coarse.decoder",
            DecoderConfig {
                stages: config.embed.blocks,
                base_width: config.embed.base_width,
                attention_heads: config.decoder_heads,
            },
            rng,
        )?;
        Ok(CoarseModel {
            config,
            embed,
            encoder,
            decoder,
        })
    }

    /// `image` is the masked input `[B, 3, S, S]` on `tape`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, image: Var, mask: &Tensor) -> Result<CoarseOutput> {
        let s = tape.shape(image).to_vec();
        if s.len() != 4 || s[2] != self.config.size || s[3] != self.config.size {
            return Err(Error::config(format!(
                "coarse model runs at {0}x{0}, got input {s:?}",
                self.config.size
            )));
        }
        let grid = embed(tape, bound, &self.embed, image, mask)?;
        let enc = encoder_forward(tape, bound, &self.encoder, grid.tokens, &grid.weights)?;
        let image = decode(tape, bound, &self.decoder, enc.tokens, (grid.grid_h, grid.grid_w))?;
        Ok(CoarseOutput {
            image,
            weights: enc.weights,
        })
    }

    /// Forward pass with every parameter held constant.
    pub fn infer(&self, store: &ParamStore, image: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, &[]);
        let x = tape.constant(image.clone());
        let out = self.forward(&mut tape, &bound, x, mask)?;
        Ok(tape.value(out.image).clone())
    }
}

#[derive(Debug, Clone)]
pub struct RefineModel {
    pub params: RefineParams,
}

impl RefineModel {
    pub fn build<R: Rng>(store: &mut ParamStore, config: RefineConfig, rng: &mut R) -> Result<Self> {
        Ok(RefineModel {
            params: RefineParams::build(store, "refine", config, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, merged: Var, mask: &Tensor) -> Result<RefineOutput> {
        refine_forward(tape, bound, &self.params, merged, mask)
    }

    pub fn infer(&self, store: &ParamStore, merged: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, &[]);
        let x = tape.constant(merged.clone());
        let out = self.forward(&mut tape, &bound, x, mask)?;
        Ok(tape.value(out.image).clone())
    }
}
