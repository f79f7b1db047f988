//! Compares how far information travels into one output pixel: a plain
//! 3-layer 3×3 conv stack versus restrictive embedding plus one transformer
//! layer. Writes both flow maps as PNG and text.
//!
//! cargo run --release --example information_flow -- [out_dir]

use std::path::PathBuf;

use numcore::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tfill::embed::{EmbedConfig, EmbedKind};
use tfill::encoder::{AttentionConfig, WeightAxis};
use tfill::harness::masks::generate_center_mask;
use tfill::model::{CoarseConfig, CoarseModel};
use tfill::params::ParamStore;
use tfill::probe::{jacobian_flow, top_k_flow, write_flow};

fn main() -> tfill::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("tfill-flow"));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let image = Tensor::uniform([1, 3, 64, 64], 0.0, 1.0, &mut rng)?;
    let mask = generate_center_mask(64, 64)?.mask;
    let pos = (32, 32);

    let kernels: Vec<Tensor> = (0..3).map(|_| Tensor::randn([3, 3, 3, 3], 0.3, &mut rng)).collect::<Result<_, _>>()?;
    let convs = |t: &mut Tape, x: Var, _: &Tensor| -> tfill::Result<Var> {
        let mut y = x;
        for k in &kernels {
            let k = t.constant(k.clone());
            y = t.conv2d(y, k, None, 1, 1)?;
        }
        Ok(y)
    };

    let config = CoarseConfig {
        size: 64,
        embed: EmbedConfig {
            kind: EmbedKind::Restrictive,
            blocks: 4,
            base_width: 8,
            pconv_canonical: false,
        },
        layers: 1,
        mlp_ratio: 4,
        attention: AttentionConfig {
            heads: 4,
            weighted: true,
            axis: WeightAxis::Keys,
            renormalize_rows: false,
        },
        decoder_heads: None,
    };
    let mut store = ParamStore::new();
    let model = CoarseModel::build(&mut store, config, &mut rng)?;
    let transformer = |t: &mut Tape, x: Var, m: &Tensor| -> tfill::Result<Var> {
        let bound = store.bind(t, &[]);
        Ok(model.forward(t, &bound, x, m)?.image)
    };

    // the conv stack sees an unmasked image so its window is not cut
    let ones = Tensor::ones([1, 1, 64, 64])?;
    for (name, map) in [
        ("conv3x3x3", jacobian_flow(&convs, "conv3x3x3", &image, &ones, pos)?),
        ("transformer", jacobian_flow(&transformer, "transformer", &image, &mask, pos)?),
    ] {
        let dir = out.join(name);
        write_flow(&map, &dir)?;
        let far = top_k_flow(&map, map.support())?
            .iter()
            .map(|&(r, c, _)| r.abs_diff(pos.0).max(c.abs_diff(pos.1)))
            .max()
            .unwrap_or(0);
        println!(
            "{name:12} nonzero pixels {:5}  farthest contributor {far:2} px  -> {}",
            map.support(),
            dir.display()
        );
    }
    Ok(())
}
