//! Runs the attention-aware layer on random features with the left half of
//! the feature map masked and prints, per position, how much the output
//! draws from visible keys (encoder features) versus masked keys (decoder
//! features).
//!
//! cargo run --release --example attention_aware_layer

use numcore::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tfill::params::ParamStore;
use tfill::refine::{attention_aware_layer, AalConfig, AalParams};

fn main() -> tfill::Result<()> {
    let (c, h, w) = (8, 6, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let cfg = AalConfig {
        channels: c,
        att_dim: 8,
        scale_logits: true,
    };
    let params = AalParams::build(&mut store, "aal", cfg, &mut rng)?;
    let mask = Tensor::from_fn([1, 1, h, w], |i| if i % w < w / 2 { 0.0 } else { 1.0 })?;

    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, &[]);
    let x_e = tape.constant(Tensor::randn([1, c, h, w], 1.0, &mut rng)?);
    let x_d = tape.constant(Tensor::randn([1, c, h, w], 1.0, &mut rng)?);
    let out = attention_aware_layer(&mut tape, &bound, &params, x_e, x_d, &mask)?;

    println!("w_v per position (left half masked):");
    for row in out.w_v.data().chunks(w) {
        println!("  {}", row.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" "));
    }
    let worst = out
        .w_v
        .data()
        .iter()
        .zip(out.w_m.data())
        .map(|(a, b)| (a + b - 1.0).abs())
        .fold(0.0, f64::max);
    println!("max |w_v + w_m - 1| = {worst:e}");

    let z = tape.value(out.z).data();
    let (zv, zm) = (tape.value(out.z_v).data(), tape.value(out.z_m).data());
    let p = h * w;
    let exact = (0..c * p).all(|i| z[i] == out.w_v.data()[i % p] * zv[i] + out.w_m.data()[i % p] * zm[i]);
    println!("z == w_v*z_v + w_m*z_m bitwise: {exact}");
    Ok(())
}
