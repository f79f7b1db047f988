//! L1, PSNR and SSIM of a synthetic texture under increasing noise and blur.
//!
//! cargo run --release --example metrics

use numcore::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tfill::harness::data::synthetic_texture;
use tfill::harness::imageio::resize;
use tfill::harness::metrics::score;

fn main() -> tfill::Result<()> {
    let img = synthetic_texture(64, 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let noise: Vec<f64> = (0..img.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    println!("{:<14} {:>8} {:>8} {:>7}", "distortion", "L1", "PSNR", "SSIM");
    let s = score(&img, &img)?;
    println!("{:<14} {:>8.5} {:>8.2} {:>7.4}", "none", s.l1, s.psnr, s.ssim);
    for amp in [0.01, 0.02, 0.05, 0.1, 0.2] {
        let noisy = Tensor::new(
            img.shape().to_vec(),
            img.data().iter().zip(&noise).map(|(v, n)| (v + amp * n).clamp(0.0, 1.0)).collect(),
        )?;
        let s = score(&noisy, &img)?;
        println!("{:<14} {:>8.5} {:>8.2} {:>7.4}", format!("noise {amp}"), s.l1, s.psnr, s.ssim);
    }
    for factor in [2, 4, 8] {
        let blurred = resize(&resize(&img, 64 / factor, 64 / factor)?, 64, 64)?;
        let s = score(&blurred, &img)?;
        println!("{:<14} {:>8.5} {:>8.2} {:>7.4}", format!("downscale x{factor}"), s.l1, s.psnr, s.ssim);
    }
    Ok(())
}
