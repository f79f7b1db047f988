//! Overfits the coarse stage on eight synthetic 64×64 textures and reports
//! composed-output metrics on the training set.
//!
//! cargo run --release --example overfit -- [steps]

use std::time::Instant;

use tfill::harness::config::RunConfig;
use tfill::harness::train::Trainer;

fn main() -> tfill::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let config = RunConfig::parse(&format!(
        "size = 64\nblocks = 4\nbase_width = 8\nlayers = 2\nheads = 4\nbatch = 4\n\
         mask = center\nresample_masks = false\nsynthetic_count = 8\nsteps = {steps}\nval_every = 100\n"
    ))?;
    let mut trainer = Trainer::new(config)?;
    let data = trainer.load_dataset()?;
    let start = Instant::now();
    for rec in trainer.run(&data)? {
        println!(
            "step {:5}  g {:.4}  pixel {:.4}  l1 {:.4}  psnr {:.2}  ssim {:.3}  ({:.0}s)",
            rec.step,
            rec.g_loss,
            rec.pixel,
            rec.l1,
            rec.psnr,
            rec.ssim,
            start.elapsed().as_secs_f64()
        );
    }
    let s = trainer.training_scores(&data)?;
    println!("training set: l1 {:.4}  psnr {:.2} dB  ssim {:.3}", s.l1, s.psnr, s.ssim);
    Ok(())
}
