//! Two-stage completion end to end: trains a small coarse model at 32×32 and
//! a refiner at 64×64 on synthetic textures, then fills a free-form hole in
//! a held-out image. Writes the input, both stages and the ground truth.
//!
//! cargo run --release --example complete -- [steps]

use tfill::decoder::compose;
use tfill::harness::config::{RunConfig, Stage};
use tfill::harness::imageio::write_image;
use tfill::harness::masks::{generate_mask, MaskSpec};
use tfill::harness::metrics::score;
use tfill::harness::pipeline::{complete, load_coarse, load_refine};
use tfill::harness::train::train;

fn main() -> tfill::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let out = std::env::temp_dir().join("tfill-complete");
    let mut config = RunConfig::parse(&format!(
        "size = 32\nrefine_size = 64\nblocks = 2\nbase_width = 16\nlayers = 2\nheads = 4\nbatch = 4\n\
         steps = {steps}\nval_every = 0\nsynthetic_count = 20\nout = {}\n",
        out.display()
    ))?;
    let coarse_log = train(&config)?.log;
    config.stage = Stage::Refine;
    config.coarse_checkpoint = Some(out.join("coarse.ckpt"));
    let refine_log = train(&config)?.log;
    println!("coarse val l1 {:.4}, refine val l1 {:.4}", coarse_log[0].l1, refine_log[0].l1);

    let coarse = load_coarse(&out.join("coarse.ckpt"))?;
    let refine = load_refine(&out.join("refine.ckpt"))?;
    let truth = tfill::harness::data::synthetic_texture(64, 999)?;
    let mask = generate_mask(64, 64, &MaskSpec::default(), 42)?;
    let result = complete(&coarse, Some(&refine), &truth, &mask.mask)?;

    let holed = compose(&mask.mask, &truth, &numcore::Tensor::zeros([1, 3, 64, 64])?)?;
    write_image(&holed, &out.join("input.png"))?;
    write_image(&result.coarse, &out.join("coarse.png"))?;
    write_image(result.refined.as_ref().unwrap(), &out.join("refined.png"))?;
    write_image(&truth, &out.join("truth.png"))?;
    for (name, img) in [("coarse", &result.coarse), ("refined", result.best())] {
        let s = score(img, &truth)?;
        println!("{name:8} l1 {:.4}  psnr {:.2}  ssim {:.4}", s.l1, s.psnr, s.ssim);
    }
    println!("masked {:.1}% ; images in {}", 100.0 * mask.ratio, out.display());
    Ok(())
}
