//! Runs the A–F ablation ladder at desk scale (32×32 coarse, 64×64 refine)
//! over three seeds and prints the median table.
//!
//! cargo run --release --example ablation -- [steps]

use tfill::harness::ablation::{ablate, Rung};
use tfill::harness::config::RunConfig;
use tfill::harness::data::Dataset;

fn main() -> tfill::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let out = std::env::temp_dir().join("tfill-ablation");
    let base = RunConfig::parse(&format!(
        "size = 32\nrefine_size = 64\nblocks = 2\nbase_width = 16\nlayers = 2\nheads = 4\n\
         batch = 4\nsteps = {steps}\nval_every = 0\nmask = freeform\n\
         mask_ratio_min = 0.2\nmask_ratio_max = 0.3\nout = {}\n",
        out.display()
    ))?;
    let _ = std::fs::remove_dir_all(&out);
    let data = Dataset::synthetic(40, base.refine_size, 0)?;
    let start = std::time::Instant::now();
    let report = ablate(&base, &Rung::ALL, &[0, 1, 2], &data)?;
    print!("{}", report.to_table());
    println!("({:.0}s)", start.elapsed().as_secs_f64());
    Ok(())
}
