//! Generates center and free-form masks, prints them as text and writes PGM
//! files (0 = masked).
//!
//! cargo run --release --example masks -- [seed]

use tfill::harness::imageio::write_mask;
use tfill::harness::masks::{generate_center_mask, generate_mask, MaskKind, MaskSpec};

fn show(mask: &numcore::Tensor) {
    let w = mask.shape()[3];
    for row in mask.data().chunks(w).step_by(2) {
        println!("  {}", row.iter().map(|&m| if m == 1.0 { '.' } else { '#' }).collect::<String>());
    }
}

fn main() -> tfill::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let dir = std::env::temp_dir().join("tfill-masks");
    std::fs::create_dir_all(&dir).map_err(|e| tfill::Error::Io { path: dir.clone(), source: e })?;

    let center = generate_center_mask(32, 32)?;
    println!("center: ratio {:.4}", center.ratio);
    show(&center.mask);
    write_mask(&center.mask, &dir.join("center.pgm"))?;

    for (name, ratio) in [("light", (0.1, 0.2)), ("medium", (0.2, 0.3)), ("heavy", (0.4, 0.5))] {
        let spec = MaskSpec {
            kind: MaskKind::FreeForm,
            ratio,
            ..MaskSpec::default()
        };
        let m = generate_mask(32, 32, &spec, seed)?;
        println!("freeform {name} {ratio:?}: ratio {:.4}", m.ratio);
        show(&m.mask);
        write_mask(&m.mask, &dir.join(format!("freeform_{name}.pgm")))?;
    }
    println!("written to {}", dir.display());
    Ok(())
}
