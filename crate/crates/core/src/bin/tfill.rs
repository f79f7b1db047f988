use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tfill::harness::ablation::{ablate, parse_ladder};
use tfill::harness::config::{RunConfig, Stage};
use tfill::harness::data::Dataset;
use tfill::harness::imageio::{read_image, read_mask, resize, write_image, write_mask};
use tfill::harness::masks::generate_mask;
use tfill::harness::metrics::score;
use tfill::harness::pipeline::{complete, load_coarse, load_refine};
use tfill::harness::train::train;
use tfill::embed::{mask_downsample, DownsampleRule, MaskedImage};
use tfill::probe::{jacobian_flow, top_k_flow, write_flow};
use tfill::{Error, Result};

#[derive(Parser)]
#[command(name = "tfill", about = "Transformer-based image completion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one stage from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Complete an image under a mask.
    Complete {
        #[arg(long)]
        coarse: PathBuf,
        #[arg(long)]
        refine: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Jacobian flow of one output position of a coarse model.
    Probe {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Output position as ROW,COL.
        #[arg(long)]
        pos: String,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the ablation ladder.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "A,B,C,D,E,F")]
        ladder: String,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// L1, PSNR and SSIM between two images.
    Metrics {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Generate a mask from the mask keys of a config file.
    Genmask {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    cfg.apply_env()?;
    Ok(cfg)
}

fn parse_pos(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("--pos expects ROW,COL, got '{s}'"));
    let (r, c) = s.split_once(',').ok_or_else(bad)?;
    Ok((r.trim().parse().map_err(|_| bad())?, c.trim().parse().map_err(|_| bad())?))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config } => {
            let cfg = load_config(&config)?;
            let outcome = train(&cfg)?;
            if let Some(last) = outcome.log.last() {
                println!("step {}: l1 {:.5} psnr {:.3} ssim {:.4}", last.step, last.l1, last.psnr, last.ssim);
            }
            println!("checkpoint {} ({})", cfg.out.join(format!("{}.ckpt", cfg.stage.as_str())).display(), outcome.checkpoint.checksum());
        }
        Command::Complete {
            coarse,
            refine,
            image,
            mask,
            out,
        } => {
            let coarse = load_coarse(&coarse)?;
            let refine = refine.as_deref().map(load_refine).transpose()?;
            let result = complete(&coarse, refine.as_ref(), &read_image(&image)?, &read_mask(&mask)?)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            write_image(&result.coarse, &out.join("coarse.png"))?;
            if let Some(r) = &result.refined {
                write_image(r, &out.join("refined.png"))?;
            }
        }
        Command::Probe {
            model,
            input,
            mask,
            pos,
            top_k,
            out,
        } => {
            let coarse = load_coarse(&model)?;
            let s = coarse.model.config.size;
            let img = read_image(&input)?;
            let m = read_mask(&mask)?;
            let factor = m.shape()[2] / s;
            let m = mask_downsample(&m, factor.max(1), DownsampleRule::Strict)?;
            let masked = MaskedImage::new(resize(&img, s, s)?, m)?;
            let forward = |tape: &mut numcore::Tape, x: numcore::Var, mask: &numcore::Tensor| -> Result<numcore::Var> {
                let bound = coarse.store.bind(tape, &[]);
                Ok(coarse.model.forward(tape, &bound, x, mask)?.image)
            };
            let map = jacobian_flow(&forward, "coarse", masked.image(), masked.mask(), parse_pos(&pos)?)?;
            write_flow(&map, &out)?;
            let mut report = format!("rf_support {}\n", map.support());
            for (r, c, v) in top_k_flow(&map, top_k.min(map.values.numel()))? {
                report.push_str(&format!("{r} {c} {v:e}\n"));
            }
            print!("{report}");
            let path = out.join("report.txt");
            std::fs::write(&path, report).map_err(|e| Error::Io { path, source: e })?;
        }
        Command::Ablate { config, ladder, seeds } => {
            let cfg = load_config(&config)?;
            let ladder = parse_ladder(&ladder)?;
            let data = match &cfg.data {
                Some(dir) => Dataset::from_dir(dir, cfg.refine_size)?,
                None => Dataset::synthetic(cfg.synthetic_count, cfg.refine_size, cfg.seed)?,
            };
            let seeds: Vec<u64> = (0..seeds).map(|k| cfg.seed + k).collect();
            let report = ablate(&cfg, &ladder, &seeds, &data)?;
            let table = report.to_table();
            print!("{table}");
            let path = cfg.out.join("ablation.txt");
            std::fs::write(&path, table).map_err(|e| Error::Io { path, source: e })?;
        }
        Command::Metrics { a, b } => {
            let s = score(&read_image(&a)?, &read_image(&b)?)?;
            println!("l1 {:.6}\npsnr {:.4}\nssim {:.6}", s.l1, s.psnr, s.ssim);
        }
        Command::Genmask { spec, out } => {
            let cfg = load_config(&spec)?;
            let size = match cfg.stage {
                Stage::Coarse => cfg.size,
                Stage::Refine => cfg.refine_size,
            };
            let m = generate_mask(size, size, &cfg.mask, cfg.seed)?;
            write_mask(&m.mask, &out)?;
            println!("ratio {}", m.ratio);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
