//! Solves fresh texture puzzles with a trained spatial checkpoint and writes
//! the shuffled input next to the predicted reassembly.
//!
//! cargo run --release --example solve_checkpoint -- --ckpt /tmp/spatial/ckpt_6000.bin --out /tmp/solved

use std::path::PathBuf;

use clap::Parser;
use jpdvt::assignment::Matcher;
use jpdvt::cli::{solve_instances, LoadedModel};
use jpdvt::diffusion::SolveOptions;
use jpdvt::puzzlekit::{make_spatial, sample_rng, synth_spatial, Crop, Provenance, PuzzleInstance, SpatialParams, TextureParams};

#[derive(Parser)]
struct Args {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 3)]
    grid: usize,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 10)]
    stride: usize,
    #[arg(long, default_value_t = 1234)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// The puzzle's pieces laid out as if `order` were the truth.
fn arranged(p: &PuzzleInstance, order: Vec<usize>) -> jpdvt::Result<PuzzleInstance> {
    let pieces = (0..p.len()).map(|i| p.ground_truth_piece(i).clone()).collect();
    let prov = Provenance {
        source: "example".into(),
        params: serde_json::Value::Null,
        seed: 0,
    };
    PuzzleInstance::new(pieces, p.layout(), order, vec![], false, prov)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args = Args::parse();
    let model = LoadedModel::load(&args.ckpt)?;
    let piece = model.ckpt.model.piece;
    let params = SpatialParams {
        grid: args.grid,
        gap: false,
        piece_px: piece.width,
        crop: Crop::Center,
        anchor: false,
    };
    let tex = TextureParams {
        size: params.canvas_px(),
        ..TextureParams::default()
    };
    let puzzles: Vec<_> = synth_spatial(args.seed, args.count, &tex)
        .iter()
        .enumerate()
        .map(|(i, img)| make_spatial(img, &params, &mut sample_rng(args.seed, i as u64)))
        .collect::<jpdvt::Result<_>>()?;
    model.check_puzzles(&puzzles)?;

    let opts = SolveOptions {
        stride: args.stride,
        ..SolveOptions::default()
    };
    let reports = solve_instances(&model.denoiser, None, &model.sched, &puzzles, &opts, Matcher::Greedy)?;
    std::fs::create_dir_all(&args.out)?;
    for (i, (p, r)) in puzzles.iter().zip(&reports).enumerate() {
        let shuffled = arranged(p, (0..p.len()).collect())?.reassemble()?;
        let solved = arranged(p, r.assignment.permutation.clone())?.reassemble()?;
        shuffled[0].write_pnm(&args.out.join(format!("{i:02}_input.ppm")))?;
        solved[0].write_pnm(&args.out.join(format!("{i:02}_solved.ppm")))?;
        println!(
            "puzzle {i:2}: {}/{} pieces placed, kendall {:.3}",
            r.correct_pieces,
            p.len(),
            r.kendall.unwrap_or(0.0)
        );
    }
    println!("wrote {} image pairs to {}", puzzles.len(), args.out.display());
    Ok(())
}
