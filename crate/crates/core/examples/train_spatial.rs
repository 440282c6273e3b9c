//! Trains the desk-scale denoiser on 3x3 no-gap texture puzzles and reports
//! held-out accuracy.
//!
//! cargo run --release --example train_spatial -- --steps 6000 --out /tmp/spatial

use std::path::PathBuf;

use clap::Parser;
use jpdvt::assignment::Matcher;
use jpdvt::cli::mask_sweep;
use jpdvt::diffusion::{NoiseSchedule, SolveOptions};
use jpdvt::puzzlekit::{make_spatial, sample_rng, synth_spatial, Crop, SpatialParams, TextureParams};
use jpdvt::trainer::{evaluate_model, run, RunOptions, TrainConfig, TrainSet, Trainer};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value_t = 6000)]
    steps: u64,
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 200)]
    test: usize,
    #[arg(long, default_value_t = 16)]
    piece_px: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    #[arg(long, default_value_t = 10)]
    stride: usize,
    #[arg(long)]
    masked: bool,
    /// Mirror augmentation; the synthetic texture encodes x in its red ramp.
    #[arg(long)]
    flip: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "target/train_spatial")]
    out: PathBuf,
}

fn main() -> jpdvt::Result<()> {
    let args = Args::parse();
    let params = SpatialParams {
        grid: 3,
        gap: false,
        piece_px: args.piece_px,
        crop: Crop::Center,
        anchor: false,
    };
    let tex = TextureParams {
        size: params.canvas_px(),
        ..TextureParams::default()
    };
    let images = synth_spatial(args.seed, args.train + args.test, &tex);
    let puzzles = images
        .iter()
        .enumerate()
        .map(|(i, img)| make_spatial(img, &params, &mut sample_rng(args.seed + 1, i as u64)))
        .collect::<jpdvt::Result<Vec<_>>>()?;
    let (train, test) = puzzles.split_at(args.train);

    let config = TrainConfig {
        steps: args.steps,
        batch_size: args.batch,
        lr: args.lr,
        warmup: 200,
        cosine: true,
        clip: 1.0,
        masked: args.masked,
        flip: Some(args.flip),
        seed: args.seed,
        eval_every: 1000,
        eval_count: 64,
        eval_stride: args.stride,
        ckpt_every: 0,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(config, TrainSet::from_instances(train)?)?;
    let mut window = Vec::new();
    let summary = run(&mut trainer, &args.out, test, &RunOptions::default(), |s| {
        window.push(s.loss);
        if s.step % 250 == 0 {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            println!("step {:>6}  loss {mean:.4}  lr {:.2e}", s.step, s.lr);
            window.clear();
        }
    })?;
    for e in &summary.evals {
        println!(
            "eval at {:>6}: puzzle {:.3}  piece {:.3}  kendall {:.4}",
            e.step, e.puzzle_acc, e.piece_acc, e.kendall_mean
        );
    }
    let sched = NoiseSchedule::default_linear();
    let fin = evaluate_model(&trainer.denoiser(), &sched, test, args.stride, args.seed, trainer.steps_done())?;
    println!(
        "held-out ({} puzzles, stride {}): puzzle {:.3}  piece {:.3}  kendall {:.4}",
        test.len(),
        args.stride,
        fin.puzzle_acc,
        fin.piece_acc,
        fin.kendall_mean
    );
    if args.masked {
        let opts = SolveOptions { stride: args.stride, seed: args.seed, ..SolveOptions::default() };
        for row in mask_sweep(&trainer.denoiser(), None, &sched, test, 0..=3, &opts, Matcher::Greedy)? {
            println!(
                "missing {}: puzzle {:.3}  piece {:.3}  given {:.3}  kendall {:.4}",
                row.missing, row.puzzle_acc, row.piece_acc, row.piece_acc_given, row.kendall_mean
            );
        }
    }
    println!("checkpoint: {}", summary.checkpoints.last().map(|p| p.display().to_string()).unwrap_or_default());
    Ok(())
}
