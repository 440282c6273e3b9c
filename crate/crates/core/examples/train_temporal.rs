//! Trains the desk-scale denoiser to order moving-square clips (16 frames as
//! 8 pieces of 2 frames, first piece anchored) and reports held-out Kendall distance.
//!
//! cargo run --release --example train_temporal -- --steps 5000 --out /tmp/temporal
//! cargo run --release --example train_temporal -- --piece-len 1 --masked --out /tmp/frames

use std::path::PathBuf;

use clap::Parser;
use jpdvt::diffusion::NoiseSchedule;
use jpdvt::puzzlekit::{make_temporal, sample_rng, synth_temporal, MotionParams};
use jpdvt::trainer::{evaluate_model, run, RunOptions, TrainConfig, TrainSet, Trainer};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value_t = 5000)]
    steps: u64,
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 200)]
    test: usize,
    #[arg(long, default_value_t = 2)]
    piece_len: usize,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, default_value_t = 24)]
    size: usize,
    #[arg(long, default_value_t = 6.0)]
    side: f64,
    #[arg(long, default_value_t = 2)]
    max_shapes: usize,
    #[arg(long, default_value_t = 0.8)]
    min_speed: f64,
    #[arg(long, default_value_t = 1.5)]
    max_speed: f64,
    /// Keep every path clear of the walls (no bounces).
    #[arg(long)]
    clear_walls: bool,
    /// Train with withheld pieces; with `--piece-len 1` the checkpoint can interpolate frames.
    #[arg(long)]
    masked: bool,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    #[arg(long, default_value_t = 10)]
    stride: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "target/train_temporal")]
    out: PathBuf,
}

fn main() -> jpdvt::Result<()> {
    let args = Args::parse();
    let motion = MotionParams {
        frames: args.frames,
        size: args.size,
        side: args.side,
        max_shapes: args.max_shapes,
        min_speed: args.min_speed,
        max_speed: args.max_speed,
        clear_walls: args.clear_walls,
    };
    let clips = synth_temporal(args.seed, args.train + args.test, &motion);
    let puzzles = clips
        .iter()
        .enumerate()
        .map(|(i, frames)| make_temporal(frames, args.piece_len, true, &mut sample_rng(args.seed + 1, i as u64)))
        .collect::<jpdvt::Result<Vec<_>>>()?;
    let (train, test) = puzzles.split_at(args.train);

    let config = TrainConfig {
        steps: args.steps,
        batch_size: args.batch,
        lr: args.lr,
        warmup: 200,
        cosine: true,
        clip: 1.0,
        seed: args.seed,
        eval_every: 1000,
        eval_count: 64,
        eval_stride: args.stride,
        masked: args.masked,
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
        "held-out ({} clips, stride {}): kendall {:.4}  puzzle {:.3}  piece {:.3}",
        test.len(),
        args.stride,
        fin.kendall_mean,
        fin.puzzle_acc,
        fin.piece_acc
    );
    Ok(())
}
