//! Doubles the frame rate of moving-square clips with a masked temporal
//! checkpoint trained on single-frame pieces, and scores the generated
//! frames against the withheld ones and a frame-repeat baseline.
//!
//! cargo run --release --example train_temporal -- --piece-len 1 --frames 15 --masked \
//!     --side 5 --min-speed 0.6 --max-speed 1.0 --clear-walls --out /tmp/frames
//! cargo run --release --example superres -- --ckpt /tmp/frames/ckpt_5000.bin

use std::path::PathBuf;

use clap::Parser;
use jpdvt::cli::{superresolve, LoadedModel};
use jpdvt::puzzlekit::{synth_temporal, Image, MotionParams};

#[derive(Parser)]
struct Args {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 20)]
    clips: usize,
    /// Input frames per clip; the clip is rendered at twice this rate minus one.
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 5.0)]
    side: f64,
    #[arg(long, default_value_t = 0.6)]
    min_speed: f64,
    #[arg(long, default_value_t = 1.0)]
    max_speed: f64,
    /// Allow wall bounces (the clear-wall setting matches the training example below).
    #[arg(long)]
    bounce: bool,
    #[arg(long, default_value_t = 10)]
    stride: usize,
    #[arg(long, default_value_t = 77)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn mse(a: &Image, b: &Image) -> f64 {
    let n = a.data().len() as f64;
    a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / n
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args = Args::parse();
    let model = LoadedModel::load(&args.ckpt)?;
    let motion = MotionParams {
        frames: 2 * args.frames - 1,
        size: model.ckpt.model.piece.width,
        side: args.side,
        min_speed: args.min_speed,
        max_speed: args.max_speed,
        clear_walls: !args.bounce,
        ..MotionParams::default()
    };
    let (mut generated, mut repeated) = (0.0, 0.0);
    let mut count = 0usize;
    for (c, clip) in synth_temporal(args.seed, args.clips, &motion).iter().enumerate() {
        let inputs: Vec<Image> = clip.iter().step_by(2).cloned().collect();
        let out = superresolve(&model, &inputs, args.seed + c as u64, args.stride)?;
        for k in (1..out.len()).step_by(2) {
            generated += mse(&out[k], &clip[k]);
            repeated += mse(&clip[k - 1], &clip[k]);
            count += 1;
        }
        if let Some(dir) = &args.out {
            let dir = dir.join(format!("clip_{c:03}"));
            std::fs::create_dir_all(&dir)?;
            for (i, f) in out.iter().enumerate() {
                let ext = if f.channels() == 1 { "pgm" } else { "ppm" };
                f.write_pnm(&dir.join(format!("{i:04}.{ext}")))?;
            }
        }
    }
    let count = count.max(1) as f64;
    println!("generated frames: mse {:.1}", generated / count);
    println!("repeat previous:  mse {:.1}", repeated / count);
    Ok(())
}
