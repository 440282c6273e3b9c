//! Runs the reverse diffusion sampler with a predictor that knows the answer,
//! then compares greedy and Hungarian matching on codes perturbed by hand.
//!
//! cargo run --release --example oracle_solve -- --grid 4 --stride 20

use clap::Parser;
use jpdvt::assignment::{cost_matrix, greedy_match, hungarian_match, noise_tolerance_radius, Matcher};
use jpdvt::cli::solve_instances;
use jpdvt::diffusion::{standard_normal, NoiseSchedule, SolveOptions};
use jpdvt::oracles::TruthPredictor;
use jpdvt::posenc::PeTable;
use jpdvt::puzzlekit::{make_spatial, sample_rng, synth_spatial, Crop, SpatialParams, TextureParams};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value_t = 3)]
    grid: usize,
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 10)]
    stride: usize,
    /// Perturbation size as a multiple of the table's tolerance radius.
    #[arg(long, default_value_t = 3.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> jpdvt::Result<()> {
    let args = Args::parse();
    let params = SpatialParams {
        grid: args.grid,
        gap: false,
        piece_px: 8,
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

    let sched = NoiseSchedule::default_linear();
    let oracle = TruthPredictor::new(sched.clone(), &puzzles)?;
    let opts = SolveOptions {
        seed: args.seed,
        stride: args.stride,
        ..SolveOptions::default()
    };
    let reports = solve_instances(&oracle, None, &sched, &puzzles, &opts, Matcher::Greedy)?;
    let exact = reports.iter().filter(|r| r.correct_pieces == puzzles[0].len()).count();
    println!("oracle sampler: {exact}/{} puzzles exact at stride {}", puzzles.len(), args.stride);

    let table = PeTable::new(&puzzles[0].layout())?;
    let radius = noise_tolerance_radius(&table);
    let mut rng = sample_rng(args.seed, 1 << 32);
    let (mut greedy_total, mut hungarian_total, mut greedy_worse) = (0.0, 0.0, 0);
    for _ in 0..200 {
        let eps = standard_normal(&mut rng, &[table.len(), table.dim()]);
        let noisy = tensorlab::Tensor::from_fn(&[table.len(), table.dim()], |i| {
            table.rows()[i / table.dim()][i % table.dim()] + args.noise * radius * eps.data()[i] / (table.dim() as f64).sqrt()
        });
        let cost = cost_matrix(&noisy, &table)?;
        let total = |perm: &[usize]| perm.iter().enumerate().map(|(i, &s)| cost[i][s]).sum::<f64>();
        let g = total(&greedy_match(&noisy, &table)?.permutation);
        let h = total(&hungarian_match(&noisy, &table)?.permutation);
        greedy_total += g;
        hungarian_total += h;
        greedy_worse += usize::from(g > h + 1e-12);
    }
    println!("tolerance radius {radius:.4}; perturbation {:.1}x radius", args.noise);
    println!(
        "mean plan cost: greedy {:.4}  hungarian {:.4}  (greedy worse on {greedy_worse}/200)",
        greedy_total / 200.0,
        hungarian_total / 200.0
    );
    Ok(())
}
