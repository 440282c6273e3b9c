//! Helpers shared by the integration targets: toy data, a finite-difference
//! harness and the desk-scale training recipes.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use jpdvt::denoiser::Denoiser;
use jpdvt::oracles::finite_diff;
use jpdvt::posenc::Layout;
use jpdvt::puzzlekit::{
    make_spatial, make_temporal, sample_rng, synth_spatial, synth_temporal, Crop, MotionParams, Piece, PieceShape,
    PuzzleInstance, SpatialParams, TextureParams,
};
use jpdvt::trainer::{run, Checkpoint, RunOptions, TrainConfig, TrainSet, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensorlab::{Graph, Tensor, Var};

pub const H: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Elementwise relative error with a floor for entries that vanish.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> tensorlab::Result<Var>;
pub type Case = (&'static str, Box<Build>, Vec<Tensor<f64>>);

fn contracted(build: &Build, inputs: &[Tensor<f64>], probe: &mut Option<Tensor<f64>>) -> (f64, Vec<Tensor<f64>>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| g.param(format!("in{i}"), Arc::new(t.clone())))
        .collect();
    let out = build(&mut g, &vars).unwrap();
    let p = probe
        .get_or_insert_with(|| rand_tensor(&mut ChaCha8Rng::seed_from_u64(99), g.shape(out), 1.5))
        .clone();
    let p = g.constant(p);
    let prod = g.mul(out, p).unwrap();
    let loss = g.sum(prod).unwrap();
    let grads = g.backward(loss).unwrap();
    let gs = vars.iter().zip(inputs).map(|(&v, t)| grads.wrt(v, t.shape())).collect();
    (g.value(loss).item(), gs)
}

/// Worst relative error between backward and central differences of
/// `sum(op(inputs) * probe)` over every input coordinate.
pub fn op_gradcheck(build: &Build, inputs: &[Tensor<f64>]) -> f64 {
    let mut probe = None;
    let (_, analytic) = contracted(build, inputs, &mut probe);
    let mut worst = 0f64;
    for (which, input) in inputs.iter().enumerate() {
        let numeric = finite_diff(
            |x| {
                let mut moved = inputs.to_vec();
                moved[which] = Tensor::new(input.shape(), x.to_vec()).unwrap();
                contracted(build, &moved, &mut probe).0
            },
            input.data(),
            H,
        );
        for (a, n) in analytic[which].data().iter().zip(&numeric) {
            worst = worst.max(rel_err(*a, *n));
        }
    }
    worst
}

/// Named single-op builders over random inputs, covering every differentiable primitive.
pub fn primitive_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, n, k, m) = (2, 3, 4, 3);
    let mut r = |shape: &[usize]| rand_tensor(&mut rng, shape, 1.5);
    let cases: Vec<Case> = vec![
        ("linear", Box::new(|g, v| g.linear(v[0], v[1])), vec![r(&[b, n, k]), r(&[k, m])]),
        ("affine", Box::new(|g, v| g.affine(v[0], v[1], v[2])), vec![r(&[n, k]), r(&[k, m]), r(&[m])]),
        ("batch_matmul", Box::new(|g, v| g.batch_matmul(v[0], v[1], false)), vec![r(&[b, n, k]), r(&[b, k, m])]),
        ("batch_matmul_t", Box::new(|g, v| g.batch_matmul(v[0], v[1], true)), vec![r(&[b, n, k]), r(&[b, m, k])]),
        ("add", Box::new(|g, v| g.add(v[0], v[1])), vec![r(&[n, k]), r(&[n, k])]),
        ("sub", Box::new(|g, v| g.sub(v[0], v[1])), vec![r(&[n, k]), r(&[n, k])]),
        ("mul", Box::new(|g, v| g.mul(v[0], v[1])), vec![r(&[n, k]), r(&[n, k])]),
        ("add_suffix", Box::new(|g, v| g.add_suffix(v[0], v[1])), vec![r(&[b, n, k]), r(&[n, k])]),
        ("mul_suffix", Box::new(|g, v| g.mul_suffix(v[0], v[1])), vec![r(&[b, n, k]), r(&[k])]),
        ("scale", Box::new(|g, v| g.scale(v[0], -1.7)), vec![r(&[n, k])]),
        ("add_scalar", Box::new(|g, v| g.add_scalar(v[0], 0.3)), vec![r(&[n, k])]),
        ("gelu", Box::new(|g, v| g.gelu(v[0])), vec![r(&[b, n, k])]),
        ("silu", Box::new(|g, v| g.silu(v[0])), vec![r(&[b, n, k])]),
        ("square", Box::new(|g, v| g.square(v[0])), vec![r(&[n, k])]),
        ("softmax", Box::new(|g, v| g.softmax(v[0], 2)), vec![r(&[b, n, k])]),
        ("softmax_axis0", Box::new(|g, v| g.softmax(v[0], 0)), vec![r(&[b, n, k])]),
        ("normalize", Box::new(|g, v| g.normalize(v[0], 2, 1e-5)), vec![r(&[b, n, k])]),
        (
            "layer_norm",
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-6)),
            vec![r(&[b, n, k]), r(&[k]), r(&[k])],
        ),
        ("reshape", Box::new(move |g, v| g.reshape(v[0], &[n * k])), vec![r(&[n, k])]),
        ("split_heads", Box::new(|g, v| g.split_heads(v[0], 2)), vec![r(&[b, n, 2 * k])]),
        ("merge_heads", Box::new(|g, v| g.merge_heads(v[0], 2)), vec![r(&[2 * b, n, k])]),
        ("repeat_tokens", Box::new(move |g, v| g.repeat_tokens(v[0], n)), vec![r(&[b, k])]),
        ("concat", Box::new(|g, v| g.concat(v[0], v[1])), vec![r(&[b, n, k]), r(&[b, n, m])]),
        ("sum", Box::new(|g, v| g.sum(v[0])), vec![r(&[n, k])]),
        ("mean", Box::new(|g, v| g.mean(v[0])), vec![r(&[n, k])]),
        ("mse", Box::new(|g, v| g.mse(v[0], v[1])), vec![r(&[n, k]), r(&[n, k])]),
    ];
    cases
}

pub fn toy_shape() -> PieceShape {
    PieceShape {
        width: 2,
        height: 2,
        channels: 1,
        frames: 1,
    }
}

/// Slot pieces with distinct, deterministic pixel values.
pub fn toy_set(count: usize, layout: Layout) -> TrainSet {
    let shape = toy_shape();
    let sources: Vec<Vec<Piece>> = (0..count)
        .map(|s| {
            (0..layout.slots())
                .map(|k| {
                    let data = (0..shape.dim()).map(|p| ((s * 31 + k * 17 + p * 7) % 256) as u8).collect();
                    Piece::new(shape, data).unwrap()
                })
                .collect()
        })
        .collect();
    TrainSet::from_slot_pieces(layout, &sources).unwrap()
}

pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        layers: 1,
        hidden: 8,
        mlp: 16,
        heads: 2,
        time_freq: 8,
        batch_size: 3,
        steps: 6,
        lr: 1e-3,
        ckpt_every: 0,
        ..TrainConfig::default()
    }
}

pub fn spatial_params() -> SpatialParams {
    SpatialParams {
        grid: 3,
        gap: false,
        piece_px: 16,
        crop: Crop::Center,
        anchor: false,
    }
}

/// 3x3 no-gap puzzles cut from synthetic textures, split into train and held-out.
pub fn spatial_corpus(seed: u64, train: usize, test: usize) -> (Vec<PuzzleInstance>, Vec<PuzzleInstance>) {
    let params = spatial_params();
    let tex = TextureParams {
        size: params.canvas_px(),
        ..TextureParams::default()
    };
    let mut all: Vec<PuzzleInstance> = synth_spatial(seed, train + test, &tex)
        .iter()
        .enumerate()
        .map(|(i, img)| make_spatial(img, &params, &mut sample_rng(seed + 1, i as u64)).unwrap())
        .collect();
    let test = all.split_off(train);
    (all, test)
}

/// Desk motion: one or two 5 px squares at 0.6 to 1.0 px per frame whose
/// paths stay clear of the walls.
pub fn motion_params() -> MotionParams {
    MotionParams {
        side: 5.0,
        min_speed: 0.6,
        max_speed: 1.0,
        clear_walls: true,
        ..MotionParams::default()
    }
}

/// Moving-square clips of 16 frames as 8 anchored pieces of 2 frames.
pub fn temporal_corpus(seed: u64, train: usize, test: usize) -> (Vec<PuzzleInstance>, Vec<PuzzleInstance>) {
    let mut all: Vec<PuzzleInstance> = synth_temporal(seed, train + test, &motion_params())
        .iter()
        .enumerate()
        .map(|(i, f)| make_temporal(f, 2, true, &mut sample_rng(seed + 1, i as u64)).unwrap())
        .collect();
    let test = all.split_off(train);
    (all, test)
}

/// Desk recipe: default 4x128 denoiser, warmup then cosine decay, clipped gradients.
pub fn desk_config(steps: u64, masked: bool, flip: bool) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 32,
        lr: 5e-4,
        warmup: 200,
        cosine: true,
        clip: 1.0,
        masked,
        flip: Some(flip),
        ckpt_every: 0,
        ..TrainConfig::default()
    }
}

pub fn cache_dir() -> PathBuf {
    let target = std::env::var_os("CARGO_TARGET_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target"));
    target.join("acceptance-cache")
}

/// CRC32 over every piece and truth of `data`.
pub fn fingerprint(data: &[PuzzleInstance]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for p in data {
        for i in 0..p.len() {
            h.update(p.ground_truth_piece(i).data());
            h.update(&(p.truth()[i] as u64).to_le_bytes());
        }
    }
    h.finalize()
}

/// Final checkpoint of `config` trained on `data`, reused from the cache when
/// a previous run on the same data with the identical config and step count
/// left one behind.
pub fn trained(name: &str, config: TrainConfig, data: &[PuzzleInstance]) -> (Denoiser, bool) {
    let name = format!("{name}-{:08x}", fingerprint(data));
    let path = cache_dir().join(format!("{name}.bin"));
    if std::env::var_os("JPDVT_RETRAIN").is_none() {
        if let Ok(ckpt) = Checkpoint::load(&path) {
            if ckpt.train == config && ckpt.step == config.steps {
                return (Denoiser::from_params(ckpt.model, ckpt.params).unwrap(), true);
            }
        }
    }
    let mut trainer = Trainer::new(config, TrainSet::from_instances(data).unwrap()).unwrap();
    let out = cache_dir().join(format!("{name}.run"));
    run(&mut trainer, &out, &[], &RunOptions::default(), |_| {}).unwrap();
    std::fs::create_dir_all(cache_dir()).unwrap();
    trainer.checkpoint().save(&path).unwrap();
    (trainer.denoiser(), false)
}
