//! Seeded desk-scale corpora: smooth RGB textures and moving squares.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;

/// Random stream of sample `index` under a corpus seed.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureParams {
    pub size: usize,
    /// Number of random plane waves in the texture.
    pub waves: usize,
}

impl Default for TextureParams {
    fn default() -> Self {
        Self { size: 48, waves: 4 }
    }
}

/// RGB texture: red rises along x, green rises along y, blue and a faint
/// overlay come from low-frequency plane waves.
pub fn texture(params: &TextureParams, rng: &mut impl Rng) -> Image {
    let n = params.size;
    let slope_r = rng.random_range(0.45..0.65);
    let slope_g = rng.random_range(0.45..0.65);
    let base_r = rng.random_range(0.1..0.3);
    let base_g = rng.random_range(0.1..0.3);
    let waves: Vec<(f64, f64, f64, f64)> = (0..params.waves)
        .map(|_| {
            (
                rng.random_range(1..=3) as f64 * if rng.random::<bool>() { 1.0 } else { -1.0 },
                rng.random_range(0..=3) as f64,
                rng.random_range(0.0..TAU),
                rng.random_range(0.5..1.0),
            )
        })
        .collect();
    let norm: f64 = waves.iter().map(|w| w.3).sum::<f64>().max(1e-9);
    let mut data = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        let v = (y as f64 + 0.5) / n as f64;
        for x in 0..n {
            let u = (x as f64 + 0.5) / n as f64;
            let wave: f64 = waves
                .iter()
                .map(|&(fx, fy, ph, amp)| amp * (TAU * (fx * u + fy * v) + ph).sin())
                .sum::<f64>()
                / norm;
            let r = base_r + slope_r * u + 0.08 * wave;
            let g = base_g + slope_g * v + 0.08 * wave;
            let b = 0.5 + 0.4 * wave;
            for c in [r, g, b] {
                data.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Image::new(n, n, 3, data).expect("texture geometry")
}

pub fn synth_spatial(seed: u64, count: usize, params: &TextureParams) -> Vec<Image> {
    (0..count)
        .map(|i| texture(params, &mut sample_rng(seed, i as u64)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionParams {
    pub frames: usize,
    pub size: usize,
    pub side: f64,
    pub min_speed: f64,
    pub max_speed: f64,
    pub max_shapes: usize,
    /// Start every shape where its straight path stays inside the frame, so no
    /// bounce happens (when the room allows the full path).
    pub clear_walls: bool,
}

impl Default for MotionParams {
    fn default() -> Self {
        Self {
            frames: 16,
            size: 24,
            side: 6.0,
            min_speed: 0.8,
            max_speed: 1.5,
            max_shapes: 2,
            clear_walls: false,
        }
    }
}

fn coverage(p: usize, lo: f64, len: f64) -> f64 {
    let (a, b) = (p as f64, p as f64 + 1.0);
    (b.min(lo + len) - a.max(lo)).max(0.0)
}

/// Antialiased bright squares moving at constant speed with wall bounces.
pub fn moving_squares(params: &MotionParams, rng: &mut impl Rng) -> Vec<Image> {
    let n = params.size;
    let room = n as f64 - params.side;
    let shapes = rng.random_range(1..=params.max_shapes.max(1));
    let mut state: Vec<[f64; 4]> = (0..shapes)
        .map(|_| {
            let angle = rng.random_range(0.0..TAU);
            let speed = rng.random_range(params.min_speed..=params.max_speed);
            let (vx, vy) = (speed * angle.cos(), speed * angle.sin());
            let mut start = |v: f64| {
                let travel = if params.clear_walls {
                    v * params.frames.saturating_sub(1) as f64
                } else {
                    0.0
                };
                let (lo, hi) = ((-travel).max(0.0), room - travel.max(0.0));
                if hi > lo {
                    rng.random_range(lo..=hi)
                } else {
                    rng.random_range(0.0..=room)
                }
            };
            [start(vx), start(vy), vx, vy]
        })
        .collect();
    let bounce = |p: &mut f64, v: &mut f64| {
        *p += *v;
        if *p < 0.0 {
            *p = -*p;
            *v = -*v;
        } else if *p > room {
            *p = 2.0 * room - *p;
            *v = -*v;
        }
    };
    let mut frames = Vec::with_capacity(params.frames);
    for _ in 0..params.frames {
        let mut data = vec![0u8; n * n];
        for s in &state {
            for y in 0..n {
                let cy = coverage(y, s[1], params.side);
                if cy == 0.0 {
                    continue;
                }
                for x in 0..n {
                    let v = (255.0 * cy * coverage(x, s[0], params.side)).round() as u8;
                    data[y * n + x] = data[y * n + x].max(v);
                }
            }
        }
        frames.push(Image::new(n, n, 1, data).expect("frame geometry"));
        for s in &mut state {
            let [x, y, vx, vy] = s;
            bounce(x, vx);
            bounce(y, vy);
        }
    }
    frames
}

pub fn synth_temporal(seed: u64, count: usize, params: &MotionParams) -> Vec<Vec<Image>> {
    (0..count)
        .map(|i| moving_squares(params, &mut sample_rng(seed, i as u64)))
        .collect()
}
