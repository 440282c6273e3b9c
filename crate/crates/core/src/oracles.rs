//! Brute-force references. Nothing here calls the code it is used to check,
//! except [`forward_noise_stats`], which samples the corruption under test.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tensorlab::Tensor;

use crate::diffusion::{q_sample, NoisePredictor, NoiseSchedule, StepQuery};
use crate::error::{Error, Result};
use crate::posenc::PeTable;
use crate::puzzlekit::PuzzleInstance;

/// Discordant unordered pairs by explicit double loop, normalized.
pub fn kendall_bruteforce(s1: &[usize], s2: &[usize]) -> f64 {
    let n = s1.len();
    let mut bad = 0u64;
    for i in 0..n {
        for j in i + 1..n {
            let a = s1[i] < s1[j];
            let b = s2[i] < s2[j];
            if a != b {
                bad += 1;
            }
        }
    }
    bad as f64 / (n * (n - 1) / 2) as f64
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Minimum total squared distance over all `N!` permutations; ties resolve
/// to the lexicographically smallest permutation.
pub fn assignment_bruteforce(l_hat: &[Vec<f64>], table: &[Vec<f64>]) -> Result<(f64, Vec<usize>)> {
    let n = l_hat.len();
    if n > 7 {
        return Err(Error::invalid(format!("enumeration limited to 7 pieces, got {n}")));
    }
    if table.len() != n {
        return Err(Error::invalid("estimate and table row counts differ"));
    }
    let sq = |a: &[f64], b: &[f64]| -> f64 {
        let mut s = 0.0;
        for k in 0..a.len() {
            let d = a[k] - b[k];
            s += d * d;
        }
        s
    };
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = (f64::INFINITY, perm.clone());
    loop {
        let mut cost = 0.0;
        for (i, &s) in perm.iter().enumerate() {
            cost += sq(&l_hat[i], &table[s]);
        }
        if cost < best.0 {
            best = (cost, perm.clone());
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok(best)
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn finite_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `ᾱ_t` of the linear schedule, as a direct product.
pub fn alpha_bar_reference(steps: usize, beta_start: f64, beta_end: f64, t: usize) -> f64 {
    let mut prod = 1.0;
    for s in 1..=t {
        let beta = if steps == 1 {
            beta_start
        } else {
            beta_start + (beta_end - beta_start) * (s - 1) as f64 / (steps - 1) as f64
        };
        prod *= 1.0 - beta;
    }
    prod
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleStats {
    pub mean: f64,
    pub std: f64,
}

fn stats(values: &[f64]) -> SampleStats {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    SampleStats { mean, std: var.sqrt() }
}

/// Empirical mean and std of `draws` closed-form corruptions of the scalar `l0`.
pub fn forward_noise_stats(l0: f64, t: usize, sched: &NoiseSchedule, draws: usize, seed: u64) -> Result<SampleStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = Tensor::from_fn(&[draws, 1], |_| rng.sample(StandardNormal));
    let x0 = Tensor::full(&[draws, 1], l0);
    Ok(stats(q_sample(&x0, t, &eps, sched)?.data()))
}

/// Same statistics from `t` successive one-step corruptions
/// `x ← sqrt(1 - β_s) x + sqrt(β_s) ε`.
pub fn chain_forward_stats(l0: f64, t: usize, betas: &[f64], draws: usize, seed: u64) -> SampleStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<f64> = (0..draws)
        .map(|_| {
            let mut x = l0;
            for &b in &betas[..t] {
                let e: f64 = rng.sample(StandardNormal);
                x = (1.0 - b).sqrt() * x + b.sqrt() * e;
            }
            x
        })
        .collect();
    stats(&values)
}

/// Stub predictor that knows each puzzle's answer: it returns the noise that
/// maps the current state exactly onto the true codes, and onto zero content.
pub struct TruthPredictor {
    sched: NoiseSchedule,
    targets: std::collections::HashMap<u64, Tensor<f64>>,
}

impl TruthPredictor {
    /// `puzzles[i]` is looked up by query id `i`.
    pub fn new(sched: NoiseSchedule, puzzles: &[PuzzleInstance]) -> Result<Self> {
        let targets = puzzles
            .iter()
            .enumerate()
            .map(|(i, p)| Ok((i as u64, PeTable::new(&p.layout())?.gather(p.truth()))))
            .collect::<Result<_>>()?;
        Ok(Self { sched, targets })
    }
}

impl NoisePredictor for TruthPredictor {
    fn content_dim(&self) -> usize {
        1
    }

    fn predict(&self, batch: &[StepQuery<'_>]) -> Result<Vec<(Tensor<f64>, Tensor<f64>)>> {
        batch
            .iter()
            .map(|s| {
                let target = self
                    .targets
                    .get(&s.query.id)
                    .ok_or_else(|| Error::invalid(format!("no answer for puzzle {}", s.query.id)))?;
                let ab = self.sched.alpha_bar(s.t);
                let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
                let pe = s.pe.zip_map(target, "truth_eps", |x, l| (x - a * l) / b)?;
                Ok((pe, s.content.scale(1.0 / b)))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kendall_extremes() {
        assert_eq!(kendall_bruteforce(&[0, 1, 2, 3], &[0, 1, 2, 3]), 0.0);
        assert_eq!(kendall_bruteforce(&[3, 2, 1, 0], &[0, 1, 2, 3]), 1.0);
    }

    #[test]
    fn enumeration_prefers_lexicographic_ties() {
        let rows = vec![vec![0.0], vec![0.0], vec![0.0]];
        let (cost, perm) = assignment_bruteforce(&rows, &rows).unwrap();
        assert_eq!(cost, 0.0);
        assert_eq!(perm, vec![0, 1, 2]);
        assert!(assignment_bruteforce(&vec![vec![0.0]; 8], &vec![vec![0.0]; 8]).is_err());
    }

    #[test]
    fn central_differences_are_exact_on_quadratics() {
        let g = finite_diff(|x| 3.0 * x[0] * x[0] - 2.0 * x[0] * x[1] + x[1], &[0.7, -1.2], 1e-5);
        assert!((g[0] - (6.0 * 0.7 + 2.4)).abs() < 1e-8);
        assert!((g[1] - (-1.4 + 1.0)).abs() < 1e-8);
        assert_eq!(finite_diff(|_| 0.0, &[1.0, 2.0], 1e-5), vec![0.0, 0.0]);
    }

    #[test]
    fn alpha_bar_reference_values() {
        assert_eq!(alpha_bar_reference(1000, 1e-4, 2e-2, 1), 1.0 - 1e-4);
        let last = alpha_bar_reference(1000, 1e-4, 2e-2, 1000);
        assert!((last - 4.0e-5).abs() < 0.1e-5, "{last}");
    }

    #[test]
    fn first_step_noise_level() {
        let s = NoiseSchedule::default_linear();
        let st = forward_noise_stats(0.3, 1, &s, 20_000, 1).unwrap();
        assert!((st.std - 0.01).abs() < 0.05 * 0.01);
        assert_eq!(st, forward_noise_stats(0.3, 1, &s, 20_000, 1).unwrap());
    }
}
