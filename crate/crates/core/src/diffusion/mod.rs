//! Forward corruption of slot codes and the ancestral reverse sampler.
//!
//! The marginal is `L_t = sqrt(ᾱ_t) L_0 + sqrt(1 - ᾱ_t) ε`. Reverse steps use
//! the fixed posterior variance `β̃_t` and add no noise at `t = 1`.

mod sampler;
mod schedule;

use rand::Rng;
use rand_distr::StandardNormal;
use tensorlab::Tensor;

pub use sampler::{
    solve_batch, solve_masked, solve_positions, NoisePredictor, PuzzleQuery, Solution,
    SolveOptions, StepQuery,
};
pub use schedule::{NoiseSchedule, ScheduleParams, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};

use crate::error::{Error, Result};

/// Draws a standard-normal tensor.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

pub fn q_sample(l0: &Tensor<f64>, t: usize, eps: &Tensor<f64>, sched: &NoiseSchedule) -> Result<Tensor<f64>> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(l0.zip_map(eps, "q_sample", |x, e| a * x + b * e)?)
}

/// Presentation rows with content (`given`) and without (`missing`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSplit {
    given: Vec<usize>,
    missing: Vec<usize>,
}

impl MaskSplit {
    pub fn new(given: Vec<usize>, missing: Vec<usize>) -> Result<Self> {
        let n = given.len() + missing.len();
        let mut seen = vec![false; n];
        for &i in given.iter().chain(&missing) {
            if i >= n {
                return Err(Error::invalid(format!("row {i} outside 0..{n}")));
            }
            if seen[i] {
                return Err(Error::invalid(format!("row {i} is both given and missing")));
            }
            seen[i] = true;
        }
        Ok(Self { given, missing })
    }

    /// Split of `0..n` with the listed rows missing.
    pub fn from_missing(n: usize, missing: &[usize]) -> Result<Self> {
        let given = (0..n).filter(|i| !missing.contains(i)).collect();
        Self::new(given, missing.to_vec())
    }

    pub fn given(&self) -> &[usize] {
        &self.given
    }

    pub fn missing(&self) -> &[usize] {
        &self.missing
    }

    pub fn len(&self) -> usize {
        self.given.len() + self.missing.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Noisy slot codes plus noisy content tokens of the missing rows at step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionState {
    pub pe: Tensor<f64>,
    /// `[missing, width]`; zero rows when nothing is missing.
    pub content: Tensor<f64>,
    pub t: usize,
}

impl DiffusionState {
    pub fn new(pe: Tensor<f64>, content: Tensor<f64>, t: usize) -> Result<Self> {
        if pe.rank() != 2 || content.rank() != 2 {
            return Err(Error::invalid("state matrices must be rank 2"));
        }
        Ok(Self { pe, content, t })
    }
}

/// Corrupts codes and missing-content tokens at the same `t` with independent noise.
#[allow(clippy::too_many_arguments)]
pub fn q_sample_masked(
    l0: &Tensor<f64>,
    em0: &Tensor<f64>,
    split: &MaskSplit,
    t: usize,
    eps_pe: &Tensor<f64>,
    eps_content: &Tensor<f64>,
    sched: &NoiseSchedule,
) -> Result<DiffusionState> {
    if l0.rows() != split.len() {
        return Err(Error::invalid(format!(
            "{} code rows for {} pieces",
            l0.rows(),
            split.len()
        )));
    }
    if em0.rows() != split.missing().len() {
        return Err(Error::invalid(format!(
            "{} content rows for {} missing pieces",
            em0.rows(),
            split.missing().len()
        )));
    }
    let pe = q_sample(l0, t, eps_pe, sched)?;
    let content = q_sample(em0, t, eps_content, sched)?;
    DiffusionState::new(pe, content, t)
}

/// A row pinned to a known clean value during sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct Anchor {
    pub row: usize,
    pub code: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct StepOptions<'a> {
    /// Clamp the implied clean codes to `[-1, 1]` before forming the mean.
    pub clip_pe: bool,
    pub anchors: &'a [Anchor],
}

fn posterior(
    x: &Tensor<f64>,
    eps_hat: &Tensor<f64>,
    t: usize,
    clip: bool,
    sched: &NoiseSchedule,
    noise: &Tensor<f64>,
) -> Result<Tensor<f64>> {
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let beta = sched.beta(t);
    let c0 = beta * ab_prev.sqrt() / (1.0 - ab);
    let ct = (1.0 - ab_prev) * (1.0 - beta).sqrt() / (1.0 - ab);
    let sigma = if t > 1 { sched.posterior_variance(t).sqrt() } else { 0.0 };
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    if eps_hat.shape() != x.shape() || noise.shape() != x.shape() {
        return Err(Error::invalid(format!(
            "prediction {:?} / noise {:?} vs state {:?}",
            eps_hat.shape(),
            noise.shape(),
            x.shape()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(noise.data())
        .map(|((&xt, &e), &z)| {
            let mut x0 = (xt - sb * e) / sa;
            if clip {
                x0 = x0.clamp(-1.0, 1.0);
            }
            c0 * x0 + ct * xt + sigma * z
        })
        .collect();
    Ok(Tensor::new(x.shape(), data)?)
}

/// One ancestral step with explicitly supplied injected noise.
pub fn ddpm_step_with_noise(
    state: &DiffusionState,
    eps_pe: &Tensor<f64>,
    eps_content: &Tensor<f64>,
    sched: &NoiseSchedule,
    opts: &StepOptions<'_>,
    noise_pe: &Tensor<f64>,
    noise_content: &Tensor<f64>,
) -> Result<DiffusionState> {
    let t = state.t;
    sched.check_t(t)?;
    let mut pe = posterior(&state.pe, eps_pe, t, opts.clip_pe, sched, noise_pe)?;
    let content = posterior(&state.content, eps_content, t, false, sched, noise_content)?;
    for a in opts.anchors {
        pe.row_mut(a.row).copy_from_slice(&a.code);
    }
    DiffusionState::new(pe, content, t - 1)
}

/// One ancestral step `t → t-1`, drawing injected noise from `rng`.
pub fn ddpm_step<R: Rng + ?Sized>(
    state: &DiffusionState,
    eps_pe: &Tensor<f64>,
    eps_content: &Tensor<f64>,
    sched: &NoiseSchedule,
    opts: &StepOptions<'_>,
    rng: &mut R,
) -> Result<DiffusionState> {
    let noise_pe = standard_normal(rng, state.pe.shape());
    let noise_content = standard_normal(rng, state.content.shape());
    ddpm_step_with_noise(state, eps_pe, eps_content, sched, opts, &noise_pe, &noise_content)
}

/// `x̂_0 = (x_t - sqrt(1 - ᾱ_t) ε̂) / sqrt(ᾱ_t)`.
pub fn predict_x0(xt: &Tensor<f64>, eps_hat: &Tensor<f64>, t: usize, sched: &NoiseSchedule) -> Result<Tensor<f64>> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(xt.zip_map(eps_hat, "predict_x0", |x, e| (x - sb * e) / sa)?)
}
