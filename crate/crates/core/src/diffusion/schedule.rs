use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 2e-2;

/// Parameters that regenerate a linear schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Variance schedule indexed by `t = 1..=T`.
///
/// A respaced schedule keeps, for each of its own steps, the timestep of the
/// parent schedule the denoiser was trained on ([`NoiseSchedule::model_t`]).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    model_ts: Vec<usize>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "need 0 < beta_start < beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn default_linear() -> Self {
        ScheduleParams::default().build().expect("default schedule")
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::invalid("betas must be non-empty and inside (0, 1)"));
        }
        let model_ts = (1..=betas.len()).collect();
        Ok(Self::with_model_ts(betas, model_ts))
    }

    fn with_model_ts(betas: Vec<f64>, model_ts: Vec<usize>) -> Self {
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Self {
            betas,
            alpha_bars,
            model_ts,
        }
    }

    /// Sub-schedule visiting every `stride`-th timestep, counted down from `T`.
    ///
    /// Kept steps are `{t : (T - t) % stride == 0}`; each new beta is
    /// `1 - ᾱ(τ_i) / ᾱ(τ_{i-1})` so the marginals at kept steps are unchanged.
    pub fn respaced(&self, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("stride must be at least 1"));
        }
        if stride == 1 {
            return Ok(self.clone());
        }
        let t_max = self.len();
        let kept: Vec<usize> = (1..=t_max).filter(|t| (t_max - t).is_multiple_of(stride)).collect();
        let mut betas = Vec::with_capacity(kept.len());
        let mut prev = 1.0;
        for &t in &kept {
            let ab = self.alpha_bar(t);
            betas.push(1.0 - ab / prev);
            prev = ab;
        }
        let model_ts = kept.iter().map(|&t| self.model_t(t)).collect();
        Ok(Self::with_model_ts(betas, model_ts))
    }

    /// Number of steps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Timestep of the training schedule that step `t` corresponds to.
    pub fn model_t(&self, t: usize) -> usize {
        self.model_ts[t - 1]
    }

    /// `β̃_t = β_t (1 - ᾱ_{t-1}) / (1 - ᾱ_t)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    /// The first `t` steps as a schedule of their own.
    pub fn prefix(&self, t: usize) -> Result<Self> {
        if t == 0 || t > self.len() {
            return Err(Error::invalid(format!("prefix length {t} outside 1..={}", self.len())));
        }
        Ok(Self::with_model_ts(self.betas[..t].to_vec(), self.model_ts[..t].to_vec()))
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::invalid(format!("timestep {t} outside 1..={}", self.len())));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 1e-4, 2e-2).unwrap();
        assert_eq!(s.betas(), &[1e-4]);
        assert_eq!(s.alpha_bar(1), 1.0 - 1e-4);
    }

    #[test]
    fn endpoints_are_inclusive() {
        let s = NoiseSchedule::default_linear();
        assert_eq!(s.len(), 1000);
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(1000) - 2e-2).abs() < 1e-15);
        assert!(s.betas().windows(2).all(|w| w[0] < w[1]));
        assert!(s.alpha_bars().windows(2).all(|w| w[0] > w[1]));
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn rejects_bad_endpoints() {
        assert!(NoiseSchedule::linear(10, 0.0, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.2, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn respacing_preserves_kept_marginals() {
        let s = NoiseSchedule::default_linear();
        let r = s.respaced(10).unwrap();
        assert_eq!(r.len(), 100);
        assert_eq!(r.model_t(r.len()), 1000);
        assert_eq!(r.model_t(1), 10);
        for i in 1..=r.len() {
            let t = r.model_t(i);
            assert!((r.alpha_bar(i) - s.alpha_bar(t)).abs() < 1e-12);
        }
        assert_eq!(s.respaced(1).unwrap(), s);
    }

    #[test]
    fn respacing_with_uneven_stride_ends_at_t_max() {
        let s = NoiseSchedule::default_linear();
        let r = s.respaced(3).unwrap();
        assert_eq!(r.model_t(1), 1);
        assert_eq!(r.model_t(r.len()), 1000);
        let r2 = r.respaced(2).unwrap();
        assert_eq!(r2.model_t(r2.len()), 1000);
    }

    #[test]
    fn posterior_variance_vanishes_at_first_step() {
        let s = NoiseSchedule::default_linear();
        assert_eq!(s.posterior_variance(1), 0.0);
        assert!(s.posterior_variance(2) > 0.0);
    }
}
