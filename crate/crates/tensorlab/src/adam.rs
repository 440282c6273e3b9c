use crate::error::{Result, TensorError};
use crate::{ParamStore, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments, one pair per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// Rebuilds a state from persisted moments.
    pub fn from_parts(
        config: AdamConfig,
        step: u64,
        first: Vec<Tensor<T>>,
        second: Vec<Tensor<T>>,
    ) -> Self {
        Self {
            config,
            step,
            first,
            second,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.second
    }

    /// Applies one update. Nothing is modified if any gradient is non-finite
    /// or mis-shaped.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(TensorError::Invalid {
                op: "adam_step",
                detail: format!(
                    "{} gradients / {} moments for {} parameters",
                    grads.len(),
                    self.first.len(),
                    params.len()
                ),
            });
        }
        for ((name, p), (g, m)) in params.iter().zip(grads.iter().zip(&self.first)) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(TensorError::NonFiniteGradient(name.to_owned()));
            }
        }

        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let bc1 = T::lit(1.0 - c.beta1.powf(self.step as f64));
        let bc2 = T::lit(1.0 - c.beta2.powf(self.step as f64));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));

        for (((_, p), g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((pv, &gv), (mv, vv)) in it {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(&[vals.len()], vals.to_vec()).unwrap());
        s
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = store(&[1.0, -2.0]);
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        adam.step(&mut p, &[Tensor::new(&[2], vec![1.0, 1.0]).unwrap()]).unwrap();
        let before = p.get("w").unwrap().clone();
        let m_before = adam.first_moments()[0].clone();
        adam.step(&mut p, &[Tensor::zeros(&[2])]).unwrap();
        let m_after = &adam.first_moments()[0];
        assert!(m_after.data()[0].abs() < m_before.data()[0].abs());
        // Parameter still moves by the decayed momentum; with fresh state it would not.
        let mut fresh = store(&[1.0, -2.0]);
        let mut adam2 = AdamState::new(AdamConfig::default(), &fresh);
        adam2.step(&mut fresh, &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(fresh.get("w").unwrap().data(), &[1.0, -2.0]);
        assert_ne!(p.get("w").unwrap(), &before);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = store(&[0.5, 0.5, 0.5]);
        let cfg = AdamConfig {
            lr: 1e-3,
            ..Default::default()
        };
        let mut adam = AdamState::new(cfg, &p);
        let g = Tensor::new(&[3], vec![2.0, -0.3, 1e-3]).unwrap();
        adam.step(&mut p, std::slice::from_ref(&g)).unwrap();
        for (&pv, &gv) in p.get("w").unwrap().data().iter().zip(g.data()) {
            let expected = 0.5 - 1e-3 * gv / (gv.abs() + 1e-8);
            assert!((pv - expected).abs() < 1e-15, "{pv} vs {expected}");
        }
    }

    #[test]
    fn nan_gradient_aborts_and_names_param() {
        let mut p = store(&[1.0]);
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        let err = adam
            .step(&mut p, &[Tensor::new(&[1], vec![f64::NAN]).unwrap()])
            .unwrap_err();
        assert_eq!(err, TensorError::NonFiniteGradient("w".into()));
        assert_eq!(adam.step_count(), 0);
        assert_eq!(p.get("w").unwrap().data(), &[1.0]);
    }

    #[test]
    fn identical_runs_are_bit_exact() {
        let run = || {
            let mut p = store(&[0.1, 0.2]);
            let mut adam = AdamState::new(AdamConfig::default(), &p);
            for i in 0..2 {
                let g = Tensor::new(&[2], vec![0.3 * i as f64, -0.7]).unwrap();
                adam.step(&mut p, &[g]).unwrap();
            }
            (p.get("w").unwrap().clone(), adam)
        };
        assert_eq!(run(), run());
    }
}
