use super::real::{lit, Real};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam hyperparameters with a step-decay learning-rate schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplier applied to the learning rate at every decay boundary.
    pub decay_factor: f64,
    /// Epochs between decay boundaries; 0 disables decay.
    pub decay_every: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_factor: 0.1,
            decay_every: 8,
        }
    }
}

impl AdamConfig {
    /// Learning rate in effect during (zero-based) `epoch`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if self.decay_every == 0 {
            return self.lr;
        }
        self.lr * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

/// Moment estimates for a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: u64,
    epoch: usize,
}

impl<T: Real> AdamState<T> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let first: Vec<_> = params.into_iter().map(|p| Tensor::zeros(p.dims())).collect();
        let second = first.clone();
        Self {
            config,
            first,
            second,
            step: 0,
            epoch: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    /// Learning rate used by the next update.
    pub fn current_lr(&self) -> f64 {
        self.config.lr_at_epoch(self.epoch)
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} params, {} grads, {} moment slots",
                    params.len(),
                    grads.len(),
                    self.first.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.dims() != g.dims() || p.dims() != self.first[i].dims() {
                return Err(Error::shape(
                    "adam_step",
                    format!("param {i}: {:?} vs grad {:?}", p.dims(), g.dims()),
                ));
            }
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2, eps) = (lit::<T>(c.beta1), lit::<T>(c.beta2), lit::<T>(c.eps));
        let lr = lit::<T>(c.lr_at_epoch(self.epoch));
        let bc1 = T::one() - b1.powi(self.step as i32);
        let bc2 = T::one() - b2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_identity() {
        let mut params = vec![Tensor::<f64>::vector(vec![0.3, -2.0, 5.0])];
        let before = params.clone();
        let mut adam = AdamState::new(AdamConfig::default(), &params);
        for _ in 0..5 {
            adam.step(&mut params, &[Tensor::zeros(&[3])]).unwrap();
        }
        assert_eq!(params, before);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut params = vec![Tensor::<f64>::vector(vec![1.0, 1.0, 1.0])];
        let mut adam = AdamState::new(AdamConfig::default(), &params);
        let g = Tensor::vector(vec![0.5, -3.0, 100.0]);
        adam.step(&mut params, &[g]).unwrap();
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        for (p, s) in params[0].data().iter().zip([1.0, -1.0, 1.0]) {
            assert!((1.0 - p - 1e-4 * s).abs() < 1e-11);
        }
    }

    #[test]
    fn lr_decays_tenfold_every_eight_epochs() {
        let c = AdamConfig::default();
        assert_eq!(c.lr_at_epoch(0), 1e-4);
        assert_eq!(c.lr_at_epoch(7), 1e-4);
        assert!((c.lr_at_epoch(8) - 1e-5).abs() < 1e-20);
        assert!((c.lr_at_epoch(14) - 1e-5).abs() < 1e-20);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = vec![Tensor::<f64>::zeros(&[2, 2])];
        let mut adam = AdamState::new(AdamConfig::default(), &params);
        assert!(adam.step(&mut params, &[Tensor::zeros(&[4])]).is_err());
        assert!(adam.step(&mut params, &[]).is_err());
        assert_eq!(adam.steps(), 0);
    }
}
