use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moment estimates, one pair per parameter in set order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState {
            config,
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }

    /// One bias-corrected Adam update using the gradients currently stored in
    /// `params`. An empty parameter set is left untouched.
    pub fn step(&mut self, params: &mut ParamSet) {
        if params.is_empty() {
            return;
        }
        assert_eq!(
            params.len(),
            self.first_moment.len(),
            "optimizer state built for a different parameter set"
        );
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((p, m), v) in params
            .iter_mut()
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            let grads = p.grad.data();
            for (((w, g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grads)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(values: &[f64], grads: &[f64]) -> ParamSet {
        let mut ps = ParamSet::new();
        let id = ps
            .insert("w", Tensor::new(&[values.len()], values.to_vec()).unwrap())
            .unwrap();
        ps.get_mut(id).grad.data_mut().copy_from_slice(grads);
        ps
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut ps = set(&[1.0, -2.0], &[0.0, 0.0]);
        let before = ps.clone();
        let mut adam = AdamState::new(AdamConfig::default(), &ps);
        adam.step(&mut ps);
        assert!(ps.bit_identical(&before));
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient() {
        let grads = [0.5, -3.0, 1e-3];
        let mut ps = set(&[0.0; 3], &grads);
        let cfg = AdamConfig::default();
        let mut adam = AdamState::new(cfg, &ps);
        adam.step(&mut ps);
        for (w, g) in ps.iter().next().unwrap().value.data().iter().zip(grads) {
            // m̂ = g, v̂ = g² on the first step
            let expect = -cfg.learning_rate * g / (g.abs() + cfg.epsilon);
            assert!((w - expect).abs() < 1e-15, "{w} vs {expect}");
            assert!((w.abs() - cfg.learning_rate).abs() < 1e-7);
            assert_eq!(w.signum(), -g.signum());
        }
    }

    #[test]
    fn identical_inputs_identical_updates() {
        let mut a = set(&[0.3, 0.1], &[0.2, -0.7]);
        let mut b = a.clone();
        let mut sa = AdamState::new(AdamConfig::default(), &a);
        let mut sb = AdamState::new(AdamConfig::default(), &b);
        for _ in 0..5 {
            sa.step(&mut a);
            sb.step(&mut b);
        }
        assert!(a.bit_identical(&b));
    }

    #[test]
    fn empty_set_is_a_no_op() {
        let mut ps = ParamSet::new();
        let mut adam = AdamState::new(AdamConfig::default(), &ps);
        adam.step(&mut ps);
        assert_eq!(adam.step, 0);
    }
}
