use serde::{Deserialize, Serialize};

use super::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    /// Settings used for the GAN-mode 2D experiments.
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for one parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One Adam update of `theta` in place. A gradient with any non-finite
    /// entry leaves both `theta` and the state untouched.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) -> Result<(), NnError> {
        if grad.len() != theta.len() || theta.len() != self.m.len() {
            return Err(NnError::ParamCount {
                expected: self.m.len(),
                got: grad.len(),
            });
        }
        if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
            return Err(NnError::NonFiniteGradient {
                step: self.t + 1,
                index,
            });
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (((w, &g), m), v) in theta.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_identity() {
        let mut theta = vec![0.5, -1.0, 2.0];
        let before = theta.clone();
        let mut st = AdamState::new(AdamConfig::default(), 3);
        st.step(&mut theta, &[0.0; 3]).unwrap();
        assert_eq!(theta, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // At t = 1, m_hat = g and v_hat = g^2, so the step is lr * g / (|g| + eps).
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let g = [3.0, -0.2, 1e-3];
        let mut theta = vec![0.0; 3];
        let mut st = AdamState::new(cfg, 3);
        st.step(&mut theta, &g).unwrap();
        for (w, gi) in theta.iter().zip(g) {
            let want = -cfg.lr * gi / (gi.abs() + cfg.eps);
            assert!((w - want).abs() < 1e-15, "{w} vs {want}");
            assert!((w + cfg.lr * gi.signum()).abs() < 1e-7);
        }
    }

    #[test]
    fn two_steps_reduce_convex_quadratic() {
        // f(w) = 0.5 * (w0^2 + 4 w1^2), grad = (w0, 4 w1), evaluated at the
        // starting point for both steps.
        let f = |w: &[f64]| 0.5 * (w[0] * w[0] + 4.0 * w[1] * w[1]);
        let mut w = vec![1.0, -1.0];
        let f0 = f(&w);
        let g = vec![w[0], 4.0 * w[1]];
        let mut st = AdamState::new(
            AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
            2,
        );
        st.step(&mut w, &g).unwrap();
        st.step(&mut w, &g).unwrap();
        assert!(f(&w) < f0);
        // hand-computed oracle: both steps move each coordinate by lr*sign(g)
        // up to eps (m_hat / sqrt(v_hat) = sign(g) for constant gradients)
        assert!((w[0] - 0.8).abs() < 1e-7);
        assert!((w[1] + 0.8).abs() < 1e-7);
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_mutation() {
        let mut theta = vec![1.0, 1.0];
        let mut st = AdamState::new(AdamConfig::default(), 2);
        st.step(&mut theta, &[0.1, 0.1]).unwrap();
        let (snap_t, snap_w) = (st.clone(), theta.clone());
        let err = st.step(&mut theta, &[0.0, f64::NAN]).unwrap_err();
        assert_eq!(err, NnError::NonFiniteGradient { step: 2, index: 1 });
        assert_eq!(st, snap_t);
        assert_eq!(theta, snap_w);
    }
}
