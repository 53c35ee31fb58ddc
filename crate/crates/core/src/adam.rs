//! Adam with bias correction over an arbitrary set of parameter slices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig::with_lr(1e-3)
    }
}

/// Moment estimates for a fixed parameter layout.
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    m: Vec<S>,
    v: Vec<S>,
    t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(param_count: usize) -> Self {
        AdamState {
            m: vec![S::zero(); param_count],
            v: vec![S::zero(); param_count],
            t: 0,
        }
    }

    pub fn updates(&self) -> u64 {
        self.t
    }

    /// One update of `params` along `grads`, with learning rate `lr` (overriding `cfg.lr`).
    ///
    /// Slices are visited in order and must have the layout the state was built for.
    /// A non-finite gradient aborts the update before any parameter changes.
    pub fn step_with_lr(
        &mut self,
        cfg: &AdamConfig,
        lr: f64,
        params: Vec<&mut [S]>,
        grads: Vec<&[S]>,
    ) -> Result<()> {
        let total: usize = grads.iter().map(|g| g.len()).sum();
        if total != self.m.len() || params.iter().map(|p| p.len()).sum::<usize>() != total {
            return Err(Error::dim("AdamState::step", self.m.len(), total));
        }
        if let Some(index) = grads.iter().flat_map(|g| g.iter()).position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                update: self.t + 1,
                index,
            });
        }
        self.t += 1;
        let b1 = S::from_f64_lossy(cfg.beta1);
        let b2 = S::from_f64_lossy(cfg.beta2);
        let one = S::one();
        let bc1 = S::from_f64_lossy(1.0 - cfg.beta1.powf(self.t as f64));
        let bc2 = S::from_f64_lossy(1.0 - cfg.beta2.powf(self.t as f64));
        let lr = S::from_f64_lossy(lr);
        let eps = S::from_f64_lossy(cfg.eps);

        let mut k = 0;
        for (p, g) in params.into_iter().zip(grads) {
            for (w, &gi) in p.iter_mut().zip(g) {
                let m = b1 * self.m[k] + (one - b1) * gi;
                let v = b2 * self.v[k] + (one - b2) * gi * gi;
                self.m[k] = m;
                self.v[k] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
                k += 1;
            }
        }
        Ok(())
    }

    pub fn step(&mut self, cfg: &AdamConfig, params: Vec<&mut [S]>, grads: Vec<&[S]>) -> Result<()> {
        self.step_with_lr(cfg, cfg.lr, params, grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let cfg = AdamConfig::default();
        let mut st = AdamState::<f64>::new(3);
        let mut p = vec![1.0, -2.0, 0.5];
        let g = [0.0; 3];
        for _ in 0..10 {
            st.step(&cfg, vec![&mut p[..]], vec![&g[..]]).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn constant_gradient_moves_against_sign() {
        let cfg = AdamConfig::with_lr(0.01);
        let mut st = AdamState::<f64>::new(2);
        let mut p = [0.0, 0.0];
        let g = [3.0, -0.2];
        for _ in 0..100 {
            st.step(&cfg, vec![&mut p[..]], vec![&g[..]]).unwrap();
        }
        assert!(p[0] < 0.0 && p[1] > 0.0);
    }

    #[test]
    fn quadratic_converges() {
        let cfg = AdamConfig::with_lr(0.05);
        let mut st = AdamState::<f64>::new(1);
        let mut theta = [0.0];
        for _ in 0..500 {
            let g = [2.0 * (theta[0] - 3.0)];
            st.step(&cfg, vec![&mut theta[..]], vec![&g[..]]).unwrap();
        }
        assert!((theta[0] - 3.0).abs() < 0.01, "theta = {}", theta[0]);
    }

    #[test]
    fn non_finite_gradient_is_rejected_untouched() {
        let cfg = AdamConfig::default();
        let mut st = AdamState::<f32>::new(2);
        let mut p = vec![1.0f32, 1.0];
        let g = [0.1f32, f32::NAN];
        let err = st.step(&cfg, vec![&mut p[..]], vec![&g[..]]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { update: 1, index: 1 }));
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(st.updates(), 0);
    }

    #[test]
    fn layout_mismatch_is_an_error() {
        let mut st = AdamState::<f64>::new(2);
        let mut p = [0.0; 3];
        let g = [0.0; 3];
        assert!(st.step(&AdamConfig::default(), vec![&mut p[..]], vec![&g[..]]).is_err());
    }
}
