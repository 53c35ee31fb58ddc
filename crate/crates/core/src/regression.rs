//! Minibatch Adam regression of a network onto sampled targets.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::mlp::{mse_gradient, MlpParams};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionConfig {
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    /// Learning rate after the last epoch, as a fraction of `adam.lr` (geometric decay).
    pub final_lr_fraction: f64,
    pub seed: u64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        RegressionConfig {
            epochs: 200,
            batch: 256,
            adam: AdamConfig::default(),
            final_lr_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Learning rate for `epoch` under geometric decay from `lr` to `lr * final_fraction`.
pub fn decayed_lr(lr: f64, final_fraction: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return lr;
    }
    lr * final_fraction.powf(epoch as f64 / (epochs - 1) as f64)
}

pub fn mse<S: Scalar>(theta: &MlpParams<S>, x: ArrayView2<S>, y: ArrayView2<S>) -> Result<f64> {
    let out = theta.forward_batch(x)?;
    if out.dim() != y.dim() {
        return Err(Error::dim("mse (targets)", out.len(), y.len()));
    }
    let n = x.nrows().max(1) as f64;
    Ok(out
        .iter()
        .zip(y.iter())
        .map(|(&a, &b)| {
            let d = (a - b).as_f64();
            d * d
        })
        .sum::<f64>()
        / n)
}

pub(crate) fn gather_rows<S: Scalar>(a: ArrayView2<S>, idx: &[usize]) -> Array2<S> {
    a.select(Axis(0), idx)
}

/// Train `theta` in place; keeps the parameters with the lowest full-data loss seen at
/// epoch boundaries. Returns the per-epoch full-data loss curve (entry 0 is the initial loss).
pub fn train_mse<S: Scalar>(
    theta: &mut MlpParams<S>,
    x: ArrayView2<S>,
    y: ArrayView2<S>,
    cfg: &RegressionConfig,
    stream: u64,
) -> Result<Vec<f64>> {
    cfg.adam.validate()?;
    if x.nrows() != y.nrows() {
        return Err(Error::dim("train_mse (rows)", x.nrows(), y.nrows()));
    }
    if x.nrows() == 0 || cfg.batch == 0 {
        return Err(Error::Config("regression needs samples and a positive batch size".into()));
    }
    let n = x.nrows();
    let mut state = AdamState::<S>::new(theta.param_count());
    let mut best = theta.clone();
    let mut best_loss = mse(theta, x, y)?;
    let mut curve = vec![best_loss];
    for epoch in 0..cfg.epochs {
        let lr = decayed_lr(cfg.adam.lr, cfg.final_lr_fraction, epoch, cfg.epochs);
        let perm = rng::permutation(n, cfg.seed, stream, epoch as u64);
        for chunk in perm.chunks(cfg.batch) {
            let xb = gather_rows(x, chunk);
            let yb = gather_rows(y, chunk);
            let rec = mse_gradient(theta, xb.view(), yb.view())?;
            state.step_with_lr(&cfg.adam, lr, theta.param_slices_mut(), rec.grads.param_slices())?;
        }
        let loss = mse(theta, x, y)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged {
                step: stream as usize,
                epoch,
                loss,
            });
        }
        if loss < best_loss {
            best_loss = loss;
            best = theta.clone();
        }
        curve.push(loss);
    }
    *theta = best;
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fits_a_line() {
        let x = Array2::from_shape_fn((128, 1), |(i, _)| -1.0 + 2.0 * i as f64 / 127.0);
        let y = x.mapv(|v| 0.7 * v - 0.2);
        let mut net = MlpParams::<f64>::he_init(&[1, 16, 1], 3, 0).unwrap();
        let cfg = RegressionConfig {
            epochs: 300,
            batch: 32,
            adam: AdamConfig::with_lr(1e-2),
            final_lr_fraction: 0.05,
            seed: 1,
        };
        let curve = train_mse(&mut net, x.view(), y.view(), &cfg, 0).unwrap();
        assert!(curve.last().unwrap() < &curve[0]);
        assert!(mse(&net, x.view(), y.view()).unwrap() < 1e-4);
    }

    #[test]
    fn decay_endpoints() {
        assert_eq!(decayed_lr(1.0, 0.1, 0, 10), 1.0);
        assert!((decayed_lr(1.0, 0.1, 9, 10) - 0.1).abs() < 1e-15);
        assert_eq!(decayed_lr(0.5, 0.1, 0, 1), 0.5);
    }
}
