//! The clipping network: near-identity on the ball of radius `R1`, bounded by `R2`
//! everywhere.
//!
//! It is the concatenation of an exact coordinate clamp `gamma` onto `[-R1, R1]^d`
//! (three layers) with a two-layer network `theta_eps` fitted to the radial projection
//! onto the ball on that box.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adam::AdamConfig;
use crate::error::{Error, Result};
use crate::mlp::{concat_params, Layer, MlpParams};
use crate::regression::{train_mse, RegressionConfig};
use crate::rng::{self, Domain};
use crate::scalar::Scalar;

/// `gamma(x) = -relu(-relu(x + R1) + 2 R1) + R1`, which equals `min(max(x, -R1), R1)`.
pub fn clamp_params<S: Scalar>(d: usize, r1: S) -> Result<MlpParams<S>> {
    if d == 0 {
        return Err(Error::dim("clamp_params", 1, 0));
    }
    let eye = Array2::<S>::eye(d);
    let neg = eye.mapv(|v| -v);
    let r = Array1::from_elem(d, r1);
    MlpParams::new(vec![
        Layer::new(eye, r.clone())?,
        Layer::new(neg.clone(), r.mapv(|v| v + v))?,
        Layer::new(neg, r)?,
    ])
}

/// `x` inside the ball of radius `r1`, `r1 x / ||x||` outside.
pub fn radial_projection<S: Scalar>(x: &[S], r1: S) -> Vec<S> {
    let n = x.iter().fold(S::zero(), |acc, &v| acc + v * v).sqrt();
    if n <= r1 {
        x.to_vec()
    } else {
        x.iter().map(|&v| r1 * v / n).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitBudget {
    pub width: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Training points per axis of the box (grid for `d <= 3`, otherwise `points^2` uniform draws).
    pub points_per_axis: usize,
    /// Probe points per axis for the sup-error audit.
    pub probes_per_axis: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for FitBudget {
    fn default() -> Self {
        FitBudget {
            width: 96,
            epochs: 1500,
            batch: 256,
            lr: 5e-3,
            points_per_axis: 41,
            probes_per_axis: 201,
            restarts: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClippingNetwork<S> {
    /// Five-layer composite `theta_eps o gamma`.
    pub params: MlpParams<S>,
    pub clamp: MlpParams<S>,
    pub theta_eps: MlpParams<S>,
    /// Largest `||theta_eps(x) - phi(x)||` over the probe set of the box.
    pub achieved_sup_error: f64,
}

fn box_points<S: Scalar>(d: usize, r1: f64, per_axis: usize, seed: u64, stream: u64) -> Array2<S> {
    if d <= 3 {
        let per_axis = per_axis.max(2);
        let total = per_axis.pow(d as u32);
        Array2::from_shape_fn((total, d), |(i, j)| {
            let idx = (i / per_axis.pow(j as u32)) % per_axis;
            S::from_f64_lossy(-r1 + 2.0 * r1 * idx as f64 / (per_axis - 1) as f64)
        })
    } else {
        let total = per_axis * per_axis;
        let mut r = rng::stream(seed, Domain::Probe, stream, 0);
        Array2::from_shape_simple_fn((total, d), || S::from_f64_lossy(r.random_range(-r1..=r1)))
    }
}

fn sup_error<S: Scalar>(theta: &MlpParams<S>, x: &Array2<S>, y: &Array2<S>) -> Result<f64> {
    let out = theta.forward_batch(x.view())?;
    Ok(out
        .outer_iter()
        .zip(y.outer_iter())
        .map(|(a, b)| {
            a.iter()
                .zip(b.iter())
                .map(|(&p, &q)| (p - q).as_f64().powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max))
}

fn targets<S: Scalar>(x: &Array2<S>, r1: S) -> Array2<S> {
    let mut y = x.clone();
    for mut row in y.outer_iter_mut() {
        let p = radial_projection(row.as_slice().expect("row-major"), r1);
        row.assign(&Array1::from(p));
    }
    y
}

/// Build the clipping network for `0 < R1 < R2`, `0 < eps < R2 - R1`.
///
/// `theta_eps` is fitted by regression (best sup-error of `budget.restarts` seeds);
/// if none reaches `eps` on the probe grid an [`Error::ApproximationFailure`] reports the
/// best achieved value.
pub fn clipping_network<S: Scalar>(d: usize, r1: f64, r2: f64, eps: f64, budget: &FitBudget) -> Result<ClippingNetwork<S>> {
    if d == 0 {
        return Err(Error::dim("clipping_network", 1, 0));
    }
    if !(r1 > 0.0 && r2 > r1) {
        return Err(Error::Config(format!("need 0 < R1 < R2, got R1 = {r1}, R2 = {r2}")));
    }
    if !(eps > 0.0 && eps < r2 - r1) {
        return Err(Error::Config(format!("need 0 < eps < R2 - R1, got eps = {eps}")));
    }
    let r1s = S::from_f64_lossy(r1);
    let x_train = box_points::<S>(d, r1, budget.points_per_axis, budget.seed, 0);
    let y_train = targets(&x_train, r1s);
    let x_probe = box_points::<S>(d, r1, budget.probes_per_axis, budget.seed, 1);
    let y_probe = targets(&x_probe, r1s);

    let mut best: Option<(f64, MlpParams<S>)> = None;
    for restart in 0..budget.restarts.max(1) {
        let mut theta = MlpParams::<S>::he_init(&[d, budget.width, d], budget.seed, 100 + restart as u64)?;
        let cfg = RegressionConfig {
            epochs: budget.epochs,
            batch: budget.batch,
            adam: AdamConfig::with_lr(budget.lr),
            final_lr_fraction: 0.01,
            seed: budget.seed.wrapping_add(restart as u64),
        };
        train_mse(&mut theta, x_train.view(), y_train.view(), &cfg, restart as u64)?;
        let err = sup_error(&theta, &x_probe, &y_probe)?;
        if best.as_ref().is_none_or(|(b, _)| err < *b) {
            best = Some((err, theta));
        }
        if err < eps {
            break;
        }
    }
    let (achieved, theta_eps) = best.expect("at least one restart");
    if !(achieved < eps) {
        return Err(Error::ApproximationFailure {
            achieved,
            target: eps,
        });
    }
    let clamp = clamp_params(d, r1s)?;
    let params = concat_params(&theta_eps, &clamp)?;
    Ok(ClippingNetwork {
        params,
        clamp,
        theta_eps,
        achieved_sup_error: achieved,
    })
}
