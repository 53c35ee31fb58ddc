//! Hilbert-valued DeepONets `F = decode_{W,m} o f^theta o encode_{H,d}`.
//!
//! The encoder reads the first `d` coefficients of the input in its basis; the decoder
//! places `m` network outputs on the first `m` basis elements of the output space.
//! Both maps are fixed and linear, so all learning happens in `theta`.

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::{BasisId, HilbertVec};
use crate::mlp::{MlpCheckpoint, MlpParams};
use crate::regression::{mse, train_mse, RegressionConfig};
use crate::rng;
use crate::scalar::Scalar;

/// A truncated space: basis name and number of retained modes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceDescriptor {
    pub basis: String,
    pub dim: usize,
}

impl SpaceDescriptor {
    pub fn new(basis: &str, dim: usize) -> Self {
        SpaceDescriptor {
            basis: basis.to_string(),
            dim,
        }
    }

    /// `R^dim` with its canonical basis.
    pub fn euclidean(dim: usize) -> Self {
        SpaceDescriptor::new(&format!("R{dim}"), dim)
    }

    pub fn basis_id(&self) -> BasisId {
        BasisId::new(&self.basis)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeepOnetSpec<S> {
    d: usize,
    m: usize,
    theta: MlpParams<S>,
    input_space: SpaceDescriptor,
    output_space: SpaceDescriptor,
}

impl<S: Scalar> DeepOnetSpec<S> {
    pub fn new(theta: MlpParams<S>, input_space: SpaceDescriptor, output_space: SpaceDescriptor) -> Result<Self> {
        let d = theta.input_dim();
        let m = theta.output_dim();
        if d > input_space.dim {
            return Err(Error::dim("DeepOnetSpec (encoder d <= K)", input_space.dim, d));
        }
        if m > output_space.dim {
            return Err(Error::dim("DeepOnetSpec (decoder m <= output dim)", output_space.dim, m));
        }
        Ok(DeepOnetSpec {
            d,
            m,
            theta,
            input_space,
            output_space,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn theta(&self) -> &MlpParams<S> {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut MlpParams<S> {
        &mut self.theta
    }

    pub fn input_space(&self) -> &SpaceDescriptor {
        &self.input_space
    }

    pub fn output_space(&self) -> &SpaceDescriptor {
        &self.output_space
    }

    pub fn eval(&self, x: &HilbertVec<S>) -> Result<HilbertVec<S>> {
        deeponet_eval(self, x)
    }

    /// Batched evaluation; rows of `states` carry the input-space coefficients.
    pub fn eval_batch(&self, states: ArrayView2<S>) -> Result<Array2<S>> {
        if states.ncols() != self.input_space.dim {
            return Err(Error::dim("DeepOnetSpec::eval_batch", self.input_space.dim, states.ncols()));
        }
        let a = self.theta.forward_batch(states.slice(s![.., ..self.d]))?;
        if self.m == self.output_space.dim {
            return Ok(a);
        }
        let mut out = Array2::zeros((states.nrows(), self.output_space.dim));
        out.slice_mut(s![.., ..self.m]).assign(&a);
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> DeepOnetCheckpoint {
        DeepOnetCheckpoint {
            d: self.d,
            m: self.m,
            input_space: self.input_space.clone(),
            output_space: self.output_space.clone(),
            net: self.theta.to_checkpoint(),
        }
    }

    pub fn from_checkpoint(ck: &DeepOnetCheckpoint) -> Result<Self> {
        let theta = MlpParams::from_checkpoint(&ck.net)?;
        let spec = Self::new(theta, ck.input_space.clone(), ck.output_space.clone())?;
        if spec.d != ck.d || spec.m != ck.m {
            return Err(Error::Checkpoint(format!(
                "header (d, m) = ({}, {}) disagrees with network dims ({}, {})",
                ck.d, ck.m, spec.d, spec.m
            )));
        }
        Ok(spec)
    }
}

/// Network checkpoint plus the encoder/decoder header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeepOnetCheckpoint {
    pub d: usize,
    pub m: usize,
    pub input_space: SpaceDescriptor,
    pub output_space: SpaceDescriptor,
    #[serde(flatten)]
    pub net: MlpCheckpoint,
}

/// `E_{H,d}(x) = (<x, e_i>)_{i <= d}`.
pub fn encode<S: Scalar>(x: &HilbertVec<S>, d: usize) -> Result<Vec<S>> {
    if d == 0 || d > x.dim() {
        return Err(Error::dim("encode (d <= K)", x.dim(), d));
    }
    Ok(x.coeffs()[..d].to_vec())
}

/// `D_{W,m}(a) = sum_{i <= m} a_i g_i`.
pub fn decode<S: Scalar>(a: &[S], space: &SpaceDescriptor) -> Result<HilbertVec<S>> {
    if a.len() > space.dim {
        return Err(Error::dim("decode (m <= output dim)", space.dim, a.len()));
    }
    let mut coeffs = vec![S::zero(); space.dim];
    coeffs[..a.len()].copy_from_slice(a);
    HilbertVec::new(coeffs, space.basis_id())
}

pub fn deeponet_eval<S: Scalar>(spec: &DeepOnetSpec<S>, x: &HilbertVec<S>) -> Result<HilbertVec<S>> {
    if x.dim() != spec.input_space.dim {
        return Err(Error::dim("deeponet_eval", spec.input_space.dim, x.dim()));
    }
    let a = spec.theta.forward(&encode(x, spec.d)?)?;
    decode(&a, &spec.output_space)
}

/// Parameter gradient of `sum_b <adjoint_b, F(x_b)>_W`. Adjoint components past `m`
/// lie outside the decoder range and contribute nothing.
pub fn deeponet_param_grads<S: Scalar>(
    spec: &DeepOnetSpec<S>,
    states: ArrayView2<S>,
    adjoints: ArrayView2<S>,
) -> Result<MlpParams<S>> {
    if states.ncols() != spec.input_space.dim {
        return Err(Error::dim("deeponet_param_grads (inputs)", spec.input_space.dim, states.ncols()));
    }
    if adjoints.ncols() != spec.output_space.dim {
        return Err(Error::dim("deeponet_param_grads (adjoints)", spec.output_space.dim, adjoints.ncols()));
    }
    if states.nrows() != adjoints.nrows() {
        return Err(Error::dim("deeponet_param_grads (batch)", states.nrows(), adjoints.nrows()));
    }
    let cache = spec.theta.forward_cached(states.slice(s![.., ..spec.d]))?;
    spec.theta.backward(&cache, adjoints.slice(s![.., ..spec.m]))
}

/// Architecture search over trunk widths for [`fit_functional`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub widths: Vec<usize>,
    /// Number of affine layers in the trunk.
    pub depth: usize,
    pub restarts: usize,
    pub tol: f64,
    pub training: RegressionConfig,
}

#[derive(Clone, Debug)]
pub struct FitOutcome<S> {
    /// Network with the lowest held-out error seen.
    pub spec: DeepOnetSpec<S>,
    pub error: f64,
    /// `(width, best held-out error over restarts)`; width 0 is the all-zero network.
    pub curve: Vec<(usize, f64)>,
    /// Every restart's held-out error, per width.
    pub restart_errors: Vec<(usize, Vec<f64>)>,
    pub converged: bool,
}

/// Hidden widths `[d, w, ..., w, m]` for a trunk with `depth` affine layers.
pub fn trunk_dims(d: usize, width: usize, depth: usize, m: usize) -> Vec<usize> {
    let mut dims = vec![d];
    dims.extend(std::iter::repeat_n(width, depth.saturating_sub(1)));
    dims.push(m);
    dims
}

/// Deterministic 80/20 split of row indices.
pub fn holdout_split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let perm = rng::permutation(n, seed, u64::MAX, 0);
    let n_train = (((n as f64) * 0.8).round() as usize).min(n.saturating_sub(1)).max(1.min(n));
    let (a, b) = perm.split_at(n_train);
    (a.to_vec(), b.to_vec())
}

/// Fit a DeepONet to sampled pairs `(x, G(x))`, growing the trunk width until the
/// held-out mean squared `W`-error drops to `tol`. Exhausting the schedule is not an
/// error: the outcome reports `converged = false` with the achieved curve.
pub fn fit_functional<S: Scalar>(
    inputs: ArrayView2<S>,
    outputs: ArrayView2<S>,
    input_space: &SpaceDescriptor,
    output_space: &SpaceDescriptor,
    d: usize,
    m: usize,
    cfg: &FitConfig,
) -> Result<FitOutcome<S>> {
    if inputs.nrows() != outputs.nrows() {
        return Err(Error::dim("fit_functional (pairs)", inputs.nrows(), outputs.nrows()));
    }
    if inputs.ncols() != input_space.dim || outputs.ncols() != output_space.dim {
        return Err(Error::dim("fit_functional (spaces)", input_space.dim, inputs.ncols()));
    }
    if inputs.nrows() < 2 {
        return Err(Error::Config("fit_functional needs at least two samples".into()));
    }
    if !(cfg.tol > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {}", cfg.tol)));
    }
    if cfg.depth == 0 {
        return Err(Error::Config("trunk depth must be at least 1".into()));
    }
    let (train_idx, val_idx) = holdout_split(inputs.nrows(), cfg.training.seed);
    let x_tr = inputs.select(ndarray::Axis(0), &train_idx);
    let x_va = inputs.select(ndarray::Axis(0), &val_idx);
    let y_tr = outputs.select(ndarray::Axis(0), &train_idx);
    let y_va = outputs.select(ndarray::Axis(0), &val_idx);
    let y_tr_m = y_tr.slice(s![.., ..m]).to_owned();

    let held_out = |spec: &DeepOnetSpec<S>| -> Result<f64> {
        let pred = spec.eval_batch(x_va.view())?;
        let n = x_va.nrows() as f64;
        Ok(pred
            .iter()
            .zip(y_va.iter())
            .map(|(&a, &b)| (a - b).as_f64().powi(2))
            .sum::<f64>()
            / n)
    };

    let first_width = cfg.widths.first().copied().unwrap_or(1).max(1);
    let zero = DeepOnetSpec::new(
        MlpParams::zeros(&trunk_dims(d, first_width, cfg.depth, m))?,
        input_space.clone(),
        output_space.clone(),
    )?;
    let zero_err = held_out(&zero)?;
    let mut curve = vec![(0, zero_err)];
    let mut restart_errors = vec![(0, vec![zero_err])];
    let mut best = (zero_err, zero);
    if zero_err <= cfg.tol {
        return Ok(FitOutcome {
            spec: best.1,
            error: best.0,
            curve,
            restart_errors,
            converged: true,
        });
    }

    for (wi, &width) in cfg.widths.iter().enumerate() {
        let mut errs = Vec::with_capacity(cfg.restarts.max(1));
        let mut width_best = f64::INFINITY;
        for r in 0..cfg.restarts.max(1) {
            let stream = (wi * 1000 + r) as u64;
            let mut theta = MlpParams::he_init(&trunk_dims(d, width, cfg.depth, m), cfg.training.seed, stream)?;
            let mut tcfg = cfg.training;
            tcfg.seed = cfg.training.seed.wrapping_add(stream);
            train_mse(&mut theta, x_tr.slice(s![.., ..d]), y_tr_m.view(), &tcfg, stream)?;
            let spec = DeepOnetSpec::new(theta, input_space.clone(), output_space.clone())?;
            let err = held_out(&spec)?;
            errs.push(err);
            width_best = width_best.min(err);
            if err < best.0 {
                best = (err, spec);
            }
        }
        curve.push((width, width_best));
        restart_errors.push((width, errs));
        if width_best <= cfg.tol {
            return Ok(FitOutcome {
                spec: best.1,
                error: best.0,
                curve,
                restart_errors,
                converged: true,
            });
        }
    }
    Ok(FitOutcome {
        spec: best.1,
        error: best.0,
        curve,
        restart_errors,
        converged: false,
    })
}

/// Training-set mean squared error of the trunk alone (diagnostics helper).
pub fn trunk_mse<S: Scalar>(spec: &DeepOnetSpec<S>, inputs: ArrayView2<S>, targets: ArrayView2<S>) -> Result<f64> {
    mse(&spec.theta, inputs.slice(s![.., ..spec.d]), targets.slice(s![.., ..spec.m]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::Layer;
    use ndarray::{array, Array1};

    fn hv(c: &[f64]) -> HilbertVec<f64> {
        HilbertVec::from_coeffs(c.to_vec()).unwrap()
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode(&hv(&[1.0, 2.0, 3.0]), 2).unwrap(), vec![1.0, 2.0]);
        assert_eq!(encode(&hv(&[0.0, 0.0, 1.0]), 2).unwrap(), vec![0.0, 0.0]);
        assert!(encode(&hv(&[1.0]), 2).is_err());
    }

    #[test]
    fn decode_examples() {
        let w = SpaceDescriptor::new("W", 3);
        assert_eq!(decode(&[1.0, 0.0], &w).unwrap().coeffs(), &[1.0, 0.0, 0.0]);
        assert!(decode(&[1.0; 4], &w).is_err());
        let x = hv(&[0.3, -1.2, 2.0]);
        let back = decode(&encode(&x, 3).unwrap(), &SpaceDescriptor::new("H", 3)).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn zero_theta_gives_constant_decoded_bias() {
        let mut theta = MlpParams::<f64>::zeros(&[2, 4, 2]).unwrap();
        theta.layers_mut()[1].bias = array![0.5, -1.0];
        let spec = DeepOnetSpec::new(theta, SpaceDescriptor::new("H", 3), SpaceDescriptor::new("W", 4)).unwrap();
        for x in [hv(&[1.0, 2.0, 3.0]), hv(&[-5.0, 0.0, 0.1])] {
            assert_eq!(spec.eval(&x).unwrap().coeffs(), &[0.5, -1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn truncation_invariance() {
        let theta = MlpParams::<f64>::he_init(&[2, 8, 3], 5, 0).unwrap();
        let spec = DeepOnetSpec::new(theta, SpaceDescriptor::new("H", 4), SpaceDescriptor::new("W", 3)).unwrap();
        let a = spec.eval(&hv(&[0.1, 0.2, 9.0, -3.0])).unwrap();
        let b = spec.eval(&hv(&[0.1, 0.2, -1.0, 7.0])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spec_dimension_checks() {
        let theta = MlpParams::<f64>::zeros(&[5, 2]).unwrap();
        assert!(DeepOnetSpec::new(theta.clone(), SpaceDescriptor::new("H", 4), SpaceDescriptor::new("W", 2)).is_err());
        assert!(DeepOnetSpec::new(theta, SpaceDescriptor::new("H", 5), SpaceDescriptor::new("W", 1)).is_err());
    }

    #[test]
    fn adjoint_beyond_decoder_range_has_no_gradient() {
        let theta = MlpParams::<f64>::he_init(&[2, 6, 2], 1, 0).unwrap();
        let spec = DeepOnetSpec::new(theta, SpaceDescriptor::new("H", 3), SpaceDescriptor::new("W", 4)).unwrap();
        let x = array![[0.5, -0.3, 1.0], [0.2, 0.9, -0.4]];
        let adj = array![[0.0, 0.0, 1.0, -2.0], [0.0, 0.0, 3.0, 0.5]];
        let g = deeponet_param_grads(&spec, x.view(), adj.view()).unwrap();
        assert_eq!(g.squared_norm(), 0.0);
    }

    #[test]
    fn checkpoint_round_trip_keeps_header() {
        let theta = MlpParams::<f64>::he_init(&[2, 3, 1], 2, 0).unwrap();
        let spec = DeepOnetSpec::new(theta, SpaceDescriptor::new("H", 4), SpaceDescriptor::euclidean(1)).unwrap();
        let json = serde_json::to_value(spec.to_checkpoint()).unwrap();
        for key in ["d", "m", "input_space", "output_space", "dims", "weights", "biases"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        let back = DeepOnetSpec::<f64>::from_checkpoint(&serde_json::from_value(json).unwrap()).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn fit_zero_functional_returns_zero_network() {
        let x = Array2::from_shape_fn((50, 3), |(i, j)| (i * 3 + j) as f64 * 0.01);
        let y = Array2::<f64>::zeros((50, 2));
        let cfg = FitConfig {
            widths: vec![4],
            depth: 2,
            restarts: 1,
            tol: 1e-12,
            training: RegressionConfig::default(),
        };
        let out = fit_functional(x.view(), y.view(), &SpaceDescriptor::new("H", 3), &SpaceDescriptor::new("W", 2), 3, 2, &cfg).unwrap();
        assert!(out.converged);
        assert_eq!(out.error, 0.0);
        assert_eq!(out.spec.theta().squared_norm(), 0.0);
    }

    #[test]
    fn identity_layer_passes_through() {
        let theta = MlpParams::new(vec![Layer::new(Array2::<f64>::eye(2), Array1::zeros(2)).unwrap()]).unwrap();
        let spec = DeepOnetSpec::new(theta, SpaceDescriptor::new("H", 2), SpaceDescriptor::new("W", 2)).unwrap();
        assert_eq!(spec.eval(&hv(&[-1.5, 2.5])).unwrap().coeffs(), &[-1.5, 2.5]);
    }
}
