//! Feed-forward ReLU networks `f^theta = A_L o relu o ... o relu o A_1`.
//!
//! Parameters are stored per layer as `(W_i, b_i)` with `W_i` of shape
//! `l_i x l_{i-1}`. Two evaluation paths exist: [`MlpParams::forward`] runs one
//! sample with a fixed left-to-right accumulation order (the reference path used
//! for exactness checks), and [`MlpParams::forward_batch`] / [`MlpParams::backward`]
//! run minibatches through ndarray matrix products for training.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::scalar::Scalar;

pub fn relu<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        x
    } else {
        S::zero()
    }
}

/// Subgradient used in backpropagation; the kink at 0 maps to 0.
fn relu_prime<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        S::one()
    } else {
        S::zero()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<S> {
    pub weight: Array2<S>,
    pub bias: Array1<S>,
}

impl<S: Scalar> Layer<S> {
    pub fn new(weight: Array2<S>, bias: Array1<S>) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(Error::dim("Layer::new (bias)", weight.nrows(), bias.len()));
        }
        // standard layout so parameter slices are contiguous
        Ok(Layer {
            weight: weight.as_standard_layout().into_owned(),
            bias,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Parameter set `theta = {W_1, b_1, ..., W_L, b_L}`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<S> {
    layers: Vec<Layer<S>>,
}

impl<S: Scalar> MlpParams<S> {
    pub fn new(layers: Vec<Layer<S>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("a network needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[1].in_dim() != w[0].out_dim() {
                return Err(Error::dim("MlpParams::new (layer chain)", w[0].out_dim(), w[1].in_dim()));
            }
        }
        Ok(MlpParams { layers })
    }

    /// All-zero parameters with layer widths `dims = [l_0, ..., l_L]`.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        check_dims(dims)?;
        Self::new(
            dims.windows(2)
                .map(|w| Layer {
                    weight: Array2::zeros((w[1], w[0])),
                    bias: Array1::zeros(w[1]),
                })
                .collect(),
        )
    }

    /// He initialization: weights `N(0, 2 / fan_in)`, biases zero.
    pub fn he_init(dims: &[usize], seed: u64, stream: u64) -> Result<Self> {
        check_dims(dims)?;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let mut r = rng::stream(seed, Domain::Init, stream, l as u64);
                let scale = (2.0 / w[0] as f64).sqrt();
                let weight = Array2::from_shape_simple_fn((w[1], w[0]), || {
                    let z: f64 = StandardNormal.sample(&mut r);
                    S::from_f64_lossy(scale * z)
                });
                Layer {
                    weight,
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer<S>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<S>] {
        &mut self.layers
    }

    /// Number of affine layers `L`.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// `[l_0, l_1, ..., l_L]`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.out_dim()))
            .collect()
    }

    /// `kappa = sum_i (l_i l_{i-1} + l_i)`.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn param_slices(&self) -> Vec<&[S]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [S]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn to_flat(&self) -> Vec<S> {
        self.param_slices().concat()
    }

    pub fn set_flat(&mut self, flat: &[S]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::dim("MlpParams::set_flat", self.param_count(), flat.len()));
        }
        let mut off = 0;
        for s in self.param_slices_mut() {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        }
        Ok(())
    }

    /// Single-sample evaluation with sequential accumulation `b_j + sum_k W_jk a_k`.
    pub fn forward(&self, x: &[S]) -> Result<Vec<S>> {
        if x.len() != self.input_dim() {
            return Err(Error::dim("mlp_forward", self.input_dim(), x.len()));
        }
        let mut a = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(l.out_dim());
            for (row, &b) in l.weight.outer_iter().zip(l.bias.iter()) {
                let mut acc = b;
                for (&w, &ak) in row.iter().zip(&a) {
                    acc += w * ak;
                }
                z.push(if i < last { relu(acc) } else { acc });
            }
            a = z;
        }
        Ok(a)
    }

    /// Batched evaluation; rows of `x` are samples.
    pub fn forward_batch(&self, x: ArrayView2<S>) -> Result<Array2<S>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::dim("mlp_forward_batch", self.input_dim(), x.ncols()));
        }
        let last = self.layers.len() - 1;
        let mut a = affine(x, &self.layers[0]);
        for l in &self.layers[1..=last] {
            a.mapv_inplace(relu);
            a = affine(a.view(), l);
        }
        Ok(a)
    }

    /// Batched evaluation keeping the pre-activations needed by [`MlpParams::backward`].
    pub fn forward_cached(&self, x: ArrayView2<S>) -> Result<ForwardCache<S>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::dim("mlp_forward_cached", self.input_dim(), x.ncols()));
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut z = affine(x, &self.layers[0]);
        for l in &self.layers[1..] {
            let a = z.mapv(relu);
            pre.push(z);
            z = affine(a.view(), l);
        }
        Ok(ForwardCache {
            input: x.to_owned(),
            hidden_pre: pre,
            output: z,
        })
    }

    /// Reverse-mode parameter gradient of `sum_{b,j} adjoint[b,j] * f(x_b)_j`.
    pub fn backward(&self, cache: &ForwardCache<S>, adjoints: ArrayView2<S>) -> Result<MlpParams<S>> {
        if adjoints.dim() != cache.output.dim() {
            return Err(Error::dim("mlp_backward (adjoints)", cache.output.len(), adjoints.len()));
        }
        let n = self.layers.len();
        let mut grads: Vec<Layer<S>> = Vec::with_capacity(n);
        let mut g = adjoints.to_owned();
        for idx in (0..n).rev() {
            let layer = &self.layers[idx];
            let prev_act = if idx == 0 {
                cache.input.clone()
            } else {
                cache.hidden_pre[idx - 1].mapv(relu)
            };
            let dw = g.t().dot(&prev_act);
            let db = g.sum_axis(Axis(0));
            grads.push(Layer {
                weight: dw,
                bias: db,
            });
            if idx > 0 {
                let mut dprev = g.dot(&layer.weight);
                Zip::from(&mut dprev)
                    .and(&cache.hidden_pre[idx - 1])
                    .for_each(|d, &z| *d *= relu_prime(z));
                g = dprev;
            }
        }
        grads.reverse();
        Ok(MlpParams { layers: grads })
    }

    /// Zero-valued parameters of the same shape.
    pub fn zeros_like(&self) -> Self {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn squared_norm(&self) -> S {
        self.param_slices()
            .iter()
            .flat_map(|s| s.iter())
            .fold(S::zero(), |acc, &v| acc + v * v)
    }

    /// Convert to another scalar type (through f64).
    pub fn cast<T: Scalar>(&self) -> MlpParams<T> {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: l.weight.mapv(|v| T::from_f64_lossy(v.as_f64())),
                    bias: l.bias.mapv(|v| T::from_f64_lossy(v.as_f64())),
                })
                .collect(),
        }
    }

    pub fn to_checkpoint(&self) -> MlpCheckpoint {
        MlpCheckpoint {
            dims: self.dims(),
            weights: self
                .layers
                .iter()
                .map(|l| l.weight.iter().map(|v| v.as_f64()).collect())
                .collect(),
            biases: self
                .layers
                .iter()
                .map(|l| l.bias.iter().map(|v| v.as_f64()).collect())
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &MlpCheckpoint) -> Result<Self> {
        check_dims(&ck.dims)?;
        let n = ck.dims.len() - 1;
        if ck.weights.len() != n || ck.biases.len() != n {
            return Err(Error::Checkpoint(format!(
                "expected {n} weight and bias blocks, found {} and {}",
                ck.weights.len(),
                ck.biases.len()
            )));
        }
        let mut layers = Vec::with_capacity(n);
        for (i, w) in ck.dims.windows(2).enumerate() {
            let weight = Array2::from_shape_vec(
                (w[1], w[0]),
                ck.weights[i].iter().map(|&v| S::from_f64_lossy(v)).collect(),
            )
            .map_err(|e| Error::Checkpoint(format!("layer {}: {e}", i + 1)))?;
            let bias = Array1::from_iter(ck.biases[i].iter().map(|&v| S::from_f64_lossy(v)));
            layers.push(Layer::new(weight, bias)?);
        }
        Self::new(layers)
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::Config(format!(
            "layer widths {dims:?} must list at least input and output, all positive"
        )));
    }
    Ok(())
}

fn affine<S: Scalar>(x: ArrayView2<S>, l: &Layer<S>) -> Array2<S> {
    let mut z = x.dot(&l.weight.t());
    z += &l.bias;
    z
}

/// Activations retained from a batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<S> {
    input: Array2<S>,
    hidden_pre: Vec<Array2<S>>,
    output: Array2<S>,
}

impl<S> ForwardCache<S> {
    pub fn output(&self) -> &Array2<S> {
        &self.output
    }
}

/// Loss value and its parameter gradient.
#[derive(Clone, Debug)]
pub struct GradientRecord<S> {
    pub loss_value: S,
    pub grads: MlpParams<S>,
}

/// On-disk parameter layout: per-layer row-major weights and biases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpCheckpoint {
    pub dims: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

pub fn mlp_forward<S: Scalar>(theta: &MlpParams<S>, x: &[S]) -> Result<Vec<S>> {
    theta.forward(x)
}

/// Parameter gradient for a batch of inputs and output adjoints `dloss/df`.
pub fn mlp_backward<S: Scalar>(
    theta: &MlpParams<S>,
    inputs: ArrayView2<S>,
    adjoints: ArrayView2<S>,
) -> Result<MlpParams<S>> {
    if inputs.nrows() != adjoints.nrows() {
        return Err(Error::dim("mlp_backward (batch)", inputs.nrows(), adjoints.nrows()));
    }
    if adjoints.ncols() != theta.output_dim() {
        return Err(Error::dim("mlp_backward (output)", theta.output_dim(), adjoints.ncols()));
    }
    let cache = theta.forward_cached(inputs)?;
    theta.backward(&cache, adjoints)
}

/// Mean squared error `mean_b ||f(x_b) - y_b||^2` and its gradient.
pub fn mse_gradient<S: Scalar>(
    theta: &MlpParams<S>,
    inputs: ArrayView2<S>,
    targets: ArrayView2<S>,
) -> Result<GradientRecord<S>> {
    let cache = theta.forward_cached(inputs)?;
    if cache.output.dim() != targets.dim() {
        return Err(Error::dim("mse_gradient (targets)", cache.output.len(), targets.len()));
    }
    let batch = S::from_usize(inputs.nrows()).expect("batch size fits");
    let diff = &cache.output - &targets;
    let loss = diff.iter().fold(S::zero(), |acc, &d| acc + d * d) / batch;
    let two = S::one() + S::one();
    let adj = diff.mapv(|d| two * d / batch);
    let grads = theta.backward(&cache, adj.view())?;
    Ok(GradientRecord {
        loss_value: loss,
        grads,
    })
}

/// Parameter concatenation: the network realizing `gamma o theta` with `L + M` layers.
///
/// A ReLU sits between the two parts, so `theta`'s last affine map is doubled into
/// `(y, -y)` and `gamma`'s first map reads `relu(y) - relu(-y) = y`. Rows and columns
/// are interleaved per coordinate so the single-sample accumulation order matches
/// evaluating `gamma` on `theta`'s output term by term; the composition is exact.
pub fn concat_params<S: Scalar>(gamma: &MlpParams<S>, theta: &MlpParams<S>) -> Result<MlpParams<S>> {
    let m = theta.output_dim();
    if gamma.input_dim() != m {
        return Err(Error::dim("concat_params", m, gamma.input_dim()));
    }
    let last = &theta.layers[theta.layers.len() - 1];
    let mut w_last = Array2::zeros((2 * m, last.in_dim()));
    let mut b_last = Array1::zeros(2 * m);
    for j in 0..m {
        w_last.row_mut(2 * j).assign(&last.weight.row(j));
        w_last.row_mut(2 * j + 1).assign(&last.weight.row(j).mapv(|v| -v));
        b_last[2 * j] = last.bias[j];
        b_last[2 * j + 1] = -last.bias[j];
    }
    let first = &gamma.layers[0];
    let mut w_first = Array2::zeros((first.out_dim(), 2 * m));
    for j in 0..m {
        w_first.column_mut(2 * j).assign(&first.weight.column(j));
        w_first.column_mut(2 * j + 1).assign(&first.weight.column(j).mapv(|v| -v));
    }
    let mut layers: Vec<Layer<S>> = theta.layers[..theta.layers.len() - 1].to_vec();
    layers.push(Layer::new(w_last, b_last)?);
    layers.push(Layer::new(w_first, first.bias.clone())?);
    layers.extend(gamma.layers[1..].iter().cloned());
    MlpParams::new(layers)
}

fn frobenius_sq<S: Scalar>(values: impl Iterator<Item = S>) -> S {
    values.fold(S::zero(), |acc, v| acc + v * v)
}

/// Constants of the bound `||f(x)||^2 <= c1 ||x||^2 + c2` for a two-layer network:
/// `c1 = 4 |W2|^2 |W1|^2`, `c2 = 4 |W2|^2 |b1|^2 + 2 |b2|^2` (Frobenius norms).
pub fn growth_constants<S: Scalar>(theta: &MlpParams<S>) -> Result<(S, S)> {
    if theta.depth() != 2 {
        return Err(Error::UnsupportedDepth {
            depth: theta.depth(),
            expected: 2,
        });
    }
    let (l1, l2) = (&theta.layers[0], &theta.layers[1]);
    let w1 = frobenius_sq(l1.weight.iter().copied());
    let b1 = frobenius_sq(l1.bias.iter().copied());
    let w2 = frobenius_sq(l2.weight.iter().copied());
    let b2 = frobenius_sq(l2.bias.iter().copied());
    let four = S::from_f64_lossy(4.0);
    let two = S::from_f64_lossy(2.0);
    Ok((four * w2 * w1, four * w2 * b1 + two * b2))
}

/// Constants of `||f(x)||^p <= c1 ||x||^p + c2` for `p >= 2`, from the quadratic bound
/// and convexity of `s -> s^{p/2}`: `c_i(p) = 2^{p/2 - 1} c_i^{p/2}`.
pub fn growth_constants_p<S: Scalar>(theta: &MlpParams<S>, p: f64) -> Result<(S, S)> {
    if !(p >= 2.0) {
        return Err(Error::Config(format!("growth exponent p = {p} must be >= 2")));
    }
    let (c1, c2) = growth_constants(theta)?;
    let half = S::from_f64_lossy(p / 2.0);
    let k = S::from_f64_lossy(2f64.powf(p / 2.0 - 1.0));
    Ok((k * c1.powf(half), k * c2.powf(half)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn scalar_chain() -> MlpParams<f64> {
        MlpParams::new(vec![
            Layer::new(array![[1.0]], array![-1.0]).unwrap(),
            Layer::new(array![[2.0]], array![0.5]).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu(-1.0), 0.0);
        assert_eq!(relu(3.0), 3.0);
        assert_eq!(relu(0.0), 0.0);
    }

    #[test]
    fn forward_examples() {
        let id = MlpParams::new(vec![Layer::new(Array2::eye(3), Array1::zeros(3)).unwrap()]).unwrap();
        assert_eq!(id.forward(&[-1.0, 2.0, -3.5]).unwrap(), vec![-1.0, 2.0, -3.5]);

        let net = scalar_chain();
        assert_eq!(net.forward(&[3.0]).unwrap(), vec![4.5]);
        assert_eq!(net.forward(&[0.0]).unwrap(), vec![0.5]);
        assert!(net.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn batch_forward_agrees_with_single() {
        let net = MlpParams::<f64>::he_init(&[3, 7, 5, 2], 4, 0).unwrap();
        let x = Array2::from_shape_fn((6, 3), |(i, j)| (i as f64 - 2.5) * 0.3 + j as f64 * 0.1);
        let y = net.forward_batch(x.view()).unwrap();
        for (row, out) in x.outer_iter().zip(y.outer_iter()) {
            let single = net.forward(row.as_slice().unwrap()).unwrap();
            for (a, b) in single.iter().zip(out.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_scalar_chain() {
        let net = scalar_chain();
        let g = mlp_backward(&net, array![[3.0]].view(), array![[1.0]].view()).unwrap();
        assert_eq!(g.layers()[1].weight[[0, 0]], 2.0);
        assert_eq!(g.layers()[1].bias[0], 1.0);
        assert_eq!(g.layers()[0].weight[[0, 0]], 2.0 * 3.0);
    }

    #[test]
    fn backward_constant_network_has_zero_first_layer_grad() {
        let net = MlpParams::<f64>::zeros(&[2, 4, 1]).unwrap();
        let x = array![[1.0, -2.0], [0.5, 0.25]];
        let g = mlp_backward(&net, x.view(), array![[1.0], [-3.0]].view()).unwrap();
        assert!(g.layers()[0].weight.iter().all(|&v| v == 0.0));
        assert!(g.layers()[0].bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn param_count_matches_flat_length() {
        let net = MlpParams::<f32>::he_init(&[4, 6, 3], 0, 0).unwrap();
        assert_eq!(net.param_count(), 6 * 4 + 6 + 3 * 6 + 3);
        assert_eq!(net.to_flat().len(), net.param_count());
    }

    #[test]
    fn chain_mismatch_is_rejected() {
        let l1 = Layer::<f64>::new(Array2::zeros((3, 2)), Array1::zeros(3)).unwrap();
        let l2 = Layer::<f64>::new(Array2::zeros((1, 4)), Array1::zeros(1)).unwrap();
        assert!(MlpParams::new(vec![l1, l2]).is_err());
        assert!(Layer::<f64>::new(Array2::zeros((3, 2)), Array1::zeros(2)).is_err());
    }

    #[test]
    fn concat_layer_counts() {
        let a = MlpParams::<f64>::he_init(&[2, 5, 2], 1, 0).unwrap();
        let b = MlpParams::<f64>::he_init(&[2, 3, 3, 2], 2, 0).unwrap();
        assert_eq!(concat_params(&a, &b).unwrap().depth(), 5);
        let seven = [3, 4, 4, 4, 4, 4, 4, 3];
        let p = MlpParams::<f64>::he_init(&seven, 3, 0).unwrap();
        let q = MlpParams::<f64>::he_init(&seven, 4, 0).unwrap();
        assert_eq!(concat_params(&p, &q).unwrap().depth(), 14);
        assert!(concat_params(&a, &MlpParams::<f64>::zeros(&[2, 3]).unwrap()).is_err());
    }

    #[test]
    fn growth_constant_example() {
        let net = MlpParams::new(vec![
            Layer::new(array![[2.0]], array![0.0]).unwrap(),
            Layer::new(array![[3.0]], array![0.0]).unwrap(),
        ])
        .unwrap();
        assert_eq!(growth_constants(&net).unwrap(), (144.0, 0.0));
        let zero = MlpParams::<f64>::zeros(&[3, 4, 2]).unwrap();
        assert_eq!(growth_constants(&zero).unwrap(), (0.0, 0.0));
        let deep = MlpParams::<f64>::zeros(&[3, 4, 4, 2]).unwrap();
        assert!(matches!(growth_constants(&deep), Err(Error::UnsupportedDepth { depth: 3, .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = MlpParams::<f64>::he_init(&[3, 5, 2], 9, 1).unwrap();
        let ck = net.to_checkpoint();
        let json = serde_json::to_string(&ck).unwrap();
        let back = MlpParams::<f64>::from_checkpoint(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, net);
    }
}
