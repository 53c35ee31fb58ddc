//! Deep backward dynamic programming for semilinear Kolmogorov equations driven by
//! Q-Wiener noise on a separable Hilbert space, in spectral (truncated) coordinates.
//!
//! The algebra, network and operator layers are generic over [`Scalar`] (`f32` or `f64`);
//! the aliases below fix `f64`, which is what the scheme, the path simulator and the
//! oracles use.
// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adam;
pub mod clipping;
pub mod deeponet;
pub mod error;
pub mod hilbert;
pub mod mlp;
pub mod oracles;
pub mod paths;
pub mod problem;
pub mod regression;
pub mod rng;
pub mod scheme;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type HilbertVec = hilbert::HilbertVec<f64>;
pub type CovarianceSpec = hilbert::CovarianceSpec<f64>;
pub type WhitenedNoiseVec = hilbert::WhitenedNoiseVec<f64>;
pub type MlpParams = mlp::MlpParams<f64>;
pub type DeepOnetSpec = deeponet::DeepOnetSpec<f64>;
pub type ClippingNetwork = clipping::ClippingNetwork<f64>;
