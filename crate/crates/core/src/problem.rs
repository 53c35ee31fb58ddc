//! Problem data of the semilinear Kolmogorov equation: generator `A`, drift `F`,
//! diffusion `B`, nonlinearity `psi`, terminal condition `phi`, horizon `T` and the
//! noise covariance `Q`, all in truncated spectral coordinates.

use std::fmt;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::hilbert::{norm, v_norm_slice, CovarianceSpec};
use crate::rng::{self, Domain};

/// Diagonal generator `A e_k = a_k e_k`; the semigroup multiplies mode `k` by `exp(a_k t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSpec {
    a: Vec<f64>,
}

impl GeneratorSpec {
    pub fn new(a: Vec<f64>) -> Result<Self> {
        if a.is_empty() {
            return Err(Error::dim("GeneratorSpec::new", 1, 0));
        }
        if let Some((k, v)) = a.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v <= 0.0)) {
            return Err(Error::Config(format!(
                "generator eigenvalue a_{} = {v} must be finite and <= 0 (dissipative)",
                k + 1
            )));
        }
        Ok(GeneratorSpec { a })
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.a
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    /// Diagonal of `S(t)`.
    pub fn semigroup(&self, t: f64) -> Vec<f64> {
        self.a.iter().map(|a| (a * t).exp()).collect()
    }
}

pub trait Drift: Send + Sync {
    /// Write the coefficients of `F(t, x)` into `out`.
    fn apply(&self, t: f64, x: &[f64], out: &mut [f64]);

    fn is_zero(&self) -> bool {
        false
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroDrift;

impl Drift for ZeroDrift {
    fn apply(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
    }

    fn is_zero(&self) -> bool {
        true
    }
}

/// `B(t, x)` through its whitened columns: column `j` holds the `H`-coefficients of
/// `B(t, x)(sqrt(lambda_j) f_j)`, so that `B dW = sum_j column_j dbeta_j`.
pub trait Diffusion: Send + Sync {
    fn columns(&self, t: f64, x: &[f64], out: &mut Array2<f64>);

    /// Declared Lipschitz constant in Hilbert–Schmidt norm.
    fn lipschitz_bound(&self) -> f64;

    /// Declared linear-growth constant: `||B(t, x)||_HS <= growth (1 + ||x||)`.
    fn growth_bound(&self) -> f64;

    /// True when the columns do not depend on `(t, x)`.
    fn is_constant(&self) -> bool {
        false
    }
}

/// `B(t, x) = I`: the noise enters mode `k` with standard deviation `sqrt(lambda_k)`.
#[derive(Clone, Debug)]
pub struct CanonicalInjection {
    sqrt_lambda: Vec<f64>,
}

impl CanonicalInjection {
    pub fn new(q: &CovarianceSpec<f64>) -> Self {
        CanonicalInjection {
            sqrt_lambda: q.sqrt_eigenvalues(),
        }
    }
}

impl Diffusion for CanonicalInjection {
    fn columns(&self, _t: f64, _x: &[f64], out: &mut Array2<f64>) {
        out.fill(0.0);
        let k = out.nrows().min(out.ncols()).min(self.sqrt_lambda.len());
        for j in 0..k {
            out[[j, j]] = self.sqrt_lambda[j];
        }
    }

    fn lipschitz_bound(&self) -> f64 {
        0.0
    }

    fn growth_bound(&self) -> f64 {
        norm(&self.sqrt_lambda)
    }

    fn is_constant(&self) -> bool {
        true
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroDiffusion;

impl Diffusion for ZeroDiffusion {
    fn columns(&self, _t: f64, _x: &[f64], out: &mut Array2<f64>) {
        out.fill(0.0);
    }

    fn lipschitz_bound(&self) -> f64 {
        0.0
    }

    fn growth_bound(&self) -> f64 {
        0.0
    }

    fn is_constant(&self) -> bool {
        true
    }
}

/// The nonlinearity `psi(t, x, y, z)`, with `z` in whitened `V_0` coordinates.
pub trait Nonlinearity: Send + Sync {
    fn value(&self, t: f64, x: &[f64], y: f64, z: &[f64], q: &CovarianceSpec<f64>) -> f64;

    /// Returns `dpsi/dy` and writes `dpsi/dzeta` into `dz`.
    fn partials(&self, t: f64, x: &[f64], y: f64, z: &[f64], q: &CovarianceSpec<f64>, dz: &mut [f64]) -> f64;

    /// False when `psi` ignores `(y, z)`; such problems need no fixed point.
    fn depends_on_solution(&self) -> bool {
        true
    }

    /// False when `psi` ignores `z`.
    fn depends_on_z(&self) -> bool {
        self.depends_on_solution()
    }

    fn is_zero(&self) -> bool {
        false
    }

    fn name(&self) -> String;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroNonlinearity;

impl Nonlinearity for ZeroNonlinearity {
    fn value(&self, _: f64, _: &[f64], _: f64, _: &[f64], _: &CovarianceSpec<f64>) -> f64 {
        0.0
    }

    fn partials(&self, _: f64, _: &[f64], _: f64, _: &[f64], _: &CovarianceSpec<f64>, dz: &mut [f64]) -> f64 {
        dz.iter_mut().for_each(|v| *v = 0.0);
        0.0
    }

    fn depends_on_solution(&self) -> bool {
        false
    }

    fn is_zero(&self) -> bool {
        true
    }

    fn name(&self) -> String {
        "zero".into()
    }
}

/// `psi = kappa`.
#[derive(Clone, Copy, Debug)]
pub struct ConstantNonlinearity(pub f64);

impl Nonlinearity for ConstantNonlinearity {
    fn value(&self, _: f64, _: &[f64], _: f64, _: &[f64], _: &CovarianceSpec<f64>) -> f64 {
        self.0
    }

    fn partials(&self, _: f64, _: &[f64], _: f64, _: &[f64], _: &CovarianceSpec<f64>, dz: &mut [f64]) -> f64 {
        dz.iter_mut().for_each(|v| *v = 0.0);
        0.0
    }

    fn depends_on_solution(&self) -> bool {
        false
    }

    fn name(&self) -> String {
        format!("constant({})", self.0)
    }
}

/// `psi = -r y`: discounting at rate `r >= 0`.
#[derive(Clone, Copy, Debug)]
pub struct Discount {
    pub r: f64,
}

impl Nonlinearity for Discount {
    fn value(&self, _: f64, _: &[f64], y: f64, _: &[f64], _: &CovarianceSpec<f64>) -> f64 {
        -self.r * y
    }

    fn partials(&self, _: f64, _: &[f64], _: f64, _: &[f64], _: &CovarianceSpec<f64>, dz: &mut [f64]) -> f64 {
        dz.iter_mut().for_each(|v| *v = 0.0);
        -self.r
    }

    fn depends_on_solution(&self) -> bool {
        self.r != 0.0
    }

    fn depends_on_z(&self) -> bool {
        false
    }

    fn is_zero(&self) -> bool {
        self.r == 0.0
    }

    fn name(&self) -> String {
        format!("discount(r={})", self.r)
    }
}

/// `psi = tanh(y) + c ||z||_0`.
#[derive(Clone, Copy, Debug)]
pub struct TanhWithGradientNorm {
    pub z_coef: f64,
}

impl TanhWithGradientNorm {
    /// Lipschitz constant with the `z`-distance measured in `||.||_V`.
    pub fn lipschitz(&self, q: &CovarianceSpec<f64>) -> f64 {
        1f64.max(self.z_coef.abs() / q.min_eigenvalue().sqrt())
    }
}

impl Nonlinearity for TanhWithGradientNorm {
    fn value(&self, _: f64, _: &[f64], y: f64, z: &[f64], _: &CovarianceSpec<f64>) -> f64 {
        y.tanh() + self.z_coef * norm(z)
    }

    fn partials(&self, _: f64, _: &[f64], y: f64, z: &[f64], _: &CovarianceSpec<f64>, dz: &mut [f64]) -> f64 {
        let n = norm(z);
        for (d, &zk) in dz.iter_mut().zip(z) {
            *d = if n > 0.0 { self.z_coef * zk / n } else { 0.0 };
        }
        let c = y.cosh();
        1.0 / (c * c)
    }

    fn name(&self) -> String {
        format!("tanh+{}|z|_0", self.z_coef)
    }
}

pub trait Terminal: Send + Sync {
    fn value(&self, x: &[f64]) -> f64;

    fn is_constant(&self) -> bool {
        false
    }
}

/// `phi(x) = ||x||_H^2`.
#[derive(Clone, Copy, Debug, Default)]
pub struct SquaredNorm;

impl Terminal for SquaredNorm {
    fn value(&self, x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConstantTerminal(pub f64);

impl Terminal for ConstantTerminal {
    fn value(&self, _x: &[f64]) -> f64 {
        self.0
    }

    fn is_constant(&self) -> bool {
        true
    }
}

/// `phi(x) = <x, e_k>` (1-based `k`).
#[derive(Clone, Copy, Debug)]
pub struct Coordinate(pub usize);

impl Terminal for Coordinate {
    fn value(&self, x: &[f64]) -> f64 {
        x[self.0 - 1]
    }
}

/// A complete problem instance.
#[derive(Clone)]
pub struct ModelProblem {
    pub generator: GeneratorSpec,
    pub drift: Arc<dyn Drift>,
    pub diffusion: Arc<dyn Diffusion>,
    pub psi: Arc<dyn Nonlinearity>,
    pub phi: Arc<dyn Terminal>,
    pub horizon: f64,
    pub q: CovarianceSpec<f64>,
    pub psi_lipschitz: f64,
}

impl fmt::Debug for ModelProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelProblem")
            .field("generator", &self.generator)
            .field("psi", &self.psi.name())
            .field("horizon", &self.horizon)
            .field("q", &self.q)
            .field("psi_lipschitz", &self.psi_lipschitz)
            .finish_non_exhaustive()
    }
}

impl ModelProblem {
    pub fn new(
        generator: GeneratorSpec,
        drift: Arc<dyn Drift>,
        diffusion: Arc<dyn Diffusion>,
        psi: Arc<dyn Nonlinearity>,
        phi: Arc<dyn Terminal>,
        horizon: f64,
        q: CovarianceSpec<f64>,
        psi_lipschitz: f64,
    ) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Config(format!("horizon T must be positive, got {horizon}")));
        }
        if !(psi_lipschitz >= 0.0 && psi_lipschitz.is_finite()) {
            return Err(Error::Config(format!(
                "declared Lipschitz constant of psi must be finite and >= 0, got {psi_lipschitz}"
            )));
        }
        Ok(ModelProblem {
            generator,
            drift,
            diffusion,
            psi,
            phi,
            horizon,
            q,
            psi_lipschitz,
        })
    }

    /// Linear Ornstein–Uhlenbeck benchmark: `F = 0`, `B = I`, `phi = ||x||^2`, `psi = -r y`.
    pub fn linear_ou(a: Vec<f64>, q: CovarianceSpec<f64>, r: f64, horizon: f64) -> Result<Self> {
        let generator = GeneratorSpec::new(a)?;
        if r < 0.0 {
            return Err(Error::Config(format!("discount rate r must be >= 0, got {r}")));
        }
        let diffusion = Arc::new(CanonicalInjection::new(&q));
        Self::new(
            generator,
            Arc::new(ZeroDrift),
            diffusion,
            Arc::new(Discount { r }),
            Arc::new(SquaredNorm),
            horizon,
            q,
            r,
        )
    }

    /// State truncation `K`.
    pub fn state_dim(&self) -> usize {
        self.generator.dim()
    }

    /// Noise truncation `n`.
    pub fn noise_dim(&self) -> usize {
        self.q.dim()
    }

    /// Spot-check the declared regularity on random probe pairs: the Lipschitz bound of
    /// `psi` (z-distance in `||.||_V`), the diffusion Lipschitz and linear-growth bounds,
    /// and at most quadratic growth of `phi`.
    pub fn validate_probes(&self, seed: u64, probes: usize) -> Result<()> {
        let k = self.state_dim();
        let n = self.noise_dim();
        let lam = self.q.eigenvalues();
        let mut r = rng::stream(seed, Domain::Probe, 0xC0FFEE, 0);
        let vec = |len: usize, scale: f64, r: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            (0..len).map(|_| r.random_range(-scale..scale)).collect()
        };
        let tol = 1e-9;
        for _ in 0..probes {
            let (t1, t2) = (r.random_range(0.0..self.horizon), r.random_range(0.0..self.horizon));
            let x1 = vec(k, 3.0, &mut r);
            let x2 = vec(k, 3.0, &mut r);
            let (y1, y2) = (r.random_range(-5.0..5.0), r.random_range(-5.0..5.0));
            let z1 = vec(n, 3.0, &mut r);
            let z2 = vec(n, 3.0, &mut r);
            let lhs = (self.psi.value(t1, &x1, y1, &z1, &self.q) - self.psi.value(t2, &x2, y2, &z2, &self.q)).abs();
            let dx: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| a - b).collect();
            let dz: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| a - b).collect();
            let rhs = self.psi_lipschitz
                * ((t1 - t2).abs().sqrt() + norm(&dx) + (y1 - y2).abs() + v_norm_slice(&dz, lam)?);
            if lhs > rhs * (1.0 + tol) + tol {
                return Err(Error::Config(format!(
                    "psi violates its declared Lipschitz bound {}: |dpsi| = {lhs} > {rhs}",
                    self.psi_lipschitz
                )));
            }

            let mut b1 = Array2::zeros((k, n));
            let mut b2 = Array2::zeros((k, n));
            self.diffusion.columns(t1, &x1, &mut b1);
            self.diffusion.columns(t1, &x2, &mut b2);
            let hs_diff = (&b1 - &b2).iter().map(|v| v * v).sum::<f64>().sqrt();
            if hs_diff > self.diffusion.lipschitz_bound() * norm(&dx) * (1.0 + tol) + tol {
                return Err(Error::Config(format!(
                    "diffusion violates its Lipschitz bound {}",
                    self.diffusion.lipschitz_bound()
                )));
            }
            let hs = b1.iter().map(|v| v * v).sum::<f64>().sqrt();
            if hs > self.diffusion.growth_bound() * (1.0 + norm(&x1)) * (1.0 + tol) + tol {
                return Err(Error::Config(format!(
                    "diffusion violates its linear-growth bound {}",
                    self.diffusion.growth_bound()
                )));
            }
        }

        // |phi(x)| / (1 + |x|^2) must stay bounded as |x| grows
        let dirs: Vec<Vec<f64>> = (0..probes.clamp(1, 64))
            .map(|_| {
                let v = vec(k, 1.0, &mut r);
                let nv = norm(&v).max(1e-12);
                v.into_iter().map(|c| c / nv).collect()
            })
            .collect();
        let ratio = |radius: f64| -> f64 {
            dirs.iter()
                .map(|d| {
                    let x: Vec<f64> = d.iter().map(|c| c * radius).collect();
                    self.phi.value(&x).abs() / (1.0 + radius * radius)
                })
                .fold(0.0, f64::max)
        };
        let base = ratio(1.0).max(ratio(10.0));
        let far = ratio(1e3);
        if !far.is_finite() || far > 10.0 * base + 1e-9 {
            return Err(Error::Config(format!(
                "terminal condition grows faster than quadratically on probes (ratio {far} vs {base})"
            )));
        }
        Ok(())
    }
}
