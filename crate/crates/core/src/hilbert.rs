//! Spectral representation of the state space `H` and the noise space `V`.
//!
//! A state is stored by its first `K` coefficients in a fixed orthonormal basis;
//! a noise-space element in the Cameron–Martin space `V_0 = Q^{1/2} V` is stored by
//! its whitened coordinates `zeta_k = <Q^{-1/2} z, f_k>`, which makes `<., .>_0`
//! the Euclidean product.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Name of the orthonormal basis a coefficient vector refers to.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BasisId(Arc<str>);

impl BasisId {
    pub fn new(name: &str) -> Self {
        BasisId(Arc::from(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl Default for BasisId {
    fn default() -> Self {
        BasisId::new("H")
    }
}

impl fmt::Display for BasisId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Truncated coefficient vector of an element of `H`.
#[derive(Clone, Debug, PartialEq)]
pub struct HilbertVec<S> {
    coeffs: Vec<S>,
    basis: BasisId,
}

impl<S: Scalar> HilbertVec<S> {
    pub fn new(coeffs: Vec<S>, basis: BasisId) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::dim("HilbertVec::new", 1, 0));
        }
        Ok(HilbertVec { coeffs, basis })
    }

    /// Coefficients in the default basis `H`.
    pub fn from_coeffs(coeffs: Vec<S>) -> Result<Self> {
        Self::new(coeffs, BasisId::default())
    }

    pub fn zeros(dim: usize, basis: BasisId) -> Result<Self> {
        Self::new(vec![S::zero(); dim], basis)
    }

    /// The `k`-th basis element (1-based, as `e_k`).
    pub fn basis_element(dim: usize, k: usize, basis: BasisId) -> Result<Self> {
        if k == 0 || k > dim {
            return Err(Error::dim("HilbertVec::basis_element", dim, k));
        }
        let mut coeffs = vec![S::zero(); dim];
        coeffs[k - 1] = S::one();
        Self::new(coeffs, basis)
    }

    pub fn dim(&self) -> usize {
        self.coeffs.len()
    }

    pub fn coeffs(&self) -> &[S] {
        &self.coeffs
    }

    pub fn basis(&self) -> &BasisId {
        &self.basis
    }

    pub fn into_coeffs(self) -> Vec<S> {
        self.coeffs
    }

    pub fn norm(&self) -> S {
        norm(&self.coeffs)
    }

    pub fn inner(&self, other: &Self) -> Result<S> {
        if self.dim() != other.dim() {
            return Err(Error::dim("HilbertVec::inner", self.dim(), other.dim()));
        }
        Ok(dot(&self.coeffs, &other.coeffs))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::dim("HilbertVec::sub", self.dim(), other.dim()));
        }
        let coeffs = self
            .coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(HilbertVec {
            coeffs,
            basis: self.basis.clone(),
        })
    }

    /// `P_k x`: keep the first `k` coefficients, zero the rest.
    pub fn project(&self, k: usize) -> Result<Self> {
        project(self, k)
    }
}

/// Strictly positive eigenvalues of the diagonal trace-class covariance `Q`.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceSpec<S> {
    eigenvalues: Vec<S>,
    trace: S,
    tail: TailRule,
}

/// How the eigenvalue sequence continues past the truncation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TailRule {
    /// `Q` has finite rank; the stored modes are all of them.
    FiniteRank,
    /// `lambda_k = scale * k^{-exponent}` for all `k`; summable iff `exponent > 1`.
    Power { exponent: f64 },
}

impl<S: Scalar> CovarianceSpec<S> {
    pub fn new(eigenvalues: Vec<S>, tail: TailRule) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::dim("CovarianceSpec::new", 1, 0));
        }
        if let Some((k, l)) = eigenvalues
            .iter()
            .enumerate()
            .find(|(_, l)| !(l.is_finite() && **l > S::zero()))
        {
            return Err(Error::Config(format!(
                "covariance eigenvalue lambda_{} = {} must be strictly positive; drop zero modes",
                k + 1,
                l
            )));
        }
        if let TailRule::Power { exponent } = tail {
            if !(exponent > 1.0) {
                return Err(Error::Config(format!(
                    "eigenvalue tail k^-{exponent} is not summable; Q must be trace class (exponent > 1)"
                )));
            }
        }
        let trace = eigenvalues.iter().fold(S::zero(), |acc, &l| acc + l);
        Ok(CovarianceSpec {
            eigenvalues,
            trace,
            tail,
        })
    }

    /// `lambda_k = scale * k^{-exponent}`, `k = 1..=n`.
    pub fn power_law(n: usize, scale: f64, exponent: f64) -> Result<Self> {
        let eig = (1..=n)
            .map(|k| S::from_f64_lossy(scale * (k as f64).powf(-exponent)))
            .collect();
        Self::new(eig, TailRule::Power { exponent })
    }

    pub fn eigenvalues(&self) -> &[S] {
        &self.eigenvalues
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Truncated trace `sum lambda_k`.
    pub fn trace(&self) -> S {
        self.trace
    }

    pub fn tail(&self) -> TailRule {
        self.tail
    }

    pub fn max_eigenvalue(&self) -> S {
        self.eigenvalues
            .iter()
            .fold(S::zero(), |acc, &l| if l > acc { l } else { acc })
    }

    pub fn min_eigenvalue(&self) -> S {
        self.eigenvalues
            .iter()
            .fold(S::infinity(), |acc, &l| if l < acc { l } else { acc })
    }

    /// `sqrt(lambda_k)`, the scale taking whitened coordinates back to `V`.
    pub fn sqrt_eigenvalues(&self) -> Vec<S> {
        self.eigenvalues.iter().map(|l| l.sqrt()).collect()
    }
}

/// Whitened coordinates of an element of `V_0`.
#[derive(Clone, Debug, PartialEq)]
pub struct WhitenedNoiseVec<S> {
    zeta: Vec<S>,
}

impl<S: Scalar> WhitenedNoiseVec<S> {
    pub fn new(zeta: Vec<S>) -> Self {
        WhitenedNoiseVec { zeta }
    }

    pub fn zeros(n: usize) -> Self {
        WhitenedNoiseVec {
            zeta: vec![S::zero(); n],
        }
    }

    pub fn zeta(&self) -> &[S] {
        &self.zeta
    }

    pub fn dim(&self) -> usize {
        self.zeta.len()
    }

    /// `||z||_0`.
    pub fn norm_0(&self) -> S {
        norm(&self.zeta)
    }
}

impl<S: Scalar> From<HilbertVec<S>> for WhitenedNoiseVec<S> {
    fn from(v: HilbertVec<S>) -> Self {
        WhitenedNoiseVec::new(v.into_coeffs())
    }
}

pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn norm<S: Scalar>(a: &[S]) -> S {
    dot(a, a).sqrt()
}

pub fn project<S: Scalar>(x: &HilbertVec<S>, k: usize) -> Result<HilbertVec<S>> {
    if k == 0 || k > x.dim() {
        return Err(Error::dim("project", x.dim(), k));
    }
    let mut coeffs = x.coeffs.clone();
    for c in coeffs.iter_mut().skip(k) {
        *c = S::zero();
    }
    Ok(HilbertVec {
        coeffs,
        basis: x.basis.clone(),
    })
}

/// `||x - P_k x||`, the tail energy past mode `k`.
pub fn projection_residual<S: Scalar>(x: &HilbertVec<S>, k: usize) -> Result<S> {
    if k == 0 || k > x.dim() {
        return Err(Error::dim("projection_residual", x.dim(), k));
    }
    Ok(norm(&x.coeffs[k..]))
}

/// Smallest `k` with `max_x ||x - P_k x|| <= eps` over a finite sample of a compact set.
pub fn min_projection_dim<S: Scalar>(points: &[HilbertVec<S>], eps: S) -> Result<usize> {
    let first = points
        .first()
        .ok_or_else(|| Error::Config("min_projection_dim needs at least one point".into()))?;
    if !(eps > S::zero()) {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let dim = first.dim();
    if let Some(p) = points.iter().find(|p| p.dim() != dim) {
        return Err(Error::dim("min_projection_dim", dim, p.dim()));
    }
    for k in 1..=dim {
        let mut worst = S::zero();
        for p in points {
            let r = projection_residual(p, k)?;
            if r > worst {
                worst = r;
            }
        }
        if worst <= eps {
            return Ok(k);
        }
    }
    Err(Error::Invariant(
        "P_K is the identity, yet the residual at k = K exceeds eps".into(),
    ))
}

/// `<a, b>_0` in whitened coordinates.
pub fn inner_0<S: Scalar>(a: &WhitenedNoiseVec<S>, b: &WhitenedNoiseVec<S>) -> Result<S> {
    if a.dim() != b.dim() {
        return Err(Error::dim("inner_0", a.dim(), b.dim()));
    }
    Ok(dot(&a.zeta, &b.zeta))
}

/// `||z||_V = sqrt(sum lambda_k zeta_k^2)`.
pub fn v_norm<S: Scalar>(z: &WhitenedNoiseVec<S>, q: &CovarianceSpec<S>) -> Result<S> {
    v_norm_slice(&z.zeta, q.eigenvalues())
}

pub(crate) fn v_norm_slice<S: Scalar>(zeta: &[S], lambda: &[S]) -> Result<S> {
    if zeta.len() != lambda.len() {
        return Err(Error::dim("v_norm", lambda.len(), zeta.len()));
    }
    Ok(zeta
        .iter()
        .zip(lambda)
        .fold(S::zero(), |acc, (&z, &l)| acc + l * z * z)
        .sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hv(c: &[f64]) -> HilbertVec<f64> {
        HilbertVec::from_coeffs(c.to_vec()).unwrap()
    }

    #[test]
    fn projection_examples() {
        let e1 = hv(&[1.0, 0.0, 0.0]);
        assert_eq!(project(&e1, 1).unwrap(), e1);

        let ones = hv(&[1.0, 1.0, 1.0]);
        let p = project(&ones, 2).unwrap();
        assert_eq!(p.coeffs(), &[1.0, 1.0, 0.0]);
        assert_eq!(ones.sub(&p).unwrap().norm(), 1.0);

        let x = hv(&[3.0, 4.0, 0.0]);
        for k in 2..=3 {
            assert_eq!(project(&x, k).unwrap().norm(), 5.0);
        }
    }

    #[test]
    fn projection_out_of_range() {
        let x = hv(&[1.0, 2.0]);
        assert!(matches!(project(&x, 0), Err(Error::Dimension { .. })));
        assert!(matches!(project(&x, 3), Err(Error::Dimension { .. })));
    }

    #[test]
    fn min_projection_dim_examples() {
        let e1 = HilbertVec::<f64>::basis_element(2, 1, BasisId::default()).unwrap();
        let e2 = HilbertVec::<f64>::basis_element(2, 2, BasisId::default()).unwrap();
        assert_eq!(min_projection_dim(&[e1, e2], 0.01).unwrap(), 2);

        // residual after one mode is sqrt(0.1^2 + 0.01^2) > 0.02, after two it is 0.01
        assert_eq!(min_projection_dim(&[hv(&[1.0, 0.1, 0.01])], 0.02).unwrap(), 2);

        assert_eq!(min_projection_dim(&[hv(&[0.0, 0.0])], 1.0).unwrap(), 1);
    }

    #[test]
    fn min_projection_dim_rejects_bad_input() {
        assert!(min_projection_dim::<f64>(&[], 0.1).is_err());
        assert!(min_projection_dim(&[hv(&[1.0])], 0.0).is_err());
        assert!(min_projection_dim(&[hv(&[1.0]), hv(&[1.0, 2.0])], 0.1).is_err());
    }

    #[test]
    fn inner_0_examples() {
        let a = WhitenedNoiseVec::new(vec![1.0, 0.0]);
        assert_eq!(inner_0(&a, &a).unwrap(), 1.0);
        let a = WhitenedNoiseVec::new(vec![1.0, 2.0]);
        let b = WhitenedNoiseVec::new(vec![3.0, -1.0]);
        assert_eq!(inner_0(&a, &b).unwrap(), 1.0);
        assert_eq!(inner_0(&WhitenedNoiseVec::zeros(2), &b).unwrap(), 0.0);
        assert!(inner_0(&a, &WhitenedNoiseVec::zeros(3)).is_err());
    }

    #[test]
    fn v_norm_examples() {
        let q = CovarianceSpec::new(vec![1.0, 1.0], TailRule::FiniteRank).unwrap();
        assert_eq!(v_norm(&WhitenedNoiseVec::new(vec![3.0, 4.0]), &q).unwrap(), 5.0);
        let q = CovarianceSpec::new(vec![4.0, 1.0], TailRule::FiniteRank).unwrap();
        assert_eq!(v_norm(&WhitenedNoiseVec::new(vec![1.0, 0.0]), &q).unwrap(), 2.0);
        assert_eq!(v_norm(&WhitenedNoiseVec::zeros(2), &q).unwrap(), 0.0);
        assert!(v_norm(&WhitenedNoiseVec::zeros(3), &q).is_err());
    }

    #[test]
    fn covariance_rejects_zero_modes_and_heavy_tails() {
        assert!(CovarianceSpec::new(vec![1.0, 0.0], TailRule::FiniteRank).is_err());
        assert!(CovarianceSpec::new(vec![1.0, -0.5], TailRule::FiniteRank).is_err());
        assert!(CovarianceSpec::<f64>::power_law(4, 1.0, 1.0).is_err());
        let q = CovarianceSpec::<f64>::power_law(3, 1.0, 2.0).unwrap();
        assert_eq!(q.trace(), q.eigenvalues().iter().sum::<f64>());
    }

    #[test]
    fn generic_over_f32() {
        let x = HilbertVec::<f32>::from_coeffs(vec![3.0, 4.0]).unwrap();
        assert_eq!(x.norm(), 5.0f32);
    }

    proptest! {
        #[test]
        fn projection_contracts_and_tail_decreases(c in prop::collection::vec(-10.0f64..10.0, 1..12)) {
            let x = hv(&c);
            let mut last = f64::INFINITY;
            for k in 1..=x.dim() {
                let p = project(&x, k).unwrap();
                prop_assert!(p.norm() <= x.norm() * (1.0 + 1e-15));
                let r = projection_residual(&x, k).unwrap();
                prop_assert!(r <= last);
                last = r;
            }
            prop_assert_eq!(last, 0.0);
        }

        #[test]
        fn min_projection_dim_monotone_in_eps(
            c in prop::collection::vec(-5.0f64..5.0, 2..10),
            e1 in 1e-3f64..5.0,
            e2 in 1e-3f64..5.0,
        ) {
            let pts = vec![hv(&c)];
            let (small, large) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
            prop_assert!(min_projection_dim(&pts, small).unwrap() >= min_projection_dim(&pts, large).unwrap());
        }

        #[test]
        fn inner_0_induces_norm_0_and_bounds_v_norm(z in prop::collection::vec(-5.0f64..5.0, 1..8), seed in 0u64..1000) {
            let n = z.len();
            let lam: Vec<f64> = (0..n).map(|k| 1.0 / ((k as u64 + 1 + seed % 3) as f64).powi(2)).collect();
            let q = CovarianceSpec::new(lam, TailRule::FiniteRank).unwrap();
            let w = WhitenedNoiseVec::new(z);
            let sq = w.zeta().iter().fold(0.0, |acc, v| acc + v * v);
            prop_assert_eq!(inner_0(&w, &w).unwrap(), sq);
            prop_assert_eq!(inner_0(&w, &w).unwrap().sqrt(), w.norm_0());
            prop_assert!(v_norm(&w, &q).unwrap() <= q.max_eigenvalue().sqrt() * w.norm_0() * (1.0 + 1e-12));
        }
    }
}
