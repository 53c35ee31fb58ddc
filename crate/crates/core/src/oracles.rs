//! Ground-truth oracles and the diagnostic quantities of the error analysis.
//!
//! * [`LinearOuOracle`]: closed-form `u` and whitened `Z` for the discounted linear
//!   Ornstein–Uhlenbeck benchmark.
//! * [`mc_solution_oracle`]: Monte Carlo / Picard estimate of `u(t, x)` for any problem.
//! * [`solve_vhat`], [`estimate_zbar_hat`]: the implicit auxiliary scheme
//!   `V_i = E_i[u_{i+1}(X_{i+1})] + psi(t_i, X_i, V_i, Zbar_i) h`,
//!   `Zbar_i = E_i[u_{i+1}(X_{i+1}) dbeta_i] / h`, with `E_i` by nested Monte Carlo.
//! * [`error_functional`], [`capacity_gap`], [`strong_error_report`].

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deeponet::{fit_functional, FitConfig, SpaceDescriptor};
use crate::error::{Error, Result};
use crate::hilbert::{CovarianceSpec, HilbertVec};
use crate::paths::{fine_reference_paths, EulerStepper, TimeGrid};
use crate::problem::ModelProblem;
use crate::regression::RegressionConfig;
use crate::rng::{self, Domain};
use crate::scheme::{scalar_values, Approximators, ClosureFunction, StateFunction, TerminalFunction};

/// Exact solution `Y_t = u(t, X_t)` and whitened `Z_t` as functions of `(t, x)`.
pub trait SolutionOracle: Send + Sync {
    fn y(&self, t: f64, x: &[f64]) -> f64;
    /// Whitened coordinates of `Z` at `(t, x)`, written into `out` (length `n`).
    fn z(&self, t: f64, x: &[f64], out: &mut [f64]);
    fn noise_dim(&self) -> usize;
}

/// Closed form for `F = 0`, `B = I`, diagonal `A`, `psi = -r y`, `phi = ||x||^2`:
///
/// `u(t, x) = e^{-r tau} [ sum_k e^{2 a_k tau} x_k^2 + sum_k lambda_k (1 - e^{2 a_k tau}) / (2 |a_k|) ]`
/// with `tau = T - t`; the second sum runs over the modes driven by noise.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearOuOracle {
    a: Vec<f64>,
    lambda: Vec<f64>,
    r: f64,
    horizon: f64,
}

impl LinearOuOracle {
    pub fn new(a: Vec<f64>, q: &CovarianceSpec<f64>, r: f64, horizon: f64) -> Result<Self> {
        if a.iter().any(|&v| !(v <= 0.0 && v.is_finite())) {
            return Err(Error::Config("generator eigenvalues must be finite and <= 0".into()));
        }
        if !(r >= 0.0 && r.is_finite()) || !(horizon > 0.0) {
            return Err(Error::Config(format!("need r >= 0 and T > 0, got r = {r}, T = {horizon}")));
        }
        Ok(LinearOuOracle {
            a,
            lambda: q.eigenvalues().to_vec(),
            r,
            horizon,
        })
    }

    fn driven(&self) -> usize {
        self.a.len().min(self.lambda.len())
    }

    /// `int_0^tau e^{2 a s} ds`.
    fn noise_weight(a: f64, tau: f64) -> f64 {
        if a == 0.0 {
            tau
        } else {
            (1.0 - (2.0 * a * tau).exp()) / (2.0 * a.abs())
        }
    }

    /// `grad_x u(t, x)`.
    pub fn gradient(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let tau = self.horizon - t;
        let disc = (-self.r * tau).exp();
        self.a
            .iter()
            .zip(x)
            .map(|(&a, &xk)| disc * 2.0 * (2.0 * a * tau).exp() * xk)
            .collect()
    }

    /// Exact value of the scheme's last step,
    /// `E[phi(X_N) | X_{N-1} = x] / (1 + r h) = sum_k e^{2 a_k h} (x_k^2 + lambda_k h) / (1 + r h)`.
    pub fn last_step_value(&self, x: &[f64], h: f64) -> f64 {
        let mut v = 0.0;
        for (k, (&a, &xk)) in self.a.iter().zip(x).enumerate() {
            let noise = if k < self.driven() { self.lambda[k] * h } else { 0.0 };
            v += (2.0 * a * h).exp() * (xk * xk + noise);
        }
        v / (1.0 + self.r * h)
    }

    /// Exact `Zbar` of the last step, `(1/h) E[phi(X_N) dbeta | X_{N-1} = x]`, whose
    /// `k`-th whitened coordinate is `2 e^{2 a_k h} sqrt(lambda_k) x_k`.
    pub fn last_step_zbar(&self, x: &[f64], h: f64, out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = if k < self.driven() {
                2.0 * (2.0 * self.a[k] * h).exp() * self.lambda[k].sqrt() * x[k]
            } else {
                0.0
            };
        }
    }
}

impl SolutionOracle for LinearOuOracle {
    fn y(&self, t: f64, x: &[f64]) -> f64 {
        let tau = self.horizon - t;
        let mut v = 0.0;
        for (k, (&a, &xk)) in self.a.iter().zip(x).enumerate() {
            v += (2.0 * a * tau).exp() * xk * xk;
            if k < self.driven() {
                v += self.lambda[k] * Self::noise_weight(a, tau);
            }
        }
        (-self.r * tau).exp() * v
    }

    fn z(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let g = self.gradient(t, x);
        for (k, o) in out.iter_mut().enumerate() {
            *o = if k < self.driven() { self.lambda[k].sqrt() * g[k] } else { 0.0 };
        }
    }

    fn noise_dim(&self) -> usize {
        self.lambda.len()
    }
}

/// Mean and standard error of a sample.
pub fn mean_se(v: ArrayView1<f64>) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.sum() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McConfig {
    /// Fine time steps on `[t, T]`.
    pub steps: usize,
    pub paths: usize,
    /// Maximum Picard iterations (ignored when `psi` does not read the solution).
    pub picard: usize,
    /// Stop once successive Picard values differ by less than this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            steps: 100,
            paths: 10_000,
            picard: 40,
            tol: 1e-10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub value: f64,
    pub se: f64,
    /// Picard iterations performed.
    pub iterations: usize,
    /// `|u^{j+1} - u^j|` per Picard iteration.
    pub picard_gaps: Vec<f64>,
}

/// Least-squares projection onto `[1, x_k, x_k^2]_k` at one time level.
struct Projector {
    basis: DMatrix<f64>,
    chol: nalgebra::linalg::Cholesky<f64, nalgebra::Dyn>,
}

impl Projector {
    fn new(states: ArrayView2<f64>) -> Result<Self> {
        let (m, k) = states.dim();
        let p = 2 * k + 1;
        let mut basis = DMatrix::zeros(m, p);
        for (r, row) in states.outer_iter().enumerate() {
            basis[(r, 0)] = 1.0;
            for j in 0..k {
                basis[(r, 1 + j)] = row[j];
                basis[(r, 1 + k + j)] = row[j] * row[j];
            }
        }
        let mut gram = basis.transpose() * &basis;
        let ridge = 1e-12 * gram.trace().max(1.0);
        for j in 0..p {
            gram[(j, j)] += ridge;
        }
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::Invariant("regression Gram matrix is not positive definite".into()))?;
        Ok(Projector { basis, chol })
    }

    fn fit(&self, target: &[f64]) -> Vec<f64> {
        let y = DVector::from_column_slice(target);
        let beta = self.chol.solve(&(self.basis.transpose() * y));
        (&self.basis * beta).iter().copied().collect()
    }
}

/// Monte Carlo estimate of `u(t, x) = E[phi(X_T) + int_t^T psi(s, X_s, Y_s, Z_s) ds]`.
///
/// For `psi` reading `(y, z)` this runs Picard iterations on simulated fine-grid paths,
/// with `Y`, `Z` along each path read from a least-squares regression of the previous
/// iterate on `[1, x_k, x_k^2]`.
pub fn mc_solution_oracle(problem: &ModelProblem, t: f64, x: &[f64], cfg: &McConfig) -> Result<McEstimate> {
    let k = problem.state_dim();
    let n = problem.noise_dim();
    if x.len() != k {
        return Err(Error::dim("mc_solution_oracle (x)", k, x.len()));
    }
    if cfg.steps == 0 || cfg.paths < 2 || cfg.picard == 0 {
        return Err(Error::Config("oracle needs >= 1 step, >= 2 paths and >= 1 Picard iteration".into()));
    }
    let tau = problem.horizon - t;
    if tau < 0.0 {
        return Err(Error::Config(format!("t = {t} lies beyond the horizon {}", problem.horizon)));
    }
    if tau == 0.0 {
        return Ok(McEstimate {
            value: problem.phi.value(x),
            se: 0.0,
            iterations: 0,
            picard_gaps: Vec::new(),
        });
    }
    let h = tau / cfg.steps as f64;
    let time = |l: usize| t + l as f64 * h;
    let sqrt_h = h.sqrt();
    let psi = &problem.psi;

    if !psi.depends_on_solution() {
        let zeros = vec![0.0; n];
        let stepper = EulerStepper::new(problem, h);
        let values: Vec<Option<f64>> = (0..cfg.paths)
            .into_par_iter()
            .map(|p| {
                let mut st = stepper.clone();
                let mut cur = x.to_vec();
                let mut next = vec![0.0; k];
                let mut db = vec![0.0; n];
                let mut acc = 0.0;
                for l in 0..cfg.steps {
                    if !psi.is_zero() {
                        acc += h * psi.value(time(l), &cur, 0.0, &zeros, &problem.q);
                    }
                    rng::fill_standard_normal(&mut db, cfg.seed, Domain::Increments, p as u64, l as u64);
                    db.iter_mut().for_each(|v| *v *= sqrt_h);
                    if !st.step(time(l), &cur, &db, &mut next) {
                        return None;
                    }
                    std::mem::swap(&mut cur, &mut next);
                }
                Some(problem.phi.value(&cur) + acc)
            })
            .collect();
        let values: Array1<f64> = values
            .into_iter()
            .enumerate()
            .map(|(p, v)| v.ok_or(Error::PathBlowUp { path: p, step: 0 }))
            .collect::<Result<_>>()?;
        let (value, se) = mean_se(values.view());
        return Ok(McEstimate {
            value,
            se,
            iterations: 1,
            picard_gaps: Vec::new(),
        });
    }

    // full paths are needed for the regressions
    let m = cfg.paths;
    let l_steps = cfg.steps;
    let mut states = Array3::zeros((m, l_steps + 1, k));
    let mut incs = Array3::zeros((m, l_steps, n));
    let stepper = EulerStepper::new(problem, h);
    let ok: Vec<bool> = states
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(incs.axis_iter_mut(Axis(0)).into_par_iter())
        .enumerate()
        .map(|(p, (mut traj, mut inc))| {
            let mut st = stepper.clone();
            let mut cur = x.to_vec();
            let mut next = vec![0.0; k];
            traj.row_mut(0).assign(&ArrayView1::from(&cur[..]));
            for l in 0..l_steps {
                let mut row = inc.row_mut(l);
                let db = row.as_slice_mut().expect("contiguous");
                rng::fill_standard_normal(db, cfg.seed, Domain::Increments, p as u64, l as u64);
                db.iter_mut().for_each(|v| *v *= sqrt_h);
                if !st.step(time(l), &cur, db, &mut next) {
                    return false;
                }
                std::mem::swap(&mut cur, &mut next);
                traj.row_mut(l + 1).assign(&ArrayView1::from(&cur[..]));
            }
            true
        })
        .collect();
    if let Some(p) = ok.iter().position(|&b| !b) {
        return Err(Error::PathBlowUp { path: p, step: 0 });
    }
    let projectors: Vec<Option<Projector>> = (0..l_steps)
        .into_par_iter()
        .map(|l| if l == 0 { Ok(None) } else { Projector::new(states.index_axis(Axis(1), l)).map(Some) })
        .collect::<Result<_>>()?;
    let terminal: Vec<f64> = (0..m)
        .map(|p| problem.phi.value(states.slice(s![p, l_steps, ..]).as_slice().expect("contiguous")))
        .collect();

    let regress = |l: usize, target: &[f64]| -> Vec<f64> {
        match &projectors[l] {
            Some(pr) => pr.fit(target),
            None => vec![target.iter().sum::<f64>() / target.len() as f64; target.len()],
        }
    };
    let needs_z = psi.depends_on_z();

    // pathwise G_l = phi(X_L) + sum_{l' >= l} psi_{l'} h for given (Y, Z)
    let cumulate = |y: &Array2<f64>, z: &Array3<f64>| -> Array2<f64> {
        let mut g = Array2::zeros((m, l_steps + 1));
        g.axis_iter_mut(Axis(0)).into_par_iter().enumerate().for_each(|(p, mut gp)| {
            gp[l_steps] = terminal[p];
            for l in (0..l_steps).rev() {
                let xs = states.slice(s![p, l, ..]);
                let zs = z.slice(s![p, l, ..]);
                let v = psi.value(
                    time(l),
                    xs.as_slice().expect("contiguous"),
                    y[[p, l]],
                    zs.as_slice().expect("contiguous"),
                    &problem.q,
                );
                gp[l] = gp[l + 1] + h * v;
            }
        });
        g
    };
    let project_solution = |g: &Array2<f64>| -> (Array2<f64>, Array3<f64>) {
        let mut y = Array2::zeros((m, l_steps));
        let mut z = Array3::zeros((m, l_steps, n));
        let cols: Vec<(Vec<f64>, Vec<Vec<f64>>)> = (0..l_steps)
            .into_par_iter()
            .map(|l| {
                let gl: Vec<f64> = g.column(l).to_vec();
                let yl = regress(l, &gl);
                let zl = if needs_z {
                    (0..n)
                        .map(|j| {
                            let tgt: Vec<f64> = (0..m).map(|p| g[[p, l + 1]] * incs[[p, l, j]] / h).collect();
                            regress(l, &tgt)
                        })
                        .collect()
                } else {
                    Vec::new()
                };
                (yl, zl)
            })
            .collect();
        for (l, (yl, zl)) in cols.into_iter().enumerate() {
            y.column_mut(l).assign(&Array1::from(yl));
            for (j, zj) in zl.into_iter().enumerate() {
                z.slice_mut(s![.., l, j]).assign(&Array1::from(zj));
            }
        }
        (y, z)
    };

    // start from the psi-free solution
    let mut g0 = Array2::zeros((m, l_steps + 1));
    for (mut row, &v) in g0.outer_iter_mut().zip(&terminal) {
        row.fill(v);
    }
    let (mut y, mut z) = project_solution(&g0);
    let mut gaps = Vec::new();
    let mut prev_value: Option<f64> = None;
    let mut last = (0.0, 0.0);
    let mut iterations = 0;
    for j in 0..cfg.picard {
        let g = cumulate(&y, &z);
        let (value, se) = mean_se(g.column(0));
        last = (value, se);
        iterations = j + 1;
        if let Some(pv) = prev_value {
            let gap = (value - pv).abs();
            if let Some(&pg) = gaps.last() {
                if gap > pg && gap > 1e-12 * value.abs().max(1.0) && j >= 2 {
                    return Err(Error::PicardDivergence {
                        iteration: j,
                        previous: pg,
                        current: gap,
                    });
                }
            }
            gaps.push(gap);
            if gap < cfg.tol {
                break;
            }
        }
        prev_value = Some(value);
        let (yn, zn) = project_solution(&g);
        y = yn;
        z = zn;
    }
    Ok(McEstimate {
        value: last.0,
        se: last.1,
        iterations,
        picard_gaps: gaps,
    })
}

/// Nested Monte Carlo estimates at frozen states `X_i = x_p`.
#[derive(Clone, Debug, PartialEq)]
pub struct InnerEstimate {
    /// `E_i[u_{i+1}(X_{i+1})]` per probe.
    pub mean: Array1<f64>,
    pub mean_se: Array1<f64>,
    /// `E_i[u_{i+1}(X_{i+1}) dbeta_i] / h` per probe (whitened coordinates), estimated
    /// with the inner mean as control variate.
    pub zbar: Array2<f64>,
    pub zbar_se: Array2<f64>,
}

/// Resample `inner` increments from every probe state at step `i` and average
/// `u_{i+1}(X_{i+1})` and `u_{i+1}(X_{i+1}) dbeta / h`.
pub fn inner_expectations(
    problem: &ModelProblem,
    grid: &TimeGrid,
    i: usize,
    u_next: &dyn StateFunction,
    probes: ArrayView2<f64>,
    inner: usize,
    seed: u64,
) -> Result<InnerEstimate> {
    let (k, n) = (problem.state_dim(), problem.noise_dim());
    if probes.ncols() != k {
        return Err(Error::dim("inner_expectations (probes)", k, probes.ncols()));
    }
    if i >= grid.steps() || inner < 2 {
        return Err(Error::Config(format!(
            "nested Monte Carlo needs step < N and >= 2 inner samples (step {i}, inner {inner})"
        )));
    }
    let (h, t) = (grid.h(), grid.t(i));
    let stepper = EulerStepper::new(problem, h);
    let sqrt_h = h.sqrt();
    let rows: Vec<Result<(f64, f64, Vec<f64>, Vec<f64>)>> = probes
        .outer_iter()
        .into_par_iter()
        .enumerate()
        .map(|(p, x)| {
            let mut st = stepper.clone();
            let x = x.to_vec();
            let mut next = Array2::zeros((inner, k));
            let mut dbs = Array2::zeros((inner, n));
            for r in 0..inner {
                let mut db = dbs.row_mut(r);
                let db = db.as_slice_mut().expect("contiguous");
                rng::fill_standard_normal(db, seed, Domain::Inner, p as u64, (i * inner + r) as u64);
                db.iter_mut().for_each(|v| *v *= sqrt_h);
                let mut out = next.row_mut(r);
                if !st.step(t, &x, db, out.as_slice_mut().expect("contiguous")) {
                    return Err(Error::PathBlowUp { path: p, step: i + 1 });
                }
            }
            let g = scalar_values(u_next, next.view())?;
            let (mean, se) = mean_se(g.view());
            // centred products: (R / (R - 1)) mean((g - gbar) dbeta) / h is unbiased for
            // E[g dbeta] / h and vanishes exactly when g does not vary
            let g0 = g[0];
            let centre = g0 + g.iter().map(|v| v - g0).sum::<f64>() / inner as f64;
            let bessel = inner as f64 / (inner - 1) as f64;
            let mut zb = Vec::with_capacity(n);
            let mut zse = Vec::with_capacity(n);
            for j in 0..n {
                let prod: Array1<f64> = g
                    .iter()
                    .zip(dbs.column(j))
                    .map(|(a, b)| bessel * (a - centre) * b / h)
                    .collect();
                let (mz, sz) = mean_se(prod.view());
                zb.push(mz);
                zse.push(sz);
            }
            Ok((mean, se, zb, zse))
        })
        .collect();
    let np = probes.nrows();
    let mut est = InnerEstimate {
        mean: Array1::zeros(np),
        mean_se: Array1::zeros(np),
        zbar: Array2::zeros((np, n)),
        zbar_se: Array2::zeros((np, n)),
    };
    for (p, row) in rows.into_iter().enumerate() {
        let (m, se, zb, zse) = row?;
        est.mean[p] = m;
        est.mean_se[p] = se;
        est.zbar.row_mut(p).assign(&Array1::from(zb));
        est.zbar_se.row_mut(p).assign(&Array1::from(zse));
    }
    Ok(est)
}

/// `Zbar_i` at the probe states: returns `(estimate, standard errors)`.
pub fn estimate_zbar_hat(
    problem: &ModelProblem,
    grid: &TimeGrid,
    i: usize,
    u_next: &dyn StateFunction,
    probes: ArrayView2<f64>,
    inner: usize,
    seed: u64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let est = inner_expectations(problem, grid, i, u_next, probes, inner, seed)?;
    Ok((est.zbar, est.zbar_se))
}

/// Picard tolerance and iteration cap of [`solve_vhat`].
pub const VHAT_TOL: f64 = 1e-10;
pub const VHAT_MAX_ITER: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct VhatSolution {
    pub values: Array1<f64>,
    pub inner: InnerEstimate,
    /// Picard updates that moved the value by more than the tolerance, per probe.
    pub iterations: Vec<usize>,
    /// `|v^{j+1} - v^j|` per Picard update, per probe.
    pub residuals: Vec<Vec<f64>>,
}

/// Solve `V = mean + psi(t_i, x, V, Zbar) h` per probe by Picard iteration.
pub fn solve_vhat_from(
    problem: &ModelProblem,
    grid: &TimeGrid,
    i: usize,
    probes: ArrayView2<f64>,
    inner: InnerEstimate,
) -> Result<VhatSolution> {
    grid.check_contraction(problem.psi_lipschitz)?;
    let (h, t) = (grid.h(), grid.t(i));
    let np = probes.nrows();
    let mut values = inner.mean.clone();
    let mut iterations = vec![0; np];
    let mut residuals = vec![Vec::new(); np];
    if !problem.psi.is_zero() {
        for p in 0..np {
            let x = probes.row(p).to_vec();
            let z = inner.zbar.row(p).to_vec();
            let mut v = inner.mean[p];
            for _ in 0..VHAT_MAX_ITER {
                let next = inner.mean[p] + h * problem.psi.value(t, &x, v, &z, &problem.q);
                let res = (next - v).abs();
                residuals[p].push(res);
                v = next;
                if !res.is_finite() {
                    return Err(Error::NonFiniteResidual { path: p, step: i });
                }
                if res <= VHAT_TOL {
                    break;
                }
                iterations[p] += 1;
            }
            values[p] = v;
        }
    }
    Ok(VhatSolution {
        values,
        inner,
        iterations,
        residuals,
    })
}

/// `V_i` at the probe states, with `E_i` and `Zbar_i` from nested Monte Carlo.
#[allow(clippy::too_many_arguments)]
pub fn solve_vhat(
    problem: &ModelProblem,
    grid: &TimeGrid,
    i: usize,
    u_next: &dyn StateFunction,
    probes: ArrayView2<f64>,
    inner: usize,
    seed: u64,
) -> Result<VhatSolution> {
    grid.check_contraction(problem.psi_lipschitz)?;
    let est = inner_expectations(problem, grid, i, u_next, probes, inner, seed)?;
    solve_vhat_from(problem, grid, i, probes, est)
}

/// Per-step terms `e_i(M, L) = E int_{t_i}^{t_{i+1}} ||M_s - L_i||^2 ds` with a
/// left-point rule on the fine grid. `fine` is `(paths, >= N_f, dim)`, `coarse` is
/// `(paths, >= N, dim)`.
pub fn error_functional_terms(
    fine: ArrayView3<f64>,
    coarse: ArrayView3<f64>,
    fine_grid: &TimeGrid,
    coarse_grid: &TimeGrid,
) -> Result<Vec<f64>> {
    let factor = fine_grid.refinement_of(coarse_grid)?;
    let (pf, lf, df) = fine.dim();
    let (pc, lc, dc) = coarse.dim();
    if pf != pc || df != dc {
        return Err(Error::dim("error_functional (paths x dim)", pf * df, pc * dc));
    }
    if lf < fine_grid.steps() || lc < coarse_grid.steps() {
        return Err(Error::dim("error_functional (time levels)", fine_grid.steps(), lf));
    }
    let hf = fine_grid.h();
    let terms = (0..coarse_grid.steps())
        .map(|i| {
            let mut acc = 0.0;
            for p in 0..pf {
                let l_i = coarse.slice(s![p, i, ..]);
                for l in i * factor..(i + 1) * factor {
                    let m_l = fine.slice(s![p, l, ..]);
                    acc += hf * m_l.iter().zip(l_i.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                }
            }
            acc / pf as f64
        })
        .collect();
    Ok(terms)
}

/// `e(M, L) = sum_i e_i(M, L)`.
pub fn error_functional(
    fine: ArrayView3<f64>,
    coarse: ArrayView3<f64>,
    fine_grid: &TimeGrid,
    coarse_grid: &TimeGrid,
) -> Result<f64> {
    Ok(error_functional_terms(fine, coarse, fine_grid, coarse_grid)?.iter().sum())
}

/// Network family searched by [`capacity_gap`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CapacityConfig {
    pub widths: Vec<usize>,
    pub depth: usize,
    pub restarts: usize,
    pub training: RegressionConfig,
}

impl Default for CapacityConfig {
    fn default() -> Self {
        CapacityConfig {
            widths: vec![16, 64, 256],
            depth: 2,
            restarts: 3,
            training: RegressionConfig {
                epochs: 300,
                batch: 128,
                adam: crate::adam::AdamConfig::with_lr(3e-3),
                final_lr_fraction: 0.01,
                seed: 0,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WidthEstimate {
    pub width: usize,
    /// Best held-out mean squared error over restarts.
    pub best: f64,
    pub restarts: Vec<f64>,
}

/// Upper estimates of the best-in-class error, per width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapacityEstimate {
    pub per_width: Vec<WidthEstimate>,
    /// Smallest estimate over all widths.
    pub best: f64,
}

/// Held-out error of the best of `restarts` trained networks, for every width.
pub fn capacity_curve(states: ArrayView2<f64>, targets: ArrayView2<f64>, cfg: &CapacityConfig) -> Result<CapacityEstimate> {
    let k = states.ncols();
    let m = targets.ncols();
    let input = SpaceDescriptor::new(crate::scheme::STATE_BASIS, k);
    let output = SpaceDescriptor::euclidean(m);
    let mut per_width = Vec::with_capacity(cfg.widths.len());
    for &width in &cfg.widths {
        let fit = FitConfig {
            widths: vec![width],
            depth: cfg.depth,
            restarts: cfg.restarts,
            tol: f64::MIN_POSITIVE,
            training: cfg.training,
        };
        let out = fit_functional(states, targets, &input, &output, k, m, &fit)?;
        let est = match out.restart_errors.iter().find(|(w, _)| *w == width) {
            Some((_, errs)) => WidthEstimate {
                width,
                best: errs.iter().copied().fold(f64::INFINITY, f64::min),
                restarts: errs.clone(),
            },
            // the zero network already fits exactly
            None => WidthEstimate {
                width,
                best: out.error,
                restarts: vec![out.error],
            },
        };
        per_width.push(est);
    }
    let best = per_width.iter().map(|w| w.best).fold(f64::INFINITY, f64::min);
    Ok(CapacityEstimate { per_width, best })
}

/// Estimates of `(eps_v_i, eps_z_i)` for targets sampled on the states of step `i`.
pub fn capacity_gap(
    states: ArrayView2<f64>,
    v_targets: ArrayView1<f64>,
    z_targets: ArrayView2<f64>,
    cfg: &CapacityConfig,
) -> Result<(CapacityEstimate, CapacityEstimate)> {
    let v = v_targets.to_owned().insert_axis(Axis(1));
    let ev = capacity_curve(states, v.view(), cfg)?;
    let ez = capacity_curve(states, z_targets, cfg)?;
    Ok((ev, ez))
}

/// The exact solution wrapped as approximators, `u_i = u(t_i, .)`, `z_i = Z(t_i, .)`.
pub struct OracleApproximators {
    u: Vec<Box<dyn StateFunction>>,
    z: Vec<Box<dyn StateFunction>>,
}

impl OracleApproximators {
    pub fn new(oracle: Arc<dyn SolutionOracle>, grid: &TimeGrid, problem: &ModelProblem) -> Self {
        let n = oracle.noise_dim();
        let mut u: Vec<Box<dyn StateFunction>> = Vec::with_capacity(grid.steps() + 1);
        let mut z: Vec<Box<dyn StateFunction>> = Vec::with_capacity(grid.steps());
        for i in 0..grid.steps() {
            let t = grid.t(i);
            let (ou, oz) = (oracle.clone(), oracle.clone());
            u.push(Box::new(ClosureFunction::new(1, move |x: &[f64], out: &mut [f64]| out[0] = ou.y(t, x))));
            z.push(Box::new(ClosureFunction::new(n, move |x: &[f64], out: &mut [f64]| oz.z(t, x, out))));
        }
        u.push(Box::new(TerminalFunction(problem.phi.clone())));
        OracleApproximators { u, z }
    }
}

impl Approximators for OracleApproximators {
    fn steps(&self) -> usize {
        self.z.len()
    }

    fn u(&self, i: usize) -> &dyn StateFunction {
        self.u[i].as_ref()
    }

    fn z(&self, i: usize) -> &dyn StateFunction {
        self.z[i].as_ref()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    /// Fine steps per coarse step for the reference process.
    pub fine_factor: usize,
    pub paths: usize,
    /// Outer paths used as probe states for `V`, `Zbar` and `e_Z`.
    pub probes: usize,
    /// Inner samples per probe for nested Monte Carlo.
    pub inner: usize,
    pub seed: u64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            fine_factor: 8,
            paths: 2048,
            probes: 64,
            inner: 1024,
            seed: 0,
        }
    }
}

/// Measurable ingredients of the strong error bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub steps: usize,
    pub h: f64,
    /// True when no solution oracle was available: only right-hand-side terms are filled.
    pub rhs_only: bool,
    /// `max_i E|Y_{t_i} - u_i(X_i)|^2`.
    pub lhs_y: Option<f64>,
    pub lhs_y_se: Option<f64>,
    /// `sum_i E int_{t_i}^{t_{i+1}} ||Z_s - z_i(X_i)||_0^2 ds`.
    pub lhs_z: Option<f64>,
    pub lhs_z_se: Option<f64>,
    /// Sum of the two left-hand terms.
    pub lhs_total: Option<f64>,
    pub lhs_total_se: Option<f64>,
    /// `E|phi(X_T) - phi(X_T^pi)|^2`.
    pub term_terminal: f64,
    /// Achieved `E|V_i - u_i(X_i)|^2` on probes, per step.
    pub eps_v: Vec<f64>,
    /// Achieved `E||Zbar_i - z_i(X_i)||_0^2` on probes, per step.
    pub eps_z: Vec<f64>,
    /// `N * sum_i eps_v_i`.
    pub n_eps_v: f64,
    /// `sum_i eps_z_i`.
    pub eps_z_sum: f64,
    pub e_x: f64,
    pub e_y: Option<f64>,
    pub e_z: Option<f64>,
    /// `V_i` at the probe states, per step.
    pub vhat_table: Vec<Vec<f64>>,
    /// `Zbar_i` at the probe states, per step and probe.
    pub zbar_table: Vec<Vec<Vec<f64>>>,
}

/// Header of the per-`h` sweep CSV.
pub const SWEEP_CSV_HEADER: &str = "h,lhs_Y,lhs_Z,term_terminal,N_eps_v,eps_z,e_X,e_Y,e_Z";

/// Decimal with 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

impl DiagnosticReport {
    /// One sweep CSV row; missing oracle terms are left empty.
    pub fn sweep_csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(fmt17).unwrap_or_default();
        [
            fmt17(self.h),
            opt(self.lhs_y),
            opt(self.lhs_z),
            fmt17(self.term_terminal),
            fmt17(self.n_eps_v),
            fmt17(self.eps_z_sum),
            fmt17(self.e_x),
            opt(self.e_y),
            opt(self.e_z),
        ]
        .join(",")
    }

    fn check(&self) -> Result<()> {
        let mut all = vec![self.term_terminal, self.n_eps_v, self.eps_z_sum, self.e_x];
        all.extend(self.eps_v.iter().chain(&self.eps_z));
        all.extend([self.lhs_y, self.lhs_z, self.e_y, self.e_z].into_iter().flatten());
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Invariant("diagnostic entries must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Estimate the left side of the strong error bound (when an oracle is available) and
/// every measurable right-side ingredient, on reference paths driven by the same noise
/// as the scheme's paths.
pub fn strong_error_report(
    approx: &dyn Approximators,
    problem: &ModelProblem,
    oracle: Option<&dyn SolutionOracle>,
    grid: &TimeGrid,
    x0: &HilbertVec<f64>,
    cfg: &ReportConfig,
) -> Result<DiagnosticReport> {
    if approx.steps() != grid.steps() {
        return Err(Error::dim("strong_error_report (steps)", grid.steps(), approx.steps()));
    }
    if cfg.fine_factor == 0 || cfg.paths < 2 || cfg.probes == 0 || cfg.inner < 2 {
        return Err(Error::Config("report needs fine_factor >= 1, >= 2 paths, >= 1 probe, >= 2 inner samples".into()));
    }
    grid.check_contraction(problem.psi_lipschitz)?;
    let n_steps = grid.steps();
    let n = problem.noise_dim();
    let fine_grid = TimeGrid::new(grid.horizon(), n_steps * cfg.fine_factor)?;
    let (fine, coarse) = fine_reference_paths(problem, &fine_grid, grid, x0, cfg.paths, cfg.seed)?;
    let m = cfg.paths;
    let f = cfg.fine_factor;
    let probes = cfg.probes.min(m);

    let phi = TerminalFunction(problem.phi.clone());
    let phi_f = scalar_values(&phi, fine.states_at(fine_grid.steps()))?;
    let phi_c = scalar_values(&phi, coarse.states_at(n_steps))?;
    let term_terminal = phi_f.iter().zip(&phi_c).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / m as f64;
    let e_x = error_functional(fine.states().view(), coarse.states().view(), &fine_grid, grid)?;

    // approximator values on the scheme's paths
    let mut u_hat = Array2::zeros((m, n_steps));
    let mut z_hat = Array3::zeros((m, n_steps, n));
    for i in 0..n_steps {
        u_hat.column_mut(i).assign(&scalar_values(approx.u(i), coarse.states_at(i))?);
        let z = approx.z(i).eval_states(coarse.states_at(i))?;
        let w = z.ncols().min(n);
        z_hat.slice_mut(s![.., i, ..w]).assign(&z.slice(s![.., ..w]));
    }

    let mut eps_v = Vec::with_capacity(n_steps);
    let mut eps_z = Vec::with_capacity(n_steps);
    let mut vhat_table = Vec::with_capacity(n_steps);
    let mut zbar_table = Vec::with_capacity(n_steps);
    for i in 0..n_steps {
        let pr = coarse.states_at(i).slice(s![..probes, ..]).to_owned();
        let sol = solve_vhat(problem, grid, i, approx.u(i + 1), pr.view(), cfg.inner, cfg.seed.wrapping_add(i as u64))?;
        let ev = (0..probes).map(|p| (sol.values[p] - u_hat[[p, i]]).powi(2)).sum::<f64>() / probes as f64;
        let ez = (0..probes)
            .map(|p| (0..n).map(|j| (sol.inner.zbar[[p, j]] - z_hat[[p, i, j]]).powi(2)).sum::<f64>())
            .sum::<f64>()
            / probes as f64;
        eps_v.push(ev);
        eps_z.push(ez);
        vhat_table.push(sol.values.to_vec());
        zbar_table.push(sol.inner.zbar.outer_iter().map(|r| r.to_vec()).collect());
    }
    let n_eps_v = n_steps as f64 * eps_v.iter().sum::<f64>();
    let eps_z_sum = eps_z.iter().sum::<f64>();

    let mut report = DiagnosticReport {
        steps: n_steps,
        h: grid.h(),
        rhs_only: oracle.is_none(),
        lhs_y: None,
        lhs_y_se: None,
        lhs_z: None,
        lhs_z_se: None,
        lhs_total: None,
        lhs_total_se: None,
        term_terminal,
        eps_v,
        eps_z,
        n_eps_v,
        eps_z_sum,
        e_x,
        e_y: None,
        e_z: None,
        vhat_table,
        zbar_table,
    };
    let Some(oracle) = oracle else {
        report.check()?;
        return Ok(report);
    };

    let nf = fine_grid.steps();
    let hf = fine_grid.h();
    let mut y_f = Array3::zeros((m, nf + 1, 1));
    let mut z_f = Array3::zeros((m, nf, n));
    y_f.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(z_f.axis_iter_mut(Axis(0)).into_par_iter())
        .enumerate()
        .for_each(|(p, (mut yp, mut zp))| {
            for l in 0..=nf {
                let x = fine.states().slice(s![p, l, ..]).to_vec();
                yp[[l, 0]] = oracle.y(fine_grid.t(l), &x);
                if l < nf {
                    let mut row = zp.row_mut(l);
                    oracle.z(fine_grid.t(l), &x, row.as_slice_mut().expect("contiguous"));
                }
            }
        });

    // Y term: max over i of E|Y_{t_i} - u_i(X_i)|^2
    let mut y_terms = Vec::with_capacity(n_steps);
    for i in 0..n_steps {
        let d: Array1<f64> = (0..m).map(|p| (y_f[[p, i * f, 0]] - u_hat[[p, i]]).powi(2)).collect();
        y_terms.push(mean_se(d.view()));
    }
    let (lhs_y, lhs_y_se) = y_terms.iter().copied().fold((f64::NEG_INFINITY, 0.0), |a, b| if b.0 > a.0 { b } else { a });

    // Z term: per-path sums of the left-point quadrature
    let z_path: Array1<f64> = (0..m)
        .map(|p| {
            let mut acc = 0.0;
            for i in 0..n_steps {
                for l in i * f..(i + 1) * f {
                    acc += hf * (0..n).map(|j| (z_f[[p, l, j]] - z_hat[[p, i, j]]).powi(2)).sum::<f64>();
                }
            }
            acc
        })
        .collect();
    let (lhs_z, lhs_z_se) = mean_se(z_path.view());

    // e_Y: Y on the fine grid against Y frozen at the coarse times
    let y_frozen = Array3::from_shape_fn((m, n_steps, 1), |(p, i, _)| y_f[[p, i * f, 0]]);
    let e_y = error_functional(y_f.view(), y_frozen.view(), &fine_grid, grid)?;

    // e_Z: Z on the fine grid against Zbar_{t_i} = E_i[(1/h) int Z ds] by nested simulation
    let stepper = EulerStepper::new(problem, hf);
    let k = problem.state_dim();
    let inner = cfg.inner;
    let e_z_terms: Vec<f64> = (0..probes)
        .into_par_iter()
        .map(|p| {
            let mut st = stepper.clone();
            let mut acc = 0.0;
            let mut zbuf = vec![0.0; n];
            let mut db = vec![0.0; n];
            let mut next = vec![0.0; k];
            for i in 0..n_steps {
                let start = fine.states().slice(s![p, i * f, ..]).to_vec();
                let mut zbar = vec![0.0; n];
                for r in 0..inner {
                    let mut cur = start.clone();
                    for l in 0..f {
                        let t = fine_grid.t(i * f + l);
                        oracle.z(t, &cur, &mut zbuf);
                        for (zb, zv) in zbar.iter_mut().zip(&zbuf) {
                            *zb += zv * hf;
                        }
                        if l + 1 < f {
                            rng::fill_standard_normal(
                                &mut db,
                                cfg.seed,
                                Domain::Inner,
                                (p * n_steps + i) as u64 | (1 << 62),
                                (r * f + l) as u64,
                            );
                            db.iter_mut().for_each(|v| *v *= hf.sqrt());
                            st.step(t, &cur, &db, &mut next);
                            std::mem::swap(&mut cur, &mut next);
                        }
                    }
                }
                zbar.iter_mut().for_each(|v| *v /= grid.h() * inner as f64);
                for l in i * f..(i + 1) * f {
                    acc += hf * (0..n).map(|j| (z_f[[p, l, j]] - zbar[j]).powi(2)).sum::<f64>();
                }
            }
            acc
        })
        .collect();
    let e_z = e_z_terms.iter().sum::<f64>() / probes as f64;

    report.lhs_y = Some(lhs_y);
    report.lhs_y_se = Some(lhs_y_se);
    report.lhs_z = Some(lhs_z);
    report.lhs_z_se = Some(lhs_z_se);
    report.lhs_total = Some(lhs_y + lhs_z);
    report.lhs_total_se = Some((lhs_y_se.powi(2) + lhs_z_se.powi(2)).sqrt());
    report.e_y = Some(e_y);
    report.e_z = Some(e_z);
    report.check()?;
    Ok(report)
}
