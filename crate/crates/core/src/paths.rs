//! Truncated Q-Wiener increments and exponential-Euler paths of the forward equation.
//!
//! Increments are stored in whitened coordinates: `dbeta[p, i, j] ~ N(0, h)` i.i.d.,
//! and the `V`-increment is `dW_i = sum_j sqrt(lambda_j) dbeta[p, i, j] f_j`.

use std::io::Write;

use ndarray::{s, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hilbert::HilbertVec;
use crate::problem::ModelProblem;
use crate::rng::{self, Domain};

/// Uniform partition `t_i = i T / N`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
    h: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("time grid needs N >= 1 steps".into()));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Config(format!(
                "time grid needs a positive horizon (h = T/N > 0), got T = {horizon}"
            )));
        }
        Ok(TimeGrid {
            horizon,
            steps,
            h: horizon / steps as f64,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// `t_i = i T / N`.
    pub fn t(&self, i: usize) -> f64 {
        i as f64 * self.horizon / self.steps as f64
    }

    /// `h < 1` and `h * Lip(psi) < 1`, required before any backward step.
    pub fn check_contraction(&self, lipschitz: f64) -> Result<()> {
        let product = self.h * lipschitz;
        if !(self.h < 1.0) || !(product < 1.0) {
            return Err(Error::Contraction {
                h: self.h,
                lipschitz,
                product,
            });
        }
        Ok(())
    }

    /// Refinement factor of `self` over `coarse`.
    pub fn refinement_of(&self, coarse: &TimeGrid) -> Result<usize> {
        if self.horizon != coarse.horizon || !self.steps.is_multiple_of(coarse.steps) {
            return Err(Error::Config(format!(
                "fine grid (T = {}, N = {}) does not refine coarse grid (T = {}, N = {})",
                self.horizon, self.steps, coarse.horizon, coarse.steps
            )));
        }
        Ok(self.steps / coarse.steps)
    }
}

/// Forward paths and the whitened increments that drove them.
#[derive(Clone, Debug, PartialEq)]
pub struct PathBundle {
    grid: TimeGrid,
    seed: u64,
    /// `(path, time index, mode)`, time index `0..=N`.
    states: Array3<f64>,
    /// `(path, step, noise mode)`, step `0..N`.
    increments: Array3<f64>,
}

impl PathBundle {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn paths(&self) -> usize {
        self.states.len_of(Axis(0))
    }

    pub fn states(&self) -> &Array3<f64> {
        &self.states
    }

    pub fn increments(&self) -> &Array3<f64> {
        &self.increments
    }

    /// `X^pi_{t_i}` for every path, as rows.
    pub fn states_at(&self, i: usize) -> ArrayView2<'_, f64> {
        self.states.index_axis(Axis(1), i)
    }

    /// `dbeta_i` for every path, as rows.
    pub fn increments_at(&self, i: usize) -> ArrayView2<'_, f64> {
        self.increments.index_axis(Axis(1), i)
    }

    pub fn state(&self, path: usize, i: usize) -> HilbertVec<f64> {
        HilbertVec::from_coeffs(self.states.slice(s![path, i, ..]).to_vec()).expect("K >= 1")
    }

    /// CSV rows `(path, step, mode, value)` of the states.
    pub fn write_states_csv<W: Write>(&self, w: W) -> Result<()> {
        write_cube_csv(self.states.view(), w)
    }

    /// CSV rows `(path, step, mode, value)` of the whitened increments.
    pub fn write_increments_csv<W: Write>(&self, w: W) -> Result<()> {
        write_cube_csv(self.increments.view(), w)
    }
}

fn write_cube_csv<W: Write>(cube: ArrayView3<f64>, w: W) -> Result<()> {
    let mut w = std::io::BufWriter::new(w);
    writeln!(w, "path,step,mode,value")?;
    for ((p, i, k), v) in cube.indexed_iter() {
        writeln!(w, "{p},{i},{k},{v:.16e}")?;
    }
    w.flush()?;
    Ok(())
}

/// I.i.d. `N(0, h)` whitened increments, shape `(paths, N, n)`, keyed by `(seed, path, step)`.
pub fn sample_increments(grid: &TimeGrid, n: usize, paths: usize, seed: u64) -> Result<Array3<f64>> {
    if paths == 0 || n == 0 {
        return Err(Error::Config(format!(
            "need at least one path and one noise mode (paths = {paths}, n = {n})"
        )));
    }
    let sqrt_h = grid.h().sqrt();
    let mut out = Array3::zeros((paths, grid.steps(), n));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(p, mut block)| {
            for (i, mut row) in block.axis_iter_mut(Axis(0)).enumerate() {
                let row = row.as_slice_mut().expect("contiguous");
                rng::fill_standard_normal(row, seed, Domain::Increments, p as u64, i as u64);
                row.iter_mut().for_each(|v| *v *= sqrt_h);
            }
        });
    Ok(out)
}

/// Sum fine increments over each block of `factor` steps.
pub fn aggregate_increments(fine: ArrayView3<f64>, factor: usize) -> Result<Array3<f64>> {
    let (m, nf, n) = fine.dim();
    if factor == 0 || nf % factor != 0 {
        return Err(Error::Config(format!(
            "cannot aggregate {nf} fine steps in blocks of {factor}"
        )));
    }
    let mut out = Array3::zeros((m, nf / factor, n));
    for p in 0..m {
        for i in 0..nf / factor {
            for l in 0..factor {
                let src = fine.slice(s![p, i * factor + l, ..]);
                let mut dst = out.slice_mut(s![p, i, ..]);
                dst += &src;
            }
        }
    }
    Ok(out)
}

/// One exponential-Euler step `x' = S(h) [x + h F(t, x) + B(t, x) dW]`, with the
/// semigroup and any constant diffusion matrix precomputed.
#[derive(Clone)]
pub struct EulerStepper<'a> {
    problem: &'a ModelProblem,
    h: f64,
    decay: Vec<f64>,
    constant_b: bool,
    zero_drift: bool,
    b: Array2<f64>,
    f: Vec<f64>,
}

impl<'a> EulerStepper<'a> {
    pub fn new(problem: &'a ModelProblem, h: f64) -> Self {
        let k = problem.state_dim();
        let n = problem.noise_dim();
        let constant_b = problem.diffusion.is_constant();
        let mut b = Array2::zeros((k, n));
        if constant_b {
            problem.diffusion.columns(0.0, &vec![0.0; k], &mut b);
        }
        EulerStepper {
            problem,
            h,
            decay: problem.generator.semigroup(h),
            constant_b,
            zero_drift: problem.drift.is_zero(),
            b,
            f: vec![0.0; k],
        }
    }

    /// Advance `x` from time `t` with whitened increment `dbeta`; returns false if the
    /// new state is not finite.
    pub fn step(&mut self, t: f64, x: &[f64], dbeta: &[f64], out: &mut [f64]) -> bool {
        if !self.constant_b {
            self.problem.diffusion.columns(t, x, &mut self.b);
        }
        if !self.zero_drift {
            self.problem.drift.apply(t, x, &mut self.f);
        }
        let mut finite = true;
        for (m, o) in out.iter_mut().enumerate() {
            let mut v = x[m];
            if !self.zero_drift {
                v += self.h * self.f[m];
            }
            let row = self.b.row(m);
            let mut noise = 0.0;
            for (&bm, &d) in row.iter().zip(dbeta) {
                noise += bm * d;
            }
            v = self.decay[m] * (v + noise);
            finite &= v.is_finite();
            *o = v;
        }
        finite
    }
}

/// Run the forward scheme from `x0` on given whitened increments.
pub fn euler_forward(
    problem: &ModelProblem,
    grid: &TimeGrid,
    increments: Array3<f64>,
    x0: &HilbertVec<f64>,
    seed: u64,
) -> Result<PathBundle> {
    let k = problem.state_dim();
    let n = problem.noise_dim();
    if x0.dim() != k {
        return Err(Error::dim("euler_forward (x0)", k, x0.dim()));
    }
    let (paths, steps, nn) = increments.dim();
    if steps != grid.steps() || nn != n {
        return Err(Error::dim("euler_forward (increments)", grid.steps() * n, steps * nn));
    }
    let stepper = EulerStepper::new(problem, grid.h());
    let mut states = Array3::zeros((paths, steps + 1, k));
    let blowups: Vec<Option<usize>> = states
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(increments.axis_iter(Axis(0)).into_par_iter())
        .map(|(mut traj, incs)| {
            let mut stepper = stepper.clone();
            let mut x = x0.coeffs().to_vec();
            let mut next = vec![0.0; k];
            traj.row_mut(0).assign(&ArrayView1::from(&x[..]));
            for i in 0..steps {
                let db = incs.row(i);
                if !stepper.step(grid.t(i), &x, db.as_slice().expect("contiguous"), &mut next) {
                    return Some(i + 1);
                }
                std::mem::swap(&mut x, &mut next);
                traj.row_mut(i + 1).assign(&ArrayView1::from(&x[..]));
            }
            None
        })
        .collect();
    if let Some((path, step)) = blowups
        .iter()
        .enumerate()
        .find_map(|(p, b)| b.map(|s| (p, s)))
    {
        return Err(Error::PathBlowUp { path, step });
    }
    Ok(PathBundle {
        grid: *grid,
        seed,
        states,
        increments,
    })
}

/// Sample increments from `seed` and run the forward scheme from `x0`.
pub fn simulate(problem: &ModelProblem, grid: &TimeGrid, x0: &HilbertVec<f64>, paths: usize, seed: u64) -> Result<PathBundle> {
    let inc = sample_increments(grid, problem.noise_dim(), paths, seed)?;
    euler_forward(problem, grid, inc, x0, seed)
}

/// A fine bundle and a coarse bundle driven by the same Brownian coordinates: the
/// coarse increments are block sums of the fine ones.
pub fn fine_reference_paths(
    problem: &ModelProblem,
    fine: &TimeGrid,
    coarse: &TimeGrid,
    x0: &HilbertVec<f64>,
    paths: usize,
    seed: u64,
) -> Result<(PathBundle, PathBundle)> {
    let factor = fine.refinement_of(coarse)?;
    let fine_inc = sample_increments(fine, problem.noise_dim(), paths, seed)?;
    let coarse_inc = aggregate_increments(fine_inc.view(), factor)?;
    let fine_bundle = euler_forward(problem, fine, fine_inc, x0, seed)?;
    let coarse_bundle = euler_forward(problem, coarse, coarse_inc, x0, seed)?;
    Ok((fine_bundle, coarse_bundle))
}
