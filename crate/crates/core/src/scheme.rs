//! Deep backward dynamic programming: the one-step loss `L_i` and backward induction.
//!
//! Starting from `u_N = phi`, each step `i = N-1, ..., 0` jointly fits a value network
//! `u_i: H -> R` and a gradient network `z_i: H -> V_0` (whitened coordinates) by
//! minimising
//!
//! ```text
//! L_i = E | u_{i+1}(X_{i+1}) - u_i(X_i) - z_i(X_i) . dbeta_i + psi(t_i, X_i, u_i(X_i), z_i(X_i)) h |^2
//! ```
//!
//! over the simulated paths of a [`PathBundle`].

use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::deeponet::{trunk_dims, DeepOnetCheckpoint, DeepOnetSpec, SpaceDescriptor};
use crate::error::{Error, Result};
use crate::hilbert::WhitenedNoiseVec;
use crate::mlp::MlpParams;
use crate::paths::{simulate, PathBundle, TimeGrid};
use crate::problem::{ModelProblem, Terminal};
use crate::regression::decayed_lr;
use crate::rng;

/// Basis name of the state space `H` in checkpoints.
pub const STATE_BASIS: &str = "H";
/// Basis name of the whitened noise space `V_0` in checkpoints.
pub const NOISE_BASIS: &str = "V0";

/// A batched map from states (rows, `K` columns) to `R^out`.
pub trait StateFunction: Send + Sync {
    fn output_dim(&self) -> usize;
    fn eval_states(&self, states: ArrayView2<f64>) -> Result<Array2<f64>>;
}

impl StateFunction for DeepOnetSpec<f64> {
    fn output_dim(&self) -> usize {
        self.output_space().dim
    }

    fn eval_states(&self, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.eval_batch(states)
    }
}

/// The terminal condition as a [`StateFunction`].
#[derive(Clone)]
pub struct TerminalFunction(pub Arc<dyn Terminal>);

impl StateFunction for TerminalFunction {
    fn output_dim(&self) -> usize {
        1
    }

    fn eval_states(&self, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((states.nrows(), 1));
        for (o, row) in out.iter_mut().zip(states.outer_iter()) {
            *o = self.0.value(&row.to_vec());
        }
        Ok(out)
    }
}

/// Row-wise closure `f(x, out)`.
pub struct ClosureFunction<F> {
    dim: usize,
    f: F,
}

impl<F> ClosureFunction<F>
where
    F: Fn(&[f64], &mut [f64]) + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        ClosureFunction { dim, f }
    }
}

impl<F> StateFunction for ClosureFunction<F>
where
    F: Fn(&[f64], &mut [f64]) + Send + Sync,
{
    fn output_dim(&self) -> usize {
        self.dim
    }

    fn eval_states(&self, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((states.nrows(), self.dim));
        for (mut o, row) in out.outer_iter_mut().zip(states.outer_iter()) {
            (self.f)(&row.to_vec(), o.as_slice_mut().expect("contiguous"));
        }
        Ok(out)
    }
}

/// First output column of a scalar state function.
pub fn scalar_values(f: &dyn StateFunction, states: ArrayView2<f64>) -> Result<Array1<f64>> {
    if f.output_dim() == 0 {
        return Err(Error::dim("scalar_values", 1, 0));
    }
    Ok(f.eval_states(states)?.column(0).to_owned())
}

/// Approximators `(u_i, z_i)` for `i < N`, with `u_N = phi`.
pub trait Approximators: Sync {
    fn steps(&self) -> usize;
    /// `u_i` for `i <= N`.
    fn u(&self, i: usize) -> &dyn StateFunction;
    /// `z_i` for `i < N`, in whitened coordinates.
    fn z(&self, i: usize) -> &dyn StateFunction;
}

/// `zeta . dbeta`: the stochastic integral of a constant `V_0` integrand over one step.
pub fn discrete_pairing(z: &WhitenedNoiseVec<f64>, dbeta: &[f64]) -> Result<f64> {
    if z.dim() != dbeta.len() {
        return Err(Error::dim("discrete_pairing", z.dim(), dbeta.len()));
    }
    Ok(z.zeta().iter().zip(dbeta).map(|(a, b)| a * b).sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Encoder truncation `d` (defaults to `K`).
    pub d: Option<usize>,
    /// Number of whitened modes produced by the gradient network (defaults to `n`).
    pub z_modes: Option<usize>,
    pub width: usize,
    /// Number of affine layers.
    pub depth: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            d: None,
            z_modes: None,
            width: 64,
            depth: 3,
        }
    }
}

impl NetConfig {
    /// Resolve `(d, z_modes)` against the problem's truncation levels.
    pub fn resolve(&self, k: usize, n: usize) -> Result<(usize, usize)> {
        let d = self.d.unwrap_or(k);
        let m = self.z_modes.unwrap_or(n);
        if d == 0 || d > k {
            return Err(Error::Config(format!("encoder truncation d = {d} must satisfy 1 <= d <= K = {k}")));
        }
        if m == 0 || m > n {
            return Err(Error::Config(format!("gradient modes m = {m} must satisfy 1 <= m <= n = {n}")));
        }
        if self.width == 0 || self.depth == 0 {
            return Err(Error::Config("network width and depth must be positive".into()));
        }
        Ok((d, m))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    /// Learning rate after the last epoch as a fraction of `adam.lr` (geometric decay).
    pub final_lr_fraction: f64,
    /// Initialise step `i` from the trained step `i + 1`.
    pub warm_start: bool,
    /// Draw a fresh path bundle for every step instead of reusing one.
    pub resample_paths: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch: 256,
            adam: AdamConfig::with_lr(1e-3),
            final_lr_fraction: 0.1,
            warm_start: true,
            resample_paths: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "final_lr_fraction must lie in (0, 1], got {}",
                self.final_lr_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub initial_loss: f64,
    /// Loss of the returned (best) snapshot.
    pub final_loss: f64,
    /// Epoch of the best snapshot; 0 means the initial parameters were kept.
    pub best_epoch: usize,
    /// Full-bundle loss before training and after every epoch.
    pub curve: Vec<f64>,
}

/// Data of one backward step, gathered once from the bundle.
struct StepData {
    states: Array2<f64>,
    inputs: Array2<f64>,
    targets: Array1<f64>,
    dbeta: Array2<f64>,
}

impl StepData {
    fn new(i: usize, bundle: &PathBundle, u_next: &dyn StateFunction, d: usize) -> Result<Self> {
        let states = bundle.states_at(i).to_owned();
        let inputs = states.slice(s![.., ..d]).to_owned();
        let targets = scalar_values(u_next, bundle.states_at(i + 1))?;
        let dbeta = bundle.increments_at(i).to_owned();
        Ok(StepData {
            states,
            inputs,
            targets,
            dbeta,
        })
    }
}

/// Residuals `u_{i+1}(X_{i+1}) - u(X_i) - zeta . dbeta + psi h` and, if requested, the
/// partials of each residual in `u` and in the `zeta` coordinates.
#[allow(clippy::too_many_arguments)]
fn residuals(
    problem: &ModelProblem,
    t: f64,
    h: f64,
    states: ArrayView2<f64>,
    targets: ArrayView1<f64>,
    dbeta: ArrayView2<f64>,
    u: ArrayView1<f64>,
    zeta: ArrayView2<f64>,
    mut partials: Option<(&mut Array1<f64>, &mut Array2<f64>)>,
) -> Array1<f64> {
    let n = dbeta.ncols();
    let m = zeta.ncols();
    let psi_zero = problem.psi.is_zero();
    let mut zfull = vec![0.0; n];
    let mut dz = vec![0.0; n];
    let mut out = Array1::zeros(states.nrows());
    for b in 0..states.nrows() {
        let zrow = zeta.row(b);
        let db = dbeta.row(b);
        let mut pairing = 0.0;
        for j in 0..m {
            pairing += zrow[j] * db[j];
        }
        let mut r = targets[b] - u[b] - pairing;
        let mut dy = 0.0;
        if !psi_zero {
            for (j, zf) in zfull.iter_mut().enumerate() {
                *zf = if j < m { zrow[j] } else { 0.0 };
            }
            let x = states.row(b).to_vec();
            r += h * problem.psi.value(t, &x, u[b], &zfull, &problem.q);
            if partials.is_some() {
                dy = problem.psi.partials(t, &x, u[b], &zfull, &problem.q, &mut dz);
            }
        }
        out[b] = r;
        if let Some((du, dzeta)) = partials.as_mut() {
            du[b] = -1.0 + h * dy;
            for j in 0..m {
                dzeta[[b, j]] = -db[j] + if psi_zero { 0.0 } else { h * dz[j] };
            }
        }
    }
    out
}

/// Empirical `L_i` of `(u_theta, z_theta)` over all paths of the bundle.
pub fn step_loss(
    i: usize,
    u_next: &dyn StateFunction,
    u_theta: &dyn StateFunction,
    z_theta: &dyn StateFunction,
    bundle: &PathBundle,
    problem: &ModelProblem,
    grid: &TimeGrid,
) -> Result<f64> {
    if i >= grid.steps() || bundle.grid().steps() != grid.steps() {
        return Err(Error::Config(format!(
            "step {i} is outside the bundle's grid of {} steps",
            bundle.grid().steps()
        )));
    }
    if z_theta.output_dim() > problem.noise_dim() {
        return Err(Error::dim("step_loss (z output)", problem.noise_dim(), z_theta.output_dim()));
    }
    let states = bundle.states_at(i);
    let targets = scalar_values(u_next, bundle.states_at(i + 1))?;
    let u = scalar_values(u_theta, states)?;
    let zeta = z_theta.eval_states(states)?;
    let r = residuals(
        problem,
        grid.t(i),
        grid.h(),
        states,
        targets.view(),
        bundle.increments_at(i),
        u.view(),
        zeta.view(),
        None,
    );
    if let Some(path) = r.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteResidual { path, step: i });
    }
    Ok(r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64)
}

fn full_loss(
    problem: &ModelProblem,
    grid: &TimeGrid,
    i: usize,
    data: &StepData,
    u: &MlpParams<f64>,
    z: &MlpParams<f64>,
) -> Result<f64> {
    let uv = u.forward_batch(data.inputs.view())?;
    let zv = z.forward_batch(data.inputs.view())?;
    let r = residuals(
        problem,
        grid.t(i),
        grid.h(),
        data.states.view(),
        data.targets.view(),
        data.dbeta.view(),
        uv.column(0),
        zv.view(),
        None,
    );
    Ok(r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64)
}

/// Minimise `L_i` over the joint parameters of `(u, z)` with one Adam instance.
/// Returns the best snapshot seen at epoch boundaries.
pub fn train_step(
    i: usize,
    problem: &ModelProblem,
    grid: &TimeGrid,
    bundle: &PathBundle,
    u_next: &dyn StateFunction,
    init_u: DeepOnetSpec<f64>,
    init_z: DeepOnetSpec<f64>,
    cfg: &TrainConfig,
) -> Result<(DeepOnetSpec<f64>, DeepOnetSpec<f64>, StepReport)> {
    cfg.validate()?;
    grid.check_contraction(problem.psi_lipschitz)?;
    if i >= grid.steps() {
        return Err(Error::Config(format!("step {i} is outside a grid of {} steps", grid.steps())));
    }
    if init_u.d() != init_z.d() || init_u.m() != 1 {
        return Err(Error::Config("value network must map d coefficients to one output, sharing d with the gradient network".into()));
    }
    if init_z.output_space().dim != problem.noise_dim() {
        return Err(Error::dim("train_step (z output space)", problem.noise_dim(), init_z.output_space().dim));
    }
    let data = StepData::new(i, bundle, u_next, init_u.d())?;
    let paths = data.states.nrows();
    let (mut u_spec, mut z_spec) = (init_u, init_z);
    let mut u = u_spec.theta().clone();
    let mut z = z_spec.theta().clone();
    let nu = u.param_count();
    let mut adam = AdamState::<f64>::new(nu + z.param_count());

    let initial = full_loss(problem, grid, i, &data, &u, &z)?;
    if !initial.is_finite() {
        return Err(Error::TrainingDiverged {
            step: i,
            epoch: 0,
            loss: initial,
        });
    }
    let mut curve = vec![initial];
    let mut best = (initial, 0usize, u.clone(), z.clone());
    let (t, h) = (grid.t(i), grid.h());

    for epoch in 0..cfg.epochs {
        let lr = decayed_lr(cfg.adam.lr, cfg.final_lr_fraction, epoch, cfg.epochs);
        let perm = rng::permutation(paths, cfg.seed, i as u64, epoch as u64);
        for chunk in perm.chunks(cfg.batch) {
            let xs = data.states.select(Axis(0), chunk);
            let xin = data.inputs.select(Axis(0), chunk);
            let tg = data.targets.select(Axis(0), chunk);
            let db = data.dbeta.select(Axis(0), chunk);
            let cu = u.forward_cached(xin.view())?;
            let cz = z.forward_cached(xin.view())?;
            let bsz = chunk.len();
            let mut du = Array1::zeros(bsz);
            let mut dzeta = Array2::zeros((bsz, z.output_dim()));
            let r = residuals(
                problem,
                t,
                h,
                xs.view(),
                tg.view(),
                db.view(),
                cu.output().column(0),
                cz.output().view(),
                Some((&mut du, &mut dzeta)),
            );
            let scale = 2.0 / bsz as f64;
            let adj_u = Array2::from_shape_fn((bsz, 1), |(b, _)| scale * r[b] * du[b]);
            let adj_z = Array2::from_shape_fn(dzeta.dim(), |(b, j)| scale * r[b] * dzeta[[b, j]]);
            let gu = u.backward(&cu, adj_u.view())?;
            let gz = z.backward(&cz, adj_z.view())?;
            let mut params = u.param_slices_mut();
            params.extend(z.param_slices_mut());
            let mut grads = gu.param_slices();
            grads.extend(gz.param_slices());
            adam.step_with_lr(&cfg.adam, lr, params, grads).map_err(|_| Error::TrainingDiverged {
                step: i,
                epoch,
                loss: f64::NAN,
            })?;
        }
        let loss = full_loss(problem, grid, i, &data, &u, &z)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step: i, epoch, loss });
        }
        curve.push(loss);
        if loss < best.0 {
            best = (loss, epoch + 1, u.clone(), z.clone());
        }
    }
    let (final_loss, best_epoch, bu, bz) = best;
    *u_spec.theta_mut() = bu;
    *z_spec.theta_mut() = bz;
    Ok((
        u_spec,
        z_spec,
        StepReport {
            step: i,
            initial_loss: initial,
            final_loss,
            best_epoch,
            curve,
        },
    ))
}

/// Trained approximators for every time index, with `u_N = phi`.
#[derive(Clone)]
pub struct SchemeState {
    grid: TimeGrid,
    u_nets: Vec<DeepOnetSpec<f64>>,
    z_nets: Vec<DeepOnetSpec<f64>>,
    terminal: TerminalFunction,
    reports: Vec<StepReport>,
}

impl std::fmt::Debug for SchemeState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SchemeState")
            .field("grid", &self.grid)
            .field("reports", &self.reports)
            .finish_non_exhaustive()
    }
}

impl SchemeState {
    /// Assemble from per-step nets (index `i = 0..N-1`).
    pub fn from_parts(
        grid: TimeGrid,
        u_nets: Vec<DeepOnetSpec<f64>>,
        z_nets: Vec<DeepOnetSpec<f64>>,
        phi: Arc<dyn Terminal>,
        reports: Vec<StepReport>,
    ) -> Result<Self> {
        let n = grid.steps();
        if u_nets.len() != n || z_nets.len() != n {
            return Err(Error::dim("SchemeState (nets per step)", n, u_nets.len().min(z_nets.len())));
        }
        let (ui, zi) = (u_nets[0].input_space().clone(), z_nets[0].output_space().clone());
        for (u, z) in u_nets.iter().zip(&z_nets) {
            if u.input_space() != &ui || z.input_space() != &ui || z.output_space() != &zi || u.m() != 1 {
                return Err(Error::Invariant("all step networks must share their spaces".into()));
            }
        }
        Ok(SchemeState {
            grid,
            u_nets,
            z_nets,
            terminal: TerminalFunction(phi),
            reports,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn u_net(&self, i: usize) -> &DeepOnetSpec<f64> {
        &self.u_nets[i]
    }

    pub fn z_net(&self, i: usize) -> &DeepOnetSpec<f64> {
        &self.z_nets[i]
    }

    pub fn reports(&self) -> &[StepReport] {
        &self.reports
    }

    /// `u_0(x)`, the scheme's estimate of `u(0, x)`.
    pub fn value_at_zero(&self, x: &[f64]) -> Result<f64> {
        let row = ArrayView2::from_shape((1, x.len()), x).map_err(|_| Error::dim("value_at_zero", 1, 0))?;
        Ok(self.u_nets[0].eval_batch(row)?[[0, 0]])
    }

    /// Write `step_{i:03}_u.json`, `step_{i:03}_z.json` and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path, problem_hash: &str, seeds: &SchemeSeeds) -> Result<()> {
        fs::create_dir_all(dir)?;
        for i in 0..self.grid.steps() {
            write_json(&dir.join(format!("step_{i:03}_u.json")), &self.u_nets[i].to_checkpoint())?;
            write_json(&dir.join(format!("step_{i:03}_z.json")), &self.z_nets[i].to_checkpoint())?;
        }
        let manifest = SchemeManifest {
            horizon: self.grid.horizon(),
            steps: self.grid.steps(),
            problem_hash: problem_hash.to_string(),
            seeds: *seeds,
            initial_losses: self.reports.iter().map(|r| r.initial_loss).collect(),
            final_losses: self.reports.iter().map(|r| r.final_loss).collect(),
        };
        write_json(&dir.join("manifest.json"), &manifest)
    }

    /// Read checkpoints written by [`SchemeState::save`].
    pub fn load(dir: &Path, phi: Arc<dyn Terminal>) -> Result<(Self, SchemeManifest)> {
        let manifest: SchemeManifest = read_json(&dir.join("manifest.json"))?;
        let grid = TimeGrid::new(manifest.horizon, manifest.steps)?;
        let mut u_nets = Vec::with_capacity(manifest.steps);
        let mut z_nets = Vec::with_capacity(manifest.steps);
        for i in 0..manifest.steps {
            let u: DeepOnetCheckpoint = read_json(&dir.join(format!("step_{i:03}_u.json")))?;
            let z: DeepOnetCheckpoint = read_json(&dir.join(format!("step_{i:03}_z.json")))?;
            u_nets.push(DeepOnetSpec::from_checkpoint(&u)?);
            z_nets.push(DeepOnetSpec::from_checkpoint(&z)?);
        }
        let reports = manifest
            .initial_losses
            .iter()
            .zip(&manifest.final_losses)
            .enumerate()
            .map(|(i, (&a, &b))| StepReport {
                step: i,
                initial_loss: a,
                final_loss: b,
                best_epoch: 0,
                curve: Vec::new(),
            })
            .collect();
        let state = Self::from_parts(grid, u_nets, z_nets, phi, reports)?;
        Ok((state, manifest))
    }
}

impl Approximators for SchemeState {
    fn steps(&self) -> usize {
        self.grid.steps()
    }

    fn u(&self, i: usize) -> &dyn StateFunction {
        if i == self.grid.steps() {
            &self.terminal
        } else {
            &self.u_nets[i]
        }
    }

    fn z(&self, i: usize) -> &dyn StateFunction {
        &self.z_nets[i]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeSeeds {
    pub paths: u64,
    pub training: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeManifest {
    pub horizon: f64,
    pub steps: usize,
    pub problem_hash: String,
    pub seeds: SchemeSeeds,
    pub initial_losses: Vec<f64>,
    pub final_losses: Vec<f64>,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Freshly initialised `(u, z)` networks for step `i`.
pub fn init_nets(problem: &ModelProblem, net: &NetConfig, seed: u64, i: usize) -> Result<(DeepOnetSpec<f64>, DeepOnetSpec<f64>)> {
    let (k, n) = (problem.state_dim(), problem.noise_dim());
    let (d, m) = net.resolve(k, n)?;
    let input = SpaceDescriptor::new(STATE_BASIS, k);
    let u = MlpParams::he_init(&trunk_dims(d, net.width, net.depth, 1), seed, 2 * i as u64)?;
    let z = MlpParams::he_init(&trunk_dims(d, net.width, net.depth, m), seed, 2 * i as u64 + 1)?;
    Ok((
        DeepOnetSpec::new(u, input.clone(), SpaceDescriptor::euclidean(1))?,
        DeepOnetSpec::new(z, input, SpaceDescriptor::new(NOISE_BASIS, n))?,
    ))
}

/// Train all steps `i = N-1, ..., 0`; `observer` sees each report as it completes.
pub fn backward_induction_with(
    problem: &ModelProblem,
    grid: &TimeGrid,
    bundle: &PathBundle,
    net: &NetConfig,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&StepReport),
) -> Result<SchemeState> {
    cfg.validate()?;
    grid.check_contraction(problem.psi_lipschitz)?;
    if bundle.grid() != grid {
        return Err(Error::Config("path bundle was simulated on a different grid".into()));
    }
    if bundle.states().len_of(Axis(2)) != problem.state_dim() || bundle.increments().len_of(Axis(2)) != problem.noise_dim() {
        return Err(Error::dim("backward_induction (bundle modes)", problem.state_dim(), bundle.states().len_of(Axis(2))));
    }
    net.resolve(problem.state_dim(), problem.noise_dim())?;
    let n = grid.steps();
    let terminal = TerminalFunction(problem.phi.clone());
    let mut u_nets: Vec<Option<DeepOnetSpec<f64>>> = vec![None; n];
    let mut z_nets: Vec<Option<DeepOnetSpec<f64>>> = vec![None; n];
    let mut reports: Vec<Option<StepReport>> = vec![None; n];
    let x0 = bundle.state(0, 0);

    for i in (0..n).rev() {
        let (init_u, init_z) = match (cfg.warm_start, u_nets.get(i + 1).and_then(|u| u.clone())) {
            (true, Some(u)) => (u, z_nets[i + 1].clone().expect("trained together")),
            _ => init_nets(problem, net, cfg.seed, i)?,
        };
        let fresh;
        let step_bundle = if cfg.resample_paths && i + 1 < n {
            fresh = simulate(problem, grid, &x0, bundle.paths(), bundle.seed().wrapping_add(1 + i as u64))?;
            &fresh
        } else {
            bundle
        };
        let u_next: &dyn StateFunction = match &u_nets.get(i + 1) {
            Some(Some(u)) => u,
            _ => &terminal,
        };
        let (u, z, report) = train_step(i, problem, grid, step_bundle, u_next, init_u, init_z, cfg)?;
        observer(&report);
        u_nets[i] = Some(u);
        z_nets[i] = Some(z);
        reports[i] = Some(report);
    }
    SchemeState::from_parts(
        *grid,
        u_nets.into_iter().map(|u| u.expect("trained")).collect(),
        z_nets.into_iter().map(|z| z.expect("trained")).collect(),
        problem.phi.clone(),
        reports.into_iter().map(|r| r.expect("trained")).collect(),
    )
}

pub fn backward_induction(
    problem: &ModelProblem,
    grid: &TimeGrid,
    bundle: &PathBundle,
    net: &NetConfig,
    cfg: &TrainConfig,
) -> Result<SchemeState> {
    backward_induction_with(problem, grid, bundle, net, cfg, &mut |_| {})
}
