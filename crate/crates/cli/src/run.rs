//! Subcommand implementations. Every artifact is a deterministic function of the
//! effective config; nothing time- or host-dependent is written.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use dbdp_core::oracles::{
    capacity_gap, mc_solution_oracle, solve_vhat, strong_error_report, CapacityEstimate, DiagnosticReport, McEstimate,
    SWEEP_CSV_HEADER,
};
use dbdp_core::oracles::{fmt17, SolutionOracle};
use dbdp_core::paths::simulate;
use dbdp_core::scheme::{backward_induction_with, SchemeManifest, SchemeSeeds, SchemeState, StepReport, TerminalFunction};

use crate::config::ExperimentConfig;

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const CONFIG_ECHO: &str = "config.json";
pub const LOSSES_CSV: &str = "losses.csv";
pub const REPORT_JSON: &str = "diagnostic_report.json";
pub const VALIDATION_JSON: &str = "validation.json";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_SUMMARY: &str = "sweep_summary.json";
pub const CAPACITY_JSON: &str = "capacity.json";
pub const CAPACITY_CSV: &str = "capacity.csv";

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

/// Reference value of `u(0, x0)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Reference {
    ClosedForm { value: f64 },
    MonteCarlo { value: f64, se: f64, picard_iterations: usize },
}

impl Reference {
    pub fn value(&self) -> f64 {
        match self {
            Reference::ClosedForm { value } | Reference::MonteCarlo { value, .. } => *value,
        }
    }
}

/// Written next to the checkpoints by `train`; embeds the effective config so that
/// loading it back reproduces the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub config_hash: String,
    pub seeds: SchemeSeeds,
    pub steps: usize,
    pub h: f64,
    /// `u_0(x0)` of the trained scheme.
    pub u0_hat: f64,
    pub closed_form_u0: Option<f64>,
    pub relative_error: Option<f64>,
    pub initial_losses: Vec<f64>,
    pub final_losses: Vec<f64>,
    pub best_epochs: Vec<usize>,
    pub config: ExperimentConfig,
}

pub struct TrainOutcome {
    pub scheme: SchemeState,
    pub manifest: RunManifest,
}

fn write_losses(path: &Path, reports: &[StepReport]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(w, "step,epoch,loss")?;
    for r in reports {
        for (epoch, loss) in r.curve.iter().enumerate() {
            writeln!(w, "{},{},{}", r.step, epoch, fmt17(*loss))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Simulate the training bundle, run the backward induction and write checkpoints,
/// losses and the run manifest into `out`.
pub fn run_train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    create_dir(out)?;
    let problem = cfg.build_problem()?;
    let grid = cfg.grid()?;
    let x0 = cfg.x0()?;
    let bundle = simulate(&problem, &grid, &x0, cfg.sampling.paths, cfg.path_seed()).context("simulating training paths")?;
    let train = cfg.train_config();
    let scheme = backward_induction_with(&problem, &grid, &bundle, &cfg.nets, &train, &mut |r| {
        eprintln!(
            "step {:>3}: loss {:.6e} -> {:.6e} (best epoch {})",
            r.step, r.initial_loss, r.final_loss, r.best_epoch
        );
    })
    .context("training")?;

    let seeds = SchemeSeeds {
        paths: cfg.path_seed(),
        training: train.seed,
    };
    let hash = cfg.hash();
    scheme.save(&out.join(CHECKPOINT_DIR), &hash, &seeds).context("writing checkpoints")?;
    write_losses(&out.join(LOSSES_CSV), scheme.reports())?;

    let u0_hat = scheme.value_at_zero(x0.coeffs())?;
    let closed_form_u0 = cfg.exact_oracle()?.map(|o| o.y(0.0, x0.coeffs()));
    let manifest = RunManifest {
        config_hash: hash,
        seeds,
        steps: grid.steps(),
        h: grid.h(),
        u0_hat,
        closed_form_u0,
        relative_error: closed_form_u0.map(|e| (u0_hat - e).abs() / e.abs()),
        initial_losses: scheme.reports().iter().map(|r| r.initial_loss).collect(),
        final_losses: scheme.reports().iter().map(|r| r.final_loss).collect(),
        best_epochs: scheme.reports().iter().map(|r| r.best_epoch).collect(),
        config: cfg.clone(),
    };
    write_json(&out.join(RUN_MANIFEST), &manifest)?;
    write_json(&out.join(CONFIG_ECHO), cfg)?;
    Ok(TrainOutcome { scheme, manifest })
}

/// Load the checkpoints of `out`, refusing them if they were produced by another config.
pub fn load_checkpoints(cfg: &ExperimentConfig, out: &Path) -> Result<(SchemeState, SchemeManifest)> {
    let dir = out.join(CHECKPOINT_DIR);
    if !dir.join("manifest.json").exists() {
        bail!("no checkpoints in {} (run `train` first)", dir.display());
    }
    let problem = cfg.build_problem()?;
    let (scheme, manifest) = SchemeState::load(&dir, problem.phi.clone()).with_context(|| format!("loading {}", dir.display()))?;
    let hash = cfg.hash();
    if manifest.problem_hash != hash {
        bail!(
            "stale checkpoint: {} was trained with config hash {} but the current config hashes to {}",
            dir.display(),
            manifest.problem_hash,
            hash
        );
    }
    Ok((scheme, manifest))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub config_hash: String,
    pub u0_hat: f64,
    pub reference: Reference,
    pub relative_error: f64,
    pub rhs_only: bool,
}

pub struct ValidateOutcome {
    pub report: DiagnosticReport,
    pub validation: Validation,
}

pub fn mc_reference(cfg: &ExperimentConfig) -> Result<McEstimate> {
    let problem = cfg.build_problem()?;
    let x0 = cfg.x0()?;
    Ok(mc_solution_oracle(&problem, 0.0, x0.coeffs(), &cfg.mc_config())?)
}

/// Diagnostic report of the checkpoints in `out` with the given reference refinement;
/// writes `diagnostic_report.json` and `validation.json` into `out`.
pub fn validate_checkpoints(cfg: &ExperimentConfig, out: &Path, fine_factor: usize) -> Result<ValidateOutcome> {
    let (scheme, _) = load_checkpoints(cfg, out)?;
    let problem = cfg.build_problem()?;
    let grid = cfg.grid()?;
    let x0 = cfg.x0()?;
    let oracle = cfg.oracle()?;
    let report = strong_error_report(
        &scheme,
        &problem,
        oracle.as_deref(),
        &grid,
        &x0,
        &cfg.report_config(fine_factor),
    )
    .context("computing diagnostic report")?;
    let u0_hat = scheme.value_at_zero(x0.coeffs())?;
    let reference = match &oracle {
        Some(o) => Reference::ClosedForm {
            value: o.y(0.0, x0.coeffs()),
        },
        None => {
            eprintln!("no closed-form solution for this problem: report is right-hand-side only, reference from Monte Carlo");
            let e = mc_reference(cfg).context("Monte Carlo reference")?;
            Reference::MonteCarlo {
                value: e.value,
                se: e.se,
                picard_iterations: e.iterations,
            }
        }
    };
    let validation = Validation {
        config_hash: cfg.hash(),
        u0_hat,
        relative_error: (u0_hat - reference.value()).abs() / reference.value().abs(),
        reference,
        rhs_only: report.rhs_only,
    };
    write_json(&out.join(REPORT_JSON), &report)?;
    write_json(&out.join(VALIDATION_JSON), &validation)?;
    Ok(ValidateOutcome { report, validation })
}

/// Append one row to a sweep CSV, writing the header first if the file is new or empty.
pub fn append_sweep_row(path: &Path, report: &DiagnosticReport) -> Result<()> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    if fresh {
        writeln!(f, "{SWEEP_CSV_HEADER}")?;
    }
    writeln!(f, "{}", report.sweep_csv_row())?;
    Ok(())
}

/// `validate` subcommand: report on the checkpoints in `out` and append to `out/sweep.csv`.
pub fn run_validate(cfg: &ExperimentConfig, out: &Path) -> Result<ValidateOutcome> {
    let v = validate_checkpoints(cfg, out, cfg.sampling.fine_factor)?;
    append_sweep_row(&out.join(SWEEP_CSV), &v.report)?;
    Ok(v)
}

/// Trend of the left-hand side across a sweep ordered by increasing `N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendVerdict {
    pub steps: Vec<usize>,
    pub lhs: Vec<f64>,
    pub lhs_se: Vec<f64>,
    /// Indices `j` with `lhs[j + 1] > lhs[j]`.
    pub inversions: Vec<usize>,
    /// Inversions no larger than two combined standard errors.
    pub noise_inversions: Vec<usize>,
    pub non_increasing: bool,
}

/// Non-increasing, allowing a single inversion within two standard errors.
pub fn assess_trend(steps: &[usize], lhs: &[f64], se: &[f64]) -> TrendVerdict {
    let mut inversions = Vec::new();
    let mut noise = Vec::new();
    for j in 0..lhs.len().saturating_sub(1) {
        let rise = lhs[j + 1] - lhs[j];
        if rise > 0.0 {
            inversions.push(j);
            if rise <= 2.0 * (se[j].powi(2) + se[j + 1].powi(2)).sqrt() {
                noise.push(j);
            }
        }
    }
    let non_increasing = inversions.is_empty() || (inversions.len() == 1 && noise.len() == 1);
    TrendVerdict {
        steps: steps.to_vec(),
        lhs: lhs.to_vec(),
        lhs_se: se.to_vec(),
        inversions,
        noise_inversions: noise,
        non_increasing,
    }
}

/// Sorted, de-duplicated schedule and whether duplicates were dropped.
pub fn normalise_schedule(schedule: &[usize]) -> (Vec<usize>, bool) {
    let mut s = schedule.to_vec();
    s.sort_unstable();
    let before = s.len();
    s.dedup();
    let had_duplicates = s.len() != before;
    (s, had_duplicates)
}

pub struct SweepOutcome {
    pub runs: Vec<(usize, TrainOutcome, ValidateOutcome)>,
    pub trend: Option<TrendVerdict>,
}

/// Train and validate once per `N` with the same seed and per-step budget. Each run
/// lives in `out/N<steps>`; `out/sweep.csv` is rewritten with one row per `N`.
pub fn run_sweep(cfg: &ExperimentConfig, schedule: &[usize], out: &Path) -> Result<SweepOutcome> {
    let (schedule, dup) = normalise_schedule(schedule);
    if dup {
        eprintln!("notice: duplicate step counts removed, sweeping N = {schedule:?}");
    }
    if schedule.is_empty() {
        eprintln!("warning: empty sweep schedule, nothing to do");
        return Ok(SweepOutcome {
            runs: Vec::new(),
            trend: None,
        });
    }
    let reference = cfg.sweep.reference_steps;
    for &n in &schedule {
        if n == 0 || !reference.is_multiple_of(n) {
            bail!("sweep.reference_steps = {reference} must be a positive multiple of every N in the schedule (N = {n})");
        }
        cfg.with_steps(n).validate().with_context(|| format!("sweep entry N = {n}"))?;
    }
    create_dir(out)?;
    let csv = out.join(SWEEP_CSV);
    File::create(&csv).with_context(|| format!("creating {}", csv.display()))?;
    let mut runs = Vec::new();
    for &n in &schedule {
        eprintln!("sweep: N = {n}");
        let sub = cfg.with_steps(n);
        let dir = out.join(format!("N{n:03}"));
        let t = run_train(&sub, &dir)?;
        let v = validate_checkpoints(&sub, &dir, reference / n)?;
        append_sweep_row(&csv, &v.report)?;
        runs.push((n, t, v));
    }
    let trend = if runs.iter().all(|(_, _, v)| v.report.lhs_total.is_some()) {
        let lhs: Vec<f64> = runs.iter().map(|(_, _, v)| v.report.lhs_total.unwrap_or(f64::NAN)).collect();
        let se: Vec<f64> = runs.iter().map(|(_, _, v)| v.report.lhs_total_se.unwrap_or(f64::NAN)).collect();
        let verdict = assess_trend(&schedule, &lhs, &se);
        write_json(&out.join(SWEEP_SUMMARY), &verdict)?;
        Some(verdict)
    } else {
        None
    };
    Ok(SweepOutcome { runs, trend })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapacityReport {
    pub step: usize,
    pub states: usize,
    /// `closed-form` or `nested-monte-carlo`.
    pub targets: String,
    pub value: CapacityEstimate,
    pub gradient: CapacityEstimate,
    /// Best value error non-increasing in width, up to the spread over restarts.
    pub value_monotone: bool,
    pub gradient_monotone: bool,
}

/// Non-increasing best errors, where a rise no larger than the restart spread of the two
/// widths involved is attributed to optimisation noise.
pub fn capacity_monotone(est: &CapacityEstimate) -> bool {
    let spread = |w: &dbdp_core::oracles::WidthEstimate| {
        let hi = w.restarts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = w.restarts.iter().cloned().fold(f64::INFINITY, f64::min);
        hi - lo
    };
    est.per_width
        .windows(2)
        .all(|p| p[1].best <= p[0].best + spread(&p[0]).max(spread(&p[1])))
}

/// Targets `(v_{N-1}, Zbar_{N-1})` on the states of step `N - 1`.
pub fn last_step_targets(cfg: &ExperimentConfig, states: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>, &'static str)> {
    let problem = cfg.build_problem()?;
    let grid = cfg.grid()?;
    let h = grid.h();
    let n = problem.noise_dim();
    if let Some(o) = cfg.exact_oracle()? {
        let mut z = Array2::zeros((states.nrows(), n));
        let mut v = Array1::zeros(states.nrows());
        for (p, x) in states.outer_iter().enumerate() {
            let x = x.to_vec();
            v[p] = o.last_step_value(&x, h);
            o.last_step_zbar(&x, h, z.row_mut(p).as_slice_mut().expect("row-major"));
        }
        Ok((v, z, "closed-form"))
    } else {
        let phi = TerminalFunction(problem.phi.clone());
        let s = solve_vhat(
            &problem,
            &grid,
            grid.steps() - 1,
            &phi,
            states.view(),
            cfg.sampling.inner,
            cfg.seed ^ 0xCA9A,
        )?;
        Ok((s.values, s.inner.zbar, "nested-monte-carlo"))
    }
}

/// Width sweep of regression errors against the last-step targets.
pub fn run_capacity(cfg: &ExperimentConfig, out: &Path) -> Result<CapacityReport> {
    cfg.validate()?;
    create_dir(out)?;
    let problem = cfg.build_problem()?;
    let grid = cfg.grid()?;
    let x0 = cfg.x0()?;
    let step = grid.steps() - 1;
    let bundle = simulate(&problem, &grid, &x0, cfg.capacity.states, cfg.path_seed() ^ 0xC0FFEE)?;
    let states = bundle.states_at(step).to_owned();
    let (v, z, kind) = last_step_targets(cfg, &states)?;
    let (ev, ez) = capacity_gap(states.view(), v.view(), z.view(), &cfg.capacity_config())?;
    let report = CapacityReport {
        step,
        states: states.len_of(Axis(0)),
        targets: kind.to_string(),
        value_monotone: capacity_monotone(&ev),
        gradient_monotone: capacity_monotone(&ez),
        value: ev,
        gradient: ez,
    };
    write_json(&out.join(CAPACITY_JSON), &report)?;
    let mut w = BufWriter::new(File::create(out.join(CAPACITY_CSV))?);
    writeln!(w, "target,width,best,restart,error")?;
    for (name, est) in [("v", &report.value), ("z", &report.gradient)] {
        for e in &est.per_width {
            for (r, err) in e.restarts.iter().enumerate() {
                writeln!(w, "{name},{},{},{r},{}", e.width, fmt17(e.best), fmt17(*err))?;
            }
        }
    }
    w.flush()?;
    Ok(report)
}

/// Write the training bundle as CSV (`path,step,mode,value`).
pub fn run_dump_paths(cfg: &ExperimentConfig, out: &Path) -> Result<(PathBuf, PathBuf)> {
    cfg.validate()?;
    create_dir(out)?;
    let problem = cfg.build_problem()?;
    let bundle = simulate(&problem, &cfg.grid()?, &cfg.x0()?, cfg.sampling.paths, cfg.path_seed())?;
    let states = out.join("states.csv");
    let incs = out.join("increments.csv");
    bundle.write_states_csv(BufWriter::new(File::create(&states)?))?;
    bundle.write_increments_csv(BufWriter::new(File::create(&incs)?))?;
    Ok((states, incs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trend_examples() {
        assert!(assess_trend(&[5, 10, 20], &[3.0, 2.0, 1.0], &[0.1; 3]).non_increasing);
        let one_noisy = assess_trend(&[5, 10, 20], &[3.0, 2.0, 2.1], &[0.1; 3]);
        assert!(one_noisy.non_increasing);
        assert_eq!(one_noisy.noise_inversions, vec![1]);
        assert!(!assess_trend(&[5, 10, 20], &[3.0, 2.0, 2.5], &[0.1; 3]).non_increasing);
        assert!(!assess_trend(&[5, 10, 20], &[1.0, 1.05, 1.1], &[0.1; 3]).non_increasing);
    }

    #[test]
    fn schedule_is_sorted_and_deduplicated() {
        assert_eq!(normalise_schedule(&[10, 5, 10, 20]), (vec![5, 10, 20], true));
        assert_eq!(normalise_schedule(&[5, 10]), (vec![5, 10], false));
        assert_eq!(normalise_schedule(&[]), (vec![], false));
    }
}
