//! Experiment configuration: presets, JSON overrides, validation and hashing.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use dbdp_core::adam::AdamConfig;
use dbdp_core::hilbert::{CovarianceSpec, HilbertVec};
use dbdp_core::oracles::{CapacityConfig, LinearOuOracle, McConfig, ReportConfig, SolutionOracle};
use dbdp_core::paths::TimeGrid;
use dbdp_core::problem::{
    ConstantNonlinearity, ConstantTerminal, Coordinate, Discount, ModelProblem, Nonlinearity, SquaredNorm, TanhWithGradientNorm,
    Terminal, ZeroNonlinearity,
};
use dbdp_core::scheme::{NetConfig, TrainConfig};

pub const PRESETS: [&str; 3] = ["linear-ou", "discounted-ou", "nonlinear-tanh"];

/// `a_k = -scale * k^exponent`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorLaw {
    pub scale: f64,
    pub exponent: f64,
}

/// `lambda_k = scale * k^-exponent`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceLaw {
    pub scale: f64,
    pub exponent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PsiChoice {
    Zero,
    /// `psi = -r y`.
    Discount { r: f64 },
    Constant { value: f64 },
    /// `psi = tanh(y) + z_coef ||z||_0`.
    Tanh { z_coef: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PhiChoice {
    SquaredNorm,
    Constant { value: f64 },
    /// `phi(x) = x_index` (1-based).
    Coordinate { index: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialState {
    /// `x0_k = scale / k`.
    Harmonic { scale: f64 },
    Values { values: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    /// State truncation `K`.
    pub modes: usize,
    /// Noise truncation `n`.
    pub noise_modes: usize,
    pub generator: GeneratorLaw,
    pub covariance: CovarianceLaw,
    pub psi: PsiChoice,
    pub phi: PhiChoice,
    pub horizon: f64,
    pub x0: InitialState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    /// Training paths `M`.
    pub paths: usize,
    /// Fine steps per coarse step for the reference process.
    pub fine_factor: usize,
    /// Paths of the diagnostic run.
    pub report_paths: usize,
    /// Probe states for nested Monte Carlo.
    pub probes: usize,
    /// Inner samples per probe.
    pub inner: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub restarts: usize,
    pub final_lr_fraction: f64,
    pub warm_start: bool,
    pub resample_paths: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Values of `N` for `sweep-h`.
    pub schedule: Vec<usize>,
    /// Fine steps of the common reference grid (must be a multiple of every `N`).
    pub reference_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacitySettings {
    pub widths: Vec<usize>,
    pub depth: usize,
    pub epochs: usize,
    pub lr: f64,
    /// States of step `N - 1` used as regression inputs.
    pub states: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: String,
    pub problem: ProblemConfig,
    pub grid: GridConfig,
    pub sampling: SamplingConfig,
    pub nets: NetConfig,
    pub optimizer: OptimizerConfig,
    pub sweep: SweepConfig,
    pub capacity: CapacitySettings,
    pub seed: u64,
    /// Where artifacts go. Read from config files but never written into artifacts, so
    /// identical runs in different directories produce identical bytes.
    #[serde(default = "default_output_dir", skip_serializing)]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Defaults of a named preset.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let psi = match name {
        "linear-ou" => PsiChoice::Discount { r: 0.0 },
        "discounted-ou" => PsiChoice::Discount { r: 1.0 },
        "nonlinear-tanh" => PsiChoice::Tanh { z_coef: 0.1 },
        other => bail!("unknown preset `{other}` (expected one of {})", PRESETS.join(", ")),
    };
    Ok(ExperimentConfig {
        preset: name.to_string(),
        problem: ProblemConfig {
            modes: 8,
            noise_modes: 8,
            generator: GeneratorLaw {
                scale: 1.0,
                exponent: 2.0,
            },
            covariance: CovarianceLaw {
                scale: 1.0,
                exponent: 2.0,
            },
            psi,
            phi: PhiChoice::SquaredNorm,
            horizon: 0.5,
            x0: InitialState::Harmonic { scale: 2.0 },
        },
        grid: GridConfig { steps: 10 },
        sampling: SamplingConfig {
            paths: 4096,
            fine_factor: 8,
            report_paths: 4096,
            probes: 32,
            inner: 256,
        },
        nets: NetConfig::default(),
        optimizer: OptimizerConfig {
            lr: 1e-3,
            batch: 256,
            epochs: 200,
            restarts: 3,
            final_lr_fraction: 0.1,
            warm_start: true,
            resample_paths: false,
        },
        sweep: SweepConfig {
            schedule: vec![5, 10, 20],
            reference_steps: 80,
        },
        capacity: CapacitySettings {
            widths: vec![16, 64, 256],
            depth: 2,
            epochs: 300,
            lr: 3e-3,
            states: 4096,
        },
        seed: 0,
        output_dir: default_output_dir(),
    })
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    // tagged enums are replaced wholesale when the tag changes
                    Some(slot) if slot.is_object() && v.is_object() && same_tag(slot, &v) => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn same_tag(a: &Value, b: &Value) -> bool {
    match (a.get("kind"), b.get("kind")) {
        (Some(x), Some(y)) => x == y,
        _ => true,
    }
}

/// Build the effective config from a JSON document: preset defaults overlaid with the
/// document's fields, then validated. A run manifest is accepted too; its embedded
/// config is used.
pub fn config_from_json(text: &str) -> Result<ExperimentConfig> {
    let mut user: Value = serde_json::from_str(text).context("config is not valid JSON")?;
    if !user.is_object() {
        bail!("config must be a JSON object");
    }
    if user.get("config_hash").is_some() {
        if let Some(inner) = user.get_mut("config") {
            user = inner.take();
        }
    }
    let name = match user.get("preset") {
        None => "linear-ou".to_string(),
        Some(Value::String(s)) => s.clone(),
        Some(other) => bail!("preset: expected a string, got {other}"),
    };
    let mut base = serde_json::to_value(preset(&name)?)?;
    merge(&mut base, user);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(base).map_err(|e| {
        let path = e.path().to_string();
        anyhow!("config field `{path}`: {}", e.into_inner())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Read and validate a JSON config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    config_from_json(&text).with_context(|| format!("in config {}", path.display()))
}

impl ExperimentConfig {
    pub fn h(&self) -> f64 {
        self.problem.horizon / self.grid.steps as f64
    }

    pub fn psi_lipschitz(&self) -> Result<f64> {
        Ok(match &self.problem.psi {
            PsiChoice::Zero | PsiChoice::Constant { .. } => 0.0,
            PsiChoice::Discount { r } => *r,
            PsiChoice::Tanh { z_coef } => TanhWithGradientNorm { z_coef: *z_coef }.lipschitz(&self.covariance()?),
        })
    }

    pub fn covariance(&self) -> Result<CovarianceSpec<f64>> {
        let c = &self.problem.covariance;
        CovarianceSpec::power_law(self.problem.noise_modes, c.scale, c.exponent).context("problem.covariance")
    }

    pub fn generator_eigenvalues(&self) -> Vec<f64> {
        let g = &self.problem.generator;
        (1..=self.problem.modes).map(|k| -g.scale * (k as f64).powf(g.exponent)).collect()
    }

    pub fn x0(&self) -> Result<HilbertVec<f64>> {
        let k = self.problem.modes;
        let v = match &self.problem.x0 {
            InitialState::Harmonic { scale } => (1..=k).map(|j| scale / j as f64).collect(),
            InitialState::Values { values } => {
                if values.len() != k {
                    bail!("problem.x0.values: expected {k} coefficients, got {}", values.len());
                }
                values.clone()
            }
        };
        Ok(HilbertVec::from_coeffs(v)?)
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        Ok(TimeGrid::new(self.problem.horizon, self.grid.steps)?)
    }

    pub fn with_steps(&self, steps: usize) -> Self {
        let mut c = self.clone();
        c.grid.steps = steps;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.problem;
        if p.modes == 0 || p.noise_modes == 0 {
            bail!("problem.modes and problem.noise_modes must be positive");
        }
        if !(p.horizon > 0.0 && p.horizon.is_finite()) {
            bail!("problem.horizon must be positive, got {}", p.horizon);
        }
        if !(p.generator.scale >= 0.0 && p.generator.scale.is_finite()) {
            bail!("problem.generator.scale must be >= 0 so that A is dissipative");
        }
        if !(p.covariance.scale > 0.0) {
            bail!("problem.covariance.scale must be positive (every eigenvalue lambda_k > 0)");
        }
        self.covariance()?;
        if let PhiChoice::Coordinate { index } = p.phi {
            if index == 0 || index > p.modes {
                bail!("problem.phi.index must lie in 1..={}", p.modes);
            }
        }
        if let PsiChoice::Discount { r } = p.psi {
            if r < 0.0 {
                bail!("problem.psi.r must be >= 0");
            }
        }
        self.x0()?;
        if self.grid.steps == 0 {
            bail!("grid.steps must be >= 1");
        }
        let h = self.h();
        if h >= 1.0 {
            bail!("step size h = {h} must be < 1");
        }
        let lip = self.psi_lipschitz()?;
        if h * lip >= 1.0 {
            bail!("contraction condition violated: h * Lip(psi) = {h} * {lip} = {} >= 1", h * lip);
        }
        if let Some(d) = self.nets.d {
            if d == 0 || d > p.modes {
                bail!("nets.d = {d} must satisfy 1 <= d <= K = {}", p.modes);
            }
        }
        if let Some(m) = self.nets.z_modes {
            if m == 0 || m > p.noise_modes {
                bail!("nets.z_modes = {m} must satisfy 1 <= m <= n = {}", p.noise_modes);
            }
        }
        if self.nets.width == 0 || self.nets.depth == 0 {
            bail!("nets.width and nets.depth must be positive");
        }
        let s = &self.sampling;
        if s.paths < 2 || s.report_paths < 2 || s.probes == 0 || s.inner < 2 || s.fine_factor == 0 {
            bail!("sampling: need paths >= 2, report_paths >= 2, probes >= 1, inner >= 2, fine_factor >= 1");
        }
        let o = &self.optimizer;
        if o.batch == 0 || !(o.lr > 0.0) || !(o.final_lr_fraction > 0.0 && o.final_lr_fraction <= 1.0) {
            bail!("optimizer: need batch >= 1, lr > 0 and final_lr_fraction in (0, 1]");
        }
        if self.sweep.reference_steps == 0 {
            bail!("sweep.reference_steps must be positive");
        }
        if self.capacity.widths.contains(&0) || self.capacity.depth == 0 || self.capacity.states < 2 {
            bail!("capacity: widths and depth must be positive and states >= 2");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of everything that affects results (the output
    /// directory is not serialised).
    pub fn hash(&self) -> String {
        let v = serde_json::to_value(self).expect("config serialises");
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn build_problem(&self) -> Result<ModelProblem> {
        let q = self.covariance()?;
        let a = self.generator_eigenvalues();
        let psi: Arc<dyn Nonlinearity> = match &self.problem.psi {
            PsiChoice::Zero => Arc::new(ZeroNonlinearity),
            PsiChoice::Discount { r } => Arc::new(Discount { r: *r }),
            PsiChoice::Constant { value } => Arc::new(ConstantNonlinearity(*value)),
            PsiChoice::Tanh { z_coef } => Arc::new(TanhWithGradientNorm { z_coef: *z_coef }),
        };
        let phi: Arc<dyn Terminal> = match &self.problem.phi {
            PhiChoice::SquaredNorm => Arc::new(SquaredNorm),
            PhiChoice::Constant { value } => Arc::new(ConstantTerminal(*value)),
            PhiChoice::Coordinate { index } => Arc::new(Coordinate(*index)),
        };
        let lip = self.psi_lipschitz()?;
        let mut p = ModelProblem::linear_ou(a, q, 0.0, self.problem.horizon)?;
        p.psi = psi;
        p.phi = phi;
        p.psi_lipschitz = lip;
        Ok(p)
    }

    /// Closed-form solution when the problem is the (discounted) linear OU benchmark.
    pub fn exact_oracle(&self) -> Result<Option<LinearOuOracle>> {
        let r = match (&self.problem.psi, &self.problem.phi) {
            (PsiChoice::Zero, PhiChoice::SquaredNorm) => 0.0,
            (PsiChoice::Discount { r }, PhiChoice::SquaredNorm) => *r,
            _ => return Ok(None),
        };
        Ok(Some(LinearOuOracle::new(
            self.generator_eigenvalues(),
            &self.covariance()?,
            r,
            self.problem.horizon,
        )?))
    }

    pub fn oracle(&self) -> Result<Option<Arc<dyn SolutionOracle>>> {
        Ok(self.exact_oracle()?.map(|o| Arc::new(o) as Arc<dyn SolutionOracle>))
    }

    pub fn train_config(&self) -> TrainConfig {
        let o = &self.optimizer;
        TrainConfig {
            epochs: o.epochs,
            batch: o.batch,
            adam: AdamConfig::with_lr(o.lr),
            final_lr_fraction: o.final_lr_fraction,
            warm_start: o.warm_start,
            resample_paths: o.resample_paths,
            seed: self.seed,
        }
    }

    pub fn report_config(&self, fine_factor: usize) -> ReportConfig {
        ReportConfig {
            fine_factor,
            paths: self.sampling.report_paths,
            probes: self.sampling.probes,
            inner: self.sampling.inner,
            seed: self.seed ^ 0x5_EED0_FDA6,
        }
    }

    pub fn capacity_config(&self) -> CapacityConfig {
        let mut c = CapacityConfig {
            widths: self.capacity.widths.clone(),
            depth: self.capacity.depth,
            restarts: self.optimizer.restarts.max(1),
            ..CapacityConfig::default()
        };
        c.training.epochs = self.capacity.epochs;
        c.training.adam = AdamConfig::with_lr(self.capacity.lr);
        c.training.seed = self.seed;
        c
    }

    pub fn mc_config(&self) -> McConfig {
        McConfig {
            seed: self.seed ^ 0x0AC1E,
            ..McConfig::default()
        }
    }

    /// Seed of the training path bundle.
    pub fn path_seed(&self) -> u64 {
        self.seed
    }
}
