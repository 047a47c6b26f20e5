//! Experiment configuration files.
//!
//! Configurations are TOML documents. Every table is optional and falls back
//! to the defaults below; unknown keys are rejected.
//!
//! ```toml
//! mode = "oes"            # or "pdplus"
//! seed = 0
//! workers = 1
//! output_dir = "runs/exp1_oes"
//!
//! [plant]                 # m, r, k, beta, inertia, gravity
//! [controller]            # conditioning, potential_hidden, potential_activations,
//!                         # gain_hidden, gain_activations, gain_output, zero_init
//! [pd]                    # k_p, k_d, init_range
//! [cost]                  # variant, gamma, horizon, target, sigma2, q_weights, smoothing
//! [sampler]               # q_range, p_range, target_q_range, target_p_range,
//!                         # batch_size, targets_per_sample
//! [solver]                # training tolerances: rtol, atol, initial_step, max_steps, ...
//! [train]                 # iterations, learning_rate, beta1, beta2, adam_eps,
//!                         # stop_window, stop_rtol, max_failure_fraction,
//!                         # checkpoint_every, grad_mode
//! [eval]                  # n_trajectories, seed, targets, write_trajectories, solver
//! [landscape]             # q_range, q_points, p_range, p_points, times,
//!                         # target_range, target_points
//! [pareto]                # gammas, seeds, iterations, batch_size, eval_trajectories
//! ```

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adjoint::GradMode;
use crate::controller::{Conditioning, OesArchitecture};
use crate::error::{Error, Result};
use crate::neural::{Activation, OutputActivation};
use crate::ode::SolverConfig;
use crate::optimize::{CostSpec, CostVariant, SamplerConfig, TrainConfig};
use crate::ph::PendulumParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Oes,
    Pdplus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    pub conditioning: Conditioning,
    pub potential_hidden: Vec<usize>,
    pub potential_activations: Vec<Activation>,
    pub gain_hidden: Vec<usize>,
    pub gain_activations: Vec<Activation>,
    pub gain_output: OutputActivation,
    /// Zero the output layers after Xavier initialization.
    pub zero_init: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            conditioning: Conditioning::TimeVarying,
            potential_hidden: vec![64, 64],
            potential_activations: vec![Activation::Softplus, Activation::Tanh],
            gain_hidden: vec![64],
            gain_activations: vec![Activation::Softplus],
            gain_output: OutputActivation::Relu,
            zero_init: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PdConfig {
    pub k_p: f64,
    pub k_d: f64,
    /// When set, initial gains are drawn uniformly from this interval instead.
    pub init_range: Option<[f64; 2]>,
}

impl Default for PdConfig {
    fn default() -> Self {
        Self { k_p: 0.0, k_d: 0.0, init_range: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Initial conditions per target.
    pub n_trajectories: usize,
    pub seed: u64,
    /// Set points to evaluate for the set-point cost; the regulation target
    /// is used when empty.
    pub targets: Vec<f64>,
    pub write_trajectories: bool,
    pub solver: SolverConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_trajectories: 100,
            seed: 1_000_003,
            targets: Vec::new(),
            write_trajectories: true,
            solver: SolverConfig::with_tolerances(1e-8, 1e-8),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LandscapeConfig {
    pub q_range: [f64; 2],
    pub q_points: usize,
    pub p_range: [f64; 2],
    pub p_points: usize,
    /// Time slices of the gain grid.
    pub times: Vec<f64>,
    pub target_range: [f64; 2],
    pub target_points: usize,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        Self {
            q_range: [-2.0 * PI, 2.0 * PI],
            q_points: 401,
            p_range: [-2.0 * PI, 2.0 * PI],
            p_points: 101,
            times: vec![0.0, 1.5, 3.0],
            target_range: [-PI, PI],
            target_points: 61,
        }
    }
}

impl LandscapeConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r, n) in [
            ("q", self.q_range, self.q_points),
            ("p", self.p_range, self.p_points),
            ("target", self.target_range, self.target_points),
        ] {
            if !(r[0] < r[1]) || n < 2 {
                return Err(Error::Config(format!("landscape {name} grid needs a non-empty range and at least 2 points")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParetoConfig {
    pub gammas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Overrides `train.iterations` for every sweep run.
    pub iterations: Option<usize>,
    /// Overrides `sampler.batch_size` for every sweep run.
    pub batch_size: Option<usize>,
    /// Fresh initial conditions used to score each trained run.
    pub eval_trajectories: usize,
    /// Initial PD gains are drawn uniformly from this interval.
    pub pd_init_range: [f64; 2],
}

impl Default for ParetoConfig {
    fn default() -> Self {
        Self {
            gammas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            seeds: vec![0, 1, 2, 3, 4],
            iterations: None,
            batch_size: None,
            eval_trajectories: 128,
            pd_init_range: [0.0, 2.0],
        }
    }
}

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    pub workers: usize,
    pub output_dir: PathBuf,
    pub plant: PendulumParams,
    pub controller: ControllerConfig,
    pub pd: PdConfig,
    pub cost: CostSpec,
    pub sampler: SamplerConfig,
    /// Solver used during training.
    pub solver: SolverConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub landscape: LandscapeConfig,
    pub pareto: ParetoConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Oes,
            seed: 0,
            workers: 1,
            output_dir: PathBuf::from("runs/default"),
            plant: PendulumParams::default(),
            controller: ControllerConfig::default(),
            pd: PdConfig::default(),
            cost: CostSpec::default(),
            sampler: SamplerConfig::default(),
            solver: SolverConfig::with_tolerances(1e-5, 1e-5),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            landscape: LandscapeConfig::default(),
            pareto: ParetoConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn architecture(&self) -> Result<OesArchitecture> {
        let c = &self.controller;
        OesArchitecture::new(
            1,
            c.conditioning,
            self.cost.horizon,
            c.potential_hidden.clone(),
            c.potential_activations.clone(),
            c.gain_hidden.clone(),
            c.gain_activations.clone(),
            c.gain_output,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |what: &str, e: Error| Error::Config(format!("[{what}] {e}"));
        self.plant.validate().map_err(|e| wrap("plant", e))?;
        self.cost.validate().map_err(|e| wrap("cost", e))?;
        self.sampler.validate().map_err(|e| wrap("sampler", e))?;
        self.solver.validate().map_err(|e| wrap("solver", e))?;
        self.eval.solver.validate().map_err(|e| wrap("eval.solver", e))?;
        self.train.validate().map_err(|e| wrap("train", e))?;
        self.landscape.validate()?;
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.mode == Mode::Oes {
            self.architecture().map_err(|e| wrap("controller", e))?;
            let wants_target = self.controller.conditioning == Conditioning::SetPoint;
            let has_targets = self.cost.variant == CostVariant::SetpointQuadratic;
            if wants_target != has_targets {
                return Err(Error::Config(
                    "set-point conditioning and the set-point cost must be used together".into(),
                ));
            }
        }
        if self.mode == Mode::Pdplus && !(self.pd.k_p >= 0.0 && self.pd.k_d >= 0.0) {
            return Err(Error::Config("[pd] gains must be non-negative".into()));
        }
        for r in self.pd.init_range.iter().chain(std::iter::once(&self.pareto.pd_init_range)) {
            if !(r[0] >= 0.0 && r[0] < r[1]) {
                return Err(Error::Config(format!("PD initialization range {r:?} must be a non-empty non-negative interval")));
            }
        }
        if self.pareto.gammas.iter().any(|g| !(*g >= 0.0)) {
            return Err(Error::Config("[pareto] gammas must be non-negative".into()));
        }
        if self.eval.n_trajectories == 0 {
            return Err(Error::Config("[eval] n_trajectories must be positive".into()));
        }
        Ok(())
    }

    /// Seed of the sampler stream; distinct from the initialization stream.
    pub fn sampler_seed(&self) -> u64 {
        self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1)
    }
}

/// Parses `RTOL:ATOL`.
pub fn parse_tolerance(s: &str) -> Result<(f64, f64)> {
    let (r, a) = s
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("tolerance must look like RTOL:ATOL, got {s:?}")))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<f64>()
            .ok()
            .filter(|x| *x > 0.0 && x.is_finite())
            .ok_or_else(|| Error::Config(format!("invalid tolerance {v:?}")))
    };
    Ok((parse(r)?, parse(a)?))
}

/// Overrides applied on top of a configuration file, from flags or the
/// environment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub tolerance: Option<(f64, f64)>,
}

impl Overrides {
    /// Applies the overrides; the tolerance goes to the training solver.
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(o) = &self.output_dir {
            cfg.output_dir = o.clone();
        }
        if let Some((r, a)) = self.tolerance {
            cfg.solver.rtol = r;
            cfg.solver.atol = a;
        }
    }
}

impl GradMode {
    pub fn name(self) -> &'static str {
        match self {
            GradMode::Reversible => "reversible",
            GradMode::Checkpointed => "checkpointed",
            GradMode::Auto => "auto",
        }
    }
}
