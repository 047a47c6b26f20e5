//! Costs, sampling, parameter updates and training loops for the pendulum.
//!
//! A [`ClosedLoopTask`] couples the pendulum, a [`PendulumPolicy`] and a
//! [`CostSpec`] into an [`AdjointProblem`]. [`train`] repeatedly samples a
//! batch of initial conditions (and set points), averages the per-sample
//! adjoint gradients and applies an [`AdamState`] update.

use std::f64::consts::PI;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{self, AdjointProblem, GradMode};
use crate::controller::PendulumPolicy;
use crate::error::{check_dim, Error, Result};
use crate::ode::{Dopri5, OdeSystem, Record, SolverConfig, Trajectory};
use crate::ph::PendulumParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostVariant {
    /// Gaussian negative log-likelihood of `x(T)` around `(q*, 0)` plus
    /// `gamma * int |u| dt`.
    RegulationNll,
    /// `(x(T) - x*)^T Q (x(T) - x*)` plus `gamma * int u^2 / 2 dt`.
    SetpointQuadratic,
}

/// Trajectory cost definition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostSpec {
    pub variant: CostVariant,
    /// Effort weight.
    pub gamma: f64,
    pub horizon: f64,
    /// Regulation set point `q*`.
    pub target: f64,
    /// Variance of the regulation target density.
    pub sigma2: f64,
    /// Diagonal of `Q` for the set-point cost.
    pub q_weights: [f64; 2],
    /// Smoothing of `|u|` used for gradients: `sqrt(u^2 + eps^2) - eps`.
    pub smoothing: f64,
}

impl Default for CostSpec {
    fn default() -> Self {
        Self {
            variant: CostVariant::RegulationNll,
            gamma: 0.01,
            horizon: 3.0,
            target: 0.0,
            sigma2: 1e-3,
            q_weights: [10.0, 1.0],
            smoothing: 1e-6,
        }
    }
}

impl CostSpec {
    pub fn regulation(gamma: f64, horizon: f64) -> Self {
        Self { gamma, horizon, ..Self::default() }
    }

    pub fn setpoint(gamma: f64, horizon: f64) -> Self {
        Self { variant: CostVariant::SetpointQuadratic, gamma, horizon, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Invalid(format!("effort weight must be non-negative, got {}", self.gamma)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Invalid(format!("horizon must be positive, got {}", self.horizon)));
        }
        if !(self.sigma2 > 0.0) {
            return Err(Error::Invalid(format!("target variance must be positive, got {}", self.sigma2)));
        }
        if self.q_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Invalid("terminal weights must be non-negative".into()));
        }
        if !(self.smoothing >= 0.0) {
            return Err(Error::Invalid("effort smoothing must be non-negative".into()));
        }
        Ok(())
    }

    /// Smallest attainable terminal cost.
    pub fn terminal_floor(&self) -> f64 {
        match self.variant {
            CostVariant::RegulationNll => (2.0 * PI * self.sigma2).ln(),
            CostVariant::SetpointQuadratic => 0.0,
        }
    }

    /// Terminal cost and its gradient with respect to `x(T)`.
    pub fn terminal(&self, x: [f64; 2], target: [f64; 2]) -> (f64, [f64; 2]) {
        let e = [x[0] - target[0], x[1] - target[1]];
        match self.variant {
            CostVariant::RegulationNll => {
                let s = 1.0 / self.sigma2;
                (0.5 * s * (e[0] * e[0] + e[1] * e[1]) + self.terminal_floor(), [s * e[0], s * e[1]])
            }
            CostVariant::SetpointQuadratic => {
                let [w0, w1] = self.q_weights;
                (w0 * e[0] * e[0] + w1 * e[1] * e[1], [2.0 * w0 * e[0], 2.0 * w1 * e[1]])
            }
        }
    }

    /// Effort integrand and its derivative in `u`, with smoothing `eps`.
    pub fn effort(&self, u: f64, eps: f64) -> (f64, f64) {
        match self.variant {
            CostVariant::RegulationNll => {
                if eps > 0.0 {
                    let r = u.hypot(eps);
                    (r - eps, u / r)
                } else {
                    (u.abs(), u.signum())
                }
            }
            CostVariant::SetpointQuadratic => (0.5 * u * u, u),
        }
    }

    /// Target of a regulation task.
    pub fn regulation_target(&self) -> [f64; 2] {
        [self.target, 0.0]
    }
}

/// Terminal and integral parts of a regulation cost, from the final state and
/// the effort integral `int |u| dt`.
pub fn regulation_cost(cost: &CostSpec, x_t: [f64; 2], effort_integral: f64) -> (f64, f64) {
    (cost.terminal(x_t, cost.regulation_target()).0, effort_integral)
}

/// Set-point cost averaged over targets: `mean_j e_j^T Q e_j + int u^2 / 2 dt`.
pub fn setpoint_cost(cost: &CostSpec, x_t: [f64; 2], targets: &[[f64; 2]], half_square_integral: f64) -> f64 {
    let sp = CostSpec { variant: CostVariant::SetpointQuadratic, ..*cost };
    let terminal = targets.iter().map(|t| sp.terminal(x_t, *t).0).sum::<f64>() / targets.len().max(1) as f64;
    terminal + half_square_integral
}

/// Box distributions of initial conditions and set points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub q_range: [f64; 2],
    pub p_range: [f64; 2],
    pub target_q_range: [f64; 2],
    pub target_p_range: [f64; 2],
    /// Initial conditions per batch.
    pub batch_size: usize,
    /// Set points drawn per initial condition (set-point cost only).
    pub targets_per_sample: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            q_range: [-2.0 * PI, 2.0 * PI],
            p_range: [-2.0 * PI, 2.0 * PI],
            target_q_range: [-2.0 * PI, 2.0 * PI],
            target_p_range: [-1e-4, 1e-4],
            batch_size: 256,
            targets_per_sample: 1,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("q_range", self.q_range),
            ("p_range", self.p_range),
            ("target_q_range", self.target_q_range),
            ("target_p_range", self.target_p_range),
        ] {
            if !(r[0] < r[1] && r[0].is_finite() && r[1].is_finite()) {
                return Err(Error::Invalid(format!("{name} must be a non-empty interval, got {r:?}")));
            }
        }
        if self.batch_size == 0 || self.targets_per_sample == 0 {
            return Err(Error::Invalid("batch sizes must be at least one".into()));
        }
        Ok(())
    }
}

/// One trajectory to simulate: an initial condition and its target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x0: [f64; 2],
    pub target: [f64; 2],
}

/// Seeded uniform sampler.
#[derive(Debug, Clone)]
pub struct Sampler {
    cfg: SamplerConfig,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(cfg: SamplerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, rng: ChaCha8Rng::seed_from_u64(cfg.seed) })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    fn draw(&mut self, r: [f64; 2]) -> f64 {
        self.rng.gen_range(r[0]..r[1])
    }

    pub fn initial_condition(&mut self) -> [f64; 2] {
        [self.draw(self.cfg.q_range), self.draw(self.cfg.p_range)]
    }

    pub fn target(&mut self) -> [f64; 2] {
        [self.draw(self.cfg.target_q_range), self.draw(self.cfg.target_p_range)]
    }

    /// A training batch for `cost`: `batch_size` initial conditions, each
    /// paired with `targets_per_sample` sampled set points for the set-point
    /// cost or with the fixed regulation target.
    pub fn sample_batch(&mut self, cost: &CostSpec) -> Vec<Sample> {
        let n = self.cfg.batch_size;
        let mut out = Vec::with_capacity(n * self.cfg.targets_per_sample);
        for _ in 0..n {
            let x0 = self.initial_condition();
            match cost.variant {
                CostVariant::RegulationNll => out.push(Sample { x0, target: cost.regulation_target() }),
                CostVariant::SetpointQuadratic => {
                    for _ in 0..self.cfg.targets_per_sample {
                        let target = self.target();
                        out.push(Sample { x0, target });
                    }
                }
            }
        }
        out
    }
}

/// Adam optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { step: 0, m: vec![0.0; n], v: vec![0.0; n], lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One bias-corrected update. A non-finite gradient leaves both the state
    /// and `theta` untouched and is reported as an error.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) -> Result<()> {
        check_dim("parameters", self.m.len(), theta.len())?;
        check_dim("gradient", self.m.len(), grad.len())?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            theta[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Plain gradient step `theta -= lr * grad`.
pub fn sgd_step(theta: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
    check_dim("gradient", theta.len(), grad.len())?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    theta.iter_mut().zip(grad).for_each(|(t, g)| *t -= lr * g);
    Ok(())
}

/// The closed-loop pendulum under `policy`, scored by `cost` for one target.
pub struct ClosedLoopTask<'a, P: ?Sized> {
    pub plant: PendulumParams,
    pub policy: &'a P,
    pub cost: CostSpec,
    pub target: [f64; 2],
    /// Smoothing of `|u|`; zero gives the exact integrand.
    pub smoothing: f64,
}

impl<'a, P: PendulumPolicy + ?Sized> ClosedLoopTask<'a, P> {
    pub fn new(plant: PendulumParams, policy: &'a P, cost: CostSpec, target: [f64; 2]) -> Self {
        Self { plant, policy, cost, target, smoothing: cost.smoothing }
    }

    /// Same task with the exact (unsmoothed) effort integrand.
    pub fn exact(&self) -> Self {
        Self { smoothing: 0.0, ..*self }
    }
}

impl<P: ?Sized> Clone for ClosedLoopTask<'_, P> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<P: ?Sized> Copy for ClosedLoopTask<'_, P> {}

impl<P: PendulumPolicy + ?Sized> AdjointProblem for ClosedLoopTask<'_, P> {
    fn state_dim(&self) -> usize {
        2
    }
    fn param_dim(&self) -> usize {
        self.policy.n_params()
    }
    fn horizon(&self) -> f64 {
        self.cost.horizon
    }

    fn field(&self, theta: &[f64], t: f64, x: &[f64], dx: &mut [f64]) -> Result<f64> {
        let u = self.policy.control(theta, t, x[0], x[1], self.target[0])?;
        let f = self.plant.field(x[0], x[1], u);
        dx[0] = f[0];
        dx[1] = f[1];
        Ok(self.cost.gamma * self.cost.effort(u, self.smoothing).0)
    }

    fn terminal_cost(&self, _theta: &[f64], x: &[f64]) -> Result<f64> {
        Ok(self.cost.terminal([x[0], x[1]], self.target).0)
    }

    fn terminal_gradient(&self, _theta: &[f64], x: &[f64], grad_x: &mut [f64], _grad_theta: &mut [f64]) -> Result<()> {
        let g = self.cost.terminal([x[0], x[1]], self.target).1;
        grad_x.copy_from_slice(&g);
        Ok(())
    }

    fn adjoint_terms(
        &self,
        theta: &[f64],
        t: f64,
        x: &[f64],
        lam: &[f64],
        dx: &mut [f64],
        a_x: &mut [f64],
        a_theta: &mut [f64],
    ) -> Result<()> {
        let (q, p) = (x[0], x[1]);
        let (lq, lp) = (lam[0], lam[1]);
        let gamma = self.cost.gamma;
        let (cost, eps) = (self.cost, self.smoothing);
        // The control enters f only through p' and the running cost through
        // effort(u), so both share the cotangent w.
        let mut w = 0.0;
        let cp = self.policy.control_adjoint(
            theta,
            t,
            q,
            p,
            self.target[0],
            &mut |u| {
                w = lp + gamma * cost.effort(u, eps).1;
                w
            },
            a_theta,
        )?;
        let j = self.plant.inertia;
        let f = self.plant.field(q, p, cp.u);
        dx[0] = f[0];
        dx[1] = f[1];
        a_x[0] = -lp * self.plant.potential_curvature(q) + w * cp.du_dq;
        a_x[1] = lq / j - lp * self.plant.beta / j + w * cp.du_dp;
        Ok(())
    }
}

/// Batch-averaged loss and gradient.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub loss: f64,
    pub terminal: f64,
    /// Mean effort integral (without the weight).
    pub integral: f64,
    pub grad: Vec<f64>,
    pub failed: usize,
    pub total: usize,
    pub first_error: Option<String>,
    pub max_reconstruction_error: f64,
}

/// Builds a thread pool with `workers` threads.
pub fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))
}

/// Averages per-sample adjoint gradients over the successful samples.
///
/// Per-sample results are reduced sequentially in sample order, so the
/// result does not depend on the number of workers.
#[allow(clippy::too_many_arguments)]
pub fn batch_gradient<P: PendulumPolicy + ?Sized>(
    plant: &PendulumParams,
    policy: &P,
    cost: &CostSpec,
    theta: &[f64],
    samples: &[Sample],
    solver: &SolverConfig,
    mode: GradMode,
    pool: &rayon::ThreadPool,
) -> BatchGradient {
    let results: Vec<Result<adjoint::Gradient>> = pool.install(|| {
        samples
            .par_iter()
            .map(|s| {
                let task = ClosedLoopTask::new(*plant, policy, *cost, s.target);
                adjoint::grad(&task, theta, &s.x0, solver, mode)
            })
            .collect()
    });
    let mut out = BatchGradient {
        loss: 0.0,
        terminal: 0.0,
        integral: 0.0,
        grad: vec![0.0; theta.len()],
        failed: 0,
        total: samples.len(),
        first_error: None,
        max_reconstruction_error: 0.0,
    };
    let mut ok = 0usize;
    for r in results {
        match r {
            Ok(g) if g.grad.iter().all(|v| v.is_finite()) && g.loss.is_finite() => {
                ok += 1;
                out.loss += g.loss;
                out.terminal += g.terminal;
                out.integral += if cost.gamma > 0.0 { g.running / cost.gamma } else { 0.0 };
                out.max_reconstruction_error = out.max_reconstruction_error.max(g.reconstruction_error);
                out.grad.iter_mut().zip(&g.grad).for_each(|(a, b)| *a += b);
            }
            Ok(_) => {
                out.failed += 1;
                out.first_error.get_or_insert_with(|| "non-finite gradient".into());
            }
            Err(e) => {
                out.failed += 1;
                out.first_error.get_or_insert_with(|| e.to_string());
            }
        }
    }
    if ok > 0 {
        let inv = 1.0 / ok as f64;
        out.loss *= inv;
        out.terminal *= inv;
        out.integral *= inv;
        out.grad.iter_mut().for_each(|g| *g *= inv);
    }
    out
}

/// Training-loop settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// When set, the step size follows a cosine decay from `learning_rate`
    /// at the first iteration to this value at the last.
    pub final_learning_rate: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Stop when the relative loss change over `stop_window` iterations falls
    /// below `stop_rtol`.
    pub stop_window: usize,
    pub stop_rtol: f64,
    /// Abort when more than this fraction of a batch fails.
    pub max_failure_fraction: f64,
    /// Iterations between checkpoints; zero disables intermediate checkpoints.
    pub checkpoint_every: usize,
    pub grad_mode: GradMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            learning_rate: 1e-3,
            final_learning_rate: None,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            stop_window: 20,
            stop_rtol: 1e-4,
            max_failure_fraction: 0.1,
            checkpoint_every: 0,
            grad_mode: GradMode::Auto,
        }
    }
}

impl TrainConfig {
    /// Step size used at iteration `iter`.
    pub fn learning_rate_at(&self, iter: usize) -> f64 {
        match self.final_learning_rate {
            Some(end) if self.iterations > 1 => {
                let frac = iter.min(self.iterations - 1) as f64 / (self.iterations - 1) as f64;
                end + 0.5 * (self.learning_rate - end) * (1.0 + (std::f64::consts::PI * frac).cos())
            }
            _ => self.learning_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Invalid("learning rate must be positive".into()));
        }
        if let Some(lr) = self.final_learning_rate {
            if !(lr > 0.0 && lr <= self.learning_rate) {
                return Err(Error::Invalid("final learning rate must lie in (0, learning_rate]".into()));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Invalid("Adam moments must lie in [0, 1) and eps be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            return Err(Error::Invalid("failure fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub loss: f64,
    pub terminal: f64,
    pub integral: f64,
    pub wallclock_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub theta: Vec<f64>,
    pub history: Vec<IterRecord>,
    /// Whether the relative-change rule ended training early.
    pub converged: bool,
    pub skipped_updates: usize,
}

/// Runs Adam on batch-averaged adjoint gradients.
///
/// `on_iter` sees each iteration's record together with the parameters after
/// the update.
#[allow(clippy::too_many_arguments)]
pub fn train<P: PendulumPolicy + ?Sized>(
    plant: &PendulumParams,
    policy: &P,
    cost: &CostSpec,
    theta0: Vec<f64>,
    sampler: &mut Sampler,
    cfg: &TrainConfig,
    solver: &SolverConfig,
    workers: usize,
    on_iter: &mut dyn FnMut(&IterRecord, &[f64]) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    cost.validate()?;
    plant.validate()?;
    check_dim("initial parameters", policy.n_params(), theta0.len())?;
    let pool = thread_pool(workers)?;
    let mut theta = theta0;
    policy.project(&mut theta);
    let mut adam = AdamState { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.adam_eps, ..AdamState::new(theta.len(), cfg.learning_rate) };
    let start = Instant::now();
    let mut history: Vec<IterRecord> = Vec::with_capacity(cfg.iterations);
    let mut converged = false;
    let mut skipped = 0;
    for iter in 0..cfg.iterations {
        let batch = sampler.sample_batch(cost);
        let bg = batch_gradient(plant, policy, cost, &theta, &batch, solver, cfg.grad_mode, &pool);
        if bg.failed as f64 > cfg.max_failure_fraction * bg.total as f64 {
            return Err(Error::BatchFailure {
                failed: bg.failed,
                total: bg.total,
                first: bg.first_error.unwrap_or_default(),
            });
        }
        if bg.failed > 0 {
            log::warn!("iteration {iter}: {} of {} samples failed ({})", bg.failed, bg.total, bg.first_error.as_deref().unwrap_or(""));
        }
        adam.lr = cfg.learning_rate_at(iter);
        match adam.step(&mut theta, &bg.grad) {
            Ok(()) => policy.project(&mut theta),
            Err(e) => {
                skipped += 1;
                log::warn!("iteration {iter}: update skipped: {e}");
            }
        }
        let rec = IterRecord {
            iter,
            loss: bg.loss,
            terminal: bg.terminal,
            integral: bg.integral,
            wallclock_s: start.elapsed().as_secs_f64(),
        };
        log::info!("iter {iter:4} loss {:.6} terminal {:.6} integral {:.6}", rec.loss, rec.terminal, rec.integral);
        on_iter(&rec, &theta)?;
        history.push(rec);
        if cfg.stop_window > 0 && history.len() > cfg.stop_window {
            let old = history[history.len() - 1 - cfg.stop_window].loss;
            if ((rec.loss - old) / old.abs().max(f64::MIN_POSITIVE)).abs() < cfg.stop_rtol {
                converged = true;
                break;
            }
        }
    }
    Ok(TrainOutcome { theta, history, converged, skipped_updates: skipped })
}

/// Outcome of simulating one sample at evaluation accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalRecord {
    pub x0: [f64; 2],
    pub target: [f64; 2],
    pub x_t: [f64; 2],
    pub terminal: f64,
    /// Unweighted exact effort integral.
    pub integral: f64,
}

/// Terminal cost and exact effort integral of every sample; failures are
/// returned in place.
pub fn evaluate<P: PendulumPolicy + ?Sized>(
    plant: &PendulumParams,
    policy: &P,
    cost: &CostSpec,
    theta: &[f64],
    samples: &[Sample],
    solver: &SolverConfig,
    pool: &rayon::ThreadPool,
) -> Vec<Result<EvalRecord>> {
    let unit = CostSpec { gamma: 1.0, ..*cost };
    pool.install(|| {
        samples
            .par_iter()
            .map(|s| {
                let task = ClosedLoopTask::new(*plant, policy, unit, s.target).exact();
                let (v, traj) = adjoint::loss(&task, theta, &s.x0, solver)?;
                let z = traj.final_state();
                Ok(EvalRecord { x0: s.x0, target: s.target, x_t: [z[0], z[1]], terminal: v.terminal, integral: v.running })
            })
            .collect()
    })
}

/// Mean terminal and integral cost over successful records.
pub fn mean_costs(records: &[Result<EvalRecord>]) -> Option<(f64, f64)> {
    let ok: Vec<_> = records.iter().filter_map(|r| r.as_ref().ok()).collect();
    if ok.is_empty() {
        return None;
    }
    let n = ok.len() as f64;
    Some((ok.iter().map(|r| r.terminal).sum::<f64>() / n, ok.iter().map(|r| r.integral).sum::<f64>() / n))
}

/// Closed-loop simulation keeping every accepted step, the dense output and
/// the control at each recorded time.
pub fn simulate<P: PendulumPolicy + ?Sized>(
    plant: &PendulumParams,
    policy: &P,
    theta: &[f64],
    x0: [f64; 2],
    target: [f64; 2],
    horizon: f64,
    solver: &SolverConfig,
) -> Result<(Trajectory, Vec<f64>)> {
    struct Closed<'a, P: ?Sized> {
        plant: &'a PendulumParams,
        policy: &'a P,
        theta: &'a [f64],
        target: f64,
    }
    impl<P: PendulumPolicy + ?Sized> OdeSystem for Closed<'_, P> {
        fn dim(&self) -> usize {
            2
        }
        fn rhs(&mut self, t: f64, x: &[f64], dx: &mut [f64]) -> Result<()> {
            let u = self.policy.control(self.theta, t, x[0], x[1], self.target)?;
            dx.copy_from_slice(&self.plant.field(x[0], x[1], u));
            Ok(())
        }
    }
    let mut sys = Closed { plant, policy, theta, target: target[0] };
    let traj = Dopri5::new(*solver)?.integrate(&mut sys, 0.0, horizon, &x0, Record::Dense)?;
    let controls = traj
        .times
        .iter()
        .zip(&traj.states)
        .map(|(t, x)| policy.control(theta, *t, x[0], x[1], target[0]))
        .collect::<Result<Vec<_>>>()?;
    Ok((traj, controls))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Oes,
    Pdplus,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Oes => "oes",
            Method::Pdplus => "pdplus",
        }
    }
}

/// One row of a Pareto sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParetoRow {
    pub method: Method,
    pub gamma: f64,
    pub seed: u64,
    pub terminal: f64,
    pub integral: f64,
    /// `ok` or the error message of a failed run.
    pub status: String,
}

/// Runs `run(method, gamma, seed)` for every combination; failures are
/// recorded in the row status.
pub fn pareto_sweep(
    gammas: &[f64],
    seeds: &[u64],
    mut run: impl FnMut(Method, f64, u64) -> Result<(f64, f64)>,
) -> Vec<ParetoRow> {
    let mut rows = Vec::with_capacity(gammas.len() * seeds.len() * 2);
    for &gamma in gammas {
        for &seed in seeds {
            for method in [Method::Oes, Method::Pdplus] {
                let row = match run(method, gamma, seed) {
                    Ok((terminal, integral)) => ParetoRow { method, gamma, seed, terminal, integral, status: "ok".into() },
                    Err(e) => ParetoRow {
                        method,
                        gamma,
                        seed,
                        terminal: f64::NAN,
                        integral: f64::NAN,
                        status: e.to_string().replace([',', '\n'], ";"),
                    },
                };
                log::info!("pareto {} gamma {gamma} seed {seed}: {:?}", method.name(), (row.terminal, row.integral));
                rows.push(row);
            }
        }
    }
    rows
}

/// `a` Pareto-dominates `b` when it is no worse in both objectives and
/// strictly better in one (both minimized).
pub fn dominates(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 <= b.0 && a.1 <= b.1 && (a.0 < b.0 || a.1 < b.1)
}

/// Per-gamma mean point of each method and whether the PD+ mean dominates the
/// OES mean.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DominanceRow {
    pub gamma: f64,
    pub oes: (f64, f64),
    pub pdplus: (f64, f64),
    pub oes_dominated: bool,
}

pub fn dominance_table(rows: &[ParetoRow]) -> Vec<DominanceRow> {
    let mut gammas: Vec<f64> = rows.iter().map(|r| r.gamma).collect();
    gammas.sort_by(f64::total_cmp);
    gammas.dedup();
    let mean = |m: Method, g: f64| {
        let pts: Vec<_> = rows.iter().filter(|r| r.method == m && r.gamma == g && r.status == "ok").collect();
        let n = pts.len() as f64;
        if pts.is_empty() {
            return (f64::NAN, f64::NAN);
        }
        (pts.iter().map(|r| r.terminal).sum::<f64>() / n, pts.iter().map(|r| r.integral).sum::<f64>() / n)
    };
    gammas
        .into_iter()
        .map(|g| {
            let (o, p) = (mean(Method::Oes, g), mean(Method::Pdplus, g));
            DominanceRow { gamma: g, oes: o, pdplus: p, oes_dominated: o.0.is_nan() || dominates(p, o) }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::{Conditioning, OesArchitecture, OesPendulum, PdPlusPolicy};
    use crate::neural::{Activation, OutputActivation};
    use approx::assert_abs_diff_eq;

    #[test]
    fn cost_examples() {
        let c = CostSpec::regulation(0.01, 3.0);
        assert_abs_diff_eq!(c.terminal([0.0, 0.0], [0.0, 0.0]).0, (2.0 * PI * 1e-3).ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(c.terminal_floor(), -5.06988, epsilon = 1e-5);
        assert_eq!(regulation_cost(&c, [0.0, 0.0], 0.0).1, 0.0);
        assert!(c.terminal([0.01, -0.02], [0.0, 0.0]).0 > c.terminal_floor());
        let s = CostSpec::setpoint(1.0, 1.0);
        assert_eq!(setpoint_cost(&s, [1.0, 0.0], &[[1.0, 0.0]], 0.0), 0.0);
        assert_eq!(setpoint_cost(&s, [1.0, 0.0], &[[0.0, 0.0]], 0.0), 10.0);
        assert_eq!(setpoint_cost(&s, [0.0, 2.0], &[[0.0, 0.0]], 0.0), 4.0);
        let (v, d) = c.effort(-2.0, 1e-6);
        assert_abs_diff_eq!(v, 2.0 - 1e-6, epsilon = 1e-12);
        assert_abs_diff_eq!(d, -1.0, epsilon = 1e-9);
        assert_eq!(c.effort(0.0, 1e-6), (0.0, 0.0));
        assert!(CostSpec { sigma2: 0.0, ..c }.validate().is_err());
    }

    #[test]
    fn sampler_is_seeded_and_bounded() {
        let cfg = SamplerConfig { batch_size: 2048, seed: 11, ..Default::default() };
        let a = Sampler::new(cfg).unwrap().sample_batch(&CostSpec::default());
        let b = Sampler::new(cfg).unwrap().sample_batch(&CostSpec::default());
        assert_eq!(a, b);
        let lim = 2.0 * PI;
        assert!(a.iter().all(|s| s.x0.iter().all(|v| v.abs() <= lim) && s.target == [0.0, 0.0]));
        // Uniform on [-2 pi, 2 pi]: standard deviation of the mean is (4 pi / sqrt 12) / sqrt N.
        let se = 4.0 * PI / 12f64.sqrt() / (2048f64).sqrt();
        for k in 0..2 {
            let mean = a.iter().map(|s| s.x0[k]).sum::<f64>() / a.len() as f64;
            assert!(mean.abs() < 3.0 * se, "axis {k} mean {mean}");
        }
        let sp = CostSpec::setpoint(1.0, 1.0);
        let b = Sampler::new(SamplerConfig { batch_size: 3, targets_per_sample: 4, ..cfg }).unwrap().sample_batch(&sp);
        assert_eq!(b.len(), 12);
        assert!(b.iter().all(|s| s.target[1].abs() <= 1e-4 && s.target[0].abs() <= lim));
        assert!(Sampler::new(SamplerConfig { batch_size: 0, ..cfg }).is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig { iterations: 11, learning_rate: 1e-2, final_learning_rate: Some(1e-4), ..Default::default() };
        assert_abs_diff_eq!(cfg.learning_rate_at(0), 1e-2, epsilon = 1e-15);
        assert_abs_diff_eq!(cfg.learning_rate_at(5), 0.5 * (1e-2 + 1e-4), epsilon = 1e-15);
        assert_abs_diff_eq!(cfg.learning_rate_at(10), 1e-4, epsilon = 1e-15);
        let flat = TrainConfig { learning_rate: 3e-3, ..Default::default() };
        assert_eq!(flat.learning_rate_at(7), 3e-3);
        assert!(TrainConfig { final_learning_rate: Some(1.0), ..Default::default() }.validate().is_err());
    }

    #[test]
    fn adam_examples() {
        let mut a = AdamState::new(1, 1e-3);
        let mut th = [0.5];
        a.step(&mut th, &[0.0]).unwrap();
        assert_eq!(th, [0.5]);
        assert_eq!(a.step, 1);
        let mut a = AdamState::new(1, 1e-3);
        let mut th = [0.5];
        a.step(&mut th, &[1.0]).unwrap();
        assert_abs_diff_eq!(th[0], 0.5 - 1e-3, epsilon = 1e-10);
        assert!(a.step(&mut th, &[f64::NAN]).is_err());
        assert_eq!(a.step, 1);

        // Convex quadratic 0.5 x^T diag(1, 10) x.
        let mut a = AdamState::new(2, 0.01);
        let mut x = [2.0, -3.0];
        let f = |x: &[f64; 2]| 0.5 * (x[0] * x[0] + 10.0 * x[1] * x[1]);
        let mut prev = f(&x);
        for _ in 0..100 {
            let g = [x[0], 10.0 * x[1]];
            a.step(&mut x, &g).unwrap();
            assert!(f(&x) < prev);
            prev = f(&x);
        }
        let mut x = [1.0];
        sgd_step(&mut x, &[2.0], 0.25).unwrap();
        assert_eq!(x, [0.5]);
    }

    fn small_oes() -> OesPendulum {
        let a = OesArchitecture::new(
            1,
            Conditioning::TimeVarying,
            3.0,
            vec![6, 6],
            vec![Activation::Softplus, Activation::Tanh],
            vec![6],
            vec![Activation::Softplus],
            OutputActivation::Relu,
        )
        .unwrap();
        OesPendulum::new(a, &PendulumParams::default()).unwrap()
    }

    #[test]
    fn batch_gradient_is_mean_of_samples() {
        let pol = small_oes();
        let theta = pol.architecture.init(&mut ChaCha8Rng::seed_from_u64(1), false).0;
        let plant = PendulumParams::default();
        let cost = CostSpec::regulation(0.01, 1.0);
        let samples = Sampler::new(SamplerConfig { batch_size: 4, seed: 3, ..Default::default() }).unwrap().sample_batch(&cost);
        let solver = SolverConfig::with_tolerances(1e-7, 1e-7);
        let pool = thread_pool(1).unwrap();
        let bg = batch_gradient(&plant, &pol, &cost, &theta, &samples, &solver, GradMode::Auto, &pool);
        assert_eq!(bg.failed, 0);
        let mut mean = vec![0.0; theta.len()];
        for s in &samples {
            let task = ClosedLoopTask::new(plant, &pol, cost, s.target);
            let g = adjoint::grad(&task, &theta, &s.x0, &solver, GradMode::Auto).unwrap();
            mean.iter_mut().zip(&g.grad).for_each(|(m, v)| *m += v / 4.0);
        }
        for (a, b) in bg.grad.iter().zip(&mean) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12 * (1.0 + b.abs()));
        }
        let pool2 = thread_pool(2).unwrap();
        let bg2 = batch_gradient(&plant, &pol, &cost, &theta, &samples, &solver, GradMode::Auto, &pool2);
        assert_eq!(bg.grad, bg2.grad);
    }

    #[test]
    fn pd_gradient_matches_finite_differences() {
        let plant = PendulumParams::default();
        let pol = PdPlusPolicy { plant };
        let cost = CostSpec::regulation(0.01, 3.0);
        let task = ClosedLoopTask::new(plant, &pol, cost, cost.regulation_target());
        let solver = SolverConfig::with_tolerances(1e-10, 1e-10);
        let th = [2.0, 1.5];
        let g = adjoint::grad(&task, &th, &[1.0, -0.5], &solver, GradMode::Checkpointed).unwrap();
        let fd = adjoint::fd_grad(&task, &th, &[1.0, -0.5], &solver, 1e-5, None).unwrap();
        for (a, b) in g.grad.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn zero_iterations_return_initial_parameters() {
        let pol = small_oes();
        let theta0 = pol.architecture.init(&mut ChaCha8Rng::seed_from_u64(5), true).0;
        let mut sampler = Sampler::new(SamplerConfig { batch_size: 2, ..Default::default() }).unwrap();
        let cfg = TrainConfig { iterations: 0, ..Default::default() };
        let out = train(
            &PendulumParams::default(),
            &pol,
            &CostSpec::default(),
            theta0.clone(),
            &mut sampler,
            &cfg,
            &SolverConfig::default(),
            1,
            &mut |_, _| Ok(()),
        )
        .unwrap();
        assert_eq!(out.theta, theta0);
        assert!(out.history.is_empty());
    }

    #[test]
    fn pd_projection_keeps_gains_non_negative() {
        let plant = PendulumParams::default();
        let pol = PdPlusPolicy { plant };
        let mut sampler = Sampler::new(SamplerConfig { batch_size: 8, seed: 2, ..Default::default() }).unwrap();
        let cfg = TrainConfig { iterations: 5, learning_rate: 1.0, ..Default::default() };
        let mut seen = Vec::new();
        train(
            &plant,
            &pol,
            &CostSpec::default(),
            vec![0.0, 0.0],
            &mut sampler,
            &cfg,
            &SolverConfig::with_tolerances(1e-5, 1e-5),
            1,
            &mut |_, th| {
                seen.push(th.to_vec());
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(seen.len(), 5);
        assert!(seen.iter().flatten().all(|g| *g >= 0.0));
    }

    #[test]
    fn pareto_rows_and_dominance() {
        assert!(pareto_sweep(&[], &[1, 2], |_, _, _| Ok((0.0, 0.0))).is_empty());
        let rows = pareto_sweep(&[0.0, 0.5], &[1, 2, 3], |m, g, s| match (m, s) {
            (Method::Pdplus, 3) => Err(Error::Invalid("diverged".into())),
            (Method::Oes, _) => Ok((-5.0, 10.0 * (1.0 - g))),
            (Method::Pdplus, _) => Ok((-4.9, 15.0)),
        });
        assert_eq!(rows.len(), 2 * 3 * 2);
        assert_eq!(rows.iter().filter(|r| r.status != "ok").count(), 2);
        let table = dominance_table(&rows);
        assert_eq!(table.len(), 2);
        assert!(table.iter().all(|r| !r.oes_dominated));
        assert!(dominates((0.0, 0.0), (0.0, 1.0)));
        assert!(!dominates((0.0, 1.0), (0.0, 1.0)));
        assert!(!dominates((-1.0, 2.0), (0.0, 1.0)));
    }
}
