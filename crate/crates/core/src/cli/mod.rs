//! Command implementations behind the `oes` binary.
//!
//! Every command reads an [`ExperimentConfig`], writes plain CSV/JSON files
//! into the configured output directory and returns a summary value, so the
//! same code paths are usable from tests and other programs.

pub mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{ExperimentConfig, Mode, Overrides};

use crate::controller::{Conditioning, OesController, OesPendulum, PdPlusPolicy, PendulumPolicy};
use crate::error::{Error, Result};
use crate::neural::{read_params, write_params, ParamVector};
use crate::ode::fmt_f64;
use crate::optimize::{
    self, dominance_table, evaluate, mean_costs, pareto_sweep, simulate, CostVariant, DominanceRow, EvalRecord,
    IterRecord, Method, ParetoRow, Sample, Sampler, TrainOutcome,
};

/// Trained controller plus the configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub iteration: usize,
    pub controller: ControllerState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControllerState {
    Oes(OesController),
    Pdplus { k_p: f64, k_d: f64 },
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Self = serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?;
        ck.config.validate()?;
        if let ControllerState::Oes(c) = &ck.controller {
            let expected = ck.config.architecture()?;
            if c.architecture != expected {
                return Err(Error::Format("controller architecture does not match its configuration".into()));
            }
            OesController::new(c.architecture.clone(), c.params.clone())?;
        }
        Ok(ck)
    }
}

/// The policy and flat parameter vector described by a checkpoint.
pub enum LoadedPolicy {
    Oes(OesPendulum, Vec<f64>),
    Pdplus(PdPlusPolicy, Vec<f64>),
}

impl LoadedPolicy {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(match &ck.controller {
            ControllerState::Oes(c) => LoadedPolicy::Oes(c.pendulum(&ck.config.plant)?, c.params.0.clone()),
            ControllerState::Pdplus { k_p, k_d } => {
                LoadedPolicy::Pdplus(PdPlusPolicy { plant: ck.config.plant }, vec![*k_p, *k_d])
            }
        })
    }

    pub fn parts(&self) -> (&dyn PendulumPolicy, &[f64]) {
        match self {
            LoadedPolicy::Oes(p, t) => (p, t),
            LoadedPolicy::Pdplus(p, t) => (p, t),
        }
    }
}

fn controller_state(cfg: &ExperimentConfig, theta: &[f64]) -> Result<ControllerState> {
    Ok(match cfg.mode {
        Mode::Oes => ControllerState::Oes(OesController::new(cfg.architecture()?, ParamVector(theta.to_vec()))?),
        Mode::Pdplus => ControllerState::Pdplus { k_p: theta[0], k_d: theta[1] },
    })
}

/// Initial parameters for `cfg`, drawn from the initialization stream.
pub fn initial_parameters(cfg: &ExperimentConfig) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(match cfg.mode {
        Mode::Oes => cfg.architecture()?.init(&mut rng, cfg.controller.zero_init).0,
        Mode::Pdplus => match cfg.pd.init_range {
            Some([lo, hi]) => vec![rng.gen_range(lo..hi), rng.gen_range(lo..hi)],
            None => vec![cfg.pd.k_p, cfg.pd.k_d],
        },
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(path)?)))
}

/// Reproducibility record written next to every output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub package_version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub workers: usize,
    pub rtol: f64,
    pub atol: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations_run: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_gains: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_metrics: Option<IterRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outputs: Option<Vec<String>>,
}

impl Manifest {
    fn new(command: &str, cfg: &ExperimentConfig, rtol: f64, atol: f64) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            package_version: env!("CARGO_PKG_VERSION").into(),
            config_sha256: cfg.hash()?,
            seed: cfg.seed,
            workers: cfg.workers,
            rtol,
            atol,
            iterations_run: None,
            converged: None,
            final_gains: None,
            final_metrics: None,
            outputs: None,
        })
    }

    fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.flush()?;
        Ok(())
    }
}

/// Files produced by [`cmd_train`].
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub manifest: PathBuf,
    pub outcome: TrainOutcome,
}

/// Trains the configured controller in memory.
pub fn train_in_memory(
    cfg: &ExperimentConfig,
    on_iter: &mut dyn FnMut(&IterRecord, &[f64]) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let theta0 = initial_parameters(cfg)?;
    let mut sampler = Sampler::new(optimize::SamplerConfig { seed: cfg.sampler_seed(), ..cfg.sampler })?;
    match cfg.mode {
        Mode::Oes => {
            let policy = OesPendulum::new(cfg.architecture()?, &cfg.plant)?;
            optimize::train(&cfg.plant, &policy, &cfg.cost, theta0, &mut sampler, &cfg.train, &cfg.solver, cfg.workers, on_iter)
        }
        Mode::Pdplus => {
            let policy = PdPlusPolicy { plant: cfg.plant };
            optimize::train(&cfg.plant, &policy, &cfg.cost, theta0, &mut sampler, &cfg.train, &cfg.solver, cfg.workers, on_iter)
        }
    }
}

/// Trains and writes `checkpoint.json`, `metrics.csv`, `manifest.json`
/// (and `params.bin` for the learned controller) into the output directory.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    let metrics_path = out.join("metrics.csv");
    let mut metrics = csv_writer(&metrics_path)?;
    metrics.write_record(["iter", "loss", "terminal", "integral", "wallclock_s"])?;
    metrics.flush()?;
    let ck_dir = out.join("checkpoints");
    let every = cfg.train.checkpoint_every;
    let mut on_iter = |r: &IterRecord, theta: &[f64]| -> Result<()> {
        metrics.write_record([
            r.iter.to_string(),
            fmt_f64(r.loss),
            fmt_f64(r.terminal),
            fmt_f64(r.integral),
            fmt_f64(r.wallclock_s),
        ])?;
        metrics.flush()?;
        if every > 0 && (r.iter + 1) % every == 0 {
            fs::create_dir_all(&ck_dir)?;
            let ck = Checkpoint { config: cfg.clone(), iteration: r.iter + 1, controller: controller_state(cfg, theta)? };
            ck.save(&ck_dir.join(format!("iter_{:06}.json", r.iter + 1)))?;
        }
        Ok(())
    };
    let outcome = train_in_memory(cfg, &mut on_iter)?;
    drop(on_iter);
    drop(metrics);

    let ck = Checkpoint {
        config: cfg.clone(),
        iteration: outcome.history.len(),
        controller: controller_state(cfg, &outcome.theta)?,
    };
    let ck_path = out.join("checkpoint.json");
    ck.save(&ck_path)?;
    let mut outputs = vec!["checkpoint.json".to_string(), "metrics.csv".to_string()];
    if let ControllerState::Oes(c) = &ck.controller {
        let mut w = BufWriter::new(File::create(out.join("params.bin"))?);
        write_params(&c.architecture.potential, &c.params.0[..c.architecture.n_potential_params()], &mut w)?;
        write_params(&c.architecture.gain, &c.params.0[c.architecture.n_potential_params()..], &mut w)?;
        w.flush()?;
        outputs.push("params.bin".into());
    }
    let mut manifest = Manifest::new("train", cfg, cfg.solver.rtol, cfg.solver.atol)?;
    manifest.iterations_run = Some(outcome.history.len());
    manifest.converged = Some(outcome.converged);
    manifest.final_metrics = outcome.history.last().copied();
    if cfg.mode == Mode::Pdplus {
        manifest.final_gains = Some([outcome.theta[0], outcome.theta[1]]);
    }
    manifest.outputs = Some(outputs);
    let manifest_path = out.join("manifest.json");
    manifest.write(&manifest_path)?;
    Ok(TrainArtifacts { checkpoint: ck_path, metrics: metrics_path, manifest: manifest_path, outcome })
}

/// Reads the parameters stored in `params.bin` for an architecture.
pub fn load_binary_params(c: &OesController, path: &Path) -> Result<Vec<f64>> {
    let mut r = std::io::BufReader::new(File::open(path)?);
    let mut v = read_params(&c.architecture.potential, &mut r)?.0;
    v.extend(read_params(&c.architecture.gain, &mut r)?.0);
    Ok(v)
}

/// Evaluation samples: `n` fresh initial conditions per target.
pub fn eval_samples(cfg: &ExperimentConfig, n: usize) -> Result<Vec<Sample>> {
    let mut sampler = Sampler::new(optimize::SamplerConfig { seed: cfg.eval.seed, ..cfg.sampler })?;
    let targets: Vec<[f64; 2]> = match cfg.cost.variant {
        CostVariant::SetpointQuadratic if !cfg.eval.targets.is_empty() => cfg.eval.targets.iter().map(|q| [*q, 0.0]).collect(),
        CostVariant::SetpointQuadratic => (0..n).map(|_| sampler.target()).collect(),
        CostVariant::RegulationNll => vec![cfg.cost.regulation_target()],
    };
    let mut out = Vec::new();
    if cfg.cost.variant == CostVariant::SetpointQuadratic && cfg.eval.targets.is_empty() {
        for t in targets {
            out.push(Sample { x0: sampler.initial_condition(), target: t });
        }
    } else {
        for t in targets {
            for _ in 0..n {
                out.push(Sample { x0: sampler.initial_condition(), target: t });
            }
        }
    }
    Ok(out)
}

/// Result of [`cmd_eval`].
#[derive(Debug)]
pub struct EvalSummary {
    pub records: Vec<Result<EvalRecord>>,
    pub mean_terminal: f64,
    pub mean_integral: f64,
    pub summary_csv: PathBuf,
}

/// Simulates `n` fresh initial conditions (per evaluation target) at the
/// evaluation tolerance and writes `eval/summary.csv` plus one trajectory CSV
/// per run.
pub fn cmd_eval(ck: &Checkpoint, n: Option<usize>, out_dir: &Path, tolerance: Option<(f64, f64)>) -> Result<EvalSummary> {
    let cfg = &ck.config;
    let n = n.unwrap_or(cfg.eval.n_trajectories);
    let mut solver = cfg.eval.solver;
    if let Some((r, a)) = tolerance {
        solver.rtol = r;
        solver.atol = a;
    }
    let dir = out_dir.join("eval");
    fs::create_dir_all(&dir)?;
    let loaded = LoadedPolicy::from_checkpoint(ck)?;
    let (policy, theta) = loaded.parts();
    let samples = eval_samples(cfg, n)?;
    let pool = optimize::thread_pool(cfg.workers)?;
    let records = evaluate(&cfg.plant, policy, &cfg.cost, theta, &samples, &solver, &pool);

    let summary_csv = dir.join("summary.csv");
    let mut w = csv_writer(&summary_csv)?;
    w.write_record(["index", "q0", "p0", "target_q", "target_p", "q_T", "p_T", "terminal", "integral", "status"])?;
    for (i, (s, r)) in samples.iter().zip(&records).enumerate() {
        let (xt, term, int, status) = match r {
            Ok(r) => (r.x_t, r.terminal, r.integral, "ok".to_string()),
            Err(e) => ([f64::NAN; 2], f64::NAN, f64::NAN, e.to_string().replace([',', '\n'], ";")),
        };
        w.write_record([
            i.to_string(),
            fmt_f64(s.x0[0]),
            fmt_f64(s.x0[1]),
            fmt_f64(s.target[0]),
            fmt_f64(s.target[1]),
            fmt_f64(xt[0]),
            fmt_f64(xt[1]),
            fmt_f64(term),
            fmt_f64(int),
            status,
        ])?;
    }
    w.flush()?;

    if cfg.eval.write_trajectories {
        let tdir = dir.join("trajectories");
        fs::create_dir_all(&tdir)?;
        for (i, s) in samples.iter().enumerate() {
            if let Ok((traj, u)) = simulate(&cfg.plant, policy, theta, s.x0, s.target, cfg.cost.horizon, &solver) {
                traj.write_csv(Some(&u), BufWriter::new(File::create(tdir.join(format!("traj_{i:05}.csv")))?))?;
            }
        }
    }
    let (mean_terminal, mean_integral) = mean_costs(&records).unwrap_or((f64::NAN, f64::NAN));
    let mut agg = csv_writer(&dir.join("aggregate.csv"))?;
    agg.write_record(["n", "failed", "mean_terminal", "mean_integral"])?;
    agg.write_record([
        records.len().to_string(),
        records.iter().filter(|r| r.is_err()).count().to_string(),
        fmt_f64(mean_terminal),
        fmt_f64(mean_integral),
    ])?;
    agg.flush()?;
    let mut manifest = Manifest::new("eval", cfg, solver.rtol, solver.atol)?;
    manifest.outputs = Some(vec!["eval/summary.csv".into(), "eval/aggregate.csv".into()]);
    manifest.write(&dir.join("manifest.json"))?;
    Ok(EvalSummary { records, mean_terminal, mean_integral, summary_csv })
}

fn linspace(r: [f64; 2], n: usize) -> Vec<f64> {
    (0..n).map(|i| r[0] + (r[1] - r[0]) * i as f64 / (n - 1) as f64).collect()
}

/// Grids written by [`cmd_landscape`].
#[derive(Debug, Clone)]
pub struct LandscapeFiles {
    pub potential: PathBuf,
    pub gains: Vec<PathBuf>,
    pub setpoint_potential: Option<PathBuf>,
    pub script: PathBuf,
}

/// Writes the shaped potential over `q`, the damping gain over `(q, p)` at
/// each configured time (or target slice), the set-point potential over
/// `(q, q*)` for set-point controllers, and a plotting script.
pub fn cmd_landscape(ck: &Checkpoint, out_dir: &Path) -> Result<LandscapeFiles> {
    let cfg = &ck.config;
    let lc = &cfg.landscape;
    lc.validate()?;
    let dir = out_dir.join("landscape");
    fs::create_dir_all(&dir)?;
    let loaded = LoadedPolicy::from_checkpoint(ck)?;
    let (policy, theta) = loaded.parts();
    let plant = cfg.plant;
    let qs = linspace(lc.q_range, lc.q_points);
    let ps = linspace(lc.p_range, lc.p_points);
    let set_point = matches!(&ck.controller, ControllerState::Oes(c) if c.architecture.conditioning == Conditioning::SetPoint);
    let default_target = cfg.cost.target;

    let potential = dir.join("potential.csv");
    let mut w = csv_writer(&potential)?;
    w.write_record(["q", "plant_potential", "added_potential", "shaped_potential"])?;
    for &q in &qs {
        let v = plant.potential(q);
        let a = policy.added_potential(theta, q, default_target)?;
        w.write_record([fmt_f64(q), fmt_f64(v), fmt_f64(a), fmt_f64(v + a)])?;
    }
    w.flush()?;

    let mut gains = Vec::new();
    let slices: Vec<(String, f64, f64)> = if set_point {
        cfg.eval
            .targets
            .iter()
            .copied()
            .chain(if cfg.eval.targets.is_empty() { vec![0.0] } else { vec![] })
            .map(|qs| (format!("gain_target_{qs:+.3}.csv"), 0.0, qs))
            .collect()
    } else {
        lc.times.iter().map(|t| (format!("gain_t_{t:.3}.csv"), *t, default_target)).collect()
    };
    for (name, t, target) in slices {
        let path = dir.join(name);
        let mut w = csv_writer(&path)?;
        w.write_record(["t", "target", "q", "p", "gain"])?;
        for &q in &qs {
            for &p in &ps {
                let k = match &loaded {
                    LoadedPolicy::Oes(pol, th) => pol.gain(th, t, q, p, target)?,
                    LoadedPolicy::Pdplus(_, th) => th[1],
                };
                w.write_record([fmt_f64(t), fmt_f64(target), fmt_f64(q), fmt_f64(p), fmt_f64(k)])?;
            }
        }
        w.flush()?;
        gains.push(path);
    }

    let setpoint_potential = if set_point {
        let path = dir.join("potential_setpoint.csv");
        let mut w = csv_writer(&path)?;
        w.write_record(["q", "target", "shaped_potential"])?;
        for &target in &linspace(lc.target_range, lc.target_points) {
            for &q in &qs {
                let v = plant.potential(q) + policy.added_potential(theta, q, target)?;
                w.write_record([fmt_f64(q), fmt_f64(target), fmt_f64(v)])?;
            }
        }
        w.flush()?;
        Some(path)
    } else {
        None
    };
    let script = dir.join("plot_landscape.py");
    fs::write(&script, PLOT_SCRIPT)?;
    Ok(LandscapeFiles { potential, gains, setpoint_potential, script })
}

/// Argmin over `q` of the shaped potential for each set point, on the
/// landscape `q` grid.
pub fn potential_argmin(ck: &Checkpoint, targets: &[f64]) -> Result<Vec<f64>> {
    let cfg = &ck.config;
    let loaded = LoadedPolicy::from_checkpoint(ck)?;
    let (policy, theta) = loaded.parts();
    let qs = linspace(cfg.landscape.q_range, cfg.landscape.q_points);
    targets
        .iter()
        .map(|&t| {
            let mut best = (f64::INFINITY, f64::NAN);
            for &q in &qs {
                let v = cfg.plant.potential(q) + policy.added_potential(theta, q, t)?;
                if v < best.0 {
                    best = (v, q);
                }
            }
            Ok(best.1)
        })
        .collect()
}

const PLOT_SCRIPT: &str = r#"#!/usr/bin/env python3
"""Plots the CSV grids written by `oes landscape` (requires pandas and matplotlib)."""
import glob
import os
import sys

import matplotlib.pyplot as plt
import pandas as pd

here = sys.argv[1] if len(sys.argv) > 1 else os.path.dirname(os.path.abspath(__file__))

pot = pd.read_csv(os.path.join(here, "potential.csv"))
fig, ax = plt.subplots()
ax.plot(pot.q, pot.plant_potential, label="plant")
ax.plot(pot.q, pot.shaped_potential, label="shaped")
ax.set_xlabel("q")
ax.legend()
fig.savefig(os.path.join(here, "potential.png"), dpi=150)

for path in sorted(glob.glob(os.path.join(here, "gain_*.csv"))):
    df = pd.read_csv(path)
    grid = df.pivot(index="p", columns="q", values="gain")
    fig, ax = plt.subplots()
    im = ax.pcolormesh(grid.columns, grid.index, grid.values, shading="auto")
    fig.colorbar(im, ax=ax)
    ax.set_xlabel("q")
    ax.set_ylabel("p")
    fig.savefig(path[:-4] + ".png", dpi=150)

sp = os.path.join(here, "potential_setpoint.csv")
if os.path.exists(sp):
    df = pd.read_csv(sp)
    grid = df.pivot(index="target", columns="q", values="shaped_potential")
    fig, ax = plt.subplots()
    im = ax.pcolormesh(grid.columns, grid.index, grid.values, shading="auto")
    fig.colorbar(im, ax=ax)
    ax.set_xlabel("q")
    ax.set_ylabel("q*")
    fig.savefig(os.path.join(here, "potential_setpoint.png"), dpi=150)
"#;

/// Result of [`cmd_pareto`].
#[derive(Debug, Clone)]
pub struct ParetoSummary {
    pub rows: Vec<ParetoRow>,
    pub dominance: Vec<DominanceRow>,
    pub csv: PathBuf,
}

/// Trains one run of the sweep and scores it on fresh samples.
pub fn pareto_run(base: &ExperimentConfig, method: Method, gamma: f64, seed: u64) -> Result<(f64, f64)> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.cost.gamma = gamma;
    if let Some(it) = base.pareto.iterations {
        cfg.train.iterations = it;
    }
    if let Some(b) = base.pareto.batch_size {
        cfg.sampler.batch_size = b;
    }
    match method {
        Method::Oes => cfg.mode = Mode::Oes,
        Method::Pdplus => {
            cfg.mode = Mode::Pdplus;
            cfg.pd.init_range = Some(base.pareto.pd_init_range);
            cfg.train.learning_rate = base.pareto_pd_learning_rate();
        }
    }
    let outcome = train_in_memory(&cfg, &mut |_, _| Ok(()))?;
    let ck = Checkpoint { iteration: outcome.history.len(), controller: controller_state(&cfg, &outcome.theta)?, config: cfg };
    let loaded = LoadedPolicy::from_checkpoint(&ck)?;
    let (policy, theta) = loaded.parts();
    let samples = eval_samples(&ck.config, ck.config.pareto.eval_trajectories)?;
    let pool = optimize::thread_pool(ck.config.workers)?;
    let recs = evaluate(&ck.config.plant, policy, &ck.config.cost, theta, &samples, &ck.config.eval.solver, &pool);
    let failed = recs.iter().filter(|r| r.is_err()).count();
    if failed > 0 {
        return Err(Error::BatchFailure { failed, total: recs.len(), first: "evaluation".into() });
    }
    mean_costs(&recs).ok_or_else(|| Error::Invalid("no evaluation samples".into()))
}

impl ExperimentConfig {
    /// Learning rate of the PD+ runs of a sweep.
    pub fn pareto_pd_learning_rate(&self) -> f64 {
        if self.mode == Mode::Pdplus {
            self.train.learning_rate
        } else {
            1.0
        }
    }
}

/// Runs the sweep and writes `pareto.csv` (`method,gamma,seed,terminal,integral,status`)
/// and `dominance.csv`.
pub fn cmd_pareto(cfg: &ExperimentConfig) -> Result<ParetoSummary> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    let rows = pareto_sweep(&cfg.pareto.gammas, &cfg.pareto.seeds, |m, g, s| pareto_run(cfg, m, g, s));
    let csv_path = out.join("pareto.csv");
    let mut w = csv_writer(&csv_path)?;
    w.write_record(["method", "gamma", "seed", "terminal", "integral", "status"])?;
    for r in &rows {
        w.write_record([
            r.method.name().to_string(),
            fmt_f64(r.gamma),
            r.seed.to_string(),
            fmt_f64(r.terminal),
            fmt_f64(r.integral),
            r.status.clone(),
        ])?;
    }
    w.flush()?;
    let dominance = dominance_table(&rows);
    let mut w = csv_writer(&out.join("dominance.csv"))?;
    w.write_record(["gamma", "oes_terminal", "oes_integral", "pdplus_terminal", "pdplus_integral", "oes_dominated"])?;
    for d in &dominance {
        w.write_record([
            fmt_f64(d.gamma),
            fmt_f64(d.oes.0),
            fmt_f64(d.oes.1),
            fmt_f64(d.pdplus.0),
            fmt_f64(d.pdplus.1),
            d.oes_dominated.to_string(),
        ])?;
    }
    w.flush()?;
    let mut manifest = Manifest::new("pareto", cfg, cfg.solver.rtol, cfg.solver.atol)?;
    manifest.outputs = Some(vec!["pareto.csv".into(), "dominance.csv".into()]);
    manifest.write(&out.join("manifest.json"))?;
    Ok(ParetoSummary { rows, dominance, csv: csv_path })
}

/// Fails when a checkpoint was produced for a different controller than the
/// one `cfg` describes.
pub fn check_compatible(ck: &Checkpoint, cfg: &ExperimentConfig) -> Result<()> {
    if ck.config.mode != cfg.mode {
        return Err(Error::Format(format!(
            "checkpoint holds a {:?} controller but the configuration asks for {:?}",
            ck.config.mode, cfg.mode
        )));
    }
    if let ControllerState::Oes(c) = &ck.controller {
        if c.architecture != cfg.architecture()? {
            return Err(Error::Format("checkpoint architecture does not match the configuration".into()));
        }
    }
    Ok(())
}
