//! Explicit Runge-Kutta integration.
//!
//! [`Dopri5`] is the adaptive Dormand-Prince 5(4) pair with PI step-size
//! control and Hairer's continuous extension for dense output. [`rk4_integrate`]
//! is the classical fixed-step fourth-order method, kept as an independent
//! cross-check. Both integrate forward or backward in time.
//!
//! Systems may declare a trailing block of *quadrature* components
//! ([`OdeSystem::coupled_dim`]): components the right-hand side never reads.
//! Their intermediate stage values are not formed, which makes integrating a
//! long accumulator (such as a parameter gradient) alongside a small state cheap.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// A first-order system `x' = f(t, x)`.
pub trait OdeSystem {
    fn dim(&self) -> usize;

    /// Number of leading components the right-hand side depends on.
    fn coupled_dim(&self) -> usize {
        self.dim()
    }

    /// Writes `f(t, x)` into `dx`. Only `x[..coupled_dim()]` is meaningful.
    fn rhs(&mut self, t: f64, x: &[f64], dx: &mut [f64]) -> Result<()>;
}

/// Adapts a closure into an [`OdeSystem`].
pub struct FnSystem<F> {
    dim: usize,
    f: F,
}

impl<F> FnSystem<F>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> OdeSystem for FnSystem<F>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn rhs(&mut self, t: f64, x: &[f64], dx: &mut [f64]) -> Result<()> {
        (self.f)(t, x, dx);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub rtol: f64,
    pub atol: f64,
    /// Initial step magnitude; chosen automatically when absent.
    pub initial_step: Option<f64>,
    pub max_steps: usize,
    pub safety: f64,
    /// Smallest allowed ratio `h_new / h`.
    pub min_scale: f64,
    /// Largest allowed ratio `h_new / h`.
    pub max_scale: f64,
    /// Integral gain of the PI controller.
    pub pi_beta: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rtol: 1e-6,
            atol: 1e-6,
            initial_step: None,
            max_steps: 100_000,
            safety: 0.9,
            min_scale: 0.2,
            max_scale: 10.0,
            pi_beta: 0.04,
        }
    }
}

impl SolverConfig {
    pub fn with_tolerances(rtol: f64, atol: f64) -> Self {
        Self { rtol, atol, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::Invalid("solver tolerances must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Invalid("max_steps must be positive".into()));
        }
        if !(self.safety > 0.0 && self.safety <= 1.0) {
            return Err(Error::Invalid("safety factor must lie in (0, 1]".into()));
        }
        if !(self.min_scale > 0.0 && self.min_scale < 1.0 && self.max_scale > 1.0) {
            return Err(Error::Invalid("step scale limits must satisfy 0 < min < 1 < max".into()));
        }
        if let Some(h) = self.initial_step {
            if !(h > 0.0) {
                return Err(Error::Invalid("initial step must be positive".into()));
            }
        }
        Ok(())
    }
}

/// What an integration keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Record {
    /// Initial and final state only.
    Endpoints,
    /// Every accepted step.
    Steps,
    /// Every accepted step plus dense-output coefficients.
    Dense,
}

/// Hairer's continuous extension on one accepted step.
#[derive(Debug, Clone)]
pub struct DenseSegment {
    pub t0: f64,
    pub h: f64,
    coeffs: [Vec<f64>; 5],
}

impl DenseSegment {
    pub fn t1(&self) -> f64 {
        self.t0 + self.h
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        let s = (t - self.t0) / self.h;
        let s1 = 1.0 - s;
        let [r1, r2, r3, r4, r5] = &self.coeffs;
        for i in 0..out.len() {
            out[i] = r1[i] + s * (r2[i] + s1 * (r3[i] + s * (r4[i] + s1 * r5[i])));
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct SolverStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
    /// Largest weighted error estimate among accepted steps.
    pub max_accepted_error: f64,
}

/// Output of an integration.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Strictly monotone in the direction of integration.
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub dense: Option<Vec<DenseSegment>>,
    pub stats: SolverStats,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory holds at least one state")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectory holds at least one time")
    }

    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    /// State at `t` from the dense output; `None` without dense output or
    /// outside the integrated span.
    pub fn interpolate(&self, t: f64) -> Option<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.interpolate_into(t, &mut out).then_some(out)
    }

    /// Writes the interpolated leading `out.len()` components at `t`.
    pub fn interpolate_into(&self, t: f64, out: &mut [f64]) -> bool {
        let Some(segments) = &self.dense else {
            return false;
        };
        if segments.is_empty() {
            if t == self.times[0] {
                out.copy_from_slice(&self.states[0][..out.len()]);
                return true;
            }
            return false;
        }
        let forward = segments[0].h > 0.0;
        let (lo, hi) = if forward {
            (self.times[0], self.final_time())
        } else {
            (self.final_time(), self.times[0])
        };
        let slack = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
        if t < lo - slack || t > hi + slack {
            return false;
        }
        // First segment whose end lies beyond t in the direction of travel.
        let idx = segments.partition_point(|s| if forward { s.t1() < t } else { s.t1() > t });
        let seg = &segments[idx.min(segments.len() - 1)];
        seg.eval_into(t, out);
        true
    }

    /// Writes `t,x0,x1,...` (plus `u` when `controls` is given) with 17
    /// significant digits.
    pub fn write_csv<W: std::io::Write>(&self, controls: Option<&[f64]>, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((0..self.dim()).map(|i| format!("x{i}")));
        if controls.is_some() {
            header.push("u".into());
        }
        wr.write_record(&header)?;
        for (k, (t, x)) in self.times.iter().zip(&self.states).enumerate() {
            let mut row = vec![fmt_f64(*t)];
            row.extend(x.iter().map(|v| fmt_f64(*v)));
            if let Some(u) = controls {
                row.push(fmt_f64(u[k]));
            }
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Formats with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

// Dormand-Prince 5(4) coefficients.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// Adaptive Dormand-Prince 5(4) integrator.
#[derive(Debug, Clone)]
pub struct Dopri5 {
    cfg: SolverConfig,
    groups: Option<Vec<Range<usize>>>,
}

impl Dopri5 {
    pub fn new(cfg: SolverConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, groups: None })
    }

    /// Measures the error as the largest RMS over the given component groups
    /// instead of one RMS over all components.
    pub fn with_error_groups(mut self, groups: Vec<Range<usize>>) -> Self {
        self.groups = Some(groups);
        self
    }

    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }

    fn error_norm(&self, err: &[f64], y0: &[f64], y1: &[f64]) -> f64 {
        let (rtol, atol) = (self.cfg.rtol, self.cfg.atol);
        let rms = |r: Range<usize>| {
            if r.is_empty() {
                return 0.0;
            }
            let n = r.len() as f64;
            let s: f64 = r
                .map(|i| {
                    let sk = atol + rtol * y0[i].abs().max(y1[i].abs());
                    (err[i] / sk).powi(2)
                })
                .sum();
            (s / n).sqrt()
        };
        match &self.groups {
            None => rms(0..err.len()),
            Some(groups) => groups.iter().cloned().map(rms).fold(0.0, f64::max),
        }
    }

    fn initial_step<S: OdeSystem + ?Sized>(
        &self,
        sys: &mut S,
        t0: f64,
        x0: &[f64],
        f0: &[f64],
        dir: f64,
        span: f64,
    ) -> Result<f64> {
        let n = x0.len();
        let (rtol, atol) = (self.cfg.rtol, self.cfg.atol);
        let scale: Vec<f64> = x0.iter().map(|v| atol + rtol * v.abs()).collect();
        let rms = |v: &dyn Fn(usize) -> f64| ((0..n).map(|i| (v(i) / scale[i]).powi(2)).sum::<f64>() / n as f64).sqrt();
        let d0 = rms(&|i| x0[i]);
        let d1 = rms(&|i| f0[i]);
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        let h0 = h0.min(span);
        let x1: Vec<f64> = (0..n).map(|i| x0[i] + dir * h0 * f0[i]).collect();
        let mut f1 = vec![0.0; n];
        sys.rhs(t0 + dir * h0, &x1, &mut f1)?;
        let d2 = rms(&|i| f1[i] - f0[i]) / h0;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(1.0 / 5.0)
        };
        Ok((100.0 * h0).min(h1).min(span))
    }

    /// Integrates `sys` from `t0` to `t1` (either direction).
    pub fn integrate<S: OdeSystem + ?Sized>(
        &self,
        sys: &mut S,
        t0: f64,
        t1: f64,
        x0: &[f64],
        record: Record,
    ) -> Result<Trajectory> {
        let n = sys.dim();
        check_dim("initial state", n, x0.len())?;
        let nc = sys.coupled_dim().min(n);
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("initial state"));
        }
        let mut traj = Trajectory {
            times: vec![t0],
            states: vec![x0.to_vec()],
            dense: (record == Record::Dense).then(Vec::new),
            stats: SolverStats::default(),
        };
        let span = (t1 - t0).abs();
        if span == 0.0 {
            return Ok(traj);
        }
        let dir = (t1 - t0).signum();
        let cfg = &self.cfg;

        let mut y = x0.to_vec();
        let mut k1 = vec![0.0; n];
        let mut k2 = vec![0.0; n];
        let mut k3 = vec![0.0; n];
        let mut k4 = vec![0.0; n];
        let mut k5 = vec![0.0; n];
        let mut k6 = vec![0.0; n];
        let mut k7 = vec![0.0; n];
        let mut ys = vec![0.0; n];
        let mut y1 = vec![0.0; n];
        let mut err = vec![0.0; n];

        sys.rhs(t0, &y, &mut k1)?;
        traj.stats.evaluations += 1;
        check_finite(&k1)?;

        let mut h = match cfg.initial_step {
            Some(h) => h.min(span),
            None => {
                traj.stats.evaluations += 1;
                self.initial_step(sys, t0, &y, &k1, dir, span)?
            }
        };
        let expo1 = 0.2 - cfg.pi_beta * 0.75;
        let mut facold: f64 = 1e-4;
        let mut last_rejected = false;
        let mut t = t0;
        let h_min = 1e-14 * span;

        loop {
            let remaining = (t1 - t) * dir;
            if remaining <= 1e-14 * span.max(t.abs()) {
                break;
            }
            if traj.stats.accepted + traj.stats.rejected >= cfg.max_steps {
                return Err(Error::MaxSteps { max_steps: cfg.max_steps, t });
            }
            let last = h >= remaining;
            if last {
                h = remaining;
            }
            if h < h_min {
                return Err(Error::StepUnderflow { t, h, span });
            }
            let hs = dir * h;

            for i in 0..nc {
                ys[i] = y[i] + hs * A21 * k1[i];
            }
            sys.rhs(t + C2 * hs, &ys, &mut k2)?;
            for i in 0..nc {
                ys[i] = y[i] + hs * (A31 * k1[i] + A32 * k2[i]);
            }
            sys.rhs(t + C3 * hs, &ys, &mut k3)?;
            for i in 0..nc {
                ys[i] = y[i] + hs * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
            }
            sys.rhs(t + C4 * hs, &ys, &mut k4)?;
            for i in 0..nc {
                ys[i] = y[i] + hs * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
            }
            sys.rhs(t + C5 * hs, &ys, &mut k5)?;
            for i in 0..nc {
                ys[i] = y[i] + hs * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
            }
            sys.rhs(t + hs, &ys, &mut k6)?;
            for i in 0..n {
                y1[i] = y[i] + hs * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
            }
            let t_new = if last { t1 } else { t + hs };
            sys.rhs(t_new, &y1, &mut k7)?;
            traj.stats.evaluations += 6;

            if y1.iter().chain(k7.iter()).any(|v| !v.is_finite()) {
                // Treat as a rejected step; a persistent NaN ends in underflow.
                if k2.iter().chain(&k3).chain(&k4).chain(&k5).chain(&k6).all(|v| v.is_finite())
                    && h > h_min * 1e3
                {
                    traj.stats.rejected += 1;
                    h *= cfg.min_scale;
                    last_rejected = true;
                    continue;
                }
                return Err(Error::NonFinite("vector field"));
            }

            for i in 0..n {
                err[i] = hs * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            }
            let e = self.error_norm(&err, &y, &y1);
            let fac11 = e.powf(expo1);

            if e <= 1.0 {
                let fac = (fac11 / facold.powf(cfg.pi_beta)) / cfg.safety;
                let fac = fac.clamp(1.0 / cfg.max_scale, 1.0 / cfg.min_scale);
                let mut h_new = h / fac;
                if last_rejected {
                    h_new = h_new.min(h);
                }
                facold = e.max(1e-4);
                traj.stats.accepted += 1;
                traj.stats.max_accepted_error = traj.stats.max_accepted_error.max(e);

                if let Some(dense) = traj.dense.as_mut() {
                    let mut r2 = vec![0.0; n];
                    let mut r3 = vec![0.0; n];
                    let mut r4 = vec![0.0; n];
                    let mut r5 = vec![0.0; n];
                    for i in 0..n {
                        let ydiff = y1[i] - y[i];
                        let bspl = hs * k1[i] - ydiff;
                        r2[i] = ydiff;
                        r3[i] = bspl;
                        r4[i] = ydiff - hs * k7[i] - bspl;
                        r5[i] = hs * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]);
                    }
                    dense.push(DenseSegment { t0: t, h: t_new - t, coeffs: [y.clone(), r2, r3, r4, r5] });
                }

                std::mem::swap(&mut y, &mut y1);
                std::mem::swap(&mut k1, &mut k7);
                t = t_new;
                if record != Record::Endpoints {
                    traj.times.push(t);
                    traj.states.push(y.clone());
                }
                if last {
                    break;
                }
                h = h_new;
                last_rejected = false;
            } else {
                let fac = (fac11 / cfg.safety).min(1.0 / cfg.min_scale);
                h /= fac;
                traj.stats.rejected += 1;
                last_rejected = true;
            }
        }
        if record == Record::Endpoints {
            traj.times.push(t);
            traj.states.push(y);
        }
        Ok(traj)
    }
}

fn check_finite(v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("vector field"))
    }
}

/// Dense adaptive integration of a closure field over `t_span`.
pub fn dopri5_integrate<F>(f: F, x0: &[f64], t_span: (f64, f64), cfg: &SolverConfig) -> Result<Trajectory>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let mut sys = FnSystem::new(x0.len(), f);
    Dopri5::new(*cfg)?.integrate(&mut sys, t_span.0, t_span.1, x0, Record::Dense)
}

/// Classical RK4 over an explicit time grid (monotone, either direction).
pub fn rk4_integrate<S: OdeSystem + ?Sized>(sys: &mut S, x0: &[f64], grid: &[f64]) -> Result<Trajectory> {
    let n = sys.dim();
    check_dim("initial state", n, x0.len())?;
    if grid.is_empty() {
        return Err(Error::Invalid("empty time grid".into()));
    }
    let mut y = x0.to_vec();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut ys = vec![0.0; n];
    let mut traj = Trajectory {
        times: vec![grid[0]],
        states: vec![y.clone()],
        dense: None,
        stats: SolverStats::default(),
    };
    for w in grid.windows(2) {
        let (t, h) = (w[0], w[1] - w[0]);
        sys.rhs(t, &y, &mut k1)?;
        for i in 0..n {
            ys[i] = y[i] + 0.5 * h * k1[i];
        }
        sys.rhs(t + 0.5 * h, &ys, &mut k2)?;
        for i in 0..n {
            ys[i] = y[i] + 0.5 * h * k2[i];
        }
        sys.rhs(t + 0.5 * h, &ys, &mut k3)?;
        for i in 0..n {
            ys[i] = y[i] + h * k3[i];
        }
        sys.rhs(t + h, &ys, &mut k4)?;
        for i in 0..n {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vector field"));
        }
        traj.stats.accepted += 1;
        traj.stats.evaluations += 4;
        traj.times.push(w[1]);
        traj.states.push(y.clone());
    }
    Ok(traj)
}

/// Uniform grid of `n_steps` intervals between `t0` and `t1`.
pub fn uniform_grid(t0: f64, t1: f64, n_steps: usize) -> Vec<f64> {
    (0..=n_steps)
        .map(|k| if k == n_steps { t1 } else { t0 + (t1 - t0) * k as f64 / n_steps as f64 })
        .collect()
}
