//! Parameter gradients of trajectory costs through the adjoint equations.
//!
//! For `x' = f(t, x, theta)` on `[0, T]` and cost
//! `l(theta) = L(x(T), theta) + int_0^T r(t, x, theta) dt`, the costate obeys
//! `lambda' = -(lambda^T df/dx + dr/dx)` with `lambda(T) = dL/dx`, and
//! `dl/dtheta = dL/dtheta + int_0^T (lambda^T df/dtheta + dr/dtheta) dt`.
//!
//! [`grad`] solves the costate backward together with the parameter integral.
//! In [`GradMode::Reversible`] the state is re-integrated backward alongside,
//! so memory does not grow with the number of steps; [`GradMode::Checkpointed`]
//! reads the state from the forward solve's dense output instead, which stays
//! accurate when backward integration of the state is ill-conditioned.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::ode::{Dopri5, OdeSystem, Record, SolverConfig, Trajectory};

/// Largest tolerated relative deviation of the backward-reconstructed initial state.
pub const IRREVERSIBILITY_LIMIT: f64 = 1e-3;

/// An optimal-control problem differentiable in its parameters.
///
/// Parameters are passed explicitly so that the same problem can be
/// evaluated at perturbed parameters.
pub trait AdjointProblem: Sync {
    fn state_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    fn horizon(&self) -> f64;

    /// Writes `f(t, x)` into `dx` and returns the running cost `r(t, x)`.
    fn field(&self, theta: &[f64], t: f64, x: &[f64], dx: &mut [f64]) -> Result<f64>;

    fn terminal_cost(&self, theta: &[f64], x: &[f64]) -> Result<f64>;

    /// Writes `dL/dx` into `grad_x` and adds `dL/dtheta` into `grad_theta`.
    fn terminal_gradient(&self, theta: &[f64], x: &[f64], grad_x: &mut [f64], grad_theta: &mut [f64]) -> Result<()>;

    /// At `(t, x)` with costate `lam`, writes `f` into `dx`,
    /// `lam^T df/dx + dr/dx` into `a_x` and `lam^T df/dtheta + dr/dtheta`
    /// into `a_theta`. The buffers arrive zeroed.
    #[allow(clippy::too_many_arguments)]
    fn adjoint_terms(
        &self,
        theta: &[f64],
        t: f64,
        x: &[f64],
        lam: &[f64],
        dx: &mut [f64],
        a_x: &mut [f64],
        a_theta: &mut [f64],
    ) -> Result<()>;
}

/// How the backward pass obtains the state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    /// Re-integrate the state backward next to the costate.
    #[default]
    Reversible,
    /// Interpolate the forward solution.
    Checkpointed,
    /// Reversible, repeated checkpointed when the reconstruction guard trips.
    Auto,
}

/// Result of a gradient evaluation.
#[derive(Debug, Clone)]
pub struct Gradient {
    pub loss: f64,
    pub terminal: f64,
    pub running: f64,
    pub grad: Vec<f64>,
    /// Relative deviation of the backward-reconstructed `x(0)`; zero when the
    /// state was not reconstructed.
    pub reconstruction_error: f64,
    pub mode_used: GradMode,
}

struct Forward<'a, P: ?Sized> {
    p: &'a P,
    theta: &'a [f64],
    n: usize,
}

impl<P: AdjointProblem + ?Sized> OdeSystem for Forward<'_, P> {
    fn dim(&self) -> usize {
        self.n + 1
    }
    fn coupled_dim(&self) -> usize {
        self.n
    }
    fn rhs(&mut self, t: f64, x: &[f64], dx: &mut [f64]) -> Result<()> {
        let (dxs, dc) = dx.split_at_mut(self.n);
        dc[0] = self.p.field(self.theta, t, &x[..self.n], dxs)?;
        Ok(())
    }
}

/// Backward system on `(x, lambda, Q)` with `Q' = a_theta`.
struct Backward<'a, P: ?Sized> {
    p: &'a P,
    theta: &'a [f64],
    n: usize,
    /// Forward solution to read `x` from; `None` integrates `x` itself.
    dense: Option<&'a Trajectory>,
    x_buf: Vec<f64>,
    dx_buf: Vec<f64>,
}

impl<P: AdjointProblem + ?Sized> Backward<'_, P> {
    fn x_offset(&self) -> usize {
        if self.dense.is_some() {
            0
        } else {
            self.n
        }
    }
}

impl<P: AdjointProblem + ?Sized> OdeSystem for Backward<'_, P> {
    fn dim(&self) -> usize {
        self.x_offset() + self.n + self.theta.len()
    }
    fn coupled_dim(&self) -> usize {
        self.x_offset() + self.n
    }
    fn rhs(&mut self, t: f64, z: &[f64], dz: &mut [f64]) -> Result<()> {
        let n = self.n;
        dz.iter_mut().for_each(|v| *v = 0.0);
        match self.dense {
            None => {
                let (dx, rest) = dz.split_at_mut(n);
                let (a_x, a_th) = rest.split_at_mut(n);
                self.p.adjoint_terms(self.theta, t, &z[..n], &z[n..2 * n], dx, a_x, a_th)?;
                a_x.iter_mut().for_each(|v| *v = -*v);
            }
            Some(traj) => {
                if !traj.interpolate_into(t, &mut self.x_buf) {
                    return Err(Error::Invalid(format!("time {t} outside the forward solution")));
                }
                self.dx_buf.iter_mut().for_each(|v| *v = 0.0);
                let (a_x, a_th) = dz.split_at_mut(n);
                self.p.adjoint_terms(self.theta, t, &self.x_buf, &z[..n], &mut self.dx_buf, a_x, a_th)?;
                a_x.iter_mut().for_each(|v| *v = -*v);
            }
        }
        Ok(())
    }
}

fn check_inputs<P: AdjointProblem + ?Sized>(p: &P, theta: &[f64], x0: &[f64]) -> Result<()> {
    check_dim("parameters", p.param_dim(), theta.len())?;
    check_dim("initial state", p.state_dim(), x0.len())?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial state"));
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("parameters"));
    }
    if !(p.horizon() > 0.0) {
        return Err(Error::Invalid("horizon must be positive".into()));
    }
    Ok(())
}

/// Loss split into its terminal and running parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub terminal: f64,
    pub running: f64,
}

fn forward_solve<P: AdjointProblem + ?Sized>(
    p: &P,
    theta: &[f64],
    x0: &[f64],
    cfg: &SolverConfig,
    record: Record,
) -> Result<(LossValue, Trajectory)> {
    check_inputs(p, theta, x0)?;
    let n = p.state_dim();
    let mut sys = Forward { p, theta, n };
    let mut z0 = x0.to_vec();
    z0.push(0.0);
    let solver = Dopri5::new(*cfg)?.with_error_groups(vec![0..n, n..n + 1]);
    let traj = solver.integrate(&mut sys, 0.0, p.horizon(), &z0, record)?;
    let zt = traj.final_state();
    let terminal = p.terminal_cost(theta, &zt[..n])?;
    let running = zt[n];
    Ok((LossValue { loss: terminal + running, terminal, running }, traj))
}

/// Forward solve of the state augmented with the running-cost accumulator.
///
/// The returned trajectory has `state_dim + 1` components (the last is the
/// accumulated running cost) and carries dense output.
pub fn loss<P: AdjointProblem + ?Sized>(
    p: &P,
    theta: &[f64],
    x0: &[f64],
    cfg: &SolverConfig,
) -> Result<(LossValue, Trajectory)> {
    forward_solve(p, theta, x0, cfg, Record::Dense)
}

/// Loss value only, without keeping the trajectory.
pub fn loss_value<P: AdjointProblem + ?Sized>(p: &P, theta: &[f64], x0: &[f64], cfg: &SolverConfig) -> Result<LossValue> {
    Ok(forward_solve(p, theta, x0, cfg, Record::Endpoints)?.0)
}

/// Loss and its parameter gradient.
pub fn grad<P: AdjointProblem + ?Sized>(
    p: &P,
    theta: &[f64],
    x0: &[f64],
    cfg: &SolverConfig,
    mode: GradMode,
) -> Result<Gradient> {
    let record = if mode == GradMode::Checkpointed { Record::Dense } else { Record::Endpoints };
    let (value, traj) = forward_solve(p, theta, x0, cfg, record)?;
    match mode {
        GradMode::Checkpointed => backward(p, theta, x0, cfg, value, traj.final_state(), Some(&traj)),
        GradMode::Reversible => backward(p, theta, x0, cfg, value, traj.final_state(), None),
        GradMode::Auto => match backward(p, theta, x0, cfg, value, traj.final_state(), None) {
            Ok(g) => Ok(g),
            Err(Error::Irreversible { .. } | Error::StepUnderflow { .. } | Error::MaxSteps { .. } | Error::NonFinite(_)) => {
                log::debug!("state reconstruction failed, retrying with checkpointed backward pass");
                let (value, traj) = forward_solve(p, theta, x0, cfg, Record::Dense)?;
                backward(p, theta, x0, cfg, value, traj.final_state(), Some(&traj))
            }
            Err(e) => Err(e),
        },
    }
}

fn backward<P: AdjointProblem + ?Sized>(
    p: &P,
    theta: &[f64],
    x0: &[f64],
    cfg: &SolverConfig,
    value: LossValue,
    z_t: &[f64],
    dense: Option<&Trajectory>,
) -> Result<Gradient> {
    let n = p.state_dim();
    let m = theta.len();
    let x_t = &z_t[..n];
    let mut lam_t = vec![0.0; n];
    let mut g = vec![0.0; m];
    p.terminal_gradient(theta, x_t, &mut lam_t, &mut g)?;

    let mut sys = Backward { p, theta, n, dense, x_buf: vec![0.0; n], dx_buf: vec![0.0; n] };
    let off = sys.x_offset();
    let mut z = Vec::with_capacity(off + n + m);
    if dense.is_none() {
        z.extend_from_slice(x_t);
    }
    z.extend_from_slice(&lam_t);
    z.extend(std::iter::repeat(0.0).take(m));
    let mut groups = vec![off..off + n, off + n..off + n + m];
    if off > 0 {
        groups.insert(0, 0..n);
    }
    let solver = Dopri5::new(*cfg)?.with_error_groups(groups);
    let traj = solver.integrate(&mut sys, p.horizon(), 0.0, &z, Record::Endpoints)?;
    let z0 = traj.final_state();

    let mut reconstruction_error = 0.0;
    if dense.is_none() {
        reconstruction_error = x0
            .iter()
            .zip(&z0[..n])
            .map(|(a, b)| (a - b).abs() / (1.0 + a.abs()))
            .fold(0.0, f64::max);
        if !(reconstruction_error <= IRREVERSIBILITY_LIMIT) {
            return Err(Error::Irreversible { deviation: reconstruction_error, limit: IRREVERSIBILITY_LIMIT });
        }
    }
    for (gi, qi) in g.iter_mut().zip(&z0[off + n..]) {
        *gi -= qi;
    }
    Ok(Gradient {
        loss: value.loss,
        terminal: value.terminal,
        running: value.running,
        grad: g,
        reconstruction_error,
        mode_used: if dense.is_some() { GradMode::Checkpointed } else { GradMode::Reversible },
    })
}

/// Central finite differences `(l(theta + h e_i) - l(theta - h e_i)) / 2h`
/// for the listed parameter indices (all when `None`).
pub fn fd_grad<P: AdjointProblem + ?Sized>(
    p: &P,
    theta: &[f64],
    x0: &[f64],
    cfg: &SolverConfig,
    h: f64,
    indices: Option<&[usize]>,
) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::Invalid("finite-difference step must be positive".into()));
    }
    check_inputs(p, theta, x0)?;
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..theta.len()).collect();
            &all
        }
    };
    let mut th = theta.to_vec();
    idx.iter()
        .map(|&i| {
            if i >= theta.len() {
                return Err(Error::Invalid(format!("parameter index {i} out of range")));
            }
            th[i] = theta[i] + h;
            let lp = loss_value(p, &th, x0, cfg)?.loss;
            th[i] = theta[i] - h;
            let lm = loss_value(p, &th, x0, cfg)?.loss;
            th[i] = theta[i];
            Ok((lp - lm) / (2.0 * h))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// `x' = theta_0 x`, `L = a x(T)`, `r = theta_1`.
    struct Scalar {
        horizon: f64,
        a: f64,
    }

    impl AdjointProblem for Scalar {
        fn state_dim(&self) -> usize {
            1
        }
        fn param_dim(&self) -> usize {
            2
        }
        fn horizon(&self) -> f64 {
            self.horizon
        }
        fn field(&self, th: &[f64], _t: f64, x: &[f64], dx: &mut [f64]) -> Result<f64> {
            dx[0] = th[0] * x[0];
            Ok(th[1])
        }
        fn terminal_cost(&self, _th: &[f64], x: &[f64]) -> Result<f64> {
            Ok(self.a * x[0])
        }
        fn terminal_gradient(&self, _th: &[f64], _x: &[f64], gx: &mut [f64], _gt: &mut [f64]) -> Result<()> {
            gx[0] = self.a;
            Ok(())
        }
        fn adjoint_terms(
            &self,
            th: &[f64],
            _t: f64,
            x: &[f64],
            lam: &[f64],
            dx: &mut [f64],
            a_x: &mut [f64],
            a_th: &mut [f64],
        ) -> Result<()> {
            dx[0] = th[0] * x[0];
            a_x[0] = lam[0] * th[0];
            a_th[0] = lam[0] * x[0];
            a_th[1] = 1.0;
            Ok(())
        }
    }

    fn tight() -> SolverConfig {
        SolverConfig::with_tolerances(1e-10, 1e-10)
    }

    #[test]
    fn scalar_sensitivity_closed_form() {
        let p = Scalar { horizon: 1.0, a: 1.0 };
        let th = [0.5, 0.0];
        for mode in [GradMode::Reversible, GradMode::Checkpointed, GradMode::Auto] {
            let g = grad(&p, &th, &[1.0], &tight(), mode).unwrap();
            assert_abs_diff_eq!(g.loss, 0.5f64.exp(), epsilon = 1e-8);
            assert_abs_diff_eq!(g.grad[0], 0.5f64.exp(), epsilon = 1e-8);
            assert_abs_diff_eq!(g.grad[1], 1.0, epsilon = 1e-10);
        }
        let fd = fd_grad(&p, &th, &[1.0], &tight(), 1e-5, None).unwrap();
        let g = grad(&p, &th, &[1.0], &tight(), GradMode::Reversible).unwrap();
        assert_abs_diff_eq!(fd[0], g.grad[0], epsilon = 1e-6);
        assert_abs_diff_eq!(fd[1], 1.0, epsilon = 1e-9);
        assert_eq!(fd, fd_grad(&p, &th, &[1.0], &tight(), 1e-5, None).unwrap());
    }

    #[test]
    fn trivial_costs() {
        let p = Scalar { horizon: 2.5, a: 0.0 };
        let (v, traj) = loss(&p, &[0.0, 0.0], &[3.0], &tight()).unwrap();
        assert_eq!(v.loss, 0.0);
        assert_eq!(traj.dim(), 2);
        let p = Scalar { horizon: 2.5, a: 1.0 };
        let v = loss_value(&p, &[0.0, 1.0], &[3.0], &tight()).unwrap();
        assert_abs_diff_eq!(v.loss, 2.5 + 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v.running, 2.5, epsilon = 1e-12);
    }

    #[test]
    fn terminal_cotangent_scales_gradient() {
        let th = [-0.3, 0.0];
        let g1 = grad(&Scalar { horizon: 2.0, a: 1.0 }, &th, &[0.7], &tight(), GradMode::Reversible).unwrap();
        let g3 = grad(&Scalar { horizon: 2.0, a: 3.0 }, &th, &[0.7], &tight(), GradMode::Reversible).unwrap();
        assert_abs_diff_eq!(g3.grad[0], 3.0 * g1.grad[0], epsilon = 1e-9);
    }

    #[test]
    fn bad_inputs() {
        let p = Scalar { horizon: 1.0, a: 1.0 };
        assert!(grad(&p, &[0.5], &[1.0], &tight(), GradMode::Reversible).is_err());
        assert!(loss(&p, &[0.5, 0.0], &[f64::NAN], &tight()).is_err());
        assert!(fd_grad(&p, &[0.5, 0.0], &[1.0], &tight(), 0.0, None).is_err());
    }

    #[test]
    fn strongly_contracting_state_trips_guard() {
        // Backward integration of x' = -20 x amplifies the terminal error by e^{20 T}.
        let p = Scalar { horizon: 1.0, a: 1.0 };
        let th = [-20.0, 0.0];
        let cfg = tight();
        let r = grad(&p, &th, &[1.0], &cfg, GradMode::Reversible);
        assert!(matches!(r, Err(Error::Irreversible { .. })), "{r:?}");
        let g = grad(&p, &th, &[1.0], &cfg, GradMode::Auto).unwrap();
        assert_eq!(g.mode_used, GradMode::Checkpointed);
        // d/dtheta e^{theta} = e^{theta} at T = 1.
        approx::assert_relative_eq!(g.grad[0], (-20f64).exp(), max_relative = 1e-4);
    }
}
