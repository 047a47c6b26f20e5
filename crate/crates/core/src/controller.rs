//! Feedback laws.
//!
//! [`OesController`] is the learned energy-shaping plus damping-injection law
//! `u = -B^{-1} grad_q V*(q) - K*(t, q, p) B M^{-1}(q) p`, where `V*` is a
//! scalar network with a bounded last hidden layer and `K*` a network with
//! non-negative outputs forming a diagonal gain. [`PdPlusController`] is the
//! PD law with potential compensation used as baseline. The classical
//! closed-form pieces, [`ebpbc_beta`] and [`damping_injection`], act on
//! arbitrary port-Hamiltonian systems.
//!
//! Both learned and baseline policies implement [`PendulumPolicy`], the
//! scalar interface the trainer differentiates through.

use nalgebra::SymmetricEigen;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::neural::{self, Activation, Mlp, MlpSpec, OutputActivation, ParamVector};
use crate::ph::{left_pseudo_inverse, Matrix, MechanicalPh, PendulumParams, PortHamiltonian, Vector};

/// Which signals the networks see besides the configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// `V*(q)` and `K*(t / T, q, p)`.
    TimeVarying,
    /// `V*(q, q*)` and `K*(q, p, q*)`.
    SetPoint,
}

impl Conditioning {
    pub fn potential_inputs(self, n_q: usize) -> usize {
        match self {
            Conditioning::TimeVarying => n_q,
            Conditioning::SetPoint => 2 * n_q,
        }
    }

    pub fn gain_inputs(self, n_q: usize) -> usize {
        match self {
            Conditioning::TimeVarying => 1 + 2 * n_q,
            Conditioning::SetPoint => 3 * n_q,
        }
    }
}

/// Network architectures and horizon of an [`OesController`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OesArchitecture {
    pub n_q: usize,
    pub conditioning: Conditioning,
    /// Horizon `T` used to normalize the time input.
    pub horizon: f64,
    pub potential: MlpSpec,
    pub gain: MlpSpec,
}

impl OesArchitecture {
    /// Builds both networks from hidden widths and activations.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_q: usize,
        conditioning: Conditioning,
        horizon: f64,
        potential_hidden: Vec<usize>,
        potential_activations: Vec<Activation>,
        gain_hidden: Vec<usize>,
        gain_activations: Vec<Activation>,
        gain_output: OutputActivation,
    ) -> Result<Self> {
        let arch = Self {
            n_q,
            conditioning,
            horizon,
            potential: MlpSpec::new(
                conditioning.potential_inputs(n_q),
                potential_hidden,
                potential_activations,
                1,
                OutputActivation::None,
            )?,
            gain: MlpSpec::new(
                conditioning.gain_inputs(n_q),
                gain_hidden,
                gain_activations,
                n_q,
                gain_output,
            )?,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        self.potential.validate()?;
        self.gain.validate()?;
        if self.n_q == 0 {
            return Err(Error::Invalid("n_q must be positive".into()));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Invalid(format!("horizon must be positive, got {}", self.horizon)));
        }
        check_dim("potential network input", self.conditioning.potential_inputs(self.n_q), self.potential.input_dim)?;
        check_dim("potential network output", 1, self.potential.output_dim)?;
        check_dim("gain network input", self.conditioning.gain_inputs(self.n_q), self.gain.input_dim)?;
        check_dim("gain network output", self.n_q, self.gain.output_dim)?;
        if self.potential.activations.last() != Some(&Activation::Tanh) {
            return Err(Error::Invariant(
                "the potential network needs a tanh last hidden layer to stay bounded".into(),
            ));
        }
        if self.gain.output_activation == OutputActivation::None {
            return Err(Error::Invariant(
                "the gain network needs a non-negative output activation (relu or softplus)".into(),
            ));
        }
        Ok(())
    }

    pub fn n_potential_params(&self) -> usize {
        self.potential.n_params()
    }

    pub fn n_params(&self) -> usize {
        self.potential.n_params() + self.gain.n_params()
    }

    /// Xavier initialization; with `zero_output` the output layers of both
    /// networks are zeroed so that the initial control is identically zero.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, zero_output: bool) -> ParamVector {
        let mut v = neural::xavier_init(&self.potential, rng);
        let mut k = neural::xavier_init(&self.gain, rng);
        if zero_output {
            neural::zero_last_layer(&self.potential, &mut v);
            neural::zero_last_layer(&self.gain, &mut k);
        }
        v.0.extend(k.0);
        v
    }
}

/// Energy-shaping and damping-injection controller with learned parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OesController {
    pub architecture: OesArchitecture,
    /// Potential parameters followed by gain parameters.
    pub params: ParamVector,
}

/// Value and first partials of a scalar control.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlPartials {
    pub u: f64,
    pub du_dq: f64,
    pub du_dp: f64,
}

/// A single-input control law on the pendulum, differentiable in its
/// parameters.
pub trait PendulumPolicy: Send + Sync {
    fn n_params(&self) -> usize;

    /// Control at time `t`, state `(q, p)`, for set point `target`.
    fn control(&self, theta: &[f64], t: f64, q: f64, p: f64, target: f64) -> Result<f64>;

    /// Evaluates the control and its state partials, then adds
    /// `w * du/dtheta` into `grad_theta`, where `w = cotangent(u)`.
    #[allow(clippy::too_many_arguments)]
    fn control_adjoint(
        &self,
        theta: &[f64],
        t: f64,
        q: f64,
        p: f64,
        target: f64,
        cotangent: &mut dyn FnMut(f64) -> f64,
        grad_theta: &mut [f64],
    ) -> Result<ControlPartials>;

    /// Maps parameters back onto the admissible set after an update.
    fn project(&self, _theta: &mut [f64]) {}

    /// Energy added to the plant's by the closed loop, if the law shapes one.
    fn added_potential(&self, _theta: &[f64], _q: f64, _target: f64) -> Result<f64> {
        Ok(0.0)
    }
}

/// [`OesController`] bound to the pendulum's inertia for the scalar fast path.
#[derive(Debug, Clone)]
pub struct OesPendulum {
    pub architecture: OesArchitecture,
    pub inertia: f64,
}

impl OesPendulum {
    pub fn new(architecture: OesArchitecture, plant: &PendulumParams) -> Result<Self> {
        architecture.validate()?;
        check_dim("pendulum degrees of freedom", 1, architecture.n_q)?;
        Ok(Self { architecture, inertia: plant.inertia })
    }

    fn inputs(&self, t: f64, q: f64, p: f64, target: f64) -> ([f64; 2], usize, [f64; 3]) {
        match self.architecture.conditioning {
            Conditioning::TimeVarying => ([q, 0.0], 1, [t / self.architecture.horizon, q, p]),
            Conditioning::SetPoint => ([q, target], 2, [q, p, target]),
        }
    }

    /// Index of `q` and `p` inside the gain network's input.
    fn gain_state_index(&self) -> (usize, usize) {
        match self.architecture.conditioning {
            Conditioning::TimeVarying => (1, 2),
            Conditioning::SetPoint => (0, 1),
        }
    }

    pub fn potential(&self, theta: &[f64], q: f64, target: f64) -> Result<f64> {
        let (vn, _) = nets(&self.architecture, theta)?;
        let (zv, nv, _) = self.inputs(0.0, q, 0.0, target);
        Ok(vn.forward(&zv[..nv])?[0])
    }

    pub fn gain(&self, theta: &[f64], t: f64, q: f64, p: f64, target: f64) -> Result<f64> {
        let (_, kn) = nets(&self.architecture, theta)?;
        let (_, _, zk) = self.inputs(t, q, p, target);
        let k = kn.forward(&zk)?[0];
        if k < 0.0 {
            return Err(Error::Invariant(format!("negative damping gain {k}")));
        }
        Ok(k)
    }
}

fn nets<'a>(arch: &'a OesArchitecture, theta: &'a [f64]) -> Result<(Mlp<'a>, Mlp<'a>)> {
    check_dim("controller parameters", arch.n_params(), theta.len())?;
    let (tv, tk) = theta.split_at(arch.n_potential_params());
    Ok((Mlp::new(&arch.potential, tv)?, Mlp::new(&arch.gain, tk)?))
}

impl PendulumPolicy for OesPendulum {
    fn n_params(&self) -> usize {
        self.architecture.n_params()
    }

    fn control(&self, theta: &[f64], t: f64, q: f64, p: f64, target: f64) -> Result<f64> {
        let (vn, kn) = nets(&self.architecture, theta)?;
        let (zv, nv, zk) = self.inputs(t, q, p, target);
        let tape = vn.tape(&zv[..nv])?;
        let mut e_q = [0.0; 2];
        e_q[0] = 1.0;
        let dv = vn.jvp(&tape, &e_q[..nv])[0];
        let k = kn.forward(&zk)?[0];
        if k < 0.0 {
            return Err(Error::Invariant(format!("negative damping gain {k}")));
        }
        Ok(-dv - k * p / self.inertia)
    }

    fn control_adjoint(
        &self,
        theta: &[f64],
        t: f64,
        q: f64,
        p: f64,
        target: f64,
        cotangent: &mut dyn FnMut(f64) -> f64,
        grad_theta: &mut [f64],
    ) -> Result<ControlPartials> {
        check_dim("parameter gradient", theta.len(), grad_theta.len())?;
        let (vn, kn) = nets(&self.architecture, theta)?;
        let (zv, nv, zk) = self.inputs(t, q, p, target);
        let vtape = vn.tape(&zv[..nv])?;
        let ktape = kn.tape(&zk)?;
        let mut e_q = [0.0; 2];
        e_q[0] = 1.0;
        let dv = vn.jvp(&vtape, &e_q[..nv])[0];
        let k = ktape.output()[0];
        if k < 0.0 {
            return Err(Error::Invariant(format!("negative damping gain {k}")));
        }
        let vel = p / self.inertia;
        let u = -dv - k * vel;
        let w = cotangent(u);

        let (gv, gk) = grad_theta.split_at_mut(self.architecture.n_potential_params());
        // u = -dV/dq - K p / J
        let hv = vn.tangent_vjp(&vtape, &e_q[..nv], &[1.0], Some(gv), -w);
        let dk = kn.vjp(&ktape, &[1.0], Some(gk), -w * vel);
        let (iq, ip) = self.gain_state_index();
        Ok(ControlPartials {
            u,
            du_dq: -hv[0] - dk[iq] * vel,
            du_dp: -dk[ip] * vel - k / self.inertia,
        })
    }

    fn added_potential(&self, theta: &[f64], q: f64, target: f64) -> Result<f64> {
        self.potential(theta, q, target)
    }
}

impl OesController {
    pub fn new(architecture: OesArchitecture, params: ParamVector) -> Result<Self> {
        architecture.validate()?;
        check_dim("controller parameters", architecture.n_params(), params.len())?;
        Ok(Self { architecture, params })
    }

    fn potential_input(&self, q: &Vector, target: Option<&Vector>) -> Result<Vec<f64>> {
        let n = self.architecture.n_q;
        check_dim("q", n, q.len())?;
        let mut z = q.as_slice().to_vec();
        if self.architecture.conditioning == Conditioning::SetPoint {
            let target = target.ok_or_else(|| Error::Invalid("set-point controller needs a target".into()))?;
            check_dim("target", n, target.len())?;
            z.extend(target.iter());
        }
        Ok(z)
    }

    fn gain_input(&self, t: f64, q: &Vector, p: &Vector, target: Option<&Vector>) -> Result<Vec<f64>> {
        let n = self.architecture.n_q;
        check_dim("p", n, p.len())?;
        let mut z = Vec::with_capacity(self.architecture.gain.input_dim);
        match self.architecture.conditioning {
            Conditioning::TimeVarying => {
                z.push(t / self.architecture.horizon);
                z.extend(q.iter().chain(p.iter()));
            }
            Conditioning::SetPoint => {
                let target = target.ok_or_else(|| Error::Invalid("set-point controller needs a target".into()))?;
                check_dim("target", n, target.len())?;
                z.extend(q.iter().chain(p.iter()).chain(target.iter()));
            }
        }
        Ok(z)
    }

    /// Learned potential `V*(q)`.
    pub fn potential(&self, q: &Vector, target: Option<&Vector>) -> Result<f64> {
        let (vn, _) = nets(&self.architecture, &self.params)?;
        Ok(vn.forward(&self.potential_input(q, target)?)?[0])
    }

    /// `grad_q V*(q)`.
    pub fn potential_gradient(&self, q: &Vector, target: Option<&Vector>) -> Result<Vector> {
        let (vn, _) = nets(&self.architecture, &self.params)?;
        let tape = vn.tape(&self.potential_input(q, target)?)?;
        let g = vn.vjp(&tape, &[1.0], None, 1.0);
        Ok(Vector::from_column_slice(&g[..self.architecture.n_q]))
    }

    /// Diagonal entries of `K*(t, q, p)`.
    pub fn gains(&self, t: f64, q: &Vector, p: &Vector, target: Option<&Vector>) -> Result<Vector> {
        let (_, kn) = nets(&self.architecture, &self.params)?;
        let k = kn.forward(&self.gain_input(t, q, p, target)?)?;
        if let Some(bad) = k.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::Invariant(format!("negative damping gain {bad}")));
        }
        Ok(Vector::from_vec(k))
    }

    pub fn pendulum(&self, plant: &PendulumParams) -> Result<OesPendulum> {
        OesPendulum::new(self.architecture.clone(), plant)
    }
}

/// The energy-shaping law on a fully actuated mechanical system:
/// `u = -B^{-1} grad V*(q) - diag(K*) B M^{-1}(q) p`.
pub fn oes_control(
    c: &OesController,
    sys: &MechanicalPh,
    t: f64,
    q: &Vector,
    p: &Vector,
    target: Option<&Vector>,
) -> Result<Vector> {
    check_dim("controller degrees of freedom", sys.n_q(), c.architecture.n_q)?;
    let b = sys.input_gain();
    let b_inv = b.clone().try_inverse().ok_or(Error::Singular("input matrix B"))?;
    let shaping = &b_inv * c.potential_gradient(q, target)?;
    let k = c.gains(t, q, p, target)?;
    let damping = (b * sys.velocity(q, p)?).component_mul(&k);
    Ok(-shaping - damping)
}

/// Closed-loop energy `H(q, p) + V*(q)`.
pub fn shaped_energy(c: &OesController, sys: &MechanicalPh, q: &Vector, p: &Vector, target: Option<&Vector>) -> Result<f64> {
    Ok(sys.hamiltonian(q, p)? + c.potential(q, target)?)
}

/// Energy-balancing feedback `beta(x) = -g^+ F^T (grad H* - grad H)`.
pub fn ebpbc_beta<S, G>(sys: &S, grad_h_star: G, x: &Vector) -> Result<Vector>
where
    S: PortHamiltonian + ?Sized,
    G: Fn(&Vector) -> Vector,
{
    check_dim("state", sys.state_dim(), x.len())?;
    let diff = grad_h_star(x) - sys.energy_gradient(x)?;
    check_dim("desired energy gradient", sys.state_dim(), diff.len())?;
    let g_plus = left_pseudo_inverse(&sys.input_matrix(x)?)?;
    Ok(-(g_plus * sys.structure(x)?.transpose() * diff))
}

/// Negative output feedback `v = -K y` for a symmetric positive semidefinite `K`.
pub fn damping_injection(k: &Matrix, y: &Vector) -> Result<Vector> {
    if !k.is_square() {
        return Err(Error::Invalid("damping gain must be square".into()));
    }
    check_dim("passive output", k.nrows(), y.len())?;
    let scale = k.amax().max(1.0);
    if (k - k.transpose()).amax() > 1e-12 * scale {
        return Err(Error::Invariant("damping gain must be symmetric".into()));
    }
    let min_eig = SymmetricEigen::new(k.clone()).eigenvalues.min();
    if min_eig < -1e-12 * scale {
        return Err(Error::Invariant(format!(
            "damping gain must be positive semidefinite (eigenvalue {min_eig:e})"
        )));
    }
    Ok(-(k * y))
}

/// PD law with potential compensation on the pendulum:
/// `u = -m g r sin q - k q - k_p (q - q*) - k_d p / J`.
///
/// The plant potential is cancelled and replaced by `k_p (q - q*)^2 / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdPlusController {
    pub k_p: f64,
    pub k_d: f64,
    pub set_point: f64,
    pub plant: PendulumParams,
}

impl PdPlusController {
    pub fn new(k_p: f64, k_d: f64, set_point: f64, plant: PendulumParams) -> Result<Self> {
        if !(k_p >= 0.0 && k_d >= 0.0) {
            return Err(Error::Invariant(format!("PD gains must be non-negative, got ({k_p}, {k_d})")));
        }
        plant.validate()?;
        Ok(Self { k_p, k_d, set_point, plant })
    }

    pub fn control(&self, q: f64, p: f64) -> f64 {
        pd_law(&self.plant, self.k_p, self.k_d, q, p, self.set_point)
    }

    /// The replacement potential `k_p (q - q*)^2 / 2` the law assigns.
    pub fn assigned_potential(&self, q: f64) -> f64 {
        0.5 * self.k_p * (q - self.set_point).powi(2)
    }

    pub fn policy(&self) -> PdPlusPolicy {
        PdPlusPolicy { plant: self.plant }
    }
}

fn pd_law(plant: &PendulumParams, k_p: f64, k_d: f64, q: f64, p: f64, target: f64) -> f64 {
    -plant.potential_gradient(q) - k_p * (q - target) - k_d * p / plant.inertia
}

/// The PD+ law with parameters `theta = (k_p, k_d)`.
#[derive(Debug, Clone, Copy)]
pub struct PdPlusPolicy {
    pub plant: PendulumParams,
}

impl PendulumPolicy for PdPlusPolicy {
    fn n_params(&self) -> usize {
        2
    }

    fn control(&self, theta: &[f64], _t: f64, q: f64, p: f64, target: f64) -> Result<f64> {
        check_dim("PD gains", 2, theta.len())?;
        Ok(pd_law(&self.plant, theta[0], theta[1], q, p, target))
    }

    fn control_adjoint(
        &self,
        theta: &[f64],
        _t: f64,
        q: f64,
        p: f64,
        target: f64,
        cotangent: &mut dyn FnMut(f64) -> f64,
        grad_theta: &mut [f64],
    ) -> Result<ControlPartials> {
        check_dim("PD gains", 2, theta.len())?;
        check_dim("parameter gradient", 2, grad_theta.len())?;
        let (k_p, k_d) = (theta[0], theta[1]);
        let j = self.plant.inertia;
        let u = pd_law(&self.plant, k_p, k_d, q, p, target);
        let w = cotangent(u);
        grad_theta[0] -= w * (q - target);
        grad_theta[1] -= w * p / j;
        Ok(ControlPartials {
            u,
            du_dq: -self.plant.potential_curvature(q) - k_p,
            du_dp: -k_d / j,
        })
    }

    fn project(&self, theta: &mut [f64]) {
        for g in theta.iter_mut() {
            *g = g.max(0.0);
        }
    }

    fn added_potential(&self, theta: &[f64], q: f64, target: f64) -> Result<f64> {
        check_dim("PD gains", 2, theta.len())?;
        Ok(0.5 * theta[0] * (q - target).powi(2) - self.plant.potential(q))
    }
}
