//! Port-Hamiltonian models.
//!
//! A system `x' = F(x) grad H(x) + g(x) u`, `y = g(x)^T grad H(x)` is
//! described by the [`PortHamiltonian`] trait. [`PhSystem`] builds one from
//! closures, [`MechanicalPh`] from the canonical mechanical data
//! `(M, V, D, B)` with state `x = (q, p)`, and [`PendulumParams`] is the
//! elastic-joint pendulum used in the experiments.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Relative threshold below which singular values count as zero.
const RANK_TOL: f64 = 1e-10;

pub trait PortHamiltonian {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    /// Interconnection and damping matrix `F(x)`.
    fn structure(&self, x: &Vector) -> Result<Matrix>;
    /// Input matrix `g(x)`.
    fn input_matrix(&self, x: &Vector) -> Result<Matrix>;
    fn energy(&self, x: &Vector) -> Result<f64>;
    fn energy_gradient(&self, x: &Vector) -> Result<Vector>;

    /// Left full-rank annihilator `g_perp(x)` with `g_perp g = 0`.
    ///
    /// The default builds an orthonormal basis of the orthogonal complement of
    /// `range(g)`; it fails when `g` loses column rank.
    fn annihilator(&self, x: &Vector) -> Result<Matrix> {
        let g = self.input_matrix(x)?;
        let n = g.nrows();
        let gtg_inv = normal_inverse(&g)?;
        let proj = Matrix::identity(n, n) - &g * gtg_inv * g.transpose();
        let eig = SymmetricEigen::new(proj);
        let rows: Vec<_> = (0..n)
            .filter(|&k| eig.eigenvalues[k] > 0.5)
            .map(|k| eig.eigenvectors.column(k).transpose())
            .collect();
        if rows.len() != n - g.ncols() {
            return Err(Error::RankDeficient("annihilator of g"));
        }
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, n));
        }
        Ok(Matrix::from_rows(&rows))
    }
}

/// `(g^T g)^{-1}`, failing when `g` is not of full column rank.
fn normal_inverse(g: &Matrix) -> Result<Matrix> {
    let gtg = g.transpose() * g;
    let scale = gtg.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let eig = SymmetricEigen::new(gtg.clone());
    if eig.eigenvalues.iter().any(|&l| l <= RANK_TOL * scale) {
        return Err(Error::RankDeficient("input matrix g"));
    }
    gtg.try_inverse().ok_or(Error::RankDeficient("input matrix g"))
}

/// Left pseudo-inverse `g^+ = (g^T g)^{-1} g^T`.
pub fn left_pseudo_inverse(g: &Matrix) -> Result<Matrix> {
    Ok(normal_inverse(g)? * g.transpose())
}

fn check_state<S: PortHamiltonian + ?Sized>(sys: &S, x: &Vector) -> Result<()> {
    check_dim("state", sys.state_dim(), x.len())
}

/// `F(x) grad H(x) + g(x) u`.
pub fn vector_field<S: PortHamiltonian + ?Sized>(sys: &S, x: &Vector, u: &Vector) -> Result<Vector> {
    check_state(sys, x)?;
    check_dim("input", sys.input_dim(), u.len())?;
    Ok(sys.structure(x)? * sys.energy_gradient(x)? + sys.input_matrix(x)? * u)
}

/// Passive output `g(x)^T grad H(x)`.
pub fn passive_output<S: PortHamiltonian + ?Sized>(sys: &S, x: &Vector) -> Result<Vector> {
    check_state(sys, x)?;
    Ok(sys.input_matrix(x)?.transpose() * sys.energy_gradient(x)?)
}

/// `dH/dt - <y, u>`, which equals `<grad H, F grad H>` and is non-positive
/// for a passive system.
pub fn power_balance_residual<S: PortHamiltonian + ?Sized>(sys: &S, x: &Vector, u: &Vector) -> Result<f64> {
    let grad = sys.energy_gradient(x)?;
    let h_dot = grad.dot(&vector_field(sys, x, u)?);
    let supplied = passive_output(sys, x)?.dot(u);
    Ok(h_dot - supplied)
}

/// `[g_perp F^T; g^T] (grad H* - grad H)`, zero exactly when `H*` satisfies
/// the matching equations at `x`.
pub fn matching_residual<S, G>(sys: &S, grad_h_star: G, x: &Vector) -> Result<Vector>
where
    S: PortHamiltonian + ?Sized,
    G: Fn(&Vector) -> Vector,
{
    check_state(sys, x)?;
    let diff = grad_h_star(x) - sys.energy_gradient(x)?;
    check_dim("desired energy gradient", sys.state_dim(), diff.len())?;
    let perp = sys.annihilator(x)?;
    let upper = &perp * sys.structure(x)?.transpose() * &diff;
    let lower = sys.input_matrix(x)?.transpose() * &diff;
    Ok(Vector::from_iterator(
        upper.len() + lower.len(),
        upper.iter().chain(lower.iter()).copied(),
    ))
}

type StateMatrixFn = dyn Fn(&Vector) -> Matrix + Send + Sync;
type StateScalarFn = dyn Fn(&Vector) -> f64 + Send + Sync;
type StateVectorFn = dyn Fn(&Vector) -> Vector + Send + Sync;

/// A port-Hamiltonian system given by user-supplied maps. The gradient of the
/// energy is supplied analytically.
#[derive(Clone)]
pub struct PhSystem {
    n_x: usize,
    n_u: usize,
    structure: Arc<StateMatrixFn>,
    input: Arc<StateMatrixFn>,
    energy: Arc<StateScalarFn>,
    energy_gradient: Arc<StateVectorFn>,
}

impl PhSystem {
    pub fn new(
        n_x: usize,
        n_u: usize,
        structure: impl Fn(&Vector) -> Matrix + Send + Sync + 'static,
        input: impl Fn(&Vector) -> Matrix + Send + Sync + 'static,
        energy: impl Fn(&Vector) -> f64 + Send + Sync + 'static,
        energy_gradient: impl Fn(&Vector) -> Vector + Send + Sync + 'static,
    ) -> Result<Self> {
        if n_x == 0 || n_u == 0 {
            return Err(Error::Invalid("state and input dimensions must be positive".into()));
        }
        Ok(Self {
            n_x,
            n_u,
            structure: Arc::new(structure),
            input: Arc::new(input),
            energy: Arc::new(energy),
            energy_gradient: Arc::new(energy_gradient),
        })
    }

    /// Checks `F + F^T <= 0` and full column rank of `g` at the given states.
    pub fn check_invariants<'a>(&self, samples: impl IntoIterator<Item = &'a Vector>) -> Result<()> {
        check_structure_invariants(self, samples)
    }
}

/// Verifies the structural invariants of `sys` at sample states.
pub fn check_structure_invariants<'a, S: PortHamiltonian + ?Sized>(
    sys: &S,
    samples: impl IntoIterator<Item = &'a Vector>,
) -> Result<()> {
    for x in samples {
        let f = sys.structure(x)?;
        check_dim("F rows", sys.state_dim(), f.nrows())?;
        let sym = &f + f.transpose();
        let max_eig = SymmetricEigen::new(sym)
            .eigenvalues
            .iter()
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        if max_eig > 1e-12 * (1.0 + f.norm()) {
            return Err(Error::Invariant(format!(
                "F + F^T has positive eigenvalue {max_eig:e}"
            )));
        }
        normal_inverse(&sys.input_matrix(x)?)?;
    }
    Ok(())
}

impl PortHamiltonian for PhSystem {
    fn state_dim(&self) -> usize {
        self.n_x
    }
    fn input_dim(&self) -> usize {
        self.n_u
    }
    fn structure(&self, x: &Vector) -> Result<Matrix> {
        Ok((self.structure)(x))
    }
    fn input_matrix(&self, x: &Vector) -> Result<Matrix> {
        Ok((self.input)(x))
    }
    fn energy(&self, x: &Vector) -> Result<f64> {
        Ok((self.energy)(x))
    }
    fn energy_gradient(&self, x: &Vector) -> Result<Vector> {
        Ok((self.energy_gradient)(x))
    }
}

/// Inertia of a mechanical system.
#[derive(Clone)]
pub enum Inertia {
    Constant(Matrix),
    /// Configuration-dependent `M(q)` with partial derivatives `dM/dq_i`.
    Configuration {
        matrix: Arc<dyn Fn(&Vector) -> Matrix + Send + Sync>,
        partials: Arc<dyn Fn(&Vector) -> Vec<Matrix> + Send + Sync>,
    },
}

/// Fully actuated mechanical system in canonical coordinates `x = (q, p)`:
/// `F = [[0, I], [-I, D]]`, `g = [0; B]`, `H = p^T M^{-1}(q) p / 2 + V(q)`.
#[derive(Clone)]
pub struct MechanicalPh {
    n_q: usize,
    inertia: Inertia,
    potential: Arc<StateScalarFn>,
    potential_gradient: Arc<StateVectorFn>,
    damping: Matrix,
    input: Matrix,
}

impl MechanicalPh {
    pub fn new(
        n_q: usize,
        inertia: Inertia,
        potential: impl Fn(&Vector) -> f64 + Send + Sync + 'static,
        potential_gradient: impl Fn(&Vector) -> Vector + Send + Sync + 'static,
        damping: Matrix,
        input: Matrix,
    ) -> Result<Self> {
        if n_q == 0 {
            return Err(Error::Invalid("n_q must be positive".into()));
        }
        for (m, what) in [(&damping, "damping D"), (&input, "input matrix B")] {
            if m.nrows() != n_q || m.ncols() != n_q {
                return Err(Error::Dimension { what, expected: n_q, got: m.nrows().max(m.ncols()) });
            }
        }
        if (&damping - damping.transpose()).amax() > 1e-12 * (1.0 + damping.amax()) {
            return Err(Error::Invariant("D must be symmetric".into()));
        }
        let max_eig = SymmetricEigen::new(damping.clone())
            .eigenvalues
            .iter()
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        if max_eig > 1e-12 {
            return Err(Error::Invariant("D must be negative semidefinite".into()));
        }
        if input.clone().try_inverse().is_none() {
            return Err(Error::Singular("input matrix B"));
        }
        if let Inertia::Constant(m) = &inertia {
            check_dim("inertia", n_q, m.nrows())?;
            if m.clone().cholesky().is_none() {
                return Err(Error::Invariant("M must be symmetric positive definite".into()));
            }
        }
        Ok(Self {
            n_q,
            inertia,
            potential: Arc::new(potential),
            potential_gradient: Arc::new(potential_gradient),
            damping,
            input,
        })
    }

    pub fn n_q(&self) -> usize {
        self.n_q
    }

    pub fn damping(&self) -> &Matrix {
        &self.damping
    }

    pub fn input_gain(&self) -> &Matrix {
        &self.input
    }

    pub fn mass_matrix(&self, q: &Vector) -> Matrix {
        match &self.inertia {
            Inertia::Constant(m) => m.clone(),
            Inertia::Configuration { matrix, .. } => matrix(q),
        }
    }

    /// `M^{-1}(q) p`, i.e. the generalized velocity.
    pub fn velocity(&self, q: &Vector, p: &Vector) -> Result<Vector> {
        let chol = self
            .mass_matrix(q)
            .cholesky()
            .ok_or(Error::Singular("inertia M(q)"))?;
        Ok(chol.solve(p))
    }

    pub fn potential(&self, q: &Vector) -> f64 {
        (self.potential)(q)
    }

    pub fn potential_gradient(&self, q: &Vector) -> Vector {
        (self.potential_gradient)(q)
    }

    /// Total energy `p^T M^{-1}(q) p / 2 + V(q)`.
    pub fn hamiltonian(&self, q: &Vector, p: &Vector) -> Result<f64> {
        check_dim("q", self.n_q, q.len())?;
        check_dim("p", self.n_q, p.len())?;
        let v = self.velocity(q, p)?;
        Ok(0.5 * p.dot(&v) + self.potential(q))
    }

    pub fn split(&self, x: &Vector) -> (Vector, Vector) {
        (x.rows(0, self.n_q).into_owned(), x.rows(self.n_q, self.n_q).into_owned())
    }
}

impl PortHamiltonian for MechanicalPh {
    fn state_dim(&self) -> usize {
        2 * self.n_q
    }
    fn input_dim(&self) -> usize {
        self.n_q
    }
    fn structure(&self, _x: &Vector) -> Result<Matrix> {
        let n = self.n_q;
        let mut f = Matrix::zeros(2 * n, 2 * n);
        f.view_mut((0, n), (n, n)).copy_from(&Matrix::identity(n, n));
        f.view_mut((n, 0), (n, n)).copy_from(&(-Matrix::identity(n, n)));
        f.view_mut((n, n), (n, n)).copy_from(&self.damping);
        Ok(f)
    }
    fn input_matrix(&self, _x: &Vector) -> Result<Matrix> {
        let n = self.n_q;
        let mut g = Matrix::zeros(2 * n, n);
        g.view_mut((n, 0), (n, n)).copy_from(&self.input);
        Ok(g)
    }
    fn energy(&self, x: &Vector) -> Result<f64> {
        check_dim("state", 2 * self.n_q, x.len())?;
        let (q, p) = self.split(x);
        self.hamiltonian(&q, &p)
    }
    fn energy_gradient(&self, x: &Vector) -> Result<Vector> {
        check_dim("state", 2 * self.n_q, x.len())?;
        let (q, p) = self.split(x);
        let v = self.velocity(&q, &p)?;
        let mut grad_q = self.potential_gradient(&q);
        if let Inertia::Configuration { partials, .. } = &self.inertia {
            // d/dq_i (p^T M^{-1} p / 2) = -v^T (dM/dq_i) v / 2
            for (i, dm) in partials(&q).iter().enumerate() {
                grad_q[i] -= 0.5 * v.dot(&(dm * &v));
            }
        }
        Ok(Vector::from_iterator(2 * self.n_q, grad_q.iter().chain(v.iter()).copied()))
    }
    /// `[B~ 0]` with `B~ = I`.
    fn annihilator(&self, _x: &Vector) -> Result<Matrix> {
        let n = self.n_q;
        let mut perp = Matrix::zeros(n, 2 * n);
        perp.view_mut((0, 0), (n, n)).copy_from(&Matrix::identity(n, n));
        Ok(perp)
    }
}

/// Elastic-joint pendulum: `H = p^2 / (2J) + m g r (1 - cos q) + k q^2 / 2`,
/// viscous friction `beta`, unit input gain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PendulumParams {
    /// Mass [kg].
    pub m: f64,
    /// Center-of-mass distance [m].
    pub r: f64,
    /// Torsional stiffness [N m/rad].
    pub k: f64,
    /// Viscous friction [N m s/rad].
    pub beta: f64,
    /// Inertia [kg m^2].
    pub inertia: f64,
    /// Gravitational acceleration [m/s^2].
    pub gravity: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            m: 1.0,
            r: 1.0,
            k: 0.5,
            beta: 0.01,
            inertia: 1.0,
            gravity: 9.81,
        }
    }
}

impl PendulumParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("m", self.m),
            ("r", self.r),
            ("k", self.k),
            ("inertia", self.inertia),
            ("gravity", self.gravity),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Invalid(format!("pendulum parameter {name} must be positive, got {v}")));
            }
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Invalid(format!("pendulum friction must be non-negative, got {}", self.beta)));
        }
        Ok(())
    }

    fn mgr(&self) -> f64 {
        self.m * self.gravity * self.r
    }

    pub fn potential(&self, q: f64) -> f64 {
        self.mgr() * (1.0 - q.cos()) + 0.5 * self.k * q * q
    }

    pub fn potential_gradient(&self, q: f64) -> f64 {
        self.mgr() * q.sin() + self.k * q
    }

    pub fn potential_curvature(&self, q: f64) -> f64 {
        self.mgr() * q.cos() + self.k
    }

    pub fn hamiltonian(&self, q: f64, p: f64) -> f64 {
        0.5 * p * p / self.inertia + self.potential(q)
    }

    /// Open-loop dynamics with torque `u`.
    pub fn field(&self, q: f64, p: f64, u: f64) -> [f64; 2] {
        let v = p / self.inertia;
        [v, -self.potential_gradient(q) - self.beta * v + u]
    }

    /// The pendulum as a generic mechanical port-Hamiltonian system.
    pub fn mechanical(&self) -> Result<MechanicalPh> {
        self.validate()?;
        let pars = *self;
        MechanicalPh::new(
            1,
            Inertia::Constant(Matrix::from_element(1, 1, self.inertia)),
            move |q| pars.potential(q[0]),
            move |q| Vector::from_element(1, pars.potential_gradient(q[0])),
            Matrix::from_element(1, 1, -self.beta),
            Matrix::identity(1, 1),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn pendulum() -> MechanicalPh {
        PendulumParams::default().mechanical().unwrap()
    }

    fn v2(a: f64, b: f64) -> Vector {
        Vector::from_vec(vec![a, b])
    }

    #[test]
    fn vector_field_examples() {
        let sys = pendulum();
        let u0 = Vector::zeros(1);
        assert_eq!(vector_field(&sys, &v2(0.0, 0.0), &u0).unwrap(), v2(0.0, 0.0));
        let f = vector_field(&sys, &v2(FRAC_PI_2, 0.0), &u0).unwrap();
        assert_abs_diff_eq!(f[0], 0.0);
        assert_abs_diff_eq!(f[1], -10.5954, epsilon = 1e-4);
        let f = vector_field(&sys, &v2(0.0, 1.0), &u0).unwrap();
        assert_abs_diff_eq!(f[0], 1.0);
        assert_abs_diff_eq!(f[1], -0.01, epsilon = 1e-15);
        assert!(matches!(
            vector_field(&sys, &v2(0.0, 1.0), &Vector::zeros(2)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn passive_output_is_velocity() {
        let sys = pendulum();
        assert_eq!(passive_output(&sys, &v2(0.7, 0.0)).unwrap()[0], 0.0);
        assert_eq!(passive_output(&sys, &v2(0.0, 2.0)).unwrap()[0], 2.0);
        assert_eq!(passive_output(&sys, &v2(1.0, -0.5)).unwrap()[0], -0.5);
    }

    #[test]
    fn hamiltonian_examples() {
        let sys = pendulum();
        let h = |q: f64, p: f64| sys.hamiltonian(&Vector::from_element(1, q), &Vector::from_element(1, p)).unwrap();
        assert_eq!(h(0.0, 0.0), 0.0);
        assert_abs_diff_eq!(h(PI, 0.0), 22.0874, epsilon = 1e-4);
        assert_abs_diff_eq!(h(0.0, 1.0), 0.5);
        let singular = MechanicalPh::new(
            1,
            Inertia::Configuration {
                matrix: Arc::new(|_| Matrix::zeros(1, 1)),
                partials: Arc::new(|_| vec![Matrix::zeros(1, 1)]),
            },
            |_| 0.0,
            |_| Vector::zeros(1),
            Matrix::zeros(1, 1),
            Matrix::identity(1, 1),
        )
        .unwrap();
        assert!(matches!(
            singular.hamiltonian(&Vector::zeros(1), &Vector::zeros(1)),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn power_balance_examples() {
        let lossless = PendulumParams { beta: 0.0, ..Default::default() }.mechanical().unwrap();
        let u0 = Vector::zeros(1);
        assert_abs_diff_eq!(power_balance_residual(&lossless, &v2(1.3, -2.0), &u0).unwrap(), 0.0, epsilon = 1e-12);
        let sys = pendulum();
        assert_abs_diff_eq!(power_balance_residual(&sys, &v2(0.0, 1.0), &u0).unwrap(), -0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(power_balance_residual(&sys, &v2(2.5, 0.0), &Vector::from_element(1, 3.0)).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn matching_examples() {
        let sys = pendulum();
        let x = v2(0.4, -1.1);
        let r = matching_residual(&sys, |x| sys.energy_gradient(x).unwrap(), &x).unwrap();
        assert_eq!(r.len(), 2);
        assert!(r.iter().all(|v| *v == 0.0));
        // Potential-only shaping
        let r = matching_residual(
            &sys,
            |x| {
                let mut g = sys.energy_gradient(x).unwrap();
                g[0] += (3.0 * x[0]).cos() * 2.0;
                g
            },
            &x,
        )
        .unwrap();
        assert!(r.amax() < 1e-12);
        // Momentum-dependent shaping violates the reduced equation.
        let x = v2(0.0, 1.0);
        let r = matching_residual(
            &sys,
            |x| {
                let mut g = sys.energy_gradient(x).unwrap();
                g[1] += x[1];
                g
            },
            &x,
        )
        .unwrap();
        assert!(r.amax() > 0.5);
    }

    #[test]
    fn generic_annihilator_matches_mechanical_structure() {
        let mech = pendulum();
        let pars = PendulumParams::default();
        let generic = PhSystem::new(
            2,
            1,
            move |_| Matrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -pars.beta]),
            |_| Matrix::from_row_slice(2, 1, &[0.0, 1.0]),
            move |x| pars.hamiltonian(x[0], x[1]),
            move |x| v2(pars.potential_gradient(x[0]), x[1] / pars.inertia),
        )
        .unwrap();
        let x = v2(0.3, 0.2);
        let perp = generic.annihilator(&x).unwrap();
        assert_eq!(perp.shape(), (1, 2));
        assert!((perp.clone() * generic.input_matrix(&x).unwrap()).amax() < 1e-14);
        assert_abs_diff_eq!(perp[(0, 0)].abs(), 1.0, epsilon = 1e-12);
        let grad_star = |x: &Vector| {
            let mut g = mech.energy_gradient(x).unwrap();
            g[0] += x[0].sin();
            g
        };
        assert!(matching_residual(&generic, grad_star, &x).unwrap().amax() < 1e-12);
        generic.check_invariants([&x]).unwrap();

        let rank_deficient = PhSystem::new(
            2,
            1,
            |_| Matrix::zeros(2, 2),
            |_| Matrix::zeros(2, 1),
            |_| 0.0,
            |_| Vector::zeros(2),
        )
        .unwrap();
        assert!(matches!(rank_deficient.annihilator(&x), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn mechanical_construction_checks() {
        let bad_damping = MechanicalPh::new(
            1,
            Inertia::Constant(Matrix::identity(1, 1)),
            |_| 0.0,
            |_| Vector::zeros(1),
            Matrix::from_element(1, 1, 0.5),
            Matrix::identity(1, 1),
        );
        assert!(matches!(bad_damping, Err(Error::Invariant(_))));
        let f = pendulum().structure(&v2(0.0, 0.0)).unwrap();
        assert_eq!(f, Matrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -0.01]));
    }

    #[test]
    fn configuration_dependent_inertia_gradient() {
        // M(q) = 2 + sin q, checked against central differences.
        let sys = MechanicalPh::new(
            1,
            Inertia::Configuration {
                matrix: Arc::new(|q| Matrix::from_element(1, 1, 2.0 + q[0].sin())),
                partials: Arc::new(|q| vec![Matrix::from_element(1, 1, q[0].cos())]),
            },
            |q| q[0] * q[0],
            |q| Vector::from_element(1, 2.0 * q[0]),
            Matrix::zeros(1, 1),
            Matrix::identity(1, 1),
        )
        .unwrap();
        let x = v2(0.7, 1.3);
        let g = sys.energy_gradient(&x).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let mut a = x.clone();
            let mut b = x.clone();
            a[i] += h;
            b[i] -= h;
            let fd = (sys.energy(&a).unwrap() - sys.energy(&b).unwrap()) / (2.0 * h);
            assert_abs_diff_eq!(g[i], fd, epsilon = 1e-8);
        }
    }
}
