//! Small multilayer perceptrons with analytic derivatives.
//!
//! Networks are stored as an architecture description ([`MlpSpec`]) plus a
//! flat parameter vector ([`ParamVector`]). The flat layout is layer-major:
//! for every affine layer `l` (hidden layers first, output layer last) the
//! weight matrix is stored row-major with shape `out_l x in_l`, immediately
//! followed by the bias vector of length `out_l`.
//!
//! Besides the forward pass the module evaluates input Jacobians, input
//! Hessians, parameter vector-Jacobian products and the mixed derivative
//! `d(v . grad_z out)/d(theta)` in closed form, layer by layer. These are the
//! quantities the adjoint equations need when the closed-loop vector field
//! contains the gradient of a network.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_dim, Error, Result};

/// Hidden-layer activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Softplus,
    Tanh,
}

/// Activation applied to the output of the last affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    #[default]
    None,
    Softplus,
    /// Rectifier. The derivative at exactly zero is taken as one so that a
    /// network whose last layer is zero still receives gradient.
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Act {
    Softplus,
    Tanh,
    Relu,
    Identity,
}

impl From<Activation> for Act {
    fn from(a: Activation) -> Self {
        match a {
            Activation::Softplus => Act::Softplus,
            Activation::Tanh => Act::Tanh,
        }
    }
}

impl From<OutputActivation> for Act {
    fn from(a: OutputActivation) -> Self {
        match a {
            OutputActivation::None => Act::Identity,
            OutputActivation::Softplus => Act::Softplus,
            OutputActivation::Relu => Act::Relu,
        }
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Act {
    #[inline]
    fn eval(self, x: f64) -> f64 {
        match self {
            Act::Softplus => softplus(x),
            Act::Tanh => x.tanh(),
            Act::Relu => x.max(0.0),
            Act::Identity => x,
        }
    }

    /// First derivative expressed through the pre-activation `x` and the
    /// activation value `y = eval(x)`.
    #[inline]
    fn d1(self, x: f64, y: f64) -> f64 {
        match self {
            Act::Softplus => sigmoid(x),
            Act::Tanh => 1.0 - y * y,
            Act::Relu => {
                if x >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Act::Identity => 1.0,
        }
    }

    #[inline]
    fn d2(self, x: f64, y: f64) -> f64 {
        match self {
            Act::Softplus => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Act::Tanh => -2.0 * y * (1.0 - y * y),
            Act::Relu | Act::Identity => 0.0,
        }
    }
}

/// Architecture of a fully connected network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    /// Widths of the hidden layers.
    pub hidden: Vec<usize>,
    /// One activation per hidden layer.
    pub activations: Vec<Activation>,
    pub output_dim: usize,
    #[serde(default)]
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        hidden: Vec<usize>,
        activations: Vec<Activation>,
        output_dim: usize,
        output_activation: OutputActivation,
    ) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden,
            activations,
            output_dim,
            output_activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Invalid(
                "network input and output dimensions must be positive".into(),
            ));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Invalid("hidden layer widths must be positive".into()));
        }
        if self.hidden.len() != self.activations.len() {
            return Err(Error::Invalid(format!(
                "{} hidden layers but {} activations",
                self.hidden.len(),
                self.activations.len()
            )));
        }
        Ok(())
    }

    /// `(fan_out, fan_in)` of every affine layer, output layer last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input_dim;
        for &w in &self.hidden {
            shapes.push((w, fan_in));
            fan_in = w;
        }
        shapes.push((self.output_dim, fan_in));
        shapes
    }

    pub fn n_params(&self) -> usize {
        self.layer_shapes().iter().map(|(o, i)| o * i + o).sum()
    }

    /// Offset of the output layer's weights inside the flat vector.
    pub fn last_layer_offset(&self) -> usize {
        let shapes = self.layer_shapes();
        shapes[..shapes.len() - 1].iter().map(|(o, i)| o * i + o).sum()
    }

    fn acts(&self) -> Vec<Act> {
        self.activations
            .iter()
            .map(|&a| Act::from(a))
            .chain(std::iter::once(Act::from(self.output_activation)))
            .collect()
    }

    /// Stable 64-bit fingerprint of the architecture, used in checkpoint headers.
    pub fn fingerprint(&self) -> u64 {
        let canonical = serde_json::to_string(self).expect("spec serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// Flat parameter storage for one network (or several concatenated).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl std::ops::DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

const MAGIC: &[u8; 8] = b"OESPARAM";
const FORMAT_VERSION: u32 = 1;

/// Writes `theta` as little-endian `f64` values behind a header carrying the
/// architecture fingerprint and the parameter count.
pub fn write_params<W: Write>(spec: &MlpSpec, theta: &[f64], mut w: W) -> Result<()> {
    check_dim("parameter vector", spec.n_params(), theta.len())?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&spec.fingerprint().to_le_bytes())?;
    w.write_all(&(theta.len() as u64).to_le_bytes())?;
    for v in theta {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a vector written by [`write_params`], checking it matches `spec`.
pub fn read_params<R: Read>(spec: &MlpSpec, mut r: R) -> Result<ParamVector> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a parameter file".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    if u64::from_le_bytes(b8) != spec.fingerprint() {
        return Err(Error::Format("architecture does not match checkpoint".into()));
    }
    r.read_exact(&mut b8)?;
    let len = u64::from_le_bytes(b8) as usize;
    check_dim("checkpoint length", spec.n_params(), len)?;
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        r.read_exact(&mut b8)?;
        out.push(f64::from_le_bytes(b8));
    }
    Ok(ParamVector(out))
}

/// Portable text checkpoint: architecture and parameters as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextCheckpoint {
    pub spec: MlpSpec,
    pub params: ParamVector,
}

impl TextCheckpoint {
    pub fn to_json(&self) -> Result<String> {
        check_dim("parameter vector", self.spec.n_params(), self.params.len())?;
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(s)?;
        ck.spec.validate()?;
        check_dim("parameter vector", ck.spec.n_params(), ck.params.len())?;
        Ok(ck)
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// `pre[l]`: pre-activation of affine layer `l`.
    pre: Vec<Vec<f64>>,
    /// `act[0]` is the input, `act[l + 1]` the activation of layer `l`.
    act: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.act.last().expect("non-empty tape")
    }
}

/// A network bound to a parameter slice.
#[derive(Debug, Clone, Copy)]
pub struct Mlp<'a> {
    spec: &'a MlpSpec,
    theta: &'a [f64],
}

impl<'a> Mlp<'a> {
    pub fn new(spec: &'a MlpSpec, theta: &'a [f64]) -> Result<Self> {
        check_dim("parameter vector", spec.n_params(), theta.len())?;
        Ok(Self { spec, theta })
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize, Act)> + '_ {
        // (offset, fan_out, fan_in, activation)
        let mut offset = 0;
        self.spec
            .layer_shapes()
            .into_iter()
            .zip(self.spec.acts())
            .map(move |((o, i), a)| {
                let start = offset;
                offset += o * i + o;
                (start, o, i, a)
            })
            .collect::<Vec<_>>()
            .into_iter()
    }

    /// Forward pass keeping the intermediate values for derivative passes.
    pub fn tape(&self, z: &[f64]) -> Result<Tape> {
        check_dim("network input", self.spec.input_dim, z.len())?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input"));
        }
        let mut pre = Vec::with_capacity(self.spec.hidden.len() + 1);
        let mut act = Vec::with_capacity(self.spec.hidden.len() + 2);
        act.push(z.to_vec());
        for (off, o, i, a) in self.layers() {
            let w = &self.theta[off..off + o * i];
            let b = &self.theta[off + o * i..off + o * i + o];
            let x = act.last().expect("input pushed");
            let s: Vec<f64> = (0..o)
                .map(|r| dot(&w[r * i..(r + 1) * i], x) + b[r])
                .collect();
            act.push(s.iter().map(|&v| a.eval(v)).collect());
            pre.push(s);
        }
        Ok(Tape { pre, act })
    }

    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.tape(z)?.act.pop().expect("output"))
    }

    /// Directional derivative `J v` of the output along input direction `v`.
    pub fn jvp(&self, tape: &Tape, v: &[f64]) -> Vec<f64> {
        let mut dot_a = v.to_vec();
        for (l, (off, o, i, a)) in self.layers().enumerate() {
            let w = &self.theta[off..off + o * i];
            dot_a = (0..o)
                .map(|r| {
                    let ds = dot(&w[r * i..(r + 1) * i], &dot_a);
                    a.d1(tape.pre[l][r], tape.act[l + 1][r]) * ds
                })
                .collect();
        }
        dot_a
    }

    /// Reverse pass for cotangent `c` on the output. Adds
    /// `scale * c^T d(out)/d(theta)` into `grad_theta` when given and returns
    /// the input cotangent `c^T J`.
    pub fn vjp(&self, tape: &Tape, c: &[f64], grad_theta: Option<&mut [f64]>, scale: f64) -> Vec<f64> {
        let layers: Vec<_> = self.layers().collect();
        let mut bar = c.to_vec();
        let mut grad = grad_theta;
        for (l, &(off, o, i, a)) in layers.iter().enumerate().rev() {
            let w = &self.theta[off..off + o * i];
            let s: Vec<f64> = (0..o)
                .map(|r| bar[r] * a.d1(tape.pre[l][r], tape.act[l + 1][r]))
                .collect();
            let x = &tape.act[l];
            if let Some(g) = grad.as_deref_mut() {
                for r in 0..o {
                    let sr = scale * s[r];
                    if sr != 0.0 {
                        axpy(sr, x, &mut g[off + r * i..off + (r + 1) * i]);
                    }
                    g[off + o * i + r] += sr;
                }
            }
            let mut next = vec![0.0; i];
            for r in 0..o {
                if s[r] != 0.0 {
                    axpy(s[r], &w[r * i..(r + 1) * i], &mut next);
                }
            }
            bar = next;
        }
        bar
    }

    /// Reverse pass through the tangent computation `g = c^T J v`.
    ///
    /// Adds `scale * dg/d(theta)` into `grad_theta` and returns `dg/dz`, which
    /// for a scalar output and `c = 1` is the Hessian-vector product `H v`.
    pub fn tangent_vjp(
        &self,
        tape: &Tape,
        v: &[f64],
        c: &[f64],
        mut grad_theta: Option<&mut [f64]>,
        scale: f64,
    ) -> Vec<f64> {
        let layers: Vec<_> = self.layers().collect();
        // Forward tangent: dot_pre[l] = W_l dot_act[l]; dot_act[l+1] = d1 * dot_pre[l].
        let mut dot_act = Vec::with_capacity(layers.len() + 1);
        let mut dot_pre = Vec::with_capacity(layers.len());
        dot_act.push(v.to_vec());
        for (l, &(off, o, i, a)) in layers.iter().enumerate() {
            let w = &self.theta[off..off + o * i];
            let ds: Vec<f64> = (0..o).map(|r| dot(&w[r * i..(r + 1) * i], &dot_act[l])).collect();
            dot_act.push(
                (0..o)
                    .map(|r| a.d1(tape.pre[l][r], tape.act[l + 1][r]) * ds[r])
                    .collect(),
            );
            dot_pre.push(ds);
        }
        // Reverse: bar_dot tracks the adjoint of the tangent activations and
        // bar the adjoint of the primal activations.
        let mut bar_dot = c.to_vec();
        let mut bar = vec![0.0; c.len()];
        for (l, &(off, o, i, a)) in layers.iter().enumerate().rev() {
            let w = &self.theta[off..off + o * i];
            let mut r_t = vec![0.0; o];
            let mut s_p = vec![0.0; o];
            for r in 0..o {
                let (x, y) = (tape.pre[l][r], tape.act[l + 1][r]);
                let d1 = a.d1(x, y);
                r_t[r] = bar_dot[r] * d1;
                s_p[r] = bar[r] * d1 + bar_dot[r] * a.d2(x, y) * dot_pre[l][r];
            }
            if let Some(g) = grad_theta.as_deref_mut() {
                let x = &tape.act[l];
                let xd = &dot_act[l];
                for r in 0..o {
                    let row = &mut g[off + r * i..off + (r + 1) * i];
                    if r_t[r] != 0.0 {
                        axpy(scale * r_t[r], xd, row);
                    }
                    if s_p[r] != 0.0 {
                        axpy(scale * s_p[r], x, row);
                    }
                    g[off + o * i + r] += scale * s_p[r];
                }
            }
            let mut next_dot = vec![0.0; i];
            let mut next = vec![0.0; i];
            for r in 0..o {
                let wr = &w[r * i..(r + 1) * i];
                if r_t[r] != 0.0 {
                    axpy(r_t[r], wr, &mut next_dot);
                }
                if s_p[r] != 0.0 {
                    axpy(s_p[r], wr, &mut next);
                }
            }
            bar_dot = next_dot;
            bar = next;
        }
        bar
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Network output at `z`.
pub fn forward(spec: &MlpSpec, theta: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    Mlp::new(spec, theta)?.forward(z)
}

/// Input Jacobian `d(out)/dz`, shape `output_dim x input_dim`.
pub fn grad_input(spec: &MlpSpec, theta: &[f64], z: &[f64]) -> Result<DMatrix<f64>> {
    let net = Mlp::new(spec, theta)?;
    let tape = net.tape(z)?;
    let mut jac = DMatrix::zeros(spec.output_dim, spec.input_dim);
    let mut c = vec![0.0; spec.output_dim];
    for k in 0..spec.output_dim {
        c.iter_mut().for_each(|v| *v = 0.0);
        c[k] = 1.0;
        let row = net.vjp(&tape, &c, None, 1.0);
        for (j, v) in row.into_iter().enumerate() {
            jac[(k, j)] = v;
        }
    }
    Ok(jac)
}

/// Input Hessian of a scalar-output network.
pub fn input_hessian(spec: &MlpSpec, theta: &[f64], z: &[f64]) -> Result<DMatrix<f64>> {
    check_dim("scalar network output", 1, spec.output_dim)?;
    let net = Mlp::new(spec, theta)?;
    let tape = net.tape(z)?;
    let n = spec.input_dim;
    let mut h = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        let col = net.tangent_vjp(&tape, &e, &[1.0], None, 1.0);
        for (i, v) in col.into_iter().enumerate() {
            h[(i, j)] = v;
        }
    }
    Ok(h)
}

/// `d(v^T grad_z out)/d(theta)` for a scalar-output network.
pub fn grad_input_vjp_params(spec: &MlpSpec, theta: &[f64], z: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    check_dim("scalar network output", 1, spec.output_dim)?;
    check_dim("direction", spec.input_dim, v.len())?;
    let net = Mlp::new(spec, theta)?;
    let tape = net.tape(z)?;
    let mut g = vec![0.0; theta.len()];
    net.tangent_vjp(&tape, v, &[1.0], Some(&mut g), 1.0);
    Ok(g)
}

/// Second-order information of a scalar network: the input Hessian and
/// `d(v^T grad_z out)/d(theta)`.
pub fn second_derivs(
    spec: &MlpSpec,
    theta: &[f64],
    z: &[f64],
    v: &[f64],
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    Ok((
        input_hessian(spec, theta, z)?,
        grad_input_vjp_params(spec, theta, z, v)?,
    ))
}

/// `cotangent^T d(out)/d(theta)` by reverse accumulation.
pub fn vjp_params(spec: &MlpSpec, theta: &[f64], z: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
    check_dim("cotangent", spec.output_dim, cotangent.len())?;
    let net = Mlp::new(spec, theta)?;
    let tape = net.tape(z)?;
    let mut g = vec![0.0; theta.len()];
    net.vjp(&tape, cotangent, Some(&mut g), 1.0);
    Ok(g)
}

/// Uniform Xavier-Glorot initialization of the weights (gain 1).
///
/// Weights of a layer with fans `(in, out)` are drawn from
/// `U(-a, a)`, `a = sqrt(6 / (in + out))`. Biases are drawn from
/// `U(-1/sqrt(in), 1/sqrt(in))`.
pub fn xavier_init<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> ParamVector {
    let mut theta = Vec::with_capacity(spec.n_params());
    for (o, i) in spec.layer_shapes() {
        let a = (6.0 / (i + o) as f64).sqrt();
        theta.extend((0..o * i).map(|_| rng.gen_range(-a..a)));
        let b = 1.0 / (i as f64).sqrt();
        theta.extend((0..o).map(|_| rng.gen_range(-b..b)));
    }
    ParamVector(theta)
}

/// Sets the output layer's weights and bias to zero.
pub fn zero_last_layer(spec: &MlpSpec, theta: &mut [f64]) {
    let start = spec.last_layer_offset();
    theta[start..].iter_mut().for_each(|v| *v = 0.0);
}

/// Certified bound on `|out|` from the output layer's weights.
///
/// With a last hidden activation bounded by `gamma` (tanh: 1), every output
/// satisfies `|out_k| <= gamma * sum_i |w_ki| + |b_k|`. The bias term extends
/// the textbook bound, which is stated for bias-free output layers. The
/// largest row bound is returned; a monotone output activation is applied to
/// it.
pub fn output_bound(spec: &MlpSpec, theta: &[f64]) -> Result<f64> {
    check_dim("parameter vector", spec.n_params(), theta.len())?;
    let gamma = match spec.activations.last() {
        Some(Activation::Tanh) => 1.0,
        _ => {
            return Err(Error::Invalid(
                "output bound requires a bounded (tanh) last hidden activation".into(),
            ))
        }
    };
    let (o, i) = *spec.layer_shapes().last().expect("output layer");
    let off = spec.last_layer_offset();
    let w = &theta[off..off + o * i];
    let b = &theta[off + o * i..];
    let bound = (0..o)
        .map(|r| gamma * w[r * i..(r + 1) * i].iter().map(|x| x.abs()).sum::<f64>() + b[r].abs())
        .fold(0.0, f64::max);
    Ok(match spec.output_activation {
        OutputActivation::None => bound,
        OutputActivation::Softplus => softplus(bound),
        OutputActivation::Relu => bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_unit(act: Activation, w: f64, bias: f64, out_w: f64) -> (MlpSpec, Vec<f64>) {
        let spec = MlpSpec::new(1, vec![1], vec![act], 1, OutputActivation::None).unwrap();
        (spec, vec![w, bias, out_w, 0.0])
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(1, vec![4, 4], vec![Activation::Tanh], 1, OutputActivation::None).is_err());
        assert!(MlpSpec::new(0, vec![4], vec![Activation::Tanh], 1, OutputActivation::None).is_err());
        let s = MlpSpec::new(3, vec![64], vec![Activation::Softplus], 1, OutputActivation::Softplus).unwrap();
        assert_eq!(s.n_params(), 3 * 64 + 64 + 64 + 1);
        assert_eq!(s.last_layer_offset(), 3 * 64 + 64);
    }

    #[test]
    fn forward_small_cases() {
        let (s, t) = one_unit(Activation::Tanh, 1.0, 0.0, 1.0);
        assert_eq!(forward(&s, &t, &[0.0]).unwrap(), vec![0.0]);
        let (s, t) = one_unit(Activation::Softplus, 0.0, 0.0, 1.0);
        for z in [-3.0, 0.0, 7.5] {
            assert_relative_eq!(forward(&s, &t, &[z]).unwrap()[0], 2f64.ln(), epsilon = 1e-15);
        }
        assert!(matches!(forward(&s, &t, &[f64::NAN]), Err(Error::NonFinite(_))));
        assert!(forward(&s, &t, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn tanh_unit_gradient_at_origin() {
        let (s, t) = one_unit(Activation::Tanh, 1.0, 0.0, 1.0);
        assert_relative_eq!(grad_input(&s, &t, &[0.0]).unwrap()[(0, 0)], 1.0);
    }

    #[test]
    fn zero_last_layer_gives_zero_everything() {
        let spec = MlpSpec::new(2, vec![8, 8], vec![Activation::Softplus, Activation::Tanh], 1, OutputActivation::None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut theta = xavier_init(&spec, &mut rng);
        zero_last_layer(&spec, &mut theta);
        let z = [0.3, -1.2];
        assert_eq!(forward(&spec, &theta, &z).unwrap()[0], 0.0);
        assert!(grad_input(&spec, &theta, &z).unwrap().iter().all(|&v| v == 0.0));
        let (h, g) = second_derivs(&spec, &theta, &z, &[1.0, 0.0]).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
        // Only the output-layer weights can receive gradient from a zero output layer.
        assert!(g[..spec.last_layer_offset()].iter().all(|&v| v == 0.0));
        assert_eq!(output_bound(&spec, &theta).unwrap(), 0.0);
    }

    #[test]
    fn vjp_zero_and_linear() {
        let spec = MlpSpec::new(2, vec![2], vec![Activation::Softplus], 1, OutputActivation::None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let theta = xavier_init(&spec, &mut rng);
        let z = [0.4, 0.9];
        assert!(vjp_params(&spec, &theta, &z, &[0.0]).unwrap().iter().all(|&v| v == 0.0));
        let g1 = vjp_params(&spec, &theta, &z, &[1.0]).unwrap();
        let g3 = vjp_params(&spec, &theta, &z, &[-2.5]).unwrap();
        for (a, b) in g1.iter().zip(&g3) {
            assert_relative_eq!(-2.5 * a, *b, max_relative = 1e-14);
        }
    }

    #[test]
    fn lemma_bound_example() {
        let spec = MlpSpec::new(1, vec![2], vec![Activation::Tanh], 1, OutputActivation::None).unwrap();
        let theta = vec![0.7, -1.3, 0.1, 0.2, 1.0, -2.0, 0.0];
        assert_eq!(output_bound(&spec, &theta).unwrap(), 3.0);
        let soft = MlpSpec::new(1, vec![2], vec![Activation::Softplus], 1, OutputActivation::None).unwrap();
        assert!(output_bound(&soft, &theta).is_err());
    }

    #[test]
    fn xavier_is_deterministic_and_scaled() {
        let spec = MlpSpec::new(64, vec![64], vec![Activation::Tanh], 64, OutputActivation::None).unwrap();
        let a = xavier_init(&spec, &mut ChaCha8Rng::seed_from_u64(9));
        let b = xavier_init(&spec, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        let w = &a[..64 * 64];
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let target = 2.0 / 128.0;
        assert!((var - target).abs() < 0.2 * target, "variance {var} vs {target}");
    }

    #[test]
    fn binary_and_text_checkpoints_round_trip() {
        let spec = MlpSpec::new(3, vec![5], vec![Activation::Softplus], 1, OutputActivation::Relu).unwrap();
        let theta = xavier_init(&spec, &mut ChaCha8Rng::seed_from_u64(4));
        let mut buf = Vec::new();
        write_params(&spec, &theta, &mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 4 + 8 + 8 + 8 * theta.len());
        let back = read_params(&spec, buf.as_slice()).unwrap();
        assert_eq!(back.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), theta.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let other = MlpSpec::new(3, vec![5], vec![Activation::Tanh], 1, OutputActivation::Relu).unwrap();
        assert!(read_params(&other, buf.as_slice()).is_err());

        let text = TextCheckpoint { spec: spec.clone(), params: theta.clone() }.to_json().unwrap();
        let ck = TextCheckpoint::from_json(&text).unwrap();
        assert_eq!(ck.params, theta);
    }

    #[test]
    fn softplus_is_stable() {
        assert_relative_eq!(softplus(0.0), 2f64.ln());
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert!(softplus(-30.0) > 0.0);
    }
}
