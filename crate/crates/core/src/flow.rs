//! Activation functions and numerical flow maps of `u' = σ(Au + b)`.
//!
//! The training integrator is explicit Euler with `N` uniform steps on
//! `[0, 1]`. A reference integrator (RK4 with kink bisection, [`REFERENCE_STEPS`]
//! steps, cross-checked against half as many) is used wherever a statement
//! about the exact flow is being verified.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

/// Default Euler step count of the training integrator.
pub const DEFAULT_EULER_STEPS: usize = 20;
/// RK4 steps of the reference integrator.
pub const REFERENCE_STEPS: usize = 1000;
/// Maximum allowed disagreement between the reference solution and its half-resolution check.
pub const REFERENCE_TOLERANCE: f64 = 1e-6;
/// Bisection depth of an RK4 step that crosses an activation kink.
const RK4_MAX_SPLITS: u32 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    LeakyRelu,
    SmoothedLeakyRelu,
}

impl ActivationKind {
    pub fn name(&self) -> &'static str {
        match self {
            ActivationKind::LeakyRelu => "leaky-relu",
            ActivationKind::SmoothedLeakyRelu => "smoothed-leaky-relu",
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "leaky-relu" => Ok(ActivationKind::LeakyRelu),
            "smoothed-leaky-relu" => Ok(ActivationKind::SmoothedLeakyRelu),
            other => Err(Error::Precondition(format!("unknown activation {other:?}"))),
        }
    }
}

/// A scalar activation with derivative in `[α, 1]`.
///
/// The smoothed variant is `z` on `[0, ∞)`, `tanh z` on `[−z̄, 0)` and
/// `αz + β` below, with `z̄ = atanh(√(1−α))` so that `tanh′(−z̄) = α`, and
/// `β = tanh(−z̄) + αz̄` so that it is continuous at `−z̄`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivationSpec {
    kind: ActivationKind,
    alpha: f64,
    zbar: f64,
    beta: f64,
}

impl ActivationSpec {
    pub fn new(kind: ActivationKind, alpha: f64) -> Result<Self> {
        match kind {
            ActivationKind::LeakyRelu => Self::leaky_relu(alpha),
            ActivationKind::SmoothedLeakyRelu => Self::smoothed_leaky_relu(alpha),
        }
    }

    pub fn leaky_relu(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Precondition(format!(
                "alpha must lie in (0, 1], got {alpha}"
            )));
        }
        Ok(Self {
            kind: ActivationKind::LeakyRelu,
            alpha,
            zbar: 0.0,
            beta: 0.0,
        })
    }

    /// Requires `0 < α < 1` so that `z̄ > 0`.
    pub fn smoothed_leaky_relu(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Precondition(format!(
                "smoothed activation needs alpha in (0, 1), got {alpha}"
            )));
        }
        let zbar = (1.0 - alpha).sqrt().atanh();
        let beta = (-zbar).tanh() + alpha * zbar;
        Ok(Self {
            kind: ActivationKind::SmoothedLeakyRelu,
            alpha,
            zbar,
            beta,
        })
    }

    pub fn kind(&self) -> ActivationKind {
        self.kind
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `z̄`; zero for the leaky ReLU.
    pub fn zbar(&self) -> f64 {
        self.zbar
    }

    /// `β`; zero for the leaky ReLU.
    pub fn beta(&self) -> f64 {
        self.beta
    }

    #[inline]
    pub fn value(&self, z: f64) -> f64 {
        match self.kind {
            ActivationKind::LeakyRelu => {
                if z >= 0.0 {
                    z
                } else {
                    self.alpha * z
                }
            }
            ActivationKind::SmoothedLeakyRelu => {
                if z >= 0.0 {
                    z
                } else if z >= -self.zbar {
                    z.tanh()
                } else {
                    self.alpha * z + self.beta
                }
            }
        }
    }

    /// Index of the formula piece containing `z`.
    #[inline]
    fn piece(&self, z: f64) -> u8 {
        match self.kind {
            ActivationKind::LeakyRelu => u8::from(z >= 0.0),
            ActivationKind::SmoothedLeakyRelu => u8::from(z >= -self.zbar) + u8::from(z >= 0.0),
        }
    }

    /// Right-continuous derivative: the value at a kink is the limit from the right.
    #[inline]
    pub fn derivative(&self, z: f64) -> f64 {
        match self.kind {
            ActivationKind::LeakyRelu => {
                if z >= 0.0 {
                    1.0
                } else {
                    self.alpha
                }
            }
            ActivationKind::SmoothedLeakyRelu => {
                if z >= 0.0 {
                    1.0
                } else if z >= -self.zbar {
                    let t = z.tanh();
                    // clamp guards against rounding just inside −z̄
                    (1.0 - t * t).max(self.alpha)
                } else {
                    self.alpha
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integrator {
    Euler,
    /// Classical RK4; steps across an activation kink are bisected.
    Rk4,
}

/// The autonomous system `u' = σ(Au + b)` on `[0, 1]` with a fixed step count.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralOde {
    a: Matrix,
    b: Vector,
    activation: ActivationSpec,
    steps: usize,
}

/// States on the uniform grid `t_k = k/N`, `k = 0..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vector>,
}

impl FlowTrajectory {
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn initial(&self) -> &Vector {
        &self.states[0]
    }

    pub fn last(&self) -> &Vector {
        self.states.last().expect("trajectory is never empty")
    }

    /// Index of the grid node nearest to `t`.
    pub fn node(&self, t: f64) -> usize {
        snap(t, self.steps())
    }

    pub fn at(&self, t: f64) -> &Vector {
        &self.states[self.node(t)]
    }
}

fn snap(t: f64, steps: usize) -> usize {
    let k = (t * steps as f64).round();
    k.clamp(0.0, steps as f64) as usize
}

impl NeuralOde {
    pub fn new(a: Matrix, b: Vector, activation: ActivationSpec, steps: usize) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::dim(format!("A must be square, got {}x{}", a.rows(), a.cols())));
        }
        if b.len() != a.rows() {
            return Err(Error::dim(format!(
                "b has length {} but A is {}x{}",
                b.len(),
                a.rows(),
                a.cols()
            )));
        }
        if steps == 0 {
            return Err(Error::Precondition("step count must be at least 1".into()));
        }
        Ok(Self {
            a,
            b,
            activation,
            steps,
        })
    }

    /// `A = 0`, `b = 0`: every point is an equilibrium since `σ(0) = 0`.
    pub fn zero_field(d: usize, activation: ActivationSpec) -> Self {
        Self {
            a: Matrix::zeros(d, d),
            b: Vector::zeros(d),
            activation,
            steps: DEFAULT_EULER_STEPS,
        }
    }

    pub fn dim(&self) -> usize {
        self.a.rows()
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Vector {
        &self.b
    }

    pub fn activation(&self) -> &ActivationSpec {
        &self.activation
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn with_steps(&self, steps: usize) -> Result<Self> {
        Self::new(self.a.clone(), self.b.clone(), self.activation, steps)
    }

    pub fn with_a(&self, a: Matrix) -> Result<Self> {
        if a.shape() != self.a.shape() {
            return Err(Error::dim(format!(
                "replacement A is {}x{}, expected {}x{}",
                a.rows(),
                a.cols(),
                self.a.rows(),
                self.a.cols()
            )));
        }
        Self::new(a, self.b.clone(), self.activation, self.steps)
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Matrix, &mut Vector) {
        (&mut self.a, &mut self.b)
    }

    /// `σ(Au + b)`.
    pub fn field(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.field_into(u, &mut out);
        out
    }

    fn field_into(&self, u: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let z = crate::linalg::dot(self.a.row(i), u) + self.b[i];
            *o = self.activation.value(z);
        }
    }

    fn check_input(&self, u0: &[f64]) -> Result<()> {
        if u0.len() != self.dim() {
            return Err(Error::dim(format!(
                "initial state has length {} but the system has dimension {}",
                u0.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Time-one Euler flow with the configured step count.
    pub fn flow(&self, u0: &[f64]) -> Result<Vector> {
        self.integrate(u0, Integrator::Euler, self.steps)
    }

    pub fn flow_trajectory(&self, u0: &[f64]) -> Result<FlowTrajectory> {
        self.trajectory_with(u0, Integrator::Euler, self.steps)
    }

    /// States of the Euler trajectory at the grid nodes nearest to `times`.
    pub fn flow_at_times(&self, u0: &[f64], times: &[f64]) -> Result<Vec<Vector>> {
        if times.is_empty() {
            return Err(Error::Contract("time list is empty".into()));
        }
        if let Some(t) = times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Contract(format!("time {t} lies outside [0, 1]")));
        }
        let traj = self.flow_trajectory(u0)?;
        Ok(times.iter().map(|&t| traj.at(t).clone()).collect())
    }

    /// Final state after `steps` steps of size `1/steps`.
    pub fn integrate(&self, u0: &[f64], scheme: Integrator, steps: usize) -> Result<Vector> {
        self.check_input(u0)?;
        let mut u = u0.to_vec();
        let mut work = Workspace::new(self.dim());
        let h = 1.0 / steps as f64;
        for k in 1..=steps {
            self.step(&mut u, h, scheme, &mut work);
            if u.iter().any(|v| !v.is_finite()) {
                return Err(Error::Overflow { step: k });
            }
        }
        Ok(Vector::from(u))
    }

    pub fn trajectory_with(
        &self,
        u0: &[f64],
        scheme: Integrator,
        steps: usize,
    ) -> Result<FlowTrajectory> {
        self.check_input(u0)?;
        if steps == 0 {
            return Err(Error::Precondition("step count must be at least 1".into()));
        }
        let mut work = Workspace::new(self.dim());
        let h = 1.0 / steps as f64;
        let mut states = Vec::with_capacity(steps + 1);
        let mut u = u0.to_vec();
        states.push(Vector::from(u.clone()));
        for k in 1..=steps {
            self.step(&mut u, h, scheme, &mut work);
            if u.iter().any(|v| !v.is_finite()) {
                return Err(Error::Overflow { step: k });
            }
            states.push(Vector::from(u.clone()));
        }
        Ok(FlowTrajectory {
            times: (0..=steps).map(|k| k as f64 / steps as f64).collect(),
            states,
        })
    }

    /// Advances `u` by `steps` Euler steps of size `1/N` from the current grid node.
    pub fn advance(&self, u: &mut [f64], steps: usize) -> Result<()> {
        self.check_input(u)?;
        let mut work = Workspace::new(self.dim());
        let h = 1.0 / self.steps as f64;
        for k in 1..=steps {
            self.step(u, h, Integrator::Euler, &mut work);
            if u.iter().any(|v| !v.is_finite()) {
                return Err(Error::Overflow { step: k });
            }
        }
        Ok(())
    }

    fn step(&self, u: &mut [f64], h: f64, scheme: Integrator, w: &mut Workspace) {
        match scheme {
            Integrator::Euler => {
                self.field_into(u, &mut w.k1);
                for (ui, ki) in u.iter_mut().zip(&w.k1) {
                    *ui += h * ki;
                }
            }
            Integrator::Rk4 => self.rk4_split(u, h, w, RK4_MAX_SPLITS),
        }
    }

    /// One classical RK4 step.
    fn rk4(&self, u: &mut [f64], h: f64, w: &mut Workspace) {
        let n = u.len();
        self.field_into(u, &mut w.k1);
        for i in 0..n {
            w.tmp[i] = u[i] + 0.5 * h * w.k1[i];
        }
        self.field_into(&w.tmp, &mut w.k2);
        for i in 0..n {
            w.tmp[i] = u[i] + 0.5 * h * w.k2[i];
        }
        self.field_into(&w.tmp, &mut w.k3);
        for i in 0..n {
            w.tmp[i] = u[i] + h * w.k3[i];
        }
        self.field_into(&w.tmp, &mut w.k4);
        for i in 0..n {
            u[i] += h / 6.0 * (w.k1[i] + 2.0 * w.k2[i] + 2.0 * w.k3[i] + w.k4[i]);
        }
    }

    /// Activation piece of every pre-activation at `u`.
    fn pieces(&self, u: &[f64]) -> Vec<u8> {
        (0..self.dim())
            .map(|i| {
                let z = crate::linalg::dot(self.a.row(i), u) + self.b[i];
                self.activation.piece(z)
            })
            .collect()
    }

    /// RK4 step that is bisected, up to `depth` times, while a pre-activation
    /// changes piece across it; the field is only piecewise smooth there.
    fn rk4_split(&self, u: &mut [f64], h: f64, w: &mut Workspace, depth: u32) {
        let before = self.pieces(u);
        let start = u.to_vec();
        self.rk4(u, h, w);
        if depth == 0 || self.pieces(u) == before {
            return;
        }
        u.copy_from_slice(&start);
        self.rk4_split(u, 0.5 * h, w, depth - 1);
        self.rk4_split(u, 0.5 * h, w, depth - 1);
    }

    /// Time-one flow from the reference integrator.
    ///
    /// Fails with an integrator-accuracy error when the result and the
    /// half-resolution solution differ by more than [`REFERENCE_TOLERANCE`].
    pub fn reference_flow(&self, u0: &[f64]) -> Result<Vector> {
        Ok(self.reference_trajectory(u0)?.last().clone())
    }

    /// Reference trajectory on the grid `k/REFERENCE_STEPS`, cross-checked at every shared node.
    pub fn reference_trajectory(&self, u0: &[f64]) -> Result<FlowTrajectory> {
        let fine = self.trajectory_with(u0, Integrator::Rk4, REFERENCE_STEPS)?;
        let coarse = self.trajectory_with(u0, Integrator::Rk4, REFERENCE_STEPS / 2)?;
        let mut worst = 0.0_f64;
        for (k, c) in coarse.states.iter().enumerate() {
            worst = worst.max(crate::linalg::dist2(&fine.states[2 * k], c));
        }
        if worst > REFERENCE_TOLERANCE {
            return Err(Error::IntegratorAccuracy {
                disagreement: worst,
                tolerance: REFERENCE_TOLERANCE,
            });
        }
        Ok(fine)
    }
}

struct Workspace {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Workspace {
    fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }
}

/// Time-one Euler flow of the scalar equation `u' = σ(u + λ)`.
///
/// Applied entrywise it acts as a classical activation; every component of
/// the flow of `u' = σ(u + λ𝟙)` coincides with it.
pub fn scalar_flow_activation(
    lambda: f64,
    spec: ActivationSpec,
    steps: usize,
) -> impl Fn(f64) -> f64 + Clone {
    let h = 1.0 / steps.max(1) as f64;
    let steps = steps.max(1);
    move |u0| {
        let mut u = u0;
        for _ in 0..steps {
            u += h * spec.value(u + lambda);
        }
        u
    }
}

/// Flow of the piecewise system that is linear (`u' = u`) on `[t0, 0]` and
/// `[1, T]` and follows the ODE on `[0, 1]`: `e^{T−1}·φ(e^{−t0}·u0)`.
///
/// The linear phases are applied as exact exponentials. Requires `t0 ≤ 0 ≤ 1 ≤ T`.
pub fn piecewise_flow(ode: &NeuralOde, t0: f64, t_end: f64, u0: &[f64]) -> Result<Vector> {
    if !(t0 <= 0.0) || !(t_end >= 1.0) {
        return Err(Error::Contract(format!(
            "piecewise flow needs t0 <= 0 and T >= 1, got t0 = {t0}, T = {t_end}"
        )));
    }
    let grow_in = (-t0).exp();
    let grow_out = (t_end - 1.0).exp();
    let scaled: Vec<f64> = u0.iter().map(|v| grow_in * v).collect();
    Ok(ode.flow(&scaled)?.scale(grow_out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaky() -> ActivationSpec {
        ActivationSpec::leaky_relu(0.1).unwrap()
    }

    fn scalar(a: f64, steps: usize) -> NeuralOde {
        NeuralOde::new(Matrix::from_rows(&[[a]]).unwrap(), Vector::zeros(1), leaky(), steps).unwrap()
    }

    #[test]
    fn leaky_values() {
        assert_eq!(leaky().value(-2.0), -0.2);
        assert_eq!(leaky().value(3.0), 3.0);
        assert_eq!(leaky().derivative(0.0), 1.0);
    }

    #[test]
    fn smoothed_constants() {
        let s = ActivationSpec::smoothed_leaky_relu(0.1).unwrap();
        let zbar = 0.9f64.sqrt().atanh();
        assert!((s.zbar() - zbar).abs() < 1e-15);
        assert_eq!(s.value(0.0), 0.0);
        assert!((s.value(-zbar) - (-zbar).tanh()).abs() < 1e-15);
        // continuity from below at −z̄ and at 0
        let below = s.alpha() * (-zbar) + s.beta();
        assert!((below - (-zbar).tanh()).abs() < 1e-12);
        assert!(s.value(-1e-14).abs() < 1e-12);
        assert!((s.derivative(-zbar) - 0.1).abs() < 1e-12);
        assert!(ActivationSpec::smoothed_leaky_relu(1.0).is_err());
    }

    #[test]
    fn linear_regime_closed_forms() {
        let ode = scalar(1.0, 20);
        let up = ode.flow(&[1.0]).unwrap();
        assert!((up[0] - 1.05f64.powi(20)).abs() < 1e-13);
        assert!((up[0] - 2.653_297_705_1).abs() < 1e-9);
        let down = ode.flow(&[-1.0]).unwrap();
        assert!((down[0] + 1.005f64.powi(20)).abs() < 1e-13);
        assert_eq!(ode.flow(&[0.0]).unwrap()[0], 0.0);
    }

    #[test]
    fn flow_at_times_snaps_to_grid() {
        let ode = scalar(1.0, 20);
        let traj = ode.flow_trajectory(&[1.0]).unwrap();
        let got = ode.flow_at_times(&[1.0], &[0.0, 0.5, 1.0, 0.501]).unwrap();
        assert_eq!(got[0][0], 1.0);
        assert!((got[1][0] - 1.05f64.powi(10)).abs() < 1e-13);
        assert_eq!(got[2], *traj.last());
        assert_eq!(got[3], got[1]);
        assert!(matches!(ode.flow_at_times(&[1.0], &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn overflow_names_step() {
        let ode = NeuralOde::new(
            Matrix::from_rows(&[[1e200]]).unwrap(),
            Vector::zeros(1),
            leaky(),
            20,
        )
        .unwrap();
        match ode.flow(&[1e200]) {
            Err(Error::Overflow { step }) => assert_eq!(step, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn reference_is_accurate_on_linear_regime() {
        let ode = scalar(1.0, 20);
        let r = ode.reference_flow(&[1.0]).unwrap();
        assert!((r[0] - 1f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn scalar_flow_matches_uncoupled_system() {
        let f = scalar_flow_activation(0.0, leaky(), 20);
        assert_eq!(f(0.0), 0.0);
        assert!((f(1.0) - 1.05f64.powi(20)).abs() < 1e-13);
        let lambda = -0.3;
        let g = scalar_flow_activation(lambda, leaky(), 20);
        let ode = NeuralOde::new(Matrix::identity(3), Vector::filled(3, lambda), leaky(), 20).unwrap();
        let u0 = [0.7, -0.2, 0.1];
        let v = ode.flow(&u0).unwrap();
        for i in 0..3 {
            assert!((v[i] - g(u0[i])).abs() < 1e-14);
        }
    }

    #[test]
    fn piecewise_flow_examples() {
        let ode = NeuralOde::new(
            Matrix::from_rows(&[[0.5, -1.0], [0.3, 0.2]]).unwrap(),
            Vector::new(vec![0.1, -0.2]).unwrap(),
            leaky(),
            20,
        )
        .unwrap();
        let u0 = [0.4, -0.6];
        assert_eq!(piecewise_flow(&ode, 0.0, 1.0, &u0).unwrap(), ode.flow(&u0).unwrap());
        let got = piecewise_flow(&ode, -(2f64.ln()), 1.0 + 3f64.ln(), &u0).unwrap();
        let want = ode.flow(&[0.8, -1.2]).unwrap().scale(3.0);
        assert!(crate::linalg::dist2(&got, &want) < 1e-14);
        let zero = NeuralOde::zero_field(2, leaky());
        let s = piecewise_flow(&zero, -0.5, 1.25, &u0).unwrap();
        assert!((s[0] - 0.4 * 0.25f64.exp() * 0.5f64.exp()).abs() < 1e-15);
        assert!(piecewise_flow(&ode, 0.1, 1.0, &u0).is_err());
    }
}
