//! Upper and lower bounds on the distance between a flow network and its
//! stabilized copy, the cosine test `η(x)` that decides where the lower bound
//! applies, and region maps of that test over a compact grid.
//!
//! With `z(t) = φ_t(A1x + b1)`, `z̄(t) = φ̄_t(A1x + b1)` and `Δ = Ā − A`:
//!
//! ```text
//! upper:  ‖φ(x) − φ̄(x)‖ ≤ ‖A2‖₂ · C · σ_max(Δ) · (e^δ − 1)/δ
//! lower:  ‖z(1) − z̄(1)‖ ≥ e^{δ′(1−t̄)}‖z(t̄) − z̄(t̄)‖ + α η m σ_min(Δ) (e^{δ′(1−t̄)} − 1)/δ′   (η > 0)
//! ```
//!
//! Grid maxima and minima stand in for suprema and infima over the compact
//! set, so every constant here is a grid estimate.

use crate::error::{Error, Result};
use crate::flow::{FlowTrajectory, Integrator, NeuralOde, REFERENCE_STEPS};
use crate::linalg::{dist2, dot, norm2, sigma_extremes, Matrix};
use crate::nets::{Network, ShallowFlowNet};
use crate::spectral::{delta_prime, delta_star, OmegaBox};

/// Below this norm a cosine is reported as undefined.
pub const COSINE_NORM_FLOOR: f64 = 1e-12;
/// Absolute slack of the soundness checks.
pub const BOUND_TOLERANCE: f64 = 1e-8;

/// Sample points of a compact set, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactGrid {
    points: Matrix,
    /// Per-coordinate `(lo, hi)` and step when generated from a box.
    pub domain: Option<(Vec<(f64, f64)>, f64)>,
}

impl CompactGrid {
    /// Tensor grid `lo, lo + h, …, hi` in each coordinate; the first coordinate varies slowest.
    pub fn boxed(domain: &[(f64, f64)], h: f64) -> Result<Self> {
        if domain.is_empty() || !(h > 0.0) {
            return Err(Error::Precondition("grid needs at least one axis and h > 0".into()));
        }
        let axes: Vec<Vec<f64>> = domain
            .iter()
            .map(|&(lo, hi)| {
                if !(lo <= hi) {
                    return Err(Error::Precondition(format!("empty interval [{lo}, {hi}]")));
                }
                let n = ((hi - lo) / h + 1e-9).floor() as usize;
                // lo + k·h keeps every node inside [lo, hi]
                Ok((0..=n).map(|k| (lo + k as f64 * h).min(hi)).collect())
            })
            .collect::<Result<_>>()?;
        let total: usize = axes.iter().map(Vec::len).product();
        let m = axes.len();
        let mut data = Vec::with_capacity(total * m);
        for mut idx in 0..total {
            let mut coord = vec![0.0; m];
            for j in (0..m).rev() {
                coord[j] = axes[j][idx % axes[j].len()];
                idx /= axes[j].len();
            }
            data.extend(coord);
        }
        Ok(Self {
            points: Matrix::new(total, m, data)?,
            domain: Some((domain.to_vec(), h)),
        })
    }

    pub fn from_points(points: Matrix) -> Result<Self> {
        if points.rows() == 0 {
            return Err(Error::Precondition("point set is empty".into()));
        }
        Ok(Self {
            points,
            domain: None,
        })
    }

    /// Parses `box=lo1,hi1,lo2,hi2,…;h=step`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut bounds = None;
        let mut h = None;
        for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Precondition(format!("bad grid component {part:?}")))?;
            match k.trim() {
                "box" => {
                    let vals: Vec<f64> = v
                        .split(',')
                        .map(|s| s.trim().parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| Error::Precondition(format!("bad box {v:?}")))?;
                    if vals.is_empty() || vals.len() % 2 != 0 {
                        return Err(Error::Precondition(format!("box needs lo,hi pairs: {v:?}")));
                    }
                    bounds = Some(vals.chunks(2).map(|c| (c[0], c[1])).collect::<Vec<_>>());
                }
                "h" => {
                    h = Some(
                        v.trim()
                            .parse::<f64>()
                            .map_err(|_| Error::Precondition(format!("bad step {v:?}")))?,
                    )
                }
                other => return Err(Error::Precondition(format!("unknown grid key {other:?}"))),
            }
        }
        match (bounds, h) {
            (Some(b), Some(h)) => Self::boxed(&b, h),
            _ => Err(Error::Precondition("grid needs both box= and h=".into())),
        }
    }

    pub fn points(&self) -> &Matrix {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        self.points.row(i)
    }
}

/// `(e^δ − 1)/δ`, equal to 1 at `δ = 0`.
pub fn growth(delta: f64) -> f64 {
    if delta == 0.0 {
        1.0
    } else {
        delta.exp_m1() / delta
    }
}

/// `(e^{δ′(1−t̄)} − 1)/δ′`, equal to `1 − t̄` at `δ′ = 0`.
pub fn window_growth(delta_prime: f64, tbar: f64) -> f64 {
    if delta_prime == 0.0 {
        1.0 - tbar
    } else {
        (delta_prime * (1.0 - tbar)).exp_m1() / delta_prime
    }
}

/// `C·σ_max(Δ)·(e^δ − 1)/δ + ε`.
pub fn upper_bound(epsilon: f64, c: f64, sigma_max_delta: f64, delta: f64) -> f64 {
    c * sigma_max_delta * growth(delta) + epsilon
}

/// `c1·e^{δ′(1−t̄)} + c2·σ_min(Δ)·(e^{δ′(1−t̄)} − 1)/δ′ − ε`.
pub fn lower_bound(
    c1: f64,
    c2: f64,
    sigma_min_delta: f64,
    delta_prime: f64,
    tbar: f64,
    epsilon: f64,
) -> f64 {
    c1 * (delta_prime * (1.0 - tbar)).exp() + c2 * sigma_min_delta * window_growth(delta_prime, tbar)
        - epsilon
}

/// Lower bound for `η ≤ 0`, where `c2 ≤ 0` multiplies `σ_max(Δ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NegativeEtaBound {
    pub value: f64,
    /// The bound is negative, hence says nothing.
    pub vacuous: bool,
}

pub fn lower_bound_negative_eta(
    c1: f64,
    c2: f64,
    sigma_max_delta: f64,
    delta_prime: f64,
    tbar: f64,
    epsilon: f64,
) -> NegativeEtaBound {
    let value = c1 * (delta_prime * (1.0 - tbar)).exp()
        + c2 * sigma_max_delta * window_growth(delta_prime, tbar)
        - epsilon;
    NegativeEtaBound {
        value,
        vacuous: value < 0.0,
    }
}

/// `max_x ‖f(x) − net(x)‖₂` over the grid.
pub fn estimate_epsilon(
    f: impl Fn(&[f64]) -> Vec<f64>,
    net: &impl Network,
    grid: &CompactGrid,
) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::Precondition("grid is empty".into()));
    }
    let out = net.forward_batch(grid.points())?;
    let mut eps = 0.0_f64;
    for i in 0..grid.len() {
        let fx = f(grid.point(i));
        if fx.len() != out.cols() {
            return Err(Error::dim(format!(
                "target has {} outputs, network has {}",
                fx.len(),
                out.cols()
            )));
        }
        eps = eps.max(dist2(&fx, out.row(i)));
    }
    Ok(eps)
}

/// `cos θ(u, v)`, or `None` when either norm is below [`COSINE_NORM_FLOOR`].
pub fn cosine(u: &[f64], v: &[f64]) -> Option<f64> {
    let (nu, nv) = (norm2(u), norm2(v));
    (nu >= COSINE_NORM_FLOOR && nv >= COSINE_NORM_FLOOR).then(|| dot(u, v) / (nu * nv))
}

/// Which integrator produces `z` and `z̄`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FlowMode {
    /// Explicit Euler with the given step count.
    Euler(usize),
    /// Cross-checked RK4 on [`REFERENCE_STEPS`] steps.
    Reference,
}

impl FlowMode {
    pub fn steps(&self) -> usize {
        match self {
            FlowMode::Euler(n) => *n,
            FlowMode::Reference => REFERENCE_STEPS,
        }
    }

    fn trajectory(&self, ode: &NeuralOde, z0: &[f64]) -> Result<FlowTrajectory> {
        match self {
            FlowMode::Euler(n) => ode.trajectory_with(z0, Integrator::Euler, *n),
            FlowMode::Reference => ode.reference_trajectory(z0),
        }
    }
}

/// Time nodes used by `η`, `m` and `M`: `t̄, t̄ + k, …` up to 1, snapped to the
/// integrator grid, or every integrator node in `[t̄, 1]` when `step` is `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeSampling {
    pub mode: FlowMode,
    pub tbar: f64,
    pub step: Option<f64>,
}

impl TimeSampling {
    /// Explicit Euler with step 0.05, `t̄ = 0.3`, time step 0.05.
    pub fn region_default() -> Self {
        Self {
            mode: FlowMode::Euler(20),
            tbar: 0.3,
            step: Some(0.05),
        }
    }

    /// Reference integrator, every node in `[t̄, 1]`.
    pub fn reference(tbar: f64) -> Self {
        Self {
            mode: FlowMode::Reference,
            tbar,
            step: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.tbar > 0.0 && self.tbar < 1.0) {
            return Err(Error::Precondition(format!("tbar must lie in (0, 1), got {}", self.tbar)));
        }
        if let Some(k) = self.step {
            if !(k > 0.0) {
                return Err(Error::Precondition(format!("time step must be positive, got {k}")));
            }
        }
        Ok(())
    }

    /// Indices of the integrator nodes to inspect, ascending and distinct.
    pub fn nodes(&self) -> Vec<usize> {
        let n = self.mode.steps();
        let snap = |t: f64| ((t * n as f64).round() as usize).min(n);
        let first = snap(self.tbar);
        let mut out: Vec<usize> = match self.step {
            None => (first..=n).collect(),
            Some(k) => {
                let count = ((1.0 - self.tbar) / k + 1e-9).floor() as usize;
                (0..=count).map(|i| snap(self.tbar + i as f64 * k)).collect()
            }
        };
        out.dedup();
        out
    }

    pub fn tbar_node(&self) -> usize {
        ((self.tbar * self.mode.steps() as f64).round() as usize).min(self.mode.steps())
    }
}

/// `z` and `z̄` from a shared initial state.
#[derive(Debug, Clone)]
pub struct TrajectoryPair {
    pub z: FlowTrajectory,
    pub zbar: FlowTrajectory,
}

impl TrajectoryPair {
    pub fn compute(ode: &NeuralOde, ode_bar: &NeuralOde, z0: &[f64], mode: FlowMode) -> Result<Self> {
        Ok(Self {
            z: mode.trajectory(ode, z0)?,
            zbar: mode.trajectory(ode_bar, z0)?,
        })
    }

    /// `min` over vertices `D` and the given nodes of `cos θ(z − z̄, −DΔz)`;
    /// `None` when any required cosine is undefined.
    pub fn eta(&self, delta: &Matrix, omega: &OmegaBox, nodes: &[usize]) -> Option<f64> {
        let d = omega.dim();
        let mut best = f64::INFINITY;
        let mut diff = vec![0.0; d];
        let mut w = vec![0.0; d];
        for &k in nodes {
            let z = &self.z.states[k];
            let zb = &self.zbar.states[k];
            for i in 0..d {
                diff[i] = z[i] - zb[i];
            }
            let dz = delta.matvec(z).expect("square Δ of matching size");
            for mask in omega.vertices() {
                let diag = mask.diagonal(omega.alpha());
                for i in 0..d {
                    w[i] = -diag[i] * dz[i];
                }
                best = best.min(cosine(&diff, &w)?);
            }
        }
        Some(best)
    }

    /// `min` over nodes of `‖z(t)‖`.
    pub fn min_norm(&self, nodes: &[usize]) -> f64 {
        nodes
            .iter()
            .map(|&k| norm2(&self.z.states[k]))
            .fold(f64::INFINITY, f64::min)
    }

    /// `max` over nodes of `‖z(t)‖`.
    pub fn max_norm(&self, nodes: &[usize]) -> f64 {
        nodes
            .iter()
            .map(|&k| norm2(&self.z.states[k]))
            .fold(0.0, f64::max)
    }

    pub fn gap_at(&self, k: usize) -> f64 {
        dist2(&self.z.states[k], &self.zbar.states[k])
    }
}

/// `Δ = Ā − A` after checking that the two nets differ only in `A`.
pub fn perturbation(net: &ShallowFlowNet, net_bar: &ShallowFlowNet) -> Result<Matrix> {
    if net.l1 != net_bar.l1
        || net.l2 != net_bar.l2
        || net.ode.b() != net_bar.ode.b()
        || net.ode.activation() != net_bar.ode.activation()
    {
        return Err(Error::Contract(
            "the stabilized network must differ from the original only in A".into(),
        ));
    }
    net_bar.ode.a().sub(net.ode.a())
}

fn pair_at(
    net: &ShallowFlowNet,
    net_bar: &ShallowFlowNet,
    x: &[f64],
    mode: FlowMode,
) -> Result<TrajectoryPair> {
    let z0 = net.l1.apply(x)?;
    TrajectoryPair::compute(&net.ode, &net_bar.ode, &z0, mode)
}

/// `η(x)` for a single input.
pub fn eta(
    net: &ShallowFlowNet,
    net_bar: &ShallowFlowNet,
    x: &[f64],
    omega: &OmegaBox,
    sampling: &TimeSampling,
) -> Result<Option<f64>> {
    sampling.validate()?;
    let delta = perturbation(net, net_bar)?;
    let pair = pair_at(net, net_bar, x, sampling.mode)?;
    Ok(pair.eta(&delta, omega, &sampling.nodes()))
}

/// `C = max_x max_{t∈[0,1]} ‖z(t)‖` over the grid and the integrator nodes.
pub fn constant_c(net: &ShallowFlowNet, grid: &CompactGrid, mode: FlowMode) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::Precondition("grid is empty".into()));
    }
    let all: Vec<usize> = (0..=mode.steps()).collect();
    let mut c = 0.0_f64;
    for i in 0..grid.len() {
        let z0 = net.l1.apply(grid.point(i))?;
        let traj = mode.trajectory(&net.ode, &z0)?;
        c = c.max(TrajectoryPair {
            z: traj.clone(),
            zbar: traj,
        }
        .max_norm(&all));
    }
    Ok(c)
}

/// `min_x m(x)` with `m(x) = min_{t∈[t̄,1]} ‖z(t)‖` on the sampled nodes.
pub fn constant_m(net: &ShallowFlowNet, grid: &CompactGrid, sampling: &TimeSampling) -> Result<f64> {
    sampling.validate()?;
    if grid.is_empty() {
        return Err(Error::Precondition("grid is empty".into()));
    }
    let nodes = sampling.nodes();
    let mut m = f64::INFINITY;
    for i in 0..grid.len() {
        let z0 = net.l1.apply(grid.point(i))?;
        let traj = sampling.mode.trajectory(&net.ode, &z0)?;
        m = m.min(
            nodes
                .iter()
                .map(|&k| norm2(&traj.states[k]))
                .fold(f64::INFINITY, f64::min),
        );
    }
    Ok(m)
}

/// Per-point `η` over a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMap {
    pub points: Matrix,
    /// `None` where a cosine was undefined.
    pub eta: Vec<Option<f64>>,
}

impl RegionMap {
    pub fn holds(&self, i: usize) -> bool {
        matches!(self.eta[i], Some(v) if v > 0.0)
    }

    pub fn undefined(&self, i: usize) -> bool {
        self.eta[i].is_none()
    }

    pub fn len(&self) -> usize {
        self.eta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eta.is_empty()
    }

    /// Fraction of points where `η > 0`.
    pub fn fraction_green(&self) -> f64 {
        if self.eta.is_empty() {
            return 0.0;
        }
        (0..self.len()).filter(|&i| self.holds(i)).count() as f64 / self.len() as f64
    }

    /// Rows `x1,…,xm,eta,holds,undefined`.
    pub fn to_csv(&self) -> String {
        let m = self.points.cols();
        let mut out: String = (1..=m).map(|i| format!("x{i},")).collect();
        out.push_str("eta,holds,undefined\n");
        for i in 0..self.len() {
            for v in self.points.row(i) {
                out.push_str(&format!("{v},"));
            }
            let eta = self.eta[i].map_or("nan".to_string(), |v| format!("{v:e}"));
            out.push_str(&format!(
                "{eta},{},{}\n",
                u8::from(self.holds(i)),
                u8::from(self.undefined(i))
            ));
        }
        out
    }
}

/// `η` at every grid point.
pub fn region_map(
    net: &ShallowFlowNet,
    net_bar: &ShallowFlowNet,
    grid: &CompactGrid,
    omega: &OmegaBox,
    sampling: &TimeSampling,
) -> Result<RegionMap> {
    sampling.validate()?;
    let delta = perturbation(net, net_bar)?;
    let nodes = sampling.nodes();
    let mut etas = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        let pair = pair_at(net, net_bar, grid.point(i), sampling.mode)?;
        etas.push(pair.eta(&delta, omega, &nodes));
    }
    Ok(RegionMap {
        points: grid.points().clone(),
        eta: etas,
    })
}

/// Constants, bound values and soundness diagnostics of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub epsilon: f64,
    /// `δ⋆` of the perturbed matrix.
    pub delta: f64,
    pub delta_prime: f64,
    pub sigma_max_delta: f64,
    pub sigma_min_delta: f64,
    pub sigma_max_a2: f64,
    pub sigma_min_a2: f64,
    /// `max_x max_t ‖z(t)‖`.
    pub c: f64,
    pub c1: f64,
    pub c2: f64,
    pub tbar: f64,
    pub upper_value: f64,
    pub lower_value: f64,
    /// The lower bound came from the `η ≤ 0` variant.
    pub negative_eta: bool,
    /// The lower bound is negative.
    pub lower_vacuous: bool,
    pub empirical_sup: f64,
    pub eta_min: Option<f64>,
    pub fraction_green: f64,
    /// Points where the per-point lower bound was checked.
    pub lower_checked: usize,
    /// Grid indices violating the upper bound.
    pub upper_violations: Vec<usize>,
    /// Grid indices with `η > 0` violating the per-point lower bound.
    pub lower_violations: Vec<usize>,
}

impl BoundReport {
    pub fn to_json_line(&self) -> String {
        let num = |v: f64| {
            if v.is_finite() {
                format!("{v:.17e}")
            } else {
                format!("\"{v}\"")
            }
        };
        format!(
            "{{\"epsilon\": {}, \"delta\": {}, \"delta_prime\": {}, \"sigma_max_Delta\": {}, \"sigma_min_Delta\": {}, \"C\": {}, \"c1\": {}, \"c2\": {}, \"tbar\": {}, \"upper_value\": {}, \"lower_value\": {}, \"lower_vacuous\": {}, \"negative_eta\": {}, \"empirical_sup\": {}, \"fraction_green\": {}, \"upper_violations\": {}, \"lower_violations\": {}}}",
            num(self.epsilon),
            num(self.delta),
            num(self.delta_prime),
            num(self.sigma_max_delta),
            num(self.sigma_min_delta),
            num(self.c),
            num(self.c1),
            num(self.c2),
            num(self.tbar),
            num(self.upper_value),
            num(self.lower_value),
            self.lower_vacuous,
            self.negative_eta,
            num(self.empirical_sup),
            num(self.fraction_green),
            self.upper_violations.len(),
            self.lower_violations.len()
        )
    }
}

/// Evaluates both bounds with the reference integrator and records violations.
///
/// `target` holds `f(x)` per grid row; `None` takes the network itself as the
/// target, so `ε = 0`. The upper bound carries the factor `‖A2‖₂`, which is 1
/// for fixed-norm networks.
pub fn evaluate_bounds(
    target: Option<&Matrix>,
    net: &ShallowFlowNet,
    net_bar: &ShallowFlowNet,
    grid: &CompactGrid,
    alpha: f64,
    tbar: f64,
) -> Result<BoundReport> {
    let sampling = TimeSampling::reference(tbar);
    sampling.validate()?;
    if grid.is_empty() {
        return Err(Error::Precondition("grid is empty".into()));
    }
    let delta_m = perturbation(net, net_bar)?;
    let omega = OmegaBox::new(net.ode.dim(), alpha)?;
    let delta = delta_star(net_bar.ode.a(), &omega)?.value;
    let dprime = delta_prime(net_bar.ode.a(), &omega)?;
    let (smin_d, smax_d) = sigma_extremes(&delta_m);
    let (smin_a2, smax_a2) = sigma_extremes(net.a2());
    let a2 = net.a2();

    let all: Vec<usize> = (0..=REFERENCE_STEPS).collect();
    let nodes = sampling.nodes();
    let k_bar = sampling.tbar_node();
    let n = grid.len();
    let mut pairs = Vec::with_capacity(n);
    let mut epsilon = 0.0_f64;
    let mut c = 0.0_f64;
    let mut sup = 0.0_f64;
    let mut gaps = Vec::with_capacity(n);
    for i in 0..n {
        let pair = pair_at(net, net_bar, grid.point(i), FlowMode::Reference)?;
        c = c.max(pair.max_norm(&all));
        let diff: Vec<f64> = pair
            .z
            .last()
            .iter()
            .zip(pair.zbar.last().iter())
            .map(|(a, b)| a - b)
            .collect();
        let gap = norm2(&a2.matvec(&diff)?);
        sup = sup.max(gap);
        gaps.push(gap);
        if let Some(t) = target {
            let phi = net.l2.apply(pair.z.last())?;
            if t.rows() != n || t.cols() != phi.len() {
                return Err(Error::dim(format!(
                    "target values are {}x{}, expected {n}x{}",
                    t.rows(),
                    t.cols(),
                    phi.len()
                )));
            }
            epsilon = epsilon.max(dist2(t.row(i), &phi));
        }
        pairs.push(pair);
    }

    let upper_value = smax_a2 * upper_bound(0.0, c, smax_d, delta) + epsilon;
    let upper_slack = BOUND_TOLERANCE * (1.0 + upper_value);
    let upper_violations: Vec<usize> = (0..n)
        .filter(|&i| gaps[i] > upper_value - epsilon + upper_slack)
        .collect();

    let etas: Vec<Option<f64>> = pairs.iter().map(|p| p.eta(&delta_m, &omega, &nodes)).collect();
    let defined: Vec<f64> = etas.iter().flatten().copied().collect();
    let eta_min = (defined.len() == n).then(|| defined.iter().copied().fold(f64::INFINITY, f64::min));
    let green = etas.iter().filter(|e| matches!(e, Some(v) if *v > 0.0)).count();

    let c1 = smin_a2
        * pairs
            .iter()
            .map(|p| p.gap_at(k_bar))
            .fold(f64::INFINITY, f64::min);
    let (c2, lower_value, negative_eta) = match eta_min {
        Some(e) if e > 0.0 => {
            let m = pairs.iter().map(|p| p.min_norm(&nodes)).fold(f64::INFINITY, f64::min);
            let c2 = alpha * smin_a2 * m * e;
            (c2, lower_bound(c1, c2, smin_d, dprime, tbar, epsilon), false)
        }
        _ => {
            let big_m = pairs.iter().map(|p| p.max_norm(&nodes)).fold(0.0, f64::max);
            let e = defined.iter().copied().fold(0.0_f64, f64::min);
            let c2 = smin_a2 * big_m * e;
            let b = lower_bound_negative_eta(c1, c2, smax_d, dprime, tbar, epsilon);
            (c2, b.value, true)
        }
    };

    let mut lower_violations = Vec::new();
    let mut lower_checked = 0;
    let decay = (dprime * (1.0 - tbar)).exp();
    let window = window_growth(dprime, tbar);
    for (i, (pair, e)) in pairs.iter().zip(&etas).enumerate() {
        let Some(e) = *e else { continue };
        if e <= 0.0 {
            continue;
        }
        lower_checked += 1;
        let lhs = pair.gap_at(REFERENCE_STEPS);
        let rhs = decay * pair.gap_at(k_bar) + alpha * e * pair.min_norm(&nodes) * smin_d * window;
        if lhs < rhs - BOUND_TOLERANCE {
            lower_violations.push(i);
        }
    }

    Ok(BoundReport {
        epsilon,
        delta,
        delta_prime: dprime,
        sigma_max_delta: smax_d,
        sigma_min_delta: smin_d,
        sigma_max_a2: smax_a2,
        sigma_min_a2: smin_a2,
        c,
        c1,
        c2,
        tbar,
        upper_value,
        lower_value,
        negative_eta,
        lower_vacuous: lower_value < 0.0,
        empirical_sup: sup,
        eta_min,
        fraction_green: green as f64 / n as f64,
        lower_checked,
        upper_violations,
        lower_violations,
    })
}

/// [`evaluate_bounds`], failing with the first witness of a violated bound.
pub fn verify_bounds(
    target: Option<&Matrix>,
    net: &ShallowFlowNet,
    net_bar: &ShallowFlowNet,
    grid: &CompactGrid,
    alpha: f64,
    tbar: f64,
) -> Result<BoundReport> {
    let report = evaluate_bounds(target, net, net_bar, grid, alpha, tbar)?;
    if let Some(&i) = report.upper_violations.first() {
        return Err(Error::BoundViolation {
            point: grid.point(i).to_vec(),
            detail: format!(
                "‖φ(x) − φ̄(x)‖ exceeds the upper bound {:e}",
                report.upper_value - report.epsilon
            ),
        });
    }
    if let Some(&i) = report.lower_violations.first() {
        return Err(Error::BoundViolation {
            point: grid.point(i).to_vec(),
            detail: "per-point lower bound fails where η > 0".into(),
        });
    }
    Ok(report)
}
