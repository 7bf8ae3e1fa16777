//! The three shallow architectures, their exact gradients, norm constraints
//! and the fixed-norm renormalization of a flow network.

mod io;
mod layers;

pub use layers::Affine;

use rand::Rng;

use crate::error::{Error, Result};
use crate::flow::{piecewise_flow, ActivationSpec, NeuralOde};
use crate::linalg::{spectral_norm, Matrix, Vector};
use crate::spectral::StabilizationResult;
use layers::{activate, activate_backward, flow_backward, flow_forward, FlowTape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Flow,
    Shallow,
    TwoHidden,
}

impl Arch {
    pub fn name(&self) -> &'static str {
        match self {
            Arch::Flow => "flow",
            Arch::Shallow => "shallow",
            Arch::TwoHidden => "two-hidden",
        }
    }

    pub const ALL: [Arch; 3] = [Arch::Shallow, Arch::Flow, Arch::TwoHidden];
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flow" => Ok(Arch::Flow),
            "shallow" => Ok(Arch::Shallow),
            "two-hidden" => Ok(Arch::TwoHidden),
            other => Err(Error::Precondition(format!("unknown architecture {other:?}"))),
        }
    }
}

/// One gradient tensor per parameter tensor, in the network's parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &[&[f64]]) -> Self {
        Self {
            tensors: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, c: f64) {
        self.tensors.iter_mut().flatten().for_each(|v| *v *= c);
    }
}

/// Intermediate values recorded by [`Network::forward_tape`].
#[derive(Debug, Clone)]
pub struct Tape(TapeKind);

#[derive(Debug, Clone)]
enum TapeKind {
    Flow {
        x: Matrix,
        h0: Matrix,
        flow: FlowTape,
        h1: Matrix,
    },
    Sigma {
        x: Matrix,
        pre: Vec<Matrix>,
        post: Vec<Matrix>,
    },
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        match &self.0 {
            TapeKind::Flow { x, .. } | TapeKind::Sigma { x, .. } => x.rows(),
        }
    }
}

pub trait Network {
    fn arch(&self) -> Arch;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    /// Parameter tensors in a fixed order (weights row-major, then biases).
    fn params(&self) -> Vec<&[f64]>;
    fn params_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Outputs for a batch (one sample per row) and the tape needed by [`Network::backward`].
    fn forward_tape(&self, x: &Matrix) -> Result<(Matrix, Tape)>;

    /// Parameter gradients and input gradients of `Σ_r ⟨upstream_r, net(x_r)⟩`.
    fn backward(&self, tape: &Tape, upstream: &Matrix) -> Result<(Gradients, Matrix)>;

    fn forward_batch(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_tape(x)?.0)
    }

    fn forward(&self, x: &[f64]) -> Result<Vector> {
        let batch = Matrix::new(1, x.len(), x.to_vec())?;
        Ok(Vector::from(self.forward_batch(&batch)?.into_vec()))
    }
}

fn check_upstream(tape: &Tape, upstream: &Matrix, out: usize) -> Result<()> {
    if upstream.rows() != tape.batch_size() || upstream.cols() != out {
        return Err(Error::Contract(format!(
            "upstream gradient is {}x{} but the recorded batch produced {}x{out}",
            upstream.rows(),
            upstream.cols(),
            tape.batch_size()
        )));
    }
    Ok(())
}

fn uniform_affine(rng: &mut impl Rng, out: usize, inp: usize) -> Affine {
    let r = 1.0 / (inp.max(1) as f64).sqrt();
    let data = (0..out * inp).map(|_| rng.gen_range(-r..r)).collect();
    Affine {
        w: Matrix::new(out, inp, data).expect("finite"),
        b: Vector::zeros(out),
    }
}

/// `x ↦ A2·φ(A1x + b1) + b2` with `φ` the Euler flow map of the ODE.
#[derive(Debug, Clone, PartialEq)]
pub struct ShallowFlowNet {
    pub l1: Affine,
    pub ode: NeuralOde,
    pub l2: Affine,
}

impl ShallowFlowNet {
    pub fn new(l1: Affine, ode: NeuralOde, l2: Affine) -> Result<Self> {
        if l1.out_dim() != ode.dim() || l2.in_dim() != ode.dim() {
            return Err(Error::dim(format!(
                "layer chain {} -> {} | ode {} | {} -> {} is inconsistent",
                l1.in_dim(),
                l1.out_dim(),
                ode.dim(),
                l2.in_dim(),
                l2.out_dim()
            )));
        }
        Ok(Self { l1, ode, l2 })
    }

    /// Weights uniform on `(−1/√fan_in, 1/√fan_in)`, biases zero.
    pub fn init(
        m: usize,
        d: usize,
        n: usize,
        activation: ActivationSpec,
        steps: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let l1 = uniform_affine(rng, d, m);
        let a = uniform_affine(rng, d, d);
        let l2 = uniform_affine(rng, n, d);
        Self::new(l1, NeuralOde::new(a.w, a.b, activation, steps)?, l2)
    }

    pub fn a1(&self) -> &Matrix {
        &self.l1.w
    }

    pub fn a2(&self) -> &Matrix {
        &self.l2.w
    }

    /// `A1 x + b1` for every row.
    pub fn lift(&self, x: &Matrix) -> Result<Matrix> {
        self.l1.forward(x)
    }

    /// Scales `A1` and `A2` to the constrained spectral norms.
    pub fn project_norms(&mut self, c: &NormConstraint) -> Result<()> {
        rescale_to_norm(&mut self.l1.w, c.c1, "A1")?;
        rescale_to_norm(&mut self.l2.w, c.c2, "A2")?;
        Ok(())
    }

    /// Copy with `A ← A + Δ`.
    pub fn stabilized(&self, result: &StabilizationResult) -> Result<Self> {
        let a = self.ode.a().add(&result.delta)?;
        Ok(Self {
            l1: self.l1.clone(),
            ode: self.ode.with_a(a)?,
            l2: self.l2.clone(),
        })
    }

    /// Rewrites the net with `‖Â1‖₂ = c`, `‖Â2‖₂ = 1`, absorbing the removed
    /// scale into the linear phases of a piecewise flow on `[t0, T]`.
    pub fn renormalize_to_fixed_norm(&self, c: f64) -> Result<Renormalized> {
        if !(c >= 1.0) {
            return Err(Error::Precondition(format!("norm target c must be >= 1, got {c}")));
        }
        let n1 = spectral_norm(&self.l1.w);
        let n2 = spectral_norm(&self.l2.w);
        if !(n1 >= c) {
            return Err(Error::Contract(format!(
                "‖A1‖₂ = {n1} is below the target {c}, which would need t0 > 0"
            )));
        }
        if !(n2 >= 1.0) {
            return Err(Error::Contract(format!(
                "‖A2‖₂ = {n2} is below 1, which would need T < 1"
            )));
        }
        let s1 = c / n1;
        let l1 = Affine {
            w: self.l1.w.scale(s1),
            b: self.l1.b.scale(s1),
        };
        let l2 = Affine {
            w: self.l2.w.scale(1.0 / n2),
            b: self.l2.b.clone(),
        };
        Ok(Renormalized {
            net: Self {
                l1,
                ode: self.ode.clone(),
                l2,
            },
            t0: -(n1 / c).ln(),
            t_end: n2.ln() + 1.0,
        })
    }
}

fn rescale_to_norm(w: &mut Matrix, target: f64, name: &str) -> Result<()> {
    let s = spectral_norm(w);
    if !(s > 0.0) {
        return Err(Error::Precondition(format!("cannot normalize {name}: it is zero")));
    }
    *w = w.scale(target / s);
    Ok(())
}

/// A fixed-norm flow net together with the piecewise time interval `[t0, T]`.
#[derive(Debug, Clone)]
pub struct Renormalized {
    pub net: ShallowFlowNet,
    pub t0: f64,
    pub t_end: f64,
}

impl Renormalized {
    /// `Â2·ψ(Â1x + b̂1) + b2` with `ψ` the piecewise flow on `[t0, T]`.
    pub fn forward(&self, x: &[f64]) -> Result<Vector> {
        let z = self.net.l1.apply(x)?;
        let y = piecewise_flow(&self.net.ode, self.t0, self.t_end, &z)?;
        self.net.l2.apply(&y)
    }
}

/// Target spectral norms of `A1` and `A2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormConstraint {
    pub c1: f64,
    pub c2: f64,
}

impl NormConstraint {
    pub fn new(c1: f64, c2: f64) -> Result<Self> {
        if !(c1 >= 1.0) || !(c2 > 0.0) {
            return Err(Error::Precondition(format!(
                "norm constraint needs c1 >= 1 and c2 > 0, got ({c1}, {c2})"
            )));
        }
        Ok(Self { c1, c2 })
    }
}

impl Default for NormConstraint {
    fn default() -> Self {
        Self { c1: 1.0, c2: 1.0 }
    }
}

impl Network for ShallowFlowNet {
    fn arch(&self) -> Arch {
        Arch::Flow
    }

    fn input_dim(&self) -> usize {
        self.l1.in_dim()
    }

    fn output_dim(&self) -> usize {
        self.l2.out_dim()
    }

    fn params(&self) -> Vec<&[f64]> {
        vec![
            self.l1.w.as_slice(),
            &self.l1.b,
            self.ode.a().as_slice(),
            self.ode.b(),
            self.l2.w.as_slice(),
            &self.l2.b,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let (a, b) = self.ode.parts_mut();
        vec![
            self.l1.w.as_mut_slice(),
            &mut self.l1.b,
            a.as_mut_slice(),
            b,
            self.l2.w.as_mut_slice(),
            &mut self.l2.b,
        ]
    }

    fn forward_batch(&self, x: &Matrix) -> Result<Matrix> {
        let h0 = self.l1.forward(x)?;
        let (h1, _) = flow_forward(&self.ode, h0, false)?;
        self.l2.forward(&h1)
    }

    fn forward_tape(&self, x: &Matrix) -> Result<(Matrix, Tape)> {
        let h0 = self.l1.forward(x)?;
        let (h1, flow) = flow_forward(&self.ode, h0.clone(), true)?;
        let out = self.l2.forward(&h1)?;
        let tape = TapeKind::Flow {
            x: x.clone(),
            h0,
            flow: flow.expect("recorded"),
            h1,
        };
        Ok((out, Tape(tape)))
    }

    fn backward(&self, tape: &Tape, upstream: &Matrix) -> Result<(Gradients, Matrix)> {
        check_upstream(tape, upstream, self.output_dim())?;
        let TapeKind::Flow { x, h0, flow, h1 } = &tape.0 else {
            return Err(Error::Contract("tape was not recorded by a flow network".into()));
        };
        if h0.cols() != self.ode.dim() || flow.pre.len() != self.ode.steps() {
            return Err(Error::Contract("tape does not match this network".into()));
        }
        let d = self.ode.dim();
        let mut g = Gradients::zeros_like(&self.params());
        let mut g_a2 = Matrix::zeros(self.l2.out_dim(), d);
        let mut g_b2 = vec![0.0; self.l2.out_dim()];
        let g_h1 = self
            .l2
            .backward(h1, upstream, &mut g_a2, &mut g_b2, true)
            .expect("requested");
        let mut g_a = Matrix::zeros(d, d);
        let mut g_b = vec![0.0; d];
        let g_h0 = flow_backward(&self.ode, flow, g_h1, Some((&mut g_a, &mut g_b)));
        let mut g_a1 = Matrix::zeros(d, self.l1.in_dim());
        let mut g_b1 = vec![0.0; d];
        let g_x = self
            .l1
            .backward(x, &g_h0, &mut g_a1, &mut g_b1, true)
            .expect("requested");
        g.tensors = vec![
            g_a1.into_vec(),
            g_b1,
            g_a.into_vec(),
            g_b,
            g_a2.into_vec(),
            g_b2,
        ];
        Ok((g, g_x))
    }
}

/// Affine layers separated by an elementwise activation: one hidden layer
/// ([`ShallowSigmaNet`]) or two ([`TwoHiddenNet`]).
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaNet {
    pub layers: Vec<Affine>,
    pub activation: ActivationSpec,
}

pub type ShallowSigmaNet = SigmaNet;
pub type TwoHiddenNet = SigmaNet;

impl SigmaNet {
    pub fn new(layers: Vec<Affine>, activation: ActivationSpec) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::dim("need at least two affine layers"));
        }
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::dim(format!(
                    "layer output {} does not feed input {}",
                    w[0].out_dim(),
                    w[1].in_dim()
                )));
            }
        }
        Ok(Self { layers, activation })
    }

    /// `m → d → n`.
    pub fn shallow(m: usize, d: usize, n: usize, activation: ActivationSpec, rng: &mut impl Rng) -> Self {
        Self {
            layers: vec![uniform_affine(rng, d, m), uniform_affine(rng, n, d)],
            activation,
        }
    }

    /// `m → d → d → n`; same parameter count as the `m, d, n` flow net.
    pub fn two_hidden(m: usize, d: usize, n: usize, activation: ActivationSpec, rng: &mut impl Rng) -> Self {
        Self {
            layers: vec![
                uniform_affine(rng, d, m),
                uniform_affine(rng, d, d),
                uniform_affine(rng, n, d),
            ],
            activation,
        }
    }

    pub fn hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }
}

impl Network for SigmaNet {
    fn arch(&self) -> Arch {
        if self.layers.len() == 2 {
            Arch::Shallow
        } else {
            Arch::TwoHidden
        }
    }

    fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    fn params(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.w.as_slice(), &l.b[..]])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.w.as_mut_slice(), &mut l.b[..]])
            .collect()
    }

    fn forward_batch(&self, x: &Matrix) -> Result<Matrix> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (k, l) in self.layers.iter().enumerate() {
            let z = l.forward(&h)?;
            h = if k < last { activate(&self.activation, &z) } else { z };
        }
        Ok(h)
    }

    fn forward_tape(&self, x: &Matrix) -> Result<(Matrix, Tape)> {
        let last = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(last);
        let mut post = Vec::with_capacity(last);
        let mut h = x.clone();
        for (k, l) in self.layers.iter().enumerate() {
            let z = l.forward(&h)?;
            if k < last {
                h = activate(&self.activation, &z);
                pre.push(z);
                post.push(h.clone());
            } else {
                h = z;
            }
        }
        let tape = TapeKind::Sigma {
            x: x.clone(),
            pre,
            post,
        };
        Ok((h, Tape(tape)))
    }

    fn backward(&self, tape: &Tape, upstream: &Matrix) -> Result<(Gradients, Matrix)> {
        check_upstream(tape, upstream, self.output_dim())?;
        let TapeKind::Sigma { x, pre, post } = &tape.0 else {
            return Err(Error::Contract("tape was not recorded by an activation network".into()));
        };
        if pre.len() != self.layers.len() - 1 {
            return Err(Error::Contract("tape does not match this network".into()));
        }
        let mut tensors = vec![Vec::new(); 2 * self.layers.len()];
        let mut g = upstream.clone();
        for k in (0..self.layers.len()).rev() {
            let l = &self.layers[k];
            let input = if k == 0 { x } else { &post[k - 1] };
            let mut gw = Matrix::zeros(l.out_dim(), l.in_dim());
            let mut gb = vec![0.0; l.out_dim()];
            let gin = l.backward(input, &g, &mut gw, &mut gb, true).expect("requested");
            tensors[2 * k] = gw.into_vec();
            tensors[2 * k + 1] = gb;
            g = if k == 0 {
                gin
            } else {
                activate_backward(&self.activation, &pre[k - 1], &gin)
            };
        }
        Ok((Gradients { tensors }, g))
    }
}

/// Parameter count `dm + d + d² + d + nd + n` of the `m, d, n` flow net.
pub fn flow_param_count(m: usize, d: usize, n: usize) -> usize {
    d * m + d + d * d + d + n * d + n
}

/// Two-hidden-layer net with the same dimensions, hence the same parameter count, as the flow net.
pub fn matched_two_hidden(
    m: usize,
    d: usize,
    n: usize,
    activation: ActivationSpec,
    rng: &mut impl Rng,
) -> TwoHiddenNet {
    let net = SigmaNet::two_hidden(m, d, n, activation, rng);
    assert_eq!(net.param_count(), flow_param_count(m, d, n));
    net
}

/// Any of the three architectures.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyNet {
    Flow(ShallowFlowNet),
    Sigma(SigmaNet),
}

impl AnyNet {
    pub fn as_flow(&self) -> Option<&ShallowFlowNet> {
        match self {
            AnyNet::Flow(n) => Some(n),
            AnyNet::Sigma(_) => None,
        }
    }

    pub fn as_flow_mut(&mut self) -> Option<&mut ShallowFlowNet> {
        match self {
            AnyNet::Flow(n) => Some(n),
            AnyNet::Sigma(_) => None,
        }
    }

    /// Freshly initialized network of the given architecture.
    pub fn init(
        arch: Arch,
        m: usize,
        d: usize,
        n: usize,
        activation: ActivationSpec,
        steps: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(match arch {
            Arch::Flow => AnyNet::Flow(ShallowFlowNet::init(m, d, n, activation, steps, rng)?),
            Arch::Shallow => AnyNet::Sigma(SigmaNet::shallow(m, d, n, activation, rng)),
            Arch::TwoHidden => AnyNet::Sigma(matched_two_hidden(m, d, n, activation, rng)),
        })
    }

    fn inner(&self) -> &dyn Network {
        match self {
            AnyNet::Flow(n) => n,
            AnyNet::Sigma(n) => n,
        }
    }
}

impl Network for AnyNet {
    fn arch(&self) -> Arch {
        self.inner().arch()
    }
    fn input_dim(&self) -> usize {
        self.inner().input_dim()
    }
    fn output_dim(&self) -> usize {
        self.inner().output_dim()
    }
    fn params(&self) -> Vec<&[f64]> {
        self.inner().params()
    }
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            AnyNet::Flow(n) => n.params_mut(),
            AnyNet::Sigma(n) => n.params_mut(),
        }
    }
    fn forward_batch(&self, x: &Matrix) -> Result<Matrix> {
        self.inner().forward_batch(x)
    }
    fn forward_tape(&self, x: &Matrix) -> Result<(Matrix, Tape)> {
        self.inner().forward_tape(x)
    }
    fn backward(&self, tape: &Tape, upstream: &Matrix) -> Result<(Gradients, Matrix)> {
        self.inner().backward(tape, upstream)
    }
}
