//! Batched building blocks. A batch is a `Matrix` with one sample per row.

use crate::error::{Error, Result};
use crate::flow::{ActivationSpec, NeuralOde};
use crate::linalg::{axpy, Matrix, Vector};

/// `x ↦ Wx + b` with `W` of shape `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub w: Matrix,
    pub b: Vector,
}

impl Affine {
    pub fn new(w: Matrix, b: Vector) -> Result<Self> {
        if b.len() != w.rows() {
            return Err(Error::dim(format!(
                "bias of length {} for a {}x{} weight",
                b.len(),
                w.rows(),
                w.cols()
            )));
        }
        Ok(Self { w, b })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            w: Matrix::identity(n),
            b: Vector::zeros(n),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn param_count(&self) -> usize {
        self.w.rows() * self.w.cols() + self.b.len()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vector> {
        Ok(self.w.matvec(x)?.add(&self.b))
    }

    /// `X Wᵀ + 𝟙bᵀ`; the bias is added last so shifting `b` shifts outputs exactly.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim() {
            return Err(Error::dim(format!(
                "batch has {} features, layer expects {}",
                x.cols(),
                self.in_dim()
            )));
        }
        let wt = self.w.transpose();
        let mut out = Matrix::zeros(x.rows(), self.out_dim());
        for r in 0..x.rows() {
            let orow = out.row_mut(r);
            for (j, &v) in x.row(r).iter().enumerate() {
                if v != 0.0 {
                    axpy(v, wt.row(j), orow);
                }
            }
            for (o, &b) in orow.iter_mut().zip(self.b.iter()) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Accumulates `Gᵀ X` into `gw` and column sums of `G` into `gb`; returns `G W`.
    pub(crate) fn backward(
        &self,
        x: &Matrix,
        g: &Matrix,
        gw: &mut Matrix,
        gb: &mut [f64],
        want_input: bool,
    ) -> Option<Matrix> {
        for r in 0..g.rows() {
            let xr = x.row(r);
            for (i, &gi) in g.row(r).iter().enumerate() {
                if gi != 0.0 {
                    axpy(gi, xr, gw.row_mut(i));
                    gb[i] += gi;
                }
            }
        }
        want_input.then(|| {
            let mut gx = Matrix::zeros(g.rows(), self.in_dim());
            for r in 0..g.rows() {
                let out = gx.row_mut(r);
                for (i, &gi) in g.row(r).iter().enumerate() {
                    if gi != 0.0 {
                        axpy(gi, self.w.row(i), out);
                    }
                }
            }
            gx
        })
    }
}

/// Pre-activations of an elementwise activation layer.
pub(crate) fn activate(spec: &ActivationSpec, z: &Matrix) -> Matrix {
    let mut out = z.clone();
    out.as_mut_slice().iter_mut().for_each(|v| *v = spec.value(*v));
    out
}

/// `G ⊙ σ′(Z)`.
pub(crate) fn activate_backward(spec: &ActivationSpec, z: &Matrix, g: &Matrix) -> Matrix {
    let mut out = g.clone();
    for (o, &zi) in out.as_mut_slice().iter_mut().zip(z.as_slice()) {
        *o *= spec.derivative(zi);
    }
    out
}

/// Recorded Euler trajectory of a batch: `states[k]` and pre-activations `pre[k] = U_k Aᵀ + b`.
#[derive(Debug, Clone)]
pub(crate) struct FlowTape {
    pub states: Vec<Matrix>,
    pub pre: Vec<Matrix>,
}

/// Euler flow of every row of `u0`; records the trajectory when `record` is set.
pub(crate) fn flow_forward(
    ode: &NeuralOde,
    u0: Matrix,
    record: bool,
) -> Result<(Matrix, Option<FlowTape>)> {
    let d = ode.dim();
    if u0.cols() != d {
        return Err(Error::dim(format!(
            "batch has {} features, flow has dimension {d}",
            u0.cols()
        )));
    }
    let n = ode.steps();
    let h = 1.0 / n as f64;
    let at = ode.a().transpose();
    let b = ode.b();
    let act = ode.activation();
    let mut tape = record.then(|| FlowTape {
        states: Vec::with_capacity(n + 1),
        pre: Vec::with_capacity(n),
    });
    let mut u = u0;
    let mut p = Matrix::zeros(u.rows(), d);
    for k in 1..=n {
        for r in 0..u.rows() {
            let prow = p.row_mut(r);
            prow.copy_from_slice(b);
            for (j, &v) in u.row(r).iter().enumerate() {
                if v != 0.0 {
                    axpy(v, at.row(j), prow);
                }
            }
        }
        let mut next = u.clone();
        let mut finite = true;
        for (x, &z) in next.as_mut_slice().iter_mut().zip(p.as_slice()) {
            *x += h * act.value(z);
            finite &= x.is_finite();
        }
        if !finite {
            return Err(Error::Overflow { step: k });
        }
        match tape.as_mut() {
            Some(t) => {
                t.states.push(std::mem::replace(&mut u, next));
                t.pre.push(p.clone());
            }
            None => u = next,
        }
    }
    if let Some(t) = tape.as_mut() {
        t.states.push(u.clone());
    }
    Ok((u, tape))
}

/// Reverse pass through the recorded Euler steps. Accumulates into `ga`, `gb`
/// (skipped when `None`) and returns the gradient with respect to the initial states.
pub(crate) fn flow_backward(
    ode: &NeuralOde,
    tape: &FlowTape,
    upstream: Matrix,
    mut grads: Option<(&mut Matrix, &mut [f64])>,
) -> Matrix {
    let h = 1.0 / ode.steps() as f64;
    let a = ode.a();
    let act = ode.activation();
    let mut g = upstream;
    let mut s = Matrix::zeros(g.rows(), g.cols());
    for k in (0..tape.pre.len()).rev() {
        for ((si, &gi), &z) in s
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(tape.pre[k].as_slice())
        {
            *si = h * act.derivative(z) * gi;
        }
        if let Some((ga, gb)) = grads.as_mut() {
            let uk = &tape.states[k];
            for r in 0..s.rows() {
                let ur = uk.row(r);
                for (i, &si) in s.row(r).iter().enumerate() {
                    if si != 0.0 {
                        axpy(si, ur, ga.row_mut(i));
                        gb[i] += si;
                    }
                }
            }
        }
        for r in 0..s.rows() {
            for i in 0..s.cols() {
                let si = s[(r, i)];
                if si != 0.0 {
                    axpy(si, a.row(i), g.row_mut(r));
                }
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::ActivationSpec;

    #[test]
    fn batched_flow_matches_single_sample_flow() {
        let ode = NeuralOde::new(
            Matrix::from_rows(&[[0.5, -1.0], [0.3, 0.2]]).unwrap(),
            Vector::new(vec![0.1, -0.2]).unwrap(),
            ActivationSpec::leaky_relu(0.1).unwrap(),
            20,
        )
        .unwrap();
        let x = Matrix::from_rows(&[[0.4, -0.6], [1.0, 2.0], [0.0, 0.0]]).unwrap();
        let (out, tape) = flow_forward(&ode, x.clone(), true).unwrap();
        let tape = tape.unwrap();
        assert_eq!(tape.states.len(), 21);
        assert_eq!(tape.states[0], x);
        for r in 0..3 {
            let want = ode.flow(x.row(r)).unwrap();
            for i in 0..2 {
                assert!((out[(r, i)] - want[i]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn affine_forward_and_backward_shapes() {
        let l = Affine::new(
            Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap(),
            Vector::new(vec![1.0, 0.0, -1.0]).unwrap(),
        )
        .unwrap();
        let x = Matrix::from_rows(&[[1.0, -1.0]]).unwrap();
        let y = l.forward(&x).unwrap();
        assert_eq!(y.row(0), &[0.0, -1.0, -2.0]);
        let mut gw = Matrix::zeros(3, 2);
        let mut gb = vec![0.0; 3];
        let g = Matrix::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        let gx = l.backward(&x, &g, &mut gw, &mut gb, true).unwrap();
        assert_eq!(gx.row(0), &[1.0, 2.0]);
        assert_eq!(gw.row(0), &[1.0, -1.0]);
        assert_eq!(gb, vec![1.0, 0.0, 0.0]);
    }
}
