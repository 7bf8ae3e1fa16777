//! Versioned text model files.
//!
//! Line 1 is `flownet-v1 <arch> m d n N alpha act_kind`. Each tensor follows
//! as a line holding its name and a block in the matrix text format; biases
//! are stored as `1 × len` matrices. Flow nets store `A1 b1 A b A2 b2`,
//! activation nets store `W1 b1 W2 b2 [W3 b3]`.

use std::path::Path;

use super::{Affine, AnyNet, Arch, Network, ShallowFlowNet, SigmaNet};
use crate::error::{Error, Result};
use crate::flow::{ActivationKind, ActivationSpec, NeuralOde};
use crate::linalg::text::{format_f64, parse_block};
use crate::linalg::{Matrix, Vector};

const MAGIC: &str = "flownet-v1";

impl AnyNet {
    pub fn to_model_text(&self) -> String {
        let (arch, m, d, n) = (self.arch(), self.input_dim(), self.hidden_dim(), self.output_dim());
        let (steps, act) = match self {
            AnyNet::Flow(f) => (f.ode.steps(), *f.ode.activation()),
            AnyNet::Sigma(s) => (0, s.activation),
        };
        let mut out = format!(
            "{MAGIC} {arch} {m} {d} {n} {steps} {} {}\n",
            format_f64(act.alpha()),
            act.kind()
        );
        let names = tensor_names(arch);
        let shapes = self.tensor_shapes();
        for ((name, (r, c)), data) in names.iter().zip(shapes).zip(self.params()) {
            out.push_str(name);
            out.push('\n');
            Matrix::from_raw(r, c, data.to_vec()).write_text(&mut out);
        }
        out
    }

    pub fn from_model_text(text: &str) -> Result<AnyNet> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i as u64 + 1, l));
        let (hno, header) = lines
            .find(|(_, l)| !l.trim().is_empty())
            .ok_or_else(|| Error::parse_line(1, "empty model file"))?;
        let f: Vec<&str> = header.split_whitespace().collect();
        if f.len() != 8 || f[0] != MAGIC {
            return Err(Error::parse_line(
                hno,
                format!("expected \"{MAGIC} <arch> m d n N alpha act_kind\""),
            ));
        }
        let bad = |what: &str, v: &str| Error::parse_line(hno, format!("bad {what} {v:?}"));
        let arch: Arch = f[1].parse().map_err(|_| bad("architecture", f[1]))?;
        let num = |i: usize, what: &str| f[i].parse::<usize>().map_err(|_| bad(what, f[i]));
        let (m, d, n, steps) = (num(2, "m")?, num(3, "d")?, num(4, "n")?, num(5, "N")?);
        let alpha: f64 = f[6].parse().map_err(|_| bad("alpha", f[6]))?;
        let kind: ActivationKind = f[7].parse().map_err(|_| bad("activation", f[7]))?;
        let act = ActivationSpec::new(kind, alpha)
            .map_err(|e| Error::parse_line(hno, e.to_string()))?;

        let expected = shapes_for(arch, m, d, n);
        let mut tensors = Vec::with_capacity(expected.len());
        for (name, (r, c)) in tensor_names(arch).iter().zip(expected) {
            let (no, line) = lines
                .find(|(_, l)| !l.trim().is_empty())
                .ok_or_else(|| Error::parse_line(0, format!("missing tensor {name}")))?;
            if line.trim() != *name {
                return Err(Error::parse_line(no, format!("expected tensor {name}, found {line:?}")));
            }
            let t = parse_block(&mut lines)?;
            if t.shape() != (r, c) {
                return Err(Error::parse_line(
                    no,
                    format!("tensor {name} is {}x{}, expected {r}x{c}", t.rows(), t.cols()),
                ));
            }
            tensors.push(t);
        }
        if let Some((no, l)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(Error::parse_line(no, format!("unexpected trailing content {l:?}")));
        }

        let mut it = tensors.into_iter();
        let mut affine = || -> Affine {
            let w = it.next().expect("counted");
            let b = Vector::from(it.next().expect("counted").into_vec());
            Affine { w, b }
        };
        Ok(match arch {
            Arch::Flow => {
                let l1 = affine();
                let a = affine();
                let l2 = affine();
                let ode = NeuralOde::new(a.w, a.b, act, steps)
                    .map_err(|e| Error::parse_line(hno, e.to_string()))?;
                AnyNet::Flow(ShallowFlowNet::new(l1, ode, l2)?)
            }
            Arch::Shallow => AnyNet::Sigma(SigmaNet::new(vec![affine(), affine()], act)?),
            Arch::TwoHidden => {
                AnyNet::Sigma(SigmaNet::new(vec![affine(), affine(), affine()], act)?)
            }
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_model_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<AnyNet> {
        AnyNet::from_model_text(&std::fs::read_to_string(path)?)
    }

    /// Width of the (first) hidden layer.
    pub fn hidden_dim(&self) -> usize {
        match self {
            AnyNet::Flow(f) => f.ode.dim(),
            AnyNet::Sigma(s) => s.layers[0].out_dim(),
        }
    }

    fn tensor_shapes(&self) -> Vec<(usize, usize)> {
        shapes_for(self.arch(), self.input_dim(), self.hidden_dim(), self.output_dim())
    }
}

fn tensor_names(arch: Arch) -> &'static [&'static str] {
    match arch {
        Arch::Flow => &["A1", "b1", "A", "b", "A2", "b2"],
        Arch::Shallow => &["W1", "b1", "W2", "b2"],
        Arch::TwoHidden => &["W1", "b1", "W2", "b2", "W3", "b3"],
    }
}

fn shapes_for(arch: Arch, m: usize, d: usize, n: usize) -> Vec<(usize, usize)> {
    match arch {
        Arch::Flow | Arch::TwoHidden => vec![(d, m), (1, d), (d, d), (1, d), (n, d), (1, n)],
        Arch::Shallow => vec![(d, m), (1, d), (n, d), (1, n)],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_all_architectures() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let act = ActivationSpec::smoothed_leaky_relu(0.1).unwrap();
        for arch in Arch::ALL {
            let net = AnyNet::init(arch, 2, 3, 2, act, 20, &mut rng).unwrap();
            let back = AnyNet::from_model_text(&net.to_model_text()).unwrap();
            assert_eq!(back, net);
            let x = [0.3, -0.7];
            assert_eq!(back.forward(&x).unwrap(), net.forward(&x).unwrap());
        }
    }

    #[test]
    fn rejects_bad_header_and_shapes() {
        assert!(AnyNet::from_model_text("flownet-v2 flow 1 1 1 20 0.1 leaky-relu\n").is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = AnyNet::init(Arch::Flow, 1, 2, 1, ActivationSpec::leaky_relu(0.1).unwrap(), 20, &mut rng)
            .unwrap();
        let text = net.to_model_text().replacen("A1\n2 1", "A1\n1 2", 1);
        match AnyNet::from_model_text(&text) {
            Err(Error::Parse { .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
