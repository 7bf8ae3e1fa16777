//! Losses, Adam with a cyclic cosine schedule, the training loop and FGSM.

mod data;

pub use data::{
    gen_sine, gen_two_moons, load_csv, load_idx, moon_point, parse_csv, parse_idx_images,
    parse_idx_labels, sine_target, sine_test_set, to_csv, write_csv, Dataset, Split, Targets,
    SINE_TEST_SEED, SINE_TEST_SIZE,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::nets::{AnyNet, Gradients, Network, NormConstraint};

/// Mean of squared errors over all samples and components, with its gradient.
pub fn mse(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    if pred.shape() != target.shape() {
        return Err(Error::dim(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let count = (pred.rows() * pred.cols()).max(1) as f64;
    let diff = pred.sub(target)?;
    let loss = diff.as_slice().iter().map(|v| v * v).sum::<f64>() / count;
    Ok((loss, diff.scale(2.0 / count)))
}

/// Mean cross-entropy of softmax logits, with its gradient.
pub fn cross_entropy_logits(pred: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if pred.rows() != labels.len() {
        return Err(Error::dim(format!(
            "{} logit rows but {} labels",
            pred.rows(),
            labels.len()
        )));
    }
    let b = pred.rows().max(1) as f64;
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= pred.cols() {
            return Err(Error::Precondition(format!(
                "label {label} out of range for {} classes",
                pred.cols()
            )));
        }
        let z = pred.row(r);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - z[label];
        let g = grad.row_mut(r);
        for (k, gk) in g.iter_mut().enumerate() {
            *gk = ((z[k] - max).exp() / sum - f64::from(u8::from(k == label))) / b;
        }
    }
    Ok((total / b, grad))
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = k;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    Mse,
    CrossEntropy,
}

impl Loss {
    /// The natural loss for the dataset's target type.
    pub fn for_data(data: &Dataset) -> Loss {
        match data.targets {
            Targets::Regression(_) => Loss::Mse,
            Targets::Classes { .. } => Loss::CrossEntropy,
        }
    }

    fn eval(&self, pred: &Matrix, data: &Dataset) -> Result<(f64, Matrix)> {
        match (&data.targets, self) {
            (Targets::Regression(t), Loss::Mse) => mse(pred, t),
            (Targets::Classes { labels, .. }, Loss::CrossEntropy) => {
                cross_entropy_logits(pred, labels)
            }
            _ => Err(Error::Precondition("loss does not match the target type".into())),
        }
    }
}

/// Loss of the network on a whole dataset.
pub fn evaluate(net: &impl Network, data: &Dataset, loss: Loss) -> Result<f64> {
    let pred = net.forward_batch(&data.inputs)?;
    Ok(loss.eval(&pred, data)?.0)
}

/// Fraction of samples whose largest logit is the label.
pub fn accuracy(net: &impl Network, data: &Dataset) -> Result<f64> {
    let labels = data
        .labels()
        .ok_or_else(|| Error::Precondition("accuracy needs class labels".into()))?;
    let pred = net.forward_batch(&data.inputs)?;
    Ok(accuracy_of(&pred, labels))
}

fn accuracy_of(pred: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(r, &l)| argmax(pred.row(*r)) == l)
        .count();
    hits as f64 / labels.len() as f64
}

/// Adam moments for one parameter set.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(shapes: &[&[f64]], beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: shapes.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: shapes.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    /// One bias-corrected Adam update.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &Gradients, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, p) in params.into_iter().enumerate() {
            let g = &grads.tensors[k];
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Mini-batch size; `None` trains full batch.
    pub batch: Option<usize>,
    pub lr_max: f64,
    pub lr_min: f64,
    pub cycle_len: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub constraint: Option<NormConstraint>,
    pub freeze_ode: bool,
    /// Test loss is recorded every `eval_every` epochs and at the last epoch; 0 records only the last.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch: None,
            lr_max: 1e-2,
            lr_min: 1e-4,
            cycle_len: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            constraint: None,
            freeze_ode: false,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min <= self.lr_max) || self.cycle_len == 0 {
            return Err(Error::Precondition(format!(
                "need lr_min <= lr_max and cycle_len >= 1, got {} / {} / {}",
                self.lr_min, self.lr_max, self.cycle_len
            )));
        }
        if self.batch == Some(0) {
            return Err(Error::Precondition("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·(e mod L)/L))`.
pub fn cosine_cyclic_lr(epoch: usize, cfg: &TrainConfig) -> f64 {
    let l = cfg.cycle_len.max(1);
    let phase = (epoch % l) as f64 / l as f64;
    cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (std::f64::consts::PI * phase).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub lr: f64,
    /// Mean loss over the epoch's mini-batches, before each update.
    pub train_loss: f64,
    /// `NaN` when not evaluated at this epoch or when no test set was given.
    pub test_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct History {
    pub initial_train_loss: f64,
    pub initial_test_loss: f64,
    pub epochs: Vec<EpochRecord>,
}

impl History {
    /// `epoch,lr,train_loss,test_loss`, with the untrained state as epoch 0.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,test_loss\n");
        out.push_str(&format!(
            "0,,{:e},{:e}\n",
            self.initial_train_loss, self.initial_test_loss
        ));
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{:e},{:e},{:e}\n",
                r.epoch, r.lr, r.train_loss, r.test_loss
            ));
        }
        out
    }

    pub fn final_test_loss(&self) -> f64 {
        self.epochs
            .last()
            .map_or(self.initial_test_loss, |r| r.test_loss)
    }

    pub fn best_test_loss(&self) -> f64 {
        self.epochs
            .iter()
            .map(|r| r.test_loss)
            .filter(|v| !v.is_nan())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Trains in place with Adam and the cyclic cosine schedule.
///
/// When constrained, `A1` and `A2` are projected to their target norms before
/// training and after every step. With `freeze_ode` the ODE parameters keep
/// their values. Deterministic given the configuration.
pub fn train(
    net: &mut AnyNet,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<History> {
    cfg.validate()?;
    let loss = Loss::for_data(train_set);
    if train_set.input_dim() != net.input_dim() || train_set.output_dim() != net.output_dim() {
        return Err(Error::dim(format!(
            "dataset is {} -> {} but the network is {} -> {}",
            train_set.input_dim(),
            train_set.output_dim(),
            net.input_dim(),
            net.output_dim()
        )));
    }
    if (cfg.constraint.is_some() || cfg.freeze_ode) && net.as_flow().is_none() {
        return Err(Error::Precondition(
            "norm constraints and frozen ODEs need a flow network".into(),
        ));
    }
    if let (Some(c), Some(f)) = (cfg.constraint.as_ref(), net.as_flow_mut()) {
        f.project_norms(c)?;
    }

    let test_loss = |net: &AnyNet| -> Result<f64> {
        match test_set {
            Some(t) => evaluate(net, t, loss),
            None => Ok(f64::NAN),
        }
    };
    let initial_train_loss = evaluate(net, train_set, loss)?;
    let initial_test_loss = test_loss(net)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&net.params(), cfg.beta1, cfg.beta2, cfg.eps);
    let n = train_set.len();
    let bs = cfg.batch.unwrap_or(n).min(n).max(1);
    let full = bs >= n;
    let mut order: Vec<usize> = (0..n).collect();
    let mut records = Vec::with_capacity(cfg.epochs);

    for e in 0..cfg.epochs {
        let lr = cosine_cyclic_lr(e, cfg);
        if !full {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(bs) {
            let owned;
            let batch = if full {
                train_set
            } else {
                owned = train_set.subset(chunk);
                &owned
            };
            let (pred, tape) = net.forward_tape(&batch.inputs)?;
            let (value, upstream) = loss.eval(&pred, batch)?;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch: e + 1,
                    loss: value,
                });
            }
            let (mut grads, _) = net.backward(&tape, &upstream)?;
            if cfg.freeze_ode {
                // A and b of the flow net are tensors 2 and 3
                grads.tensors[2].iter_mut().for_each(|g| *g = 0.0);
                grads.tensors[3].iter_mut().for_each(|g| *g = 0.0);
            }
            // zero gradients from the start keep the Adam moments, hence the update, at zero
            adam.step(net.params_mut(), &grads, lr);
            if let (Some(c), Some(f)) = (cfg.constraint.as_ref(), net.as_flow_mut()) {
                f.project_norms(c)?;
            }
            total += value;
            batches += 1;
        }
        let last = e + 1 == cfg.epochs;
        let due = last || (cfg.eval_every > 0 && (e + 1) % cfg.eval_every == 0);
        let test = if due { test_loss(net)? } else { f64::NAN };
        if due && test_set.is_some() && !test.is_finite() {
            return Err(Error::Divergence {
                epoch: e + 1,
                loss: test,
            });
        }
        records.push(EpochRecord {
            epoch: e + 1,
            lr,
            train_loss: total / batches as f64,
            test_loss: test,
        });
    }
    Ok(History {
        initial_train_loss,
        initial_test_loss,
        epochs: records,
    })
}

/// `sign` with `sign(0) = 0`.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Fast gradient sign attack on a batch: `x + η·sign(∇ₓ loss)` row by row.
///
/// Each row is perturbed along the gradient of its own loss term; the batch
/// mean only rescales those gradients by a positive factor.
pub fn fgsm_batch(net: &impl Network, data: &Dataset, eta: f64) -> Result<Matrix> {
    if !(eta >= 0.0) {
        return Err(Error::Precondition(format!("eta must be non-negative, got {eta}")));
    }
    let loss = Loss::for_data(data);
    let (pred, tape) = net.forward_tape(&data.inputs)?;
    let (_, upstream) = loss.eval(&pred, data)?;
    let (_, gx) = net.backward(&tape, &upstream)?;
    let mut adv = data.inputs.clone();
    for (x, g) in adv.as_mut_slice().iter_mut().zip(gx.as_slice()) {
        *x += eta * sign(*g);
    }
    Ok(adv)
}

/// FGSM for one labelled sample.
pub fn fgsm(net: &impl Network, x: &[f64], label: usize, eta: f64) -> Result<Vector> {
    let data = Dataset::new(
        Matrix::new(1, x.len(), x.to_vec())?,
        Targets::Classes {
            labels: vec![label],
            classes: net.output_dim(),
        },
        Split::All,
    )?;
    Ok(Vector::from(fgsm_batch(net, &data, eta)?.into_vec()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackReport {
    pub etas: Vec<f64>,
    pub accuracy: Vec<f64>,
}

impl AttackReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("eta,accuracy\n");
        for (e, a) in self.etas.iter().zip(&self.accuracy) {
            out.push_str(&format!("{e},{a}\n"));
        }
        out
    }
}

/// Default attack magnitudes `0, 0.02, …, 0.12`.
pub fn default_etas() -> Vec<f64> {
    (0..=6).map(|k| k as f64 * 0.02).collect()
}

/// Accuracy on FGSM-perturbed inputs for each `η`.
pub fn attack_curve(net: &impl Network, data: &Dataset, etas: &[f64]) -> Result<AttackReport> {
    let labels = data
        .labels()
        .ok_or_else(|| Error::Precondition("attack needs class labels".into()))?;
    let mut acc = Vec::with_capacity(etas.len());
    for &eta in etas {
        let pred = if eta == 0.0 {
            net.forward_batch(&data.inputs)?
        } else {
            net.forward_batch(&fgsm_batch(net, data, eta)?)?
        };
        acc.push(accuracy_of(&pred, labels));
    }
    Ok(AttackReport {
        etas: etas.to_vec(),
        accuracy: acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{ActivationSpec, NeuralOde};
    use crate::nets::{Affine, Arch, ShallowFlowNet};

    fn leaky() -> ActivationSpec {
        ActivationSpec::leaky_relu(0.1).unwrap()
    }

    #[test]
    fn loss_examples() {
        let v = Matrix::from_rows(&[[0.3, -2.0]]).unwrap();
        assert_eq!(mse(&v, &v).unwrap().0, 0.0);
        let (l, _) = mse(&Matrix::from_rows(&[[1.0, 1.0]]).unwrap(), &Matrix::zeros(1, 2)).unwrap();
        assert_eq!(l, 1.0);
        for label in 0..2 {
            let (l, _) = cross_entropy_logits(&Matrix::zeros(1, 2), &[label]).unwrap();
            assert!((l - 2f64.ln()).abs() < 1e-15);
        }
        assert!(cross_entropy_logits(&Matrix::zeros(1, 2), &[2]).is_err());
        let (big, _) = cross_entropy_logits(&Matrix::from_rows(&[[1000.0, 0.0]]).unwrap(), &[1]).unwrap();
        assert!((big - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(cosine_cyclic_lr(0, &cfg), cfg.lr_max);
        assert_eq!(cosine_cyclic_lr(300, &cfg), cfg.lr_max);
        assert!((cosine_cyclic_lr(50, &cfg) - 0.5 * (cfg.lr_max + cfg.lr_min)).abs() < 1e-15);
    }

    #[test]
    fn adam_examples() {
        let mut w = vec![1.0];
        let mut adam = Adam::new(&[&w], 0.9, 0.999, 1e-8);
        let zero = Gradients { tensors: vec![vec![0.0]] };
        adam.step(vec![&mut w], &zero, 0.1);
        assert_eq!(w, vec![1.0]);
        let mut adam = Adam::new(&[&w], 0.9, 0.999, 1e-8);
        for _ in 0..500 {
            let g = Gradients { tensors: vec![vec![2.0 * w[0]]] };
            adam.step(vec![&mut w], &g, 0.1);
        }
        assert!(w[0].abs() < 1e-3, "{}", w[0]);
    }

    #[test]
    fn zero_epochs_leaves_net_unchanged_and_runs_are_deterministic() {
        let data = gen_sine(20, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = AnyNet::init(Arch::Flow, 1, 4, 1, leaky(), 20, &mut rng).unwrap();
        let mut a = net.clone();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        train(&mut a, &data, None, &cfg).unwrap();
        assert_eq!(a, net);
        let cfg = TrainConfig {
            epochs: 5,
            batch: Some(7),
            ..TrainConfig::default()
        };
        let mut b = net.clone();
        let mut c = net.clone();
        let hb = train(&mut b, &data, Some(&data), &cfg).unwrap();
        let hc = train(&mut c, &data, Some(&data), &cfg).unwrap();
        assert_eq!(hb.to_csv(), hc.to_csv());
        assert_eq!(b, c);
    }

    #[test]
    fn frozen_ode_keeps_its_parameters() {
        let data = gen_sine(20, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = AnyNet::init(Arch::Flow, 1, 3, 1, leaky(), 20, &mut rng).unwrap();
        let before = net.as_flow().unwrap().ode.clone();
        let cfg = TrainConfig {
            epochs: 3,
            freeze_ode: true,
            constraint: Some(NormConstraint::new(2.0, 1.0).unwrap()),
            ..TrainConfig::default()
        };
        train(&mut net, &data, None, &cfg).unwrap();
        let f = net.as_flow().unwrap();
        assert_eq!(f.ode, before);
        assert!((crate::linalg::spectral_norm(f.a1()) - 2.0).abs() < 1e-10);
    }

    #[test]
    fn fgsm_on_linear_classifier() {
        // logits (0, x): the loss of label 0 increases with x
        let l1 = Affine::new(Matrix::identity(1), Vector::zeros(1)).unwrap();
        let l2 = Affine::new(Matrix::from_rows(&[[0.0], [1.0]]).unwrap(), Vector::zeros(2)).unwrap();
        let net = ShallowFlowNet::new(l1, NeuralOde::zero_field(1, leaky()), l2).unwrap();
        let adv = fgsm(&net, &[0.3], 0, 0.05).unwrap();
        assert!((adv[0] - 0.35).abs() < 1e-15);
        assert_eq!(fgsm(&net, &[0.3], 0, 0.0).unwrap()[0], 0.3);
    }
}
