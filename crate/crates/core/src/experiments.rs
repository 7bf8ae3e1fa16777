//! Reproducible desk-scale experiments driven by flat `key = value` configs.
//!
//! Every CSV ends with `# config-hash=<hex>`, the SHA-256 of the resolved
//! configuration text, and the resolved text is written to `config.txt` in the
//! output directory. Runs are single-threaded and seeded, so a config always
//! produces the same bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::bounds::{evaluate_bounds, region_map, BoundReport, CompactGrid, FlowMode, TimeSampling};
use crate::error::{Error, Result};
use crate::flow::{ActivationKind, ActivationSpec, NeuralOde};
use crate::linalg::{Matrix, Vector};
use crate::nets::{Affine, AnyNet, Arch, NormConstraint, ShallowFlowNet};
use crate::spectral::{delta_star, stabilize, OmegaBox};
use crate::training::{
    accuracy, attack_curve, evaluate, gen_sine, gen_two_moons, load_idx, sine_test_set, train,
    AttackReport, Dataset, Loss, TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExperimentId {
    Efficiency,
    Example1,
    Example2,
    MnistDesk,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 4] = [
        ExperimentId::Efficiency,
        ExperimentId::Example1,
        ExperimentId::Example2,
        ExperimentId::MnistDesk,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ExperimentId::Efficiency => "efficiency",
            ExperimentId::Example1 => "example1",
            ExperimentId::Example2 => "example2",
            ExperimentId::MnistDesk => "mnist-desk",
        }
    }

    fn defaults(&self) -> &'static [(&'static str, &'static str)] {
        match self {
            ExperimentId::Efficiency => &[
                ("seeds", "0"),
                ("n_values", "10,50,100,500,1000"),
                ("d_values", "5,10,50,100"),
                ("archs", "shallow,flow,two-hidden"),
                ("activation", "leaky-relu"),
                ("alpha", "0.1"),
                ("steps", "20"),
                ("epochs", "1000"),
                ("batch", "full"),
                ("lr_max", "0.01"),
                ("lr_min", "0.0001"),
                ("cycle_len", "100"),
            ],
            ExperimentId::Example1 => &[
                ("seeds", "0,1,2,3,4,5,6,7,8,9"),
                ("laws", "uniform,normal"),
                ("offsets", "0.01,0.02,0.03,0.04,0.05,0.06,0.07,0.08,0.09"),
                ("alpha", "0.1"),
                ("grid", "box=-1,1,-1,1;h=0.05"),
                ("tbar", "0.3"),
                ("tstep", "0.05"),
                ("euler_step", "0.05"),
                ("check_bounds", "false"),
            ],
            ExperimentId::Example2 => &[
                ("seeds", "0"),
                ("retries", "5"),
                ("n_points", "1000"),
                ("noise", "0.1"),
                ("test_fraction", "0.2"),
                ("d", "4"),
                ("alpha", "0.1"),
                ("steps", "20"),
                ("epochs", "3000"),
                ("lr_max", "0.01"),
                ("lr_min", "0.0001"),
                ("cycle_len", "100"),
                ("near_offsets", "0.006,0.004,0.002"),
                ("far_offsets", "3,2,1"),
                ("tbar", "0.3"),
                ("tstep", "0.05"),
                ("euler_step", "0.05"),
                ("etas", "0,0.02,0.04,0.06,0.08,0.1,0.12"),
            ],
            ExperimentId::MnistDesk => &[
                ("seeds", "0"),
                ("data_dir", "data/mnist"),
                ("train_size", "2000"),
                ("test_size", "1000"),
                ("d", "64"),
                ("alpha", "0.1"),
                ("steps", "20"),
                ("c1", "1"),
                ("epochs", "200"),
                ("retrain_epochs", "50"),
                ("batch", "100"),
                ("lr_max", "0.01"),
                ("lr_min", "0.0001"),
                ("cycle_len", "100"),
                ("offsets", "2,1,0"),
                ("etas", "0,0.02,0.04,0.06,0.08,0.1,0.12"),
            ],
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ExperimentId::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Precondition(format!("unknown experiment {s:?}")))
    }
}

/// Experiment id, output directory and overrides of the per-experiment defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub id: ExperimentId,
    pub out_dir: Option<PathBuf>,
    pub overrides: BTreeMap<String, String>,
}

impl ExperimentConfig {
    pub fn new(id: ExperimentId) -> Self {
        Self {
            id,
            out_dir: None,
            overrides: BTreeMap::new(),
        }
    }

    /// Adds an override; the key must be one of the experiment's settings.
    pub fn set(mut self, key: &str, value: impl ToString) -> Result<Self> {
        if !self.id.defaults().iter().any(|(k, _)| *k == key) {
            return Err(Error::Precondition(format!(
                "{key:?} is not a setting of experiment {}",
                self.id
            )));
        }
        self.overrides.insert(key.to_string(), value.to_string());
        Ok(self)
    }

    /// Parses `key = value` lines; `#` starts a comment. `experiment` is
    /// required and `out_dir` is optional.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse_line(i as u64 + 1, format!("expected key = value, got {raw:?}")))?;
            pairs.push((i as u64 + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let id = pairs
            .iter()
            .find(|(_, k, _)| k == "experiment")
            .ok_or_else(|| Error::parse_line(1, "missing experiment = <id>"))?;
        let mut cfg = ExperimentConfig::new(id.2.parse().map_err(|e: Error| Error::parse_line(id.0, e.to_string()))?);
        for (line, k, v) in pairs {
            match k.as_str() {
                "experiment" => {}
                "out_dir" => cfg.out_dir = Some(PathBuf::from(v)),
                _ => cfg = cfg.set(&k, v).map_err(|e| Error::parse_line(line, e.to_string()))?,
            }
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Defaults overlaid with overrides.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        let mut out: BTreeMap<String, String> = self
            .id
            .defaults()
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        out.extend(self.overrides.clone());
        out
    }

    /// Canonical text of every setting; the output directory is excluded.
    pub fn to_text(&self) -> String {
        let mut out = format!("experiment = {}\n", self.id);
        for (k, v) in self.resolved() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Hex SHA-256 of [`Self::to_text`].
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn raw(&self, key: &str) -> Result<String> {
        self.resolved()
            .remove(key)
            .ok_or_else(|| Error::Precondition(format!("missing setting {key:?}")))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key)?;
        v.parse()
            .map_err(|_| Error::Precondition(format!("bad value {v:?} for {key}")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self.raw(key)?;
        let out: Vec<T> = v
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Precondition(format!("bad entry {s:?} in {key}")))
            })
            .collect::<Result<_>>()?;
        if out.is_empty() {
            return Err(Error::Precondition(format!("{key} must not be empty")));
        }
        Ok(out)
    }

    pub fn seeds(&self) -> Result<Vec<u64>> {
        self.list("seeds")
    }

    fn batch(&self) -> Result<Option<usize>> {
        match self.raw("batch")?.as_str() {
            "full" => Ok(None),
            _ => self.get("batch").map(Some),
        }
    }

    fn train_config(&self, epochs_key: &str, seed: u64) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.get(epochs_key)?,
            batch: if self.id.defaults().iter().any(|(k, _)| *k == "batch") {
                self.batch()?
            } else {
                None
            },
            lr_max: self.get("lr_max")?,
            lr_min: self.get("lr_min")?,
            cycle_len: self.get("cycle_len")?,
            seed,
            eval_every: 0,
            ..TrainConfig::default()
        })
    }

    fn sampling(&self) -> Result<TimeSampling> {
        let h: f64 = self.get("euler_step")?;
        if !(h > 0.0 && h <= 1.0) {
            return Err(Error::Precondition(format!("euler_step must lie in (0, 1], got {h}")));
        }
        Ok(TimeSampling {
            mode: FlowMode::Euler((1.0 / h).round() as usize),
            tbar: self.get("tbar")?,
            step: Some(self.get("tstep")?),
        })
    }

    fn out_path(&self, name: &str) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| d.join(name))
    }

    /// Creates the output directory and writes `config.txt`.
    fn prepare_output(&self) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("config.txt"), self.to_text())?;
        }
        Ok(())
    }

    /// Appends the hash line and writes `name` when an output directory is set.
    fn emit(&self, name: &str, body: String) -> Result<String> {
        let text = format!("{body}# config-hash={}\n", self.hash());
        if let Some(p) = self.out_path(name) {
            std::fs::write(p, &text)?;
        }
        Ok(text)
    }
}

fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:e}")
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

// ---------------------------------------------------------------- efficiency

#[derive(Debug, Clone, PartialEq)]
pub struct EfficiencyRow {
    pub arch: Arch,
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    /// NaN when training diverged.
    pub test_mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EfficiencyOutput {
    pub rows: Vec<EfficiencyRow>,
    /// Empirical variance of the targets on the fixed test set.
    pub target_variance: f64,
    pub csv: String,
}

/// Trains every architecture on a shared sine training set per `(N, d, seed)`.
pub fn experiment_efficiency(cfg: &ExperimentConfig) -> Result<EfficiencyOutput> {
    expect_id(cfg, ExperimentId::Efficiency)?;
    let seeds = cfg.seeds()?;
    let ns: Vec<usize> = cfg.list("n_values")?;
    let ds: Vec<usize> = cfg.list("d_values")?;
    let archs: Vec<Arch> = cfg.list("archs")?;
    let kind: ActivationKind = cfg.get("activation")?;
    let act = ActivationSpec::new(kind, cfg.get("alpha")?)?;
    let steps: usize = cfg.get("steps")?;
    cfg.prepare_output()?;

    let test = sine_test_set();
    let target_variance = test.target_variance().expect("regression targets");
    let mut rows = Vec::new();
    for &n in &ns {
        for &d in &ds {
            for &seed in &seeds {
                let data_seed = seed.wrapping_mul(1_000_003) ^ ((n as u64) << 32 | d as u64);
                let train_set = gen_sine(n, data_seed);
                for &arch in &archs {
                    let mut rng = ChaCha8Rng::seed_from_u64(data_seed ^ arch_salt(arch));
                    let mut net = AnyNet::init(arch, 1, d, 1, act, steps, &mut rng)?;
                    let tc = cfg.train_config("epochs", seed)?;
                    let test_mse = match train(&mut net, &train_set, None, &tc) {
                        Ok(_) => evaluate(&net, &test, Loss::Mse).unwrap_or(f64::NAN),
                        Err(Error::Divergence { .. }) | Err(Error::Overflow { .. }) => f64::NAN,
                        Err(e) => return Err(e),
                    };
                    rows.push(EfficiencyRow {
                        arch,
                        n,
                        d,
                        seed,
                        test_mse,
                    });
                }
            }
        }
    }
    let mut body = String::from("arch,N,d,seed,test_mse\n");
    for r in &rows {
        body.push_str(&format!("{},{},{},{},{}\n", r.arch, r.n, r.d, r.seed, fmt_num(r.test_mse)));
    }
    let csv = cfg.emit("efficiency.csv", body)?;
    Ok(EfficiencyOutput {
        rows,
        target_variance,
        csv,
    })
}

fn arch_salt(arch: Arch) -> u64 {
    match arch {
        Arch::Shallow => 0x51,
        Arch::Flow => 0xf1,
        Arch::TwoHidden => 0x72,
    }
}

fn expect_id(cfg: &ExperimentConfig, id: ExperimentId) -> Result<()> {
    if cfg.id != id {
        return Err(Error::Precondition(format!(
            "config is for experiment {}, not {id}",
            cfg.id
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------- example 1

/// Distribution of the entries of `A` and `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingLaw {
    /// Uniform on `[0, 1)`.
    Uniform,
    /// Standard normal.
    Normal,
}

impl SamplingLaw {
    pub fn name(&self) -> &'static str {
        match self {
            SamplingLaw::Uniform => "uniform",
            SamplingLaw::Normal => "normal",
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match self {
            SamplingLaw::Uniform => rng.gen::<f64>(),
            SamplingLaw::Normal => rng.sample(StandardNormal),
        }
    }
}

impl fmt::Display for SamplingLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SamplingLaw {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(SamplingLaw::Uniform),
            "normal" => Ok(SamplingLaw::Normal),
            _ => Err(Error::Precondition(format!("unknown sampling law {s:?}"))),
        }
    }
}

/// `φ = ϕ` with `A1 = I`, `b1 = 0`, `A2 = I`, `b2 = 0` and random `A`, `b`.
pub fn example1_net(law: SamplingLaw, seed: u64, activation: ActivationSpec, steps: usize) -> Result<ShallowFlowNet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match law {
        SamplingLaw::Uniform => 1,
        SamplingLaw::Normal => 2,
    });
    let a: Vec<f64> = (0..4).map(|_| law.sample(&mut rng)).collect();
    let b: Vec<f64> = (0..2).map(|_| law.sample(&mut rng)).collect();
    ShallowFlowNet::new(
        Affine::identity(2),
        NeuralOde::new(Matrix::new(2, 2, a)?, Vector::from(b), activation, steps)?,
        Affine::identity(2),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example1Cell {
    pub law: SamplingLaw,
    pub seed: u64,
    pub offset: f64,
    pub delta_star: f64,
    pub delta_target: f64,
    /// `None` when stabilization failed.
    pub delta_achieved: Option<f64>,
    pub fraction_green: Option<f64>,
    pub bounds: Option<BoundReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example1Summary {
    pub law: SamplingLaw,
    pub offset: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example1Output {
    pub cells: Vec<Example1Cell>,
    pub summary: Vec<Example1Summary>,
    pub csv: String,
    pub summary_csv: String,
}

/// Region maps of random two-dimensional flows stabilized to `δ⋆ − offset`.
/// With `check_bounds` every cell also evaluates both bounds on the grid.
pub fn experiment_example1(cfg: &ExperimentConfig) -> Result<Example1Output> {
    expect_id(cfg, ExperimentId::Example1)?;
    let seeds = cfg.seeds()?;
    let laws: Vec<SamplingLaw> = cfg.list("laws")?;
    let offsets: Vec<f64> = cfg.list("offsets")?;
    let alpha: f64 = cfg.get("alpha")?;
    let grid = CompactGrid::parse(&cfg.raw("grid")?)?;
    let sampling = cfg.sampling()?;
    let check: bool = cfg.get("check_bounds")?;
    let act = ActivationSpec::leaky_relu(alpha)?;
    let omega = OmegaBox::new(2, alpha)?;
    cfg.prepare_output()?;

    let mut cells = Vec::new();
    for &law in &laws {
        for &seed in &seeds {
            let net = example1_net(law, seed, act, sampling.mode.steps())?;
            let dstar = delta_star(net.ode.a(), &omega)?.value;
            for &offset in &offsets {
                let target = dstar - offset;
                let mut cell = Example1Cell {
                    law,
                    seed,
                    offset,
                    delta_star: dstar,
                    delta_target: target,
                    delta_achieved: None,
                    fraction_green: None,
                    bounds: None,
                    error: None,
                };
                let run = || -> Result<(f64, f64, Option<BoundReport>)> {
                    let st = stabilize(net.ode.a(), &omega, target)?;
                    let bar = net.stabilized(&st)?;
                    let map = region_map(&net, &bar, &grid, &omega, &sampling)?;
                    let report = if check {
                        Some(evaluate_bounds(None, &net, &bar, &grid, alpha, sampling.tbar)?)
                    } else {
                        None
                    };
                    Ok((st.delta_achieved, map.fraction_green(), report))
                };
                match run() {
                    Ok((achieved, green, report)) => {
                        cell.delta_achieved = Some(achieved);
                        cell.fraction_green = Some(green);
                        cell.bounds = report;
                    }
                    Err(e) => cell.error = Some(e.to_string()),
                }
                cells.push(cell);
            }
        }
    }

    let mut summary = Vec::new();
    for &law in &laws {
        for &offset in &offsets {
            let xs: Vec<f64> = cells
                .iter()
                .filter(|c| c.law == law && c.offset == offset)
                .filter_map(|c| c.fraction_green)
                .collect();
            let (mean, std) = mean_std(&xs);
            summary.push(Example1Summary {
                law,
                offset,
                mean,
                std,
            });
        }
    }

    let mut body = String::from("law,seed,delta_offset,fraction_green\n");
    for c in &cells {
        body.push_str(&format!(
            "{},{},{},{}\n",
            c.law,
            c.seed,
            c.offset,
            fmt_num(c.fraction_green.unwrap_or(f64::NAN))
        ));
    }
    let csv = cfg.emit("example1.csv", body)?;
    let mut body = String::from("law,delta_offset,mean,std\n");
    for s in &summary {
        body.push_str(&format!("{},{},{},{}\n", s.law, s.offset, fmt_num(s.mean), fmt_num(s.std)));
    }
    let summary_csv = cfg.emit("example1_summary.csv", body)?;
    if check {
        let mut body = String::from(
            "law,seed,delta_offset,upper_value,empirical_sup,lower_value,lower_checked,upper_violations,lower_violations\n",
        );
        for c in &cells {
            if let Some(r) = &c.bounds {
                body.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    c.law,
                    c.seed,
                    c.offset,
                    fmt_num(r.upper_value),
                    fmt_num(r.empirical_sup),
                    fmt_num(r.lower_value),
                    r.lower_checked,
                    r.upper_violations.len(),
                    r.lower_violations.len()
                ));
            }
        }
        cfg.emit("example1_bounds.csv", body)?;
    }
    Ok(Example1Output {
        cells,
        summary,
        csv,
        summary_csv,
    })
}

// ---------------------------------------------------------------- example 2

#[derive(Debug, Clone, PartialEq)]
pub struct Example2Row {
    pub offset: f64,
    pub delta: f64,
    /// Belongs to the far set of offsets.
    pub far: bool,
    pub fraction_green: f64,
    /// Training-set accuracy of the stabilized net.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example2Output {
    pub seed: u64,
    pub attempts: usize,
    pub net: ShallowFlowNet,
    pub train_set: Dataset,
    pub test_set: Dataset,
    pub clean_accuracy: f64,
    pub delta_star: f64,
    pub rows: Vec<Example2Row>,
    /// FGSM curve of the unperturbed net on the held-out split.
    pub attack: AttackReport,
    pub csv: String,
}

/// Trains the `2 → 4 → 2` flow net on Two Moons until it separates the
/// training split, then stabilizes it at near and far targets.
pub fn experiment_example2(cfg: &ExperimentConfig) -> Result<Example2Output> {
    expect_id(cfg, ExperimentId::Example2)?;
    let first_seed = *cfg.seeds()?.first().expect("non-empty");
    let retries: usize = cfg.get("retries")?;
    let alpha: f64 = cfg.get("alpha")?;
    let d: usize = cfg.get("d")?;
    let steps: usize = cfg.get("steps")?;
    let near: Vec<f64> = cfg.list("near_offsets")?;
    let far: Vec<f64> = cfg.list("far_offsets")?;
    let etas: Vec<f64> = cfg.list("etas")?;
    let sampling = cfg.sampling()?;
    let act = ActivationSpec::leaky_relu(alpha)?;
    let omega = OmegaBox::new(d, alpha)?;
    cfg.prepare_output()?;

    let mut found = None;
    for attempt in 0..retries.max(1) {
        let seed = first_seed + attempt as u64;
        let data = gen_two_moons(cfg.get("n_points")?, cfg.get("noise")?, seed);
        let (train_set, test_set) = data.split(cfg.get("test_fraction")?, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = AnyNet::init(Arch::Flow, 2, d, 2, act, steps, &mut rng)?;
        match train(&mut net, &train_set, None, &cfg.train_config("epochs", seed)?) {
            Ok(_) => {}
            Err(Error::Divergence { .. }) | Err(Error::Overflow { .. }) => continue,
            Err(e) => return Err(e),
        }
        if accuracy(&net, &train_set)? == 1.0 {
            found = Some((seed, attempt + 1, net, train_set, test_set));
            break;
        }
    }
    let (seed, attempts, net, train_set, test_set) = found.ok_or_else(|| {
        Error::Convergence(format!(
            "no seed in {first_seed}..{} reached 100% training accuracy",
            first_seed + retries.max(1) as u64
        ))
    })?;
    let AnyNet::Flow(flow) = net else {
        unreachable!("initialized as a flow net")
    };
    let clean_accuracy = accuracy(&flow, &train_set)?;
    let dstar = delta_star(flow.ode.a(), &omega)?.value;
    let points = CompactGrid::from_points(train_set.inputs.clone())?;

    let mut rows = Vec::new();
    for (offsets, is_far) in [(&near, false), (&far, true)] {
        for &offset in offsets {
            let st = stabilize(flow.ode.a(), &omega, dstar - offset)?;
            let bar = flow.stabilized(&st)?;
            let map = region_map(&flow, &bar, &points, &omega, &sampling)?;
            rows.push(Example2Row {
                offset,
                delta: st.delta_target,
                far: is_far,
                fraction_green: map.fraction_green(),
                accuracy: accuracy(&bar, &train_set)?,
            });
        }
    }
    let attack = attack_curve(&flow, &test_set, &etas)?;

    let mut body = String::from("delta,fraction_green,accuracy\n");
    for r in &rows {
        body.push_str(&format!("{:e},{},{}\n", r.delta, fmt_num(r.fraction_green), fmt_num(r.accuracy)));
    }
    let csv = cfg.emit("example2.csv", body)?;
    cfg.emit("example2_attack.csv", attack.to_csv())?;
    if let Some(p) = cfg.out_path("example2_model.txt") {
        AnyNet::Flow(flow.clone()).save(p)?;
    }
    Ok(Example2Output {
        seed,
        attempts,
        net: flow,
        train_set,
        test_set,
        clean_accuracy,
        delta_star: dstar,
        rows,
        attack,
        csv,
    })
}

// ---------------------------------------------------------------- MNIST

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

#[derive(Debug, Clone, PartialEq)]
pub struct MnistRow {
    pub offset: f64,
    pub delta: f64,
    pub accuracy: f64,
    /// Accuracy after retraining the affine layers with the stabilized flow frozen.
    pub retrained_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MnistOutput {
    pub clean_accuracy: f64,
    pub delta_star: f64,
    pub attack: AttackReport,
    pub rows: Vec<MnistRow>,
}

/// Desk-scale MNIST run: constrained flow net, attack curve and stabilized variants.
pub fn experiment_mnist_desk(cfg: &ExperimentConfig) -> Result<MnistOutput> {
    expect_id(cfg, ExperimentId::MnistDesk)?;
    let dir = PathBuf::from(cfg.raw("data_dir")?);
    let missing: Vec<&str> = MNIST_FILES
        .iter()
        .copied()
        .filter(|f| !dir.join(f).is_file())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Precondition(format!(
            "MNIST files missing in {}: {}. Download the four IDX files (e.g. from \
             https://storage.googleapis.com/cvdf-datasets/mnist/), gunzip them into that \
             directory, or set data_dir = <path>",
            dir.display(),
            missing.join(", ")
        )));
    }
    let seed = *cfg.seeds()?.first().expect("non-empty");
    let alpha: f64 = cfg.get("alpha")?;
    let d: usize = cfg.get("d")?;
    let act = ActivationSpec::leaky_relu(alpha)?;
    let omega = OmegaBox::new(d, alpha)?;
    let offsets: Vec<f64> = cfg.list("offsets")?;
    let etas: Vec<f64> = cfg.list("etas")?;
    cfg.prepare_output()?;

    let train_full = load_idx(dir.join(MNIST_FILES[0]), dir.join(MNIST_FILES[1]))?;
    let test_full = load_idx(dir.join(MNIST_FILES[2]), dir.join(MNIST_FILES[3]))?;
    let take = |data: &Dataset, n: usize| {
        let idx: Vec<usize> = (0..n.min(data.len())).collect();
        data.subset(&idx)
    };
    let train_set = take(&train_full, cfg.get("train_size")?);
    let test_set = take(&test_full, cfg.get("test_size")?);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = AnyNet::init(Arch::Flow, train_set.input_dim(), d, 10, act, cfg.get("steps")?, &mut rng)?;
    let mut tc = cfg.train_config("epochs", seed)?;
    tc.constraint = Some(NormConstraint::new(cfg.get("c1")?, 1.0)?);
    train(&mut net, &train_set, None, &tc)?;
    let AnyNet::Flow(flow) = net else {
        unreachable!("initialized as a flow net")
    };
    let clean_accuracy = accuracy(&flow, &test_set)?;
    let dstar = delta_star(flow.ode.a(), &omega)?.value;
    let attack = attack_curve(&flow, &test_set, &etas)?;

    let mut rows = Vec::new();
    for &offset in &offsets {
        let bar = if offset == 0.0 {
            flow.clone()
        } else {
            flow.stabilized(&stabilize(flow.ode.a(), &omega, dstar - offset)?)?
        };
        let acc = accuracy(&bar, &test_set)?;
        let mut retrained = AnyNet::Flow(bar);
        let mut rc = cfg.train_config("retrain_epochs", seed)?;
        rc.constraint = tc.constraint;
        rc.freeze_ode = true;
        train(&mut retrained, &train_set, None, &rc)?;
        rows.push(MnistRow {
            offset,
            delta: dstar - offset,
            accuracy: acc,
            retrained_accuracy: accuracy(&retrained, &test_set)?,
        });
    }

    cfg.emit("mnist_attack.csv", attack.to_csv())?;
    let mut body = String::from("delta,accuracy,retrained_accuracy\n");
    for r in &rows {
        body.push_str(&format!("{:e},{},{}\n", r.delta, r.accuracy, r.retrained_accuracy));
    }
    cfg.emit("mnist_stabilized.csv", body)?;
    cfg.emit(
        "mnist_summary.csv",
        format!("delta_star,clean_accuracy\n{dstar:e},{clean_accuracy}\n"),
    )?;
    Ok(MnistOutput {
        clean_accuracy,
        delta_star: dstar,
        attack,
        rows,
    })
}

/// Runs the configured experiment; returns the names of the written files.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let names: &[&str] = match cfg.id {
        ExperimentId::Efficiency => {
            experiment_efficiency(cfg)?;
            &["efficiency.csv"]
        }
        ExperimentId::Example1 => {
            let checked = cfg.get::<bool>("check_bounds")?;
            experiment_example1(cfg)?;
            if checked {
                &["example1.csv", "example1_summary.csv", "example1_bounds.csv"]
            } else {
                &["example1.csv", "example1_summary.csv"]
            }
        }
        ExperimentId::Example2 => {
            experiment_example2(cfg)?;
            &["example2.csv", "example2_attack.csv", "example2_model.txt"]
        }
        ExperimentId::MnistDesk => {
            experiment_mnist_desk(cfg)?;
            &["mnist_attack.csv", "mnist_stabilized.csv", "mnist_summary.csv"]
        }
    };
    Ok(std::iter::once("config.txt")
        .chain(names.iter().copied())
        .map(String::from)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parse_and_hash() {
        let cfg = ExperimentConfig::parse("experiment = example1\n# comment\nseeds = 0, 1\n").unwrap();
        assert_eq!(cfg.seeds().unwrap(), vec![0, 1]);
        let same = ExperimentConfig::new(ExperimentId::Example1).set("seeds", "0, 1").unwrap();
        assert_eq!(cfg.hash(), same.hash());
        assert_eq!(cfg.hash().len(), 64);
        let other = same.clone().set("seeds", "2").unwrap();
        assert_ne!(other.hash(), cfg.hash());
        assert!(ExperimentConfig::parse("experiment = example1\nbogus = 1\n").is_err());
        assert!(ExperimentConfig::parse("seeds = 1\n").is_err());
        let back = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back.resolved(), cfg.resolved());
    }

    #[test]
    fn small_example1_is_deterministic() {
        let cfg = ExperimentConfig::new(ExperimentId::Example1)
            .set("seeds", "0,1")
            .unwrap()
            .set("offsets", "0.01,0.05")
            .unwrap()
            .set("grid", "box=-1,1,-1,1;h=0.5")
            .unwrap();
        let a = experiment_example1(&cfg).unwrap();
        let b = experiment_example1(&cfg).unwrap();
        assert_eq!(a.csv, b.csv);
        assert_eq!(a.cells.len(), 2 * 2 * 2);
        assert_eq!(a.csv.lines().count(), 1 + 8 + 1);
        assert!(a.csv.ends_with(&format!("# config-hash={}\n", cfg.hash())));
        for c in &a.cells {
            let achieved = c.delta_achieved.unwrap();
            assert!((achieved - c.delta_target).abs() <= 1e-6);
        }
    }

    #[test]
    fn mnist_reports_missing_files() {
        let cfg = ExperimentConfig::new(ExperimentId::MnistDesk)
            .set("data_dir", "/nonexistent/mnist")
            .unwrap();
        match experiment_mnist_desk(&cfg) {
            Err(Error::Precondition(msg)) => assert!(msg.contains("Download")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
