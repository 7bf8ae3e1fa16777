//! Command-line front end. Errors print to stderr and map to exit codes:
//! 2 precondition, 3 convergence, 4 bound violation, 5 parse or I/O.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flownet::bounds::{evaluate_bounds, region_map, CompactGrid, FlowMode, TimeSampling};
use flownet::experiments::{run_experiment, ExperimentConfig, ExperimentId};
use flownet::flow::{ActivationKind, ActivationSpec, DEFAULT_EULER_STEPS};
use flownet::linalg::Matrix;
use flownet::nets::{AnyNet, Arch, NormConstraint, ShallowFlowNet};
use flownet::spectral::{delta_prime, delta_star, stabilize, OmegaBox};
use flownet::training::{
    attack_curve, default_etas, gen_sine, gen_two_moons, load_csv, load_idx, sine_test_set, train,
    Dataset, TrainConfig,
};
use flownet::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser, Debug)]
#[command(name = "flownet", version, about = "Shallow flow-map networks: spectra, stabilization, bounds, experiments")]
struct Cli {
    /// Seed for data generation, initialization and shuffling.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory for experiment outputs.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Flat `key = value` experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print δ⋆, δ′ and the maximizing vertex of a matrix.
    Lognorm {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
    },
    /// Minimal-norm Δ with max_D μ₂(D(A + Δ)) = δ.
    Stabilize(StabilizeArgs),
    /// Train a network and save it.
    Train(TrainArgs),
    /// FGSM accuracy curve of a saved classifier.
    Attack {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: String,
        /// Comma-separated attack magnitudes.
        #[arg(long, value_delimiter = ',')]
        etas: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-point η map of a network and its stabilized copy.
    Region {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long, default_value_t = 0.3)]
        tbar: f64,
        #[arg(long, default_value_t = 0.05)]
        tstep: f64,
        /// Euler step of the flows used for η.
        #[arg(long, default_value_t = 0.05)]
        euler_step: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate both approximation bounds; exits 4 on a violation.
    Bounds {
        #[command(flatten)]
        pair: PairArgs,
        /// `self` or `csv:<path>` with columns x1.., y1..
        #[arg(long, default_value = "self")]
        target: String,
        #[arg(long, default_value_t = 0.3)]
        tbar: f64,
    },
    /// Run a desk-scale experiment.
    Experiment {
        /// efficiency | example1 | example2 | mnist-desk
        id: String,
        /// Overrides as key=value.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

#[derive(Args, Debug)]
struct StabilizeArgs {
    /// Matrix A in text format.
    #[arg(long, conflicts_with = "model", required_unless_present = "model")]
    matrix: Option<PathBuf>,
    /// Flow network whose A is stabilized.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, allow_hyphen_values = true)]
    delta: f64,
    /// Destination of Δ.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Destination of the stabilized network (with --model).
    #[arg(long)]
    out_model: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, default_value = "flow")]
    arch: Arch,
    /// sine | moons | csv:<path> | mnist:<dir>
    #[arg(long)]
    dataset: String,
    #[arg(long, default_value_t = 10)]
    d: usize,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    /// Training-set size for generated datasets.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_EULER_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value = "leaky-relu")]
    activation: ActivationKind,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, default_value_t = 1e-2)]
    lr_max: f64,
    #[arg(long, default_value_t = 1e-4)]
    lr_min: f64,
    #[arg(long, default_value_t = 100)]
    cycle_len: usize,
    /// Spectral-norm targets of A1 and A2.
    #[arg(long, num_args = 2, value_names = ["C1", "C2"])]
    constraint: Option<Vec<f64>>,
    /// Keep A and b fixed.
    #[arg(long)]
    freeze_ode: bool,
    /// Start from a saved model instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// History CSV; defaults to `<out>.history.csv`.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PairArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    stabilized: PathBuf,
    /// `box=lo1,hi1,...;h=step`
    #[arg(long, conflicts_with = "points")]
    grid: Option<String>,
    /// CSV whose x columns are the points.
    #[arg(long)]
    points: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Lognorm { matrix, alpha } => {
            let a = Matrix::read(&matrix)?;
            let omega = OmegaBox::new(a.rows(), alpha)?;
            let star = delta_star(&a, &omega)?;
            println!("delta_star = {:e}", star.value);
            println!("delta_prime = {:e}", delta_prime(&a, &omega)?);
            println!("argmax = {}", star.argmax);
            println!("method = {}", star.method);
            Ok(())
        }
        Command::Stabilize(args) => cmd_stabilize(args),
        Command::Train(args) => cmd_train(args, cli.seed),
        Command::Attack {
            model,
            dataset,
            etas,
            out,
        } => {
            let net = AnyNet::load(&model)?;
            let (_, test) = load_dataset(&dataset, cli.seed, None)?;
            let report = attack_curve(&net, &test, &etas.unwrap_or_else(default_etas))?;
            emit(out.as_deref(), &report.to_csv())
        }
        Command::Region {
            pair,
            tbar,
            tstep,
            euler_step,
            out,
        } => {
            let (net, bar, grid) = load_pair(&pair)?;
            if !(euler_step > 0.0 && euler_step <= 1.0) {
                return Err(Error::Precondition(format!("euler step must lie in (0, 1], got {euler_step}")));
            }
            let sampling = TimeSampling {
                mode: FlowMode::Euler((1.0 / euler_step).round() as usize),
                tbar,
                step: Some(tstep),
            };
            let omega = OmegaBox::new(net.ode.dim(), net.ode.activation().alpha())?;
            let map = region_map(&net, &bar, &grid, &omega, &sampling)?;
            emit(out.as_deref(), &map.to_csv())
        }
        Command::Bounds { pair, target, tbar } => {
            let (net, bar) = load_flow_pair(&pair)?;
            let (grid, values) = match target.as_str() {
                "self" => (grid_of(&pair)?, None),
                t => {
                    let path = t.strip_prefix("csv:").ok_or_else(|| {
                        Error::Precondition(format!("target must be self or csv:<path>, got {t:?}"))
                    })?;
                    let data = load_csv(path)?;
                    let values = match &data.targets {
                        flownet::training::Targets::Regression(y) => y.clone(),
                        _ => return Err(Error::Precondition("target CSV needs y columns".into())),
                    };
                    (CompactGrid::from_points(data.inputs.clone())?, Some(values))
                }
            };
            let alpha = net.ode.activation().alpha();
            let report = evaluate_bounds(values.as_ref(), &net, &bar, &grid, alpha, tbar)?;
            println!("{}", report.to_json_line());
            let witness = report
                .upper_violations
                .first()
                .map(|&i| (i, "upper"))
                .or(report.lower_violations.first().map(|&i| (i, "per-point lower")));
            match witness {
                Some((i, kind)) => Err(Error::BoundViolation {
                    point: grid.point(i).to_vec(),
                    detail: format!("{kind} bound violated"),
                }),
                None => Ok(()),
            }
        }
        Command::Experiment { id, overrides } => {
            let id: ExperimentId = id.parse()?;
            let mut cfg = match &cli.config {
                Some(p) => {
                    let c = ExperimentConfig::load(p)?;
                    if c.id != id {
                        return Err(Error::Precondition(format!(
                            "config file is for {}, not {id}",
                            c.id
                        )));
                    }
                    c
                }
                None => ExperimentConfig::new(id),
            };
            for kv in overrides {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::Precondition(format!("expected KEY=VALUE, got {kv:?}")))?;
                cfg = cfg.set(k.trim(), v.trim())?;
            }
            if cli.seed != 0 && !cfg.overrides.contains_key("seeds") {
                cfg = cfg.set("seeds", cli.seed)?;
            }
            if let Some(d) = cli.out_dir {
                cfg.out_dir = Some(d);
            }
            if cfg.out_dir.is_none() {
                cfg.out_dir = Some(PathBuf::from("out").join(id.name()));
            }
            let files = run_experiment(&cfg)?;
            let dir = cfg.out_dir.as_ref().expect("set above");
            for f in files {
                println!("{}", dir.join(f).display());
            }
            Ok(())
        }
    }
}

fn cmd_stabilize(args: StabilizeArgs) -> Result<()> {
    let (a, net) = match (&args.matrix, &args.model) {
        (Some(p), _) => (Matrix::read(p)?, None),
        (None, Some(p)) => {
            let net = flow_net(AnyNet::load(p)?)?;
            (net.ode.a().clone(), Some(net))
        }
        (None, None) => return Err(Error::Precondition("need --matrix or --model".into())),
    };
    let omega = OmegaBox::new(a.rows(), args.alpha)?;
    let result = stabilize(&a, &omega, args.delta)?;
    match &args.out {
        Some(p) => result.delta.write(p)?,
        None => print!("{}", result.delta.to_text()),
    }
    if let Some(p) = &args.out_model {
        let net = net.ok_or_else(|| Error::Precondition("--out-model needs --model".into()))?;
        AnyNet::Flow(net.stabilized(&result)?).save(p)?;
    }
    println!("{}", result.summary_line());
    Ok(())
}

fn cmd_train(args: TrainArgs, seed: u64) -> Result<()> {
    let (train_set, test_set) = load_dataset(&args.dataset, seed, args.n)?;
    let mut net = match &args.init {
        Some(p) => AnyNet::load(p)?,
        None => {
            let act = ActivationSpec::new(args.activation, args.alpha)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            AnyNet::init(
                args.arch,
                train_set.input_dim(),
                args.d,
                train_set.output_dim(),
                act,
                args.steps,
                &mut rng,
            )?
        }
    };
    let constraint = match args.constraint.as_deref() {
        Some([c1, c2]) => Some(NormConstraint::new(*c1, *c2)?),
        _ => None,
    };
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch: args.batch,
        lr_max: args.lr_max,
        lr_min: args.lr_min,
        cycle_len: args.cycle_len,
        seed,
        constraint,
        freeze_ode: args.freeze_ode,
        ..TrainConfig::default()
    };
    let history = train(&mut net, &train_set, Some(&test_set), &cfg)?;
    net.save(&args.out)?;
    let hist_path = args.history.unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".history.csv");
        PathBuf::from(p)
    });
    std::fs::write(&hist_path, history.to_csv())?;
    println!(
        "final_test_loss = {:e}, model = {}, history = {}",
        history.final_test_loss(),
        args.out.display(),
        hist_path.display()
    );
    Ok(())
}

/// Training and evaluation splits of a named dataset.
fn load_dataset(spec: &str, seed: u64, n: Option<usize>) -> Result<(Dataset, Dataset)> {
    if spec == "sine" {
        return Ok((gen_sine(n.unwrap_or(500), seed), sine_test_set()));
    }
    if spec == "moons" {
        return Ok(gen_two_moons(n.unwrap_or(1000), 0.1, seed).split(0.2, seed));
    }
    if let Some(p) = spec.strip_prefix("csv:") {
        let data = load_csv(p)?;
        return Ok((data.clone(), data));
    }
    if let Some(dir) = spec.strip_prefix("mnist:") {
        let dir = Path::new(dir);
        let train = load_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))?;
        let test = load_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))?;
        let train = match n {
            Some(k) => train.subset(&(0..k.min(train.len())).collect::<Vec<_>>()),
            None => train,
        };
        return Ok((train, test));
    }
    Err(Error::Precondition(format!(
        "dataset must be sine, moons, csv:<path> or mnist:<dir>, got {spec:?}"
    )))
}

fn flow_net(net: AnyNet) -> Result<ShallowFlowNet> {
    match net {
        AnyNet::Flow(f) => Ok(f),
        AnyNet::Sigma(_) => Err(Error::Precondition("a flow network is required".into())),
    }
}

fn load_flow_pair(pair: &PairArgs) -> Result<(ShallowFlowNet, ShallowFlowNet)> {
    Ok((
        flow_net(AnyNet::load(&pair.model)?)?,
        flow_net(AnyNet::load(&pair.stabilized)?)?,
    ))
}

fn grid_of(pair: &PairArgs) -> Result<CompactGrid> {
    match (&pair.grid, &pair.points) {
        (_, Some(p)) => CompactGrid::from_points(load_csv(p)?.inputs),
        (Some(g), None) => CompactGrid::parse(g),
        (None, None) => CompactGrid::parse("box=-1,1,-1,1;h=0.05"),
    }
}

fn load_pair(pair: &PairArgs) -> Result<(ShallowFlowNet, ShallowFlowNet, CompactGrid)> {
    let (a, b) = load_flow_pair(pair)?;
    Ok((a, b, grid_of(pair)?))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}
