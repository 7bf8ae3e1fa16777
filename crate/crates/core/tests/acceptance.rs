//! Acceptance criteria, each run at its stated tolerance. One line per
//! criterion is printed; the test fails if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use flownet::experiments::{
    experiment_efficiency, experiment_example1, experiment_example2, Example2Output, ExperimentConfig,
    ExperimentId, SamplingLaw,
};
use flownet::flow::{ActivationSpec, NeuralOde};
use flownet::linalg::{mu2, Matrix, Vector};
use flownet::nets::{Affine, Arch, Network, ShallowFlowNet};
use flownet::spectral::{delta_star, stabilize, OmegaBox};
use flownet::training::accuracy;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn to_na(a: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(a.rows(), a.cols(), a.as_slice())
}

/// `λ_max((M + Mᵀ)/2)` from a dense symmetric eigensolve.
fn oracle_mu2(m: &DMatrix<f64>) -> f64 {
    let s = (m + m.transpose()) * 0.5;
    s.symmetric_eigen().eigenvalues.max()
}

/// `max` over the vertices of `Ω_α` of `μ₂(DA)`, by enumeration.
fn oracle_delta_star(a: &Matrix, alpha: f64) -> f64 {
    let d = a.rows();
    let na = to_na(a);
    (0..1u32 << d)
        .map(|mask| {
            let diag: Vec<f64> = (0..d).map(|i| if mask >> i & 1 == 1 { alpha } else { 1.0 }).collect();
            oracle_mu2(&(DMatrix::from_diagonal(&nalgebra::DVector::from_vec(diag)) * &na))
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

fn normal_matrix(rng: &mut impl Rng, r: usize, c: usize) -> Matrix {
    Matrix::new(r, c, (0..r * c).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn normal_vector(rng: &mut impl Rng, n: usize) -> Vector {
    Vector::from((0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>())
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let a = normal_matrix(&mut rng, 8, 8);
        worst = worst.max((mu2(&a).unwrap() - oracle_mu2(&to_na(&a))).abs());
    }
    outcome(worst <= 1e-10, format!("max |mu2 - oracle| = {worst:.3e}"))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let alpha = 0.1;
    let mut worst = f64::NEG_INFINITY;
    for i in 0..200 {
        let d = 1 + i % 6;
        let a = normal_matrix(&mut rng, d, d);
        let omega = OmegaBox::new(d, alpha).unwrap();
        let vmax = delta_star(&a, &omega).unwrap().value;
        let na = to_na(&a);
        for _ in 0..50 {
            let diag: Vec<f64> = (0..d).map(|_| rng.gen_range(alpha..=1.0)).collect();
            let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(diag)) * &na;
            worst = worst.max(oracle_mu2(&m) - vmax);
        }
    }
    outcome(worst <= 1e-9, format!("max interior excess over vertex max = {worst:.3e}"))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let alpha = 0.1;
    let (mut worst_hit, mut worst_base, mut failures) = (0.0_f64, f64::NEG_INFINITY, 0);
    for i in 0..50 {
        let d = 1 + i % 4;
        let a = normal_matrix(&mut rng, d, d);
        let omega = OmegaBox::new(d, alpha).unwrap();
        let dstar = oracle_delta_star(&a, alpha);
        for k in 1..=9 {
            let target = dstar - 0.01 * k as f64;
            match stabilize(&a, &omega, target) {
                Ok(r) => {
                    let abar = a.add(&r.delta).unwrap();
                    worst_hit = worst_hit.max((oracle_delta_star(&abar, alpha) - target).abs());
                    if target > 0.0 {
                        let base = a.scale(target / dstar - 1.0).frobenius_norm();
                        worst_base = worst_base.max(r.delta.frobenius_norm() - base);
                    }
                }
                Err(_) => failures += 1,
            }
        }
    }
    outcome(
        failures == 0 && worst_hit <= 1e-6 && worst_base <= 1e-9,
        format!(
            "max |delta_achieved - target| = {worst_hit:.3e}, max ‖Δ‖_F - baseline = {worst_base:.3e}, failures = {failures}"
        ),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let act = ActivationSpec::leaky_relu(0.1).unwrap();
    let (mut violations, mut worst) = (0, 0.0_f64);
    for i in 0..50 {
        let d = 2 + i % 4;
        let ode = NeuralOde::new(normal_matrix(&mut rng, d, d), normal_vector(&mut rng, d), act, 20).unwrap();
        let lip = oracle_delta_star(ode.a(), 0.1).exp();
        for _ in 0..200 {
            let u: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let fu = ode.reference_flow(&u).unwrap();
            let fv = ode.reference_flow(&v).unwrap();
            let lhs = flownet::linalg::dist2(&fu, &fv);
            let rhs = lip * flownet::linalg::dist2(&u, &v);
            worst = worst.max(lhs / rhs);
            if lhs > rhs * (1.0 + 1e-6) {
                violations += 1;
            }
        }
    }
    outcome(violations == 0, format!("violations = {violations}, max ratio = {worst:.6}"))
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let act = ActivationSpec::smoothed_leaky_relu(0.1).unwrap();
    let h = 1e-5;
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let mut net = ShallowFlowNet::new(
            Affine::new(normal_matrix(&mut rng, 3, 2), normal_vector(&mut rng, 3)).unwrap(),
            NeuralOde::new(normal_matrix(&mut rng, 3, 3), normal_vector(&mut rng, 3), act, 20).unwrap(),
            Affine::new(normal_matrix(&mut rng, 1, 3), normal_vector(&mut rng, 1)).unwrap(),
        )
        .unwrap();
        let x = normal_matrix(&mut rng, 4, 2);
        let w = normal_matrix(&mut rng, 4, 1);
        let objective = |n: &ShallowFlowNet| -> f64 {
            let y = n.forward_batch(&x).unwrap();
            y.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
        };
        let (_, tape) = net.forward_tape(&x).unwrap();
        let (grads, _) = net.backward(&tape, &w).unwrap();
        let analytic: Vec<f64> = grads.tensors.concat();
        let mut numeric = Vec::with_capacity(analytic.len());
        let counts: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
        for (t, &len) in counts.iter().enumerate() {
            for j in 0..len {
                let orig = net.params()[t][j];
                net.params_mut()[t][j] = orig + h;
                let up = objective(&net);
                net.params_mut()[t][j] = orig - h;
                let down = objective(&net);
                net.params_mut()[t][j] = orig;
                numeric.push((up - down) / (2.0 * h));
            }
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(diff / scale);
    }
    outcome(worst < 1e-5, format!("max relative gradient error = {worst:.3e}"))
}

fn criteria_6_to_8() -> [Outcome; 3] {
    let cfg = ExperimentConfig::new(ExperimentId::Example1).set("check_bounds", "true").unwrap();
    let out = experiment_example1(&cfg).unwrap();
    let errors = out.cells.iter().filter(|c| c.error.is_some()).count();
    let reports: Vec<_> = out.cells.iter().filter_map(|c| c.bounds.as_ref()).collect();
    let upper: usize = reports.iter().map(|r| r.upper_violations.len()).sum();
    let lower: usize = reports.iter().map(|r| r.lower_violations.len()).sum();
    let checked: usize = reports.iter().map(|r| r.lower_checked).sum();
    let rows = out.cells.len();
    let c6 = outcome(
        errors == 0 && rows == 180 && upper == 0,
        format!("{rows} cells, {errors} stabilization failures, {upper} upper-bound violations"),
    );
    let c7 = outcome(
        errors == 0 && lower == 0 && checked > 0,
        format!("{checked} points with η > 0 checked, {lower} lower-bound violations"),
    );
    let mut trend_ok = true;
    let mut detail = Vec::new();
    for law in [SamplingLaw::Uniform, SamplingLaw::Normal] {
        let means: Vec<f64> = out.summary.iter().filter(|s| s.law == law).map(|s| s.mean).collect();
        let drops: Vec<usize> = (1..means.len()).filter(|&i| means[i] < means[i - 1]).collect();
        trend_ok &= drops.is_empty() && means.len() == 9;
        detail.push(format!(
            "{law}: means [{}] decreases after offsets {:?}",
            means.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>().join(", "),
            drops.iter().map(|&i| format!("{:.2}", 0.01 * i as f64)).collect::<Vec<_>>()
        ));
    }
    let c8 = outcome(trend_ok, detail.join("; "));
    [c6, c7, c8]
}

fn criterion_9(out: &Example2Output) -> Outcome {
    let near_ok = out.rows.iter().filter(|r| !r.far).all(|r| r.accuracy == out.clean_accuracy);
    let far: Vec<_> = out.rows.iter().filter(|r| r.far).collect();
    let mut sorted = far.clone();
    sorted.sort_by(|a, b| a.delta.partial_cmp(&b.delta).unwrap());
    let far_ok = far.len() == 3 && sorted.windows(2).all(|w| w[0].accuracy <= w[1].accuracy);
    outcome(
        out.clean_accuracy == 1.0 && out.attempts <= 5 && near_ok && far_ok,
        format!(
            "seed {} after {} attempt(s), clean accuracy {}, near accuracies {:?}, far accuracies by increasing δ {:?}",
            out.seed,
            out.attempts,
            out.clean_accuracy,
            out.rows.iter().filter(|r| !r.far).map(|r| r.accuracy).collect::<Vec<_>>(),
            sorted.iter().map(|r| r.accuracy).collect::<Vec<_>>()
        ),
    )
}

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let act = ActivationSpec::leaky_relu(0.1).unwrap();
    let c = 2.0;
    let spectral = |m: &Matrix| to_na(m).singular_values().max();
    let net = {
        let mut a1 = normal_matrix(&mut rng, 4, 3);
        a1 = a1.scale(3.0 * c / spectral(&a1));
        let mut a2 = normal_matrix(&mut rng, 2, 4);
        a2 = a2.scale(2.5 / spectral(&a2));
        ShallowFlowNet::new(
            Affine::new(a1, normal_vector(&mut rng, 4)).unwrap(),
            NeuralOde::new(normal_matrix(&mut rng, 4, 4).scale(0.5), normal_vector(&mut rng, 4), act, 20).unwrap(),
            Affine::new(a2, normal_vector(&mut rng, 2)).unwrap(),
        )
        .unwrap()
    };
    let r = net.renormalize_to_fixed_norm(c).unwrap();
    let mut worst = 0.0_f64;
    for _ in 0..1000 {
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        worst = worst.max(flownet::linalg::dist2(&net.forward(&x).unwrap(), &r.forward(&x).unwrap()));
    }
    let e1 = (spectral(&r.net.l1.w) - c).abs();
    let e2 = (spectral(&r.net.l2.w) - 1.0).abs();
    outcome(
        worst < 1e-10 && e1 <= 1e-10 && e2 <= 1e-10,
        format!("max ‖φ - φ̂‖ = {worst:.3e}, |‖Â1‖ - c| = {e1:.1e}, |‖Â2‖ - 1| = {e2:.1e}"),
    )
}

fn criterion_11(out: &Example2Output) -> Outcome {
    let clean = accuracy(&out.net, &out.test_set).unwrap();
    let acc = &out.attack.accuracy;
    let monotone = acc.windows(2).all(|w| w[1] <= w[0]);
    outcome(
        out.attack.etas.len() == 7 && acc[0] == clean && monotone,
        format!("accuracy {:?}, clean {clean}", acc),
    )
}

fn criterion_12() -> Outcome {
    let cfg = ExperimentConfig::new(ExperimentId::Efficiency);
    let out = experiment_efficiency(&cfg).unwrap();
    let lines: Vec<&str> = out.csv.lines().collect();
    let well_formed = lines.first() == Some(&"arch,N,d,seed,test_mse")
        && lines.last().is_some_and(|l| l.starts_with("# config-hash="))
        && lines.len() == 1 + 60 + 1
        && lines[1..lines.len() - 1].iter().all(|l| l.split(',').count() == 5);
    let cell = out
        .rows
        .iter()
        .find(|r| r.arch == Arch::Flow && r.n == 1000 && r.d == 100)
        .map(|r| r.test_mse)
        .unwrap_or(f64::NAN);
    outcome(
        well_formed && cell < 0.1 * out.target_variance,
        format!(
            "{} rows, flow test MSE at (1000, 100) = {cell:.3e}, 10% of target variance = {:.3e}",
            out.rows.len(),
            0.1 * out.target_variance
        ),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> (Outcome, Duration) {
    let t = Instant::now();
    let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        outcome(false, format!("panicked: {msg}"))
    });
    (o, t.elapsed())
}

#[test]
fn acceptance_criteria() {
    let limits = [1.0, 10.0, 120.0, 60.0, 30.0, 600.0, 600.0, 600.0, 300.0, 5.0, 10.0, 1800.0];
    let mut results: Vec<(usize, Outcome, Duration)> = Vec::new();
    for (k, f) in [
        (1, criterion_1 as fn() -> Outcome),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
    ] {
        let (o, t) = guarded(f);
        results.push((k, o, t));
    }
    let t = Instant::now();
    match catch_unwind(criteria_6_to_8) {
        Ok(os) => {
            let el = t.elapsed();
            for (i, o) in os.into_iter().enumerate() {
                results.push((6 + i, o, el));
            }
        }
        Err(_) => {
            for k in 6..=8 {
                results.push((k, outcome(false, "Example-1 replication panicked"), t.elapsed()));
            }
        }
    }
    let t = Instant::now();
    let ex2 = catch_unwind(|| experiment_example2(&ExperimentConfig::new(ExperimentId::Example2)).unwrap());
    let ex2_time = t.elapsed();
    match &ex2 {
        Ok(out) => results.push((9, criterion_9(out), ex2_time)),
        Err(_) => results.push((9, outcome(false, "Two Moons experiment failed"), ex2_time)),
    }
    let (o, t) = guarded(criterion_10);
    results.push((10, o, t));
    match &ex2 {
        Ok(out) => {
            let (o, t) = guarded(|| criterion_11(out));
            results.push((11, o, t));
        }
        Err(_) => results.push((11, outcome(false, "no trained Two Moons net"), Duration::ZERO)),
    }
    let (o, t) = guarded(criterion_12);
    results.push((12, o, t));

    let mut failed = Vec::new();
    for (k, o, t) in &results {
        let in_time = t.as_secs_f64() <= limits[k - 1];
        let pass = o.pass && in_time;
        println!(
            "criterion {k:>2}: {} ({:.1}s, limit {}s) {}",
            if pass { "PASS" } else { "FAIL" },
            t.as_secs_f64(),
            limits[k - 1],
            o.detail
        );
        if !pass {
            failed.push(*k);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
