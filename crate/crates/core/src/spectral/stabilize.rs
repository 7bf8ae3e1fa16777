//! Small-Frobenius-norm perturbations that lower `δ⋆` to a prescribed value.
//!
//! Minimising `½‖Δ‖_F²` subject to `λ_max(sym(D(A+Δ))) ≤ δ` for every vertex
//! `D` is a projection onto an intersection of convex sets. It is solved
//! through its dual:
//!
//! ```text
//! max_{Z_k ⪰ 0}  −½‖Σ_k D_k Z_k‖_F² + Σ_k ⟨Z_k, sym(D_k A) − δI⟩,   Δ = −Σ_k D_k Z_k
//! ```
//!
//! by accelerated projected gradient ascent with adaptive restart. The
//! gradient with respect to `Z_k` is the constraint residual
//! `sym(D_k(A+Δ)) − δI`, and projecting onto the PSD cone clips eigenvalues.
//! Vertices enter the working set only when they become the argmax of the
//! current iterate (constraint generation), so the dual stays small even when
//! `2^d` is large.
//!
//! The dual direction is then rescaled by a one-dimensional bisection so the
//! constraint is met with equality, and compared against two always-feasible
//! candidates: the positive rescaling `(δ/δ⋆)A` and a diagonal shift `A − sI`.

use super::{coordinate_ascent, max_over_box, LogNormMaxResult, OmegaBox, SearchMethod, VertexMask};
use crate::error::{Error, Result};
use crate::linalg::{eig_sym, sym_unchecked, Matrix};

/// Achieved `δ` must match the target within this tolerance.
pub const HIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct StabilizeOptions {
    /// Total dual iterations across all working-set rounds.
    pub max_iterations: usize,
    /// Stop once the working-set constraint violation is below this fraction
    /// of the requested decrease `δ⋆ − δ`.
    pub feasibility_rtol: f64,
    /// Stop once the duality gap is below this fraction of `‖Δ‖_F²`.
    pub gap_rtol: f64,
}

impl Default for StabilizeOptions {
    fn default() -> Self {
        Self {
            max_iterations: 10_000,
            feasibility_rtol: 1e-8,
            gap_rtol: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StabilizationResult {
    pub delta_target: f64,
    pub delta_achieved: f64,
    /// The perturbation `Δ`.
    pub delta: Matrix,
    pub frob_norm: f64,
    pub iterations: usize,
    /// `‖(δ/δ⋆ − 1)A‖_F` when `δ⋆, δ > 0`, otherwise `+∞`.
    pub baseline_norm: f64,
    pub delta_star: f64,
    pub method: SearchMethod,
}

impl StabilizationResult {
    /// `A + Δ`.
    pub fn perturbed(&self, a: &Matrix) -> Matrix {
        a.add(&self.delta).expect("shapes agree by construction")
    }

    /// One-line `key=value` summary.
    pub fn summary_line(&self) -> String {
        format!(
            "{{\"delta_target\": {:.17e}, \"delta_achieved\": {:.17e}, \"frob_norm\": {:.17e}, \"baseline_norm\": {}, \"iterations\": {}}}",
            self.delta_target,
            self.delta_achieved,
            self.frob_norm,
            if self.baseline_norm.is_finite() {
                format!("{:.17e}", self.baseline_norm)
            } else {
                "\"inf\"".to_string()
            },
            self.iterations
        )
    }
}

/// Perturbs `A` so that `max_{D∈Ω_α} μ₂(D(A+Δ)) = delta_target`, with default options.
pub fn stabilize(a: &Matrix, omega: &OmegaBox, delta_target: f64) -> Result<StabilizationResult> {
    stabilize_with(a, omega, delta_target, &StabilizeOptions::default())
}

pub fn stabilize_with(
    a: &Matrix,
    omega: &OmegaBox,
    delta_target: f64,
    opts: &StabilizeOptions,
) -> Result<StabilizationResult> {
    let start = super::delta_star(a, omega)?;
    if !(delta_target < start.value) {
        return Err(Error::Precondition(format!(
            "target {delta_target} must be below delta_star {}",
            start.value
        )));
    }
    let d = omega.dim();
    let alpha = omega.alpha();

    let mut working: Vec<VertexMask> = vec![start.argmax.clone()];
    let evaluate = |m: &Matrix, hints: &[VertexMask]| -> LogNormMaxResult {
        if start.method == SearchMethod::ExactEnumeration {
            max_over_box(m, omega)
        } else {
            let mut starts = hints.to_vec();
            starts.push(VertexMask::all_ones(d));
            coordinate_ascent(m, omega, starts)
        }
    };

    // dual ascent with constraint generation
    let mut dual = Dual::new(a, delta_target);
    dual.push(start.argmax.diagonal(alpha));
    let decrease = start.value - delta_target;
    let mut iterations = 0;
    loop {
        let budget = opts.max_iterations.saturating_sub(iterations);
        if budget == 0 {
            break;
        }
        iterations += dual.solve(budget, decrease * opts.feasibility_rtol, opts.gap_rtol);
        let delta = dual.perturbation();
        let m = a.add(&delta)?;
        let g = evaluate(&m, &working);
        if g.value <= delta_target + decrease * opts.feasibility_rtol
            || working.contains(&g.argmax)
        {
            break;
        }
        dual.push(g.argmax.diagonal(alpha));
        working.push(g.argmax);
    }

    let mut candidates: Vec<Matrix> = Vec::new();
    let dual_dir = dual.perturbation();
    if dual_dir.frobenius_norm() > 0.0 {
        if let Some(s) = hit_along(a, &dual_dir, delta_target, |m| evaluate(m, &working).value) {
            candidates.push(dual_dir.scale(s));
        }
    }
    let ratio = delta_target / start.value;
    if ratio > 0.0 {
        candidates.push(a.scale(ratio - 1.0));
    }
    if candidates.is_empty() {
        let shift = Matrix::identity(d).scale(-1.0);
        if let Some(s) = hit_along(a, &shift, delta_target, |m| evaluate(m, &working).value) {
            candidates.push(shift.scale(s));
        }
    }

    let mut best: Option<(f64, Matrix, LogNormMaxResult)> = None;
    for cand in candidates {
        let m = a.add(&cand)?;
        let check = if start.method == SearchMethod::ExactEnumeration {
            max_over_box(&m, omega)
        } else {
            let mut hints = working.clone();
            hints.push(start.argmax.clone());
            let local = coordinate_ascent(&m, omega, hints);
            let global = max_over_box(&m, omega);
            if local.value > global.value {
                local
            } else {
                global
            }
        };
        if (check.value - delta_target).abs() > HIT_TOLERANCE {
            continue;
        }
        let norm = cand.frobenius_norm();
        if best.as_ref().map_or(true, |(n, _, _)| norm < *n) {
            best = Some((norm, cand, check));
        }
    }

    let (frob_norm, delta, check) = best.ok_or_else(|| {
        Error::Convergence(format!(
            "no perturbation reached delta = {delta_target} within {HIT_TOLERANCE:e} after {iterations} dual iterations (delta_star = {})",
            start.value
        ))
    })?;

    let baseline_norm = if start.value > 0.0 && delta_target > 0.0 {
        (ratio - 1.0).abs() * a.frobenius_norm()
    } else {
        f64::INFINITY
    };

    Ok(StabilizationResult {
        delta_target,
        delta_achieved: check.value,
        delta,
        frob_norm,
        iterations,
        baseline_norm,
        delta_star: start.value,
        method: start.method,
    })
}

/// Smallest `s > 0` (up to bisection resolution) with `g(A + s·dir) ≤ target`,
/// where `g(0) > target`. `g` is convex in `s`, so the feasible set is an interval.
fn hit_along(
    a: &Matrix,
    dir: &Matrix,
    target: f64,
    g: impl Fn(&Matrix) -> f64,
) -> Option<f64> {
    let at = |s: f64| {
        let mut m = a.clone();
        m.add_scaled(s, dir);
        g(&m)
    };
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut g_hi = at(hi);
    let mut expansions = 0;
    while g_hi > target {
        lo = hi;
        hi *= 2.0;
        g_hi = at(hi);
        expansions += 1;
        if expansions > 60 || !g_hi.is_finite() {
            return None;
        }
    }
    for _ in 0..200 {
        if hi - lo <= 1e-15 * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if at(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(hi)
}

struct Dual<'a> {
    a: &'a Matrix,
    target: f64,
    diags: Vec<Vec<f64>>,
    z: Vec<Matrix>,
}

impl<'a> Dual<'a> {
    fn new(a: &'a Matrix, target: f64) -> Self {
        Self {
            a,
            target,
            diags: Vec::new(),
            z: Vec::new(),
        }
    }

    fn push(&mut self, diag: Vec<f64>) {
        let n = diag.len();
        self.diags.push(diag);
        self.z.push(Matrix::zeros(n, n));
    }

    fn lipschitz(&self) -> f64 {
        self.diags
            .iter()
            .map(|d| d.iter().fold(0.0_f64, |m, v| m.max(v.abs())).powi(2))
            .sum::<f64>()
            .max(f64::MIN_POSITIVE)
    }

    /// `Δ = −Σ_k D_k Z_k` for the given multipliers.
    fn perturbation_of(&self, z: &[Matrix]) -> Matrix {
        let n = self.a.rows();
        let mut delta = Matrix::zeros(n, n);
        for (d, zk) in self.diags.iter().zip(z) {
            delta.add_scaled(-1.0, &zk.scale_rows(d));
        }
        delta
    }

    fn perturbation(&self) -> Matrix {
        self.perturbation_of(&self.z)
    }

    /// `sym(D_k(A+Δ)) − δI` for every working vertex.
    fn residuals(&self, z: &[Matrix]) -> Vec<Matrix> {
        let m = self.a.add(&self.perturbation_of(z)).expect("square");
        self.diags
            .iter()
            .map(|d| {
                let mut s = sym_unchecked(&m.scale_rows(d));
                for i in 0..s.rows() {
                    s[(i, i)] -= self.target;
                }
                s
            })
            .collect()
    }

    /// Runs at most `budget` accelerated projected-gradient steps; returns the count used.
    fn solve(&mut self, budget: usize, feas_tol: f64, gap_rtol: f64) -> usize {
        let step = 1.0 / self.lipschitz();
        let mut y = self.z.clone();
        let mut t = 1.0_f64;
        for it in 0..budget {
            let grads = self.residuals(&y);
            let z_new: Vec<Matrix> = y
                .iter()
                .zip(&grads)
                .map(|(yk, gk)| {
                    let mut p = yk.clone();
                    p.add_scaled(step, gk);
                    psd_part(&p)
                })
                .collect();
            let progress: f64 = grads
                .iter()
                .zip(z_new.iter().zip(&self.z))
                .map(|(g, (zn, zo))| g.inner(&zn.sub(zo).expect("shape")))
                .sum();
            let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            if progress < 0.0 {
                t = 1.0;
                y = z_new.clone();
            } else {
                let beta = (t - 1.0) / t_new;
                y = z_new
                    .iter()
                    .zip(&self.z)
                    .map(|(zn, zo)| {
                        let mut v = zn.clone();
                        v.add_scaled(beta, &zn.sub(zo).expect("shape"));
                        v
                    })
                    .collect();
                t = t_new;
            }
            self.z = z_new;

            if it % 10 == 9 && self.converged(feas_tol, gap_rtol) {
                return it + 1;
            }
        }
        budget
    }

    fn converged(&self, feas_tol: f64, gap_rtol: f64) -> bool {
        let res = self.residuals(&self.z);
        let violation = res
            .iter()
            .map(|r| crate::linalg::sym_eigenvalues(r).last().copied().unwrap_or(0.0))
            .fold(f64::NEG_INFINITY, f64::max);
        let gap: f64 = -self.z.iter().zip(&res).map(|(z, r)| z.inner(r)).sum::<f64>();
        let norm2 = self.perturbation().frobenius_norm().powi(2);
        violation <= feas_tol && gap.abs() <= gap_rtol * norm2.max(f64::MIN_POSITIVE)
    }
}

fn psd_part(x: &Matrix) -> Matrix {
    // symmetrize first: accumulated rounding may leave a tiny skew part
    let s = sym_unchecked(x);
    match eig_sym(&s) {
        Ok(e) => e.reconstruct_with(|l| l.max(0.0)),
        Err(_) => s,
    }
}
