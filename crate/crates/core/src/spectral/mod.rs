//! Logarithmic-norm analysis over the diagonal box `Ω_α`.
//!
//! `Ω_α` is the set of diagonal matrices with entries in `[α, 1]`, the range
//! of the activation's derivative. The flow map of `u' = σ(Au + b)` is
//! Lipschitz with constant at most `exp(δ⋆)`, `δ⋆ = max_{D∈Ω_α} μ₂(DA)`.
//!
//! `D ↦ sym(DA)` is affine and `λ_max` is convex, so the maximum over the box
//! is attained at one of its `2^d` vertices. Up to [`EXACT_ENUMERATION_MAX_DIM`]
//! the vertices are enumerated exhaustively; above it a multi-start coordinate
//! ascent over vertex masks is used and the result is flagged as heuristic.

mod stabilize;

pub use stabilize::{stabilize, stabilize_with, StabilizationResult, StabilizeOptions};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{max_eigenvalue, sym_unchecked, Matrix};

/// Largest dimension for which all `2^d` vertices are enumerated.
pub const EXACT_ENUMERATION_MAX_DIM: usize = 16;
/// Random starts of the coordinate-ascent fallback (the all-ones mask is always added).
pub const HEURISTIC_STARTS: usize = 32;
const HEURISTIC_SEED: u64 = 0x0d1a_9b0c;

/// The box `Ω_α` of diagonal matrices with entries in `[α, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OmegaBox {
    dim: usize,
    alpha: f64,
}

impl OmegaBox {
    pub fn new(dim: usize, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Precondition(format!(
                "alpha must lie in (0, 1], got {alpha}"
            )));
        }
        Ok(Self { dim, alpha })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn vertex_count(&self) -> Option<u64> {
        (self.dim < 64).then(|| 1u64 << self.dim)
    }

    /// All vertices in increasing mask order. Only sensible for small `dim`.
    pub fn vertices(&self) -> impl Iterator<Item = VertexMask> + '_ {
        let n = self.vertex_count().expect("too many vertices to enumerate");
        (0..n).map(move |i| VertexMask::from_index(i, self.dim))
    }

    fn check(&self, a: &Matrix) -> Result<()> {
        if !a.is_square() || a.rows() != self.dim {
            return Err(Error::dim(format!(
                "matrix is {}x{} but the box has dimension {}",
                a.rows(),
                a.cols(),
                self.dim
            )));
        }
        Ok(())
    }
}

/// A vertex of `Ω_α`: `true` selects `D_ii = 1`, `false` selects `D_ii = α`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct VertexMask {
    bits: Vec<bool>,
}

impl VertexMask {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    /// Bit `i` of `index` set means `D_ii = α`; index 0 is the identity.
    pub fn from_index(index: u64, dim: usize) -> Self {
        Self {
            bits: (0..dim).map(|i| i >= 64 || (index >> i) & 1 == 0).collect(),
        }
    }

    pub fn all_ones(dim: usize) -> Self {
        Self {
            bits: vec![true; dim],
        }
    }

    /// Integer encoding used for tie-breaking: bit `i` set when entry `i` is `α`.
    /// Masks longer than 64 entries compare from the top entry instead.
    pub fn index(&self) -> u64 {
        self.bits
            .iter()
            .enumerate()
            .take(64)
            .fold(0, |acc, (i, &b)| acc | ((!b as u64) << i))
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Diagonal entries of the vertex matrix.
    pub fn diagonal(&self, alpha: f64) -> Vec<f64> {
        self.bits
            .iter()
            .map(|&b| if b { 1.0 } else { alpha })
            .collect()
    }

    fn flip(&mut self, i: usize) {
        self.bits[i] = !self.bits[i];
    }

    fn precedes(&self, other: &VertexMask) -> bool {
        for i in (0..self.bits.len()).rev() {
            if self.bits[i] != other.bits[i] {
                return self.bits[i];
            }
        }
        false
    }
}

impl std::fmt::Display for VertexMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "a" })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchMethod {
    ExactEnumeration,
    Heuristic,
}

impl std::fmt::Display for SearchMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SearchMethod::ExactEnumeration => "exact-enumeration",
            SearchMethod::Heuristic => "heuristic",
        })
    }
}

/// Maximum of `μ₂(DA)` over `Ω_α` together with the maximizing vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct LogNormMaxResult {
    pub value: f64,
    pub argmax: VertexMask,
    pub method: SearchMethod,
}

/// `μ₂(DA)` with `D = diag(diag)`.
pub fn mu2_scaled(a: &Matrix, diag: &[f64]) -> f64 {
    max_eigenvalue(&sym_unchecked(&a.scale_rows(diag)))
}

/// `δ⋆ = max_{D∈Ω_α} μ₂(DA)`.
pub fn delta_star(a: &Matrix, omega: &OmegaBox) -> Result<LogNormMaxResult> {
    omega.check(a)?;
    Ok(max_over_box(a, omega))
}

/// `δ′ = −max_{D∈Ω_α} μ₂(−DĀ)`, the exponential rate of the lower bound.
pub fn delta_prime(abar: &Matrix, omega: &OmegaBox) -> Result<f64> {
    omega.check(abar)?;
    Ok(-max_over_box(&abar.scale(-1.0), omega).value)
}

pub(crate) fn max_over_box(a: &Matrix, omega: &OmegaBox) -> LogNormMaxResult {
    if omega.dim <= EXACT_ENUMERATION_MAX_DIM {
        enumerate_vertices(a, omega)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(HEURISTIC_SEED);
        let mut starts = vec![VertexMask::all_ones(omega.dim)];
        for _ in 0..HEURISTIC_STARTS {
            starts.push(VertexMask::new(
                (0..omega.dim).map(|_| rng.gen_bool(0.5)).collect(),
            ));
        }
        coordinate_ascent(a, omega, starts)
    }
}

fn enumerate_vertices(a: &Matrix, omega: &OmegaBox) -> LogNormMaxResult {
    let mut best: Option<(f64, VertexMask)> = None;
    for mask in omega.vertices() {
        let v = mu2_scaled(a, &mask.diagonal(omega.alpha));
        // strict comparison keeps the smallest mask index among ties
        if best.as_ref().map_or(true, |(b, _)| v > *b) {
            best = Some((v, mask));
        }
    }
    let (value, argmax) = best.unwrap_or((f64::NEG_INFINITY, VertexMask::new(Vec::new())));
    LogNormMaxResult {
        value,
        argmax,
        method: SearchMethod::ExactEnumeration,
    }
}

/// Greedy single-bit-flip ascent from each start; best local maximum wins.
pub(crate) fn coordinate_ascent(
    a: &Matrix,
    omega: &OmegaBox,
    starts: Vec<VertexMask>,
) -> LogNormMaxResult {
    let mut best: Option<(f64, VertexMask)> = None;
    for mut mask in starts {
        let mut val = mu2_scaled(a, &mask.diagonal(omega.alpha));
        loop {
            let mut improved = false;
            for i in 0..omega.dim {
                mask.flip(i);
                let v = mu2_scaled(a, &mask.diagonal(omega.alpha));
                if v > val {
                    val = v;
                    improved = true;
                } else {
                    mask.flip(i);
                }
            }
            if !improved {
                break;
            }
        }
        let better = match &best {
            None => true,
            Some((b, m)) => val > *b || (val == *b && mask.precedes(m)),
        };
        if better {
            best = Some((val, mask));
        }
    }
    let (value, argmax) = best.expect("at least one start");
    LogNormMaxResult {
        value,
        argmax,
        method: SearchMethod::Heuristic,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(d: usize) -> OmegaBox {
        OmegaBox::new(d, 0.1).unwrap()
    }

    #[test]
    fn identity_is_maximized_at_all_ones() {
        let r = delta_star(&Matrix::identity(2), &bx(2)).unwrap();
        assert!((r.value - 1.0).abs() < 1e-15);
        // three vertices tie at 1; the smallest index is the identity
        assert_eq!(r.argmax.index(), 0);
        assert_eq!(r.argmax.bits(), &[true, true]);
        assert_eq!(r.method, SearchMethod::ExactEnumeration);
        assert!((mu2_scaled(&Matrix::identity(2), &[1.0, 1.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn negative_identity() {
        let r = delta_star(&Matrix::identity(2).scale(-1.0), &bx(2)).unwrap();
        assert!((r.value + 0.1).abs() < 1e-15);
        // the maximizer has at least one α entry; rounding decides among them
        assert_ne!(r.argmax.index(), 0);
    }

    #[test]
    fn rotation_generator() {
        let a = Matrix::from_rows(&[[0.0, 1.0], [-1.0, 0.0]]).unwrap();
        let r = delta_star(&a, &bx(2)).unwrap();
        assert!((r.value - 0.45).abs() < 1e-15, "{}", r.value);
        assert!(r.argmax.index() == 1 || r.argmax.index() == 2);
    }

    #[test]
    fn delta_prime_examples() {
        assert!((delta_prime(&Matrix::identity(2), &bx(2)).unwrap() - 0.1).abs() < 1e-15);
        assert!((delta_prime(&Matrix::identity(2).scale(-1.0), &bx(2)).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(delta_prime(&Matrix::zeros(2, 2), &bx(2)).unwrap(), 0.0);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(delta_star(&Matrix::identity(3), &bx(2)), Err(Error::Dimension(_))));
        assert!(matches!(delta_prime(&Matrix::zeros(2, 3), &bx(2)), Err(Error::Dimension(_))));
        assert!(OmegaBox::new(2, 0.0).is_err());
        assert!(OmegaBox::new(2, 1.5).is_err());
    }

    #[test]
    fn heuristic_matches_enumeration_on_small_problem() {
        let a = Matrix::from_rows(&[
            [0.3, -1.2, 0.5, 0.1],
            [0.9, 0.2, -0.4, 0.7],
            [-0.6, 1.1, 0.05, -0.3],
            [0.2, 0.4, 0.8, -0.9],
        ])
        .unwrap();
        let omega = bx(4);
        let exact = delta_star(&a, &omega).unwrap();
        let starts = (0..16).map(|i| VertexMask::from_index(i, 4)).collect();
        let h = coordinate_ascent(&a, &omega, starts);
        assert_eq!(h.value, exact.value);
        assert_eq!(h.method, SearchMethod::Heuristic);
    }

    #[test]
    fn mask_encoding() {
        let m = VertexMask::from_index(0b101, 3);
        assert_eq!(m.bits(), &[false, true, false]);
        assert_eq!(m.index(), 5);
        assert_eq!(m.diagonal(0.1), vec![0.1, 1.0, 0.1]);
        assert_eq!(m.to_string(), "a1a");
        assert!(VertexMask::all_ones(3).precedes(&m));
    }
}
