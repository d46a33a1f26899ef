//! Density matrices built as weighted mixtures of dyads `u·uᵀ`.
//!
//! A density matrix is symmetric, positive semidefinite and has unit trace.
//! Construction guarantees all three when the component vectors are
//! unit-normalized and the mixture weights form a probability vector;
//! [`validate_density`] checks them numerically after the fact.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::softmax;
use crate::tensor::{Scalar, Tensor};

/// Norms below this are treated as the zero vector.
pub const ZERO_NORM: f64 = 1e-12;

/// Tolerance on `Σ k_i = 1` and on the trace of normalized matrices.
pub const TRACE_TOL: f64 = 1e-6;

/// Most negative quadratic form still accepted as PSD.
pub const PSD_TOL: f64 = -1e-9;

/// A d×d density matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix<T> {
    entries: Tensor<T>,
    normalized: bool,
}

impl<T: Scalar> DensityMatrix<T> {
    pub fn dim(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn entries(&self) -> &Tensor<T> {
        &self.entries
    }

    /// Whether every component was a unit vector and the weights summed to
    /// one, so the trace is one by construction.
    pub fn normalized(&self) -> bool {
        self.normalized
    }

    pub fn trace(&self) -> T {
        (0..self.dim()).map(|i| self.entries.at2(i, i)).sum()
    }

    pub fn quadratic_form(&self, x: &[T]) -> T {
        let d = self.dim();
        let e = self.entries.data();
        let mut acc = T::zero();
        for i in 0..d {
            let row: T = (0..d).map(|j| e[i * d + j] * x[j]).sum();
            acc += x[i] * row;
        }
        acc
    }

    /// Wraps an arbitrary square matrix, e.g. to validate it.
    pub fn from_matrix(entries: Tensor<T>, normalized: bool) -> Result<Self> {
        match entries.shape() {
            [a, b] if a == b => Ok(Self { entries, normalized }),
            s => Err(Error::dim(format!("density matrix must be square, got {s:?}"))),
        }
    }
}

/// `u / ‖u‖₂`, or the zero vector with `was_zero` set when `‖u‖₂ < 1e-12`.
pub fn normalize_vec<T: Scalar>(u: &[T]) -> (Vec<T>, bool) {
    let sq: T = u.iter().map(|&x| x * x).sum();
    if sq == T::one() {
        return (u.to_vec(), false);
    }
    let norm = sq.sqrt();
    if norm < T::lit(ZERO_NORM) {
        return (vec![T::zero(); u.len()], true);
    }
    (u.iter().map(|&x| x / norm).collect(), false)
}

/// Accumulates `weight · v·vᵀ` into a row-major d×d buffer, computing each
/// off-diagonal product once and mirroring it.
pub(crate) fn add_dyad<T: Scalar>(out: &mut [T], v: &[T], weight: T) {
    let d = v.len();
    for i in 0..d {
        let wi = weight * v[i];
        out[i * d + i] += wi * v[i];
        for j in i + 1..d {
            let x = wi * v[j];
            out[i * d + j] += x;
            out[j * d + i] += x;
        }
    }
}

/// The dyad `û·ûᵀ` (or `u·uᵀ` with `normalize` off).
///
/// A zero input yields the zero matrix with the normalized flag unset.
pub fn dyad<T: Scalar>(u: &[T], normalize: bool) -> Result<DensityMatrix<T>> {
    let d = u.len();
    if d == 0 {
        return Err(Error::dim("dyad of an empty vector"));
    }
    let (v, was_zero) = if normalize { normalize_vec(u) } else { (u.to_vec(), false) };
    let mut out = vec![T::zero(); d * d];
    add_dyad(&mut out, &v, T::one());
    Ok(DensityMatrix { entries: Tensor::from_vec(&[d, d], out)?, normalized: normalize && !was_zero })
}

/// Nonnegative weights summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureWeights<T>(Vec<T>);

impl<T: Scalar> MixtureWeights<T> {
    pub fn new(weights: Vec<T>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidArgument("no mixture weights".into()));
        }
        if let Some(w) = weights.iter().find(|w| w.is_nan() || **w < T::zero()) {
            return Err(Error::InvalidArgument(format!("negative mixture weight {w}")));
        }
        let total: T = weights.iter().copied().sum();
        if (total - T::one()).abs() > T::lit(TRACE_TOL) {
            return Err(Error::InvalidArgument(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(Self(weights))
    }

    /// `softmax(logits)`; always valid.
    pub fn from_logits(logits: &[T]) -> Result<Self> {
        Self::new(softmax(logits))
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }
}

/// `Σ_i k_i · dyad(v_i)`.
pub fn mixture<T: Scalar>(vectors: &[&[T]], weights: &MixtureWeights<T>, normalize: bool) -> Result<DensityMatrix<T>> {
    if vectors.len() != weights.0.len() {
        return Err(Error::InvalidArgument(format!("{} vectors but {} weights", vectors.len(), weights.0.len())));
    }
    let d = vectors[0].len();
    if d == 0 || vectors.iter().any(|v| v.len() != d) {
        return Err(Error::dim("mixture vectors must share a positive length"));
    }
    let mut out = vec![T::zero(); d * d];
    let mut all_unit = normalize;
    for (v, &k) in vectors.iter().zip(&weights.0) {
        let (v, was_zero) = if normalize { normalize_vec(v) } else { (v.to_vec(), false) };
        all_unit &= !was_zero;
        add_dyad(&mut out, &v, k);
    }
    Ok(DensityMatrix { entries: Tensor::from_vec(&[d, d], out)?, normalized: all_unit })
}

/// Numerical check of the density-matrix properties.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensityReport {
    /// `max |ρ[i][j] − ρ[j][i]|`.
    pub max_asymmetry: f64,
    /// `|trace − 1|`.
    pub trace_error: f64,
    /// Smallest `xᵀρx` seen over the random unit probes.
    pub min_quadratic_form: f64,
}

impl DensityReport {
    pub fn symmetric(&self) -> bool {
        self.max_asymmetry == 0.0
    }
    pub fn unit_trace(&self) -> bool {
        self.trace_error <= TRACE_TOL
    }
    pub fn psd(&self) -> bool {
        self.min_quadratic_form >= PSD_TOL
    }
    pub fn passes(&self) -> bool {
        self.symmetric() && self.unit_trace() && self.psd()
    }
}

/// Measures symmetry, trace and `min xᵀρx` over `trials` random unit probes.
pub fn validate_density<T: Scalar, R: Rng>(rho: &DensityMatrix<T>, trials: usize, rng: &mut R) -> DensityReport {
    let d = rho.dim();
    let mut max_asymmetry = 0.0f64;
    for i in 0..d {
        for j in i + 1..d {
            let diff = (rho.entries.at2(i, j) - rho.entries.at2(j, i)).abs().to_f64_lossy();
            max_asymmetry = max_asymmetry.max(diff);
        }
    }
    let trace_error = (rho.trace().to_f64_lossy() - 1.0).abs();
    let mut min_quadratic_form = f64::INFINITY;
    for _ in 0..trials {
        let x: Vec<T> = (0..d).map(|_| T::lit(rng.random_range(-1.0..1.0))).collect();
        let (x, zero) = normalize_vec(&x);
        if zero {
            continue;
        }
        min_quadratic_form = min_quadratic_form.min(rho.quadratic_form(&x).to_f64_lossy());
    }
    DensityReport { max_asymmetry, trace_error, min_quadratic_form }
}
