//! Scalar numerical primitives: softmax, sigmoid, sparsemax, and their
//! vector-Jacobian products.
//!
//! Everything here is a pure function of its inputs and may be called from
//! any number of threads. All computation is in `f64`; non-finite inputs are
//! rejected rather than propagated.

use crate::error::{Error, Result};

/// Absolute tolerance on the sum-to-one invariant of [`SimplexVector`].
pub const SIMPLEX_SUM_TOLERANCE: f64 = 1e-9;

/// A point on the probability simplex: entries in `[0, 1]` that sum to one
/// within [`SIMPLEX_SUM_TOLERANCE`].
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexVector(Vec<f64>);

impl SimplexVector {
    /// Validates the simplex invariants and wraps `values`.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid_input("simplex vector must be non-empty"));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid_input(
                "simplex vector entries must be finite and non-negative",
            ));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_SUM_TOLERANCE {
            return Err(Error::invalid_input(format!(
                "simplex vector sums to {sum}, expected 1"
            )));
        }
        Ok(SimplexVector(values))
    }

    /// Wraps values already known to satisfy the invariants (outputs of
    /// `softmax`/`sparsemax`).
    fn new_unchecked(values: Vec<f64>) -> Self {
        debug_assert!({
            let sum: f64 = values.iter().sum();
            (sum - 1.0).abs() <= SIMPLEX_SUM_TOLERANCE && values.iter().all(|v| *v >= 0.0)
        });
        SimplexVector(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Deref for SimplexVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

fn ensure_finite_vector(name: &str, z: &[f64]) -> Result<()> {
    if z.is_empty() {
        return Err(Error::invalid_input(format!("{name} must be non-empty")));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid_input(format!(
            "{name} contains a non-finite entry"
        )));
    }
    Ok(())
}

/// Numerically stable softmax: `p_i = exp(z_i - max z) / sum_j exp(z_j - max z)`.
///
/// Shift-invariant and strictly positive.
pub fn softmax(z: &[f64]) -> Result<SimplexVector> {
    ensure_finite_vector("softmax input", z)?;
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(SimplexVector::new_unchecked(out))
}

/// Logistic sigmoid `S(x) = 1 / (1 + exp(-x))`.
pub fn sigmoid(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::invalid_input("sigmoid input must be finite"));
    }
    Ok(sigmoid_raw(x))
}

/// Sigmoid without the finiteness check, for hot loops over pre-validated
/// logits.
#[inline]
pub(crate) fn sigmoid_raw(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Derivative of the sigmoid expressed through its value: `S'(x) = S(1 - S)`.
#[inline]
pub(crate) fn sigmoid_derivative(s: f64) -> f64 {
    s * (1.0 - s)
}

/// Euclidean projection of `z` onto the probability simplex
/// (`argmin_{p in simplex} ||p - z||^2`), computed with the sort-and-threshold
/// algorithm.
///
/// Sorting breaks value ties by lower index first, so the reported support is
/// deterministic. The output may contain exact zeros.
pub fn sparsemax(z: &[f64]) -> Result<SimplexVector> {
    ensure_finite_vector("sparsemax input", z)?;
    let (tau, _support) = sparsemax_threshold(z);
    let out: Vec<f64> = z.iter().map(|&v| (v - tau).max(0.0)).collect();
    Ok(SimplexVector::new_unchecked(out))
}

/// Sort-threshold core: returns `(tau, support size)` with
/// `k = max{k : 1 + k * z_(k) > sum_{j<=k} z_(j)}` and
/// `tau = (sum_{j<=k} z_(j) - 1) / k`.
fn sparsemax_threshold(z: &[f64]) -> (f64, usize) {
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&a, &b| z[b].partial_cmp(&z[a]).unwrap().then(a.cmp(&b)));

    let mut cumsum = 0.0;
    let mut k = 0usize;
    let mut support_sum = 0.0;
    for (rank, &idx) in order.iter().enumerate() {
        let zi = z[idx];
        let next = cumsum + zi;
        if 1.0 + (rank + 1) as f64 * zi > next {
            cumsum = next;
            k = rank + 1;
            support_sum = next;
        } else {
            break;
        }
    }
    debug_assert!(k >= 1);
    ((support_sum - 1.0) / k as f64, k)
}

/// Distance from `z` to the nearest sparsemax support change: the smallest
/// `|z_i - tau|` over all entries. Perturbations smaller than this margin
/// cannot alter the support set, which makes the projection differentiable in
/// a neighbourhood of `z`.
pub fn sparsemax_support_margin(z: &[f64]) -> Result<f64> {
    ensure_finite_vector("sparsemax input", z)?;
    let (tau, _) = sparsemax_threshold(z);
    Ok(z.iter()
        .map(|&v| (v - tau).abs())
        .fold(f64::INFINITY, f64::min))
}

/// Vector-Jacobian product of the softmax: `J^T u` with
/// `J = diag(p) - p p^T`, evaluated at output `p = softmax(z)`.
///
/// The result always sums to zero (softmax is shift-invariant).
pub fn softmax_vjp(p: &SimplexVector, upstream: &[f64]) -> Result<Vec<f64>> {
    if p.len() != upstream.len() {
        return Err(Error::invalid_input(format!(
            "softmax_vjp length mismatch: {} vs {}",
            p.len(),
            upstream.len()
        )));
    }
    ensure_finite_vector("softmax_vjp upstream", upstream)?;
    let dot: f64 = p.iter().zip(upstream).map(|(&pi, &ui)| pi * ui).sum();
    Ok(p.iter()
        .zip(upstream)
        .map(|(&pi, &ui)| pi * (ui - dot))
        .collect())
}

/// Vector-Jacobian product of the sparsemax at output `p = sparsemax(z)`:
/// on the support `S = {i : p_i > 0}` the Jacobian is `I - 11^T / |S|`
/// restricted to `S`, and zero elsewhere.
pub fn sparsemax_vjp(p: &SimplexVector, upstream: &[f64]) -> Result<Vec<f64>> {
    if p.len() != upstream.len() {
        return Err(Error::invalid_input(format!(
            "sparsemax_vjp length mismatch: {} vs {}",
            p.len(),
            upstream.len()
        )));
    }
    ensure_finite_vector("sparsemax_vjp upstream", upstream)?;
    let support: Vec<usize> = (0..p.len()).filter(|&i| p[i] > 0.0).collect();
    if support.is_empty() {
        return Err(Error::Internal(
            "sparsemax output has empty support".to_string(),
        ));
    }
    let mean: f64 = support.iter().map(|&i| upstream[i]).sum::<f64>() / support.len() as f64;
    let mut out = vec![0.0; p.len()];
    for &i in &support {
        out[i] = upstream[i] - mean;
    }
    Ok(out)
}
