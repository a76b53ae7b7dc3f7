//! Probability-simplex geometry: Euclidean projection, the proximal penalty
//! `F(lambda) = 0.5 ||lambda - lambda0||^2` restricted to the simplex, its
//! Legendre conjugate `F*`, and the conjugate gradient
//! `grad F*(g) = (g + lambda0 - c 1)_+`.
//!
//! The offset `c` is found by the sort-and-scan projection algorithm, which is
//! exact in O(r log r) operations and resolves boundary ties deterministically.

use crate::tensor::Tensor;
use crate::{CoreError, Result};

/// Validation tolerance used when constructing simplex-constrained values.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A nonnegative vector summing to 1 (within a stated tolerance on input;
/// renormalized exactly on construction).
#[derive(Clone, Debug, PartialEq)]
pub struct SimplexVector {
    values: Vec<f64>,
}

impl SimplexVector {
    /// Validates with the default tolerance [`SIMPLEX_TOL`].
    pub fn new(values: Vec<f64>) -> Result<Self> {
        Self::with_tol(values, SIMPLEX_TOL)
    }

    /// Accepts entries down to `-tol` (clamped to zero) and sums within `tol`
    /// of 1 (renormalized); anything farther off is rejected.
    pub fn with_tol(mut values: Vec<f64>, tol: f64) -> Result<Self> {
        if values.is_empty() {
            return Err(CoreError::Dimension("empty simplex vector".into()));
        }
        for &v in &values {
            if !v.is_finite() {
                return Err(CoreError::Numeric("non-finite simplex entry".into()));
            }
            if v < -tol {
                return Err(CoreError::Numeric(format!(
                    "negative simplex entry {v:.3e} (tolerance {tol:.1e})"
                )));
            }
        }
        for v in &mut values {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > tol {
            return Err(CoreError::Numeric(format!(
                "simplex sum {sum:.12} deviates from 1 by more than {tol:.1e}"
            )));
        }
        for v in &mut values {
            *v /= sum;
        }
        Ok(SimplexVector { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    /// Shannon entropy with the 0 log 0 = 0 convention.
    pub fn entropy(&self) -> f64 {
        -self
            .values
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }
}

/// A tensor whose leading-mode fibers are probability simplices: the first
/// `simplex_modes` modes jointly index one distribution, the remaining modes
/// enumerate the stack (atoms, samples, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct SimplexStack {
    tensor: Tensor,
    simplex_modes: usize,
}

impl SimplexStack {
    pub fn new(tensor: Tensor, simplex_modes: usize) -> Result<Self> {
        Self::with_tol(tensor, simplex_modes, SIMPLEX_TOL)
    }

    pub fn with_tol(tensor: Tensor, simplex_modes: usize, tol: f64) -> Result<Self> {
        if simplex_modes == 0 || simplex_modes > tensor.ndim() {
            return Err(CoreError::Dimension(format!(
                "simplex modes {} out of range for a {}-mode tensor",
                simplex_modes,
                tensor.ndim()
            )));
        }
        let stack = SimplexStack {
            tensor,
            simplex_modes,
        };
        stack.validate(tol)?;
        Ok(stack)
    }

    fn validate(&self, tol: f64) -> Result<()> {
        let p = self.fiber_len();
        let n = self.fibers();
        let data = self.tensor.data();
        for t in 0..n {
            let mut sum = 0.0;
            for i in 0..p {
                let v = data[i * n + t];
                if !v.is_finite() {
                    return Err(CoreError::Numeric(format!(
                        "non-finite entry in fiber {t}"
                    )));
                }
                if v < -tol {
                    return Err(CoreError::Numeric(format!(
                        "negative entry {v:.3e} in fiber {t}"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > tol {
                return Err(CoreError::Numeric(format!(
                    "fiber {t} sums to {sum:.12}, deviating from 1 by more than {tol:.1e}"
                )));
            }
        }
        Ok(())
    }

    /// Length of each distribution fiber (product of the leading mode sizes).
    pub fn fiber_len(&self) -> usize {
        self.tensor.shape()[..self.simplex_modes].iter().product()
    }

    /// Number of stacked distributions (product of the trailing mode sizes).
    pub fn fibers(&self) -> usize {
        self.tensor.shape()[self.simplex_modes..].iter().product()
    }

    pub fn simplex_modes(&self) -> usize {
        self.simplex_modes
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    /// The fiber at trailing flat index `t` as an owned vector.
    pub fn fiber(&self, t: usize) -> Vec<f64> {
        let p = self.fiber_len();
        let n = self.fibers();
        (0..p).map(|i| self.tensor.data()[i * n + t]).collect()
    }
}

/// Euclidean projection onto the probability simplex: returns
/// `(v - c 1)_+` with the unique `c` making the result sum to 1.
pub fn project_simplex(v: &[f64]) -> Result<SimplexVector> {
    let (values, _c) = project_simplex_with_offset(v)?;
    // The scan produces exactly nonnegative entries summing to 1 up to
    // round-off; construction renormalizes.
    SimplexVector::with_tol(values, 1e-12)
}

/// Projection together with the offset `c` it used.
pub fn project_simplex_with_offset(v: &[f64]) -> Result<(Vec<f64>, f64)> {
    if v.is_empty() {
        return Err(CoreError::Dimension("empty projection input".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(CoreError::Numeric("non-finite projection input".into()));
    }
    let mut sorted = v.to_vec();
    // Descending sort; ties keep a deterministic order.
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite entries"));
    let mut cumsum = 0.0;
    let mut c = 0.0;
    for (j, &vj) in sorted.iter().enumerate() {
        cumsum += vj;
        let candidate = (cumsum - 1.0) / (j + 1) as f64;
        if vj - candidate > 0.0 {
            c = candidate;
        }
    }
    let out: Vec<f64> = v.iter().map(|&x| (x - c).max(0.0)).collect();
    Ok((out, c))
}

/// Conjugate gradient of the proximal penalty:
/// `grad F*_{lambda0}(g) = (g + lambda0 - c 1)_+`, the maximizer of
/// `<g, lambda> - 0.5 ||lambda - lambda0||^2` over the simplex.
/// Returns the maximizer and the offset `c`.
pub fn fstar_grad(g: &[f64], lambda0: &SimplexVector) -> Result<(SimplexVector, f64)> {
    if g.len() != lambda0.len() {
        return Err(CoreError::Dimension(format!(
            "fstar_grad: gradient length {} vs anchor length {}",
            g.len(),
            lambda0.len()
        )));
    }
    let shifted: Vec<f64> = g
        .iter()
        .zip(lambda0.as_slice())
        .map(|(&gi, &li)| gi + li)
        .collect();
    let (values, c) = project_simplex_with_offset(&shifted)?;
    Ok((SimplexVector::with_tol(values, 1e-12)?, c))
}

/// Conjugate value `F*_{lambda0}(g) = <g, lambda*> - 0.5 ||lambda* - lambda0||^2`
/// with `lambda*` from [`fstar_grad`]; convex in `g`, and `F*(0) = 0`.
pub fn fstar_value(g: &[f64], lambda0: &SimplexVector) -> Result<f64> {
    Ok(fstar_value_grad(g, lambda0)?.0)
}

/// Conjugate value and maximizer in one pass (one projection): returns
/// `(F*(g), grad F*(g), c)`.
pub fn fstar_value_grad(g: &[f64], lambda0: &SimplexVector) -> Result<(f64, SimplexVector, f64)> {
    let (lam, c) = fstar_grad(g, lambda0)?;
    let mut inner = 0.0;
    let mut dist = 0.0;
    for ((&gi, &li), &l0) in g.iter().zip(lam.as_slice()).zip(lambda0.as_slice()) {
        inner += gi * li;
        let d = li - l0;
        dist += d * d;
    }
    Ok((inner - 0.5 * dist, lam, c))
}
