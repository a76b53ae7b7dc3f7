//! Entropic optimal transport over a discrete grid: ground cost matrices,
//! Gibbs kernels, Sinkhorn evaluation of the regularized Wasserstein value
//! `W_gamma`, and the semi-dual conjugate `H*_X` with its closed-form
//! gradient.
//!
//! All kernel applications go through a log-domain interface. When
//! `exp(-M2/gamma)` is representable in `f64` the kernel is materialized once
//! and applied by matrix products with a per-column shift; for very small
//! `gamma` the application falls back to per-row log-sum-exp so nothing
//! underflows.

use crate::simplex::{SimplexStack, SimplexVector};
use crate::tensor::Tensor;
use crate::{threads, CoreError, Result};
use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use std::path::{Path, PathBuf};

/// Largest grid (product of mode sizes) whose cost matrix is materialized.
pub const MAX_GRID_POINTS: usize = 4096;

/// Default Sinkhorn stopping parameters (marginal violation / sweep budget).
pub const SINKHORN_TOL: f64 = 1e-7;
pub const SINKHORN_MAX_ITER: usize = 10_000;

/// Above this value of `max(M2)/gamma` the linear-domain kernel underflows
/// and kernel products use per-row log-sum-exp instead.
const LINEAR_KERNEL_EXPONENT_LIMIT: f64 = 600.0;

const SMOOTHING_EPS: f64 = 1e-12;

/// Ground metric between grid points.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum MetricKind {
    /// Euclidean distance between per-axis-normalized coordinates.
    Euclidean,
    /// Coordinate-wise wrap-around distance before the 2-norm.
    Torus,
}

impl std::str::FromStr for MetricKind {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(MetricKind::Euclidean),
            "torus" => Ok(MetricKind::Torus),
            other => Err(CoreError::Parameter(format!(
                "unknown metric {other:?}, expected euclidean or torus"
            ))),
        }
    }
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetricKind::Euclidean => write!(f, "euclidean"),
            MetricKind::Torus => write!(f, "torus"),
        }
    }
}

/// Matricized ground cost over a grid plus its Gibbs kernel at a fixed
/// entropic regularization `gamma`. Immutable after construction and freely
/// shareable across threads.
#[derive(Clone, Debug)]
pub struct GroundCost {
    grid_shape: Vec<usize>,
    metric: MetricKind,
    gamma: f64,
    m2: Array2<f64>,
    log_k: Array2<f64>,
    lin_k: Option<Array2<f64>>,
}

/// Builds the cost matrix `M2[a, b] = ||coord(a) - coord(b)||_2` over the grid
/// with per-axis coordinates normalized to `[0, 1]`, and its Gibbs kernel.
pub fn build_ground_cost(
    grid_shape: &[usize],
    metric: MetricKind,
    gamma: f64,
) -> Result<GroundCost> {
    if grid_shape.is_empty() || grid_shape.iter().any(|&s| s == 0) {
        return Err(CoreError::Parameter(format!(
            "invalid grid shape {grid_shape:?}"
        )));
    }
    let p: usize = grid_shape.iter().product();
    if p > MAX_GRID_POINTS {
        return Err(CoreError::Capacity(format!(
            "grid with {p} points exceeds the {MAX_GRID_POINTS}-point cost matrix limit"
        )));
    }
    let d = grid_shape.len();
    // Multi-index of every flat grid point, row-major.
    let mut coords = vec![0usize; p * d];
    for flat in 0..p {
        let mut rem = flat;
        for ax in (0..d).rev() {
            coords[flat * d + ax] = rem % grid_shape[ax];
            rem /= grid_shape[ax];
        }
    }
    let mut m2 = Array2::zeros((p, p));
    for a in 0..p {
        for b in (a + 1)..p {
            let mut acc = 0.0;
            for ax in 0..d {
                let n = grid_shape[ax];
                if n == 1 {
                    continue;
                }
                let ia = coords[a * d + ax] as f64;
                let ib = coords[b * d + ax] as f64;
                let raw = match metric {
                    MetricKind::Euclidean => (ia - ib).abs(),
                    MetricKind::Torus => {
                        let diff = (ia - ib).abs();
                        diff.min(n as f64 - diff)
                    }
                };
                let scaled = raw / (n - 1) as f64;
                acc += scaled * scaled;
            }
            let dist = acc.sqrt();
            m2[[a, b]] = dist;
            m2[[b, a]] = dist;
        }
    }
    GroundCost::from_cost_matrix(grid_shape.to_vec(), metric, m2, gamma)
}

impl GroundCost {
    /// Wraps an explicit symmetric, nonnegative, zero-diagonal cost matrix.
    pub fn from_cost_matrix(
        grid_shape: Vec<usize>,
        metric: MetricKind,
        m2: Array2<f64>,
        gamma: f64,
    ) -> Result<GroundCost> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(CoreError::Parameter(format!(
                "gamma must be positive and finite, got {gamma}"
            )));
        }
        let p: usize = grid_shape.iter().product();
        if m2.nrows() != p || m2.ncols() != p {
            return Err(CoreError::Dimension(format!(
                "cost matrix is {}x{}, grid has {p} points",
                m2.nrows(),
                m2.ncols()
            )));
        }
        let mut max_cost: f64 = 0.0;
        for a in 0..p {
            if m2[[a, a]] != 0.0 {
                return Err(CoreError::Parameter("cost diagonal must be zero".into()));
            }
            for b in 0..p {
                let v = m2[[a, b]];
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(CoreError::Parameter(format!(
                        "cost entry ({a},{b}) = {v} must be finite and nonnegative"
                    )));
                }
                if (v - m2[[b, a]]).abs() > 1e-12 {
                    return Err(CoreError::Parameter(format!(
                        "cost matrix asymmetric at ({a},{b})"
                    )));
                }
                max_cost = max_cost.max(v);
            }
        }
        let log_k = m2.mapv(|v| -v / gamma);
        let lin_k = if max_cost / gamma <= LINEAR_KERNEL_EXPONENT_LIMIT {
            Some(log_k.mapv(f64::exp))
        } else {
            None
        };
        Ok(GroundCost {
            grid_shape,
            metric,
            gamma,
            m2,
            log_k,
            lin_k,
        })
    }

    /// Number of grid points (rows of the matricized cost).
    pub fn n(&self) -> usize {
        self.m2.nrows()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn grid_shape(&self) -> &[usize] {
        &self.grid_shape
    }

    pub fn metric(&self) -> MetricKind {
        self.metric
    }

    pub fn cost_matrix(&self) -> ArrayView2<'_, f64> {
        self.m2.view()
    }

    /// Same cost matrix, different regularization.
    pub fn with_gamma(&self, gamma: f64) -> Result<GroundCost> {
        GroundCost::from_cost_matrix(self.grid_shape.clone(), self.metric, self.m2.clone(), gamma)
    }

    /// File name under which the cost matrix is cached, keyed by grid shape
    /// and metric kind.
    pub fn cache_file_name(grid_shape: &[usize], metric: MetricKind) -> String {
        let dims: Vec<String> = grid_shape.iter().map(|s| s.to_string()).collect();
        format!("groundcost_{}_{metric}.tnsr", dims.join("x"))
    }

    /// Writes the cost matrix in the tensor binary format.
    pub fn save_cache(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(Self::cache_file_name(&self.grid_shape, self.metric));
        let t = Tensor::new(vec![self.n(), self.n()], self.m2.iter().cloned().collect())?;
        t.save(&path)?;
        Ok(path)
    }

    /// Loads the cached cost matrix if present, otherwise builds and caches it.
    pub fn load_or_build(
        grid_shape: &[usize],
        metric: MetricKind,
        gamma: f64,
        cache_dir: &Path,
    ) -> Result<GroundCost> {
        let path = cache_dir.join(Self::cache_file_name(grid_shape, metric));
        if path.is_file() {
            let t = Tensor::load(&path)?;
            let p: usize = grid_shape.iter().product();
            if t.shape() == [p, p] {
                let m2 =
                    Array2::from_shape_vec((p, p), t.into_data()).expect("shape just checked");
                return GroundCost::from_cost_matrix(grid_shape.to_vec(), metric, m2, gamma);
            }
        }
        let cost = build_ground_cost(grid_shape, metric, gamma)?;
        let _ = cost.save_cache(cache_dir);
        Ok(cost)
    }

    /// Columnwise `log(K exp(logv))`, stable for any `gamma`.
    pub(crate) fn log_kernel_apply(&self, logv: &ArrayView2<f64>) -> Array2<f64> {
        match &self.lin_k {
            Some(kernel) => {
                let (p, n) = logv.dim();
                let mut shifts = vec![f64::NEG_INFINITY; n];
                for c in 0..n {
                    for r in 0..p {
                        let v = logv[[r, c]];
                        if v > shifts[c] {
                            shifts[c] = v;
                        }
                    }
                }
                let mut w = Array2::zeros((p, n));
                for c in 0..n {
                    if shifts[c].is_finite() {
                        for r in 0..p {
                            w[[r, c]] = (logv[[r, c]] - shifts[c]).exp();
                        }
                    }
                }
                let mut out = kernel_matmul(kernel, &w);
                for c in 0..n {
                    for r in 0..p {
                        let v = out[[r, c]];
                        out[[r, c]] = if v > 0.0 {
                            v.ln() + shifts[c]
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                }
                out
            }
            None => self.log_kernel_apply_lse(logv),
        }
    }

    fn log_kernel_apply_lse(&self, logv: &ArrayView2<f64>) -> Array2<f64> {
        let (p, n) = logv.dim();
        let log_k = &self.log_k;
        let apply_col = |c: usize| -> Vec<f64> {
            let mut buf = vec![0.0; p];
            for (j, b) in buf.iter_mut().enumerate() {
                *b = logv[[j, c]];
            }
            let mut col = vec![0.0; p];
            for i in 0..p {
                let row = log_k.row(i);
                let mut m = f64::NEG_INFINITY;
                for j in 0..p {
                    let v = row[j] + buf[j];
                    if v > m {
                        m = v;
                    }
                }
                if !m.is_finite() {
                    col[i] = f64::NEG_INFINITY;
                    continue;
                }
                let mut sum = 0.0;
                for j in 0..p {
                    sum += (row[j] + buf[j] - m).exp();
                }
                col[i] = m + sum.ln();
            }
            col
        };
        let cols: Vec<Vec<f64>> = if threads() > 1 && n > 1 {
            (0..n).into_par_iter().map(apply_col).collect()
        } else {
            (0..n).map(apply_col).collect()
        };
        let mut out = Array2::zeros((p, n));
        for (c, col) in cols.into_iter().enumerate() {
            for (i, v) in col.into_iter().enumerate() {
                out[[i, c]] = v;
            }
        }
        out
    }
}

/// `kernel . w`, chunking columns across threads when enabled. Each column is
/// computed by an independent matrix product, so results do not depend on the
/// thread count of the pool, only on the configured chunking.
fn kernel_matmul(kernel: &Array2<f64>, w: &Array2<f64>) -> Array2<f64> {
    let t = threads();
    let n = w.ncols();
    if t <= 1 || n < 2 * t {
        return kernel.dot(w);
    }
    let chunk = n.div_ceil(t);
    let ranges: Vec<(usize, usize)> = (0..n)
        .step_by(chunk)
        .map(|lo| (lo, (lo + chunk).min(n)))
        .collect();
    let parts: Vec<Array2<f64>> = ranges
        .par_iter()
        .map(|&(lo, hi)| kernel.dot(&w.slice(s![.., lo..hi])))
        .collect();
    let views: Vec<ArrayView2<f64>> = parts.iter().map(|a| a.view()).collect();
    concatenate(Axis(1), &views).expect("column chunks reassemble")
}

/// A transport plan between two distributions, with its marginals.
#[derive(Clone, Debug)]
pub struct Coupling {
    plan: Array2<f64>,
    row_marginal: SimplexVector,
    col_marginal: SimplexVector,
}

impl Coupling {
    /// Validates nonnegativity and agreement of the plan's marginals with the
    /// stated ones within `tol`.
    pub fn new(
        plan: Array2<f64>,
        row_marginal: SimplexVector,
        col_marginal: SimplexVector,
        tol: f64,
    ) -> Result<Coupling> {
        if plan.nrows() != row_marginal.len() || plan.ncols() != col_marginal.len() {
            return Err(CoreError::Dimension(format!(
                "plan {}x{} does not match marginals {} and {}",
                plan.nrows(),
                plan.ncols(),
                row_marginal.len(),
                col_marginal.len()
            )));
        }
        if plan.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(CoreError::Numeric("coupling entries must be >= 0".into()));
        }
        let mut row_err = 0.0;
        for (i, &m) in row_marginal.as_slice().iter().enumerate() {
            row_err += (plan.row(i).sum() - m).abs();
        }
        let mut col_err = 0.0;
        for (j, &m) in col_marginal.as_slice().iter().enumerate() {
            col_err += (plan.column(j).sum() - m).abs();
        }
        if row_err > tol || col_err > tol {
            return Err(CoreError::Numeric(format!(
                "coupling marginals off by {row_err:.3e} (rows) / {col_err:.3e} (cols), tolerance {tol:.1e}"
            )));
        }
        Ok(Coupling {
            plan,
            row_marginal,
            col_marginal,
        })
    }

    pub fn plan(&self) -> ArrayView2<'_, f64> {
        self.plan.view()
    }

    pub fn row_marginal(&self) -> &SimplexVector {
        &self.row_marginal
    }

    pub fn col_marginal(&self) -> &SimplexVector {
        &self.col_marginal
    }
}

fn smooth_if_needed(p: &[f64]) -> Vec<f64> {
    if p.iter().all(|&v| v > 0.0) {
        return p.to_vec();
    }
    let shifted: Vec<f64> = p.iter().map(|&v| v + SMOOTHING_EPS).collect();
    let sum: f64 = shifted.iter().sum();
    shifted.into_iter().map(|v| v / sum).collect()
}

/// Entropic Wasserstein value
/// `W_gamma(a, b) = min_{T in U(a,b)} <M2, T> + gamma <T, log T>`
/// by log-domain Sinkhorn iteration, together with the optimal coupling.
/// Marginals with zero entries are smoothed by `1e-12` and renormalized first.
pub fn entropic_wasserstein(
    a: &SimplexVector,
    b: &SimplexVector,
    cost: &GroundCost,
    tol: f64,
    max_iter: usize,
) -> Result<(f64, Coupling)> {
    let p = cost.n();
    if a.len() != p || b.len() != p {
        return Err(CoreError::Dimension(format!(
            "marginals of length {} and {} against a {p}-point cost",
            a.len(),
            b.len()
        )));
    }
    let a_col = Array2::from_shape_vec((p, 1), smooth_if_needed(a.as_slice())).expect("column");
    let b_col = Array2::from_shape_vec((p, 1), smooth_if_needed(b.as_slice())).expect("column");
    let mut potentials = SinkhornPotentials::cold(p, 1);
    let values = sinkhorn_batch(cost, &a_col, &b_col, tol, max_iter, &mut potentials)?;
    let gamma = cost.gamma();
    let mut plan = Array2::zeros((p, p));
    for i in 0..p {
        for j in 0..p {
            let e = (potentials.phi[[i, 0]] + potentials.psi[[j, 0]] - cost.m2[[i, j]]) / gamma;
            plan[[i, j]] = e.exp();
        }
    }
    let coupling = Coupling::new(plan, a.clone(), b.clone(), tol.max(1e-7))?;
    Ok((values[0], coupling))
}

/// Batched Sinkhorn state: one pair of log-domain potentials per column.
#[derive(Clone, Debug)]
pub struct SinkhornPotentials {
    pub(crate) phi: Array2<f64>,
    pub(crate) psi: Array2<f64>,
}

impl SinkhornPotentials {
    pub fn cold(p: usize, n: usize) -> Self {
        SinkhornPotentials {
            phi: Array2::zeros((p, n)),
            psi: Array2::zeros((p, n)),
        }
    }
}

/// Runs Sinkhorn sweeps simultaneously for the column pairs
/// `(a[:, i], b[:, i])` until every pair's marginal violation is within `tol`.
/// Returns the transport values; the final potentials stay in `potentials`
/// for warm restarts.
pub(crate) fn sinkhorn_batch(
    cost: &GroundCost,
    a: &Array2<f64>,
    b: &Array2<f64>,
    tol: f64,
    max_iter: usize,
    potentials: &mut SinkhornPotentials,
) -> Result<Vec<f64>> {
    let gamma = cost.gamma();
    let (p, n) = a.dim();
    let log_a = a.mapv(f64::ln);
    let log_b = b.mapv(f64::ln);
    let mut last_viol = f64::INFINITY;
    for sweep in 0..max_iter {
        // log(K e^{psi/gamma}) with the current psi.
        let s = cost.log_kernel_apply(&(&potentials.psi / gamma).view());
        if sweep > 0 {
            // Columns are exact after the previous psi-update, so the total
            // marginal violation is the row violation.
            let mut viol: f64 = 0.0;
            for c in 0..n {
                let mut v = 0.0;
                for r in 0..p {
                    let row_mass = ((potentials.phi[[r, c]] / gamma) + s[[r, c]]).exp();
                    v += (row_mass - a[[r, c]]).abs();
                }
                viol = viol.max(v);
            }
            last_viol = viol;
            if viol <= tol {
                // Value of the current plan: <phi, row marginal> + <psi, col marginal>.
                let mut values = vec![0.0; n];
                for (c, value) in values.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for r in 0..p {
                        let row_mass = ((potentials.phi[[r, c]] / gamma) + s[[r, c]]).exp();
                        acc += potentials.phi[[r, c]] * row_mass
                            + potentials.psi[[r, c]] * b[[r, c]];
                    }
                    *value = acc;
                }
                return Ok(values);
            }
        }
        // phi-update: rows become exact.
        for c in 0..n {
            for r in 0..p {
                potentials.phi[[r, c]] = gamma * (log_a[[r, c]] - s[[r, c]]);
            }
        }
        // psi-update: columns become exact.
        let t = cost.log_kernel_apply(&(&potentials.phi / gamma).view());
        for c in 0..n {
            for r in 0..p {
                potentials.psi[[r, c]] = gamma * (log_b[[r, c]] - t[[r, c]]);
            }
        }
    }
    Err(CoreError::Convergence {
        what: "sinkhorn marginal violation".into(),
        residual: last_viol,
        budget: max_iter,
    })
}

/// Semi-dual conjugate value
/// `H*_X(g) = gamma (<X, log(K alpha)> - <X, log X>)` with
/// `alpha = exp(g/gamma)`, using the 0 log 0 = 0 convention and log-domain
/// kernel products.
///
/// This is the Legendre conjugate of `y -> W_gamma(X, y)` over the simplex
/// for the `<T, log T>` entropy in the transport objective; the sign of the
/// `<X, log X>` term is fixed by `H*(g) >= <g, y> - W_gamma(X, y)` and is
/// verified against a direct grid-search sup in the tests.
pub fn hstar_value(g: &Tensor, x: &SimplexStack, cost: &GroundCost) -> Result<f64> {
    let (g_col, x_col) = hstar_single_inputs(g, x, cost)?;
    let (values, _) = hstar_batch(cost, &g_col.view(), &x_col.view())?;
    Ok(values[0])
}

/// Gradient `grad H*_X(g) = alpha o (K (X / K alpha))`, a point on the simplex.
pub fn hstar_grad(g: &Tensor, x: &SimplexStack, cost: &GroundCost) -> Result<SimplexVector> {
    let (g_col, x_col) = hstar_single_inputs(g, x, cost)?;
    let (_, grads) = hstar_batch(cost, &g_col.view(), &x_col.view())?;
    SimplexVector::with_tol(grads.column(0).to_vec(), 1e-8)
}

fn hstar_single_inputs(
    g: &Tensor,
    x: &SimplexStack,
    cost: &GroundCost,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let p = cost.n();
    if g.len() != p {
        return Err(CoreError::Dimension(format!(
            "dual point has {} entries, cost grid has {p}",
            g.len()
        )));
    }
    if x.fibers() != 1 || x.fiber_len() != p {
        return Err(CoreError::Dimension(format!(
            "expected a single {p}-point distribution, got {} fibers of length {}",
            x.fibers(),
            x.fiber_len()
        )));
    }
    if g.data().iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Numeric("non-finite dual point".into()));
    }
    let g_col = Array2::from_shape_vec((p, 1), g.data().to_vec()).expect("column");
    let x_col = Array2::from_shape_vec((p, 1), x.tensor().data().to_vec()).expect("column");
    Ok((g_col, x_col))
}

/// Batched `H*` values and gradients for the column pairs `(g[:, i], x[:, i])`.
pub(crate) fn hstar_batch(
    cost: &GroundCost,
    g: &ArrayView2<f64>,
    x: &ArrayView2<f64>,
) -> Result<(Vec<f64>, Array2<f64>)> {
    let gamma = cost.gamma();
    let (p, n) = g.dim();
    let log_alpha = g.mapv(|v| v / gamma);
    let lka = cost.log_kernel_apply(&log_alpha.view());
    let mut values = vec![0.0; n];
    for (c, value) in values.iter_mut().enumerate() {
        let mut entropy = 0.0;
        let mut cross = 0.0;
        for r in 0..p {
            let xv = x[[r, c]];
            if xv > 0.0 {
                entropy += xv * xv.ln();
                cross += xv * lka[[r, c]];
            }
        }
        *value = gamma * (cross - entropy);
        if !value.is_finite() {
            return Err(CoreError::Numeric(format!(
                "H* value overflowed for sample {c}"
            )));
        }
    }
    // log(X / K alpha), with zeros of X mapped to -inf.
    let mut log_ratio = Array2::from_elem((p, n), f64::NEG_INFINITY);
    for c in 0..n {
        for r in 0..p {
            let xv = x[[r, c]];
            if xv > 0.0 {
                log_ratio[[r, c]] = xv.ln() - lka[[r, c]];
            }
        }
    }
    let lkb = cost.log_kernel_apply(&log_ratio.view());
    let mut grads = Array2::zeros((p, n));
    for c in 0..n {
        for r in 0..p {
            let v = (log_alpha[[r, c]] + lkb[[r, c]]).exp();
            if !v.is_finite() {
                return Err(CoreError::Numeric(format!(
                    "H* gradient overflowed for sample {c}"
                )));
            }
            grads[[r, c]] = v;
        }
    }
    Ok((values, grads))
}

/// Monitoring objective of the dictionary model:
/// `f_W(D, Lambda) = sum_i W_gamma(X_i, (D x_{d+1} Lambda)[:, i])`.
pub fn fw_objective(
    dict: &SimplexStack,
    codes: &SimplexStack,
    data: &SimplexStack,
    cost: &GroundCost,
) -> Result<f64> {
    let (values, _, _) =
        fw_values_and_potentials(dict, codes, data, cost, SINKHORN_TOL, None)?;
    Ok(values.iter().sum())
}

/// `f_W` together with the per-sample second Sinkhorn potential — the gradient
/// of `W_gamma(X_i, .)` at the reconstruction, up to an additive constant per
/// sample (columns are mean-centered). `warm` carries potentials across
/// repeated evaluations of nearby iterates.
pub(crate) fn fw_values_and_potentials(
    dict: &SimplexStack,
    codes: &SimplexStack,
    data: &SimplexStack,
    cost: &GroundCost,
    tol: f64,
    warm: Option<&mut Option<SinkhornPotentials>>,
) -> Result<(Vec<f64>, Array2<f64>, Array2<f64>)> {
    let p = cost.n();
    let r = dict.fibers();
    let n = data.fibers();
    if dict.fiber_len() != p || data.fiber_len() != p {
        return Err(CoreError::Dimension(format!(
            "dictionary/data fibers must have {p} entries over this cost grid"
        )));
    }
    if codes.fiber_len() != r || codes.fibers() != n {
        return Err(CoreError::Dimension(format!(
            "codes must be {r} x {n} for {r} atoms and {n} samples, got {} x {}",
            codes.fiber_len(),
            codes.fibers()
        )));
    }
    let d_mat = dict.tensor().as_mat(p, r);
    let lam_mat = codes.tensor().as_mat(r, n);
    let recon = d_mat.dot(&lam_mat);
    let mut recon_smoothed = recon.mapv(|v| v.max(0.0));
    for mut col in recon_smoothed.columns_mut() {
        if col.iter().any(|&v| v <= 0.0) {
            col.mapv_inplace(|v| v + SMOOTHING_EPS);
        }
        let s = col.sum();
        col.mapv_inplace(|v| v / s);
    }
    let mut x_smoothed = Array2::zeros((p, n));
    for c in 0..n {
        let col = smooth_if_needed(&data.fiber(c));
        for (rix, v) in col.into_iter().enumerate() {
            x_smoothed[[rix, c]] = v;
        }
    }
    let mut local = None;
    let warm_slot = match warm {
        Some(slot) => slot,
        None => &mut local,
    };
    if warm_slot.is_none() {
        *warm_slot = Some(SinkhornPotentials::cold(p, n));
    }
    let potentials = warm_slot.as_mut().expect("just initialized");
    let values = sinkhorn_batch(
        cost,
        &x_smoothed,
        &recon_smoothed,
        tol,
        SINKHORN_MAX_ITER,
        potentials,
    )?;
    // Center each psi column; the additive gauge is meaningless.
    let mut psi = potentials.psi.clone();
    for mut col in psi.columns_mut() {
        let mean = col.sum() / p as f64;
        col.mapv_inplace(|v| v - mean);
    }
    Ok((values, psi, recon))
}
