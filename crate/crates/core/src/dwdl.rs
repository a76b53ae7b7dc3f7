//! Wasserstein dictionary learning for d-dimensional joint distributions:
//! alternating proximal block updates of the code matrix and the dictionary,
//! each block solved in the dual.
//!
//! The code subproblem
//! `min_L sum_i W(X_i, D x_{d+1} L[:, i]) + (tau/2)||L - L_prev||^2`
//! becomes the unconstrained smooth dual
//! `min_G sum_i H*_{X_i}(-G[:, i]) + tau F*_{L_prev[:, i]}(D x_{<=d} G[:, i] / tau)`,
//! solved by gradient descent with Armijo backtracking; the primal block is
//! recovered in closed form from the dual optimum through the conjugate-prox
//! gradient `(g + anchor - c 1)_+`. The dictionary subproblem takes the same
//! shape with the roles of the contraction swapped, and is expressed through
//! the generic "factor" machinery shared with the CP-structured variant (the
//! dictionary update is the one-factor case with the code matrix playing the
//! mixing tensor).

use crate::bcdpr::{
    self, BlockContext, BlockProblem, BlockUpdate, HistoryRow, Monitor, RunOptions,
    SimplexBlockShape,
};
use crate::ot::{fw_values_and_potentials, hstar_batch, GroundCost, SinkhornPotentials};
use crate::simplex::{fstar_grad, fstar_value_grad, SimplexStack, SimplexVector};
use crate::tensor::{Mode, Tensor};
use crate::{CoreError, Result};
use ndarray::Array2;

const MIX_EPS: f64 = 1e-12;

/// Settings for the dual gradient-descent solves: the tolerance schedule
/// `tol_n = tol0 / n^2` (which keeps the per-iteration optimality gaps
/// summable), the evaluation budget per solve, and the Armijo parameters.
///
/// `tol_floor` clips the schedule from below. The default of zero keeps the
/// summable schedule the convergence analysis wants; long qualitative
/// experiment chains (hundreds of proximal steps at small gamma, where the
/// semi-dual has near-flat directions) set a small floor instead of demanding
/// unattainable gradient norms.
#[derive(Copy, Clone, Debug)]
pub struct DualSolverSettings {
    pub tol0: f64,
    pub tol_floor: f64,
    pub max_inner: usize,
    pub armijo_c: f64,
    pub backtrack: f64,
}

impl Default for DualSolverSettings {
    fn default() -> Self {
        DualSolverSettings {
            tol0: 1e-4,
            tol_floor: 0.0,
            max_inner: 4000,
            armijo_c: 1e-4,
            backtrack: 0.5,
        }
    }
}

impl DualSolverSettings {
    /// Gradient-norm tolerance requested at outer iteration `n`.
    pub fn tol_at(&self, n: usize) -> f64 {
        (self.tol0 / ((n * n).max(1) as f64)).max(self.tol_floor)
    }
}

/// A dictionary-learning instance: data distributions, atom count, ground
/// cost (carrying gamma), the proximal weight, and dual solver settings.
#[derive(Clone, Debug)]
pub struct DwdlProblem {
    pub data: SimplexStack,
    pub rank: usize,
    pub cost: GroundCost,
    pub tau: f64,
    pub solver: DualSolverSettings,
}

impl DwdlProblem {
    pub fn new(
        data: SimplexStack,
        rank: usize,
        cost: GroundCost,
        tau: f64,
        solver: DualSolverSettings,
    ) -> Result<Self> {
        if data.fiber_len() != cost.n() {
            return Err(CoreError::Dimension(format!(
                "data fibers have {} entries, cost grid has {}",
                data.fiber_len(),
                cost.n()
            )));
        }
        if rank == 0 || data.fibers() == 0 {
            return Err(CoreError::Parameter(
                "need at least one atom and one sample".into(),
            ));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(CoreError::Parameter(format!(
                "proximal weight tau must be positive, got {tau}"
            )));
        }
        Ok(DwdlProblem {
            data,
            rank,
            cost,
            tau,
            solver,
        })
    }

    pub fn samples(&self) -> usize {
        self.data.fibers()
    }

    pub fn grid(&self) -> &[usize] {
        &self.data.tensor().shape()[..self.data.simplex_modes()]
    }
}

/// Outcome of one dual subproblem solve.
#[derive(Clone, Debug)]
pub struct DualSolveReport {
    /// Final dual iterate, shaped like the data stack `(I_1..I_d, N)`.
    pub g: Tensor,
    /// Final dual gradient norm (Frobenius).
    pub grad_norm: f64,
    /// Accepted gradient-descent steps.
    pub inner_iters: usize,
    /// Certified suboptimality surrogate for the primal subproblem:
    /// `||dual grad|| * sqrt(2) * sqrt(fibers)`.
    pub delta_hat: f64,
}

fn delta_hat_of(grad_norm: f64, fibers: usize) -> f64 {
    grad_norm * 2.0_f64.sqrt() * (fibers as f64).sqrt()
}

/// Constant added to `f_W` in logged histories: `2 N gamma ln(P)` bounds
/// `-W_gamma` from above (the entropy of a plan over `P^2` atoms is at most
/// `2 ln P`), so the shifted objective is nonnegative.
pub fn objective_offset(cost: &GroundCost, samples: usize) -> f64 {
    2.0 * samples as f64 * cost.gamma() * (cost.n() as f64).ln()
}

/// Shared H* part of every dual objective: value `sum_i H*_{X_i}(-G[:, i])`
/// and its gradient `-grad H*_{X_i}(-G[:, i])` stacked columnwise.
fn hstar_part(
    cost: &GroundCost,
    g: &Tensor,
    x_cols: &Array2<f64>,
) -> Result<(f64, Array2<f64>)> {
    let (p, n) = x_cols.dim();
    let minus_g = Array2::from_shape_fn((p, n), |(i, c)| -g.data()[i * n + c]);
    let (values, grads) = hstar_batch(cost, &minus_g.view(), &x_cols.view())?;
    Ok((values.iter().sum(), grads))
}

/// Dual objective of the code-matrix subproblem; `dict` is the `(I_1..I_d, r)`
/// dictionary tensor, anchors are the previous code columns.
pub(crate) struct LambdaDual<'a> {
    pub x_cols: Array2<f64>,
    pub dict: Tensor,
    pub anchors: Vec<SimplexVector>,
    pub tau: f64,
    pub cost: &'a GroundCost,
}

impl LambdaDual<'_> {
    pub fn eval(&self, g: &Tensor) -> Result<(f64, Tensor)> {
        let (p, n) = self.x_cols.dim();
        let r = *self.dict.shape().last().expect("dictionary has modes");
        let (h_value, h_grads) = hstar_part(self.cost, g, &self.x_cols)?;
        let c = self.dict.contract_leading(g)?; // (r, N)
        let mut value = h_value;
        let mut lam_star = Tensor::zeros(vec![r, n])?;
        let mut col = vec![0.0; r];
        for t in 0..n {
            for j in 0..r {
                col[j] = c.data()[j * n + t] / self.tau;
            }
            let (fval, lam, _) = fstar_value_grad(&col, &self.anchors[t])?;
            value += self.tau * fval;
            for j in 0..r {
                lam_star.data_mut()[j * n + t] = lam.as_slice()[j];
            }
        }
        let adj = self
            .dict
            .as_mat(p, r)
            .dot(&lam_star.as_mat(r, n)); // (P, N)
        let mut grad = Tensor::zeros(g.shape().to_vec())?;
        {
            let gd = grad.data_mut();
            for i in 0..p {
                for t in 0..n {
                    gd[i * n + t] = adj[[i, t]] - h_grads[[i, t]];
                }
            }
        }
        Ok((value, grad))
    }
}

/// Dual objective of a factor subproblem: the block is a `(fiber, r)` matrix
/// with simplex columns, reconstructions are `lambda_bar x_k U`, and the
/// conjugate-prox term runs over the r columns. The dictionary update is the
/// special case `k = 1` with `lambda_bar` the code matrix over flattened
/// grids.
pub(crate) struct FactorDual<'a> {
    pub x_cols: Array2<f64>,
    pub lambda_bar: Tensor,
    pub k: Mode,
    pub anchors: Vec<SimplexVector>,
    pub tau: f64,
    pub cost: &'a GroundCost,
}

impl FactorDual<'_> {
    pub fn eval(&self, g: &Tensor) -> Result<(f64, Tensor)> {
        let (p, n) = self.x_cols.dim();
        let (h_value, h_grads) = hstar_part(self.cost, g, &self.x_cols)?;
        let c = g.contract_except(&self.lambda_bar, self.k)?; // (I_k, r)
        let ik = c.shape()[0];
        let r = c.shape()[1];
        let mut value = h_value;
        let mut u_star = Tensor::zeros(vec![ik, r])?;
        let mut col = vec![0.0; ik];
        for j in 0..r {
            for (i, slot) in col.iter_mut().enumerate() {
                *slot = c.data()[i * r + j] / self.tau;
            }
            let (fval, lam, _) = fstar_value_grad(&col, &self.anchors[j])?;
            value += self.tau * fval;
            for i in 0..ik {
                u_star.data_mut()[i * r + j] = lam.as_slice()[i];
            }
        }
        let mut grad = self.lambda_bar.mode_product(&u_star, self.k)?;
        {
            let gd = grad.data_mut();
            for i in 0..p {
                for t in 0..n {
                    gd[i * n + t] -= h_grads[[i, t]];
                }
            }
        }
        Ok((value, grad))
    }
}

/// Rejects dictionaries with a grid point carrying zero mass in every atom
/// (the strict-feasibility hypothesis of the code-subproblem duality).
fn check_dict_last_mode_fibers(dict: &Tensor) -> Result<()> {
    let r = *dict.shape().last().expect("dictionary has modes");
    let p = dict.len() / r;
    for point in 0..p {
        if dict.data()[point * r..][..r].iter().all(|&v| v == 0.0) {
            return Err(CoreError::Precondition(format!(
                "grid point {point} has zero mass in every atom; epsilon-mix the dictionary \
                 with the uniform distribution before the dual solve"
            )));
        }
    }
    Ok(())
}

/// Rejects mixing tensors with a dead atom slice (mode-`k` index whose slice
/// is identically zero); for the code matrix this is an all-zero atom row.
fn check_mixing_slices(lambda_bar: &Tensor, k: Mode) -> Result<()> {
    let axis = k.0 - 1;
    let r = lambda_bar.shape()[axis];
    let post: usize = lambda_bar.shape()[axis + 1..].iter().product();
    let pre: usize = lambda_bar.shape()[..axis].iter().product();
    for j in 0..r {
        let mut dead = true;
        'scan: for a in 0..pre {
            let base = (a * r + j) * post;
            for b in 0..post {
                if lambda_bar.data()[base + b] != 0.0 {
                    dead = false;
                    break 'scan;
                }
            }
        }
        if dead {
            return Err(CoreError::Precondition(format!(
                "atom {j} has an identically zero mixing slice; epsilon-mix the codes with \
                 the uniform distribution before the dual solve"
            )));
        }
    }
    Ok(())
}

/// `(1 - eps) stack + eps * uniform` entrywise over `fiber_len`-point fibers;
/// keeps every fiber on its simplex while making all entries positive.
pub(crate) fn mix_columns_with_uniform(t: &Tensor, fiber_len: usize) -> Tensor {
    let mut data = t.data().to_vec();
    let u = MIX_EPS / fiber_len as f64;
    for v in data.iter_mut() {
        *v = (1.0 - MIX_EPS) * *v + u;
    }
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn anchors_of(t: &Tensor, fiber_len: usize) -> Result<Vec<SimplexVector>> {
    let n = t.len() / fiber_len;
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let fiber: Vec<f64> = (0..fiber_len).map(|i| t.data()[i * n + j]).collect();
        out.push(SimplexVector::with_tol(fiber, 1e-7)?);
    }
    Ok(out)
}

/// Dual objective and gradient of the code-matrix subproblem (the
/// strict-feasibility hypothesis on the dictionary is validated, not fixed).
pub fn dual_objective_lambda(
    g: &Tensor,
    d_prev: &SimplexStack,
    lambda_prev: &SimplexStack,
    tau: f64,
    data: &SimplexStack,
    cost: &GroundCost,
) -> Result<(f64, Tensor)> {
    check_dict_last_mode_fibers(d_prev.tensor())?;
    let eval = LambdaDual {
        x_cols: data_columns(data, cost)?,
        dict: d_prev.tensor().clone(),
        anchors: anchors_of(lambda_prev.tensor(), lambda_prev.fiber_len())?,
        tau,
        cost,
    };
    eval.eval(g)
}

/// Dual objective and gradient of the dictionary subproblem.
pub fn dual_objective_d(
    g: &Tensor,
    lambda: &SimplexStack,
    d_prev: &SimplexStack,
    tau: f64,
    data: &SimplexStack,
    cost: &GroundCost,
) -> Result<(f64, Tensor)> {
    check_mixing_slices(lambda.tensor(), Mode(1))?;
    let p = cost.n();
    let n = data.fibers();
    let eval = FactorDual {
        x_cols: data_columns(data, cost)?,
        lambda_bar: lambda.tensor().reshape(vec![lambda.fiber_len(), n])?,
        k: Mode(1),
        anchors: anchors_of(d_prev.tensor(), p)?,
        tau,
        cost,
    };
    let g_flat = g.reshape(vec![p, n])?;
    let (value, grad) = eval.eval(&g_flat)?;
    Ok((value, grad.into_reshaped(g.shape().to_vec())?))
}

/// Dual objective and gradient of a CP factor subproblem: the conjugate-prox
/// term runs over the `r` columns of `G x_{!=k} lambda_bar / tau` anchored at
/// the previous loading matrix. The dictionary dual is the `k = 1` case over
/// the flattened grid.
pub fn dual_objective_factor(
    g: &Tensor,
    lambda_bar: &Tensor,
    u_prev: &SimplexStack,
    tau: f64,
    data: &SimplexStack,
    cost: &GroundCost,
    k: Mode,
) -> Result<(f64, Tensor)> {
    check_mixing_slices(lambda_bar, k)?;
    let ik = u_prev.fiber_len();
    let eval = FactorDual {
        x_cols: data_columns(data, cost)?,
        lambda_bar: lambda_bar.clone(),
        k,
        anchors: anchors_of(u_prev.tensor(), ik)?,
        tau,
        cost,
    };
    eval.eval(g)
}

fn data_columns(data: &SimplexStack, cost: &GroundCost) -> Result<Array2<f64>> {
    let p = cost.n();
    if data.fiber_len() != p {
        return Err(CoreError::Dimension(format!(
            "data fibers have {} entries, cost grid has {p}",
            data.fiber_len()
        )));
    }
    let n = data.fibers();
    Ok(Array2::from_shape_fn((p, n), |(i, c)| {
        data.tensor().data()[i * n + c]
    }))
}

/// Gradient descent with Armijo backtracking on a smooth convex dual
/// objective. The first line search starts at `init_step` (the dual
/// smoothness scale, gamma); later searches start at the Barzilai–Borwein
/// spectral step `<s, y> / <y, y>`, which adapts to the local curvature of
/// the badly conditioned dual (a fixed gamma-capped step crawls on the flat
/// directions of `H*`). Tiny value differences below float resolution are
/// accepted so the iterate keeps moving once decreases become unmeasurable.
pub fn solve_dual<F>(
    mut eval: F,
    g0: Tensor,
    tol: f64,
    fibers: usize,
    init_step: f64,
    settings: &DualSolverSettings,
) -> Result<DualSolveReport>
where
    F: FnMut(&Tensor) -> Result<(f64, Tensor)>,
{
    let mut g = g0;
    let (mut value, mut grad) = eval(&g)?;
    let mut evals = 1usize;
    let mut steps = 0usize;
    let mut prev: Option<(Tensor, Tensor)> = None; // (iterate, gradient)
    loop {
        let grad_norm = grad.norm_sq().sqrt();
        if !grad_norm.is_finite() {
            return Err(CoreError::Numeric("dual gradient overflowed".into()));
        }
        let finish = |grad_norm: f64, g: Tensor, steps: usize| DualSolveReport {
            delta_hat: delta_hat_of(grad_norm, fibers),
            grad_norm,
            inner_iters: steps,
            g,
        };
        if grad_norm <= tol {
            return Ok(finish(grad_norm, g, steps));
        }
        if evals >= settings.max_inner {
            if grad_norm <= 10.0 * tol {
                return Ok(finish(grad_norm, g, steps));
            }
            return Err(CoreError::Convergence {
                what: "dual gradient descent".into(),
                residual: grad_norm,
                budget: settings.max_inner,
            });
        }
        let gsq = grad_norm * grad_norm;
        let bb = prev.as_ref().and_then(|(g_prev, grad_prev)| {
            let s = g.add_scaled(-1.0, g_prev).ok()?;
            let y = grad.add_scaled(-1.0, grad_prev).ok()?;
            let sy = s.frob_dot(&y).ok()?;
            let yy = y.norm_sq();
            (sy > 0.0 && yy > 0.0).then(|| sy / yy)
        });
        let mut step = bb
            .map(|b| b.clamp(1e-30, 1e12))
            .unwrap_or(init_step);
        loop {
            let trial = g.add_scaled(-step, &grad)?;
            let (tv, tgrad) = eval(&trial)?;
            evals += 1;
            let allow = 1e-12 * (1.0 + value.abs());
            if tv <= value - settings.armijo_c * step * gsq + allow {
                prev = Some((g, std::mem::replace(&mut grad, tgrad)));
                g = trial;
                value = tv;
                steps += 1;
                break;
            }
            step *= settings.backtrack;
            if step < 1e-18 || evals >= settings.max_inner {
                if grad_norm <= 10.0 * tol {
                    return Ok(finish(grad_norm, g, steps));
                }
                return Err(CoreError::Convergence {
                    what: "dual gradient descent (stalled line search)".into(),
                    residual: grad_norm,
                    budget: settings.max_inner,
                });
            }
        }
    }
}

/// Primal recovery of the code matrix from a dual optimum:
/// per sample column, `(anchor + D x_{<=d} G / tau - c 1)_+` via the
/// conjugate-prox gradient.
pub fn recover_lambda(
    g: &Tensor,
    d_prev: &SimplexStack,
    lambda_prev: &SimplexStack,
    tau: f64,
) -> Result<SimplexStack> {
    let c = d_prev.tensor().contract_leading(g)?;
    let r = lambda_prev.fiber_len();
    let n = lambda_prev.fibers();
    let anchors = anchors_of(lambda_prev.tensor(), r)?;
    let mut out = Tensor::zeros(vec![r, n])?;
    let mut col = vec![0.0; r];
    for t in 0..n {
        for j in 0..r {
            col[j] = c.data()[j * n + t] / tau;
        }
        let (lam, _) = fstar_grad(&col, &anchors[t])?;
        for j in 0..r {
            out.data_mut()[j * n + t] = lam.as_slice()[j];
        }
    }
    SimplexStack::with_tol(out, 1, 1e-8)
}

/// Primal recovery of the dictionary from a dual optimum: per atom,
/// `(anchor + G x_{d+1} Lambda^T / tau - c 1)_+` over the flattened grid.
pub fn recover_d(
    g: &Tensor,
    lambda: &SimplexStack,
    d_prev: &SimplexStack,
    tau: f64,
) -> Result<SimplexStack> {
    let p = d_prev.fiber_len();
    let n = lambda.fibers();
    let r = lambda.fiber_len();
    let g_flat = g.reshape(vec![p, n])?;
    let lam_flat = lambda.tensor().reshape(vec![r, n])?;
    let c = g_flat.contract_except(&lam_flat, Mode(1))?; // (P, r)
    let anchors = anchors_of(d_prev.tensor(), p)?;
    let mut out = Tensor::zeros(vec![p, r])?;
    let mut col = vec![0.0; p];
    for j in 0..r {
        for (i, slot) in col.iter_mut().enumerate() {
            *slot = c.data()[i * r + j] / tau;
        }
        let (lam, _) = fstar_grad(&col, &anchors[j])?;
        for i in 0..p {
            out.data_mut()[i * r + j] = lam.as_slice()[i];
        }
    }
    let shape = d_prev.tensor().shape().to_vec();
    SimplexStack::with_tol(out.into_reshaped(shape)?, d_prev.simplex_modes(), 1e-8)
}

/// Initial estimate: seeded Dirichlet(1) atoms and codes, or explicit values.
pub enum DwdlInit {
    Seeded(u64),
    Given {
        dict: SimplexStack,
        codes: SimplexStack,
    },
}

/// Result of a full dictionary-learning run.
pub struct DwdlRun {
    pub dict: SimplexStack,
    pub codes: SimplexStack,
    pub history: Vec<HistoryRow>,
}

/// Shared per-run state of the dual-solving engine: warm-started dual
/// iterates per block and warm Sinkhorn potentials for the objective monitor.
pub(crate) struct Engine<'a> {
    pub x_cols: Array2<f64>,
    pub cost: &'a GroundCost,
    pub settings: DualSolverSettings,
    pub warm_g: Vec<Option<Tensor>>,
    pub fw_warm: Option<SinkhornPotentials>,
}

impl<'a> Engine<'a> {
    pub fn new(problem: &'a DwdlProblem, blocks: usize) -> Result<Self> {
        Ok(Engine {
            x_cols: data_columns(&problem.data, &problem.cost)?,
            cost: &problem.cost,
            settings: problem.solver,
            warm_g: vec![None; blocks],
            fw_warm: None,
        })
    }

    fn g_zero(&self) -> Tensor {
        let (p, n) = self.x_cols.dim();
        Tensor::zeros(vec![p, n]).expect("valid shape")
    }

    /// Code-matrix block update: dual solve plus closed-form recovery.
    /// `dict` must already satisfy the strict-feasibility hypothesis (mix
    /// beforehand when needed); it is consumed as a flattened `(P, r)` view.
    pub fn lambda_update(
        &mut self,
        block: usize,
        dict: &Tensor,
        lam_prev: &Tensor,
        tau: f64,
        outer_iter: usize,
    ) -> Result<BlockUpdate> {
        let n = self.x_cols.ncols();
        let p = self.cost.n();
        let r = dict.len() / p;
        let eval = LambdaDual {
            x_cols: self.x_cols.clone(),
            dict: dict.reshape(vec![p, r])?,
            anchors: anchors_of(lam_prev, r)?,
            tau,
            cost: self.cost,
        };
        let g0 = self.warm_g[block].take().unwrap_or_else(|| self.g_zero());
        let tol = self.settings.tol_at(outer_iter);
        let report = solve_dual(
            |g| eval.eval(g),
            g0,
            tol,
            n,
            self.cost.gamma(),
            &self.settings,
        )?;
        let c = eval.dict.contract_leading(&report.g)?;
        let mut out = Tensor::zeros(vec![r, n])?;
        let mut col = vec![0.0; r];
        for t in 0..n {
            for j in 0..r {
                col[j] = c.data()[j * n + t] / tau;
            }
            let (lam, _) = fstar_grad(&col, &eval.anchors[t])?;
            for j in 0..r {
                out.data_mut()[j * n + t] = lam.as_slice()[j];
            }
        }
        self.warm_g[block] = Some(report.g.clone());
        Ok(BlockUpdate {
            value: out,
            delta_hat: report.delta_hat,
        })
    }

    /// Factor block update (dictionary update at `k = 1` over the flattened
    /// grid, CP factor update in general): dual solve plus recovery. Also
    /// returns the dual solve report.
    pub fn factor_update(
        &mut self,
        block: usize,
        lambda_bar: Tensor,
        k: Mode,
        u_prev: &Tensor,
        tau: f64,
        outer_iter: usize,
        g_shape: Vec<usize>,
    ) -> Result<(BlockUpdate, DualSolveReport)> {
        check_mixing_slices(&lambda_bar, k)?;
        let r = lambda_bar.shape()[k.0 - 1];
        let ik = u_prev.len() / r;
        let eval = FactorDual {
            x_cols: self.x_cols.clone(),
            lambda_bar,
            k,
            anchors: anchors_of(u_prev, ik)?,
            tau,
            cost: self.cost,
        };
        let g0 = match self.warm_g[block].take() {
            Some(g) => g.into_reshaped(g_shape.clone())?,
            None => self.g_zero().into_reshaped(g_shape.clone())?,
        };
        let tol = self.settings.tol_at(outer_iter);
        let report = solve_dual(
            |g| eval.eval(g),
            g0,
            tol,
            r,
            self.cost.gamma(),
            &self.settings,
        )?;
        let c = report.g.contract_except(&eval.lambda_bar, k)?;
        let mut out = Tensor::zeros(vec![ik, r])?;
        let mut col = vec![0.0; ik];
        for j in 0..r {
            for (i, slot) in col.iter_mut().enumerate() {
                *slot = c.data()[i * r + j] / tau;
            }
            let (lam, _) = fstar_grad(&col, &eval.anchors[j])?;
            for i in 0..ik {
                out.data_mut()[i * r + j] = lam.as_slice()[i];
            }
        }
        self.warm_g[block] = Some(report.g.clone());
        Ok((
            BlockUpdate {
                value: out,
                delta_hat: report.delta_hat,
            },
            report,
        ))
    }

    /// Monitoring objective at `(dict, codes)` plus the per-sample transport
    /// gradients, warm-starting Sinkhorn across calls. The logged objective is
    /// `f_W` shifted by its max-entropy floor `2 N gamma ln(P)` (the smallest
    /// constant making every `W_gamma` term nonnegative), so the driver sees a
    /// `[0, inf)`-valued objective as the descent analysis assumes; the shift
    /// changes no differences and no gradients.
    pub fn fw_eval(
        &mut self,
        dict: &SimplexStack,
        codes: &SimplexStack,
        data: &SimplexStack,
    ) -> Result<(f64, Tensor)> {
        // Tighter than the default Sinkhorn tolerance: the monitor feeds the
        // descent audit (slack 1e-6 on sums over all samples) and the
        // stationarity surrogate, both of which see potential noise directly.
        let (values, psi, _) = fw_values_and_potentials(
            dict,
            codes,
            data,
            self.cost,
            1e-9,
            Some(&mut self.fw_warm),
        )?;
        let (p, n) = self.x_cols.dim();
        let mut psi_t = Tensor::zeros(vec![p, n])?;
        for i in 0..p {
            for t in 0..n {
                psi_t.data_mut()[i * n + t] = psi[[i, t]];
            }
        }
        let shift = objective_offset(self.cost, n);
        Ok((values.iter().sum::<f64>() + shift, psi_t))
    }
}

/// Ensures the strict-feasibility hypotheses hold before a block solve,
/// epsilon-mixing with the uniform distribution only when violated.
pub(crate) fn ensure_dict_feasible(dict: &Tensor, p: usize) -> Tensor {
    if check_dict_last_mode_fibers(dict).is_ok() {
        dict.clone()
    } else {
        mix_columns_with_uniform(dict, p)
    }
}

pub(crate) fn ensure_codes_feasible(codes: &Tensor, r: usize) -> Tensor {
    let n = codes.len() / r;
    let flat = codes.reshape(vec![r, n]).expect("code matrix");
    if check_mixing_slices(&flat, Mode(1)).is_ok() {
        codes.clone()
    } else {
        mix_columns_with_uniform(codes, r)
    }
}

/// Runs the full alternating scheme: per outer iteration, the code matrix is
/// updated against the previous dictionary, then the dictionary against the
/// fresh codes, both through their duals inside the BCD-PR driver (m = 2).
pub fn dwdl_run(problem: &DwdlProblem, init: DwdlInit, opts: &RunOptions) -> Result<DwdlRun> {
    let p = problem.cost.n();
    let r = problem.rank;
    let n = problem.samples();
    let d = problem.grid().len();
    let grid = problem.grid().to_vec();

    let (d0, l0) = match init {
        DwdlInit::Seeded(seed) => {
            let mut rng = crate::synth::seeded_rng(seed);
            let mut d_shape = grid.clone();
            d_shape.push(r);
            let d0 = crate::synth::dirichlet_stack(&mut rng, p, r).into_reshaped(d_shape)?;
            let l0 = crate::synth::dirichlet_stack(&mut rng, r, n);
            (d0, l0)
        }
        DwdlInit::Given { dict, codes } => {
            if dict.fiber_len() != p || dict.fibers() != r {
                return Err(CoreError::Dimension(format!(
                    "initial dictionary is {}x{}, expected {p}x{r}",
                    dict.fiber_len(),
                    dict.fibers()
                )));
            }
            if codes.fiber_len() != r || codes.fibers() != n {
                return Err(CoreError::Dimension(format!(
                    "initial codes are {}x{}, expected {r}x{n}",
                    codes.fiber_len(),
                    codes.fibers()
                )));
            }
            (dict.into_tensor(), codes.into_tensor())
        }
    };

    let mut engine = Engine::new(problem, 2)?;
    let tau = problem.tau;
    let data = problem.data.clone();
    let cost_n = p;
    let grid_for_monitor = grid.clone();

    let shapes = vec![
        SimplexBlockShape {
            fiber_len: r,
            fibers: n,
        },
        SimplexBlockShape {
            fiber_len: p,
            fibers: r,
        },
    ];
    let smoothness = vec![1.0 / problem.cost.gamma(); 2];

    let engine_cell = std::cell::RefCell::new(&mut engine);
    let data_ref = &data;

    let mut block_problem = BlockProblem {
        shapes,
        smoothness,
        solver: Box::new(|ctx: BlockContext<'_>| {
            let mut eng = engine_cell.borrow_mut();
            match ctx.block {
                0 => {
                    let dict = ensure_dict_feasible(&ctx.blocks[1], cost_n);
                    eng.lambda_update(0, &dict, &ctx.blocks[0], ctx.tau, ctx.outer_iter)
                }
                _ => {
                    let codes = ensure_codes_feasible(&ctx.blocks[0], r);
                    let lambda_bar = codes.reshape(vec![r, n])?;
                    let u_prev = ctx.blocks[1].reshape(vec![cost_n, r])?;
                    let (update, _) = eng.factor_update(
                        1,
                        lambda_bar,
                        Mode(1),
                        &u_prev,
                        ctx.tau,
                        ctx.outer_iter,
                        vec![cost_n, n],
                    )?;
                    let mut d_shape = grid_for_monitor.clone();
                    d_shape.push(r);
                    Ok(BlockUpdate {
                        value: update.value.into_reshaped(d_shape)?,
                        delta_hat: update.delta_hat,
                    })
                }
            }
        }),
        monitor: Box::new(|blocks: &[Tensor]| {
            let mut eng = engine_cell.borrow_mut();
            let codes = SimplexStack::with_tol(blocks[0].clone(), 1, 1e-7)?;
            let dict = SimplexStack::with_tol(blocks[1].clone(), d, 1e-7)?;
            let (f, psi) = eng.fw_eval(&dict, &codes, data_ref)?;
            let dict_flat = blocks[1].reshape(vec![cost_n, r])?;
            let grad_lambda = dict_flat.contract_leading(&psi)?;
            let lam_flat = blocks[0].reshape(vec![r, n])?;
            let grad_dict = psi.contract_except(&lam_flat, Mode(1))?;
            Ok(Monitor {
                objective: f,
                block_grads: vec![grad_lambda, grad_dict],
            })
        }),
    };

    let mut d_shape = grid.clone();
    d_shape.push(r);
    let theta0 = vec![l0, d0.into_reshaped(d_shape)?];
    let (state, history) = bcdpr::run(&mut block_problem, theta0, &|_| tau, opts)?;
    drop(block_problem);

    let codes = SimplexStack::with_tol(state.blocks[0].clone(), 1, 1e-7)?;
    let dict = SimplexStack::with_tol(state.blocks[1].clone(), d, 1e-7)?;
    Ok(DwdlRun {
        dict,
        codes,
        history,
    })
}
