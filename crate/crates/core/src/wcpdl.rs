//! CP-structured Wasserstein dictionary learning: atoms are constrained to
//! products of one-dimensional distributions through loading matrices
//! `U^(k)`, each with simplex columns. Per outer iteration the code matrix is
//! updated against the current rank-one atoms, then each loading matrix in
//! turn via the same factor dual as the plain dictionary update, with the
//! mixing tensor `lambda_bar` built from the freshest other factors and the
//! transposed codes.

use crate::bcdpr::{
    self, BlockContext, BlockProblem, HistoryRow, Monitor, RunOptions, SimplexBlockShape,
};
use crate::dwdl::{
    ensure_codes_feasible, ensure_dict_feasible, DualSolveReport, DwdlProblem, Engine,
};
use crate::simplex::SimplexStack;
use crate::tensor::{cp_outer, Mode, Tensor};
use crate::{CoreError, Result};

/// Loading matrices plus codes: `U^(k)` has shape `(I_k, r)` with simplex
/// columns, codes are `(r, N)` with simplex columns. The derived rank-one
/// atoms are products of distributions and hence joint distributions
/// themselves (validated on construction).
#[derive(Clone, Debug)]
pub struct CpModel {
    factors: Vec<SimplexStack>,
    codes: SimplexStack,
}

impl CpModel {
    pub fn new(factors: Vec<SimplexStack>, codes: SimplexStack) -> Result<Self> {
        if factors.is_empty() {
            return Err(CoreError::Dimension("need at least one factor".into()));
        }
        let r = factors[0].fibers();
        for (k, f) in factors.iter().enumerate() {
            if f.simplex_modes() != 1 {
                return Err(CoreError::Dimension(format!(
                    "factor {} must be a stack of 1-D distributions",
                    k + 1
                )));
            }
            if f.fibers() != r {
                return Err(CoreError::Dimension(format!(
                    "factor {} has {} columns, expected {r}",
                    k + 1,
                    f.fibers()
                )));
            }
        }
        if codes.fiber_len() != r {
            return Err(CoreError::Dimension(format!(
                "codes have {}-dimensional columns, expected {r}",
                codes.fiber_len()
            )));
        }
        let model = CpModel { factors, codes };
        model.atoms()?; // validates the derived joint distributions
        Ok(model)
    }

    pub fn factors(&self) -> &[SimplexStack] {
        &self.factors
    }

    pub fn codes(&self) -> &SimplexStack {
        &self.codes
    }

    pub fn rank(&self) -> usize {
        self.factors[0].fibers()
    }

    pub fn order(&self) -> usize {
        self.factors.len()
    }

    /// Derived dictionary: the `(I_1..I_d, r)` stack of rank-one atoms.
    pub fn atoms(&self) -> Result<SimplexStack> {
        let refs: Vec<&Tensor> = self.factors.iter().map(|f| f.tensor()).collect();
        let atoms = cp_outer(&refs)?;
        SimplexStack::with_tol(atoms, self.factors.len(), 1e-9)
    }
}

/// Builds the mixing tensor for the factor-k subproblem: the outer product of
/// all factors except `U^(k)` together with the transposed codes, with the
/// last (column) mode inserted at position k. The result is shaped like the
/// data stack except that mode k holds the atom index.
pub fn build_lambda_bar(
    factors: &[SimplexStack],
    codes: &SimplexStack,
    k: Mode,
) -> Result<Tensor> {
    let tensors: Vec<&Tensor> = factors.iter().map(|f| f.tensor()).collect();
    lambda_bar_from_tensors(&tensors, codes.tensor(), k)
}

pub(crate) fn lambda_bar_from_tensors(
    factors: &[&Tensor],
    codes: &Tensor,
    k: Mode,
) -> Result<Tensor> {
    let d = factors.len();
    if k.0 == 0 || k.0 > d {
        return Err(CoreError::Dimension(format!(
            "factor index {} out of range for {d} factors",
            k.0
        )));
    }
    let codes_t = codes.extract_mode(Mode(1))?; // (N, r)
    let mut list: Vec<&Tensor> = Vec::with_capacity(d);
    for (j, f) in factors.iter().enumerate() {
        if j + 1 != k.0 {
            list.push(f);
        }
    }
    list.push(&codes_t);
    let out = cp_outer(&list)?; // (.., N, r)
    out.insert_mode(k)
}

/// One factor update through the dual: solves the factor-k subproblem at the
/// problem's base tolerance and recovers the loading matrix. Columns of the
/// result lie on the `I_k`-simplex.
pub fn update_factor(
    u_prev: &SimplexStack,
    lambda_bar: &Tensor,
    problem: &DwdlProblem,
    tau: f64,
    k: Mode,
) -> Result<(SimplexStack, DualSolveReport)> {
    let mut engine = Engine::new(problem, 1)?;
    let mut g_shape = problem.grid().to_vec();
    g_shape.push(problem.samples());
    let (update, report) = engine.factor_update(
        0,
        lambda_bar.clone(),
        k,
        u_prev.tensor(),
        tau,
        1,
        g_shape,
    )?;
    Ok((SimplexStack::with_tol(update.value, 1, 1e-8)?, report))
}

/// Initial estimate for the CP run.
pub enum WcpdlInit {
    Seeded(u64),
    Given(CpModel),
}

pub struct WcpdlRun {
    pub model: CpModel,
    pub history: Vec<HistoryRow>,
}

/// Runs CP-structured dictionary learning: per outer iteration the code
/// update (against atoms from the previous factors) then factor updates
/// k = 1..d in order, each consuming the freshest earlier factors; all inside
/// the BCD-PR driver with m = d + 1 blocks.
pub fn wcpdl_run(problem: &DwdlProblem, init: WcpdlInit, opts: &RunOptions) -> Result<WcpdlRun> {
    let grid = problem.grid().to_vec();
    let d = grid.len();
    let p = problem.cost.n();
    let r = problem.rank;
    let n = problem.samples();

    let (factors0, codes0) = match init {
        WcpdlInit::Seeded(seed) => {
            let mut rng = crate::synth::seeded_rng(seed);
            let factors: Vec<Tensor> = grid
                .iter()
                .map(|&ik| crate::synth::dirichlet_stack(&mut rng, ik, r))
                .collect();
            let codes = crate::synth::dirichlet_stack(&mut rng, r, n);
            (factors, codes)
        }
        WcpdlInit::Given(model) => {
            if model.order() != d || model.rank() != r || model.codes().fibers() != n {
                return Err(CoreError::Dimension(format!(
                    "initial model is order {} rank {} with {} samples, expected {d}/{r}/{n}",
                    model.order(),
                    model.rank(),
                    model.codes().fibers()
                )));
            }
            for (k, f) in model.factors().iter().enumerate() {
                if f.fiber_len() != grid[k] {
                    return Err(CoreError::Dimension(format!(
                        "factor {} has fibers of length {}, grid expects {}",
                        k + 1,
                        f.fiber_len(),
                        grid[k]
                    )));
                }
            }
            (
                model
                    .factors
                    .into_iter()
                    .map(SimplexStack::into_tensor)
                    .collect(),
                model.codes.into_tensor(),
            )
        }
    };

    let mut engine = Engine::new(problem, d + 1)?;
    let tau = problem.tau;
    let data = problem.data.clone();

    let mut shapes = vec![SimplexBlockShape {
        fiber_len: r,
        fibers: n,
    }];
    for &ik in &grid {
        shapes.push(SimplexBlockShape {
            fiber_len: ik,
            fibers: r,
        });
    }
    let smoothness = vec![1.0 / problem.cost.gamma(); d + 1];

    let engine_cell = std::cell::RefCell::new(&mut engine);
    let data_ref = &data;
    let grid_solver = grid.clone();
    let grid_monitor = grid.clone();

    let mut block_problem = BlockProblem {
        shapes,
        smoothness,
        solver: Box::new(|ctx: BlockContext<'_>| {
            let mut eng = engine_cell.borrow_mut();
            if ctx.block == 0 {
                let factor_refs: Vec<&Tensor> = ctx.blocks[1..].iter().collect();
                let atoms = cp_outer(&factor_refs)?;
                let dict = ensure_dict_feasible(&atoms, p);
                eng.lambda_update(0, &dict, &ctx.blocks[0], ctx.tau, ctx.outer_iter)
            } else {
                let k = Mode(ctx.block);
                let codes = ensure_codes_feasible(&ctx.blocks[0], r);
                let factor_refs: Vec<&Tensor> = ctx.blocks[1..].iter().collect();
                let lambda_bar = lambda_bar_from_tensors(
                    &factor_refs,
                    &codes.reshape(vec![r, n])?,
                    k,
                )?;
                let mut g_shape = grid_solver.clone();
                g_shape.push(n);
                let (update, _) = eng.factor_update(
                    ctx.block,
                    lambda_bar,
                    k,
                    &ctx.blocks[ctx.block],
                    ctx.tau,
                    ctx.outer_iter,
                    g_shape,
                )?;
                Ok(update)
            }
        }),
        monitor: Box::new(|blocks: &[Tensor]| {
            let mut eng = engine_cell.borrow_mut();
            let codes = SimplexStack::with_tol(blocks[0].clone(), 1, 1e-7)?;
            let factor_refs: Vec<&Tensor> = blocks[1..].iter().collect();
            let atoms = cp_outer(&factor_refs)?;
            let dict = SimplexStack::with_tol(atoms.clone(), grid_monitor.len(), 1e-7)?;
            let (f, psi) = eng.fw_eval(&dict, &codes, data_ref)?;
            let mut grads = Vec::with_capacity(blocks.len());
            grads.push(atoms.reshape(vec![p, r])?.contract_leading(&psi)?);
            let mut psi_shape = grid_monitor.clone();
            psi_shape.push(n);
            let psi_g = psi.reshape(psi_shape)?;
            for k in 1..blocks.len() {
                let lambda_bar = lambda_bar_from_tensors(
                    &factor_refs,
                    &blocks[0].reshape(vec![r, n])?,
                    Mode(k),
                )?;
                grads.push(psi_g.contract_except(&lambda_bar, Mode(k))?);
            }
            Ok(Monitor {
                objective: f,
                block_grads: grads,
            })
        }),
    };

    let mut theta0 = vec![codes0];
    theta0.extend(factors0);
    let (state, history) = bcdpr::run(&mut block_problem, theta0, &|_| tau, opts)?;
    drop(block_problem);

    let codes = SimplexStack::with_tol(state.blocks[0].clone(), 1, 1e-7)?;
    let factors: Result<Vec<SimplexStack>> = state.blocks[1..]
        .iter()
        .map(|t| SimplexStack::with_tol(t.clone(), 1, 1e-7))
        .collect();
    Ok(WcpdlRun {
        model: CpModel::new(factors?, codes)?,
        history,
    })
}

/// Initial dictionary for the barycenter solve.
pub enum BarycenterInit {
    Uniform,
    Seeded(u64),
    Given(SimplexStack),
}

/// Equal-weight entropic barycenter: the rank-1 problem with the code block
/// frozen at all-ones (the 1-simplex is a single point, so only dictionary
/// updates run). Returns the single atom and the run history.
pub fn barycenter(
    problem: &DwdlProblem,
    init: BarycenterInit,
    opts: &RunOptions,
) -> Result<(SimplexStack, Vec<HistoryRow>)> {
    if problem.rank != 1 {
        return Err(CoreError::Parameter(format!(
            "barycenter requires rank 1, got {}",
            problem.rank
        )));
    }
    let grid = problem.grid().to_vec();
    let d = grid.len();
    let p = problem.cost.n();
    let n = problem.samples();

    let d0 = match init {
        BarycenterInit::Uniform => Tensor::filled(vec![p, 1], 1.0 / p as f64)?,
        BarycenterInit::Seeded(seed) => {
            crate::synth::dirichlet_stack(&mut crate::synth::seeded_rng(seed), p, 1)
        }
        BarycenterInit::Given(stack) => {
            if stack.fiber_len() != p || stack.fibers() != 1 {
                return Err(CoreError::Dimension(format!(
                    "barycenter init must be a single {p}-point distribution"
                )));
            }
            stack.into_tensor().into_reshaped(vec![p, 1])?
        }
    };
    let ones = Tensor::filled(vec![1, n], 1.0)?;

    let mut engine = Engine::new(problem, 1)?;
    let data = problem.data.clone();
    let engine_cell = std::cell::RefCell::new(&mut engine);
    let data_ref = &data;
    let ones_solver = ones.clone();
    let ones_monitor = ones;
    let tau = problem.tau;

    let mut block_problem = BlockProblem {
        shapes: vec![SimplexBlockShape {
            fiber_len: p,
            fibers: 1,
        }],
        smoothness: vec![1.0 / problem.cost.gamma()],
        solver: Box::new(|ctx: BlockContext<'_>| {
            let mut eng = engine_cell.borrow_mut();
            let (update, _) = eng.factor_update(
                0,
                ones_solver.clone(),
                Mode(1),
                &ctx.blocks[0],
                ctx.tau,
                ctx.outer_iter,
                vec![p, n],
            )?;
            Ok(update)
        }),
        monitor: Box::new(|blocks: &[Tensor]| {
            let mut eng = engine_cell.borrow_mut();
            let dict = SimplexStack::with_tol(blocks[0].clone(), 1, 1e-7)?;
            let codes = SimplexStack::with_tol(ones_monitor.clone(), 1, 1e-7)?;
            let (f, psi) = eng.fw_eval(&dict, &codes, data_ref)?;
            let grad = psi.contract_except(&ones_monitor, Mode(1))?;
            Ok(Monitor {
                objective: f,
                block_grads: vec![grad],
            })
        }),
    };

    let (state, history) = bcdpr::run(&mut block_problem, vec![d0], &|_| tau, opts)?;
    drop(block_problem);
    let mut shape = grid.clone();
    shape.push(1);
    let atom = SimplexStack::with_tol(state.blocks[0].reshape(shape)?, d, 1e-7)?;
    Ok((atom, history))
}
