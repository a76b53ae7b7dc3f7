//! Gauss–Seidel block coordinate descent with proximal regularization: cyclic
//! block updates `theta^(i) <- argmin f_n^(i)(theta) + (tau_n/2)||theta -
//! theta_prev^(i)||^2` with inexact subproblem solves, plus the convergence
//! diagnostics logged per iteration — objective, block displacement, the
//! suboptimality surrogate `delta_hat`, and a Frank–Wolfe-gap stationarity
//! surrogate over the product of simplices.
//!
//! The driver is block-agnostic: each block is a stack of probability
//! simplices (a `fiber_len x fibers` tensor whose columns are distributions);
//! block solvers and the objective monitor are closures supplied by the
//! problem.

use crate::tensor::Tensor;
use crate::{CoreError, Result};
use std::io::Write;
use std::time::Instant;

/// Feasible-set descriptor of one block: `fibers` independent simplices of
/// dimension `fiber_len`, stored as a `fiber_len x fibers` row-major tensor.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct SimplexBlockShape {
    pub fiber_len: usize,
    pub fibers: usize,
}

impl SimplexBlockShape {
    pub fn len(&self) -> usize {
        self.fiber_len * self.fibers
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Result of one block subproblem solve.
pub struct BlockUpdate {
    /// New block value (feasible: every fiber on its simplex).
    pub value: Tensor,
    /// Upper-bound surrogate for the subproblem suboptimality gap.
    pub delta_hat: f64,
}

/// Inputs handed to a block solver: the freshest full iterate (earlier blocks
/// already updated this sweep), the block to update, and the proximal weight.
pub struct BlockContext<'a> {
    pub block: usize,
    pub blocks: &'a [Tensor],
    pub tau: f64,
    pub outer_iter: usize,
}

/// Objective value and per-block gradients at an iterate, used for the
/// history row and the stationarity surrogate.
pub struct Monitor {
    pub objective: f64,
    pub block_grads: Vec<Tensor>,
}

type SolverFn<'a> = dyn FnMut(BlockContext<'_>) -> Result<BlockUpdate> + 'a;
type MonitorFn<'a> = dyn FnMut(&[Tensor]) -> Result<Monitor> + 'a;

/// A block-structured problem: feasible shapes, per-block smoothness
/// estimates (the proximal weight must exceed them), a subproblem solver,
/// and an objective/gradient monitor.
pub struct BlockProblem<'a> {
    pub shapes: Vec<SimplexBlockShape>,
    pub smoothness: Vec<f64>,
    pub solver: Box<SolverFn<'a>>,
    pub monitor: Box<MonitorFn<'a>>,
}

impl BlockProblem<'_> {
    pub fn block_count(&self) -> usize {
        self.shapes.len()
    }
}

/// Current iterate of the driver.
#[derive(Clone, Debug)]
pub struct BcdState {
    pub blocks: Vec<Tensor>,
    pub iter: usize,
}

/// One logged iteration; `n = 0` is the initial point.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub n: usize,
    pub f: f64,
    pub disp_sq: f64,
    pub delta_hat: f64,
    pub stationarity: f64,
    pub tau: f64,
    pub seconds: f64,
}

/// Stopping rule: iteration budget plus the epsilon of the approximate
/// stationarity target (stop once `surrogate^2 <= station_tol`).
#[derive(Copy, Clone, Debug)]
pub struct RunOptions {
    pub max_iter: usize,
    pub station_tol: f64,
    /// Validate `tau > L^(i)` each iteration. Disabling voids the theory and
    /// is exposed only for experiments that sweep unsafe weights.
    pub enforce_tau: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            max_iter: 100,
            station_tol: 0.0,
            enforce_tau: true,
        }
    }
}

fn check_blocks(shapes: &[SimplexBlockShape], blocks: &[Tensor]) -> Result<()> {
    if shapes.len() != blocks.len() {
        return Err(CoreError::Dimension(format!(
            "{} blocks supplied for a {}-block problem",
            blocks.len(),
            shapes.len()
        )));
    }
    for (i, (s, b)) in shapes.iter().zip(blocks).enumerate() {
        if s.len() != b.len() {
            return Err(CoreError::Dimension(format!(
                "block {} has {} entries, feasible set expects {}",
                i + 1,
                b.len(),
                s.len()
            )));
        }
    }
    Ok(())
}

/// One cyclic sweep over all blocks, each update seeing the freshest earlier
/// blocks. Returns the squared displacement of the sweep and the largest
/// solver-reported suboptimality surrogate.
pub fn bcd_step(
    problem: &mut BlockProblem<'_>,
    state: &mut BcdState,
    tau: f64,
) -> Result<(f64, f64)> {
    let mut disp_sq = 0.0;
    let mut delta_hat: f64 = 0.0;
    state.iter += 1;
    for i in 0..problem.block_count() {
        let update = (problem.solver)(BlockContext {
            block: i,
            blocks: &state.blocks,
            tau,
            outer_iter: state.iter,
        })
        .map_err(|e| CoreError::Step {
            block: i + 1,
            source: Box::new(e),
        })?;
        if update.value.len() != state.blocks[i].len() {
            return Err(CoreError::Step {
                block: i + 1,
                source: Box::new(CoreError::Dimension(
                    "solver changed the block size".into(),
                )),
            });
        }
        let diff = update.value.add_scaled(-1.0, &state.blocks[i])?;
        disp_sq += diff.norm_sq();
        delta_hat = delta_hat.max(update.delta_hat);
        state.blocks[i] = update.value;
    }
    Ok((disp_sq, delta_hat))
}

/// Runs the driver from `theta0` with proximal weights `tau_schedule(n)`,
/// logging one history row per iteration (plus row 0 for the initial point).
pub fn run(
    problem: &mut BlockProblem<'_>,
    theta0: Vec<Tensor>,
    tau_schedule: &dyn Fn(usize) -> f64,
    opts: &RunOptions,
) -> Result<(BcdState, Vec<HistoryRow>)> {
    check_blocks(&problem.shapes, &theta0)?;
    let clock = Instant::now();
    let mut state = BcdState {
        blocks: theta0,
        iter: 0,
    };
    let mut history = Vec::with_capacity(opts.max_iter + 1);
    let m0 = (problem.monitor)(&state.blocks)?;
    let s0 = stationarity_surrogate(&state.blocks, &m0.block_grads, &problem.shapes);
    history.push(HistoryRow {
        n: 0,
        f: m0.objective,
        disp_sq: 0.0,
        delta_hat: 0.0,
        stationarity: s0,
        tau: 0.0,
        seconds: clock.elapsed().as_secs_f64(),
    });
    for n in 1..=opts.max_iter {
        let tau = tau_schedule(n);
        if opts.enforce_tau {
            for (i, &l) in problem.smoothness.iter().enumerate() {
                if !(tau > l) {
                    return Err(CoreError::Parameter(format!(
                        "proximal weight tau = {tau} at iteration {n} must exceed the \
                         block-{} smoothness estimate L = {l}",
                        i + 1
                    )));
                }
            }
        }
        let (disp_sq, delta_hat) = bcd_step(problem, &mut state, tau)?;
        let mon = (problem.monitor)(&state.blocks)?;
        let s = stationarity_surrogate(&state.blocks, &mon.block_grads, &problem.shapes);
        history.push(HistoryRow {
            n,
            f: mon.objective,
            disp_sq,
            delta_hat,
            stationarity: s,
            tau,
            seconds: clock.elapsed().as_secs_f64(),
        });
        if s * s <= opts.station_tol {
            break;
        }
    }
    Ok((state, history))
}

/// Frank–Wolfe-gap stationarity surrogate over the product of simplices:
/// `max(0, <-grad, s - theta> / ||s - theta||)` where `s` picks, per simplex
/// fiber, the vertex with the most negative gradient coordinate (lowest index
/// on ties); zero when `s = theta`. The normalized-infimum stationarity
/// measure is at least this surrogate (the infimum ranges over more
/// directions), which is the documented direction of the inequality.
pub fn stationarity_surrogate(
    blocks: &[Tensor],
    grads: &[Tensor],
    shapes: &[SimplexBlockShape],
) -> f64 {
    let mut inner = 0.0;
    let mut norm_sq = 0.0;
    for ((theta, grad), shape) in blocks.iter().zip(grads).zip(shapes) {
        let p = shape.fiber_len;
        let n = shape.fibers;
        let th = theta.data();
        let g = grad.data();
        for t in 0..n {
            let mut best = 0;
            for i in 1..p {
                if g[i * n + t] < g[best * n + t] {
                    best = i;
                }
            }
            for i in 0..p {
                let s_i = if i == best { 1.0 } else { 0.0 };
                let diff = s_i - th[i * n + t];
                inner += -g[i * n + t] * diff;
                norm_sq += diff * diff;
            }
        }
    }
    if norm_sq == 0.0 {
        return 0.0;
    }
    (inner / norm_sq.sqrt()).max(0.0)
}

/// A history row breaking the per-iteration descent inequality
/// `f(n-1) - f(n) >= (tau/2) disp^2 - m delta_hat` by more than the slack.
#[derive(Clone, Debug, PartialEq)]
pub struct MonotonicityViolation {
    pub n: usize,
    pub slack: f64,
}

/// Audits the descent inequality over a logged run; returns every iteration
/// whose slack falls below `-slack_tol`.
pub fn audit_forward_monotonicity(
    history: &[HistoryRow],
    block_count: usize,
    slack_tol: f64,
) -> Vec<MonotonicityViolation> {
    let m = block_count as f64;
    let mut out = Vec::new();
    for w in history.windows(2) {
        let (prev, cur) = (&w[0], &w[1]);
        if cur.n != prev.n + 1 {
            continue;
        }
        let slack = (prev.f - cur.f) - 0.5 * cur.tau * cur.disp_sq + m * cur.delta_hat;
        if slack < -slack_tol {
            out.push(MonotonicityViolation { n: cur.n, slack });
        }
    }
    out
}

/// Left- and right-hand side of the summed displacement bound
/// `sum tau disp^2 <= f(0) + m sum delta_hat`, for end-of-run checks.
pub fn displacement_bound(history: &[HistoryRow], block_count: usize) -> (f64, f64) {
    let f0 = history.first().map(|r| r.f).unwrap_or(0.0);
    let lhs: f64 = history.iter().skip(1).map(|r| r.tau * r.disp_sq).sum();
    let delta_sum: f64 = history.iter().skip(1).map(|r| r.delta_hat).sum();
    (lhs, f0 + block_count as f64 * delta_sum)
}

/// Writes history rows as CSV with the fixed schema
/// `n,f,disp_sq,delta_hat,stationarity,tau,seconds`.
pub fn write_history_csv<W: Write>(rows: &[HistoryRow], w: &mut W) -> Result<()> {
    writeln!(w, "n,f,disp_sq,delta_hat,stationarity,tau,seconds")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.n, r.f, r.disp_sq, r.delta_hat, r.stationarity, r.tau, r.seconds
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simplex::project_simplex;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Separable quadratic `||x - a||^2 + ||y - b||^2` over two simplices,
    /// with closed-form exact block prox solves.
    struct SeparableQuadratic {
        a: Vec<f64>,
        b: Vec<f64>,
    }

    impl SeparableQuadratic {
        fn problem(&self) -> BlockProblem<'_> {
            let targets = [self.a.clone(), self.b.clone()];
            let shapes = vec![
                SimplexBlockShape {
                    fiber_len: self.a.len(),
                    fibers: 1,
                },
                SimplexBlockShape {
                    fiber_len: self.b.len(),
                    fibers: 1,
                },
            ];
            let targets_m = targets.clone();
            BlockProblem {
                shapes,
                smoothness: vec![2.0, 2.0],
                solver: Box::new(move |ctx: BlockContext<'_>| {
                    // argmin ||t - a||^2 + tau/2 ||t - prev||^2 over the simplex
                    let a = &targets[ctx.block];
                    let prev = ctx.blocks[ctx.block].data();
                    let tau = ctx.tau;
                    let unconstrained: Vec<f64> = a
                        .iter()
                        .zip(prev)
                        .map(|(&ai, &pi)| (2.0 * ai + tau * pi) / (2.0 + tau))
                        .collect();
                    let proj = project_simplex(&unconstrained)?;
                    Ok(BlockUpdate {
                        value: Tensor::new(vec![a.len()], proj.into_vec())?,
                        delta_hat: 0.0,
                    })
                }),
                monitor: Box::new(move |blocks: &[Tensor]| {
                    let mut f = 0.0;
                    let mut grads = Vec::new();
                    for (t, blk) in targets_m.iter().zip(blocks) {
                        let mut g = Vec::with_capacity(t.len());
                        for (&ti, &xi) in t.iter().zip(blk.data()) {
                            f += (xi - ti) * (xi - ti);
                            g.push(2.0 * (xi - ti));
                        }
                        grads.push(Tensor::new(vec![t.len()], g).unwrap());
                    }
                    Ok(Monitor {
                        objective: f,
                        block_grads: grads,
                    })
                }),
            }
        }

        fn start(&self) -> Vec<Tensor> {
            vec![
                Tensor::new(vec![self.a.len()], uniform(self.a.len())).unwrap(),
                Tensor::new(vec![self.b.len()], uniform(self.b.len())).unwrap(),
            ]
        }
    }

    fn uniform(n: usize) -> Vec<f64> {
        vec![1.0 / n as f64; n]
    }

    fn sq(prob_a: &[f64], prob_b: &[f64]) -> SeparableQuadratic {
        SeparableQuadratic {
            a: prob_a.to_vec(),
            b: prob_b.to_vec(),
        }
    }

    #[test]
    fn separable_quadratic_with_zero_tau_converges_in_one_sweep() {
        let q = sq(&[0.9, 0.4, -0.3], &[0.1, 0.8]);
        let mut problem = q.problem();
        let opts = RunOptions {
            max_iter: 1,
            station_tol: 0.0,
            enforce_tau: false,
        };
        let (state, _) = run(&mut problem, q.start(), &|_| 0.0, &opts).unwrap();
        let pa = project_simplex(&q.a).unwrap();
        let pb = project_simplex(&q.b).unwrap();
        for (x, y) in state.blocks[0].data().iter().zip(pa.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in state.blocks[1].data().iter().zip(pb.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn single_block_prox_point_matches_projected_gradient_oracle() {
        // m = 1: proximal point on one simplex for ||x - a||^2.
        let a = vec![0.7, 0.5, -0.1, 0.2];
        let shapes = vec![SimplexBlockShape {
            fiber_len: 4,
            fibers: 1,
        }];
        let a_solver = a.clone();
        let a_mon = a.clone();
        let mut problem = BlockProblem {
            shapes,
            smoothness: vec![2.0],
            solver: Box::new(move |ctx: BlockContext<'_>| {
                let prev = ctx.blocks[0].data();
                let unconstrained: Vec<f64> = a_solver
                    .iter()
                    .zip(prev)
                    .map(|(&ai, &pi)| (2.0 * ai + ctx.tau * pi) / (2.0 + ctx.tau))
                    .collect();
                Ok(BlockUpdate {
                    value: Tensor::new(vec![4], project_simplex(&unconstrained)?.into_vec())?,
                    delta_hat: 0.0,
                })
            }),
            monitor: Box::new(move |blocks: &[Tensor]| {
                let x = blocks[0].data();
                let f: f64 = x
                    .iter()
                    .zip(&a_mon)
                    .map(|(&xi, &ai)| (xi - ai) * (xi - ai))
                    .sum();
                let g: Vec<f64> = x
                    .iter()
                    .zip(&a_mon)
                    .map(|(&xi, &ai)| 2.0 * (xi - ai))
                    .collect();
                Ok(Monitor {
                    objective: f,
                    block_grads: vec![Tensor::new(vec![4], g).unwrap()],
                })
            }),
        };
        let opts = RunOptions {
            max_iter: 400,
            station_tol: 0.0,
            enforce_tau: true,
        };
        let theta0 = vec![Tensor::new(vec![4], uniform(4)).unwrap()];
        let (state, _) = run(&mut problem, theta0, &|_| 3.0, &opts).unwrap();

        // Projected-gradient oracle run to high precision.
        let mut x = uniform(4);
        for _ in 0..200_000 {
            let step = 0.25;
            let moved: Vec<f64> = x
                .iter()
                .zip(&a)
                .map(|(&xi, &ai)| xi - step * 2.0 * (xi - ai))
                .collect();
            x = project_simplex(&moved).unwrap().into_vec();
        }
        for (got, want) in state.blocks[0].data().iter().zip(&x) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn huge_tau_freezes_the_iterate() {
        let q = sq(&[0.9, 0.4, -0.3], &[0.1, 0.8]);
        let mut problem = q.problem();
        let opts = RunOptions {
            max_iter: 3,
            station_tol: 0.0,
            enforce_tau: true,
        };
        let (_, history) = run(&mut problem, q.start(), &|_| 1e9, &opts).unwrap();
        for row in history.iter().skip(1) {
            assert!(row.disp_sq.sqrt() < 1e-6, "prox did not dominate");
        }
    }

    #[test]
    fn stationary_start_stops_after_one_sweep() {
        let q = sq(&[0.9, 0.4, -0.3], &[0.1, 0.8]);
        let mut problem = q.problem();
        let start = vec![
            Tensor::new(vec![3], project_simplex(&q.a).unwrap().into_vec()).unwrap(),
            Tensor::new(vec![2], project_simplex(&q.b).unwrap().into_vec()).unwrap(),
        ];
        let opts = RunOptions {
            max_iter: 50,
            station_tol: 1e-16,
            enforce_tau: false,
        };
        let (state, history) = run(&mut problem, start, &|_| 0.0, &opts).unwrap();
        assert_eq!(state.iter, 1, "should stop at n = 1");
        assert_eq!(history.len(), 2);
    }

    #[test]
    fn history_length_is_bounded_by_budget() {
        let q = sq(&[0.9, 0.4, -0.3], &[0.1, 0.8]);
        let mut problem = q.problem();
        let opts = RunOptions {
            max_iter: 7,
            station_tol: 0.0,
            enforce_tau: true,
        };
        let (_, history) = run(&mut problem, q.start(), &|_| 3.0, &opts).unwrap();
        assert!(history.len() <= 8);
        // max_iter = 0 leaves just the initial row.
        let mut problem = q.problem();
        let opts = RunOptions { max_iter: 0, ..opts };
        let (state, history) = run(&mut problem, q.start(), &|_| 3.0, &opts).unwrap();
        assert_eq!(history.len(), 1);
        assert_eq!(state.iter, 0);
    }

    #[test]
    fn rate_trend_quantity_stays_bounded() {
        let q = sq(&[0.9, 0.4, -0.3], &[0.1, 0.8]);
        let mut problem = q.problem();
        let opts = RunOptions {
            max_iter: 500,
            station_tol: 0.0,
            enforce_tau: true,
        };
        let (_, history) = run(&mut problem, q.start(), &|_| 3.0, &opts).unwrap();
        let trend = |upto: usize| -> f64 {
            let mut running_min = f64::INFINITY;
            let mut v = 0.0;
            for row in history.iter().skip(1).take(upto) {
                running_min = running_min.min(row.stationarity * row.stationarity);
                let n = row.n as f64;
                v = running_min * n / ((n + 1.0).ln() * (n + 1.0).ln());
            }
            v
        };
        let early = trend(50);
        let late = trend(500);
        assert!(
            late <= 2.0 * early + 1e-12,
            "rate trend diverges: {late} vs {early}"
        );
    }

    #[test]
    fn stationarity_surrogate_hand_cases() {
        // Interior stationary point: zero gradient -> 0.
        let blocks = vec![Tensor::new(vec![3], uniform(3)).unwrap()];
        let grads = vec![Tensor::zeros(vec![3]).unwrap()];
        let shapes = vec![SimplexBlockShape {
            fiber_len: 3,
            fibers: 1,
        }];
        assert_eq!(stationarity_surrogate(&blocks, &grads, &shapes), 0.0);

        // Linear objective with gradient -e1 at the uniform point.
        for r in [2usize, 3, 5, 11] {
            let blocks = vec![Tensor::new(vec![r], uniform(r)).unwrap()];
            let mut g = vec![0.0; r];
            g[0] = -1.0;
            let grads = vec![Tensor::new(vec![r], g).unwrap()];
            let shapes = vec![SimplexBlockShape {
                fiber_len: r,
                fibers: 1,
            }];
            let got = stationarity_surrogate(&blocks, &grads, &shapes);
            let expect = ((r - 1) as f64 / r as f64).sqrt();
            assert!((got - expect).abs() < 1e-12, "r={r}: {got} vs {expect}");
        }
    }

    #[test]
    fn stationarity_surrogate_invariant_to_per_fiber_shifts() {
        let mut r = ChaCha8Rng::seed_from_u64(55);
        let p = 4;
        let n = 3;
        // Uniform fibers stored fiber-major.
        let theta = vec![1.0 / p as f64; p * n];
        let g: Vec<f64> = (0..p * n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let blocks = vec![Tensor::new(vec![p, n], theta).unwrap()];
        let shapes = vec![SimplexBlockShape {
            fiber_len: p,
            fibers: n,
        }];
        let base = stationarity_surrogate(
            &blocks,
            &[Tensor::new(vec![p, n], g.clone()).unwrap()],
            &shapes,
        );
        let mut shifted = g.clone();
        for t in 0..n {
            let c = r.gen_range(-5.0..5.0);
            for i in 0..p {
                shifted[i * n + t] += c;
            }
        }
        let with_shift = stationarity_surrogate(
            &blocks,
            &[Tensor::new(vec![p, n], shifted).unwrap()],
            &shapes,
        );
        assert!((base - with_shift).abs() < 1e-10);
    }

    #[test]
    fn audit_flags_only_corrupted_rows() {
        let q = sq(&[0.9, 0.4, -0.3], &[0.1, 0.8]);
        let mut problem = q.problem();
        let opts = RunOptions {
            max_iter: 30,
            station_tol: 0.0,
            enforce_tau: true,
        };
        let (_, mut history) = run(&mut problem, q.start(), &|_| 3.0, &opts).unwrap();
        assert!(audit_forward_monotonicity(&history, 2, 1e-6).is_empty());

        let (lhs, rhs) = displacement_bound(&history, 2);
        assert!(lhs <= rhs + 1e-4, "displacement bound fails: {lhs} > {rhs}");

        history[5].f += 1.0; // breaks descent into row 5
        let violations = audit_forward_monotonicity(&history, 2, 1e-6);
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].n, 5);
    }

    #[test]
    fn tau_guard_rejects_small_weights() {
        let q = sq(&[0.9, 0.4, -0.3], &[0.1, 0.8]);
        let mut problem = q.problem();
        let opts = RunOptions {
            max_iter: 5,
            station_tol: 0.0,
            enforce_tau: true,
        };
        let err = run(&mut problem, q.start(), &|_| 1.0, &opts).unwrap_err();
        assert!(matches!(err, CoreError::Parameter(_)));
    }

    #[test]
    fn history_csv_schema() {
        let rows = vec![HistoryRow {
            n: 0,
            f: 1.5,
            disp_sq: 0.0,
            delta_hat: 0.0,
            stationarity: 0.25,
            tau: 0.0,
            seconds: 0.0,
        }];
        let mut buf = Vec::new();
        write_history_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("n,f,disp_sq,delta_hat,stationarity,tau,seconds\n"));
        assert!(text.contains("0,1.5,0,0,0.25,0,0"));
    }
}
