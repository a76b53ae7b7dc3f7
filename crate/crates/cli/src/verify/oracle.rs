//! Runtime primal oracle used by the verification suite: hand-rolled
//! log-domain Sinkhorn for transport values/gradients, bisection simplex
//! projection, and backtracking projected gradient descent on the proximal
//! subproblems. Solves the same subproblems as the dual route through an
//! entirely separate code path, then reports the disagreement.

use wdl_core::dwdl::{
    dual_objective_d, dual_objective_lambda, recover_d, recover_lambda, solve_dual,
    DualSolverSettings, DwdlProblem,
};
use wdl_core::ot::{build_ground_cost, GroundCost, MetricKind};
use wdl_core::simplex::SimplexStack;
use wdl_core::synth::{dirichlet_stack, seeded_rng};
use wdl_core::tensor::{cp_outer, Mode, Tensor};
use wdl_core::wcpdl::{build_lambda_bar, update_factor};

fn lse(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

struct Pots {
    phi: Vec<f64>,
    psi: Vec<f64>,
}

fn sinkhorn_value_psi(
    a: &[f64],
    b: &[f64],
    cost: &GroundCost,
    pots: &mut Pots,
) -> (f64, Vec<f64>) {
    let p = a.len();
    let gamma = cost.gamma();
    let m2 = cost.cost_matrix();
    let mut terms = vec![0.0; p];
    for _ in 0..20_000 {
        for i in 0..p {
            for j in 0..p {
                terms[j] = (pots.psi[j] - m2[[i, j]]) / gamma;
            }
            pots.phi[i] = gamma * (a[i].ln() - lse(&terms));
        }
        for j in 0..p {
            for i in 0..p {
                terms[i] = (pots.phi[i] - m2[[i, j]]) / gamma;
            }
            pots.psi[j] = gamma * (b[j].ln() - lse(&terms));
        }
        let mut viol = 0.0;
        let mut value = 0.0;
        for i in 0..p {
            for j in 0..p {
                terms[j] = (pots.psi[j] - m2[[i, j]]) / gamma;
            }
            let row = ((pots.phi[i] / gamma) + lse(&terms)).exp();
            viol += (row - a[i]).abs();
            value += pots.phi[i] * row + pots.psi[i] * b[i];
        }
        if viol < 1e-12 {
            return (value, pots.psi.clone());
        }
    }
    panic!("oracle Sinkhorn did not converge");
}

fn project_bisect(v: &[f64]) -> Vec<f64> {
    let mut lo = v.iter().cloned().fold(f64::INFINITY, f64::min) - 1.0;
    let mut hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let s: f64 = v.iter().map(|&x| (x - mid).max(0.0)).sum();
        if s > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c = 0.5 * (lo + hi);
    v.iter().map(|&x| (x - c).max(0.0)).collect()
}

/// Backtracking projected gradient descent over a stack of simplices.
/// `recon` maps the block to per-sample reconstruction columns; `pull`
/// applies the adjoint to the per-sample transport gradients.
#[allow(clippy::too_many_arguments)]
fn pgd<R, A>(
    x_cols: &[Vec<f64>],
    cost: &GroundCost,
    anchor: &[f64],
    fiber_len: usize,
    fibers: usize,
    tau: f64,
    recon: R,
    pull: A,
) -> (Vec<f64>, f64)
where
    R: Fn(&[f64]) -> Vec<Vec<f64>>,
    A: Fn(&[Vec<f64>]) -> Vec<f64>,
{
    let n = x_cols.len();
    let p = cost.n();
    let mut pots: Vec<Pots> = (0..n)
        .map(|_| Pots {
            phi: vec![0.0; p],
            psi: vec![0.0; p],
        })
        .collect();
    let mut theta = anchor.to_vec();
    let objective = |theta: &[f64], pots: &mut Vec<Pots>| -> (f64, Vec<Vec<f64>>) {
        let cols = recon(theta);
        let mut value = 0.0;
        let mut psis = Vec::with_capacity(n);
        for t in 0..n {
            let (w, psi) = sinkhorn_value_psi(&x_cols[t], &cols[t], cost, &mut pots[t]);
            value += w;
            psis.push(psi);
        }
        let prox: f64 = theta
            .iter()
            .zip(anchor)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        (value + 0.5 * tau * prox, psis)
    };
    let (mut fval, mut psis) = objective(&theta, &mut pots);
    let mut step = 1.0 / tau;
    for _ in 0..50_000 {
        let mut grad = pull(&psis);
        for (g, (&th, &an)) in grad.iter_mut().zip(theta.iter().zip(anchor)) {
            *g += tau * (th - an);
        }
        let mut accepted = false;
        while step > 1e-13 {
            let mut trial = vec![0.0; fiber_len * fibers];
            for t in 0..fibers {
                let col: Vec<f64> = (0..fiber_len)
                    .map(|i| theta[i * fibers + t] - step * grad[i * fibers + t])
                    .collect();
                let proj = project_bisect(&col);
                for (i, &v) in proj.iter().enumerate() {
                    trial[i * fibers + t] = v;
                }
            }
            let (ftrial, ptrial) = objective(&trial, &mut pots);
            if ftrial <= fval + 1e-13 * (1.0 + fval.abs()) {
                let moved = theta
                    .iter()
                    .zip(&trial)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                theta = trial;
                fval = ftrial;
                psis = ptrial;
                accepted = true;
                if moved / step < 1e-9 {
                    return (theta, fval);
                }
                step = (step * 1.3).min(20.0 / tau);
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return (theta, fval);
        }
    }
    (theta, fval)
}

/// Measured disagreements between the dual route and the primal oracle.
pub struct InstanceCheck {
    pub lambda_inf_err: f64,
    pub dict_inf_err: f64,
    pub factor_inf_errs: Vec<f64>,
    pub duality_gap: f64,
}

/// Builds a random instance, solves every block subproblem by both routes,
/// and reports the largest entrywise disagreement and duality gap.
pub fn check_tiny_instance(
    grid: &[usize],
    rank: usize,
    samples: usize,
    gamma: f64,
    seed: u64,
) -> InstanceCheck {
    let mut rng = seeded_rng(seed);
    let p: usize = grid.iter().product();
    let cost = build_ground_cost(grid, MetricKind::Euclidean, gamma).unwrap();
    let tau = 1.1 / gamma;
    let mut data_shape = grid.to_vec();
    data_shape.push(samples);
    let data = SimplexStack::new(
        dirichlet_stack(&mut rng, p, samples)
            .into_reshaped(data_shape)
            .unwrap(),
        grid.len(),
    )
    .unwrap();
    let factors: Vec<SimplexStack> = grid
        .iter()
        .map(|&ik| SimplexStack::new(dirichlet_stack(&mut rng, ik, rank), 1).unwrap())
        .collect();
    let refs: Vec<&Tensor> = factors.iter().map(|f| f.tensor()).collect();
    let dict = SimplexStack::new(cp_outer(&refs).unwrap(), grid.len()).unwrap();
    let codes = SimplexStack::new(dirichlet_stack(&mut rng, rank, samples), 1).unwrap();

    let settings = DualSolverSettings {
        tol0: 1e-10,
        max_inner: 60_000,
        ..Default::default()
    };
    let x_cols: Vec<Vec<f64>> = (0..samples).map(|t| data.fiber(t)).collect();
    let d_flat = dict.tensor().data().to_vec(); // (P, r)
    let lam_flat = codes.tensor().data().to_vec(); // (r, N)

    // Code subproblem by both routes.
    let g0 = Tensor::zeros(data.tensor().shape().to_vec()).unwrap();
    let report = solve_dual(
        |g| dual_objective_lambda(g, &dict, &codes, tau, &data, &cost),
        g0.clone(),
        1e-10,
        samples,
        gamma,
        &settings,
    )
    .unwrap();
    let lam_dual = recover_lambda(&report.g, &dict, &codes, tau).unwrap();
    let (dual_value, _) =
        dual_objective_lambda(&report.g, &dict, &codes, tau, &data, &cost).unwrap();
    let (lam_oracle, primal_value) = {
        let d = d_flat.clone();
        let (r, n) = (rank, samples);
        pgd(
            &x_cols,
            &cost,
            codes.tensor().data(),
            r,
            n,
            tau,
            |lam: &[f64]| {
                (0..n)
                    .map(|t| {
                        (0..p)
                            .map(|pi| (0..r).map(|j| d[pi * r + j] * lam[j * n + t]).sum())
                            .collect()
                    })
                    .collect()
            },
            |psis: &[Vec<f64>]| {
                let mut g = vec![0.0; r * n];
                for (t, psi) in psis.iter().enumerate() {
                    for j in 0..r {
                        g[j * n + t] = (0..p).map(|pi| d[pi * r + j] * psi[pi]).sum();
                    }
                }
                g
            },
        )
    };
    let lambda_inf_err = lam_dual
        .tensor()
        .data()
        .iter()
        .zip(&lam_oracle)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    let mut duality_gap = (primal_value + dual_value).abs();

    // Dictionary subproblem by both routes, against the fresh codes.
    let fresh = lam_dual;
    let report_d = solve_dual(
        |g| dual_objective_d(g, &fresh, &dict, tau, &data, &cost),
        g0,
        1e-10,
        rank,
        gamma,
        &settings,
    )
    .unwrap();
    let d_dual = recover_d(&report_d.g, &fresh, &dict, tau).unwrap();
    let (dual_value_d, _) =
        dual_objective_d(&report_d.g, &fresh, &dict, tau, &data, &cost).unwrap();
    let (d_oracle, primal_value_d) = {
        let lam = fresh.tensor().data().to_vec();
        let (r, n) = (rank, samples);
        pgd(
            &x_cols,
            &cost,
            dict.tensor().data(),
            p,
            r,
            tau,
            |dd: &[f64]| {
                (0..n)
                    .map(|t| {
                        (0..p)
                            .map(|pi| (0..r).map(|j| dd[pi * r + j] * lam[j * n + t]).sum())
                            .collect()
                    })
                    .collect()
            },
            |psis: &[Vec<f64>]| {
                let mut g = vec![0.0; p * r];
                for (t, psi) in psis.iter().enumerate() {
                    for j in 0..r {
                        for pi in 0..p {
                            g[pi * r + j] += psi[pi] * lam[j * n + t];
                        }
                    }
                }
                g
            },
        )
    };
    let dict_inf_err = d_dual
        .tensor()
        .data()
        .iter()
        .zip(&d_oracle)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    duality_gap = duality_gap.max((primal_value_d + dual_value_d).abs());
    let _ = lam_flat;

    // CP factor subproblems (multi-mode grids only).
    let mut factor_inf_errs = Vec::new();
    if grid.len() >= 2 {
        let problem = DwdlProblem::new(data.clone(), rank, cost.clone(), tau, settings).unwrap();
        for k in 1..=grid.len() {
            let lambda_bar = build_lambda_bar(&factors, &codes, Mode(k)).unwrap();
            let (u_new, _) =
                update_factor(&factors[k - 1], &lambda_bar, &problem, tau, Mode(k)).unwrap();
            let shape = lambda_bar.shape().to_vec();
            let k0 = k - 1;
            let pre: usize = shape[..k0].iter().product();
            let r = shape[k0];
            let post_all: usize = shape[k0 + 1..].iter().product();
            let ik = grid[k0];
            let lb = lambda_bar.data().to_vec();
            let n = samples;
            let post_grid = post_all / n;
            let (u_oracle, _) = pgd(
                &x_cols,
                &cost,
                factors[k - 1].tensor().data(),
                ik,
                r,
                tau,
                |u: &[f64]| {
                    let mut full = vec![0.0; pre * ik * post_all];
                    for a in 0..pre {
                        for i in 0..ik {
                            for b in 0..post_all {
                                let mut acc = 0.0;
                                for rho in 0..r {
                                    acc += lb[(a * r + rho) * post_all + b] * u[i * r + rho];
                                }
                                full[(a * ik + i) * post_all + b] = acc;
                            }
                        }
                    }
                    (0..n)
                        .map(|t| (0..p).map(|pi| full[pi * n + t]).collect())
                        .collect()
                },
                |psis: &[Vec<f64>]| {
                    let mut g = vec![0.0; ik * r];
                    for (t, psi) in psis.iter().enumerate() {
                        for a in 0..pre {
                            for i in 0..ik {
                                for bg in 0..post_grid {
                                    let b = bg * n + t;
                                    let pflat = (a * ik + i) * post_grid + bg;
                                    for rho in 0..r {
                                        g[i * r + rho] +=
                                            lb[(a * r + rho) * post_all + b] * psi[pflat];
                                    }
                                }
                            }
                        }
                    }
                    g
                },
            );
            let err = u_new
                .tensor()
                .data()
                .iter()
                .zip(&u_oracle)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            factor_inf_errs.push(err);
        }
    }

    InstanceCheck {
        lambda_inf_err,
        dict_inf_err,
        factor_inf_errs,
        duality_gap,
    }
}
