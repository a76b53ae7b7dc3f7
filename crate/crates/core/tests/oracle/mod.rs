//! Test-local primal machinery: a from-scratch log-domain Sinkhorn for
//! transport values and gradients, bisection simplex projection, and
//! backtracking projected gradient descent on the proximal subproblems.
//! Nothing here touches the dual-route code paths being verified.

use ndarray::ArrayView2;
use wdl_core::dwdl::{DualSolverSettings, DwdlProblem};
use wdl_core::ot::{build_ground_cost, GroundCost, MetricKind};
use wdl_core::simplex::SimplexStack;
use wdl_core::synth::{dirichlet_stack, seeded_rng};
use wdl_core::tensor::{cp_outer, Tensor};

pub struct TinyInstance {
    pub data: SimplexStack,
    pub dict: SimplexStack,
    pub codes: SimplexStack,
    pub cost: GroundCost,
    pub tau: f64,
    grid: Vec<usize>,
    factors: Option<Vec<SimplexStack>>,
}

impl TinyInstance {
    pub fn random(grid: &[usize], rank: usize, samples: usize, gamma: f64, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let p: usize = grid.iter().product();
        let cost = build_ground_cost(grid, MetricKind::Euclidean, gamma).unwrap();
        let mut data_shape = grid.to_vec();
        data_shape.push(samples);
        let data = SimplexStack::new(
            dirichlet_stack(&mut rng, p, samples)
                .into_reshaped(data_shape)
                .unwrap(),
            grid.len(),
        )
        .unwrap();
        let mut dict_shape = grid.to_vec();
        dict_shape.push(rank);
        let dict = SimplexStack::new(
            dirichlet_stack(&mut rng, p, rank)
                .into_reshaped(dict_shape)
                .unwrap(),
            grid.len(),
        )
        .unwrap();
        let codes = SimplexStack::new(dirichlet_stack(&mut rng, rank, samples), 1).unwrap();
        TinyInstance {
            data,
            dict,
            codes,
            cost,
            tau: 1.1 / gamma,
            grid: grid.to_vec(),
            factors: None,
        }
    }

    /// Same, but the dictionary is built from CP loading matrices.
    pub fn random_cp(grid: &[usize], rank: usize, samples: usize, gamma: f64, seed: u64) -> Self {
        let mut base = Self::random(grid, rank, samples, gamma, seed);
        let mut rng = seeded_rng(seed.wrapping_add(1000));
        let factors: Vec<SimplexStack> = grid
            .iter()
            .map(|&ik| SimplexStack::new(dirichlet_stack(&mut rng, ik, rank), 1).unwrap())
            .collect();
        let refs: Vec<&Tensor> = factors.iter().map(|f| f.tensor()).collect();
        let atoms = cp_outer(&refs).unwrap();
        base.dict = SimplexStack::new(atoms, grid.len()).unwrap();
        base.factors = Some(factors);
        base
    }

    pub fn samples(&self) -> usize {
        self.data.fibers()
    }

    pub fn rank(&self) -> usize {
        self.dict.fibers()
    }

    pub fn grid_points(&self) -> usize {
        self.cost.n()
    }

    pub fn problem(&self) -> DwdlProblem {
        DwdlProblem::new(
            self.data.clone(),
            self.rank(),
            self.cost.clone(),
            self.tau,
            DualSolverSettings {
                tol0: 1e-10,
                max_inner: 60_000,
                ..Default::default()
            },
        )
        .unwrap()
    }

    pub fn cp_parts(&self) -> (Vec<SimplexStack>, SimplexStack) {
        (
            self.factors.clone().expect("CP instance"),
            self.codes.clone(),
        )
    }

    pub fn grid(&self) -> &[usize] {
        &self.grid
    }
}

fn lse(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Warm-started per-sample Sinkhorn potentials.
struct Pots {
    phi: Vec<f64>,
    psi: Vec<f64>,
}

/// Log-domain Sinkhorn run until the row marginal violation is below 1e-12;
/// returns the transport value and the second potential (the gradient of
/// `W(a, .)` at `b` up to an additive constant).
fn sinkhorn_value_psi(
    a: &[f64],
    b: &[f64],
    m2: &ArrayView2<f64>,
    gamma: f64,
    pots: &mut Pots,
) -> (f64, Vec<f64>) {
    let p = a.len();
    let mut terms = vec![0.0; p];
    for _sweep in 0..20_000 {
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
        // rows drifted after the psi update; measure the violation
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

/// Bisection projection onto the simplex (independent of the library's
/// sort-and-scan path).
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

pub struct PrimalOracle<'a> {
    inst: &'a TinyInstance,
}

/// A block structure the oracle can run PGD over: evaluate the objective at
/// the current block value and assemble the full gradient.
struct PgdProblem<'b> {
    fiber_len: usize,
    fibers: usize,
    anchor: &'b [f64],
    tau: f64,
}

impl<'a> PrimalOracle<'a> {
    pub fn new(inst: &'a TinyInstance) -> Self {
        PrimalOracle { inst }
    }

    fn x_col(&self, t: usize) -> Vec<f64> {
        self.inst.data.fiber(t)
    }

    /// Generic backtracking PGD on `sum_i W(x_i, recon_i(theta)) +
    /// (tau/2)||theta - anchor||^2` over per-fiber simplices; `recon` maps the
    /// block to per-sample reconstruction columns, `pull` applies the adjoint
    /// of `recon` to the per-sample transport gradients.
    fn pgd<R, A>(&self, spec: PgdProblem<'_>, recon: R, pull: A) -> (Vec<f64>, f64)
    where
        R: Fn(&[f64]) -> Vec<Vec<f64>>,
        A: Fn(&[Vec<f64>]) -> Vec<f64>,
    {
        let n = self.inst.samples();
        let gamma = self.inst.cost.gamma();
        let m2 = self.inst.cost.cost_matrix();
        let p = self.inst.grid_points();
        let mut pots: Vec<Pots> = (0..n)
            .map(|_| Pots {
                phi: vec![0.0; p],
                psi: vec![0.0; p],
            })
            .collect();
        let len = spec.fiber_len * spec.fibers;
        let mut theta = spec.anchor.to_vec();
        let objective = |theta: &[f64], pots: &mut Vec<Pots>| -> (f64, Vec<Vec<f64>>) {
            let cols = recon(theta);
            let mut value = 0.0;
            let mut psis = Vec::with_capacity(n);
            for t in 0..n {
                let x = self.x_col(t);
                let (w, psi) = sinkhorn_value_psi(&x, &cols[t], &m2, gamma, &mut pots[t]);
                value += w;
                psis.push(psi);
            }
            let prox: f64 = theta
                .iter()
                .zip(spec.anchor)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            (value + 0.5 * spec.tau * prox, psis)
        };
        let (mut fval, mut psis) = objective(&theta, &mut pots);
        let mut step = 1.0 / spec.tau;
        for _iter in 0..50_000 {
            let mut grad = pull(&psis);
            for (g, (&th, &an)) in grad.iter_mut().zip(theta.iter().zip(spec.anchor)) {
                *g += spec.tau * (th - an);
            }
            // move and project per fiber (columns of the fiber-major layout)
            let mut accepted = false;
            while step > 1e-13 {
                let mut trial = vec![0.0; len];
                for t in 0..spec.fibers {
                    let col: Vec<f64> = (0..spec.fiber_len)
                        .map(|i| theta[i * spec.fibers + t] - step * grad[i * spec.fibers + t])
                        .collect();
                    let proj = project_bisect(&col);
                    for i in 0..spec.fiber_len {
                        trial[i * spec.fibers + t] = proj[i];
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
                    step = (step * 1.3).min(20.0 / spec.tau);
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

    /// Primal solve of the code subproblem; returns the optimal `(r, N)`
    /// block and the optimal value.
    pub fn solve_lambda(&self) -> (Tensor, f64) {
        let p = self.inst.grid_points();
        let r = self.inst.rank();
        let n = self.inst.samples();
        let d = self.inst.dict.tensor().data().to_vec(); // (P, r) fiber-major
        let anchor = self.inst.codes.tensor().data().to_vec();
        let spec = PgdProblem {
            fiber_len: r,
            fibers: n,
            anchor: &anchor,
            tau: self.inst.tau,
        };
        let recon = |lam: &[f64]| -> Vec<Vec<f64>> {
            (0..n)
                .map(|t| {
                    (0..p)
                        .map(|pi| (0..r).map(|j| d[pi * r + j] * lam[j * n + t]).sum())
                        .collect()
                })
                .collect()
        };
        let pull = |psis: &[Vec<f64>]| -> Vec<f64> {
            let mut g = vec![0.0; r * n];
            for (t, psi) in psis.iter().enumerate() {
                for j in 0..r {
                    let mut acc = 0.0;
                    for pi in 0..p {
                        acc += d[pi * r + j] * psi[pi];
                    }
                    g[j * n + t] = acc;
                }
            }
            g
        };
        let (theta, fval) = self.pgd(spec, recon, pull);
        (Tensor::new(vec![r, n], theta).unwrap(), fval)
    }

    /// Primal solve of the dictionary subproblem given codes; returns the
    /// optimal `(P, r)` block (fiber-major, matching the dictionary layout)
    /// and the optimal value.
    pub fn solve_dict(&self, codes: &Tensor) -> (Tensor, f64) {
        let p = self.inst.grid_points();
        let r = self.inst.rank();
        let n = self.inst.samples();
        let lam = codes.data().to_vec(); // (r, N)
        let anchor = self.inst.dict.tensor().data().to_vec();
        let spec = PgdProblem {
            fiber_len: p,
            fibers: r,
            anchor: &anchor,
            tau: self.inst.tau,
        };
        let recon = |dict: &[f64]| -> Vec<Vec<f64>> {
            (0..n)
                .map(|t| {
                    (0..p)
                        .map(|pi| (0..r).map(|j| dict[pi * r + j] * lam[j * n + t]).sum())
                        .collect()
                })
                .collect()
        };
        let pull = |psis: &[Vec<f64>]| -> Vec<f64> {
            let mut g = vec![0.0; p * r];
            for (t, psi) in psis.iter().enumerate() {
                for j in 0..r {
                    for pi in 0..p {
                        g[pi * r + j] += psi[pi] * lam[j * n + t];
                    }
                }
            }
            g
        };
        let (theta, fval) = self.pgd(spec, recon, pull);
        (Tensor::new(vec![p, r], theta).unwrap(), fval)
    }

    /// Primal solve of a CP factor subproblem: the mixing tensor is addressed
    /// with explicit index arithmetic over its `(pre, r, post-with-samples)`
    /// split at mode k.
    pub fn solve_factor(&self, lambda_bar: &Tensor, k: usize, u_prev: &Tensor) -> (Tensor, f64) {
        let n = self.inst.samples();
        let shape = lambda_bar.shape().to_vec();
        let k0 = k - 1;
        let pre: usize = shape[..k0].iter().product();
        let r = shape[k0];
        let post_all: usize = shape[k0 + 1..].iter().product(); // includes samples
        let ik = self.inst.grid()[k0];
        let lb = lambda_bar.data();
        let anchor = u_prev.data().to_vec();
        let p = self.inst.grid_points();
        debug_assert_eq!(pre * ik * post_all, p * n);
        let spec = PgdProblem {
            fiber_len: ik,
            fibers: r,
            anchor: &anchor,
            tau: self.inst.tau,
        };
        // Reconstruction R[a, i, b] = sum_rho lb[a, rho, b] u[i, rho], then
        // column t of the (P, N) layout is R[.. , b = b_grid * n + t].
        let recon = |u: &[f64]| -> Vec<Vec<f64>> {
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
        };
        let pull = |psis: &[Vec<f64>]| -> Vec<f64> {
            let mut g = vec![0.0; ik * r];
            let post_grid = post_all / n;
            for (t, psi) in psis.iter().enumerate() {
                for a in 0..pre {
                    for i in 0..ik {
                        for bg in 0..post_grid {
                            let b = bg * n + t;
                            let pflat = (a * ik + i) * post_grid + bg;
                            for rho in 0..r {
                                g[i * r + rho] += lb[(a * r + rho) * post_all + b] * psi[pflat];
                            }
                        }
                    }
                }
            }
            g
        };
        let (theta, fval) = self.pgd(spec, recon, pull);
        (Tensor::new(vec![ik, r], theta).unwrap(), fval)
    }
}
