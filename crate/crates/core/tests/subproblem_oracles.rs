//! Cross-checks of the dual-route block updates against independent primal
//! solvers: every subproblem is also solved by long-horizon projected
//! gradient descent with transport gradients from a test-local Sinkhorn, and
//! the recovered primal blocks must agree entrywise. Strong duality is
//! checked by comparing the primal optimum against the negated dual optimum.

mod oracle;

use oracle::{PrimalOracle, TinyInstance};
use wdl_core::dwdl::{
    dual_objective_d, dual_objective_lambda, recover_d, recover_lambda, solve_dual,
    DualSolverSettings,
};
use wdl_core::tensor::{Mode, Tensor};
use wdl_core::wcpdl::{build_lambda_bar, update_factor};

fn solver_settings() -> DualSolverSettings {
    DualSolverSettings {
        tol0: 1e-10,
        max_inner: 60_000,
        ..Default::default()
    }
}

/// One tiny instance checked end to end: code update, dictionary update, and
/// the duality gap between both routes.
fn check_instance(inst: &TinyInstance, tol_inf: f64, tol_gap: f64) {
    let tau = inst.tau;
    let settings = solver_settings();
    let gamma = inst.cost.gamma();

    // Code-matrix subproblem.
    let g0 = Tensor::zeros(inst.data.tensor().shape().to_vec()).unwrap();
    let report = solve_dual(
        |g| dual_objective_lambda(g, &inst.dict, &inst.codes, tau, &inst.data, &inst.cost),
        g0.clone(),
        1e-10,
        inst.samples(),
        gamma,
        &settings,
    )
    .unwrap();
    let lam_dual = recover_lambda(&report.g, &inst.dict, &inst.codes, tau).unwrap();
    let oracle = PrimalOracle::new(inst);
    let (lam_oracle, primal_value) = oracle.solve_lambda();
    let max_err = lam_dual
        .tensor()
        .data()
        .iter()
        .zip(lam_oracle.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(
        max_err < tol_inf,
        "code update disagrees with the primal oracle by {max_err:.3e}"
    );
    let (dual_value, _) =
        dual_objective_lambda(&report.g, &inst.dict, &inst.codes, tau, &inst.data, &inst.cost)
            .unwrap();
    assert!(
        (primal_value + dual_value).abs() < tol_gap,
        "strong duality gap {:.3e} (primal {primal_value}, dual {dual_value})",
        (primal_value + dual_value).abs()
    );

    // Dictionary subproblem, against the fresh codes from the oracle-checked
    // dual route (mirrors the sweep order of the full algorithm).
    let codes_stack = lam_dual;
    let report_d = solve_dual(
        |g| dual_objective_d(g, &codes_stack, &inst.dict, tau, &inst.data, &inst.cost),
        g0,
        1e-10,
        inst.rank(),
        gamma,
        &settings,
    )
    .unwrap();
    let d_dual = recover_d(&report_d.g, &codes_stack, &inst.dict, tau).unwrap();
    let (d_oracle, primal_value_d) = oracle.solve_dict(codes_stack.tensor());
    let max_err = d_dual
        .tensor()
        .data()
        .iter()
        .zip(d_oracle.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(
        max_err < tol_inf,
        "dictionary update disagrees with the primal oracle by {max_err:.3e}"
    );
    let (dual_value_d, _) =
        dual_objective_d(&report_d.g, &codes_stack, &inst.dict, tau, &inst.data, &inst.cost)
            .unwrap();
    assert!(
        (primal_value_d + dual_value_d).abs() < tol_gap,
        "strong duality gap (dictionary) {:.3e}",
        (primal_value_d + dual_value_d).abs()
    );
}

#[test]
fn dual_route_matches_primal_oracle_on_tiny_instances() {
    for (seed, grid) in [(1u64, vec![5usize]), (2, vec![7]), (3, vec![3, 4])] {
        let inst = TinyInstance::random(&grid, 2, 3, 0.1, seed);
        check_instance(&inst, 1e-4, 1e-3);
    }
}

#[test]
fn factor_update_matches_primal_oracle() {
    // d = 2 CP factor subproblems for both k, against the hand-rolled primal.
    let inst = TinyInstance::random_cp(&[3, 3], 2, 2, 0.1, 4);
    let (factors, codes) = inst.cp_parts();
    for k in 1..=2usize {
        let lambda_bar = build_lambda_bar(&factors, &codes, Mode(k)).unwrap();
        let (u_new, report) =
            update_factor(&factors[k - 1], &lambda_bar, &inst.problem(), inst.tau, Mode(k))
                .unwrap();
        assert!(report.grad_norm <= 1e-3);
        let oracle = PrimalOracle::new(&inst);
        let (u_oracle, _) = oracle.solve_factor(&lambda_bar, k, factors[k - 1].tensor());
        let max_err = u_new
            .tensor()
            .data()
            .iter()
            .zip(u_oracle.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(
            max_err < 1e-4,
            "factor {k} update disagrees with the primal oracle by {max_err:.3e}"
        );
    }
}
