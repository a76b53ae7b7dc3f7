use std::time::Instant;
use wdl_core::bcdpr::{audit_forward_monotonicity, displacement_bound, RunOptions};
use wdl_core::dwdl::{DualSolverSettings, DwdlProblem};
use wdl_core::ot::{build_ground_cost, MetricKind};
use wdl_core::synth::planted_cp_with_noise;
use wdl_core::wcpdl::{wcpdl_run, WcpdlInit};

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    let iters = args.first().copied().unwrap_or(200);
    let data_seed = args.get(1).copied().unwrap_or(0) as u64;
    let init_seed = args.get(2).copied().unwrap_or(0) as u64;
    let rank = args.get(3).copied().unwrap_or(5);
    let gamma = 0.05;
    let cost = build_ground_cost(&[20, 20], MetricKind::Euclidean, gamma).unwrap();
    let data = planted_cp_with_noise(&[20, 20], 10, 100, 10.0, data_seed).unwrap();
    let problem = DwdlProblem::new(
        data, rank, cost, 1.1 / gamma,
        DualSolverSettings { tol0: 1e-6, max_inner: 4000, ..Default::default() },
    ).unwrap();
    let opts = RunOptions { max_iter: iters, station_tol: 0.0, enforce_tau: true };
    let t0 = Instant::now();
    let run = wcpdl_run(&problem, WcpdlInit::Seeded(init_seed), &opts).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    let audit = audit_forward_monotonicity(&run.history, 3, 1e-6);
    let (lhs, rhs) = displacement_bound(&run.history, 3);
    let trend_at = |upto: usize| -> f64 {
        let mut rm = f64::INFINITY;
        let mut v = 0.0;
        for row in run.history.iter().skip(1).take(upto) {
            rm = rm.min(row.stationarity * row.stationarity);
            let n = row.n as f64;
            v = rm * n / ((n + 1.0).ln().powi(2));
        }
        v
    };
    println!(
        "ds={data_seed} is={init_seed} r={rank}: {dt:.0}s viol={} disp_ok={} trend_ratio={:.3}",
        audit.len(), lhs <= rhs + 1e-4, trend_at(iters) / trend_at(50)
    );
}
