//! Loose cost-scaling trend: per-iteration wall time should grow roughly
//! quadratically in the number of grid points at fixed sample count (the
//! kernel products dominate). Checked within a factor of two on the exponent
//! scale; this is a trend probe, not a tight benchmark.

use wdl_core::bcdpr::RunOptions;
use wdl_core::dwdl::{dwdl_run, DualSolverSettings, DwdlInit, DwdlProblem};
use wdl_core::ot::{build_ground_cost, MetricKind};
use wdl_core::simplex::SimplexStack;
use wdl_core::synth::{dirichlet_stack, seeded_rng};

fn median_iter_seconds(bins: usize) -> f64 {
    let gamma = 0.05;
    let cost = build_ground_cost(&[bins], MetricKind::Euclidean, gamma).unwrap();
    let mut rng = seeded_rng(900 + bins as u64);
    let data = SimplexStack::new(dirichlet_stack(&mut rng, bins, 12), 1).unwrap();
    let problem = DwdlProblem::new(
        data,
        3,
        cost,
        1.1 / gamma,
        DualSolverSettings {
            tol0: 1e-4,
            ..Default::default()
        },
    )
    .unwrap();
    let opts = RunOptions {
        max_iter: 8,
        station_tol: 0.0,
        enforce_tau: true,
    };
    let run = dwdl_run(&problem, DwdlInit::Seeded(1), &opts).unwrap();
    let mut per_iter: Vec<f64> = run
        .history
        .windows(2)
        .map(|w| w[1].seconds - w[0].seconds)
        .collect();
    per_iter.sort_by(|a, b| a.partial_cmp(b).unwrap());
    per_iter[per_iter.len() / 2]
}

#[test]
fn per_iteration_cost_grows_about_quadratically_in_grid_points() {
    // Warm up allocators and code paths so the first measurement is fair.
    let _ = median_iter_seconds(64);
    let small = median_iter_seconds(64);
    let big = median_iter_seconds(256);
    let ratio = big / small;
    // 4x the points, quadratic cost: expect ~16x, accept [8, 32] plus slack
    // for fixed per-iteration overhead on the small instance.
    assert!(
        ratio > 4.0 && ratio < 64.0,
        "per-iteration cost ratio {ratio:.1} is far from the quadratic trend \
         (small {small:.4}s, big {big:.4}s)"
    );
    println!("cost ratio for 4x grid points: {ratio:.1} (quadratic trend expects ~16)");
}
