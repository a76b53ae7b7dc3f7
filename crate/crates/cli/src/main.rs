use clap::Parser;
use std::path::PathBuf;
use wdl_cli::config::{self, ExperimentKind, Overrides};
use wdl_cli::{experiments, verify, CliError};

/// Experiment runner for Wasserstein dictionary learning over discrete
/// distributions: barycenters, dictionary learning, CP dictionary learning,
/// and a self-verification suite.
#[derive(Parser, Debug)]
#[command(name = "wdl", version, about)]
struct Args {
    /// barycenter | dwdl | wcpdl | gradient-check | oracle-check | verify
    #[arg(long)]
    experiment: Option<String>,

    /// Grid shape, comma-separated (e.g. `100` or `16,16`).
    #[arg(long)]
    grid: Option<String>,

    /// Ground metric: euclidean | torus.
    #[arg(long)]
    metric: Option<String>,

    /// Entropic regularization; a comma list sweeps gammas (barycenter only).
    #[arg(long)]
    gamma: Option<String>,

    /// Number of dictionary atoms.
    #[arg(long)]
    r: Option<usize>,

    /// Number of samples for generated data.
    #[arg(long = "n-samples")]
    n_samples: Option<usize>,

    /// Proximal regularization weight (default: max(1, 1.1/gamma) for
    /// dictionary runs, 1 for barycenters).
    #[arg(long)]
    tau: Option<f64>,

    /// Allow proximal weights at or below 1/gamma (voids the convergence
    /// guarantees; used by the weight-sweep experiments).
    #[arg(long = "unsafe-tau", default_value_t = false)]
    unsafe_tau: bool,

    #[arg(long)]
    seed: Option<u64>,

    /// Outer iteration budget.
    #[arg(long = "max-iter")]
    max_iter: Option<usize>,

    /// Base tolerance of the per-iteration dual solves (tol_n = tol0/n^2).
    #[arg(long)]
    tol0: Option<f64>,

    /// Input data: a `.tnsr`/`.csv` path or `preset:{gaussians,cups,life,planted,digits}`.
    #[arg(long = "in")]
    input: Option<String>,

    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,

    /// Worker threads for per-sample parallelism; 1 is the deterministic mode.
    #[arg(long)]
    threads: Option<usize>,

    /// Run only verification checks whose name contains this substring.
    #[arg(long)]
    only: Option<String>,

    /// Flat key=value configuration file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn run(args: Args) -> Result<(), CliError> {
    let over = Overrides {
        experiment: args.experiment,
        grid: args.grid,
        metric: args.metric,
        gamma: args.gamma,
        rank: args.r,
        n_samples: args.n_samples,
        tau: args.tau,
        unsafe_tau: args.unsafe_tau,
        seed: args.seed,
        max_iter: args.max_iter,
        tol0: args.tol0,
        input: args.input,
        out_dir: args.out_dir,
        threads: args.threads,
        only: args.only,
    };
    let mut cfg = config::resolve(args.config.as_deref(), &over)?;
    wdl_core::set_threads(cfg.threads);
    if cfg.threads > 1 {
        // Per-sample work is chunked deterministically for a fixed count.
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .ok();
    }
    match cfg.experiment {
        ExperimentKind::Barycenter => experiments::run_barycenter(&cfg),
        ExperimentKind::Dwdl => experiments::run_dwdl(&cfg),
        ExperimentKind::Wcpdl => experiments::run_wcpdl(&cfg),
        ExperimentKind::Verify => verify::run_verification(&cfg),
        ExperimentKind::GradientCheck => {
            cfg.only = Some(cfg.only.unwrap_or_else(|| "gradient".into()));
            verify::run_verification(&cfg)
        }
        ExperimentKind::OracleCheck => {
            cfg.only = Some(cfg.only.unwrap_or_else(|| "oracle".into()));
            verify::run_verification(&cfg)
        }
    }
}

fn main() {
    let args = Args::parse();
    match run(args) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
