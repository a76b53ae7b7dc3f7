//! Experiment configuration: a flat key=value file plus equivalent
//! command-line flags, with flags taking precedence.

use crate::{CliError, CliResult};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use wdl_core::ot::MetricKind;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    Barycenter,
    Dwdl,
    Wcpdl,
    GradientCheck,
    OracleCheck,
    Verify,
}

impl std::str::FromStr for ExperimentKind {
    type Err = CliError;
    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "barycenter" => Ok(ExperimentKind::Barycenter),
            "dwdl" => Ok(ExperimentKind::Dwdl),
            "wcpdl" => Ok(ExperimentKind::Wcpdl),
            "gradient-check" => Ok(ExperimentKind::GradientCheck),
            "oracle-check" => Ok(ExperimentKind::OracleCheck),
            "verify" => Ok(ExperimentKind::Verify),
            other => Err(CliError::Config(format!(
                "unknown experiment {other:?}; expected barycenter, dwdl, wcpdl, \
                 gradient-check, oracle-check, or verify"
            ))),
        }
    }
}

/// Fully resolved run configuration.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub grid: Vec<usize>,
    pub metric: MetricKind,
    /// One value normally; several entries sweep gamma (barycenter only).
    pub gammas: Vec<f64>,
    pub rank: usize,
    pub n_samples: usize,
    pub tau: Option<f64>,
    pub unsafe_tau: bool,
    pub seed: u64,
    pub max_iter: usize,
    pub tol0: f64,
    pub input: Option<String>,
    pub out_dir: PathBuf,
    pub threads: usize,
    pub only: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: ExperimentKind::Verify,
            grid: vec![100],
            metric: MetricKind::Euclidean,
            gammas: vec![0.01],
            rank: 4,
            n_samples: 3,
            tau: None,
            unsafe_tau: false,
            seed: 0,
            max_iter: 100,
            tol0: 1e-4,
            input: None,
            out_dir: PathBuf::from("out"),
            threads: 1,
            only: None,
        }
    }
}

/// Unresolved overrides from the command line; `None` fields fall back to the
/// config file and then to the defaults.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub experiment: Option<String>,
    pub grid: Option<String>,
    pub metric: Option<String>,
    pub gamma: Option<String>,
    pub rank: Option<usize>,
    pub n_samples: Option<usize>,
    pub tau: Option<f64>,
    pub unsafe_tau: bool,
    pub seed: Option<u64>,
    pub max_iter: Option<usize>,
    pub tol0: Option<f64>,
    pub input: Option<String>,
    pub out_dir: Option<PathBuf>,
    pub threads: Option<usize>,
    pub only: Option<String>,
}

pub fn parse_grid(s: &str) -> CliResult<Vec<usize>> {
    let dims: std::result::Result<Vec<usize>, _> =
        s.split(',').map(|t| t.trim().parse::<usize>()).collect();
    let dims = dims.map_err(|e| CliError::Config(format!("bad grid {s:?}: {e}")))?;
    if dims.is_empty() || dims.iter().any(|&d| d == 0) {
        return Err(CliError::Config(format!("bad grid {s:?}")));
    }
    Ok(dims)
}

fn parse_gammas(s: &str) -> CliResult<Vec<f64>> {
    let gs: std::result::Result<Vec<f64>, _> =
        s.split(',').map(|t| t.trim().parse::<f64>()).collect();
    let gs = gs.map_err(|e| CliError::Config(format!("bad gamma {s:?}: {e}")))?;
    if gs.is_empty() {
        return Err(CliError::Config("empty gamma list".into()));
    }
    Ok(gs)
}

/// Reads a flat `key=value` file; `#` starts a comment.
pub fn read_config_file(path: &Path) -> CliResult<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Config(format!(
                "{}:{}: expected key=value",
                path.display(),
                lineno + 1
            )));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

/// Resolves file values and command-line overrides into a final config.
pub fn resolve(file: Option<&Path>, over: &Overrides) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let map = match file {
        Some(path) => read_config_file(path)?,
        None => BTreeMap::new(),
    };
    let get = |key: &str| map.get(key).map(|s| s.as_str());

    let experiment = over
        .experiment
        .as_deref()
        .or_else(|| get("experiment"))
        .unwrap_or("verify");
    cfg.experiment = experiment.parse()?;

    if let Some(s) = over.grid.as_deref().or_else(|| get("grid")) {
        cfg.grid = parse_grid(s)?;
    }
    if let Some(s) = over.metric.as_deref().or_else(|| get("metric")) {
        cfg.metric = s
            .parse()
            .map_err(|e: wdl_core::CoreError| CliError::Config(e.to_string()))?;
    }
    if let Some(s) = over.gamma.as_deref().or_else(|| get("gamma")) {
        cfg.gammas = parse_gammas(s)?;
    }
    let parse_num = |name: &str, s: &str| -> CliResult<f64> {
        s.parse::<f64>()
            .map_err(|e| CliError::Config(format!("bad {name} {s:?}: {e}")))
    };
    if let Some(v) = over.rank {
        cfg.rank = v;
    } else if let Some(s) = get("r") {
        cfg.rank = parse_num("r", s)? as usize;
    }
    if let Some(v) = over.n_samples {
        cfg.n_samples = v;
    } else if let Some(s) = get("n_samples") {
        cfg.n_samples = parse_num("n_samples", s)? as usize;
    }
    if let Some(v) = over.tau {
        cfg.tau = Some(v);
    } else if let Some(s) = get("tau") {
        cfg.tau = Some(parse_num("tau", s)?);
    }
    cfg.unsafe_tau = over.unsafe_tau || get("unsafe_tau") == Some("true");
    if let Some(v) = over.seed {
        cfg.seed = v;
    } else if let Some(s) = get("seed") {
        cfg.seed = parse_num("seed", s)? as u64;
    }
    if let Some(v) = over.max_iter {
        cfg.max_iter = v;
    } else if let Some(s) = get("max_iter") {
        cfg.max_iter = parse_num("max_iter", s)? as usize;
    }
    if let Some(v) = over.tol0 {
        cfg.tol0 = v;
    } else if let Some(s) = get("tol0") {
        cfg.tol0 = parse_num("tol0", s)?;
    }
    if let Some(s) = over.input.clone().or_else(|| get("in").map(String::from)) {
        cfg.input = Some(s);
    }
    if let Some(p) = over
        .out_dir
        .clone()
        .or_else(|| get("out_dir").map(PathBuf::from))
    {
        cfg.out_dir = p;
    }
    if let Some(v) = over.threads {
        cfg.threads = v.max(1);
    } else if let Some(s) = get("threads") {
        cfg.threads = (parse_num("threads", s)? as usize).max(1);
    }
    if let Some(s) = over.only.clone().or_else(|| get("only").map(String::from)) {
        cfg.only = Some(s);
    }

    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &ExperimentConfig) -> CliResult<()> {
    let solver_experiment = matches!(
        cfg.experiment,
        ExperimentKind::Barycenter | ExperimentKind::Dwdl | ExperimentKind::Wcpdl
    );
    if solver_experiment {
        for &g in &cfg.gammas {
            if !(g > 0.0 && g.is_finite()) {
                return Err(CliError::Config(format!("gamma must be positive, got {g}")));
            }
        }
        if cfg.rank == 0 || cfg.n_samples == 0 {
            return Err(CliError::Config("r and n-samples must be >= 1".into()));
        }
        if !(cfg.tol0 > 0.0) {
            return Err(CliError::Config(format!(
                "tol0 must be positive, got {}",
                cfg.tol0
            )));
        }
    }
    // The proximal-weight guard backs the multi-block convergence theory; the
    // single-block barycenter is plain proximal point and is exempt.
    if matches!(cfg.experiment, ExperimentKind::Dwdl | ExperimentKind::Wcpdl) && !cfg.unsafe_tau {
        if let Some(tau) = cfg.tau {
            for &g in &cfg.gammas {
                if tau <= 1.0 / g {
                    return Err(CliError::Config(format!(
                        "tau = {tau} must exceed 1/gamma = {} (pass --unsafe-tau to override)",
                        1.0 / g
                    )));
                }
            }
        }
    }
    if matches!(cfg.experiment, ExperimentKind::Dwdl | ExperimentKind::Wcpdl)
        && cfg.gammas.len() != 1
    {
        return Err(CliError::Config(
            "dictionary experiments take a single gamma".into(),
        ));
    }
    Ok(())
}

/// Default proximal weight for a dictionary run at this regularization.
pub fn default_tau(gamma: f64) -> f64 {
    (1.1 / gamma).max(1.0)
}
