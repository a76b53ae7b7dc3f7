//! Dictionary learning for discrete probability distributions under the
//! entropic Wasserstein loss, optimized by block coordinate descent with
//! proximal regularization (BCD-PR).
//!
//! The crate is organized around the pipeline:
//!
//! - [`tensor`] — dense multi-mode arrays and the contractions used by the
//!   solvers (mode products, leading/partial contractions, CP outer products).
//! - [`simplex`] — probability-simplex geometry: Euclidean projection, the
//!   proximal penalty `F` and its conjugate `F*` with closed-form gradient.
//! - [`ot`] — entropic optimal transport: ground costs, Gibbs kernels,
//!   Sinkhorn evaluation of `W_gamma`, and the semi-dual conjugate `H*`.
//! - [`bcdpr`] — the generic Gauss–Seidel BCD-PR driver with inexact block
//!   solves, per-iteration history, and convergence diagnostics.
//! - [`dwdl`] — Wasserstein dictionary learning for d-dimensional joint
//!   distributions: dual subproblem solvers and primal recovery.
//! - [`wcpdl`] — CP-structured dictionaries (rank-one product-distribution
//!   atoms) learned through the same dual machinery.
//! - [`synth`] — synthetic data generators used by experiments and tests.

pub mod bcdpr;
pub mod dwdl;
pub mod ot;
pub mod simplex;
pub mod synth;
pub mod tensor;
pub mod wcpdl;

use std::sync::atomic::{AtomicUsize, Ordering};
use thiserror::Error;

static THREADS: AtomicUsize = AtomicUsize::new(1);

/// Sets the worker count for per-sample parallelism inside solvers. The
/// default of 1 runs everything on the calling thread; results are
/// reproducible for a fixed thread count.
pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

pub(crate) fn threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}

/// Error type shared by all solver and tensor operations.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Shape mismatch between tensor operands; names the offending mode.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid scalar parameter (nonpositive gamma, bad tolerance, ...).
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Problem size exceeds what this implementation materializes.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// Non-finite input or overflow that survived log-domain evaluation.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Iterative solver failed to reach its tolerance within its budget.
    #[error("did not converge: {what} (residual {residual:.3e}, budget {budget})")]
    Convergence {
        what: String,
        residual: f64,
        budget: usize,
    },

    /// A proposition hypothesis does not hold for the supplied input.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A block subproblem solver failed inside the BCD driver.
    #[error("block {block} update failed: {source}")]
    Step {
        block: usize,
        #[source]
        source: Box<CoreError>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed file contents (bad magic bytes, unparsable CSV, ...).
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
