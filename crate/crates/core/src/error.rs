use thiserror::Error;

/// Errors raised by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration detected before or while setting up a run.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("transport error on rank {rank}: {message}")]
    Transport { rank: usize, message: String },

    /// The deterministic scheduler found no rank able to make progress.
    #[error("deadlock detected: {report}")]
    Deadlock { report: String },

    #[error("rank {rank} timed out after {seconds:.1} s waiting for {waiting_on}")]
    Timeout {
        rank: usize,
        seconds: f64,
        waiting_on: String,
    },

    /// Another rank failed and the world was torn down.
    #[error("run aborted: {0}")]
    Aborted(String),

    #[error("malformed payload: {0}")]
    Wire(String),

    #[error("CFL number {cfl:.4} exceeds limit {limit}")]
    Cfl { cfl: f64, limit: f64 },

    #[error("diffusion number {number:.4} exceeds limit {limit}")]
    DiffusionNumber { number: f64, limit: f64 },

    #[error("time step {dt:e} s exceeds the contact stability bound {bound:e} s")]
    TimeStep { dt: f64, bound: f64 },

    #[error("pressure solver did not converge in {iterations} iterations (last relative residual {last:e})")]
    NonConvergence {
        iterations: usize,
        last: f64,
        history: Vec<f64>,
    },

    /// A physically impossible state (coincident particles, overfull cells).
    #[error("nonphysical state: {0}")]
    Physics(String),

    #[error("particle {id} left the domain at ({x:.6}, {y:.6}, {z:.6})")]
    OutOfDomain { id: u64, x: f64, y: f64, z: f64 },

    /// An internal invariant did not hold (for example a violated co-location).
    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("step {step}, phase {phase}: {source}")]
    Phase {
        step: usize,
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn in_phase(self, step: usize, phase: &'static str) -> Self {
        match self {
            // keep the innermost phase
            e @ Error::Phase { .. } => e,
            e => Error::Phase {
                step,
                phase,
                source: Box::new(e),
            },
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
