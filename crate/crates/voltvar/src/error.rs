use thiserror::Error;

/// Errors produced by model construction, solvers, and file I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Feeder graph is not a spanning tree rooted at the substation.
    #[error("feeder topology: {0}")]
    Topology(String),

    /// A line with zero series impedance cannot appear in the admittance matrix.
    #[error("line {from}->{to} has zero series impedance")]
    SingularLine { from: usize, to: usize },

    /// A matrix that must be invertible was numerically singular.
    #[error("numerical rank deficiency: {0}")]
    NumericalRank(String),

    /// A model violates one of its structural invariants.
    #[error("invalid model: {0}")]
    ModelInvalid(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Text-format problem in an input file; `line` is 1-based and counts the header.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Sweep power flow failed to converge.
    #[error("power flow did not converge after {iterations} iterations (mismatch {mismatch:.3e})")]
    AcDivergence { iterations: usize, mismatch: f64 },

    /// Sweep power flow drove a voltage magnitude below the collapse guard.
    #[error("voltage collapse at bus {bus} (|v| = {vmag:.4})")]
    VoltageCollapse { bus: usize, vmag: f64 },

    /// An input fell outside the domain a function is defined on.
    #[error("out of domain: {0}")]
    OutOfDomain(String),

    /// Derivative requested at a point where the map is not differentiable.
    #[error("not differentiable: {0}")]
    NonsmoothPoint(String),

    /// Training loss became non-finite; typically fixed by a smaller step size.
    #[error("training diverged at node {node}, epoch {epoch}; reduce the learning rate")]
    TrainingDiverged { node: usize, epoch: usize },

    /// Scenario whose dispatch problem has empty feasible set.
    #[error("scenario {scenario}: dispatch problem infeasible")]
    InfeasibleScenario { scenario: usize },

    #[error("step size eps = {0} outside [0, 1]")]
    EpsOutOfRange(f64),

    /// Fixed-point iteration stalled without meeting its residual target.
    #[error("fixed-point iteration is not contracting (residual {residual:.3e})")]
    NonContraction { residual: f64 },

    /// Requested an operation that requires a satisfied stability certificate.
    #[error("no stability certificate holds: {0}")]
    Uncertified(String),

    /// Generic numerical failure with context.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True when the error stems from user-supplied input (files, arguments)
    /// rather than a numerical condition discovered while solving.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Topology(_)
                | Error::SingularLine { .. }
                | Error::ModelInvalid(_)
                | Error::DimensionMismatch(_)
                | Error::OutOfDomain(_)
                | Error::EpsOutOfRange(_)
                | Error::Io(_)
                | Error::Json(_)
                | Error::Csv(_)
        )
    }
}
