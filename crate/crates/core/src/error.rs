use std::fmt;

/// A single semantic problem found while validating a configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ConfigIssue {
    /// Dotted key path, e.g. `system.B[1]` or `epsilon[0]`.
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("channel {channel}: {message}")]
    Channel { channel: usize, message: String },

    #[error("ellipticity violation: {0}")]
    Ellipticity(String),

    #[error("invalid domain: {0}")]
    Domain(String),

    #[error("degenerate domain: {0}")]
    DegenerateDomain(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("numeric blow-up at step {step}: {message}")]
    BlowUp { step: usize, message: String },

    #[error(
        "M-matrix sign structure violated at {} node(s) (first: {:?}); refine the grid or use a diagonal diffusion",
        .nodes.len(),
        .nodes.first()
    )]
    MMatrix { nodes: Vec<Vec<f64>> },

    #[error("eigen solver did not converge in {iterations} iterations (last residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("Perron violation: eigenvector component {min:e} is negative; stencil is broken")]
    Perron { min: f64 },

    #[error("tail-starved survival curve: {0}; increase the sample count or shrink the window")]
    TailStarved(String),

    #[error("policy iteration raised the eigenvalue at sweep {sweep}: {from:e} -> {to:e}")]
    ConventionViolation { sweep: usize, from: f64, to: f64 },

    #[error("no admissible feedback candidates: {0}")]
    EmptyGamma(String),

    #[error("run {run}: {source}")]
    Run { run: usize, source: Box<Error> },

    #[error("channel {channel} failed: {source}")]
    ChannelFailure { channel: usize, source: Box<Error> },

    #[error("configuration syntax error at line {line}, column {column}: {message}")]
    ConfigSyntax { line: usize, column: usize, message: String },

    #[error("invalid configuration: {}", join_issues(.0))]
    InvalidConfig(Vec<ConfigIssue>),

    #[error("usage: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn join_issues(issues: &[ConfigIssue]) -> String {
    issues.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

impl Error {
    /// Stable machine-readable category, used in error JSON and by the C ABI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) | Error::Channel { .. } => "structural",
            Error::Ellipticity(_) => "ellipticity",
            Error::Domain(_) | Error::DegenerateDomain(_) => "domain",
            Error::Input(_) | Error::Precondition(_) => "input",
            Error::NonFinite(_) | Error::BlowUp { .. } => "numeric",
            Error::MMatrix { .. } | Error::Perron { .. } => "stencil",
            Error::NotConverged { .. } => "not_converged",
            Error::TailStarved(_) => "tail_starved",
            Error::ConventionViolation { .. } => "convention_violation",
            Error::EmptyGamma(_) => "empty_gamma",
            Error::Run { source, .. } | Error::ChannelFailure { source, .. } => source.kind(),
            Error::ConfigSyntax { .. } | Error::InvalidConfig(_) => "config",
            Error::Usage(_) => "usage",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
