use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("singular endowment at t={t}, x={x:?}: {what}")]
    SingularEndowment { t: f64, x: Vec<f64>, what: String },

    #[error("driver overflow at t={t}, x={x:?}: exp(-y0) with y0={y0} exceeds the representable range")]
    DriverOverflow { t: f64, x: Vec<f64>, y0: f64 },

    #[error("internal invariant violated: f1 + f2 differs from the driver by {diff:e} in row {row}")]
    SplitInconsistency { row: usize, diff: f64 },

    #[error(
        "divergence at time index {time_index} (t={t}), node {node} (x={x:?}), component {component}: |u| = {value:e} > {bound:e}"
    )]
    Divergence {
        time_index: usize,
        t: f64,
        node: usize,
        x: Vec<f64>,
        component: usize,
        value: f64,
        bound: f64,
    },

    #[error("scheme error: {0}")]
    Scheme(String),

    #[error("heat-kernel domain error: need t < s, got t={t}, s={s}")]
    KernelDomain { t: f64, s: f64 },

    #[error("oracle quadrature overflow ({0}); use a smaller domain or horizon")]
    OracleScale(String),

    #[error(
        "Picard map is not contracting: measured factor {factor:.4} at beta={beta}; retry with beta >= {suggested_beta}"
    )]
    NonContraction {
        factor: f64,
        beta: f64,
        suggested_beta: f64,
    },

    #[error("state path blew up on path {path} at step {step}")]
    StateBlowup { path: usize, step: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
