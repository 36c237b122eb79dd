use thiserror::Error;

/// Errors raised by the comparison-function algebra.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum CompFnError {
    #[error("argument {value} outside domain [0, {upper}]")]
    Domain { value: f64, upper: f64 },
    #[error("value {target} not reachable: bracket exceeded {cap:e}")]
    Unreachable { target: f64, cap: f64 },
    #[error("map is not contractive at s = {at}: map(s) = {image}")]
    NotContractive { at: f64, image: f64 },
    #[error("function `{name}` failed the sampled monotonicity probe between s = {lo} and s = {hi}")]
    NotMonotone { name: String, lo: f64, hi: f64 },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    CompFn(#[from] CompFnError),

    #[error("action {action} is not admissible at state {state}")]
    Admissibility { state: String, action: String },

    #[error("stage cost grows faster than the discount decays (observed ratio {ratio:.3e} over the probe window)")]
    DivergentCost { ratio: f64 },

    #[error("policy evaluation diverges: sqrt(gamma) * rho(A + B K) = {scaled_radius:.6} >= 1")]
    EvaluationDiverges { scaled_radius: f64 },

    #[error("initial policy has non-finite cost at state {state} (growth rate {rate:.6})")]
    InfeasibleInitialPolicy { state: String, rate: f64 },

    #[error("no certificate: {0}")]
    NoCertificate(String),

    #[error("no stabilizing discount: required gamma* = {required:.6} is not below gamma0 = {gamma0:.6}")]
    NoStabilizingDiscount { required: f64, gamma0: f64 },

    #[error("discount {gamma} outside the certified range ({gamma_star}, {gamma0})")]
    DiscountRange { gamma: f64, gamma_star: f64, gamma0: f64 },

    #[error("formula domain error in {formula}: {detail}")]
    FormulaDomain { formula: &'static str, detail: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("backend mismatch: {0}")]
    Backend(String),

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
