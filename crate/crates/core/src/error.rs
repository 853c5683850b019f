use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("time {t} outside trajectory domain [{start}, {end}]")]
    OutOfDomain { t: f64, start: f64, end: f64 },

    /// `deepest` carries the last iterate index and time that could still be
    /// evaluated when an iterated lookup ran out of history.
    #[error("insufficient history: need data back to {needed}, trajectory starts at {start}")]
    InsufficientHistory {
        needed: f64,
        start: f64,
        deepest: Option<(usize, f64)>,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("b-coefficient {value} is not negative at delayed value {x_delayed}")]
    NonNegativeB { x_delayed: f64, value: f64 },

    #[error("threshold delay has no root on [0, K]: integral over the full window is {integral} < 1")]
    NoRoot { integral: f64 },

    #[error("implicit delay iteration did not converge in {iterations} iterations (last change {last_change})")]
    NonConvergence { iterations: usize, last_change: f64 },

    #[error("delay value {value} outside (0, {k}]")]
    DelayOutOfRange { value: f64, k: f64 },

    #[error("trajectory left (-M, M) at t = {t}: x = {x}, M = {m}")]
    BoundViolation { t: f64, x: f64, m: f64 },

    #[error("function is numerically zero on [{a}, {b}]")]
    AllZero { a: f64, b: f64 },

    #[error("characteristic function vanishes on the counting contour after {retries} retries")]
    ContourThroughRoot { retries: usize },
}
