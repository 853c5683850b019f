//! Numerical tools for scalar state-dependent delay differential equations
//! with negative feedback,
//!
//! ```text
//! x'(t) = f(x(t), x(t - r(x_t))),
//! ```
//!
//! organised around the discrete Lyapunov function `V` (the odd-rounded
//! number of sign changes on `[η(t), t]`) and the Morse decomposition it
//! induces on the global attractor.

pub mod cli;
pub mod delay;
pub mod error;
pub mod feedback;
pub mod integrator;
pub mod lyapunov;
pub mod morse;
pub mod phase;
pub mod plot;
pub mod quadrature;
pub mod spectrum;

pub use delay::{delay_eval, validate_delay, DelayModel, DelayedArgumentMap, ImplicitRule, Kernel};
pub use error::{Error, Result};
pub use feedback::{validate_feedback, FeedbackModel, Hypothesis, ValidationReport};
pub use phase::{PhaseSpace, PiecewiseLinear, SegmentView, Trajectory};
pub use integrator::{integrate, residual_check, InitialSegment, IntegratorConfig};
pub use lyapunov::{is_regular, sign_changes, v_along, v_limit, vfunc, SignChanges, VValue};
pub use morse::{classify, morse_report, ClassifyConfig, MorseKind, MorseLabel, MorseReport};
pub use spectrum::{count_unstable, linearize, transform, Linearization, SpectrumReport};
