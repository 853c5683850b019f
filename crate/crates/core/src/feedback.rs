//! The nonlinearity `f(x, y)` with its partial derivatives, hypothesis
//! checks, and the coefficients of the linear decomposition
//! `f(x, y) = a·x + b·y`.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::quadrature::gl16;

/// Threshold below which the delayed value is treated as zero when forming
/// the `b` coefficient.
pub const B_TOL_ZERO: f64 = 1e-12;

/// A scalar right-hand side `f(x(t), x(t - r))` with user-supplied partials.
pub trait Nonlinearity: Send + Sync {
    fn f(&self, x: f64, y: f64) -> f64;
    fn d1f(&self, x: f64, y: f64) -> f64;
    fn d2f(&self, x: f64, y: f64) -> f64;

    fn describe(&self) -> String {
        "custom".into()
    }
}

/// `f(x, y) = -a·x - b·tanh(c·y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TanhFeedback {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl TanhFeedback {
    pub fn new(a: f64, b: f64, c: f64) -> Result<Self> {
        if !(a >= 0.0 && b > 0.0 && c > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "tanh family needs a >= 0, b > 0, c > 0 (got a = {a}, b = {b}, c = {c})"
            )));
        }
        Ok(Self { a, b, c })
    }

    /// Exact `sup |f|` over `[-m, m]^2`.
    pub fn sup_abs(&self, m: f64) -> f64 {
        self.a * m + self.b * (self.c * m).tanh()
    }
}

impl Nonlinearity for TanhFeedback {
    fn f(&self, x: f64, y: f64) -> f64 {
        -self.a * x - self.b * (self.c * y).tanh()
    }

    fn d1f(&self, _x: f64, _y: f64) -> f64 {
        -self.a
    }

    fn d2f(&self, _x: f64, y: f64) -> f64 {
        let t = (self.c * y).tanh();
        -self.b * self.c * (1.0 - t * t)
    }

    fn describe(&self) -> String {
        format!("f(x,y) = -{}x - {}tanh({}y)", self.a, self.b, self.c)
    }
}

type Fn2 = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Closure-backed nonlinearity for models that enter through the API.
#[derive(Clone)]
pub struct FnNonlinearity {
    f: Fn2,
    d1f: Fn2,
    d2f: Fn2,
    name: String,
}

impl FnNonlinearity {
    pub fn new(
        name: impl Into<String>,
        f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        d1f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        d2f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self { f: Arc::new(f), d1f: Arc::new(d1f), d2f: Arc::new(d2f), name: name.into() }
    }
}

impl fmt::Debug for FnNonlinearity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnNonlinearity").field("name", &self.name).finish()
    }
}

impl Nonlinearity for FnNonlinearity {
    fn f(&self, x: f64, y: f64) -> f64 {
        (self.f)(x, y)
    }
    fn d1f(&self, x: f64, y: f64) -> f64 {
        (self.d1f)(x, y)
    }
    fn d2f(&self, x: f64, y: f64) -> f64 {
        (self.d2f)(x, y)
    }
    fn describe(&self) -> String {
        self.name.clone()
    }
}

/// A nonlinearity together with the amplitude bound `M` and the declared
/// `L0 = sup |f|` over `[-M, M]^2`.
#[derive(Clone)]
pub struct FeedbackModel {
    nl: Arc<dyn Nonlinearity>,
    m: f64,
    l0: f64,
}

impl fmt::Debug for FeedbackModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeedbackModel")
            .field("f", &self.nl.describe())
            .field("m", &self.m)
            .field("l0", &self.l0)
            .finish()
    }
}

impl FeedbackModel {
    pub fn new(nl: impl Nonlinearity + 'static, m: f64, l0: f64) -> Result<Self> {
        if !(m > 0.0 && l0 > 0.0 && m.is_finite() && l0.is_finite()) {
            return Err(Error::InvalidParameter(format!("need M > 0 and L0 > 0, got M = {m}, L0 = {l0}")));
        }
        Ok(Self { nl: Arc::new(nl), m, l0 })
    }

    /// Built-in family with `L0` computed exactly.
    pub fn tanh(a: f64, b: f64, c: f64, m: f64) -> Result<Self> {
        let fam = TanhFeedback::new(a, b, c)?;
        let l0 = fam.sup_abs(m);
        Self::new(fam, m, l0)
    }

    /// Declares `L0` as the grid maximum of `|f|` over `[-M, M]^2`.
    pub fn with_grid_l0(nl: impl Nonlinearity + 'static, m: f64) -> Result<Self> {
        let l0 = grid_sup_abs(&nl, m, 401);
        Self::new(nl, m, l0)
    }

    #[inline]
    pub fn f(&self, x: f64, y: f64) -> f64 {
        self.nl.f(x, y)
    }

    #[inline]
    pub fn d1f(&self, x: f64, y: f64) -> f64 {
        self.nl.d1f(x, y)
    }

    #[inline]
    pub fn d2f(&self, x: f64, y: f64) -> f64 {
        self.nl.d2f(x, y)
    }

    pub fn m(&self) -> f64 {
        self.m
    }

    pub fn l0(&self) -> f64 {
        self.l0
    }

    pub fn describe(&self) -> String {
        self.nl.describe()
    }

    pub fn coefficient_a(&self, x_val: f64, x_delayed: f64) -> f64 {
        coefficient_a(self, x_val, x_delayed)
    }

    pub fn coefficient_b(&self, x_delayed: f64) -> Result<f64> {
        coefficient_b(self, x_delayed)
    }
}

fn grid_sup_abs(nl: &dyn Nonlinearity, m: f64, n: usize) -> f64 {
    let mut best: f64 = 0.0;
    for i in 0..n {
        let x = -m + 2.0 * m * i as f64 / (n - 1) as f64;
        for j in 0..n {
            let y = -m + 2.0 * m * j as f64 / (n - 1) as f64;
            best = best.max(nl.f(x, y).abs());
        }
    }
    best
}

/// `a = ∫_0^1 D1f(s·x, y) ds`, by 16-point Gauss–Legendre.
pub fn coefficient_a(model: &FeedbackModel, x_val: f64, x_delayed: f64) -> f64 {
    if x_val == 0.0 {
        return model.d1f(0.0, x_delayed);
    }
    gl16().integrate(0.0, 1.0, |s| model.d1f(s * x_val, x_delayed))
}

/// `b = f(0, y) / y`, or `D2f(0, 0)` when `|y|` is below [`B_TOL_ZERO`].
pub fn coefficient_b(model: &FeedbackModel, x_delayed: f64) -> Result<f64> {
    let b = if x_delayed.abs() < B_TOL_ZERO {
        model.d2f(0.0, 0.0)
    } else {
        model.f(0.0, x_delayed) / x_delayed
    };
    if b >= 0.0 || b.is_nan() {
        return Err(Error::NonNegativeB { x_delayed, value: b });
    }
    Ok(b)
}

/// Identifier of a checked hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Hypothesis {
    /// `L0` is the sup of `|f|` on `[-M, M]^2`.
    H1,
    /// Negative feedback in the delayed argument.
    H2,
    /// Dissipativity outside the amplitude bound.
    H3,
    /// Delay range `(0, K]`.
    H4,
    /// Lipschitz bound of the delay functional.
    H5,
    /// Supplied partial derivatives match finite differences of `f`.
    Derivatives,
    /// Threshold kernel Lipschitz constant.
    TD2,
    /// Threshold kernel lower bound `1/K`.
    TD3,
    /// Implicit delay range `(0, K]`.
    ID2,
    /// Implicit delay Lipschitz constants.
    ID3,
    /// Implicit delay contraction condition.
    ID4,
}

impl Hypothesis {
    pub fn label(&self) -> &'static str {
        match self {
            Hypothesis::H1 => "H1",
            Hypothesis::H2 => "H2",
            Hypothesis::H3 => "H3",
            Hypothesis::H4 => "H4",
            Hypothesis::H5 => "H5",
            Hypothesis::Derivatives => "derivatives",
            Hypothesis::TD2 => "TD2",
            Hypothesis::TD3 => "TD3",
            Hypothesis::ID2 => "ID2",
            Hypothesis::ID3 => "ID3",
            Hypothesis::ID4 => "ID4",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim().trim_start_matches('(').trim_end_matches(')');
        let all = [
            Hypothesis::H1,
            Hypothesis::H2,
            Hypothesis::H3,
            Hypothesis::H4,
            Hypothesis::H5,
            Hypothesis::Derivatives,
            Hypothesis::TD2,
            Hypothesis::TD3,
            Hypothesis::ID2,
            Hypothesis::ID3,
            Hypothesis::ID4,
        ];
        all.into_iter().find(|h| h.label().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Hypothesis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({})", self.label())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisCheck {
    pub hypothesis: Hypothesis,
    pub passed: bool,
    pub detail: String,
}

/// Pass/fail per hypothesis; failures carry a witness in `detail`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<HypothesisCheck>,
}

impl ValidationReport {
    pub fn push(&mut self, hypothesis: Hypothesis, passed: bool, detail: impl Into<String>) {
        self.checks.push(HypothesisCheck { hypothesis, passed, detail: detail.into() });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn status(&self, h: Hypothesis) -> Option<bool> {
        let mut found = None;
        for c in self.checks.iter().filter(|c| c.hypothesis == h) {
            found = Some(found.unwrap_or(true) && c.passed);
        }
        found
    }

    pub fn failures(&self) -> impl Iterator<Item = &HypothesisCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn merge(&mut self, other: ValidationReport) {
        self.checks.extend(other.checks);
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.hypothesis, c.detail)?;
        }
        Ok(())
    }
}

/// Grid audit of (H1)–(H3) plus a finite-difference check of the partials.
pub fn validate_feedback(model: &FeedbackModel, samples: usize) -> Result<ValidationReport> {
    if samples < 100 {
        return Err(Error::Precondition(format!("validate_feedback needs at least 100 samples, got {samples}")));
    }
    let m = model.m;
    let mut report = ValidationReport::default();

    // (H1): grid sup vs declared L0. Corners are on the grid.
    let n = samples.clamp(101, 801) | 1;
    let est = grid_sup_abs(model.nl.as_ref(), m, n);
    let rel = (est - model.l0).abs() / model.l0;
    report.push(
        Hypothesis::H1,
        rel <= 1e-3,
        format!("declared L0 = {}, grid estimate = {est} (relative gap {rel:.2e})", model.l0),
    );

    // (H2): y f(0, y) < 0 on a log-spaced grid of (0, M] and its mirror.
    let mut h2_witness = None;
    for i in 0..samples {
        let y = m * 10f64.powf(-12.0 * (1.0 - i as f64 / (samples - 1) as f64));
        for y in [y, -y] {
            if !(y * model.f(0.0, y) < 0.0) {
                h2_witness.get_or_insert(y);
            }
        }
    }
    let d2 = model.d2f(0.0, 0.0);
    let h2_ok = h2_witness.is_none() && d2 < 0.0;
    report.push(
        Hypothesis::H2,
        h2_ok,
        match h2_witness {
            Some(y) => format!("y f(0,y) >= 0 at y = {y}"),
            None if d2 >= 0.0 => format!("D2f(0,0) = {d2} is not negative"),
            None => format!("D2f(0,0) = {d2}"),
        },
    );

    // (H3): u f(u, v) < 0 for M <= |u| <= 1.1 M and |v| <= |u|.
    let nu = (samples / 10).max(11);
    let nv = samples.max(101) | 1;
    let mut h3_witness = None;
    'outer: for i in 0..nu {
        let u_abs = m * (1.0 + 0.1 * i as f64 / (nu - 1) as f64);
        for u in [u_abs, -u_abs] {
            // |v| increasing from the axis outwards.
            for j in 0..nv {
                let step = u_abs * ((j + 1) / 2) as f64 / (nv / 2) as f64;
                let v = if j % 2 == 1 { step } else { 0.0 - step };
                if !(u * model.f(u, v) < 0.0) {
                    h3_witness = Some((u, v));
                    break 'outer;
                }
            }
        }
    }
    report.push(
        Hypothesis::H3,
        h3_witness.is_none(),
        match h3_witness {
            Some((u, v)) => format!("u f(u,v) >= 0 at (u, v) = ({u}, {v})"),
            None => "x f(x,y) < 0 on the sampled dissipative region".to_string(),
        },
    );

    // Partials vs central differences.
    let nd = 41;
    let mut worst: f64 = 0.0;
    let mut worst_at = (0.0, 0.0);
    for i in 0..nd {
        let x = -m + 2.0 * m * i as f64 / (nd - 1) as f64;
        for j in 0..nd {
            let y = -m + 2.0 * m * j as f64 / (nd - 1) as f64;
            let hx = 1e-5 * (1.0 + x.abs());
            let hy = 1e-5 * (1.0 + y.abs());
            let fd1 = (model.f(x + hx, y) - model.f(x - hx, y)) / (2.0 * hx);
            let fd2 = (model.f(x, y + hy) - model.f(x, y - hy)) / (2.0 * hy);
            let e1 = (fd1 - model.d1f(x, y)).abs() / (1.0 + model.d1f(x, y).abs());
            let e2 = (fd2 - model.d2f(x, y)).abs() / (1.0 + model.d2f(x, y).abs());
            if e1.max(e2) > worst {
                worst = e1.max(e2);
                worst_at = (x, y);
            }
        }
    }
    report.push(
        Hypothesis::Derivatives,
        worst <= 1e-6,
        format!("max relative finite-difference mismatch {worst:.2e} at {worst_at:?}"),
    );

    Ok(report)
}
