//! Fixed-step RK4 method of steps with cubic Hermite dense output.
//!
//! The step is restricted to `h <= τ0/20`, so every delayed argument of a
//! stage lies in already computed history. For threshold delays the part of
//! the defining integral that falls inside the current step is evaluated on
//! the quadratic predictor through `(x_n, x'_n, x_stage)`.

use std::fmt;
use std::sync::Arc;

use crate::delay::{implicit_fixed_point, DelayKind, DelayModel, DelayedArgumentMap, KernelPrimitive};
use crate::error::{Error, Result};
use crate::feedback::FeedbackModel;
use crate::phase::{PiecewiseLinear, Trajectory};
use crate::quadrature::gl8;

/// Relative slack on the derivative bound for initial segments.
pub const LIP_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorConfig {
    pub step: f64,
    pub horizon: f64,
    pub residual_grid: usize,
}

impl IntegratorConfig {
    pub fn new(step: f64, horizon: f64) -> Self {
        Self { step, horizon, residual_grid: 4000 }
    }

    /// Number of steps; the horizon must be a whole number of steps.
    pub fn steps(&self) -> Result<usize> {
        if !(self.step > 0.0 && self.horizon > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "step and horizon must be positive (step = {}, horizon = {})",
                self.step, self.horizon
            )));
        }
        let n = (self.horizon / self.step).round();
        if (n * self.step - self.horizon).abs() > 1e-9 * self.horizon {
            return Err(Error::InvalidParameter(format!(
                "horizon {} is not a multiple of the step {}",
                self.horizon, self.step
            )));
        }
        Ok(n as usize)
    }
}

/// Initial data on `[-K, 0]`.
#[derive(Clone)]
pub enum InitialSegment {
    Constant(f64),
    PiecewiseLinear(PiecewiseLinear),
    /// Sampled on the step mesh, derivatives by central differences.
    Function(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
    /// Given nodes on `[-K, 0]`, used as they are.
    History(Trajectory),
}

impl fmt::Debug for InitialSegment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitialSegment::Constant(c) => write!(f, "Constant({c})"),
            InitialSegment::PiecewiseLinear(p) => write!(f, "PiecewiseLinear({} knots)", p.knots().len()),
            InitialSegment::Function(_) => write!(f, "Function"),
            InitialSegment::History(t) => write!(f, "History({} nodes)", t.len()),
        }
    }
}

impl InitialSegment {
    pub fn function(phi: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        InitialSegment::Function(Arc::new(phi))
    }

    /// The window `x_t` of `traj`, shifted to `[-k, 0]`.
    pub fn from_window(traj: &Trajectory, t: f64, k: f64) -> Result<Self> {
        traj.segment(t, k)?;
        let lo = t - k;
        let mesh = traj.mesh();
        let first = mesh.partition_point(|&s| s <= lo);
        let last = mesh.partition_point(|&s| s < t);
        let (mut ts, mut xs, mut dl, mut dr) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        // a node at lo keeps its right derivative
        let d = if first > 0 && mesh[first - 1] == lo { traj.derivs()[first - 1] } else { traj.deriv_at(lo) };
        ts.push(-k);
        xs.push(traj.value_at(lo));
        dl.push(d);
        dr.push(d);
        for i in first..last {
            ts.push(mesh[i] - t);
            xs.push(traj.values()[i]);
            dl.push(traj.left_derivs()[i]);
            dr.push(traj.derivs()[i]);
        }
        ts.push(0.0);
        xs.push(traj.value_at(t));
        let d_end = if last < mesh.len() && mesh[last] == t { traj.left_derivs()[last] } else { traj.deriv_at(t) };
        dl.push(d_end);
        dr.push(d_end);
        Ok(InitialSegment::History(Trajectory::from_nodes_with_jumps(ts, xs, dl, dr)?))
    }

    /// History trajectory on `[-k, 0]`.
    pub fn history(&self, k: f64, step: f64) -> Result<Trajectory> {
        let uniform = |g: &dyn Fn(f64) -> f64, dg: &dyn Fn(f64) -> f64| -> Result<Trajectory> {
            let n = (k / step).ceil().max(1.0) as usize;
            let times: Vec<f64> = (0..=n).map(|i| if i == n { 0.0 } else { -k + i as f64 * k / n as f64 }).collect();
            let xs = times.iter().map(|&t| g(t)).collect();
            let ds = times.iter().map(|&t| dg(t)).collect();
            Trajectory::from_nodes(times, xs, ds)
        };
        match self {
            InitialSegment::Constant(c) => uniform(&|_| *c, &|_| 0.0),
            InitialSegment::PiecewiseLinear(pl) => {
                let knots = pl.knots();
                if (knots[0] + k).abs() > 1e-12 * k || knots[knots.len() - 1].abs() > 1e-12 * k {
                    return Err(Error::InvalidParameter(format!(
                        "initial segment must span [-K, 0], got [{}, {}]",
                        knots[0],
                        knots[knots.len() - 1]
                    )));
                }
                Ok(pl.to_trajectory())
            }
            InitialSegment::Function(phi) => {
                let delta = 1e-5 * k.max(1e-3);
                let dphi = |t: f64| {
                    if t + delta > 0.0 {
                        (3.0 * phi(t) - 4.0 * phi(t - delta) + phi(t - 2.0 * delta)) / (2.0 * delta)
                    } else if t - delta < -k {
                        (-3.0 * phi(t) + 4.0 * phi(t + delta) - phi(t + 2.0 * delta)) / (2.0 * delta)
                    } else {
                        (phi(t + delta) - phi(t - delta)) / (2.0 * delta)
                    }
                };
                uniform(&|t| phi(t), &dphi)
            }
            InitialSegment::History(tr) => {
                if (tr.t_start() + k).abs() > 1e-12 * k || tr.t_end().abs() > 1e-12 * k {
                    return Err(Error::InvalidParameter(format!(
                        "history must span [-K, 0], got [{}, {}]",
                        tr.t_start(),
                        tr.t_end()
                    )));
                }
                Ok(tr.clone())
            }
        }
    }
}

struct Stepper<'a> {
    model: &'a FeedbackModel,
    delay: &'a DelayModel,
    traj: Trajectory,
    prim: Option<KernelPrimitive>,
    warm: f64,
}

impl<'a> Stepper<'a> {
    /// Right-hand side at `t_n + delta` for the stage value `x_s`, with the
    /// quadratic predictor through `(x_n, d_n, x_s)` inside the step.
    fn rhs(&mut self, t_n: f64, x_n: f64, d_n: f64, delta: f64, x_s: f64) -> Result<f64> {
        let t_s = t_n + delta;
        let k = self.delay.k();
        let c2 = if delta > 0.0 { (x_s - x_n - d_n * delta) / (delta * delta) } else { 0.0 };
        let q = |u: f64| {
            let w = u - t_n;
            x_n + d_n * w + c2 * w * w
        };
        let r = match self.delay.kind() {
            DelayKind::Constant { r0 } => *r0,
            DelayKind::Threshold { kernel, .. } => {
                let prim = self.prim.as_ref().expect("threshold primitive");
                let inside = if delta > 0.0 { gl8().integrate(t_n, t_s, |u| kernel.eval(q(u))) } else { 0.0 };
                let top = prim.last() + inside;
                let lower = t_s - k;
                let bottom = prim.at(&self.traj, kernel, lower);
                if top - bottom < 1.0 {
                    return Err(Error::NoRoot { integral: top - bottom });
                }
                if top - 1.0 > prim.last() {
                    return Err(Error::Precondition(format!("delay at t = {t_s} is shorter than the step")));
                }
                t_s - prim.solve(&self.traj, kernel, top - 1.0, lower)
            }
            DelayKind::Implicit { rule, .. } => {
                let traj = &self.traj;
                let lookup = |s: f64| {
                    let u = t_s - s;
                    if u <= t_n {
                        traj.value_at(u)
                    } else {
                        q(u)
                    }
                };
                let r = implicit_fixed_point(rule, x_s, lookup, k, self.warm)?;
                self.warm = r;
                r
            }
        };
        let u = t_s - r;
        let y = if u <= t_n { self.traj.value_at(u) } else { q(u) };
        Ok(self.model.f(x_s, y))
    }
}

/// Integrates from the initial segment up to `cfg.horizon`.
///
/// The result lives on `[-K, horizon]`; integrated nodes sit at `j·step`.
pub fn integrate(
    model: &FeedbackModel,
    delay: &DelayModel,
    phi: &InitialSegment,
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    let n_steps = cfg.steps()?;
    let h = cfg.step;
    let k = delay.k();
    let m = model.m();
    let tau0 = delay.tau0(m);
    if h > tau0 / 20.0 * (1.0 + 1e-12) {
        return Err(Error::InvalidParameter(format!("step {h} exceeds τ0/20 = {}", tau0 / 20.0)));
    }

    let mut hist = phi.history(k, h)?;
    let slack = model.l0() * (1.0 + LIP_SLACK);
    let seg_sup = hist.sup_norm_on(hist.t_start(), hist.t_end());
    if seg_sup >= m {
        return Err(Error::Precondition(format!("initial segment sup {seg_sup} is not below M = {m}")));
    }
    let lip = hist.segment(0.0, k)?.lipschitz_estimate(4 * hist.len().max(500));
    if lip > slack {
        return Err(Error::Precondition(format!(
            "initial segment Lipschitz estimate {lip} exceeds L0 = {}",
            model.l0()
        )));
    }

    let prim = match delay.kind() {
        DelayKind::Threshold { kernel, .. } => Some(KernelPrimitive::build(&hist, kernel)),
        _ => None,
    };
    let last = hist.len() - 1;
    let x0 = hist.values()[last];
    hist.set_right_deriv(last, 0.0);
    let mut st = Stepper { model, delay, traj: hist, prim, warm: 0.5 * k };
    let d0 = st.rhs(0.0, x0, 0.0, 0.0, x0)?;
    st.traj.set_right_deriv(last, d0);

    let (mut t_n, mut x_n, mut d_n) = (0.0, x0, d0);
    for j in 1..=n_steps {
        let k1 = d_n;
        let k2 = st.rhs(t_n, x_n, k1, 0.5 * h, x_n + 0.5 * h * k1)?;
        let k3 = st.rhs(t_n, x_n, k1, 0.5 * h, x_n + 0.5 * h * k2)?;
        let k4 = st.rhs(t_n, x_n, k1, h, x_n + h * k3)?;
        let x_next = x_n + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        let t_next = j as f64 * h;
        if !(x_next.abs() < m) {
            return Err(Error::BoundViolation { t: t_next, x: x_next, m });
        }
        let d_next = st.rhs(t_n, x_n, k1, t_next - t_n, x_next)?;
        st.traj.push_node(t_next, x_next, d_next, d_next);
        if let (Some(p), DelayKind::Threshold { kernel, .. }) = (st.prim.as_mut(), delay.kind()) {
            p.extend(&st.traj, kernel);
        }
        (t_n, x_n, d_n) = (t_next, x_next, d_next);
    }
    Ok(st.traj)
}

/// Defect of the dense output in the differential equation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualReport {
    /// max over the probe grid on `[0, t_end]`.
    pub max: f64,
    /// time at which `max` was attained.
    pub at: f64,
    /// max over probes in the first step `[0, step]`.
    pub first_step: f64,
    /// max over probes after the first step.
    pub after_first_step: f64,
}

/// `max |x'(t) - f(x(t), x(η(t)))|` over `grid` points of `[0, t_end]`.
///
/// Probe points are offset by a fixed irrational fraction so they avoid the
/// mesh, where the dense derivative is exact by construction.
pub fn residual_check(
    traj: &Trajectory,
    model: &FeedbackModel,
    delay: &DelayModel,
    grid: usize,
) -> Result<ResidualReport> {
    if grid == 0 {
        return Err(Error::Precondition("residual grid must be nonempty".into()));
    }
    let map = DelayedArgumentMap::new(traj, delay);
    let t_end = traj.t_end();
    let first_node = traj.mesh().iter().copied().find(|&s| s > 0.0).unwrap_or(t_end);
    let offset = 0.5 * (5f64.sqrt() - 1.0);
    let mut rep = ResidualReport { max: 0.0, at: 0.0, first_step: 0.0, after_first_step: 0.0 };
    for j in 0..grid {
        let t = t_end * (j as f64 + offset) / grid as f64;
        if t < 0.0 || t > t_end {
            continue;
        }
        let eta = map.eta(t)?;
        let res = (traj.deriv_at(t) - model.f(traj.value_at(t), traj.value_at(eta))).abs();
        if res > rep.max {
            rep.max = res;
            rep.at = t;
        }
        if t <= first_node {
            rep.first_step = rep.first_step.max(res);
        } else {
            rep.after_first_step = rep.after_first_step.max(res);
        }
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feedback::FnNonlinearity;

    fn neg_y() -> FeedbackModel {
        FeedbackModel::new(FnNonlinearity::new("-y", |_, y| -y, |_, _| 0.0, |_, _| -1.0), 2.0, 2.0).unwrap()
    }

    #[test]
    fn zero_initial_data_stays_zero() {
        let model = FeedbackModel::tanh(0.0, 1.6, 1.0, 2.0).unwrap();
        let delay = DelayModel::constant(1.0, 1.0).unwrap();
        let tr = integrate(&model, &delay, &InitialSegment::Constant(0.0), &IntegratorConfig::new(0.01, 5.0)).unwrap();
        assert!(tr.values().iter().all(|&v| v == 0.0));
        let rep = residual_check(&tr, &model, &delay, 500).unwrap();
        assert_eq!(rep.max, 0.0);
    }

    #[test]
    fn method_of_steps_by_hand() {
        let model = neg_y();
        let delay = DelayModel::constant(1.0, 1.0).unwrap();
        let tr = integrate(&model, &delay, &InitialSegment::Constant(1.0), &IntegratorConfig::new(0.01, 1.0)).unwrap();
        for j in 0..=100 {
            let t = j as f64 / 100.0;
            assert!((tr.eval(t).unwrap() - (1.0 - t)).abs() < 1e-13, "t = {t}");
        }
        let rep = residual_check(&tr, &model, &delay, 1000).unwrap();
        assert!(rep.max <= 1e-10, "{rep:?}");
    }

    #[test]
    fn second_interval_is_quadratic() {
        // on [1, 2]: x' = -(1 - (t - 1)) gives x(t) = (t - 1)^2 / 2 - (t - 1)
        let model = neg_y();
        let delay = DelayModel::constant(1.0, 1.0).unwrap();
        let tr = integrate(&model, &delay, &InitialSegment::Constant(1.0), &IntegratorConfig::new(0.01, 2.0)).unwrap();
        for j in 0..=100 {
            let s = j as f64 / 100.0;
            let exact = 0.5 * s * s - s;
            assert!((tr.eval(1.0 + s).unwrap() - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn step_restriction_is_enforced() {
        let model = neg_y();
        let delay = DelayModel::constant(1.0, 1.0).unwrap();
        let err = integrate(&model, &delay, &InitialSegment::Constant(0.5), &IntegratorConfig::new(0.1, 1.0));
        assert!(matches!(err, Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn horizon_must_be_whole_steps() {
        assert!(IntegratorConfig::new(0.3, 1.0).steps().is_err());
        assert_eq!(IntegratorConfig::new(0.25, 1.0).steps().unwrap(), 4);
    }

    #[test]
    fn inadmissible_initial_segment() {
        let model = neg_y();
        let delay = DelayModel::constant(1.0, 1.0).unwrap();
        let cfg = IntegratorConfig::new(0.01, 1.0);
        assert!(integrate(&model, &delay, &InitialSegment::Constant(2.5), &cfg).is_err());
        let steep = InitialSegment::function(|t| (t * 10.0).sin() * 0.5);
        assert!(matches!(integrate(&model, &delay, &steep, &cfg), Err(Error::Precondition(_))));
    }

    #[test]
    fn window_restart_copies_history() {
        let model = FeedbackModel::tanh(1.0, 1.6, 1.0, 3.0).unwrap();
        let delay = DelayModel::constant(1.0, 1.0).unwrap();
        let tr = integrate(&model, &delay, &InitialSegment::Constant(0.2), &IntegratorConfig::new(0.01, 3.0)).unwrap();
        let InitialSegment::History(h) = InitialSegment::from_window(&tr, 2.5, 1.0).unwrap() else { panic!() };
        assert_eq!(h.t_start(), -1.0);
        assert_eq!(h.t_end(), 0.0);
        for j in 0..=200 {
            let s = -1.0 + j as f64 / 200.0;
            assert!((h.eval(s).unwrap() - tr.eval(2.5 + s).unwrap()).abs() < 1e-14);
        }
    }

    #[test]
    fn threshold_and_implicit_runs_stay_bounded() {
        let model = FeedbackModel::tanh(1.0, 1.6, 1.0, 3.0).unwrap();
        let thr = DelayModel::threshold(crate::delay::Kernel::Quadratic { c0: 1.0, c2: 0.05 }, 0.3, 2.0).unwrap();
        let cfg = IntegratorConfig::new(0.01, 10.0);
        let tr = integrate(&model, &thr, &InitialSegment::Constant(0.5), &cfg).unwrap();
        assert!(tr.values().iter().all(|v| v.abs() < 3.0));
        // The first breaking point η(t*) = 0 falls inside a cell, where the
        // dense derivative is only first order accurate.
        let rep = residual_check(&tr, &model, &thr, 500).unwrap();
        assert!(rep.max < 1e-3, "{rep:?}");
        let late = (0..400).map(|j| 6.0 + j as f64 * 0.01 + 0.003).fold(0.0f64, |acc, t| {
            let map = DelayedArgumentMap::new(&tr, &thr);
            let y = tr.eval(map.eta(t).unwrap()).unwrap();
            acc.max((tr.eval_deriv(t).unwrap() - model.f(tr.eval(t).unwrap(), y)).abs())
        });
        assert!(late < 1e-6, "{late}");

        let imp = DelayModel::implicit(crate::delay::ImplicitRule::Echo { a: 1.0, b: 0.05 }, 0.05, 0.05, 2.0).unwrap();
        let tr = integrate(&model, &imp, &InitialSegment::Constant(0.5), &cfg).unwrap();
        assert!(residual_check(&tr, &model, &imp, 500).unwrap().max < 1e-3);
    }
}
