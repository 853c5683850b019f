//! Empirical Morse classification of long trajectories.
//!
//! A run is labelled by the limit of `V` on its tail: `EqualsN` for a
//! stabilized value below `N0`, `AtLeastN0` for rapid oscillation, and
//! `OriginLimit` when the tail has collapsed onto the origin. Labels describe
//! the ω-limit side only; α-limits are not estimated (there is no backward
//! flow).

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_xoshiro::SplitMix64;
use rayon::prelude::*;
use serde::Serialize;

use crate::delay::{DelayModel, DelayedArgumentMap};
use crate::error::{Error, Result};
use crate::feedback::FeedbackModel;
use crate::integrator::{integrate, InitialSegment, IntegratorConfig};
use crate::lyapunov::{v_limit, v_trace, VValue, TOL_ZERO_REL};
use crate::phase::{random_segment, PhaseSpace, PiecewiseLinear, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind")]
pub enum MorseKind {
    EqualsN { n: u32 },
    AtLeastN0 { n0: u32 },
    OriginLimit,
    Undetermined,
}

impl fmt::Display for MorseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MorseKind::EqualsN { n } => write!(f, "EqualsN{{{n}}}"),
            MorseKind::AtLeastN0 { n0 } => write!(f, "AtLeastN0{{{n0}}}"),
            MorseKind::OriginLimit => write!(f, "OriginLimit"),
            MorseKind::Undetermined => write!(f, "Undetermined"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evidence {
    pub v_limit: Option<VValue>,
    pub stabilized: bool,
    pub tail_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MorseLabel {
    #[serde(flatten)]
    pub kind: MorseKind,
    pub evidence: Evidence,
}

impl MorseLabel {
    /// Index `n` of the Morse set `M_n` the ω-limit was observed in. The
    /// origin lies in `M_{N*}`.
    pub fn morse_index(&self, n_star: u32) -> Option<u32> {
        match self.kind {
            MorseKind::EqualsN { n } => Some(n),
            MorseKind::AtLeastN0 { n0 } => Some(n0),
            MorseKind::OriginLimit => Some(n_star),
            MorseKind::Undetermined => None,
        }
    }
}

/// Smallest odd number above `n_star`.
pub fn default_n0(n_star: u32) -> u32 {
    if n_star % 2 == 0 {
        n_star + 1
    } else {
        n_star + 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassifyConfig {
    pub burn_in: f64,
    pub tail_window: f64,
    pub eps_origin: f64,
    pub tol_zero: f64,
    pub n0: u32,
}

impl ClassifyConfig {
    /// Defaults for amplitude bound `m`, delay bound `k` and spectrum `n_star`.
    pub fn defaults(m: f64, k: f64, n_star: u32) -> Self {
        Self {
            burn_in: 2.0 * k,
            tail_window: 10.0 * k,
            eps_origin: 1e-6 * m,
            tol_zero: TOL_ZERO_REL * m,
            n0: default_n0(n_star),
        }
    }

    pub fn check(&self, n_star: u32) -> Result<()> {
        if self.n0 % 2 == 0 || self.n0 <= n_star {
            return Err(Error::Precondition(format!("N0 = {} must be odd and greater than N* = {n_star}", self.n0)));
        }
        if !(self.burn_in >= 0.0 && self.tail_window > 0.0 && self.eps_origin > 0.0 && self.tol_zero > 0.0) {
            return Err(Error::InvalidParameter("classification windows and tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// Labels one trajectory from its tail `[t_end - tail_window, t_end]`.
pub fn classify(
    traj: &Trajectory,
    map: &DelayedArgumentMap<'_>,
    cfg: &ClassifyConfig,
    n_star: u32,
) -> Result<MorseLabel> {
    cfg.check(n_star)?;
    let t_end = traj.t_end();
    if t_end < cfg.burn_in + cfg.tail_window {
        return Err(Error::Precondition(format!(
            "horizon {t_end} shorter than burn-in {} plus tail window {}",
            cfg.burn_in, cfg.tail_window
        )));
    }
    let t0 = t_end - cfg.tail_window;
    let tail_norm = traj.sup_norm_on(t0, t_end);
    let origin = |stabilized| MorseLabel {
        kind: MorseKind::OriginLimit,
        evidence: Evidence { v_limit: None, stabilized, tail_norm },
    };
    if tail_norm < cfg.eps_origin {
        return Ok(origin(true));
    }
    let lim = match v_limit(traj, map, (t0, t_end), cfg.tol_zero) {
        Ok(l) => l,
        Err(Error::AllZero { .. }) => return Ok(origin(false)),
        Err(e) => return Err(e),
    };
    let evidence = Evidence { v_limit: Some(lim.value), stabilized: lim.stabilized, tail_norm };
    let kind = match (lim.stabilized, lim.value) {
        (false, _) => MorseKind::Undetermined,
        (true, VValue::Finite(n)) if n < cfg.n0 => MorseKind::EqualsN { n },
        (true, _) => MorseKind::AtLeastN0 { n0: cfg.n0 },
    };
    Ok(MorseLabel { kind, evidence })
}

/// A classified run as consumed by [`morse_report`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub seed: Option<u64>,
    pub label: MorseLabel,
    /// `(t, V)` samples; ends early if the window became numerically zero.
    pub v_trace: Vec<(f64, VValue)>,
    pub burn_in: f64,
}

impl RunSummary {
    pub fn initial_v(&self) -> Option<VValue> {
        self.v_trace.first().map(|s| s.1)
    }

    /// First `(t_prev, v_prev, t, v)` past burn-in where `V` increases.
    pub fn first_increase(&self) -> Option<(f64, VValue, f64, VValue)> {
        self.v_trace
            .windows(2)
            .filter(|w| w[0].0 >= self.burn_in)
            .find(|w| w[1].1 > w[0].1)
            .map(|w| (w[0].0, w[0].1, w[1].0, w[1].1))
    }
}

/// Tail state of a run in the ordering matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case", tag = "state", content = "v")]
pub enum TailState {
    V(VValue),
    Origin,
    Undetermined(VValue),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Transition {
    pub from: VValue,
    pub to: TailState,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub run: usize,
    pub seed: Option<u64>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MorseReport {
    pub label_counts: BTreeMap<String, usize>,
    pub ordering: Vec<Transition>,
    pub violations: Vec<Violation>,
    /// Populated Morse sets in their order, e.g. `M_1 = S_1`.
    pub populated: Vec<String>,
    pub notes: Vec<String>,
}

/// Aggregates classified runs: label counts, the (initial V → tail) matrix,
/// monotonicity violations and the populated Morse sets.
pub fn morse_report(runs: &[RunSummary], n_star: u32, n0: u32) -> Result<MorseReport> {
    if runs.is_empty() {
        return Err(Error::Precondition("morse_report needs at least one run".into()));
    }
    let mut label_counts = BTreeMap::new();
    let mut matrix: BTreeMap<(VValue, TailState), usize> = BTreeMap::new();
    let mut violations = Vec::new();
    let mut indices = BTreeMap::new();
    let mut zero_runs = 0usize;
    for (i, run) in runs.iter().enumerate() {
        *label_counts.entry(run.label.kind.to_string()).or_insert(0) += 1;
        if let Some(idx) = run.label.morse_index(n_star) {
            *indices.entry(idx).or_insert(0usize) += 1;
        }
        if let Some((t0, v0, t1, v1)) = run.first_increase() {
            violations.push(Violation {
                run: i,
                seed: run.seed,
                detail: format!("V increased from {v0} at t = {t0} to {v1} at t = {t1}"),
            });
        }
        let Some(first) = run.initial_v() else {
            zero_runs += 1;
            continue;
        };
        let last = run.v_trace.last().map(|s| s.1).unwrap_or(first);
        let tail = match run.label.kind {
            MorseKind::OriginLimit => TailState::Origin,
            MorseKind::Undetermined => TailState::Undetermined(run.label.evidence.v_limit.unwrap_or(last)),
            _ => TailState::V(run.label.evidence.v_limit.unwrap_or(last)),
        };
        if let TailState::V(v) | TailState::Undetermined(v) = tail {
            if v > first {
                violations.push(Violation {
                    run: i,
                    seed: run.seed,
                    detail: format!("tail V = {v} exceeds initial V = {first}"),
                });
            }
        }
        *matrix.entry((first, tail)).or_insert(0) += 1;
    }
    let ordering = matrix.into_iter().map(|((from, to), count)| Transition { from, to, count }).collect();
    let populated = indices
        .keys()
        .map(|&n| {
            let set = if n == n0 {
                format!("S+_{n0}")
            } else if n == n_star {
                format!("S_{n} (contains 0)")
            } else {
                format!("S_{n}")
            };
            format!("M_{n} = {set}")
        })
        .collect();
    let mut notes = vec!["labels record empirical membership of the ω-limit; α-limits are not estimated".to_string()];
    if zero_runs == runs.len() {
        notes.push("only the equilibrium was observed".to_string());
    }
    Ok(MorseReport { label_counts, ordering, violations, populated, notes })
}

/// Initial-segment generator of an ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnsembleSpec {
    pub count: usize,
    pub seed: u64,
    pub knots: usize,
    pub amp_frac: f64,
    pub slope_frac: f64,
}

impl EnsembleSpec {
    pub fn new(count: usize, seed: u64) -> Self {
        Self { count, seed, knots: 8, amp_frac: 0.9, slope_frac: 0.9 }
    }

    /// Per-member seed: the base seed advanced by the golden-ratio increment.
    pub fn member_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    pub fn segment(&self, space: &PhaseSpace, i: usize) -> PiecewiseLinear {
        let mut rng = SplitMix64::seed_from_u64(self.member_seed(i));
        random_segment(&mut rng, space, self.knots, self.amp_frac, self.slope_frac)
    }
}

/// Everything computed for one ensemble member.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub summary: RunSummary,
    pub traj: Trajectory,
}

/// `V` on `[η(t), t]` for `t = 0, dt, 2dt, …`, stopping at the first window
/// that is numerically zero.
pub fn v_sequence(
    traj: &Trajectory,
    map: &DelayedArgumentMap<'_>,
    dt: f64,
    tol_zero: f64,
) -> Result<Vec<(f64, VValue)>> {
    Ok(v_trace(traj, map, 0.0, traj.t_end(), dt, tol_zero)?.into_iter().map(|s| (s.t, s.v)).collect())
}

/// Integrates, traces `V` and classifies one initial segment.
pub fn run_member(
    model: &FeedbackModel,
    delay: &DelayModel,
    phi: &InitialSegment,
    integ: &IntegratorConfig,
    cfg: &ClassifyConfig,
    n_star: u32,
    trace_dt: f64,
    seed: Option<u64>,
) -> Result<RunRecord> {
    let traj = integrate(model, delay, phi, integ)?;
    let map = DelayedArgumentMap::new(&traj, delay);
    let label = classify(&traj, &map, cfg, n_star)?;
    let v_trace = v_sequence(&traj, &map, trace_dt, cfg.tol_zero)?;
    drop(map);
    Ok(RunRecord { summary: RunSummary { seed, label, v_trace, burn_in: cfg.burn_in }, traj })
}

/// Runs an ensemble in parallel; results keep the member order.
pub fn run_ensemble(
    model: &FeedbackModel,
    delay: &DelayModel,
    spec: &EnsembleSpec,
    integ: &IntegratorConfig,
    cfg: &ClassifyConfig,
    n_star: u32,
    trace_dt: f64,
) -> Result<Vec<RunRecord>> {
    let space = PhaseSpace::new(model.m(), delay.k(), model.l0())?;
    (0..spec.count)
        .into_par_iter()
        .map(|i| {
            let phi = InitialSegment::PiecewiseLinear(spec.segment(&space, i));
            run_member(model, delay, &phi, integ, cfg, n_star, trace_dt, Some(spec.member_seed(i)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IteratedZeroReport {
    /// Anchors `σ` whose iterates `x(η^k(σ))`, `k = 0..=k_max`, all vanish.
    pub findings: Vec<f64>,
    pub probes: usize,
    /// Every probe was reported and `x` is numerically zero back to the
    /// deepest iterate.
    pub trivial: bool,
    pub warnings: Vec<String>,
}

/// Searches `[η(T), T]`, `T = t_end`, for anchors all of whose delay
/// iterates are zeros of `x`.
pub fn iterated_zero_diagnostic(
    traj: &Trajectory,
    map: &DelayedArgumentMap<'_>,
    sigma_grid: usize,
    k_max: usize,
    tol: f64,
    m: f64,
) -> Result<IteratedZeroReport> {
    if sigma_grid < 2 {
        return Err(Error::Precondition("sigma grid needs at least two points".into()));
    }
    let t = traj.t_end();
    let lo = map.eta(t)?;
    // history must reach the deepest iterate of the earliest anchor
    let deep = map.eta_iter(lo, k_max)?;
    let mut warnings = Vec::new();
    if tol >= m {
        warnings.push(format!("tolerance {tol} is not below M = {m}: every anchor passes"));
    }
    let mut findings = Vec::new();
    for j in 0..sigma_grid {
        let sigma = lo + (t - lo) * j as f64 / (sigma_grid - 1) as f64;
        let mut s = sigma;
        let mut all = traj.value_at(s).abs() < tol;
        for _ in 0..k_max {
            if !all {
                break;
            }
            s = map.eta(s)?;
            all = traj.value_at(s).abs() < tol;
        }
        if all {
            findings.push(sigma);
        }
    }
    let trivial = findings.len() == sigma_grid && traj.sup_norm_on(deep, t) < tol;
    if trivial {
        warnings.push("trajectory is the trivial solution".into());
    }
    Ok(IteratedZeroReport { findings, probes: sigma_grid, trivial, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label(kind: MorseKind) -> MorseLabel {
        MorseLabel { kind, evidence: Evidence { v_limit: None, stabilized: true, tail_norm: 0.1 } }
    }

    #[test]
    fn default_n0_is_odd_and_above() {
        for n in 0..10 {
            let n0 = default_n0(n);
            assert!(n0 % 2 == 1 && n0 > n && n0 <= n + 2);
        }
    }

    #[test]
    fn corrupted_trace_is_flagged() {
        let run = RunSummary {
            seed: Some(7),
            label: label(MorseKind::EqualsN { n: 1 }),
            v_trace: vec![(0.0, VValue::Finite(5)), (3.0, VValue::Finite(3)), (4.0, VValue::Finite(5)), (5.0, VValue::Finite(1))],
            burn_in: 2.0,
        };
        let rep = morse_report(&[run], 2, 3).unwrap();
        assert_eq!(rep.violations.len(), 1);
        assert_eq!(rep.violations[0].seed, Some(7));
    }

    #[test]
    fn increase_during_burn_in_is_tolerated() {
        let run = RunSummary {
            seed: None,
            label: label(MorseKind::EqualsN { n: 1 }),
            v_trace: vec![(0.0, VValue::Finite(3)), (1.0, VValue::Finite(5)), (3.0, VValue::Finite(1))],
            burn_in: 2.0,
        };
        let rep = morse_report(&[run], 2, 3).unwrap();
        assert!(rep.violations.is_empty());
        assert_eq!(rep.populated, vec!["M_1 = S_1".to_string()]);
    }

    #[test]
    fn zero_run_notes_equilibrium() {
        let run = RunSummary { seed: None, label: label(MorseKind::OriginLimit), v_trace: vec![], burn_in: 2.0 };
        let rep = morse_report(&[run], 0, 1).unwrap();
        assert!(rep.notes.iter().any(|n| n.contains("equilibrium")));
        assert_eq!(rep.populated, vec!["M_0 = S_0 (contains 0)".to_string()]);
        assert!(morse_report(&[], 0, 1).is_err());
    }

    #[test]
    fn short_horizon_is_rejected() {
        let model = FeedbackModel::tanh(0.0, 1.0, 1.0, 2.0).unwrap();
        let delay = DelayModel::constant(1.0, 1.0).unwrap();
        let tr = integrate(&model, &delay, &InitialSegment::Constant(0.1), &IntegratorConfig::new(0.01, 5.0)).unwrap();
        let map = DelayedArgumentMap::new(&tr, &delay);
        let cfg = ClassifyConfig::defaults(2.0, 1.0, 0);
        assert!(matches!(classify(&tr, &map, &cfg, 0), Err(Error::Precondition(_))));
        let even = ClassifyConfig { n0: 2, ..cfg };
        assert!(matches!(even.check(0), Err(Error::Precondition(_))));
    }

    #[test]
    fn zero_trajectory_diagnostic_is_trivial() {
        let model = FeedbackModel::tanh(0.0, 1.0, 1.0, 2.0).unwrap();
        let delay = DelayModel::constant(1.0, 1.0).unwrap();
        let tr = integrate(&model, &delay, &InitialSegment::Constant(0.0), &IntegratorConfig::new(0.01, 8.0)).unwrap();
        let map = DelayedArgumentMap::new(&tr, &delay);
        let rep = iterated_zero_diagnostic(&tr, &map, 50, 5, 1e-9, 2.0).unwrap();
        assert_eq!(rep.findings.len(), 50);
        assert!(rep.trivial);
        assert!(matches!(iterated_zero_diagnostic(&tr, &map, 50, 9, 1e-9, 2.0), Err(Error::InsufficientHistory { .. })));
    }

    #[test]
    fn huge_tolerance_reports_everything() {
        let model = FeedbackModel::tanh(0.0, 1.0, 1.0, 2.0).unwrap();
        let delay = DelayModel::constant(1.0, 1.0).unwrap();
        let tr = integrate(&model, &delay, &InitialSegment::Constant(0.5), &IntegratorConfig::new(0.01, 8.0)).unwrap();
        let map = DelayedArgumentMap::new(&tr, &delay);
        let rep = iterated_zero_diagnostic(&tr, &map, 20, 3, 2.0, 2.0).unwrap();
        assert_eq!(rep.findings.len(), 20);
        assert!(!rep.warnings.is_empty());
    }
}
