//! Scenario-file driven batch runner.
//!
//! Configs are flat `key = value` files with dotted sections; `#` starts a
//! comment. The schema is documented in `scenarios/README.md`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error as ThisError;

use crate::delay::{validate_delay, DelayModel, DelayedArgumentMap, ImplicitRule, Kernel};
use crate::error::Error;
use crate::feedback::{validate_feedback, FeedbackModel, Hypothesis, ValidationReport};
use crate::integrator::{integrate, InitialSegment, IntegratorConfig};
use crate::lyapunov::{v_trace, write_v_trace_csv, VSample, VValue, TOL_ZERO_REL};
use crate::morse::{
    classify, iterated_zero_diagnostic, morse_report, ClassifyConfig, EnsembleSpec, IteratedZeroReport,
    MorseLabel, MorseReport, RunSummary,
};
use crate::phase::{fmt17, PhaseSpace, Trajectory};
use crate::plot;
use crate::spectrum::{count_unstable, linearize, Linearization, SpectrumReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

const MAX_SWEEP_POINTS: usize = 100_000;

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error("config error{}: {message}", location(*.line, .key.as_deref()))]
    Config { line: Option<usize>, key: Option<String>, message: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

fn location(line: Option<usize>, key: Option<&str>) -> String {
    match (line, key) {
        (Some(l), Some(k)) => format!(" (line {l}, key {k})"),
        (Some(l), None) => format!(" (line {l})"),
        (None, Some(k)) => format!(" (key {k})"),
        (None, None) => String::new(),
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => EXIT_CONFIG,
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

const KNOWN_KEYS: &[&str] = &[
    "scenario.name",
    "feedback.family",
    "feedback.a",
    "feedback.b",
    "feedback.c",
    "space.M",
    "space.K",
    "delay.kind",
    "delay.r0",
    "delay.kernel",
    "delay.kernel.c0",
    "delay.kernel.c1",
    "delay.kernel.c2",
    "delay.kernel.xi",
    "delay.kernel.a",
    "delay.lip_a",
    "delay.R",
    "delay.R.a",
    "delay.R.b",
    "delay.R.bu",
    "delay.R.bv",
    "delay.lip_r1",
    "delay.lip_r2",
    "integrator.step",
    "integrator.horizon",
    "integrator.burn_in",
    "integrator.residual_grid",
    "ensemble.count",
    "ensemble.seed",
    "ensemble.initial",
    "ensemble.constant",
    "ensemble.knots",
    "ensemble.amp_frac",
    "ensemble.slope_frac",
    "analysis.spectrum",
    "analysis.v_trace",
    "analysis.morse",
    "analysis.h_infinity",
    "analysis.plots",
    "analysis.trace_dt",
    "analysis.tail_window",
    "analysis.n0",
    "analysis.hinf_sigma_grid",
    "analysis.hinf_k_max",
    "analysis.hinf_tol",
    "validation.samples",
    "validation.waive",
    "output.dir",
    "output.trajectories",
    "sweep.A",
    "sweep.B",
    "sweep.tau",
    "sweep.roots",
    "sweep.plot",
];

#[derive(Debug, Clone)]
struct Entry {
    line: usize,
    value: String,
}

/// Parsed `key = value` config.
#[derive(Debug, Clone, Default)]
pub struct Config {
    entries: BTreeMap<String, Entry>,
}

fn config_err(line: Option<usize>, key: &str, message: impl Into<String>) -> CliError {
    CliError::Config { line, key: Some(key.to_string()), message: message.into() }
}

impl Config {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((k, v)) = body.split_once('=') else {
                return Err(CliError::Config { line: Some(line), key: None, message: format!("expected key = value, got {body:?}") });
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(CliError::Config { line: Some(line), key: None, message: "empty key".into() });
            }
            if !KNOWN_KEYS.contains(&k) {
                return Err(config_err(Some(line), k, "unknown key"));
            }
            if let Some(prev) = entries.insert(k.to_string(), Entry { line, value: v.to_string() }) {
                return Err(config_err(Some(line), k, format!("duplicate key, first set on line {}", prev.line)));
            }
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config {
            line: None,
            key: None,
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    fn line(&self, key: &str) -> Option<usize> {
        self.entries.get(key).map(|e| e.line)
    }

    fn err(&self, key: &str, message: impl Into<String>) -> CliError {
        config_err(self.line(key), key, message)
    }

    fn f64_opt(&self, key: &str) -> CliResult<Option<f64>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => match v.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(Some(x)),
                _ => Err(self.err(key, format!("expected a finite number, got {v:?}"))),
            },
        }
    }

    fn f64_req(&self, key: &str) -> CliResult<f64> {
        self.f64_opt(key)?.ok_or_else(|| self.err(key, "missing required key"))
    }

    fn f64_or(&self, key: &str, default: f64) -> CliResult<f64> {
        Ok(self.f64_opt(key)?.unwrap_or(default))
    }

    fn u64_or(&self, key: &str, default: u64) -> CliResult<u64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| self.err(key, format!("expected a nonnegative integer, got {v:?}"))),
        }
    }

    fn usize_or(&self, key: &str, default: usize) -> CliResult<usize> {
        Ok(self.u64_or(key, default as u64)? as usize)
    }

    fn bool_or(&self, key: &str, default: bool) -> CliResult<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(self.err(key, format!("expected true or false, got {v:?}"))),
        }
    }

    fn list_f64(&self, key: &str) -> CliResult<Vec<f64>> {
        let v = self.get(key).ok_or_else(|| self.err(key, "missing required key"))?;
        v.split(',')
            .map(|s| s.trim().parse::<f64>().ok().filter(|x| x.is_finite()))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| self.err(key, format!("expected comma-separated numbers, got {v:?}")))
    }

    fn positive(&self, key: &str, v: f64) -> CliResult<f64> {
        if v > 0.0 {
            Ok(v)
        } else {
            Err(self.err(key, format!("must be positive, got {v}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Analysis {
    pub spectrum: bool,
    pub v_trace: bool,
    pub morse: bool,
    pub h_infinity: bool,
    pub plots: bool,
    pub trace_dt: f64,
    pub tail_window: f64,
    pub n0: Option<u32>,
    pub hinf_sigma_grid: usize,
    pub hinf_k_max: usize,
    pub hinf_tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialKind {
    RandomPl,
    Constant(f64),
}

/// A fully parsed `run` / `validate` config.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub model: FeedbackModel,
    pub delay: DelayModel,
    pub space: PhaseSpace,
    pub integ: IntegratorConfig,
    pub burn_in: f64,
    pub ensemble: EnsembleSpec,
    pub initial: InitialKind,
    pub analysis: Analysis,
    pub samples: usize,
    pub waive: Vec<Hypothesis>,
    pub out_dir: PathBuf,
    pub trajectories: usize,
}

fn default_name(path: Option<&Path>) -> String {
    path.and_then(|p| p.file_stem()).map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "scenario".into())
}

fn parse_delay(cfg: &Config, k: f64) -> CliResult<DelayModel> {
    let kind = cfg.get("delay.kind").ok_or_else(|| cfg.err("delay.kind", "missing required key"))?;
    let model = match kind {
        "constant" => DelayModel::constant(cfg.f64_req("delay.r0")?, k),
        "threshold" => {
            let key = "delay.kernel";
            let kernel = match cfg.get(key).ok_or_else(|| cfg.err(key, "missing required key"))? {
                "affine" => Kernel::Affine { c0: cfg.f64_req("delay.kernel.c0")?, c1: cfg.f64_req("delay.kernel.c1")? },
                "quadratic" => Kernel::Quadratic { c0: cfg.f64_req("delay.kernel.c0")?, c2: cfg.f64_req("delay.kernel.c2")? },
                "custom-table" => Kernel::table(cfg.list_f64("delay.kernel.xi")?, cfg.list_f64("delay.kernel.a")?)
                    .map_err(|e| cfg.err("delay.kernel.xi", e.to_string()))?,
                other => return Err(cfg.err(key, format!("unknown kernel {other:?}; expected affine, quadratic or custom-table"))),
            };
            DelayModel::threshold(kernel, cfg.f64_req("delay.lip_a")?, k)
        }
        "implicit" => {
            let key = "delay.R";
            let rule = match cfg.get(key).ok_or_else(|| cfg.err(key, "missing required key"))? {
                "affine_uv" => ImplicitRule::AffineUV {
                    a: cfg.f64_req("delay.R.a")?,
                    bu: cfg.f64_req("delay.R.bu")?,
                    bv: cfg.f64_req("delay.R.bv")?,
                },
                "echo" => ImplicitRule::Echo { a: cfg.f64_req("delay.R.a")?, b: cfg.f64_req("delay.R.b")? },
                "mill" => ImplicitRule::Mill { a: cfg.f64_req("delay.R.a")?, b: cfg.f64_req("delay.R.b")? },
                other => return Err(cfg.err(key, format!("unknown rule {other:?}; expected affine_uv, echo or mill"))),
            };
            DelayModel::implicit(rule, cfg.f64_req("delay.lip_r1")?, cfg.f64_req("delay.lip_r2")?, k)
        }
        other => return Err(cfg.err("delay.kind", format!("unknown kind {other:?}; expected constant, threshold or implicit"))),
    };
    model.map_err(|e| cfg.err("delay.kind", e.to_string()))
}

impl Scenario {
    pub fn from_config(cfg: &Config, path: Option<&Path>) -> CliResult<Self> {
        let name = cfg.get("scenario.name").map(str::to_string).unwrap_or_else(|| default_name(path));
        let family = cfg.get("feedback.family").unwrap_or("tanh");
        if family != "tanh" {
            return Err(cfg.err("feedback.family", format!("unknown family {family:?}; expected tanh")));
        }
        let m = cfg.positive("space.M", cfg.f64_req("space.M")?)?;
        let k = cfg.positive("space.K", cfg.f64_req("space.K")?)?;
        let model = FeedbackModel::tanh(cfg.f64_or("feedback.a", 0.0)?, cfg.f64_req("feedback.b")?, cfg.f64_or("feedback.c", 1.0)?, m)
            .map_err(|e| cfg.err("feedback.b", e.to_string()))?;
        let delay = parse_delay(cfg, k)?;
        let space = PhaseSpace::new(m, k, model.l0()).map_err(|e| cfg.err("space.M", e.to_string()))?;

        let step = cfg.positive("integrator.step", cfg.f64_req("integrator.step")?)?;
        let horizon = cfg.positive("integrator.horizon", cfg.f64_req("integrator.horizon")?)?;
        let mut integ = IntegratorConfig::new(step, horizon);
        integ.residual_grid = cfg.usize_or("integrator.residual_grid", integ.residual_grid)?;
        let burn_in = cfg.f64_or("integrator.burn_in", 2.0 * k)?;
        if burn_in < 0.0 {
            return Err(cfg.err("integrator.burn_in", "must be nonnegative"));
        }

        let mut ensemble = EnsembleSpec::new(cfg.usize_or("ensemble.count", 1)?, cfg.u64_or("ensemble.seed", 0)?);
        if ensemble.count == 0 {
            return Err(cfg.err("ensemble.count", "must be at least 1"));
        }
        ensemble.knots = cfg.usize_or("ensemble.knots", ensemble.knots)?;
        if ensemble.knots == 0 {
            return Err(cfg.err("ensemble.knots", "must be at least 1"));
        }
        for (key, slot) in [("ensemble.amp_frac", &mut ensemble.amp_frac), ("ensemble.slope_frac", &mut ensemble.slope_frac)] {
            let v = cfg.f64_or(key, *slot)?;
            if !(v > 0.0 && v <= 0.9) {
                return Err(cfg.err(key, format!("must lie in (0, 0.9], got {v}")));
            }
            *slot = v;
        }
        let initial = match cfg.get("ensemble.initial").unwrap_or("random_pl") {
            "random_pl" => InitialKind::RandomPl,
            "constant" => {
                let c = cfg.f64_req("ensemble.constant")?;
                if c.abs() >= m {
                    return Err(cfg.err("ensemble.constant", format!("|{c}| must be below M = {m}")));
                }
                InitialKind::Constant(c)
            }
            other => return Err(cfg.err("ensemble.initial", format!("unknown generator {other:?}; expected random_pl or constant"))),
        };

        let n0 = match cfg.get("analysis.n0") {
            None => None,
            Some(_) => Some(cfg.u64_or("analysis.n0", 1)? as u32),
        };
        let analysis = Analysis {
            spectrum: cfg.bool_or("analysis.spectrum", true)?,
            v_trace: cfg.bool_or("analysis.v_trace", true)?,
            morse: cfg.bool_or("analysis.morse", true)?,
            h_infinity: cfg.bool_or("analysis.h_infinity", false)?,
            plots: cfg.bool_or("analysis.plots", false)?,
            trace_dt: cfg.positive("analysis.trace_dt", cfg.f64_or("analysis.trace_dt", k / 10.0)?)?,
            tail_window: cfg.positive("analysis.tail_window", cfg.f64_or("analysis.tail_window", 10.0 * k)?)?,
            n0,
            hinf_sigma_grid: cfg.usize_or("analysis.hinf_sigma_grid", 200)?,
            hinf_k_max: cfg.usize_or("analysis.hinf_k_max", 5)?,
            hinf_tol: cfg.positive("analysis.hinf_tol", cfg.f64_or("analysis.hinf_tol", 1e-6 * m)?)?,
        };

        let waive = match cfg.get("validation.waive") {
            None | Some("") => Vec::new(),
            Some(list) => list
                .split(',')
                .map(|s| Hypothesis::parse(s).ok_or_else(|| cfg.err("validation.waive", format!("unknown hypothesis {:?}", s.trim()))))
                .collect::<CliResult<_>>()?,
        };

        Ok(Self {
            name,
            model,
            delay,
            space,
            integ,
            burn_in,
            ensemble,
            initial,
            analysis,
            samples: cfg.usize_or("validation.samples", 2000)?,
            waive,
            out_dir: PathBuf::from(cfg.get("output.dir").unwrap_or("out")),
            trajectories: cfg.usize_or("output.trajectories", 1)?,
        })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        Self::from_config(&Config::read(path)?, Some(path))
    }

    /// Runs every hypothesis validator on the model and delay.
    pub fn validation_report(&self) -> CliResult<ValidationReport> {
        let mut report = validate_feedback(&self.model, self.samples)?;
        report.merge(validate_delay(&self.delay, &self.space, self.samples)?);
        Ok(report)
    }

    /// Fails with the violated, non-waived hypotheses.
    pub fn check(&self) -> CliResult<ValidationReport> {
        let report = self.validation_report()?;
        let failed: Vec<String> = report
            .failures()
            .filter(|c| !self.waive.contains(&c.hypothesis))
            .map(|c| format!("{} violated: {}", c.hypothesis, c.detail))
            .collect();
        if failed.is_empty() {
            Ok(report)
        } else {
            Err(CliError::Validation(failed.join("; ")))
        }
    }

    pub fn classify_config(&self, n_star: u32) -> ClassifyConfig {
        let mut c = ClassifyConfig::defaults(self.space.m, self.space.k, n_star);
        c.burn_in = self.burn_in;
        c.tail_window = self.analysis.tail_window;
        if let Some(n0) = self.analysis.n0 {
            c.n0 = n0;
        }
        c
    }

    fn initial_segment(&self, i: usize) -> InitialSegment {
        match self.initial {
            InitialKind::RandomPl => InitialSegment::PiecewiseLinear(self.ensemble.segment(&self.space, i)),
            InitialKind::Constant(c) => InitialSegment::Constant(c),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectrumSummary {
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
    pub tau: f64,
    pub m_star: u32,
    pub hyperbolic: bool,
    pub n_star: u32,
}

impl From<&SpectrumReport> for SpectrumSummary {
    fn from(r: &SpectrumReport) -> Self {
        Self { a: r.lin.a, b: r.lin.b, tau: r.lin.tau, m_star: r.m_star, hyperbolic: r.hyperbolic, n_star: r.n_star }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceSummary {
    pub initial: Option<VValue>,
    #[serde(rename = "final")]
    pub last: Option<VValue>,
    pub min: Option<VValue>,
    pub max: Option<VValue>,
    pub samples: usize,
    /// First sample time at which the window was numerically zero.
    pub zero_from: Option<f64>,
}

fn trace_summary(trace: &[(f64, VValue)], dt: f64, t_end: f64) -> TraceSummary {
    let next = trace.last().map_or(0.0, |s| s.0 + dt);
    TraceSummary {
        initial: trace.first().map(|s| s.1),
        last: trace.last().map(|s| s.1),
        min: trace.iter().map(|s| s.1).min(),
        max: trace.iter().map(|s| s.1).max(),
        samples: trace.len(),
        zero_from: (next <= t_end + 1e-9 * dt).then_some(next),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HinfSummary {
    pub findings: usize,
    pub first_findings: Vec<f64>,
    pub trivial: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunEntry {
    pub index: usize,
    pub seed: Option<u64>,
    pub label: Option<MorseLabel>,
    pub v_trace_summary: Option<TraceSummary>,
    pub tail_norm: f64,
    pub h_infinity: Option<HinfSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HinfTotals {
    pub runs_checked: usize,
    pub trivial_runs: usize,
    pub nontrivial_with_findings: usize,
}

/// Contents of `morse.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MorseJson {
    pub scenario: String,
    pub seed: u64,
    pub spectrum: SpectrumSummary,
    pub n0: u32,
    pub label_counts: BTreeMap<String, usize>,
    pub runs: Vec<RunEntry>,
    pub ordering: Vec<crate::morse::Transition>,
    pub ordering_violations: Vec<crate::morse::Violation>,
    pub populated: Vec<String>,
    pub h_infinity: Option<HinfTotals>,
    pub notes: Vec<String>,
}

/// Everything a `run` produces, before it is written.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub spectrum: SpectrumReport,
    pub morse: MorseJson,
    pub report: Option<MorseReport>,
    /// Trajectories kept for output, with their V traces.
    pub kept: Vec<(Trajectory, Vec<VSample>, Vec<(Option<f64>, Option<f64>)>)>,
}

struct Member {
    entry: RunEntry,
    summary: Option<RunSummary>,
    kept: Option<(Trajectory, Vec<VSample>, Vec<(Option<f64>, Option<f64>)>)>,
}

fn simulate_member(sc: &Scenario, i: usize, cls: &ClassifyConfig, n_star: u32) -> CliResult<Member> {
    let seed = matches!(sc.initial, InitialKind::RandomPl).then(|| sc.ensemble.member_seed(i));
    let traj = integrate(&sc.model, &sc.delay, &sc.initial_segment(i), &sc.integ)?;
    let map = DelayedArgumentMap::new(&traj, &sc.delay);
    let tol = TOL_ZERO_REL * sc.space.m;
    let label = if sc.analysis.morse { Some(classify(&traj, &map, cls, n_star)?) } else { None };
    let keep = i < sc.trajectories;
    let need_trace = sc.analysis.v_trace || sc.analysis.morse;
    let full = if need_trace { v_trace(&traj, &map, 0.0, traj.t_end(), sc.analysis.trace_dt, tol)? } else { Vec::new() };
    let seq: Vec<(f64, VValue)> = full.iter().map(|s| (s.t, s.v)).collect();
    let hinf = if sc.analysis.h_infinity {
        let r: IteratedZeroReport = iterated_zero_diagnostic(
            &traj,
            &map,
            sc.analysis.hinf_sigma_grid,
            sc.analysis.hinf_k_max,
            sc.analysis.hinf_tol,
            sc.space.m,
        )?;
        Some(HinfSummary { findings: r.findings.len(), first_findings: r.findings.iter().take(5).copied().collect(), trivial: r.trivial })
    } else {
        None
    };
    let tail_norm = traj.sup_norm_on((traj.t_end() - sc.analysis.tail_window).max(0.0), traj.t_end());
    let kept = if keep {
        let first = map.first_time();
        let delays = traj
            .mesh()
            .iter()
            .map(|&t| if t >= first { map.eta(t).map(|e| (Some(t - e), Some(e))) } else { Ok((None, None)) })
            .collect::<crate::error::Result<Vec<_>>>()?;
        Some((traj.clone(), if sc.analysis.v_trace { full } else { Vec::new() }, delays))
    } else {
        None
    };
    drop(map);
    let entry = RunEntry {
        index: i,
        seed,
        label,
        v_trace_summary: need_trace.then(|| trace_summary(&seq, sc.analysis.trace_dt, traj.t_end())),
        tail_norm,
        h_infinity: hinf,
    };
    let summary = label.map(|label| RunSummary { seed, label, v_trace: seq, burn_in: sc.burn_in });
    Ok(Member { entry, summary, kept })
}

/// Validates, integrates and analyses a scenario without touching the disk.
pub fn execute(sc: &Scenario) -> CliResult<RunOutput> {
    sc.check()?;
    let lin: Linearization = linearize(&sc.model, &sc.delay)?;
    let spectrum = count_unstable(&lin, lin.default_tol_imag())?;
    let cls = sc.classify_config(spectrum.n_star);
    if sc.analysis.morse {
        cls.check(spectrum.n_star)?;
    }
    let members = (0..sc.ensemble.count)
        .into_par_iter()
        .map(|i| simulate_member(sc, i, &cls, spectrum.n_star))
        .collect::<CliResult<Vec<_>>>()?;

    let summaries: Vec<RunSummary> = members.iter().filter_map(|m| m.summary.clone()).collect();
    let report = if sc.analysis.morse { Some(morse_report(&summaries, spectrum.n_star, cls.n0)?) } else { None };
    let h_infinity = sc.analysis.h_infinity.then(|| {
        let hs: Vec<&HinfSummary> = members.iter().filter_map(|m| m.entry.h_infinity.as_ref()).collect();
        HinfTotals {
            runs_checked: hs.len(),
            trivial_runs: hs.iter().filter(|h| h.trivial).count(),
            nontrivial_with_findings: hs.iter().filter(|h| !h.trivial && h.findings > 0).count(),
        }
    });
    let (label_counts, ordering, ordering_violations, populated, mut notes) = match &report {
        Some(r) => (r.label_counts.clone(), r.ordering.clone(), r.violations.clone(), r.populated.clone(), r.notes.clone()),
        None => Default::default(),
    };
    notes.extend(spectrum.notes());
    let mut kept = Vec::new();
    let mut runs = Vec::with_capacity(members.len());
    for m in members {
        runs.push(m.entry);
        if let Some(k) = m.kept {
            kept.push(k);
        }
    }
    let morse = MorseJson {
        scenario: sc.name.clone(),
        seed: sc.ensemble.seed,
        spectrum: SpectrumSummary::from(&spectrum),
        n0: cls.n0,
        label_counts,
        runs,
        ordering,
        ordering_violations,
        populated,
        h_infinity,
        notes,
    };
    Ok(RunOutput { spectrum, morse, report, kept })
}

fn opt17(v: Option<f64>) -> String {
    v.map(fmt17).unwrap_or_default()
}

/// Writes `t,x,dx,r,eta`; delay columns are empty on the initial segment.
pub fn write_trajectory_csv<W: Write>(traj: &Trajectory, delays: &[(Option<f64>, Option<f64>)], mut w: W) -> io::Result<()> {
    writeln!(w, "t,x,dx,r,eta")?;
    for (i, (&t, &x)) in traj.mesh().iter().zip(traj.values()).enumerate() {
        let (r, e) = delays.get(i).copied().unwrap_or((None, None));
        writeln!(w, "{},{},{},{},{}", fmt17(t), fmt17(x), fmt17(traj.derivs()[i]), opt17(r), opt17(e))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn create(path: &Path) -> CliResult<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

/// Writes the artifacts of a run and returns their paths.
pub fn write_outputs(sc: &Scenario, out: &RunOutput, dir: &Path) -> CliResult<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (i, (traj, trace, delays)) in out.kept.iter().enumerate() {
        let p = dir.join(format!("trajectory_{i:03}.csv"));
        let mut w = create(&p)?;
        write_trajectory_csv(traj, delays, &mut w)?;
        w.flush()?;
        written.push(p);
        if sc.analysis.v_trace {
            let p = dir.join(format!("v_trace_{i:03}.csv"));
            let mut w = create(&p)?;
            write_v_trace_csv(trace, &mut w)?;
            w.flush()?;
            written.push(p);
        }
        if sc.analysis.plots {
            let xs: Vec<(f64, f64)> = traj.mesh().iter().copied().zip(traj.values().iter().copied()).collect();
            let p = dir.join(format!("x_{i:03}.svg"));
            fs::write(&p, plot::line_chart(&format!("{} run {i}", sc.name), "t", "x(t)", &[("x", xs)]))?;
            written.push(p);
            if sc.analysis.v_trace {
                let vs: Vec<(f64, f64)> = trace
                    .iter()
                    .map(|s| (s.t, s.v.finite().map_or(f64::NAN, f64::from)))
                    .collect();
                let p = dir.join(format!("v_{i:03}.svg"));
                fs::write(&p, plot::line_chart(&format!("{} run {i}", sc.name), "t", "V", &[("V", vs)]))?;
                written.push(p);
            }
        }
    }
    if sc.analysis.spectrum {
        let p = dir.join("spectrum.json");
        write_json(&p, &out.spectrum)?;
        written.push(p);
    }
    if sc.analysis.morse || sc.analysis.h_infinity {
        let p = dir.join("morse.json");
        write_json(&p, &out.morse)?;
        written.push(p);
    }
    Ok(written)
}

/// Overrides from the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub step: Option<f64>,
    pub horizon: Option<f64>,
    pub burn_in: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, sc: &mut Scenario) -> CliResult<()> {
        if let Some(d) = &self.out_dir {
            sc.out_dir = d.clone();
        }
        if let Some(s) = self.seed {
            sc.ensemble.seed = s;
        }
        for (flag, v) in [("--step", self.step), ("--horizon", self.horizon), ("--burn-in", self.burn_in)] {
            if let Some(v) = v {
                if !(v.is_finite() && v >= 0.0) || (flag != "--burn-in" && v == 0.0) {
                    return Err(CliError::Config { line: None, key: Some(flag.into()), message: format!("bad value {v}") });
                }
            }
        }
        if let Some(h) = self.step {
            sc.integ.step = h;
        }
        if let Some(t) = self.horizon {
            sc.integ.horizon = t;
        }
        if let Some(b) = self.burn_in {
            sc.burn_in = b;
        }
        Ok(())
    }
}

/// `run <config>`: validates, simulates and writes artifacts.
pub fn run_scenario(path: &Path, ov: &Overrides) -> CliResult<(RunOutput, Vec<PathBuf>)> {
    let mut sc = Scenario::load(path)?;
    ov.apply(&mut sc)?;
    let out = execute(&sc)?;
    let files = write_outputs(&sc, &out, &sc.out_dir)?;
    Ok((out, files))
}

/// One axis of a sweep grid: `start:stop:step`, a comma list or a single value.
pub fn parse_axis(cfg: &Config, key: &str) -> CliResult<Vec<f64>> {
    let v = cfg.get(key).ok_or_else(|| cfg.err(key, "missing required key"))?;
    if v.contains(':') {
        let parts: Vec<f64> = v
            .split(':')
            .map(|s| s.trim().parse::<f64>().ok().filter(|x| x.is_finite()))
            .collect::<Option<_>>()
            .ok_or_else(|| cfg.err(key, format!("expected start:stop:step, got {v:?}")))?;
        let [start, stop, step] = parts[..] else {
            return Err(cfg.err(key, format!("expected start:stop:step, got {v:?}")));
        };
        if !(step > 0.0) || stop < start {
            return Err(cfg.err(key, format!("empty grid {v:?}")));
        }
        let n = ((stop - start) / step + 1e-9).floor();
        if n >= MAX_SWEEP_POINTS as f64 {
            return Err(cfg.err(key, format!("grid {v:?} exceeds {MAX_SWEEP_POINTS} points")));
        }
        Ok((0..=n as usize).map(|i| start + i as f64 * step).collect())
    } else {
        let list = cfg.list_f64(key)?;
        if list.is_empty() {
            return Err(cfg.err(key, "empty grid"));
        }
        Ok(list)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub name: String,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub tau: Vec<f64>,
    pub roots: bool,
    pub plot: bool,
    pub out_dir: PathBuf,
}

impl SweepSpec {
    pub fn from_config(cfg: &Config, path: Option<&Path>) -> CliResult<Self> {
        let spec = Self {
            name: cfg.get("scenario.name").map(str::to_string).unwrap_or_else(|| default_name(path)),
            a: parse_axis(cfg, "sweep.A")?,
            b: parse_axis(cfg, "sweep.B")?,
            tau: parse_axis(cfg, "sweep.tau")?,
            roots: cfg.bool_or("sweep.roots", false)?,
            plot: cfg.bool_or("sweep.plot", false)?,
            out_dir: PathBuf::from(cfg.get("output.dir").unwrap_or("out")),
        };
        if let Some(b) = spec.b.iter().find(|b| !(**b < 0.0)) {
            return Err(cfg.err("sweep.B", format!("B must be negative, got {b}")));
        }
        if let Some(t) = spec.tau.iter().find(|t| !(**t > 0.0)) {
            return Err(cfg.err("sweep.tau", format!("tau must be positive, got {t}")));
        }
        if spec.points() > MAX_SWEEP_POINTS {
            return Err(cfg.err("sweep.A", format!("grid has {} points, limit {MAX_SWEEP_POINTS}", spec.points())));
        }
        Ok(spec)
    }

    pub fn points(&self) -> usize {
        self.a.len() * self.b.len() * self.tau.len()
    }

    /// Grid points in output order: `A` outermost, then `B`, then `tau`.
    pub fn grid(&self) -> Vec<(f64, f64, f64)> {
        let mut g = Vec::with_capacity(self.points());
        for &a in &self.a {
            for &b in &self.b {
                for &t in &self.tau {
                    g.push((a, b, t));
                }
            }
        }
        g
    }
}

/// Spectrum of every sweep point, in grid order.
pub fn sweep_reports(spec: &SweepSpec) -> CliResult<Vec<SpectrumReport>> {
    spec.grid()
        .into_par_iter()
        .map(|(a, b, t)| {
            let lin = Linearization::new(a, b, t)?;
            Ok(count_unstable(&lin, lin.default_tol_imag())?)
        })
        .collect()
}

/// Writes `stability.csv` (and `roots.csv`, `stability.svg` when enabled).
pub fn write_sweep(spec: &SweepSpec, reports: &[SpectrumReport], dir: &Path) -> CliResult<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let p = dir.join("stability.csv");
    let mut w = create(&p)?;
    writeln!(w, "A,B,tau,m_star,hyperbolic,n_star")?;
    for r in reports {
        writeln!(w, "{},{},{},{},{},{}", fmt17(r.lin.a), fmt17(r.lin.b), fmt17(r.lin.tau), r.m_star, r.hyperbolic, r.n_star)?;
    }
    w.flush()?;
    written.push(p);
    if spec.roots {
        let p = dir.join("roots.csv");
        let mut w = create(&p)?;
        writeln!(w, "A,B,tau,re,im")?;
        for r in reports {
            for z in &r.roots {
                writeln!(w, "{},{},{},{},{}", fmt17(r.lin.a), fmt17(r.lin.b), fmt17(r.lin.tau), fmt17(z.re), fmt17(z.im))?;
            }
        }
        w.flush()?;
        written.push(p);
    }
    if spec.plot {
        let tau0 = spec.tau[0];
        let pts: Vec<(f64, f64, u32)> =
            reports.iter().filter(|r| r.lin.tau == tau0).map(|r| (r.lin.b, r.lin.a, r.n_star)).collect();
        let p = dir.join("stability.svg");
        fs::write(&p, plot::class_chart(&format!("{} (tau = {tau0})", spec.name), "B", "A", &pts))?;
        written.push(p);
    }
    Ok(written)
}

/// `sweep <config>`.
pub fn run_sweep(path: &Path, out_dir: Option<&Path>) -> CliResult<(Vec<SpectrumReport>, Vec<PathBuf>)> {
    let cfg = Config::read(path)?;
    let mut spec = SweepSpec::from_config(&cfg, Some(path))?;
    if let Some(d) = out_dir {
        spec.out_dir = d.to_path_buf();
    }
    let reports = sweep_reports(&spec)?;
    let files = write_sweep(&spec, &reports, &spec.out_dir)?;
    Ok((reports, files))
}

#[derive(Debug, Parser)]
#[command(name = "sdde-morse", version, about = "Morse decompositions of scalar state-dependent delay equations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Output directory (overrides output.dir).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Replaces ensemble.seed.
    #[arg(long, global = true)]
    pub seed_override: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate, integrate and classify a scenario.
    Run {
        config: PathBuf,
        #[arg(long)]
        step: Option<f64>,
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long)]
        burn_in: Option<f64>,
    },
    /// Stability chart over an (A, B, tau) grid.
    Sweep { config: PathBuf },
    /// Run the hypothesis validators only.
    Validate { config: PathBuf },
}

fn dispatch(cli: Cli, out: &mut (dyn Write + Send)) -> CliResult<()> {
    match cli.command {
        Command::Run { config, step, horizon, burn_in } => {
            let ov = Overrides { out_dir: cli.out_dir, seed: cli.seed_override, step, horizon, burn_in };
            let (res, files) = run_scenario(&config, &ov)?;
            let s = &res.morse.spectrum;
            writeln!(out, "scenario {}: A = {}, B = {}, tau = {}, M* = {}, N* = {}", res.morse.scenario, s.a, s.b, s.tau, s.m_star, s.n_star)?;
            for (label, n) in &res.morse.label_counts {
                writeln!(out, "  {label}: {n}")?;
            }
            writeln!(out, "  ordering violations: {}", res.morse.ordering_violations.len())?;
            for f in files {
                writeln!(out, "wrote {}", f.display())?;
            }
        }
        Command::Sweep { config } => {
            let (reports, files) = run_sweep(&config, cli.out_dir.as_deref())?;
            writeln!(out, "{} grid points", reports.len())?;
            for f in files {
                writeln!(out, "wrote {}", f.display())?;
            }
        }
        Command::Validate { config } => {
            let mut sc = Scenario::load(&config)?;
            Overrides { seed: cli.seed_override, ..Default::default() }.apply(&mut sc)?;
            let report = sc.validation_report()?;
            write!(out, "{report}")?;
            for h in &sc.waive {
                writeln!(out, "waived {h}")?;
            }
            sc.check()?;
            writeln!(out, "ok")?;
        }
    }
    Ok(())
}

/// Entry point; returns the process exit code.
pub fn main_from<I, T>(args: I, out: &mut (dyn Write + Send), err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(cli, out)),
            Err(e) => Err(CliError::Runtime(e.to_string())),
        },
        None => dispatch(cli, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "{e}");
            e.exit_code()
        }
    }
}
