//! Delay functionals `r(x_t)`: constant, threshold-kernel and implicit
//! two-value delays, the delayed-argument map `η(t) = t - r(x_t)` and its
//! iterates, and grid audits of the delay hypotheses.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex, OnceLock};

use rand::SeedableRng;
use rand_xoshiro::SplitMix64;

use crate::error::{Error, Result};
use crate::feedback::{Hypothesis, ValidationReport};
use crate::phase::{random_segment, PhaseSpace, PiecewiseLinear, SegmentView, Trajectory};
use crate::quadrature::gl8;

/// Stopping threshold on successive fixed-point iterates.
pub const IMPLICIT_TOL: f64 = 1e-13;
/// Iteration budget for the implicit delay.
pub const IMPLICIT_MAX_ITER: usize = 200;

type Fn1 = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
type Fn2 = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Positive kernel `a(ξ)` of a threshold delay.
#[derive(Clone)]
pub enum Kernel {
    /// `c0 + c1·ξ`
    Affine { c0: f64, c1: f64 },
    /// `c0 + c2·ξ²`
    Quadratic { c0: f64, c2: f64 },
    /// Piecewise-linear interpolation of `(ξ_i, a_i)`, constant outside.
    Table { xi: Vec<f64>, a: Vec<f64> },
    Custom(Fn1),
}

impl fmt::Debug for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Kernel::Affine { c0, c1 } => write!(f, "Affine({c0} + {c1} ξ)"),
            Kernel::Quadratic { c0, c2 } => write!(f, "Quadratic({c0} + {c2} ξ²)"),
            Kernel::Table { xi, a } => write!(f, "Table({} knots, a = {:?})", xi.len(), a),
            Kernel::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl Kernel {
    pub fn custom(a: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Kernel::Custom(Arc::new(a))
    }

    pub fn table(xi: Vec<f64>, a: Vec<f64>) -> Result<Self> {
        PiecewiseLinear::new(xi.clone(), a.clone())?;
        Ok(Kernel::Table { xi, a })
    }

    #[inline]
    pub fn eval(&self, xi: f64) -> f64 {
        match self {
            Kernel::Affine { c0, c1 } => c0 + c1 * xi,
            Kernel::Quadratic { c0, c2 } => c0 + c2 * xi * xi,
            Kernel::Table { xi: knots, a } => {
                let n = knots.len();
                if xi <= knots[0] {
                    a[0]
                } else if xi >= knots[n - 1] {
                    a[n - 1]
                } else {
                    let i = knots.partition_point(|&k| k <= xi) - 1;
                    let w = (xi - knots[i]) / (knots[i + 1] - knots[i]);
                    a[i] + w * (a[i + 1] - a[i])
                }
            }
            Kernel::Custom(g) => g(xi),
        }
    }
}

/// The rule `R(u, v)` of an implicit delay `r = R(x(t), x(t - r))`.
#[derive(Clone)]
pub enum ImplicitRule {
    /// `a + bu·u + bv·v`
    AffineUV { a: f64, bu: f64, bv: f64 },
    /// Echo positioning `a + b(u + v)`.
    Echo { a: f64, b: f64 },
    /// Mill model `a + b(u - v)`.
    Mill { a: f64, b: f64 },
    Custom(Fn2),
}

impl fmt::Debug for ImplicitRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImplicitRule::AffineUV { a, bu, bv } => write!(f, "AffineUV({a} + {bu} u + {bv} v)"),
            ImplicitRule::Echo { a, b } => write!(f, "Echo({a} + {b}(u + v))"),
            ImplicitRule::Mill { a, b } => write!(f, "Mill({a} + {b}(u - v))"),
            ImplicitRule::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl ImplicitRule {
    pub fn custom(r: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        ImplicitRule::Custom(Arc::new(r))
    }

    #[inline]
    pub fn eval(&self, u: f64, v: f64) -> f64 {
        match self {
            ImplicitRule::AffineUV { a, bu, bv } => a + bu * u + bv * v,
            ImplicitRule::Echo { a, b } => a + b * (u + v),
            ImplicitRule::Mill { a, b } => a + b * (u - v),
            ImplicitRule::Custom(r) => r(u, v),
        }
    }
}

#[derive(Debug, Clone)]
pub enum DelayKind {
    Constant { r0: f64 },
    Threshold { kernel: Kernel, lip_a: f64 },
    Implicit { rule: ImplicitRule, lip_r1: f64, lip_r2: f64 },
}

/// A delay functional with its maximal delay `K`.
#[derive(Debug, Clone)]
pub struct DelayModel {
    kind: DelayKind,
    k: f64,
}

impl DelayModel {
    pub fn constant(r0: f64, k: f64) -> Result<Self> {
        if !(r0 > 0.0 && r0 <= k) {
            return Err(Error::InvalidParameter(format!("constant delay needs 0 < r0 <= K, got r0 = {r0}, K = {k}")));
        }
        Ok(Self { kind: DelayKind::Constant { r0 }, k })
    }

    pub fn threshold(kernel: Kernel, lip_a: f64, k: f64) -> Result<Self> {
        if !(k > 0.0 && lip_a >= 0.0) {
            return Err(Error::InvalidParameter(format!("threshold delay needs K > 0, Lip a >= 0 (K = {k})")));
        }
        Ok(Self { kind: DelayKind::Threshold { kernel, lip_a }, k })
    }

    pub fn implicit(rule: ImplicitRule, lip_r1: f64, lip_r2: f64, k: f64) -> Result<Self> {
        if !(k > 0.0 && lip_r1 >= 0.0 && lip_r2 >= 0.0) {
            return Err(Error::InvalidParameter("implicit delay needs K > 0 and nonnegative Lipschitz constants".into()));
        }
        Ok(Self { kind: DelayKind::Implicit { rule, lip_r1, lip_r2 }, k })
    }

    pub fn kind(&self) -> &DelayKind {
        &self.kind
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn label(&self) -> &'static str {
        match self.kind {
            DelayKind::Constant { .. } => "constant",
            DelayKind::Threshold { .. } => "threshold",
            DelayKind::Implicit { .. } => "implicit",
        }
    }

    /// Delay at the zero segment.
    pub fn at_zero(&self) -> f64 {
        match &self.kind {
            DelayKind::Constant { r0 } => *r0,
            DelayKind::Threshold { kernel, .. } => 1.0 / kernel.eval(0.0),
            DelayKind::Implicit { rule, .. } => rule.eval(0.0, 0.0),
        }
    }

    /// Grid lower bound on the delay over segments with values in `[-m, m]`.
    pub fn tau0(&self, m: f64) -> f64 {
        let n = 801;
        let grid = |i: usize| -m + 2.0 * m * i as f64 / (n - 1) as f64;
        match &self.kind {
            DelayKind::Constant { r0 } => *r0,
            DelayKind::Threshold { kernel, .. } => {
                let amax = (0..n).map(|i| kernel.eval(grid(i))).fold(f64::MIN, f64::max);
                (1.0 / amax).min(self.k)
            }
            DelayKind::Implicit { rule, .. } => {
                let mut rmin = f64::MAX;
                for i in 0..n {
                    for j in (0..n).step_by(4) {
                        rmin = rmin.min(rule.eval(grid(i), grid(j)));
                    }
                }
                rmin
            }
        }
    }

    /// Lipschitz bound of `r` in the sup norm implied by the declared constants.
    pub fn lipschitz_bound(&self, l0: f64) -> f64 {
        match &self.kind {
            DelayKind::Constant { .. } => 0.0,
            DelayKind::Threshold { lip_a, .. } => self.k * self.k * lip_a,
            DelayKind::Implicit { lip_r1, lip_r2, .. } => {
                let denom = 1.0 - lip_r2 * l0;
                if denom > 0.0 {
                    (lip_r1 + lip_r2) / denom
                } else {
                    f64::INFINITY
                }
            }
        }
    }
}

/// Evaluates `r` on a delay window.
pub fn delay_eval(model: &DelayModel, seg: &SegmentView<'_>) -> Result<f64> {
    delay_eval_from(model, seg, None)
}

/// As [`delay_eval`], starting the implicit iteration from `guess`.
pub fn delay_eval_from(model: &DelayModel, seg: &SegmentView<'_>, guess: Option<f64>) -> Result<f64> {
    let k = model.k;
    if seg.k() + 1e-12 * k < k {
        return Err(Error::Precondition(format!("segment window {} shorter than K = {k}", seg.k())));
    }
    match &model.kind {
        DelayKind::Constant { r0 } => Ok(*r0),
        DelayKind::Threshold { kernel, .. } => {
            threshold_root_walk(seg.trajectory(), kernel, seg.anchor(), k)
        }
        DelayKind::Implicit { rule, .. } => {
            let now = seg.at(0.0);
            implicit_fixed_point(rule, now, |s| seg.at(-s), k, guess.unwrap_or(0.5 * k))
        }
    }
}

pub(crate) fn implicit_fixed_point(
    rule: &ImplicitRule,
    now: f64,
    lookup: impl Fn(f64) -> f64,
    k: f64,
    guess: f64,
) -> Result<f64> {
    let mut s = guess.clamp(0.0, k);
    let mut change = f64::INFINITY;
    for _ in 0..IMPLICIT_MAX_ITER {
        let next = rule.eval(now, lookup(s));
        if !(next > 0.0 && next <= k * (1.0 + 1e-14)) {
            return Err(Error::DelayOutOfRange { value: next, k });
        }
        let next = next.min(k);
        change = (next - s).abs();
        s = next;
        if change < IMPLICIT_TOL {
            return Ok(s);
        }
    }
    Err(Error::NonConvergence { iterations: IMPLICIT_MAX_ITER, last_change: change })
}

/// `∫_{lo}^{hi} a(x(s)) ds` within one Hermite cell.
#[inline]
fn cell_kernel_integral(traj: &Trajectory, kernel: &Kernel, i: usize, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return 0.0;
    }
    let cell = traj.cell(i);
    gl8().integrate(lo, hi, |s| kernel.eval(cell.value(s)))
}

/// Solves `∫_u^{hi} a(x(s)) ds = need` for `u` in cell `i`, with `u >= lo`.
fn solve_in_cell(traj: &Trajectory, kernel: &Kernel, i: usize, lo: f64, hi: f64, need: f64) -> f64 {
    let cell = traj.cell(i);
    let g = |u: f64| cell_kernel_integral(traj, kernel, i, u, hi) - need;
    let (mut a, mut b) = (lo, hi);
    let mut u = 0.5 * (a + b);
    for _ in 0..100 {
        let gu = g(u);
        if gu.abs() <= 1e-15 * need.abs().max(1e-300) {
            return u;
        }
        // g is decreasing in u.
        if gu > 0.0 {
            a = u;
        } else {
            b = u;
        }
        let slope = -kernel.eval(cell.value(u));
        let mut next = u - gu / slope;
        if !(next > a && next < b) {
            next = 0.5 * (a + b);
        }
        if (next - u).abs() <= 1e-16 * u.abs().max(1.0) {
            return next;
        }
        u = next;
    }
    u
}

/// Threshold root by walking cells backwards from `anchor`.
pub(crate) fn threshold_root_walk(traj: &Trajectory, kernel: &Kernel, anchor: f64, k: f64) -> Result<f64> {
    let lower = (anchor - k).max(traj.t_start());
    let mut hi = anchor;
    let mut acc = 0.0;
    let mut i = traj.cell_index(anchor);
    if traj.mesh()[i] == anchor && i > 0 {
        i -= 1;
    }
    loop {
        let lo = traj.mesh()[i].max(lower);
        let piece = cell_kernel_integral(traj, kernel, i, lo, hi);
        if acc + piece >= 1.0 {
            let u = solve_in_cell(traj, kernel, i, lo, hi, 1.0 - acc);
            return Ok(anchor - u);
        }
        acc += piece;
        if lo <= lower || i == 0 {
            return Err(Error::NoRoot { integral: acc });
        }
        hi = lo;
        i -= 1;
    }
}

/// Running antiderivative of `a(x(·))` at the mesh nodes.
#[derive(Debug, Clone, Default)]
pub(crate) struct KernelPrimitive {
    cum: Vec<f64>,
}

impl KernelPrimitive {
    pub fn build(traj: &Trajectory, kernel: &Kernel) -> Self {
        let mut p = Self { cum: vec![0.0] };
        p.extend(traj, kernel);
        p
    }

    /// Appends the cells added to `traj` since the last call.
    pub fn extend(&mut self, traj: &Trajectory, kernel: &Kernel) {
        let mesh = traj.mesh();
        while self.cum.len() < mesh.len() {
            let i = self.cum.len() - 1;
            let last = self.cum[i];
            self.cum.push(last + cell_kernel_integral(traj, kernel, i, mesh[i], mesh[i + 1]));
        }
    }

    /// `A` at the last covered node.
    pub fn last(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    /// `A(t)`; requires `t` inside the covered mesh.
    pub fn at(&self, traj: &Trajectory, kernel: &Kernel, t: f64) -> f64 {
        let i = traj.cell_index(t).min(self.cum.len() - 1);
        if i + 1 >= self.cum.len() {
            return self.cum[i];
        }
        let t_i = traj.mesh()[i];
        self.cum[i] + cell_kernel_integral(traj, kernel, i, t_i, t)
    }

    /// Finds `u >= lower` with `A(u) = target`.
    pub fn solve(&self, traj: &Trajectory, kernel: &Kernel, target: f64, lower: f64) -> f64 {
        let n = self.cum.len();
        let j = self.cum[..n].partition_point(|&c| c <= target);
        let i = j.saturating_sub(1).min(n.saturating_sub(2));
        let mesh = traj.mesh();
        let lo = mesh[i].max(lower);
        let hi = mesh[i + 1];
        // ∫_u^{hi} a = A(hi) - target
        let need = self.cum[i + 1] - target;
        if need <= 0.0 {
            return hi;
        }
        solve_in_cell(traj, kernel, i, lo, hi, need)
    }
}

/// The map `t -> η(t) = t - r(x_t)` along a fixed trajectory, with a cache.
///
/// Values are a pure function of `t`: the implicit iteration always starts
/// from `K/2` here, so concurrent callers observe identical results.
pub struct DelayedArgumentMap<'a> {
    traj: &'a Trajectory,
    model: &'a DelayModel,
    primitive: OnceLock<KernelPrimitive>,
    cache: Mutex<HashMap<u64, f64>>,
}

impl<'a> fmt::Debug for DelayedArgumentMap<'a> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DelayedArgumentMap").field("model", self.model).finish_non_exhaustive()
    }
}

impl<'a> DelayedArgumentMap<'a> {
    pub fn new(traj: &'a Trajectory, model: &'a DelayModel) -> Self {
        Self { traj, model, primitive: OnceLock::new(), cache: Mutex::new(HashMap::new()) }
    }

    pub fn trajectory(&self) -> &'a Trajectory {
        self.traj
    }

    pub fn model(&self) -> &'a DelayModel {
        self.model
    }

    /// Earliest `t` at which the full window `[t - K, t]` is available.
    pub fn first_time(&self) -> f64 {
        self.traj.t_start() + self.model.k
    }

    /// `r(x_t)`.
    pub fn delay_at(&self, t: f64) -> Result<f64> {
        Ok(t - self.eta(t)?)
    }

    pub fn eta(&self, t: f64) -> Result<f64> {
        let key = t.to_bits();
        if let Some(v) = self.cache.lock().unwrap().get(&key) {
            return Ok(*v);
        }
        let k = self.model.k;
        let seg = self.traj.segment(t, k)?;
        let r = match &self.model.kind {
            DelayKind::Threshold { kernel, .. } => {
                let prim = self.primitive.get_or_init(|| KernelPrimitive::build(self.traj, kernel));
                let top = prim.at(self.traj, kernel, t);
                let lower = t - k;
                let bottom = prim.at(self.traj, kernel, lower.max(self.traj.t_start()));
                if top - bottom < 1.0 {
                    return Err(Error::NoRoot { integral: top - bottom });
                }
                t - prim.solve(self.traj, kernel, top - 1.0, lower)
            }
            _ => delay_eval(self.model, &seg)?,
        };
        let eta = t - r;
        self.cache.lock().unwrap().insert(key, eta);
        Ok(eta)
    }

    /// `η^n(t)`; on failure reports the deepest iterate that was reached.
    pub fn eta_iter(&self, t: f64, n: usize) -> Result<f64> {
        let mut cur = t;
        for j in 0..n {
            match self.eta(cur) {
                Ok(next) => cur = next,
                Err(Error::InsufficientHistory { needed, start, .. }) => {
                    return Err(Error::InsufficientHistory { needed, start, deepest: Some((j, cur)) });
                }
                Err(e) => return Err(e),
            }
        }
        Ok(cur)
    }
}

/// Grid and sampled-pair audit of the delay hypotheses.
pub fn validate_delay(model: &DelayModel, space: &PhaseSpace, samples: usize) -> Result<ValidationReport> {
    validate_delay_seeded(model, space, samples, 0x5eed_de1a)
}

pub fn validate_delay_seeded(model: &DelayModel, space: &PhaseSpace, samples: usize, seed: u64) -> Result<ValidationReport> {
    if samples < 100 {
        return Err(Error::Precondition(format!("validate_delay needs at least 100 sample pairs, got {samples}")));
    }
    let k = model.k;
    let m = space.m;
    let mut report = ValidationReport::default();
    if (k - space.k).abs() > 1e-12 * k {
        report.push(Hypothesis::H4, false, format!("delay K = {k} differs from phase-space K = {}", space.k));
    }
    let n = 1601;
    let grid = |i: usize| -m + 2.0 * m * i as f64 / (n - 1) as f64;
    let mut contraction_ok = true;

    match &model.kind {
        DelayKind::Constant { r0 } => {
            report.push(Hypothesis::H4, *r0 > 0.0 && *r0 <= k, format!("r0 = {r0}, K = {k}"));
        }
        DelayKind::Threshold { kernel, lip_a } => {
            let (mut amin, mut at) = (f64::MAX, 0.0);
            let mut lip: f64 = 0.0;
            for i in 0..n {
                let v = kernel.eval(grid(i));
                if v < amin {
                    amin = v;
                    at = grid(i);
                }
                if i > 0 {
                    lip = lip.max((v - kernel.eval(grid(i - 1))).abs() / (grid(i) - grid(i - 1)));
                }
            }
            report.push(
                Hypothesis::TD3,
                amin >= 1.0 / k,
                format!("min kernel {amin} at ξ = {at}; required >= 1/K = {}", 1.0 / k),
            );
            report.push(
                Hypothesis::TD2,
                lip <= lip_a * (1.0 + 1e-9) + 1e-12,
                format!("grid Lipschitz estimate {lip}, declared {lip_a}"),
            );
        }
        DelayKind::Implicit { rule, lip_r1, lip_r2 } => {
            let (mut rmin, mut rmax) = (f64::MAX, f64::MIN);
            let (mut l1, mut l2): (f64, f64) = (0.0, 0.0);
            let nn = 401;
            let g2 = |i: usize| -m + 2.0 * m * i as f64 / (nn - 1) as f64;
            for i in 0..nn {
                for j in 0..nn {
                    let v = rule.eval(g2(i), g2(j));
                    rmin = rmin.min(v);
                    rmax = rmax.max(v);
                    let d = g2(1) - g2(0);
                    if i > 0 {
                        l1 = l1.max((v - rule.eval(g2(i - 1), g2(j))).abs() / d);
                    }
                    if j > 0 {
                        l2 = l2.max((v - rule.eval(g2(i), g2(j - 1))).abs() / d);
                    }
                }
            }
            report.push(Hypothesis::ID2, rmin > 0.0 && rmax <= k, format!("range of R on grid [{rmin}, {rmax}], K = {k}"));
            report.push(
                Hypothesis::ID3,
                l1 <= lip_r1 * (1.0 + 1e-9) + 1e-12 && l2 <= lip_r2 * (1.0 + 1e-9) + 1e-12,
                format!("grid Lipschitz estimates ({l1}, {l2}), declared ({lip_r1}, {lip_r2})"),
            );
            let lhs = lip_r1 + 2.0 * lip_r2;
            contraction_ok = lhs < 1.0 / space.l0;
            report.push(
                Hypothesis::ID4,
                contraction_ok,
                format!("Lip R1 + 2 Lip R2 = {lhs}, required < 1/L0 = {}", 1.0 / space.l0),
            );
        }
    }

    if !contraction_ok {
        report.push(Hypothesis::H5, false, "pair audit skipped: implicit delay is not a contraction");
        return Ok(report);
    }
    if !report.passed() {
        report.push(Hypothesis::H5, false, "pair audit skipped: grid checks failed");
        return Ok(report);
    }

    let bound = model.lipschitz_bound(space.l0);
    let mut rng = SplitMix64::seed_from_u64(seed);
    let pieces = 24;
    let (mut violations, mut worst_ratio) = (0usize, 0.0f64);
    let (mut rlo, mut rhi) = (f64::MAX, f64::MIN);
    for p in 0..samples {
        let phi = random_segment(&mut rng, space, pieces, 0.9, 0.9);
        let psi = if p % 2 == 0 {
            random_segment(&mut rng, space, pieces, 0.9, 0.9)
        } else {
            let bump = random_segment(&mut rng, space, pieces, 0.05, 0.1);
            let vals = phi.knot_values().iter().zip(bump.knot_values()).map(|(a, b)| a + b).collect();
            PiecewiseLinear::new(phi.knots().to_vec(), vals)?
        };
        let (tp, tq) = (phi.to_trajectory(), psi.to_trajectory());
        let rp = delay_eval(model, &tp.segment(0.0, k)?)?;
        let rq = delay_eval(model, &tq.segment(0.0, k)?)?;
        rlo = rlo.min(rp.min(rq));
        rhi = rhi.max(rp.max(rq));
        let dist = phi
            .knot_values()
            .iter()
            .zip(psi.knot_values())
            .fold(0.0f64, |d, (a, b)| d.max((a - b).abs()));
        let dr = (rp - rq).abs();
        if dr > bound * dist + 1e-12 {
            violations += 1;
        }
        if dist > 0.0 {
            worst_ratio = worst_ratio.max(dr / dist);
        }
    }
    report.push(Hypothesis::H4, rlo > 0.0 && rhi <= k, format!("sampled delays in [{rlo}, {rhi}], K = {k}"));
    report.push(
        Hypothesis::H5,
        violations == 0,
        format!("{violations} of {samples} pairs exceed |Δr| <= {bound}·‖φ-ψ‖ (largest ratio {worst_ratio})"),
    );
    Ok(report)
}
