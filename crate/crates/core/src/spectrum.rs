//! Linearization at the origin, counting of characteristic roots in the
//! right half-plane by the argument principle, the `N*` rule, and the
//! sign-preserving transformation `y = exp(-∫a) x`.

use num_complex::Complex64;
use serde::Serialize;

use crate::delay::{delay_eval, DelayModel, DelayedArgumentMap};
use crate::error::{Error, Result};
use crate::feedback::FeedbackModel;
use crate::phase::Trajectory;

/// Distance of the counting contour from the imaginary axis.
pub const EPS_AXIS: f64 = 1e-8;
/// Retries with a shifted contour before giving up.
pub const CONTOUR_RETRIES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Linearization {
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
    pub tau: f64,
}

impl Linearization {
    pub fn new(a: f64, b: f64, tau: f64) -> Result<Self> {
        if !(b < 0.0) {
            return Err(Error::InvalidParameter(format!("B = {b} must be negative")));
        }
        if !(tau > 0.0) {
            return Err(Error::InvalidParameter(format!("tau = {tau} must be positive")));
        }
        Ok(Self { a: a + 0.0, b, tau })
    }

    /// `h(λ) = λ - A - B e^{-λτ}`.
    #[inline]
    pub fn char_fn(&self, z: Complex64) -> Complex64 {
        z - self.a - self.b * (-z * self.tau).exp()
    }

    #[inline]
    pub fn char_deriv(&self, z: Complex64) -> Complex64 {
        Complex64::new(1.0, 0.0) + self.b * self.tau * (-z * self.tau).exp()
    }

    /// Radius bounding every root with nonnegative real part, plus one.
    pub fn radius(&self) -> f64 {
        self.a.abs() + self.b.abs() + 1.0
    }

    pub fn default_tol_imag(&self) -> f64 {
        1e-6 * (1.0 + self.a.abs() + self.b.abs())
    }
}

/// `A = D1f(0,0)`, `B = D2f(0,0)` and `τ = r(0)`.
pub fn linearize(model: &FeedbackModel, delay: &DelayModel) -> Result<Linearization> {
    let k = delay.k();
    let zero = Trajectory::from_nodes(vec![-k, 0.0], vec![0.0, 0.0], vec![0.0, 0.0])?;
    let tau = delay_eval(delay, &zero.segment(0.0, k)?)?;
    Linearization::new(model.d1f(0.0, 0.0), model.d2f(0.0, 0.0), tau)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Contour {
    pub re_min: f64,
    pub re_max: f64,
    pub im_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumReport {
    pub lin: Linearization,
    pub m_star: u32,
    pub hyperbolic: bool,
    pub n_star: u32,
    /// `min |h(iω)|` over the imaginary axis and where it is attained.
    pub axis_residual: f64,
    pub axis_omega: f64,
    /// Accumulated phase over `2π` before rounding.
    pub winding: f64,
    pub contour: Contour,
    /// Roots with real part above `-root_margin`, polished.
    #[serde(serialize_with = "ser_roots")]
    pub roots: Vec<Complex64>,
}

fn ser_roots<S: serde::Serializer>(roots: &[Complex64], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(roots.len()))?;
    for z in roots {
        seq.serialize_element(&[z.re, z.im])?;
    }
    seq.end()
}

impl SpectrumReport {
    /// `A + B < 0` forces `M*` even at a hyperbolic origin.
    pub fn evenness_holds(&self) -> bool {
        !(self.lin.a + self.lin.b < 0.0 && self.hyperbolic) || self.m_star % 2 == 0
    }

    pub fn notes(&self) -> Vec<String> {
        let mut notes = Vec::new();
        if self.lin.a + self.lin.b < 0.0 && self.hyperbolic {
            notes.push(format!("A + B < 0 at a hyperbolic origin: S_{} is the origin alone", self.n_star));
        }
        if !self.hyperbolic {
            notes.push(format!(
                "origin is nonhyperbolic: |h(iω)| = {:.3e} at ω = {:.6}",
                self.axis_residual, self.axis_omega
            ));
        }
        if !self.evenness_holds() {
            notes.push(format!("A + B < 0 but M* = {} is odd", self.m_star));
        }
        notes
    }
}

/// `M* + 1` for a nonhyperbolic origin with even `M*`, else `M*`.
pub fn n_star(m_star: u32, hyperbolic: bool) -> u32 {
    if !hyperbolic && m_star % 2 == 0 {
        m_star + 1
    } else {
        m_star
    }
}

/// Phase change of `h` along the segment `z0 -> z1`, refined until every
/// step of the image turns by less than `max_turn`.
fn edge_phase(
    h: &impl Fn(Complex64) -> Complex64,
    z0: Complex64,
    z1: Complex64,
    w0: Complex64,
    w1: Complex64,
    max_turn: f64,
    floor: f64,
    depth: u32,
) -> Option<f64> {
    let d = (w1 / w0).arg();
    if d.abs() < max_turn {
        return Some(d);
    }
    if depth == 0 {
        return None;
    }
    let zm = 0.5 * (z0 + z1);
    let wm = h(zm);
    if wm.norm() < floor {
        return None;
    }
    Some(
        edge_phase(h, z0, zm, w0, wm, max_turn, floor, depth - 1)?
            + edge_phase(h, zm, z1, wm, w1, max_turn, floor, depth - 1)?,
    )
}

/// Winding number of `h` around the rectangle `[re0, re1] × [im0, im1]`,
/// as accumulated phase over `2π`. `None` if the contour passes (numerically)
/// through a root.
pub fn winding(
    h: &impl Fn(Complex64) -> Complex64,
    re0: f64,
    re1: f64,
    im0: f64,
    im1: f64,
    floor: f64,
) -> Option<f64> {
    let corners = [
        Complex64::new(re0, im0),
        Complex64::new(re1, im0),
        Complex64::new(re1, im1),
        Complex64::new(re0, im1),
    ];
    let mut max_turn = std::f64::consts::FRAC_PI_2;
    for _ in 0..4 {
        let mut total = 0.0;
        for e in 0..4 {
            let (a, b) = (corners[e], corners[(e + 1) % 4]);
            let n = 32;
            let mut z_prev = a;
            let mut w_prev = h(a);
            if w_prev.norm() < floor {
                return None;
            }
            for j in 1..=n {
                let z = a + (b - a) * (j as f64 / n as f64);
                let w = h(z);
                if w.norm() < floor {
                    return None;
                }
                total += edge_phase(h, z_prev, z, w_prev, w, max_turn, floor, 60)?;
                z_prev = z;
                w_prev = w;
            }
        }
        let turns = total / std::f64::consts::TAU;
        if (turns - turns.round()).abs() < 0.01 {
            return Some(turns);
        }
        max_turn *= 0.5;
    }
    None
}

/// `min |h(iω)|` over `ω ∈ [0, ρ]`: a dense grid, then golden-section
/// refinement around the smallest grid minima.
fn axis_minimum(lin: &Linearization) -> (f64, f64) {
    let rho = lin.radius();
    let g = |w: f64| lin.char_fn(Complex64::new(0.0, w)).norm();
    let n = 8000;
    let dw = rho / n as f64;
    let vals: Vec<f64> = (0..=n).map(|i| g(i as f64 * dw)).collect();
    let mut cands: Vec<usize> = (0..=n)
        .filter(|&i| (i == 0 || vals[i] <= vals[i - 1]) && (i == n || vals[i] <= vals[i + 1]))
        .collect();
    cands.sort_by(|&i, &j| vals[i].total_cmp(&vals[j]));
    cands.truncate(6);
    let (mut best, mut arg) = (f64::INFINITY, 0.0);
    for i in cands {
        let (mut lo, mut hi) = ((i as f64 - 1.0).max(0.0) * dw, ((i + 1) as f64 * dw).min(rho));
        let phi = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..120 {
            let m1 = hi - phi * (hi - lo);
            let m2 = lo + phi * (hi - lo);
            if g(m1) < g(m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        let w = 0.5 * (lo + hi);
        for (cand_w, v) in [(w, g(w)), (i as f64 * dw, vals[i])] {
            if v < best {
                best = v;
                arg = cand_w;
            }
        }
    }
    (best, arg)
}

fn newton_polish(lin: &Linearization, mut z: Complex64) -> Option<Complex64> {
    for _ in 0..100 {
        let d = lin.char_fn(z) / lin.char_deriv(z);
        if !d.re.is_finite() || !d.im.is_finite() {
            return None;
        }
        z -= d;
        if d.norm() < 1e-15 * (1.0 + z.norm()) {
            return Some(z);
        }
    }
    (lin.char_fn(z).norm() < 1e-10).then_some(z)
}

/// Roots of `h` in a rectangle: recursive subdivision guided by winding
/// numbers, Newton polishing in the leaves.
fn roots_in(lin: &Linearization, re0: f64, re1: f64, im0: f64, im1: f64, floor: f64, out: &mut Vec<Complex64>, depth: u32) {
    let h = |z: Complex64| lin.char_fn(z);
    let count = match winding(&h, re0, re1, im0, im1, floor) {
        Some(w) => w.round().max(0.0) as usize,
        None => {
            // shift the box slightly off the root and retry
            let s = 1e-3 * (re1 - re0).max(im1 - im0);
            if depth > 0 {
                roots_in(lin, re0 - 0.7 * s, re1 + 0.3 * s, im0 - 0.4 * s, im1 + 0.9 * s, floor, out, depth - 1);
            }
            return;
        }
    };
    if count == 0 {
        return;
    }
    let size = (re1 - re0).max(im1 - im0);
    if size < 1e-4 || depth == 0 {
        let centre = Complex64::new(0.5 * (re0 + re1), 0.5 * (im0 + im1));
        let z = newton_polish(lin, centre).unwrap_or(centre);
        out.extend(std::iter::repeat(z).take(count));
        return;
    }
    if count == 1 && size < 0.05 {
        let centre = Complex64::new(0.5 * (re0 + re1), 0.5 * (im0 + im1));
        if let Some(z) = newton_polish(lin, centre) {
            if z.re >= re0 && z.re <= re1 && z.im >= im0 && z.im <= im1 {
                out.push(z);
                return;
            }
        }
    }
    // off-centre splits keep the new edges away from symmetric root positions
    let rm = re0 + 0.5173 * (re1 - re0);
    let im = im0 + 0.4861 * (im1 - im0);
    roots_in(lin, re0, rm, im0, im, floor, out, depth - 1);
    roots_in(lin, rm, re1, im0, im, floor, out, depth - 1);
    roots_in(lin, re0, rm, im, im1, floor, out, depth - 1);
    roots_in(lin, rm, re1, im, im1, floor, out, depth - 1);
}

/// Width of the strip left of the axis whose roots are listed in reports.
pub const ROOT_MARGIN: f64 = 1.0;

/// `M*` by the argument principle on `[ε, ρ] × [-ρ, ρ]`, hyperbolicity from
/// the imaginary-axis minimum of `|h|`, and the roots near the axis.
pub fn count_unstable(lin: &Linearization, tol_imag: f64) -> Result<SpectrumReport> {
    if !(lin.tau > 0.0) {
        return Err(Error::Precondition(format!("tau = {} must be positive", lin.tau)));
    }
    let rho = lin.radius();
    let floor = 1e-14 * rho;
    let h = |z: Complex64| lin.char_fn(z);
    let mut eps = EPS_AXIS;
    let mut found = None;
    for _ in 0..=CONTOUR_RETRIES {
        if let Some(w) = winding(&h, eps, rho, -rho, rho, floor) {
            found = Some(w);
            break;
        }
        eps *= 3.7;
    }
    let turns = found.ok_or(Error::ContourThroughRoot { retries: CONTOUR_RETRIES })?;
    let m_star = turns.round().max(0.0) as u32;
    let (axis_residual, axis_omega) = axis_minimum(lin);
    let hyperbolic = axis_residual >= tol_imag;

    let mut roots = Vec::new();
    roots_in(lin, -ROOT_MARGIN - 0.0123, rho + 0.0171, -rho - 0.0137, rho + 0.0113, floor, &mut roots, 40);
    roots.sort_by(|a, b| b.re.total_cmp(&a.re).then(a.im.total_cmp(&b.im)));

    Ok(SpectrumReport {
        lin: *lin,
        m_star,
        hyperbolic,
        n_star: n_star(m_star, hyperbolic),
        axis_residual,
        axis_omega,
        winding: turns,
        contour: Contour { re_min: eps, re_max: rho, im_max: rho },
        roots,
    })
}

/// The companion `y` of a solution `x` and the coefficient traces on the
/// mesh nodes in `[t0, t_end]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransformedPath {
    pub t0: f64,
    pub times: Vec<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub eta: Vec<f64>,
    pub a_t: Vec<f64>,
    pub b_t: Vec<f64>,
    /// `None` while `η(t) < t0`.
    pub c_t: Vec<Option<f64>>,
    /// `∫_{t0}^{t} a`, trapezoid rule on the mesh.
    pub int_a: Vec<f64>,
    pub a0: f64,
    pub b0: f64,
    pub b1: f64,
    pub c0: f64,
    pub c1: f64,
    /// `x` vanishes identically on the window.
    pub degenerate: bool,
}

impl TransformedPath {
    /// `∫_{t0}^{s} a`, linear between nodes.
    pub fn int_a_at(&self, s: f64) -> f64 {
        let i = self.times.partition_point(|&u| u <= s).clamp(1, self.times.len() - 1) - 1;
        let w = (s - self.times[i]) / (self.times[i + 1] - self.times[i]);
        self.int_a[i] + w * (self.int_a[i + 1] - self.int_a[i])
    }

    /// `y(s) = exp(-∫_{t0}^{s} a) x(s)` off the mesh.
    pub fn y_at(&self, traj: &Trajectory, s: f64) -> f64 {
        (-self.int_a_at(s)).exp() * traj.value_at(s)
    }

    /// `max |y' - c·y(η)|` with `y'` from the five-point central difference.
    pub fn y_equation_residual(&self, traj: &Trajectory) -> f64 {
        let y = &self.y;
        let mut worst: f64 = 0.0;
        for i in 2..self.times.len().saturating_sub(2) {
            let Some(c) = self.c_t[i] else { continue };
            let h = (self.times[i + 2] - self.times[i - 2]) / 4.0;
            let dy = (y[i - 2] - 8.0 * y[i - 1] + 8.0 * y[i + 1] - y[i + 2]) / (12.0 * h);
            worst = worst.max((dy - c * self.y_at(traj, self.eta[i])).abs());
        }
        worst
    }

    /// `max |x' - (a x + b x(η))|` at the nodes.
    pub fn decomposition_residual(&self, traj: &Trajectory) -> f64 {
        let mesh = traj.mesh();
        let first = mesh.partition_point(|&s| s < self.t0);
        self.times
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let dx = traj.derivs()[first + i];
                debug_assert_eq!(mesh[first + i], t);
                (dx - (self.a_t[i] * self.x[i] + self.b_t[i] * traj.value_at(self.eta[i]))).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// The transformation `y(t) = exp(-∫_{t0}^t a) x(t)` with
/// `c(t) = b(t) exp(-∫_{η(t)}^t a)`.
pub fn transform(
    traj: &Trajectory,
    model: &FeedbackModel,
    map: &DelayedArgumentMap<'_>,
    t0: f64,
) -> Result<TransformedPath> {
    let mesh = traj.mesh();
    if t0 < map.first_time() {
        return Err(Error::InsufficientHistory { needed: t0 - map.model().k(), start: traj.t_start(), deepest: None });
    }
    let first = mesh.partition_point(|&s| s < t0);
    if mesh.len() - first < 3 {
        return Err(Error::Precondition(format!("fewer than three mesh nodes after t0 = {t0}")));
    }
    let times: Vec<f64> = mesh[first..].to_vec();
    let x: Vec<f64> = traj.values()[first..].to_vec();
    let mut eta = Vec::with_capacity(times.len());
    let mut a_t = Vec::with_capacity(times.len());
    let mut b_t = Vec::with_capacity(times.len());
    for (&t, &xv) in times.iter().zip(&x) {
        let e = map.eta(t)?;
        let xd = traj.value_at(e);
        eta.push(e);
        a_t.push(model.coefficient_a(xv, xd));
        b_t.push(model.coefficient_b(xd)?);
    }
    let mut int_a = vec![0.0; times.len()];
    for i in 1..times.len() {
        int_a[i] = int_a[i - 1] + 0.5 * (a_t[i] + a_t[i - 1]) * (times[i] - times[i - 1]);
    }
    let y: Vec<f64> = x.iter().zip(&int_a).map(|(xv, ia)| (-ia).exp() * xv).collect();

    let mut path = TransformedPath {
        t0: times[0],
        times,
        x,
        y,
        eta,
        a_t,
        b_t,
        c_t: Vec::new(),
        int_a,
        a0: 0.0,
        b0: 0.0,
        b1: 0.0,
        c0: 0.0,
        c1: 0.0,
        degenerate: false,
    };
    path.c_t = (0..path.times.len())
        .map(|i| {
            let e = path.eta[i];
            (e >= path.t0).then(|| path.b_t[i] * (-(path.int_a[i] - path.int_a_at(e))).exp())
        })
        .collect();
    let k = map.model().k();
    path.a0 = path.a_t.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    path.b0 = path.b_t.iter().fold(f64::INFINITY, |m, v| m.min(-v));
    path.b1 = path.b_t.iter().fold(0.0f64, |m, v| m.max(-v));
    path.c0 = path.b0 * (-k * path.a0).exp();
    path.c1 = path.b1 * (k * path.a0).exp();
    path.degenerate = path.x.iter().all(|&v| v == 0.0);
    Ok(path)
}
