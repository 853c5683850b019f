//! Dense trajectory storage, delay windows and phase-space bookkeeping.
//!
//! A [`Trajectory`] keeps node values and node derivatives and interpolates
//! between adjacent nodes with a cubic Hermite polynomial. Each node carries a
//! left and a right derivative so that a derivative jump (the junction between
//! a merely Lipschitz initial segment and the solution, or a kink of a
//! piecewise-linear segment) is represented exactly.

use std::io::{self, Write};

use rand::Rng;

use crate::error::{Error, Result};

/// The constants that define the phase space: amplitude bound `m`, maximal
/// delay `k` and derivative bound `l0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseSpace {
    pub m: f64,
    pub k: f64,
    pub l0: f64,
}

impl PhaseSpace {
    pub fn new(m: f64, k: f64, l0: f64) -> Result<Self> {
        for (name, v) in [("M", m), ("K", k), ("L0", l0)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(Self { m, k, l0 })
    }

    /// Checks whether `seg` lies in the phase space, allowing a relative slack
    /// on the Lipschitz estimate.
    pub fn admits(&self, seg: &SegmentView<'_>, lip_slack: f64) -> bool {
        seg.sup_norm() < self.m && seg.lipschitz_estimate(2000) <= self.l0 * (1.0 + lip_slack)
    }
}

/// One Hermite cell `[t0, t0 + h]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct HermiteCell {
    pub t0: f64,
    pub h: f64,
    pub x0: f64,
    pub x1: f64,
    pub d0: f64,
    pub d1: f64,
}

impl HermiteCell {
    #[inline]
    pub fn value(&self, t: f64) -> f64 {
        let s = (t - self.t0) / self.h;
        let s2 = s * s;
        let s3 = s2 * s;
        (2.0 * s3 - 3.0 * s2 + 1.0) * self.x0
            + (s3 - 2.0 * s2 + s) * self.h * self.d0
            + (-2.0 * s3 + 3.0 * s2) * self.x1
            + (s3 - s2) * self.h * self.d1
    }

    #[inline]
    pub fn deriv(&self, t: f64) -> f64 {
        let s = (t - self.t0) / self.h;
        let s2 = s * s;
        ((6.0 * s2 - 6.0 * s) * self.x0
            + (3.0 * s2 - 4.0 * s + 1.0) * self.h * self.d0
            + (-6.0 * s2 + 6.0 * s) * self.x1
            + (3.0 * s2 - 2.0 * s) * self.h * self.d1)
            / self.h
    }

    /// Times strictly inside `(lo, hi)` where the derivative of the cubic
    /// vanishes, in increasing order.
    pub fn critical_points(&self, lo: f64, hi: f64) -> ([f64; 2], usize) {
        let h = self.h;
        let qa = 6.0 * self.x0 + 3.0 * h * self.d0 - 6.0 * self.x1 + 3.0 * h * self.d1;
        let qb = -6.0 * self.x0 - 4.0 * h * self.d0 + 6.0 * self.x1 - 2.0 * h * self.d1;
        let qc = h * self.d0;
        let mut out = [0.0; 2];
        let mut n = 0;
        let mut push = |s: f64| {
            let t = self.t0 + s * h;
            if t > lo && t < hi {
                out[n] = t;
                n += 1;
            }
        };
        let scale = qa.abs().max(qb.abs()).max(qc.abs());
        if scale == 0.0 {
            return (out, 0);
        }
        if qa.abs() <= 1e-14 * scale {
            if qb != 0.0 {
                push(-qc / qb);
            }
        } else {
            let disc = qb * qb - 4.0 * qa * qc;
            if disc >= 0.0 {
                let sq = disc.sqrt();
                let q = -0.5 * (qb + qb.signum() * sq);
                let (mut r1, mut r2) = if q != 0.0 { (q / qa, qc / q) } else { (0.0, 0.0) };
                if r1 > r2 {
                    std::mem::swap(&mut r1, &mut r2);
                }
                push(r1);
                if r2 != r1 {
                    push(r2);
                }
            }
        }
        (out, n)
    }
}

/// Densely interpolable scalar trajectory on `[t_start, t_end]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    times: Vec<f64>,
    values: Vec<f64>,
    d_left: Vec<f64>,
    d_right: Vec<f64>,
}

impl Trajectory {
    /// Builds a trajectory from nodes with a single derivative per node.
    pub fn from_nodes(times: Vec<f64>, values: Vec<f64>, derivs: Vec<f64>) -> Result<Self> {
        let d_left = derivs.clone();
        Self::from_nodes_with_jumps(times, values, d_left, derivs)
    }

    /// Builds a trajectory whose nodes may carry a derivative jump.
    pub fn from_nodes_with_jumps(
        times: Vec<f64>,
        values: Vec<f64>,
        d_left: Vec<f64>,
        d_right: Vec<f64>,
    ) -> Result<Self> {
        let n = times.len();
        if n < 2 {
            return Err(Error::InvalidParameter("a trajectory needs at least two nodes".into()));
        }
        if values.len() != n || d_left.len() != n || d_right.len() != n {
            return Err(Error::InvalidParameter("node arrays differ in length".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter("mesh must be strictly increasing".into()));
        }
        if values.iter().chain(&d_left).chain(&d_right).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite node data".into()));
        }
        Ok(Self { times, values, d_left, d_right })
    }

    /// Samples a function and its derivative on a uniform mesh of `[t0, t1]`.
    /// The last cell is shortened if `step` does not divide the interval.
    pub fn sample(
        t0: f64,
        t1: f64,
        step: f64,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64,
    ) -> Result<Self> {
        if !(t1 > t0 && step > 0.0) {
            return Err(Error::InvalidParameter("need t1 > t0 and step > 0".into()));
        }
        let n = ((t1 - t0) / step - 1e-9).ceil().max(1.0) as usize;
        let mut times: Vec<f64> = (0..n).map(|i| t0 + i as f64 * step).collect();
        times.push(t1);
        let values = times.iter().map(|&t| f(t)).collect();
        let derivs = times.iter().map(|&t| df(t)).collect();
        Self::from_nodes(times, values, derivs)
    }

    pub(crate) fn from_raw(times: Vec<f64>, values: Vec<f64>, d_left: Vec<f64>, d_right: Vec<f64>) -> Self {
        debug_assert!(times.windows(2).all(|w| w[1] > w[0]));
        Self { times, values, d_left, d_right }
    }

    /// Appends a node after the current end.
    pub(crate) fn push_node(&mut self, t: f64, x: f64, d_left: f64, d_right: f64) {
        debug_assert!(t > self.t_end());
        self.times.push(t);
        self.values.push(x);
        self.d_left.push(d_left);
        self.d_right.push(d_right);
    }

    pub(crate) fn set_right_deriv(&mut self, i: usize, d: f64) {
        self.d_right[i] = d;
    }

    pub fn t_start(&self) -> f64 {
        self.times[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn mesh(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Right derivatives at the nodes (the right-hand side for integrated nodes).
    pub fn derivs(&self) -> &[f64] {
        &self.d_right
    }

    pub fn left_derivs(&self) -> &[f64] {
        &self.d_left
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.t_start() && t <= self.t_end()
    }

    fn check(&self, t: f64) -> Result<()> {
        if self.contains(t) {
            Ok(())
        } else {
            Err(Error::OutOfDomain { t, start: self.t_start(), end: self.t_end() })
        }
    }

    pub fn eval(&self, t: f64) -> Result<f64> {
        self.check(t)?;
        Ok(self.value_at(t))
    }

    pub fn eval_deriv(&self, t: f64) -> Result<f64> {
        self.check(t)?;
        Ok(self.deriv_at(t))
    }

    /// Index `i` of the cell `[t_i, t_{i+1}]` used for `t`; nodes belong to the
    /// cell on their right except the final node.
    #[inline]
    pub(crate) fn cell_index(&self, t: f64) -> usize {
        let n = self.times.len();
        let i = self.times.partition_point(|&x| x <= t);
        i.saturating_sub(1).min(n - 2)
    }

    #[inline]
    pub(crate) fn cell(&self, i: usize) -> HermiteCell {
        HermiteCell {
            t0: self.times[i],
            h: self.times[i + 1] - self.times[i],
            x0: self.values[i],
            x1: self.values[i + 1],
            d0: self.d_right[i],
            d1: self.d_left[i + 1],
        }
    }

    #[inline]
    pub(crate) fn value_at(&self, t: f64) -> f64 {
        let i = self.cell_index(t);
        if t == self.times[i] {
            return self.values[i];
        }
        if t == self.times[i + 1] {
            return self.values[i + 1];
        }
        self.cell(i).value(t)
    }

    #[inline]
    pub(crate) fn deriv_at(&self, t: f64) -> f64 {
        let i = self.cell_index(t);
        if t == self.times[i] {
            return self.d_right[i];
        }
        if t == self.times[i + 1] {
            return self.d_left[i + 1];
        }
        self.cell(i).deriv(t)
    }

    /// The delay window `[t - k, t]`.
    pub fn segment(&self, t: f64, k: f64) -> Result<SegmentView<'_>> {
        if !(k > 0.0) {
            return Err(Error::InvalidParameter(format!("window length must be positive, got {k}")));
        }
        if t - k < self.t_start() - 1e-12 * k.max(1.0) {
            return Err(Error::InsufficientHistory { needed: t - k, start: self.t_start(), deepest: None });
        }
        self.check(t)?;
        Ok(SegmentView { traj: self, anchor: t, k })
    }

    /// Exact sup of `|x|` on `[a, b]` for the piecewise cubic interpolant.
    pub fn sup_norm_on(&self, a: f64, b: f64) -> f64 {
        let mut best = self.value_at(a).abs().max(self.value_at(b).abs());
        let first = self.cell_index(a);
        let last = self.cell_index(b);
        for i in first..=last {
            let cell = self.cell(i);
            if self.times[i] > a && self.times[i] < b {
                best = best.max(self.values[i].abs());
            }
            let (cps, n) = cell.critical_points(a.max(cell.t0), b.min(cell.t0 + cell.h));
            for &c in &cps[..n] {
                best = best.max(cell.value(c).abs());
            }
        }
        best
    }

    /// Writes `t,x,dx` with one row per mesh node.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t,x,dx")?;
        for i in 0..self.times.len() {
            writeln!(w, "{},{},{}", fmt17(self.times[i]), fmt17(self.values[i]), fmt17(self.d_right[i]))?;
        }
        Ok(())
    }
}

/// Formats a float with 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// The window `x_t` of a trajectory: `s -> x(t + s)` for `s` in `[-K, 0]`.
#[derive(Debug, Clone, Copy)]
pub struct SegmentView<'a> {
    traj: &'a Trajectory,
    anchor: f64,
    k: f64,
}

impl<'a> SegmentView<'a> {
    pub fn anchor(&self) -> f64 {
        self.anchor
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn window(&self) -> (f64, f64) {
        (self.anchor - self.k, self.anchor)
    }

    pub fn trajectory(&self) -> &'a Trajectory {
        self.traj
    }

    /// `x(t + s)` for `s` in `[-K, 0]`, clamped into the window.
    #[inline]
    pub fn at(&self, s: f64) -> f64 {
        let t = (self.anchor + s.clamp(-self.k, 0.0)).max(self.traj.t_start());
        self.traj.value_at(t)
    }

    pub fn sup_norm(&self) -> f64 {
        let (a, b) = self.window();
        self.traj.sup_norm_on(a.max(self.traj.t_start()), b)
    }

    /// Largest difference quotient over `grid` equally spaced points of the
    /// window; a lower bound for the Lipschitz constant.
    pub fn lipschitz_estimate(&self, grid: usize) -> f64 {
        let grid = grid.max(2);
        let (a, b) = self.window();
        let a = a.max(self.traj.t_start());
        let dt = (b - a) / (grid - 1) as f64;
        let mut prev = self.traj.value_at(a);
        let mut best: f64 = 0.0;
        for j in 1..grid {
            let t = if j == grid - 1 { b } else { a + j as f64 * dt };
            let v = self.traj.value_at(t);
            best = best.max((v - prev).abs() / dt);
            prev = v;
        }
        best
    }
}

/// A piecewise-linear function on `[knots[0], knots[last]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseLinear {
    knots: Vec<f64>,
    values: Vec<f64>,
}

impl PiecewiseLinear {
    pub fn new(knots: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 || knots.len() != values.len() {
            return Err(Error::InvalidParameter("need at least two knots with values".into()));
        }
        if knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter("knots must be strictly increasing".into()));
        }
        Ok(Self { knots, values })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn knot_values(&self) -> &[f64] {
        &self.values
    }

    /// Value at `t`, extended constantly outside the knot range.
    pub fn eval(&self, t: f64) -> f64 {
        let n = self.knots.len();
        if t <= self.knots[0] {
            return self.values[0];
        }
        if t >= self.knots[n - 1] {
            return self.values[n - 1];
        }
        let i = self.knots.partition_point(|&x| x <= t) - 1;
        let w = (t - self.knots[i]) / (self.knots[i + 1] - self.knots[i]);
        self.values[i] + w * (self.values[i + 1] - self.values[i])
    }

    fn slope(&self, i: usize) -> f64 {
        (self.values[i + 1] - self.values[i]) / (self.knots[i + 1] - self.knots[i])
    }

    /// `(left, right)` one-sided derivatives at `t`; zero outside the range.
    pub fn one_sided_derivs(&self, t: f64) -> (f64, f64) {
        let n = self.knots.len();
        if t < self.knots[0] || t > self.knots[n - 1] {
            return (0.0, 0.0);
        }
        let i = self.knots.partition_point(|&x| x <= t);
        // t lies in [knots[i-1], knots[i]).
        if i > 0 && t == self.knots[i - 1] {
            let left = if i >= 2 { self.slope(i - 2) } else { 0.0 };
            let right = if i - 1 < n - 1 { self.slope(i - 1) } else { 0.0 };
            (left, right)
        } else {
            let s = self.slope(i.min(n - 1) - 1);
            (s, s)
        }
    }

    pub fn lipschitz(&self) -> f64 {
        (0..self.knots.len() - 1).map(|i| self.slope(i).abs()).fold(0.0, f64::max)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Exact representation as a trajectory with one Hermite cell per piece.
    pub fn to_trajectory(&self) -> Trajectory {
        let n = self.knots.len();
        let mut d_left = vec![0.0; n];
        let mut d_right = vec![0.0; n];
        for i in 0..n - 1 {
            let s = self.slope(i);
            d_right[i] = s;
            d_left[i + 1] = s;
        }
        d_left[0] = d_right[0];
        d_right[n - 1] = d_left[n - 1];
        Trajectory::from_raw(self.knots.clone(), self.values.clone(), d_left, d_right)
    }
}

/// Draws a random piecewise-linear segment on `[-K, 0]` with `pieces` equal
/// pieces, amplitude below `amp_frac * M` and slopes at most `slope_frac * L0`.
pub fn random_segment<R: Rng + ?Sized>(
    rng: &mut R,
    space: &PhaseSpace,
    pieces: usize,
    amp_frac: f64,
    slope_frac: f64,
) -> PiecewiseLinear {
    let pieces = pieces.max(1);
    let amp = amp_frac * space.m;
    let dt = space.k / pieces as f64;
    let max_step = slope_frac * space.l0 * dt;
    let mut knots = Vec::with_capacity(pieces + 1);
    let mut values = Vec::with_capacity(pieces + 1);
    let mut v: f64 = rng.gen_range(-amp..amp);
    for i in 0..=pieces {
        knots.push(if i == pieces { 0.0 } else { -space.k + i as f64 * dt });
        values.push(v);
        let target: f64 = rng.gen_range(-amp..amp);
        let delta = (target - v).clamp(-max_step, max_step);
        v = (v + delta).clamp(-amp, amp);
    }
    PiecewiseLinear { knots, values }
}
