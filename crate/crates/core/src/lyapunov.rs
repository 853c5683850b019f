//! The discrete Lyapunov function: sign changes of the dense interpolant,
//! the odd-valued `V`, the regularity class `H_[a,b]` and `V` along solutions
//! on the windows `[η(t), t]`.
//!
//! Sign changes are read off the interpolant itself. Each Hermite cell splits
//! at its critical points into monotone pieces, so the signs at cell ends and
//! critical points determine the alternation count exactly.

use std::cmp::Ordering;
use std::fmt;

use serde::{Serialize, Serializer};

use crate::delay::DelayedArgumentMap;
use crate::error::{Error, Result};
use crate::phase::Trajectory;

/// Counts above this saturate to [`SignChanges::Infinite`].
pub const V_CAP: u32 = 99;

/// Default zero tolerance relative to the amplitude bound `M`.
pub const TOL_ZERO_REL: f64 = 1e-9;

/// Result of `sc`: a finite count or the `∞` sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SignChanges {
    Finite(u32),
    Infinite,
}

/// Value of `V`: an odd positive integer or `∞`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VValue {
    Finite(u32),
    Infinite,
}

impl VValue {
    /// `Some` only for odd `n`.
    pub fn odd(n: u32) -> Option<Self> {
        (n % 2 == 1).then_some(VValue::Finite(n))
    }

    pub fn finite(&self) -> Option<u32> {
        match self {
            VValue::Finite(n) => Some(*n),
            VValue::Infinite => None,
        }
    }

    pub fn is_valid(&self) -> bool {
        match self {
            VValue::Finite(n) => n % 2 == 1,
            VValue::Infinite => true,
        }
    }
}

impl fmt::Display for VValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VValue::Finite(n) => write!(f, "{n}"),
            VValue::Infinite => write!(f, "inf"),
        }
    }
}

impl fmt::Display for SignChanges {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SignChanges::Finite(n) => write!(f, "{n}"),
            SignChanges::Infinite => write!(f, "inf"),
        }
    }
}

impl Serialize for VValue {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            VValue::Finite(n) => s.serialize_u32(*n),
            VValue::Infinite => s.serialize_str("inf"),
        }
    }
}

/// `sc` rounded up to odd; `∞` stays `∞`.
pub fn vfunc(sc: SignChanges) -> VValue {
    match sc {
        SignChanges::Finite(n) if n % 2 == 1 => VValue::Finite(n),
        SignChanges::Finite(n) => VValue::Finite(n + 1),
        SignChanges::Infinite => VValue::Infinite,
    }
}

/// Points of the interpolant on `[a, b]` between which it is monotone:
/// interval ends, interior nodes and interior critical points, with the cell
/// each point was taken from.
fn monotone_points(traj: &Trajectory, a: f64, b: f64) -> Vec<(f64, f64, usize)> {
    let mesh = traj.mesh();
    let first = traj.cell_index(a);
    let last = traj.cell_index(b);
    let mut pts = vec![(a, traj.value_at(a), first)];
    for i in first..=last {
        let cell = traj.cell(i);
        let lo = a.max(mesh[i]);
        let hi = b.min(mesh[i + 1]);
        if hi <= lo {
            continue;
        }
        let (cps, n) = cell.critical_points(lo, hi);
        let mut cps = cps[..n].to_vec();
        cps.sort_by(|x, y| x.partial_cmp(y).unwrap_or(Ordering::Equal));
        for c in cps {
            if c > lo && c < hi {
                pts.push((c, cell.value(c), i));
            }
        }
        let v = if hi == mesh[i + 1] { traj.values()[i + 1] } else { traj.value_at(hi) };
        pts.push((hi, v, i));
    }
    pts
}

#[inline]
fn strict_sign(v: f64, tol: f64) -> i8 {
    if v > tol {
        1
    } else if v < -tol {
        -1
    } else {
        0
    }
}

/// `sc(x, [a, b])` with the default cap.
pub fn sign_changes(traj: &Trajectory, a: f64, b: f64, tol_zero: f64) -> Result<SignChanges> {
    sign_changes_capped(traj, a, b, tol_zero, V_CAP)
}

/// `sc(x, [a, b])`: the longest alternation of strict signs of the dense
/// interpolant, values within `tol_zero` being sign-neutral.
///
/// Returns `Infinite` above `v_cap`, or when two consecutive cells each hold
/// two or more sign changes.
pub fn sign_changes_capped(traj: &Trajectory, a: f64, b: f64, tol_zero: f64, v_cap: u32) -> Result<SignChanges> {
    if !(b > a) || a < traj.t_start() || b > traj.t_end() {
        return Err(Error::OutOfDomain { t: if a < traj.t_start() { a } else { b }, start: traj.t_start(), end: traj.t_end() });
    }
    let mut last_sign = 0i8;
    let mut count = 0u32;
    let mut cur_cell = usize::MAX;
    let mut in_cell = 0u32;
    let mut prev_cell_busy = false;
    for (_, v, cell) in monotone_points(traj, a, b) {
        if cell != cur_cell {
            prev_cell_busy = cur_cell != usize::MAX && cell == cur_cell + 1 && in_cell >= 2;
            cur_cell = cell;
            in_cell = 0;
        }
        let s = strict_sign(v, tol_zero);
        if s == 0 {
            continue;
        }
        if last_sign != 0 && s != last_sign {
            count += 1;
            in_cell += 1;
            if count > v_cap || (in_cell >= 2 && prev_cell_busy) {
                return Ok(SignChanges::Infinite);
            }
        }
        last_sign = s;
    }
    if last_sign == 0 {
        return Err(Error::AllZero { a, b });
    }
    Ok(SignChanges::Finite(count))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossingKind {
    /// Strict signs on both sides, one monotone zero in between.
    Transversal,
    /// A touch of the tolerance band without a sign change.
    Tangential,
    /// A sign change across a stretch that stays inside the tolerance band.
    Plateau,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ZeroCrossing {
    pub t: f64,
    pub kind: CrossingKind,
}

fn bisect_zero(traj: &Trajectory, mut lo: f64, mut hi: f64) -> f64 {
    let s_lo = traj.value_at(lo).signum();
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let v = traj.value_at(mid);
        if v == 0.0 {
            return mid;
        }
        if v.signum() == s_lo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Zeros of the interpolant in `[a, b]` between strict-sign stretches.
/// Neutral stretches touching `a` or `b` are not reported.
pub fn zero_crossings(traj: &Trajectory, a: f64, b: f64, tol_zero: f64) -> Vec<ZeroCrossing> {
    let pts = monotone_points(traj, a, b);
    let mut out = Vec::new();
    let mut prev: Option<(usize, i8)> = None;
    for (j, &(_, v, _)) in pts.iter().enumerate() {
        let s = strict_sign(v, tol_zero);
        if s == 0 {
            continue;
        }
        if let Some((i, ps)) = prev {
            let neutral = j - i - 1;
            let (ti, tj) = (pts[i].0, pts[j].0);
            if ps != s {
                if neutral == 0 {
                    out.push(ZeroCrossing { t: bisect_zero(traj, ti, tj), kind: CrossingKind::Transversal });
                } else if neutral == 1 {
                    let tm = pts[i + 1].0;
                    let rising = (pts[i + 1].1 - pts[i].1).signum() == (pts[j].1 - pts[i + 1].1).signum();
                    let kind = if rising { CrossingKind::Transversal } else { CrossingKind::Plateau };
                    let t = if rising { bisect_zero(traj, ti, tj) } else { tm };
                    out.push(ZeroCrossing { t, kind });
                } else {
                    let t = 0.5 * (pts[i + 1].0 + pts[j - 1].0);
                    out.push(ZeroCrossing { t, kind: CrossingKind::Plateau });
                }
            } else if neutral > 0 {
                let t = 0.5 * (pts[i + 1].0 + pts[j - 1].0);
                out.push(ZeroCrossing { t, kind: CrossingKind::Tangential });
            }
        }
        prev = Some((j, s));
    }
    out
}

/// Membership of `x|[a, b]` in `H_[a,b]`: only simple zeros inside, and the
/// endpoint conditions, all decided with tolerance `tol`.
pub fn is_regular(traj: &Trajectory, a: f64, b: f64, tol: f64) -> bool {
    let xa = traj.value_at(a);
    let xb = traj.value_at(b);
    let da = traj.deriv_at(a);
    let db = traj.deriv_at(b);
    let nonzero = |v: f64| v.abs() > tol;
    if !(nonzero(xb) || (nonzero(xa) && nonzero(db) && xa * db < 0.0)) {
        return false;
    }
    if !(nonzero(xa) || (nonzero(xb) && nonzero(da) && da * xb > 0.0)) {
        return false;
    }
    for z in zero_crossings(traj, a, b, tol) {
        if z.kind != CrossingKind::Transversal || traj.deriv_at(z.t).abs() <= tol {
            return false;
        }
    }
    true
}

/// `V(x, [η(t), t])`.
pub fn v_along(traj: &Trajectory, map: &DelayedArgumentMap<'_>, t: f64, tol_zero: f64) -> Result<VValue> {
    let eta = map.eta(t)?;
    Ok(vfunc(sign_changes(traj, eta, t, tol_zero)?))
}

/// One row of a V trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VSample {
    pub t: f64,
    pub eta: f64,
    pub sc: u32,
    pub sc_infinite: bool,
    pub v: VValue,
    pub regular: bool,
}

/// `V` on `[η(t), t]` for `t = t0, t0 + dt, …, <= t1`, stopping before the
/// first window that is numerically zero.
pub fn v_trace(
    traj: &Trajectory,
    map: &DelayedArgumentMap<'_>,
    t0: f64,
    t1: f64,
    dt: f64,
    tol_zero: f64,
) -> Result<Vec<VSample>> {
    if !(dt > 0.0) || t1 < t0 {
        return Err(Error::InvalidParameter(format!("bad trace grid [{t0}, {t1}] step {dt}")));
    }
    let n = ((t1 - t0) / dt + 1e-9).floor() as usize;
    let mut out = Vec::with_capacity(n + 1);
    for j in 0..=n {
        let t = t0 + j as f64 * dt;
        let eta = map.eta(t)?;
        let sc = match sign_changes(traj, eta, t, tol_zero) {
            Ok(sc) => sc,
            Err(Error::AllZero { .. }) => break,
            Err(e) => return Err(e),
        };
        out.push(VSample {
            t,
            eta,
            sc: match sc {
                SignChanges::Finite(n) => n,
                SignChanges::Infinite => V_CAP + 1,
            },
            sc_infinite: sc == SignChanges::Infinite,
            v: vfunc(sc),
            regular: is_regular(traj, eta, t, tol_zero),
        });
    }
    Ok(out)
}

/// Writes `t,eta_t,sc,V,regular_flag`.
pub fn write_v_trace_csv<W: std::io::Write>(trace: &[VSample], mut w: W) -> std::io::Result<()> {
    use crate::phase::fmt17;
    writeln!(w, "t,eta_t,sc,V,regular_flag")?;
    for s in trace {
        let sc = if s.sc_infinite { "inf".to_string() } else { s.sc.to_string() };
        writeln!(w, "{},{},{},{},{}", fmt17(s.t), fmt17(s.eta), sc, s.v, u8::from(s.regular))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct VLimit {
    pub value: VValue,
    pub stabilized: bool,
}

/// `V` sampled over `[t0, t1]`; stabilized iff constant on the samples.
pub fn v_limit(
    traj: &Trajectory,
    map: &DelayedArgumentMap<'_>,
    window: (f64, f64),
    tol_zero: f64,
) -> Result<VLimit> {
    let (t0, t1) = window;
    let k = map.model().k();
    if t1 - t0 < 5.0 * k * (1.0 - 1e-12) {
        return Err(Error::Precondition(format!("limit window [{t0}, {t1}] shorter than 5K = {}", 5.0 * k)));
    }
    let dt = k / 20.0;
    let n = ((t1 - t0) / dt).floor() as usize;
    let mut first = None;
    let mut stabilized = true;
    let mut value = VValue::Infinite;
    for j in 0..=n {
        let t = if j == n { t1 } else { t0 + j as f64 * dt };
        value = v_along(traj, map, t, tol_zero)?;
        match first {
            None => first = Some(value),
            Some(f) if f != value => stabilized = false,
            _ => {}
        }
    }
    Ok(VLimit { value, stabilized })
}
