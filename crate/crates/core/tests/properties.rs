mod common;

use common::*;
use num_complex::Complex64;
use proptest::prelude::*;
use sdde_morse::delay::{delay_eval, DelayKind, DelayModel, DelayedArgumentMap, Kernel};
use sdde_morse::feedback::FeedbackModel;
use sdde_morse::integrator::{integrate, InitialSegment, IntegratorConfig};
use sdde_morse::lyapunov::{is_regular, sign_changes, v_along, vfunc, VValue};
use sdde_morse::morse::{run_ensemble, ClassifyConfig, EnsembleSpec, MorseKind};
use sdde_morse::phase::Trajectory;
use sdde_morse::spectrum::{count_unstable, transform, Linearization};

const TOL: f64 = 1e-9 * M;

fn delay_by(kind: u8) -> (FeedbackModel, DelayModel) {
    match kind {
        0 => wright(1.6),
        1 => (damped(), threshold_delay()),
        2 => (damped(), mill_delay()),
        _ => (damped(), echo_delay()),
    }
}

fn run(kind: u8, seed: u64, step: f64, horizon: f64) -> (FeedbackModel, DelayModel, Trajectory) {
    let (model, delay) = delay_by(kind);
    let phi = InitialSegment::PiecewiseLinear(random_pl(&space(&model, &delay), seed, 8));
    let traj = integrate(&model, &delay, &phi, &IntegratorConfig::new(step, horizon)).unwrap();
    (model, delay, traj)
}

/// Composite Simpson on `[a, b]` with `n` (even) panels.
fn simpson(a: f64, b: f64, n: usize, g: impl Fn(f64) -> f64) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = g(a) + g(b);
    for i in 1..n {
        s += g(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hermite_reproduces_cubics(
        c in prop::array::uniform4(-5.0f64..5.0),
        gaps in prop::collection::vec(0.05f64..0.7, 2..8),
        probe in 0.0f64..1.0,
    ) {
        let p = |t: f64| c[0] + t * (c[1] + t * (c[2] + t * c[3]));
        let dp = |t: f64| c[1] + t * (2.0 * c[2] + t * 3.0 * c[3]);
        let mut times = vec![-1.0];
        for g in &gaps {
            times.push(times.last().unwrap() + g);
        }
        let traj = Trajectory::from_nodes(times.clone(), times.iter().map(|&t| p(t)).collect(), times.iter().map(|&t| dp(t)).collect()).unwrap();
        let t = times[0] + probe * (times[times.len() - 1] - times[0]);
        let scale = 1.0 + c.iter().map(|v| v.abs()).sum::<f64>() * 27.0;
        prop_assert!((traj.eval(t).unwrap() - p(t)).abs() <= 1e-13 * scale);
        prop_assert!((traj.eval_deriv(t).unwrap() - dp(t)).abs() <= 1e-12 * scale);
    }

    #[test]
    fn feedback_decomposition_identity(a in 0.0f64..2.0, b in 0.1f64..3.0, c in 0.2f64..3.0, x in -M..M, y in -M..M) {
        let model = FeedbackModel::tanh(a, b, c, M).unwrap();
        let ca = model.coefficient_a(x, y);
        let cb = model.coefficient_b(y).unwrap();
        prop_assert!(cb < 0.0);
        prop_assert!((ca * x + cb * y - model.f(x, y)).abs() <= 1e-10);
    }

    #[test]
    fn feedback_derivatives_match_differences(a in 0.0f64..2.0, b in 0.1f64..3.0, c in 0.2f64..3.0, x in -M..M, y in -M..M) {
        let model = FeedbackModel::tanh(a, b, c, M).unwrap();
        let h = 1e-5;
        let d1 = (model.f(x + h, y) - model.f(x - h, y)) / (2.0 * h);
        let d2 = (model.f(x, y + h) - model.f(x, y - h)) / (2.0 * h);
        prop_assert!((d1 - model.d1f(x, y)).abs() <= 1e-6 * model.d1f(x, y).abs().max(1.0));
        prop_assert!((d2 - model.d2f(x, y)).abs() <= 1e-6 * model.d2f(x, y).abs().max(1.0));
    }

    #[test]
    fn threshold_residual_and_range(seed in any::<u64>(), c1 in -0.2f64..0.2, c2 in 0.0f64..0.1) {
        let model = damped();
        let kernel = Kernel::Quadratic { c0: 1.0, c2 };
        let affine = Kernel::Affine { c0: 1.0, c1 };
        for kernel in [kernel, affine] {
            let delay = DelayModel::threshold(kernel.clone(), 0.5, 1.7).unwrap();
            let pl = random_pl(&space(&model, &delay), seed, 12);
            let traj = pl.to_trajectory();
            let r = delay_eval(&delay, &traj.segment(0.0, delay.k()).unwrap()).unwrap();
            prop_assert!(r > 0.0 && r <= delay.k());
            prop_assert!(r >= delay.tau0(M) * (1.0 - 1e-12));
            // integrand is polynomial of degree <= 2 between knots
            let mut cuts: Vec<f64> = pl.knots().iter().copied().filter(|&s| s > -r).collect();
            cuts.insert(0, -r);
            let total: f64 = cuts.windows(2).map(|w| simpson(w[0], w[1], 2, |s| kernel.eval(pl.eval(s)))).sum();
            prop_assert!((total - 1.0).abs() <= 1e-10, "residual {}", total - 1.0);
        }
    }

    #[test]
    fn implicit_residual_and_range(seed in any::<u64>(), kind in 2u8..4) {
        let (model, delay) = delay_by(kind);
        let pl = random_pl(&space(&model, &delay), seed, 12);
        let r = delay_eval(&delay, &pl.to_trajectory().segment(0.0, delay.k()).unwrap()).unwrap();
        let DelayKind::Implicit { rule, .. } = delay.kind() else { unreachable!() };
        prop_assert!((r - rule.eval(pl.eval(0.0), pl.eval(-r))).abs() <= 1e-11);
        prop_assert!(r > 0.0 && r <= delay.k() && r >= delay.tau0(M) - 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn trajectories_stay_in_phase_space(seed in any::<u64>(), kind in 0u8..4) {
        let (model, delay, traj) = run(kind, seed, 0.01, 10.0);
        let h = 0.001;
        let n = ((traj.t_end() - traj.t_start()) / h) as usize;
        for j in 0..=n {
            let t = (traj.t_start() + j as f64 * h).min(traj.t_end());
            prop_assert!(traj.eval(t).unwrap().abs() < model.m());
        }
        for t in [0.0, 2.5, 5.0, 7.5, 10.0] {
            let lip = traj.segment(t, delay.k()).unwrap().lipschitz_estimate(2000);
            prop_assert!(lip <= model.l0() + 1e-6, "Lipschitz estimate {lip} at t = {t}");
        }
    }

    #[test]
    fn eta_is_strictly_increasing(seed in any::<u64>(), kind in 0u8..4) {
        let (_, delay, traj) = run(kind, seed, 0.01, 20.0);
        let map = DelayedArgumentMap::new(&traj, &delay);
        let mut prev = map.eta(0.0).unwrap();
        for j in 1..=2000 {
            let e = map.eta(j as f64 * 0.01).unwrap();
            prop_assert!(e > prev, "eta not increasing at step {j}");
            prev = e;
        }
    }

    #[test]
    fn semigroup_restart(seed in any::<u64>(), kind in 0u8..4, cut in 3usize..8) {
        let (model, delay) = delay_by(kind);
        let phi = InitialSegment::PiecewiseLinear(random_pl(&space(&model, &delay), seed, 8));
        let h = 0.01;
        let t_cut = cut as f64;
        let direct = integrate(&model, &delay, &phi, &IntegratorConfig::new(h, t_cut + 4.0)).unwrap();
        let first = integrate(&model, &delay, &phi, &IntegratorConfig::new(h, t_cut)).unwrap();
        let restart = InitialSegment::from_window(&first, t_cut, delay.k()).unwrap();
        let second = integrate(&model, &delay, &restart, &IntegratorConfig::new(h, 4.0)).unwrap();
        let mut worst: f64 = 0.0;
        for (s, x) in second.mesh().iter().zip(second.values()) {
            if *s >= 0.0 {
                worst = worst.max((direct.eval(t_cut + s).unwrap() - x).abs());
            }
        }
        prop_assert!(worst <= 1e-9, "restart mismatch {worst}");
    }

    #[test]
    fn v_parity_and_monotonicity(seed in any::<u64>(), kind in 0u8..4) {
        let (_, delay, traj) = run(kind, seed, 0.01, 30.0);
        let map = DelayedArgumentMap::new(&traj, &delay);
        let mut prev: Option<VValue> = None;
        for j in 0..=300 {
            let t = j as f64 * 0.1;
            let v = v_along(&traj, &map, t, TOL).unwrap();
            prop_assert!(v.is_valid());
            if t >= 2.0 * delay.k() {
                if let Some(p) = prev {
                    prop_assert!(v <= p, "V rose from {p} to {v} at t = {t}");
                }
                prev = Some(v);
            }
        }
    }

    #[test]
    fn v_survives_small_c1_perturbations(p in 0.0f64..6.2, w in 2.0f64..14.0, q in 0.0f64..6.2) {
        let x = move |s: f64| 0.5 * (w * s + p).sin();
        let dx = move |s: f64| 0.5 * w * (w * s + p).cos();
        let base = Trajectory::sample(-1.0, 0.0, 1e-3, x, dx).unwrap();
        prop_assume!(is_regular(&base, -1.0, 0.0, TOL));
        prop_assume!(x(-1.0).abs() > 0.01 && x(0.0).abs() > 0.01);
        let g = 1e-4;
        let pert = Trajectory::sample(-1.0, 0.0, 1e-3, move |s| x(s) + g * (7.0 * s + q).sin(), move |s| dx(s) + 7.0 * g * (7.0 * s + q).cos()).unwrap();
        let v0 = vfunc(sign_changes(&base, -1.0, 0.0, TOL).unwrap());
        let v1 = vfunc(sign_changes(&pert, -1.0, 0.0, TOL).unwrap());
        prop_assert_eq!(v0, v1);
    }
}

/// Root of `λ + b e^{-λ} = 0` by Newton from `z`.
fn char_root(b: f64, mut z: Complex64) -> Complex64 {
    for _ in 0..100 {
        let e = (-z).exp();
        z -= (z + b * e) / (1.0 - b * e);
    }
    assert!((z + b * (-z).exp()).norm() < 1e-12);
    z
}

#[test]
fn double_zero_drops_v() {
    // entire solution of x' = -b x(t - 1) built from two characteristic modes,
    // tuned so that x(0) = x(-1) = 0
    let b = 1.6;
    let l1 = char_root(b, Complex64::new(0.0, 1.6));
    let l2 = char_root(b, Complex64::new(-1.6, 7.5));
    assert!((l1.im - l2.im).abs() > 1.0);
    let e1 = (-l1).exp();
    let e2 = (-l2).exp();
    let beta_im = (e1.re - e2.re) / e2.im;
    let beta = Complex64::new(-1.0, beta_im);
    let x = move |t: f64| ((l1 * t).exp() + beta * (l2 * t).exp()).re;
    let dx = move |t: f64| (l1 * (l1 * t).exp() + beta * l2 * (l2 * t).exp()).re;
    assert!(x(0.0).abs() < 1e-14 && x(-1.0).abs() < 1e-12);
    let traj = Trajectory::sample(-4.0, 0.0, 1e-3, x, dx).unwrap();
    let delay = DelayModel::constant(1.0, 1.0).unwrap();
    let map = DelayedArgumentMap::new(&traj, &delay);
    let tol = 1e-9;
    let now = v_along(&traj, &map, 0.0, tol).unwrap();
    let before = v_along(&traj, &map, -2.0, tol).unwrap();
    assert!(now == VValue::Infinite || now < before, "V = {now} on [-1, 0], {before} on [-3, -2]");
}

#[test]
fn equal_v_implies_regular() {
    for kind in 0..4 {
        let (_, delay, traj) = run(kind, 99 + kind as u64, 0.01, 40.0);
        let map = DelayedArgumentMap::new(&traj, &delay);
        let mut checked = 0;
        for j in 0..300 {
            let t = 10.0 + j as f64 * 0.1;
            let v = v_along(&traj, &map, t, TOL).unwrap();
            let back = map.eta_iter(t, 3).unwrap();
            if v.finite().is_some() && v == v_along(&traj, &map, back, TOL).unwrap() {
                let e = map.eta(t).unwrap();
                assert!(is_regular(&traj, e, t, TOL), "kind {kind}: irregular window at t = {t}");
                checked += 1;
            }
        }
        assert!(checked > 100);
    }
}

#[test]
fn transformation_preserves_sign_and_v() {
    let model = damped();
    let delay = threshold_delay();
    let phi = InitialSegment::PiecewiseLinear(random_pl(&space(&model, &delay), 5, 8));
    let traj = integrate(&model, &delay, &phi, &IntegratorConfig::new(0.005, 40.0)).unwrap();
    let map = DelayedArgumentMap::new(&traj, &delay);
    let path = transform(&traj, &model, &map, 5.0).unwrap();
    for (x, y) in path.x.iter().zip(&path.y) {
        if x.abs() > TOL {
            assert_eq!(x.signum(), y.signum());
        }
    }
    let first = traj.mesh().partition_point(|&s| s < path.t0);
    let dy: Vec<f64> = (0..path.times.len())
        .map(|i| (-path.int_a[i]).exp() * (traj.derivs()[first + i] - path.a_t[i] * path.x[i]))
        .collect();
    let ytraj = Trajectory::from_nodes(path.times.clone(), path.y.clone(), dy).unwrap();
    for j in 0..250 {
        let t = 8.0 + j as f64 * 0.12;
        let e = map.eta(t).unwrap();
        let vx = vfunc(sign_changes(&traj, e, t, TOL).unwrap());
        let ymax = ytraj.sup_norm_on(e, t);
        let vy = vfunc(sign_changes(&ytraj, e, t, 1e-9 * ymax).unwrap());
        assert_eq!(vx, vy, "t = {t}");
    }
    let scale = path.x.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    assert!(path.decomposition_residual(&traj) <= 1e-8 * scale);
}

#[test]
fn continuous_dependence_constant() {
    let (model, delay) = delay_by(1);
    let sp = space(&model, &delay);
    let pl = random_pl(&sp, 17, 8);
    let delta = 1e-6;
    let shifted = sdde_morse::phase::PiecewiseLinear::new(pl.knots().to_vec(), pl.knot_values().iter().map(|v| v + delta).collect()).unwrap();
    let cfg = IntegratorConfig::new(0.005, 5.0 * delay.k());
    let a = integrate(&model, &delay, &InitialSegment::PiecewiseLinear(pl), &cfg).unwrap();
    let b = integrate(&model, &delay, &InitialSegment::PiecewiseLinear(shifted), &cfg).unwrap();
    let gap = a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let c = gap / delta;
    println!("continuous dependence constant on [0, 5K]: C = {c:.3}");
    assert!(c.is_finite() && c < 100.0);
}

#[test]
fn coefficient_b_negative_on_fine_grid() {
    for model in [damped(), wright(1.6).0] {
        for i in 0..=10_000 {
            let y = -M + 2.0 * M * i as f64 / 10_000.0;
            assert!(model.coefficient_b(y).unwrap() < 0.0);
        }
    }
}

#[test]
fn threshold_eta_derivative_identity() {
    let delay = DelayModel::threshold(Kernel::Affine { c0: 1.0, c1: 0.1 }, 0.1, 1.3).unwrap();
    let traj = Trajectory::sample(-2.0, 12.0, 1e-3, |t| 0.5 * t.sin(), |t| 0.5 * t.cos()).unwrap();
    let map = DelayedArgumentMap::new(&traj, &delay);
    let a = |x: f64| 1.0 + 0.1 * x;
    let d = 1e-3;
    for j in 0..100 {
        let t = 1.0 + j as f64 * 0.1;
        let fd = (map.eta(t + d).unwrap() - map.eta(t - d).unwrap()) / (2.0 * d);
        let e = map.eta(t).unwrap();
        let exact = a(0.5 * t.sin()) / a(0.5 * e.sin());
        assert!((fd - exact).abs() <= 1e-4 * exact, "t = {t}: {fd} vs {exact}");
    }
}

#[test]
fn morse_labels_are_odd_and_consistent() {
    for (b, expect_origin) in [(1.6, false), (1.0, true)] {
        let (model, delay) = wright(b);
        let lin = sdde_morse::spectrum::linearize(&model, &delay).unwrap();
        let rep = count_unstable(&lin, lin.default_tol_imag()).unwrap();
        let cls = ClassifyConfig::defaults(M, 1.0, rep.n_star);
        let runs = run_ensemble(&model, &delay, &EnsembleSpec::new(6, 3), &IntegratorConfig::new(0.01, 60.0), &cls, rep.n_star, 0.1).unwrap();
        for r in &runs {
            if let MorseKind::EqualsN { n } = r.summary.label.kind {
                assert_eq!(n % 2, 1);
            }
        }
        let all_origin = runs.iter().all(|r| r.summary.label.kind == MorseKind::OriginLimit);
        assert_eq!(all_origin, expect_origin);
        if all_origin {
            assert!(rep.m_star == 0 && rep.hyperbolic);
        }
    }
}

#[test]
fn evenness_on_stable_side() {
    for i in 0..12 {
        for j in 0..6 {
            let a = -2.0 + 0.3 * i as f64;
            let b = -0.2 - 0.55 * j as f64;
            if a + b < 0.0 {
                let rep = count_unstable(&Linearization::new(a, b, 1.0).unwrap(), 1e-6).unwrap();
                if rep.hyperbolic {
                    assert_eq!(rep.m_star % 2, 0, "A = {a}, B = {b}");
                }
            }
        }
    }
}
