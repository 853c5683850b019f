#![allow(dead_code)]

use std::path::PathBuf;

use rand::SeedableRng;
use rand_xoshiro::SplitMix64;
use sdde_morse::delay::{DelayModel, ImplicitRule, Kernel};
use sdde_morse::feedback::FeedbackModel;
use sdde_morse::phase::{random_segment, PhaseSpace, PiecewiseLinear};

pub const M: f64 = 2.0;

/// `x' = -b tanh(x(t - 1))`.
pub fn wright(b: f64) -> (FeedbackModel, DelayModel) {
    (FeedbackModel::tanh(0.0, b, 1.0, M).unwrap(), DelayModel::constant(1.0, 1.0).unwrap())
}

/// `x' = -x - 1.6 tanh(2 y)` with the three state-dependent delays below.
pub fn damped() -> FeedbackModel {
    FeedbackModel::tanh(1.0, 1.6, 2.0, M).unwrap()
}

pub fn threshold_delay() -> DelayModel {
    DelayModel::threshold(Kernel::Affine { c0: 1.0, c1: 0.1 }, 0.1, 1.3).unwrap()
}

pub fn mill_delay() -> DelayModel {
    DelayModel::implicit(ImplicitRule::Mill { a: 1.0, b: 0.05 }, 0.05, 0.05, 1.3).unwrap()
}

pub fn echo_delay() -> DelayModel {
    DelayModel::implicit(ImplicitRule::Echo { a: 1.0, b: 0.05 }, 0.05, 0.05, 1.3).unwrap()
}

pub fn space(model: &FeedbackModel, delay: &DelayModel) -> PhaseSpace {
    PhaseSpace::new(model.m(), delay.k(), model.l0()).unwrap()
}

pub fn random_pl(space: &PhaseSpace, seed: u64, pieces: usize) -> PiecewiseLinear {
    let mut rng = SplitMix64::seed_from_u64(seed);
    random_segment(&mut rng, space, pieces, 0.9, 0.9)
}

pub fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(format!("{name}.cfg"))
}
