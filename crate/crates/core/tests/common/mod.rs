#![allow(dead_code)]

use chrono::NaiveDate;
use epirkhs::contact::{ContactRate, ContactRateFn, ParametricTheta};
use epirkhs::data::ObservationSeries;
use epirkhs::sir::{self, SirParams, TimeGrid};

/// Large enough that integer rounding of counts is far below any tolerance
/// used with noiseless data.
pub const EXACT_POPULATION: f64 = 1e15;

pub fn march_first() -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 3, 1).unwrap()
}

/// Series whose normalized values are exactly `y`.
pub fn exact_series(y: &[f64]) -> ObservationSeries {
    let dates = (0..y.len()).map(|k| march_first() + chrono::Days::new(k as u64)).collect();
    let mut s = ObservationSeries::new("synthetic", dates, vec![0; y.len()], EXACT_POPULATION).unwrap();
    s.icu_counts = y.iter().map(|v| (v * EXACT_POPULATION).round() as u64).collect();
    s.y = y.to_vec();
    s
}

/// Noiseless outputs of the exponential-decay model started on the
/// equilibrium manifold through `y0`.
pub fn exp_decay_outputs(theta: &ParametricTheta, y0: f64, t_star: f64, t_end: f64, n: usize) -> Option<Vec<f64>> {
    let params = SirParams::new(theta.b, theta.h).ok()?;
    let init = sir::initial_state(y0, &params, theta.a1).ok()?;
    let traj = sir::simulate(&theta.contact(t_star, t_end), &params, init, &TimeGrid::daily(n)).ok()?;
    Some(sir::model_output(&traj, &params))
}

pub fn outputs_of(contact: &impl ContactRate, b: f64, h: f64, y0: f64, a0: f64, n: usize) -> Option<Vec<f64>> {
    let params = SirParams::new(b, h).ok()?;
    let init = sir::initial_state(y0, &params, a0).ok()?;
    let traj = sir::simulate(contact, &params, init, &TimeGrid::daily(n)).ok()?;
    Some(sir::model_output(&traj, &params))
}

pub fn reported() -> ParametricTheta {
    ParametricTheta { a1: 0.27, a2: 0.19, b: 0.076, c: 0.011, h: 1467.8 }
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

pub fn constant(a: f64) -> ContactRateFn {
    ContactRateFn::Constant { a }
}
