//! Deterministic surrogate of the Civil Protection files, generated from a
//! planted contact-rate profile.

use std::path::Path;

use chrono::NaiveDate;
use epirkhs::contact::{ContactRate, ParametricTheta, Side};
use epirkhs::data::{self, SynthSpec};
use epirkhs::sir::{self, SirParams, TimeGrid};
use epirkhs::Result;

use crate::commands::{Failure, Outcome, NATIONAL_FILE, REGIONAL_FILE};

/// Exponential decay through the lockdown, then a constant rate.
#[derive(Debug, Clone, Copy)]
pub struct Planted {
    pub lockdown: ParametricTheta,
    pub t_star: f64,
    pub t_end: f64,
    pub post: f64,
}

pub const PLANTED: Planted =
    Planted { lockdown: ParametricTheta { a1: 0.27, a2: 0.19, b: 0.076, c: 0.011, h: 300.0 }, t_star: 8.0, t_end: 78.0, post: 0.07 };

pub const DAYS: usize = 170;
pub const Y0: f64 = 1.27e-5;
pub const SEED: u64 = 2020;

impl ContactRate for Planted {
    fn rate(&self, t: f64, side: Side) -> Result<f64> {
        let after = match side {
            Side::Right => t >= self.t_end,
            Side::Left => t > self.t_end,
        };
        if after {
            Ok(self.post)
        } else {
            self.lockdown.contact(self.t_star, self.t_end).rate(t, side)
        }
    }
}

pub fn write_fixture(dir: &Path) -> Outcome<()> {
    let p = PLANTED;
    let params = SirParams::new(p.lockdown.b, p.lockdown.h)?;
    let init = sir::initial_state(Y0, &params, p.lockdown.a1)?;
    let spec = SynthSpec {
        region: "Lombardia",
        start: NaiveDate::from_ymd_opt(2020, 3, 1).expect("valid date"),
        population: data::LOMBARDY_POPULATION,
        noise_sd: 3.5e-12f64.sqrt(),
        seed: SEED,
    };
    let synth = data::synth_generate(&p, &params, init, &TimeGrid::daily(DAYS), &spec)?;
    data::write_dpc_csv(&[&synth.series], true, dir.join(REGIONAL_FILE))?;
    data::write_dpc_csv(&[&synth.series], false, dir.join(NATIONAL_FILE))?;

    let times = synth.trajectory.grid.times();
    let rows: Vec<Vec<f64>> = times
        .iter()
        .zip(&synth.clean)
        .map(|(&t, &y)| {
            let a = p.rate(t, Side::Right).expect("planted rate is total");
            vec![t, a, a / p.lockdown.b, y]
        })
        .collect();
    data::export_table(&["t", "a", "gamma", "y_clean"], &rows, dir.join("truth.csv"))?;

    let readme = format!(
        "# Synthetic surrogate\n\n\
         Generated by `epirkhs synth-fixture`; regenerate rather than edit.\n\n\
         * `{REGIONAL_FILE}`, `{NATIONAL_FILE}`: one region (Lombardia, population 1e7), {DAYS} days from 2020-03-01, \
         in the upstream column layout. The national file repeats the regional counts.\n\
         * `truth.csv`: planted contact rate, reproduction number and noiseless output.\n\n\
         Planted model: equilibrium start through y0 = {Y0}, a = {a1} before day {ts}, \
         a = {a2}·exp(-{c}·(t - {ts})) until day {te}, then a = {post}; b = {b}, H = {h}. \
         Gaussian noise with variance 3.5e-12 on y = I/H (seed {SEED}), floored at zero and rounded to counts.\n",
        a1 = p.lockdown.a1,
        a2 = p.lockdown.a2,
        c = p.lockdown.c,
        b = p.lockdown.b,
        h = p.lockdown.h,
        ts = p.t_star,
        te = p.t_end,
        post = p.post,
    );
    let path = dir.join("README.md");
    std::fs::write(&path, readme).map_err(|e| Failure::Run(epirkhs::Error::Io { path, source: e }))?;
    Ok(())
}
