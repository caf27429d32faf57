//! Contact-rate estimators: parametric least squares, the kernel-regularized
//! nonparametric fit with subspace refinement, evidence-based selection of
//! the Laplacian width, and the post-lockdown pipeline.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contact::{before, ContactRate, ContactRateFn, NonparTheta, ParametricTheta, Side};
use crate::data::ObservationSeries;
use crate::error::{Error, Result};
use crate::kernels::{gram_cholesky, uniform_nodes, Kernel, KernelExpansion};
use crate::optim::{levenberg_marquardt, nelder_mead, Linearization, LmOptions, NelderMeadOptions};
use crate::sir::{
    self, initial_state_jacobian, integrate, integrate_sensitivities, EpidemicState, Perturbation, RateTable,
    SirParams, TimeGrid, DEFAULT_SUBSTEP,
};

/// Centre of the multi-start box for parametric fits.
pub const NOMINAL: ParametricTheta = ParametricTheta { a1: 0.3, a2: 0.2, b: 0.08, c: 0.01, h: 1000.0 };

#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Random starts drawn log-uniformly over `[0.1, 10]×` the nominal values
    /// (the first start is the nominal point itself). Each start is also run
    /// once more with its rates replaced by values read off the data's
    /// log-slopes.
    pub starts: usize,
    pub seed: u64,
    /// Multipliers of the nominal `b` and `H` whose product grid seeds
    /// further informed starts.
    pub ladder: Vec<f64>,
    pub nelder_mead: NelderMeadOptions,
    pub lm: LmOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            starts: 8,
            seed: 0x5eed,
            ladder: vec![0.01, 0.1, 1.0, 10.0],
            nelder_mead: NelderMeadOptions { max_evals: 800, ftol_rel: 1e-10, xtol: 1e-7, initial_step: 0.3, ..Default::default() },
            lm: LmOptions { max_iters: 5000, ..LmOptions::default() },
        }
    }
}

/// How the state at the first observation is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitialCondition {
    /// Equilibrium manifold through the first observation, using the
    /// pre-lockdown rate.
    Equilibrium,
    Fixed { state: EpidemicState },
}

/// Contact rate constant on consecutive intervals split at `breaks`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRate {
    pub values: Vec<f64>,
    pub breaks: Vec<f64>,
}

impl StepRate {
    fn index(breaks: &[f64], t: f64, side: Side) -> usize {
        breaks.iter().filter(|&&bk| !before(t, bk, side)).count()
    }
}

impl ContactRate for StepRate {
    fn rate(&self, t: f64, side: Side) -> Result<f64> {
        Ok(self.values[Self::index(&self.breaks, t, side)])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FittedRate {
    Model { rate: ContactRateFn },
    Steps { rate: StepRate },
}

impl ContactRate for FittedRate {
    fn rate(&self, t: f64, side: Side) -> Result<f64> {
        match self {
            FittedRate::Model { rate } => rate.rate(t, side),
            FittedRate::Steps { rate } => rate.rate(t, side),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Theta {
    Parametric(ParametricTheta),
    Steps { rates: Vec<f64>, breaks: Vec<f64>, b: f64, h: f64 },
    Nonparametric(NonparTheta),
}

impl Theta {
    pub fn b(&self) -> f64 {
        match self {
            Theta::Parametric(p) => p.b,
            Theta::Steps { b, .. } => *b,
            Theta::Nonparametric(p) => p.b,
        }
    }

    pub fn h(&self) -> f64 {
        match self {
            Theta::Parametric(p) => p.h,
            Theta::Steps { h, .. } => *h,
            Theta::Nonparametric(p) => p.h,
        }
    }

    /// Contact rate in force at the first observation.
    pub fn initial_rate(&self) -> f64 {
        match self {
            Theta::Parametric(p) => p.a1,
            Theta::Steps { rates, .. } => rates[0],
            Theta::Nonparametric(p) => p.a_pre,
        }
    }
}

/// One stage of the subspace refinement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementStep {
    pub m: usize,
    pub objective: f64,
    /// Sup-norm change of `â` against the previous stage.
    pub change: Option<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta: Theta,
    pub expansion: Option<KernelExpansion>,
    pub t_star: f64,
    pub t_end: f64,
    pub init: EpidemicState,
    pub objective: f64,
    pub sigma2: f64,
    /// `y_observed - y_fitted`.
    pub residuals: Vec<f64>,
    pub fitted: Vec<f64>,
    pub refinement: Vec<RefinementStep>,
    /// False when a refinement schedule ran out before meeting its tolerance.
    pub converged: bool,
}

impl FitResult {
    pub fn params(&self) -> SirParams {
        SirParams { b: self.theta.b(), h: self.theta.h() }
    }

    pub fn contact(&self) -> FittedRate {
        match &self.theta {
            Theta::Parametric(p) => FittedRate::Model { rate: p.contact(self.t_star, self.t_end) },
            Theta::Steps { rates, breaks, .. } => {
                FittedRate::Steps { rate: StepRate { values: rates.clone(), breaks: breaks.clone() } }
            }
            Theta::Nonparametric(p) => FittedRate::Model {
                rate: ContactRateFn::Nonparametric {
                    a_pre: p.a_pre,
                    f: self.expansion.clone().expect("nonparametric fit carries its expansion"),
                    t_star: self.t_star,
                    t_end: self.t_end,
                }
                .clamp_nonnegative(),
            },
        }
    }

    /// Estimated contact rate on `times`, as integrated by the fitted model.
    pub fn rate_series(&self, times: &[f64]) -> Result<Vec<f64>> {
        let c = self.contact();
        times.iter().map(|&t| c.rate(t, Side::Right)).collect()
    }

    pub fn gamma_series(&self, times: &[f64]) -> Result<Vec<f64>> {
        Ok(sir::reproduction_number(&self.rate_series(times)?, self.theta.b()))
    }

    /// Re-simulates the fitted model on a daily grid of `days + 1` points.
    pub fn simulate(&self, days: usize) -> Result<sir::Trajectory> {
        sir::simulate(&self.contact(), &self.params(), self.init, &TimeGrid::daily(days + 1))
    }

    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            return Ok(self);
        }
        let last_change = self.refinement.last().and_then(|s| s.change).unwrap_or(f64::INFINITY);
        Err(Error::NotConverged { last_change })
    }
}

/// ML noise variance `Σ r² / n`.
pub fn ml_noise_variance(residuals: &[f64]) -> Result<f64> {
    if residuals.is_empty() {
        return Err(Error::EmptyResiduals);
    }
    Ok(residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64)
}

fn observations(data: &ObservationSeries) -> Result<&[f64]> {
    if data.is_empty() {
        return Err(Error::Precondition("observation series is empty".into()));
    }
    if data.y.iter().all(|&v| v == 0.0) {
        return Err(Error::NoSignal);
    }
    Ok(&data.y)
}

fn check_split(n: usize, t_star: f64) -> Result<()> {
    let pre = (0..n).filter(|&k| (k as f64) < t_star).count();
    if pre < 3 || n - pre < 3 {
        return Err(Error::Precondition(format!(
            "need at least 3 observations on each side of t_star = {t_star} ({pre} before, {} after)",
            n - pre
        )));
    }
    Ok(())
}

/// Least-squares slope of `ln y` over indices `lo..hi`, skipping zeros.
fn log_slope(y: &[f64], lo: usize, hi: usize) -> Option<f64> {
    let pts: Vec<(f64, f64)> = (lo..hi.min(y.len())).filter(|&k| y[k] > 0.0).map(|k| (k as f64, y[k].ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

fn first_index_at_or_after(t: f64) -> usize {
    t.max(0.0).ceil() as usize
}

// ---------------------------------------------------------------------------
// parametric problems

#[derive(Debug, Clone)]
enum Shape {
    /// `breaks.len() + 1` constant levels.
    Steps(Vec<f64>),
    /// `(a1, a2, c)` around `t_star`.
    ExpDecay { t_star: f64 },
}

impl Shape {
    fn n_rates(&self) -> usize {
        match self {
            Shape::Steps(b) => b.len() + 1,
            Shape::ExpDecay { .. } => 3,
        }
    }

    /// `z` holds log-parameters, rate block first.
    fn rate(&self, z: &[f64], t: f64, side: Side) -> f64 {
        match self {
            Shape::Steps(b) => z[StepRate::index(b, t, side)].exp(),
            Shape::ExpDecay { t_star } => {
                if before(t, *t_star, side) {
                    z[0].exp()
                } else {
                    z[1].exp() * (-z[2].exp() * (t - t_star)).exp()
                }
            }
        }
    }

    /// `∂a/∂z_j`.
    fn drate(&self, z: &[f64], j: usize, t: f64, side: Side) -> f64 {
        match self {
            Shape::Steps(b) => {
                if StepRate::index(b, t, side) == j {
                    z[j].exp()
                } else {
                    0.0
                }
            }
            Shape::ExpDecay { t_star } => {
                let pre = before(t, *t_star, side);
                let decay = || z[1].exp() * (-z[2].exp() * (t - t_star)).exp();
                match (j, pre) {
                    (0, true) => z[0].exp(),
                    (1, false) => decay(),
                    (2, false) => -z[2].exp() * (t - t_star) * decay(),
                    _ => 0.0,
                }
            }
        }
    }
}

struct ParamProblem<'a> {
    y: &'a [f64],
    shape: Shape,
    init: InitialCondition,
    template: RateTable,
    stages: Vec<[f64; 3]>,
}

impl<'a> ParamProblem<'a> {
    fn new(y: &'a [f64], shape: Shape, init: InitialCondition) -> Result<Self> {
        let grid = TimeGrid::daily(y.len());
        let template = RateTable::from_fn(&grid, DEFAULT_SUBSTEP, |_, _| Ok(0.0))?;
        let stages = template.stage_times();
        Ok(Self { y, shape, init, template, stages })
    }

    fn n_params(&self) -> usize {
        self.shape.n_rates() + 2
    }

    fn table(&self, f: impl Fn(f64, Side) -> f64) -> Vec<[f64; 3]> {
        self.stages.iter().map(|&[t0, tm, t1]| [f(t0, Side::Right), f(tm, Side::Right), f(t1, Side::Left)]).collect()
    }

    fn bh(&self, z: &[f64]) -> (f64, f64) {
        let k = self.shape.n_rates();
        (z[k].exp(), z[k + 1].exp())
    }

    fn state0(&self, z: &[f64]) -> Option<EpidemicState> {
        let (b, h) = self.bh(z);
        match self.init {
            InitialCondition::Equilibrium => sir::initial_state(self.y[0], &SirParams { b, h }, z[0].exp()).ok(),
            InitialCondition::Fixed { state } => Some(state),
        }
    }

    fn outputs(&self, z: &[f64]) -> Option<Vec<f64>> {
        if z.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let (b, h) = self.bh(z);
        let init = self.state0(z)?;
        let mut table = self.template.clone();
        table.values = self.table(|t, s| self.shape.rate(z, t, s));
        let states = integrate(&table, b, init).ok()?;
        Some(states.iter().map(|st| st.i / h).collect())
    }

    fn rss(&self, z: &[f64]) -> f64 {
        match self.outputs(z) {
            Some(out) => out.iter().zip(self.y).map(|(m, o)| (m - o).powi(2)).sum(),
            None => f64::INFINITY,
        }
    }

    fn linearize(&self, z: &[f64]) -> Option<Linearization> {
        if z.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let k = self.shape.n_rates();
        let (b, h) = self.bh(z);
        let init = self.state0(z)?;
        let mut table = self.template.clone();
        table.values = self.table(|t, s| self.shape.rate(z, t, s));
        let dtabs: Vec<Vec<[f64; 3]>> = (0..k).map(|j| self.table(|t, s| self.shape.drate(z, j, t, s))).collect();
        let jac0 = match self.init {
            InitialCondition::Equilibrium => initial_state_jacobian(self.y[0], b, h, z[0].exp()),
            InitialCondition::Fixed { .. } => [[0.0; 2]; 3],
        };
        let a0 = z[0].exp();
        let mut dirs: Vec<Perturbation<'_>> = dtabs
            .iter()
            .enumerate()
            .map(|(j, tab)| {
                let (ds0, di0) = if j == 0 { (jac0[0][0] * a0, jac0[0][1] * a0) } else { (0.0, 0.0) };
                Perturbation { rate: Some(tab.as_slice()), db: 0.0, ds0, di0 }
            })
            .collect();
        dirs.push(Perturbation { rate: None, db: b, ds0: jac0[1][0] * b, di0: jac0[1][1] * b });
        dirs.push(Perturbation { rate: None, db: 0.0, ds0: jac0[2][0] * h, di0: jac0[2][1] * h });
        let sens = integrate_sensitivities(&table, b, init, &dirs).ok()?;
        let n = self.y.len();
        let p = self.n_params();
        let mut r = DVector::zeros(n);
        let mut jac = DMatrix::zeros(n, p);
        for t in 0..n {
            let yk = sens.states[t].i / h;
            r[t] = yk - self.y[t];
            for q in 0..p {
                jac[(t, q)] = sens.di[q][t] / h;
            }
            jac[(t, p - 1)] -= yk;
        }
        Some(Linearization { residuals: r, jacobian: jac })
    }

    /// Rates implied by the log-slope of the data on each regime, given the
    /// start's `b`.
    fn informed(&self, natural: &[f64]) -> Vec<f64> {
        let mut v = natural.to_vec();
        let k = self.shape.n_rates();
        let b = v[k];
        let s0 = match self.init {
            InitialCondition::Equilibrium => 1.0,
            InitialCondition::Fixed { state } => state.s.max(1e-3),
        };
        let n = self.y.len();
        let level = |g: Option<f64>, fallback: f64| g.map(|g| ((b + g) / s0).max(0.05 * b)).unwrap_or(fallback);
        match &self.shape {
            Shape::Steps(breaks) => {
                let mut edges = vec![0usize];
                edges.extend(breaks.iter().map(|&t| first_index_at_or_after(t)));
                edges.push(n);
                for j in 0..k {
                    v[j] = level(log_slope(self.y, edges[j], edges[j + 1]), v[j]);
                }
            }
            Shape::ExpDecay { t_star } => {
                let split = first_index_at_or_after(*t_star);
                v[0] = level(log_slope(self.y, 0, split), v[0]);
                v[1] = level(log_slope(self.y, split, split + 10), v[1]);
            }
        }
        if matches!(self.init, InitialCondition::Equilibrium) && v[0] <= 1.01 * b {
            v[0] = 1.5 * b;
        }
        v
    }
}

fn log_uniform_starts(nominal: &[f64], count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count.max(1))
        .map(|s| {
            nominal
                .iter()
                .map(|&v| if s == 0 { v } else { v * 10f64.powf(rng.random_range(-1.0..=1.0)) })
                .collect()
        })
        .collect()
}

/// Iteration cap of the screening pass over all starts.
const SCREEN_ITERS: usize = 150;
/// Candidates given the full iteration budget.
const POLISHED: usize = 4;

struct Solved {
    z: Vec<f64>,
    cost: f64,
}

/// Nelder–Mead from every start and a short Levenberg–Marquardt run, then a
/// full-budget polish of the most promising candidates; the best by cost
/// wins (ties to the lower start index).
fn solve_multistart(problem: &ParamProblem<'_>, starts: &[Vec<f64>], opts: &FitOptions, use_simplex: bool) -> Result<Solved> {
    let screen = LmOptions { max_iters: opts.lm.max_iters.min(SCREEN_ITERS), ..opts.lm.clone() };
    let mut candidates: Vec<(usize, f64, Vec<f64>)> = starts
        .par_iter()
        .enumerate()
        .filter_map(|(i, natural)| {
            let z0: Vec<f64> = natural.iter().map(|v| v.ln()).collect();
            let z1 = if use_simplex {
                let nm = nelder_mead(|z| problem.rss(z), &z0, &opts.nelder_mead);
                if !nm.f.is_finite() {
                    return None;
                }
                nm.x
            } else {
                z0
            };
            let lm = levenberg_marquardt(|z, _| problem.linearize(z), &z1, &screen)?;
            lm.cost.is_finite().then_some((i, lm.cost, lm.x))
        })
        .collect();
    if candidates.is_empty() {
        return Err(Error::OptimizerStalled(format!("none of {} starts reached a finite cost", starts.len())));
    }
    candidates.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    candidates.truncate(POLISHED);
    let polished: Vec<(usize, f64, Vec<f64>)> = candidates
        .into_par_iter()
        .map(|(i, cost, z)| match levenberg_marquardt(|z, _| problem.linearize(z), &z, &opts.lm) {
            Some(lm) if lm.cost <= cost => (i, lm.cost, lm.x),
            _ => (i, cost, z),
        })
        .collect();
    let (_, cost, z) = polished
        .into_iter()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .expect("at least one candidate");
    Ok(Solved { z, cost })
}

/// Random starts, their data-informed counterparts, and informed starts on a
/// `(b, H)` ladder spanning `[0.01, 10]×` the nominal values.
fn parametric_starts(problem: &ParamProblem<'_>, nominal: &[f64], opts: &FitOptions) -> Vec<Vec<f64>> {
    let raw = log_uniform_starts(nominal, opts.starts, opts.seed);
    let informed: Vec<Vec<f64>> = raw.iter().map(|v| problem.informed(v)).collect();
    let k = problem.shape.n_rates();
    let mut ladder = Vec::new();
    for b_mult in opts.ladder.iter() {
        for h_mult in opts.ladder.iter() {
            let mut v = nominal.to_vec();
            v[k] *= b_mult;
            v[k + 1] *= h_mult;
            ladder.push(problem.informed(&v));
        }
    }
    raw.into_iter().chain(informed).chain(ladder).collect()
}

fn finish_parametric(problem: &ParamProblem<'_>, solved: &Solved, theta: Theta, t_star: f64, t_end: f64) -> Result<FitResult> {
    let fitted = problem
        .outputs(&solved.z)
        .ok_or_else(|| Error::OptimizerStalled("optimum cannot be re-simulated".into()))?;
    let residuals: Vec<f64> = problem.y.iter().zip(&fitted).map(|(o, m)| o - m).collect();
    let sigma2 = ml_noise_variance(&residuals)?;
    Ok(FitResult {
        theta,
        expansion: None,
        t_star,
        t_end,
        init: problem.state0(&solved.z).expect("state of a solved problem"),
        objective: solved.cost,
        sigma2,
        residuals,
        fitted,
        refinement: Vec::new(),
        converged: true,
    })
}

fn data_end(data: &ObservationSeries) -> f64 {
    data.len().saturating_sub(1) as f64
}

/// Two-level contact rate with switch at `t_star` (`c` frozen at zero).
pub fn fit_piecewise(data: &ObservationSeries, t_star: f64) -> Result<FitResult> {
    fit_piecewise_with(data, t_star, &FitOptions::default())
}

pub fn fit_piecewise_with(data: &ObservationSeries, t_star: f64, opts: &FitOptions) -> Result<FitResult> {
    let y = observations(data)?;
    check_split(y.len(), t_star)?;
    let problem = ParamProblem::new(y, Shape::Steps(vec![t_star]), InitialCondition::Equilibrium)?;
    let nominal = [NOMINAL.a1, NOMINAL.a2, NOMINAL.b, NOMINAL.h];
    let solved = solve_multistart(&problem, &parametric_starts(&problem, &nominal, opts), opts, true)?;
    let v: Vec<f64> = solved.z.iter().map(|z| z.exp()).collect();
    let theta = Theta::Parametric(ParametricTheta { a1: v[0], a2: v[1], b: v[2], c: 0.0, h: v[3] });
    finish_parametric(&problem, &solved, theta, t_star, data_end(data))
}

/// Full exponential-decay class over `(a1, a2, b, c, H)`.
pub fn fit_exp_decay(data: &ObservationSeries, t_star: f64, t_end: f64) -> Result<FitResult> {
    fit_exp_decay_with(data, t_star, t_end, &FitOptions::default())
}

pub fn fit_exp_decay_with(data: &ObservationSeries, t_star: f64, t_end: f64, opts: &FitOptions) -> Result<FitResult> {
    if !(t_end > t_star) {
        return Err(Error::Precondition(format!("t_end ({t_end}) must exceed t_star ({t_star})")));
    }
    let y = observations(data)?;
    check_split(y.len(), t_star)?;
    if data_end(data) > t_end {
        return Err(Error::Precondition(format!(
            "observations run to day {} but the lockdown ends at {t_end}",
            data_end(data)
        )));
    }
    let problem = ParamProblem::new(y, Shape::ExpDecay { t_star }, InitialCondition::Equilibrium)?;
    let nominal = [NOMINAL.a1, NOMINAL.a2, NOMINAL.c, NOMINAL.b, NOMINAL.h];
    let solved = solve_multistart(&problem, &parametric_starts(&problem, &nominal, opts), opts, true)?;
    let v: Vec<f64> = solved.z.iter().map(|z| z.exp()).collect();
    let theta = Theta::Parametric(ParametricTheta { a1: v[0], a2: v[1], b: v[3], c: v[2], h: v[4] });
    finish_parametric(&problem, &solved, theta, t_star, t_end)
}

/// Constant contact rate from a given state; `start` supplies `(b, H)` and
/// the centre of the multi-start box.
pub fn fit_constant_from(data: &ObservationSeries, state: EpidemicState, start: SirParams, opts: &FitOptions) -> Result<FitResult> {
    let y = observations(data)?;
    let problem = ParamProblem::new(y, Shape::Steps(Vec::new()), InitialCondition::Fixed { state })?;
    let a_guess = problem.informed(&[start.b, start.b, start.h])[0];
    let solved = solve_multistart(&problem, &parametric_starts(&problem, &[a_guess, start.b, start.h], opts), opts, true)?;
    let v: Vec<f64> = solved.z.iter().map(|z| z.exp()).collect();
    let theta = Theta::Steps { rates: vec![v[0]], breaks: Vec::new(), b: v[1], h: v[2] };
    finish_parametric(&problem, &solved, theta, 0.0, data_end(data))
}

/// Breakpoint layout for [`fit_piecewise_k`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Breakpoints {
    /// `count` equal intervals covering `[0, end]`.
    Uniform { count: usize, end: f64 },
    /// Explicit breakpoints.
    Fixed { breaks: Vec<f64> },
    /// Two levels; the switch is chosen among observation days leaving at
    /// least three points on each side.
    FreeSwitch,
}

/// Contact rate constant on each interval. Uniform and fixed layouts use the
/// full multi-start; the free switch scans every admissible day with a
/// Levenberg–Marquardt polish from the best global fit, then re-solves at the
/// winning day with the full multi-start.
pub fn fit_piecewise_k(data: &ObservationSeries, breakpoints: &Breakpoints) -> Result<FitResult> {
    fit_piecewise_k_with(data, breakpoints, &FitOptions::default())
}

pub fn fit_piecewise_k_with(data: &ObservationSeries, breakpoints: &Breakpoints, opts: &FitOptions) -> Result<FitResult> {
    let y = observations(data)?;
    let n = y.len();
    let breaks = match breakpoints {
        Breakpoints::Uniform { count, end } => {
            if *count == 0 || !(*end > 0.0) {
                return Err(Error::Precondition(format!("uniform layout needs count >= 1 and end > 0, got {count}, {end}")));
            }
            (1..*count).map(|j| j as f64 * end / *count as f64).collect()
        }
        Breakpoints::Fixed { breaks } => breaks.clone(),
        Breakpoints::FreeSwitch => {
            if n < 6 {
                return Err(Error::Precondition(format!("free switch needs at least 6 observations, got {n}")));
            }
            let best = scan_switch(y, opts)?;
            vec![best]
        }
    };
    if breaks.windows(2).any(|w| !(w[1] > w[0])) || breaks.iter().any(|&b| !(b > 0.0 && b < data_end(data) + 1.0)) {
        return Err(Error::Precondition(format!("breakpoints must be increasing and inside the data span: {breaks:?}")));
    }
    fit_steps(y, breaks, opts, data_end(data))
}

fn step_nominal(k: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..k).map(|j| if j == 0 { NOMINAL.a1 } else { NOMINAL.a2 }).collect();
    v.extend([NOMINAL.b, NOMINAL.h]);
    v
}

fn fit_steps(y: &[f64], breaks: Vec<f64>, opts: &FitOptions, t_end: f64) -> Result<FitResult> {
    let k = breaks.len() + 1;
    let problem = ParamProblem::new(y, Shape::Steps(breaks.clone()), InitialCondition::Equilibrium)?;
    let solved = solve_multistart(&problem, &parametric_starts(&problem, &step_nominal(k), opts), opts, true)?;
    let v: Vec<f64> = solved.z.iter().map(|z| z.exp()).collect();
    let theta = Theta::Steps { rates: v[..k].to_vec(), breaks: breaks.clone(), b: v[k], h: v[k + 1] };
    let t_star = breaks.first().copied().unwrap_or(0.0);
    finish_parametric(&problem, &solved, theta, t_star, t_end)
}

fn scan_switch(y: &[f64], opts: &FitOptions) -> Result<f64> {
    let n = y.len();
    let candidates: Vec<f64> = (3..=n - 3).map(|d| d as f64).collect();
    let mid = candidates[candidates.len() / 2];
    let anchor = fit_steps(y, vec![mid], opts, (n - 1) as f64)?;
    let Theta::Steps { rates, b, h, .. } = &anchor.theta else { unreachable!() };
    let anchor_start = vec![rates[0], rates[1], *b, *h];
    let scores: Vec<Option<f64>> = candidates
        .par_iter()
        .map(|&d| {
            let problem = ParamProblem::new(y, Shape::Steps(vec![d]), InitialCondition::Equilibrium).ok()?;
            let starts = vec![anchor_start.clone(), problem.informed(&anchor_start)];
            solve_multistart(&problem, &starts, opts, false).ok().map(|s| s.cost)
        })
        .collect();
    candidates
        .iter()
        .zip(&scores)
        .filter_map(|(&d, s)| s.map(|s| (d, s)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)))
        .map(|(d, _)| d)
        .ok_or_else(|| Error::OptimizerStalled("no admissible switching day could be fitted".into()))
}

// ---------------------------------------------------------------------------
// nonparametric problems

/// Node counts tried in turn, stopping once `â` moves less than `tol`
/// (sup-norm over a 0.1-day probe grid) between consecutive counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementSchedule {
    pub m_values: Vec<usize>,
    pub tol: f64,
}

impl Default for RefinementSchedule {
    /// Counts of the form `2^k + 1` so that each uniform node grid contains
    /// the previous one.
    fn default() -> Self {
        Self { m_values: vec![9, 17, 33, 65], tol: 1e-3 }
    }
}

impl RefinementSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.m_values.is_empty() || self.m_values.windows(2).any(|w| w[1] <= w[0]) || self.m_values[0] == 0 {
            return Err(Error::Precondition(format!("node counts must be positive and increasing: {:?}", self.m_values)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Precondition(format!("refinement tolerance must be positive, got {}", self.tol)));
        }
        Ok(())
    }
}

/// Everything the nonparametric fit needs besides data and kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonparSetup {
    pub t_star: f64,
    pub t_end: f64,
    /// Frozen noise variance.
    pub sigma2: f64,
    /// Starting `(a_pre, b, H)`; `a_pre` is ignored when `t_star == 0`.
    pub start: NonparTheta,
    /// Rate the first subspace is initialised to by interpolation at the
    /// nodes; zero coefficients when absent.
    pub guess: Option<ContactRateFn>,
    pub init: InitialCondition,
    pub schedule: RefinementSchedule,
    /// Multiplier on `cᵀK̄c`.
    pub penalty_weight: f64,
    /// Optimise `θ` jointly with `c`; when false `θ` stays at `start`.
    pub fit_theta: bool,
    pub lm: LmOptions,
}

impl NonparSetup {
    /// Lockdown-period setup seeded by a parametric fit.
    pub fn from_parametric(fit: &FitResult) -> Self {
        Self {
            t_star: fit.t_star,
            t_end: fit.t_end,
            sigma2: fit.sigma2,
            start: NonparTheta { a_pre: fit.theta.initial_rate(), b: fit.theta.b(), h: fit.theta.h() },
            guess: match fit.contact() {
                FittedRate::Model { rate } => Some(rate),
                FittedRate::Steps { .. } => None,
            },
            init: InitialCondition::Equilibrium,
            schedule: RefinementSchedule::default(),
            penalty_weight: 1.0,
            fit_theta: true,
            lm: LmOptions { max_iters: 300, ..Default::default() },
        }
    }
}

/// Regularized model on a fixed node grid. Parameters are packed as
/// `[ln a_pre (only when t_star > 0), ln b, ln H, c_1..c_M]`.
pub struct NonparModel {
    y: Vec<f64>,
    kernel: Kernel,
    nodes: Vec<f64>,
    t_star: f64,
    t_end: f64,
    init: InitialCondition,
    has_pre: bool,
    template: RateTable,
    pre: Vec<[f64; 3]>,
    sections: Vec<Vec<[f64; 3]>>,
    gram: DMatrix<f64>,
    chol_l: DMatrix<f64>,
    log_det_gram: f64,
    penalty_weight: f64,
}

impl NonparModel {
    /// `grid_len` daily instants are simulated (at least one per observation).
    pub fn new(
        y: &[f64],
        kernel: Kernel,
        nodes: Vec<f64>,
        t_star: f64,
        t_end: f64,
        init: InitialCondition,
        grid_len: usize,
    ) -> Result<Self> {
        kernel.validate()?;
        let grid_len = grid_len.max(y.len());
        if y.is_empty() || nodes.is_empty() {
            return Err(Error::Precondition("nonparametric model needs observations and nodes".into()));
        }
        if (grid_len - 1) as f64 > t_end + 1e-9 {
            return Err(Error::Precondition(format!("simulation horizon {} exceeds t_end = {t_end}", grid_len - 1)));
        }
        let has_pre = t_star > 0.0;
        if matches!(init, InitialCondition::Equilibrium) && !has_pre {
            return Err(Error::Precondition("equilibrium start needs a pre-lockdown segment".into()));
        }
        let grid = TimeGrid::daily(grid_len);
        let template = RateTable::from_fn(&grid, DEFAULT_SUBSTEP, |_, _| Ok(0.0))?;
        let stages = template.stage_times();
        let sample = |f: &dyn Fn(f64, Side) -> f64| -> Vec<[f64; 3]> {
            stages.iter().map(|&[t0, tm, t1]| [f(t0, Side::Right), f(tm, Side::Right), f(t1, Side::Left)]).collect()
        };
        let pre = sample(&|t, s| if before(t, t_star, s) { 1.0 } else { 0.0 });
        let sections = nodes
            .iter()
            .map(|&nd| sample(&|t, s| if before(t, t_star, s) { 0.0 } else { kernel.eval(nd, t - t_star) }))
            .collect();
        let gram = kernel.gram(&nodes);
        let chol = gram_cholesky(&gram)?;
        let chol_l = chol.l();
        let log_det_gram = 2.0 * chol_l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Self {
            y: y.to_vec(),
            kernel,
            nodes,
            t_star,
            t_end,
            init,
            has_pre,
            template,
            pre,
            sections,
            gram,
            chol_l,
            log_det_gram,
            penalty_weight: 1.0,
        })
    }

    pub fn with_penalty_weight(mut self, w: f64) -> Self {
        self.penalty_weight = w;
        self
    }

    pub fn n_theta(&self) -> usize {
        2 + self.has_pre as usize
    }

    pub fn n_params(&self) -> usize {
        self.n_theta() + self.nodes.len()
    }

    pub fn has_pre(&self) -> bool {
        self.has_pre
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn pack(&self, theta: &NonparTheta, coeffs: &[f64]) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.n_params());
        if self.has_pre {
            z.push(theta.a_pre.ln());
        }
        z.extend([theta.b.ln(), theta.h.ln()]);
        z.extend_from_slice(coeffs);
        z
    }

    /// `(a_pre, b, H)` with `a_pre = fallback` when there is no pre segment.
    pub fn unpack_theta(&self, z: &[f64], fallback_pre: f64) -> NonparTheta {
        let o = self.has_pre as usize;
        NonparTheta { a_pre: if self.has_pre { z[0].exp() } else { fallback_pre }, b: z[o].exp(), h: z[o + 1].exp() }
    }

    pub fn coeffs<'z>(&self, z: &'z [f64]) -> &'z [f64] {
        &z[self.n_theta()..]
    }

    pub fn expansion(&self, z: &[f64]) -> Result<KernelExpansion> {
        KernelExpansion::new(self.kernel, self.nodes.clone(), self.coeffs(z).to_vec())
    }

    fn raw_rates(&self, z: &[f64]) -> Vec<[f64; 3]> {
        let a_pre = if self.has_pre { z[0].exp() } else { 0.0 };
        let c = self.coeffs(z);
        let mut out: Vec<[f64; 3]> = self.pre.iter().map(|p| [p[0] * a_pre, p[1] * a_pre, p[2] * a_pre]).collect();
        for (cj, sec) in c.iter().zip(&self.sections) {
            if *cj == 0.0 {
                continue;
            }
            for (o, s) in out.iter_mut().zip(sec) {
                o[0] += cj * s[0];
                o[1] += cj * s[1];
                o[2] += cj * s[2];
            }
        }
        out
    }

    /// Stage rates fed to the integrator, clamped at zero.
    fn rates(&self, z: &[f64]) -> Vec<[f64; 3]> {
        self.raw_rates(z).into_iter().map(|r| r.map(|v| v.max(0.0))).collect()
    }

    fn state0(&self, z: &[f64]) -> Result<EpidemicState> {
        let th = self.unpack_theta(z, 0.0);
        match self.init {
            InitialCondition::Equilibrium => sir::initial_state(self.y[0], &SirParams { b: th.b, h: th.h }, th.a_pre),
            InitialCondition::Fixed { state } => Ok(state),
        }
    }

    /// States on the simulation grid.
    pub fn trajectory(&self, z: &[f64]) -> Result<Vec<EpidemicState>> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Precondition("non-finite parameters".into()));
        }
        let th = self.unpack_theta(z, 0.0);
        let mut table = self.template.clone();
        table.values = self.rates(z);
        integrate(&table, th.b, self.state0(z)?)
    }

    pub fn outputs(&self, z: &[f64]) -> Result<Vec<f64>> {
        let h = self.unpack_theta(z, 0.0).h;
        Ok(self.trajectory(z)?.iter().take(self.y.len()).map(|st| st.i / h).collect())
    }

    pub fn rss(&self, z: &[f64]) -> Result<f64> {
        Ok(self.outputs(z)?.iter().zip(&self.y).map(|(m, o)| (m - o).powi(2)).sum())
    }

    /// `cᵀK̄c`.
    pub fn penalty(&self, coeffs: &[f64]) -> f64 {
        let c = DVector::from_column_slice(coeffs);
        c.dot(&(&self.gram * &c))
    }

    /// `RSS/σ² + w·cᵀK̄c`.
    pub fn objective(&self, z: &[f64], sigma2: f64) -> Result<f64> {
        Ok(self.rss(z)? / sigma2 + self.penalty_weight * self.penalty(self.coeffs(z)))
    }

    /// Stacked residuals `[(ŷ - y)/σ; √w·Lᵀc]` and their Jacobian, whose
    /// squared norm is the objective.
    pub fn linearize(&self, z: &[f64], sigma2: f64) -> Result<Linearization> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Precondition("non-finite parameters".into()));
        }
        let th = self.unpack_theta(z, 0.0);
        let (b, h) = (th.b, th.h);
        let init = self.state0(z)?;
        let raw = self.raw_rates(z);
        let mut table = self.template.clone();
        table.values = raw.iter().map(|r| r.map(|v| v.max(0.0))).collect();
        // stages held at zero by the clamp do not respond to any parameter
        let clamped = raw.iter().any(|r| r.iter().any(|v| *v < 0.0));
        let mask = |tab: &[[f64; 3]]| -> Vec<[f64; 3]> {
            tab.iter()
                .zip(&raw)
                .map(|(d, r)| [0, 1, 2].map(|k| if r[k] < 0.0 { 0.0 } else { d[k] }))
                .collect()
        };
        let masked_sections: Vec<Vec<[f64; 3]>> =
            if clamped { self.sections.iter().map(|sec| mask(sec)).collect() } else { Vec::new() };
        let sections = if clamped { &masked_sections } else { &self.sections };
        // ∂a/∂ln a_pre on the rate stages
        let pre_scaled: Vec<[f64; 3]> =
            mask(&self.pre.iter().map(|p| [p[0] * th.a_pre, p[1] * th.a_pre, p[2] * th.a_pre]).collect::<Vec<_>>());
        let mut dirs: Vec<Perturbation<'_>> = Vec::with_capacity(self.n_params());
        match self.init {
            InitialCondition::Equilibrium => {
                let jac0 = initial_state_jacobian(self.y[0], b, h, th.a_pre);
                let a = th.a_pre;
                dirs.push(Perturbation { rate: Some(&pre_scaled), db: 0.0, ds0: jac0[0][0] * a, di0: jac0[0][1] * a });
                dirs.push(Perturbation { rate: None, db: b, ds0: jac0[1][0] * b, di0: jac0[1][1] * b });
                dirs.push(Perturbation { rate: None, db: 0.0, ds0: jac0[2][0] * h, di0: jac0[2][1] * h });
            }
            InitialCondition::Fixed { .. } => {
                if self.has_pre {
                    dirs.push(Perturbation { rate: Some(&pre_scaled), ..Default::default() });
                }
                dirs.push(Perturbation { rate: None, db: b, ..Default::default() });
                dirs.push(Perturbation::default());
            }
        }
        for sec in sections {
            dirs.push(Perturbation { rate: Some(sec), ..Default::default() });
        }
        let sens = integrate_sensitivities(&table, b, init, &dirs)?;
        let n = self.y.len();
        let m = self.nodes.len();
        let nt = self.n_theta();
        let p = self.n_params();
        let sigma = sigma2.sqrt();
        let w = self.penalty_weight.sqrt();
        let mut r = DVector::zeros(n + m);
        let mut jac = DMatrix::zeros(n + m, p);
        let ih = nt - 1;
        for t in 0..n {
            let yk = sens.states[t].i / h;
            r[t] = (yk - self.y[t]) / sigma;
            for q in 0..p {
                jac[(t, q)] = sens.di[q][t] / h / sigma;
            }
            jac[(t, ih)] -= yk / sigma;
        }
        let c = DVector::from_column_slice(self.coeffs(z));
        let lt = self.chol_l.transpose();
        let pen = &lt * &c * w;
        for j in 0..m {
            r[n + j] = pen[j];
            for q in 0..m {
                jac[(n + j, nt + q)] = w * lt[(j, q)];
            }
        }
        Ok(Linearization { residuals: r, jacobian: jac })
    }

    /// [`Self::linearize`] restricted to the coefficient columns unless
    /// `fit_theta`.
    pub fn linearize_free(&self, z: &[f64], sigma2: f64, fit_theta: bool) -> Result<Linearization> {
        let lin = self.linearize(z, sigma2)?;
        if fit_theta {
            return Ok(lin);
        }
        let nt = self.n_theta();
        let cols = lin.jacobian.columns(nt, self.nodes.len()).into_owned();
        Ok(Linearization { residuals: lin.residuals, jacobian: cols })
    }

    /// Gradient of [`Self::objective`] with respect to the coefficients.
    pub fn coeff_gradient(&self, z: &[f64], sigma2: f64) -> Result<Vec<f64>> {
        let lin = self.linearize(z, sigma2)?;
        let g = lin.jacobian.transpose() * &lin.residuals * 2.0;
        Ok(g.as_slice()[self.n_theta()..].to_vec())
    }

    /// Laplace approximation of the log marginal likelihood at a mode `z`,
    /// with the Gauss–Newton Hessian of the negative log posterior.
    /// When `fit_theta` is false `θ` is treated as fixed and only the
    /// coefficients are integrated out.
    pub fn log_evidence(&self, z: &[f64], sigma2: f64, fit_theta: bool) -> Result<f64> {
        let lin = self.linearize_free(z, sigma2, fit_theta)?;
        let hess = lin.jacobian.transpose() * &lin.jacobian;
        let chol = hess.cholesky().ok_or(Error::SingularHessian)?;
        let log_det_h = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        if !log_det_h.is_finite() {
            return Err(Error::SingularHessian);
        }
        let n = self.y.len() as f64;
        let m = self.nodes.len() as f64;
        let d = lin.jacobian.ncols() as f64;
        let half_obj = 0.5 * lin.residuals.norm_squared();
        let log_det_prior = m * self.penalty_weight.ln() + self.log_det_gram;
        Ok(-half_obj - 0.5 * n * (2.0 * PI * sigma2).ln() + 0.5 * log_det_prior - 0.5 * m * (2.0 * PI).ln()
            + 0.5 * d * (2.0 * PI).ln()
            - 0.5 * log_det_h)
    }

    pub fn t_star(&self) -> f64 {
        self.t_star
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }
}

fn probe_rates(expansion: &KernelExpansion, t_star: f64, t_end: f64) -> Vec<f64> {
    let steps = ((t_end - t_star) * 10.0).round().max(1.0) as usize;
    (0..=steps).map(|k| expansion.eval(k as f64 * (t_end - t_star) / steps as f64)).collect()
}

fn sup_change(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Coefficients whose expansion interpolates `g` at the nodes (ridge-loaded
/// for conditioning).
fn interpolate(kernel: &Kernel, nodes: &[f64], g: &[f64]) -> Result<Vec<f64>> {
    let mut gram = kernel.gram(nodes);
    let load = 1e-6 * gram.trace() / nodes.len() as f64;
    for i in 0..nodes.len() {
        gram[(i, i)] += load;
    }
    let chol = gram_cholesky(&gram)?;
    Ok(chol.solve(&DVector::from_column_slice(g)).as_slice().to_vec())
}

struct NonparSolution {
    fit: FitResult,
    z: Vec<f64>,
    nodes: Vec<f64>,
}

fn fit_nonparametric_inner(data: &ObservationSeries, kernel: &Kernel, setup: &NonparSetup) -> Result<NonparSolution> {
    let y = observations(data)?;
    setup.schedule.validate()?;
    if !(setup.sigma2 > 0.0) {
        return Err(Error::Precondition(format!("noise variance must be positive, got {}", setup.sigma2)));
    }
    if !(setup.t_end > setup.t_star) {
        return Err(Error::Precondition(format!("t_end ({}) must exceed t_star ({})", setup.t_end, setup.t_star)));
    }
    if setup.t_star > 0.0 {
        check_split(y.len(), setup.t_star)?;
    }
    setup.start.validate()?;
    let span = setup.t_end - setup.t_star;
    let n = y.len();

    let mut prev: Option<(Vec<f64>, Vec<f64>, Vec<f64>)> = None; // (nodes, z, probe)
    let mut log = Vec::new();
    let mut converged = false;
    for &m in &setup.schedule.m_values {
        let nodes = uniform_nodes(span, m)?;
        let model = NonparModel::new(y, *kernel, nodes.clone(), setup.t_star, setup.t_end, setup.init, n)?
            .with_penalty_weight(setup.penalty_weight);
        let z0 = match &prev {
            None => {
                let g: Vec<f64> = match &setup.guess {
                    Some(rate) => nodes.iter().map(|&nd| rate.rate_at(setup.t_star + nd).unwrap_or(0.0)).collect(),
                    None => vec![0.0; m],
                };
                let c = if g.iter().all(|&v| v == 0.0) { g } else { interpolate(kernel, &nodes, &g)? };
                model.pack(&setup.start, &c)
            }
            Some((pn, pz, _)) => {
                let nt = model.n_theta();
                let mut z = pz[..nt].to_vec();
                let ratio = (m - 1) / (pn.len() - 1).max(1);
                let nested = pn.len() > 1 && (m - 1) % (pn.len() - 1) == 0;
                if nested {
                    let mut c = vec![0.0; m];
                    for (j, cj) in pz[nt..].iter().enumerate() {
                        c[j * ratio] = *cj;
                    }
                    z.extend(c);
                } else {
                    let prev_exp = KernelExpansion::new(*kernel, pn.clone(), pz[nt..].to_vec())?;
                    let g: Vec<f64> = nodes.iter().map(|&nd| prev_exp.eval(nd)).collect();
                    z.extend(interpolate(kernel, &nodes, &g)?);
                }
                z
            }
        };
        let nt = model.n_theta();
        let lm = if setup.fit_theta {
            levenberg_marquardt(|z, _| model.linearize(z, setup.sigma2).ok(), &z0, &setup.lm)
        } else {
            let full = |c: &[f64]| z0[..nt].iter().chain(c).copied().collect::<Vec<f64>>();
            levenberg_marquardt(|c, _| model.linearize_free(&full(c), setup.sigma2, false).ok(), &z0[nt..], &setup.lm)
                .map(|mut r| {
                    r.x = full(&r.x);
                    r
                })
        }
        .ok_or_else(|| Error::OptimizerStalled(format!("nonparametric start is infeasible at M = {m}")))?;
        let expansion = model.expansion(&lm.x)?;
        let probe = probe_rates(&expansion, setup.t_star, setup.t_end);
        let change = prev.as_ref().map(|(_, _, p)| sup_change(p, &probe));
        log.push(RefinementStep { m, objective: lm.cost, change, iterations: lm.iters });
        prev = Some((nodes, lm.x, probe));
        if change.is_some_and(|c| c < setup.schedule.tol) {
            converged = true;
            break;
        }
    }
    let (nodes, z, _) = prev.expect("schedule is nonempty");
    let model = NonparModel::new(y, *kernel, nodes.clone(), setup.t_star, setup.t_end, setup.init, n)?
        .with_penalty_weight(setup.penalty_weight);
    let fitted = model.outputs(&z)?;
    let residuals: Vec<f64> = y.iter().zip(&fitted).map(|(o, m)| o - m).collect();
    let theta = model.unpack_theta(&z, setup.start.a_pre);
    let fit = FitResult {
        theta: Theta::Nonparametric(theta),
        expansion: Some(model.expansion(&z)?),
        t_star: setup.t_star,
        t_end: setup.t_end,
        init: model.state0(&z)?,
        objective: model.objective(&z, setup.sigma2)?,
        sigma2: setup.sigma2,
        residuals,
        fitted,
        refinement: log,
        converged,
    };
    Ok(NonparSolution { fit, z, nodes })
}

/// Kernel-regularized fit over `(c, a_pre, b, H)` along the refinement
/// schedule. A schedule that runs out without meeting its tolerance still
/// returns the last fit, with `converged` false.
pub fn fit_nonparametric(data: &ObservationSeries, kernel: &Kernel, setup: &NonparSetup) -> Result<FitResult> {
    Ok(fit_nonparametric_inner(data, kernel, setup)?.fit)
}

/// Bounds applied to the plug-in decay rate so that a fitted `ĉ` of zero (or
/// above one half) still yields a valid stable-spline kernel.
pub const PLUG_IN_ALPHA_RANGE: (f64, f64) = (1e-3, 0.999);

/// Stable-spline hyperparameters from a parametric exponential-decay fit:
/// `λ = â2²`, `α = 2ĉ` clamped to [`PLUG_IN_ALPHA_RANGE`].
pub fn plug_in_stable_spline(theta: &ParametricTheta) -> Result<Kernel> {
    let (lo, hi) = PLUG_IN_ALPHA_RANGE;
    Kernel::stable_spline(theta.a2 * theta.a2, (2.0 * theta.c).clamp(lo, hi))
}

/// `n` log-spaced values over `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![lo];
    }
    (0..n).map(|k| (lo.ln() + (hi.ln() - lo.ln()) * k as f64 / (n - 1) as f64).exp()).collect()
}

pub fn default_eta_grid() -> Vec<f64> {
    log_grid(1.0, 60.0, 15)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaCandidate {
    pub eta: f64,
    pub log_evidence: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaSelection {
    pub eta: f64,
    pub candidates: Vec<EtaCandidate>,
    pub fit: FitResult,
}

/// Laplacian width maximising the Laplace-approximated evidence; candidates
/// within `1e-12` of each other resolve to the smaller width.
pub fn select_eta_evidence(data: &ObservationSeries, lambda: f64, eta_grid: &[f64], setup: &NonparSetup) -> Result<EtaSelection> {
    if eta_grid.is_empty() {
        return Err(Error::Precondition("eta grid is empty".into()));
    }
    if !(lambda > 0.0) {
        return Err(Error::Precondition(format!("lambda must be positive, got {lambda}")));
    }
    let y = observations(data)?;
    let mut grid = eta_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let results: Vec<(EtaCandidate, Option<FitResult>)> = grid
        .par_iter()
        .map(|&eta| {
            let attempt = || -> Result<(f64, FitResult)> {
                let kernel = Kernel::laplacian(lambda, eta)?;
                let sol = fit_nonparametric_inner(data, &kernel, setup)?;
                let model = NonparModel::new(y, kernel, sol.nodes.clone(), setup.t_star, setup.t_end, setup.init, y.len())?
                    .with_penalty_weight(setup.penalty_weight);
                Ok((model.log_evidence(&sol.z, setup.sigma2, setup.fit_theta)?, sol.fit))
            };
            match attempt() {
                Ok((ev, fit)) => (EtaCandidate { eta, log_evidence: Some(ev), failure: None }, Some(fit)),
                Err(e) => (EtaCandidate { eta, log_evidence: None, failure: Some(e.to_string()) }, None),
            }
        })
        .collect();
    let candidates: Vec<EtaCandidate> = results.iter().map(|r| r.0.clone()).collect();
    let Some(idx) = pick_eta(&candidates) else {
        return Err(Error::SingularHessian);
    };
    let fit = results.into_iter().nth(idx).and_then(|r| r.1).expect("selected candidate has a fit");
    Ok(EtaSelection { eta: grid[idx], candidates, fit })
}

/// Index of the winning candidate: highest evidence, where a candidate must
/// beat every smaller width by more than `1e-12` to be preferred. Failed
/// candidates are skipped.
pub fn pick_eta(candidates: &[EtaCandidate]) -> Option<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[a].eta.total_cmp(&candidates[b].eta));
    let mut best: Option<(usize, f64)> = None;
    for i in order {
        if let Some(ev) = candidates[i].log_evidence {
            if best.is_none_or(|(_, b)| ev > b + 1e-12) {
                best = Some((i, ev));
            }
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostLockdownFit {
    pub constant: FitResult,
    pub lambda: f64,
    pub selection: EtaSelection,
}

impl PostLockdownFit {
    pub fn fit(&self) -> &FitResult {
        &self.selection.fit
    }
}

/// Post-lockdown pipeline from the state at the end of the lockdown fit:
/// constant-rate fit (giving `ā` and a recalibrated `σ̂²`), `λ = ā²`, width by
/// evidence, then the Laplacian-kernel fit. `b` and `H` are re-estimated by
/// the constant-rate fit, starting from `inherited`.
pub fn post_lockdown_fit(
    data_post: &ObservationSeries,
    init: EpidemicState,
    inherited: SirParams,
    eta_grid: &[f64],
    schedule: &RefinementSchedule,
) -> Result<PostLockdownFit> {
    if data_post.is_empty() {
        return Err(Error::Precondition("post-lockdown series is empty".into()));
    }
    init.validate()?;
    let constant = fit_constant_from(data_post, init, inherited, &FitOptions::default())?;
    let Theta::Steps { rates, b, h, .. } = &constant.theta else { unreachable!() };
    let a_bar = rates[0];
    let lambda = a_bar * a_bar;
    let t_end = data_end(data_post);
    let setup = NonparSetup {
        t_star: 0.0,
        t_end,
        sigma2: constant.sigma2,
        start: NonparTheta { a_pre: a_bar, b: *b, h: *h },
        guess: Some(ContactRateFn::Constant { a: a_bar }),
        init: InitialCondition::Fixed { state: init },
        schedule: schedule.clone(),
        penalty_weight: 1.0,
        fit_theta: false,
        lm: LmOptions { max_iters: 300, ..Default::default() },
    };
    let selection = select_eta_evidence(data_post, lambda, eta_grid, &setup)?;
    Ok(PostLockdownFit { constant, lambda, selection })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn series(y: &[f64], population: f64) -> ObservationSeries {
        let start = NaiveDate::from_ymd_opt(2020, 3, 1).unwrap();
        let dates = (0..y.len()).map(|k| start + chrono::Days::new(k as u64)).collect();
        let counts = y.iter().map(|v| (v * population).round() as u64).collect();
        ObservationSeries::new("test", dates, counts, population).unwrap()
    }

    #[test]
    fn noise_variance() {
        assert_eq!(ml_noise_variance(&[0.0, 0.0]).unwrap(), 0.0);
        assert!((ml_noise_variance(&[1e-6, -1e-6]).unwrap() - 1e-12).abs() < 1e-27);
        assert!(matches!(ml_noise_variance(&[]), Err(Error::EmptyResiduals)));
    }

    #[test]
    fn all_zero_is_no_signal() {
        let s = series(&[0.0; 30], 1e7);
        assert!(matches!(fit_piecewise(&s, 8.0), Err(Error::NoSignal)));
        assert!(matches!(fit_exp_decay(&s, 8.0, 29.0), Err(Error::NoSignal)));
    }

    #[test]
    fn exp_decay_needs_ordered_window() {
        let s = series(&[1e-5; 30], 1e7);
        assert!(matches!(fit_exp_decay(&s, 8.0, 8.0), Err(Error::Precondition(_))));
    }

    #[test]
    fn step_rate_sides() {
        let r = StepRate { values: vec![1.0, 2.0, 3.0], breaks: vec![5.0, 10.0] };
        assert_eq!(r.rate(5.0, Side::Right).unwrap(), 2.0);
        assert_eq!(r.rate(5.0, Side::Left).unwrap(), 1.0);
        assert_eq!(r.rate(12.0, Side::Right).unwrap(), 3.0);
    }

    fn linearization_matches_fd(problem: &ParamProblem<'_>, z: &[f64]) {
        let lin = problem.linearize(z).unwrap();
        for q in 0..z.len() {
            let eps = 1e-6;
            let mut zp = z.to_vec();
            let mut zm = z.to_vec();
            zp[q] += eps;
            zm[q] -= eps;
            let op = problem.outputs(&zp).unwrap();
            let om = problem.outputs(&zm).unwrap();
            for t in 0..problem.y.len() {
                let fd = (op[t] - om[t]) / (2.0 * eps);
                let an = lin.jacobian[(t, q)];
                assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-8), "param {q} t {t}: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn parametric_jacobians_match_finite_differences() {
        let y: Vec<f64> = (0..40).map(|k| 1e-5 * (0.1 * k as f64).exp()).collect();
        let z = [0.3f64.ln(), 0.2f64.ln(), 0.02f64.ln(), 0.08f64.ln(), 1000f64.ln()];
        let p = ParamProblem::new(&y, Shape::ExpDecay { t_star: 8.0 }, InitialCondition::Equilibrium).unwrap();
        linearization_matches_fd(&p, &z);
        let z = [0.3f64.ln(), 0.2f64.ln(), 0.1f64.ln(), 0.08f64.ln(), 1000f64.ln()];
        let p = ParamProblem::new(&y, Shape::Steps(vec![8.0, 20.5]), InitialCondition::Equilibrium).unwrap();
        linearization_matches_fd(&p, &z);
        let state = EpidemicState { s: 0.9, i: 0.01, r: 0.09 };
        let p = ParamProblem::new(&y, Shape::Steps(vec![]), InitialCondition::Fixed { state }).unwrap();
        linearization_matches_fd(&p, &[0.1f64.ln(), 0.08f64.ln(), 1000f64.ln()]);
    }

    #[test]
    fn log_grid_endpoints() {
        let g = default_eta_grid();
        assert_eq!(g.len(), 15);
        assert!((g[0] - 1.0).abs() < 1e-12 && (g[14] - 60.0).abs() < 1e-9);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }
}
