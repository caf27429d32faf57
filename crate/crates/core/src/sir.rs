//! Time-varying SIR dynamics.
//!
//! ```text
//! S' = -a(t) S I
//! I' =  a(t) S I - b I
//! R' =  b I
//! y  =  I / H
//! ```
//!
//! Population is normalized to one. Integration is classical RK4 with a fixed
//! sub-step (at most [`DEFAULT_SUBSTEP`] days) between grid instants. The
//! contact rate is sampled once per sub-step into a [`RateTable`] so the same
//! table can drive both the plain integrator and the forward-sensitivity
//! integrator used by the estimators.

use serde::{Deserialize, Serialize};

use crate::contact::{ContactRate, Side};
use crate::error::{Error, Result};

pub const DEFAULT_SUBSTEP: f64 = 0.05;

const SIMPLEX_SLACK: f64 = 1e-9;
const CLAMP_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpidemicState {
    pub s: f64,
    pub i: f64,
    pub r: f64,
}

impl EpidemicState {
    pub fn new(s: f64, i: f64, r: f64) -> Result<Self> {
        let st = Self { s, i, r };
        st.validate()?;
        Ok(st)
    }

    pub fn validate(&self) -> Result<()> {
        let Self { s, i, r } = *self;
        if ![s, i, r].iter().all(|v| v.is_finite() && *v >= 0.0 && *v <= 1.0) {
            return Err(Error::InvalidState(format!("compartments outside [0, 1]: s = {s}, i = {i}, r = {r}")));
        }
        if (s + i + r - 1.0).abs() > SIMPLEX_SLACK {
            return Err(Error::InvalidState(format!("s + i + r = {} != 1", s + i + r)));
        }
        Ok(())
    }

    /// Total ever infected, `I + R`.
    pub fn infected_total(&self) -> f64 {
        self.i + self.r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub dt: f64,
    pub n: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, dt: f64, n: usize) -> Result<Self> {
        if !(dt > 0.0) || n < 1 || !t0.is_finite() {
            return Err(Error::Precondition(format!("time grid needs dt > 0 and n >= 1, got dt = {dt}, n = {n}")));
        }
        Ok(Self { t0, dt, n })
    }

    /// Daily grid starting at day 0.
    pub fn daily(n: usize) -> Self {
        Self { t0: 0.0, dt: 1.0, n }
    }

    #[inline]
    pub fn t(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n).map(|k| self.t(k)).collect()
    }

    pub fn end(&self) -> f64 {
        self.t(self.n.saturating_sub(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub states: Vec<EpidemicState>,
}

impl Trajectory {
    pub fn infected(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.i).collect()
    }

    pub fn susceptible(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.s).collect()
    }

    pub fn last(&self) -> EpidemicState {
        *self.states.last().expect("trajectory has at least one state")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SirParams {
    pub b: f64,
    pub h: f64,
}

impl SirParams {
    pub fn new(b: f64, h: f64) -> Result<Self> {
        if !(b > 0.0 && h > 0.0 && b.is_finite() && h.is_finite()) {
            return Err(Error::Precondition(format!("need b > 0 and H > 0, got b = {b}, H = {h}")));
        }
        Ok(Self { b, h })
    }
}

/// Raw contact-rate samples for every RK4 sub-step: value at the start
/// (right limit), the midpoint, and the end (left limit).
#[derive(Debug, Clone, PartialEq)]
pub struct RateTable {
    pub grid: TimeGrid,
    pub substeps: usize,
    pub h: f64,
    pub values: Vec<[f64; 3]>,
}

impl RateTable {
    pub fn substeps_for(grid: &TimeGrid, max_substep: f64) -> usize {
        ((grid.dt / max_substep) - 1e-9).ceil().max(1.0) as usize
    }

    /// Samples `rate(t, side)` on the sub-step stages of `grid`.
    pub fn from_fn(grid: &TimeGrid, max_substep: f64, mut rate: impl FnMut(f64, Side) -> Result<f64>) -> Result<Self> {
        let substeps = Self::substeps_for(grid, max_substep);
        let h = grid.dt / substeps as f64;
        let total = substeps * grid.n.saturating_sub(1);
        let mut values = Vec::with_capacity(total);
        for k in 0..grid.n.saturating_sub(1) {
            let base = grid.t(k);
            for j in 0..substeps {
                let t = base + j as f64 * h;
                let end = if j + 1 == substeps { grid.t(k + 1) } else { t + h };
                values.push([rate(t, Side::Right)?, rate(t + 0.5 * h, Side::Right)?, rate(end, Side::Left)?]);
            }
        }
        Ok(Self { grid: *grid, substeps, h, values })
    }

    pub fn build(contact: &impl ContactRate, grid: &TimeGrid, max_substep: f64) -> Result<Self> {
        Self::from_fn(grid, max_substep, |t, side| contact.rate(t, side))
    }

    /// Stage instants matching `values`, in the same layout.
    pub fn stage_times(&self) -> Vec<[f64; 3]> {
        let mut out = Vec::with_capacity(self.values.len());
        for k in 0..self.grid.n.saturating_sub(1) {
            let base = self.grid.t(k);
            for j in 0..self.substeps {
                let t = base + j as f64 * self.h;
                let end = if j + 1 == self.substeps { self.grid.t(k + 1) } else { t + self.h };
                out.push([t, t + 0.5 * self.h, end]);
            }
        }
        out
    }
}

fn check_state(t: f64, s: &mut f64, i: &mut f64, r: &mut f64) -> Result<()> {
    let bad = |v: f64| !v.is_finite() || v < -SIMPLEX_SLACK || v > 1.0 + SIMPLEX_SLACK;
    if bad(*s) || bad(*i) || bad(*r) {
        return Err(Error::NonFiniteState { t, s: *s, i: *i, r: *r });
    }
    for v in [s, i, r] {
        if *v < 0.0 && *v >= -CLAMP_SLACK {
            *v = 0.0;
        } else if *v > 1.0 && *v <= 1.0 + CLAMP_SLACK {
            *v = 1.0;
        }
    }
    Ok(())
}

/// Integrates from `init` over the table's grid. Negative raw rates are
/// clamped to zero inside the right-hand side.
pub fn integrate(table: &RateTable, b: f64, init: EpidemicState) -> Result<Vec<EpidemicState>> {
    let grid = &table.grid;
    let h = table.h;
    let mut out = Vec::with_capacity(grid.n);
    out.push(init);
    let (mut s, mut i, mut r) = (init.s, init.i, init.r);
    let rhs = |a: f64, s: f64, i: f64| {
        let inf = a.max(0.0) * s * i;
        let rem = b * i;
        (-inf, inf - rem, rem)
    };
    for k in 0..grid.n.saturating_sub(1) {
        for j in 0..table.substeps {
            let [a0, am, a1] = table.values[k * table.substeps + j];
            let (k1s, k1i, k1r) = rhs(a0, s, i);
            let (k2s, k2i, k2r) = rhs(am, s + 0.5 * h * k1s, i + 0.5 * h * k1i);
            let (k3s, k3i, k3r) = rhs(am, s + 0.5 * h * k2s, i + 0.5 * h * k2i);
            let (k4s, k4i, k4r) = rhs(a1, s + h * k3s, i + h * k3i);
            s += h / 6.0 * (k1s + 2.0 * k2s + 2.0 * k3s + k4s);
            i += h / 6.0 * (k1i + 2.0 * k2i + 2.0 * k3i + k4i);
            r += h / 6.0 * (k1r + 2.0 * k2r + 2.0 * k3r + k4r);
        }
        check_state(grid.t(k + 1), &mut s, &mut i, &mut r)?;
        out.push(EpidemicState { s, i, r });
    }
    Ok(out)
}

/// Direction of one parameter perturbation for forward sensitivities.
#[derive(Debug, Clone, Default)]
pub struct Perturbation<'a> {
    /// `∂a/∂p` on the rate-table stages; `None` when the rate does not depend on `p`.
    pub rate: Option<&'a [[f64; 3]]>,
    pub db: f64,
    pub ds0: f64,
    pub di0: f64,
}

/// States plus `∂S/∂p`, `∂I/∂p` at every grid instant (`[p][k]` layout).
#[derive(Debug, Clone)]
pub struct Sensitivities {
    pub states: Vec<EpidemicState>,
    pub ds: Vec<Vec<f64>>,
    pub di: Vec<Vec<f64>>,
}

/// Integrates the SIR system together with its variational equations for
/// each perturbation, stage by stage on the same RK4 scheme. The result is the
/// exact derivative of the discrete RK4 solution, so it agrees with finite
/// differences of [`integrate`] to rounding.
///
/// Rate derivatives are multiplied by `1[a > 0]` to match the clamped
/// right-hand side.
pub fn integrate_sensitivities(
    table: &RateTable,
    b: f64,
    init: EpidemicState,
    dirs: &[Perturbation<'_>],
) -> Result<Sensitivities> {
    let grid = &table.grid;
    let h = table.h;
    let np = dirs.len();
    let mut states = Vec::with_capacity(grid.n);
    let mut ds_out = vec![Vec::with_capacity(grid.n); np];
    let mut di_out = vec![Vec::with_capacity(grid.n); np];

    let (mut s, mut i, mut r) = (init.s, init.i, init.r);
    let mut vs: Vec<f64> = dirs.iter().map(|d| d.ds0).collect();
    let mut vi: Vec<f64> = dirs.iter().map(|d| d.di0).collect();
    states.push(init);
    for p in 0..np {
        ds_out[p].push(vs[p]);
        di_out[p].push(vi[p]);
    }

    // stage slopes of the variational states
    let mut ks = vec![[0.0f64; 4]; np];
    let mut ki = vec![[0.0f64; 4]; np];

    for k in 0..grid.n.saturating_sub(1) {
        for j in 0..table.substeps {
            let idx = k * table.substeps + j;
            let raw = table.values[idx];
            let mut slope_s = [0.0; 4];
            let mut slope_i = [0.0; 4];
            let mut slope_r = [0.0; 4];
            for stage in 0..4 {
                let col = [0, 1, 1, 2][stage];
                let frac = [0.0, 0.5, 0.5, 1.0][stage];
                let a_raw = raw[col];
                let active = a_raw > 0.0;
                let a = if active { a_raw } else { 0.0 };
                let (ss, ii) = if stage == 0 {
                    (s, i)
                } else {
                    (s + frac * h * slope_s[stage - 1], i + frac * h * slope_i[stage - 1])
                };
                let inf = a * ss * ii;
                slope_s[stage] = -inf;
                slope_i[stage] = inf - b * ii;
                slope_r[stage] = b * ii;
                for p in 0..np {
                    let (ps, pi) = if stage == 0 {
                        (vs[p], vi[p])
                    } else {
                        (vs[p] + frac * h * ks[p][stage - 1], vi[p] + frac * h * ki[p][stage - 1])
                    };
                    let da = match dirs[p].rate {
                        Some(tab) if active => tab[idx][col],
                        _ => 0.0,
                    };
                    let dinf = da * ss * ii + a * ps * ii + a * ss * pi;
                    ks[p][stage] = -dinf;
                    ki[p][stage] = dinf - dirs[p].db * ii - b * pi;
                }
            }
            s += h / 6.0 * (slope_s[0] + 2.0 * slope_s[1] + 2.0 * slope_s[2] + slope_s[3]);
            i += h / 6.0 * (slope_i[0] + 2.0 * slope_i[1] + 2.0 * slope_i[2] + slope_i[3]);
            r += h / 6.0 * (slope_r[0] + 2.0 * slope_r[1] + 2.0 * slope_r[2] + slope_r[3]);
            for p in 0..np {
                vs[p] += h / 6.0 * (ks[p][0] + 2.0 * ks[p][1] + 2.0 * ks[p][2] + ks[p][3]);
                vi[p] += h / 6.0 * (ki[p][0] + 2.0 * ki[p][1] + 2.0 * ki[p][2] + ki[p][3]);
            }
        }
        check_state(grid.t(k + 1), &mut s, &mut i, &mut r)?;
        states.push(EpidemicState { s, i, r });
        for p in 0..np {
            ds_out[p].push(vs[p]);
            di_out[p].push(vi[p]);
        }
    }
    Ok(Sensitivities { states, ds: ds_out, di: di_out })
}

pub fn simulate(
    contact: &impl ContactRate,
    params: &SirParams,
    init: EpidemicState,
    grid: &TimeGrid,
) -> Result<Trajectory> {
    simulate_with_substep(contact, params, init, grid, DEFAULT_SUBSTEP)
}

pub fn simulate_with_substep(
    contact: &impl ContactRate,
    params: &SirParams,
    init: EpidemicState,
    grid: &TimeGrid,
    max_substep: f64,
) -> Result<Trajectory> {
    init.validate()?;
    let table = RateTable::build(contact, grid, max_substep)?;
    if let Some(bad) = table.values.iter().flatten().find(|v| !v.is_finite()) {
        return Err(Error::Precondition(format!("contact rate is not finite on the grid ({bad})")));
    }
    let states = integrate(&table, params.b, init)?;
    Ok(Trajectory { grid: *grid, states })
}

/// Equilibrium-manifold initial condition from the first observation:
/// `i = H·y0`, `s = 1 + H·y0/(q0 - 1)` with `q0 = b/a0`, `r = 1 - i - s`.
pub fn initial_state(y0: f64, params: &SirParams, a0: f64) -> Result<EpidemicState> {
    if !(y0 >= 0.0) {
        return Err(Error::Precondition(format!("first observation must be nonnegative, got {y0}")));
    }
    let q0 = params.b / a0;
    if !((q0 - 1.0).abs() >= 1e-6) {
        return Err(Error::DegenerateEquilibrium { gap: (q0 - 1.0).abs() });
    }
    let i = params.h * y0;
    let s = 1.0 + i / (q0 - 1.0);
    let r = 1.0 - i - s;
    let st = EpidemicState { s, i, r };
    if ![s, i, r].iter().all(|v| (-CLAMP_SLACK..=1.0 + CLAMP_SLACK).contains(v)) {
        return Err(Error::InvalidState(format!("equilibrium state outside [0, 1]: {st:?}")));
    }
    Ok(EpidemicState { s: s.clamp(0.0, 1.0), i: i.clamp(0.0, 1.0), r: r.clamp(0.0, 1.0) })
}

/// Partial derivatives of [`initial_state`]'s `(s, i)` with respect to
/// `(a0, b, H)`, as `[[ds/da0, di/da0], [ds/db, di/db], [ds/dH, di/dH]]`.
pub(crate) fn initial_state_jacobian(y0: f64, b: f64, h: f64, a0: f64) -> [[f64; 2]; 3] {
    let q0 = b / a0;
    let d = q0 - 1.0;
    let ds_dq = -h * y0 / (d * d);
    [[ds_dq * (-b / (a0 * a0)), 0.0], [ds_dq / a0, 0.0], [y0 / d, y0]]
}

pub fn model_output(traj: &Trajectory, params: &SirParams) -> Vec<f64> {
    traj.states.iter().map(|st| st.i / params.h).collect()
}

pub fn reproduction_number(a_values: &[f64], b: f64) -> Vec<f64> {
    a_values.iter().map(|a| a / b).collect()
}

/// `δ(t_k)` by trapezoidal quadrature of `-q̇ ln S`, with `q̇` from central
/// differences (one-sided at the ends). The constant of integration is the
/// offset of the first state from the invariant manifold, which is zero for
/// trajectories started at equilibrium.
pub fn delta_series(traj: &Trajectory, q_values: &[f64]) -> Vec<f64> {
    let n = traj.states.len().min(q_values.len());
    if n == 0 {
        return Vec::new();
    }
    let st0 = traj.states[0];
    let mut delta = Vec::with_capacity(n);
    delta.push(st0.i - 1.0 + st0.s - q_values[0] * st0.s.ln());
    if n == 1 {
        return delta;
    }
    let dt = traj.grid.dt;
    let qdot: Vec<f64> = (0..n)
        .map(|k| {
            if k == 0 {
                (q_values[1] - q_values[0]) / dt
            } else if k == n - 1 {
                (q_values[n - 1] - q_values[n - 2]) / dt
            } else {
                (q_values[k + 1] - q_values[k - 1]) / (2.0 * dt)
            }
        })
        .collect();
    let integrand: Vec<f64> = (0..n).map(|k| -qdot[k] * traj.states[k].s.ln()).collect();
    for k in 1..n {
        let prev = delta[k - 1];
        delta.push(prev + 0.5 * dt * (integrand[k - 1] + integrand[k]));
    }
    delta
}

/// `max_k |I(t_k) - (1 + δ(t_k) - S(t_k) + q(t_k) ln S(t_k))|`; the first
/// instant is zero by construction of the integration constant.
pub fn conservation_residual(traj: &Trajectory, q_values: &[f64]) -> f64 {
    let delta = delta_series(traj, q_values);
    delta
        .iter()
        .enumerate()
        .skip(1)
        .map(|(k, d)| {
            let st = traj.states[k];
            (st.i - (1.0 + d - st.s + q_values[k] * st.s.ln())).abs()
        })
        .fold(0.0, f64::max)
}
