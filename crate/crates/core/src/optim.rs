//! Small dense minimizers: Nelder–Mead for derivative-free searches over a
//! handful of log-parameters and Levenberg–Marquardt for least-squares
//! problems where a Jacobian is available.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone)]
pub struct NelderMeadOptions {
    pub max_evals: usize,
    /// Stop when the spread of function values over the simplex falls below
    /// `ftol_abs + ftol_rel·|f_best|`...
    pub ftol_abs: f64,
    pub ftol_rel: f64,
    /// ...and the simplex diameter falls below this.
    pub xtol: f64,
    /// Initial simplex edge along each coordinate.
    pub initial_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self { max_evals: 4000, ftol_abs: 0.0, ftol_rel: 1e-12, xtol: 1e-9, initial_step: 0.2 }
    }
}

#[derive(Debug, Clone)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
}

/// Minimizes `f` from `x0`. Non-finite values are treated as `+∞`.
pub fn nelder_mead(mut f: impl FnMut(&[f64]) -> f64, x0: &[f64], opts: &NelderMeadOptions) -> NelderMeadResult {
    let n = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for j in 0..n {
        let mut x = x0.to_vec();
        x[j] += opts.initial_step;
        simplex.push(x);
    }
    let mut values: Vec<f64> = simplex.iter().map(|x| eval(x, &mut evals)).collect();
    if values.iter().all(|v| v.is_infinite()) {
        return NelderMeadResult { x: x0.to_vec(), f: f64::INFINITY, evals, converged: false };
    }

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut converged = false;
    while evals < opts.max_evals {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&k| simplex[k].clone()).collect();
        values = order.iter().map(|&k| values[k]).collect();

        let best = values[0];
        let worst = values[n];
        let diameter = simplex[1..]
            .iter()
            .map(|x| x.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if worst.is_finite() && (worst - best) <= opts.ftol_abs + opts.ftol_rel * best.abs() && diameter <= opts.xtol {
            converged = true;
            break;
        }

        let centroid: Vec<f64> = (0..n).map(|j| simplex[..n].iter().map(|x| x[j]).sum::<f64>() / n as f64).collect();
        let along = |coef: f64| -> Vec<f64> {
            centroid.iter().zip(&simplex[n]).map(|(c, w)| c + coef * (w - c)).collect()
        };

        let xr = along(-alpha);
        let fr = eval(&xr, &mut evals);
        if fr < values[0] {
            let xe = along(-gamma);
            let fe = eval(&xe, &mut evals);
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
            continue;
        }
        if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
            continue;
        }
        let (xc, fc) = if fr < values[n] {
            let xc = along(-rho);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        } else {
            let xc = along(rho);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        };
        if fc < values[n].min(fr) {
            simplex[n] = xc;
            values[n] = fc;
            continue;
        }
        // shrink toward the best vertex
        for k in 1..=n {
            let x: Vec<f64> = simplex[0].iter().zip(&simplex[k]).map(|(b, x)| b + sigma * (x - b)).collect();
            values[k] = eval(&x, &mut evals);
            simplex[k] = x;
        }
    }
    let k = (0..=n).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap_or(0);
    NelderMeadResult { x: simplex[k].clone(), f: values[k], evals, converged }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmOptions {
    pub max_iters: usize,
    /// Relative cost decrease below which an accepted step ends the run.
    pub ftol: f64,
    /// Step norm (relative to parameter norm) below which the run ends.
    pub xtol: f64,
    pub initial_damping: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self { max_iters: 200, ftol: 1e-12, xtol: 1e-12, initial_damping: 1e-3 }
    }
}

#[derive(Debug, Clone)]
pub struct LmResult {
    pub x: Vec<f64>,
    /// `Σ r²` at `x`.
    pub cost: f64,
    pub iters: usize,
    pub converged: bool,
}

/// Residuals and Jacobian of a least-squares problem.
pub struct Linearization {
    pub residuals: DVector<f64>,
    pub jacobian: DMatrix<f64>,
}

/// Levenberg–Marquardt minimizing `Σ r(x)²`, with Moré's running-maximum
/// diagonal scaling and Nielsen's gain-ratio damping update.
/// `model(x, with_jacobian)` returns `None` where the model cannot be
/// evaluated; such trial points are rejected and the damping raised.
pub fn levenberg_marquardt(
    mut model: impl FnMut(&[f64], bool) -> Option<Linearization>,
    x0: &[f64],
    opts: &LmOptions,
) -> Option<LmResult> {
    let mut x = DVector::from_column_slice(x0);
    let mut lin = model(x.as_slice(), true)?;
    let mut cost = lin.residuals.norm_squared();
    if !cost.is_finite() {
        return None;
    }
    let p = x.len();
    let mut scale = DVector::<f64>::from_element(p, 0.0);
    let mut mu: f64 = opts.initial_damping;
    let mut nu: f64 = 2.0;
    let mut converged = false;
    let mut iters = 0;
    let mut rejections = 0;
    while iters < opts.max_iters {
        iters += 1;
        let n = lin.residuals.len();
        for k in 0..p {
            scale[k] = scale[k].max(lin.jacobian.column(k).norm_squared()).max(1e-300);
        }
        // damped step from the QR factorization of [J; √μ·D], which keeps the
        // conditioning of J rather than that of JᵀJ
        let mut aug = DMatrix::<f64>::zeros(n + p, p);
        aug.view_mut((0, 0), (n, p)).copy_from(&lin.jacobian);
        for k in 0..p {
            aug[(n + k, k)] = (mu * scale[k]).sqrt();
        }
        let mut rhs = DVector::<f64>::zeros(n + p);
        rhs.rows_mut(0, n).copy_from(&(-&lin.residuals));
        let qr = aug.qr();
        let qtb = qr.q().transpose() * rhs;
        let Some(step) = qr.r().solve_upper_triangular(&qtb) else {
            mu *= nu;
            nu *= 2.0;
            continue;
        };
        if !step.iter().all(|v| v.is_finite()) {
            mu *= nu;
            nu *= 2.0;
            continue;
        }
        let predicted = cost - (&lin.residuals + &lin.jacobian * &step).norm_squared();
        let trial = &x + &step;
        let trial_lin = model(trial.as_slice(), true);
        let trial_cost = trial_lin.as_ref().map(|l| l.residuals.norm_squared()).unwrap_or(f64::INFINITY);
        let gain = if predicted > 0.0 { (cost - trial_cost) / predicted } else { -1.0 };
        if trial_cost.is_finite() && trial_cost <= cost && gain > 0.0 {
            let rel = (cost - trial_cost) / cost.max(f64::MIN_POSITIVE);
            let small_step = step.norm() <= opts.xtol * (x.norm() + opts.xtol);
            x = trial;
            lin = trial_lin.expect("finite trial has a linearization");
            cost = trial_cost;
            mu *= (1.0 - (2.0 * gain - 1.0).powi(3)).max(1.0 / 3.0);
            nu = 2.0;
            rejections = 0;
            if rel <= opts.ftol || small_step || cost == 0.0 {
                converged = true;
                break;
            }
        } else {
            mu *= nu;
            nu *= 2.0;
            rejections += 1;
            if rejections > 40 || mu > 1e30 {
                // no descent at any damping: stationary to working precision
                converged = true;
                break;
            }
        }
    }
    Some(LmResult { x: x.as_slice().to_vec(), cost, iters, converged })
}
