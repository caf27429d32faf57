//! Posterior over `(θ, c, σ²)`, random-walk Metropolis with pilot scaling,
//! and pointwise credible bands.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contact::NonparTheta;
use crate::data::ObservationSeries;
use crate::error::{Error, Result};
use crate::estimation::{FitResult, InitialCondition, NonparModel, Theta};
use crate::kernels::{gram_cholesky, Kernel};
use crate::sir::EpidemicState;

pub const SERO_PRIOR_MEAN: f64 = 7.5;
pub const BURN_IN_FRACTION: f64 = 0.2;
pub const THIN: usize = 10;
pub const MIN_RETAINED: usize = 100;

/// Exponential log-density with the given mean, `-∞` off the support.
pub fn exponential_logpdf(p: f64, mean: f64) -> f64 {
    if p >= 0.0 {
        -p / mean - mean.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Log-density of the maximum-entropy prior on the infected percentage.
pub fn sero_prior_logpdf(p: f64) -> f64 {
    exponential_logpdf(p, SERO_PRIOR_MEAN)
}

/// A density the sampler can walk on. The chain moves in sampling
/// coordinates; samples are stored in natural coordinates.
pub trait Target: Sync {
    fn dim(&self) -> usize;
    fn log_density(&self, x: &[f64]) -> f64;
    fn to_sampling(&self, natural: &[f64]) -> Vec<f64> {
        natural.to_vec()
    }
    fn to_natural(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }
    fn names(&self) -> Vec<String> {
        (0..self.dim()).map(|j| format!("x{j}")).collect()
    }
}

/// Closure target with identical sampling and natural coordinates.
pub struct FnTarget<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64]) -> f64 + Sync> Target for FnTarget<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaPrior {
    Flat,
    /// `p(σ²) ∝ 1/σ²`.
    Jeffreys,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorFlags {
    pub sigma: SigmaPrior,
    /// Exponential prior on `100·(I + R)(t_end)`.
    pub sero: bool,
}

impl Default for PriorFlags {
    fn default() -> Self {
        Self { sigma: SigmaPrior::Jeffreys, sero: false }
    }
}

/// Probabilistic reading of the regularized fit: Gaussian noise, Gaussian
/// prior `c ~ N(0, K̄⁻¹)`, flat priors on the positive `θ` components.
///
/// Parameters are packed as `[a_pre (when t_star > 0), b, H, c_1..c_M, σ²]`.
/// Sampling coordinates take logs of every positive component.
pub struct PosteriorSpec {
    pub data: ObservationSeries,
    pub kernel: Kernel,
    pub nodes: Vec<f64>,
    pub priors: PriorFlags,
    pub t_star: f64,
    pub t_end: f64,
    pub init: InitialCondition,
    model: NonparModel,
    end_index: usize,
}

impl PosteriorSpec {
    pub fn new(
        data: ObservationSeries,
        kernel: Kernel,
        nodes: Vec<f64>,
        priors: PriorFlags,
        t_star: f64,
        t_end: f64,
        init: InitialCondition,
    ) -> Result<Self> {
        let end_index = (t_end + 1e-9).floor().max(0.0) as usize;
        let model = NonparModel::new(&data.y, kernel, nodes.clone(), t_star, t_end, init, end_index + 1)?;
        Ok(Self { data, kernel, nodes, priors, t_star, t_end, init, model, end_index })
    }

    /// Spec and starting point from a converged nonparametric fit.
    pub fn from_fit(data: ObservationSeries, fit: &FitResult, priors: PriorFlags) -> Result<(Self, Vec<f64>)> {
        let (Theta::Nonparametric(theta), Some(exp)) = (&fit.theta, &fit.expansion) else {
            return Err(Error::Precondition("posterior needs a nonparametric fit".into()));
        };
        let init = if fit.t_star > 0.0 { InitialCondition::Equilibrium } else { InitialCondition::Fixed { state: fit.init } };
        let spec = Self::new(data, exp.kernel, exp.nodes.clone(), priors, fit.t_star, fit.t_end, init)?;
        let start = spec.pack(theta, &exp.coeffs, fit.sigma2);
        Ok((spec, start))
    }

    pub fn model(&self) -> &NonparModel {
        &self.model
    }

    fn n_theta(&self) -> usize {
        self.model.n_theta()
    }

    pub fn n_params(&self) -> usize {
        self.model.n_params() + 1
    }

    pub fn pack(&self, theta: &NonparTheta, coeffs: &[f64], sigma2: f64) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        if self.model.has_pre() {
            v.push(theta.a_pre);
        }
        v.extend([theta.b, theta.h]);
        v.extend_from_slice(coeffs);
        v.push(sigma2);
        v
    }

    /// `(θ, c, σ²)`; `a_pre` is `NaN` when there is no pre-lockdown segment.
    pub fn unpack<'p>(&self, params: &'p [f64]) -> (NonparTheta, &'p [f64], f64) {
        let nt = self.n_theta();
        let o = self.model.has_pre() as usize;
        let theta = NonparTheta {
            a_pre: if self.model.has_pre() { params[0] } else { f64::NAN },
            b: params[o],
            h: params[o + 1],
        };
        (theta, &params[nt..params.len() - 1], params[params.len() - 1])
    }

    fn is_positive(&self, j: usize) -> bool {
        j < self.n_theta() || j == self.n_params() - 1
    }

    fn model_z(&self, params: &[f64]) -> Vec<f64> {
        let (theta, c, _) = self.unpack(params);
        let th = NonparTheta { a_pre: if theta.a_pre.is_nan() { 1.0 } else { theta.a_pre }, ..theta };
        self.model.pack(&th, c)
    }

    /// States on the daily grid through `t_end`.
    pub fn trajectory(&self, params: &[f64]) -> Result<Vec<EpidemicState>> {
        self.model.trajectory(&self.model_z(params))
    }

    /// Contact rate at absolute time `t`, clamped at zero as in the dynamics.
    pub fn rate_at(&self, params: &[f64], t: f64) -> f64 {
        let (theta, c, _) = self.unpack(params);
        if crate::contact::before(t, self.t_star, crate::contact::Side::Right) {
            theta.a_pre
        } else {
            let f: f64 = self.nodes.iter().zip(c).map(|(&nd, cj)| cj * self.kernel.eval(nd, t - self.t_star)).sum();
            f.max(0.0)
        }
    }

    /// Proposal covariance in sampling coordinates from the inverse
    /// Gauss–Newton Hessian at `params`; `ln σ²` gets its asymptotic
    /// variance `2/n` and no cross terms.
    pub fn laplace_covariance(&self, params: &[f64]) -> Result<DMatrix<f64>> {
        let (_, _, sigma2) = self.unpack(params);
        let lin = self.model.linearize(&self.model_z(params), sigma2)?;
        let hess = lin.jacobian.transpose() * &lin.jacobian;
        let inv = hess.cholesky().ok_or(Error::SingularHessian)?.inverse();
        let d = self.n_params();
        let mut cov = DMatrix::zeros(d, d);
        cov.view_mut((0, 0), (d - 1, d - 1)).copy_from(&inv);
        cov[(d - 1, d - 1)] = 2.0 / self.data.len() as f64;
        Ok(cov)
    }

    /// Unnormalized log posterior in natural coordinates.
    pub fn log_posterior(&self, params: &[f64]) -> f64 {
        if params.len() != self.n_params() || params.iter().any(|v| !v.is_finite()) {
            return f64::NEG_INFINITY;
        }
        if (0..params.len()).any(|j| self.is_positive(j) && params[j] <= 0.0) {
            return f64::NEG_INFINITY;
        }
        let (theta, c, sigma2) = self.unpack(params);
        let Ok(states) = self.trajectory(params) else {
            return f64::NEG_INFINITY;
        };
        let n = self.data.len();
        let rss: f64 = states.iter().zip(&self.data.y).map(|(st, y)| (st.i / theta.h - y).powi(2)).sum();
        let mut lp = -rss / (2.0 * sigma2) - 0.5 * n as f64 * sigma2.ln() - 0.5 * self.model.penalty(c);
        if self.priors.sigma == SigmaPrior::Jeffreys {
            lp -= sigma2.ln();
        }
        if self.priors.sero {
            let last = states[self.end_index.min(states.len() - 1)];
            lp += sero_prior_logpdf(100.0 * (last.i + last.r));
        }
        lp
    }

    /// `100·(I + R)` at `t_end`.
    pub fn infected_percentage(&self, params: &[f64]) -> Result<f64> {
        let states = self.trajectory(params)?;
        let last = states[self.end_index.min(states.len() - 1)];
        Ok(100.0 * (last.i + last.r))
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.model.has_pre() {
            names.push("a_pre".to_string());
        }
        names.extend(["b".to_string(), "H".to_string()]);
        names.extend((1..=self.nodes.len()).map(|j| format!("c{j}")));
        names.push("sigma2".to_string());
        names
    }
}

impl Target for PosteriorSpec {
    fn dim(&self) -> usize {
        self.n_params()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let natural = self.to_natural(x);
        let lp = self.log_posterior(&natural);
        if !lp.is_finite() {
            return f64::NEG_INFINITY;
        }
        let jac: f64 = (0..x.len()).filter(|&j| self.is_positive(j)).map(|j| x[j]).sum();
        lp + jac
    }

    fn to_sampling(&self, natural: &[f64]) -> Vec<f64> {
        natural.iter().enumerate().map(|(j, &v)| if self.is_positive(j) { v.ln() } else { v }).collect()
    }

    fn to_natural(&self, x: &[f64]) -> Vec<f64> {
        x.iter().enumerate().map(|(j, &v)| if self.is_positive(j) { v.exp() } else { v }).collect()
    }

    fn names(&self) -> Vec<String> {
        self.parameter_names()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcChain {
    pub names: Vec<String>,
    /// One natural-coordinate state per iteration.
    pub samples: Vec<Vec<f64>>,
    pub acceptance_rate: f64,
    pub seed: u64,
    pub burn_in: usize,
}

impl McmcChain {
    /// Post burn-in samples, thinned.
    pub fn retained(&self) -> Vec<&[f64]> {
        self.samples.iter().skip(self.burn_in).step_by(THIN).map(|s| s.as_slice()).collect()
    }

    pub fn last(&self) -> Option<&[f64]> {
        self.samples.last().map(|s| s.as_slice())
    }

    /// Retained samples as CSV, header naming the parameters.
    pub fn export_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let names: Vec<&str> = self.names.iter().map(|s| s.as_str()).collect();
        let rows: Vec<Vec<f64>> = self.retained().into_iter().map(|s| s.to_vec()).collect();
        if rows.is_empty() {
            return Err(Error::ChainTooShort { retained: 0, needed: 1 });
        }
        crate::data::export_table(&names, &rows, path)
    }

    /// Split-chain potential scale reduction for one component of the
    /// retained samples.
    pub fn split_rhat(&self, j: usize) -> Option<f64> {
        let xs: Vec<f64> = self.retained().iter().map(|s| s[j]).collect();
        let half = xs.len() / 2;
        if half < 2 {
            return None;
        }
        let parts = [&xs[..half], &xs[half..2 * half]];
        let n = half as f64;
        let means: Vec<f64> = parts.iter().map(|p| p.iter().sum::<f64>() / n).collect();
        let vars: Vec<f64> =
            parts.iter().zip(&means).map(|(p, m)| p.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).collect();
        let w = (vars[0] + vars[1]) / 2.0;
        let grand = (means[0] + means[1]) / 2.0;
        let b = n * ((means[0] - grand).powi(2) + (means[1] - grand).powi(2));
        if w == 0.0 {
            return Some(1.0);
        }
        let var_hat = (n - 1.0) / n * w + b / n;
        Some((var_hat / w).sqrt())
    }
}

fn proposal_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if cov.nrows() != cov.ncols() || cov.nrows() == 0 {
        return Err(Error::Precondition("proposal covariance must be square and nonempty".into()));
    }
    let tr = cov.trace();
    if !(tr > 0.0) || !tr.is_finite() {
        return Err(Error::DegenerateProposal);
    }
    gram_cholesky(cov).map(|c| c.l()).map_err(|_| Error::DegenerateProposal)
}

/// Metropolis acceptance test for a log ratio given a uniform draw in `[0,1)`.
#[inline]
pub fn metropolis_accept(log_ratio: f64, u: f64) -> bool {
    log_ratio >= 0.0 || u.ln() < log_ratio
}

/// Random-walk Metropolis with Gaussian increments of covariance
/// `proposal_cov` (in sampling coordinates).
pub fn metropolis_run(
    target: &impl Target,
    init: &[f64],
    proposal_cov: &DMatrix<f64>,
    n_iter: usize,
    seed: u64,
) -> Result<McmcChain> {
    if init.len() != target.dim() || proposal_cov.nrows() != target.dim() {
        return Err(Error::Precondition(format!(
            "dimension mismatch: target {}, init {}, proposal {}",
            target.dim(),
            init.len(),
            proposal_cov.nrows()
        )));
    }
    let l = proposal_factor(proposal_cov)?;
    let mut x = DVector::from_vec(target.to_sampling(init));
    let mut lp = target.log_density(x.as_slice());
    if !lp.is_finite() {
        return Err(Error::InvalidInit);
    }
    let d = x.len();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_iter);
    let mut accepted = 0usize;
    let mut xi = DVector::zeros(d);
    let mut natural = target.to_natural(x.as_slice());
    for _ in 0..n_iter {
        for k in 0..d {
            xi[k] = rng.sample::<f64, _>(StandardNormal);
        }
        let prop = &x + &l * &xi;
        let lp_prop = target.log_density(prop.as_slice());
        let u: f64 = rng.random();
        if lp_prop.is_finite() && metropolis_accept(lp_prop - lp, u) {
            x = prop;
            lp = lp_prop;
            accepted += 1;
            natural = target.to_natural(x.as_slice());
        }
        samples.push(natural.clone());
    }
    Ok(McmcChain {
        names: target.names(),
        samples,
        acceptance_rate: if n_iter == 0 { 0.0 } else { accepted as f64 / n_iter as f64 },
        seed,
        burn_in: (BURN_IN_FRACTION * n_iter as f64).floor() as usize,
    })
}

/// Independent chains, one per seed, returned in seed order.
pub fn run_chains(
    target: &impl Target,
    init: &[f64],
    proposal_cov: &DMatrix<f64>,
    n_iter: usize,
    seeds: &[u64],
) -> Vec<Result<McmcChain>> {
    seeds.par_iter().map(|&s| metropolis_run(target, init, proposal_cov, n_iter, s)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tuning {
    pub cov: DMatrix<f64>,
    /// Multiplier applied to the seed covariance.
    pub scale: f64,
    pub acceptance_rate: f64,
    pub rounds: usize,
    /// Last state of the final pilot run.
    pub state: Vec<f64>,
}

pub const TUNING_ROUNDS: usize = 25;

/// Rescales `seed_cov` by a global factor until a pilot run's acceptance is
/// within `±0.1` of `target_rate`. The factor moves by ×/÷100 until the band
/// is bracketed, then by geometric bisection. Each pilot starts where the
/// previous one ended.
pub fn pilot_tune(
    target: &impl Target,
    init: &[f64],
    seed_cov: &DMatrix<f64>,
    target_rate: f64,
    pilot_iters: usize,
    seed: u64,
) -> Result<Tuning> {
    let (lo_rate, hi_rate) = (target_rate - 0.1, target_rate + 0.1);
    let mut scale = 1.0f64;
    let mut too_small: Option<f64> = None;
    let mut too_large: Option<f64> = None;
    let mut state = init.to_vec();
    let mut rate = f64::NAN;
    for round in 0..TUNING_ROUNDS {
        let cov = seed_cov * scale;
        let chain = metropolis_run(target, &state, &cov, pilot_iters, seed.wrapping_add(round as u64))?;
        rate = chain.acceptance_rate;
        if let Some(last) = chain.last() {
            state = last.to_vec();
        }
        if (lo_rate..=hi_rate).contains(&rate) {
            return Ok(Tuning { cov, scale, acceptance_rate: rate, rounds: round + 1, state });
        }
        if rate > hi_rate {
            too_small = Some(scale);
        } else {
            too_large = Some(scale);
        }
        scale = match (too_small, too_large) {
            (Some(a), Some(b)) => (a * b).sqrt(),
            (Some(a), None) => a * 100.0,
            (None, Some(b)) => b / 100.0,
            (None, None) => unreachable!(),
        };
    }
    Err(Error::TuningFailed { rounds: TUNING_ROUNDS, rate })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CredibleBand {
    pub times: Vec<f64>,
    pub lower: Vec<f64>,
    pub center: Vec<f64>,
    pub upper: Vec<f64>,
    pub level: f64,
}

impl CredibleBand {
    pub fn validate(&self) -> Result<()> {
        let n = self.times.len();
        if self.lower.len() != n || self.center.len() != n || self.upper.len() != n {
            return Err(Error::Precondition("band columns differ in length".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Precondition(format!("band level must lie in (0, 1), got {}", self.level)));
        }
        for k in 0..n {
            if !(self.lower[k] <= self.center[k] && self.center[k] <= self.upper[k]) {
                return Err(Error::Precondition(format!("band is not ordered at index {k}")));
            }
        }
        Ok(())
    }
}

/// Linear-interpolation empirical quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Pointwise quantile band of `functional` over the retained samples; the
/// centre is the median.
pub fn credible_band<F>(chain: &McmcChain, functional: F, times: &[f64], level: f64) -> Result<CredibleBand>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Precondition(format!("band level must lie in (0, 1), got {level}")));
    }
    let retained = chain.retained();
    if retained.len() < MIN_RETAINED {
        return Err(Error::ChainTooShort { retained: retained.len(), needed: MIN_RETAINED });
    }
    let values: Vec<Vec<f64>> = retained.par_iter().map(|s| functional(s)).collect::<Result<_>>()?;
    if let Some(bad) = values.iter().find(|v| v.len() != times.len()) {
        return Err(Error::Precondition(format!("functional returned {} values for {} times", bad.len(), times.len())));
    }
    let tail = (1.0 - level) / 2.0;
    let mut band = CredibleBand {
        times: times.to_vec(),
        lower: Vec::with_capacity(times.len()),
        center: Vec::with_capacity(times.len()),
        upper: Vec::with_capacity(times.len()),
        level,
    };
    let mut column = Vec::with_capacity(values.len());
    for k in 0..times.len() {
        column.clear();
        column.extend(values.iter().map(|v| v[k]));
        column.sort_by(f64::total_cmp);
        band.lower.push(quantile_sorted(&column, tail));
        band.center.push(quantile_sorted(&column, 0.5));
        band.upper.push(quantile_sorted(&column, 1.0 - tail));
    }
    Ok(band)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn std_normal() -> FnTarget<impl Fn(&[f64]) -> f64 + Sync> {
        FnTarget { dim: 1, f: |x: &[f64]| -0.5 * x[0] * x[0] }
    }

    #[test]
    fn sero_prior_values() {
        assert!((sero_prior_logpdf(0.0) + 2.0149030205422647).abs() < 1e-12);
        assert!((sero_prior_logpdf(7.5) + 3.0149030205422647).abs() < 1e-12);
        assert_eq!(sero_prior_logpdf(-1.0), f64::NEG_INFINITY);
    }

    #[test]
    fn standard_normal_moments() {
        let cov = DMatrix::from_element(1, 1, 2.4f64 * 2.4);
        let chain = metropolis_run(&std_normal(), &[0.0], &cov, 100_000, 11).unwrap();
        let xs: Vec<f64> = chain.samples.iter().map(|s| s[0]).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "var {var}");
    }

    #[test]
    fn degenerate_and_invalid() {
        let zero = DMatrix::zeros(1, 1);
        assert!(matches!(metropolis_run(&std_normal(), &[0.0], &zero, 10, 1), Err(Error::DegenerateProposal)));
        let t = FnTarget { dim: 1, f: |x: &[f64]| if x[0] > 0.0 { 0.0 } else { f64::NEG_INFINITY } };
        let cov = DMatrix::identity(1, 1);
        assert!(matches!(metropolis_run(&t, &[-1.0], &cov, 10, 1), Err(Error::InvalidInit)));
    }

    #[test]
    fn seed_determinism() {
        let cov = DMatrix::identity(1, 1);
        let a = metropolis_run(&std_normal(), &[0.3], &cov, 5000, 42).unwrap();
        let b = metropolis_run(&std_normal(), &[0.3], &cov, 5000, 42).unwrap();
        assert_eq!(a, b);
        let c = metropolis_run(&std_normal(), &[0.3], &cov, 5000, 43).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn tuning_keeps_good_seed_and_hits_band() {
        // a proposal SD near 2.4 gives roughly 44% on N(0,1); SD 3.5 is near 30%
        let seed = DMatrix::from_element(1, 1, 3.5f64 * 3.5);
        let tuned = pilot_tune(&std_normal(), &[0.0], &seed, 0.30, 4000, 5).unwrap();
        assert_eq!(tuned.rounds, 1);
        assert_eq!(tuned.cov, seed);

        let seed = DMatrix::from_element(1, 1, 1e-4);
        let tuned = pilot_tune(&std_normal(), &[0.0], &seed, 0.30, 4000, 5).unwrap();
        assert!((0.2..=0.4).contains(&tuned.acceptance_rate));
        let check = metropolis_run(&std_normal(), &[0.0], &tuned.cov, 20_000, 99).unwrap();
        assert!((0.2..=0.4).contains(&check.acceptance_rate), "{}", check.acceptance_rate);
    }

    #[test]
    fn ridge_shrinks_scale() {
        let ridge = FnTarget { dim: 2, f: |x: &[f64]| -0.5 * x[0] * x[0] - 0.5 * ((x[1] - x[0]) / 1e-6).powi(2) };
        let seed = DMatrix::identity(2, 2);
        let tuned = pilot_tune(&ridge, &[0.0, 0.0], &seed, 0.30, 2000, 3).unwrap();
        assert!(tuned.scale <= 1e-3, "scale {}", tuned.scale);
    }

    #[test]
    fn constant_functional_band_collapses() {
        let cov = DMatrix::identity(1, 1);
        let chain = metropolis_run(&std_normal(), &[0.0], &cov, 5000, 1).unwrap();
        let times = [0.0, 1.0, 2.0];
        let band = credible_band(&chain, |_| Ok(vec![3.0; 3]), &times, 0.95).unwrap();
        assert_eq!(band.lower, band.center);
        assert_eq!(band.center, band.upper);

        let short = metropolis_run(&std_normal(), &[0.0], &cov, 10, 1).unwrap();
        assert!(matches!(
            credible_band(&short, |_| Ok(vec![0.0; 3]), &times, 0.95),
            Err(Error::ChainTooShort { .. })
        ));
    }

    #[test]
    fn quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_sorted(&v, 0.5), 3.0);
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 5.0);
        assert_eq!(quantile_sorted(&v, 0.125), 1.5);
    }
}
