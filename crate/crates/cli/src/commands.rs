use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use epirkhs::bayes::{self, CredibleBand, McmcChain, PosteriorSpec, PriorFlags, SigmaPrior, Target, Tuning};
use epirkhs::contact::ContactRateFn;
use epirkhs::data::{self, FitRow, ObservationSeries};
use epirkhs::estimation::{self, Breakpoints, FitResult, NonparSetup, Theta};
use epirkhs::kernels::Kernel;
use epirkhs::sir::{self, EpidemicState, SirParams, TimeGrid};
use epirkhs::{Error, ErrorFamily};
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, RunConfig};

#[derive(Debug)]
pub enum Failure {
    Config(ConfigError),
    Run(Error),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(e) => write!(f, "configuration: {e}"),
            Failure::Run(e) => write!(f, "{e}"),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl Failure {
    /// Process exit status; 2 is shared with command-line usage errors.
    pub fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Run(e) => match e.family() {
                ErrorFamily::Dynamics => 3,
                ErrorFamily::NoSignal => 4,
                ErrorFamily::Estimation => 5,
                ErrorFamily::Sampling => 6,
                ErrorFamily::Data => 7,
                ErrorFamily::Io => 8,
                ErrorFamily::Precondition => 9,
            },
        }
    }
}

pub type Outcome<T> = Result<T, Failure>;

fn config_err(msg: impl Into<String>) -> Failure {
    Failure::Config(ConfigError(msg.into()))
}

fn write_text(path: &Path, text: &str) -> Outcome<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Outcome<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(format!("cannot encode {}: {e}", path.display())))?;
    text.push('\n');
    write_text(path, &text)
}

fn days(n: usize) -> Vec<f64> {
    (0..n).map(|k| k as f64).collect()
}

// ---------------------------------------------------------------------------
// simulate

pub fn simulate(cfg: &RunConfig) -> Outcome<()> {
    let model = cfg.model()?;
    let need = |v: Option<f64>, field: &str| {
        v.ok_or_else(|| ConfigError(format!("missing required setting `{field}` for model `{model}`")))
    };
    let a1 = need(cfg.a1, "a1")?;
    let params = SirParams::new(need(cfg.b, "b")?, need(cfg.h, "h")?)?;
    let (t_star, t_end) = (cfg.day(cfg.t_star()), cfg.day(cfg.t_end()));
    let contact = match model {
        "constant" => ContactRateFn::Constant { a: a1 },
        "piecewise" => ContactRateFn::PiecewiseConstant { a1, a2: need(cfg.a2, "a2")?, t_star },
        "exp-decay" => ContactRateFn::ExpDecay { a1, a2: need(cfg.a2, "a2")?, c: need(cfg.c, "c")?, t_star, t_end },
        other => return Err(config_err(format!("setting `model`: `{other}` cannot be simulated (constant, piecewise, exp-decay)"))),
    };
    let init = match (cfg.i0, cfg.y0) {
        (Some(i0), _) => {
            let s0 = cfg.s0.unwrap_or(1.0 - i0);
            EpidemicState::new(s0, i0, (1.0 - s0 - i0).max(0.0))?
        }
        (None, Some(y0)) => sir::initial_state(y0, &params, a1)?,
        (None, None) => return Err(config_err("missing required setting `y0` (or `i0`) for the initial state")),
    };
    let n_days = cfg.days.unwrap_or(t_end as usize);
    let traj = sir::simulate(&contact, &params, init, &TimeGrid::daily(n_days + 1))?;
    let out = cfg.out_dir();
    data::export_trajectory(&traj, out.join("trajectory.csv"))?;
    let rows: Vec<Vec<f64>> = traj.grid.times().into_iter().zip(sir::model_output(&traj, &params)).map(|(t, y)| vec![t, y]).collect();
    data::export_table(&["t", "y"], &rows, out.join("output.csv"))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// fit

/// Everything later stages need from a fit, written as `report.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub model: String,
    pub region: String,
    pub population: f64,
    pub start: NaiveDate,
    pub t_star: NaiveDate,
    pub t_end: NaiveDate,
    pub fit: FitResult,
}

impl FitReport {
    pub fn read(path: &Path) -> Outcome<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("setting `report`: cannot read fit report {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| config_err(format!("setting `report`: {} is not a fit report: {e}", path.display())))
    }

    fn series(&self, input: &Path, start: NaiveDate, end: NaiveDate) -> Outcome<ObservationSeries> {
        let all = data::ingest_dpc_csv(input, &self.region, self.population)?;
        Ok(data::window(&all, start, end)?)
    }
}

fn lockdown_series(cfg: &RunConfig) -> Outcome<ObservationSeries> {
    let all = data::ingest_dpc_csv(cfg.input()?, cfg.region(), cfg.population()?)?;
    Ok(data::window(&all, cfg.start(), cfg.t_end().pred_opt().expect("date after start"))?)
}

pub fn fit(cfg: &RunConfig) -> Outcome<FitReport> {
    let model = cfg.model()?.to_string();
    let series = lockdown_series(cfg)?;
    let (t_star, t_end) = (cfg.day(cfg.t_star()), cfg.day(cfg.t_end()));
    let fit = match model.as_str() {
        "piecewise" => estimation::fit_piecewise(&series, t_star)?,
        "exp-decay" => estimation::fit_exp_decay(&series, t_star, t_end)?,
        "piecewise-k" => {
            let layout = match cfg.pieces.unwrap_or(8) {
                2 => Breakpoints::FreeSwitch,
                k => Breakpoints::Uniform { count: k, end: t_end },
            };
            estimation::fit_piecewise_k(&series, &layout)?
        }
        "nonparametric" => nonparametric(cfg, &series, t_star, t_end)?,
        other => {
            return Err(config_err(format!(
                "setting `model`: unknown estimator `{other}` (piecewise, exp-decay, nonparametric, piecewise-k)"
            )))
        }
    };
    if !fit.converged {
        eprintln!("warning: refinement schedule ended before meeting its tolerance");
    }
    let report = FitReport {
        model,
        region: cfg.region().to_string(),
        population: series.population,
        start: cfg.start(),
        t_star: cfg.t_star(),
        t_end: cfg.t_end(),
        fit,
    };
    write_fit_outputs(&cfg.out_dir(), &series, &report.fit)?;
    write_json(&cfg.out_dir().join("report.json"), &report)?;
    Ok(report)
}

fn kernel_for(cfg: &RunConfig, seed_fit: &FitResult) -> Outcome<Kernel> {
    let need = |v: Option<f64>, field: &str| v.ok_or_else(|| ConfigError(format!("missing required setting `{field}` for this kernel")));
    Ok(match cfg.kernel.as_deref().unwrap_or("plug-in") {
        "plug-in" => {
            let Theta::Parametric(th) = &seed_fit.theta else { unreachable!("exp-decay fit is parametric") };
            estimation::plug_in_stable_spline(th)?
        }
        "stable-spline" => Kernel::stable_spline(need(cfg.kernel_lambda, "kernel_lambda")?, need(cfg.kernel_alpha, "kernel_alpha")?)?,
        "laplacian" => Kernel::laplacian(need(cfg.kernel_lambda, "kernel_lambda")?, need(cfg.kernel_eta, "kernel_eta")?)?,
        other => return Err(config_err(format!("setting `kernel`: unknown kernel `{other}` (plug-in, stable-spline, laplacian)"))),
    })
}

/// Regularized fit seeded by the exponential-decay estimate.
fn nonparametric(cfg: &RunConfig, series: &ObservationSeries, t_star: f64, t_end: f64) -> Outcome<FitResult> {
    let seed_fit = estimation::fit_exp_decay(series, t_star, t_end)?;
    let kernel = kernel_for(cfg, &seed_fit)?;
    let mut setup = NonparSetup::from_parametric(&seed_fit);
    setup.schedule = cfg.schedule()?;
    Ok(estimation::fit_nonparametric(series, &kernel, &setup)?)
}

fn write_fit_outputs(out: &Path, series: &ObservationSeries, fit: &FitResult) -> Outcome<()> {
    let times = days(series.len());
    let rates = fit.rate_series(&times)?;
    let gammas = fit.gamma_series(&times)?;
    let rows: Vec<FitRow> = (0..series.len())
        .map(|k| FitRow { t: times[k], y_observed: series.y[k], y_fitted: fit.fitted[k], a_hat: rates[k], gamma_hat: gammas[k] })
        .collect();
    data::export_fit(&rows, out.join("fit.csv"))?;
    if !fit.refinement.is_empty() {
        let rows: Vec<Vec<f64>> = fit
            .refinement
            .iter()
            .map(|s| vec![s.m as f64, s.objective, s.change.unwrap_or(f64::NAN), s.iterations as f64])
            .collect();
        data::export_table(&["m", "objective", "change", "iterations"], &rows, out.join("refinement.csv"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// mcmc

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub center: f64,
    pub upper: f64,
}

impl Interval {
    fn last_of(band: &CredibleBand) -> Self {
        let k = band.times.len() - 1;
        Interval { lower: band.lower[k], center: band.center[k], upper: band.upper[k] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PilotSummary {
    pub rounds: usize,
    pub scale: f64,
    pub acceptance_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McmcSummary {
    pub iterations: usize,
    pub seed: u64,
    pub acceptance_rate: f64,
    pub retained: usize,
    pub pilot: PilotSummary,
    pub level: f64,
    /// `100·(I + R)` at the end of the window.
    pub total_infected_pct: Interval,
    pub national_total_infected_pct: Option<Interval>,
    pub split_rhat: BTreeMap<String, Option<f64>>,
}

fn priors(cfg: &RunConfig, sero_default: bool) -> Outcome<PriorFlags> {
    let sigma = match cfg.sigma_prior.as_deref().unwrap_or("jeffreys") {
        "jeffreys" => SigmaPrior::Jeffreys,
        "flat" => SigmaPrior::Flat,
        other => return Err(config_err(format!("setting `sigma_prior`: unknown prior `{other}` (jeffreys, flat)"))),
    };
    Ok(PriorFlags { sigma, sero: cfg.sero_prior.unwrap_or(sero_default) })
}

/// Pilot-tuned chain started at the fitted mode, proposal shaped by the
/// Laplace covariance.
fn sample(spec: &PosteriorSpec, start: &[f64], cfg: &RunConfig) -> Outcome<(McmcChain, Tuning)> {
    let d = spec.dim() as f64;
    let seed_cov = spec.laplace_covariance(start)? * (2.38 * 2.38 / d);
    let tuning = bayes::pilot_tune(spec, start, &seed_cov, cfg.target_acceptance(), cfg.pilot_iters(), cfg.seed())?;
    let chain = bayes::metropolis_run(spec, &tuning.state, &tuning.cov, cfg.iters(), cfg.seed().wrapping_add(1 << 32))?;
    Ok((chain, tuning))
}

fn rhat_table(chain: &McmcChain) -> BTreeMap<String, Option<f64>> {
    chain.names.iter().enumerate().map(|(j, n)| (n.clone(), chain.split_rhat(j).filter(|r| r.is_finite()))).collect()
}

fn rate_band(spec: &PosteriorSpec, chain: &McmcChain, times: &[f64], level: f64) -> Outcome<(CredibleBand, CredibleBand)> {
    let a = bayes::credible_band(chain, |p| Ok(times.iter().map(|&t| spec.rate_at(p, t)).collect()), times, level)?;
    let gamma = bayes::credible_band(
        chain,
        |p| {
            let b = spec.unpack(p).0.b;
            Ok(times.iter().map(|&t| spec.rate_at(p, t) / b).collect())
        },
        times,
        level,
    )?;
    Ok((a, gamma))
}

pub fn mcmc(cfg: &RunConfig) -> Outcome<McmcSummary> {
    let report = FitReport::read(&cfg.report())?;
    if !matches!(report.fit.theta, Theta::Nonparametric(_)) {
        return Err(config_err(format!("setting `report`: {} holds a `{}` fit; mcmc needs a nonparametric one", cfg.report().display(), report.model)));
    }
    let series = report.series(cfg.input()?, report.start, report.t_end.pred_opt().expect("date after start"))?;
    if series.len() != report.fit.fitted.len() {
        return Err(config_err(format!(
            "setting `input`: window holds {} observations but the fit used {}",
            series.len(),
            report.fit.fitted.len()
        )));
    }
    let (spec, start) = PosteriorSpec::from_fit(series.clone(), &report.fit, priors(cfg, false)?)?;
    let (chain, tuning) = sample(&spec, &start, cfg)?;
    let level = cfg.level();

    let times = days(report.fit.t_end as usize + 1);
    let (band_a, band_gamma) = rate_band(&spec, &chain, &times, level)?;
    let band_i = bayes::credible_band(&chain, |p| Ok(spec.trajectory(p)?.iter().map(|s| 100.0 * s.i).collect()), &times, level)?;
    let band_ir =
        bayes::credible_band(&chain, |p| Ok(spec.trajectory(p)?.iter().map(|s| 100.0 * (s.i + s.r)).collect()), &times, level)?;

    let national = match &cfg.national_input {
        Some(path) => {
            let all = data::ingest_dpc_csv(path, "Italia", data::ITALY_POPULATION)?;
            let nat = data::window(&all, report.start, report.t_end.pred_opt().expect("date after start"))?;
            let nat_times = days(nat.len());
            let band = bayes::credible_band(
                &chain,
                |p| {
                    let th = spec.unpack(p).0;
                    Ok(data::national_total_infected(th.h, th.b, th.a_pre, &nat)?.into_iter().map(|v| 100.0 * v).collect())
                },
                &nat_times,
                level,
            )?;
            Some(band)
        }
        None => None,
    };

    let summary = McmcSummary {
        iterations: chain.samples.len(),
        seed: cfg.seed(),
        acceptance_rate: chain.acceptance_rate,
        retained: chain.retained().len(),
        pilot: PilotSummary { rounds: tuning.rounds, scale: tuning.scale, acceptance_rate: tuning.acceptance_rate },
        level,
        total_infected_pct: Interval::last_of(&band_ir),
        national_total_infected_pct: national.as_ref().map(Interval::last_of),
        split_rhat: rhat_table(&chain),
    };

    let out = cfg.out_dir();
    chain.export_csv(out.join("chain.csv"))?;
    data::export_band(&band_a, out.join("band_a.csv"))?;
    data::export_band(&band_gamma, out.join("band_gamma.csv"))?;
    data::export_band(&band_i, out.join("band_infected_pct.csv"))?;
    data::export_band(&band_ir, out.join("band_total_infected_pct.csv"))?;
    if let Some(band) = &national {
        data::export_band(band, out.join("band_national_total_infected_pct.csv"))?;
    }
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// post-lockdown

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PostReport {
    pub region: String,
    pub population: f64,
    /// Day 0 of the post-lockdown window.
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub init: EpidemicState,
    pub lambda: f64,
    pub eta: f64,
    pub candidates: Vec<estimation::EtaCandidate>,
    pub constant: FitResult,
    pub fit: FitResult,
    pub acceptance_rate: f64,
}

pub fn post_lockdown(cfg: &RunConfig) -> Outcome<PostReport> {
    let report = FitReport::read(&cfg.report())?;
    let lockdown_days = (report.t_end - report.start).num_days();
    let init = report.fit.simulate(lockdown_days as usize)?.last();
    let series = report.series(cfg.input()?, report.t_end, cfg.post_end())?;
    let post =
        estimation::post_lockdown_fit(&series, init, report.fit.params(), &estimation::default_eta_grid(), &cfg.schedule()?)?;
    let fit = post.fit();
    if !fit.converged {
        eprintln!("warning: refinement schedule ended before meeting its tolerance");
    }

    let (spec, start) = PosteriorSpec::from_fit(series.clone(), fit, priors(cfg, false)?)?;
    let (chain, _) = sample(&spec, &start, cfg)?;
    let times = days(series.len());
    let (band_a, band_gamma) = rate_band(&spec, &chain, &times, cfg.level())?;

    let out = cfg.out_dir();
    write_fit_outputs(&out, &series, fit)?;
    let rows: Vec<Vec<f64>> =
        post.selection.candidates.iter().map(|c| vec![c.eta, c.log_evidence.unwrap_or(f64::NAN)]).collect();
    data::export_table(&["eta", "log_evidence"], &rows, out.join("evidence.csv"))?;
    data::export_band(&band_a, out.join("band_a.csv"))?;
    data::export_band(&band_gamma, out.join("band_gamma.csv"))?;
    let summary = PostReport {
        region: report.region.clone(),
        population: report.population,
        start: report.t_end,
        end: cfg.post_end(),
        init,
        lambda: post.lambda,
        eta: post.selection.eta,
        candidates: post.selection.candidates.clone(),
        constant: post.constant.clone(),
        fit: fit.clone(),
        acceptance_rate: chain.acceptance_rate,
    };
    write_json(&out.join("post_report.json"), &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// reproduce-paper

pub const FIXTURE_ENV: &str = "EPIRKHS_FIXTURE_DIR";
pub const REGIONAL_FILE: &str = "dpc-covid19-ita-regioni.csv";
pub const NATIONAL_FILE: &str = "dpc-covid19-ita-andamento-nazionale.csv";

pub fn fixture_dir() -> PathBuf {
    std::env::var_os(FIXTURE_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("fixtures/dpc"))
}

/// All four estimators, the lockdown posterior with the seroprevalence prior
/// and the post-lockdown stage, each in its own subdirectory.
pub fn reproduce(cfg: &RunConfig) -> Outcome<()> {
    let mut base = cfg.clone();
    let dir = fixture_dir();
    base.input.get_or_insert_with(|| dir.join(REGIONAL_FILE));
    if base.national_input.is_none() && dir.join(NATIONAL_FILE).exists() {
        base.national_input = Some(dir.join(NATIONAL_FILE));
    }
    let root = cfg.out_dir();
    let stage = |name: &str, edit: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        c.out_dir = Some(root.join(name));
        edit(&mut c);
        eprintln!("== {name}");
        c
    };
    fit(&stage("piecewise", &|c| c.model = Some("piecewise".into())))?;
    fit(&stage("piecewise-2", &|c| {
        c.model = Some("piecewise-k".into());
        c.pieces = Some(2);
    }))?;
    fit(&stage("piecewise-8", &|c| {
        c.model = Some("piecewise-k".into());
        c.pieces = Some(8);
    }))?;
    fit(&stage("exp-decay", &|c| c.model = Some("exp-decay".into())))?;
    fit(&stage("nonparametric", &|c| c.model = Some("nonparametric".into())))?;
    let report = root.join("nonparametric").join("report.json");
    mcmc(&stage("mcmc", &|c| {
        c.report = Some(report.clone());
        c.sero_prior.get_or_insert(true);
    }))?;
    post_lockdown(&stage("post-lockdown", &|c| {
        c.report = Some(report.clone());
        c.sero_prior = Some(false);
    }))?;
    Ok(())
}
