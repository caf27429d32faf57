//! Run configuration: a flat TOML document overlaid by command-line flags.

use std::fmt;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use clap::Args;
use epirkhs::data;
use epirkhs::estimation::RefinementSchedule;
use serde::Deserialize;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn missing(field: &str) -> ConfigError {
    ConfigError(format!("missing required setting `{field}`"))
}

fn out_of_range(field: &str, detail: impl fmt::Display) -> ConfigError {
    ConfigError(format!("setting `{field}` out of range: {detail}"))
}

/// Every setting, each optional so that file and flags can be layered.
/// Keys in the file use the flag names with `_` for `-`.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Flat TOML file with default settings; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    /// Civil Protection CSV (regional file, or the national file with region `Italia`).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// National CSV for the nationwide projection in `mcmc`.
    #[arg(long)]
    pub national_input: Option<PathBuf>,
    #[arg(long)]
    pub region: Option<String>,
    #[arg(long)]
    pub population: Option<f64>,

    /// First day of the analysed window (day 0).
    #[arg(long)]
    pub start: Option<NaiveDate>,
    /// Lockdown start.
    #[arg(long)]
    pub t_star: Option<NaiveDate>,
    /// Lockdown end; the lockdown window stops the day before.
    #[arg(long)]
    pub t_end: Option<NaiveDate>,
    /// Last day of the post-lockdown window.
    #[arg(long)]
    pub post_end: Option<NaiveDate>,

    /// piecewise | exp-decay | nonparametric | piecewise-k (fits);
    /// constant | piecewise | exp-decay (simulate).
    #[arg(long)]
    pub model: Option<String>,
    /// Interval count for `piecewise-k`; 2 uses a free switching day.
    #[arg(long)]
    pub pieces: Option<usize>,
    /// plug-in | stable-spline | laplacian
    #[arg(long)]
    pub kernel: Option<String>,
    #[arg(long)]
    pub kernel_lambda: Option<f64>,
    #[arg(long)]
    pub kernel_alpha: Option<f64>,
    #[arg(long)]
    pub kernel_eta: Option<f64>,
    /// Node counts of the refinement schedule, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub m_values: Option<Vec<usize>>,
    #[arg(long)]
    pub refine_tol: Option<f64>,

    /// Metropolis iterations after tuning.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub pilot_iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub target_acceptance: Option<f64>,
    /// Credible level of the exported bands.
    #[arg(long)]
    pub level: Option<f64>,
    /// Exponential prior (mean 7.5) on the infected percentage at t_end.
    #[arg(long)]
    pub sero_prior: Option<bool>,
    /// jeffreys | flat
    #[arg(long)]
    pub sigma_prior: Option<String>,

    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Lockdown fit report consumed by `mcmc` and `post-lockdown`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Worker threads; defaults to the available cores.
    #[arg(long)]
    pub threads: Option<usize>,

    // forward simulation
    #[arg(long)]
    pub a1: Option<f64>,
    #[arg(long)]
    pub a2: Option<f64>,
    #[arg(long)]
    pub b: Option<f64>,
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long)]
    pub h: Option<f64>,
    /// First normalized observation; selects the equilibrium initial state.
    #[arg(long)]
    pub y0: Option<f64>,
    /// Initial infected fraction; selects a fixed initial state.
    #[arg(long)]
    pub i0: Option<f64>,
    #[arg(long)]
    pub s0: Option<f64>,
    #[arg(long)]
    pub days: Option<usize>,
}

macro_rules! overlay {
    ($hi:ident, $lo:ident; $($f:ident),* $(,)?) => {
        $( if $hi.$f.is_none() { $hi.$f = $lo.$f; } )*
    };
}

impl RunConfig {
    /// Flags overlaid on the file named by `--config`, if any.
    pub fn load(mut self) -> Result<Self, ConfigError> {
        let Some(path) = self.config.clone() else {
            self.validate()?;
            return Ok(self);
        };
        let mut file = Self::from_file(&path)?;
        if let Some(dir) = path.parent() {
            file.rebase(dir);
        }
        overlay!(self, file;
            input, national_input, region, population, start, t_star, t_end, post_end, model, pieces, kernel,
            kernel_lambda, kernel_alpha, kernel_eta, m_values, refine_tol, iters, pilot_iters, seed,
            target_acceptance, level, sero_prior, sigma_prior, out_dir, report, threads, a1, a2, b, c, h, y0,
            i0, s0, days,
        );
        self.validate()?;
        Ok(self)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))
    }

    /// Relative paths in a file are taken relative to the file.
    fn rebase(&mut self, dir: &Path) {
        for p in [&mut self.input, &mut self.national_input, &mut self.out_dir, &mut self.report].into_iter().flatten() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let start = self.start();
        for (name, d) in [("t_star", self.t_star), ("t_end", self.t_end), ("post_end", self.post_end)] {
            if let Some(d) = d {
                if d < start {
                    return Err(out_of_range(name, format!("{d} precedes start {start}")));
                }
            }
        }
        if self.t_star() >= self.t_end() {
            return Err(out_of_range("t_end", format!("{} must follow t_star {}", self.t_end(), self.t_star())));
        }
        if let Some(pe) = self.post_end {
            if pe < self.t_end() {
                return Err(out_of_range("post_end", format!("{pe} precedes t_end {}", self.t_end())));
            }
        }
        if let Some(p) = self.population {
            if !(p >= 1.0 && p.is_finite()) {
                return Err(out_of_range("population", p));
            }
        }
        if let Some(k) = self.pieces {
            if !(1..=64).contains(&k) {
                return Err(out_of_range("pieces", format!("{k} not in 1..=64")));
            }
        }
        let positive = [
            ("kernel_lambda", self.kernel_lambda),
            ("kernel_eta", self.kernel_eta),
            ("refine_tol", self.refine_tol),
            ("b", self.b),
            ("h", self.h),
        ];
        for (name, v) in positive {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(out_of_range(name, format!("{v} must be positive")));
                }
            }
        }
        for (name, v) in [("a1", self.a1), ("a2", self.a2), ("c", self.c), ("y0", self.y0)] {
            if let Some(v) = v {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(out_of_range(name, format!("{v} must be nonnegative")));
                }
            }
        }
        for (name, v) in [("i0", self.i0), ("s0", self.s0)] {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(out_of_range(name, format!("{v} not in [0, 1]")));
                }
            }
        }
        if let Some(a) = self.kernel_alpha {
            if !(a > 0.0 && a < 1.0) {
                return Err(out_of_range("kernel_alpha", format!("{a} not in (0, 1)")));
            }
        }
        if let Some(r) = self.target_acceptance {
            if !(r > 0.1 && r < 0.9) {
                return Err(out_of_range("target_acceptance", format!("{r} not in (0.1, 0.9)")));
            }
        }
        if let Some(l) = self.level {
            if !(l > 0.0 && l < 1.0) {
                return Err(out_of_range("level", format!("{l} not in (0, 1)")));
            }
        }
        if self.pilot_iters == Some(0) {
            return Err(out_of_range("pilot_iters", 0));
        }
        if self.threads == Some(0) {
            return Err(out_of_range("threads", 0));
        }
        self.schedule()?;
        Ok(())
    }

    pub fn input(&self) -> Result<&Path, ConfigError> {
        self.input.as_deref().ok_or_else(|| missing("input"))
    }

    pub fn region(&self) -> &str {
        self.region.as_deref().unwrap_or("Lombardia")
    }

    pub fn population(&self) -> Result<f64, ConfigError> {
        match (self.population, self.region()) {
            (Some(p), _) => Ok(p),
            (None, "Lombardia") => Ok(data::LOMBARDY_POPULATION),
            (None, "Italia") => Ok(data::ITALY_POPULATION),
            (None, _) => Err(missing("population")),
        }
    }

    pub fn start(&self) -> NaiveDate {
        self.start.unwrap_or(date(2020, 3, 1))
    }

    pub fn t_star(&self) -> NaiveDate {
        self.t_star.unwrap_or(date(2020, 3, 9))
    }

    pub fn t_end(&self) -> NaiveDate {
        self.t_end.unwrap_or(date(2020, 5, 18))
    }

    pub fn post_end(&self) -> NaiveDate {
        self.post_end.unwrap_or(date(2020, 8, 17))
    }

    /// Whole days from `start`.
    pub fn day(&self, d: NaiveDate) -> f64 {
        (d - self.start()).num_days() as f64
    }

    pub fn model(&self) -> Result<&str, ConfigError> {
        self.model.as_deref().ok_or_else(|| missing("model"))
    }

    pub fn schedule(&self) -> Result<RefinementSchedule, ConfigError> {
        let mut s = RefinementSchedule::default();
        if let Some(m) = &self.m_values {
            s.m_values = m.clone();
        }
        if let Some(t) = self.refine_tol {
            s.tol = t;
        }
        s.validate().map_err(|e| out_of_range("m_values", e))?;
        Ok(s)
    }

    pub fn iters(&self) -> usize {
        self.iters.unwrap_or(200_000)
    }

    pub fn pilot_iters(&self) -> usize {
        self.pilot_iters.unwrap_or(2_000)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(1)
    }

    pub fn target_acceptance(&self) -> f64 {
        self.target_acceptance.unwrap_or(0.3)
    }

    pub fn level(&self) -> f64 {
        self.level.unwrap_or(0.95)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn report(&self) -> PathBuf {
        self.report.clone().unwrap_or_else(|| self.out_dir().join("report.json"))
    }
}

fn date(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).expect("valid calendar date")
}
