//! Contact-rate time courses shared by the simulator and the estimators.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::KernelExpansion;

/// Which one-sided limit to take at a breakpoint. Integrators evaluate the
/// rate at the end of a sub-step with [`Side::Left`] so that a jump placed
/// exactly on a step boundary is not smeared into the preceding step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// Anything that can supply a contact rate to the simulator.
pub trait ContactRate {
    fn rate(&self, t: f64, side: Side) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum ContactRateFn {
    Constant {
        a: f64,
    },
    PiecewiseConstant {
        a1: f64,
        a2: f64,
        t_star: f64,
    },
    ExpDecay {
        a1: f64,
        a2: f64,
        c: f64,
        t_star: f64,
        t_end: f64,
    },
    /// `a_pre` before `t_star`, then `f(t - t_star)` up to `t_end`. With
    /// `t_star = 0` the pre-lockdown level is never consulted, which is how
    /// the post-lockdown stage is expressed.
    Nonparametric {
        a_pre: f64,
        f: KernelExpansion,
        t_star: f64,
        t_end: f64,
    },
    /// Pointwise `max(rate, 0)` of the inner model.
    Clamped { inner: Box<ContactRateFn> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParametricTheta {
    pub a1: f64,
    pub a2: f64,
    pub b: f64,
    pub c: f64,
    pub h: f64,
}

impl ParametricTheta {
    pub fn validate(&self) -> Result<()> {
        let ok = self.a1 > 0.0 && self.a2 > 0.0 && self.b > 0.0 && self.c >= 0.0 && self.h > 0.0;
        if !ok || ![self.a1, self.a2, self.b, self.c, self.h].iter().all(|v| v.is_finite()) {
            return Err(Error::Precondition(format!("parametric theta must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn contact(&self, t_star: f64, t_end: f64) -> ContactRateFn {
        ContactRateFn::ExpDecay { a1: self.a1, a2: self.a2, c: self.c, t_star, t_end }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonparTheta {
    pub a_pre: f64,
    pub b: f64,
    pub h: f64,
}

impl NonparTheta {
    pub fn validate(&self) -> Result<()> {
        if !(self.a_pre > 0.0 && self.b > 0.0 && self.h > 0.0) {
            return Err(Error::Precondition(format!("nonparametric theta must be positive: {self:?}")));
        }
        Ok(())
    }
}

impl ContactRateFn {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Precondition(msg));
        match self {
            ContactRateFn::Constant { a } if !(*a > 0.0) => bad(format!("constant rate must be positive, got {a}")),
            ContactRateFn::PiecewiseConstant { a1, a2, .. } if !(*a1 > 0.0 && *a2 > 0.0) => {
                bad(format!("piecewise rates must be positive, got {a1}, {a2}"))
            }
            ContactRateFn::ExpDecay { a1, a2, c, t_star, t_end } => {
                if !(*a1 > 0.0 && *a2 > 0.0 && *c >= 0.0) {
                    bad(format!("exp-decay needs a1, a2 > 0 and c >= 0, got {a1}, {a2}, {c}"))
                } else if !(t_star < t_end) {
                    bad(format!("t_star ({t_star}) must precede t_end ({t_end})"))
                } else {
                    Ok(())
                }
            }
            ContactRateFn::Nonparametric { a_pre, t_star, t_end, .. } => {
                if !(*a_pre > 0.0) {
                    bad(format!("pre-lockdown rate must be positive, got {a_pre}"))
                } else if !(t_star < t_end) {
                    bad(format!("t_star ({t_star}) must precede t_end ({t_end})"))
                } else {
                    Ok(())
                }
            }
            ContactRateFn::Clamped { inner } => inner.validate(),
            _ => Ok(()),
        }
    }

    pub fn rate_at(&self, t: f64) -> Result<f64> {
        self.rate(t, Side::Right)
    }

    pub fn clamp_nonnegative(&self) -> ContactRateFn {
        match self {
            ContactRateFn::Clamped { .. } => self.clone(),
            other => ContactRateFn::Clamped { inner: Box::new(other.clone()) },
        }
    }

    /// Lockdown end, for the models that have one.
    pub fn support_end(&self) -> Option<f64> {
        match self {
            ContactRateFn::ExpDecay { t_end, .. } | ContactRateFn::Nonparametric { t_end, .. } => Some(*t_end),
            ContactRateFn::Clamped { inner } => inner.support_end(),
            _ => None,
        }
    }
}

pub(crate) fn before(t: f64, t_star: f64, side: Side) -> bool {
    match side {
        Side::Right => t < t_star,
        Side::Left => t <= t_star,
    }
}

impl ContactRate for ContactRateFn {
    fn rate(&self, t: f64, side: Side) -> Result<f64> {
        match self {
            ContactRateFn::Constant { a } => Ok(*a),
            ContactRateFn::PiecewiseConstant { a1, a2, t_star } => Ok(if before(t, *t_star, side) { *a1 } else { *a2 }),
            ContactRateFn::ExpDecay { a1, a2, c, t_star, t_end } => {
                if t > *t_end {
                    return Err(Error::OutOfSupport { t, t_end: *t_end });
                }
                Ok(if before(t, *t_star, side) { *a1 } else { a2 * (-c * (t - t_star)).exp() })
            }
            ContactRateFn::Nonparametric { a_pre, f, t_star, t_end } => {
                if t > *t_end {
                    return Err(Error::OutOfSupport { t, t_end: *t_end });
                }
                Ok(if before(t, *t_star, side) { *a_pre } else { f.eval(t - t_star) })
            }
            ContactRateFn::Clamped { inner } => Ok(inner.rate(t, side)?.max(0.0)),
        }
    }
}
