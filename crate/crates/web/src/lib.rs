//! Browser bindings for the forward model and the kernels. Every exported
//! function returns a flat `Float64Array`; the page slices it by stride.
//!
//! The `*_impl` functions hold the logic so they can be tested natively.

use epirkhs::contact::ContactRateFn;
use epirkhs::kernels::{gram_cholesky, uniform_nodes, Kernel};
use epirkhs::sir::{self, SirParams, TimeGrid};
use epirkhs::Result;
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use wasm_bindgen::prelude::*;

/// Contact model chosen on the page.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelInput {
    pub model: u8,
    pub a1: f64,
    pub a2: f64,
    pub c: f64,
    pub t_star: f64,
}

impl ModelInput {
    fn contact(&self, days: usize) -> ContactRateFn {
        match self.model {
            0 => ContactRateFn::Constant { a: self.a1 },
            1 => ContactRateFn::PiecewiseConstant { a1: self.a1, a2: self.a2, t_star: self.t_star },
            _ => ContactRateFn::ExpDecay { a1: self.a1, a2: self.a2, c: self.c, t_star: self.t_star, t_end: days as f64 },
        }
    }
}

/// Daily rows `[t, y, s, a, gamma]` from the equilibrium start through `y0`.
pub fn sir_curves_impl(input: ModelInput, b: f64, h: f64, y0: f64, days: usize) -> Result<Vec<f64>> {
    let params = SirParams::new(b, h)?;
    let contact = input.contact(days);
    contact.validate()?;
    let init = sir::initial_state(y0, &params, input.a1)?;
    let grid = TimeGrid::daily(days + 1);
    let traj = sir::simulate(&contact, &params, init, &grid)?;
    let mut out = Vec::with_capacity(5 * traj.states.len());
    for (k, st) in traj.states.iter().enumerate() {
        let t = grid.t(k);
        let a = contact.rate_at(t)?;
        out.extend_from_slice(&[t, st.i / h, st.s, a, a / b]);
    }
    Ok(out)
}

fn kernel(family: u8, lambda: f64, shape: f64) -> Result<Kernel> {
    if family == 0 {
        Kernel::stable_spline(lambda, shape)
    } else {
        Kernel::laplacian(lambda, shape)
    }
}

/// `K(center, t)` on `points` equispaced instants of `[0, span]`, one block
/// per center.
pub fn kernel_sections_impl(family: u8, lambda: f64, shape: f64, span: f64, centers: &[f64], points: usize) -> Result<Vec<f64>> {
    let k = kernel(family, lambda, shape)?;
    let ts = uniform_nodes(span, points)?;
    Ok(centers.iter().flat_map(|&c| ts.iter().map(move |&t| k.eval(c, t))).collect())
}

/// Zero-mean Gaussian process draws with covariance `K` on `points`
/// equispaced instants of `[0, span]`, one block per draw.
pub fn prior_draws_impl(family: u8, lambda: f64, shape: f64, span: f64, points: usize, count: usize, seed: u64) -> Result<Vec<f64>> {
    let k = kernel(family, lambda, shape)?;
    let ts = uniform_nodes(span, points)?;
    let chol = gram_cholesky(&k.gram(&ts))?;
    let l = chol.l();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count * points);
    for _ in 0..count {
        let z = DVector::from_iterator(points, (0..points).map(|_| StandardNormal.sample(&mut rng)));
        out.extend((&l * z).iter());
    }
    Ok(out)
}

fn js(r: Result<Vec<f64>>) -> std::result::Result<Vec<f64>, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

/// `model`: 0 constant, 1 piecewise constant, 2 exponential decay.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn sir_curves(model: u8, a1: f64, a2: f64, c: f64, t_star: f64, b: f64, h: f64, y0: f64, days: usize) -> std::result::Result<Vec<f64>, JsError> {
    js(sir_curves_impl(ModelInput { model, a1, a2, c, t_star }, b, h, y0, days))
}

/// `family`: 0 stable spline (`shape` = alpha), 1 Laplacian (`shape` = eta).
#[wasm_bindgen]
pub fn kernel_sections(family: u8, lambda: f64, shape: f64, span: f64, centers: Vec<f64>, points: usize) -> std::result::Result<Vec<f64>, JsError> {
    js(kernel_sections_impl(family, lambda, shape, span, &centers, points))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn prior_draws(family: u8, lambda: f64, shape: f64, span: f64, points: usize, count: usize, seed: u64) -> std::result::Result<Vec<f64>, JsError> {
    js(prior_draws_impl(family, lambda, shape, span, points, count, seed))
}
