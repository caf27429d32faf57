//! Positive-definite kernels on the time axis and finite kernel-section
//! expansions `f(t) = Σ c_i K(t_i, t)`.
//!
//! Two families are provided. The first-order stable spline
//! `λ·exp(-α·max(t, τ))` generates functions that flatten out before each
//! node and decay exponentially after it, which suits a contact rate that is
//! expected to decline during restrictions. The Laplacian kernel
//! `λ·exp(-|t - τ| / η)` only encodes continuity and is used once the
//! restrictions are lifted.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum Kernel {
    StableSpline { lambda: f64, alpha: f64 },
    Laplacian { lambda: f64, eta: f64 },
}

impl Kernel {
    pub fn stable_spline(lambda: f64, alpha: f64) -> Result<Self> {
        let k = Kernel::StableSpline { lambda, alpha };
        k.validate()?;
        Ok(k)
    }

    pub fn laplacian(lambda: f64, eta: f64) -> Result<Self> {
        let k = Kernel::Laplacian { lambda, eta };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Kernel::StableSpline { lambda, alpha } => {
                if !(alpha > 0.0 && alpha < 1.0) || !(lambda >= 0.0) || !lambda.is_finite() {
                    return Err(Error::Precondition(format!(
                        "stable spline needs 0 < alpha < 1 and lambda >= 0, got alpha = {alpha}, lambda = {lambda}"
                    )));
                }
            }
            Kernel::Laplacian { lambda, eta } => {
                if !(lambda > 0.0 && eta > 0.0) || !lambda.is_finite() || !eta.is_finite() {
                    return Err(Error::Precondition(format!(
                        "laplacian needs lambda > 0 and eta > 0, got lambda = {lambda}, eta = {eta}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn lambda(&self) -> f64 {
        match *self {
            Kernel::StableSpline { lambda, .. } | Kernel::Laplacian { lambda, .. } => lambda,
        }
    }

    /// Same kernel with the scale replaced.
    pub fn with_lambda(&self, lambda: f64) -> Self {
        match *self {
            Kernel::StableSpline { alpha, .. } => Kernel::StableSpline { lambda, alpha },
            Kernel::Laplacian { eta, .. } => Kernel::Laplacian { lambda, eta },
        }
    }

    #[inline]
    pub fn eval(&self, t: f64, tau: f64) -> f64 {
        match *self {
            Kernel::StableSpline { lambda, alpha } => lambda * (-alpha * t.max(tau)).exp(),
            Kernel::Laplacian { lambda, eta } => lambda * (-(t - tau).abs() / eta).exp(),
        }
    }

    /// Gram matrix `K̄_ij = K(t_i, t_j)`.
    pub fn gram(&self, nodes: &[f64]) -> DMatrix<f64> {
        let m = nodes.len();
        let mut g = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..=i {
                let v = self.eval(nodes[i], nodes[j]);
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        g
    }
}

/// `count` equispaced instants covering `[0, span]` inclusive.
pub fn uniform_nodes(span: f64, count: usize) -> Result<Vec<f64>> {
    if count == 0 || !(span > 0.0) {
        return Err(Error::Precondition(format!(
            "uniform grid needs count >= 1 and span > 0, got count = {count}, span = {span}"
        )));
    }
    if count == 1 {
        return Ok(vec![0.0]);
    }
    let step = span / (count - 1) as f64;
    Ok((0..count).map(|i| i as f64 * step).collect())
}

/// Cholesky factor of a Gram matrix. When the plain factorization fails the
/// diagonal is loaded with `1e-10·trace/M`, growing tenfold per retry.
pub fn gram_cholesky(gram: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(ch) = Cholesky::new(gram.clone()) {
        return Ok(ch);
    }
    let m = gram.nrows().max(1) as f64;
    let mut jitter = 1e-10 * gram.trace().abs().max(f64::MIN_POSITIVE) / m;
    for _ in 0..8 {
        let mut g = gram.clone();
        for i in 0..g.nrows() {
            g[(i, i)] += jitter;
        }
        if let Some(ch) = Cholesky::new(g) {
            return Ok(ch);
        }
        jitter *= 10.0;
    }
    Err(Error::Precondition("Gram matrix could not be factorized even with jitter".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelExpansion {
    pub kernel: Kernel,
    pub nodes: Vec<f64>,
    pub coeffs: Vec<f64>,
}

impl KernelExpansion {
    pub fn new(kernel: Kernel, nodes: Vec<f64>, coeffs: Vec<f64>) -> Result<Self> {
        kernel.validate()?;
        if nodes.is_empty() || nodes.len() != coeffs.len() {
            return Err(Error::Precondition(format!(
                "expansion needs M >= 1 nodes and as many coefficients ({} nodes, {} coeffs)",
                nodes.len(),
                coeffs.len()
            )));
        }
        if nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Precondition("expansion nodes must be strictly increasing".into()));
        }
        if nodes.len() > 2 {
            let h = nodes[1] - nodes[0];
            if nodes.windows(2).any(|w| ((w[1] - w[0]) - h).abs() > 1e-9 * h.max(1.0)) {
                return Err(Error::Precondition("expansion nodes must be uniformly spaced".into()));
            }
        }
        Ok(Self { kernel, nodes, coeffs })
    }

    pub fn zeros(kernel: Kernel, nodes: Vec<f64>) -> Result<Self> {
        let m = nodes.len();
        Self::new(kernel, nodes, vec![0.0; m])
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `Σ_i c_i K(t_i, t)`.
    pub fn eval(&self, t: f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.coeffs)
            .map(|(&ti, &ci)| ci * self.kernel.eval(ti, t))
            .sum()
    }

    pub fn is_extrapolating(&self, t: f64) -> bool {
        t < 0.0 || t > *self.nodes.last().unwrap_or(&0.0)
    }

    pub fn gram(&self) -> DMatrix<f64> {
        self.kernel.gram(&self.nodes)
    }

    /// Squared RKHS norm `cᵀ K̄ c` of the expansion.
    pub fn rkhs_norm_sq(&self) -> f64 {
        let c = DVector::from_column_slice(&self.coeffs);
        let g = self.gram();
        c.dot(&(&g * &c))
    }
}
