//! Operator-splitting solver for `min (1/2) z'Bz - p'z  s.t. z >= 0`.
//!
//! Each iteration evaluates the prox of the quadratic, projects onto the
//! orthant and updates the scaled dual:
//!
//! ```text
//! z_half = (B + rho I)^{-1} (p + rho (z - w))
//! z      = (z_half + w)_+
//! w      = w + z_half - z
//! ```
//!
//! Residuals are `r = z_half - z` and `s = -rho (z - z_prev)`; the iteration
//! stops once
//!
//! ```text
//! |r| <= sqrt(d) eps_abs + eps_rel max(|z_half|, |z|)
//! |s| <= sqrt(d) eps_abs + eps_rel |rho w|
//! ```
//!
//! The shifted system is factored once per solve.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{conjugate_gradient, norm2, ShiftedGramFactor};
use crate::model::DualQP;

/// How `(B + rho I) x = b` is solved.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinearSolver {
    /// Block-structured factorization for duals with a sparse `A_hat`,
    /// dense Cholesky otherwise.
    Direct,
    /// Cholesky of the explicitly formed `B + rho I`.
    DenseCholesky,
    /// Conjugate gradients with matrix-free `B v`.
    Iterative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub rho: f64,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iters: usize,
    /// Stop once the relative change of the budget multipliers stays below
    /// this value for 10 consecutive iterations.
    pub approx_mu_tolerance: Option<f64>,
    pub linear_solver: LinearSolver,
    /// Record a trace entry every this many iterations.
    pub trace_every: Option<usize>,
    /// Reuse one factorization across iterations (otherwise refactor each time).
    pub cache_factorization: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            eps_abs: 1e-6,
            eps_rel: 1e-4,
            max_iters: 100_000,
            approx_mu_tolerance: None,
            linear_solver: LinearSolver::Direct,
            trace_every: None,
            cache_factorization: true,
        }
    }
}

impl SolverConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return Err(Error::BadParams("rho must be positive".into()));
        }
        if !(self.eps_abs > 0.0) || !(self.eps_rel > 0.0) {
            return Err(Error::BadParams("tolerances must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::BadParams("max_iters must be at least 1".into()));
        }
        if let Some(t) = self.approx_mu_tolerance {
            if !(t > 0.0) {
                return Err(Error::BadParams("approx_mu_tolerance must be positive".into()));
            }
        }
        if self.trace_every == Some(0) {
            return Err(Error::BadParams("trace_every must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Convergence {
    Full,
    ApproxMu,
    MaxIters,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub r_norm: f64,
    pub s_norm: f64,
    pub mu: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct DualSolution {
    pub z: Vec<f64>,
    pub mu: Vec<f64>,
    pub iterations: usize,
    pub r_norm: f64,
    pub s_norm: f64,
    pub converged: Convergence,
    pub kkt_residual: f64,
    pub objective: f64,
    pub trace: Vec<TraceRecord>,
}

enum Factor {
    Structured(ShiftedGramFactor),
    Dense(Cholesky<f64, Dyn>),
    Iterative,
}

/// `v -> argmin (1/2) x'Bx - p'x + (rho/2)|x - v|^2` with its factorization.
pub struct ProxOperator<'a> {
    dual: &'a DualQP,
    rho: f64,
    factor: Factor,
}

impl<'a> ProxOperator<'a> {
    pub fn new(dual: &'a DualQP, rho: f64, kind: LinearSolver) -> Result<Self> {
        if !(rho > 0.0) {
            return Err(Error::BadParams("rho must be positive".into()));
        }
        let dense = || {
            let d = dual.dim();
            let m = dual.dense_b() + DMatrix::identity(d, d) * rho;
            Cholesky::new(m).map(Factor::Dense).ok_or(Error::SingularSystem)
        };
        let factor = match kind {
            LinearSolver::Direct => match (dual.a_hat(), dual.gamma(), dual.block_size()) {
                (Some(a), Some(gamma), Some(block)) => {
                    Factor::Structured(ShiftedGramFactor::new(a, gamma, rho, block)?)
                }
                _ => dense()?,
            },
            LinearSolver::DenseCholesky => dense()?,
            LinearSolver::Iterative => Factor::Iterative,
        };
        Ok(Self { dual, rho, factor })
    }

    /// `(B + rho I)^{-1} rhs`; `warm` seeds the iterative solver.
    pub fn shifted_solve(&self, rhs: &[f64], warm: Option<&[f64]>) -> Vec<f64> {
        match &self.factor {
            Factor::Structured(f) => f.solve(rhs),
            Factor::Dense(c) => c.solve(&DVector::from_column_slice(rhs)).as_slice().to_vec(),
            Factor::Iterative => {
                let rho = self.rho;
                let apply = |v: &[f64]| {
                    let mut out = self.dual.apply_b(v);
                    for (o, vi) in out.iter_mut().zip(v) {
                        *o += rho * vi;
                    }
                    out
                };
                conjugate_gradient(apply, rhs, warm, 1e-10, 10 * rhs.len().max(10)).0
            }
        }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let rhs: Vec<f64> = self
            .dual
            .p_tilde()
            .iter()
            .zip(v)
            .map(|(p, vi)| p + self.rho * vi)
            .collect();
        self.shifted_solve(&rhs, None)
    }
}

/// Closed-form prox `(B + rho I)^{-1}(p + rho v)`.
pub fn prox_quadratic(dual: &DualQP, rho: f64, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != dual.dim() {
        return Err(Error::DimensionMismatch(format!(
            "prox point has length {}, expected {}",
            v.len(),
            dual.dim()
        )));
    }
    Ok(ProxOperator::new(dual, rho, LinearSolver::Direct)?.apply(v))
}

/// `(|z_half - z_new|, rho |z_new - z_prev|)`.
pub fn residuals(z_half: &[f64], z_new: &[f64], z_prev: &[f64], rho: f64) -> (f64, f64) {
    let mut r = 0.0;
    let mut s = 0.0;
    for i in 0..z_half.len() {
        let a = z_half[i] - z_new[i];
        let b = z_new[i] - z_prev[i];
        r += a * a;
        s += b * b;
    }
    (r.sqrt(), rho * s.sqrt())
}

pub fn kkt_residual(dual: &DualQP, z: &[f64]) -> f64 {
    dual.kkt_residual(z)
}

const APPROX_MU_WINDOW: usize = 10;

pub fn solve(dual: &DualQP, cfg: &SolverConfig) -> Result<DualSolution> {
    cfg.check()?;
    let d = dual.dim();
    let rho = cfg.rho;
    let mu_range = dual.mu_range();
    let mut prox = ProxOperator::new(dual, rho, cfg.linear_solver)?;

    let mut z = vec![0.0; d];
    let mut w = vec![0.0; d];
    let mut z_half = vec![0.0; d];
    let mut rhs = vec![0.0; d];
    let mut trace = Vec::new();
    let sqrt_d = (d as f64).sqrt();
    let mut calm_streak = 0usize;
    let mut r_norm = f64::INFINITY;
    let mut s_norm = f64::INFINITY;
    let mut converged = Convergence::MaxIters;
    let mut iterations = cfg.max_iters;

    for k in 1..=cfg.max_iters {
        if !cfg.cache_factorization && k > 1 {
            prox = ProxOperator::new(dual, rho, cfg.linear_solver)?;
        }
        for i in 0..d {
            rhs[i] = dual.p_tilde()[i] + rho * (z[i] - w[i]);
        }
        z_half = prox.shifted_solve(&rhs, Some(&z_half));
        let z_prev = std::mem::take(&mut z);
        z = z_half
            .iter()
            .zip(&w)
            .map(|(h, wi)| (h + wi).max(0.0))
            .collect();
        for i in 0..d {
            w[i] += z_half[i] - z[i];
        }
        let (r, s) = residuals(&z_half, &z, &z_prev, rho);
        r_norm = r;
        s_norm = s;
        if !r.is_finite() || !s.is_finite() {
            return Err(Error::NumericalDivergence { iteration: k });
        }
        if let Some(every) = cfg.trace_every {
            if k % every == 0 {
                trace.push(TraceRecord {
                    iter: k,
                    r_norm: r,
                    s_norm: s,
                    mu: z[mu_range.clone()].to_vec(),
                });
            }
        }
        let eps_pri = sqrt_d * cfg.eps_abs + cfg.eps_rel * norm2(&z_half).max(norm2(&z));
        let eps_dual = sqrt_d * cfg.eps_abs + cfg.eps_rel * rho * norm2(&w);
        if r <= eps_pri && s <= eps_dual {
            converged = Convergence::Full;
            iterations = k;
            break;
        }
        if let Some(tol) = cfg.approx_mu_tolerance {
            if !mu_range.is_empty() {
                let now = &z[mu_range.clone()];
                let before = &z_prev[mu_range.clone()];
                let change: f64 = now
                    .iter()
                    .zip(before)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                let scale = norm2(now).max(1e-12);
                if change / scale < tol {
                    calm_streak += 1;
                } else {
                    calm_streak = 0;
                }
                if calm_streak >= APPROX_MU_WINDOW {
                    converged = Convergence::ApproxMu;
                    iterations = k;
                    break;
                }
            }
        }
    }

    let kkt = dual.kkt_residual(&z);
    let objective = dual.objective(&z);
    Ok(DualSolution {
        mu: z[mu_range].to_vec(),
        z,
        iterations,
        r_norm,
        s_norm,
        converged,
        kkt_residual: kkt,
        objective,
        trace,
    })
}
