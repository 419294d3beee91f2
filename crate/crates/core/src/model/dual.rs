//! The non-negative dual of a serving problem.
//!
//! With all constraints written as `G x <= h` and the box split into
//! `-x <= 0` and `x <= 1`, stationarity of the Lagrangian gives
//! `x = (a + A_hat z) / gamma` where the columns of `A_hat` are the negated
//! constraint normals. The dual becomes
//!
//! ```text
//! minimize    (1/2) z' B z - p_tilde' z
//! subject to  z >= 0
//! B = A_hat' A_hat / gamma,   p_tilde = s_tilde - A_hat' a / gamma
//! ```
//!
//! with `s_tilde = -h`. Equalities are carried as a `(+, -)` pair of
//! inequality multipliers so that `z >= 0` stays the only dual constraint.
//! `A_hat` is kept sparse and `B` is only formed on request.

use nalgebra::DMatrix;
use nalgebra_sparse::{coo::CooMatrix, CscMatrix, CsrMatrix};
use std::fmt;
use std::ops::Range;

use super::{LocalKind, MooProblem};
use crate::error::{Error, Result};

/// What a dual coordinate multiplies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DualLabel {
    /// Global budget multiplier (`mu`).
    Budget(usize),
    /// Row `row` of local constraint `local` (index into `MooProblem::locals`).
    LocalRow { user: usize, local: usize, row: usize },
    /// Positive half of a simplex equality multiplier (`nu+`).
    EqualityPlus(usize),
    /// Negative half (`nu-`).
    EqualityMinus(usize),
    /// Multiplier of `x_ui >= 0` (`xi`).
    BoxLower { user: usize, item: usize },
    /// Multiplier of `x_ui <= 1` (`eta`).
    BoxUpper { user: usize, item: usize },
    /// Coordinate of a dual given directly by its matrix.
    Coordinate(usize),
}

impl fmt::Display for DualLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DualLabel::Budget(b) => write!(f, "mu_{}", b),
            DualLabel::LocalRow { user, local, row } => {
                write!(f, "lambda_u{}_l{}_r{}", user, local, row)
            }
            DualLabel::EqualityPlus(u) => write!(f, "nu_plus_{}", u),
            DualLabel::EqualityMinus(u) => write!(f, "nu_minus_{}", u),
            DualLabel::BoxLower { user, item } => write!(f, "xi_{}_{}", user, item),
            DualLabel::BoxUpper { user, item } => write!(f, "eta_{}_{}", user, item),
            DualLabel::Coordinate(k) => write!(f, "z_{}", k),
        }
    }
}

#[derive(Clone, Debug)]
enum Operator {
    Dense(DMatrix<f64>),
    Gram {
        a_hat: CscMatrix<f64>,
        gamma: f64,
        block_size: usize,
    },
}

/// `min (1/2) z'Bz - p_tilde'z  s.t. z >= 0`, with a label per coordinate.
#[derive(Clone, Debug)]
pub struct DualQP {
    operator: Operator,
    p_tilde: Vec<f64>,
    labels: Vec<DualLabel>,
    budget_count: usize,
    objective_weights: Option<Vec<f64>>,
}

impl DualQP {
    /// A dual given directly by `B` and `p_tilde`.
    pub fn from_dense(b: DMatrix<f64>, p_tilde: Vec<f64>) -> Result<Self> {
        let d = p_tilde.len();
        if b.nrows() != d || b.ncols() != d {
            return Err(Error::DimensionMismatch(format!(
                "B is {}x{} but p_tilde has length {}",
                b.nrows(),
                b.ncols(),
                d
            )));
        }
        let scale = b.amax().max(1.0);
        for j in 0..d {
            for k in 0..j {
                if (b[(j, k)] - b[(k, j)]).abs() > 1e-10 * scale {
                    return Err(Error::InvalidProblem(format!(
                        "B is not symmetric at ({}, {})",
                        j, k
                    )));
                }
            }
        }
        if b.iter().chain(&p_tilde).any(|v| !v.is_finite()) {
            return Err(Error::InvalidProblem("non-finite entry in dual".into()));
        }
        Ok(Self {
            operator: Operator::Dense(b),
            p_tilde,
            labels: (0..d).map(DualLabel::Coordinate).collect(),
            budget_count: 0,
            objective_weights: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.p_tilde.len()
    }

    pub fn p_tilde(&self) -> &[f64] {
        &self.p_tilde
    }

    /// Coordinate labels; a bijection onto `0..dim()`.
    pub fn labels(&self) -> &[DualLabel] {
        &self.labels
    }

    pub fn index_of(&self, label: DualLabel) -> Option<usize> {
        self.labels.iter().position(|&l| l == label)
    }

    /// Coordinates holding the global budget multipliers.
    pub fn mu_range(&self) -> Range<usize> {
        0..self.budget_count
    }

    pub fn a_hat(&self) -> Option<&CscMatrix<f64>> {
        match &self.operator {
            Operator::Gram { a_hat, .. } => Some(a_hat),
            Operator::Dense(_) => None,
        }
    }

    pub fn gamma(&self) -> Option<f64> {
        match &self.operator {
            Operator::Gram { gamma, .. } => Some(*gamma),
            Operator::Dense(_) => None,
        }
    }

    /// Items per user block of `A_hat`'s rows, for Gram-form duals.
    pub fn block_size(&self) -> Option<usize> {
        match &self.operator {
            Operator::Gram { block_size, .. } => Some(*block_size),
            Operator::Dense(_) => None,
        }
    }

    pub fn objective_weights(&self) -> Option<&[f64]> {
        self.objective_weights.as_deref()
    }

    /// `B v`.
    pub fn apply_b(&self, v: &[f64]) -> Vec<f64> {
        match &self.operator {
            Operator::Dense(b) => {
                let mut out = vec![0.0; v.len()];
                for (k, &vk) in v.iter().enumerate() {
                    if vk != 0.0 {
                        for (j, o) in out.iter_mut().enumerate() {
                            *o += b[(j, k)] * vk;
                        }
                    }
                }
                out
            }
            Operator::Gram { a_hat, gamma, .. } => {
                let t = a_hat_mul(a_hat, v);
                let mut out = a_hat_t_mul(a_hat, &t);
                for o in &mut out {
                    *o /= gamma;
                }
                out
            }
        }
    }

    /// `B` as a dense matrix.
    pub fn dense_b(&self) -> DMatrix<f64> {
        match &self.operator {
            Operator::Dense(b) => b.clone(),
            Operator::Gram { a_hat, gamma, .. } => {
                let d = a_hat.ncols();
                let csr = CsrMatrix::from(a_hat);
                let mut b = DMatrix::zeros(d, d);
                for row in csr.row_iter() {
                    let cols = row.col_indices();
                    let vals = row.values();
                    for (x, &j) in cols.iter().enumerate() {
                        for (y, &k) in cols.iter().enumerate() {
                            b[(j, k)] += vals[x] * vals[y];
                        }
                    }
                }
                b / *gamma
            }
        }
    }

    /// `(1/2) z'Bz - p_tilde'z`.
    pub fn objective(&self, z: &[f64]) -> f64 {
        let bz = self.apply_b(z);
        z.iter()
            .zip(&bz)
            .zip(&self.p_tilde)
            .map(|((zj, bzj), pj)| 0.5 * zj * bzj - pj * zj)
            .sum()
    }

    /// Gradient `B z - p_tilde`.
    pub fn gradient(&self, z: &[f64]) -> Vec<f64> {
        let mut g = self.apply_b(z);
        for (gj, pj) in g.iter_mut().zip(&self.p_tilde) {
            *gj -= pj;
        }
        g
    }

    /// Natural KKT residual `max_j |min(z_j, (Bz - p_tilde)_j)|` of the
    /// non-negative QP; zero exactly at optimal `z`.
    pub fn kkt_residual(&self, z: &[f64]) -> f64 {
        let g = self.gradient(z);
        z.iter()
            .zip(&g)
            .map(|(&zj, &gj)| zj.min(gj).abs())
            .fold(0.0, f64::max)
    }

    /// `(a + A_hat z) / gamma`: the unprojected stationarity point.
    pub fn primal_from_stationarity(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "dual vector has length {}, expected {}",
                z.len(),
                self.dim()
            )));
        }
        let (a_hat, gamma) = match &self.operator {
            Operator::Gram { a_hat, gamma, .. } => (a_hat, *gamma),
            Operator::Dense(_) => {
                return Err(Error::UnsupportedLayout(
                    "dual was given by its matrix; no primal map available".into(),
                ))
            }
        };
        let a = self
            .objective_weights
            .as_ref()
            .expect("Gram duals carry their objective weights");
        let az = a_hat_mul(a_hat, z);
        Ok(a.iter().zip(&az).map(|(aj, t)| (aj + t) / gamma).collect())
    }

    /// Constant linking dual and primal optima: the minimum of
    /// `-a'x + (gamma/2)|x|^2` equals `-(dual minimum) - |a|^2 / (2 gamma)`.
    pub fn primal_offset(&self) -> Option<f64> {
        let gamma = self.gamma()?;
        let a = self.objective_weights.as_ref()?;
        Some(a.iter().map(|v| v * v).sum::<f64>() / (2.0 * gamma))
    }
}

/// `A_hat v` (length = number of primal coordinates).
pub(crate) fn a_hat_mul(a_hat: &CscMatrix<f64>, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a_hat.nrows()];
    for (j, col) in a_hat.col_iter().enumerate() {
        let vj = v[j];
        if vj == 0.0 {
            continue;
        }
        for (&row, &val) in col.row_indices().iter().zip(col.values()) {
            out[row] += val * vj;
        }
    }
    out
}

/// `A_hat' y` (length = dual dimension).
pub(crate) fn a_hat_t_mul(a_hat: &CscMatrix<f64>, y: &[f64]) -> Vec<f64> {
    a_hat
        .col_iter()
        .map(|col| {
            col.row_indices()
                .iter()
                .zip(col.values())
                .map(|(&row, &val)| val * y[row])
                .sum()
        })
        .collect()
}

fn check_structure(problem: &MooProblem) -> Result<()> {
    let (n, m) = (problem.num_users(), problem.num_items());
    if !(problem.gamma > 0.0) || !problem.gamma.is_finite() {
        return Err(Error::InvalidProblem("gamma must be positive".into()));
    }
    for mat in [&problem.r, &problem.q] {
        if mat.users() != n || mat.items() != m {
            return Err(Error::DimensionMismatch(
                "p, r and q must share a shape".into(),
            ));
        }
    }
    for (b, budget) in problem.budgets.iter().enumerate() {
        if !budget.bound.is_finite() {
            return Err(Error::InvalidProblem(format!(
                "budget {} has a non-finite bound",
                b
            )));
        }
        let w = problem.budget_weights(b);
        if w.users() != n || w.items() != m {
            return Err(Error::DimensionMismatch(format!(
                "budget {} weights do not match the problem shape",
                b
            )));
        }
        if budget.support(n).iter().any(|&u| u >= n) {
            return Err(Error::InvalidProblem(format!(
                "budget {} references an unknown user",
                b
            )));
        }
    }
    for local in &problem.locals {
        if local.user >= n {
            return Err(Error::InvalidProblem(format!(
                "local constraint references unknown user {}",
                local.user
            )));
        }
    }
    Ok(())
}

/// Assembles the dual for the budget + simplex-equality + box layout.
///
/// Coordinates are ordered `(mu, nu+, nu-, xi, eta)`; `nu` covers the users
/// that carry a simplex equality, so a problem where every user has one has
/// dimension `budgets + 2N + 2NM`. Any other local constraint is rejected;
/// see [`assemble_dual_extended`].
pub fn assemble_dual(problem: &MooProblem) -> Result<DualQP> {
    if let Some(local) = problem
        .locals
        .iter()
        .find(|l| !matches!(l.kind, LocalKind::SimplexEquality))
    {
        return Err(Error::UnsupportedLayout(format!(
            "user {} has a local constraint other than a simplex equality",
            local.user
        )));
    }
    build(problem)
}

/// Like [`assemble_dual`], but also dualizes every other local constraint
/// row (caps, floors, general rows), placed between the budget block and the
/// equality block.
pub fn assemble_dual_extended(problem: &MooProblem) -> Result<DualQP> {
    build(problem)
}

fn build(problem: &MooProblem) -> Result<DualQP> {
    check_structure(problem)?;
    let (n, m) = (problem.num_users(), problem.num_items());
    let nm = n * m;
    let gamma = problem.gamma;

    let mut labels = Vec::new();
    let mut s_tilde = Vec::new();
    let mut coo = CooMatrix::new(nm, 0);
    let mut entries: Vec<(usize, usize, f64)> = Vec::new();
    let mut col = 0usize;

    for (b, budget) in problem.budgets.iter().enumerate() {
        let sign = budget.direction.sign();
        let w = problem.budget_weights(b);
        for u in budget.support(n) {
            for i in 0..m {
                let wv = w.get(u, i);
                if wv != 0.0 {
                    entries.push((u * m + i, col, -sign * wv));
                }
            }
        }
        labels.push(DualLabel::Budget(b));
        s_tilde.push(-sign * budget.bound);
        col += 1;
    }

    let mut simplex_users = Vec::new();
    for (k, local) in problem.locals.iter().enumerate() {
        if matches!(local.kind, LocalKind::SimplexEquality) {
            simplex_users.push(local.user);
            continue;
        }
        for (row_index, row) in local.kind.rows(m).into_iter().enumerate() {
            for (i, &g) in row.coeffs.iter().enumerate() {
                if g != 0.0 {
                    entries.push((local.user * m + i, col, -g));
                }
            }
            labels.push(DualLabel::LocalRow {
                user: local.user,
                local: k,
                row: row_index,
            });
            s_tilde.push(-row.rhs);
            col += 1;
        }
    }

    for (sign, make) in [
        (-1.0, DualLabel::EqualityPlus as fn(usize) -> DualLabel),
        (1.0, DualLabel::EqualityMinus as fn(usize) -> DualLabel),
    ] {
        for &u in &simplex_users {
            for i in 0..m {
                entries.push((u * m + i, col, sign));
            }
            labels.push(make(u));
            // nu+ pairs with -1, nu- with +1.
            s_tilde.push(sign);
            col += 1;
        }
    }

    for u in 0..n {
        for i in 0..m {
            entries.push((u * m + i, col, 1.0));
            labels.push(DualLabel::BoxLower { user: u, item: i });
            s_tilde.push(0.0);
            col += 1;
        }
    }
    for u in 0..n {
        for i in 0..m {
            entries.push((u * m + i, col, -1.0));
            labels.push(DualLabel::BoxUpper { user: u, item: i });
            s_tilde.push(-1.0);
            col += 1;
        }
    }

    coo = {
        let mut grown = CooMatrix::new(nm, col);
        for (r, c, v) in entries {
            grown.push(r, c, v);
        }
        drop(coo);
        grown
    };
    let a_hat = CscMatrix::from(&coo);

    let a = problem.objective_weights().into_vec();
    let at_a = a_hat_t_mul(&a_hat, &a);
    let p_tilde = s_tilde
        .iter()
        .zip(&at_a)
        .map(|(s, t)| s - t / gamma)
        .collect();

    Ok(DualQP {
        operator: Operator::Gram {
            a_hat,
            gamma,
            block_size: m,
        },
        p_tilde,
        labels,
        budget_count: problem.budgets.len(),
        objective_weights: Some(a),
    })
}

/// `(a + A_hat z) / gamma` for the dual layout of `problem` (the extended
/// layout when the problem has locals beyond simplex equalities).
pub fn primal_from_dual_stationarity(problem: &MooProblem, z: &[f64]) -> Result<Vec<f64>> {
    let dual = assemble_dual_extended(problem)?;
    dual.primal_from_stationarity(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BudgetWeights, GlobalBudget, LocalConstraintSet, UserItemMatrix};

    fn scalar_instance() -> MooProblem {
        MooProblem {
            gamma: 1.0,
            p: UserItemMatrix::new(1, 1, vec![0.5]).unwrap(),
            r: UserItemMatrix::new(1, 1, vec![0.2]).unwrap(),
            q: UserItemMatrix::zeros(1, 1),
            budgets: vec![GlobalBudget::at_most(BudgetWeights::Complaint, 0.1)],
            locals: vec![LocalConstraintSet {
                user: 0,
                kind: LocalKind::SimplexEquality,
            }],
        }
    }

    #[test]
    fn scalar_instance_matches_hand_multiplication() {
        // A_hat = [-0.2, -1, 1, 1, -1]
        let dual = assemble_dual(&scalar_instance()).unwrap();
        assert_eq!(dual.dim(), 5);
        let b = dual.dense_b();
        assert!((b[(0, 0)] - 0.04).abs() < 1e-15);
        assert!((b[(0, 1)] - 0.2).abs() < 1e-15);
        assert!((b[(1, 2)] + 1.0).abs() < 1e-15);
        assert!((b[(4, 4)] - 1.0).abs() < 1e-15);
        // p_tilde[0] = -R - (-r) a / gamma = -0.1 + 0.2 * 0.5
        assert!(dual.p_tilde()[0].abs() < 1e-15);
        // p_tilde = s_tilde - A_hat' a: (-1 + 0.5, 1 - 0.5, -0.5, -1 + 0.5)
        let expected = [0.0, -0.5, 0.5, -0.5, -0.5];
        for (got, want) in dual.p_tilde().iter().zip(expected) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn layout_dimension_and_labels() {
        let problem = crate::model::tests::two_by_two();
        let dual = assemble_dual(&problem).unwrap();
        assert_eq!(dual.dim(), 1 + 2 * 2 + 2 * 4);
        assert_eq!(dual.labels()[0], DualLabel::Budget(0));
        assert_eq!(dual.labels()[1], DualLabel::EqualityPlus(0));
        assert_eq!(dual.labels()[3], DualLabel::EqualityMinus(0));
        assert_eq!(dual.labels()[5], DualLabel::BoxLower { user: 0, item: 0 });
        assert_eq!(
            dual.labels()[12],
            DualLabel::BoxUpper { user: 1, item: 1 }
        );
        let mut seen = std::collections::HashSet::new();
        assert!(dual.labels().iter().all(|l| seen.insert(*l)));
    }

    #[test]
    fn strict_assembly_rejects_caps() {
        let mut problem = scalar_instance();
        problem.locals[0].kind = LocalKind::SumCap {
            items: None,
            cap: 1.0,
        };
        assert!(matches!(
            assemble_dual(&problem),
            Err(Error::UnsupportedLayout(_))
        ));
        let dual = assemble_dual_extended(&problem).unwrap();
        assert_eq!(dual.labels()[1], DualLabel::LocalRow { user: 0, local: 0, row: 0 });
        assert_eq!(dual.dim(), 1 + 1 + 2);
    }

    #[test]
    fn zero_duals_give_scaled_weights() {
        let mut problem = crate::model::tests::two_by_two();
        let dual = assemble_dual(&problem).unwrap();
        let z = vec![0.0; dual.dim()];
        let x = dual.primal_from_stationarity(&z).unwrap();
        let a = problem.objective_weights();
        for (xj, aj) in x.iter().zip(a.as_slice()) {
            assert!((xj - aj).abs() < 1e-15);
        }
        problem.gamma = 2.0;
        let dual2 = assemble_dual(&problem).unwrap();
        let z2 = vec![0.3; dual2.dim()];
        let x2 = dual2.primal_from_stationarity(&z2).unwrap();
        // (a + A z) at gamma = 2 is halved relative to gamma = 1 with the same a + A z.
        let a2 = problem.objective_weights();
        let az = a_hat_mul(dual2.a_hat().unwrap(), &z2);
        for j in 0..x2.len() {
            assert!((x2[j] - (a2.as_slice()[j] + az[j]) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn wrong_dimension_is_rejected() {
        let problem = crate::model::tests::two_by_two();
        assert!(matches!(
            primal_from_dual_stationarity(&problem, &[0.0; 3]),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn dense_dual_must_be_symmetric() {
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(DualQP::from_dense(b, vec![0.0, 0.0]).is_err());
    }
}
