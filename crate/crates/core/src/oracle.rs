//! Reference solutions for small instances, computed directly on the primal
//! with a Goldfarb-Idnani active-set solver and checked against KKT.
//!
//! Nothing here goes through the dual assembly or the splitting solver.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{DualLabel, DualQP, LocalKind, MooProblem};

/// Largest `N*M` accepted by [`solve_primal_dense`].
pub const MAX_PRIMAL_VARS: usize = 200;
/// Largest dimension accepted by [`project_dense`].
pub const MAX_PROJECTION_DIM: usize = 50;

const FEAS_TOL: f64 = 1e-10;
const KKT_TOL: f64 = 1e-8;

/// One primal constraint `coeffs' x <= rhs` (or `=` for equalities).
#[derive(Clone, Debug, PartialEq)]
pub struct OracleConstraint {
    pub label: DualLabel,
    pub equality: bool,
    /// `(index, coefficient)` pairs over the flattened plan.
    pub coeffs: Vec<(usize, f64)>,
    pub rhs: f64,
    /// Lagrange multiplier; nonnegative for inequalities.
    pub multiplier: f64,
}

impl OracleConstraint {
    fn lhs(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().map(|&(j, v)| v * x[j]).sum()
    }
}

#[derive(Clone, Debug)]
pub struct OracleSolution {
    pub x: Vec<f64>,
    /// Minimization objective `-a'x + (gamma/2) x'x`.
    pub objective: f64,
    pub constraints: Vec<OracleConstraint>,
    pub kkt_residual: f64,
}

impl OracleSolution {
    pub fn active_set(&self) -> Vec<DualLabel> {
        self.constraints
            .iter()
            .filter(|c| c.equality || c.multiplier > 1e-9)
            .map(|c| c.label)
            .collect()
    }

    pub fn budget_multipliers(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for c in &self.constraints {
            if let DualLabel::Budget(b) = c.label {
                if out.len() <= b {
                    out.resize(b + 1, 0.0);
                }
                out[b] = c.multiplier;
            }
        }
        out
    }

    /// The multipliers laid out as a non-negative dual vector of `dual`.
    /// An equality multiplier goes to `nu+` when positive and `nu-` otherwise.
    pub fn dual_vector(&self, dual: &DualQP) -> Vec<f64> {
        dual.labels()
            .iter()
            .map(|&label| {
                let find = |l: DualLabel| {
                    self.constraints
                        .iter()
                        .find(|c| c.label == l)
                        .map(|c| c.multiplier)
                        .unwrap_or(0.0)
                };
                match label {
                    DualLabel::EqualityPlus(u) => find(DualLabel::EqualityPlus(u)).max(0.0),
                    DualLabel::EqualityMinus(u) => (-find(DualLabel::EqualityPlus(u))).max(0.0),
                    other => find(other),
                }
            })
            .collect()
    }
}

fn problem_constraints(problem: &MooProblem) -> Vec<OracleConstraint> {
    let (n, m) = (problem.num_users(), problem.num_items());
    let mut rows = Vec::new();
    for local in &problem.locals {
        if matches!(local.kind, LocalKind::SimplexEquality) {
            rows.push(OracleConstraint {
                label: DualLabel::EqualityPlus(local.user),
                equality: true,
                coeffs: (0..m).map(|i| (local.user * m + i, 1.0)).collect(),
                rhs: 1.0,
                multiplier: 0.0,
            });
        }
    }
    for (b, budget) in problem.budgets.iter().enumerate() {
        let s = budget.direction.sign();
        let w = problem.budget_weights(b);
        let mut coeffs = Vec::new();
        for u in budget.support(n) {
            for i in 0..m {
                coeffs.push((u * m + i, s * w.get(u, i)));
            }
        }
        rows.push(OracleConstraint {
            label: DualLabel::Budget(b),
            equality: false,
            coeffs,
            rhs: s * budget.bound,
            multiplier: 0.0,
        });
    }
    for (k, local) in problem.locals.iter().enumerate() {
        if matches!(local.kind, LocalKind::SimplexEquality) {
            continue;
        }
        for (r, row) in local.kind.rows(m).into_iter().enumerate() {
            rows.push(OracleConstraint {
                label: DualLabel::LocalRow {
                    user: local.user,
                    local: k,
                    row: r,
                },
                equality: false,
                coeffs: row
                    .coeffs
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| (local.user * m + i, v))
                    .collect(),
                rhs: row.rhs,
                multiplier: 0.0,
            });
        }
    }
    for u in 0..n {
        for i in 0..m {
            rows.push(OracleConstraint {
                label: DualLabel::BoxLower { user: u, item: i },
                equality: false,
                coeffs: vec![(u * m + i, -1.0)],
                rhs: 0.0,
                multiplier: 0.0,
            });
            rows.push(OracleConstraint {
                label: DualLabel::BoxUpper { user: u, item: i },
                equality: false,
                coeffs: vec![(u * m + i, 1.0)],
                rhs: 1.0,
                multiplier: 0.0,
            });
        }
    }
    rows
}

/// Solves `min (1/2) x' diag(q) x + c'x` over `rows` and fills in the multipliers.
fn solve_dense(q_diag: &[f64], c: &[f64], rows: &mut [OracleConstraint]) -> Result<Vec<f64>> {
    let n = c.len();
    let meq = rows.iter().take_while(|r| r.equality).count();
    if rows[meq..].iter().any(|r| r.equality) {
        return Err(Error::OracleFailure("equalities must come first".into()));
    }
    let mut qmat = vec![0.0; n * n];
    for j in 0..n {
        qmat[j * n + j] = q_diag[j];
    }
    let mut amat = vec![0.0; rows.len() * n];
    for (k, row) in rows.iter().enumerate() {
        for &(j, v) in &row.coeffs {
            amat[k * n + j] += v;
        }
    }
    let bvec: Vec<f64> = rows.iter().map(|r| r.rhs).collect();
    let sol = quadprog::solve_qp(&mut qmat, c, &amat, &bvec, meq, false).map_err(|e| {
        if e.contains("infeasible") {
            Error::Infeasible
        } else {
            Error::OracleFailure(e.to_string())
        }
    })?;
    for (row, &l) in rows.iter_mut().zip(&sol.lagr) {
        row.multiplier = l;
    }
    // Equality multipliers come back unsigned; refit each by least squares on
    // stationarity with the other multipliers held fixed.
    let x = sol.sol;
    for k in 0..meq {
        let mut grad: Vec<f64> = (0..n).map(|j| q_diag[j] * x[j] + c[j]).collect();
        for (l, row) in rows.iter().enumerate() {
            if l != k {
                for &(j, v) in &row.coeffs {
                    grad[j] += row.multiplier * v;
                }
            }
        }
        let num: f64 = rows[k].coeffs.iter().map(|&(j, v)| v * grad[j]).sum();
        let den: f64 = rows[k].coeffs.iter().map(|&(_, v)| v * v).sum();
        rows[k].multiplier = -num / den;
    }
    Ok(x)
}

/// Max of primal infeasibility, multiplier sign, complementarity and
/// stationarity `diag(q) x + c + sum_k lambda_k g_k`.
fn kkt(q_diag: &[f64], c: &[f64], x: &[f64], rows: &[OracleConstraint]) -> f64 {
    let mut grad: Vec<f64> = (0..x.len()).map(|j| q_diag[j] * x[j] + c[j]).collect();
    let mut worst: f64 = 0.0;
    for row in rows {
        let slack = row.lhs(x) - row.rhs;
        for &(j, v) in &row.coeffs {
            grad[j] += row.multiplier * v;
        }
        if row.equality {
            worst = worst.max(slack.abs());
        } else {
            worst = worst
                .max(slack)
                .max(-row.multiplier)
                .max((row.multiplier * slack).abs());
        }
    }
    grad.iter().fold(worst, |acc, g| acc.max(g.abs()))
}

/// Exact primal optimum of a small instance, with multipliers for every
/// budget, local row, equality and box bound.
pub fn solve_primal_dense(problem: &MooProblem) -> Result<OracleSolution> {
    let nv = problem.num_vars();
    if nv > MAX_PRIMAL_VARS {
        return Err(Error::TooLarge(nv));
    }
    let gamma = problem.gamma;
    if !(gamma > 0.0) {
        return Err(Error::InvalidProblem("gamma must be positive".into()));
    }
    let q_diag = vec![gamma; nv];
    let c: Vec<f64> = problem
        .p
        .as_slice()
        .iter()
        .zip(problem.q.as_slice())
        .map(|(p, q)| -(p + gamma * q))
        .collect();
    let mut rows = problem_constraints(problem);
    let x = solve_dense(&q_diag, &c, &mut rows)?;
    let residual = kkt(&q_diag, &c, &x, &rows);
    let scale = 1.0 + c.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if residual > KKT_TOL * scale * 100.0 {
        return Err(Error::OracleFailure(format!(
            "KKT residual {:.3e} after active-set solve",
            residual
        )));
    }
    let objective = x
        .iter()
        .zip(&c)
        .map(|(xj, cj)| cj * xj + 0.5 * gamma * xj * xj)
        .sum();
    Ok(OracleSolution {
        x,
        objective,
        constraints: rows,
        kkt_residual: residual,
    })
}

/// Euclidean projection of `v` onto `{x in [0,1]^m : a_k' x <= b_k}`.
pub fn project_dense(v: &[f64], a: &[Vec<f64>], b: &[f64]) -> Result<Vec<f64>> {
    let m = v.len();
    if m > MAX_PROJECTION_DIM {
        return Err(Error::TooLarge(m));
    }
    if a.len() != b.len() || a.iter().any(|r| r.len() != m) {
        return Err(Error::DimensionMismatch("constraint rows do not match point".into()));
    }
    let mut rows: Vec<OracleConstraint> = a
        .iter()
        .zip(b)
        .enumerate()
        .map(|(k, (row, &rhs))| OracleConstraint {
            label: DualLabel::Coordinate(k),
            equality: false,
            coeffs: row.iter().copied().enumerate().collect(),
            rhs,
            multiplier: 0.0,
        })
        .collect();
    for i in 0..m {
        rows.push(OracleConstraint {
            label: DualLabel::BoxLower { user: 0, item: i },
            equality: false,
            coeffs: vec![(i, -1.0)],
            rhs: 0.0,
            multiplier: 0.0,
        });
        rows.push(OracleConstraint {
            label: DualLabel::BoxUpper { user: 0, item: i },
            equality: false,
            coeffs: vec![(i, 1.0)],
            rhs: 1.0,
            multiplier: 0.0,
        });
    }
    let q_diag = vec![1.0; m];
    let c: Vec<f64> = v.iter().map(|x| -x).collect();
    let x = solve_dense(&q_diag, &c, &mut rows)?;
    if rows.iter().any(|r| r.lhs(&x) - r.rhs > FEAS_TOL * 1e3) {
        return Err(Error::Infeasible);
    }
    Ok(x)
}

/// Largest dimension accepted by [`nnqp_enumerate`].
pub const MAX_NNQP_DIM: usize = 24;

/// Minimizer of `(1/2) z'Bz - p'z` over `z >= 0` by enumerating supports of
/// size at most `max_support`: on each support `S` with `B_SS` nonsingular,
/// solve `B_SS z_S = p_S` and keep it if `z_S >= 0` and `(Bz - p)_i >= 0` off
/// `S`. Some optimum is basic, so `max_support >= rank(B)` suffices.
pub fn nnqp_enumerate(b: &DMatrix<f64>, p: &[f64], max_support: usize) -> Result<(Vec<f64>, f64)> {
    let d = p.len();
    if b.nrows() != d || b.ncols() != d {
        return Err(Error::DimensionMismatch(format!("B is {}x{}, p has {}", b.nrows(), b.ncols(), d)));
    }
    if d > MAX_NNQP_DIM {
        return Err(Error::TooLarge(d));
    }
    let scale = 1.0 + b.amax() + p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-9 * scale;
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut support: Vec<usize> = Vec::new();
    let mut consider = |s: &[usize]| {
        let k = s.len();
        let mut z = vec![0.0; d];
        if k > 0 {
            let bs = DMatrix::from_fn(k, k, |i, j| b[(s[i], s[j])]);
            let Some(chol) = bs.clone().cholesky() else { return };
            if chol.l().diagonal().min() < 1e-7 * scale.sqrt() {
                return;
            }
            let zs = chol.solve(&DVector::from_fn(k, |i, _| p[s[i]]));
            if zs.iter().any(|&v| v < -tol) {
                return;
            }
            for (i, &j) in s.iter().enumerate() {
                z[j] = zs[i].max(0.0);
            }
        }
        let bz = b * DVector::from_column_slice(&z);
        if (0..d).any(|i| bz[i] - p[i] < -tol) {
            return;
        }
        let obj: f64 = (0..d).map(|i| 0.5 * z[i] * bz[i] - p[i] * z[i]).sum();
        if best.as_ref().map_or(true, |(_, o)| obj < *o) {
            best = Some((z, obj));
        }
    };
    fn walk(start: usize, d: usize, left: usize, support: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
        f(support);
        if left == 0 {
            return;
        }
        for j in start..d {
            support.push(j);
            walk(j + 1, d, left - 1, support, f);
            support.pop();
        }
    }
    walk(0, d, max_support.min(d), &mut support, &mut consider);
    best.ok_or_else(|| Error::OracleFailure("no support satisfies the optimality conditions".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BudgetWeights, GlobalBudget, LocalConstraintSet, UserItemMatrix};

    #[test]
    fn nnqp_enumeration_examples() {
        let (z, obj) = nnqp_enumerate(&DMatrix::identity(2, 2), &[1.0, -1.0], 2).unwrap();
        assert_eq!(z, vec![1.0, 0.0]);
        assert!((obj + 0.5).abs() < 1e-12);
        // Rank one: any split of z1 + z2 = 1 is optimal; the basic one is found.
        let b = DMatrix::from_element(2, 2, 1.0);
        let (z, obj) = nnqp_enumerate(&b, &[1.0, 1.0], 1).unwrap();
        assert!((z[0] + z[1] - 1.0).abs() < 1e-12);
        assert!((obj + 0.5).abs() < 1e-12);
    }

    #[test]
    fn nnqp_matches_the_splitting_solver() {
        let problem = crate::generate::benchmark_small();
        let dual = crate::pipeline::build_dual(&problem).unwrap();
        let b = dual.dense_b();
        let rank = problem.num_vars();
        let (z, obj) = nnqp_enumerate(&b, dual.p_tilde(), rank).unwrap();
        assert!(dual.kkt_residual(&z) < 1e-8);
        let cfg = crate::solver::SolverConfig {
            eps_abs: 1e-10,
            eps_rel: 1e-10,
            ..Default::default()
        };
        let sol = crate::solver::solve(&dual, &cfg).unwrap();
        assert!((sol.objective - obj).abs() <= 1e-6, "{} vs {}", sol.objective, obj);
    }

    #[test]
    fn inactive_budget_gives_simplex_projection() {
        let mut problem = crate::model::tests::two_by_two();
        problem.budgets[0].bound = 1e6;
        let sol = solve_primal_dense(&problem).unwrap();
        // a = (1.5, 0.2) and (0.1, 1.9): per-user simplex projections.
        let expected = [1.0, 0.0, 0.0, 1.0];
        for (x, e) in sol.x.iter().zip(expected) {
            assert!((x - e).abs() < 1e-10);
        }
        assert!(sol.budget_multipliers()[0].abs() < 1e-12);
    }

    #[test]
    fn binding_budget_satisfies_kkt() {
        let problem = MooProblem {
            gamma: 1.0,
            p: UserItemMatrix::new(1, 2, vec![0.9, 0.8]).unwrap(),
            r: UserItemMatrix::new(1, 2, vec![0.5, 0.1]).unwrap(),
            q: UserItemMatrix::zeros(1, 2),
            budgets: vec![GlobalBudget::at_most(BudgetWeights::Complaint, 0.2)],
            locals: vec![],
        };
        let sol = solve_primal_dense(&problem).unwrap();
        assert!(sol.kkt_residual <= 1e-8);
        assert!(sol.budget_multipliers()[0] > 0.0);
        assert!((problem.budget_lhs(0, &sol.x) - 0.2).abs() < 1e-10);
    }

    #[test]
    fn too_large_is_rejected() {
        let n = 51;
        let problem = MooProblem {
            gamma: 1.0,
            p: UserItemMatrix::zeros(n, 4),
            r: UserItemMatrix::zeros(n, 4),
            q: UserItemMatrix::zeros(n, 4),
            budgets: vec![],
            locals: vec![],
        };
        assert_eq!(solve_primal_dense(&problem).unwrap_err(), Error::TooLarge(204));
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_dense(&[0.2, 0.4], &[], &[]).unwrap(), vec![0.2, 0.4]);
        let x = project_dense(&[2.0, 2.0], &[vec![1.0, 1.0]], &[1.0]).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-12 && (x[1] - 0.5).abs() < 1e-12);
        assert_eq!(
            project_dense(&[0.0, 0.0], &[vec![-1.0, -1.0]], &[-3.0]),
            Err(Error::Infeasible)
        );
    }

    #[test]
    fn multipliers_reproduce_stationarity_point() {
        let mut problem = crate::model::tests::two_by_two();
        problem.budgets[0].bound = 0.25;
        problem.locals.push(LocalConstraintSet {
            user: 1,
            kind: LocalKind::SumCap { items: Some(vec![1]), cap: 0.6 },
        });
        let sol = solve_primal_dense(&problem).unwrap();
        let dual = crate::model::assemble_dual_extended(&problem).unwrap();
        let z = sol.dual_vector(&dual);
        let x = dual.primal_from_stationarity(&z).unwrap();
        for (a, b) in x.iter().zip(&sol.x) {
            assert!((a.clamp(0.0, 1.0) - b).abs() < 1e-6, "{:?} vs {:?}", x, sol.x);
        }
    }
}
