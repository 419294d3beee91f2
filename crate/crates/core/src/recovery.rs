//! Per-user primal recovery from the global budget multipliers.
//!
//! Given `mu`, user `u`'s plan solves `min (gamma/2)|x|^2 - c'x` over its local
//! set, i.e. it is the Euclidean projection of `c/gamma` onto that set, with
//!
//! ```text
//! c_ui = a_ui - sum_b sign_b mu_b w_b,ui
//! ```
//!
//! For a cap `sum x <= K` the projection has the sorted form
//!
//! ```text
//! x_(j) = 1                    j <= t1
//!       = (c_(j) - nu) / gamma t1 < j <= t2
//!       = 0                    j > t2
//! nu    = (gamma (t1 - K) + sum_{t1 < j <= t2} c_(j)) / (t2 - t1)
//! ```

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{dot, DualQP, LinearRow, LocalKind, MooProblem};
use crate::solver::{self, LinearSolver, SolverConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct UserScores {
    pub user: usize,
    pub c: Vec<f64>,
    pub gamma: f64,
}

impl UserScores {
    pub fn new(user: usize, c: Vec<f64>, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::InvalidProblem("gamma must be positive".into()));
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidProblem(format!(
                "non-finite score for user {}",
                user
            )));
        }
        Ok(Self { user, c, gamma })
    }

    /// Scores `a_u - sum_b sign_b mu_b w_b,u` for the budgets covering `user`.
    pub fn from_problem(problem: &MooProblem, user: usize, mu: &[f64]) -> Result<Self> {
        if mu.len() != problem.budgets.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} budget multipliers for {} budgets",
                mu.len(),
                problem.budgets.len()
            )));
        }
        let mut c = problem.objective_weights_row(user);
        for (b, budget) in problem.budgets.iter().enumerate() {
            if mu[b] == 0.0 || !budget.covers(user) {
                continue;
            }
            let w = problem.budget_weights(b).row(user);
            let s = budget.direction.sign() * mu[b];
            for (ci, wi) in c.iter_mut().zip(w) {
                *ci -= s * wi;
            }
        }
        Self::new(user, c, problem.gamma)
    }

    pub fn scaled(&self) -> Vec<f64> {
        self.c.iter().map(|v| v / self.gamma).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServingPlan {
    pub user: usize,
    pub x: Vec<f64>,
    /// Multiplier of the local sum constraint, in the units of `c`.
    pub nu: Option<f64>,
    /// `(t1, t2)`: counts of saturated and of positive entries in sorted order.
    pub pattern: Option<(usize, usize)>,
}

/// Item indices sorted by descending score; ties keep index order.
fn descending_order(c: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..c.len()).collect();
    order.sort_by(|&i, &j| c[j].partial_cmp(&c[i]).expect("finite scores"));
    order
}

fn clip01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

fn check_cap(scores: &UserScores, cap: f64) -> Result<()> {
    if !(cap > 0.0) || !cap.is_finite() {
        return Err(Error::InvalidProblem("cap must be positive".into()));
    }
    if !(scores.gamma > 0.0) {
        return Err(Error::InvalidProblem("gamma must be positive".into()));
    }
    Ok(())
}

fn slack_plan(scores: &UserScores, cap: f64) -> Option<ServingPlan> {
    let x: Vec<f64> = scores.c.iter().map(|c| clip01(c / scores.gamma)).collect();
    if x.iter().sum::<f64>() <= cap {
        let t1 = x.iter().filter(|&&v| v >= 1.0).count();
        let t2 = x.iter().filter(|&&v| v > 0.0).count();
        Some(ServingPlan {
            user: scores.user,
            x,
            nu: Some(0.0),
            pattern: Some((t1, t2)),
        })
    } else {
        None
    }
}

/// Builds the sorted piecewise plan for a pattern and multiplier.
fn pattern_plan(scores: &UserScores, order: &[usize], t1: usize, t2: usize, nu: f64) -> ServingPlan {
    let mut x = vec![0.0; scores.c.len()];
    for (rank, &i) in order.iter().enumerate() {
        x[i] = if rank < t1 {
            1.0
        } else if rank < t2 {
            (scores.c[i] - nu) / scores.gamma
        } else {
            0.0
        };
    }
    ServingPlan {
        user: scores.user,
        x,
        nu: Some(nu),
        pattern: Some((t1, t2)),
    }
}

/// `(gamma (t1 - K) + sum_{t1 < j <= t2} c_(j)) / (t2 - t1)`.
pub fn nu_formula(sorted_c: &[f64], gamma: f64, cap: f64, t1: usize, t2: usize) -> f64 {
    let band: f64 = sorted_c[t1..t2].iter().sum();
    (gamma * (t1 as f64 - cap) + band) / (t2 - t1) as f64
}

/// Window conditions of a pattern, optionally with strict inequalities.
fn window_holds(sorted_c: &[f64], gamma: f64, t1: usize, t2: usize, nu: f64, strict: bool, tol: f64) -> bool {
    let m = sorted_c.len();
    let val = |j: usize| (sorted_c[j] - nu) / gamma;
    let ge = |a: f64, b: f64| if strict { a > b } else { a >= b - tol };
    let le = |a: f64, b: f64| if strict { a < b } else { a <= b + tol };
    if t1 >= 1 && !ge(val(t1 - 1), 1.0) {
        return false;
    }
    if t1 < m && !le(val(t1), 1.0) {
        return false;
    }
    if t2 >= 1 && !ge(val(t2 - 1), 0.0) {
        return false;
    }
    if t2 < m && !le(val(t2), 0.0) {
        return false;
    }
    true
}

/// Closed-form projection of `c/gamma` onto `{0 <= x <= 1, sum x <= cap}`.
///
/// `f(nu) = sum clip((c - nu)/gamma, 0, 1)` is piecewise linear with
/// breakpoints `c_i - gamma` and `c_i`; the first segment on which `f` drops
/// to `cap` fixes `(t1, t2)` and the multiplier.
pub fn recover_capped(scores: &UserScores, cap: f64) -> Result<ServingPlan> {
    check_cap(scores, cap)?;
    if let Some(plan) = slack_plan(scores, cap) {
        return Ok(plan);
    }
    let gamma = scores.gamma;
    let order = descending_order(&scores.c);
    let sorted: Vec<f64> = order.iter().map(|&i| scores.c[i]).collect();
    let f = |nu: f64| -> f64 { sorted.iter().map(|c| clip01((c - nu) / gamma)).sum() };

    let mut breaks: Vec<f64> = sorted
        .iter()
        .flat_map(|&c| [c - gamma, c])
        .filter(|&b| b > 0.0)
        .collect();
    breaks.push(0.0);
    breaks.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    breaks.dedup();

    for w in breaks.windows(2) {
        let hi = w[1];
        if f(hi) > cap {
            continue;
        }
        // f(lo) > cap >= f(hi): the band on (lo, hi) is nonempty.
        let t1 = sorted.iter().filter(|&&c| c - gamma >= hi).count();
        let t2 = sorted.iter().filter(|&&c| c >= hi).count();
        if t2 > t1 {
            let nu = nu_formula(&sorted, gamma, cap, t1, t2);
            let tol = 1e-12 * (1.0 + nu.abs() / gamma);
            if window_holds(&sorted, gamma, t1, t2, nu, false, tol) {
                return Ok(pattern_plan(scores, &order, t1, t2, nu));
            }
        }
        break;
    }
    threshold_fallback(scores, cap)
}

fn threshold_fallback(scores: &UserScores, cap: f64) -> Result<ServingPlan> {
    let v = scores.scaled();
    let (x, tau) = project_sum_box(&v, f64::NEG_INFINITY, cap)?;
    let t1 = x.iter().filter(|&&v| v >= 1.0).count();
    let t2 = x.iter().filter(|&&v| v > 0.0).count();
    if (x.iter().sum::<f64>() - cap).abs() > 1e-9 * cap.max(1.0) {
        return Err(Error::NoValidPattern);
    }
    Ok(ServingPlan {
        user: scores.user,
        x,
        nu: Some(tau * scores.gamma),
        pattern: Some((t1, t2)),
    })
}

/// Literal search over all `(t1, t2)` pairs with `t1 < t2`, returning the
/// first pattern whose multiplier passes the window conditions. With
/// `strict = false` boundary equality (e.g. `(c - nu)/gamma = 1`) is accepted.
pub fn recover_capped_enumerate(scores: &UserScores, cap: f64, strict: bool) -> Result<ServingPlan> {
    check_cap(scores, cap)?;
    if let Some(plan) = slack_plan(scores, cap) {
        return Ok(plan);
    }
    let gamma = scores.gamma;
    let order = descending_order(&scores.c);
    let sorted: Vec<f64> = order.iter().map(|&i| scores.c[i]).collect();
    let m = sorted.len();
    for t1 in 0..m {
        for t2 in t1 + 1..=m {
            let nu = nu_formula(&sorted, gamma, cap, t1, t2);
            if nu < 0.0 {
                continue;
            }
            let tol = 1e-12 * (1.0 + nu.abs() / gamma);
            if window_holds(&sorted, gamma, t1, t2, nu, strict, tol) {
                return Ok(pattern_plan(scores, &order, t1, t2, nu));
            }
        }
    }
    Err(Error::NoValidPattern)
}

/// Euclidean projection of `v` onto `{0 <= x <= 1, lo <= sum x <= hi}`.
///
/// Returns the point and the shift `tau` with `x = clip(v - tau, 0, 1)`;
/// `tau > 0` when the upper sum bound binds and `tau < 0` for the lower one.
pub fn project_sum_box(v: &[f64], lo: f64, hi: f64) -> Result<(Vec<f64>, f64)> {
    let m = v.len() as f64;
    if lo > hi || lo > m || hi < 0.0 {
        return Err(Error::Infeasible);
    }
    let g = |tau: f64| -> f64 { v.iter().map(|x| clip01(x - tau)).sum() };
    let g0 = g(0.0);
    let target = if g0 > hi {
        hi
    } else if g0 < lo {
        lo
    } else {
        return Ok((v.iter().map(|&x| clip01(x)).collect(), 0.0));
    };
    let mut breaks: Vec<f64> = v.iter().flat_map(|&x| [x - 1.0, x]).collect();
    breaks.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    breaks.dedup();
    // g is non-increasing with g(breaks[0]) = m and g(last) = 0.
    let mut tau = breaks[0];
    for w in breaks.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (ga, gb) = (g(a), g(b));
        if gb <= target {
            tau = if ga <= target || ga == gb {
                a
            } else {
                a + (ga - target) * (b - a) / (ga - gb)
            };
            break;
        }
    }
    Ok((v.iter().map(|&x| clip01(x - tau)).collect(), tau))
}

/// Euclidean projection onto `{0 <= x <= 1, sum x <= cap}`.
pub fn project_capped_box(v: &[f64], cap: f64) -> Vec<f64> {
    assert!(cap > 0.0, "cap must be positive");
    project_sum_box(v, f64::NEG_INFINITY, cap)
        .expect("capped box is nonempty")
        .0
}

#[derive(Clone, Debug)]
pub struct PolytopeProjection {
    pub x: Vec<f64>,
    /// Multipliers of the given rows (box multipliers omitted).
    pub multipliers: Vec<f64>,
    pub iterations: usize,
    /// Dual dimension of the inner solve.
    pub dim: usize,
}

const POLYTOPE_TOL: f64 = 1e-10;

/// Euclidean projection of `v` onto `{x in [0,1]^m : row.coeffs' x <= row.rhs}`.
///
/// All rows, box included, are dualized into a non-negative QP solved by the
/// operator-splitting solver; the result is then polished on the detected
/// active set.
pub fn project_polytope(v: &[f64], rows: &[LinearRow]) -> Result<PolytopeProjection> {
    let m = v.len();
    let mut g: Vec<Vec<f64>> = rows.iter().map(|r| r.coeffs.clone()).collect();
    let mut h: Vec<f64> = rows.iter().map(|r| r.rhs).collect();
    if g.iter().any(|r| r.len() != m) {
        return Err(Error::DimensionMismatch("row length does not match point".into()));
    }
    for i in 0..m {
        let mut e = vec![0.0; m];
        e[i] = 1.0;
        g.push(e.clone());
        h.push(1.0);
        e[i] = -1.0;
        g.push(e);
        h.push(0.0);
    }
    let k = g.len();
    let b = DMatrix::from_fn(k, k, |i, j| dot(&g[i], &g[j]));
    let p: Vec<f64> = (0..k).map(|i| dot(&g[i], v) - h[i]).collect();
    let dual = DualQP::from_dense(b, p)?;
    let cfg = SolverConfig {
        eps_abs: POLYTOPE_TOL,
        eps_rel: POLYTOPE_TOL,
        max_iters: 20_000,
        linear_solver: LinearSolver::DenseCholesky,
        ..Default::default()
    };
    let sol = solver::solve(&dual, &cfg)?;
    let primal = |lambda: &[f64]| -> Vec<f64> {
        let mut x = v.to_vec();
        for (row, &l) in g.iter().zip(lambda) {
            if l != 0.0 {
                for (xi, gi) in x.iter_mut().zip(row) {
                    *xi -= l * gi;
                }
            }
        }
        x
    };
    let violation = |x: &[f64]| -> f64 {
        g.iter()
            .zip(&h)
            .map(|(row, &hi)| dot(row, x) - hi)
            .fold(0.0, f64::max)
    };
    let mut lambda = sol.z.clone();
    let mut x = primal(&lambda);

    // Polish: equality projection onto the rows with positive multipliers,
    // adding violated rows until the point is feasible.
    let scale = lambda.iter().fold(1.0f64, |a, &b| a.max(b));
    let mut active: Vec<usize> = (0..k).filter(|&i| lambda[i] > 1e-7 * scale).collect();
    for _ in 0..k {
        let Some((xp, lp)) = equality_projection(v, &g, &h, &active) else {
            break;
        };
        let worst = (0..k)
            .filter(|i| !active.contains(i))
            .map(|i| (i, dot(&g[i], &xp) - h[i]))
            .fold((usize::MAX, 1e-12), |acc, (i, s)| if s > acc.1 { (i, s) } else { acc });
        if worst.0 == usize::MAX {
            if lp.iter().all(|&l| l >= -1e-9) {
                x = xp;
                lambda = vec![0.0; k];
                for (&i, &l) in active.iter().zip(&lp) {
                    lambda[i] = l.max(0.0);
                }
            }
            break;
        }
        active.push(worst.0);
        active.sort_unstable();
    }

    if violation(&x) > 1e-6 {
        return Err(Error::Infeasible);
    }
    for xi in x.iter_mut() {
        *xi = clip01(*xi);
    }
    Ok(PolytopeProjection {
        x,
        multipliers: lambda[..rows.len()].to_vec(),
        iterations: sol.iterations,
        dim: k,
    })
}

/// Projection of `v` onto `{G_A x = h_A}` via a pseudo-inverse, with the
/// multipliers of the active rows.
fn equality_projection(
    v: &[f64],
    g: &[Vec<f64>],
    h: &[f64],
    active: &[usize],
) -> Option<(Vec<f64>, Vec<f64>)> {
    if active.is_empty() {
        return Some((v.to_vec(), Vec::new()));
    }
    let a = active.len();
    let gram = DMatrix::from_fn(a, a, |i, j| dot(&g[active[i]], &g[active[j]]));
    let rhs = DVector::from_fn(a, |i, _| dot(&g[active[i]], v) - h[active[i]]);
    let pinv = gram.pseudo_inverse(1e-12).ok()?;
    let lambda = pinv * rhs;
    let mut x = v.to_vec();
    for (k, &i) in active.iter().enumerate() {
        for (xj, gj) in x.iter_mut().zip(&g[i]) {
            *xj -= lambda[k] * gj;
        }
    }
    // Reject pseudo-inverse solutions of inconsistent systems.
    for &i in active {
        if (dot(&g[i], &x) - h[i]).abs() > 1e-9 {
            return None;
        }
    }
    Some((x, lambda.as_slice().to_vec()))
}

/// Projection of `c/gamma` onto the intersection of `locals` and the box.
pub fn recover_general(scores: &UserScores, locals: &[&LocalKind]) -> Result<ServingPlan> {
    let v = scores.scaled();
    let m = v.len();
    let gamma = scores.gamma;
    let plan = |x: Vec<f64>, nu: Option<f64>| ServingPlan {
        user: scores.user,
        x,
        nu,
        pattern: None,
    };
    match locals {
        [] => Ok(plan(v.iter().map(|&x| clip01(x)).collect(), None)),
        [single] => {
            let (items, lo, hi, sense) = match single {
                LocalKind::SumCap { items, cap } => (items.clone(), f64::NEG_INFINITY, *cap, 1.0),
                LocalKind::SumFloor { items, floor } => (items.clone(), *floor, f64::INFINITY, -1.0),
                LocalKind::SimplexEquality => (None, 1.0, 1.0, 1.0),
                LocalKind::GeneralLinear { .. } => return general(scores, locals),
            };
            let subset: Vec<usize> = items.unwrap_or_else(|| (0..m).collect());
            let sub_v: Vec<f64> = subset.iter().map(|&i| v[i]).collect();
            let (sub_x, tau) = project_sum_box(&sub_v, lo, hi)
                .map_err(|_| Error::InfeasibleLocalSet { user: scores.user })?;
            let mut x: Vec<f64> = v.iter().map(|&x| clip01(x)).collect();
            for (k, &i) in subset.iter().enumerate() {
                x[i] = sub_x[k];
            }
            Ok(plan(x, Some(sense * tau * gamma)))
        }
        _ => general(scores, locals),
    }
}

fn general(scores: &UserScores, locals: &[&LocalKind]) -> Result<ServingPlan> {
    let v = scores.scaled();
    let rows: Vec<LinearRow> = locals.iter().flat_map(|k| k.rows(v.len())).collect();
    let proj = project_polytope(&v, &rows).map_err(|e| match e {
        Error::Infeasible => Error::InfeasibleLocalSet { user: scores.user },
        other => other,
    })?;
    Ok(ServingPlan {
        user: scores.user,
        x: proj.x,
        nu: None,
        pattern: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scores(c: &[f64], gamma: f64) -> UserScores {
        UserScores::new(0, c.to_vec(), gamma).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn binding_cap_matches_hand_solution() {
        let plan = recover_capped(&scores(&[2.0, 1.0, 0.2], 1.0), 1.5).unwrap();
        assert!(close(&plan.x, &[1.0, 0.5, 0.0], 1e-15));
        assert!((plan.nu.unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(plan.pattern, Some((1, 2)));
    }

    #[test]
    fn slack_cap_clips() {
        let plan = recover_capped(&scores(&[0.3, 0.2], 1.0), 2.0).unwrap();
        assert!(close(&plan.x, &[0.3, 0.2], 1e-15));
        assert_eq!(plan.nu, Some(0.0));
    }

    #[test]
    fn saturated_box_meets_cap_exactly() {
        let plan = recover_capped(&scores(&[5.0, 5.0, 5.0], 1.0), 3.0).unwrap();
        assert!(close(&plan.x, &[1.0, 1.0, 1.0], 0.0));
        assert_eq!(plan.nu, Some(0.0));
    }

    #[test]
    fn enumeration_agrees_on_example() {
        let s = scores(&[2.0, 1.0, 0.2], 1.0);
        let a = recover_capped(&s, 1.5).unwrap();
        let b = recover_capped_enumerate(&s, 1.5, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn strict_and_inclusive_windows_agree_on_boundary_grid() {
        // Half-integer scores and caps put many multipliers exactly on a window edge.
        let grid = [-0.5, 0.0, 0.5, 1.0, 1.5, 2.0];
        let mut strict_misses = 0;
        for a in grid {
            for b in grid {
                for c in grid {
                    for cap in [0.5, 1.0, 1.5, 2.0, 2.5] {
                        let s = scores(&[a, b, c], 1.0);
                        let fast = recover_capped(&s, cap).unwrap();
                        let loose = recover_capped_enumerate(&s, cap, false).unwrap();
                        assert!(close(&fast.x, &loose.x, 1e-12), "{:?} cap {}", [a, b, c], cap);
                        match recover_capped_enumerate(&s, cap, true) {
                            Ok(tight) => assert!(close(&tight.x, &loose.x, 1e-12)),
                            Err(Error::NoValidPattern) => strict_misses += 1,
                            Err(e) => panic!("{e}"),
                        }
                    }
                }
            }
        }
        assert!(strict_misses > 0);
    }

    #[test]
    fn capped_box_projection_examples() {
        assert_eq!(project_capped_box(&[0.2, 0.3], 1.0), vec![0.2, 0.3]);
        assert!(close(&project_capped_box(&[2.0, 2.0], 1.0), &[0.5, 0.5], 1e-15));
    }

    #[test]
    fn general_recovery_examples() {
        let s = scores(&[0.5, 0.5], 1.0);
        let plan = recover_general(&s, &[]).unwrap();
        assert!(close(&plan.x, &[0.5, 0.5], 0.0));

        let floor = LocalKind::GeneralLinear {
            a: vec![vec![-1.0, 0.0]],
            b: vec![-0.8],
        };
        let plan = recover_general(&s, &[&floor]).unwrap();
        assert!(close(&plan.x, &[0.8, 0.5], 1e-8), "{:?}", plan.x);

        let cap = LocalKind::SumCap { items: None, cap: 1.5 };
        let s = scores(&[2.0, 1.0, 0.2], 1.0);
        let plan = recover_general(&s, &[&cap]).unwrap();
        assert!(close(&plan.x, &[1.0, 0.5, 0.0], 1e-6));
    }

    #[test]
    fn polytope_projection_agrees_with_sum_box() {
        let v = [0.9, 0.7, -0.2, 1.4];
        let rows = LocalKind::SumCap { items: None, cap: 1.2 }.rows(4);
        let p = project_polytope(&v, &rows).unwrap();
        let (x, _) = project_sum_box(&v, f64::NEG_INFINITY, 1.2).unwrap();
        assert!(close(&p.x, &x, 1e-9), "{:?} vs {:?}", p.x, x);
    }

    #[test]
    fn empty_region_is_infeasible() {
        let rows = vec![
            LinearRow { coeffs: vec![1.0, 1.0], rhs: 0.5 },
            LinearRow { coeffs: vec![-1.0, -1.0], rhs: -1.5 },
        ];
        assert!(matches!(project_polytope(&[0.3, 0.3], &rows), Err(Error::Infeasible)));
        let s = scores(&[0.3, 0.3], 1.0);
        let bad = LocalKind::SumFloor { items: None, floor: 3.0 };
        assert!(matches!(
            recover_general(&s, &[&bad]),
            Err(Error::InfeasibleLocalSet { user: 0 })
        ));
    }

    #[test]
    fn nonpositive_cap_is_rejected() {
        assert!(recover_capped(&scores(&[1.0], 1.0), 0.0).is_err());
    }

    proptest! {
        #[test]
        fn capped_plan_is_ordered_and_feasible(
            c in prop::collection::vec(-2.0f64..3.0, 1..12),
            gamma in 0.2f64..3.0,
            cap in 0.1f64..6.0,
        ) {
            let s = scores(&c, gamma);
            let plan = recover_capped(&s, cap).unwrap();
            let sum: f64 = plan.x.iter().sum();
            prop_assert!(sum <= cap + 1e-9);
            let nu = plan.nu.unwrap();
            prop_assert!(nu >= 0.0);
            prop_assert!((nu * (sum - cap)).abs() <= 1e-8);
            for i in 0..c.len() {
                prop_assert!((0.0..=1.0).contains(&plan.x[i]));
                for j in 0..c.len() {
                    if c[i] >= c[j] {
                        prop_assert!(plan.x[i] >= plan.x[j] - 1e-12);
                    }
                }
            }
            let fast = project_capped_box(&s.scaled(), cap);
            prop_assert!(close(&plan.x, &fast, 1e-9));
        }

        #[test]
        fn sum_box_projection_satisfies_variational_inequality(
            v in prop::collection::vec(-1.0f64..2.0, 2..8),
            lo in 0.0f64..1.0,
            width in 0.0f64..3.0,
            probes in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 8), 20),
        ) {
            let m = v.len() as f64;
            let lo = lo.min(m);
            let hi = lo + width;
            let (x, _) = project_sum_box(&v, lo, hi).unwrap();
            let sx: f64 = x.iter().sum();
            prop_assert!(sx >= lo - 1e-9 && sx <= hi + 1e-9);
            for probe in probes {
                // Rescale a random box point into the sum band.
                let mut y: Vec<f64> = probe[..v.len()].to_vec();
                let sy: f64 = y.iter().sum();
                let (y2, _) = project_sum_box(&y, lo, hi).unwrap();
                if (sy - lo) * (sy - hi) > 0.0 { y = y2; }
                let vi: f64 = (0..v.len()).map(|i| (v[i] - x[i]) * (y[i] - x[i])).sum();
                prop_assert!(vi <= 1e-9);
            }
        }
    }
}
