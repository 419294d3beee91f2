//! Problem instances for constrained multi-objective serving.
//!
//! An instance chooses a serving plan `x[u][i]` (probability of showing item
//! `i` to user `u`) that maximizes engagement while staying close to a prior
//! plan `q`:
//!
//! ```text
//! maximize    sum_ui p_ui x_ui - (gamma/2) sum_ui (x_ui - q_ui)^2
//! subject to  global budgets   sum_ui w_ui x_ui  (<= | >=)  bound
//!             local sets       x_u in K_u        (per user)
//!             0 <= x <= 1
//! ```
//!
//! Equivalently, with `a = p + gamma q`, minimize `-a'x + (gamma/2) x'x`
//! over the same feasible set.

mod dual;
mod instance;

pub use dual::{
    assemble_dual, assemble_dual_extended, primal_from_dual_stationarity, DualLabel, DualQP,
};
pub(crate) use dual::{a_hat_mul, a_hat_t_mul};
pub use instance::{BudgetSpec, InstanceFile, LocalKindSpec, LocalSpec, WeightsRef};

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};

/// Dense users-by-items matrix stored row-major, one row per user.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserItemMatrix {
    users: usize,
    items: usize,
    data: Vec<f64>,
}

impl UserItemMatrix {
    pub fn new(users: usize, items: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != users * items {
            return Err(Error::DimensionMismatch(format!(
                "expected {}x{} = {} entries, got {}",
                users,
                items,
                users * items,
                data.len()
            )));
        }
        Ok(Self { users, items, data })
    }

    pub fn zeros(users: usize, items: usize) -> Self {
        Self::filled(users, items, 0.0)
    }

    pub fn filled(users: usize, items: usize, value: f64) -> Self {
        Self {
            users,
            items,
            data: vec![value; users * items],
        }
    }

    pub fn from_fn(users: usize, items: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(users * items);
        for u in 0..users {
            for i in 0..items {
                data.push(f(u, i));
            }
        }
        Self { users, items, data }
    }

    pub fn users(&self) -> usize {
        self.users
    }

    pub fn items(&self) -> usize {
        self.items
    }

    #[inline]
    pub fn get(&self, user: usize, item: usize) -> f64 {
        self.data[user * self.items + item]
    }

    #[inline]
    pub fn set(&mut self, user: usize, item: usize, value: f64) {
        self.data[user * self.items + item] = value;
    }

    pub fn row(&self, user: usize) -> &[f64] {
        &self.data[user * self.items..(user + 1) * self.items]
    }

    pub fn row_mut(&mut self, user: usize) -> &mut [f64] {
        &mut self.data[user * self.items..(user + 1) * self.items]
    }

    /// Row-major view, which is also the vectorized `x` ordering used
    /// throughout: index `u * items + i`.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Keeps only the listed users, in the given order.
    pub fn select_users(&self, users: &[usize]) -> Self {
        let mut data = Vec::with_capacity(users.len() * self.items);
        for &u in users {
            data.extend_from_slice(self.row(u));
        }
        Self {
            users: users.len(),
            items: self.items,
            data,
        }
    }
}

/// Sense of a global budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "<=")]
    AtMost,
    #[serde(rename = ">=")]
    AtLeast,
}

impl Direction {
    /// Multiplier that turns the constraint into `sign * w'x <= sign * bound`.
    pub fn sign(self) -> f64 {
        match self {
            Direction::AtMost => 1.0,
            Direction::AtLeast => -1.0,
        }
    }
}

/// Where a budget's weights come from.
#[derive(Clone, Debug, PartialEq)]
pub enum BudgetWeights {
    /// The engagement matrix `p`.
    Engagement,
    /// The complaint matrix `r`.
    Complaint,
    Inline(UserItemMatrix),
}

/// A constraint `sum_{u in users, i} w_ui x_ui (<= | >=) bound`.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalBudget {
    pub weights: BudgetWeights,
    /// Restricts the budget to these users (sorted ascending); `None` means everyone.
    pub users: Option<Vec<usize>>,
    pub direction: Direction,
    pub bound: f64,
}

impl GlobalBudget {
    pub fn at_most(weights: BudgetWeights, bound: f64) -> Self {
        Self {
            weights,
            users: None,
            direction: Direction::AtMost,
            bound,
        }
    }

    pub fn at_least(weights: BudgetWeights, bound: f64) -> Self {
        Self {
            weights,
            users: None,
            direction: Direction::AtLeast,
            bound,
        }
    }

    pub fn restricted_to(mut self, mut users: Vec<usize>) -> Self {
        users.sort_unstable();
        users.dedup();
        self.users = Some(users);
        self
    }

    pub fn covers(&self, user: usize) -> bool {
        match &self.users {
            None => true,
            Some(list) => list.binary_search(&user).is_ok(),
        }
    }

    /// Users this budget touches, for an instance with `num_users` users.
    pub fn support(&self, num_users: usize) -> Vec<usize> {
        match &self.users {
            None => (0..num_users).collect(),
            Some(list) => list.clone(),
        }
    }
}

/// One per-user constraint on `x_u`. The box `[0,1]^M` is always implied.
#[derive(Clone, Debug, PartialEq)]
pub enum LocalKind {
    /// `sum_{i in items} x_ui <= cap`; `items = None` means all items.
    SumCap { items: Option<Vec<usize>>, cap: f64 },
    /// `sum_{i in items} x_ui >= floor`.
    SumFloor { items: Option<Vec<usize>>, floor: f64 },
    /// `sum_i x_ui = 1`.
    SimplexEquality,
    /// `A x_u <= b`, one row of `A` per entry of `b`.
    GeneralLinear { a: Vec<Vec<f64>>, b: Vec<f64> },
}

/// A local constraint attached to one user. A user may carry several.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalConstraintSet {
    pub user: usize,
    pub kind: LocalKind,
}

/// A linear inequality `coeffs' x_u <= rhs` on one user's block.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearRow {
    pub coeffs: Vec<f64>,
    pub rhs: f64,
}

fn indicator(items: &Option<Vec<usize>>, num_items: usize, value: f64) -> Vec<f64> {
    match items {
        None => vec![value; num_items],
        Some(list) => {
            let mut row = vec![0.0; num_items];
            for &i in list {
                row[i] = value;
            }
            row
        }
    }
}

impl LocalKind {
    /// Inequality rows describing this constraint; an equality becomes two rows.
    pub fn rows(&self, num_items: usize) -> Vec<LinearRow> {
        match self {
            LocalKind::SumCap { items, cap } => vec![LinearRow {
                coeffs: indicator(items, num_items, 1.0),
                rhs: *cap,
            }],
            LocalKind::SumFloor { items, floor } => vec![LinearRow {
                coeffs: indicator(items, num_items, -1.0),
                rhs: -*floor,
            }],
            LocalKind::SimplexEquality => vec![
                LinearRow {
                    coeffs: vec![1.0; num_items],
                    rhs: 1.0,
                },
                LinearRow {
                    coeffs: vec![-1.0; num_items],
                    rhs: -1.0,
                },
            ],
            LocalKind::GeneralLinear { a, b } => a
                .iter()
                .zip(b)
                .map(|(coeffs, &rhs)| LinearRow {
                    coeffs: coeffs.clone(),
                    rhs,
                })
                .collect(),
        }
    }

    pub fn is_satisfied(&self, x: &[f64], tol: f64) -> bool {
        self.rows(x.len())
            .iter()
            .all(|row| dot(&row.coeffs, x) <= row.rhs + tol)
    }
}

/// A constrained serving problem over `N` users and `M` items.
#[derive(Clone, Debug, PartialEq)]
pub struct MooProblem {
    pub gamma: f64,
    pub p: UserItemMatrix,
    pub r: UserItemMatrix,
    pub q: UserItemMatrix,
    pub budgets: Vec<GlobalBudget>,
    pub locals: Vec<LocalConstraintSet>,
}

impl MooProblem {
    pub fn num_users(&self) -> usize {
        self.p.users()
    }

    pub fn num_items(&self) -> usize {
        self.p.items()
    }

    pub fn num_vars(&self) -> usize {
        self.num_users() * self.num_items()
    }

    /// `a = p + gamma q`, recomputed on every call.
    pub fn objective_weights(&self) -> UserItemMatrix {
        let gamma = self.gamma;
        UserItemMatrix::from_fn(self.num_users(), self.num_items(), |u, i| {
            self.p.get(u, i) + gamma * self.q.get(u, i)
        })
    }

    pub fn objective_weights_row(&self, user: usize) -> Vec<f64> {
        self.p
            .row(user)
            .iter()
            .zip(self.q.row(user))
            .map(|(p, q)| p + self.gamma * q)
            .collect()
    }

    pub fn budget_weights(&self, budget: usize) -> &UserItemMatrix {
        match &self.budgets[budget].weights {
            BudgetWeights::Engagement => &self.p,
            BudgetWeights::Complaint => &self.r,
            BudgetWeights::Inline(w) => w,
        }
    }

    /// Left-hand side `sum_{u in support, i} w_ui x_ui` of a budget.
    pub fn budget_lhs(&self, budget: usize, x: &[f64]) -> f64 {
        let w = self.budget_weights(budget);
        let m = self.num_items();
        self.budgets[budget]
            .support(self.num_users())
            .into_iter()
            .map(|u| dot(w.row(u), &x[u * m..(u + 1) * m]))
            .sum()
    }

    /// Local constraints of one user, in declaration order.
    pub fn locals_for(&self, user: usize) -> Vec<&LocalKind> {
        self.locals
            .iter()
            .filter(|l| l.user == user)
            .map(|l| &l.kind)
            .collect()
    }

    /// Engagement objective `p'x - (gamma/2)|x - q|^2` (to be maximized).
    pub fn engagement_objective(&self, x: &[f64]) -> f64 {
        let p = self.p.as_slice();
        let q = self.q.as_slice();
        let mut value = 0.0;
        for j in 0..x.len() {
            let d = x[j] - q[j];
            value += p[j] * x[j] - 0.5 * self.gamma * d * d;
        }
        value
    }

    /// Minimization form `-a'x + (gamma/2) x'x`.
    pub fn min_objective(&self, x: &[f64]) -> f64 {
        let a = self.objective_weights();
        let mut value = 0.0;
        for (xj, aj) in x.iter().zip(a.as_slice()) {
            value += -aj * xj + 0.5 * self.gamma * xj * xj;
        }
        value
    }

    /// Largest violation over budgets, local sets and the box.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let m = self.num_items();
        let mut worst: f64 = 0.0;
        for &xj in x {
            worst = worst.max(-xj).max(xj - 1.0);
        }
        for (b, budget) in self.budgets.iter().enumerate() {
            let s = budget.direction.sign();
            worst = worst.max(s * self.budget_lhs(b, x) - s * budget.bound);
        }
        for local in &self.locals {
            let xu = &x[local.user * m..(local.user + 1) * m];
            for row in local.kind.rows(m) {
                worst = worst.max(dot(&row.coeffs, xu) - row.rhs);
            }
        }
        worst
    }

    /// Copy of the instance restricted to `users` (in that order). Budgets
    /// keep their support intersected with the subset and, when `scale_bounds`
    /// is set, their bound scaled by the fraction of covered users retained.
    pub fn restrict_users(&self, users: &[usize], scale_bounds: bool) -> MooProblem {
        let position: std::collections::HashMap<usize, usize> =
            users.iter().enumerate().map(|(k, &u)| (u, k)).collect();
        let n = self.num_users();
        let budgets = self
            .budgets
            .iter()
            .map(|b| {
                let support = b.support(n);
                let kept: Vec<usize> = support
                    .iter()
                    .filter_map(|u| position.get(u).copied())
                    .collect();
                let bound = if scale_bounds && !support.is_empty() {
                    b.bound * kept.len() as f64 / support.len() as f64
                } else {
                    b.bound
                };
                let weights = match &b.weights {
                    BudgetWeights::Inline(w) => BudgetWeights::Inline(w.select_users(users)),
                    other => other.clone(),
                };
                let mut kept_sorted = kept;
                kept_sorted.sort_unstable();
                GlobalBudget {
                    weights,
                    users: if b.users.is_some() {
                        Some(kept_sorted)
                    } else {
                        None
                    },
                    direction: b.direction,
                    bound,
                }
            })
            .collect();
        let locals = self
            .locals
            .iter()
            .filter_map(|l| {
                position.get(&l.user).map(|&k| LocalConstraintSet {
                    user: k,
                    kind: l.kind.clone(),
                })
            })
            .collect();
        MooProblem {
            gamma: self.gamma,
            p: self.p.select_users(users),
            r: self.r.select_users(users),
            q: self.q.select_users(users),
            budgets,
            locals,
        }
    }

    pub fn validate(&self) -> ValidationReport {
        validate(self)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A single violated invariant.
#[derive(Clone, Debug, PartialEq)]
pub struct Issue {
    pub location: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.location.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{} at {}", self.message, self.location)
        }
    }
}

/// Every problem found by [`validate`]; empty iff the instance is well formed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    fn push(&mut self, location: impl Into<String>, message: impl Into<String>) {
        self.issues.push(Issue {
            location: location.into(),
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for issue in &self.issues {
            writeln!(f, "{}", issue)?;
        }
        Ok(())
    }
}

fn check_unit_range(report: &mut ValidationReport, name: &str, m: &UserItemMatrix) {
    for u in 0..m.users() {
        for i in 0..m.items() {
            let v = m.get(u, i);
            if !(0.0..=1.0).contains(&v) {
                report.push(format!("({},{})", u, i), format!("{} out of [0,1]", name));
            }
        }
    }
}

fn check_item_list(
    report: &mut ValidationReport,
    location: &str,
    items: &Option<Vec<usize>>,
    num_items: usize,
) -> usize {
    match items {
        None => num_items,
        Some(list) => {
            if list.is_empty() {
                report.push(location, "empty item subset");
            }
            for &i in list {
                if i >= num_items {
                    report.push(location, format!("item {} out of range", i));
                }
            }
            let mut sorted = list.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != list.len() {
                report.push(location, "repeated item in subset");
            }
            list.len()
        }
    }
}

/// Reports every violated instance invariant with its location.
pub fn validate(problem: &MooProblem) -> ValidationReport {
    let mut report = ValidationReport::default();
    let (n, m) = (problem.num_users(), problem.num_items());

    if !(problem.gamma > 0.0) || !problem.gamma.is_finite() {
        report.push("", "gamma must be positive");
    }
    for (name, mat) in [("r", &problem.r), ("q", &problem.q)] {
        if mat.users() != n || mat.items() != m {
            report.push(
                name,
                format!(
                    "shape {}x{} does not match p ({}x{})",
                    mat.users(),
                    mat.items(),
                    n,
                    m
                ),
            );
        }
    }
    if !report.is_empty() {
        return report;
    }
    check_unit_range(&mut report, "p", &problem.p);
    check_unit_range(&mut report, "r", &problem.r);
    check_unit_range(&mut report, "q", &problem.q);

    for (b, budget) in problem.budgets.iter().enumerate() {
        let loc = format!("budget {}", b);
        if !budget.bound.is_finite() {
            report.push(&loc, "bound must be finite");
        }
        if let BudgetWeights::Inline(w) = &budget.weights {
            if w.users() != n || w.items() != m {
                report.push(&loc, "weights shape does not match problem");
            } else if w.as_slice().iter().any(|v| !v.is_finite()) {
                report.push(&loc, "non-finite weight");
            }
        }
        if let Some(users) = &budget.users {
            if users.windows(2).any(|w| w[0] >= w[1]) {
                report.push(&loc, "user support must be sorted and unique");
            }
            if users.iter().any(|&u| u >= n) {
                report.push(&loc, "user support references unknown user");
            }
        }
    }

    for (k, local) in problem.locals.iter().enumerate() {
        let loc = format!("local {} (user {})", k, local.user);
        if local.user >= n {
            report.push(&loc, "references unknown user");
            continue;
        }
        match &local.kind {
            LocalKind::SumCap { items, cap } => {
                check_item_list(&mut report, &loc, items, m);
                if !(*cap > 0.0) || !cap.is_finite() {
                    report.push(&loc, "cap must be positive");
                }
            }
            LocalKind::SumFloor { items, floor } => {
                let size = check_item_list(&mut report, &loc, items, m);
                if !floor.is_finite() {
                    report.push(&loc, "floor must be finite");
                } else if *floor > size as f64 {
                    report.push(&loc, "floor exceeds subset size; set is empty");
                }
            }
            LocalKind::SimplexEquality => {}
            LocalKind::GeneralLinear { a, b } => {
                if a.len() != b.len() {
                    report.push(&loc, "row count of A does not match b");
                } else if a.iter().any(|row| row.len() != m) {
                    report.push(&loc, "row length of A does not match item count");
                } else if a.iter().flatten().chain(b).any(|v| !v.is_finite()) {
                    report.push(&loc, "non-finite coefficient");
                }
            }
        }
    }
    if !report.is_empty() {
        return report;
    }

    // Feasibility probe for each user's local region intersected with the box.
    for u in 0..n {
        let kinds = problem.locals_for(u);
        if kinds.is_empty() {
            continue;
        }
        let rows: Vec<LinearRow> = kinds.iter().flat_map(|k| k.rows(m)).collect();
        let probe = crate::recovery::project_polytope(&vec![0.5; m], &rows);
        let feasible = match probe {
            Ok(p) => rows
                .iter()
                .all(|row| dot(&row.coeffs, &p.x) <= row.rhs + 1e-7),
            Err(_) => false,
        };
        if !feasible {
            report.push(format!("user {}", u), "local constraint region is empty");
        }
    }
    report
}
