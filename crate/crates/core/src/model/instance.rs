//! JSON instance files.
//!
//! ```text
//! { "N": 2, "M": 2, "gamma": 1.0,
//!   "p": [..N*M row-major..], "r": [..], "q": [..],
//!   "budgets": [{ "weights_ref": "r", "direction": "<=", "bound": 0.2 }],
//!   "locals":  [{ "user": 0, "kind": "simplex_equality" },
//!               { "user": 1, "kind": "sum_cap", "params": { "items": [0, 1], "cap": 1.5 } }] }
//! ```

use serde::{Deserialize, Serialize};

use super::{
    BudgetWeights, Direction, GlobalBudget, LocalConstraintSet, LocalKind, MooProblem,
    UserItemMatrix,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightsRef {
    P,
    R,
    Inline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetSpec {
    pub weights_ref: WeightsRef,
    /// Row-major `N*M` weights; required iff `weights_ref` is `inline`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub users: Option<Vec<usize>>,
    pub direction: Direction,
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum LocalKindSpec {
    SumCap {
        #[serde(default)]
        items: Option<Vec<usize>>,
        cap: f64,
    },
    SumFloor {
        #[serde(default)]
        items: Option<Vec<usize>>,
        floor: f64,
    },
    SimplexEquality,
    GeneralLinear { a: Vec<Vec<f64>>, b: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalSpec {
    pub user: usize,
    #[serde(flatten)]
    pub kind: LocalKindSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceFile {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub gamma: f64,
    pub p: Vec<f64>,
    pub r: Vec<f64>,
    pub q: Vec<f64>,
    #[serde(default)]
    pub budgets: Vec<BudgetSpec>,
    #[serde(default)]
    pub locals: Vec<LocalSpec>,
}

impl InstanceFile {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidProblem(format!("instance: {}", e)))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("instance serializes")
    }

    pub fn from_problem(problem: &MooProblem) -> Self {
        let budgets = problem
            .budgets
            .iter()
            .map(|b| {
                let (weights_ref, weights) = match &b.weights {
                    BudgetWeights::Engagement => (WeightsRef::P, None),
                    BudgetWeights::Complaint => (WeightsRef::R, None),
                    BudgetWeights::Inline(w) => (WeightsRef::Inline, Some(w.as_slice().to_vec())),
                };
                BudgetSpec {
                    weights_ref,
                    weights,
                    users: b.users.clone(),
                    direction: b.direction,
                    bound: b.bound,
                }
            })
            .collect();
        let locals = problem
            .locals
            .iter()
            .map(|l| LocalSpec {
                user: l.user,
                kind: match &l.kind {
                    LocalKind::SumCap { items, cap } => LocalKindSpec::SumCap {
                        items: items.clone(),
                        cap: *cap,
                    },
                    LocalKind::SumFloor { items, floor } => LocalKindSpec::SumFloor {
                        items: items.clone(),
                        floor: *floor,
                    },
                    LocalKind::SimplexEquality => LocalKindSpec::SimplexEquality,
                    LocalKind::GeneralLinear { a, b } => LocalKindSpec::GeneralLinear {
                        a: a.clone(),
                        b: b.clone(),
                    },
                },
            })
            .collect();
        Self {
            n: problem.num_users(),
            m: problem.num_items(),
            gamma: problem.gamma,
            p: problem.p.as_slice().to_vec(),
            r: problem.r.as_slice().to_vec(),
            q: problem.q.as_slice().to_vec(),
            budgets,
            locals,
        }
    }

    /// Builds the problem; shape errors are reported here, value errors by `validate`.
    pub fn to_problem(&self) -> Result<MooProblem> {
        let matrix = |name: &str, data: &Vec<f64>| {
            UserItemMatrix::new(self.n, self.m, data.clone()).map_err(|_| {
                Error::DimensionMismatch(format!(
                    "{} has {} entries, expected {}",
                    name,
                    data.len(),
                    self.n * self.m
                ))
            })
        };
        let p = matrix("p", &self.p)?;
        let r = matrix("r", &self.r)?;
        let q = matrix("q", &self.q)?;
        let mut budgets = Vec::with_capacity(self.budgets.len());
        for (k, spec) in self.budgets.iter().enumerate() {
            let weights = match (&spec.weights_ref, &spec.weights) {
                (WeightsRef::P, None) => BudgetWeights::Engagement,
                (WeightsRef::R, None) => BudgetWeights::Complaint,
                (WeightsRef::Inline, Some(w)) => {
                    BudgetWeights::Inline(matrix(&format!("budget {} weights", k), w)?)
                }
                _ => {
                    return Err(Error::InvalidProblem(format!(
                        "budget {}: inline weights must be given exactly when weights_ref is inline",
                        k
                    )))
                }
            };
            let mut budget = GlobalBudget {
                weights,
                users: None,
                direction: spec.direction,
                bound: spec.bound,
            };
            if let Some(users) = &spec.users {
                budget = budget.restricted_to(users.clone());
            }
            budgets.push(budget);
        }
        let locals = self
            .locals
            .iter()
            .map(|l| LocalConstraintSet {
                user: l.user,
                kind: match &l.kind {
                    LocalKindSpec::SumCap { items, cap } => LocalKind::SumCap {
                        items: items.clone(),
                        cap: *cap,
                    },
                    LocalKindSpec::SumFloor { items, floor } => LocalKind::SumFloor {
                        items: items.clone(),
                        floor: *floor,
                    },
                    LocalKindSpec::SimplexEquality => LocalKind::SimplexEquality,
                    LocalKindSpec::GeneralLinear { a, b } => LocalKind::GeneralLinear {
                        a: a.clone(),
                        b: b.clone(),
                    },
                },
            })
            .collect();
        Ok(MooProblem {
            gamma: self.gamma,
            p,
            r,
            q,
            budgets,
            locals,
        })
    }
}
