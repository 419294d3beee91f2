//! Synthetic instance generators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    BudgetWeights, GlobalBudget, LocalConstraintSet, LocalKind, MooProblem, UserItemMatrix,
};
use crate::pipeline::recover_all;

pub fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum LocalStyle {
    None,
    Simplex,
    Cap { cap: f64 },
    /// Each user independently gets nothing, a simplex equality or a random cap.
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UniformParams {
    pub users: usize,
    pub items: usize,
    pub gamma: f64,
    /// Budget bound as a fraction of the way from the smallest achievable
    /// usage to the usage of the unconstrained plan.
    pub tightness: f64,
    pub local: LocalStyle,
    pub prior_weight: f64,
}

impl Default for UniformParams {
    fn default() -> Self {
        Self {
            users: 10,
            items: 4,
            gamma: 1.0,
            tightness: 0.5,
            local: LocalStyle::Simplex,
            prior_weight: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpikeParams {
    pub users: usize,
    pub items: usize,
    pub gamma: f64,
    pub tightness: f64,
    /// Probability that an entry takes the spike value.
    pub spike_weight: f64,
    pub spike_value: f64,
}

impl Default for SpikeParams {
    fn default() -> Self {
        Self {
            users: 1000,
            items: 4,
            gamma: 1.0,
            tightness: 0.5,
            spike_weight: 0.1,
            spike_value: 0.9,
        }
    }
}

fn check_shape(users: usize, items: usize, gamma: f64, tightness: f64) -> Result<()> {
    if users == 0 || items == 0 {
        return Err(Error::BadParams("users and items must be positive".into()));
    }
    if !(gamma > 0.0) {
        return Err(Error::BadParams("gamma must be positive".into()));
    }
    if !(0.0..=1.5).contains(&tightness) {
        return Err(Error::BadParams("tightness must lie in [0, 1.5]".into()));
    }
    Ok(())
}

/// Smallest achievable `r'x` under the local constraints.
fn min_usage(problem: &MooProblem) -> f64 {
    (0..problem.num_users())
        .map(|u| {
            let r = problem.r.row(u);
            let simplex = problem
                .locals_for(u)
                .iter()
                .any(|k| matches!(k, LocalKind::SimplexEquality));
            if simplex {
                r.iter().cloned().fold(f64::INFINITY, f64::min)
            } else {
                0.0
            }
        })
        .sum()
}

/// Sets a single complaint budget between the smallest achievable usage and
/// the usage of the plan without budgets.
pub fn calibrate_budget(problem: &mut MooProblem, tightness: f64) -> Result<()> {
    problem.budgets = vec![GlobalBudget::at_most(BudgetWeights::Complaint, 0.0)];
    let free = recover_all(problem, &[0.0])?;
    let x: Vec<f64> = free.iter().flat_map(|p| p.x.iter().copied()).collect();
    let hi = problem.budget_lhs(0, &x);
    let lo = min_usage(problem);
    problem.budgets[0].bound = lo + tightness * (hi - lo);
    Ok(())
}

fn locals_for_style(style: LocalStyle, users: usize, items: usize, rng: &mut ChaCha8Rng) -> Vec<LocalConstraintSet> {
    let mut out = Vec::new();
    for u in 0..users {
        let kind = match style {
            LocalStyle::None => None,
            LocalStyle::Simplex => Some(LocalKind::SimplexEquality),
            LocalStyle::Cap { cap } => Some(LocalKind::SumCap { items: None, cap }),
            LocalStyle::Mixed => match rng.gen_range(0..3) {
                0 => None,
                1 => Some(LocalKind::SimplexEquality),
                _ => Some(LocalKind::SumCap {
                    items: None,
                    cap: rng.gen_range(0.5..items as f64),
                }),
            },
        };
        if let Some(kind) = kind {
            out.push(LocalConstraintSet { user: u, kind });
        }
    }
    out
}

/// Independent uniform `p`, `r` (and `q` scaled by `prior_weight`).
pub fn uniform(params: &UniformParams, seed: u64) -> Result<MooProblem> {
    check_shape(params.users, params.items, params.gamma, params.tightness)?;
    if let LocalStyle::Cap { cap } = params.local {
        if !(cap > 0.0) {
            return Err(Error::BadParams("cap must be positive".into()));
        }
    }
    let (n, m) = (params.users, params.items);
    let mut rng = rng_for(seed);
    let p = UserItemMatrix::from_fn(n, m, |_, _| rng.gen());
    let r = UserItemMatrix::from_fn(n, m, |_, _| rng.gen());
    let q = UserItemMatrix::from_fn(n, m, |_, _| params.prior_weight * rng.gen::<f64>());
    let locals = locals_for_style(params.local, n, m, &mut rng);
    let mut problem = MooProblem {
        gamma: params.gamma,
        p,
        r,
        q,
        budgets: vec![],
        locals,
    };
    calibrate_budget(&mut problem, params.tightness)?;
    Ok(problem)
}

/// Beta-distributed scores where each entry is replaced by a fixed spike
/// value with probability `spike_weight`.
pub fn sparse_spike_mixture(params: &SpikeParams, seed: u64) -> Result<MooProblem> {
    check_shape(params.users, params.items, params.gamma, params.tightness)?;
    if !(0.0..=1.0).contains(&params.spike_weight) || !(0.0..=1.0).contains(&params.spike_value) {
        return Err(Error::BadParams("spike weight and value must lie in [0, 1]".into()));
    }
    let (n, m) = (params.users, params.items);
    let mut rng = rng_for(seed);
    let base = Beta::new(1.0, 8.0).expect("valid beta");
    let draw = |rng: &mut ChaCha8Rng| {
        if rng.gen_bool(params.spike_weight) {
            params.spike_value
        } else {
            base.sample(rng)
        }
    };
    let p = UserItemMatrix::from_fn(n, m, |_, _| draw(&mut rng));
    let r = UserItemMatrix::from_fn(n, m, |_, _| draw(&mut rng));
    let mut problem = MooProblem {
        gamma: params.gamma,
        p,
        r,
        q: UserItemMatrix::zeros(n, m),
        budgets: vec![],
        locals: locals_for_style(LocalStyle::Simplex, n, m, &mut rng),
    };
    calibrate_budget(&mut problem, params.tightness)?;
    Ok(problem)
}

/// A small random instance: `N <= max_users`, `M <= max_items`, random gamma,
/// prior, local style and budget tightness.
pub fn random_small(rng: &mut ChaCha8Rng, max_users: usize, max_items: usize) -> MooProblem {
    let params = UniformParams {
        users: rng.gen_range(1..=max_users),
        items: rng.gen_range(1..=max_items),
        gamma: rng.gen_range(0.3..3.0),
        tightness: rng.gen_range(0.05..1.2),
        local: LocalStyle::Mixed,
        prior_weight: rng.gen_range(0.0..1.0),
    };
    uniform(&params, rng.gen()).expect("valid random parameters")
}

/// The fixed three-user, two-item instance used for convergence checks.
pub fn benchmark_small() -> MooProblem {
    let params = UniformParams {
        users: 3,
        items: 2,
        tightness: 0.5,
        ..Default::default()
    };
    uniform(&params, 42).expect("valid benchmark parameters")
}
