//! Stage 1 (dual estimation) and Stage 2 (per-user recovery) end to end.

use rayon::prelude::*;

use crate::error::Result;
use crate::model::{assemble_dual, assemble_dual_extended, DualQP, LocalKind, MooProblem};
use crate::recovery::{recover_capped, recover_general, ServingPlan, UserScores};
use crate::solver::{self, DualSolution, SolverConfig};

/// Strict layout when every local is a simplex equality, extended otherwise.
pub fn build_dual(problem: &MooProblem) -> Result<DualQP> {
    if problem
        .locals
        .iter()
        .all(|l| matches!(l.kind, LocalKind::SimplexEquality))
    {
        assemble_dual(problem)
    } else {
        assemble_dual_extended(problem)
    }
}

pub fn solve_dual(problem: &MooProblem, cfg: &SolverConfig) -> Result<(DualQP, DualSolution)> {
    let dual = build_dual(problem)?;
    let sol = solver::solve(&dual, cfg)?;
    Ok((dual, sol))
}

/// User `user`'s plan for budget multipliers `mu`: the closed form for a
/// single cap over all items, projection otherwise.
pub fn recover_user(problem: &MooProblem, user: usize, mu: &[f64]) -> Result<ServingPlan> {
    let scores = UserScores::from_problem(problem, user, mu)?;
    let locals = problem.locals_for(user);
    match locals.as_slice() {
        [LocalKind::SumCap { items: None, cap }] => recover_capped(&scores, *cap),
        _ => recover_general(&scores, &locals),
    }
}

pub fn recover_all(problem: &MooProblem, mu: &[f64]) -> Result<Vec<ServingPlan>> {
    (0..problem.num_users())
        .into_par_iter()
        .map(|u| recover_user(problem, u, mu))
        .collect()
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub dual: DualSolution,
    pub plans: Vec<ServingPlan>,
    /// Flattened plan, row-major by user.
    pub x: Vec<f64>,
    /// `-a'x + (gamma/2)|x|^2`.
    pub min_objective: f64,
    /// `p'x - (gamma/2)|x - q|^2`.
    pub engagement: f64,
    pub max_violation: f64,
}

pub fn flatten(plans: &[ServingPlan]) -> Vec<f64> {
    plans.iter().flat_map(|p| p.x.iter().copied()).collect()
}

/// Solves the dual of `stage1` and recovers plans for every user of `target`.
/// The two instances must share their budget list.
pub fn run_two_stage(
    stage1: &MooProblem,
    target: &MooProblem,
    cfg: &SolverConfig,
) -> Result<PipelineOutput> {
    let (_, dual) = solve_dual(stage1, cfg)?;
    let plans = recover_all(target, &dual.mu)?;
    let x = flatten(&plans);
    Ok(PipelineOutput {
        min_objective: target.min_objective(&x),
        engagement: target.engagement_objective(&x),
        max_violation: target.max_violation(&x),
        dual,
        plans,
        x,
    })
}

pub fn run(problem: &MooProblem, cfg: &SolverConfig) -> Result<PipelineOutput> {
    run_two_stage(problem, problem, cfg)
}
