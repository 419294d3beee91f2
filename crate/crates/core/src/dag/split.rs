//! Offline/online split over a binary tree of nested budgets.
//!
//! Users are the leaves of a complete binary tree with `K` levels below the
//! root (`N = 2^K`); every tree node `S` carries a budget `sum_{u in S} r_u x_u
//! <= c_S`. Splitting at depth `k` keeps the duals of all nodes above depth `k`
//! from an offline solve and re-solves each depth-`k` subtree online with
//! those duals folded into the scores.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::generate::rng_for;
use crate::model::{BudgetWeights, GlobalBudget, LinearRow, MooProblem, UserItemMatrix};
use crate::pipeline::solve_dual;
use crate::recovery::{project_polytope, UserScores};
use crate::solver::SolverConfig;

/// Node `j` at depth `d` has breadth-first index `2^d - 1 + j`.
pub fn node_index(depth: usize, j: usize) -> usize {
    (1usize << depth) - 1 + j
}

pub fn node_depth(index: usize) -> usize {
    (usize::BITS - 1 - (index + 1).leading_zeros()) as usize
}

/// Leaves (users) under a node of a tree with `levels` levels.
pub fn node_users(levels: usize, index: usize) -> std::ops::Range<usize> {
    let d = node_depth(index);
    let j = index + 1 - (1 << d);
    let width = 1 << (levels - d);
    j * width..(j + 1) * width
}

pub fn node_count(levels: usize) -> usize {
    (1 << (levels + 1)) - 1
}

/// `(size, members)` of every tree node in breadth-first order.
pub fn tree_subsets(levels: usize) -> Vec<(usize, Vec<usize>)> {
    (0..node_count(levels))
        .map(|i| {
            let users: Vec<usize> = node_users(levels, i).collect();
            (users.len(), users)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeParams {
    pub levels: usize,
    pub items: usize,
    pub gamma: f64,
    /// Half-width of the per-node shift applied to the mean scores below it.
    pub branch_effect: f64,
    /// Beta concentration of user-level draws around their mean.
    pub concentration: f64,
    /// Range of the bound factor `c_S / E[usage_S]`.
    pub tightness: (f64, f64),
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            levels: 6,
            items: 1,
            gamma: 1.0,
            branch_effect: 0.12,
            concentration: 6.0,
            tightness: (0.55, 1.0),
        }
    }
}

/// The population behind tree instances: per-entry means and fixed bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeTemplate {
    pub params: TreeParams,
    pub p_mean: UserItemMatrix,
    pub r_mean: UserItemMatrix,
    pub bounds: Vec<f64>,
}

impl TreeTemplate {
    pub fn new(params: &TreeParams, seed: u64) -> Result<Self> {
        if params.levels == 0 || params.levels > 16 {
            return Err(Error::BadParams("levels must lie in 1..=16".into()));
        }
        if params.items == 0 || !(params.gamma > 0.0) || !(params.concentration > 0.0) {
            return Err(Error::BadParams("items, gamma and concentration must be positive".into()));
        }
        let (lo, hi) = params.tightness;
        if !(0.0 < lo && lo <= hi) {
            return Err(Error::BadParams("tightness range must be positive and ordered".into()));
        }
        let k = params.levels;
        let n = 1usize << k;
        let m = params.items;
        let mut rng = rng_for(seed);
        let mut p_shift = vec![0.0; n];
        let mut r_shift = vec![0.0; n];
        for index in 1..node_count(k) {
            let dp = rng.gen_range(-params.branch_effect..=params.branch_effect);
            let dr = rng.gen_range(-params.branch_effect..=params.branch_effect);
            for u in node_users(k, index) {
                p_shift[u] += dp;
                r_shift[u] += dr;
            }
        }
        let p_mean = UserItemMatrix::from_fn(n, m, |u, _| {
            (0.5 + p_shift[u] + rng.gen_range(-0.05..0.05)).clamp(0.05, 0.95)
        });
        let r_mean = UserItemMatrix::from_fn(n, m, |u, _| {
            (0.5 + r_shift[u] + rng.gen_range(-0.05..0.05)).clamp(0.05, 0.95)
        });
        // Expected usage of the budget-free plan x = clip(p / gamma).
        let usage: Vec<f64> = (0..n)
            .map(|u| {
                (0..m)
                    .map(|i| r_mean.get(u, i) * (p_mean.get(u, i) / params.gamma).clamp(0.0, 1.0))
                    .sum()
            })
            .collect();
        let bounds = (0..node_count(k))
            .map(|index| {
                let total: f64 = node_users(k, index).map(|u| usage[u]).sum();
                total * rng.gen_range(lo..=hi)
            })
            .collect();
        Ok(Self {
            params: params.clone(),
            p_mean,
            r_mean,
            bounds,
        })
    }

    pub fn users(&self) -> usize {
        self.p_mean.users()
    }

    /// A fresh instance: Beta draws around the template means, fixed bounds.
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> MooProblem {
        let conc = self.params.concentration;
        let sample = |mean: f64, rng: &mut ChaCha8Rng| {
            Beta::new(mean * conc, (1.0 - mean) * conc)
                .expect("valid beta parameters")
                .sample(rng)
        };
        let (n, m) = (self.users(), self.params.items);
        let p = UserItemMatrix::from_fn(n, m, |u, i| sample(self.p_mean.get(u, i), rng));
        let r = UserItemMatrix::from_fn(n, m, |u, i| sample(self.r_mean.get(u, i), rng));
        let budgets = self
            .bounds
            .iter()
            .enumerate()
            .map(|(index, &bound)| {
                GlobalBudget::at_most(BudgetWeights::Complaint, bound)
                    .restricted_to(node_users(self.params.levels, index).collect())
            })
            .collect();
        MooProblem {
            gamma: self.params.gamma,
            p,
            r,
            q: UserItemMatrix::zeros(n, m),
            budgets,
            locals: vec![],
        }
    }
}

/// Binary-tree instance for `gen`.
pub fn binary_tree_instance(params: &TreeParams, seed: u64) -> Result<MooProblem> {
    let template = TreeTemplate::new(params, seed)?;
    let mut rng = rng_for(seed.wrapping_add(1));
    Ok(template.draw(&mut rng))
}

/// Offline flags for a split at depth `k`: nodes above depth `k` are offline.
pub fn split_at_depth(levels: usize, k: usize) -> Vec<bool> {
    (0..node_count(levels)).map(|i| node_depth(i) < k).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimingMode {
    /// Deterministic flop count of the online solves at 1 GFLOP/s.
    #[default]
    Model,
    /// Measured wall-clock time.
    Wall,
}

#[derive(Clone, Debug)]
pub struct SplitResult {
    pub x: Vec<f64>,
    pub engagement: f64,
    pub online_time: f64,
    pub blocks: usize,
}

const MODEL_FLOPS_PER_SEC: f64 = 1e9;

/// Stitches per-block solutions: offline budgets enter through `offline_mu`,
/// online budgets are enforced exactly within each connected block of users.
pub fn split_solve(
    problem: &MooProblem,
    offline_mu: &[f64],
    offline: &[bool],
    timing: TimingMode,
) -> Result<SplitResult> {
    let nb = problem.budgets.len();
    if offline_mu.len() != nb || offline.len() != nb {
        return Err(Error::DimensionMismatch(format!(
            "{} budgets but {} multipliers and {} flags",
            nb,
            offline_mu.len(),
            offline.len()
        )));
    }
    let (n, m) = (problem.num_users(), problem.num_items());
    let mu: Vec<f64> = (0..nb)
        .map(|b| if offline[b] { offline_mu[b] } else { 0.0 })
        .collect();

    // Users joined by an online budget share a block.
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], v: usize) -> usize {
        let mut root = v;
        while parent[root] != root {
            root = parent[root];
        }
        let mut v = v;
        while parent[v] != root {
            let next = parent[v];
            parent[v] = root;
            v = next;
        }
        root
    }
    for (b, budget) in problem.budgets.iter().enumerate() {
        if offline[b] {
            continue;
        }
        let support = budget.support(n);
        for w in support.windows(2) {
            let (a, c) = (find(&mut parent, w[0]), find(&mut parent, w[1]));
            if a != c {
                parent[a.max(c)] = a.min(c);
            }
        }
    }
    let mut blocks: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for u in 0..n {
        let root = find(&mut parent, u);
        blocks.entry(root).or_default().push(u);
    }
    let blocks: Vec<Vec<usize>> = blocks.into_values().collect();

    let start = Instant::now();
    let solved: Vec<(Vec<f64>, f64)> = blocks
        .iter()
        .map(|users| solve_block(problem, users, &mu, offline))
        .collect::<Result<_>>()?;
    let wall = start.elapsed().as_secs_f64();

    let mut x = vec![0.0; n * m];
    let mut flops = 0.0;
    for (users, (xb, cost)) in blocks.iter().zip(&solved) {
        for (k, &u) in users.iter().enumerate() {
            x[u * m..(u + 1) * m].copy_from_slice(&xb[k * m..(k + 1) * m]);
        }
        flops += cost;
    }
    Ok(SplitResult {
        engagement: problem.engagement_objective(&x),
        online_time: match timing {
            TimingMode::Model => flops / MODEL_FLOPS_PER_SEC,
            TimingMode::Wall => wall,
        },
        blocks: blocks.len(),
        x,
    })
}

/// Projection of the block's `c / gamma` onto its online budgets, local rows
/// and box; returns the block plan and its modelled flop count.
fn solve_block(
    problem: &MooProblem,
    users: &[usize],
    mu: &[f64],
    offline: &[bool],
) -> Result<(Vec<f64>, f64)> {
    let (n, m) = (problem.num_users(), problem.num_items());
    let nv = users.len() * m;
    let mut v = Vec::with_capacity(nv);
    for &u in users {
        v.extend(UserScores::from_problem(problem, u, mu)?.scaled());
    }
    let position: std::collections::HashMap<usize, usize> =
        users.iter().enumerate().map(|(k, &u)| (u, k)).collect();
    let mut rows = Vec::new();
    for (b, budget) in problem.budgets.iter().enumerate() {
        if offline[b] {
            continue;
        }
        let support = budget.support(n);
        if !support.iter().any(|u| position.contains_key(u)) {
            continue;
        }
        let w = problem.budget_weights(b);
        let s = budget.direction.sign();
        let mut coeffs = vec![0.0; nv];
        for u in support {
            let k = position[&u];
            for i in 0..m {
                coeffs[k * m + i] = s * w.get(u, i);
            }
        }
        rows.push(LinearRow {
            coeffs,
            rhs: s * budget.bound,
        });
    }
    for local in &problem.locals {
        if let Some(&k) = position.get(&local.user) {
            for row in local.kind.rows(m) {
                let mut coeffs = vec![0.0; nv];
                coeffs[k * m..(k + 1) * m].copy_from_slice(&row.coeffs);
                rows.push(LinearRow { coeffs, rhs: row.rhs });
            }
        }
    }
    let proj = project_polytope(&v, &rows)?;
    let d = proj.dim as f64;
    let flops = d * d * d / 3.0 + proj.iterations as f64 * (2.0 * d * d + 6.0 * d);
    Ok((proj.x, flops))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCurveRow {
    pub split_level: usize,
    pub mse: f64,
    pub online_time_sec: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTwoRow {
    pub node: usize,
    pub depth: usize,
    pub size: usize,
    pub score: f64,
    pub selected: bool,
}

#[derive(Clone, Debug)]
pub struct SplitCurve {
    pub rows: Vec<SplitCurveRow>,
    pub selection: Vec<StageTwoRow>,
}

fn offline_solver() -> SolverConfig {
    SolverConfig {
        eps_abs: 1e-9,
        eps_rel: 1e-8,
        ..Default::default()
    }
}

/// Split levels `1..=K`, `reps` resampled (offline, online) instance pairs
/// each; MSE of the stitched engagement against the fully online solve.
/// Also scores every tree node for Stage 2 with weight `w` and threshold
/// `beta`, using moments of `(p, r)` and a power-law time model.
pub fn exp_split_curve(
    params: &TreeParams,
    reps: usize,
    w: f64,
    beta: f64,
    seed: u64,
    timing: TimingMode,
) -> Result<SplitCurve> {
    if reps == 0 {
        return Err(Error::BadParams("reps must be at least 1".into()));
    }
    let template = TreeTemplate::new(params, seed)?;
    let k_max = params.levels;
    let nb = node_count(k_max);
    let all_online = vec![false; nb];

    let per_rep: Vec<Vec<(f64, f64)>> = (0..reps)
        .into_par_iter()
        .map(|rep| -> Result<Vec<(f64, f64)>> {
            let mut rng = rng_for(seed.wrapping_add(rep as u64));
            let offline_instance = template.draw(&mut rng);
            let online_instance = template.draw(&mut rng);
            let (_, dual) = solve_dual(&offline_instance, &offline_solver())?;
            let reference = split_solve(&online_instance, &dual.mu, &all_online, timing)?;
            (1..=k_max)
                .map(|k| {
                    let flags = split_at_depth(k_max, k);
                    let s = split_solve(&online_instance, &dual.mu, &flags, timing)?;
                    let err = s.engagement - reference.engagement;
                    Ok((err * err, s.online_time))
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let rows = (1..=k_max)
        .map(|k| {
            let (mut se, mut time) = (0.0, 0.0);
            for rep in &per_rep {
                se += rep[k - 1].0;
                time += rep[k - 1].1;
            }
            SplitCurveRow {
                split_level: k,
                mse: se / reps as f64,
                online_time_sec: time / reps as f64,
            }
        })
        .collect();

    let selection = stage_two_selection(&template, seed, w, beta, timing)?;
    Ok(SplitCurve { rows, selection })
}

/// Node scores from one sampled instance's `(p, r)` moments and a time model
/// fitted to online solves of single subtrees.
fn stage_two_selection(
    template: &TreeTemplate,
    seed: u64,
    w: f64,
    beta: f64,
    timing: TimingMode,
) -> Result<Vec<StageTwoRow>> {
    let k_max = template.params.levels;
    let mut rng = rng_for(seed.wrapping_add(0x5eed));
    let instance = template.draw(&mut rng);
    let n = instance.num_users();
    let m = instance.num_items();
    let data = nalgebra::DMatrix::from_fn(n, 2 * m, |u, j| {
        if j < m {
            instance.p.get(u, j)
        } else {
            instance.r.get(u, j - m)
        }
    });
    let mut dag = super::build_dag(&tree_subsets(k_max), super::RootPolicy::AddUnion)?;
    dag.compute_moments(&data)?;

    // Calibration: solve one subtree per depth fully online.
    let mut sizes = Vec::new();
    let mut times = Vec::new();
    for depth in 0..=k_max {
        let index = node_index(depth, 0);
        let users: Vec<usize> = node_users(k_max, index).collect();
        let sub = instance.restrict_users(&users, false);
        let kept: Vec<usize> = (0..instance.budgets.len())
            .filter(|&b| {
                let r = node_users(k_max, b);
                r.start >= users[0] && r.end <= users[users.len() - 1] + 1
            })
            .collect();
        let mut sub = sub;
        sub.budgets = kept.iter().map(|&b| sub.budgets[b].clone()).collect();
        let flags = vec![false; sub.budgets.len()];
        let mu = vec![0.0; sub.budgets.len()];
        let solved = split_solve(&sub, &mu, &flags, timing)?;
        sizes.push(users.len() as f64);
        times.push(solved.online_time.max(1e-12));
    }
    let model = super::TimeModel::fit(&sizes, &times)?;
    dag.set_time_estimates(&model);
    let selected: std::collections::BTreeSet<usize> =
        dag.select_stage2(w, beta)?.into_iter().collect();
    (0..dag.nodes.len())
        .map(|id| {
            Ok(StageTwoRow {
                node: id,
                depth: node_depth(id),
                size: dag.nodes[id].members.len(),
                score: dag.stage2_score(id, w)?,
                selected: selected.contains(&id),
            })
        })
        .collect()
}
