//! DAG over nested constraint subsets.
//!
//! Each subset `S` of level `k` (its size) is a node. For `l < k` there is an
//! edge `S -> S'` when
//!
//! * `S'` is a subset of `S` and no set of an intermediate level
//!   (`l < k' < k`) contains `S'`, or
//! * some element of `S' ∩ S` belongs to no set of an intermediate level.
//!
//! Node moments follow the mixture rule: for children with proportions
//! `alpha_i`,
//!
//! ```text
//! mean = sum alpha_i mean_i
//! cov  = sum alpha_i (cov_i + (mean_i - mean)(mean_i - mean)')
//! ```

pub mod split;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::linalg::max_eigenvalue;

#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintNode {
    pub id: usize,
    pub level: usize,
    /// Sorted member indices.
    pub members: Vec<usize>,
    pub sample_count: usize,
    pub mean: Option<DVector<f64>>,
    pub cov: Option<DMatrix<f64>>,
    /// Estimated solve time `t(n)` in seconds.
    pub time_estimate: Option<f64>,
}

/// Whether a node for the union of all subsets is added as the root.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RootPolicy {
    #[default]
    AddUnion,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintDag {
    pub nodes: Vec<ConstraintNode>,
    /// `(parent, child)` pairs sorted lexicographically.
    pub edges: Vec<(usize, usize)>,
    pub root: Option<usize>,
}

/// Builds the DAG for `(level, members)` subsets; node ids follow input order,
/// with an added root (if any) last.
pub fn build_dag(subsets: &[(usize, Vec<usize>)], policy: RootPolicy) -> Result<ConstraintDag> {
    let mut sets: Vec<(usize, Vec<usize>)> = Vec::with_capacity(subsets.len() + 1);
    let mut seen: HashMap<Vec<usize>, usize> = HashMap::new();
    for (index, (level, members)) in subsets.iter().enumerate() {
        let sorted: Vec<usize> = members.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        if sorted.len() != *level || sorted.len() != members.len() {
            return Err(Error::InconsistentLevel {
                index,
                level: *level,
                size: members.len(),
            });
        }
        if let Some(&first) = seen.get(&sorted) {
            return Err(Error::DuplicateSubset { first, second: index });
        }
        seen.insert(sorted.clone(), index);
        sets.push((*level, sorted));
    }
    let mut root = None;
    if policy == RootPolicy::AddUnion && !sets.is_empty() {
        let union: Vec<usize> = sets
            .iter()
            .flat_map(|(_, m)| m.iter().copied())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        root = Some(match seen.get(&union) {
            Some(&id) => id,
            None => {
                sets.push((union.len(), union));
                sets.len() - 1
            }
        });
    }

    let member_sets: Vec<BTreeSet<usize>> =
        sets.iter().map(|(_, m)| m.iter().copied().collect()).collect();
    let mut edges = Vec::new();
    for (j, (k, _)) in sets.iter().enumerate() {
        for (jp, (l, _)) in sets.iter().enumerate() {
            if l >= k {
                continue;
            }
            let between: Vec<usize> = (0..sets.len())
                .filter(|&t| sets[t].0 > *l && sets[t].0 < *k)
                .collect();
            let child = &member_sets[jp];
            let parent = &member_sets[j];
            let contained = child.is_subset(parent)
                && !between.iter().any(|&t| child.is_subset(&member_sets[t]));
            let bridged = child
                .intersection(parent)
                .any(|x| !between.iter().any(|&t| member_sets[t].contains(x)));
            if contained || bridged {
                edges.push((j, jp));
            }
        }
    }
    edges.sort_unstable();

    let nodes = sets
        .into_iter()
        .enumerate()
        .map(|(id, (level, members))| ConstraintNode {
            id,
            level,
            sample_count: members.len(),
            members,
            mean: None,
            cov: None,
            time_estimate: None,
        })
        .collect();
    Ok(ConstraintDag { nodes, edges, root })
}

/// Mixture mean and covariance of `(alpha, mean, cov)` components.
pub fn mixture_moments(
    children: &[(f64, DVector<f64>, DMatrix<f64>)],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let total: f64 = children.iter().map(|c| c.0).sum();
    if children.is_empty() || children.iter().any(|c| !(c.0 > 0.0)) || (total - 1.0).abs() > 1e-12 {
        return Err(Error::WeightsNotNormalized(total));
    }
    let d = children[0].1.len();
    if children.iter().any(|c| c.1.len() != d || c.2.nrows() != d || c.2.ncols() != d) {
        return Err(Error::DimensionMismatch("mixture components differ in dimension".into()));
    }
    let mut mean = DVector::zeros(d);
    for (alpha, m, _) in children {
        mean += m * *alpha;
    }
    let mut cov = DMatrix::zeros(d, d);
    for (alpha, m, c) in children {
        let dev = m - &mean;
        cov += (c + &dev * dev.transpose()) * *alpha;
    }
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok((mean, cov))
}

/// Mean and `1/n` covariance of the rows of `data` listed in `rows`.
pub fn pooled_moments(data: &DMatrix<f64>, rows: &[usize]) -> (DVector<f64>, DMatrix<f64>) {
    let d = data.ncols();
    let n = rows.len() as f64;
    let mut mean = DVector::zeros(d);
    for &r in rows {
        mean += data.row(r).transpose();
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for &r in rows {
        let dev = data.row(r).transpose() - &mean;
        cov += &dev * dev.transpose();
    }
    (mean, cov / n)
}

/// Power law `t(n) = coef * n^exponent` fitted on log-log axes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeModel {
    pub coef: f64,
    pub exponent: f64,
}

impl TimeModel {
    pub fn fit(sizes: &[f64], times: &[f64]) -> Result<Self> {
        if sizes.len() != times.len() || sizes.len() < 2 {
            return Err(Error::BadParams("need at least two (size, time) pairs".into()));
        }
        if sizes.iter().chain(times).any(|&v| !(v > 0.0)) {
            return Err(Error::BadParams("sizes and times must be positive".into()));
        }
        let xs: Vec<f64> = sizes.iter().map(|v| v.ln()).collect();
        let ys: Vec<f64> = times.iter().map(|v| v.ln()).collect();
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        if sxx == 0.0 {
            return Err(Error::BadParams("sizes must not all be equal".into()));
        }
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let exponent = sxy / sxx;
        Ok(Self {
            coef: (my - exponent * mx).exp(),
            exponent,
        })
    }

    pub fn predict(&self, n: f64) -> f64 {
        self.coef * n.powf(self.exponent)
    }
}

impl ConstraintDag {
    pub fn children(&self, id: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|e| e.0 == id)
            .map(|e| e.1)
            .collect()
    }

    pub fn parents(&self, id: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|e| e.1 == id)
            .map(|e| e.0)
            .collect()
    }

    /// Topological order; among ready nodes the higher level, then the lower
    /// id, comes first.
    pub fn topological_order(&self) -> Vec<usize> {
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        for &(_, c) in &self.edges {
            indegree[c] += 1;
        }
        let mut ready: BTreeSet<(std::cmp::Reverse<usize>, usize)> = (0..n)
            .filter(|&i| indegree[i] == 0)
            .map(|i| (std::cmp::Reverse(self.nodes[i].level), i))
            .collect();
        let mut order = Vec::with_capacity(n);
        while let Some(&first) = ready.iter().next() {
            ready.remove(&first);
            let id = first.1;
            order.push(id);
            for c in self.children(id) {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.insert((std::cmp::Reverse(self.nodes[c].level), c));
                }
            }
        }
        order
    }

    /// Nodes reachable from `id`, itself included.
    pub fn descendants(&self, id: usize) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        let mut stack = vec![id];
        while let Some(v) = stack.pop() {
            if out.insert(v) {
                stack.extend(self.children(v));
            }
        }
        out
    }

    /// Fills every node's moments from per-member feature rows of `data`.
    ///
    /// A node whose children partition its members is mixed from them with
    /// `alpha_i = n_i / n`; any other node is pooled directly.
    pub fn compute_moments(&mut self, data: &DMatrix<f64>) -> Result<()> {
        let order = self.topological_order();
        for &id in order.iter().rev() {
            let members = self.nodes[id].members.clone();
            if members.iter().any(|&m| m >= data.nrows()) {
                return Err(Error::DimensionMismatch(format!(
                    "node {} references a row outside the data",
                    id
                )));
            }
            let children = self.children(id);
            let mut covered: Vec<usize> = children
                .iter()
                .flat_map(|&c| self.nodes[c].members.iter().copied())
                .collect();
            covered.sort_unstable();
            let (mean, cov) = if !children.is_empty() && covered == members {
                let n = members.len() as f64;
                let parts: Vec<(f64, DVector<f64>, DMatrix<f64>)> = children
                    .iter()
                    .map(|&c| {
                        let node = &self.nodes[c];
                        (
                            node.members.len() as f64 / n,
                            node.mean.clone().expect("children are visited first"),
                            node.cov.clone().expect("children are visited first"),
                        )
                    })
                    .collect();
                renormalized_mixture(parts)?
            } else {
                pooled_moments(data, &members)
            };
            let node = &mut self.nodes[id];
            node.sample_count = members.len();
            node.mean = Some(mean);
            node.cov = Some(cov);
        }
        Ok(())
    }

    pub fn set_time_estimates(&mut self, model: &TimeModel) {
        for node in &mut self.nodes {
            node.time_estimate = Some(model.predict(node.sample_count as f64));
        }
    }

    /// `w / t(n_i) + (1 - w) lambda_max(cov_i / n_i)` for one node.
    pub fn stage2_score(&self, id: usize, w: f64) -> Result<f64> {
        let node = &self.nodes[id];
        match (&node.cov, node.time_estimate) {
            (Some(cov), Some(t)) if node.sample_count > 0 => {
                let lambda = max_eigenvalue(&(cov / node.sample_count as f64));
                Ok(w / t + (1.0 - w) * lambda)
            }
            _ => Err(Error::MissingMoments(id)),
        }
    }

    /// Nodes whose score is at most `beta`, in traversal order from the root.
    pub fn select_stage2(&self, w: f64, beta: f64) -> Result<Vec<usize>> {
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::BadParams("w must lie in [0, 1]".into()));
        }
        if !(beta > 0.0) {
            return Err(Error::BadParams("beta must be positive".into()));
        }
        let mut out = Vec::new();
        for id in self.topological_order() {
            if self.stage2_score(id, w)? <= beta {
                out.push(id);
            }
        }
        Ok(out)
    }

    pub fn to_file(&self) -> DagFile {
        DagFile {
            nodes: self
                .nodes
                .iter()
                .map(|n| DagNodeRecord {
                    id: n.id,
                    level: n.level,
                    members: n.members.clone(),
                    n: n.sample_count,
                    mean: n.mean.as_ref().map(|m| m.as_slice().to_vec()),
                    cov: n.cov.as_ref().map(|c| {
                        (0..c.nrows())
                            .map(|i| c.row(i).iter().copied().collect())
                            .collect()
                    }),
                    time_estimate: n.time_estimate,
                })
                .collect(),
            edges: self.edges.clone(),
            root: self.root,
        }
    }
}

fn renormalized_mixture(
    mut parts: Vec<(f64, DVector<f64>, DMatrix<f64>)>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    // Proportions n_i/n may miss 1 by a rounding error.
    let total: f64 = parts.iter().map(|p| p.0).sum();
    for p in &mut parts {
        p.0 /= total;
    }
    let total: f64 = parts.iter().map(|p| p.0).sum();
    if let Some(last) = parts.last_mut() {
        last.0 += 1.0 - total;
    }
    mixture_moments(&parts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DagNodeRecord {
    pub id: usize,
    pub level: usize,
    pub members: Vec<usize>,
    pub n: usize,
    pub mean: Option<Vec<f64>>,
    pub cov: Option<Vec<Vec<f64>>>,
    pub time_estimate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DagFile {
    pub nodes: Vec<DagNodeRecord>,
    pub edges: Vec<(usize, usize)>,
    pub root: Option<usize>,
}

/// The seven-element example: two size-3 sets, three pairs, three singletons.
pub fn seven_element_example() -> Vec<(usize, Vec<usize>)> {
    vec![
        (3, vec![1, 2, 3]),
        (3, vec![4, 5, 6]),
        (2, vec![1, 2]),
        (2, vec![3, 4]),
        (2, vec![6, 7]),
        (1, vec![3]),
        (1, vec![4]),
        (1, vec![5]),
    ]
}
