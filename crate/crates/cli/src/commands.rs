use std::path::{Path, PathBuf};

use moo_core::dag::split::{binary_tree_instance, exp_split_curve, tree_subsets};
use moo_core::dag::{build_dag, RootPolicy};
use moo_core::generate::{rng_for, sparse_spike_mixture, uniform};
use moo_core::model::{InstanceFile, MooProblem, UserItemMatrix};
use moo_core::pipeline::{flatten, recover_all, solve_dual};
use moo_core::variance::{dual_variance_study, Estimator, Population, PopulationMoments, MIN_REPS};
use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::json;

use crate::config::Config;
use crate::error::CliError;
use crate::output::{read_csv_records, RunOutput};

pub fn load_instance(path: &Path) -> Result<MooProblem, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::input(format!("cannot read instance {}: {}", path.display(), e)))?;
    let file = InstanceFile::from_json(&text)
        .map_err(|e| CliError::input(format!("{}: {}", path.display(), e)))?;
    file.to_problem()
        .map_err(|e| CliError::input(format!("{}: {}", path.display(), e)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum InstanceKind {
    Uniform,
    SparseSpikeMixture,
    BinaryTree,
}

pub fn gen(kind: InstanceKind, cfg: &Config, out: &mut RunOutput) -> Result<serde_json::Value, CliError> {
    let problem = match kind {
        InstanceKind::Uniform => uniform(&cfg.gen.uniform, cfg.seed)?,
        InstanceKind::SparseSpikeMixture => sparse_spike_mixture(&cfg.gen.spike, cfg.seed)?,
        InstanceKind::BinaryTree => binary_tree_instance(&cfg.gen.tree, cfg.seed)?,
    };
    out.write_text("instance.json", &(InstanceFile::from_problem(&problem).to_json() + "\n"))?;
    Ok(json!({
        "kind": format!("{:?}", kind),
        "users": problem.num_users(),
        "items": problem.num_items(),
        "budgets": problem.budgets.len(),
    }))
}

fn rows_of(m: &UserItemMatrix) -> DMatrix<f64> {
    DMatrix::from_fn(m.users(), m.items(), |u, i| m.get(u, i))
}

fn to_matrix(rows: &DMatrix<f64>) -> UserItemMatrix {
    UserItemMatrix::from_fn(rows.nrows(), rows.ncols(), |u, i| rows[(u, i)])
}

/// The Stage 1 instance: everyone, or a seeded sample of users with bounds
/// scaled to the sample and scores passed through the estimator.
fn stage_one(problem: &MooProblem, cfg: &Config) -> Result<MooProblem, CliError> {
    let Some(n) = cfg.pipeline.sample_size else {
        return Ok(problem.clone());
    };
    let total = problem.num_users();
    if n < 2 || n > total {
        return Err(CliError::input(format!("sample size {} must lie in 2..={}", n, total)));
    }
    let mut rng = rng_for(cfg.seed);
    let mut idx = rand::seq::index::sample(&mut rng, total, n).into_vec();
    idx.sort_unstable();
    let mut sample = problem.restrict_users(&idx, true);
    let estimator = cfg.pipeline.estimator.unwrap_or(Estimator::Raw);
    let (p_all, r_all) = (rows_of(&problem.p), rows_of(&problem.r));
    let p = estimator.apply(&p_all.select_rows(&idx), &PopulationMoments::from_rows(&p_all))?;
    let r = estimator.apply(&r_all.select_rows(&idx), &PopulationMoments::from_rows(&r_all))?;
    sample.p = to_matrix(&p);
    sample.r = to_matrix(&r);
    Ok(sample)
}

#[derive(Serialize)]
struct DualRow {
    index: usize,
    label: String,
    value: f64,
}

#[derive(Serialize)]
struct PlanRow {
    user: usize,
    item: usize,
    x: f64,
}

fn plan_rows(x: &[f64], items: usize) -> Vec<PlanRow> {
    x.iter()
        .enumerate()
        .map(|(k, &v)| PlanRow {
            user: k / items,
            item: k % items,
            x: v,
        })
        .collect()
}

pub fn solve(instance: &Path, cfg: &Config, out: &mut RunOutput) -> Result<serde_json::Value, CliError> {
    let problem = load_instance(instance)?;
    let stage1 = stage_one(&problem, cfg)?;
    let (dual, sol) = solve_dual(&stage1, &cfg.solver)?;
    let duals: Vec<DualRow> = sol
        .z
        .iter()
        .enumerate()
        .map(|(index, &value)| DualRow {
            index,
            label: dual.labels()[index].to_string(),
            value,
        })
        .collect();
    out.write_csv("duals.csv", &duals)?;
    if !sol.trace.is_empty() {
        let header: Vec<String> = ["iter", "r_norm", "s_norm"]
            .iter()
            .map(|s| s.to_string())
            .chain((0..sol.mu.len()).map(|b| format!("mu_{}", b)))
            .collect();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows: Vec<Vec<String>> = sol
            .trace
            .iter()
            .map(|t| {
                [t.iter.to_string(), t.r_norm.to_string(), t.s_norm.to_string()]
                    .into_iter()
                    .chain(t.mu.iter().map(|v| v.to_string()))
                    .collect()
            })
            .collect();
        out.write_table("trace.csv", &header, &rows)?;
    }
    let plans = recover_all(&problem, &sol.mu)?;
    let x = flatten(&plans);
    out.write_csv("plans.csv", &plan_rows(&x, problem.num_items()))?;
    Ok(json!({
        "instance": instance.display().to_string(),
        "estimator": cfg.pipeline.estimator.map(|e| e.name()),
        "sample_size": cfg.pipeline.sample_size,
        "dual_dim": dual.dim(),
        "iterations": sol.iterations,
        "converged": sol.converged,
        "r_norm": sol.r_norm,
        "s_norm": sol.s_norm,
        "kkt_residual": sol.kkt_residual,
        "mu": sol.mu,
        "engagement": problem.engagement_objective(&x),
        "min_objective": problem.min_objective(&x),
        "max_violation": problem.max_violation(&x),
    }))
}

/// Budget multipliers from a `duals.csv`: rows labelled `mu_<b>`.
pub fn read_budget_duals(path: &Path) -> Result<Vec<f64>, CliError> {
    let (header, rows) = read_csv_records(path)?;
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::input(format!("{}: missing column '{}'", path.display(), name)))
    };
    let (label, value) = (col("label")?, col("value")?);
    let mut mu = Vec::new();
    for row in rows {
        if let Some(b) = row[label].strip_prefix("mu_") {
            let b: usize = b
                .parse()
                .map_err(|_| CliError::input(format!("{}: bad label '{}'", path.display(), row[label])))?;
            let v: f64 = row[value]
                .parse()
                .map_err(|_| CliError::input(format!("{}: bad value '{}'", path.display(), row[value])))?;
            if mu.len() <= b {
                mu.resize(b + 1, f64::NAN);
            }
            mu[b] = v;
        }
    }
    if mu.iter().any(|v| v.is_nan()) {
        return Err(CliError::input(format!("{}: budget multipliers are incomplete", path.display())));
    }
    Ok(mu)
}

pub fn recover(instance: &Path, duals: &Path, out: &mut RunOutput) -> Result<serde_json::Value, CliError> {
    let problem = load_instance(instance)?;
    let mu = read_budget_duals(duals)?;
    let plans = recover_all(&problem, &mu)?;
    let x = flatten(&plans);
    out.write_csv("plans.csv", &plan_rows(&x, problem.num_items()))?;
    Ok(json!({
        "instance": instance.display().to_string(),
        "duals": duals.display().to_string(),
        "engagement": problem.engagement_objective(&x),
        "max_violation": problem.max_violation(&x),
    }))
}

pub fn dag(
    instance: Option<&Path>,
    sets: Option<&Path>,
    levels: Option<usize>,
    cfg: &Config,
    out: &mut RunOutput,
) -> Result<serde_json::Value, CliError> {
    let subsets: Vec<(usize, Vec<usize>)> = match (instance, sets, levels) {
        (Some(path), None, None) => {
            let problem = load_instance(path)?;
            let n = problem.num_users();
            problem
                .budgets
                .iter()
                .map(|b| {
                    let s = b.support(n);
                    (s.len(), s)
                })
                .collect()
        }
        (None, Some(path), None) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::input(format!("cannot read sets {}: {}", path.display(), e)))?;
            let raw: Vec<Vec<usize>> = serde_json::from_str(&text)
                .map_err(|e| CliError::input(format!("{}: expected a list of index lists: {}", path.display(), e)))?;
            raw.into_iter().map(|s| (s.len(), s)).collect()
        }
        (None, None, Some(k)) => tree_subsets(k),
        _ => return Err(CliError::input("give exactly one of --instance, --sets or --levels")),
    };
    let graph = build_dag(&subsets, cfg.dag.root)?;
    let edges: Vec<Vec<String>> = graph
        .edges
        .iter()
        .map(|(p, c)| vec![p.to_string(), c.to_string()])
        .collect();
    out.write_table("edges.csv", &["parent", "child"], &edges)?;
    let nodes: Vec<Vec<String>> = graph
        .nodes
        .iter()
        .map(|n| {
            let members: Vec<String> = n.members.iter().map(|m| m.to_string()).collect();
            vec![n.id.to_string(), n.level.to_string(), members.join(" ")]
        })
        .collect();
    out.write_table("nodes.csv", &["id", "level", "members"], &nodes)?;
    let file = serde_json::to_string_pretty(&graph.to_file()).map_err(|e| CliError::internal(e.to_string()))?;
    out.write_text("dag.json", &(file + "\n"))?;
    Ok(json!({
        "nodes": graph.nodes.len(),
        "edges": graph.edges.len(),
        "root": graph.root,
        "root_policy": match cfg.dag.root { RootPolicy::AddUnion => "add-union", RootPolicy::None => "none" },
    }))
}

pub fn split_curve(cfg: &Config, out: &mut RunOutput) -> Result<serde_json::Value, CliError> {
    let s = &cfg.split;
    if s.tree.levels > 10 {
        return Err(CliError::input("split-curve supports at most 10 levels"));
    }
    let curve = exp_split_curve(&s.tree, s.reps, s.w, s.beta, cfg.seed, s.timing)?;
    out.write_csv("split_curve.csv", &curve.rows)?;
    out.write_csv("stage2.csv", &curve.selection)?;
    Ok(json!({
        "levels": s.tree.levels,
        "reps": s.reps,
        "w": s.w,
        "beta": s.beta,
        "timing": s.timing,
        "selected": curve.selection.iter().filter(|r| r.selected).map(|r| r.node).collect::<Vec<_>>(),
    }))
}

#[derive(Serialize)]
struct VarianceRow {
    estimator: String,
    n: usize,
    reps: usize,
    mu0_mean: f64,
    mu0_var: f64,
    mu1_mean: f64,
    mu1_var: f64,
    oob_fraction: f64,
}

pub fn variance_table(cfg: &Config, out: &mut RunOutput) -> Result<serde_json::Value, CliError> {
    let v = &cfg.variance;
    if v.reps < MIN_REPS {
        return Err(CliError::input(format!("variance-table needs at least {} reps, got {}", MIN_REPS, v.reps)));
    }
    let population = Population::generate(&v.population, cfg.seed)?;
    let estimators: Vec<Estimator> = match cfg.pipeline.estimator {
        Some(e) => vec![e],
        None => Estimator::ALL.to_vec(),
    };
    let reports = dual_variance_study(&population, &estimators, v.n, v.reps, cfg.seed)?;
    let rows: Vec<VarianceRow> = reports
        .iter()
        .map(|r| VarianceRow {
            estimator: r.estimator.name().to_string(),
            n: r.n,
            reps: r.reps,
            mu0_mean: r.mu0_mean,
            mu0_var: r.mu0_var,
            mu1_mean: r.mu1_mean,
            mu1_var: r.mu1_var,
            oob_fraction: r.oob_fraction,
        })
        .collect();
    out.write_csv("variance_table.csv", &rows)?;
    Ok(json!({
        "population": v.population.population,
        "n": v.n,
        "reps": v.reps,
        "estimators": estimators.iter().map(|e| e.name()).collect::<Vec<_>>(),
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum PlotKind {
    SplitCurve,
    VarianceTable,
}

/// A gnuplot script for a CSV written by `split-curve` or `variance-table`.
pub fn plot_script(kind: PlotKind, csv: &Path) -> String {
    let csv = csv.display();
    match kind {
        PlotKind::SplitCurve => format!(
            "set datafile separator ','\n\
             set datafile commentschars '#'\n\
             set key autotitle columnhead\n\
             set logscale x\n\
             set xlabel 'online time (s)'\n\
             set ylabel 'MSE of objective'\n\
             set terminal pngcairo size 800,600\n\
             set output 'split_curve.png'\n\
             plot '{csv}' using 3:2:1 with linespoints notitle, \\\n     \
             '' using 3:2:(sprintf('k=%d', $1)) with labels offset 1,1 notitle\n"
        ),
        PlotKind::VarianceTable => format!(
            "set datafile separator ','\n\
             set datafile commentschars '#'\n\
             set style data histograms\n\
             set style fill solid 0.6\n\
             set ylabel 'variance of mu_0'\n\
             set terminal pngcairo size 800,600\n\
             set output 'variance_table.png'\n\
             plot '{csv}' using 5:xtic(1) title 'V(mu_0)'\n"
        ),
    }
}

pub fn validate(instance: &Path) -> Result<(bool, String), CliError> {
    let problem = load_instance(instance)?;
    let report = problem.validate();
    Ok((report.is_empty(), report.to_string()))
}

pub fn default_out_dir(command: &str) -> PathBuf {
    PathBuf::from("out").join(command)
}
