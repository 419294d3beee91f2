//! Moment-matching transforms of sampled scores and their effect on the
//! spread of sampled dual estimates.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generate::rng_for;
use crate::linalg::{max_eigenvalue, min_eigenvalue, sym_inv_sqrt, sym_sqrt};
use crate::model::{BudgetWeights, GlobalBudget, MooProblem, UserItemMatrix};
use crate::pipeline::solve_dual;
use crate::solver::SolverConfig;

const ROOT_FLOOR: f64 = 1e-12;

/// Mean and `1/N` covariance of a full population.
#[derive(Clone, Debug, PartialEq)]
pub struct PopulationMoments {
    pub theta: DVector<f64>,
    pub sigma_full: DMatrix<f64>,
    pub size: usize,
}

impl PopulationMoments {
    pub fn new(theta: DVector<f64>, sigma_full: DMatrix<f64>, size: usize) -> Result<Self> {
        let d = theta.len();
        if sigma_full.nrows() != d || sigma_full.ncols() != d {
            return Err(Error::DimensionMismatch(format!(
                "mean has {} entries, covariance is {}x{}",
                d,
                sigma_full.nrows(),
                sigma_full.ncols()
            )));
        }
        let asym = (&sigma_full - sigma_full.transpose()).abs().max();
        if asym > 1e-8 || min_eigenvalue(&sigma_full) < -1e-8 {
            return Err(Error::InvalidProblem("population covariance is not symmetric PSD".into()));
        }
        Ok(Self {
            theta,
            sigma_full,
            size,
        })
    }

    /// Moments of every row of `rows`.
    pub fn from_rows(rows: &DMatrix<f64>) -> Self {
        let (theta, sigma_full) = moments(rows);
        Self {
            theta,
            sigma_full,
            size: rows.nrows(),
        }
    }
}

/// Mean and `1/n` covariance of the rows.
pub fn moments(rows: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.nrows() as f64;
    let mean = rows.row_sum().transpose() / n;
    let centered = centered(rows, &mean);
    let cov = centered.transpose() * &centered / n;
    (mean, cov)
}

fn centered(rows: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut out = rows.clone();
    for mut row in out.row_iter_mut() {
        row -= mean.transpose();
    }
    out
}

fn check_sample(rows: &DMatrix<f64>, pop: &PopulationMoments) -> Result<()> {
    if rows.ncols() != pop.theta.len() {
        return Err(Error::DimensionMismatch(format!(
            "sample has {} columns, population {}",
            rows.ncols(),
            pop.theta.len()
        )));
    }
    if rows.nrows() < 2 {
        return Err(Error::BadParams("a sample needs at least two rows".into()));
    }
    Ok(())
}

/// `p_u + theta - mean(p)`.
pub fn mm_additive(rows: &DMatrix<f64>, pop: &PopulationMoments) -> Result<DMatrix<f64>> {
    check_sample(rows, pop)?;
    let (mean, _) = moments(rows);
    let shift = &pop.theta - mean;
    let mut out = rows.clone();
    for mut row in out.row_iter_mut() {
        row += shift.transpose();
    }
    Ok(out)
}

/// `theta + S_full^{1/2} S_sample^{-1/2} (p_u - mean(p))`; falls back to the
/// additive transform when the sample covariance is numerically singular.
pub fn mm_full(rows: &DMatrix<f64>, pop: &PopulationMoments) -> Result<DMatrix<f64>> {
    check_sample(rows, pop)?;
    let (mean, cov) = moments(rows);
    let top = max_eigenvalue(&cov);
    if !(top > 0.0) || min_eigenvalue(&cov) <= 1e-12 * top {
        log::warn!("sample covariance is singular; using the additive transform");
        return mm_additive(rows, pop);
    }
    let map = sym_sqrt(&pop.sigma_full, ROOT_FLOOR) * sym_inv_sqrt(&cov, ROOT_FLOOR);
    let mut out = centered(rows, &mean) * map.transpose();
    for mut row in out.row_iter_mut() {
        row += pop.theta.transpose();
    }
    Ok(out)
}

/// Coordinatewise `p_u * theta / mean(p)`; zero-mean coordinates pass through.
pub fn mm_product(rows: &DMatrix<f64>, pop: &PopulationMoments) -> Result<DMatrix<f64>> {
    check_sample(rows, pop)?;
    let (mean, _) = moments(rows);
    let mut out = rows.clone();
    for j in 0..rows.ncols() {
        if mean[j] == 0.0 {
            log::warn!("sample mean of coordinate {} is zero; left unscaled", j);
            continue;
        }
        let ratio = pop.theta[j] / mean[j];
        out.column_mut(j).scale_mut(ratio);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Raw,
    /// Additive mean matching.
    Mod1,
    /// Mean and covariance matching.
    Mod2,
    /// Multiplicative mean matching.
    Mod3,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [Self::Raw, Self::Mod1, Self::Mod2, Self::Mod3];

    pub fn name(self) -> &'static str {
        match self {
            Self::Raw => "raw",
            Self::Mod1 => "mod1",
            Self::Mod2 => "mod2",
            Self::Mod3 => "mod3",
        }
    }

    pub fn apply(self, rows: &DMatrix<f64>, pop: &PopulationMoments) -> Result<DMatrix<f64>> {
        match self {
            Self::Raw => Ok(rows.clone()),
            Self::Mod1 => mm_additive(rows, pop),
            Self::Mod2 => mm_full(rows, pop),
            Self::Mod3 => mm_product(rows, pop),
        }
    }
}

impl std::str::FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Self::Raw),
            "mod1" | "mm_additive" => Ok(Self::Mod1),
            "mod2" | "mm_full" => Ok(Self::Mod2),
            "mod3" | "mm_product" => Ok(Self::Mod3),
            other => Err(Error::BadParams(format!("unknown estimator '{}'", other))),
        }
    }
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Synthetic population for the variance study: per-user latent levels,
/// Beta noise and sparse spikes; a complaint budget `r'x <= usage * n` and
/// a volume budget `sum x <= volume * n` on every sample of `n` users.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VarianceParams {
    pub population: usize,
    pub items: usize,
    pub gamma: f64,
    pub spike_weight: f64,
    pub spike_value: f64,
    /// Complaint bound per sampled user, as a fraction of the population's
    /// unconstrained usage.
    pub usage_fraction: f64,
    /// Volume bound per sampled user, as a fraction of the unconstrained volume.
    pub volume_fraction: f64,
}

impl Default for VarianceParams {
    fn default() -> Self {
        Self {
            population: 1000,
            items: 4,
            gamma: 1.0,
            spike_weight: 0.1,
            spike_value: 0.9,
            usage_fraction: 0.35,
            volume_fraction: 0.6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Population {
    pub params: VarianceParams,
    pub p: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p_moments: PopulationMoments,
    pub r_moments: PopulationMoments,
    /// Bounds per sampled user.
    pub usage_per_user: f64,
    pub volume_per_user: f64,
}

impl Population {
    pub fn generate(params: &VarianceParams, seed: u64) -> Result<Self> {
        if params.population < 2 || params.items == 0 || !(params.gamma > 0.0) {
            return Err(Error::BadParams("population >= 2, items >= 1 and gamma > 0 required".into()));
        }
        if !(0.0..=1.0).contains(&params.spike_weight) {
            return Err(Error::BadParams("spike weight must lie in [0, 1]".into()));
        }
        let (n, m) = (params.population, params.items);
        let mut rng = rng_for(seed);
        let latent = Beta::new(2.0, 2.0).expect("valid beta");
        let noise = Beta::new(1.0, 4.0).expect("valid beta");
        let draw = |rng: &mut ChaCha8Rng| {
            let level = latent.sample(rng);
            let mut row = vec![0.0; m];
            for v in row.iter_mut() {
                *v = if rng.gen_bool(params.spike_weight) {
                    params.spike_value
                } else {
                    0.6 * level + 0.4 * noise.sample(rng)
                };
            }
            row
        };
        let mut p = DMatrix::zeros(n, m);
        let mut r = DMatrix::zeros(n, m);
        for u in 0..n {
            let pr = draw(&mut rng);
            let rr = draw(&mut rng);
            for i in 0..m {
                p[(u, i)] = pr[i];
                r[(u, i)] = rr[i];
            }
        }
        let free = p.map(|v| (v / params.gamma).clamp(0.0, 1.0));
        let usage = r.component_mul(&free).sum() / n as f64;
        let volume = free.sum() / n as f64;
        Ok(Self {
            p_moments: PopulationMoments::from_rows(&p),
            r_moments: PopulationMoments::from_rows(&r),
            usage_per_user: params.usage_fraction * usage,
            volume_per_user: params.volume_fraction * volume,
            params: params.clone(),
            p,
            r,
        })
    }

    /// The sampled problem built from (possibly transformed) score rows.
    pub fn sample_problem(&self, p: &DMatrix<f64>, r: &DMatrix<f64>) -> MooProblem {
        let (n, m) = (p.nrows(), p.ncols());
        MooProblem {
            gamma: self.params.gamma,
            p: UserItemMatrix::from_fn(n, m, |u, i| p[(u, i)]),
            r: UserItemMatrix::from_fn(n, m, |u, i| r[(u, i)]),
            q: UserItemMatrix::zeros(n, m),
            budgets: vec![
                GlobalBudget::at_most(BudgetWeights::Complaint, self.usage_per_user * n as f64),
                GlobalBudget::at_most(
                    BudgetWeights::Inline(UserItemMatrix::filled(n, m, 1.0)),
                    self.volume_per_user * n as f64,
                ),
            ],
            locals: vec![],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub estimator: Estimator,
    pub n: usize,
    pub reps: usize,
    pub mu0_mean: f64,
    pub mu0_var: f64,
    pub mu1_mean: f64,
    pub mu1_var: f64,
    pub oob_fraction: f64,
    /// Fewer than 30 repetitions; variances are unreliable (NaN below 2).
    pub insufficient_reps: bool,
    #[serde(skip)]
    pub mu0: Vec<f64>,
    #[serde(skip)]
    pub mu1: Vec<f64>,
}

pub const MIN_REPS: usize = 30;

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() < 2 {
        f64::NAN
    } else {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    };
    (mean, var)
}

fn study_solver() -> SolverConfig {
    SolverConfig {
        eps_abs: 1e-8,
        eps_rel: 1e-7,
        ..Default::default()
    }
}

/// Draws `n` users `reps` times (rep `k` uses seed `seed + k`), transforms
/// `p` and `r` with each estimator and records the two budget duals. All
/// estimators see the same draws, so their reports are paired.
pub fn dual_variance_study(
    population: &Population,
    estimators: &[Estimator],
    n: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<VarianceReport>> {
    if n < 2 || n > population.p.nrows() {
        return Err(Error::BadParams(format!(
            "sample size {} must lie in 2..={}",
            n,
            population.p.nrows()
        )));
    }
    if reps == 0 {
        return Err(Error::BadParams("reps must be at least 1".into()));
    }
    let cfg = study_solver();
    // results[rep][estimator] = (mu0, mu1, out-of-range count)
    let results: Vec<Vec<(f64, f64, usize)>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = rng_for(seed.wrapping_add(rep as u64));
            let mut idx = sample_indices(&mut rng, population.p.nrows(), n).into_vec();
            idx.sort_unstable();
            let p = population.p.select_rows(&idx);
            let r = population.r.select_rows(&idx);
            estimators
                .iter()
                .map(|est| {
                    let pt = est.apply(&p, &population.p_moments)?;
                    let rt = est.apply(&r, &population.r_moments)?;
                    let oob = pt.iter().chain(rt.iter()).filter(|v| !(0.0..=1.0).contains(*v)).count();
                    let (_, sol) = solve_dual(&population.sample_problem(&pt, &rt), &cfg)?;
                    Ok((sol.mu[0], sol.mu[1], oob))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let entries = (2 * n * population.params.items * reps) as f64;
    Ok(estimators
        .iter()
        .enumerate()
        .map(|(k, &estimator)| {
            let mu0: Vec<f64> = results.iter().map(|r| r[k].0).collect();
            let mu1: Vec<f64> = results.iter().map(|r| r[k].1).collect();
            let oob: usize = results.iter().map(|r| r[k].2).sum();
            let (mu0_mean, mu0_var) = mean_var(&mu0);
            let (mu1_mean, mu1_var) = mean_var(&mu1);
            VarianceReport {
                estimator,
                n,
                reps,
                mu0_mean,
                mu0_var,
                mu1_mean,
                mu1_var,
                oob_fraction: oob as f64 / entries,
                insufficient_reps: reps < MIN_REPS,
                mu0,
                mu1,
            }
        })
        .collect())
}

/// Difference of sample variances `V(a) - V(b)` of paired draws and the
/// standard error of that difference.
pub fn paired_variance_gap(a: &[f64], b: &[f64]) -> (f64, f64) {
    assert_eq!(a.len(), b.len(), "paired samples must have equal length");
    let n = a.len() as f64;
    let (ma, _) = mean_var(a);
    let (mb, _) = mean_var(b);
    let d: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| ((x - ma).powi(2) - (y - mb).powi(2)) * n / (n - 1.0))
        .collect();
    let (gap, var) = mean_var(&d);
    (gap, (var / n).sqrt())
}

#[derive(Clone, Debug)]
pub struct AdditiveCheck {
    /// Mean over resamples of the transformed sample mean.
    pub mean: DVector<f64>,
    /// Standard error of each coordinate of `mean`.
    pub mean_se: DVector<f64>,
    /// Covariance of a transformed unit around the distribution mean.
    pub cov: DMatrix<f64>,
    pub expected_factor: f64,
}

/// Monte Carlo for the additive transform: every resample draws a fresh
/// Gaussian population `N(mu, sigma)` of size `big_n`, samples `n` units
/// without replacement and transforms them with that population's mean.
pub fn additive_monte_carlo(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    big_n: usize,
    n: usize,
    reps: usize,
    seed: u64,
) -> Result<AdditiveCheck> {
    if n < 2 || n > big_n || reps < 2 {
        return Err(Error::BadParams("need 2 <= n <= N and reps >= 2".into()));
    }
    let d = mu.len();
    let root = sym_sqrt(sigma, 0.0);
    let per_rep: Vec<(DVector<f64>, DMatrix<f64>)> = (0..reps)
        .into_par_iter()
        .map(|rep| -> Result<_> {
            let mut rng = rng_for(seed.wrapping_add(rep as u64));
            let z = DMatrix::<f64>::from_fn(big_n, d, |_, _| rng.sample(StandardNormal));
            let mut pop = z * root.transpose();
            for mut row in pop.row_iter_mut() {
                row += mu.transpose();
            }
            let moments = PopulationMoments::from_rows(&pop);
            let idx = sample_indices(&mut rng, big_n, n).into_vec();
            let out = mm_additive(&pop.select_rows(&idx), &moments)?;
            let mean = out.row_sum().transpose() / n as f64;
            let dev = centered(&out, mu);
            Ok((mean, dev.transpose() * dev))
        })
        .collect::<Result<_>>()?;
    let mut mean = DVector::zeros(d);
    let mut cov = DMatrix::zeros(d, d);
    for (m, c) in &per_rep {
        mean += m;
        cov += c;
    }
    mean /= reps as f64;
    cov /= (reps * n) as f64;
    let mut var = DVector::zeros(d);
    for (m, _) in &per_rep {
        var += (m - &mean).map(|v| v * v);
    }
    let mean_se = (var / ((reps - 1) * reps) as f64).map(f64::sqrt);
    Ok(AdditiveCheck {
        mean,
        mean_se,
        cov,
        expected_factor: 1.0 + 1.0 / big_n as f64 - 1.0 / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::{prop_assert, proptest};

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    fn pop1(theta: f64, var: f64) -> PopulationMoments {
        PopulationMoments::new(DVector::from_element(1, theta), DMatrix::from_element(1, 1, var), 10).unwrap()
    }

    fn random_rows(seed: u64, n: usize, d: usize) -> DMatrix<f64> {
        let mut rng = rng_for(seed);
        DMatrix::from_fn(n, d, |_, _| rng.gen::<f64>())
    }

    #[test]
    fn additive_shifts_to_population_mean() {
        let rows = col(&[1.0, 2.0, 6.0]);
        let out = mm_additive(&rows, &pop1(2.0, 1.0)).unwrap();
        assert_relative_eq!(out, col(&[0.0, 1.0, 5.0]), epsilon = 1e-12);
        let same = mm_additive(&rows, &pop1(3.0, 1.0)).unwrap();
        assert_relative_eq!(same, rows, epsilon = 1e-12);
    }

    #[test]
    fn census_is_left_alone() {
        let rows = random_rows(1, 20, 3);
        let pop = PopulationMoments::from_rows(&rows);
        for est in Estimator::ALL {
            assert_relative_eq!(est.apply(&rows, &pop).unwrap(), rows, epsilon = 1e-10);
        }
    }

    #[test]
    fn full_matching_scales_scalar_deviations() {
        // Variance 1 around mean 0; target variance 4.
        let rows = col(&[-1.0, 1.0]);
        let out = mm_full(&rows, &pop1(0.0, 4.0)).unwrap();
        assert_relative_eq!(out, col(&[-2.0, 2.0]), epsilon = 1e-10);
    }

    #[test]
    fn full_matching_hits_both_moments() {
        let rows = random_rows(2, 40, 5);
        let target_rows = random_rows(3, 200, 5) * 2.0;
        let pop = PopulationMoments::from_rows(&target_rows);
        let (mean, cov) = moments(&mm_full(&rows, &pop).unwrap());
        assert_relative_eq!(mean, pop.theta, epsilon = 1e-8);
        assert_relative_eq!(cov, pop.sigma_full, epsilon = 1e-8);
    }

    #[test]
    fn singular_sample_falls_back_to_additive() {
        let rows = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let pop = PopulationMoments::from_rows(&random_rows(4, 50, 2));
        assert_relative_eq!(mm_full(&rows, &pop).unwrap(), mm_additive(&rows, &pop).unwrap());
    }

    #[test]
    fn product_matching_example() {
        let out = mm_product(&col(&[2.0, 4.0]), &pop1(1.5, 1.0)).unwrap();
        assert_relative_eq!(out, col(&[1.0, 2.0]), epsilon = 1e-12);
        let zero = mm_product(&col(&[-1.0, 1.0]), &pop1(1.5, 1.0)).unwrap();
        assert_eq!(zero, col(&[-1.0, 1.0]));
    }

    #[test]
    fn transforms_are_deterministic() {
        let rows = random_rows(5, 30, 3);
        let pop = PopulationMoments::from_rows(&random_rows(6, 100, 3));
        for est in Estimator::ALL {
            assert_eq!(est.apply(&rows, &pop).unwrap(), est.apply(&rows, &pop).unwrap());
        }
    }

    #[test]
    fn estimator_names_round_trip() {
        for est in Estimator::ALL {
            assert_eq!(est.name().parse::<Estimator>().unwrap(), est);
        }
        assert_eq!("mm_full".parse::<Estimator>().unwrap(), Estimator::Mod2);
        assert!("mod4".parse::<Estimator>().is_err());
    }

    #[test]
    fn invalid_population_moments() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(PopulationMoments::new(DVector::zeros(2), asym, 5).is_err());
        assert!(PopulationMoments::new(DVector::zeros(3), DMatrix::identity(2, 2), 5).is_err());
    }

    #[test]
    fn single_rep_is_flagged() {
        let params = VarianceParams {
            population: 60,
            items: 2,
            ..Default::default()
        };
        let pop = Population::generate(&params, 1).unwrap();
        let report = dual_variance_study(&pop, &[Estimator::Raw], 20, 1, 1).unwrap();
        assert!(report[0].insufficient_reps);
        assert!(report[0].mu0_var.is_nan());
    }

    #[test]
    fn paired_gap_of_identical_draws_is_zero() {
        let a = [1.0, 2.0, 4.0, 3.0];
        assert_eq!(paired_variance_gap(&a, &a), (0.0, 0.0));
        let doubled: Vec<f64> = a.iter().map(|v| 2.0 * v).collect();
        let (gap, _) = paired_variance_gap(&doubled, &a);
        assert_relative_eq!(gap, 3.0 * mean_var(&a).1, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn product_keeps_nonnegative_values(v in proptest::collection::vec(0.0f64..5.0, 2..20), theta in 0.0f64..3.0) {
            let out = mm_product(&col(&v), &pop1(theta, 1.0)).unwrap();
            prop_assert!(out.iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn additive_and_product_match_the_mean(v in proptest::collection::vec(0.1f64..5.0, 2..20), theta in 0.1f64..3.0) {
            let pop = pop1(theta, 1.0);
            for out in [mm_additive(&col(&v), &pop).unwrap(), mm_product(&col(&v), &pop).unwrap()] {
                prop_assert!((moments(&out).0[0] - theta).abs() < 1e-10);
            }
        }
    }
}
