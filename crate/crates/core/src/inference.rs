//! Nested-model testing.
//!
//! `T_n = n (min U_n restricted - min U_n full)` is compared with its
//! chi-square limit. `S_n`, the same difference of minimized MSE costs,
//! has a weighted chi-square limit whose weights are not available in
//! closed form, so it is only calibrated by simulation.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::checked_gamma_ur;

use crate::error::{Error, Result};
use crate::estimate::{fit_logdet, fit_ols, CostKind, FitResult};
use crate::model::ModelSpec;
use crate::optimize::OptimOptions;
use crate::rng::{sub_seed, Stream};
use crate::simulate::{gen_series, SimRecipe};

/// Relative (per observation) window in which a negative statistic is
/// attributed to optimizer noise and clamped to zero.
pub const CLAMP_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    ChiSquareAsymptotic,
    MonteCarloNull,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    pub alpha: f64,
    pub reject: bool,
    pub method: TestMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc_samples: Option<usize>,
}

/// Upper tail `P(X >= x)` of a chi-square law with `k` degrees of freedom.
pub fn chi2_sf(x: f64, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::DomainError("chi-square needs k >= 1".into()));
    }
    if x.is_nan() || x < 0.0 {
        return Err(Error::DomainError(format!("chi-square tail needs x >= 0, got {x}")));
    }
    if x == 0.0 {
        return Ok(1.0);
    }
    if x.is_infinite() {
        return Ok(0.0);
    }
    checked_gamma_ur(k as f64 / 2.0, x / 2.0)
        .map(|p| p.clamp(0.0, 1.0))
        .map_err(|e| Error::DomainError(e.to_string()))
}

/// Degrees of freedom `K_full - K_restricted` of a nested pair.
pub fn check_nested(restricted: &ModelSpec, full: &ModelSpec) -> Result<usize> {
    if !restricted.is_submask_of(full) {
        return Err(Error::NotNested(format!(
            "{} is not a restriction of {}",
            restricted.describe(),
            full.describe()
        )));
    }
    let (q, s) = (restricted.param_count(), full.param_count());
    if q >= s {
        return Err(Error::NotNested(format!(
            "restricted model must have fewer free parameters ({q} vs {s})"
        )));
    }
    Ok(s - q)
}

/// Clamps values in `(-CLAMP_TOL * n, 0)` to zero.
pub fn clamp_statistic(raw: f64, n: usize) -> Result<f64> {
    if raw >= 0.0 {
        Ok(raw)
    } else if raw > -CLAMP_TOL * n as f64 {
        Ok(0.0)
    } else {
        Err(Error::NegativeStatistic { statistic: raw })
    }
}

fn check_pair(restricted: &FitResult, full: &FitResult, kind: CostKind) -> Result<usize> {
    for fit in [restricted, full] {
        if fit.cost_kind != kind {
            return Err(Error::InvalidInput(format!(
                "expected {kind:?} fits, got {:?}",
                fit.cost_kind
            )));
        }
    }
    if restricted.n != full.n {
        return Err(Error::InvalidInput("fits use different sample sizes".into()));
    }
    let dof = check_nested(&restricted.spec, &full.spec)?;
    for (name, fit) in [("restricted", restricted), ("full", full)] {
        if !fit.optim.converged {
            warn!("{name} fit did not meet the gradient tolerance");
        }
    }
    Ok(dof)
}

/// `n (U_n(w_restricted) - U_n(w_full))`, clamped.
pub fn tn_statistic(restricted: &FitResult, full: &FitResult) -> Result<f64> {
    check_pair(restricted, full, CostKind::LogDet)?;
    clamp_statistic(
        full.n as f64 * (restricted.logdet_value() - full.logdet_value()),
        full.n,
    )
}

/// `n (V_n(w_restricted) - V_n(w_full))`, clamped.
pub fn sn_statistic(restricted: &FitResult, full: &FitResult) -> Result<f64> {
    check_pair(restricted, full, CostKind::Mse)?;
    clamp_statistic(full.n as f64 * (restricted.mse_value() - full.mse_value()), full.n)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

/// Asymptotic chi-square test of the restricted model against the full one.
pub fn tn_test(restricted: &FitResult, full: &FitResult, alpha: f64) -> Result<TestReport> {
    check_alpha(alpha)?;
    let dof = check_pair(restricted, full, CostKind::LogDet)?;
    if !full.identifiable {
        return Err(Error::NonIdentifiable);
    }
    let statistic = tn_statistic(restricted, full)?;
    let p_value = chi2_sf(statistic, dof)?;
    Ok(TestReport {
        statistic,
        dof,
        p_value,
        alpha,
        reject: p_value < alpha,
        method: TestMethod::ChiSquareAsymptotic,
        mc_samples: None,
    })
}

/// Test report for `statistic` against a simulated null distribution.
pub fn mc_test(statistic: f64, dof: usize, null: &NullDistribution, alpha: f64) -> Result<TestReport> {
    check_alpha(alpha)?;
    let p_value = null.p_value(statistic);
    Ok(TestReport {
        statistic,
        dof,
        p_value,
        alpha,
        reject: p_value < alpha,
        method: TestMethod::MonteCarloNull,
        mc_samples: Some(null.samples.len()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatKind {
    Tn,
    Sn,
}

/// Sorted statistic samples simulated under the null hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullDistribution {
    pub kind: StatKind,
    pub dof: usize,
    pub reps: usize,
    pub failures: usize,
    pub samples: Vec<f64>,
}

impl NullDistribution {
    /// `(1 + #{samples >= observed}) / (R + 1)`.
    pub fn p_value(&self, observed: f64) -> f64 {
        let first_ge = self.samples.partition_point(|s| *s < observed);
        let count = self.samples.len() - first_ge;
        (1 + count) as f64 / (self.samples.len() + 1) as f64
    }

    /// Linearly interpolated empirical quantile.
    pub fn quantile(&self, p: f64) -> f64 {
        empirical_quantile(&self.samples, p)
    }

    /// Standard error of `quantile(p)`, from the density estimated by a
    /// difference quotient of the empirical quantile function with
    /// bandwidth `1/sqrt(R)`.
    pub fn quantile_se(&self, p: f64) -> f64 {
        quantile_se(&self.samples, p)
    }

    /// Fraction of samples whose chi-square p-value falls below `alpha`.
    pub fn rejection_rate(&self, alpha: f64) -> f64 {
        let hits = self
            .samples
            .iter()
            .filter(|s| chi2_sf(**s, self.dof).map_or(false, |p| p < alpha))
            .count();
        hits as f64 / self.samples.len() as f64
    }

    /// Kolmogorov-Smirnov distance to the chi-square law with `dof` degrees.
    pub fn ks_chi2(&self) -> f64 {
        ks_distance(&self.samples, |x| 1.0 - chi2_sf(x.max(0.0), self.dof).unwrap_or(1.0))
    }
}

/// Type-7 quantile of sorted `samples`.
pub fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let m = sorted.len();
    if m == 0 {
        return f64::NAN;
    }
    let h = (m - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(m - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile_se(sorted: &[f64], p: f64) -> f64 {
    let m = sorted.len() as f64;
    let h = 1.0 / m.sqrt();
    let (lo, hi) = ((p - h).max(0.0), (p + h).min(1.0));
    let sparsity = (empirical_quantile(sorted, hi) - empirical_quantile(sorted, lo)) / (hi - lo);
    (p * (1.0 - p) / m).sqrt() * sparsity
}

/// Two-sided KS distance between sorted `samples` and a continuous `cdf`.
pub fn ks_distance(sorted: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let m = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let c = cdf(*x);
            (c - i as f64 / m).max((i + 1) as f64 / m - c)
        })
        .fold(0.0, f64::max)
}

/// Checks that the recipe's true parameters satisfy the restriction.
fn check_null_recipe(restricted: &ModelSpec, recipe: &SimRecipe) -> Result<()> {
    let (spec, w) = recipe.validate()?;
    if spec.grid_size() != restricted.grid_size()
        || spec.input_dim() != restricted.input_dim()
        || spec.output_dim() != restricted.output_dim()
    {
        return Err(Error::InvalidInput("recipe model does not match the tested family".into()));
    }
    let grid = spec.scatter(w.as_slice());
    let mask = restricted.full_mask();
    if grid.iter().zip(&mask).any(|(v, free)| !free && *v != 0.0) {
        return Err(Error::InvalidInput(
            "recipe parameters violate the null hypothesis (non-zero frozen weight)".into(),
        ));
    }
    Ok(())
}

/// One null replication: data from sub-seed `(seed, Calibration, r)`,
/// both models refitted with starts keyed by `(seed, Starts, r)`.
pub fn null_replication(
    kind: StatKind,
    restricted: &ModelSpec,
    full: &ModelSpec,
    recipe: &SimRecipe,
    seed: u64,
    r: usize,
    opts: &OptimOptions,
) -> Result<f64> {
    let data_seed = sub_seed(seed, &[Stream::Calibration as u64, r as u64]);
    let optim = opts.clone().with_seed(sub_seed(seed, &[Stream::Starts as u64, r as u64]));
    let data = gen_series(&recipe.clone().with_seed(data_seed))?;
    match kind {
        StatKind::Tn => {
            let fr = fit_logdet(restricted, &data, &optim)?;
            let ff = fit_logdet(full, &data, &optim)?;
            tn_statistic(&fr, &ff)
        }
        StatKind::Sn => {
            let fr = fit_ols(restricted, &data, &optim)?;
            let ff = fit_ols(full, &data, &optim)?;
            sn_statistic(&fr, &ff)
        }
    }
}

/// Simulates `reps` draws of the statistic under the null hypothesis
/// generated by `recipe`. Failed replications are dropped and counted;
/// more than 5% failures abort.
pub fn mc_null_calibrate(
    kind: StatKind,
    restricted: &ModelSpec,
    full: &ModelSpec,
    recipe: &SimRecipe,
    reps: usize,
    seed: u64,
    opts: &OptimOptions,
) -> Result<NullDistribution> {
    if reps == 0 {
        return Err(Error::EmptyCalibration);
    }
    let dof = check_nested(restricted, full)?;
    check_null_recipe(restricted, recipe)?;
    opts.validate()?;
    let results: Vec<Result<f64>> = (0..reps)
        .into_par_iter()
        .map(|r| null_replication(kind, restricted, full, recipe, seed, r, opts))
        .collect();
    let mut samples = Vec::with_capacity(reps);
    let mut failures = 0;
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(s) => samples.push(s),
            Err(e) => {
                warn!("calibration replication {r} failed: {e}");
                failures += 1;
            }
        }
    }
    if failures * 20 > reps {
        return Err(Error::TooManyFailures { failed: failures, total: reps });
    }
    if samples.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    samples.sort_by(f64::total_cmp);
    Ok(NullDistribution {
        kind,
        dof,
        reps,
        failures,
        samples,
    })
}

/// Empirical size of the chi-square `T_n` test under a simulated null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub schema_version: String,
    pub reps: usize,
    pub failures: usize,
    pub dof: usize,
    pub alphas: Vec<f64>,
    pub rejection_rates: Vec<f64>,
    /// Binomial standard errors `sqrt(alpha (1 - alpha) / R)`.
    pub binomial_se: Vec<f64>,
    pub ks_distance: f64,
    /// 1%-level KS critical value `1.63 / sqrt(R)`.
    pub ks_critical: f64,
    pub quantile_95: f64,
    pub quantile_95_se: f64,
    pub chi2_quantile_95: f64,
}

pub fn size_experiment(null: &NullDistribution, alphas: &[f64]) -> Result<SizeReport> {
    if null.kind != StatKind::Tn {
        return Err(Error::InvalidInput("size experiments use the T_n statistic".into()));
    }
    let m = null.samples.len() as f64;
    Ok(SizeReport {
        schema_version: crate::simulate::SCHEMA_VERSION.into(),
        reps: null.reps,
        failures: null.failures,
        dof: null.dof,
        alphas: alphas.to_vec(),
        rejection_rates: alphas.iter().map(|a| null.rejection_rate(*a)).collect(),
        binomial_se: alphas.iter().map(|a| (a * (1.0 - a) / m).sqrt()).collect(),
        ks_distance: null.ks_chi2(),
        ks_critical: 1.63 / m.sqrt(),
        quantile_95: null.quantile(0.95),
        quantile_95_se: null.quantile_se(0.95),
        chi2_quantile_95: chi2_quantile(0.95, null.dof)?,
    })
}

/// `p`-quantile of the chi-square law by bisection on `chi2_sf`.
pub fn chi2_quantile(p: f64, k: usize) -> Result<f64> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::DomainError(format!("quantile level must lie in [0, 1), got {p}")));
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while 1.0 - chi2_sf(hi, k)? < p {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if 1.0 - chi2_sf(mid, k)? < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}
