//! Data generation and the Monte Carlo replication driver.
//!
//! Normals come from `rand_distr::StandardNormal` (Ziggurat) and are mapped
//! to `N(0, Gamma)` through the Cholesky factor. All randomness is keyed by
//! counter-based sub-seeds, so a replication's data does not depend on
//! which thread produced it.

use std::fmt;
use std::str::FromStr;

use log::warn;
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimate::{fit_fgls, fit_gls, fit_logdet, fit_ols, FitResult};
use crate::linalg::SpdMatrix;
use crate::model::{ModelFile, ModelSpec, ParamVector};
use crate::optimize::OptimOptions;
use crate::rng::{stream_rng, sub_seed, Stream};

pub const SCHEMA_VERSION: &str = "1";
pub const NORMAL_SAMPLER: &str = "ziggurat (rand_distr::StandardNormal)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    IidRegression,
    NarProcess,
}

fn default_schema() -> String {
    SCHEMA_VERSION.to_string()
}

fn default_burn_in() -> usize {
    100
}

fn default_low() -> f64 {
    -1.0
}

fn default_high() -> f64 {
    1.0
}

/// Everything needed to regenerate a simulated dataset.
///
/// `model.params` holds the true parameters. Inputs of i.i.d. recipes and
/// exogenous columns of NAR recipes are uniform on
/// `[input_low, input_high]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRecipe {
    #[serde(default = "default_schema")]
    pub schema_version: String,
    pub mode: SimMode,
    pub model: ModelFile,
    pub gamma0: SpdMatrix,
    pub n: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y0: Option<Vec<f64>>,
    pub seed: u64,
    #[serde(default = "default_low")]
    pub input_low: f64,
    #[serde(default = "default_high")]
    pub input_high: f64,
}

impl SimRecipe {
    pub fn new(mode: SimMode, spec: &ModelSpec, w_true: &ParamVector, gamma0: SpdMatrix, n: usize, seed: u64) -> Self {
        Self {
            schema_version: default_schema(),
            mode,
            model: ModelFile::from_spec(spec, Some(w_true)),
            gamma0,
            n,
            burn_in: if mode == SimMode::NarProcess { default_burn_in() } else { 0 },
            y0: None,
            seed,
            input_low: default_low(),
            input_high: default_high(),
        }
    }

    pub fn with_burn_in(mut self, burn_in: usize) -> Self {
        self.burn_in = burn_in;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_n(mut self, n: usize) -> Self {
        self.n = n;
        self
    }

    pub fn with_input_range(mut self, low: f64, high: f64) -> Self {
        self.input_low = low;
        self.input_high = high;
        self
    }

    pub fn spec(&self) -> Result<ModelSpec> {
        self.model.spec()
    }

    pub fn w_true(&self, spec: &ModelSpec) -> Result<ParamVector> {
        self.model
            .params(spec)?
            .ok_or_else(|| Error::InvalidInput("recipe model has no params".into()))
    }

    /// Number of uniform exogenous columns appended to the lagged state.
    pub fn exogenous_dim(&self, spec: &ModelSpec) -> usize {
        match self.mode {
            SimMode::NarProcess => spec.input_dim() - spec.output_dim(),
            SimMode::IidRegression => spec.input_dim(),
        }
    }

    pub fn validate(&self) -> Result<(ModelSpec, ParamVector)> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported recipe schema_version '{}'",
                self.schema_version
            )));
        }
        let spec = self.spec()?;
        let w = self.w_true(&spec)?;
        let d = spec.output_dim();
        if self.gamma0.dim() != d {
            return Err(Error::DimensionMismatch {
                what: "gamma0",
                expected: d,
                found: self.gamma0.dim(),
            });
        }
        if self.n == 0 {
            return Err(Error::InvalidInput("n must be at least 1".into()));
        }
        if !(self.input_low <= self.input_high) || !self.input_low.is_finite() || !self.input_high.is_finite() {
            return Err(Error::InvalidInput("input range must satisfy low <= high".into()));
        }
        if self.mode == SimMode::NarProcess && spec.input_dim() < d {
            return Err(Error::InvalidInput(format!(
                "NAR recipe needs input_dim >= output_dim (got {} < {d})",
                spec.input_dim()
            )));
        }
        if let Some(y0) = &self.y0 {
            if y0.len() != d {
                return Err(Error::DimensionMismatch {
                    what: "y0",
                    expected: d,
                    found: y0.len(),
                });
            }
        }
        Ok((spec, w))
    }
}

/// Noise covariances with trace below this (relative to `d`) are treated
/// as exactly zero.
const ZERO_NOISE_TRACE: f64 = 1e-20;

struct NoiseSource<'a> {
    chol: Option<&'a DMatrix<f64>>,
    d: usize,
    buf: Vec<f64>,
}

impl<'a> NoiseSource<'a> {
    fn new(gamma: &'a SpdMatrix) -> Self {
        let d = gamma.dim();
        let zero = gamma.entries().trace() < ZERO_NOISE_TRACE * d as f64;
        Self {
            chol: if zero { None } else { Some(gamma.chol()) },
            d,
            buf: vec![0.0; d],
        }
    }

    /// Writes one `N(0, Gamma)` draw into `out`.
    fn draw(&mut self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        let Some(l) = self.chol else {
            out.iter_mut().for_each(|v| *v = 0.0);
            return;
        };
        for v in self.buf.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for i in 0..self.d {
            out[i] = (0..=i).map(|j| l[(i, j)] * self.buf[j]).sum();
        }
    }
}

/// `count x d` matrix of i.i.d. `N(0, gamma)` rows.
pub fn sample_gaussian(gamma: &SpdMatrix, count: usize, seed: u64) -> Result<DMatrix<f64>> {
    if count == 0 {
        return Err(Error::InvalidInput("count must be at least 1".into()));
    }
    let d = gamma.dim();
    let mut rng = stream_rng(seed, Stream::Data, 0);
    let mut noise = NoiseSource::new(gamma);
    let mut out = DMatrix::<f64>::zeros(count, d);
    let mut row = vec![0.0; d];
    for t in 0..count {
        noise.draw(&mut rng, &mut row);
        for i in 0..d {
            out[(t, i)] = row[i];
        }
    }
    Ok(out)
}

fn uniform_fill(rng: &mut ChaCha8Rng, low: f64, high: f64, out: &mut [f64]) {
    for v in out {
        *v = if low < high { rng.random_range(low..high) } else { low };
    }
}

/// Generates the dataset described by `recipe`.
pub fn gen_series(recipe: &SimRecipe) -> Result<Dataset> {
    let (spec, w) = recipe.validate()?;
    let (din, d) = (spec.input_dim(), spec.output_dim());
    let mut rng = stream_rng(recipe.seed, Stream::Data, 0);
    let mut noise = NoiseSource::new(&recipe.gamma0);
    let mut inputs = Vec::with_capacity(recipe.n * din);
    let mut outputs = Vec::with_capacity(recipe.n * d);
    let mut eps = vec![0.0; d];
    let mut z = vec![0.0; din];
    match recipe.mode {
        SimMode::IidRegression => {
            for _ in 0..recipe.n {
                uniform_fill(&mut rng, recipe.input_low, recipe.input_high, &mut z);
                noise.draw(&mut rng, &mut eps);
                let f = spec.eval(&w, &z)?;
                inputs.extend_from_slice(&z);
                outputs.extend(f.iter().zip(&eps).map(|(a, b)| a + b));
            }
        }
        SimMode::NarProcess => {
            let mut state = recipe.y0.clone().unwrap_or_else(|| vec![0.0; d]);
            for step in 0..recipe.burn_in + recipe.n {
                z[..d].copy_from_slice(&state);
                uniform_fill(&mut rng, recipe.input_low, recipe.input_high, &mut z[d..]);
                noise.draw(&mut rng, &mut eps);
                let f = spec.eval(&w, &z)?;
                let next: Vec<f64> = f.iter().zip(&eps).map(|(a, b)| a + b).collect();
                if next.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteState { step });
                }
                if step >= recipe.burn_in {
                    inputs.extend_from_slice(&z);
                    outputs.extend_from_slice(&next);
                }
                state = next;
            }
        }
    }
    Dataset::new(din, d, inputs, outputs)
}

/// Recipe of the bivariate NAR(1) experiment: an MLP 2-3-2 with weights
/// drawn uniformly on `[-2, 2]`, noise covariance
/// `[[1.81, 1.8], [1.8, 1.81]]`, 1000 observations from `Y_0 = (0, 0)`
/// without burn-in.
pub fn nar_mlp_recipe(seed: u64) -> SimRecipe {
    let spec = ModelSpec::mlp(2, 3, 2).expect("valid architecture");
    let mut rng = stream_rng(seed, Stream::Weights, 0);
    let w = spec.random_params(&mut rng, -2.0, 2.0);
    SimRecipe::new(SimMode::NarProcess, &spec, &w, nar_mlp_gamma0(), 1000, seed).with_burn_in(0)
}

pub fn nar_mlp_gamma0() -> SpdMatrix {
    SpdMatrix::from_rows(&[vec![1.81, 1.8], vec![1.8, 1.81]]).expect("positive definite")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Mse,
    Logdet,
    Fgls,
    /// GLS weighted by the recipe's true noise covariance.
    GlsTrue,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Mse => "mse",
            Estimator::Logdet => "logdet",
            Estimator::Fgls => "fgls",
            Estimator::GlsTrue => "gls_true",
        }
    }

    pub fn fit(self, spec: &ModelSpec, data: &Dataset, gamma0: &SpdMatrix, opts: &OptimOptions) -> Result<FitResult> {
        match self {
            Estimator::Mse => fit_ols(spec, data, opts),
            Estimator::Logdet => fit_logdet(spec, data, opts),
            Estimator::Fgls => fit_fgls(spec, data, opts, 10, 1e-8).map(|(f, _)| f),
            Estimator::GlsTrue => fit_gls(spec, data, gamma0, opts),
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "mse" | "ols" => Ok(Estimator::Mse),
            "logdet" | "log_det" => Ok(Estimator::Logdet),
            "fgls" => Ok(Estimator::Fgls),
            "gls_true" => Ok(Estimator::GlsTrue),
            other => Err(Error::InvalidInput(format!("unknown estimator '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedSchedule {
    /// Replication `r` draws data from sub-seed `(seed, r)`.
    #[default]
    PerReplication,
    /// Every replication reuses sub-seed `(seed, 0)`.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McOptions {
    pub reps: usize,
    pub seed: u64,
    pub optim: OptimOptions,
    #[serde(default)]
    pub schedule: SeedSchedule,
}

impl McOptions {
    pub fn new(reps: usize, seed: u64, optim: OptimOptions) -> Self {
        Self {
            reps,
            seed,
            optim,
            schedule: SeedSchedule::PerReplication,
        }
    }
}

/// Data seed and optimizer seed of replication `r`.
pub fn replication_seeds(opts: &McOptions, r: usize) -> (u64, u64) {
    let idx = match opts.schedule {
        SeedSchedule::PerReplication => r as u64,
        SeedSchedule::Fixed => 0,
    };
    (
        sub_seed(opts.seed, &[Stream::Data as u64, idx]),
        sub_seed(opts.seed, &[Stream::Starts as u64, idx]),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub w_hat: Vec<f64>,
    pub gamma_hat: Vec<Vec<f64>>,
    pub logdet: f64,
    pub det: f64,
    pub converged: bool,
}

impl FitSummary {
    fn from_fit(fit: &FitResult) -> Self {
        Self {
            w_hat: fit.w_hat.as_slice().to_vec(),
            gamma_hat: fit.gamma_hat.to_rows(),
            logdet: fit.logdet_value(),
            det: fit.gamma_hat.det(),
            converged: fit.optim.converged,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub index: usize,
    pub data_seed: u64,
    /// One entry per estimator, `None` when that fit failed.
    pub fits: Vec<Option<FitSummary>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: Estimator,
    pub successes: usize,
    pub failures: usize,
    pub mean_gamma: Vec<Vec<f64>>,
    /// Standard errors of the entries of `mean_gamma`.
    pub se_gamma: Vec<Vec<f64>>,
    pub det_of_mean: f64,
    pub mean_det: f64,
    pub mean_logdet: f64,
}

/// `det(Gamma_first) - det(Gamma_second)` over replications where both
/// fits succeeded; the interval is mean +- 1.96 se.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDet {
    pub first: Estimator,
    pub second: Estimator,
    pub count: usize,
    pub mean_diff: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub schema_version: String,
    pub reps: usize,
    pub seed: u64,
    pub normal_sampler: String,
    pub gamma0: Vec<Vec<f64>>,
    pub estimators: Vec<EstimatorSummary>,
    pub paired_det: Option<PairedDet>,
    pub replications: Vec<ReplicationRecord>,
}

impl McReport {
    pub fn summary(&self, est: Estimator) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|s| s.estimator == est)
    }
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

fn summarize(est: Estimator, idx: usize, records: &[ReplicationRecord], d: usize) -> EstimatorSummary {
    let fits: Vec<&FitSummary> = records.iter().filter_map(|r| r.fits[idx].as_ref()).collect();
    let failures = records.len() - fits.len();
    let mut mean_gamma = vec![vec![f64::NAN; d]; d];
    let mut se_gamma = vec![vec![f64::NAN; d]; d];
    for i in 0..d {
        for j in 0..d {
            let v: Vec<f64> = fits.iter().map(|f| f.gamma_hat[i][j]).collect();
            if !v.is_empty() {
                let (m, se) = mean_and_se(&v);
                mean_gamma[i][j] = m;
                se_gamma[i][j] = se;
            }
        }
    }
    let det_of_mean = if fits.is_empty() {
        f64::NAN
    } else {
        DMatrix::from_fn(d, d, |i, j| mean_gamma[i][j]).determinant()
    };
    let dets: Vec<f64> = fits.iter().map(|f| f.det).collect();
    let logdets: Vec<f64> = fits.iter().map(|f| f.logdet).collect();
    EstimatorSummary {
        estimator: est,
        successes: fits.len(),
        failures,
        mean_gamma,
        se_gamma,
        det_of_mean,
        mean_det: if dets.is_empty() { f64::NAN } else { mean_and_se(&dets).0 },
        mean_logdet: if logdets.is_empty() { f64::NAN } else { mean_and_se(&logdets).0 },
    }
}

/// Runs `opts.reps` replications of `recipe` (data seed replaced per
/// replication) and fits every estimator in `estimators` on each dataset
/// with shared optimizer seeds. Aborts when more than 5% of the fits of
/// any estimator fail.
pub fn run_mc(recipe: &SimRecipe, estimators: &[Estimator], opts: &McOptions) -> Result<McReport> {
    if opts.reps < 2 {
        return Err(Error::InvalidInput("at least 2 replications are required".into()));
    }
    if estimators.is_empty() {
        return Err(Error::InvalidInput("no estimators given".into()));
    }
    let (spec, _) = recipe.validate()?;
    opts.optim.validate()?;
    let d = spec.output_dim();
    let records: Vec<ReplicationRecord> = (0..opts.reps)
        .into_par_iter()
        .map(|r| {
            let (data_seed, start_seed) = replication_seeds(opts, r);
            let optim = opts.optim.clone().with_seed(start_seed);
            let fits = match gen_series(&recipe.clone().with_seed(data_seed)) {
                Ok(data) => estimators
                    .iter()
                    .map(|est| match est.fit(&spec, &data, &recipe.gamma0, &optim) {
                        Ok(fit) => Some(FitSummary::from_fit(&fit)),
                        Err(e) => {
                            warn!("replication {r}: {est} fit failed: {e}");
                            None
                        }
                    })
                    .collect(),
                Err(e) => {
                    warn!("replication {r}: data generation failed: {e}");
                    vec![None; estimators.len()]
                }
            };
            ReplicationRecord {
                index: r,
                data_seed,
                fits,
            }
        })
        .collect();

    let summaries: Vec<EstimatorSummary> = estimators
        .iter()
        .enumerate()
        .map(|(i, est)| summarize(*est, i, &records, d))
        .collect();
    for s in &summaries {
        if s.failures * 20 > opts.reps {
            return Err(Error::TooManyFailures {
                failed: s.failures,
                total: opts.reps,
            });
        }
    }
    let paired_det = (estimators.len() >= 2).then(|| {
        let diffs: Vec<f64> = records
            .iter()
            .filter_map(|r| match (&r.fits[0], &r.fits[1]) {
                (Some(a), Some(b)) => Some(a.det - b.det),
                _ => None,
            })
            .collect();
        let (mean_diff, se) = mean_and_se(&diffs);
        PairedDet {
            first: estimators[0],
            second: estimators[1],
            count: diffs.len(),
            mean_diff,
            se,
            ci_low: mean_diff - 1.96 * se,
            ci_high: mean_diff + 1.96 * se,
        }
    });
    Ok(McReport {
        schema_version: SCHEMA_VERSION.into(),
        reps: opts.reps,
        seed: opts.seed,
        normal_sampler: NORMAL_SAMPLER.into(),
        gamma0: recipe.gamma0.to_rows(),
        estimators: summaries,
        paired_det,
        replications: records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{empirical_covariance, Derivs, ResidualSet};
    use statrs::distribution::{ContinuousCDF, Normal};

    fn sample_cov(x: &DMatrix<f64>) -> DMatrix<f64> {
        let n = x.nrows() as f64;
        x.transpose() * x / n
    }

    #[test]
    fn identity_noise_covariance() {
        let x = sample_gaussian(&SpdMatrix::identity(2), 100_000, 3).unwrap();
        let c = sample_cov(&x);
        assert!((c - DMatrix::<f64>::identity(2, 2)).abs().max() < 0.02);
    }

    #[test]
    fn correlated_noise_off_diagonal() {
        let x = sample_gaussian(&nar_mlp_gamma0(), 100_000, 4).unwrap();
        let c = sample_cov(&x);
        assert!((1.76..=1.84).contains(&c[(0, 1)]), "{}", c[(0, 1)]);
    }

    #[test]
    fn single_row_is_reproducible() {
        let a = sample_gaussian(&nar_mlp_gamma0(), 1, 9).unwrap();
        let b = sample_gaussian(&nar_mlp_gamma0(), 1, 9).unwrap();
        assert_eq!(a, b);
        assert!(sample_gaussian(&nar_mlp_gamma0(), 0, 9).is_err());
    }

    #[test]
    fn marginals_pass_ks() {
        let g = nar_mlp_gamma0();
        let x = sample_gaussian(&g, 10_000, 5).unwrap();
        for i in 0..2 {
            let law = Normal::new(0.0, g.entries()[(i, i)].sqrt()).unwrap();
            let mut col: Vec<f64> = x.column(i).iter().copied().collect();
            col.sort_by(f64::total_cmp);
            let m = col.len() as f64;
            let ks = col
                .iter()
                .enumerate()
                .map(|(k, v)| {
                    let c = law.cdf(*v);
                    (c - k as f64 / m).abs().max(((k + 1) as f64 / m - c).abs())
                })
                .fold(0.0, f64::max);
            assert!(ks < 1.63 / m.sqrt(), "ks = {ks}");
        }
    }

    #[test]
    fn noiseless_orbit_is_deterministic() {
        let mut recipe = nar_mlp_recipe(1);
        recipe.gamma0 = SpdMatrix::from_rows(&[vec![1e-30, 0.0], vec![0.0, 1e-30]]).unwrap();
        let a = gen_series(&recipe).unwrap();
        let b = gen_series(&recipe.clone().with_seed(99)).unwrap();
        assert_eq!(a, b);
        let (spec, w) = recipe.validate().unwrap();
        for t in 0..a.len() {
            assert_eq!(spec.eval(&w, a.z(t)).unwrap(), a.y(t));
        }
    }

    #[test]
    fn constant_map_gives_bias_plus_noise() {
        let spec = ModelSpec::mlp(2, 3, 2).unwrap();
        let mut grid = vec![0.0; spec.grid_size()];
        let n = grid.len();
        grid[n - 2] = 0.7;
        grid[n - 1] = -1.3;
        let w = ParamVector::new(&spec, grid).unwrap();
        let recipe = SimRecipe::new(SimMode::NarProcess, &spec, &w, SpdMatrix::identity(2), 50, 3).with_burn_in(0);
        let data = gen_series(&recipe).unwrap();
        let eps = sample_gaussian(&SpdMatrix::identity(2), 50, 3).unwrap();
        for t in 0..50 {
            assert!((data.y(t)[0] - 0.7 - eps[(t, 0)]).abs() < 1e-15);
            assert!((data.y(t)[1] + 1.3 - eps[(t, 1)]).abs() < 1e-15);
        }
        assert_eq!(data.z(0), &[0.0, 0.0]);
        assert_eq!(data.z(1), data.y(0));
    }

    #[test]
    fn nar_mlp_residuals_at_truth_match_gamma0() {
        let recipe = nar_mlp_recipe(5);
        let (spec, w) = recipe.validate().unwrap();
        let data = gen_series(&recipe).unwrap();
        let rs = ResidualSet::compute(&spec, &w, &data, Derivs::None).unwrap();
        let g = empirical_covariance(&rs).unwrap();
        let g0 = nar_mlp_gamma0();
        let n = data.len() as f64;
        for i in 0..2 {
            for j in 0..2 {
                let (s_ii, s_jj, s_ij) = (g0.entries()[(i, i)], g0.entries()[(j, j)], g0.entries()[(i, j)]);
                // Var of a Gaussian sample covariance entry
                let se = ((s_ii * s_jj + s_ij * s_ij) / n).sqrt();
                assert!((g.entries()[(i, j)] - s_ij).abs() < 4.0 * se);
            }
        }
    }

    #[test]
    fn nar_orbit_is_bounded() {
        let recipe = nar_mlp_recipe(8);
        let (spec, w) = recipe.validate().unwrap();
        let data = gen_series(&recipe).unwrap();
        let full = spec.scatter(w.as_slice());
        let h = 3;
        let b_start = h * 2 + h;
        let eps = sample_gaussian(&recipe.gamma0, data.len(), recipe.seed).unwrap();
        for i in 0..2 {
            let bound: f64 = (0..h).map(|j| full[b_start + j * 2 + i].abs()).sum::<f64>()
                + full[b_start + 2 * h + i].abs()
                + eps.column(i).amax();
            for t in 0..data.len() {
                assert!(data.y(t)[i].abs() <= bound + 1e-12);
            }
        }
    }

    #[test]
    fn explosive_linear_is_reported() {
        let spec = ModelSpec::linear(1, 1).unwrap();
        let w = ParamVector::new(&spec, vec![1e100]).unwrap();
        let recipe = SimRecipe::new(SimMode::NarProcess, &spec, &w, SpdMatrix::identity(1), 100, 1);
        assert!(matches!(gen_series(&recipe), Err(Error::NonFiniteState { .. })));
    }

    #[test]
    fn recipe_json_round_trip() {
        let recipe = nar_mlp_recipe(2);
        let text = serde_json::to_string(&recipe).unwrap();
        let back: SimRecipe = serde_json::from_str(&text).unwrap();
        assert_eq!(back, recipe);
        assert_eq!(gen_series(&back).unwrap(), gen_series(&recipe).unwrap());
    }

    #[test]
    fn fixed_schedule_has_zero_standard_errors() {
        let spec = ModelSpec::linear(2, 2).unwrap();
        let w = ParamVector::new(&spec, vec![1.0, 0.5, -0.5, 1.0]).unwrap();
        let recipe = SimRecipe::new(SimMode::IidRegression, &spec, &w, nar_mlp_gamma0(), 200, 0);
        let mut opts = McOptions::new(2, 7, OptimOptions::default().with_starts(2));
        opts.schedule = SeedSchedule::Fixed;
        let report = run_mc(&recipe, &[Estimator::Logdet, Estimator::Mse], &opts).unwrap();
        for s in &report.estimators {
            assert!(s.se_gamma.iter().flatten().all(|v| *v == 0.0));
        }
        assert_eq!(report.paired_det.as_ref().unwrap().count, 2);
        opts.reps = 1;
        assert!(run_mc(&recipe, &[Estimator::Mse], &opts).is_err());
    }

    #[test]
    fn estimator_names_parse() {
        for e in [Estimator::Mse, Estimator::Logdet, Estimator::Fgls, Estimator::GlsTrue] {
            assert_eq!(e.name().parse::<Estimator>().unwrap(), e);
        }
        assert!("gls-true".parse::<Estimator>().is_ok());
        assert!("bogus".parse::<Estimator>().is_err());
    }
}
