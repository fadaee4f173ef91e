//! Estimators: ordinary least squares, GLS with a fixed weight, the
//! iterated feasible GLS sequence, and the direct log-determinant
//! estimator, together with the plug-in information matrix.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{
    empirical_covariance, gls_gradient, logdet_gradient, mse_gradient, weighted_outer_jacobians, Derivs,
    ResidualSet,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{RidgePolicy, SpdMatrix};
use crate::model::{ModelKind, ModelSpec, ParamVector};
use crate::optimize::{
    bfgs_minimize, minimize_from, multi_start, start_point, start_seed, Evaluation, OptimOptions, OptimOutcome,
    StartRecord, Termination,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    Mse,
    Gls,
    LogDet,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub spec: ModelSpec,
    pub w_hat: ParamVector,
    pub cost_kind: CostKind,
    pub cost_value: f64,
    /// `Gamma_n(w_hat)`.
    pub gamma_hat: SpdMatrix,
    pub info_hat: Option<SpdMatrix>,
    /// `info_hat^-1 / n`.
    pub asymptotic_cov: Option<DMatrix<f64>>,
    /// False when the information matrix was computed and found singular.
    pub identifiable: bool,
    pub n: usize,
    pub optim: OptimOutcome,
}

impl FitResult {
    /// `U_n(w_hat)`, whatever cost produced the fit.
    pub fn logdet_value(&self) -> f64 {
        self.gamma_hat.logdet()
    }

    pub fn mse_value(&self) -> f64 {
        self.gamma_hat.entries().trace()
    }
}

/// Plug-in information matrix at `w`: entry `(k, l)` is
/// `tr(Gamma_n(w)^-1 B_n(w_k, w_l))`.
#[derive(Debug, Clone)]
pub struct FisherInfo {
    pub matrix: DMatrix<f64>,
    /// Factorized form; `None` when the matrix is singular.
    pub spd: Option<SpdMatrix>,
    pub asymptotic_cov: Option<DMatrix<f64>>,
    pub gamma: SpdMatrix,
}

impl FisherInfo {
    pub fn identifiable(&self) -> bool {
        self.spd.is_some()
    }
}

pub fn fisher_info(spec: &ModelSpec, w: &ParamVector, data: &Dataset) -> Result<FisherInfo> {
    let rs = ResidualSet::compute(spec, w, data, Derivs::First)?;
    let gamma = empirical_covariance(&rs)?;
    let matrix = weighted_outer_jacobians(&rs, &gamma.inverse_matrix())?;
    let spd = if matrix.nrows() == 0 {
        None
    } else {
        SpdMatrix::from_symmetric(&matrix, RidgePolicy::Reject).ok()
    };
    let asymptotic_cov = spd.as_ref().map(|s| s.inverse_matrix() / data.len() as f64);
    Ok(FisherInfo {
        matrix,
        spd,
        asymptotic_cov,
        gamma,
    })
}

fn check_problem(spec: &ModelSpec, data: &Dataset) -> Result<()> {
    if data.input_dim() != spec.input_dim() || data.output_dim() != spec.output_dim() {
        return Err(Error::DimensionMismatch {
            what: "data columns (inputs + outputs)",
            expected: spec.input_dim() + spec.output_dim(),
            found: data.input_dim() + data.output_dim(),
        });
    }
    let (n, d, k) = (data.len(), spec.output_dim(), spec.param_count());
    if n < d || n * d <= k {
        return Err(Error::Underdetermined { n, d, k });
    }
    Ok(())
}

/// `U_n` with gradient; singular covariance maps to `+inf`.
pub fn logdet_objective<'a>(spec: &'a ModelSpec, data: &'a Dataset) -> impl Fn(&[f64]) -> Evaluation + Sync + 'a {
    move |w: &[f64]| {
        let w = ParamVector::from_vec_unchecked(w.to_vec());
        let report = ResidualSet::compute(spec, &w, data, Derivs::First).and_then(|rs| logdet_gradient(&rs));
        match report {
            Ok(r) => Evaluation::new(r.value, r.gradient.map(|g| g.as_slice().to_vec()).unwrap_or_default()),
            Err(_) => Evaluation::rejected(),
        }
    }
}

/// GLS cost with gradient; `weight = None` gives the MSE cost.
pub fn ls_objective<'a>(
    spec: &'a ModelSpec,
    data: &'a Dataset,
    weight: Option<&'a SpdMatrix>,
) -> impl Fn(&[f64]) -> Evaluation + Sync + 'a {
    move |w: &[f64]| {
        let w = ParamVector::from_vec_unchecked(w.to_vec());
        let report = ResidualSet::compute(spec, &w, data, Derivs::First).and_then(|rs| match weight {
            Some(wt) => gls_gradient(&rs, wt),
            None => mse_gradient(&rs),
        });
        match report {
            Ok(r) => Evaluation::new(r.value, r.gradient.map(|g| g.as_slice().to_vec()).unwrap_or_default()),
            Err(_) => Evaluation::rejected(),
        }
    }
}

fn finish(
    spec: &ModelSpec,
    data: &Dataset,
    cost_kind: CostKind,
    optim: OptimOutcome,
    with_info: bool,
) -> Result<FitResult> {
    let w_hat = ParamVector::new(spec, optim.w_best.clone())?;
    let rs = ResidualSet::compute(spec, &w_hat, data, Derivs::None)?;
    let gamma_hat = empirical_covariance(&rs)?;
    let (info_hat, asymptotic_cov, identifiable) = if with_info {
        let info = fisher_info(spec, &w_hat, data)?;
        let ident = info.identifiable();
        (info.spd, info.asymptotic_cov, ident)
    } else {
        (None, None, true)
    };
    Ok(FitResult {
        spec: spec.clone(),
        w_hat,
        cost_kind,
        cost_value: optim.cost_best,
        gamma_hat,
        info_hat,
        asymptotic_cov,
        identifiable,
        n: data.len(),
        optim,
    })
}

/// Normal-equation solution for an unmasked linear model, one output
/// equation at a time (they share the regressors).
fn linear_closed_form(spec: &ModelSpec, data: &Dataset) -> Result<Vec<f64>> {
    let (n, din, d) = (data.len(), spec.input_dim(), spec.output_dim());
    let mut ztz = DMatrix::<f64>::zeros(din, din);
    let mut zty = DMatrix::<f64>::zeros(din, d);
    for t in 0..n {
        let (z, y) = (data.z(t), data.y(t));
        for a in 0..din {
            for b in 0..=a {
                ztz[(a, b)] += z[a] * z[b];
            }
            for i in 0..d {
                zty[(a, i)] += z[a] * y[i];
            }
        }
    }
    for a in 0..din {
        for b in 0..a {
            ztz[(b, a)] = ztz[(a, b)];
        }
    }
    let gram = SpdMatrix::from_symmetric(&ztz, RidgePolicy::Reject).map_err(|_| Error::SingularDesign)?;
    let mut w = vec![0.0; d * din];
    for i in 0..d {
        let coef = gram.solve(&DVector::from_column_slice(zty.column(i).as_slice()));
        w[i * din..(i + 1) * din].copy_from_slice(coef.as_slice());
    }
    Ok(w)
}

/// Minimizes `V_n`. Unmasked linear models use the normal equations.
pub fn fit_ols(spec: &ModelSpec, data: &Dataset, opts: &OptimOptions) -> Result<FitResult> {
    check_problem(spec, data)?;
    let optim = if spec.kind() == ModelKind::Linear {
        let w = linear_closed_form(spec, data)?;
        let value = ls_objective(spec, data, None)(&w).value;
        OptimOutcome::closed_form(w, value)
    } else {
        multi_start(&ls_objective(spec, data, None), spec.param_count(), opts)?
    };
    finish(spec, data, CostKind::Mse, optim, false)
}

/// Minimizes the GLS cost with a fixed `weight`.
pub fn fit_gls(spec: &ModelSpec, data: &Dataset, weight: &SpdMatrix, opts: &OptimOptions) -> Result<FitResult> {
    check_problem(spec, data)?;
    if weight.dim() != spec.output_dim() {
        return Err(Error::DimensionMismatch {
            what: "GLS weight",
            expected: spec.output_dim(),
            found: weight.dim(),
        });
    }
    let optim = multi_start(&ls_objective(spec, data, Some(weight)), spec.param_count(), opts)?;
    finish(spec, data, CostKind::Gls, optim, false)
}

fn fit_gls_from(spec: &ModelSpec, data: &Dataset, weight: &SpdMatrix, w0: &[f64], opts: &OptimOptions) -> Result<OptimOutcome> {
    minimize_from(&ls_objective(spec, data, Some(weight)), w0, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FglsTrace {
    /// `U_n` after the OLS round and after every GLS refit.
    pub logdet_per_round: Vec<f64>,
    pub converged: bool,
}

struct Chain {
    w: Vec<f64>,
    gamma: SpdMatrix,
    optim: OptimOutcome,
    cost_kind: CostKind,
    trace: FglsTrace,
    iterations: usize,
}

/// GLS refinements from an OLS estimate `w`.
fn fgls_chain(
    spec: &ModelSpec,
    data: &Dataset,
    ols: OptimOutcome,
    opts: &OptimOptions,
    max_rounds: usize,
    round_tol: f64,
) -> Result<Chain> {
    let mut w = ols.w_best.clone();
    let rs = ResidualSet::compute(spec, &ParamVector::new(spec, w.clone())?, data, Derivs::None)?;
    let mut gamma = empirical_covariance(&rs)?;
    let mut trace = vec![gamma.logdet()];
    let mut iterations: usize = ols.per_start.iter().map(|s| s.iterations).sum();
    let mut optim = ols;
    let mut converged = false;
    let mut cost_kind = CostKind::Mse;
    for _ in 1..max_rounds.max(1) {
        let out = fit_gls_from(spec, data, &gamma, &w, opts)?;
        let rs = ResidualSet::compute(spec, &ParamVector::new(spec, out.w_best.clone())?, data, Derivs::None)?;
        let next_gamma = empirical_covariance(&rs)?;
        let u = next_gamma.logdet();
        let prev = *trace.last().expect("trace starts non-empty");
        trace.push(u);
        iterations += out.per_start.iter().map(|s| s.iterations).sum::<usize>();
        w = out.w_best.clone();
        optim = out;
        gamma = next_gamma;
        cost_kind = CostKind::Gls;
        if (u - prev).abs() < round_tol {
            converged = true;
            break;
        }
    }
    Ok(Chain {
        w,
        gamma,
        optim,
        cost_kind,
        trace: FglsTrace {
            logdet_per_round: trace,
            converged,
        },
        iterations,
    })
}

/// Iterated feasible GLS: OLS, then GLS refits each weighted by the
/// residual covariance of the previous round, warm-started from it. Stops
/// when `U_n` changes by less than `round_tol` or after `max_rounds`
/// rounds (the OLS round included).
///
/// Unmasked linear models run one chain from the closed-form OLS fit.
/// Otherwise a chain runs from the OLS fit of every optimizer start and
/// the chain ending at the lowest `U_n` is kept (ties to the lower start).
pub fn fit_fgls(
    spec: &ModelSpec,
    data: &Dataset,
    opts: &OptimOptions,
    max_rounds: usize,
    round_tol: f64,
) -> Result<(FitResult, FglsTrace)> {
    check_problem(spec, data)?;
    opts.validate()?;
    let chain = if spec.kind() == ModelKind::Linear {
        fgls_chain(spec, data, fit_ols(spec, data, opts)?.optim, opts, max_rounds, round_tol)?
    } else {
        let k = spec.param_count();
        let ols = ls_objective(spec, data, None);
        let chains: Vec<Result<Chain>> = (0..opts.n_starts)
            .into_par_iter()
            .map(|i| {
                let run = bfgs_minimize(&ols, &start_point(opts, k, i), opts)?;
                let first = OptimOutcome {
                    converged: run.termination == Termination::Converged,
                    per_start: vec![StartRecord {
                        index: i,
                        seed: start_seed(opts, i),
                        cost: run.value,
                        iterations: run.iterations,
                        termination: run.termination,
                    }],
                    w_best: run.w,
                    cost_best: run.value,
                };
                fgls_chain(spec, data, first, opts, max_rounds, round_tol)
            })
            .collect();
        let per_start: Vec<StartRecord> = chains
            .iter()
            .enumerate()
            .map(|(i, c)| match c {
                Ok(c) => StartRecord {
                    index: i,
                    seed: start_seed(opts, i),
                    cost: *c.trace.logdet_per_round.last().expect("non-empty trace"),
                    iterations: c.iterations,
                    termination: c.optim.per_start[0].termination,
                },
                Err(_) => StartRecord {
                    index: i,
                    seed: start_seed(opts, i),
                    cost: f64::INFINITY,
                    iterations: 0,
                    termination: Termination::NonFiniteAtStart,
                },
            })
            .collect();
        let mut best: Option<Chain> = None;
        for c in chains.into_iter().flatten() {
            let u = c.gamma.logdet();
            if best.as_ref().is_none_or(|b| u < b.gamma.logdet() - 1e-12) {
                best = Some(c);
            }
        }
        let mut chain = best.ok_or(Error::AllStartsFailed { starts: opts.n_starts })?;
        chain.optim.per_start = per_start;
        chain
    };
    let mut fit = finish(spec, data, chain.cost_kind, chain.optim, true)?;
    debug_assert_eq!(fit.w_hat.as_slice(), chain.w.as_slice());
    fit.gamma_hat = chain.gamma;
    Ok((fit, chain.trace))
}

/// Minimizes `U_n = log det Gamma_n(w)` and attaches the information matrix.
pub fn fit_logdet(spec: &ModelSpec, data: &Dataset, opts: &OptimOptions) -> Result<FitResult> {
    check_problem(spec, data)?;
    let optim = multi_start(&logdet_objective(spec, data), spec.param_count(), opts)?;
    finish(spec, data, CostKind::LogDet, optim, true)
}

/// `U_n` minimization from a given point, single start.
pub fn fit_logdet_from(spec: &ModelSpec, data: &Dataset, w0: &[f64], opts: &OptimOptions) -> Result<FitResult> {
    check_problem(spec, data)?;
    let optim = minimize_from(&logdet_objective(spec, data), w0, opts)?;
    finish(spec, data, CostKind::LogDet, optim, true)
}

/// Dispatch on the cost kind; `Gls` needs `weight`.
pub fn fit(
    kind: CostKind,
    spec: &ModelSpec,
    data: &Dataset,
    weight: Option<&SpdMatrix>,
    opts: &OptimOptions,
) -> Result<FitResult> {
    match kind {
        CostKind::Mse => fit_ols(spec, data, opts),
        CostKind::LogDet => fit_logdet(spec, data, opts),
        CostKind::Gls => {
            let w = weight.ok_or_else(|| Error::InvalidInput("GLS needs a weight matrix".into()))?;
            fit_gls(spec, data, w, opts)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn tight() -> OptimOptions {
        OptimOptions {
            grad_tol: 1e-10,
            n_starts: 3,
            max_iters: 2000,
            ..Default::default()
        }
    }

    /// Linear data with correlated noise, z uniform on [-1,1].
    fn linear_data(seed: u64, din: usize, w: &[f64], n: usize, corr: f64) -> Dataset {
        let d = w.len() / din;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let zt: Vec<f64> = (0..din).map(|_| rng.random_range(-1.0..1.0)).collect();
            let e0: f64 = rng.sample(StandardNormal);
            let e1: f64 = rng.sample(StandardNormal);
            for i in 0..d {
                let mean: f64 = (0..din).map(|j| w[i * din + j] * zt[j]).sum();
                let noise = if i == 0 { e0 } else { corr * e0 + (1.0 - corr * corr).sqrt() * e1 };
                y.push(mean + 0.5 * noise);
            }
            z.extend(zt);
        }
        Dataset::new(din, d, z, y).unwrap()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn ols_exact_interpolation() {
        let spec = ModelSpec::linear(1, 1).unwrap();
        let data = Dataset::from_rows(&[vec![1.0], vec![2.0]], &[vec![2.0], vec![4.0]]).unwrap();
        let w = linear_closed_form(&spec, &data).unwrap();
        assert_eq!(w, vec![2.0]);
    }

    #[test]
    fn singular_design_detected() {
        let spec = ModelSpec::linear(2, 1).unwrap();
        let data = Dataset::from_rows(
            &[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]],
            &[vec![1.0], vec![2.0], vec![3.5]],
        )
        .unwrap();
        assert!(matches!(fit_ols(&spec, &data, &tight()), Err(Error::SingularDesign)));
    }

    #[test]
    fn underdetermined_rejected() {
        let spec = ModelSpec::mlp(1, 2, 1).unwrap();
        let data = Dataset::from_rows(&[vec![1.0], vec![2.0]], &[vec![2.0], vec![4.0]]).unwrap();
        assert!(matches!(fit_logdet(&spec, &data, &tight()), Err(Error::Underdetermined { .. })));
    }

    #[test]
    fn closed_form_matches_optimizer_route() {
        let spec = ModelSpec::linear(2, 2).unwrap();
        let data = linear_data(1, 2, &[1.0, -0.5, 0.3, 2.0], 300, 0.8);
        let closed = fit_ols(&spec, &data, &tight()).unwrap();
        let iter = multi_start(&ls_objective(&spec, &data, None), 4, &tight()).unwrap();
        assert!(max_abs_diff(closed.w_hat.as_slice(), &iter.w_best) < 1e-6);
    }

    #[test]
    fn gls_identity_and_scaled_weights_match_ols() {
        let spec = ModelSpec::masked_linear(2, 2, vec![true, false, true, true]).unwrap();
        let data = linear_data(2, 2, &[1.0, 0.0, 0.3, 2.0], 300, 0.9);
        let ols = fit_ols(&spec, &data, &tight()).unwrap();
        let gls = fit_gls(&spec, &data, &SpdMatrix::identity(2), &tight()).unwrap();
        assert!(max_abs_diff(ols.w_hat.as_slice(), gls.w_hat.as_slice()) < 1e-6);
        let scaled = SpdMatrix::from_rows(&[vec![7.0, 0.0], vec![0.0, 7.0]]).unwrap();
        let gls7 = fit_gls(&spec, &data, &scaled, &tight()).unwrap();
        assert!(max_abs_diff(gls7.w_hat.as_slice(), gls.w_hat.as_slice()) < 1e-6);
    }

    #[test]
    fn unconstrained_linear_gls_and_logdet_match_ols() {
        let spec = ModelSpec::linear(2, 2).unwrap();
        let data = linear_data(3, 2, &[1.0, -0.5, 0.3, 2.0], 400, 0.95);
        let ols = fit_ols(&spec, &data, &tight()).unwrap();
        let weight = SpdMatrix::from_rows(&[vec![1.81, 1.8], vec![1.8, 1.81]]).unwrap();
        let gls = fit_gls(&spec, &data, &weight, &tight()).unwrap();
        assert!(max_abs_diff(ols.w_hat.as_slice(), gls.w_hat.as_slice()) < 1e-6);
        let ld = fit_logdet(&spec, &data, &tight()).unwrap();
        assert!(max_abs_diff(ols.w_hat.as_slice(), ld.w_hat.as_slice()) < 1e-6);
        assert!((ld.logdet_value() - ols.logdet_value()).abs() < 1e-10);
    }

    #[test]
    fn scalar_logdet_matches_ols() {
        let spec = ModelSpec::mlp(1, 2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let truth = spec.random_params(&mut rng, -2.0, 2.0);
        let z: Vec<f64> = (0..200).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<f64> = z
            .iter()
            .map(|zt| spec.eval(&truth, &[*zt]).unwrap()[0] + 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let data = Dataset::new(1, 1, z, y).unwrap();
        let opts = OptimOptions { n_starts: 6, ..tight() };
        let ols = fit_ols(&spec, &data, &opts).unwrap();
        let ld = fit_logdet_from(&spec, &data, ols.w_hat.as_slice(), &opts).unwrap();
        assert!(max_abs_diff(ols.w_hat.as_slice(), ld.w_hat.as_slice()) < 1e-8);
        let ld_ms = fit_logdet(&spec, &data, &opts).unwrap();
        assert!((ld_ms.logdet_value() - ols.mse_value().ln()).abs() < 1e-10);
    }

    #[test]
    fn noiseless_mlp_fit_reaches_zero() {
        let spec = ModelSpec::mlp(1, 1, 1).unwrap();
        let truth = ParamVector::new(&spec, vec![1.5, -0.3, 1.2, 0.4]).unwrap();
        let z: Vec<f64> = (0..50).map(|t| -2.0 + 4.0 * t as f64 / 49.0).collect();
        let y: Vec<f64> = z.iter().map(|zt| spec.eval(&truth, &[*zt]).unwrap()[0]).collect();
        let data = Dataset::new(1, 1, z, y).unwrap();
        let opts = OptimOptions { n_starts: 10, grad_tol: 1e-12, max_iters: 5000, ..Default::default() };
        let out = multi_start(&ls_objective(&spec, &data, None), spec.param_count(), &opts).unwrap();
        assert!(out.cost_best <= 1e-10, "V_n = {}", out.cost_best);
    }

    #[test]
    fn fisher_info_scalar_linear_formula() {
        let spec = ModelSpec::linear(1, 1).unwrap();
        let z = [0.5, -1.0, 2.0, 1.5];
        let y = [1.0, -1.5, 3.5, 3.2];
        let data = Dataset::new(1, 1, z.to_vec(), y.to_vec()).unwrap();
        let w = ParamVector::new(&spec, vec![1.4]).unwrap();
        let info = fisher_info(&spec, &w, &data).unwrap();
        let sigma2: f64 = z.iter().zip(&y).map(|(a, b)| (b - 1.4 * a).powi(2)).sum::<f64>() / 4.0;
        let mean_z2: f64 = z.iter().map(|a| a * a).sum::<f64>() / 4.0;
        assert!((info.matrix[(0, 0)] - mean_z2 / sigma2).abs() < 1e-12);
        let acov = info.asymptotic_cov.unwrap();
        assert!((acov[(0, 0)] - sigma2 / mean_z2 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn duplicated_regressor_is_non_identifiable() {
        // both inputs carry the same column, so their weights are tied
        let spec = ModelSpec::linear(2, 1).unwrap();
        let z: Vec<f64> = (0..20).flat_map(|t| [t as f64 * 0.1, t as f64 * 0.1]).collect();
        let y: Vec<f64> = (0..20).map(|t| (t as f64 * 0.37).sin()).collect();
        let data = Dataset::new(2, 1, z, y).unwrap();
        let w = ParamVector::new(&spec, vec![0.2, 0.1]).unwrap();
        let info = fisher_info(&spec, &w, &data).unwrap();
        assert!(!info.identifiable());
        assert!(info.asymptotic_cov.is_none());
    }

    #[test]
    fn fgls_linear_fixed_point() {
        let spec = ModelSpec::linear(2, 2).unwrap();
        let data = linear_data(5, 2, &[1.0, -0.5, 0.3, 2.0], 300, 0.9);
        let (fit, trace) = fit_fgls(&spec, &data, &tight(), 10, 1e-8).unwrap();
        assert!(trace.converged);
        assert_eq!(trace.logdet_per_round.len(), 2);
        assert!((trace.logdet_per_round[1] - trace.logdet_per_round[0]).abs() < 1e-12);
        assert!(fit.info_hat.is_some());
    }

    #[test]
    fn fgls_sequence_decreases_and_matches_logdet() {
        let spec = ModelSpec::masked_linear(3, 2, vec![true, true, false, false, true, true]).unwrap();
        for seed in 0..4 {
            let data = linear_data(10 + seed, 3, &[1.0, -0.5, 0.0, 0.0, 0.3, 2.0], 300, 0.95);
            let (fit, trace) = fit_fgls(&spec, &data, &tight(), 10, 1e-8).unwrap();
            let ld = fit_logdet(&spec, &data, &tight()).unwrap();
            let first = trace.logdet_per_round[0];
            let last = *trace.logdet_per_round.last().unwrap();
            assert!(last <= first + 1e-12);
            for pair in trace.logdet_per_round.windows(2) {
                assert!(pair[1] <= pair[0] + 1e-12);
            }
            assert!((fit.logdet_value() - ld.logdet_value()).abs() < 1e-4);
        }
    }

    #[test]
    fn gamma_hat_matches_residual_covariance() {
        let spec = ModelSpec::masked_linear(2, 2, vec![true, false, true, true]).unwrap();
        let data = linear_data(6, 2, &[1.0, 0.0, 0.3, 2.0], 200, 0.5);
        let fit = fit_logdet(&spec, &data, &tight()).unwrap();
        let rs = ResidualSet::compute(&spec, &fit.w_hat, &data, Derivs::None).unwrap();
        let g = empirical_covariance(&rs).unwrap();
        assert!((g.entries() - fit.gamma_hat.entries()).abs().max() <= 1e-12);
        assert!(fit.identifiable);
        assert!(fit.optim.converged);
    }
}
