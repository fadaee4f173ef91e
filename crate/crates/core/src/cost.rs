//! Cost functions over residuals: mean squared error `V_n`, fixed-weight
//! GLS, and the log-determinant `U_n(w) = log det Gamma_n(w)` with its
//! analytic gradient and Hessian.
//!
//! With residuals `r_t = y_t - F_w(z_t)` and Jacobians `J_t = dF_w(z_t)/dw`:
//!
//! ```text
//! Gamma_n   = 1/n sum r_t r_t^T
//! A_n(k)    = 1/n sum -J_t[:,k] r_t^T
//! B_n(k,l)  = 1/n sum J_t[:,k] J_t[:,l]^T
//! C_n(k,l)  = 1/n sum -r_t (d2F_t/dw_k dw_l)^T
//! dU/dw_k   = 2 tr(Gamma^-1 A_n(k))
//! d2U/dw_k dw_l = -2 tr(Gamma^-1 (A_n(l) + A_n(l)^T) Gamma^-1 A_n(k))
//!                 + 2 tr(Gamma^-1 B_n(k,l)) + 2 tr(Gamma^-1 C_n(k,l))
//! ```

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{trace_of_product, RidgePolicy, SpdMatrix};
use crate::model::{Evaluator, ModelSpec, ParamVector};

/// Which parameter derivatives [`ResidualSet::compute`] should keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Derivs {
    None,
    First,
    Second,
}

/// Residuals of a model on a dataset, optionally with per-row parameter
/// Jacobians (`d x K`, row-major) and second derivatives (`K x K x d`).
#[derive(Debug, Clone)]
pub struct ResidualSet {
    n: usize,
    d: usize,
    k: usize,
    residuals: Vec<f64>,
    jacobians: Option<Vec<f64>>,
    second: Option<Vec<f64>>,
}

impl ResidualSet {
    /// Row-major `n x d` residual buffer, no derivatives.
    pub fn from_residuals(d: usize, residuals: Vec<f64>) -> Result<Self> {
        if d == 0 || residuals.is_empty() || residuals.len() % d != 0 {
            return Err(Error::InvalidInput("residual buffer must be a non-empty n x d matrix".into()));
        }
        if residuals.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite residual".into()));
        }
        Ok(Self {
            n: residuals.len() / d,
            d,
            k: 0,
            residuals,
            jacobians: None,
            second: None,
        })
    }

    pub fn compute(spec: &ModelSpec, w: &ParamVector, data: &Dataset, derivs: Derivs) -> Result<Self> {
        if data.input_dim() != spec.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "data input columns",
                expected: spec.input_dim(),
                found: data.input_dim(),
            });
        }
        if data.output_dim() != spec.output_dim() {
            return Err(Error::DimensionMismatch {
                what: "data output columns",
                expected: spec.output_dim(),
                found: data.output_dim(),
            });
        }
        if w.len() != spec.param_count() {
            return Err(Error::DimensionMismatch {
                what: "parameter vector",
                expected: spec.param_count(),
                found: w.len(),
            });
        }
        if data.is_empty() {
            return Err(Error::InvalidInput("empty dataset".into()));
        }
        let (n, d, k) = (data.len(), spec.output_dim(), spec.param_count());
        let mut ev = Evaluator::new(spec, w.as_slice());
        let mut residuals = vec![0.0; n * d];
        let mut jacobians = (derivs >= Derivs::First).then(|| vec![0.0; n * d * k]);
        let mut second = (derivs >= Derivs::Second).then(|| vec![0.0; n * k * k * d]);
        for t in 0..n {
            let out = &mut residuals[t * d..(t + 1) * d];
            let jac = jacobians.as_mut().map(|j| &mut j[t * d * k..(t + 1) * d * k]);
            let sec = second.as_mut().map(|s| &mut s[t * k * k * d..(t + 1) * k * k * d]);
            ev.point(data.z(t), out, jac, sec);
            for (o, y) in out.iter_mut().zip(data.y(t)) {
                *o = y - *o;
            }
        }
        if residuals.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite residual".into()));
        }
        Ok(Self {
            n,
            d,
            k,
            residuals,
            jacobians,
            second,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn output_dim(&self) -> usize {
        self.d
    }

    pub fn param_count(&self) -> usize {
        self.k
    }

    pub fn residual(&self, t: usize) -> &[f64] {
        &self.residuals[t * self.d..(t + 1) * self.d]
    }

    fn jacobian_rows(&self) -> Result<&[f64]> {
        self.jacobians
            .as_deref()
            .ok_or_else(|| Error::InvalidInput("residual set carries no Jacobians".into()))
    }

    /// `d x K` Jacobian of row `t`.
    pub fn jacobian(&self, t: usize) -> Option<DMatrix<f64>> {
        let dk = self.d * self.k;
        self.jacobians
            .as_ref()
            .map(|j| DMatrix::from_row_slice(self.d, self.k, &j[t * dk..(t + 1) * dk]))
    }
}

/// Value of a cost with whichever derivatives were requested.
#[derive(Debug, Clone)]
pub struct CostReport {
    pub value: f64,
    pub gradient: Option<DVector<f64>>,
    pub hessian: Option<DMatrix<f64>>,
    pub gamma_n: Option<SpdMatrix>,
}

fn raw_covariance(rs: &ResidualSet) -> DMatrix<f64> {
    let d = rs.d;
    let mut g = DMatrix::<f64>::zeros(d, d);
    for t in 0..rs.n {
        let r = rs.residual(t);
        for i in 0..d {
            for j in 0..=i {
                g[(i, j)] += r[i] * r[j];
            }
        }
    }
    let inv_n = 1.0 / rs.n as f64;
    for i in 0..d {
        for j in 0..=i {
            let v = g[(i, j)] * inv_n;
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

/// `Gamma_n(w) = 1/n sum r_t r_t^T`, rejecting singular results.
pub fn empirical_covariance(rs: &ResidualSet) -> Result<SpdMatrix> {
    SpdMatrix::from_symmetric(&raw_covariance(rs), RidgePolicy::Reject)
}

/// `V_n = 1/n sum |r_t|^2`.
pub fn mse_cost(rs: &ResidualSet) -> f64 {
    rs.residuals.iter().map(|v| v * v).sum::<f64>() / rs.n as f64
}

/// `1/n sum r_t^T weight^-1 r_t`.
pub fn gls_cost(rs: &ResidualSet, weight: &SpdMatrix) -> Result<f64> {
    check_weight(rs, weight)?;
    let s: f64 = (0..rs.n).map(|t| weight.inv_quad_form(rs.residual(t))).sum();
    Ok(s / rs.n as f64)
}

fn check_weight(rs: &ResidualSet, weight: &SpdMatrix) -> Result<()> {
    if weight.dim() != rs.d {
        return Err(Error::DimensionMismatch {
            what: "GLS weight",
            expected: rs.d,
            found: weight.dim(),
        });
    }
    Ok(())
}

/// GLS value and gradient `-2/n sum J_t^T weight^-1 r_t`.
pub fn gls_gradient(rs: &ResidualSet, weight: &SpdMatrix) -> Result<CostReport> {
    check_weight(rs, weight)?;
    let winv = weight.inverse_matrix();
    weighted_ls_gradient(rs, Some(&winv))
}

/// MSE value and gradient `-2/n sum J_t^T r_t`.
pub fn mse_gradient(rs: &ResidualSet) -> Result<CostReport> {
    weighted_ls_gradient(rs, None)
}

fn weighted_ls_gradient(rs: &ResidualSet, winv: Option<&DMatrix<f64>>) -> Result<CostReport> {
    let jac = rs.jacobian_rows()?;
    let (d, k) = (rs.d, rs.k);
    let mut value = 0.0;
    let mut grad = DVector::<f64>::zeros(k);
    let mut wr = vec![0.0; d];
    for t in 0..rs.n {
        let r = rs.residual(t);
        match winv {
            Some(m) => {
                for i in 0..d {
                    wr[i] = (0..d).map(|j| m[(i, j)] * r[j]).sum();
                }
            }
            None => wr.copy_from_slice(r),
        }
        value += r.iter().zip(&wr).map(|(a, b)| a * b).sum::<f64>();
        let jt = &jac[t * d * k..(t + 1) * d * k];
        for i in 0..d {
            let row = &jt[i * k..(i + 1) * k];
            for kk in 0..k {
                grad[kk] += row[kk] * wr[i];
            }
        }
    }
    let inv_n = 1.0 / rs.n as f64;
    Ok(CostReport {
        value: value * inv_n,
        gradient: Some(grad * (-2.0 * inv_n)),
        hessian: None,
        gamma_n: None,
    })
}

/// `U_n = log det Gamma_n`.
pub fn logdet_cost(rs: &ResidualSet) -> Result<CostReport> {
    let gamma = empirical_covariance(rs)?;
    Ok(CostReport {
        value: gamma.logdet(),
        gradient: None,
        hessian: None,
        gamma_n: Some(gamma),
    })
}

/// `A_n(w_k)` for every free parameter.
pub fn a_matrices(rs: &ResidualSet) -> Result<Vec<DMatrix<f64>>> {
    let jac = rs.jacobian_rows()?;
    let (d, k) = (rs.d, rs.k);
    let mut acc = vec![0.0; k * d * d];
    for t in 0..rs.n {
        let r = rs.residual(t);
        let jt = &jac[t * d * k..(t + 1) * d * k];
        for i in 0..d {
            for kk in 0..k {
                let jik = jt[i * k + kk];
                if jik == 0.0 {
                    continue;
                }
                let dst = &mut acc[(kk * d + i) * d..(kk * d + i + 1) * d];
                for (a, rj) in dst.iter_mut().zip(r) {
                    *a -= jik * rj;
                }
            }
        }
    }
    let inv_n = 1.0 / rs.n as f64;
    Ok((0..k)
        .map(|kk| DMatrix::from_row_slice(d, d, &acc[kk * d * d..(kk + 1) * d * d]) * inv_n)
        .collect())
}

/// `dGamma_n/dw_k = A_n(k) + A_n(k)^T`, entry `(i, j)` being
/// `1/n sum [-dF(i)/dw_k r(j) - dF(j)/dw_k r(i)]`.
pub fn gamma_derivative(a_k: &DMatrix<f64>) -> DMatrix<f64> {
    a_k + a_k.transpose()
}

/// Gradient as `vec(Gamma^-1)^T vec(dGamma/dw_k)`, the entrywise form of
/// the trace expression; kept as a cross-check of [`logdet_gradient`].
pub fn logdet_gradient_entrywise(gamma_inv: &DMatrix<f64>, a: &[DMatrix<f64>]) -> DVector<f64> {
    DVector::from_iterator(
        a.len(),
        a.iter().map(|ak| {
            let dg = gamma_derivative(ak);
            gamma_inv.iter().zip(dg.iter()).map(|(x, y)| x * y).sum::<f64>()
        }),
    )
}

/// `U_n` and its gradient `2 tr(Gamma^-1 A_n(k))`.
pub fn logdet_gradient(rs: &ResidualSet) -> Result<CostReport> {
    let gamma = empirical_covariance(rs)?;
    let a = a_matrices(rs)?;
    let ginv = gamma.inverse_matrix();
    let grad = DVector::from_iterator(a.len(), a.iter().map(|ak| 2.0 * trace_of_product(&ginv, ak)));
    debug_assert!({
        let alt = logdet_gradient_entrywise(&ginv, &a);
        grad.iter().zip(alt.iter()).zip(&a).all(|((g, h), ak)| {
            let scale: f64 = ginv.iter().zip(ak.iter()).map(|(x, y)| (x * y).abs()).sum();
            (g - h).abs() <= 1e-12 * (1.0 + 4.0 * scale)
        })
    });
    Ok(CostReport {
        value: gamma.logdet(),
        gradient: Some(grad),
        hessian: None,
        gamma_n: Some(gamma),
    })
}

/// `U_n`, gradient and symmetrized Hessian.
pub fn logdet_hessian(rs: &ResidualSet) -> Result<CostReport> {
    let (value, grad, raw, gamma) = logdet_hessian_parts(rs)?;
    let sym = (&raw + raw.transpose()) * 0.5;
    Ok(CostReport {
        value,
        gradient: Some(grad),
        hessian: Some(sym),
        gamma_n: Some(gamma),
    })
}

/// Hessian before symmetrization, for diagnostics.
pub fn logdet_hessian_unsymmetrized(rs: &ResidualSet) -> Result<DMatrix<f64>> {
    logdet_hessian_parts(rs).map(|p| p.2)
}

fn logdet_hessian_parts(rs: &ResidualSet) -> Result<(f64, DVector<f64>, DMatrix<f64>, SpdMatrix)> {
    let gamma = empirical_covariance(rs)?;
    let a = a_matrices(rs)?;
    let jac = rs.jacobian_rows()?;
    let second = rs.second.as_deref();
    if second.is_none() && rs.k > 0 {
        return Err(Error::InvalidInput("residual set carries no second derivatives".into()));
    }
    let (n, d, k) = (rs.n, rs.d, rs.k);
    let ginv = gamma.inverse_matrix();

    // raw sums for B_n and C_n, Gamma^-1 applied once at the end
    let mut b = vec![0.0; k * k * d * d];
    let mut c = vec![0.0; k * k * d * d];
    for t in 0..n {
        let r = rs.residual(t);
        let jt = &jac[t * d * k..(t + 1) * d * k];
        for kk in 0..k {
            for l in 0..k {
                let blk = (kk * k + l) * d * d;
                for i in 0..d {
                    let jik = jt[i * k + kk];
                    if jik != 0.0 {
                        for j in 0..d {
                            b[blk + i * d + j] += jik * jt[j * k + l];
                        }
                    }
                }
            }
        }
        if let Some(sec) = second {
            let st = &sec[t * k * k * d..(t + 1) * k * k * d];
            for kl in 0..k * k {
                let s = &st[kl * d..(kl + 1) * d];
                if s.iter().all(|v| *v == 0.0) {
                    continue;
                }
                let blk = kl * d * d;
                for i in 0..d {
                    for j in 0..d {
                        c[blk + i * d + j] -= r[i] * s[j];
                    }
                }
            }
        }
    }
    let inv_n = 1.0 / n as f64;
    let tr_ginv = |buf: &[f64], blk: usize| -> f64 {
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                s += ginv[(i, j)] * buf[blk + j * d + i];
            }
        }
        s * inv_n
    };

    let ginv_a: Vec<DMatrix<f64>> = a.iter().map(|ak| &ginv * ak).collect();
    let ginv_s: Vec<DMatrix<f64>> = a.iter().map(|ak| &ginv * gamma_derivative(ak)).collect();
    let grad = DVector::from_iterator(k, a.iter().map(|ak| 2.0 * trace_of_product(&ginv, ak)));
    let mut h = DMatrix::<f64>::zeros(k, k);
    for kk in 0..k {
        for l in 0..k {
            let blk = (kk * k + l) * d * d;
            let inverse_term = -2.0 * trace_of_product(&ginv_s[l], &ginv_a[kk]);
            h[(kk, l)] = inverse_term + 2.0 * tr_ginv(&b, blk) + 2.0 * tr_ginv(&c, blk);
        }
    }
    Ok((gamma.logdet(), grad, h, gamma))
}

/// Raw `B_n(k,l)` matrices weighted by `Gamma^-1`: entry `(k,l)` is
/// `tr(gamma_inv B_n(k,l)) = 1/n sum J_t[:,l]^T gamma_inv J_t[:,k]`.
pub(crate) fn weighted_outer_jacobians(rs: &ResidualSet, gamma_inv: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let jac = rs.jacobian_rows()?;
    let (d, k) = (rs.d, rs.k);
    let mut out = DMatrix::<f64>::zeros(k, k);
    let mut gj = vec![0.0; d * k];
    for t in 0..rs.n {
        let jt = &jac[t * d * k..(t + 1) * d * k];
        // gamma_inv * J_t, d x K
        for i in 0..d {
            for kk in 0..k {
                gj[i * k + kk] = (0..d).map(|m| gamma_inv[(i, m)] * jt[m * k + kk]).sum();
            }
        }
        for kk in 0..k {
            for l in kk..k {
                let s: f64 = (0..d).map(|i| jt[i * k + kk] * gj[i * k + l]).sum();
                out[(kk, l)] += s;
            }
        }
    }
    let inv_n = 1.0 / rs.n as f64;
    for kk in 0..k {
        for l in kk..k {
            let v = out[(kk, l)] * inv_n;
            out[(kk, l)] = v;
            out[(l, kk)] = v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rs(d: usize, rows: &[f64]) -> ResidualSet {
        ResidualSet::from_residuals(d, rows.to_vec()).unwrap()
    }

    fn seeded_problem(seed: u64, spec: &ModelSpec, n: usize) -> (ParamVector, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = spec.random_params(&mut rng, -1.0, 1.0);
        let din = spec.input_dim();
        let d = spec.output_dim();
        let z: Vec<f64> = (0..n * din).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        (w, Dataset::new(din, d, z, y).unwrap())
    }

    #[test]
    fn covariance_examples() {
        let g = empirical_covariance(&rs(1, &[1.0, -1.0])).unwrap();
        assert_eq!(g.entries()[(0, 0)], 1.0);
        let g = empirical_covariance(&rs(2, &[1.0, 0.0, 0.0, 1.0])).unwrap();
        assert_eq!(g.to_rows(), vec![vec![0.5, 0.0], vec![0.0, 0.5]]);
        assert!(matches!(
            empirical_covariance(&rs(2, &[1.0, 2.0])),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_cost(&rs(2, &[0.0; 6])), 0.0);
        assert_eq!(mse_cost(&rs(1, &[1.0, -1.0])), 1.0);
        let r = rs(2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(mse_cost(&r), 1.0);
        assert_eq!(mse_cost(&r), empirical_covariance(&r).unwrap().entries().trace());
    }

    #[test]
    fn gls_examples() {
        let r = rs(2, &[1.0, 2.0, -0.5, 0.3, 0.7, 0.1]);
        assert_relative_eq!(gls_cost(&r, &SpdMatrix::identity(2)).unwrap(), mse_cost(&r), epsilon = 1e-15);
        let w = SpdMatrix::from_rows(&[vec![4.0]]).unwrap();
        assert_eq!(gls_cost(&rs(1, &[2.0]), &w).unwrap(), 1.0);
        assert!(matches!(
            gls_cost(&r, &SpdMatrix::identity(3)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn gls_equals_trace_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let d = rng.random_range(1..5);
            let n = 30;
            let r = rs(d, &(0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>());
            let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
            let w = SpdMatrix::from_symmetric(&(&a * a.transpose() + DMatrix::identity(d, d)), RidgePolicy::Reject).unwrap();
            let direct = gls_cost(&r, &w).unwrap();
            let via_trace = crate::linalg::trace_product(&w.inverse(), empirical_covariance(&r).unwrap().entries()).unwrap();
            assert_relative_eq!(direct, via_trace, max_relative = 1e-12);
        }
    }

    #[test]
    fn logdet_examples() {
        let r = rs(2, &[1.0, 0.0, 0.0, 1.0]);
        let u = logdet_cost(&r).unwrap().value;
        assert_relative_eq!(u, 2.0 * 0.5f64.ln(), epsilon = 1e-15);
        assert!((u + 1.38629).abs() < 1e-5);

        let r1 = rs(1, &[0.3, -1.2, 2.5, 0.1]);
        assert_eq!(logdet_cost(&r1).unwrap().value, mse_cost(&r1).ln());
    }

    #[test]
    fn logdet_is_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 50;
        let raw: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-2.0..2.0)).collect();
        let th: f64 = 0.7;
        let (c, s) = (th.cos(), th.sin());
        let rot: Vec<f64> = raw
            .chunks(2)
            .flat_map(|r| [c * r[0] - s * r[1], s * r[0] + c * r[1]])
            .collect();
        let u1 = logdet_cost(&rs(2, &raw)).unwrap().value;
        let u2 = logdet_cost(&rs(2, &rot)).unwrap().value;
        assert!((u1 - u2).abs() < 1e-9);
    }

    #[test]
    fn masked_column_has_zero_gradient() {
        // K = 2 where the second parameter multiplies an all-zero input column
        let spec = ModelSpec::linear(2, 1).unwrap();
        let data = Dataset::from_rows(
            &[vec![1.0, 0.0], vec![2.0, 0.0], vec![-1.0, 0.0]],
            &[vec![0.5], vec![1.0], vec![0.2]],
        )
        .unwrap();
        let w = ParamVector::new(&spec, vec![0.3, 0.7]).unwrap();
        let r = ResidualSet::compute(&spec, &w, &data, Derivs::First).unwrap();
        let g = logdet_gradient(&r).unwrap().gradient.unwrap();
        assert_eq!(g[1], 0.0);
    }

    #[test]
    fn scalar_chain_rule() {
        let spec = ModelSpec::mlp(2, 2, 1).unwrap();
        for seed in 0..10 {
            let (w, data) = seeded_problem(seed, &spec, 40);
            let r = ResidualSet::compute(&spec, &w, &data, Derivs::First).unwrap();
            let u = logdet_gradient(&r).unwrap();
            let v = mse_gradient(&r).unwrap();
            assert_relative_eq!(u.value, v.value.ln(), epsilon = 1e-12);
            let expected = v.gradient.unwrap() / v.value;
            for (a, b) in u.gradient.unwrap().iter().zip(expected.iter()) {
                assert_relative_eq!(a, b, max_relative = 1e-10, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn gradient_forms_agree_and_derivative_matrix_is_symmetric() {
        let spec = ModelSpec::mlp(2, 3, 2).unwrap();
        let (w, data) = seeded_problem(3, &spec, 60);
        let r = ResidualSet::compute(&spec, &w, &data, Derivs::First).unwrap();
        let a = a_matrices(&r).unwrap();
        for ak in &a {
            let dg = gamma_derivative(ak);
            assert_eq!(dg, dg.transpose());
        }
        let gamma = empirical_covariance(&r).unwrap();
        let ginv = gamma.inverse_matrix();
        let trace_form = logdet_gradient(&r).unwrap().gradient.unwrap();
        let entry_form = logdet_gradient_entrywise(&ginv, &a);
        for (x, y) in trace_form.iter().zip(entry_form.iter()) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn gls_gradient_matches_finite_differences() {
        let spec = ModelSpec::mlp(2, 2, 2).unwrap();
        let (w, data) = seeded_problem(12, &spec, 50);
        let weight = SpdMatrix::from_rows(&[vec![1.81, 1.8], vec![1.8, 1.81]]).unwrap();
        let r = ResidualSet::compute(&spec, &w, &data, Derivs::First).unwrap();
        let g = gls_gradient(&r, &weight).unwrap();
        assert_relative_eq!(g.value, gls_cost(&r, &weight).unwrap(), max_relative = 1e-12);
        let g = g.gradient.unwrap();
        for k in 0..w.len() {
            let h = 1e-6 * (1.0 + w.as_slice()[k].abs());
            let mut p = w.as_slice().to_vec();
            p[k] += h;
            let fp = gls_cost(&ResidualSet::compute(&spec, &ParamVector::new(&spec, p.clone()).unwrap(), &data, Derivs::None).unwrap(), &weight).unwrap();
            p[k] -= 2.0 * h;
            let fm = gls_cost(&ResidualSet::compute(&spec, &ParamVector::new(&spec, p).unwrap(), &data, Derivs::None).unwrap(), &weight).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert!((g[k] - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "k={k}: {} vs {fd}", g[k]);
        }
    }

    #[test]
    fn linear_hessian_has_no_curvature_term() {
        let spec = ModelSpec::linear(2, 2).unwrap();
        let (w, data) = seeded_problem(2, &spec, 30);
        let r = ResidualSet::compute(&spec, &w, &data, Derivs::Second).unwrap();
        assert!(r.second.as_ref().unwrap().iter().all(|v| *v == 0.0));
        let h = logdet_hessian(&r).unwrap().hessian.unwrap();
        assert_eq!(h, h.transpose());
    }

    #[test]
    fn hessian_symmetry_diagnostic() {
        let spec = ModelSpec::mlp(2, 3, 2).unwrap();
        let (w, data) = seeded_problem(21, &spec, 200);
        let r = ResidualSet::compute(&spec, &w, &data, Derivs::Second).unwrap();
        let raw = logdet_hessian_unsymmetrized(&r).unwrap();
        let asym = (&raw - raw.transpose()).norm() / raw.norm();
        assert!(asym < 1e-8, "asymmetry {asym}");
        let h = logdet_hessian(&r).unwrap().hessian.unwrap();
        assert!((&h - h.transpose()).norm() <= 1e-10 * h.norm());
    }

    #[test]
    fn missing_jacobians_is_an_error() {
        let r = rs(1, &[1.0, 2.0]);
        assert!(logdet_gradient(&r).is_err());
        assert!(mse_gradient(&r).is_err());
    }
}
