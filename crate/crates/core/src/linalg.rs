//! Small dense symmetric positive-definite kernel.
//!
//! Everything the cost and inference layers need from linear algebra goes
//! through [`SpdMatrix`]: a symmetric matrix together with its lower
//! Cholesky factor. Construction fails when a pivot is not positive, which
//! for an empirical residual covariance means the model interpolates the
//! data or `n < d`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ASYMMETRY_TOL: f64 = 1e-8;
const JITTER_SCALE: f64 = 1e-8;
const JITTER_RETRIES: usize = 3;
const JITTER_ESCALATION: f64 = 100.0;

/// How [`SpdMatrix::from_symmetric`] reacts to a failed factorization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RidgePolicy {
    #[default]
    Reject,
    /// Add `lambda * I` and retry, escalating `lambda` by 100 each time.
    Jitter,
}

/// Symmetric positive-definite matrix with a cached lower Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    entries: DMatrix<f64>,
    chol: DMatrix<f64>,
    regularized: bool,
}

impl SpdMatrix {
    /// Symmetrizes `m` as `(m + m^T) / 2` and factorizes it.
    pub fn from_symmetric(m: &DMatrix<f64>, policy: RidgePolicy) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch {
                what: "square matrix columns",
                expected: m.nrows(),
                found: m.ncols(),
            });
        }
        if m.nrows() == 0 {
            return Err(Error::InvalidInput("empty matrix".into()));
        }
        let d = m.nrows();
        for i in 0..d {
            for j in (i + 1)..d {
                let (a, b) = (m[(i, j)], m[(j, i)]);
                if !a.is_finite() || !b.is_finite() {
                    return Err(Error::InvalidInput("matrix has non-finite entries".into()));
                }
                if (a - b).abs() > ASYMMETRY_TOL * (1.0 + a.abs()) {
                    return Err(Error::AsymmetricInput { row: i, col: j });
                }
            }
        }
        let sym = symmetrize(m);
        match cholesky(&sym) {
            Ok(chol) => Ok(Self {
                entries: sym,
                chol,
                regularized: false,
            }),
            Err(e) if policy == RidgePolicy::Reject => Err(e),
            Err(mut last) => {
                let mut lambda = JITTER_SCALE * sym.trace().abs() / d as f64;
                if lambda == 0.0 {
                    lambda = JITTER_SCALE;
                }
                for _ in 0..JITTER_RETRIES {
                    let mut shifted = sym.clone();
                    for i in 0..d {
                        shifted[(i, i)] += lambda;
                    }
                    match cholesky(&shifted) {
                        Ok(chol) => {
                            return Ok(Self {
                                entries: shifted,
                                chol,
                                regularized: true,
                            })
                        }
                        Err(e) => last = e,
                    }
                    lambda *= JITTER_ESCALATION;
                }
                Err(last)
            }
        }
    }

    /// Builds from row-major nested rows; convenient for literals.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.len();
        for r in rows {
            if r.len() != d {
                return Err(Error::DimensionMismatch {
                    what: "matrix row length",
                    expected: d,
                    found: r.len(),
                });
            }
        }
        let m = DMatrix::from_fn(d, d, |i, j| rows[i][j]);
        Self::from_symmetric(&m, RidgePolicy::Reject)
    }

    pub fn identity(d: usize) -> Self {
        Self {
            entries: DMatrix::identity(d, d),
            chol: DMatrix::identity(d, d),
            regularized: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// True when the Jitter policy had to add a ridge.
    pub fn is_regularized(&self) -> bool {
        self.regularized
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        let d = self.dim();
        (0..d)
            .map(|i| (0..d).map(|j| self.entries[(i, j)]).collect())
            .collect()
    }

    pub fn logdet(&self) -> f64 {
        2.0 * self.chol.diagonal().iter().map(|p| p.ln()).sum::<f64>()
    }

    pub fn det(&self) -> f64 {
        self.logdet().exp()
    }

    /// Solves `self * x = b` by forward and back substitution.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let d = self.dim();
        let l = &self.chol;
        let mut y = b.clone();
        for i in 0..d {
            let mut s = y[i];
            for k in 0..i {
                s -= l[(i, k)] * y[k];
            }
            y[i] = s / l[(i, i)];
        }
        for i in (0..d).rev() {
            let mut s = y[i];
            for k in (i + 1)..d {
                s -= l[(k, i)] * y[k];
            }
            y[i] = s / l[(i, i)];
        }
        y
    }

    /// `self^{-1}` as a plain matrix, exactly symmetric.
    pub fn inverse_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        let l = &self.chol;
        // L^{-1}, lower triangular
        let mut linv = DMatrix::<f64>::zeros(d, d);
        for j in 0..d {
            linv[(j, j)] = 1.0 / l[(j, j)];
            for i in (j + 1)..d {
                let mut s = 0.0;
                for k in j..i {
                    s -= l[(i, k)] * linv[(k, j)];
                }
                linv[(i, j)] = s / l[(i, i)];
            }
        }
        let mut inv = DMatrix::<f64>::zeros(d, d);
        for i in 0..d {
            for j in 0..=i {
                let mut s = 0.0;
                for k in i..d {
                    s += linv[(k, i)] * linv[(k, j)];
                }
                inv[(i, j)] = s;
                inv[(j, i)] = s;
            }
        }
        inv
    }

    pub fn inverse(&self) -> SpdMatrix {
        let inv = self.inverse_matrix();
        match cholesky(&inv) {
            Ok(chol) => SpdMatrix {
                entries: inv,
                chol,
                regularized: self.regularized,
            },
            // only reachable at condition numbers near 1/eps
            Err(_) => SpdMatrix::from_symmetric(&inv, RidgePolicy::Jitter)
                .expect("inverse of an SPD matrix is SPD up to rounding"),
        }
    }

    /// `x^T self^{-1} x`.
    pub fn inv_quad_form(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let l = &self.chol;
        let mut y = vec![0.0; d];
        let mut acc = 0.0;
        for i in 0..d {
            let mut s = x[i];
            for k in 0..i {
                s -= l[(i, k)] * y[k];
            }
            y[i] = s / l[(i, i)];
            acc += y[i] * y[i];
        }
        acc
    }
}

impl Serialize for SpdMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for SpdMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        SpdMatrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// `tr(g_inv * a)` without forming the product.
pub fn trace_product(g_inv: &SpdMatrix, a: &DMatrix<f64>) -> Result<f64> {
    let d = g_inv.dim();
    if a.nrows() != d || a.ncols() != d {
        return Err(Error::DimensionMismatch {
            what: "trace_product operand",
            expected: d,
            found: if a.nrows() != d { a.nrows() } else { a.ncols() },
        });
    }
    Ok(trace_of_product(g_inv.entries(), a))
}

/// Unchecked `sum_{i,j} a[i][j] * b[j][i]`.
pub(crate) fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let d = a.nrows();
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            s += a[(i, j)] * b[(j, i)];
        }
    }
    s
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let d = m.nrows();
    DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            m[(i, i)]
        } else {
            0.5 * (m[(i, j)] + m[(j, i)])
        }
    })
}

/// Lower Cholesky factor of a symmetric matrix. A pivot is rejected when it
/// is not finite or not larger than `d * eps * |a_ii|`, which catches exact
/// rank deficiency that rounding would otherwise leave barely positive.
fn cholesky(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = a.nrows();
    let mut l = DMatrix::<f64>::zeros(d, d);
    for j in 0..d {
        let mut s = a[(j, j)];
        for k in 0..j {
            s -= l[(j, k)] * l[(j, k)];
        }
        if !s.is_finite() || s <= d as f64 * f64::EPSILON * a[(j, j)].abs() {
            return Err(Error::NotPositiveDefinite { pivot: j });
        }
        let pivot = s.sqrt();
        l[(j, j)] = pivot;
        for i in (j + 1)..d {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / pivot;
        }
    }
    Ok(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn nar_mlp() -> DMatrix<f64> {
        dmatrix![1.81, 1.8; 1.8, 1.81]
    }

    fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(d, d)
    }

    fn random_rotation(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        // Gram-Schmidt on a random matrix
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let mut q = DMatrix::<f64>::zeros(d, d);
        for j in 0..d {
            let mut v = a.column(j).into_owned();
            for k in 0..j {
                let qk = q.column(k).into_owned();
                v -= &qk * qk.dot(&v);
            }
            let n = v.norm();
            q.set_column(j, &(v / n));
        }
        q
    }

    #[test]
    fn identity_factor_is_identity() {
        let g = SpdMatrix::from_symmetric(&DMatrix::identity(2, 2), RidgePolicy::Reject).unwrap();
        assert_eq!(g.chol(), &DMatrix::<f64>::identity(2, 2));
        assert!(!g.is_regularized());
    }

    #[test]
    fn nar_mlp_pivots_match_hand_cholesky() {
        let g = SpdMatrix::from_symmetric(&nar_mlp(), RidgePolicy::Reject).unwrap();
        let l11 = 1.81f64.sqrt();
        let l22 = (1.81 - 1.8 * 1.8 / 1.81f64).sqrt();
        assert_relative_eq!(g.chol()[(0, 0)], l11, epsilon = 1e-14);
        assert_relative_eq!(g.chol()[(1, 1)], l22, epsilon = 1e-14);
        assert!((g.chol()[(0, 0)] - 1.3454).abs() < 1e-4);
        assert!((g.chol()[(1, 1)] - 0.14123).abs() < 1e-4);
    }

    #[test]
    fn rank_one_is_rejected() {
        let err = SpdMatrix::from_symmetric(&dmatrix![1.0, 1.0; 1.0, 1.0], RidgePolicy::Reject)
            .unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite { .. }));
    }

    #[test]
    fn jitter_rescues_rank_one_and_flags_it() {
        let g = SpdMatrix::from_symmetric(&dmatrix![1.0, 1.0; 1.0, 1.0], RidgePolicy::Jitter)
            .unwrap();
        assert!(g.is_regularized());
        // first retry uses lambda = 1e-8 * trace / d
        assert_relative_eq!(g.entries()[(0, 0)], 1.0 + 1e-8, epsilon = 1e-15);
    }

    #[test]
    fn jitter_exhaustion_still_errors() {
        let m = dmatrix![1.0, 0.0; 0.0, -1.0];
        assert!(SpdMatrix::from_symmetric(&m, RidgePolicy::Jitter).is_err());
    }

    #[test]
    fn asymmetric_input_rejected_and_small_asymmetry_symmetrized() {
        let err = SpdMatrix::from_symmetric(&dmatrix![2.0, 1.0; 0.5, 2.0], RidgePolicy::Reject)
            .unwrap_err();
        assert!(matches!(err, Error::AsymmetricInput { row: 0, col: 1 }));
        let g = SpdMatrix::from_symmetric(&dmatrix![2.0, 1.0 + 1e-10; 1.0, 2.0], RidgePolicy::Reject)
            .unwrap();
        assert_eq!(g.entries()[(0, 1)], g.entries()[(1, 0)]);
    }

    #[test]
    fn logdet_examples() {
        assert_eq!(SpdMatrix::identity(3).logdet(), 0.0);
        let g = SpdMatrix::from_symmetric(&nar_mlp(), RidgePolicy::Reject).unwrap();
        let det = 1.81 * 1.81 - 1.8 * 1.8;
        assert_relative_eq!(g.logdet(), f64::ln(det), epsilon = 1e-12);
        assert!((g.logdet() + 3.32146).abs() < 1e-5);
        let g = SpdMatrix::from_symmetric(&dmatrix![2.0, 0.0; 0.0, 3.0], RidgePolicy::Reject).unwrap();
        assert_relative_eq!(g.logdet(), 6f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn inverse_examples() {
        let i = SpdMatrix::identity(2).inverse();
        assert_eq!(i.entries(), &DMatrix::<f64>::identity(2, 2));
        let g = SpdMatrix::from_symmetric(&dmatrix![2.0, 0.0; 0.0, 4.0], RidgePolicy::Reject).unwrap();
        assert!((g.inverse().entries() - dmatrix![0.5, 0.0; 0.0, 0.25]).abs().max() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for d in 1..6 {
            let m = random_spd(d, &mut rng);
            let g = SpdMatrix::from_symmetric(&m, RidgePolicy::Reject).unwrap();
            let prod = g.entries() * g.inverse().entries();
            let err = (prod - DMatrix::<f64>::identity(d, d)).norm() / (d as f64).sqrt();
            assert!(err < 1e-8, "d={d} err={err}");
        }
    }

    #[test]
    fn solve_matches_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_spd(4, &mut rng);
        let g = SpdMatrix::from_symmetric(&m, RidgePolicy::Reject).unwrap();
        let b = DVector::from_fn(4, |i, _| i as f64 - 1.5);
        let x = g.solve(&b);
        assert!((g.entries() * &x - &b).norm() < 1e-12);
        assert_relative_eq!(g.inv_quad_form(b.as_slice()), b.dot(&x), epsilon = 1e-12);
    }

    #[test]
    fn trace_product_examples() {
        let a = dmatrix![3.0, 1.0; 7.0, 5.0];
        assert_eq!(trace_product(&SpdMatrix::identity(2), &a).unwrap(), 8.0);
        let g = SpdMatrix::from_symmetric(&dmatrix![1.0, 0.0; 0.0, 2.0], RidgePolicy::Reject).unwrap();
        assert_eq!(trace_product(&g, &dmatrix![3.0, 0.0; 0.0, 5.0]).unwrap(), 13.0);
        let g = SpdMatrix::from_symmetric(&nar_mlp(), RidgePolicy::Reject).unwrap().inverse();
        let t1 = trace_product(&g, &a).unwrap();
        let t2 = trace_product(&g, &a.transpose()).unwrap();
        assert!((t1 - t2).abs() <= 1e-12 * t1.abs().max(1.0));
        assert!(matches!(
            trace_product(&g, &DMatrix::zeros(3, 3)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn reconstruction_at_high_condition_number() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for d in [2, 3, 5] {
            let q = random_rotation(d, &mut rng);
            let diag = DMatrix::from_fn(d, d, |i, j| {
                if i == j {
                    10f64.powf(-8.0 * i as f64 / (d - 1) as f64)
                } else {
                    0.0
                }
            });
            let m = &q * diag * q.transpose();
            let g = SpdMatrix::from_symmetric(&m, RidgePolicy::Reject).unwrap();
            let rec = g.chol() * g.chol().transpose();
            let rel = (rec - g.entries()).norm() / g.entries().norm();
            assert!(rel <= 1e-10, "d={d} rel={rel}");
        }
    }

    proptest::proptest! {
        #[test]
        fn logdet_of_inverse_is_negated(seed in 0u64..500, d in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = SpdMatrix::from_symmetric(&random_spd(d, &mut rng), RidgePolicy::Reject).unwrap();
            proptest::prop_assert!((g.inverse().logdet() + g.logdet()).abs() < 1e-9);
        }

        #[test]
        fn logdet_rotation_invariant(seed in 0u64..500, d in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_spd(d, &mut rng);
            let q = random_rotation(d, &mut rng);
            let g = SpdMatrix::from_symmetric(&m, RidgePolicy::Reject).unwrap();
            let rotated = symmetrize(&(&q * &m * q.transpose()));
            let gr = SpdMatrix::from_symmetric(&rotated, RidgePolicy::Reject).unwrap();
            proptest::prop_assert!((g.logdet() - gr.logdet()).abs() < 1e-9);
        }

        #[test]
        fn trace_product_transpose_symmetry(seed in 0u64..500, d in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = SpdMatrix::from_symmetric(&random_spd(d, &mut rng), RidgePolicy::Reject).unwrap().inverse();
            let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-3.0..3.0));
            let t1 = trace_product(&g, &a).unwrap();
            let t2 = trace_product(&g, &a.transpose()).unwrap();
            proptest::prop_assert!((t1 - t2).abs() <= 1e-12 * (1.0 + t1.abs()));
        }
    }
}
