//! Parametric regression families `F_w: R^{d'} -> R^d` with analytic
//! parameter derivatives.
//!
//! Every family lays its parameters out on a fixed *grid*; a boolean mask
//! over the grid selects the free parameters (true = free, false = frozen
//! at zero). A [`ParamVector`] holds only the free entries, in grid order.
//!
//! Grid layouts:
//! - linear: weight `(i, j)` (output `i`, input `j`) at `i * d' + j`;
//! - mlp: `[a_1..a_H | c_1..c_H | b_1..b_H | bias]`, where `a_j` is the
//!   `d'`-vector of input weights of hidden unit `j`, `c_j` its bias, `b_j`
//!   the `d`-vector of its output weights and `bias` the output bias.
//!
//! Identifiability of the family is assumed, not checked. MLP weights are
//! never canonicalized with respect to sign flips or unit permutations, so
//! compare fits through their residual covariances, not their parameters.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    MaskedLinear,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    kind: ModelKind,
    input_dim: usize,
    output_dim: usize,
    hidden_units: usize,
    mask: Option<Vec<bool>>,
    active: Vec<usize>,
}

impl ModelSpec {
    pub fn linear(input_dim: usize, output_dim: usize) -> Result<Self> {
        Self::build(ModelKind::Linear, input_dim, output_dim, 0, None)
    }

    pub fn masked_linear(input_dim: usize, output_dim: usize, mask: Vec<bool>) -> Result<Self> {
        Self::build(ModelKind::MaskedLinear, input_dim, output_dim, 0, Some(mask))
    }

    pub fn mlp(input_dim: usize, hidden_units: usize, output_dim: usize) -> Result<Self> {
        Self::build(ModelKind::Mlp, input_dim, output_dim, hidden_units, None)
    }

    fn build(
        kind: ModelKind,
        input_dim: usize,
        output_dim: usize,
        hidden_units: usize,
        mask: Option<Vec<bool>>,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::InvalidModel("input_dim and output_dim must be positive".into()));
        }
        match kind {
            ModelKind::Mlp if hidden_units == 0 => {
                return Err(Error::InvalidModel("mlp needs hidden_units >= 1".into()))
            }
            ModelKind::MaskedLinear if mask.is_none() => {
                return Err(Error::InvalidModel("masked_linear needs a mask".into()))
            }
            ModelKind::Linear if mask.is_some() => {
                return Err(Error::InvalidModel("linear takes no mask; use masked_linear".into()))
            }
            _ => {}
        }
        let grid = grid_size(kind, input_dim, output_dim, hidden_units);
        let active = match &mask {
            Some(m) => {
                if m.len() != grid {
                    return Err(Error::DimensionMismatch {
                        what: "mask length",
                        expected: grid,
                        found: m.len(),
                    });
                }
                m.iter().enumerate().filter(|(_, f)| **f).map(|(i, _)| i).collect()
            }
            None => (0..grid).collect(),
        };
        Ok(Self {
            kind,
            input_dim,
            output_dim,
            hidden_units,
            mask,
            active,
        })
    }

    /// Same family with `mask` applied; a plain linear model becomes masked.
    pub fn with_mask(&self, mask: Vec<bool>) -> Result<Self> {
        let kind = match self.kind {
            ModelKind::Linear => ModelKind::MaskedLinear,
            k => k,
        };
        Self::build(kind, self.input_dim, self.output_dim, self.hidden_units, Some(mask))
    }

    /// Copy with grid entry `grid_index` frozen at zero.
    pub fn freeze(&self, grid_index: usize) -> Result<Self> {
        let mut mask = self.full_mask();
        if grid_index >= mask.len() {
            return Err(Error::InvalidInput(format!("grid index {grid_index} out of range")));
        }
        mask[grid_index] = false;
        self.with_mask(mask)
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn hidden_units(&self) -> Option<usize> {
        (self.kind == ModelKind::Mlp).then_some(self.hidden_units)
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    /// Mask over the whole grid, all true when the model is unmasked.
    pub fn full_mask(&self) -> Vec<bool> {
        self.mask.clone().unwrap_or_else(|| vec![true; self.grid_size()])
    }

    pub fn grid_size(&self) -> usize {
        grid_size(self.kind, self.input_dim, self.output_dim, self.hidden_units)
    }

    /// Number of free parameters `K`.
    pub fn param_count(&self) -> usize {
        self.active.len()
    }

    /// Grid positions of the free parameters, ascending.
    pub fn active_indices(&self) -> &[usize] {
        &self.active
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.kind, ModelKind::Linear | ModelKind::MaskedLinear)
    }

    /// Whether `self` is `other` with some free parameters frozen: same
    /// family and dimensions, and every free entry of `self` free in `other`.
    pub fn is_submask_of(&self, other: &ModelSpec) -> bool {
        let family = |s: &ModelSpec| if s.is_linear() { 0 } else { 1 };
        family(self) == family(other)
            && self.input_dim == other.input_dim
            && self.output_dim == other.output_dim
            && self.hidden_units == other.hidden_units
            && self
                .full_mask()
                .iter()
                .zip(other.full_mask())
                .all(|(a, b)| !*a || b)
    }

    /// Places free parameters on the grid, zeros elsewhere.
    pub fn scatter(&self, w: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.grid_size()];
        for (&g, &v) in self.active.iter().zip(w) {
            full[g] = v;
        }
        full
    }

    /// Reads the free entries back from a grid vector.
    pub fn gather(&self, full: &[f64]) -> Vec<f64> {
        self.active.iter().map(|&g| full[g]).collect()
    }

    /// Free parameters drawn uniformly in `[low, high)`.
    pub fn random_params<R: Rng + ?Sized>(&self, rng: &mut R, low: f64, high: f64) -> ParamVector {
        ParamVector((0..self.param_count()).map(|_| rng.random_range(low..high)).collect())
    }

    pub fn describe(&self) -> String {
        match self.kind {
            ModelKind::Mlp => format!(
                "mlp({},{},{}) K={}",
                self.input_dim,
                self.hidden_units,
                self.output_dim,
                self.param_count()
            ),
            _ => format!(
                "linear({}->{}) K={}",
                self.input_dim,
                self.output_dim,
                self.param_count()
            ),
        }
    }

    fn check_input(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                what: "model input",
                expected: self.input_dim,
                found: z.len(),
            });
        }
        Ok(())
    }

    fn check_params(&self, w: &ParamVector) -> Result<()> {
        if w.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                what: "parameter vector",
                expected: self.param_count(),
                found: w.len(),
            });
        }
        Ok(())
    }

    pub fn eval(&self, w: &ParamVector, z: &[f64]) -> Result<Vec<f64>> {
        self.check_params(w)?;
        self.check_input(z)?;
        let mut ev = Evaluator::new(self, w.as_slice());
        let mut out = vec![0.0; self.output_dim];
        ev.point(z, &mut out, None, None);
        Ok(out)
    }

    /// `d x K` matrix whose column `k` is `dF_w(z)/dw_k`.
    pub fn jacobian_params(&self, w: &ParamVector, z: &[f64]) -> Result<DMatrix<f64>> {
        self.check_params(w)?;
        self.check_input(z)?;
        let (d, k) = (self.output_dim, self.param_count());
        let mut ev = Evaluator::new(self, w.as_slice());
        let mut out = vec![0.0; d];
        let mut jac = vec![0.0; d * k];
        ev.point(z, &mut out, Some(&mut jac), None);
        Ok(DMatrix::from_row_slice(d, k, &jac))
    }

    pub fn second_derivs_params(&self, w: &ParamVector, z: &[f64]) -> Result<SecondDerivs> {
        self.check_params(w)?;
        self.check_input(z)?;
        let (d, k) = (self.output_dim, self.param_count());
        let mut ev = Evaluator::new(self, w.as_slice());
        let mut out = vec![0.0; d];
        let mut jac = vec![0.0; d * k];
        let mut sec = vec![0.0; k * k * d];
        ev.point(z, &mut out, Some(&mut jac), Some(&mut sec));
        Ok(SecondDerivs { k, d, data: sec })
    }
}

fn grid_size(kind: ModelKind, input_dim: usize, output_dim: usize, hidden: usize) -> usize {
    match kind {
        ModelKind::Linear | ModelKind::MaskedLinear => input_dim * output_dim,
        ModelKind::Mlp => hidden * input_dim + hidden + hidden * output_dim + output_dim,
    }
}

/// Free parameter values of some [`ModelSpec`], in grid order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(spec: &ModelSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.param_count() {
            return Err(Error::DimensionMismatch {
                what: "parameter vector",
                expected: spec.param_count(),
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("parameters must be finite".into()));
        }
        Ok(Self(values))
    }

    pub fn zeros(spec: &ModelSpec) -> Self {
        Self(vec![0.0; spec.param_count()])
    }

    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// `K x K` table of `d`-vectors `d^2 F_w(z) / dw_k dw_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondDerivs {
    k: usize,
    d: usize,
    data: Vec<f64>,
}

impl SecondDerivs {
    pub fn get(&self, k: usize, l: usize) -> &[f64] {
        let start = (k * self.k + l) * self.d;
        &self.data[start..start + self.d]
    }

    pub fn param_count(&self) -> usize {
        self.k
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0)
    }
}

/// Per-observation evaluation with reusable scratch space. Derivative
/// buffers are indexed by free parameter: the Jacobian is `d x K`
/// row-major, second derivatives are `K x K x d`.
pub(crate) struct Evaluator<'a> {
    spec: &'a ModelSpec,
    full_w: Vec<f64>,
    hidden: Vec<f64>,
    slope: Vec<f64>,
    full_jac: Vec<f64>,
    /// grid position -> free index, `usize::MAX` when frozen
    slot: Vec<usize>,
}

impl<'a> Evaluator<'a> {
    pub(crate) fn new(spec: &'a ModelSpec, w: &[f64]) -> Self {
        let grid = spec.grid_size();
        let mut slot = vec![usize::MAX; grid];
        for (k, &g) in spec.active.iter().enumerate() {
            slot[g] = k;
        }
        Self {
            spec,
            full_w: spec.scatter(w),
            hidden: vec![0.0; spec.hidden_units],
            slope: vec![0.0; spec.hidden_units],
            full_jac: Vec::new(),
            slot,
        }
    }

    pub(crate) fn point(
        &mut self,
        z: &[f64],
        out: &mut [f64],
        jac: Option<&mut [f64]>,
        sec: Option<&mut [f64]>,
    ) {
        match self.spec.kind {
            ModelKind::Linear | ModelKind::MaskedLinear => self.linear(z, out, jac, sec),
            ModelKind::Mlp => self.mlp(z, out, jac, sec),
        }
    }

    fn linear(&mut self, z: &[f64], out: &mut [f64], jac: Option<&mut [f64]>, sec: Option<&mut [f64]>) {
        let (din, d) = (self.spec.input_dim, self.spec.output_dim);
        let k = self.spec.param_count();
        for i in 0..d {
            let row = &self.full_w[i * din..(i + 1) * din];
            out[i] = row.iter().zip(z).map(|(a, b)| a * b).sum();
        }
        if let Some(jac) = jac {
            jac.fill(0.0);
            for (kk, &g) in self.spec.active.iter().enumerate() {
                let (i, j) = (g / din, g % din);
                jac[i * k + kk] = z[j];
            }
        }
        if let Some(sec) = sec {
            sec.fill(0.0);
        }
    }

    fn mlp(&mut self, z: &[f64], out: &mut [f64], jac: Option<&mut [f64]>, sec: Option<&mut [f64]>) {
        let spec = self.spec;
        let (din, h, d) = (spec.input_dim, spec.hidden_units, spec.output_dim);
        let off_c = h * din;
        let off_b = off_c + h;
        let off_bias = off_b + h * d;
        let w = &self.full_w;

        for j in 0..h {
            let a = &w[j * din..(j + 1) * din];
            let u: f64 = a.iter().zip(z).map(|(x, y)| x * y).sum::<f64>() + w[off_c + j];
            let t = u.tanh();
            self.hidden[j] = t;
            self.slope[j] = 1.0 - t * t;
        }
        for i in 0..d {
            let mut s = w[off_bias + i];
            for j in 0..h {
                s += w[off_b + j * d + i] * self.hidden[j];
            }
            out[i] = s;
        }

        let Some(jac) = jac else { return };
        let grid = spec.grid_size();
        let k = spec.param_count();

        // Row i of the grid Jacobian: back-propagate a unit signal from
        // output i through the network restricted to that output.
        self.full_jac.clear();
        self.full_jac.resize(d * grid, 0.0);
        for i in 0..d {
            let row = &mut self.full_jac[i * grid..(i + 1) * grid];
            row[off_bias + i] = 1.0;
            for j in 0..h {
                row[off_b + j * d + i] = self.hidden[j];
                let delta = w[off_b + j * d + i] * self.slope[j];
                row[off_c + j] = delta;
                for m in 0..din {
                    row[j * din + m] = delta * z[m];
                }
            }
        }
        for i in 0..d {
            for (kk, &g) in spec.active.iter().enumerate() {
                jac[i * k + kk] = self.full_jac[i * grid + g];
            }
        }

        let Some(sec) = sec else { return };
        sec.fill(0.0);
        let slot = &self.slot;
        let mut put = |p: usize, q: usize, i: usize, v: f64| {
            let (sp, sq) = (slot[p], slot[q]);
            if sp != usize::MAX && sq != usize::MAX {
                sec[(sp * k + sq) * d + i] = v;
                sec[(sq * k + sp) * d + i] = v;
            }
        };
        for j in 0..h {
            let t = self.hidden[j];
            let s1 = self.slope[j];
            // tanh'' = -2 t (1 - t^2), reusing the forward value
            let s2 = -2.0 * t * s1;
            let c = off_c + j;
            for i in 0..d {
                let bji = off_b + j * d + i;
                let curv = w[bji] * s2;
                put(c, c, i, curv);
                put(c, bji, i, s1);
                for m in 0..din {
                    let am = j * din + m;
                    put(am, c, i, curv * z[m]);
                    put(am, bji, i, s1 * z[m]);
                    for m2 in m..din {
                        put(am, j * din + m2, i, curv * z[m] * z[m2]);
                    }
                }
            }
        }
    }
}

/// Serialized model description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub output_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_units: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<bool>>,
    /// Free parameters in grid order (length `K`); a full-grid vector is
    /// also accepted on read.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<Vec<f64>>,
}

impl ModelFile {
    pub fn from_spec(spec: &ModelSpec, params: Option<&ParamVector>) -> Self {
        Self {
            kind: spec.kind,
            input_dim: spec.input_dim,
            output_dim: spec.output_dim,
            hidden_units: spec.hidden_units(),
            mask: spec.mask.clone(),
            params: params.map(|p| p.as_slice().to_vec()),
        }
    }

    pub fn spec(&self) -> Result<ModelSpec> {
        let spec = match self.kind {
            ModelKind::Linear | ModelKind::MaskedLinear => {
                let base = ModelSpec::linear(self.input_dim, self.output_dim)?;
                match (&self.mask, self.kind) {
                    (Some(m), _) => base.with_mask(m.clone())?,
                    (None, ModelKind::MaskedLinear) => {
                        return Err(Error::InvalidModel("masked_linear needs a mask".into()))
                    }
                    (None, _) => base,
                }
            }
            ModelKind::Mlp => {
                let h = self
                    .hidden_units
                    .ok_or_else(|| Error::InvalidModel("mlp needs hidden_units".into()))?;
                let base = ModelSpec::mlp(self.input_dim, h, self.output_dim)?;
                match &self.mask {
                    Some(m) => base.with_mask(m.clone())?,
                    None => base,
                }
            }
        };
        Ok(spec)
    }

    pub fn params(&self, spec: &ModelSpec) -> Result<Option<ParamVector>> {
        let Some(p) = &self.params else { return Ok(None) };
        let values = if p.len() == spec.param_count() {
            p.clone()
        } else if p.len() == spec.grid_size() {
            spec.gather(p)
        } else {
            return Err(Error::DimensionMismatch {
                what: "params",
                expected: spec.param_count(),
                found: p.len(),
            });
        };
        ParamVector::new(spec, values).map(Some)
    }
}
