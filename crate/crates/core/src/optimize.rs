//! BFGS with a bracketing weak-Wolfe line search, plus a seeded multi-start
//! driver.
//!
//! Objectives report `+inf` for points where they are undefined (for the
//! log-determinant cost: a singular residual covariance). The line search
//! treats such trials as failed sufficient decrease and backtracks.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, sub_seed, Stream};

const C1: f64 = 1e-4;
const C2: f64 = 0.9;
const MAX_LINE_TRIALS: usize = 60;
const CURVATURE_RESET: f64 = 1e-10;
const TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimOptions {
    pub max_iters: usize,
    /// Infinity-norm gradient tolerance.
    pub grad_tol: f64,
    pub n_starts: usize,
    pub init_low: f64,
    pub init_high: f64,
    pub seed: u64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            grad_tol: 1e-6,
            n_starts: 20,
            init_low: -2.0,
            init_high: 2.0,
            seed: 42,
        }
    }
}

impl OptimOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::InvalidInput("max_iters must be >= 1".into()));
        }
        if !(self.grad_tol > 0.0) {
            return Err(Error::InvalidInput("grad_tol must be > 0".into()));
        }
        if self.n_starts < 1 {
            return Err(Error::InvalidInput("n_starts must be >= 1".into()));
        }
        if !(self.init_low < self.init_high) {
            return Err(Error::InvalidInput("init_low must be < init_high".into()));
        }
        Ok(())
    }

    pub fn with_starts(mut self, n_starts: usize) -> Self {
        self.n_starts = n_starts;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Objective value and gradient at a point.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: Vec<f64>,
}

impl Evaluation {
    pub fn new(value: f64, gradient: Vec<f64>) -> Self {
        Self { value, gradient }
    }

    /// Sentinel for points outside the objective's domain.
    pub fn rejected() -> Self {
        Self {
            value: f64::INFINITY,
            gradient: Vec::new(),
        }
    }

    fn is_usable(&self, k: usize) -> bool {
        self.value.is_finite() && self.gradient.len() == k && self.gradient.iter().all(|g| g.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIters,
    LineSearchFailed,
    NonFiniteAtStart,
    /// Solved analytically, no iterations.
    ClosedForm,
}

/// Result of one BFGS run.
#[derive(Debug, Clone)]
pub struct BfgsRun {
    pub w: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub termination: Termination,
    /// Objective value at the start and after every accepted step.
    pub history: Vec<f64>,
}

impl BfgsRun {
    pub fn grad_norm_inf(&self) -> f64 {
        self.gradient.iter().fold(0.0, |m, g| m.max(g.abs()))
    }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, g| m.max(g.abs()))
}

struct Accepted {
    x: DVector<f64>,
    value: f64,
    grad: DVector<f64>,
}

/// Weak-Wolfe step along `p` by bisection and doubling. A step is accepted
/// when it satisfies sufficient decrease and the curvature condition, or,
/// once the predicted decrease is below rounding of `f`, when it does not
/// increase `f` and the directional derivative has shrunk into
/// `[c2 phi'(0), (2 c1 - 1) phi'(0)]`.
fn line_search<F>(objective: &F, x: &DVector<f64>, f0: f64, g0: &DVector<f64>, p: &DVector<f64>) -> Option<Accepted>
where
    F: Fn(&[f64]) -> Evaluation,
{
    let k = x.len();
    let slope0 = g0.dot(p);
    if !(slope0 < 0.0) {
        return None;
    }
    let noise = 4.0 * f64::EPSILON * (1.0 + f0.abs());
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    let mut alpha = 1.0;
    for _ in 0..MAX_LINE_TRIALS {
        let trial = x + p * alpha;
        let e = objective(trial.as_slice());
        if !e.is_usable(k) || e.value > f0 + C1 * alpha * slope0 {
            let approx_ok = e.is_usable(k) && e.value <= f0 && -C1 * alpha * slope0 <= noise && {
                let s = DVector::from_column_slice(&e.gradient).dot(p);
                s >= C2 * slope0 && s <= (2.0 * C1 - 1.0) * slope0
            };
            if approx_ok {
                return Some(Accepted {
                    x: trial,
                    value: e.value,
                    grad: DVector::from_vec(e.gradient),
                });
            }
            hi = alpha;
            alpha = 0.5 * (lo + hi);
            continue;
        }
        let grad = DVector::from_vec(e.gradient);
        if grad.dot(p) < C2 * slope0 {
            lo = alpha;
            alpha = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * alpha };
            continue;
        }
        return Some(Accepted {
            x: trial,
            value: e.value,
            grad,
        });
    }
    None
}

/// Minimizes `objective` from `w0`.
pub fn bfgs_minimize<F>(objective: &F, w0: &[f64], opts: &OptimOptions) -> Result<BfgsRun>
where
    F: Fn(&[f64]) -> Evaluation,
{
    let k = w0.len();
    let start = objective(w0);
    if !start.is_usable(k) {
        return Err(Error::NonFiniteAtStart);
    }
    let mut x = DVector::from_column_slice(w0);
    let mut f = start.value;
    let mut g = DVector::from_vec(start.gradient);
    let mut h = DMatrix::<f64>::identity(k, k);
    let mut h_is_identity = true;
    let mut history = vec![f];
    let mut iterations = 0;

    let termination = loop {
        if inf_norm(&g) <= opts.grad_tol {
            break Termination::Converged;
        }
        if iterations >= opts.max_iters {
            break Termination::MaxIters;
        }
        let mut p = -(&h * &g);
        if g.dot(&p) >= 0.0 {
            h = DMatrix::identity(k, k);
            h_is_identity = true;
            p = -g.clone();
        }
        let step = match line_search(objective, &x, f, &g, &p) {
            Some(s) => s,
            None if !h_is_identity => {
                h = DMatrix::identity(k, k);
                h_is_identity = true;
                continue;
            }
            None => break Termination::LineSearchFailed,
        };
        iterations += 1;
        let s = &step.x - &x;
        let y = &step.grad - &g;
        let sy = s.dot(&y);
        // scale-free curvature check; an absolute threshold stalls near the optimum
        if sy <= CURVATURE_RESET * s.norm() * y.norm() {
            h = DMatrix::identity(k, k);
            h_is_identity = true;
        } else {
            if h_is_identity {
                h *= sy / y.dot(&y);
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H+ = H - rho (s hy^T + hy s^T) + (rho^2 y^T H y + rho) s s^T
            h -= (&s * hy.transpose() + &hy * s.transpose()) * rho;
            h += (&s * s.transpose()) * (rho * rho * yhy + rho);
            h_is_identity = false;
        }
        x = step.x;
        f = step.value;
        g = step.grad;
        history.push(f);
    };

    Ok(BfgsRun {
        w: x.as_slice().to_vec(),
        value: f,
        gradient: g.as_slice().to_vec(),
        iterations,
        termination,
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartRecord {
    pub index: usize,
    pub seed: u64,
    pub cost: f64,
    pub iterations: usize,
    pub termination: Termination,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimOutcome {
    pub w_best: Vec<f64>,
    pub cost_best: f64,
    pub per_start: Vec<StartRecord>,
    pub converged: bool,
}

impl OptimOutcome {
    pub(crate) fn closed_form(w: Vec<f64>, cost: f64) -> Self {
        Self {
            w_best: w,
            cost_best: cost,
            per_start: vec![StartRecord {
                index: 0,
                seed: 0,
                cost,
                iterations: 0,
                termination: Termination::ClosedForm,
            }],
            converged: true,
        }
    }
}

/// Sub-seed of start `index`.
pub fn start_seed(opts: &OptimOptions, index: usize) -> u64 {
    sub_seed(opts.seed, &[Stream::Starts as u64, index as u64])
}

/// Initial point of start `index`: uniform on `[init_low, init_high)^k`.
pub fn start_point(opts: &OptimOptions, k: usize, index: usize) -> Vec<f64> {
    let mut rng = stream_rng(opts.seed, Stream::Starts, index as u64);
    (0..k).map(|_| rng.random_range(opts.init_low..opts.init_high)).collect()
}

fn pick_best(runs: &[(usize, u64, Result<BfgsRun>)]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (pos, (_, _, r)) in runs.iter().enumerate() {
        if let Ok(run) = r {
            if !run.value.is_finite() {
                continue;
            }
            match best {
                Some((_, v)) if run.value >= v - TIE_TOL => {}
                _ => best = Some((pos, run.value)),
            }
        }
    }
    best.map(|(p, _)| p)
}

fn collect_outcome(runs: Vec<(usize, u64, Result<BfgsRun>)>) -> Result<OptimOutcome> {
    let per_start = runs
        .iter()
        .map(|(index, seed, r)| match r {
            Ok(run) => StartRecord {
                index: *index,
                seed: *seed,
                cost: run.value,
                iterations: run.iterations,
                termination: run.termination,
            },
            Err(_) => StartRecord {
                index: *index,
                seed: *seed,
                cost: f64::INFINITY,
                iterations: 0,
                termination: Termination::NonFiniteAtStart,
            },
        })
        .collect();
    let Some(best) = pick_best(&runs) else {
        return Err(Error::AllStartsFailed { starts: runs.len() });
    };
    let (_, _, run) = runs.into_iter().nth(best).expect("index from pick_best");
    let run = run.expect("pick_best only selects successful runs");
    Ok(OptimOutcome {
        converged: run.termination == Termination::Converged,
        w_best: run.w,
        cost_best: run.value,
        per_start,
    })
}

/// `opts.n_starts` independent BFGS runs from seeded uniform starts; the
/// lowest final cost wins, ties (within 1e-12) going to the lower index.
pub fn multi_start<F>(objective: &F, k: usize, opts: &OptimOptions) -> Result<OptimOutcome>
where
    F: Fn(&[f64]) -> Evaluation + Sync,
{
    opts.validate()?;
    let runs: Vec<(usize, u64, Result<BfgsRun>)> = (0..opts.n_starts)
        .into_par_iter()
        .map(|i| {
            let w0 = start_point(opts, k, i);
            (i, start_seed(opts, i), bfgs_minimize(objective, &w0, opts))
        })
        .collect();
    collect_outcome(runs)
}

/// Single run from a supplied point (warm start).
pub fn minimize_from<F>(objective: &F, w0: &[f64], opts: &OptimOptions) -> Result<OptimOutcome>
where
    F: Fn(&[f64]) -> Evaluation,
{
    opts.validate()?;
    let run = bfgs_minimize(objective, w0, opts);
    collect_outcome(vec![(0, 0, run)])
}
