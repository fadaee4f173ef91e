//! Statistical stepwise pruning: free parameters are frozen at zero one at
//! a time while the penalized criterion `U_n(w_hat) + q ln(n) / n`
//! decreases.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimate::{fit_logdet, fit_logdet_from, FitResult};
use crate::inference::chi2_sf;
use crate::model::ModelSpec;
use crate::optimize::OptimOptions;

/// `q ln(n) / n`.
pub fn penalty(q: usize, n: usize) -> f64 {
    q as f64 * (n as f64).ln() / n as f64
}

/// Penalized criterion of a log-determinant fit.
pub fn criterion(fit: &FitResult) -> f64 {
    fit.logdet_value() + penalty(fit.spec.param_count(), fit.n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneStep {
    /// Grid index of the parameter frozen at this step.
    pub frozen_index: usize,
    pub criterion_before: f64,
    pub criterion_after: f64,
    /// p-value of the one-degree-of-freedom `T_n` test when gated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
    pub params_after: usize,
}

#[derive(Debug, Clone)]
pub struct PruneTrace {
    pub initial_spec: ModelSpec,
    pub initial_criterion: f64,
    pub steps: Vec<PruneStep>,
    pub final_spec: ModelSpec,
    pub final_fit: FitResult,
}

/// Drops the entry of `w` (free parameters of `spec`) at grid index `g`.
fn without(spec: &ModelSpec, w: &[f64], g: usize) -> Vec<f64> {
    spec.active_indices()
        .iter()
        .zip(w)
        .filter(|(idx, _)| **idx != g)
        .map(|(_, v)| *v)
        .collect()
}

/// One-sided `T_n` p-value of the removal; negative statistics (the
/// restricted fit found a lower `U_n`) count as zero.
fn gate_p_value(candidate: &FitResult, current: &FitResult) -> Result<f64> {
    let stat = current.n as f64 * (candidate.logdet_value() - current.logdet_value());
    chi2_sf(stat.max(0.0), 1)
}

/// Greedy elimination. Every step refits the model once per free
/// parameter with that parameter frozen, warm-started from the current
/// estimate, and keeps the candidate with the lowest criterion (ties to
/// the lowest grid index) if it improves on the current one and, when
/// `gate` is set, the removal is not rejected at level `gate`.
pub fn ssm_prune(spec: &ModelSpec, data: &Dataset, opts: &OptimOptions, gate: Option<f64>) -> Result<PruneTrace> {
    let mut current = fit_logdet(spec, data, opts).map_err(|e| Error::InitialFitFailed(Box::new(e)))?;
    let initial_criterion = criterion(&current);
    let mut crit = initial_criterion;
    let mut steps = Vec::new();

    loop {
        let cur_spec = current.spec.clone();
        let w = current.w_hat.as_slice().to_vec();
        let candidates: Vec<Option<(usize, FitResult, f64)>> = cur_spec
            .active_indices()
            .par_iter()
            .map(|&g| {
                let attempt = cur_spec
                    .freeze(g)
                    .and_then(|s| fit_logdet_from(&s, data, &without(&cur_spec, &w, g), opts));
                match attempt {
                    Ok(fit) => {
                        let c = criterion(&fit);
                        Some((g, fit, c))
                    }
                    Err(e) => {
                        warn!("pruning candidate {g} skipped: {e}");
                        None
                    }
                }
            })
            .collect();
        let best = candidates
            .into_iter()
            .flatten()
            .filter(|(_, _, c)| c.is_finite())
            .fold(None::<(usize, FitResult, f64)>, |best, cand| match &best {
                Some((_, _, c)) if cand.2 >= *c => best,
                _ => Some(cand),
            });
        let Some((g, fit, c)) = best else { break };
        if c >= crit {
            break;
        }
        let p_value = match gate {
            Some(alpha) => {
                let p = gate_p_value(&fit, &current)?;
                if p <= alpha {
                    break;
                }
                Some(p)
            }
            None => None,
        };
        steps.push(PruneStep {
            frozen_index: g,
            criterion_before: crit,
            criterion_after: c,
            p_value,
            params_after: fit.spec.param_count(),
        });
        crit = c;
        current = fit;
    }

    Ok(PruneTrace {
        initial_spec: spec.clone(),
        initial_criterion,
        final_spec: current.spec.clone(),
        steps,
        final_fit: current,
    })
}
