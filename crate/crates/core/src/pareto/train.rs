//! Inner (fixed-λ) training loop and outer preference search.

use serde::{Deserialize, Serialize};

use super::{nondominating_direction, sample_weight_vector, DirectionConfig, StepLog, WeightVector};
use crate::error::{Error, Result};
use crate::rng;

/// Per-task losses and flattened gradients, rows in horizon order.
#[derive(Clone, Debug)]
pub struct TaskState {
    pub losses: [f64; 3],
    pub grads: Vec<Vec<f64>>,
}

impl TaskState {
    pub fn new(losses: [f64; 3], grads: Vec<Vec<f64>>) -> Result<Self> {
        if grads.len() != 3 {
            return Err(Error::invalid(format!("expected 3 gradient rows, got {}", grads.len())));
        }
        let n = grads[0].len();
        if grads.iter().any(|g| g.len() != n) {
            return Err(Error::shape("task_state", "gradient rows differ in length"));
        }
        if losses.iter().any(|l| !l.is_finite()) || grads.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("task losses {losses:?}")));
        }
        Ok(Self { losses, grads })
    }
}

/// Something trained by combined task gradients.
pub trait MultiTaskProblem {
    /// Losses and gradients at the current parameters for the next batch.
    fn task_state(&mut self, step: usize) -> Result<TaskState>;
    /// `params ← params − η·d`.
    fn apply_step(&mut self, d: &[f64], eta: f64) -> Result<()>;
}

/// How task gradients are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combiner {
    /// Anchored QP direction.
    Pareto,
    /// Equal weights `β = 1/3`.
    Equal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerConfig {
    pub steps: usize,
    pub eta: f64,
    pub direction: DirectionConfig,
    pub combiner: Combiner,
}

/// One step: compute `d_nd = Gβ*` and move against it.
pub fn pareto_train_step<P: MultiTaskProblem + ?Sized>(
    problem: &mut P,
    lambda: &WeightVector,
    cfg: &InnerConfig,
    step: usize,
) -> Result<StepLog> {
    if !(cfg.eta >= 0.0) || !cfg.eta.is_finite() {
        return Err(Error::invalid(format!("step size must be >= 0, got {}", cfg.eta)));
    }
    let state = problem.task_state(step)?;
    let mut dir = nondominating_direction(&state.losses, &state.grads, lambda.as_slice(), &cfg.direction)?;
    if cfg.combiner == Combiner::Equal {
        let beta = vec![1.0 / 3.0; 3];
        let n = state.grads[0].len();
        dir.d = (0..n).map(|k| state.grads.iter().map(|g| g[k]).sum::<f64>() / 3.0).collect();
        dir.d_norm = dir.d.iter().map(|x| x * x).sum::<f64>().sqrt();
        dir.qp.beta = beta;
        dir.qp.relaxed = false;
    }
    if !dir.d.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite direction at step {step}")));
    }
    if cfg.eta > 0.0 {
        problem.apply_step(&dir.d, cfg.eta)?;
    }
    Ok(StepLog::from_direction(step, state.losses, &dir))
}

/// Fixed-λ loop of `cfg.steps` steps.
pub fn inner_loop<P: MultiTaskProblem + ?Sized>(
    problem: &mut P,
    lambda: &WeightVector,
    cfg: &InnerConfig,
) -> Result<Vec<StepLog>> {
    (0..cfg.steps).map(|s| pareto_train_step(problem, lambda, cfg, s)).collect()
}

/// Preference vector and RNG seed assigned to one outer-loop run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunPlan {
    pub run: usize,
    pub seed: u64,
    pub u: f64,
    pub v: f64,
    pub lambda: WeightVector,
}

/// Draws `k` preference vectors from the dedicated weight stream.
pub fn plan_runs(k: usize, seed: u64) -> Result<Vec<RunPlan>> {
    if k == 0 {
        return Err(Error::invalid("search needs at least one run"));
    }
    let mut r = rng::stream(seed, "pareto-weights");
    Ok((0..k)
        .map(|run| {
            let (lambda, u, v) = sample_weight_vector(&mut r);
            RunPlan {
                run,
                seed: rng::stream_seed(seed, &format!("run-{run}")),
                u,
                v,
                lambda,
            }
        })
        .collect())
}

/// Selection score: mean minus population standard deviation.
pub fn selection_score(per_horizon: &[f64]) -> f64 {
    let n = per_horizon.len() as f64;
    let mean = per_horizon.iter().sum::<f64>() / n;
    let var = per_horizon.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    mean - var.sqrt()
}

/// Index of the best score; earliest wins ties, non-finite scores never win.
pub fn select_best(scores: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        if let Some(s) = s.filter(|s| s.is_finite()) {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
    }
    best.map(|(i, _)| i)
}
