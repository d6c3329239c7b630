//! Minibatch training of the model under a combined task direction, and
//! infer-mode evaluation.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::{encode_batch, forward_full, predict_batch, ForwardOptions, Mode, Model};
use crate::config::{LossKind, ParetoConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::grad::Tape;
use crate::horizon::Horizon;
use crate::metrics::{evaluate_horizon, EvalRecord, HorizonMetrics};
use crate::pareto::train::{inner_loop, InnerConfig, MultiTaskProblem, TaskState};
use crate::pareto::{DirectionConfig, StepLog, WeightVector};
use crate::rng::{self, StreamRng};
use crate::ziln::{self, ZilnParams};

const PREDICT_CHUNK: usize = 512;

/// The model as a three-task problem over shuffled minibatches of `train`.
pub struct ModelProblem<'a> {
    pub model: Model,
    data: &'a Dataset,
    train: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    rng: StreamRng,
    trainable: Vec<String>,
    /// Gate sparsity of the most recent batch.
    pub last_sparsity: f64,
}

impl<'a> ModelProblem<'a> {
    pub fn new(model: Model, data: &'a Dataset, train: &[usize], batch_size: usize, seed: u64) -> Result<Self> {
        if train.is_empty() || batch_size == 0 {
            return Err(Error::invalid("training needs samples and a positive batch size"));
        }
        if let Some(&i) = train.iter().find(|&&i| i >= data.samples.len()) {
            return Err(Error::invalid(format!("training index {i} out of range")));
        }
        let trainable = model.trainable_names();
        Ok(Self {
            model,
            data,
            train: train.to_vec(),
            order: Vec::new(),
            cursor: 0,
            batch_size,
            rng: rng::stream(seed, "minibatch"),
            trainable,
            last_sparsity: 0.0,
        })
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.batch_size >= self.train.len() {
            return self.train.clone();
        }
        if self.cursor + self.batch_size > self.order.len() {
            self.order = self.train.clone();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let b = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        b
    }
}

impl MultiTaskProblem for ModelProblem<'_> {
    fn task_state(&mut self, _step: usize) -> Result<TaskState> {
        let idx = self.next_batch();
        let refs: Vec<_> = idx.iter().map(|&i| &self.data.samples[i]).collect();
        let batch = encode_batch(&self.model.schema, &self.data.users, &self.data.games, &refs)?;
        let mut tape = Tape::new();
        let b = self.model.params.bind(&mut tape);
        let out = forward_full(&mut tape, &b, &self.model, &batch, ForwardOptions::new(Mode::Train))?;
        let penalty = tape.scale(out.gate_l1, self.model.config.sparsity_weight);
        let mut losses = [0.0; 3];
        let mut grads = Vec::with_capacity(3);
        for h in Horizon::ALL {
            let hv = out.heads[h.index()];
            let y = batch.label_column(h);
            let base = match self.model.config.loss_kind {
                LossKind::ZilnNll => ziln::ziln_nll_batch(&mut tape, hv.p_raw, hv.mu, hv.sigma_raw, &y)?,
                LossKind::SquaredError => ziln::squared_error_batch(&mut tape, hv.p_raw, hv.mu, hv.sigma_raw, &y)?,
            };
            let loss = tape.add(base, penalty)?;
            let rec = tape.gradients(loss, &b)?;
            losses[h.index()] = rec.loss;
            let mut g = Vec::new();
            for name in &self.trainable {
                g.extend_from_slice(rec.grads[name].values());
            }
            grads.push(g);
        }
        self.model.pn.update(&out.pn_batch_stats);
        self.last_sparsity = out.sparsity;
        TaskState::new(losses, grads)
    }

    fn apply_step(&mut self, d: &[f64], eta: f64) -> Result<()> {
        let mut off = 0;
        for name in &self.trainable {
            let t = self.model.params.get_mut(name)?;
            let n = t.len();
            if off + n > d.len() {
                return Err(Error::shape("apply_step", format!("direction of length {}", d.len())));
            }
            for (p, g) in t.values_mut().iter_mut().zip(&d[off..off + n]) {
                *p -= eta * g;
            }
            off += n;
        }
        if off != d.len() {
            return Err(Error::shape("apply_step", format!("direction {} vs params {off}", d.len())));
        }
        if !self.model.params.all_finite() {
            return Err(Error::Numeric("parameters became non-finite".into()));
        }
        Ok(())
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub logs: Vec<StepLog>,
}

pub fn inner_config(cfg: &ParetoConfig) -> InnerConfig {
    InnerConfig {
        steps: cfg.steps,
        eta: cfg.learning_rate,
        direction: DirectionConfig {
            epsilon: cfg.epsilon,
            epo_convention: cfg.epo_convention,
        },
        combiner: cfg.combiner,
    }
}

/// Runs the fixed-λ inner loop on the `train` indices.
pub fn train_model(
    model: Model,
    data: &Dataset,
    train: &[usize],
    cfg: &ParetoConfig,
    lambda: &WeightVector,
    seed: u64,
) -> Result<TrainOutcome> {
    let mut problem = ModelProblem::new(model, data, train, cfg.batch_size, seed)?;
    let logs = inner_loop(&mut problem, lambda, &inner_config(cfg))?;
    Ok(TrainOutcome {
        model: problem.model,
        logs,
    })
}

/// Infer-mode head parameters for the given samples, in order.
pub fn predict_samples(model: &Model, data: &Dataset, idx: &[usize]) -> Result<Vec<[ZilnParams; 3]>> {
    let chunks: Vec<Result<Vec<[ZilnParams; 3]>>> = idx
        .par_chunks(PREDICT_CHUNK)
        .map(|c| {
            let refs: Vec<_> = c.iter().map(|&i| &data.samples[i]).collect();
            let batch = encode_batch(&model.schema, &data.users, &data.games, &refs)?;
            predict_batch(model, &batch)
        })
        .collect();
    let mut out = Vec::with_capacity(idx.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Evaluation records per horizon for the given samples.
pub fn eval_records(model: &Model, data: &Dataset, idx: &[usize]) -> Result<[Vec<EvalRecord>; 3]> {
    let preds = predict_samples(model, data, idx)?;
    let mut recs: [Vec<EvalRecord>; 3] = Default::default();
    for (&i, p) in idx.iter().zip(&preds) {
        let labels = data.samples[i].labels();
        for h in Horizon::ALL {
            let z = ziln::ziln_predict(&p[h.index()]);
            if !z.expected_value.is_finite() {
                return Err(Error::Numeric(format!("non-finite prediction for sample {i}")));
            }
            recs[h.index()].push(EvalRecord {
                y_true: labels[h.index()],
                y_pred: z.expected_value,
                p_buy: z.purchase_prob,
                horizon: h,
            });
        }
    }
    Ok(recs)
}

/// NMAE, AUC and N-GINI per horizon on the given samples.
pub fn evaluate_split(model: &Model, data: &Dataset, idx: &[usize]) -> Result<Vec<HorizonMetrics>> {
    let recs = eval_records(model, data, idx)?;
    Horizon::ALL.iter().map(|&h| evaluate_horizon(h, &recs[h.index()])).collect()
}
