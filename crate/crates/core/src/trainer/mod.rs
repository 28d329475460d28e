//! Optimisation, EMA weights, early stopping, ablation variants and the
//! evaluation harness.

mod checkpoint;
mod experiment;
mod metrics;
mod optim;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use experiment::{carve_validation, run_experiment, ExperimentResult, Prepared};
pub use metrics::{save_json, MetricRow, MetricsLog};
pub use optim::{clip_global_norm, global_norm, Adam, Ema, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

pub use crate::machine::AblationMode;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concepts::ConceptError;
use crate::diffmath::{MathError, Tensor};
use crate::machine::{ModelConfig, ModelError, ModelInput, NsmModel, ParamSet};
use crate::synthgen::{stream_seed, SynthError};
use crate::worldgraph::{GraphError, SceneGraph, TransitionEdge};

const DOMAIN_SHUFFLE: u64 = 11;
const DOMAIN_DROPOUT: u64 = 12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}; offending batch: {diagnostic}")]
    NonFinite { step: usize, diagnostic: String },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl TrainError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        TrainError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

impl From<MathError> for TrainError {
    fn from(e: MathError) -> Self {
        TrainError::Model(e.into())
    }
}

impl From<ConceptError> for TrainError {
    fn from(e: ConceptError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub grad_clip_norm: f64,
    pub ema_decay: f64,
    pub dropout: f64,
    pub dim: usize,
    /// Transitions `N`.
    pub steps: usize,
    pub seed: u64,
    pub max_epochs: usize,
    /// Validation evaluations without improvement before stopping.
    pub early_stop_patience: usize,
    /// Share of the training ids carved off for validation.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 64,
            grad_clip_norm: 5.0,
            ema_decay: 0.999,
            dropout: 0.15,
            dim: 300,
            steps: 8,
            seed: 0,
            max_epochs: 50,
            early_stop_patience: 5,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate {} must be ≥ 0", self.learning_rate));
        }
        if self.batch_size == 0 || self.dim == 0 || self.steps == 0 || self.max_epochs == 0 {
            return fail("batch_size, dim, steps and max_epochs must be positive".into());
        }
        if self.early_stop_patience == 0 {
            return fail("early_stop_patience must be positive".into());
        }
        if self.grad_clip_norm.is_nan() || self.grad_clip_norm <= 0.0 {
            return fail(format!(
                "grad_clip_norm {} must be positive",
                self.grad_clip_norm
            ));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return fail(format!("ema_decay {} must lie in (0, 1)", self.ema_decay));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return fail(format!(
                "validation_fraction {} must lie in (0, 1)",
                self.validation_fraction
            ));
        }
        Ok(())
    }
}

/// One labelled question ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: usize,
    pub input: ModelInput,
    pub answer: String,
    /// Index in the model's answer vocabulary, if the answer is in it.
    pub target: Option<usize>,
    pub hop_count: usize,
    pub template: String,
}

/// Rewrites graphs for `mode`: `no_relations` connects every ordered pair
/// with a uniform relation distribution; `no_concepts` requires dense node
/// features; the other modes leave graphs untouched.
pub fn ablate_graphs(
    graphs: &[SceneGraph],
    mode: AblationMode,
    relations: usize,
) -> Result<Vec<SceneGraph>, TrainError> {
    match mode {
        AblationMode::Full | AblationMode::NoTraversal => Ok(graphs.to_vec()),
        AblationMode::NoConcepts => {
            if let Some(i) = graphs
                .iter()
                .position(|g| g.nodes.iter().any(|n| n.dense_features.is_none()))
            {
                return Err(TrainError::Config(format!(
                    "no_concepts needs dense_features, graph {i} has none"
                )));
            }
            Ok(graphs.to_vec())
        }
        AblationMode::NoRelations => Ok(graphs
            .iter()
            .map(|g| {
                let n = g.node_count();
                let mut out = g.clone();
                out.edges = (0..n)
                    .flat_map(|s| (0..n).filter(move |&t| t != s).map(move |t| (s, t)))
                    .map(|(s, t)| TransitionEdge {
                        source: s,
                        target: t,
                        relation_dist: vec![1.0 / relations as f64; relations],
                    })
                    .collect();
                out
            })
            .collect()),
    }
}

/// Switches a model configuration and its graphs to `mode`.
pub fn apply_ablation(
    config: &ModelConfig,
    graphs: &[SceneGraph],
    mode: AblationMode,
) -> Result<(ModelConfig, Vec<SceneGraph>), TrainError> {
    let relations = *config
        .group_sizes
        .last()
        .ok_or_else(|| TrainError::Config("model has no relation group".into()))?;
    let graphs = ablate_graphs(graphs, mode, relations)?;
    let mut cfg = config.clone();
    cfg.ablation = mode;
    if mode == AblationMode::NoConcepts && cfg.dense_dim.is_none() {
        cfg.dense_dim = graphs
            .first()
            .and_then(|g| g.nodes[0].dense_features.as_ref())
            .map(Vec::len);
    }
    Ok((cfg, graphs))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl Accuracy {
    fn add(&mut self, ok: bool) {
        self.total += 1;
        self.correct += usize::from(ok);
        self.accuracy = self.correct as f64 / self.total as f64;
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Accuracy,
    pub by_hop: BTreeMap<usize, Accuracy>,
    pub by_template: BTreeMap<String, Accuracy>,
    /// Ids of questions whose gold answer is outside the answer vocabulary
    /// (always counted wrong).
    pub unknown_answers: Vec<usize>,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        self.overall.accuracy
    }

    pub fn to_metrics(&self, step: usize, split: &str) -> MetricsLog {
        let mut log = MetricsLog::default();
        log.push(step, split, "accuracy", self.overall.accuracy);
        log.push(step, split, "count", self.overall.total as f64);
        for (h, a) in &self.by_hop {
            log.push(step, split, &format!("accuracy_hop{h}"), a.accuracy);
        }
        for (t, a) in &self.by_template {
            log.push(step, split, &format!("accuracy_{t}"), a.accuracy);
        }
        log
    }
}

/// Scores predicted answers (one per example, same order).
pub fn score(examples: &[Example], predictions: &[String]) -> EvalReport {
    let mut report = EvalReport::default();
    for (ex, pred) in examples.iter().zip(predictions) {
        let ok = ex.target.is_some() && *pred == ex.answer;
        if ex.target.is_none() {
            report.unknown_answers.push(ex.id);
        }
        report.overall.add(ok);
        report.by_hop.entry(ex.hop_count).or_default().add(ok);
        report
            .by_template
            .entry(ex.template.clone())
            .or_default()
            .add(ok);
    }
    report
}

/// Evaluates any predictor; answers are compared as strings.
pub fn evaluate_with<F>(examples: &[Example], predict: F) -> Result<EvalReport, TrainError>
where
    F: Fn(&Example) -> Result<String, TrainError> + Sync,
{
    let predictions = examples
        .par_iter()
        .map(&predict)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(score(examples, &predictions))
}

/// Accuracy of `model` run with `params` (dropout off).
pub fn evaluate(
    model: &NsmModel,
    params: &ParamSet,
    examples: &[Example],
) -> Result<EvalReport, TrainError> {
    evaluate_with(examples, |ex| {
        let probs = model.predict_with(params, &ex.input)?;
        let best = argmax(&probs);
        Ok(model.config().answers[best].clone())
    })
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Weights from the epoch with the best validation accuracy.
    pub checkpoint: Checkpoint,
    pub history: MetricsLog,
    pub best_epoch: usize,
    pub best_valid_accuracy: f64,
    pub epochs_run: usize,
    pub optimizer_steps: usize,
}

/// Mini-batch Adam with global-norm clipping and EMA weights; validation
/// accuracy (EMA weights) after every epoch drives early stopping.
///
/// Per-example gradients may be computed in parallel but are summed in
/// example order, so results do not depend on the thread count.
pub fn train(
    mut model: NsmModel,
    train_set: &[Example],
    valid_set: &[Example],
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(TrainError::Config(
            "training and validation sets must be non-empty".into(),
        ));
    }
    if let Some(ex) = train_set.iter().find(|e| e.target.is_none()) {
        return Err(TrainError::Config(format!(
            "training answer `{}` (question {}) is outside the answer vocabulary",
            ex.answer, ex.id
        )));
    }
    let mut adam = Adam::new(model.params());
    let mut ema = Ema::new(model.params(), config.ema_decay);
    let mut history = MetricsLog::default();
    let mut best: Option<(usize, f64, ParamSet, ParamSet)> = None;
    let mut since_best = 0;
    let mut step = 0usize;
    let mut epochs_run = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..config.max_epochs {
        epochs_run = epoch + 1;
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(
            config.seed,
            DOMAIN_SHUFFLE,
            epoch as u64,
        )));
        let (mut loss_sum, mut correct, mut norm_sum, mut batches) = (0.0, 0usize, 0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| {
                    let ex = &train_set[i];
                    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(
                        config.seed ^ (step as u64).rotate_left(32),
                        DOMAIN_DROPOUT,
                        i as u64,
                    ));
                    let target = ex.target.expect("checked above");
                    model.loss_and_grads(model.params(), &ex.input, target, Some(&mut rng))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let losses: Vec<f64> = results.iter().map(|r| r.0).collect();
            if losses.iter().any(|l| !l.is_finite()) {
                let diagnostic = serde_json::json!({
                    "epoch": epoch,
                    "step": step,
                    "questions": batch.iter().map(|&i| train_set[i].id).collect::<Vec<_>>(),
                    "losses": losses.iter().map(|l| l.to_string()).collect::<Vec<_>>(),
                });
                return Err(TrainError::NonFinite {
                    step,
                    diagnostic: diagnostic.to_string(),
                });
            }
            let scale = 1.0 / batch.len() as f64;
            let mut grads: Vec<Tensor> = model.params().zeros_like().tensors().to_vec();
            for (k, (loss, probs, g)) in results.into_iter().enumerate() {
                loss_sum += loss;
                correct +=
                    usize::from(argmax(&probs) == train_set[batch[k]].target.expect("checked"));
                for (acc, gi) in grads.iter_mut().zip(g) {
                    for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                        *a += scale * b;
                    }
                }
            }
            norm_sum += clip_global_norm(&mut grads, config.grad_clip_norm);
            adam.step(model.params_mut(), &grads, config.learning_rate);
            ema.update(model.params());
            step += 1;
            batches += 1;
        }
        let n = train_set.len() as f64;
        history.push(step, "train", "loss", loss_sum / n);
        history.push(step, "train", "accuracy", correct as f64 / n);
        history.push(step, "train", "grad_norm", norm_sum / batches as f64);
        let valid = evaluate(&model, &ema.shadow, valid_set)?;
        history.push(step, "valid", "accuracy", valid.accuracy());
        let improved = best.as_ref().is_none_or(|b| valid.accuracy() > b.1);
        if improved {
            best = Some((
                epoch,
                valid.accuracy(),
                model.params().clone(),
                ema.shadow.clone(),
            ));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.early_stop_patience {
                break;
            }
        }
    }
    let (best_epoch, best_acc, raw, shadow) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model_config: model.config().clone(),
            train_config: config.clone(),
            raw,
            ema: shadow,
        },
        history,
        best_epoch,
        best_valid_accuracy: best_acc,
        epochs_run,
        optimizer_steps: step,
    })
}
