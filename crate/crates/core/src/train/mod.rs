//! Desk-scale MLP trainer with hand-written backprop.

mod dataset;
mod loss;
mod metrics;
mod model;
mod optim;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use dataset::LabeledDataset;
pub use loss::{argmax, log_softmax, loss_and_grad, softmax, Loss};
pub use metrics::{
    accuracy_from_logits, evaluate, forgetting_abs, forgetting_soft_ce, predictions,
    soft_ce_from_logits, SoftCe,
};
pub use model::{
    Activation, ForwardCache, Layer, LayerWeight, Model, ModelSpec, TrainScope, TrainSummary,
};
pub use optim::{Optimizer, OptimizerKind};

use crate::adapter::{init_slice_adapter, SliceSpec};
use crate::error::{Error, Result};
use crate::io::write_csv;
use crate::rng::{permutation, purpose, stream};

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub loss: Loss,
    /// Whether biases of adapted layers train during fine-tuning.
    #[serde(default = "yes")]
    pub train_bias: bool,
    /// Evaluate every this many epochs (the last epoch is always evaluated).
    #[serde(default = "one")]
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if self.batch_size == 0 || self.batch_size > dataset_len {
            return Err(Error::config(
                "batch_size",
                format!("must be in [1, {dataset_len}], got {}", self.batch_size),
            ));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be positive"));
        }
        Ok(())
    }
}

/// One row of the metric trace CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    write_csv(path, trace)
}

/// Outcome of [`train`]. On divergence `model` holds the parameters at the end
/// of the last finite epoch.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: Model,
    pub trace: Vec<TraceRow>,
    /// `(epoch, batch)` of the first non-finite loss.
    pub diverged: Option<(usize, usize)>,
}

fn check_data(model: &Model, data: &LabeledDataset) -> Result<()> {
    if data.dim() != model.input_dim() || data.logit_end() > model.output_dim() {
        return Err(Error::ShapeMismatch {
            op: "train",
            left: (data.dim(), data.logit_end()),
            right: (model.input_dim(), model.output_dim()),
        });
    }
    Ok(())
}

/// Mini-batch training of the parameters in `scope`.
///
/// Each epoch visits `data` in the order given by the stream
/// `(cfg.seed, SHUFFLE, epoch)`. After every `eval_every` epochs the trace
/// gets a `train` row (running mean loss, accuracy after the epoch) and one
/// row per named evaluation set.
pub fn train(
    mut model: Model,
    data: &LabeledDataset,
    evals: &[(&str, &LabeledDataset)],
    cfg: &TrainConfig,
    scope: TrainScope,
) -> Result<TrainRun> {
    cfg.validate(data.len())?;
    check_data(&model, data)?;
    for (_, e) in evals {
        check_data(&model, e)?;
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut trace = Vec::new();
    let mut last_good = model.clone();
    let n = data.len();
    for epoch in 0..cfg.epochs {
        let order = permutation(&mut stream(cfg.seed, purpose::SHUFFLE, epoch as u64), n);
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = data.subset(idx);
            let cache = model.forward_cached(&batch.x)?;
            let (loss, dlogits) =
                loss_and_grad(cache.logits(), &batch.y, data.logit_offset, data.classes, cfg.loss);
            if !loss.is_finite() {
                log::warn!("non-finite loss at epoch {epoch}, batch {b}");
                return Ok(TrainRun {
                    model: last_good,
                    trace,
                    diverged: Some((epoch, b)),
                });
            }
            loss_sum += loss * idx.len() as f64;
            let grads = model.gradients(&cache, &dlogits, scope)?;
            opt.step(model.params_mut(scope), &grads);
        }
        if !model.params_finite(scope) {
            let batches = n.div_ceil(cfg.batch_size);
            log::warn!("parameters became non-finite in epoch {epoch}");
            return Ok(TrainRun {
                model: last_good,
                trace,
                diverged: Some((epoch, batches - 1)),
            });
        }
        if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs {
            trace.push(TraceRow {
                epoch: epoch + 1,
                split: "train".into(),
                loss: loss_sum / n as f64,
                accuracy: evaluate(&model, data)?,
            });
            for (name, e) in evals {
                let logits = model.forward(&e.x)?;
                let (loss, _) = loss_and_grad(&logits, &e.y, e.logit_offset, e.classes, cfg.loss);
                trace.push(TraceRow {
                    epoch: epoch + 1,
                    split: (*name).to_string(),
                    loss,
                    accuracy: accuracy_from_logits(&logits, e),
                });
            }
        }
        last_good.clone_from(&model);
    }
    Ok(TrainRun {
        model,
        trace,
        diverged: None,
    })
}

/// Full-parameter training from a fresh initialization seeded by `cfg.seed`.
pub fn pretrain(
    spec: &ModelSpec,
    data: &LabeledDataset,
    val: Option<&LabeledDataset>,
    cfg: &TrainConfig,
) -> Result<Model> {
    let model = Model::init(spec, cfg.seed)?;
    let evals: Vec<(&str, &LabeledDataset)> = val.map(|v| ("val", v)).into_iter().collect();
    let run = train(model, data, &evals, cfg, TrainScope::Full)?;
    if let Some((epoch, batch)) = run.diverged {
        return Err(Error::NonFiniteLoss { epoch, batch });
    }
    let mut model = run.model;
    model.summary = Some(TrainSummary {
        epochs: cfg.epochs,
        train_accuracy: evaluate(&model, data)?,
        val_accuracy: val.map(|v| evaluate(&model, v)).transpose()?,
    });
    Ok(model)
}

/// Replaces every layer in `model.spec.adapted_layers` by a slice adapter of
/// its current effective weight.
pub fn attach_adapters(mut model: Model, spec: SliceSpec) -> Result<Model> {
    let adapted: Vec<usize> = model.spec.adapted_layers.iter().copied().collect();
    for l in adapted {
        let w = model.layers[l].effective_weight();
        model.layers[l].weight = LayerWeight::Adapted(init_slice_adapter(&w, spec)?);
    }
    Ok(model)
}

/// Fine-tunes only the adapter factors (and adapted-layer biases if
/// `cfg.train_bias`). Divergence is reported in the returned run, not as an
/// error.
pub fn finetune(
    model: Model,
    data: &LabeledDataset,
    evals: &[(&str, &LabeledDataset)],
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    let scope = TrainScope::Adapters {
        train_bias: cfg.train_bias,
    };
    train(model, data, evals, cfg, scope)
}

/// A fine-tuned model and its metric trace.
#[derive(Debug, Clone)]
pub struct FineTuned {
    pub model: Model,
    pub trace: Vec<TraceRow>,
}

pub fn attach_and_finetune(
    model: Model,
    spec: SliceSpec,
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<FineTuned> {
    let model = attach_adapters(model, spec)?;
    let run = finetune(model, data, &[], cfg)?;
    if let Some((epoch, batch)) = run.diverged {
        return Err(Error::NonFiniteLoss { epoch, batch });
    }
    Ok(FineTuned {
        model: run.model,
        trace: run.trace,
    })
}
