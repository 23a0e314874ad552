use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, SelectionMetric};
use crate::data::{Dataset, Observation};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_outputs, MetricsReport};
use crate::model::Model;
use crate::nn::{adam_step, AdamState};
use crate::parallel::Execution;

/// One line of the training log. Epoch 0 describes the initial model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean batch loss over the epoch; absent for epoch 0.
    pub train_loss: Option<f64>,
    pub val: Option<MetricsReport>,
    pub score: Option<f64>,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch {:>3}", self.epoch)?;
        match self.train_loss {
            Some(l) => write!(f, "  train_loss {l:.6}")?,
            None => write!(f, "  train_loss -")?,
        }
        if let Some(v) = &self.val {
            write!(f, "  val_acc {:.4}  val_f1 {:.4}", v.accuracy, v.macro_f1)?;
            if let (Some(a), Some(p)) = (v.auroc, v.auprc) {
                write!(f, "  val_auroc {a:.4}  val_auprc {p:.4}")?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best model by the selection metric, rounded to storage precision so
    /// that saving and reloading it changes nothing.
    pub best: Model,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

pub fn evaluate(model: &Model, data: &Dataset, exec: Execution) -> Result<MetricsReport> {
    model.config.check_meta(&data.meta)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let outputs = model.predict_all(&data.observations, exec)?;
    let labels: Vec<usize> = data.observations.iter().map(|o| o.label).collect();
    evaluate_outputs(&outputs, &labels, model.config.n_classes)
}

fn selection_score(report: &MetricsReport, metric: SelectionMetric, n_classes: usize) -> f64 {
    match (metric, report.auroc) {
        (SelectionMetric::Accuracy, _) => report.accuracy,
        (SelectionMetric::Auto, Some(a)) if n_classes == 2 => a,
        (SelectionMetric::Auroc, Some(a)) => a,
        // AUROC undefined on a one-class split
        _ => report.accuracy,
    }
}

/// Trains from a fresh initialization. `on_epoch` sees each log line as
/// soon as it is produced.
pub fn train(
    cfg: &RunConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if val_set.meta.n_variates != train_set.meta.n_variates
        || val_set.meta.static_dim != train_set.meta.static_dim
    {
        return Err(Error::DatasetMismatch(
            "training and validation shapes differ".into(),
        ));
    }
    let mut meta = train_set.meta;
    meta.n_classes = meta.n_classes.max(val_set.meta.n_classes);
    let val_set = Dataset {
        observations: val_set.observations.clone(),
        meta,
    };
    let t = &cfg.training;
    let exec = t.execution;
    let mut model = Model::new(cfg.model_config(&meta), t.seed)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(t.seed);
    shuffle_rng.set_stream(1);
    let mut state = AdamState::new(&model.params);

    let validate = |m: &Model| -> Result<(Option<MetricsReport>, Option<f64>)> {
        if val_set.is_empty() {
            return Ok((None, None));
        }
        let report = evaluate(m, &val_set, exec)?;
        let score = selection_score(&report, t.selection, meta.n_classes);
        Ok((Some(report), Some(score)))
    };

    let (val, score) = validate(&model)?;
    let first = EpochLog {
        epoch: 0,
        train_loss: None,
        val,
        score,
    };
    on_epoch(&first);
    let mut best = (model.params.round_to_f32(), 0, score);
    let mut log = vec![first];

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=t.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(t.batch_size) {
            let batch: Vec<&Observation> =
                chunk.iter().map(|&i| &train_set.observations[i]).collect();
            let (loss, grads) = model.batch_loss_and_grad(&batch, exec)?;
            if let Some(name) = grads.first_non_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of `{name}` at epoch {epoch}, batch {batches}"
                )));
            }
            adam_step(&mut model.params, &grads, &mut state, &t.adam)?;
            loss_sum += loss;
            batches += 1;
        }
        let (val, score) = validate(&model)?;
        let entry = EpochLog {
            epoch,
            train_loss: Some(loss_sum / batches as f64),
            val,
            score,
        };
        on_epoch(&entry);
        // without validation data the last epoch is kept
        let improved = match (score, best.2) {
            (Some(s), Some(b)) => s > b,
            _ => true,
        };
        if improved {
            best = (model.params.round_to_f32(), epoch, score);
        }
        log.push(entry);
    }
    Ok(TrainOutcome {
        best: Model {
            config: model.config,
            params: best.0,
        },
        best_epoch: best.1,
        log,
    })
}
