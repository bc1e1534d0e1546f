//! Pairwise training, optimizer, gradient checking and checkpoints.

mod adam;
mod checkpoint;
mod gradcheck;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{config_hash, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use gradcheck::{compare_gradients, gradient_check, probe_model, ComponentReport, GradCheckConfig, GradCheckReport};

use crate::error::{Result, TklError};
use crate::eval::{ndcg_at, rerank, MetricConfig, Qrels, RunFile};
use crate::model::{Model, ModelParameters, ParamGroup};
use crate::text::{DocumentStore, QueryStore, Triple};

/// Hinge loss `max(0, margin - pos + neg)`. NaN scores give NaN.
pub fn pairwise_loss(score_pos: f64, score_neg: f64, margin: f64) -> f64 {
    let x = margin - score_pos + score_neg;
    if x > 0.0 || x.is_nan() {
        x
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Learning rate of embeddings and salience.
    pub lr_representation: f64,
    /// Learning rate of every other parameter.
    pub lr_other: f64,
    pub margin: f64,
    pub epochs: usize,
    /// Validate every this many steps; 0 validates only at epoch ends.
    pub validate_every: usize,
    /// Validations without improvement before stopping; 0 disables.
    pub patience: usize,
    /// Overrides the model's document truncation during training.
    pub max_doc_len: Option<usize>,
    /// Stops after this many optimizer steps.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr_representation: 1e-4,
            lr_other: 1e-3,
            margin: 1.0,
            epochs: 1,
            validate_every: 0,
            patience: 0,
            max_doc_len: None,
            max_steps: None,
            seed: 42,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TklError::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr_representation >= 0.0 && self.lr_other >= 0.0) {
            return Err(TklError::Config("learning rates must be non-negative".into()));
        }
        if !self.margin.is_finite() {
            return Err(TklError::Config("margin must be finite".into()));
        }
        Ok(())
    }

    pub fn learning_rate(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Representation => self.lr_representation,
            ParamGroup::Other => self.lr_other,
        }
    }
}

/// Held-out candidates used for early stopping.
#[derive(Debug, Clone, Copy)]
pub struct Validation<'a> {
    pub run: &'a RunFile,
    pub qrels: &'a Qrels,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainingData<'a> {
    pub queries: &'a QueryStore,
    pub docs: &'a DocumentStore,
    pub triples: &'a [Triple],
    pub validation: Option<Validation<'a>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationLog {
    pub epoch: usize,
    pub step: usize,
    pub ndcg_10: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub validations: Vec<ValidationLog>,
    /// The validation point whose parameters were returned.
    pub best: Option<ValidationLog>,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty() && self.validations.is_empty()
    }
}

/// Mean hinge loss of a batch and its gradient accumulated into `grads`.
pub fn batch_gradient(
    model: &Model,
    data: &TrainingData<'_>,
    batch: &[&Triple],
    margin: f64,
    max_doc_len: usize,
    grads: &mut ModelParameters,
) -> f64 {
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for triple in batch {
        let q_ids = &data.queries.get(&triple.qid).expect("checked").tokens;
        let pos_ids = &data.docs.get(&triple.positive).expect("checked").tokens;
        let neg_ids = &data.docs.get(&triple.negative).expect("checked").tokens;
        let (q, q_cache) = model.forward_query(q_ids);
        let (pos, pos_cache) = model.forward_document(pos_ids, max_doc_len);
        let (neg, neg_cache) = model.forward_document(neg_ids, max_doc_len);
        let (pos_scored, pos_head) = model.head_forward(&q, &pos);
        let (neg_scored, neg_head) = model.head_forward(&q, &neg);
        let loss = pairwise_loss(pos_scored.score, neg_scored.score, margin);
        total += loss;
        if loss.is_nan() || loss <= 0.0 {
            continue;
        }
        let (dq_pos, d_pos) = model.head_backward(&q, &pos_head, &pos_scored, -scale, grads);
        let (dq_neg, d_neg) = model.head_backward(&q, &neg_head, &neg_scored, scale, grads);
        model.encoder_backward(&pos, &pos_cache, d_pos, grads);
        model.encoder_backward(&neg, &neg_cache, d_neg, grads);
        model.encoder_backward(&q, &q_cache, dq_pos + dq_neg, grads);
    }
    total * scale
}

fn check_ids(data: &TrainingData<'_>) -> Result<()> {
    let mut missing = std::collections::BTreeSet::new();
    for t in data.triples {
        if !data.queries.contains(&t.qid) {
            missing.insert(format!("query:{}", t.qid));
        }
        for d in [&t.positive, &t.negative] {
            if !data.docs.contains(d) {
                missing.insert(format!("doc:{d}"));
            }
        }
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(TklError::UnknownId(missing.into_iter().collect::<Vec<_>>().join(", ")))
    }
}

/// nDCG@10 of the model on a validation set.
pub fn validate(model: &Model, data: &TrainingData<'_>, validation: &Validation<'_>, max_doc_len: usize) -> Result<f64> {
    let (run, _) = rerank(model, validation.run, data.queries, data.docs, max_doc_len)?;
    Ok(ndcg_at(&run, validation.qrels, 10, &MetricConfig::default()).mean)
}

/// Trains `model` on the triples and returns the parameters of the best
/// validation point (or the final parameters when there is no validation
/// set) together with the log. Checkpoints go to `checkpoint_dir` as
/// `last.ckpt` and `best.ckpt` when given.
pub fn train(
    mut model: Model,
    data: &TrainingData<'_>,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    let mut log = TrainLog::default();
    if cfg.epochs == 0 || cfg.max_steps == Some(0) {
        return Ok((model, log));
    }
    if data.triples.is_empty() {
        return Err(TklError::Empty("no training triples".into()));
    }
    check_ids(data)?;
    let max_doc_len = cfg.max_doc_len.unwrap_or(model.config.max_doc_len);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model.params, cfg.adam);
    let mut grads = model.params.zeros_like();
    let mut order: Vec<usize> = (0..data.triples.len()).collect();
    let mut best: Option<(f64, Model)> = None;
    let mut stale = 0usize;
    let mut step = 0usize;

    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| TklError::io(dir, e))?;
    }
    let checkpoint = |model: &Model, name: &str| -> Result<()> {
        if let Some(dir) = checkpoint_dir {
            save_checkpoint(model, dir.join(name))?;
        }
        Ok(())
    };

    let run_validation = |model: &Model,
                              epoch: usize,
                              step: usize,
                              log: &mut TrainLog,
                              best: &mut Option<(f64, Model)>,
                              stale: &mut usize|
     -> Result<()> {
        let Some(validation) = &data.validation else { return Ok(()) };
        let ndcg = validate(model, data, validation, max_doc_len)?;
        log::info!("epoch {epoch} step {step}: validation nDCG@10 {ndcg:.4}");
        let record = ValidationLog { epoch, step, ndcg_10: ndcg };
        log.validations.push(record.clone());
        checkpoint(model, "last.ckpt")?;
        if best.as_ref().is_none_or(|(b, _)| ndcg > *b) {
            *best = Some((ndcg, model.clone()));
            log.best = Some(record);
            *stale = 0;
            checkpoint(model, "best.ckpt")?;
        } else {
            *stale += 1;
        }
        Ok(())
    };

    run_validation(&model, 0, 0, &mut log, &mut best, &mut stale)?;
    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut validated_at_end = false;
        for (batch_index, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Triple> = chunk.iter().map(|&i| &data.triples[i]).collect();
            grads.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
            let loss = batch_gradient(&model, data, &batch, cfg.margin, max_doc_len, &mut grads);
            step += 1;
            if !loss.is_finite() || !grads.all_finite() {
                let ids: Vec<String> = batch
                    .iter()
                    .map(|t| format!("{}/{}/{}", t.qid, t.positive, t.negative))
                    .collect();
                return Err(TklError::NonFiniteLoss {
                    step,
                    batch: batch_index,
                    triples: ids.join(" "),
                });
            }
            adam.step(&mut model.params, &grads, |g| cfg.learning_rate(g));
            log::debug!("epoch {epoch} step {step}: loss {loss:.5}");
            log.steps.push(StepLog { epoch, step, loss });
            validated_at_end = false;
            if cfg.validate_every > 0 && step.is_multiple_of(cfg.validate_every) {
                run_validation(&model, epoch, step, &mut log, &mut best, &mut stale)?;
                validated_at_end = true;
                if cfg.patience > 0 && stale >= cfg.patience {
                    log.stopped_early = true;
                    break 'epochs;
                }
            }
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break;
            }
        }
        if !validated_at_end {
            run_validation(&model, epoch, step, &mut log, &mut best, &mut stale)?;
            if cfg.patience > 0 && stale >= cfg.patience {
                log.stopped_early = true;
                break;
            }
        }
        if cfg.max_steps.is_some_and(|m| step >= m) {
            break;
        }
    }
    if data.validation.is_none() {
        checkpoint(&model, "last.ckpt")?;
        return Ok((model, log));
    }
    let (_, best_model) = best.expect("validated at least once");
    Ok((best_model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hinge_values() {
        assert_eq!(pairwise_loss(2.0, 0.5, 1.0), 0.0);
        assert_eq!(pairwise_loss(0.3, 0.3, 1.0), 1.0);
        assert!((pairwise_loss(0.2, 0.5, 1.0) - 1.3).abs() < 1e-12);
        assert!(pairwise_loss(f64::NAN, 0.5, 1.0).is_nan());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lr_other: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
