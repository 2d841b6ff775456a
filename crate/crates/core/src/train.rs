//! Training loop (batch size 1 with virtual-batch gradient accumulation,
//! Adam, early stopping on validation loss) and the evaluation path shared
//! by training-time metrics and checkpoint evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::model::Model;
use crate::optim::{adam_step, AdamState, ParamStore};
use crate::ranking::{kendall_tau, mae, mse_loss, EvalPair, RankingError, TiePolicy};
use crate::seq_encoder::{ModelError, SetSequence};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch} on sample '{entity_id}'")]
    NonFinite { epoch: usize, entity_id: String },
    #[error("no training samples")]
    NoTrainSamples,
    #[error("early stopping needs a non-empty validation set")]
    NoValSamples,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Ranking(#[from] RankingError),
}

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Samples accumulated per optimizer step (Eq-style 1/K averaging; the
    /// final partial batch averages over its actual size).
    pub virtual_batch: usize,
    pub max_epochs: usize,
    /// Consecutive epochs without validation improvement before stopping.
    pub patience: usize,
    /// Optimizer steps over which the learning rate ramps linearly from 0
    /// to `lr`. Post-norm Transformer blocks are unstable without it.
    pub warmup_steps: usize,
    /// Seed for the per-epoch sample order.
    pub shuffle_seed: u64,
    pub tie_policy: TiePolicy,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            virtual_batch: 8,
            max_epochs: 30,
            patience: 5,
            warmup_steps: 100,
            shuffle_seed: 0,
            tie_policy: TiePolicy::SkipTies,
        }
    }
}

/// Post-epoch metrics, all computed with the epoch's frozen parameters.
#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_tau: f64,
    pub val_mae: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Aggregate metrics over a set of evaluation pairs: MSE on raw
/// predictions, tau and MAE on predictions clamped into [0, 1].
#[derive(Debug, Clone, Serialize)]
pub struct EvalMetrics {
    pub mse: f64,
    pub tau: f64,
    pub mae: f64,
    pub k: usize,
}

/// Predictions for every sample, batch size 1. `threads > 1` fans samples
/// out across scoped worker threads against the read-only model; results
/// are written by index, so the output is identical for any thread count.
pub fn predict_all(model: &Model, samples: &[SetSequence], threads: usize) -> Result<Vec<f64>, ModelError> {
    let threads = threads.max(1).min(samples.len().max(1));
    if threads == 1 {
        return samples.iter().map(|s| model.predict(s)).collect();
    }
    let mut results: Vec<Result<f64, ModelError>> = Vec::with_capacity(samples.len());
    results.resize_with(samples.len(), || Ok(f64::NAN));
    let chunk = samples.len().div_ceil(threads);
    std::thread::scope(|scope| {
        for (slice_samples, slice_results) in samples.chunks(chunk).zip(results.chunks_mut(chunk)) {
            scope.spawn(move || {
                for (sample, out) in slice_samples.iter().zip(slice_results.iter_mut()) {
                    *out = model.predict(sample);
                }
            });
        }
    });
    results.into_iter().collect()
}

/// Evaluates a model over samples and folds the predictions into metrics.
pub fn evaluate(
    model: &Model,
    samples: &[SetSequence],
    tie_policy: TiePolicy,
    threads: usize,
) -> Result<(Vec<EvalPair>, EvalMetrics), TrainError> {
    let preds = predict_all(model, samples, threads)?;
    let pairs: Vec<EvalPair> = samples
        .iter()
        .zip(&preds)
        .map(|(s, &y_hat)| EvalPair {
            entity_id: s.entity_id.clone(),
            y: s.target,
            y_hat,
        })
        .collect();
    let metrics = eval_metrics(&pairs, tie_policy)?;
    Ok((pairs, metrics))
}

/// Metrics from prediction pairs. Predictions are clamped into [0, 1] for
/// tau and MAE (metric time only); the MSE is on raw predictions.
pub fn eval_metrics(pairs: &[EvalPair], tie_policy: TiePolicy) -> Result<EvalMetrics, RankingError> {
    let mse = mse_loss(pairs)?;
    let targets: Vec<f64> = pairs.iter().map(|p| p.y).collect();
    let clamped: Vec<f64> = pairs.iter().map(|p| p.y_hat.clamp(0.0, 1.0)).collect();
    let tau = kendall_tau(&targets, &clamped, tie_policy)?;
    let mae = mae(&targets, &clamped)?;
    Ok(EvalMetrics {
        mse,
        tau,
        mae,
        k: pairs.len(),
    })
}

/// Runs the full training protocol. On return the model holds the
/// best-validation parameters; the outcome lists one record per epoch run.
pub fn train(
    model: &mut Model,
    train_samples: &[SetSequence],
    val_samples: &[SetSequence],
    settings: &TrainSettings,
) -> Result<TrainOutcome, TrainError> {
    if train_samples.is_empty() {
        return Err(TrainError::NoTrainSamples);
    }
    if val_samples.is_empty() {
        return Err(TrainError::NoValSamples);
    }
    let mut adam = AdamState::with_hyperparams(
        &model.store,
        settings.lr,
        settings.beta1,
        settings.beta2,
        settings.eps,
    );
    let mut best_store: Option<ParamStore> = None;
    let mut best_epoch = 0;
    let mut best_val = f64::INFINITY;
    let mut since_improvement = 0;
    let mut epochs = Vec::new();

    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    for epoch in 0..settings.max_epochs {
        let epoch_seed = settings
            .shuffle_seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(epoch as u64);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));

        for chunk in order.chunks(settings.virtual_batch.max(1)) {
            if settings.warmup_steps > 0 {
                let step = adam.step_count + 1;
                let ramp = (step as f64 / settings.warmup_steps as f64).min(1.0);
                adam.lr = settings.lr * ramp;
            }
            let inv = 1.0 / chunk.len() as f64;
            for &idx in chunk {
                let sample = &train_samples[idx];
                let (mut g, pred) = model.forward_sample(sample)?;
                let target = g.constant(vec![1], vec![sample.target])?;
                let diff = g.sub(pred, target)?;
                let sq = g.mul(diff, diff)?;
                if !g.scalar_value(sq).is_finite() {
                    return Err(TrainError::NonFinite {
                        epoch,
                        entity_id: sample.entity_id.clone(),
                    });
                }
                let loss = g.scale(sq, inv);
                g.backward(loss)?;
                g.accumulate_param_grads(&mut model.store);
            }
            adam_step(&mut model.store, &mut adam)?;
        }

        let (_, train_metrics) = evaluate_loss_only(model, train_samples)?;
        let (_, val_metrics) = evaluate(model, val_samples, settings.tie_policy, 1)?;
        if !val_metrics.mse.is_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                entity_id: "<validation>".into(),
            });
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: train_metrics,
            val_loss: val_metrics.mse,
            val_tau: val_metrics.tau,
            val_mae: val_metrics.mae,
        });

        if val_metrics.mse < best_val {
            best_val = val_metrics.mse;
            best_epoch = epoch;
            best_store = Some(model.store.clone());
            since_improvement = 0;
        } else {
            since_improvement += 1;
            if since_improvement >= settings.patience {
                break;
            }
        }
    }

    if let Some(best) = best_store {
        model.store = best;
    }
    Ok(TrainOutcome {
        epochs,
        best_epoch,
        best_val_loss: best_val,
    })
}

fn evaluate_loss_only(model: &Model, samples: &[SetSequence]) -> Result<(Vec<f64>, f64), TrainError> {
    let preds = predict_all(model, samples, 1)?;
    let k = preds.len() as f64;
    let mse = samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| (s.target - p) * (s.target - p))
        .sum::<f64>()
        / k;
    Ok((preds, mse))
}
