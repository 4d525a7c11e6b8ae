//! Plain SGD-with-momentum training for the toy model.
//!
//! Per-sample gradients inside a batch may be computed on parallel workers,
//! but they are always reduced in sample-index order, so the result is
//! independent of worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{shuffled_indices, stream_rng, streams};
use crate::scalar::Scalar;
use crate::tensor::Tape;

use super::dataset::VqaSample;
use super::tokenizer::tokenize;
use super::ToyMllm;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Per-epoch multiplicative learning-rate factor; 1.0 keeps `lr` flat.
    /// A mild decay settles the late epochs after the hot phase has pulled
    /// answers onto the image.
    pub lr_decay: f64,
    pub momentum: f64,
    /// Decoupled weight decay. Besides the usual regularization, this keeps
    /// attention logits from growing without bound, which would starve the
    /// image prefix of attention mass early in training and permanently cut
    /// the gradient path from pixels to answers.
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            lr: 0.05,
            lr_decay: 0.95,
            momentum: 0.9,
            weight_decay: 0.002,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    /// Mean teacher-forced loss per epoch.
    pub epoch_mean_loss: Vec<f64>,
    /// Total optimizer steps taken.
    pub steps: usize,
}

/// Trains in place. Epoch orderings come from the train-shuffle stream of
/// `seed`; batches chunk each epoch's permutation, so every sample is
/// visited once per epoch. A non-finite batch loss aborts with a typed
/// error carrying the step index. Zero epochs is a no-op by construction.
pub fn train_toy<S: Scalar>(
    model: &mut ToyMllm<S>,
    samples: &[VqaSample<S>],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainLog> {
    if cfg.epochs == 0 {
        return Ok(TrainLog::default());
    }
    if samples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::shape("train", "batch_size must be positive".to_string()));
    }
    let mut shuffle_rng = stream_rng(seed, streams::TRAIN_SHUFFLE);
    let n_params = model.param_tensors().len();
    let mut velocity: Vec<Vec<S>> = model
        .param_tensors()
        .iter()
        .map(|t| vec![S::zero(); t.numel()])
        .collect();
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let epoch_lr = cfg.lr * cfg.lr_decay.powi(epoch as i32);
        let order = shuffled_indices(&mut shuffle_rng, samples.len());
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            // Forward/backward per sample; losses and gradients land in
            // batch order regardless of scheduling.
            let per_sample: Vec<(f64, Vec<Option<Vec<S>>>)> = batch
                .par_iter()
                .map(|&i| -> Result<(f64, Vec<Option<Vec<S>>>)> {
                    let s = &samples[i];
                    let mut tape = Tape::new();
                    let nodes = model.register(&mut tape, true);
                    let img = tape.constant(&s.image);
                    let loss =
                        model.loss_on_tape(&mut tape, &nodes, img, &s.question, &tokenize(&s.answer))?;
                    let value = tape.scalar(loss)?.as_f64();
                    let grads = tape.backward(loss)?;
                    Ok((
                        value,
                        nodes.iter().map(|id| grads.get(*id).map(<[S]>::to_vec)).collect(),
                    ))
                })
                .collect::<Result<_>>()?;

            let inv_b = S::of_f64(1.0 / batch.len() as f64);
            let mut batch_loss = 0.0;
            let mut grad_mean: Vec<Vec<S>> = model
                .param_tensors()
                .iter()
                .map(|t| vec![S::zero(); t.numel()])
                .collect();
            for (value, grads) in &per_sample {
                batch_loss += value / batch.len() as f64;
                for (p, g) in grads.iter().enumerate() {
                    if let Some(g) = g {
                        for (slot, v) in grad_mean[p].iter_mut().zip(g) {
                            *slot += *v * inv_b;
                        }
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged { step: log.steps });
            }

            let mu = S::of_f64(cfg.momentum);
            let lr = S::of_f64(epoch_lr);
            let shrink = S::of_f64(1.0 - epoch_lr * cfg.weight_decay);
            let params = model.param_tensors_mut();
            for p in 0..n_params {
                let v = &mut velocity[p];
                // Matrices decay; biases and norm gains do not (decaying a
                // norm gain drags it toward zero output, not toward "small
                // weights").
                let decays = params[p].shape().len() >= 2;
                let data = params[p].data_mut();
                for j in 0..data.len() {
                    v[j] = mu * v[j] + grad_mean[p][j];
                    data[j] = if decays { shrink * data[j] } else { data[j] } - lr * v[j];
                }
            }
            epoch_loss += batch_loss;
            epoch_batches += 1;
            log.steps += 1;
        }
        log.epoch_mean_loss.push(epoch_loss / epoch_batches as f64);
    }
    Ok(log)
}

/// Fraction of samples whose greedy decode exactly matches the reference
/// answer (whitespace-trimmed byte equality).
pub fn greedy_exact_match_rate<S: Scalar>(
    model: &ToyMllm<S>,
    samples: &[VqaSample<S>],
    max_len: usize,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let hits: Vec<bool> = samples
        .par_iter()
        .map(|s| -> Result<bool> {
            let out = model.greedy_decode(&s.image, &s.question, max_len)?;
            Ok(crate::metrics::exact_match(&out, &s.answer))
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::dataset::Scene;
    use crate::model::ModelConfig;
    use crate::tensor::Tensor;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            image_hw: 16,
            dim: 16,
            blocks: 1,
            heads: 2,
            ffn: 32,
            text_ctx: 24,
        }
    }

    fn toy_samples() -> Vec<VqaSample<f32>> {
        let mk = |id: u64, v: f32, q: &[u8], a: &[u8]| VqaSample {
            id,
            image: Tensor::full(vec![16, 16, 3], v),
            question: q.to_vec(),
            answer: a.to_vec(),
            scene: Scene { shapes: vec![] },
        };
        vec![
            mk(0, 0.9, b"bright?", b"yes"),
            mk(1, 0.1, b"bright?", b"no"),
        ]
    }

    #[test]
    fn zero_epochs_leaves_parameters_bit_identical() {
        let mut m = ToyMllm::<f32>::new(tiny_cfg(), 4).unwrap();
        let before: Vec<Tensor<f32>> = m.param_tensors().to_vec();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let log = train_toy(&mut m, &toy_samples(), &cfg, 9).unwrap();
        assert_eq!(log.steps, 0);
        for (a, b) in before.iter().zip(m.param_tensors()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn loss_decreases_when_overfitting_two_samples() {
        let mut m = ToyMllm::<f32>::new(tiny_cfg(), 4).unwrap();
        let cfg = TrainConfig {
            epochs: 60,
            batch_size: 2,
            lr: 0.3,
            lr_decay: 1.0,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let log = train_toy(&mut m, &toy_samples(), &cfg, 9).unwrap();
        let first = log.epoch_mean_loss[0];
        let last = *log.epoch_mean_loss.last().unwrap();
        assert!(
            last < first * 0.2,
            "expected strong overfit, got {first} → {last}"
        );
    }

    #[test]
    fn training_is_deterministic_for_a_fixed_seed() {
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 2,
            lr: 0.2,
            lr_decay: 1.0,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut a = ToyMllm::<f32>::new(tiny_cfg(), 4).unwrap();
        let mut b = ToyMllm::<f32>::new(tiny_cfg(), 4).unwrap();
        let la = train_toy(&mut a, &toy_samples(), &cfg, 9).unwrap();
        let lb = train_toy(&mut b, &toy_samples(), &cfg, 9).unwrap();
        assert_eq!(la.epoch_mean_loss, lb.epoch_mean_loss);
        for (x, y) in a.param_tensors().iter().zip(b.param_tensors()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn divergence_reports_the_failing_step() {
        let mut m = ToyMllm::<f32>::new(tiny_cfg(), 4).unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 2,
            lr: 1e14,
            lr_decay: 1.0,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        match train_toy(&mut m, &toy_samples(), &cfg, 9) {
            Err(Error::Diverged { step }) => assert!(step >= 1, "first step still has finite loss"),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn empty_training_set_is_rejected_when_steps_are_requested() {
        let mut m = ToyMllm::<f32>::new(tiny_cfg(), 4).unwrap();
        let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
        assert!(matches!(
            train_toy(&mut m, &[], &cfg, 0),
            Err(Error::Empty("training set"))
        ));
    }
}
