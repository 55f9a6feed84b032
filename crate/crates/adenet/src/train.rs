//! Mini-batch training loop with SGD-momentum/Adam, optional class
//! weighting, early stopping on validation loss, and per-epoch history.

#![allow(clippy::needless_range_loop)]

use crate::metrics::{self, MetricsReport};
use crate::model::{flatten_grads, Layer, ModelGraph, Mode, BN_MOMENTUM};
use crate::nn::{self, NnError};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptySet,
    #[error("numeric abort at epoch {epoch}, batch {batch}: {detail}")]
    NumericAbort {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Adam {
        lr: f32,
        beta1: f32,
        beta2: f32,
        eps: f32,
    },
    SgdMomentum {
        lr: f32,
        momentum: f32,
    },
}

impl OptimizerKind {
    pub fn adam(lr: f32) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::adam(1e-3)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub enabled: bool,
    pub patience: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub early_stopping: EarlyStopping,
    /// Balanced per-class weights computed from the training labels.
    pub class_weights: bool,
    pub seed: u64,
    /// Zeroes wall-clock fields so History is bit-reproducible.
    pub deterministic: bool,
    /// Stop as soon as an epoch's training accuracy reaches this value
    /// (overfit-sanity runs); None trains for the full epoch budget.
    pub stop_at_train_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            optimizer: OptimizerKind::default(),
            early_stopping: EarlyStopping {
                enabled: false,
                patience: 3,
            },
            class_weights: false,
            seed: 0,
            deterministic: false,
            stop_at_train_accuracy: None,
        }
    }
}

/// One (1, c, h, w) input with its label.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub x: Tensor<f32>,
    pub label: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct EpochStats {
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub val_macro_f1: f64,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochStats>,
    pub stopped_early: bool,
    /// 1-based epoch whose weights the model ended up with, when early
    /// stopping restored them.
    pub restored_epoch: Option<usize>,
}

/// Per-parameter optimizer slots, mirroring `trainable_params_mut` order.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    pub momentum: Vec<Vec<f32>>,
    pub second: Vec<Vec<f32>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn for_model(model: &mut ModelGraph) -> Self {
        let shapes: Vec<usize> = model.trainable_params_mut().iter().map(|p| p.len()).collect();
        OptimizerState {
            momentum: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

/// v <- momentum * v + grad; param <- param - lr * v
pub fn sgd_step(param: &mut [f32], grad: &[f32], velocity: &mut [f32], lr: f32, momentum: f32) {
    for i in 0..param.len() {
        velocity[i] = momentum * velocity[i] + grad[i];
        param[i] -= lr * velocity[i];
    }
}

/// Standard bias-corrected Adam update; `t` is the 1-based step counter.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    t: u64,
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
) {
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..param.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
}

pub enum StopDecision {
    Continue,
    /// 1-based epoch to restore (argmin of the monitored value, earliest on
    /// ties).
    Stop { restore_epoch: usize },
}

/// Stop once the monitored value has not improved for `patience` consecutive
/// epochs (patience 0 stops at the first non-improving epoch).
pub fn early_stopping_check(monitored: &[f64], patience: usize) -> StopDecision {
    assert!(!monitored.is_empty(), "history must be non-empty");
    let mut best = monitored[0];
    let mut best_epoch = 1usize;
    let mut streak = 0usize;
    for (i, &v) in monitored.iter().enumerate().skip(1) {
        if v < best {
            best = v;
            best_epoch = i + 1;
            streak = 0;
        } else {
            streak += 1;
            if streak >= patience.max(1) {
                return StopDecision::Stop {
                    restore_epoch: best_epoch,
                };
            }
        }
    }
    StopDecision::Continue
}

/// Zero-pad (bottom-right) a set of samples into one batch tensor whose
/// spatial dims are the per-batch maxima rounded up to a multiple of 8.
pub fn collate(samples: &[&TrainSample]) -> (Tensor<f32>, Vec<usize>) {
    let c = samples[0].x.c;
    let hmax = samples.iter().map(|s| s.x.h).max().unwrap().div_ceil(8) * 8;
    let wmax = samples.iter().map(|s| s.x.w).max().unwrap().div_ceil(8) * 8;
    let mut x = Tensor::zeros(samples.len(), c, hmax, wmax);
    for (n, s) in samples.iter().enumerate() {
        for ch in 0..c {
            for i in 0..s.x.h {
                for j in 0..s.x.w {
                    x.set(n, ch, i, j, s.x.at(0, ch, i, j));
                }
            }
        }
    }
    (x, samples.iter().map(|s| s.label).collect())
}

fn balanced_weights(samples: &[TrainSample]) -> [f32; 2] {
    let pos = samples.iter().filter(|s| s.label == 1).count() as f32;
    let neg = samples.len() as f32 - pos;
    let total = samples.len() as f32;
    [
        if neg > 0.0 { total / (2.0 * neg) } else { 0.0 },
        if pos > 0.0 { total / (2.0 * pos) } else { 0.0 },
    ]
}

/// Mean loss, metric report, and damaged-class scores over a sample set,
/// evaluated in infer mode.
pub fn evaluate(
    model: &ModelGraph,
    samples: &[TrainSample],
    batch_size: usize,
) -> Result<(f64, MetricsReport, Vec<f64>), TrainError> {
    let mut loss_sum = 0.0f64;
    let mut scores = Vec::with_capacity(samples.len());
    let mut predictions = Vec::with_capacity(samples.len());
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&TrainSample> = chunk.iter().collect();
        let (x, chunk_labels) = collate(&refs);
        let (probs, logits) = model.predict(&x)?;
        let out = nn::softmax_xent(&logits, &chunk_labels, None)?;
        loss_sum += out.loss as f64 * chunk.len() as f64;
        for r in 0..chunk.len() {
            let p1 = probs.data[2 * r + 1] as f64;
            scores.push(p1);
            predictions.push(usize::from(p1 >= 0.5));
        }
    }
    let confusion = metrics::confusion(&labels, &predictions)
        .map_err(|e| NnError::Other(e.to_string()))?;
    let mut report = metrics::metrics_from_confusion(&confusion)
        .map_err(|e| NnError::Other(e.to_string()))?;
    if let Ok((auc, _)) = metrics::roc_auc(&scores, &labels) {
        report.roc_auc = Some(auc);
    }
    Ok((loss_sum / samples.len() as f64, report, scores))
}

fn grad_norm_summary(grads: &[&Vec<f32>]) -> String {
    grads
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let n: f32 = g.iter().map(|v| v * v).sum::<f32>().sqrt();
            format!("slot{i}={n:.3e}")
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Train in place. Mini-batches are seeded-shuffled each epoch; a trailing
/// batch of size 1 is merged into the previous batch so batch norm always
/// sees at least two samples.
pub fn train(
    model: &mut ModelGraph,
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    config: &TrainConfig,
) -> Result<History, TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::EmptySet);
    }
    let mut history = History::default();
    if config.epochs == 0 {
        return Ok(history);
    }
    let class_weights = config.class_weights.then(|| balanced_weights(train_set));
    let mut state = OptimizerState::for_model(model);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best_snapshot: Option<(usize, ModelGraph)> = None;

    for epoch in 0..config.epochs {
        let t0 = std::time::Instant::now();
        model.set_mode(Mode::Train);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);

        let mut batches: Vec<Vec<usize>> =
            order.chunks(config.batch_size.max(1)).map(|c| c.to_vec()).collect();
        if batches.len() > 1 && batches.last().unwrap().len() == 1 {
            let last = batches.pop().unwrap();
            batches.last_mut().unwrap().extend(last);
        }

        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for (batch_no, batch_idx) in batches.iter().enumerate() {
            let refs: Vec<&TrainSample> = batch_idx.iter().map(|&i| &train_set[i]).collect();
            let (x, labels) = collate(&refs);
            let pass = model.forward(&x)?;
            let out = nn::softmax_xent(&pass.logits, &labels, class_weights.as_ref().map(|w| &w[..]))?;
            if !out.loss.is_finite() {
                return Err(TrainError::NumericAbort {
                    epoch: epoch + 1,
                    batch: batch_no + 1,
                    detail: format!("loss = {}", out.loss),
                });
            }
            loss_sum += out.loss as f64 * labels.len() as f64;
            for r in 0..labels.len() {
                let pred = usize::from(pass.probs.data[2 * r + 1] >= 0.5);
                correct += usize::from(pred == labels[r]);
            }
            let contexts = pass.contexts.expect("train mode returns contexts");
            let (_, grads) = model.backward(&contexts, &out.dlogits)?;
            let flat = flatten_grads(&grads);
            if flat.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(TrainError::NumericAbort {
                    epoch: epoch + 1,
                    batch: batch_no + 1,
                    detail: format!("non-finite gradient; norms: {}", grad_norm_summary(&flat)),
                });
            }
            state.step += 1;
            let step = state.step;
            let params = model.trainable_params_mut();
            debug_assert_eq!(params.len(), flat.len());
            for (slot, (param, grad)) in params.into_iter().zip(flat.iter()).enumerate() {
                match config.optimizer {
                    OptimizerKind::Adam {
                        lr,
                        beta1,
                        beta2,
                        eps,
                    } => adam_step(
                        param,
                        grad,
                        &mut state.momentum[slot],
                        &mut state.second[slot],
                        step,
                        lr,
                        beta1,
                        beta2,
                        eps,
                    ),
                    OptimizerKind::SgdMomentum { lr, momentum } => {
                        sgd_step(param, grad, &mut state.momentum[slot], lr, momentum)
                    }
                }
            }
        }
        if !model.all_params_finite() {
            return Err(TrainError::NumericAbort {
                epoch: epoch + 1,
                batch: batches.len(),
                detail: "non-finite parameter after optimizer step".into(),
            });
        }

        model.set_mode(Mode::Infer);
        let (val_loss, val_report) = if val_set.is_empty() {
            (f64::NAN, MetricsReport::default())
        } else {
            let (l, r, _) = evaluate(model, val_set, config.batch_size)?;
            (l, r)
        };
        history.epochs.push(EpochStats {
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            val_loss,
            val_accuracy: val_report.accuracy,
            val_macro_f1: val_report.macro_f1,
            wall_secs: if config.deterministic {
                0.0
            } else {
                t0.elapsed().as_secs_f64()
            },
        });

        if let Some(target) = config.stop_at_train_accuracy {
            if history.epochs.last().unwrap().train_accuracy >= target {
                break;
            }
        }

        if config.early_stopping.enabled && !val_set.is_empty() {
            let monitored: Vec<f64> = history.epochs.iter().map(|e| e.val_loss).collect();
            let best_epoch = (0..monitored.len())
                .min_by(|&a, &b| monitored[a].partial_cmp(&monitored[b]).unwrap())
                .unwrap()
                + 1;
            if best_snapshot.as_ref().map(|(e, _)| *e) != Some(best_epoch) {
                best_snapshot = Some((best_epoch, model.clone()));
            }
            if let StopDecision::Stop { restore_epoch } =
                early_stopping_check(&monitored, config.early_stopping.patience)
            {
                let (snap_epoch, snap) = best_snapshot.take().unwrap();
                debug_assert_eq!(snap_epoch, restore_epoch);
                *model = snap;
                history.stopped_early = true;
                history.restored_epoch = Some(restore_epoch);
                break;
            }
        }
    }

    // when early stopping is on but never triggered, still finish on the
    // best-epoch weights
    if config.early_stopping.enabled && !history.stopped_early {
        if let Some((epoch, snap)) = best_snapshot {
            let last = history.epochs.len();
            if epoch != last {
                *model = snap;
                history.restored_epoch = Some(epoch);
            }
        }
    }

    // One frozen-weight pass over the training set re-estimates the
    // batch-norm running statistics as a plain average of batch statistics.
    // The EMA tracked while the weights were still moving lags the final
    // model, which can leave inference-mode predictions far from the
    // train-mode behavior the optimizer actually saw.
    recalibrate_bn(model, train_set, config.batch_size)?;
    model.set_mode(Mode::Infer);
    Ok(history)
}

/// Re-estimate batch-norm running statistics under the current weights.
///
/// Runs the training set through the model in train mode with the momentum of
/// batch `k` set to `k/(k+1)`, which turns the EMA update into a cumulative
/// average of the per-batch statistics. Layer momenta are restored afterwards.
fn recalibrate_bn(
    model: &mut ModelGraph,
    train_set: &[TrainSample],
    batch_size: usize,
) -> Result<(), TrainError> {
    if !model
        .layers
        .iter()
        .any(|l| matches!(l, Layer::BatchNorm { .. }))
    {
        return Ok(());
    }
    model.set_mode(Mode::Train);
    let idx: Vec<usize> = (0..train_set.len()).collect();
    for (k, chunk) in idx.chunks(batch_size.max(1)).enumerate() {
        let m = k as f32 / (k as f32 + 1.0);
        for layer in model.layers.iter_mut() {
            if let Layer::BatchNorm { momentum, .. } = layer {
                *momentum = m;
            }
        }
        let refs: Vec<&TrainSample> = chunk.iter().map(|&i| &train_set[i]).collect();
        let (x, _) = collate(&refs);
        model.forward(&x)?;
    }
    for layer in model.layers.iter_mut() {
        if let Layer::BatchNorm { momentum, .. } = layer {
            *momentum = BN_MOMENTUM;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_adenet;
    use rand::Rng;

    fn separable_set(n: usize, seed: u64) -> Vec<TrainSample> {
        // class 1: bright center square; class 0: plain noise
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = i % 2;
                let mut x = Tensor::zeros(1, 3, 16, 16);
                for v in x.data.iter_mut() {
                    *v = rng.gen_range(0.0..0.3);
                }
                if label == 1 {
                    for c in 0..3 {
                        for i in 5..11 {
                            for j in 5..11 {
                                x.set(0, c, i, j, 0.9 + rng.gen_range(0.0..0.1));
                            }
                        }
                    }
                }
                TrainSample { x, label }
            })
            .collect()
    }

    #[test]
    fn recalibration_matches_full_batch_statistics() {
        // With batch_size >= n the recalibration pass sees the whole set as
        // one batch, so the stored running stats are exactly the full-set
        // batch stats and infer-mode logits match train-mode logits.
        let set = separable_set(8, 5);
        let mut model = build_adenet(3, true, 5);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            seed: 5,
            ..Default::default()
        };
        train(&mut model, &set, &[], &cfg).unwrap();
        let refs: Vec<&TrainSample> = set.iter().collect();
        let (x, _) = collate(&refs);
        model.set_mode(Mode::Infer);
        let infer = model.forward(&x).unwrap().logits;
        model.set_mode(Mode::Train);
        let train_mode = model.forward(&x).unwrap().logits;
        assert_eq!(infer.data, train_mode.data);
    }

    #[test]
    fn sgd_hand_arithmetic() {
        let mut w = [1.0f32];
        let mut v = [0.0f32];
        sgd_step(&mut w, &[0.5], &mut v, 0.1, 0.0);
        assert!((w[0] - 0.95).abs() < 1e-7);

        let mut w = [2.0f32];
        let mut v = [0.0f32];
        sgd_step(&mut w, &[0.0], &mut v, 0.1, 0.9);
        assert_eq!(w[0], 2.0);

        // two steps with momentum 0.9, g = 1, lr = 0.1: 1.0 -> 0.9 -> 0.71
        let mut w = [1.0f32];
        let mut v = [0.0f32];
        sgd_step(&mut w, &[1.0], &mut v, 0.1, 0.9);
        assert!((w[0] - 0.9).abs() < 1e-6);
        sgd_step(&mut w, &[1.0], &mut v, 0.1, 0.9);
        assert!((w[0] - 0.71).abs() < 1e-6);
    }

    #[test]
    fn adam_first_step_magnitude() {
        let lr = 1e-3f32;
        let mut w = [1.0f32];
        let (mut m, mut v) = ([0.0f32], [0.0f32]);
        adam_step(&mut w, &[0.5], &mut m, &mut v, 1, lr, 0.9, 0.999, 1e-8);
        assert!((w[0] - (1.0 - lr)).abs() < 1e-6);

        // zero gradient from cold state leaves the parameter unchanged
        let mut w = [3.0f32];
        let (mut m, mut v) = ([0.0f32], [0.0f32]);
        adam_step(&mut w, &[0.0], &mut m, &mut v, 1, lr, 0.9, 0.999, 1e-8);
        assert_eq!(w[0], 3.0);

        // |update| <= ~lr on the first step for any nonzero gradient
        for g in [1e-6f32, 0.01, 1.0, 100.0] {
            let mut w = [0.0f32];
            let (mut m, mut v) = ([0.0f32], [0.0f32]);
            adam_step(&mut w, &[g], &mut m, &mut v, 1, lr, 0.9, 0.999, 1e-8);
            assert!(w[0].abs() <= lr * 1.0001, "g={g} gave update {}", w[0]);
        }
    }

    #[test]
    fn early_stopping_cases() {
        match early_stopping_check(&[1.0, 0.9, 0.91, 0.92], 2) {
            StopDecision::Stop { restore_epoch } => assert_eq!(restore_epoch, 2),
            _ => panic!("expected stop"),
        }
        assert!(matches!(
            early_stopping_check(&[1.0, 0.9, 0.8, 0.7], 2),
            StopDecision::Continue
        ));
        match early_stopping_check(&[1.0, 1.1], 0) {
            StopDecision::Stop { restore_epoch } => assert_eq!(restore_epoch, 1),
            _ => panic!("patience 0 should stop at first non-improving epoch"),
        }
    }

    #[test]
    fn zero_epochs_leaves_weights_untouched() {
        let mut m = build_adenet(3, true, 0);
        let reference = build_adenet(3, true, 0);
        let set = separable_set(4, 0);
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let h = train(&mut m, &set, &[], &cfg).unwrap();
        assert!(h.epochs.is_empty());
        let mut a = m;
        let mut b = reference;
        let pa = a.trainable_params_mut();
        let pb = b.trainable_params_mut();
        for (x, y) in pa.iter().zip(pb.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn deterministic_history() {
        let set = separable_set(8, 3);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            deterministic: true,
            seed: 11,
            ..Default::default()
        };
        let mut m1 = build_adenet(3, true, 5);
        let h1 = train(&mut m1, &set, &set, &cfg).unwrap();
        let mut m2 = build_adenet(3, true, 5);
        let h2 = train(&mut m2, &set, &set, &cfg).unwrap();
        assert_eq!(h1, h2);
        let p1 = m1.trainable_params_mut();
        let p2 = m2.trainable_params_mut();
        for (a, b) in p1.iter().zip(p2.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn overfits_small_separable_set() {
        let set = separable_set(32, 1);
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 16,
            seed: 1,
            deterministic: true,
            ..Default::default()
        };
        let mut m = build_adenet(3, true, 1);
        let h = train(&mut m, &set, &[], &cfg).unwrap();
        let reached = h
            .epochs
            .iter()
            .any(|e| e.train_accuracy >= 1.0);
        assert!(reached, "never hit 100% train accuracy");
    }

    #[test]
    fn size_one_tail_batch_merges() {
        // 17 samples at batch 16 would leave a 1-sample tail; training must
        // not fail on batch-norm statistics
        let set = separable_set(17, 2);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 16,
            seed: 0,
            deterministic: true,
            ..Default::default()
        };
        let mut m = build_adenet(3, true, 0);
        train(&mut m, &set, &[], &cfg).unwrap();
    }

    #[test]
    fn empty_train_set_rejected() {
        let mut m = build_adenet(3, true, 0);
        assert!(matches!(
            train(&mut m, &[], &[], &TrainConfig::default()),
            Err(TrainError::EmptySet)
        ));
    }
}
