use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{LabelMode, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::{
    bce_loss_with_logits, cross_entropy_with_logits, Adam, ArchitectureConfig, CnnModel, Head, Mode, Tensor,
};

use super::dataset::Dataset;
use super::metrics::{input_tensor, multilabel_metrics, target_tensor, threshold_labels};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Micro-F1 at the training threshold (multi-label) or accuracy (single-label).
    pub val_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (1-based).
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub class_weights: Vec<f64>,
}

type Snapshot = (f64, Vec<Vec<f32>>, Vec<Vec<f32>>);

/// `w_c = N / (K N_c)` where `N_c` counts positives of class `c`, `N` is the
/// total positive count and `K` the number of classes that occur at all.
/// Absent classes get weight 0.
pub fn class_weights(histogram: &[usize]) -> Vec<f64> {
    let total: usize = histogram.iter().sum();
    let present = histogram.iter().filter(|&&c| c > 0).count();
    histogram
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { total as f64 / (present as f64 * c as f64) })
        .collect()
}

pub fn head_for(mode: LabelMode) -> Head {
    match mode {
        LabelMode::Multi => Head::Sigmoid,
        LabelMode::Single => Head::Softmax,
    }
}

fn loss_from_logits(head: Head, logits: &Tensor<f32>, targets: &Tensor<f32>, w: &[f64]) -> Result<(f64, Tensor<f32>)> {
    match head {
        Head::Sigmoid => bce_loss_with_logits(logits, targets, w),
        Head::Softmax => cross_entropy_with_logits(logits, targets, w),
    }
}

const EVAL_CHUNK: usize = 64;

/// Mean loss and score of `model` (inference mode) over `indices`.
fn evaluate(model: &CnnModel<f32>, ds: &Dataset, indices: &[usize], w: &[f64], threshold: f64) -> Result<(f64, f64)> {
    let head = model.head();
    let parts = indices
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let logits = model.predict_logits(&input_tensor(ds, chunk)?)?;
            let (loss, _) = loss_from_logits(head, &logits, &target_tensor(ds, chunk)?, w)?;
            let probs = model.predict(&input_tensor(ds, chunk)?)?;
            let rows: Vec<Vec<f64>> = probs.data().chunks(ds.n_classes).map(|r| r.iter().map(|&v| v as f64).collect()).collect();
            Ok((loss * chunk.len() as f64, rows))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = indices.len() as f64;
    let loss = parts.iter().map(|p| p.0).sum::<f64>() / n;
    let probs: Vec<Vec<f64>> = parts.into_iter().flat_map(|p| p.1).collect();
    let score = match ds.label_mode {
        LabelMode::Multi => {
            let truth: Vec<Vec<bool>> = indices
                .iter()
                .map(|&i| ds.samples[i].label.target(ds.n_classes).iter().map(|&t| t > 0.5).collect())
                .collect();
            multilabel_metrics(&threshold_labels(&probs, threshold), &truth)?.micro_f1
        }
        LabelMode::Single => {
            let hits = probs
                .iter()
                .zip(indices)
                .filter(|(p, &i)| ds.samples[i].label.classes() == [super::metrics::argmax(p)])
                .count();
            hits as f64 / n
        }
    };
    Ok((loss, score))
}

/// Shifts each image along the time axis by a uniform random number of
/// columns in `[-max, max]`, repeating the edge column into the gap.
fn shift_columns(x: &mut Tensor<f32>, max: usize, rng: &mut ChaCha8Rng) {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let max = max as i64;
    for img in x.data_mut().chunks_mut(h * w) {
        let s = rng.random_range(-max..=max);
        if s == 0 {
            continue;
        }
        for row in img.chunks_mut(w) {
            let src = row.to_vec();
            for (j, v) in row.iter_mut().enumerate() {
                *v = src[(j as i64 - s).clamp(0, w as i64 - 1) as usize];
            }
        }
    }
}

/// Trains a fresh network on `ds.split.train` with ADAM and early stopping
/// on the validation loss, then restores the best parameters.
pub fn train_model(ds: &Dataset, arch: &ArchitectureConfig, tc: &TrainConfig) -> Result<(CnnModel<f32>, History)> {
    train_model_with(ds, arch, tc, |_| {})
}

/// [`train_model`] with a callback invoked after every epoch.
pub fn train_model_with(
    ds: &Dataset,
    arch: &ArchitectureConfig,
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(CnnModel<f32>, History)> {
    tc.validate()?;
    if ds.split.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let [h, w] = ds.image_shape();
    let head = head_for(ds.label_mode);
    let mut model = CnnModel::<f32>::new(arch.to_model_config([h, w, 1], ds.n_classes, head)?, tc.seed)?;
    let weights = match (&tc.class_weights, tc.uniform_weights) {
        (Some(w), _) => {
            if w.len() != ds.n_classes {
                return Err(Error::Config(format!(
                    "train.class_weights has {} entries for {} classes",
                    w.len(),
                    ds.n_classes
                )));
            }
            w.clone()
        }
        (None, true) => vec![1.0; ds.n_classes],
        (None, false) => class_weights(&ds.label_histogram(&ds.split.train)),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x7261_696e);
    let mut order = ds.split.train.clone();
    let mut opt = Adam::new(tc.learning_rate);
    let mut history = History {
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
        class_weights: weights.clone(),
    };
    // (loss, params, buffers) of the best epoch so far
    let mut best: Option<Snapshot> = None;
    let mut wait = 0;

    for epoch in 1..=tc.max_epochs {
        model.set_mode(Mode::Train);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let mut x = input_tensor(ds, batch)?;
            if tc.shift_augment > 0 {
                shift_columns(&mut x, tc.shift_augment, &mut rng);
            }
            let t = target_tensor(ds, batch)?;
            model.zero_grad();
            let logits = model.forward_logits(&x)?;
            let (loss, grad) = loss_from_logits(head, &logits, &t, &weights)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("training loss is {loss}"),
                });
            }
            model.backward_logits(&grad)?;
            opt.step(&mut model.params_mut());
            sum += loss * batch.len() as f64;
        }
        let train_loss = sum / order.len() as f64;
        model.set_mode(Mode::Inference);
        if model.params().iter().any(|p| p.value.iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence {
                epoch,
                detail: "non-finite parameter after update".into(),
            });
        }
        let (val_loss, val_score) = if ds.split.val.is_empty() {
            (train_loss, f64::NAN)
        } else {
            evaluate(&model, ds, &ds.split.val, &weights, tc.threshold)?
        };
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: format!("validation loss is {val_loss}"),
            });
        }
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_score,
        };
        on_epoch(&rec);
        history.epochs.push(rec);

        if best.as_ref().is_none_or(|b| val_loss < b.0) {
            let params = model.params().iter().map(|p| p.value.clone()).collect();
            let buffers = model.buffers().into_iter().cloned().collect();
            best = Some((val_loss, params, buffers));
            history.best_epoch = epoch;
            wait = 0;
        } else {
            wait += 1;
            if wait >= tc.patience {
                history.stopped_early = epoch < tc.max_epochs;
                break;
            }
        }
    }
    if let Some((_, params, buffers)) = best {
        for (p, v) in model.params_mut().into_iter().zip(params) {
            p.value = v;
        }
        for (b, v) in model.buffers_mut().into_iter().zip(buffers) {
            *b = v;
        }
    }
    model.set_mode(Mode::Inference);
    Ok((model, history))
}
