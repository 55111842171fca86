use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::{CnnModel, Tensor};

use super::dataset::Dataset;

/// Per-class confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ClassConfusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ClassConfusion {
    /// `TP / (TP + FP)`, 1 when nothing was predicted.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// `TP / (TP + FN)`, 1 when there is nothing to find.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiLabelMetrics {
    pub n_samples: usize,
    /// `2 TP / (2 TP + FP + FN)` over all (sample, class) pairs.
    pub micro_f1: f64,
    /// Unweighted mean of the per-class F1 scores.
    pub macro_f1: f64,
    /// Mean over samples of `|pred ∩ true| / |pred ∪ true|`; an empty union counts as 1.
    pub jaccard: f64,
    pub per_class: Vec<ClassConfusion>,
}

impl MultiLabelMetrics {
    pub fn precision(&self) -> Vec<f64> {
        self.per_class.iter().map(ClassConfusion::precision).collect()
    }

    pub fn recall(&self) -> Vec<f64> {
        self.per_class.iter().map(ClassConfusion::recall).collect()
    }
}

/// Scores binary predictions against ground truth (both `[sample][class]`).
pub fn multilabel_metrics(pred: &[Vec<bool>], truth: &[Vec<bool>]) -> Result<MultiLabelMetrics> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![truth.len()],
            actual: vec![pred.len()],
        });
    }
    let k = truth.first().map_or(0, Vec::len);
    if pred.iter().chain(truth).any(|r| r.len() != k) {
        return Err(Error::Data("label rows differ in length".into()));
    }
    let mut per_class = vec![ClassConfusion::default(); k];
    let mut jaccard_sum = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        let (mut inter, mut union) = (0, 0);
        for (c, (&pv, &tv)) in p.iter().zip(t).enumerate() {
            let cc = &mut per_class[c];
            match (pv, tv) {
                (true, true) => cc.tp += 1,
                (true, false) => cc.fp += 1,
                (false, true) => cc.fn_ += 1,
                (false, false) => cc.tn += 1,
            }
            inter += (pv && tv) as usize;
            union += (pv || tv) as usize;
        }
        jaccard_sum += ratio(inter, union);
    }
    let total = per_class.iter().fold(ClassConfusion::default(), |a, c| ClassConfusion {
        tp: a.tp + c.tp,
        fp: a.fp + c.fp,
        fn_: a.fn_ + c.fn_,
        tn: a.tn + c.tn,
    });
    let n = pred.len();
    Ok(MultiLabelMetrics {
        n_samples: n,
        micro_f1: total.f1(),
        macro_f1: if k == 0 {
            1.0
        } else {
            per_class.iter().map(ClassConfusion::f1).sum::<f64>() / k as f64
        },
        jaccard: if n == 0 { 1.0 } else { jaccard_sum / n as f64 },
        per_class,
    })
}

/// Model inputs `[n, H, W, 1]` for the given samples.
pub fn input_tensor(ds: &Dataset, indices: &[usize]) -> Result<Tensor<f32>> {
    let [h, w] = ds.image_shape();
    let mut data = Vec::with_capacity(indices.len() * h * w);
    for &i in indices {
        data.extend(ds.samples[i].cochleogram.values().iter().map(|&v| v as f32));
    }
    Tensor::new(vec![indices.len(), h, w, 1], data)
}

/// Target matrix `[n, n_classes]` for the given samples.
pub fn target_tensor(ds: &Dataset, indices: &[usize]) -> Result<Tensor<f32>> {
    let data: Vec<f64> = indices.iter().flat_map(|&i| ds.samples[i].label.target(ds.n_classes)).collect();
    Tensor::from_f64(vec![indices.len(), ds.n_classes], &data)
}

const EVAL_CHUNK: usize = 64;

/// Inference-mode probabilities, one row per index; parallel over chunks.
pub fn predict_probs(model: &CnnModel<f32>, ds: &Dataset, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
    if model.n_outputs() != ds.n_classes {
        return Err(Error::Data(format!(
            "model predicts {} classes but the dataset has {}",
            model.n_outputs(),
            ds.n_classes
        )));
    }
    let chunks = indices
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let p = model.predict(&input_tensor(ds, chunk)?)?;
            Ok(p.data().chunks(ds.n_classes).map(|r| r.iter().map(|&v| v as f64).collect()).collect::<Vec<Vec<f64>>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(chunks.concat())
}

pub fn threshold_labels(probs: &[Vec<f64>], threshold: f64) -> Vec<Vec<bool>> {
    probs.iter().map(|r| r.iter().map(|&p| p > threshold).collect()).collect()
}

pub fn evaluate_multilabel(model: &CnnModel<f32>, ds: &Dataset, indices: &[usize], threshold: f64) -> Result<MultiLabelMetrics> {
    if indices.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let probs = predict_probs(model, ds, indices)?;
    let truth: Vec<Vec<bool>> = indices
        .iter()
        .map(|&i| ds.samples[i].label.target(ds.n_classes).iter().map(|&t| t > 0.5).collect())
        .collect();
    multilabel_metrics(&threshold_labels(&probs, threshold), &truth)
}

/// Fraction of samples whose arg-max class equals the label.
pub fn single_label_accuracy(model: &CnnModel<f32>, ds: &Dataset, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let probs = predict_probs(model, ds, indices)?;
    let correct = probs
        .iter()
        .zip(indices)
        .filter(|(p, &i)| ds.samples[i].label.classes() == [argmax(p)])
        .count();
    Ok(correct as f64 / indices.len() as f64)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map_or(0, |(i, _)| i)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub micro_f1: f64,
    pub jaccard: f64,
    /// Number of positive predictions.
    pub positives: usize,
}

/// Metrics at `points` evenly spaced thresholds in `[0, 1]`.
pub fn threshold_sweep(probs: &[Vec<f64>], truth: &[Vec<bool>], points: usize) -> Result<Vec<SweepPoint>> {
    let points = points.max(2);
    (0..points)
        .map(|i| {
            let threshold = i as f64 / (points - 1) as f64;
            let pred = threshold_labels(probs, threshold);
            let m = multilabel_metrics(&pred, truth)?;
            Ok(SweepPoint {
                threshold,
                micro_f1: m.micro_f1,
                jaccard: m.jaccard,
                positives: pred.iter().flatten().filter(|&&b| b).count(),
            })
        })
        .collect()
}
