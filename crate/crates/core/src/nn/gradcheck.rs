use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::loss::{bce_loss, cross_entropy_loss, LossKind};
use super::model::{CnnModel, Mode};
use super::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Minimum |ReLU input| and max-pool gap when `require_margin` is set.
    pub margin: f64,
    /// Reject points closer than `margin` to a kink. Without it, entries
    /// whose perturbation flips a ReLU or pooling decision are skipped.
    pub require_margin: bool,
    /// Check at most this many entries per parameter tensor (seeded sample).
    pub max_per_tensor: Option<usize>,
    pub seed: u64,
    /// Multiply the analytic gradient of every parameter of layer `.0` by
    /// `.1` before comparing; used to test the checker itself.
    pub corrupt: Option<(usize, f64)>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            margin: 1e-3,
            require_margin: true,
            max_per_tensor: None,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter name, max relative error)` for every checked tensor.
    pub per_param: Vec<(String, f64)>,
    pub checked: usize,
    pub skipped: usize,
    pub relu_margin: f64,
    pub pool_gap: f64,
}

pub(crate) fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

fn evaluate(model: &mut CnnModel<f64>, x: &Tensor<f64>, t: &Tensor<f64>, kind: &LossKind, backward: bool) -> Result<f64> {
    match kind {
        LossKind::Bce { class_weights } => {
            let p = model.forward(x)?;
            let (l, g) = bce_loss(&p, t, class_weights)?;
            if backward {
                model.backward(&g)?;
            }
            Ok(l)
        }
        LossKind::CrossEntropy { class_weights } => {
            let p = model.forward(x)?;
            let (l, g) = cross_entropy_loss(&p, t, class_weights)?;
            if backward {
                model.backward(&g)?;
            }
            Ok(l)
        }
        LossKind::LogitProbe => {
            let z = model.forward_logits(x)?;
            if z.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    expected: z.shape().to_vec(),
                    actual: t.shape().to_vec(),
                });
            }
            let l = z.data().iter().zip(t.data()).map(|(a, b)| a * b).sum();
            if backward {
                model.backward_logits(t)?;
            }
            Ok(l)
        }
    }
}

/// Compares analytic parameter gradients of `loss(model(x), targets)` with
/// central finite differences. The model is evaluated in train mode; its
/// parameters and running statistics are restored afterwards.
pub fn gradient_check(
    model: &mut CnnModel<f64>,
    x: &Tensor<f64>,
    targets: &Tensor<f64>,
    loss: &LossKind,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let prev_mode = model.mode();
    let buffers: Vec<Vec<f64>> = model.buffers().into_iter().cloned().collect();
    let result = run_check(model, x, targets, loss, cfg);
    for (b, saved) in model.buffers_mut().into_iter().zip(buffers) {
        *b = saved;
    }
    model.set_mode(prev_mode);
    result
}

fn run_check(
    model: &mut CnnModel<f64>,
    x: &Tensor<f64>,
    targets: &Tensor<f64>,
    loss: &LossKind,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    model.set_mode(Mode::Train);
    model.zero_grad();
    evaluate(model, x, targets, loss, true)?;
    let relu_margin = model.min_relu_margin();
    let pool_gap = model.min_pool_gap();
    if cfg.require_margin && (relu_margin < cfg.margin || pool_gap < cfg.margin) {
        return Err(Error::NonSmoothPoint(format!(
            "ReLU margin {relu_margin:.3e}, max-pool gap {pool_gap:.3e}, required {:.1e}",
            cfg.margin
        )));
    }
    let pattern = model.activation_pattern();

    let mut owner = Vec::new();
    for (li, layer) in model.layers().iter().enumerate() {
        owner.extend(std::iter::repeat_n(li, layer.params().len()));
    }
    let analytic: Vec<Vec<f64>> = model
        .params()
        .iter()
        .zip(&owner)
        .map(|(p, &li)| match cfg.corrupt {
            Some((layer, factor)) if layer == li => p.grad.iter().map(|g| g * factor).collect(),
            _ => p.grad.clone(),
        })
        .collect();
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h = cfg.step;
    let mut per_param = Vec::with_capacity(names.len());
    let (mut checked, mut skipped) = (0, 0);
    for (pi, grads) in analytic.iter().enumerate() {
        let n = grads.len();
        let indices: Vec<usize> = match cfg.max_per_tensor {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let mut worst: f64 = 0.0;
        for i in indices {
            let orig = model.params()[pi].value[i];
            model.params_mut()[pi].value[i] = orig + h;
            let lp = evaluate(model, x, targets, loss, false)?;
            let flip_p = !cfg.require_margin && model.activation_pattern() != pattern;
            model.params_mut()[pi].value[i] = orig - h;
            let lm = evaluate(model, x, targets, loss, false)?;
            let flip_m = !cfg.require_margin && model.activation_pattern() != pattern;
            model.params_mut()[pi].value[i] = orig;
            if flip_p || flip_m {
                skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * h);
            worst = worst.max(relative_error(grads[i], numeric));
            checked += 1;
        }
        per_param.push((names[pi].clone(), worst));
    }
    let max_rel_error = per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_param,
        checked,
        skipped,
        relu_margin,
        pool_gap,
    })
}

/// Runs [`gradient_check`] on inputs drawn from `sampler`, drawing a new
/// input whenever the point is not smooth.
pub fn gradient_check_resampling<F>(
    model: &mut CnnModel<f64>,
    mut sampler: F,
    loss: &LossKind,
    cfg: &GradCheckConfig,
    max_attempts: usize,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut ChaCha8Rng) -> (Tensor<f64>, Tensor<f64>),
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut last = None;
    for _ in 0..max_attempts.max(1) {
        let (x, t) = sampler(&mut rng);
        match gradient_check(model, &x, &t, loss, cfg) {
            Err(e @ Error::NonSmoothPoint(_)) => last = Some(e),
            other => return other,
        }
    }
    Err(last.unwrap_or_else(|| Error::NonSmoothPoint("no attempts".into())))
}
