use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::layers::{BatchNorm2d, Conv2d, Dense, Layer, MaxPool2d, Relu};
use super::{Param, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Independent per-class sigmoid (multi-label).
    Sigmoid,
    /// Softmax over classes (single-label).
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv { filters: usize, kernel: usize, bias: bool },
    Relu,
    BatchNorm,
    MaxPool { size: usize },
    Dense { units: usize },
}

/// Full layer-by-layer model description, stored inside checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `[height, width, channels]`
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub head: Head,
}

impl ModelConfig {
    /// Per-layer output shapes (without the batch axis) and the class count.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let [h, w, c] = self.input_shape;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Config(format!("input shape {:?} has a zero dimension", self.input_shape)));
        }
        let mut shape = vec![c, h, w];
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, spec) in self.layers.iter().enumerate() {
            let bad = |msg: String| Error::Config(format!("layer {i} ({spec:?}): {msg}"));
            shape = match *spec {
                LayerSpec::Conv { filters, kernel, .. } => {
                    if shape.len() != 3 {
                        return Err(bad("convolution after a dense layer".into()));
                    }
                    if filters == 0 || kernel == 0 || kernel % 2 == 0 {
                        return Err(bad("filters must be positive and kernel odd".into()));
                    }
                    vec![filters, shape[1], shape[2]]
                }
                LayerSpec::Relu => shape,
                LayerSpec::BatchNorm => {
                    if shape.len() != 3 {
                        return Err(bad("batch norm needs a feature map".into()));
                    }
                    shape
                }
                LayerSpec::MaxPool { size } => {
                    if shape.len() != 3 || size == 0 || shape[1] < size || shape[2] < size {
                        return Err(bad(format!("cannot pool {shape:?} by {size}")));
                    }
                    vec![shape[0], shape[1] / size, shape[2] / size]
                }
                LayerSpec::Dense { units } => {
                    if units == 0 {
                        return Err(bad("units must be positive".into()));
                    }
                    vec![units]
                }
            };
            out.push(shape.clone());
        }
        match out.last() {
            Some(s) if s.len() == 1 && matches!(self.layers.last(), Some(LayerSpec::Dense { .. })) => Ok(out),
            _ => Err(Error::Config("model must end with a dense layer".into())),
        }
    }

    pub fn n_outputs(&self) -> Result<usize> {
        Ok(self.shapes()?.last().expect("validated")[0])
    }
}

/// Compact block-structured architecture description used in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchitectureConfig {
    /// Filters per conv → ReLU → batch-norm → max-pool block.
    pub blocks: Vec<usize>,
    pub kernel: usize,
    pub pool: usize,
    /// Hidden fully connected widths, each followed by ReLU.
    pub hidden: Vec<usize>,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            blocks: vec![16, 32, 64, 64],
            kernel: 3,
            pool: 2,
            hidden: vec![128],
        }
    }
}

impl ArchitectureConfig {
    pub fn to_model_config(&self, input_shape: [usize; 3], n_classes: usize, head: Head) -> Result<ModelConfig> {
        let mut layers = Vec::new();
        for &filters in &self.blocks {
            layers.push(LayerSpec::Conv {
                filters,
                kernel: self.kernel,
                bias: true,
            });
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::BatchNorm);
            layers.push(LayerSpec::MaxPool { size: self.pool });
        }
        for &units in &self.hidden {
            layers.push(LayerSpec::Dense { units });
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Dense { units: n_classes });
        let cfg = ModelConfig {
            input_shape,
            layers,
            head,
        };
        cfg.shapes()?;
        Ok(cfg)
    }
}

/// ReLU masks and pooling argmax indices of the last training forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct ActivationPattern {
    relu: Vec<Vec<bool>>,
    pool: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct CnnModel<T> {
    config: ModelConfig,
    layers: Vec<Layer<T>>,
    mode: Mode,
    probs: Option<Tensor<T>>,
}

impl<T: Real> CnnModel<T> {
    /// Builds a freshly initialized model (He-uniform weights, zero biases).
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let shapes = config.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(config.layers.len());
        let mut prev = vec![config.input_shape[2], config.input_shape[0], config.input_shape[1]];
        for (spec, shape) in config.layers.iter().zip(&shapes) {
            let layer = match *spec {
                LayerSpec::Conv { filters, kernel, bias } => Layer::Conv(Conv2d::new(prev[0], filters, kernel, bias, &mut rng)),
                LayerSpec::Relu => Layer::Relu(Relu::new()),
                LayerSpec::BatchNorm => Layer::BatchNorm(BatchNorm2d::new(prev[0])),
                LayerSpec::MaxPool { size } => Layer::MaxPool(MaxPool2d::new(size)),
                LayerSpec::Dense { units } => Layer::Dense(Dense::new(prev.iter().product(), units, &mut rng)),
            };
            layers.push(layer);
            prev = shape.clone();
        }
        for (i, l) in layers.iter_mut().enumerate() {
            let name = l.kind();
            for p in l.params_mut() {
                let suffix = p.name.rsplit('.').next().unwrap_or("param").to_string();
                p.name = format!("{i}.{name}.{suffix}");
            }
        }
        if let Some(first) = layers.iter_mut().find(|l| !l.params().is_empty()) {
            first.set_need_input_grad(false);
        }
        Ok(Self {
            config,
            layers,
            mode: Mode::Train,
            probs: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn head(&self) -> Head {
        self.config.head
    }

    pub fn n_outputs(&self) -> usize {
        self.config.n_outputs().expect("validated at construction")
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.config.input_shape
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        if mode == Mode::Inference {
            self.clear_caches();
        }
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    fn clear_caches(&mut self) {
        self.probs = None;
        for l in &mut self.layers {
            l.clear_cache();
        }
    }

    /// `[B, H, W, C]` → `[B, C, H, W]`
    fn to_nchw(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [h, w, c] = self.config.input_shape;
        let s = x.shape();
        if s.len() != 4 || s[1..] != [h, w, c] {
            return Err(Error::ShapeMismatch {
                expected: vec![x.batch(), h, w, c],
                actual: s.to_vec(),
            });
        }
        let b = s[0];
        if c == 1 {
            return Tensor::new(vec![b, 1, h, w], x.data().to_vec());
        }
        let src = x.data();
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    for ch in 0..c {
                        out[((bi * c + ch) * h + y) * w + xx] = src[((bi * h + y) * w + xx) * c + ch];
                    }
                }
            }
        }
        Tensor::new(vec![b, c, h, w], out)
    }

    /// Raw class scores. Uses batch statistics and caches activations in
    /// train mode.
    pub fn forward_logits(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let train = self.mode == Mode::Train;
        self.probs = None;
        let mut a = self.to_nchw(x)?;
        for l in &mut self.layers {
            a = l.forward(&a, train)?;
        }
        Ok(a)
    }

    /// Class probabilities `[B, n_classes]`.
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let logits = self.forward_logits(x)?;
        let probs = apply_head(self.config.head, &logits)?;
        if self.mode == Mode::Train {
            self.probs = Some(probs.clone());
        }
        Ok(probs)
    }

    /// Inference-mode logits without mutating the model.
    pub fn predict_logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut a = self.to_nchw(x)?;
        for l in &self.layers {
            a = l.infer(&a)?;
        }
        Ok(a)
    }

    /// Inference-mode probabilities; safe to call concurrently.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        apply_head(self.config.head, &self.predict_logits(x)?)
    }

    /// Back-propagates a gradient with respect to the probabilities of the
    /// last train-mode [`CnnModel::forward`]. Gradients accumulate.
    pub fn backward(&mut self, dprobs: &Tensor<T>) -> Result<()> {
        let p = self.probs.as_ref().ok_or(Error::BackwardBeforeForward)?;
        if p.shape() != dprobs.shape() {
            return Err(Error::ShapeMismatch {
                expected: p.shape().to_vec(),
                actual: dprobs.shape().to_vec(),
            });
        }
        let k = p.row_len();
        let mut dz = vec![T::zero(); p.len()];
        match self.config.head {
            Head::Sigmoid => {
                for ((o, &pv), &g) in dz.iter_mut().zip(p.data()).zip(dprobs.data()) {
                    *o = g * pv * (T::one() - pv);
                }
            }
            Head::Softmax => {
                for ((o, pr), gr) in dz.chunks_mut(k).zip(p.data().chunks(k)).zip(dprobs.data().chunks(k)) {
                    let dot: T = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((ov, &pv), &g) in o.iter_mut().zip(pr).zip(gr) {
                        *ov = pv * (g - dot);
                    }
                }
            }
        }
        let dz = Tensor::new(p.shape().to_vec(), dz)?;
        self.backward_logits(&dz)
    }

    /// Back-propagates a gradient with respect to the logits.
    pub fn backward_logits(&mut self, dlogits: &Tensor<T>) -> Result<()> {
        if self.mode != Mode::Train || self.layers.iter().any(|l| !l.has_cache()) {
            return Err(Error::BackwardBeforeForward);
        }
        let mut g = dlogits.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g)?;
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn buffers(&self) -> Vec<&Vec<T>> {
        self.layers.iter().flat_map(|l| l.buffers()).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<T>> {
        self.layers.iter_mut().flat_map(|l| l.buffers_mut()).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn n_parameters(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Copies parameters and buffers into a model of another precision.
    pub fn cast<U: Real>(&self) -> CnnModel<U> {
        CnnModel {
            config: self.config.clone(),
            layers: self.layers.iter().map(|l| l.cast()).collect(),
            mode: self.mode,
            probs: None,
        }
    }

    /// Smallest |ReLU input| in the last train forward pass.
    pub fn min_relu_margin(&self) -> f64 {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Relu(r) => r.min_abs_input(),
                _ => None,
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Smallest non-zero max-pool window gap in the last train forward pass.
    pub fn min_pool_gap(&self) -> f64 {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::MaxPool(p) => p.min_gap(),
                _ => None,
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub(crate) fn activation_pattern(&self) -> ActivationPattern {
        let mut relu = Vec::new();
        let mut pool = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Relu(r) => relu.push(r.mask().unwrap_or_default()),
                Layer::MaxPool(p) => pool.push(p.argmax().map(<[usize]>::to_vec).unwrap_or_default()),
                _ => {}
            }
        }
        ActivationPattern { relu, pool }
    }
}

fn apply_head<T: Real>(head: Head, logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            expected: vec![logits.batch(), logits.row_len()],
            actual: logits.shape().to_vec(),
        });
    }
    let k = logits.row_len();
    let data: Vec<T> = match head {
        Head::Sigmoid => logits.data().iter().map(|&z| T::of_f64(sigmoid(z.as_f64()))).collect(),
        Head::Softmax => logits
            .data()
            .chunks(k)
            .flat_map(|row| {
                let m = row.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.as_f64()));
                let e: Vec<f64> = row.iter().map(|v| (v.as_f64() - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(move |v| T::of_f64(v / s))
            })
            .collect(),
    };
    Tensor::new(logits.shape().to_vec(), data)
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
