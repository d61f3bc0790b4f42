//! Small MLP classifier with hand-derived gradients.
//!
//! The model is a feature extractor (one or more affine layers with an
//! activation) followed by a linear head. Parameters live in `f64` so that
//! finite-difference checks are meaningful.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result, SlaError};
use crate::mathcore::{softmax_unchecked, FeatureVec, Rng, SoftLabel, LOG_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation's output.
    fn grad_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

/// Architecture of the classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub features: usize,
    pub classes: usize,
    pub hidden_activation: Activation,
    pub feature_activation: Activation,
}

impl ModelConfig {
    pub fn new(input: usize, classes: usize) -> Self {
        Self {
            input,
            hidden: vec![32],
            features: 16,
            classes,
            hidden_activation: Activation::Tanh,
            feature_activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.features == 0 || self.hidden.contains(&0) {
            return Err(SlaError::Config("layer widths must be positive".into()));
        }
        if self.classes < 2 {
            return Err(SlaError::Config("need at least 2 classes".into()));
        }
        Ok(())
    }
}

/// Affine map `W x + b` followed by an activation. `weight` is row-major
/// with shape `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            activation,
        }
    }

    fn uniform(inputs: usize, outputs: usize, activation: Activation, rng: &mut Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = (0..inputs * outputs).map(|_| rng.uniform(-bound, bound)).collect();
        let bias = (0..outputs).map(|_| rng.uniform(-bound, bound)).collect();
        Self { inputs, outputs, weight, bias, activation }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.outputs);
        for o in 0..self.outputs {
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            let z: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias[o];
            out.push(self.activation.apply(z));
        }
        out
    }
}

/// Classifier `g = head . f`. The last layer is the head; all earlier
/// layers form the feature extractor `f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    layers: Vec<Layer>,
}

impl Model {
    /// Per-layer uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::new();
        let mut width = cfg.input;
        for &h in &cfg.hidden {
            layers.push(Layer::uniform(width, h, cfg.hidden_activation, rng));
            width = h;
        }
        layers.push(Layer::uniform(width, cfg.features, cfg.feature_activation, rng));
        layers.push(Layer::uniform(cfg.features, cfg.classes, Activation::Identity, rng));
        Ok(Self { layers })
    }

    /// Builds a model from explicit layers; the last one is the head.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.len() < 2 {
            return Err(SlaError::Config("need at least one extractor layer and a head".into()));
        }
        for pair in layers.windows(2) {
            check_len(pair[0].outputs, pair[1].inputs)?;
        }
        for layer in &layers {
            check_len(layer.inputs * layer.outputs, layer.weight.len())?;
            check_len(layer.outputs, layer.bias.len())?;
        }
        if layers.last().map(|h| h.outputs).unwrap_or(0) < 2 {
            return Err(SlaError::Config("head must have at least 2 outputs".into()));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn head(&self) -> &Layer {
        self.layers.last().expect("model has a head")
    }

    pub fn head_mut(&mut self) -> &mut Layer {
        self.layers.last_mut().expect("model has a head")
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn feature_dim(&self) -> usize {
        self.head().inputs
    }

    pub fn classes(&self) -> usize {
        self.head().outputs
    }

    pub fn forward_features(&self, x: &[f64]) -> Result<FeatureVec> {
        check_len(self.input_dim(), x.len())?;
        let n = self.layers.len() - 1;
        let mut h = x.to_vec();
        for layer in &self.layers[..n] {
            h = layer.forward(&h);
        }
        FeatureVec::new(h)
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let f = self.forward_features(x)?;
        Ok(self.head().forward(f.values()))
    }

    pub fn forward(&self, x: &[f64]) -> Result<SoftLabel> {
        let z = self.logits(x)?;
        crate::mathcore::softmax(&z)
    }

    pub fn forward_batch(&self, xs: &[&[f64]]) -> Result<Vec<SoftLabel>> {
        xs.iter().map(|x| self.forward(x)).collect()
    }

    /// Forward pass keeping every layer's activation for backprop.
    pub fn trace(&self, x: &[f64]) -> Result<Trace> {
        check_len(self.input_dim(), x.len())?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for layer in &self.layers {
            let next = layer.forward(acts.last().expect("nonempty"));
            acts.push(next);
        }
        let probs = softmax_unchecked(acts.last().expect("logits"));
        Ok(Trace { acts, probs })
    }

    /// Accumulates `sum_i d(loss)/d(logits_i)` back into parameter gradients.
    fn backprop_into(&self, acts: &[Vec<f64>], logit_grad: &[f64], grads: &mut GradBuffer) {
        let mut delta = logit_grad.to_vec();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let out = &acts[li + 1];
            let input = &acts[li];
            // delta currently holds d/d(output); move it to d/d(pre-activation)
            for (d, a) in delta.iter_mut().zip(out) {
                *d *= layer.activation.grad_from_output(*a);
            }
            let g = &mut grads.layers[li];
            for o in 0..layer.outputs {
                let row = &mut g.weight[o * layer.inputs..(o + 1) * layer.inputs];
                for (w, v) in row.iter_mut().zip(input) {
                    *w += delta[o] * v;
                }
                g.bias[o] += delta[o];
            }
            if li > 0 {
                let mut prev = vec![0.0; layer.inputs];
                for o in 0..layer.outputs {
                    let row = &layer.weight[o * layer.inputs..(o + 1) * layer.inputs];
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += delta[o] * w;
                    }
                }
                delta = prev;
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameters flattened layer by layer, weights before biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        check_len(self.param_count(), flat.len())?;
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weight.len();
            l.weight.copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

/// Activations of one forward pass, input first and logits last.
#[derive(Debug, Clone)]
pub struct Trace {
    acts: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

impl Trace {
    pub fn features(&self) -> &[f64] {
        &self.acts[self.acts.len() - 2]
    }

    pub fn logits(&self) -> &[f64] {
        self.acts.last().expect("logits")
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradient arrays shaped like a [`Model`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer {
    pub layers: Vec<LayerGrad>,
}

impl GradBuffer {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrad { weight: vec![0.0; l.weight.len()], bias: vec![0.0; l.bias.len()] })
                .collect(),
        }
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn scale(&mut self, c: f64) {
        self.values_mut().for_each(|v| *v *= c);
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, other: &GradBuffer, c: f64) -> Result<()> {
        check_len(self.layers.len(), other.layers.len())?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            check_len(a.weight.len(), b.weight.len())?;
            check_len(a.bias.len(), b.bias.len())?;
            for (x, y) in a.weight.iter_mut().zip(&b.weight) {
                *x += c * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += c * y;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    fn congruent_with(&self, model: &Model) -> bool {
        self.layers.len() == model.layers.len()
            && self
                .layers
                .iter()
                .zip(&model.layers)
                .all(|(g, l)| g.weight.len() == l.weight.len() && g.bias.len() == l.bias.len())
    }
}

/// Weighted mean soft-target cross entropy and its exact gradient.
///
/// `loss = sum_i w_i H(g(x_i), t_i) / sum_i w_i`; the logit gradient of
/// each term is `pred - target`.
pub fn backward_ce(
    model: &Model,
    inputs: &[&[f64]],
    targets: &[SoftLabel],
    weights: &[f64],
) -> Result<(GradBuffer, f64)> {
    let traces = inputs.iter().map(|x| model.trace(x)).collect::<Result<Vec<_>>>()?;
    backward_ce_traced(model, &traces, targets, weights)
}

/// [`backward_ce`] over forward passes that were already computed.
pub fn backward_ce_traced(
    model: &Model,
    traces: &[Trace],
    targets: &[SoftLabel],
    weights: &[f64],
) -> Result<(GradBuffer, f64)> {
    if traces.is_empty() {
        return Err(SlaError::EmptyDataset);
    }
    check_len(traces.len(), targets.len())?;
    check_len(traces.len(), weights.len())?;
    let total_w: f64 = weights.iter().sum();
    if !(total_w > 0.0) || weights.iter().any(|w| *w < 0.0) {
        return Err(SlaError::Config("example weights must be >= 0 with a positive sum".into()));
    }
    let mut grads = GradBuffer::zeros_like(model);
    let mut loss = 0.0;
    for ((tr, t), w) in traces.iter().zip(targets).zip(weights) {
        check_len(model.classes(), t.classes())?;
        let pred = tr.probs();
        let c = w / total_w;
        loss += c * crate::mathcore::cross_entropy_raw(pred, t.probs());
        let dz: Vec<f64> = pred.iter().zip(t.probs()).map(|(p, y)| c * (p - y)).collect();
        model.backprop_into(&tr.acts, &dz, &mut grads);
    }
    Ok((grads, loss))
}

/// Mean prediction entropy over a batch and its exact gradient.
pub fn backward_entropy(model: &Model, inputs: &[&[f64]]) -> Result<(GradBuffer, f64)> {
    if inputs.is_empty() {
        return Err(SlaError::EmptyDataset);
    }
    let c = 1.0 / inputs.len() as f64;
    let mut grads = GradBuffer::zeros_like(model);
    let mut loss = 0.0;
    for x in inputs {
        let tr = model.trace(x)?;
        let logits = tr.logits();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        let log_p: Vec<f64> = logits.iter().map(|z| z - lse).collect();
        let p: Vec<f64> = log_p.iter().map(|l| l.exp()).collect();
        let h: f64 = -p.iter().zip(&log_p).map(|(p, l)| p * l).sum::<f64>();
        loss += c * h;
        // dH/dz_j = -p_j (ln p_j + H)
        let dz: Vec<f64> = p.iter().zip(&log_p).map(|(p, l)| -c * p * (l + h)).collect();
        model.backprop_into(&tr.acts, &dz, &mut grads);
    }
    Ok((grads, loss))
}

/// Mean prediction entropy without gradients.
pub fn mean_entropy(model: &Model, inputs: &[&[f64]]) -> Result<f64> {
    if inputs.is_empty() {
        return Err(SlaError::EmptyDataset);
    }
    let mut total = 0.0;
    for x in inputs {
        let p = model.forward(x)?;
        total -= p.probs().iter().map(|p| p * p.max(LOG_EPS).ln()).sum::<f64>();
    }
    Ok(total / inputs.len() as f64)
}

/// Hyperparameters of momentum SGD with inverse-decay schedule
/// `lr(t) = base_lr * (1 + decay_gamma * t)^(-decay_power)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub decay_gamma: f64,
    pub decay_power: f64,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self { base_lr: 0.1, momentum: 0.9, decay_gamma: 1e-4, decay_power: 0.75 }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(SlaError::Config("need base_lr >= 0 and momentum in [0, 1)".into()));
        }
        if !(self.decay_gamma >= 0.0) || !(self.decay_power >= 0.0) {
            return Err(SlaError::Config("decay parameters must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub config: OptConfig,
    pub step_count: usize,
    velocity: GradBuffer,
}

impl SgdState {
    pub fn new(config: OptConfig, model: &Model) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, step_count: 0, velocity: GradBuffer::zeros_like(model) })
    }

    pub fn lr_at(&self, t: usize) -> f64 {
        let c = &self.config;
        c.base_lr * (1.0 + c.decay_gamma * t as f64).powf(-c.decay_power)
    }

    pub fn current_lr(&self) -> f64 {
        self.lr_at(self.step_count)
    }

    pub fn velocity(&self) -> &GradBuffer {
        &self.velocity
    }

    /// Restarts the learning-rate schedule; momentum buffers are kept.
    pub fn scheduler_refresh(&mut self) {
        self.step_count = 0;
    }
}

/// `v <- momentum * v + grad; theta <- theta - lr(t) * v; t <- t + 1`.
pub fn sgd_step(model: &mut Model, grads: &GradBuffer, opt: &mut SgdState) -> Result<()> {
    if !grads.congruent_with(model) || !opt.velocity.congruent_with(model) {
        return Err(SlaError::Shape { expected: model.param_count(), got: grads.flatten().len() });
    }
    if !grads.is_finite() {
        let bad = grads.flatten().iter().filter(|v| !v.is_finite()).count();
        return Err(SlaError::Training {
            step: opt.step_count,
            detail: format!("{bad} non-finite gradient entries"),
        });
    }
    let lr = opt.current_lr();
    let mu = opt.config.momentum;
    for ((layer, g), v) in model.layers.iter_mut().zip(&grads.layers).zip(&mut opt.velocity.layers) {
        for ((p, gi), vi) in layer.weight.iter_mut().zip(&g.weight).zip(&mut v.weight) {
            *vi = mu * *vi + gi;
            *p -= lr * *vi;
        }
        for ((p, gi), vi) in layer.bias.iter_mut().zip(&g.bias).zip(&mut v.bias) {
            *vi = mu * *vi + gi;
            *p -= lr * *vi;
        }
    }
    opt.step_count += 1;
    Ok(())
}

const CHECKPOINT_FORMAT: &str = "sla-model";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub input: usize,
    pub features: usize,
    pub classes: usize,
    pub layers: Vec<Layer>,
}

impl Checkpoint {
    pub fn new(model: &Model, config_hash: impl Into<String>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.into(),
            input: model.input_dim(),
            features: model.feature_dim(),
            classes: model.classes(),
            layers: model.layers.clone(),
        }
    }

    pub fn into_model(self) -> Result<Model> {
        let model = Model::from_layers(self.layers)?;
        check_len(self.input, model.input_dim())?;
        check_len(self.features, model.feature_dim())?;
        check_len(self.classes, model.classes())?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| SlaError::Load(e.to_string()))?;
        if value.get("format").and_then(|f| f.as_str()) != Some(CHECKPOINT_FORMAT) {
            return Err(SlaError::Load("not a model checkpoint".into()));
        }
        let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != CHECKPOINT_VERSION {
            return Err(SlaError::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        serde_json::from_value(value).map_err(|e| SlaError::Load(e.to_string()))
    }
}
