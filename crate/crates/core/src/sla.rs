//! Source label adaptation: class prototypes, the temperature-scaled
//! protonet, pseudo labels, the protonet with pseudo centers (PPC) and the
//! warmup-gated convex mixing of source labels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{LabeledExample, SsdaTask, UnlabeledExample};
use crate::error::{check_len, Result, SlaError};
use crate::mathcore::{softmax_unchecked, sq_dist, FeatureVec, SoftLabel};
use crate::nnet::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterSource {
    LabeledTarget,
    PseudoCenters,
    IdealCenters,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionMode {
    /// Plain source labels (S+T).
    None,
    /// Mix with the current model's own prediction.
    SelfPrediction,
    /// Mix with the protonet over pseudo centers.
    Ppc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlaConfig {
    pub alpha: f64,
    pub temperature: f64,
    pub update_interval: usize,
    pub warmup: usize,
    pub mode: CorrectionMode,
}

impl Default for SlaConfig {
    fn default() -> Self {
        Self { alpha: 0.3, temperature: 0.6, update_interval: 500, warmup: 500, mode: CorrectionMode::Ppc }
    }
}

impl SlaConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if !(self.temperature > 0.0) {
            return Err(SlaError::Config("temperature must be > 0".into()));
        }
        if self.update_interval == 0 {
            return Err(SlaError::Config("update interval must be >= 1".into()));
        }
        Ok(())
    }

    /// Whether a pseudo-label/center refresh is due at 1-based step `step`.
    /// Fires at `W+1, W+1+I, W+1+2I, ...` in PPC mode only.
    pub fn refresh_due(&self, step: usize) -> bool {
        self.mode == CorrectionMode::Ppc
            && step > self.warmup
            && (step - self.warmup - 1) % self.update_interval == 0
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(SlaError::Config(format!("alpha {alpha} outside [0, 1]")))
    }
}

/// Class centers in feature space together with the protonet temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtoState {
    pub centers: Vec<FeatureVec>,
    pub temperature: f64,
    pub source: CenterSource,
    pub built_at_step: usize,
}

impl ProtoState {
    pub fn new(centers: Vec<FeatureVec>, temperature: f64, source: CenterSource, built_at_step: usize) -> Result<Self> {
        if centers.len() < 2 {
            return Err(SlaError::Config("a protonet needs at least 2 centers".into()));
        }
        if !(temperature > 0.0) {
            return Err(SlaError::Config("temperature must be > 0".into()));
        }
        let dim = centers[0].dim();
        for c in &centers {
            check_len(dim, c.dim())?;
        }
        Ok(Self { centers, temperature, source, built_at_step })
    }

    pub fn classes(&self) -> usize {
        self.centers.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.centers[0].dim()
    }
}

/// Per-class mean of `features`. Fails with the index of the first class
/// that has no members.
pub fn compute_centers(features: &[(FeatureVec, usize)], classes: usize) -> Result<Vec<FeatureVec>> {
    let partial = partial_centers(features, classes)?;
    partial
        .into_iter()
        .enumerate()
        .map(|(class, c)| c.ok_or(SlaError::EmptyClass { class }))
        .collect()
}

fn partial_centers(features: &[(FeatureVec, usize)], classes: usize) -> Result<Vec<Option<FeatureVec>>> {
    let Some((first, _)) = features.first() else {
        return (0..classes).map(|_| Ok(None)).collect();
    };
    let dim = first.dim();
    let mut sums = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for (f, class) in features {
        check_len(dim, f.dim())?;
        if *class >= classes {
            return Err(SlaError::Domain(format!("class {class} out of range for K={classes}")));
        }
        counts[*class] += 1;
        for (s, v) in sums[*class].iter_mut().zip(f.values()) {
            *s += v;
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, n)| (n > 0).then(|| FeatureVec::new(s.into_iter().map(|v| v / n as f64).collect())).transpose())
        .collect::<Result<_>>()?)
}

/// `softmax_k(-T * ||f - c_k||^2)`.
pub fn protonet_predict(state: &ProtoState, feat: &FeatureVec) -> Result<SoftLabel> {
    check_len(state.feature_dim(), feat.dim())?;
    let logits: Vec<f64> = state
        .centers
        .iter()
        .map(|c| -state.temperature * sq_dist(feat.values(), c.values()))
        .collect();
    SoftLabel::new(softmax_unchecked(&logits))
}

/// Linear head with the same softmax output as the protonet:
/// `w_k = 2T c_k`, `b_k = -T ||c_k||^2`. Weight is row-major `K x F`.
pub fn protonet_as_linear(state: &ProtoState) -> (Vec<f64>, Vec<f64>) {
    let t = state.temperature;
    let weight = state
        .centers
        .iter()
        .flat_map(|c| c.values().iter().map(move |v| 2.0 * t * v))
        .collect();
    let bias = state.centers.iter().map(|c| -t * c.norm_sq()).collect();
    (weight, bias)
}

/// Hard pseudo labels of `U` keyed by example id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelTable {
    pub labels: BTreeMap<usize, usize>,
    pub step: usize,
}

impl PseudoLabelTable {
    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &c in self.labels.values() {
            counts[c] += 1;
        }
        counts
    }
}

pub fn assign_pseudo_labels(model: &Model, unlabeled: &[UnlabeledExample], step: usize) -> Result<PseudoLabelTable> {
    let mut labels = BTreeMap::new();
    for u in unlabeled {
        labels.insert(u.id, model.forward(&u.x)?.argmax());
    }
    Ok(PseudoLabelTable { labels, step })
}

/// Protonet with pseudo centers. Classes missing from the pseudo labels
/// fall back to their labeled-target center.
pub fn build_ppc(
    model: &Model,
    unlabeled: &[UnlabeledExample],
    table: &PseudoLabelTable,
    labeled_target: &[LabeledExample],
    temperature: f64,
) -> Result<ProtoState> {
    let classes = model.classes();
    let mut grouped = Vec::with_capacity(unlabeled.len());
    for u in unlabeled {
        let class = *table
            .labels
            .get(&u.id)
            .ok_or_else(|| SlaError::State(format!("no pseudo label for unlabeled id {}", u.id)))?;
        grouped.push((model.forward_features(&u.x)?, class));
    }
    let pseudo = partial_centers(&grouped, classes)?;
    let mut fallback = None;
    let mut centers = Vec::with_capacity(classes);
    for (class, c) in pseudo.into_iter().enumerate() {
        match c {
            Some(c) => centers.push(c),
            None => {
                if fallback.is_none() {
                    fallback = Some(labeled_centers(model, labeled_target)?);
                }
                let fb = fallback.as_ref().expect("just set");
                centers.push(fb[class].clone().ok_or(SlaError::EmptyClass { class })?);
            }
        }
    }
    ProtoState::new(centers, temperature, CenterSource::PseudoCenters, table.step)
}

fn labeled_centers(model: &Model, labeled: &[LabeledExample]) -> Result<Vec<Option<FeatureVec>>> {
    let feats = labeled
        .iter()
        .map(|e| Ok((model.forward_features(&e.x)?, e.class)))
        .collect::<Result<Vec<_>>>()?;
    partial_centers(&feats, model.classes())
}

/// Protonet over the labeled target centers.
pub fn build_labeled_protonet(model: &Model, labeled: &[LabeledExample], temperature: f64) -> Result<ProtoState> {
    let feats = labeled
        .iter()
        .map(|e| Ok((model.forward_features(&e.x)?, e.class)))
        .collect::<Result<Vec<_>>>()?;
    let centers = compute_centers(&feats, model.classes())?;
    ProtoState::new(centers, temperature, CenterSource::LabeledTarget, 0)
}

/// `(1 - alpha) * y + alpha * cleaner`.
pub fn adapt_label(y: &SoftLabel, cleaner: &SoftLabel, alpha: f64) -> Result<SoftLabel> {
    check_alpha(alpha)?;
    check_len(y.classes(), cleaner.classes())?;
    let probs = y
        .probs()
        .iter()
        .zip(cleaner.probs())
        .map(|(a, b)| (1.0 - alpha) * a + alpha * b)
        .collect();
    SoftLabel::new(probs)
}

/// Training target for one source example at 1-based step `step`.
/// Original labels are used while `step <= warmup` and always in mode `None`.
pub fn adapted_source_target(
    cfg: &SlaConfig,
    step: usize,
    y: &SoftLabel,
    model: &Model,
    ppc: Option<&ProtoState>,
    x: &[f64],
) -> Result<SoftLabel> {
    if step <= cfg.warmup || cfg.mode == CorrectionMode::None {
        return Ok(y.clone());
    }
    let tr = model.trace(x)?;
    adapted_source_target_from(cfg, step, y, tr.probs(), tr.features(), ppc)
}

/// Same as [`adapted_source_target`] given the model's prediction and
/// features for the example.
pub fn adapted_source_target_from(
    cfg: &SlaConfig,
    step: usize,
    y: &SoftLabel,
    pred: &[f64],
    features: &[f64],
    ppc: Option<&ProtoState>,
) -> Result<SoftLabel> {
    if step <= cfg.warmup {
        return Ok(y.clone());
    }
    match cfg.mode {
        CorrectionMode::None => Ok(y.clone()),
        CorrectionMode::SelfPrediction => adapt_label(y, &SoftLabel::new(pred.to_vec())?, cfg.alpha),
        CorrectionMode::Ppc => {
            let ppc = ppc.ok_or_else(|| SlaError::State(format!("no PPC available at step {step}")))?;
            let out = protonet_predict(ppc, &FeatureVec::new(features.to_vec())?)?;
            adapt_label(y, &out, cfg.alpha)
        }
    }
}

/// Recomputes pseudo labels and pseudo centers when a refresh is due.
pub fn maybe_refresh(
    cfg: &SlaConfig,
    step: usize,
    model: &Model,
    task: &SsdaTask,
) -> Result<Option<(PseudoLabelTable, ProtoState)>> {
    if !cfg.refresh_due(step) {
        return Ok(None);
    }
    let table = assign_pseudo_labels(model, &task.unlabeled, step)?;
    let ppc = build_ppc(model, &task.unlabeled, &table, &task.labeled_target, cfg.temperature)?;
    Ok(Some((table, ppc)))
}
