//! Numeric primitives shared by every other module: probability-simplex
//! vectors, soft-target losses, distances, smoothing and seeded randomness.
//!
//! Everything here is a pure function over `f64` slices. Accumulation is
//! sequential in index order so results are reproducible bit for bit.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result, SlaError};

/// Lower clamp applied to probabilities before taking a logarithm.
pub const LOG_EPS: f64 = 1e-12;

/// Tolerance on the simplex sum constraint.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A point on the K-class probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SoftLabel(Vec<f64>);

impl SoftLabel {
    /// Validates nonnegativity, K >= 2 and the unit sum.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(SlaError::Domain(format!(
                "a soft label needs at least 2 classes, got {}",
                probs.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(SlaError::Domain("soft label entries must be finite and >= 0".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(SlaError::Domain(format!("soft label sums to {sum}, not 1")));
        }
        Ok(Self(probs))
    }

    pub fn one_hot(classes: usize, class: usize) -> Result<Self> {
        if class >= classes {
            return Err(SlaError::Domain(format!("class {class} out of range for K={classes}")));
        }
        let mut probs = vec![0.0; classes];
        probs[class] = 1.0;
        Self::new(probs)
    }

    pub fn uniform(classes: usize) -> Result<Self> {
        Self::new(vec![1.0 / classes as f64; classes])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest probability; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.0
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| -p * p.ln())
            .sum()
    }
}

impl AsRef<[f64]> for SoftLabel {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// A point in the extractor's feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVec(Vec<f64>);

impl FeatureVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SlaError::Domain("feature vector has non-finite entries".into()));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }
}

impl AsRef<[f64]> for FeatureVec {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Index of the maximum; lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax via max subtraction.
pub fn softmax(logits: &[f64]) -> Result<SoftLabel> {
    if logits.len() < 2 {
        return Err(SlaError::Domain(format!(
            "softmax needs at least 2 logits, got {}",
            logits.len()
        )));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(SlaError::Domain("softmax input is not finite".into()));
    }
    Ok(SoftLabel(softmax_unchecked(logits)))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// `H(pred, target) = -sum_k target_k * ln(max(pred_k, eps))`.
pub fn cross_entropy_soft(pred: &SoftLabel, target: &SoftLabel) -> Result<f64> {
    check_len(pred.classes(), target.classes())?;
    Ok(cross_entropy_raw(pred.probs(), target.probs()))
}

pub(crate) fn cross_entropy_raw(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(p, t)| -t * p.max(LOG_EPS).ln())
        .sum()
}

/// `KL(from || to)`; terms with `from_k = 0` contribute nothing.
pub fn kl_divergence(from: &SoftLabel, to: &SoftLabel) -> Result<f64> {
    check_len(from.classes(), to.classes())?;
    Ok(kl_raw(from.probs(), to.probs()))
}

pub(crate) fn kl_raw(from: &[f64], to: &[f64]) -> f64 {
    let kl: f64 = from
        .iter()
        .zip(to)
        .filter(|(f, _)| **f > 0.0)
        .map(|(f, t)| f * (f.ln() - t.max(LOG_EPS).ln()))
        .sum();
    kl.max(0.0)
}

pub fn sq_euclidean(a: &FeatureVec, b: &FeatureVec) -> Result<f64> {
    check_len(a.dim(), b.dim())?;
    Ok(sq_dist(a.values(), b.values()))
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Exponential moving average seeded with the first element.
pub fn ema_smooth(series: &[f64], ratio: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(SlaError::Config(format!("EMA ratio {ratio} outside [0, 1)")));
    }
    let Some(&first) = series.first() else {
        return Err(SlaError::EmptyDataset);
    };
    let mut out = Vec::with_capacity(series.len());
    let mut prev = first;
    out.push(prev);
    for &x in &series[1..] {
        prev = ratio * prev + (1.0 - ratio) * x;
        out.push(prev);
    }
    Ok(out)
}

/// Seeded ChaCha20 stream. One instance per logical stream; never shared.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha20Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { inner: ChaCha20Rng::seed_from_u64(seed) }
    }

    /// Independent sub-stream of `seed`, selected by ChaCha's stream counter.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw from `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}
