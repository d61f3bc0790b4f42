//! Synthetic domain pairs and the SSDA splits drawn from them.
//!
//! Each class of the source domain is an isotropic Gaussian. The target
//! domain rotates the source means (in the plane of the first two input
//! coordinates), translates them, and jitters each class mean
//! independently, so target clusters sit on top of source clusters of the
//! wrong class.

use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SlaError};
use crate::mathcore::{sq_dist, Rng};

pub const TASK_FORMAT: &str = "sla-task";
pub const TASK_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub classes: usize,
    pub input_dim: usize,
    /// One mean per class, each of length `input_dim`.
    pub source_means: Vec<Vec<f64>>,
    /// Standard deviation of every class component (both domains).
    pub std: f64,
    /// Rotation angle in radians applied in the (x0, x1) plane.
    pub rotation: f64,
    pub translation: Vec<f64>,
    /// Scale of the per-class Gaussian jitter added to target means.
    pub jitter: f64,
    pub source_per_class: usize,
    pub unlabeled_per_class: usize,
    pub test_per_class: usize,
    pub val_per_class: usize,
    /// Minimum target error of the source-only nearest-mean classifier.
    pub min_source_only_error: f64,
    pub max_retries: usize,
}

impl Default for DomainSpec {
    fn default() -> Self {
        let classes = 5;
        let radius = 4.94;
        let source_means = (0..classes)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Self {
            classes,
            input_dim: 2,
            source_means,
            std: 0.254,
            rotation: 50f64.to_radians(),
            translation: vec![-0.308, 0.952],
            jitter: 0.5,
            source_per_class: 200,
            unlabeled_per_class: 200,
            test_per_class: 100,
            val_per_class: 3,
            min_source_only_error: 0.2,
            max_retries: 32,
        }
    }
}

impl DomainSpec {
    /// Same source, target identical to it.
    pub fn without_shift(mut self) -> Self {
        self.rotation = 0.0;
        self.translation = vec![0.0; self.input_dim];
        self.jitter = 0.0;
        self.min_source_only_error = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.input_dim < 2 {
            return Err(SlaError::Config("need K >= 2 and m >= 2".into()));
        }
        if !(self.std > 0.0) || !(self.jitter >= 0.0) {
            return Err(SlaError::Config("std must be > 0 and jitter >= 0".into()));
        }
        if self.source_means.len() != self.classes
            || self.source_means.iter().any(|m| m.len() != self.input_dim)
            || self.translation.len() != self.input_dim
        {
            return Err(SlaError::Config("mean/translation dimensions disagree with K, m".into()));
        }
        if self.source_per_class == 0 || self.unlabeled_per_class == 0 || self.test_per_class == 0 {
            return Err(SlaError::Config("split sizes must be positive".into()));
        }
        Ok(())
    }

    /// Target means before jitter.
    fn shifted_means(&self) -> Vec<Vec<f64>> {
        let (s, c) = self.rotation.sin_cos();
        self.source_means
            .iter()
            .map(|m| {
                let mut t = m.clone();
                t[0] = c * m[0] - s * m[1];
                t[1] = s * m[0] + c * m[1];
                for (v, d) in t.iter_mut().zip(&self.translation) {
                    *v += d;
                }
                t
            })
            .collect()
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("spec serializes"));
        hex::encode(&digest[..8])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub x: Vec<f64>,
    pub class: usize,
}

/// Unlabeled target example with a stable id (its index in `U`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlabeledExample {
    pub id: usize,
    pub x: Vec<f64>,
}

/// Append-only record of who read the sealed labels of `U`.
#[derive(Debug, Default)]
pub struct AuditLog(Mutex<Vec<String>>);

impl AuditLog {
    fn record(&self, caller: &str) {
        self.0.lock().expect("audit log poisoned").push(caller.to_string());
    }

    pub fn entries(&self) -> Vec<String> {
        self.0.lock().expect("audit log poisoned").clone()
    }
}

impl Clone for AuditLog {
    fn clone(&self) -> Self {
        Self(Mutex::new(self.entries()))
    }
}

/// The four SSDA splits plus a small validation split.
#[derive(Debug, Clone)]
pub struct SsdaTask {
    pub spec: DomainSpec,
    pub n_shot: usize,
    pub seed: u64,
    pub source: Vec<LabeledExample>,
    pub labeled_target: Vec<LabeledExample>,
    pub unlabeled: Vec<UnlabeledExample>,
    unlabeled_truth: Vec<usize>,
    pub test: Vec<LabeledExample>,
    pub validation: Vec<LabeledExample>,
    audit: AuditLog,
}

impl PartialEq for SsdaTask {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.n_shot == other.n_shot
            && self.seed == other.seed
            && self.source == other.source
            && self.labeled_target == other.labeled_target
            && self.unlabeled == other.unlabeled
            && self.unlabeled_truth == other.unlabeled_truth
            && self.test == other.test
            && self.validation == other.validation
    }
}

/// Labeled target data as seen by the oracle: `L` plus `U` with its true
/// labels. Holds no source data.
#[derive(Debug, Clone)]
pub struct TargetView<'a> {
    pub labeled: &'a [LabeledExample],
    pub unlabeled: &'a [UnlabeledExample],
    pub unlabeled_truth: &'a [usize],
}

impl SsdaTask {
    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    /// True labels of `U`, indexed by example id. Every call is logged
    /// under `caller`.
    pub fn audit_labels(&self, caller: &str) -> &[usize] {
        self.audit.record(caller);
        &self.unlabeled_truth
    }

    pub fn oracle_view(&self, caller: &str) -> TargetView<'_> {
        TargetView {
            labeled: &self.labeled_target,
            unlabeled: &self.unlabeled,
            unlabeled_truth: self.audit_labels(caller),
        }
    }

    pub fn audit_log(&self) -> Vec<String> {
        self.audit.entries()
    }
}

fn sample_class(
    mean: &[f64],
    std: f64,
    class: usize,
    n: usize,
    rng: &mut Rng,
    out: &mut Vec<LabeledExample>,
) {
    for _ in 0..n {
        let x = mean.iter().map(|m| m + std * rng.normal()).collect();
        out.push(LabeledExample { x, class });
    }
}

/// Error rate on `data` of the nearest-source-mean classifier fitted on `source`.
fn nearest_mean_error(source: &[LabeledExample], data: &[LabeledExample], classes: usize) -> f64 {
    let dim = source[0].x.len();
    let mut sums = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for ex in source {
        counts[ex.class] += 1;
        for (s, v) in sums[ex.class].iter_mut().zip(&ex.x) {
            *s += v;
        }
    }
    let means: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| s.into_iter().map(|v| v / n.max(1) as f64).collect())
        .collect();
    let wrong = data
        .iter()
        .filter(|ex| {
            let mut best = 0;
            for k in 1..classes {
                if sq_dist(&ex.x, &means[k]) < sq_dist(&ex.x, &means[best]) {
                    best = k;
                }
            }
            best != ex.class
        })
        .count();
    wrong as f64 / data.len() as f64
}

/// Draws `S`, `L`, `U`, test and validation splits.
///
/// The target domain is resampled (fresh jitter and samples) until the
/// source-only nearest-mean classifier errs on at least
/// `min_source_only_error` of the test split.
pub fn generate_task(spec: &DomainSpec, n_shot: usize, seed: u64) -> Result<SsdaTask> {
    spec.validate()?;
    if n_shot != 1 && n_shot != 3 {
        return Err(SlaError::Config(format!("n_shot must be 1 or 3, got {n_shot}")));
    }
    let k = spec.classes;
    let mut rng = Rng::stream(seed, 0);
    let mut source = Vec::with_capacity(k * spec.source_per_class);
    for (class, mean) in spec.source_means.iter().enumerate() {
        sample_class(mean, spec.std, class, spec.source_per_class, &mut rng, &mut source);
    }

    let base = spec.shifted_means();
    for attempt in 0..spec.max_retries.max(1) {
        let mut rng = Rng::stream(seed, 1 + attempt as u64);
        let means: Vec<Vec<f64>> = base
            .iter()
            .map(|m| m.iter().map(|v| v + spec.jitter * rng.normal()).collect())
            .collect();
        let mut labeled = Vec::new();
        let mut unlabeled_raw = Vec::new();
        let mut test = Vec::new();
        let mut validation = Vec::new();
        for (class, mean) in means.iter().enumerate() {
            sample_class(mean, spec.std, class, n_shot, &mut rng, &mut labeled);
            sample_class(mean, spec.std, class, spec.unlabeled_per_class, &mut rng, &mut unlabeled_raw);
            sample_class(mean, spec.std, class, spec.test_per_class, &mut rng, &mut test);
            sample_class(mean, spec.std, class, spec.val_per_class, &mut rng, &mut validation);
        }
        if nearest_mean_error(&source, &test, k) < spec.min_source_only_error {
            continue;
        }
        // Interleave U so ids do not encode the class.
        let mut order: Vec<usize> = (0..unlabeled_raw.len()).collect();
        rng.shuffle(&mut order);
        let (unlabeled, unlabeled_truth) = order
            .iter()
            .enumerate()
            .map(|(id, &i)| {
                let ex = &unlabeled_raw[i];
                (UnlabeledExample { id, x: ex.x.clone() }, ex.class)
            })
            .unzip();
        return Ok(SsdaTask {
            spec: spec.clone(),
            n_shot,
            seed,
            source,
            labeled_target: labeled,
            unlabeled,
            unlabeled_truth,
            test,
            validation,
            audit: AuditLog::default(),
        });
    }
    Err(SlaError::Generation(format!(
        "source-only error stayed below {} after {} attempts; increase the rotation, translation or jitter",
        spec.min_source_only_error, spec.max_retries
    )))
}

#[derive(Debug, Clone)]
struct Cycler {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl Cycler {
    fn new(len: usize, rng: Rng) -> Self {
        let mut c = Self { order: (0..len).collect(), pos: 0, rng };
        c.rng.shuffle(&mut c.order);
        c
    }

    fn take(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSizes {
    pub source: usize,
    pub labeled: usize,
    pub unlabeled: usize,
}

impl Default for BatchSizes {
    fn default() -> Self {
        Self { source: 32, labeled: 32, unlabeled: 32 }
    }
}

/// Shuffled cycling over each split with its own stream.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub sizes: BatchSizes,
    pub iteration: usize,
    source: Cycler,
    labeled: Cycler,
    unlabeled: Cycler,
}

pub struct Batch<'a> {
    pub source: Vec<&'a LabeledExample>,
    pub labeled: Vec<&'a LabeledExample>,
    pub unlabeled: Vec<&'a UnlabeledExample>,
}

impl BatchPlan {
    pub fn new(task: &SsdaTask, sizes: BatchSizes, seed: u64) -> Self {
        Self {
            sizes,
            iteration: 0,
            source: Cycler::new(task.source.len(), Rng::stream(seed, 100)),
            labeled: Cycler::new(task.labeled_target.len(), Rng::stream(seed, 101)),
            unlabeled: Cycler::new(task.unlabeled.len(), Rng::stream(seed, 102)),
        }
    }

    pub fn next_batch<'a>(&mut self, task: &'a SsdaTask) -> Batch<'a> {
        self.iteration += 1;
        Batch {
            source: self.source.take(self.sizes.source).into_iter().map(|i| &task.source[i]).collect(),
            labeled: self
                .labeled
                .take(self.sizes.labeled)
                .into_iter()
                .map(|i| &task.labeled_target[i])
                .collect(),
            unlabeled: self
                .unlabeled
                .take(self.sizes.unlabeled)
                .into_iter()
                .map(|i| &task.unlabeled[i])
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TaskHeader {
    spec: DomainSpec,
    n_shot: usize,
    seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TaskBody {
    source: Vec<LabeledExample>,
    labeled_target: Vec<LabeledExample>,
    unlabeled: Vec<UnlabeledExample>,
    unlabeled_truth: Vec<usize>,
    test: Vec<LabeledExample>,
    validation: Vec<LabeledExample>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TaskFile {
    format: String,
    version: u32,
    checksum: String,
    header: TaskHeader,
    body: TaskBody,
}

fn checksum(header: &TaskHeader, body: &TaskBody) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(header)?);
    h.update(serde_json::to_vec(body)?);
    Ok(hex::encode(h.finalize()))
}

pub fn export_task(task: &SsdaTask, path: &Path) -> Result<()> {
    let header = TaskHeader { spec: task.spec.clone(), n_shot: task.n_shot, seed: task.seed };
    let body = TaskBody {
        source: task.source.clone(),
        labeled_target: task.labeled_target.clone(),
        unlabeled: task.unlabeled.clone(),
        unlabeled_truth: task.unlabeled_truth.clone(),
        test: task.test.clone(),
        validation: task.validation.clone(),
    };
    let file = TaskFile {
        format: TASK_FORMAT.into(),
        version: TASK_VERSION,
        checksum: checksum(&header, &body)?,
        header,
        body,
    };
    std::fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

pub fn import_task(path: &Path) -> Result<SsdaTask> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| SlaError::Load(format!("malformed task file: {e}")))?;
    if value.get("format").and_then(|f| f.as_str()) != Some(TASK_FORMAT) {
        return Err(SlaError::Load("not a task file".into()));
    }
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != TASK_VERSION {
        return Err(SlaError::Version { found: version, expected: TASK_VERSION });
    }
    let file: TaskFile =
        serde_json::from_value(value).map_err(|e| SlaError::Load(format!("malformed task file: {e}")))?;
    if checksum(&file.header, &file.body)? != file.checksum {
        return Err(SlaError::Load("checksum mismatch".into()));
    }
    let TaskFile { header, body, .. } = file;
    let task = SsdaTask {
        spec: header.spec,
        n_shot: header.n_shot,
        seed: header.seed,
        source: body.source,
        labeled_target: body.labeled_target,
        unlabeled: body.unlabeled,
        unlabeled_truth: body.unlabeled_truth,
        test: body.test,
        validation: body.validation,
        audit: AuditLog::default(),
    };
    if task.unlabeled.len() != task.unlabeled_truth.len() {
        return Err(SlaError::Load("unlabeled split and its labels differ in length".into()));
    }
    Ok(task)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DomainSpec {
        DomainSpec { source_per_class: 40, unlabeled_per_class: 40, test_per_class: 20, ..DomainSpec::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_task(&small_spec(), 3, 7).unwrap();
        let b = generate_task(&small_spec(), 3, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_task(&small_spec(), 3, 8).unwrap();
        assert_ne!(a.source, c.source);
    }

    #[test]
    fn default_split_sizes() {
        let t = generate_task(&DomainSpec::default(), 3, 1).unwrap();
        assert_eq!(t.labeled_target.len(), 15);
        for k in 0..5 {
            assert_eq!(t.labeled_target.iter().filter(|e| e.class == k).count(), 3);
        }
        assert_eq!(t.source.len(), 1000);
        assert_eq!(t.unlabeled.len(), 1000);
        assert_eq!(t.test.len(), 500);
        assert_eq!(t.validation.len(), 15);
        assert!(t.source.len() >= 20 * t.labeled_target.len());
        assert!(t.unlabeled.len() >= 20 * t.labeled_target.len());
        assert!(t.unlabeled.iter().enumerate().all(|(i, u)| u.id == i));
    }

    #[test]
    fn default_spec_is_misaligned() {
        for seed in 0..5 {
            let t = generate_task(&DomainSpec::default(), 3, seed).unwrap();
            assert!(nearest_mean_error(&t.source, &t.test, 5) >= 0.2);
        }
    }

    #[test]
    fn unshifted_spec_matches_source() {
        let spec = small_spec().without_shift();
        let t = generate_task(&spec, 1, 3).unwrap();
        assert!(nearest_mean_error(&t.source, &t.test, 5) < 0.1);
    }

    #[test]
    fn impossible_shift_reports_generation_error() {
        let spec = DomainSpec { min_source_only_error: 1.01, max_retries: 3, ..small_spec() };
        assert!(matches!(generate_task(&spec, 3, 0), Err(SlaError::Generation(_))));
        assert!(matches!(generate_task(&small_spec(), 2, 0), Err(SlaError::Config(_))));
    }

    #[test]
    fn audit_access_is_logged() {
        let t = generate_task(&small_spec(), 1, 0).unwrap();
        assert!(t.audit_log().is_empty());
        let _ = t.audit_labels("test");
        assert_eq!(t.audit_log(), vec!["test".to_string()]);
    }

    #[test]
    fn batches_cycle_without_replacement() {
        let t = generate_task(&small_spec(), 3, 0).unwrap();
        let sizes = BatchSizes { source: 40, labeled: 15, unlabeled: t.unlabeled.len() };
        let mut plan = BatchPlan::new(&t, sizes, 9);
        let b = plan.next_batch(&t);
        let mut ids: Vec<usize> = b.unlabeled.iter().map(|u| u.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..t.unlabeled.len()).collect::<Vec<_>>());

        let mut plan = BatchPlan::new(&t, sizes, 9);
        let mut seen: Vec<Vec<f64>> = Vec::new();
        for _ in 0..t.source.len() / 40 {
            seen.extend(plan.next_batch(&t).source.iter().map(|e| e.x.clone()));
        }
        let mut all: Vec<Vec<f64>> = t.source.iter().map(|e| e.x.clone()).collect();
        let key = |v: &Vec<f64>| (v[0].to_bits(), v[1].to_bits());
        seen.sort_by_key(key);
        all.sort_by_key(key);
        assert_eq!(seen, all);
    }

    #[test]
    fn plans_with_same_seed_agree() {
        let t = generate_task(&small_spec(), 3, 0).unwrap();
        let mut a = BatchPlan::new(&t, BatchSizes::default(), 4);
        let mut b = BatchPlan::new(&t, BatchSizes::default(), 4);
        for _ in 0..20 {
            let (x, y) = (a.next_batch(&t), b.next_batch(&t));
            assert_eq!(x.source, y.source);
            assert_eq!(x.labeled, y.labeled);
            assert_eq!(x.unlabeled, y.unlabeled);
        }
    }

    #[test]
    fn export_import_round_trip() {
        let t = generate_task(&small_spec(), 3, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("task.json");
        export_task(&t, &path).unwrap();
        assert_eq!(import_task(&path).unwrap(), t);
    }

    #[test]
    fn corrupted_and_foreign_files_are_rejected() {
        let t = generate_task(&small_spec(), 1, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("task.json");
        export_task(&t, &path).unwrap();

        let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        v["body"]["source"][0]["class"] = serde_json::json!(4);
        std::fs::write(&path, v.to_string()).unwrap();
        assert!(matches!(import_task(&path), Err(SlaError::Load(_))));

        v["version"] = serde_json::json!(2);
        std::fs::write(&path, v.to_string()).unwrap();
        assert!(matches!(import_task(&path), Err(SlaError::Version { found: 2, expected: 1 })));

        std::fs::write(&path, "{not json").unwrap();
        assert!(matches!(import_task(&path), Err(SlaError::Load(_))));
    }
}
