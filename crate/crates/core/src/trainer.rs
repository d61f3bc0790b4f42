//! Training loops: S+T and its corrected variants, the target-only oracle
//! and the ideally-adapted run that trains source data on oracle outputs.
//!
//! Per iteration the objective is `L_s + L_l + lambda * L_u` with unit
//! weights on the first two terms. Each term is a mean over its own batch.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::accuracy;
use crate::data::{BatchPlan, BatchSizes, LabeledExample, SsdaTask};
use crate::error::{Result, SlaError};
use crate::mathcore::{kl_raw, Rng, SoftLabel};
use crate::nnet::{backward_ce, backward_ce_traced, backward_entropy, sgd_step, Activation, Model, ModelConfig, OptConfig, SgdState};
use crate::sla::{adapted_source_target_from, maybe_refresh, protonet_predict, CorrectionMode, ProtoState, SlaConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum UnlabeledLoss {
    None,
    Entropy { weight: f64 },
}

impl UnlabeledLoss {
    pub fn weight(&self) -> f64 {
        match self {
            UnlabeledLoss::None => 0.0,
            UnlabeledLoss::Entropy { weight } => *weight,
        }
    }
}

/// When to restart the learning-rate schedule at step `W + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerRefresh {
    /// Only when a label correction mode is active.
    Auto,
    Always,
    Never,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub hidden: Vec<usize>,
    pub features: usize,
    pub hidden_activation: Activation,
    pub feature_activation: Activation,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self { hidden: vec![32], features: 16, hidden_activation: Activation::Tanh, feature_activation: Activation::Tanh }
    }
}

impl ArchConfig {
    pub fn model_config(&self, input: usize, classes: usize) -> ModelConfig {
        ModelConfig {
            input,
            hidden: self.hidden.clone(),
            features: self.features,
            classes,
            hidden_activation: self.hidden_activation,
            feature_activation: self.feature_activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub sla: SlaConfig,
    pub opt: OptConfig,
    pub arch: ArchConfig,
    pub unlabeled_loss: UnlabeledLoss,
    pub total_iters: usize,
    pub batch: BatchSizes,
    pub eval_every: usize,
    pub seed: u64,
    pub scheduler_refresh: SchedulerRefresh,
    /// Record the PPC's own test accuracy at each refresh.
    pub eval_ppc_as_classifier: bool,
    /// Iteration budget of the target-only oracle.
    pub oracle_iters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sla: SlaConfig { mode: CorrectionMode::None, ..SlaConfig::default() },
            opt: OptConfig::default(),
            arch: ArchConfig::default(),
            unlabeled_loss: UnlabeledLoss::None,
            total_iters: 5000,
            batch: BatchSizes::default(),
            eval_every: 100,
            seed: 0,
            scheduler_refresh: SchedulerRefresh::Auto,
            eval_ppc_as_classifier: false,
            oracle_iters: 3000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sla.validate()?;
        self.opt.validate()?;
        if self.sla.mode != CorrectionMode::None && self.total_iters <= self.sla.warmup {
            return Err(SlaError::Config(format!(
                "total_iters ({}) must exceed warmup ({}) when label correction is on",
                self.total_iters, self.sla.warmup
            )));
        }
        if self.unlabeled_loss.weight() < 0.0 {
            return Err(SlaError::Config("unlabeled loss weight must be >= 0".into()));
        }
        if self.eval_every == 0 || self.total_iters == 0 {
            return Err(SlaError::Config("total_iters and eval_every must be positive".into()));
        }
        if self.batch.source == 0 || self.batch.labeled == 0 || self.batch.unlabeled == 0 {
            return Err(SlaError::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("config serializes"));
        hex::encode(&digest[..8])
    }

    fn refreshes_scheduler(&self) -> bool {
        match self.scheduler_refresh {
            SchedulerRefresh::Auto => self.sla.mode != CorrectionMode::None,
            SchedulerRefresh::Always => true,
            SchedulerRefresh::Never => false,
        }
    }
}

/// Named method presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    St,
    Ent,
    Sla,
    SlaEnt,
    SelfPred,
    Ideal,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::St, Method::Ent, Method::Sla, Method::SlaEnt, Method::SelfPred, Method::Ideal];

    pub fn name(self) -> &'static str {
        match self {
            Method::St => "st",
            Method::Ent => "ent",
            Method::Sla => "sla",
            Method::SlaEnt => "sla+ent",
            Method::SelfPred => "self-pred",
            Method::Ideal => "ideal",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Sets correction mode and unlabeled loss; `entropy_weight` is used by
    /// the ENT variants.
    pub fn configure(self, cfg: &mut TrainConfig, entropy_weight: f64) {
        let (mode, ent) = match self {
            Method::St | Method::Ideal => (CorrectionMode::None, false),
            Method::Ent => (CorrectionMode::None, true),
            Method::Sla => (CorrectionMode::Ppc, false),
            Method::SlaEnt => (CorrectionMode::Ppc, true),
            Method::SelfPred => (CorrectionMode::SelfPrediction, false),
        };
        cfg.sla.mode = mode;
        cfg.unlabeled_loss =
            if ent { UnlabeledLoss::Entropy { weight: entropy_weight } } else { UnlabeledLoss::None };
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub test_acc: f64,
    pub val_acc: f64,
    pub loss_total: f64,
    pub loss_source: f64,
    pub loss_labeled: f64,
    /// Weighted contribution `lambda * L_u`.
    pub loss_unlabeled: f64,
    /// Mean `KL(y_s || g(x_s))` over this step's source batch.
    pub source_kl: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefreshEvent {
    pub step: usize,
    pub pseudo_counts: Vec<usize>,
    /// Mean L2 displacement of the centers since the previous refresh.
    pub center_shift: Option<f64>,
    pub ppc_test_acc: Option<f64>,
}

/// Everything recorded by one training run.
///
/// Equality ignores `wall_clock_secs`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub metrics: Vec<EvalPoint>,
    /// Per-iteration source KL, index `e - 1`.
    pub kl_trace: Vec<f64>,
    pub refreshes: Vec<RefreshEvent>,
    pub final_test_acc: f64,
    pub final_val_acc: f64,
    #[serde(skip)]
    pub final_model: Option<Model>,
    #[serde(skip)]
    pub last_ppc: Option<ProtoState>,
    pub checkpoint: Option<String>,
    pub wall_clock_secs: f64,
}

impl PartialEq for RunRecord {
    fn eq(&self, other: &Self) -> bool {
        self.config_hash == other.config_hash
            && self.metrics == other.metrics
            && self.kl_trace == other.kl_trace
            && self.refreshes == other.refreshes
            && self.final_test_acc == other.final_test_acc
            && self.final_val_acc == other.final_val_acc
            && self.final_model == other.final_model
            && self.checkpoint == other.checkpoint
    }
}

impl RunRecord {
    pub fn model(&self) -> &Model {
        self.final_model.as_ref().expect("run record carries its final model")
    }
}

enum SourceTargets<'a> {
    Adapted,
    Oracle(&'a Model),
}

pub fn initial_model(task: &SsdaTask, cfg: &TrainConfig) -> Result<Model> {
    let mc = cfg.arch.model_config(task.input_dim(), task.classes());
    Model::new(&mc, &mut Rng::stream(cfg.seed, 10))
}

/// Trains with the configured correction mode and unlabeled loss.
pub fn train(task: &SsdaTask, cfg: &TrainConfig) -> Result<RunRecord> {
    run(task, cfg, SourceTargets::Adapted, None)
}

/// Like [`train`], stopping after `stop_after` iterations. Used to compare
/// partial trajectories.
pub fn train_for(task: &SsdaTask, cfg: &TrainConfig, stop_after: usize) -> Result<RunRecord> {
    run(task, cfg, SourceTargets::Adapted, Some(stop_after))
}

/// S+T whose source targets are the oracle's soft predictions from the
/// first iteration on.
pub fn train_ideally_adapted(task: &SsdaTask, cfg: &TrainConfig, oracle: &Model) -> Result<RunRecord> {
    let mut cfg = cfg.clone();
    cfg.sla.mode = CorrectionMode::None;
    run(task, &cfg, SourceTargets::Oracle(oracle), None)
}

fn run(task: &SsdaTask, cfg: &TrainConfig, targets: SourceTargets<'_>, stop_after: Option<usize>) -> Result<RunRecord> {
    cfg.validate()?;
    let started = Instant::now();
    let classes = task.classes();
    let lambda = cfg.unlabeled_loss.weight();
    let mut model = initial_model(task, cfg)?;
    let mut opt = SgdState::new(cfg.opt.clone(), &model)?;
    let mut plan = BatchPlan::new(task, cfg.batch, cfg.seed);
    let mut ppc: Option<ProtoState> = None;
    let mut record = RunRecord {
        config_hash: cfg.hash(),
        metrics: Vec::new(),
        kl_trace: Vec::with_capacity(cfg.total_iters),
        refreshes: Vec::new(),
        final_test_acc: 0.0,
        final_val_acc: 0.0,
        final_model: None,
        last_ppc: None,
        checkpoint: None,
        wall_clock_secs: 0.0,
    };
    let last = stop_after.unwrap_or(cfg.total_iters).min(cfg.total_iters);

    for step in 1..=last {
        if let Some((table, fresh)) = maybe_refresh(&cfg.sla, step, &model, task)? {
            let center_shift = ppc.as_ref().map(|old| {
                old.centers
                    .iter()
                    .zip(&fresh.centers)
                    .map(|(a, b)| crate::mathcore::sq_dist(a.values(), b.values()).sqrt())
                    .sum::<f64>()
                    / classes as f64
            });
            let ppc_test_acc = if cfg.eval_ppc_as_classifier {
                Some(protonet_accuracy(&model, &fresh, &task.test)?)
            } else {
                None
            };
            record.refreshes.push(RefreshEvent {
                step,
                pseudo_counts: table.class_counts(classes),
                center_shift,
                ppc_test_acc,
            });
            ppc = Some(fresh);
        }
        if step == cfg.sla.warmup + 1 && cfg.refreshes_scheduler() {
            opt.scheduler_refresh();
        }
        let lr = opt.current_lr();

        let batch = plan.next_batch(task);
        let traces = batch.source.iter().map(|e| model.trace(&e.x)).collect::<Result<Vec<_>>>()?;
        let mut src_targets = Vec::with_capacity(traces.len());
        let mut kl = 0.0;
        for (ex, tr) in batch.source.iter().zip(&traces) {
            let y = SoftLabel::one_hot(classes, ex.class)?;
            kl += kl_raw(y.probs(), tr.probs());
            let t = match targets {
                SourceTargets::Adapted => {
                    adapted_source_target_from(&cfg.sla, step, &y, tr.probs(), tr.features(), ppc.as_ref())?
                }
                SourceTargets::Oracle(oracle) => oracle.forward(&ex.x)?,
            };
            src_targets.push(t);
        }
        let source_kl = kl / traces.len() as f64;
        record.kl_trace.push(source_kl);

        let (mut grads, loss_source) =
            backward_ce_traced(&model, &traces, &src_targets, &vec![1.0; traces.len()])?;
        let (lx, lt) = labeled_batch(&batch.labeled, classes)?;
        let (g_l, loss_labeled) = backward_ce(&model, &lx, &lt, &vec![1.0; lx.len()])?;
        grads.add_scaled(&g_l, 1.0)?;
        let mut loss_unlabeled = 0.0;
        if lambda > 0.0 {
            let ux: Vec<&[f64]> = batch.unlabeled.iter().map(|u| u.x.as_slice()).collect();
            let (g_u, h) = backward_entropy(&model, &ux)?;
            grads.add_scaled(&g_u, lambda)?;
            loss_unlabeled = lambda * h;
        }
        let loss_total = loss_source + loss_labeled + loss_unlabeled;
        if !loss_total.is_finite() {
            return Err(SlaError::Training {
                step,
                detail: format!(
                    "non-finite loss: source={loss_source} labeled={loss_labeled} unlabeled={loss_unlabeled}"
                ),
            });
        }
        sgd_step(&mut model, &grads, &mut opt).map_err(|e| match e {
            SlaError::Training { detail, .. } => SlaError::Training { step, detail },
            other => other,
        })?;

        if step % cfg.eval_every == 0 || step == last {
            record.metrics.push(EvalPoint {
                step,
                test_acc: accuracy(&model, &task.test)?,
                val_acc: accuracy(&model, &task.validation)?,
                loss_total,
                loss_source,
                loss_labeled,
                loss_unlabeled,
                source_kl,
                lr,
            });
        }
    }

    if let Some(p) = record.metrics.last() {
        record.final_test_acc = p.test_acc;
        record.final_val_acc = p.val_acc;
    }
    record.final_model = Some(model);
    record.last_ppc = ppc;
    record.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(record)
}

fn labeled_batch<'a>(batch: &[&'a LabeledExample], classes: usize) -> Result<(Vec<&'a [f64]>, Vec<SoftLabel>)> {
    let xs = batch.iter().map(|e| e.x.as_slice()).collect();
    let ts = batch.iter().map(|e| SoftLabel::one_hot(classes, e.class)).collect::<Result<_>>()?;
    Ok((xs, ts))
}

fn protonet_accuracy(model: &Model, ppc: &ProtoState, data: &[LabeledExample]) -> Result<f64> {
    if data.is_empty() {
        return Err(SlaError::EmptyDataset);
    }
    let mut correct = 0;
    for ex in data {
        if protonet_predict(ppc, &model.forward_features(&ex.x)?)?.argmax() == ex.class {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Stand-in for the ideal target model: trained with true labels on
/// `L` and `U` only, for `cfg.oracle_iters` iterations.
pub fn train_oracle(task: &SsdaTask, cfg: &TrainConfig) -> Result<Model> {
    cfg.opt.validate()?;
    let view = task.oracle_view("train_oracle");
    let classes = task.classes();
    let mut data: Vec<(&[f64], usize)> = view.labeled.iter().map(|e| (e.x.as_slice(), e.class)).collect();
    data.extend(view.unlabeled.iter().map(|u| (u.x.as_slice(), view.unlabeled_truth[u.id])));
    let targets: Vec<SoftLabel> = data.iter().map(|(_, c)| SoftLabel::one_hot(classes, *c)).collect::<Result<_>>()?;

    let mc = cfg.arch.model_config(task.input_dim(), classes);
    let mut model = Model::new(&mc, &mut Rng::stream(cfg.seed, 20))?;
    let mut opt = SgdState::new(cfg.opt.clone(), &model)?;
    let mut rng = Rng::stream(cfg.seed, 21);
    let batch = cfg.batch.source + cfg.batch.labeled;
    let mut order: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut order);
    let mut pos = 0;
    for step in 1..=cfg.oracle_iters {
        let mut xs = Vec::with_capacity(batch);
        let mut ts = Vec::with_capacity(batch);
        for _ in 0..batch {
            if pos == order.len() {
                rng.shuffle(&mut order);
                pos = 0;
            }
            xs.push(data[order[pos]].0);
            ts.push(targets[order[pos]].clone());
            pos += 1;
        }
        let (grads, loss) = backward_ce(&model, &xs, &ts, &vec![1.0; xs.len()])?;
        if !loss.is_finite() {
            return Err(SlaError::Training { step, detail: format!("oracle loss {loss}") });
        }
        sgd_step(&mut model, &grads, &mut opt)?;
    }
    Ok(model)
}

/// `lambda * mean entropy` of the model's predictions on an unlabeled batch.
pub fn unlabeled_loss_entropy(model: &Model, batch: &[&[f64]], lambda: f64) -> Result<(crate::nnet::GradBuffer, f64)> {
    if lambda < 0.0 {
        return Err(SlaError::Config("entropy weight must be >= 0".into()));
    }
    let (mut g, h) = backward_entropy(model, batch)?;
    g.scale(lambda);
    Ok((g, lambda * h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_task, DomainSpec};
    use crate::nnet::Layer;

    fn quick_task() -> SsdaTask {
        let spec = DomainSpec { source_per_class: 60, unlabeled_per_class: 60, test_per_class: 30, ..DomainSpec::default() };
        generate_task(&spec, 3, 5).unwrap()
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig { total_iters: 300, eval_every: 50, oracle_iters: 200, ..TrainConfig::default() }
    }

    #[test]
    fn config_validation() {
        let mut cfg = quick_cfg();
        cfg.sla.mode = CorrectionMode::Ppc;
        cfg.sla.warmup = 300;
        assert!(matches!(cfg.validate(), Err(SlaError::Config(_))));
        cfg.sla.warmup = 100;
        assert!(cfg.validate().is_ok());
        cfg.unlabeled_loss = UnlabeledLoss::Entropy { weight: -1.0 };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn loss_components_add_up() {
        let task = quick_task();
        let mut cfg = quick_cfg();
        Method::SlaEnt.configure(&mut cfg, 0.1);
        cfg.sla.warmup = 100;
        let rec = train(&task, &cfg).unwrap();
        assert_eq!(rec.metrics.len(), 6);
        for p in &rec.metrics {
            assert!((p.loss_total - (p.loss_source + p.loss_labeled + p.loss_unlabeled)).abs() < 1e-9);
            assert!(p.step <= cfg.total_iters);
        }
        assert_eq!(rec.kl_trace.len(), 300);
        assert_eq!(rec.refreshes.iter().map(|r| r.step).collect::<Vec<_>>(), vec![101]);
    }

    #[test]
    fn runs_are_reproducible_and_do_not_touch_audit_labels() {
        let task = quick_task();
        let mut cfg = quick_cfg();
        Method::Sla.configure(&mut cfg, 0.1);
        cfg.sla.warmup = 50;
        cfg.sla.update_interval = 100;
        let a = train(&task, &cfg).unwrap();
        let b = train(&task, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(task.audit_log().is_empty());
    }

    #[test]
    fn oracle_reads_audit_labels_only_through_its_view() {
        let task = quick_task();
        let cfg = quick_cfg();
        let a = train_oracle(&task, &cfg).unwrap();
        assert_eq!(task.audit_log(), vec!["train_oracle".to_string()]);

        let mut poisoned = task.clone();
        for ex in &mut poisoned.source {
            ex.x = vec![f64::NAN; ex.x.len()];
            ex.class = 0;
        }
        assert_eq!(train_oracle(&poisoned, &cfg).unwrap(), a);
    }

    #[test]
    fn entropy_plugin_contribution() {
        let task = quick_task();
        let mut m = initial_model(&task, &quick_cfg()).unwrap();
        *m.head_mut() = Layer::zeros(m.feature_dim(), 5, Activation::Identity);
        let xs: Vec<&[f64]> = task.unlabeled.iter().take(8).map(|u| u.x.as_slice()).collect();
        let (g, c) = unlabeled_loss_entropy(&m, &xs, 0.1).unwrap();
        assert!((c - 0.1 * 5f64.ln()).abs() < 1e-9);
        let (g0, c0) = unlabeled_loss_entropy(&m, &xs, 0.0).unwrap();
        assert_eq!(c0, 0.0);
        assert!(g0.flatten().iter().all(|v| *v == 0.0));
        assert_eq!(g.flatten().len(), m.param_count());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()), Some(m));
        }
        assert_eq!(Method::parse("mme"), None);
    }
}
