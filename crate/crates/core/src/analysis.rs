//! Post-hoc diagnostics over trained models and run records: confusion
//! matrices, center audits, source-KL traces, adapted-label summaries and
//! hyperparameter sweeps with CSV output.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate_task, DomainSpec, LabeledExample, SsdaTask};
use crate::error::{Result, SlaError};
use crate::mathcore::{ema_smooth, sq_dist, FeatureVec, SoftLabel};
use crate::nnet::Model;
use crate::sla::{adapt_label, build_ppc, assign_pseudo_labels, compute_centers, protonet_predict, ProtoState};
use crate::trainer::{train, train_ideally_adapted, train_oracle, Method, RefreshEvent, RunRecord, TrainConfig};

/// Smoothing ratio of the source-KL trace.
pub const KL_EMA_RATIO: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// `counts[true][predicted]`.
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { counts: vec![vec![0; classes]; classes] }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> usize {
        (0..self.classes()).map(|k| self.counts[k][k]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.correct() as f64 / self.total() as f64
    }

    /// Row-normalized percentages; empty rows stay zero.
    pub fn percentages(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let n: usize = row.iter().sum();
                row.iter()
                    .map(|&c| if n == 0 { 0.0 } else { 100.0 * c as f64 / n as f64 })
                    .collect()
            })
            .collect()
    }

    /// True class with the lowest per-class recall.
    pub fn worst_row(&self) -> usize {
        let pct = self.percentages();
        let mut worst = 0;
        for k in 1..self.classes() {
            if pct[k][k] < pct[worst][worst] {
                worst = k;
            }
        }
        worst
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let k = self.classes();
        let mut header = vec!["true_class".to_string()];
        header.extend((0..k).map(|j| format!("pred_{j}")));
        header.extend((0..k).map(|j| format!("pct_{j}")));
        header.push("worst".into());
        w.write_record(&header)?;
        let pct = self.percentages();
        let worst = self.worst_row();
        for (i, row) in self.counts.iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(row.iter().map(|c| c.to_string()));
            rec.extend(pct[i].iter().map(|p| format!("{p:.2}")));
            rec.push(if i == worst { "1" } else { "0" }.into());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Accuracy and confusion matrix of `model` on `data`.
pub fn evaluate(model: &Model, data: &[LabeledExample]) -> Result<(f64, ConfusionMatrix)> {
    evaluate_with(data, model.classes(), |x| Ok(model.forward(x)?.argmax()))
}

pub fn evaluate_with(
    data: &[LabeledExample],
    classes: usize,
    mut predict: impl FnMut(&[f64]) -> Result<usize>,
) -> Result<(f64, ConfusionMatrix)> {
    if data.is_empty() {
        return Err(SlaError::EmptyDataset);
    }
    let mut cm = ConfusionMatrix::new(classes);
    for ex in data {
        let p = predict(&ex.x)?;
        cm.counts[ex.class][p] += 1;
    }
    Ok((cm.accuracy(), cm))
}

pub fn accuracy(model: &Model, data: &[LabeledExample]) -> Result<f64> {
    Ok(evaluate(model, data)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterAudit {
    pub mean_ideal_to_labeled: f64,
    pub mean_ideal_to_pseudo: f64,
    pub per_class_labeled: Vec<f64>,
    pub per_class_pseudo: Vec<f64>,
}

/// Compares labeled-target and pseudo centers against the centers of `U`
/// under its true labels, in the feature space of `model`.
pub fn center_audit(model: &Model, task: &SsdaTask) -> Result<CenterAudit> {
    let truth = task.audit_labels("center_audit");
    let classes = task.classes();
    let feats = task
        .unlabeled
        .iter()
        .map(|u| Ok((model.forward_features(&u.x)?, truth[u.id])))
        .collect::<Result<Vec<_>>>()?;
    let ideal = compute_centers(&feats, classes)?;
    let labeled_feats = task
        .labeled_target
        .iter()
        .map(|e| Ok((model.forward_features(&e.x)?, e.class)))
        .collect::<Result<Vec<_>>>()?;
    let labeled = compute_centers(&labeled_feats, classes)?;
    let table = assign_pseudo_labels(model, &task.unlabeled, 0)?;
    let pseudo = build_ppc(model, &task.unlabeled, &table, &task.labeled_target, 1.0)?.centers;

    let dist = |a: &[FeatureVec], b: &[FeatureVec]| -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| sq_dist(x.values(), y.values()).sqrt()).collect()
    };
    let per_class_labeled = dist(&ideal, &labeled);
    let per_class_pseudo = dist(&ideal, &pseudo);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(CenterAudit {
        mean_ideal_to_labeled: mean(&per_class_labeled),
        mean_ideal_to_pseudo: mean(&per_class_pseudo),
        per_class_labeled,
        per_class_pseudo,
    })
}

impl CenterAudit {
    /// One row per class plus a final `mean` row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["class", "ideal_to_labeled", "ideal_to_pseudo"])?;
        for (k, (l, p)) in self.per_class_labeled.iter().zip(&self.per_class_pseudo).enumerate() {
            w.write_record([k.to_string(), l.to_string(), p.to_string()])?;
        }
        w.write_record(["mean".to_string(), self.mean_ideal_to_labeled.to_string(), self.mean_ideal_to_pseudo.to_string()])?;
        w.flush()?;
        Ok(())
    }
}

/// Refresh log: step, pseudo-label counts joined by `;`, mean center shift
/// and the PPC's own test accuracy (empty when not recorded).
pub fn write_refreshes_csv<W: Write>(events: &[RefreshEvent], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "pseudo_counts", "center_shift", "ppc_test_acc"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for e in events {
        let counts = e.pseudo_counts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";");
        w.write_record([e.step.to_string(), counts, opt(e.center_shift), opt(e.ppc_test_acc)])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlPoint {
    pub step: usize,
    pub raw: f64,
    pub ema: f64,
}

/// Per-iteration source KL with its EMA-0.8 smoothing.
pub fn kl_trace(run: &RunRecord) -> Result<Vec<KlPoint>> {
    kl_trace_from(&run.kl_trace)
}

pub fn kl_trace_from(raw: &[f64]) -> Result<Vec<KlPoint>> {
    if raw.is_empty() {
        return Err(SlaError::State("run has no source KL trace".into()));
    }
    let ema = ema_smooth(raw, KL_EMA_RATIO)?;
    Ok(raw
        .iter()
        .zip(ema)
        .enumerate()
        .map(|(i, (&raw, ema))| KlPoint { step: i + 1, raw, ema })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassLabelSummary {
    pub class: usize,
    pub mean_adapted: Vec<f64>,
    pub top3: Vec<(usize, f64)>,
    pub mean_ideal: Vec<f64>,
    pub ideal_top3: Vec<(usize, f64)>,
    /// L1 distance from the mean adapted label to the mean ideal label.
    pub adapted_l1_to_ideal: f64,
    /// L1 distance from the original one-hot label to the mean ideal label.
    pub onehot_l1_to_ideal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptedLabelSummary {
    pub alpha: f64,
    pub classes: Vec<ClassLabelSummary>,
}

impl AdaptedLabelSummary {
    /// Fraction of classes whose mean adapted label is L1-closer to the
    /// ideal one than the one-hot label is.
    pub fn closer_fraction(&self) -> f64 {
        let closer = self.classes.iter().filter(|c| c.adapted_l1_to_ideal < c.onehot_l1_to_ideal).count();
        closer as f64 / self.classes.len() as f64
    }
}

pub fn top_k(probs: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.into_iter().take(k).map(|i| (i, probs[i])).collect()
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Per source class: mean PPC-adapted label vs mean oracle-adapted label.
pub fn adapted_label_summary(
    model: &Model,
    task: &SsdaTask,
    ppc: &ProtoState,
    oracle: &Model,
    alpha: f64,
) -> Result<AdaptedLabelSummary> {
    let classes = task.classes();
    let mut adapted = vec![vec![0.0; classes]; classes];
    let mut ideal = vec![vec![0.0; classes]; classes];
    let mut counts = vec![0usize; classes];
    for ex in &task.source {
        let y = SoftLabel::one_hot(classes, ex.class)?;
        let a = adapt_label(&y, &protonet_predict(ppc, &model.forward_features(&ex.x)?)?, alpha)?;
        let i = adapt_label(&y, &oracle.forward(&ex.x)?, alpha)?;
        counts[ex.class] += 1;
        for k in 0..classes {
            adapted[ex.class][k] += a.probs()[k];
            ideal[ex.class][k] += i.probs()[k];
        }
    }
    let mut out = Vec::with_capacity(classes);
    for c in 0..classes {
        if counts[c] == 0 {
            return Err(SlaError::EmptyClass { class: c });
        }
        let n = counts[c] as f64;
        let mean_adapted: Vec<f64> = adapted[c].iter().map(|v| v / n).collect();
        let mean_ideal: Vec<f64> = ideal[c].iter().map(|v| v / n).collect();
        let onehot = SoftLabel::one_hot(classes, c)?;
        out.push(ClassLabelSummary {
            class: c,
            top3: top_k(&mean_adapted, 3),
            ideal_top3: top_k(&mean_ideal, 3),
            adapted_l1_to_ideal: l1(&mean_adapted, &mean_ideal),
            onehot_l1_to_ideal: l1(onehot.probs(), &mean_ideal),
            mean_adapted,
            mean_ideal,
        });
    }
    Ok(AdaptedLabelSummary { alpha, classes: out })
}

impl AdaptedLabelSummary {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "class", "top1", "p1", "top2", "p2", "top3", "p3", "ideal_top1", "ideal_p1", "ideal_top2", "ideal_p2",
            "ideal_top3", "ideal_p3", "adapted_l1_to_ideal", "onehot_l1_to_ideal",
        ])?;
        for c in &self.classes {
            let mut rec = vec![c.class.to_string()];
            for (k, p) in c.top3.iter().chain(&c.ideal_top3) {
                rec.push(k.to_string());
                rec.push(p.to_string());
            }
            rec.push(c.adapted_l1_to_ideal.to_string());
            rec.push(c.onehot_l1_to_ideal.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One configuration of a sweep, expressed as overrides on `GridSpec::base`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub name: String,
    pub method: Method,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub update_interval: Option<usize>,
    #[serde(default)]
    pub warmup: Option<usize>,
    #[serde(default)]
    pub total_iters: Option<usize>,
    #[serde(default)]
    pub entropy_weight: Option<f64>,
}

impl GridEntry {
    pub fn new(name: impl Into<String>, method: Method) -> Self {
        Self {
            name: name.into(),
            method,
            alpha: None,
            temperature: None,
            update_interval: None,
            warmup: None,
            total_iters: None,
            entropy_weight: None,
        }
    }

    pub fn config(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        let mut cfg = base.clone();
        self.method.configure(&mut cfg, self.entropy_weight.unwrap_or(0.1));
        if let Some(a) = self.alpha {
            cfg.sla.alpha = a;
        }
        if let Some(t) = self.temperature {
            cfg.sla.temperature = t;
        }
        if let Some(i) = self.update_interval {
            cfg.sla.update_interval = i;
        }
        if let Some(w) = self.warmup {
            cfg.sla.warmup = w;
        }
        if let Some(n) = self.total_iters {
            cfg.total_iters = n;
        }
        cfg.seed = seed;
        cfg
    }
}

fn default_n_shot() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    #[serde(default)]
    pub domain: DomainSpec,
    #[serde(default = "default_n_shot")]
    pub n_shot: usize,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub base: TrainConfig,
    pub entries: Vec<GridEntry>,
}

/// Outcome of one (configuration, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub config: String,
    pub seed: u64,
    pub val_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub error: Option<String>,
}

/// Aggregate over seeds. Accuracies are those of the final-iteration model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub config: String,
    pub runs: usize,
    pub failed: usize,
    pub val_mean: f64,
    pub val_std: f64,
    pub test_mean: f64,
    pub test_std: f64,
    pub selected: bool,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SummaryRow>,
    /// Order in which the split columns were consulted.
    pub protocol: Vec<String>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Index of the configuration with the best mean validation accuracy.
/// Ties go to the earlier entry.
pub fn select_by_validation(val_means: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in val_means.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        if best.map_or(true, |b| *v > val_means[b]) {
            best = Some(i);
        }
    }
    best
}

fn run_one(task: &SsdaTask, entry: &GridEntry, cfg: &TrainConfig) -> Result<RunRecord> {
    if entry.method == Method::Ideal {
        let oracle = train_oracle(task, cfg)?;
        train_ideally_adapted(task, cfg, &oracle)
    } else {
        train(task, cfg)
    }
}

/// Runs every entry on every seed, in parallel. Failed runs are recorded
/// and the sweep continues.
pub fn sweep(grid: &GridSpec) -> Result<SweepResult> {
    if grid.entries.is_empty() || grid.seeds.is_empty() {
        return Err(SlaError::Config("sweep needs at least one entry and one seed".into()));
    }
    let tasks: Vec<Result<SsdaTask>> =
        grid.seeds.par_iter().map(|&s| generate_task(&grid.domain, grid.n_shot, s)).collect();
    let jobs: Vec<(usize, usize)> =
        (0..grid.entries.len()).flat_map(|e| (0..grid.seeds.len()).map(move |s| (e, s))).collect();
    let rows: Vec<SweepRow> = jobs
        .par_iter()
        .map(|&(e, s)| {
            let entry = &grid.entries[e];
            let seed = grid.seeds[s];
            let outcome = tasks[s]
                .as_ref()
                .map_err(|err| SlaError::Generation(err.to_string()))
                .and_then(|task| run_one(task, entry, &entry.config(&grid.base, seed)));
            match outcome {
                Ok(rec) => SweepRow {
                    config: entry.name.clone(),
                    seed,
                    val_acc: Some(rec.final_val_acc),
                    test_acc: Some(rec.final_test_acc),
                    error: None,
                },
                Err(err) => SweepRow { config: entry.name.clone(), seed, val_acc: None, test_acc: None, error: Some(err.to_string()) },
            }
        })
        .collect();

    let mut protocol = Vec::new();
    fn per_entry<'a>(rows: &'a [SweepRow], e: &'a GridEntry) -> impl Iterator<Item = &'a SweepRow> + 'a {
        rows.iter().filter(move |r| r.config == e.name)
    }
    protocol.push("select:validation".to_string());
    let val_stats: Vec<(f64, f64)> = grid
        .entries
        .iter()
        .map(|e| mean_std(&per_entry(&rows, e).filter_map(|r| r.val_acc).collect::<Vec<_>>()))
        .collect();
    let selected = select_by_validation(&val_stats.iter().map(|v| v.0).collect::<Vec<_>>());
    protocol.push("report:test".to_string());
    let summary = grid
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let (test_mean, test_std) = mean_std(&per_entry(&rows, e).filter_map(|r| r.test_acc).collect::<Vec<_>>());
            SummaryRow {
                config: e.name.clone(),
                runs: per_entry(&rows, e).count(),
                failed: per_entry(&rows, e).filter(|r| r.error.is_some()).count(),
                val_mean: val_stats[i].0,
                val_std: val_stats[i].1,
                test_mean,
                test_std,
                selected: selected == Some(i),
                checkpoint: "final".into(),
            }
        })
        .collect();
    Ok(SweepResult { rows, summary, protocol })
}

pub fn write_rows_csv<T: Serialize, W: Write>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary_csv<R: Read>(input: R) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(SlaError::from)).collect()
}
