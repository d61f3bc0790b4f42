//! Multi-seed experiments behind the directional checks, and the
//! expected-results file that pins their calibrated values.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{adapted_label_summary, center_audit, kl_trace, mean_std, CenterAudit};
use crate::data::{generate_task, DomainSpec, SsdaTask};
use crate::error::{Result, SlaError};
use crate::trainer::{train, train_ideally_adapted, train_oracle, Method, RunRecord, SchedulerRefresh, TrainConfig};

pub const EXPECTED_FORMAT: &str = "sla-expected";
pub const EXPECTED_VERSION: u32 = 1;

/// Shared inputs of every experiment: the domain, shot count, seeds and
/// base training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Setup {
    pub domain: DomainSpec,
    pub n_shot: usize,
    pub seeds: Vec<u64>,
    pub base: TrainConfig,
    pub entropy_weight: f64,
}

impl Default for Setup {
    fn default() -> Self {
        Self {
            domain: DomainSpec::default(),
            n_shot: 3,
            seeds: (0..5).collect(),
            base: TrainConfig::default(),
            entropy_weight: 0.1,
        }
    }
}

impl Setup {
    pub fn tasks(&self) -> Result<Vec<SsdaTask>> {
        self.seeds.par_iter().map(|&s| generate_task(&self.domain, self.n_shot, s)).collect()
    }

    pub fn config(&self, method: Method, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig { seed, ..self.base.clone() };
        method.configure(&mut cfg, self.entropy_weight);
        cfg
    }

    pub fn provenance(&self) -> Provenance {
        let digest = Sha256::digest(serde_json::to_vec(&self.base).expect("config serializes"));
        Provenance {
            domain_hash: self.domain.hash(),
            base_config_hash: hex::encode(&digest[..8]),
            n_shot: self.n_shot,
            seeds: self.seeds.clone(),
            entropy_weight: self.entropy_weight,
        }
    }

    fn per_seed<T: Send>(&self, f: impl Fn(&SsdaTask, u64) -> Result<T> + Sync) -> Result<Vec<T>> {
        let tasks = self.tasks()?;
        tasks.par_iter().zip(&self.seeds).map(|(t, &s)| f(t, s)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub domain_hash: String,
    pub base_config_hash: String,
    pub n_shot: usize,
    pub seeds: Vec<u64>,
    pub entropy_weight: f64,
}

pub fn mean(values: &[f64]) -> f64 {
    mean_std(values).0
}

/// S+T against S+T trained on oracle soft labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdealGap {
    pub st: Vec<f64>,
    pub ideal: Vec<f64>,
    pub oracle: Vec<f64>,
}

impl IdealGap {
    pub fn gap(&self) -> f64 {
        mean(&self.ideal) - mean(&self.st)
    }
}

pub fn ideal_gap(setup: &Setup) -> Result<IdealGap> {
    let rows = setup.per_seed(|task, seed| {
        let cfg = setup.config(Method::St, seed);
        let st = train(task, &cfg)?;
        let oracle = train_oracle(task, &cfg)?;
        let ideal = train_ideally_adapted(task, &cfg, &oracle)?;
        Ok((st.final_test_acc, ideal.final_test_acc, crate::analysis::accuracy(&oracle, &task.test)?))
    })?;
    Ok(IdealGap {
        st: rows.iter().map(|r| r.0).collect(),
        ideal: rows.iter().map(|r| r.1).collect(),
        oracle: rows.iter().map(|r| r.2).collect(),
    })
}

fn st_runs(setup: &Setup) -> Result<Vec<(SsdaTask, RunRecord)>> {
    let tasks = setup.tasks()?;
    tasks
        .into_par_iter()
        .zip(setup.seeds.par_iter())
        .map(|(task, &seed)| {
            let run = train(&task, &setup.config(Method::St, seed))?;
            Ok((task, run))
        })
        .collect()
}

/// Center audits of the final S+T model, one per seed.
pub fn center_distances(setup: &Setup) -> Result<Vec<CenterAudit>> {
    st_runs(setup)?.iter().map(|(task, run)| center_audit(run.model(), task)).collect()
}

/// Smoothed source KL of S+T runs at a reference step and at the end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlCollapse {
    pub reference_step: usize,
    pub at_reference: Vec<f64>,
    pub at_end: Vec<f64>,
}

impl KlCollapse {
    pub fn ratios(&self) -> Vec<f64> {
        self.at_end.iter().zip(&self.at_reference).map(|(e, r)| e / r).collect()
    }
}

pub fn kl_collapse(setup: &Setup, reference_step: usize) -> Result<KlCollapse> {
    let mut at_reference = Vec::new();
    let mut at_end = Vec::new();
    for (_, run) in st_runs(setup)? {
        let trace = kl_trace(&run)?;
        let r = trace
            .get(reference_step.saturating_sub(1))
            .ok_or_else(|| SlaError::State(format!("run shorter than step {reference_step}")))?;
        at_reference.push(r.ema);
        at_end.push(trace.last().expect("nonempty trace").ema);
    }
    Ok(KlCollapse { reference_step, at_reference, at_end })
}

/// Final test accuracy of the four main methods at one warmup length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MainEffect {
    pub warmup: usize,
    pub st: Vec<f64>,
    pub ent: Vec<f64>,
    pub sla: Vec<f64>,
    pub sla_ent: Vec<f64>,
    pub sla_val: Vec<f64>,
    pub sla_ent_val: Vec<f64>,
}

pub fn main_effect(setup: &Setup, warmup: usize) -> Result<MainEffect> {
    let rows = setup.per_seed(|task, seed| {
        let mut out = Vec::with_capacity(4);
        for m in [Method::St, Method::Ent, Method::Sla, Method::SlaEnt] {
            let mut cfg = setup.config(m, seed);
            cfg.sla.warmup = warmup;
            let r = train(task, &cfg)?;
            out.push((r.final_test_acc, r.final_val_acc));
        }
        Ok(out)
    })?;
    let col = |i: usize| rows.iter().map(|r| r[i].0).collect::<Vec<_>>();
    Ok(MainEffect {
        warmup,
        st: col(0),
        ent: col(1),
        sla: col(2),
        sla_ent: col(3),
        sla_val: rows.iter().map(|r| r[2].1).collect(),
        sla_ent_val: rows.iter().map(|r| r[3].1).collect(),
    })
}

/// SLA at several warmup lengths with a fixed post-warmup budget, plus
/// self-prediction correction after the longest warmup against S+T of
/// the same length and learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupSensitivity {
    pub warmups: Vec<usize>,
    pub post_iters: usize,
    /// `sla[i][s]`: warmup `warmups[i]`, seed index `s`.
    pub sla: Vec<Vec<f64>>,
    pub self_pred: Vec<f64>,
    pub st_same_schedule: Vec<f64>,
}

impl WarmupSensitivity {
    /// Mean accuracy gain of the longest warmup over the shortest.
    pub fn long_minus_short(&self) -> f64 {
        mean(self.sla.last().expect("warmups")) - mean(&self.sla[0])
    }

    /// Standard error of the per-seed paired difference behind
    /// [`Self::long_minus_short`].
    pub fn paired_std_error(&self) -> f64 {
        let diffs: Vec<f64> =
            self.sla.last().expect("warmups").iter().zip(&self.sla[0]).map(|(l, s)| l - s).collect();
        let n = diffs.len() as f64;
        if n < 2.0 {
            return 0.0;
        }
        let m = diffs.iter().sum::<f64>() / n;
        (diffs.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
    }

    pub fn self_pred_gap(&self) -> f64 {
        (mean(&self.self_pred) - mean(&self.st_same_schedule)).abs()
    }
}

pub fn warmup_sensitivity(setup: &Setup, warmups: &[usize], post_iters: usize) -> Result<WarmupSensitivity> {
    if warmups.is_empty() || post_iters == 0 {
        return Err(SlaError::Config("need at least one warmup and a positive post-warmup budget".into()));
    }
    let longest = *warmups.iter().max().expect("nonempty");
    let rows = setup.per_seed(|task, seed| {
        let mut sla = Vec::with_capacity(warmups.len());
        for &w in warmups {
            let mut cfg = setup.config(Method::Sla, seed);
            cfg.sla.warmup = w;
            cfg.total_iters = w + post_iters;
            sla.push(train(task, &cfg)?.final_test_acc);
        }
        let mut sp = setup.config(Method::SelfPred, seed);
        sp.sla.warmup = longest;
        sp.total_iters = longest + post_iters;
        let self_pred = train(task, &sp)?.final_test_acc;
        let mut st = setup.config(Method::St, seed);
        st.sla.warmup = longest;
        st.total_iters = longest + post_iters;
        st.scheduler_refresh = SchedulerRefresh::Always;
        let st = train(task, &st)?.final_test_acc;
        Ok((sla, self_pred, st))
    })?;
    Ok(WarmupSensitivity {
        warmups: warmups.to_vec(),
        post_iters,
        sla: (0..warmups.len()).map(|i| rows.iter().map(|r| r.0[i]).collect()).collect(),
        self_pred: rows.iter().map(|r| r.1).collect(),
        st_same_schedule: rows.iter().map(|r| r.2).collect(),
    })
}

/// Per seed, the fraction of classes whose mean PPC-adapted source label
/// is closer to the oracle-adapted one than the one-hot label is.
pub fn label_closeness(setup: &Setup, warmup: usize) -> Result<Vec<f64>> {
    setup.per_seed(|task, seed| {
        let mut cfg = setup.config(Method::Sla, seed);
        cfg.sla.warmup = warmup;
        let run = train(task, &cfg)?;
        let ppc = run.last_ppc.as_ref().ok_or_else(|| SlaError::State("SLA run built no PPC".into()))?;
        let oracle = train_oracle(task, &cfg)?;
        Ok(adapted_label_summary(run.model(), task, ppc, &oracle, cfg.sla.alpha)?.closer_fraction())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedIdealGap {
    pub st_mean: f64,
    pub ideal_mean: f64,
    pub min_gap: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedCenters {
    pub labeled_means: Vec<f64>,
    pub pseudo_means: Vec<f64>,
    pub min_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedKl {
    pub reference_step: usize,
    pub max_ratio: f64,
    pub ratios: Vec<f64>,
    pub min_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedMainEffect {
    pub warmup: usize,
    pub candidates: Vec<usize>,
    pub st_mean: f64,
    pub ent_mean: f64,
    pub sla_mean: f64,
    pub sla_ent_mean: f64,
    pub min_margin: f64,
    pub tolerance: f64,
}

impl ExpectedMainEffect {
    /// Mean test accuracy by sweep row name.
    pub fn by_name(&self, name: &str) -> Option<f64> {
        match name {
            "st" => Some(self.st_mean),
            "ent" => Some(self.ent_mean),
            "sla" => Some(self.sla_mean),
            "sla+ent" => Some(self.sla_ent_mean),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedWarmup {
    pub warmups: Vec<usize>,
    pub post_iters: usize,
    pub sla_means: Vec<f64>,
    pub noise_band: f64,
    pub self_pred_mean: f64,
    pub st_same_schedule_mean: f64,
    pub max_self_pred_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedLabels {
    pub closer_fractions: Vec<f64>,
    pub min_fraction: f64,
}

/// Calibrated values and thresholds for the directional checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedResults {
    pub format: String,
    pub version: u32,
    pub provenance: Provenance,
    pub ideal_gap: ExpectedIdealGap,
    pub centers: ExpectedCenters,
    pub kl: ExpectedKl,
    pub main_effect: ExpectedMainEffect,
    pub warmup: ExpectedWarmup,
    pub labels: ExpectedLabels,
}

impl ExpectedResults {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let exp: Self = serde_json::from_str(&text)?;
        if exp.format != EXPECTED_FORMAT {
            return Err(SlaError::Load(format!("{} is not an expected-results file", path.display())));
        }
        if exp.version != EXPECTED_VERSION {
            return Err(SlaError::Version { found: exp.version, expected: EXPECTED_VERSION });
        }
        Ok(exp)
    }

    /// Fails if the file was calibrated for a different setup.
    pub fn check_provenance(&self, setup: &Setup) -> Result<()> {
        let now = setup.provenance();
        if now != self.provenance {
            return Err(SlaError::State(format!(
                "expected results were calibrated for {:?}, current setup is {:?}",
                self.provenance, now
            )));
        }
        Ok(())
    }
}

/// Knobs of a calibration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPlan {
    pub warmup_candidates: Vec<usize>,
    pub kl_reference_step: usize,
    pub sensitivity_fractions: Vec<f64>,
    pub post_iters: usize,
}

impl Default for CalibrationPlan {
    fn default() -> Self {
        Self {
            warmup_candidates: vec![250, 500, 1000, 2000],
            kl_reference_step: 100,
            sensitivity_fractions: vec![0.1, 0.5, 1.0],
            post_iters: 2500,
        }
    }
}

/// Runs every experiment once and records the values the checks compare
/// against. The main-effect warmup is picked by mean validation accuracy
/// of the two SLA variants.
pub fn calibrate(setup: &Setup, plan: &CalibrationPlan) -> Result<ExpectedResults> {
    if plan.warmup_candidates.is_empty() {
        return Err(SlaError::Config("need at least one warmup candidate".into()));
    }
    let gap = ideal_gap(setup)?;
    let audits = center_distances(setup)?;
    let kl = kl_collapse(setup, plan.kl_reference_step)?;

    let mut best: Option<(f64, MainEffect)> = None;
    for &w in &plan.warmup_candidates {
        let me = main_effect(setup, w)?;
        let score = mean(&me.sla_val) + mean(&me.sla_ent_val);
        if best.as_ref().map_or(true, |(b, _)| score > *b) {
            best = Some((score, me));
        }
    }
    let (_, me) = best.expect("at least one candidate");

    let budget = setup.base.total_iters as f64;
    let warmups: Vec<usize> = plan.sensitivity_fractions.iter().map(|f| (f * budget).round() as usize).collect();
    let ws = warmup_sensitivity(setup, &warmups, plan.post_iters)?;
    let labels = label_closeness(setup, me.warmup)?;

    Ok(ExpectedResults {
        format: EXPECTED_FORMAT.into(),
        version: EXPECTED_VERSION,
        provenance: setup.provenance(),
        ideal_gap: ExpectedIdealGap {
            st_mean: mean(&gap.st),
            ideal_mean: mean(&gap.ideal),
            min_gap: 0.10,
            tolerance: 0.03,
        },
        centers: ExpectedCenters {
            labeled_means: audits.iter().map(|a| a.mean_ideal_to_labeled).collect(),
            pseudo_means: audits.iter().map(|a| a.mean_ideal_to_pseudo).collect(),
            min_seeds: 4,
        },
        kl: ExpectedKl { reference_step: plan.kl_reference_step, max_ratio: 0.10, ratios: kl.ratios(), min_seeds: 4 },
        main_effect: ExpectedMainEffect {
            warmup: me.warmup,
            candidates: plan.warmup_candidates.clone(),
            st_mean: mean(&me.st),
            ent_mean: mean(&me.ent),
            sla_mean: mean(&me.sla),
            sla_ent_mean: mean(&me.sla_ent),
            min_margin: 0.01,
            tolerance: 0.01,
        },
        warmup: ExpectedWarmup {
            warmups: ws.warmups.clone(),
            post_iters: ws.post_iters,
            sla_means: ws.sla.iter().map(|v| mean(v)).collect(),
            noise_band: (2.0 * ws.paired_std_error()).max(0.01),
            self_pred_mean: mean(&ws.self_pred),
            st_same_schedule_mean: mean(&ws.st_same_schedule),
            max_self_pred_gap: 0.01,
        },
        labels: ExpectedLabels { closer_fractions: labels, min_fraction: 0.8 },
    })
}
