#![allow(dead_code)]

pub mod properties;

use sla_core::mathcore::{softmax, Rng, SoftLabel};
use sla_core::nnet::{backward_ce, backward_entropy, Model, ModelConfig};

pub const FD_STEP: f64 = 1e-5;

pub fn small_model(rng: &mut Rng) -> Model {
    let cfg = ModelConfig { hidden: vec![4], features: 4, ..ModelConfig::new(3, 3) };
    Model::new(&cfg, rng).unwrap()
}

fn random_batch(rng: &mut Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.normal() * 1.5).collect()).collect()
}

fn random_label(rng: &mut Rng, k: usize) -> SoftLabel {
    let logits: Vec<f64> = (0..k).map(|_| rng.normal() * 2.0).collect();
    softmax(&logits).unwrap()
}

/// Relative error, falling back to absolute error when both sides are tiny.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-8 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

fn max_fd_error(model: &Model, analytic: &[f64], loss: impl Fn(&Model) -> f64) -> f64 {
    let base = model.params();
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (i, g) in analytic.iter().enumerate() {
        let mut p = base.clone();
        p[i] = base[i] + FD_STEP;
        probe.set_params(&p).unwrap();
        let up = loss(&probe);
        p[i] = base[i] - FD_STEP;
        probe.set_params(&p).unwrap();
        let down = loss(&probe);
        worst = worst.max(rel_err(*g, (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

/// Max relative error of the soft cross-entropy gradient on one random instance.
pub fn ce_instance(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let model = small_model(&mut rng);
    let xs = random_batch(&mut rng, 5, 3);
    let targets: Vec<SoftLabel> = (0..5).map(|_| random_label(&mut rng, 3)).collect();
    let weights: Vec<f64> = (0..5).map(|_| rng.uniform(0.2, 1.2)).collect();
    let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
    let (grads, _) = backward_ce(&model, &refs, &targets, &weights).unwrap();
    max_fd_error(&model, &grads.flatten(), |m| backward_ce(m, &refs, &targets, &weights).unwrap().1)
}

/// Max relative error of the mean-entropy gradient on one random instance.
pub fn entropy_instance(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let model = small_model(&mut rng);
    let xs = random_batch(&mut rng, 5, 3);
    let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
    let (grads, _) = backward_entropy(&model, &refs).unwrap();
    max_fd_error(&model, &grads.flatten(), |m| backward_entropy(m, &refs).unwrap().1)
}

use sla_core::data::{generate_task, DomainSpec, SsdaTask};
use sla_core::sla::CorrectionMode;
use sla_core::trainer::{train, train_for, SchedulerRefresh, TrainConfig};

pub fn small_task(seed: u64) -> SsdaTask {
    let spec = DomainSpec { source_per_class: 60, unlabeled_per_class: 60, test_per_class: 40, ..DomainSpec::default() };
    generate_task(&spec, 3, seed).unwrap()
}

pub fn short_config(seed: u64, warmup: usize, total: usize) -> TrainConfig {
    let mut cfg = TrainConfig { seed, total_iters: total, eval_every: 25, ..TrainConfig::default() };
    cfg.sla.warmup = warmup;
    cfg.sla.update_interval = 50;
    cfg
}

/// Parameters after the first `warmup` iterations of an SLA run and of the
/// same-seed S+T run are bitwise equal.
pub fn warmup_prefix_matches(task: &SsdaTask, seed: u64, warmup: usize) -> bool {
    let st = short_config(seed, warmup, warmup + 100);
    let mut sla = st.clone();
    sla.sla.mode = CorrectionMode::Ppc;
    let a = train_for(task, &st, warmup).unwrap();
    let b = train_for(task, &sla, warmup).unwrap();
    let bits = |m: &sla_core::nnet::Model| m.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    bits(a.model()) == bits(b.model()) && a.kl_trace == b.kl_trace
}

/// An SLA run with `alpha = 0` reproduces the S+T metric stream when both
/// refresh the learning-rate schedule at `W + 1`.
pub fn alpha_zero_matches_st(task: &SsdaTask, seed: u64) -> bool {
    let mut st = short_config(seed, 100, 300);
    st.scheduler_refresh = SchedulerRefresh::Always;
    let mut sla = st.clone();
    sla.sla.mode = CorrectionMode::Ppc;
    sla.sla.alpha = 0.0;
    let a = train(task, &st).unwrap();
    let b = train(task, &sla).unwrap();
    !b.refreshes.is_empty() && a.metrics == b.metrics && a.kl_trace == b.kl_trace && a.final_model == b.final_model
}
