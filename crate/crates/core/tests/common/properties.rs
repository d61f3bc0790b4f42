//! Randomized invariant suite shared by the property tests and the
//! acceptance run. Every property uses a fixed-seed runner.

use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

use sla_core::analysis::{
    center_audit, evaluate_with, kl_trace_from, read_summary_csv, write_rows_csv, SummaryRow,
};
use sla_core::data::{generate_task, BatchSizes, DomainSpec, LabeledExample, SsdaTask};
use sla_core::mathcore::{cross_entropy_soft, kl_divergence, softmax, FeatureVec, Rng, SoftLabel};
use sla_core::nnet::{backward_ce, sgd_step, Model, ModelConfig, OptConfig, SgdState};
use sla_core::sla::{adapt_label, protonet_as_linear, protonet_predict, CenterSource, CorrectionMode, ProtoState};
use sla_core::trainer::{train, train_for, train_oracle, SchedulerRefresh, TrainConfig};

pub const CASES: u32 = 1000;

pub struct PropertyOutcome {
    pub name: &'static str,
    pub result: Result<(), String>,
    pub secs: f64,
}

fn runner(cases: u32, salt: u8) -> TestRunner {
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(config, TestRng::from_seed(RngAlgorithm::ChaCha, &[salt; 32]))
}

fn check<S: Strategy>(
    name: &'static str,
    cases: u32,
    salt: u8,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> PropertyOutcome {
    let started = Instant::now();
    let result = runner(cases, salt).run(&strategy, test).map_err(|e| e.to_string());
    PropertyOutcome { name, result, secs: started.elapsed().as_secs_f64() }
}

fn simplex(k: usize) -> impl Strategy<Value = SoftLabel> {
    prop::collection::vec(0.01f64..1.0, k).prop_map(|v| {
        let s: f64 = v.iter().sum();
        SoftLabel::new(v.into_iter().map(|x| x / s).collect()).unwrap()
    })
}

fn simplex_pair() -> impl Strategy<Value = (SoftLabel, SoftLabel)> {
    (2usize..8).prop_flat_map(|k| (simplex(k), simplex(k)))
}

fn ok(r: sla_core::Result<impl Sized>) -> Result<(), TestCaseError> {
    r.map(|_| ()).map_err(|e| TestCaseError::fail(e.to_string()))
}

fn tiny_spec() -> DomainSpec {
    DomainSpec { source_per_class: 10, unlabeled_per_class: 10, test_per_class: 6, ..DomainSpec::default() }
}

fn tiny_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        seed,
        total_iters: 12,
        eval_every: 4,
        oracle_iters: 4,
        batch: BatchSizes { source: 8, labeled: 8, unlabeled: 8 },
        ..TrainConfig::default()
    };
    cfg.sla.warmup = 6;
    cfg.sla.update_interval = 3;
    cfg
}

fn tiny_task(seed: u64) -> SsdaTask {
    generate_task(&tiny_spec(), 3, seed).unwrap()
}

fn small_model(seed: u64) -> Model {
    let cfg = ModelConfig { hidden: vec![5], features: 4, ..ModelConfig::new(3, 4) };
    Model::new(&cfg, &mut Rng::new(seed)).unwrap()
}

fn bits(m: &Model) -> Vec<u64> {
    m.params().iter().map(|v| v.to_bits()).collect()
}

/// Nearest-source-mean error on the target test split, recomputed here.
fn source_only_error(task: &SsdaTask) -> f64 {
    let k = task.classes();
    let dim = task.input_dim();
    let mut means = vec![vec![0.0; dim]; k];
    let mut counts = vec![0.0; k];
    for e in &task.source {
        counts[e.class] += 1.0;
        for (m, v) in means[e.class].iter_mut().zip(&e.x) {
            *m += v;
        }
    }
    for (m, n) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= n);
    }
    let wrong = task
        .test
        .iter()
        .filter(|e| {
            let d: Vec<f64> = means.iter().map(|m| m.iter().zip(&e.x).map(|(a, b)| (a - b) * (a - b)).sum()).collect();
            sla_core::mathcore::argmax(&d.iter().map(|v| -v).collect::<Vec<_>>()) != e.class
        })
        .count();
    wrong as f64 / task.test.len() as f64
}

pub fn mathcore_suite(cases: u32) -> Vec<PropertyOutcome> {
    vec![
        check("softmax output is a valid label", cases, 1, prop::collection::vec(-1e3f64..1e3, 2..10), |z| {
            let p = softmax(&z).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert!(p.probs().iter().all(|v| *v >= 0.0 && v.is_finite()));
            prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            Ok(())
        }),
        check(
            "softmax is shift invariant",
            cases,
            2,
            (prop::collection::vec(-30f64..30.0, 2..10), -50f64..50.0),
            |(z, c)| {
                let a = softmax(&z).unwrap();
                let b = softmax(&z.iter().map(|v| v + c).collect::<Vec<_>>()).unwrap();
                for (x, y) in a.probs().iter().zip(b.probs()) {
                    prop_assert!((x - y).abs() < 1e-12, "{x} vs {y}");
                }
                Ok(())
            },
        ),
        check("cross entropy splits into KL plus entropy", cases, 3, simplex_pair(), |(p, t)| {
            let h = cross_entropy_soft(&p, &t).unwrap();
            let kl = kl_divergence(&t, &p).unwrap();
            prop_assert!((h - (kl + t.entropy())).abs() < 1e-9);
            Ok(())
        }),
        check("KL is nonnegative and zero on equal inputs", cases, 4, simplex_pair(), |(p, t)| {
            prop_assert!(kl_divergence(&p, &t).unwrap() >= 0.0);
            prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-15);
            Ok(())
        }),
        check("same seed gives the same stream", cases.min(200), 5, any::<u64>(), |seed| {
            let (mut a, mut b) = (Rng::new(seed), Rng::new(seed));
            for _ in 0..1000 {
                prop_assert_eq!(a.next_u64(), b.next_u64());
            }
            Ok(())
        }),
    ]
}

pub fn nnet_suite(cases: u32) -> Vec<PropertyOutcome> {
    vec![
        check(
            "scaling the head sharpens predictions",
            cases,
            11,
            (any::<u64>(), prop::collection::vec(-2f64..2.0, 3), 1.1f64..5.0),
            |(seed, x, c)| {
                let m = small_model(seed);
                let before = m.forward(&x).unwrap();
                let z = m.logits(&x).unwrap();
                let spread = z.iter().cloned().fold(f64::MIN, f64::max) - z.iter().cloned().fold(f64::MAX, f64::min);
                prop_assume!(spread > 1e-6 && before.entropy() > 1e-9);
                let mut sharp = m.clone();
                let head = sharp.head_mut();
                head.weight.iter_mut().for_each(|w| *w *= c);
                head.bias.iter_mut().for_each(|b| *b *= c);
                prop_assert!(sharp.forward(&x).unwrap().entropy() < before.entropy());
                Ok(())
            },
        ),
        check("training steps are deterministic", cases, 12, (any::<u64>(), 1usize..6), |(seed, steps)| {
            let run = || {
                let mut m = small_model(seed);
                let mut rng = Rng::stream(seed, 1);
                let xs: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
                let ts: Vec<SoftLabel> = (0..4).map(|i| SoftLabel::one_hot(4, i % 4).unwrap()).collect();
                let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
                let mut opt = SgdState::new(OptConfig::default(), &m).unwrap();
                for _ in 0..steps {
                    let (g, _) = backward_ce(&m, &refs, &ts, &[1.0; 4]).unwrap();
                    sgd_step(&mut m, &g, &mut opt).unwrap();
                }
                bits(&m)
            };
            prop_assert_eq!(run(), run());
            Ok(())
        }),
        check(
            "learning rate starts at base and never increases",
            cases,
            13,
            (1e-4f64..1.0, 0f64..1e-2, 0f64..2.0, 0usize..100_000),
            |(base_lr, decay_gamma, decay_power, t)| {
                let cfg = OptConfig { base_lr, momentum: 0.9, decay_gamma, decay_power };
                let opt = SgdState::new(cfg, &small_model(0)).unwrap();
                prop_assert_eq!(opt.lr_at(0), base_lr);
                prop_assert!(opt.lr_at(t + 1) <= opt.lr_at(t));
                prop_assert!(opt.lr_at(t) > 0.0);
                Ok(())
            },
        ),
    ]
}

pub fn data_suite(cases: u32) -> Vec<PropertyOutcome> {
    vec![
        check("labeled target is class balanced", cases, 21, (any::<u64>(), prop::bool::ANY), |(seed, one)| {
            let n_shot = if one { 1 } else { 3 };
            let task = generate_task(&tiny_spec(), n_shot, seed).unwrap();
            for k in 0..task.classes() {
                prop_assert_eq!(task.labeled_target.iter().filter(|e| e.class == k).count(), n_shot);
            }
            Ok(())
        }),
        check("generation is deterministic", cases, 22, any::<u64>(), |seed| {
            prop_assert_eq!(tiny_task(seed), tiny_task(seed));
            Ok(())
        }),
        check("default spec is misaligned for a source-only classifier", cases, 23, any::<u64>(), |seed| {
            let task = generate_task(&DomainSpec::default(), 3, seed).unwrap();
            let err = source_only_error(&task);
            prop_assert!(err >= 0.2, "source-only error {err}");
            Ok(())
        }),
    ]
}

pub fn sla_suite(cases: u32) -> Vec<PropertyOutcome> {
    let alpha_grid = prop::sample::select(vec![0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0]);
    vec![
        check("adapted label stays on the simplex", cases, 31, (simplex_pair(), alpha_grid.clone()), |((y, c), a)| {
            let out = adapt_label(&y, &c, a).unwrap();
            prop_assert!(out.probs().iter().all(|v| *v >= 0.0));
            prop_assert!((out.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            Ok(())
        }),
        check("adaptation keeps an agreed argmax", cases, 32, ((2usize..8).prop_flat_map(simplex), 0f64..=1.0), |(c, a)| {
            let y = SoftLabel::one_hot(c.classes(), c.argmax()).unwrap();
            prop_assert_eq!(adapt_label(&y, &c, a).unwrap().argmax(), c.argmax());
            Ok(())
        }),
        check(
            "protonet equals its linear form",
            cases,
            33,
            (2usize..6, 1usize..6, 0.05f64..3.0).prop_flat_map(|(k, f, t)| {
                (prop::collection::vec(prop::collection::vec(-3f64..3.0, f), k), prop::collection::vec(-3f64..3.0, f), Just(t))
            }),
            |(centers, feat, t)| {
                let centers = centers.into_iter().map(|c| FeatureVec::new(c).unwrap()).collect();
                let state = ProtoState::new(centers, t, CenterSource::PseudoCenters, 0).unwrap();
                let feat = FeatureVec::new(feat).unwrap();
                let direct = protonet_predict(&state, &feat).unwrap();
                let (w, b) = protonet_as_linear(&state);
                let f = feat.dim();
                let z: Vec<f64> = b
                    .iter()
                    .enumerate()
                    .map(|(k, bk)| bk + w[k * f..(k + 1) * f].iter().zip(feat.values()).map(|(a, x)| a * x).sum::<f64>())
                    .collect();
                let linear = softmax(&z).unwrap();
                for (a, b) in direct.probs().iter().zip(linear.probs()) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
                Ok(())
            },
        ),
        check(
            "higher temperature sharpens the protonet",
            cases,
            34,
            (prop::collection::vec(prop::collection::vec(-3f64..3.0, 3), 3), prop::collection::vec(-3f64..3.0, 3), 0.1f64..2.0, 1.1f64..3.0),
            |(centers, feat, t, factor)| {
                let centers: Vec<FeatureVec> = centers.into_iter().map(|c| FeatureVec::new(c).unwrap()).collect();
                let feat = FeatureVec::new(feat).unwrap();
                let mut d: Vec<f64> = centers
                    .iter()
                    .map(|c| c.values().iter().zip(feat.values()).map(|(a, b)| (a - b) * (a - b)).sum())
                    .collect();
                d.sort_by(f64::total_cmp);
                prop_assume!(d.windows(2).all(|w| w[1] - w[0] > 1e-3));
                let lo = ProtoState::new(centers.clone(), t, CenterSource::LabeledTarget, 0).unwrap();
                let hi = ProtoState::new(centers, t * factor, CenterSource::LabeledTarget, 0).unwrap();
                let (p, q) = (protonet_predict(&lo, &feat).unwrap(), protonet_predict(&hi, &feat).unwrap());
                prop_assume!(p.probs()[p.argmax()] < 1.0 - 1e-12);
                prop_assert!(q.probs()[q.argmax()] > p.probs()[p.argmax()]);
                Ok(())
            },
        ),
        check("center refreshes are reproducible", cases, 35, any::<u64>(), |seed| {
            let task = tiny_task(seed % 64);
            let mut cfg = tiny_config(seed);
            cfg.sla.mode = CorrectionMode::Ppc;
            let (a, b) = (train(&task, &cfg).unwrap(), train(&task, &cfg).unwrap());
            prop_assert!(!a.refreshes.is_empty());
            prop_assert_eq!(&a.refreshes, &b.refreshes);
            prop_assert_eq!(&a.last_ppc, &b.last_ppc);
            Ok(())
        }),
    ]
}

pub fn trainer_suite(cases: u32) -> Vec<PropertyOutcome> {
    let tasks: Vec<SsdaTask> = (0..8).map(tiny_task).collect();
    vec![
        check("warmup prefix matches plain training", cases, 41, (any::<u64>(), 0usize..8, 1usize..7), |(seed, t, e)| {
            let task = &tasks[t];
            let st = tiny_config(seed);
            let mut sla = st.clone();
            sla.sla.mode = CorrectionMode::Ppc;
            let stop = e.min(st.sla.warmup);
            let (a, b) = (train_for(task, &st, stop).unwrap(), train_for(task, &sla, stop).unwrap());
            prop_assert_eq!(bits(a.model()), bits(b.model()));
            Ok(())
        }),
        check("zero alpha matches plain training", cases, 42, (any::<u64>(), 0usize..8), |(seed, t)| {
            let task = &tasks[t];
            let mut st = tiny_config(seed);
            st.scheduler_refresh = SchedulerRefresh::Always;
            let mut sla = st.clone();
            sla.sla.mode = CorrectionMode::Ppc;
            sla.sla.alpha = 0.0;
            let (a, b) = (train(task, &st).unwrap(), train(task, &sla).unwrap());
            prop_assert_eq!(&a.metrics, &b.metrics);
            prop_assert_eq!(&a.kl_trace, &b.kl_trace);
            Ok(())
        }),
        check("loss components add up", cases, 43, (any::<u64>(), 0usize..8, 0usize..4), |(seed, t, m)| {
            let mut cfg = tiny_config(seed);
            let methods = [sla_core::trainer::Method::St, sla_core::trainer::Method::Ent, sla_core::trainer::Method::Sla, sla_core::trainer::Method::SlaEnt];
            methods[m].configure(&mut cfg, 0.1);
            let run = train(&tasks[t], &cfg).unwrap();
            for p in &run.metrics {
                prop_assert!((p.loss_total - (p.loss_source + p.loss_labeled + p.loss_unlabeled)).abs() < 1e-9);
            }
            Ok(())
        }),
        check("runs are reproducible and never read audit labels", cases, 44, (any::<u64>(), 0usize..64), |(seed, t)| {
            let task = tiny_task(t as u64);
            let mut cfg = tiny_config(seed);
            cfg.sla.mode = CorrectionMode::Ppc;
            let (a, b) = (train(&task, &cfg).unwrap(), train(&task, &cfg).unwrap());
            prop_assert_eq!(&a, &b);
            prop_assert!(task.audit_log().is_empty());
            let _oracle = train_oracle(&task, &cfg).unwrap();
            let log = task.audit_log();
            prop_assert_eq!(log.len(), 1);
            prop_assert!(log[0].contains("train_oracle"));
            Ok(())
        }),
    ]
}

pub fn analysis_suite(cases: u32) -> Vec<PropertyOutcome> {
    let task = tiny_task(3);
    let model = Model::new(&TrainConfig::default().arch.model_config(2, 5), &mut Rng::new(9)).unwrap();
    vec![
        check(
            "confusion matrix totals and accuracy agree",
            cases,
            51,
            prop::collection::vec((0usize..4, 0usize..4), 1..60),
            |pairs| {
                let data: Vec<LabeledExample> =
                    pairs.iter().enumerate().map(|(i, (c, _))| LabeledExample { x: vec![i as f64], class: *c }).collect();
                let (acc, cm) = evaluate_with(&data, 4, |x| Ok(pairs[x[0] as usize].1)).unwrap();
                prop_assert_eq!(cm.total(), data.len());
                prop_assert_eq!(acc, cm.correct() as f64 / cm.total() as f64);
                for row in cm.percentages() {
                    let s: f64 = row.iter().sum();
                    prop_assert!(s == 0.0 || (s - 100.0).abs() < 0.1);
                }
                Ok(())
            },
        ),
        check("center audit ignores dataset order", cases.min(300), 52, any::<u64>(), |seed| {
            let base = center_audit(&model, &task).unwrap();
            let mut shuffled = task.clone();
            let mut rng = Rng::new(seed);
            rng.shuffle(&mut shuffled.labeled_target);
            rng.shuffle(&mut shuffled.unlabeled);
            let other = center_audit(&model, &shuffled).unwrap();
            prop_assert!((base.mean_ideal_to_labeled - other.mean_ideal_to_labeled).abs() < 1e-9);
            prop_assert!((base.mean_ideal_to_pseudo - other.mean_ideal_to_pseudo).abs() < 1e-9);
            Ok(())
        }),
        check("smoothed KL stays inside the raw prefix range", cases, 53, prop::collection::vec(0f64..5.0, 1..200), |raw| {
            let trace = kl_trace_from(&raw).unwrap();
            prop_assert_eq!(trace.len(), raw.len());
            let (mut lo, mut hi) = (f64::MAX, f64::MIN);
            for (p, r) in trace.iter().zip(&raw) {
                lo = lo.min(*r);
                hi = hi.max(*r);
                prop_assert!(p.ema >= lo - 1e-12 && p.ema <= hi + 1e-12);
            }
            Ok(())
        }),
        check(
            "summary CSV round-trips",
            cases,
            54,
            prop::collection::vec(("[a-z+]{1,8}", 0usize..10, 0usize..3, 0f64..1.0, 0f64..0.5, 0f64..1.0, 0f64..0.5, any::<bool>()), 1..6),
            |rows| {
                let rows: Vec<SummaryRow> = rows
                    .into_iter()
                    .map(|(config, runs, failed, val_mean, val_std, test_mean, test_std, selected)| SummaryRow {
                        config,
                        runs,
                        failed,
                        val_mean,
                        val_std,
                        test_mean,
                        test_std,
                        selected,
                        checkpoint: "final".into(),
                    })
                    .collect();
                let mut buf = Vec::new();
                ok(write_rows_csv(&rows, &mut buf))?;
                prop_assert_eq!(read_summary_csv(buf.as_slice()).unwrap(), rows);
                Ok(())
            },
        ),
    ]
}

pub fn full_suite(cases: u32) -> Vec<PropertyOutcome> {
    let mut all = mathcore_suite(cases);
    all.extend(nnet_suite(cases));
    all.extend(data_suite(cases));
    all.extend(sla_suite(cases));
    all.extend(trainer_suite(cases));
    all.extend(analysis_suite(cases));
    all
}
