use std::fmt;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use sla_core::analysis::{
    adapted_label_summary, center_audit, evaluate, kl_trace_from, sweep, write_refreshes_csv, write_rows_csv,
    GridSpec,
};
use sla_core::data::{export_task, generate_task, import_task, DomainSpec, LabeledExample, SsdaTask};
use sla_core::experiments::{calibrate, CalibrationPlan, ExpectedResults, Setup};
use sla_core::nnet::{Checkpoint, Model};
use sla_core::sla::ProtoState;
use sla_core::trainer::{train, train_ideally_adapted, train_oracle, Method, RunRecord, TrainConfig};

#[derive(Parser)]
#[command(name = "sla-lab", version, about = "Source label adaptation experiments on synthetic domain shift")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a task from a domain spec and write it to a file.
    GenTask(GenTaskArgs),
    /// Train one model on a task.
    Train(TrainArgs),
    /// Accuracy and confusion matrix of a checkpoint.
    Evaluate(EvaluateArgs),
    /// Distances from the true class centers to labeled and pseudo centers.
    AuditCenters(AuditArgs),
    /// Per-step source KL of a run, raw and smoothed.
    KlTrace(KlTraceArgs),
    /// Mean adapted source labels against oracle-adapted ones.
    LabelSummary(LabelSummaryArgs),
    /// Run a grid of configurations over several seeds.
    Sweep(SweepArgs),
    /// Run every directional experiment and write an expected-results file.
    Calibrate(CalibrateArgs),
}

#[derive(Args)]
struct GenTaskArgs {
    /// Domain spec JSON; the built-in default when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 3, value_parser = parse_n_shot)]
    n_shot: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    task: PathBuf,
    /// st, ent, sla, sla+ent, self-pred or ideal.
    #[arg(long, default_value = "st", value_parser = parse_method)]
    mode: Method,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    temp: Option<f64>,
    #[arg(long)]
    interval: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    entropy_weight: f64,
    /// Base training config JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Record the PPC's own test accuracy at each refresh.
    #[arg(long)]
    eval_ppc: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// test, validation, labeled or source.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct KlTraceArgs {
    /// `run.json` written by `train`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LabelSummaryArgs {
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// `ppc.json` written by an SLA `train` run.
    #[arg(long)]
    ppc: PathBuf,
    /// Oracle checkpoint; trained from `--seed` when omitted.
    #[arg(long)]
    oracle: Option<PathBuf>,
    #[arg(long, default_value_t = 0.3)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Compare summary means against an expected-results file.
    #[arg(long)]
    check_expected: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Experiment setup JSON; the default setup when omitted.
    #[arg(long)]
    setup: Option<PathBuf>,
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_n_shot(s: &str) -> std::result::Result<usize, String> {
    match s {
        "1" => Ok(1),
        "3" => Ok(3),
        _ => Err(format!("n-shot must be 1 or 3, got {s}")),
    }
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    Method::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
        format!("unknown mode {s:?}; expected one of {}", names.join(", "))
    })
}

/// Expected-results comparison failed.
#[derive(Debug)]
struct Mismatch(Vec<String>);

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "expected-results mismatch: {}", self.0.join("; "))
    }
}

impl std::error::Error for Mismatch {}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_task(path: &Path) -> Result<SsdaTask> {
    import_task(path).with_context(|| format!("loading task {}", path.display()))
}

fn load_model(path: &Path) -> Result<Model> {
    Ok(Checkpoint::load(path).with_context(|| format!("loading model {}", path.display()))?.into_model()?)
}

fn gen_task(a: GenTaskArgs) -> Result<()> {
    let spec: DomainSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => DomainSpec::default(),
    };
    let task = generate_task(&spec, a.n_shot, a.seed)?;
    export_task(&task, &a.out)?;
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    mode: &'a str,
    seed: u64,
    config: &'a TrainConfig,
    config_hash: &'a str,
    final_test_acc: f64,
    final_val_acc: f64,
    refreshes: usize,
    checkpoint: &'a str,
    wall_clock_secs: f64,
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let task = load_task(&a.task)?;
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    a.mode.configure(&mut cfg, a.entropy_weight);
    cfg.seed = a.seed;
    cfg.eval_ppc_as_classifier |= a.eval_ppc;
    if let Some(v) = a.alpha {
        cfg.sla.alpha = v;
    }
    if let Some(v) = a.temp {
        cfg.sla.temperature = v;
    }
    if let Some(v) = a.interval {
        cfg.sla.update_interval = v;
    }
    if let Some(v) = a.warmup {
        cfg.sla.warmup = v;
    }
    if let Some(v) = a.iters {
        cfg.total_iters = v;
    }
    out_dir(&a.out)?;

    let mut run: RunRecord = if a.mode == Method::Ideal {
        let oracle = train_oracle(&task, &cfg)?;
        Checkpoint::new(&oracle, cfg.hash()).save(&a.out.join("oracle.json"))?;
        train_ideally_adapted(&task, &cfg, &oracle)?
    } else {
        train(&task, &cfg)?
    };
    let model_path = a.out.join("model.json");
    Checkpoint::new(run.model(), run.config_hash.clone()).save(&model_path)?;
    run.checkpoint = Some("model.json".into());
    if let Some(ppc) = &run.last_ppc {
        write_json(&a.out.join("ppc.json"), ppc)?;
    }
    write_rows_csv(&run.metrics, create(&a.out.join("metrics.csv"))?)?;
    write_refreshes_csv(&run.refreshes, create(&a.out.join("refreshes.csv"))?)?;
    write_json(&a.out.join("run.json"), &run)?;
    let summary = TrainSummary {
        mode: a.mode.name(),
        seed: cfg.seed,
        config: &cfg,
        config_hash: &run.config_hash,
        final_test_acc: run.final_test_acc,
        final_val_acc: run.final_val_acc,
        refreshes: run.refreshes.len(),
        checkpoint: "model.json",
        wall_clock_secs: run.wall_clock_secs,
    };
    write_json(&a.out.join("summary.json"), &summary)?;
    println!("{} seed {}: test {:.4} val {:.4}", a.mode.name(), cfg.seed, run.final_test_acc, run.final_val_acc);
    Ok(())
}

fn split<'a>(task: &'a SsdaTask, name: &str) -> Result<&'a [LabeledExample]> {
    Ok(match name {
        "test" => &task.test,
        "validation" => &task.validation,
        "labeled" => &task.labeled_target,
        "source" => &task.source,
        other => anyhow::bail!("unknown split {other:?}; expected test, validation, labeled or source"),
    })
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let task = load_task(&a.task)?;
    let model = load_model(&a.model)?;
    let (acc, cm) = evaluate(&model, split(&task, &a.split)?)?;
    out_dir(&a.out)?;
    cm.write_csv(create(&a.out.join("confusion.csv"))?)?;
    write_json(
        &a.out.join("summary.json"),
        &serde_json::json!({ "split": a.split, "accuracy": acc, "examples": cm.total(), "worst_row": cm.worst_row() }),
    )?;
    println!("{} accuracy {:.4} ({} examples)", a.split, acc, cm.total());
    Ok(())
}

fn audit_cmd(a: AuditArgs) -> Result<()> {
    let task = load_task(&a.task)?;
    let model = load_model(&a.model)?;
    let audit = center_audit(&model, &task)?;
    out_dir(&a.out)?;
    audit.write_csv(create(&a.out.join("centers.csv"))?)?;
    write_json(&a.out.join("summary.json"), &audit)?;
    println!(
        "ideal->labeled {:.4}  ideal->pseudo {:.4}",
        audit.mean_ideal_to_labeled, audit.mean_ideal_to_pseudo
    );
    Ok(())
}

fn kl_cmd(a: KlTraceArgs) -> Result<()> {
    let run: RunRecord = read_json(&a.run)?;
    let trace = kl_trace_from(&run.kl_trace)?;
    out_dir(&a.out)?;
    write_rows_csv(&trace, create(&a.out.join("kl.csv"))?)?;
    let last = trace.last().expect("nonempty trace");
    let at_100 = trace.get(99).map(|p| p.ema);
    write_json(
        &a.out.join("summary.json"),
        &serde_json::json!({ "steps": trace.len(), "ema_at_100": at_100, "ema_final": last.ema }),
    )?;
    println!("{} steps, final smoothed KL {:.6}", trace.len(), last.ema);
    Ok(())
}

fn label_cmd(a: LabelSummaryArgs) -> Result<()> {
    let task = load_task(&a.task)?;
    let model = load_model(&a.model)?;
    let ppc: ProtoState = read_json(&a.ppc)?;
    let oracle = match &a.oracle {
        Some(p) => load_model(p)?,
        None => train_oracle(&task, &TrainConfig { seed: a.seed, ..TrainConfig::default() })?,
    };
    let summary = adapted_label_summary(&model, &task, &ppc, &oracle, a.alpha)?;
    out_dir(&a.out)?;
    summary.write_csv(create(&a.out.join("labels.csv"))?)?;
    write_json(
        &a.out.join("summary.json"),
        &serde_json::json!({ "alpha": a.alpha, "closer_fraction": summary.closer_fraction(), "classes": summary.classes }),
    )?;
    println!("closer to ideal for {:.0}% of classes", 100.0 * summary.closer_fraction());
    Ok(())
}

fn check_expected(grid: &GridSpec, summary: &[sla_core::analysis::SummaryRow], path: &Path) -> Result<()> {
    let exp = ExpectedResults::load(path)?;
    let mut problems = Vec::new();
    if grid.domain.hash() != exp.provenance.domain_hash {
        problems.push(format!(
            "grid domain hash {} differs from calibrated {}",
            grid.domain.hash(),
            exp.provenance.domain_hash
        ));
    }
    let mut matched = 0;
    for row in summary {
        if let Some(want) = exp.main_effect.by_name(&row.config) {
            matched += 1;
            let diff = (row.test_mean - want).abs();
            if !(diff <= exp.main_effect.tolerance) {
                problems.push(format!("{}: test mean {:.4} vs expected {:.4}", row.config, row.test_mean, want));
            }
        }
    }
    if matched == 0 {
        problems.push("no sweep row matches an expected entry (st, ent, sla, sla+ent)".into());
    }
    if problems.is_empty() {
        println!("expected results matched for {matched} rows");
        Ok(())
    } else {
        Err(Mismatch(problems).into())
    }
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let grid: GridSpec = read_json(&a.grid)?;
    let started = std::time::Instant::now();
    let result = sweep(&grid)?;
    out_dir(&a.out)?;
    write_rows_csv(&result.rows, create(&a.out.join("rows.csv"))?)?;
    write_rows_csv(&result.summary, create(&a.out.join("summary.csv"))?)?;
    let selected = result.summary.iter().find(|r| r.selected).map(|r| r.config.clone());
    write_json(
        &a.out.join("summary.json"),
        &serde_json::json!({
            "protocol": result.protocol,
            "selected": selected,
            "summary": result.summary,
            "wall_clock_secs": started.elapsed().as_secs_f64(),
        }),
    )?;
    for r in &result.summary {
        println!(
            "{:<12} val {:.4} ± {:.4}  test {:.4} ± {:.4}{}",
            r.config,
            r.val_mean,
            r.val_std,
            r.test_mean,
            r.test_std,
            if r.selected { "  *" } else { "" }
        );
    }
    match &a.check_expected {
        Some(p) => check_expected(&grid, &result.summary, p),
        None => Ok(()),
    }
}

fn calibrate_cmd(a: CalibrateArgs) -> Result<()> {
    let setup: Setup = match &a.setup {
        Some(p) => read_json(p)?,
        None => Setup::default(),
    };
    let plan: CalibrationPlan = match &a.plan {
        Some(p) => read_json(p)?,
        None => CalibrationPlan::default(),
    };
    let exp = calibrate(&setup, &plan)?;
    exp.save(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenTask(a) => gen_task(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::AuditCenters(a) => audit_cmd(a),
        Command::KlTrace(a) => kl_cmd(a),
        Command::LabelSummary(a) => label_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Calibrate(a) => calibrate_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Mismatch>() => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
