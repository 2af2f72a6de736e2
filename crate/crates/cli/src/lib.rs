use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use vidtok_core::bench::{
    bench_model, bench_throughput, run_ablation, write_report_csv, write_tradeoff_csv, write_trials_csv,
    AblationPlan, BenchOptions, BenchReport,
};
use vidtok_core::synth::{generate, load_dataset, save_dataset, SyntheticTaskSpec, TaskKind};
use vidtok_core::train::{
    evaluate, gradcheck_configs, gradcheck_suite, train, GradCheckOptions, Model, OptimizerKind, TrainConfig,
};
use vidtok_core::{EncoderConfig, Error, Result};

#[derive(Debug, Parser)]
#[command(name = "vidtok", version, about = "Video token encoders: data, training, checks and sweeps")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    /// Seed for data generation, initialization and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// TOML run file; its meaning depends on the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset as token-grid files plus a manifest.
    Gen(GenArgs),
    /// Train an encoder and readout on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a saved model on a dataset.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Time encode plus a quadratic downstream stand-in.
    Bench(BenchArgs),
    /// Train and test a grid of (variant, M, seed) cells.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    task: TaskKind,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 16)]
    tokens: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 1.0)]
    cue: f64,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    variant: String,
    #[arg(long, default_value_t = 8)]
    budget: usize,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// `adam` or `sgd`.
    #[arg(long)]
    optimizer: Option<String>,
    /// Gradient norm limit; 0 disables clipping.
    #[arg(long)]
    clip: Option<f64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 100)]
    batch_size: usize,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Every variant, with and without frame-index encoding.
    #[arg(long)]
    all: bool,
    /// Variant tags to check (ignored with --all).
    #[arg(long, value_delimiter = ',')]
    variant: Vec<String>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    budgets: Option<Vec<usize>>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    /// Use the 8x128x1152 grid and memory settings instead of desk scale.
    #[arg(long)]
    full_scale: bool,
    /// Bench this trained model on `--data` instead of fresh encoders; the
    /// report then carries its accuracy.
    #[arg(long, requires = "data")]
    model: Option<PathBuf>,
    #[arg(long, requires = "model")]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    task: Option<TaskKind>,
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    budgets: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    train_samples: Option<usize>,
    #[arg(long)]
    test_samples: Option<usize>,
    /// Overrides every variant's epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Leave the wall-clock columns empty.
    #[arg(long)]
    no_timing: bool,
    /// Cells run concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

/// Bench run file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BenchPlan {
    variants: Vec<String>,
    budgets: Vec<usize>,
    #[serde(default)]
    full_scale: bool,
    #[serde(default = "d8")]
    frames: usize,
    #[serde(default = "d16")]
    tokens: usize,
    #[serde(default = "d64")]
    dim: usize,
    #[serde(default)]
    options: Option<BenchOptions>,
}

fn d8() -> usize {
    8
}
fn d16() -> usize {
    16
}
fn d64() -> usize {
    64
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 success, 1 usage error, 2 run failure.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) | Error::Config(_) => 1,
                _ => 2,
            }
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    match &cli.command {
        Command::Gen(a) => gen(a, cli.seed.unwrap_or(0), &out),
        Command::Train(a) => train_cmd(a, cli, &out),
        Command::Eval(a) => eval_cmd(a, cli.out.as_deref()),
        Command::Gradcheck(a) => gradcheck_cmd(a, cli.seed.unwrap_or(0)),
        Command::Bench(a) => bench_cmd(a, cli, &out),
        Command::Ablate(a) => ablate_cmd(a, cli, &out),
    }
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn create_file(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn gen(a: &GenArgs, seed: u64, out: &Path) -> Result<()> {
    let spec = SyntheticTaskSpec {
        task: a.task,
        frames: a.frames,
        tokens: a.tokens,
        dim: a.dim,
        cue_magnitude: a.cue,
        noise_scale: a.noise,
        samples: a.n,
        seed,
    };
    let data = generate(&spec)?;
    let manifest = save_dataset(out, &spec, &data)?;
    println!(
        "wrote {} {} grids ({} classes) to {}",
        manifest.files.len(),
        a.task.name(),
        manifest.classes,
        out.display()
    );
    Ok(())
}

fn train_cmd(a: &TrainArgs, cli: &Cli, out: &Path) -> Result<()> {
    let mut tc: TrainConfig = match &cli.config {
        Some(p) => read_toml(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        tc.seed = s;
    }
    tc.epochs = a.epochs.unwrap_or(tc.epochs);
    tc.learning_rate = a.lr.unwrap_or(tc.learning_rate);
    tc.batch_size = a.batch_size.unwrap_or(tc.batch_size);
    match a.optimizer.as_deref() {
        None => {}
        Some("adam") => tc.optimizer = OptimizerKind::adam(),
        Some("sgd") => tc.optimizer = OptimizerKind::Sgd,
        Some(other) => return Err(Error::Usage(format!("unknown optimizer `{other}`"))),
    }
    if let Some(c) = a.clip {
        tc.clip_norm = (c > 0.0).then_some(c);
    }
    tc.validate()?;
    let (manifest, data) = load_dataset(&a.data)?;
    let s = &manifest.spec;
    let cfg = EncoderConfig::for_tag(&a.variant, s.frames, s.tokens, s.dim, a.budget)?;
    let mut model = Model::new(cfg, manifest.classes, tc.seed)?;
    let outcome = train(&mut model, &data, &tc)?;
    create_dir(out)?;
    model.save(out.join("model.json"))?;
    let mut log = create_file(&out.join("train_reports.jsonl"))?;
    for r in &outcome.reports {
        writeln!(log, "{}", r.to_json_line()).map_err(|e| Error::Io {
            path: out.join("train_reports.jsonl"),
            source: e,
        })?;
        println!(
            "epoch {:>3}  acc {:.4}  loss {:.4}",
            r.epoch.map_or(0, |e| e + 1),
            r.accuracy,
            r.mean_loss
        );
    }
    println!("model saved to {}", out.join("model.json").display());
    Ok(())
}

fn eval_cmd(a: &EvalArgs, out: Option<&Path>) -> Result<()> {
    let model = Model::load(&a.model)?;
    let (_, data) = load_dataset(&a.data)?;
    let report = evaluate(&model, &data, a.batch_size)?;
    let line = report.to_json_line();
    println!("{line}");
    if let Some(dir) = out {
        create_dir(dir)?;
        let path = dir.join("eval.jsonl");
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
        writeln!(f, "{line}").map_err(|e| Error::Io { path, source: e })?;
    }
    Ok(())
}

fn gradcheck_cmd(a: &GradcheckArgs, seed: u64) -> Result<()> {
    let configs = if a.all || a.variant.is_empty() {
        gradcheck_configs()?
    } else {
        gradcheck_configs()?
            .into_iter()
            .filter(|c| a.variant.iter().any(|v| *v == c.label() || v == c.tag()))
            .collect()
    };
    if configs.is_empty() {
        return Err(Error::Usage(format!("no gradcheck variant matches {:?}", a.variant)));
    }
    let reports = gradcheck_suite(&configs, seed, GradCheckOptions::default())?;
    println!("{:<24} {:>7} {:>12}  {:<28} {:>7}", "variant", "checked", "max_rel_err", "worst", "seconds");
    for r in &reports {
        println!(
            "{:<24} {:>7} {:>12.3e}  {:<28} {:>7.2}  {}",
            r.variant,
            r.checked,
            r.max_rel_err,
            format!("{}[{}]", r.worst_param, r.worst_index),
            r.seconds,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    reports.iter().try_for_each(|r| r.ensure())
}

fn bench_cmd(a: &BenchArgs, cli: &Cli, out: &Path) -> Result<()> {
    let mut plan: BenchPlan = match &cli.config {
        Some(p) => read_toml(p)?,
        None => BenchPlan {
            variants: vec!["grouped_ttm".into()],
            budgets: vec![128, 32, 16],
            full_scale: false,
            frames: 8,
            tokens: 16,
            dim: 64,
            options: None,
        },
    };
    if let Some(v) = &a.variants {
        plan.variants = v.clone();
    }
    if let Some(b) = &a.budgets {
        plan.budgets = b.clone();
    }
    plan.full_scale |= a.full_scale;
    let mut opts = plan.options.clone().unwrap_or_default();
    opts.trials = a.trials.unwrap_or(opts.trials);
    opts.samples_per_trial = a.samples.unwrap_or(opts.samples_per_trial);
    if let Some(s) = cli.seed {
        opts.seed = s;
    }
    let report = if let (Some(model), Some(data)) = (&a.model, &a.data) {
        let model = Model::load(model)?;
        let (_, data) = load_dataset(data)?;
        BenchReport {
            rows: vec![bench_model(&model, &data, &opts)?],
            options: opts.clone(),
        }
    } else {
        let mut configs = Vec::new();
        for v in &plan.variants {
            for &m in &plan.budgets {
                configs.push(if plan.full_scale {
                    EncoderConfig::full_scale(v, m)?
                } else {
                    EncoderConfig::for_tag(v, plan.frames, plan.tokens, plan.dim, m)?
                });
            }
        }
        bench_throughput(&configs, &opts)?
    };
    create_dir(out)?;
    let rows: Vec<_> = report.rows.iter().map(|r| r.to_report_row(opts.seed)).collect();
    write_report_csv(create_file(&out.join("bench.csv"))?, &rows)?;
    write_trials_csv(create_file(&out.join("bench_trials.csv"))?, &report)?;
    println!(
        "{:<20} {:>5} {:>10} {:>13} {:>10} {:>14} {:>12}",
        "variant", "M", "encode_ms", "downstream_ms", "first_ms", "cost", "samples/s"
    );
    for r in &report.rows {
        println!(
            "{:<20} {:>5} {:>10.3} {:>13.3} {:>10.3} {:>14} {:>12.2}",
            r.variant,
            r.budget,
            r.encode_ms,
            r.downstream_ms,
            r.first_trial_ms(),
            r.downstream_cost,
            r.samples_per_sec
        );
    }
    Ok(())
}

fn ablate_cmd(a: &AblateArgs, cli: &Cli, out: &Path) -> Result<()> {
    let mut plan: AblationPlan = match (&cli.config, a.task) {
        (Some(p), _) => read_toml(p)?,
        (None, Some(task)) => AblationPlan::desk(
            task,
            &["mean_pool", "tokenlearner_pool", "grouped_ttm"],
            &[8],
            &[cli.seed.unwrap_or(0)],
        ),
        (None, None) => return Err(Error::Usage("ablate needs --config or --task".into())),
    };
    if let Some(t) = a.task {
        plan.task = t;
    }
    if let Some(v) = &a.variants {
        plan.variants = v.clone();
    }
    if let Some(b) = &a.budgets {
        plan.budgets = b.clone();
    }
    match (&a.seeds, cli.seed) {
        (Some(s), _) => plan.seeds = s.clone(),
        (None, Some(s)) => plan.seeds = vec![s],
        (None, None) => {}
    }
    plan.train_samples = a.train_samples.unwrap_or(plan.train_samples);
    plan.test_samples = a.test_samples.unwrap_or(plan.test_samples);
    if let Some(e) = a.epochs {
        plan.train.epochs = e;
        for o in plan.overrides.values_mut() {
            o.epochs = Some(e);
        }
    }
    plan.timing &= !a.no_timing;
    let outcome = run_ablation(&plan, a.jobs)?;
    create_dir(out)?;
    write_report_csv(create_file(&out.join("ablation.csv"))?, &outcome.rows)?;
    write_tradeoff_csv(create_file(&out.join("tradeoff.csv"))?, &outcome.tradeoff)?;
    for (row, cell) in outcome.rows.iter().zip(&outcome.cells) {
        match row.accuracy {
            Some(acc) => println!(
                "{:<24} M={:<4} seed={:<4} test_acc={:.4} train={:.1}s",
                row.variant, row.m, row.seed, acc, cell.train_seconds
            ),
            None => println!("{:<24} M={:<4} seed={:<4} {}", row.variant, row.m, row.seed, row.status),
        }
    }
    println!("reports in {}", out.display());
    Ok(())
}
