//! tapmerge: merge fine-tuned checkpoints and pick hyperparameters with the
//! task alignment proxy.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
//! failure. All file outputs are written atomically (temp file + rename),
//! and identical invocations with identical inputs produce byte-identical
//! outputs regardless of `--jobs`.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tapmerge::adamerge::{optimize, AdaConfig};
use tapmerge::error::{Error, ErrorKind};
use tapmerge::fsutil;
use tapmerge::layers::LayerGrouping;
use tapmerge::merge::{merge, Lambda, MergeSpec, Method};
use tapmerge::sweep::{run_sweep, ExternalProvider, SweepConfig, ToyBenchSource};
use tapmerge::tap::{tap_task, FeatureOrigin, FeatureSet, Metric, TapReport};
use tapmerge::task_vector::{compute_task_vector, cosine_analysis, norms, NormScope};
use tapmerge::tensor::{load_checkpoint, save_checkpoint};
use tapmerge::toy::{generate_bench, load_bench, BenchParams};

#[derive(Parser)]
#[command(name = "tapmerge", version, about = "Checkpoint merging with task-alignment-based hyperparameter selection", max_term_width = 100)]
struct Cli {
    /// Seed for every stochastic path (bench generation, TAP sampling,
    /// optimizer batches). Overrides seeds found in config files.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Emit errors as JSON on stderr in addition to the exit code.
    #[arg(long, global = true)]
    json_errors: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Merge task checkpoints into the base with a chosen method.
    Merge(MergeArgs),
    /// Run a hyperparameter sweep scored with TAP.
    Sweep(SweepArgs),
    /// Score merged-model features against fine-tuned teacher features.
    Tap(TapArgs),
    /// Task-vector norm and cosine analyses.
    Analyze(AnalyzeArgs),
    /// Generate the deterministic toy benchmark.
    Bench(BenchArgs),
    /// Optimize merging coefficients by minimizing the alignment loss.
    Adamerge(AdamergeArgs),
}

#[derive(Args)]
struct MergeArgs {
    /// Base checkpoint (MKT1).
    #[arg(long)]
    base: PathBuf,
    /// Fine-tuned checkpoint as name=path; repeatable.
    #[arg(long = "task", value_name = "NAME=PATH", required = true)]
    tasks: Vec<String>,
    /// Merge method: avg, ta, ties, breadcrumbs, consensus, lines, star,
    /// tsv, normavg.
    #[arg(long)]
    method: String,
    /// Scalar merging coefficient.
    #[arg(long)]
    lambda: f64,
    /// Method hyperparameter as key=value; repeatable.
    #[arg(long = "mu", value_name = "KEY=VALUE")]
    mu: Vec<String>,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Toy benchmark manifest; features come from the in-process encoder.
    #[arg(long, conflicts_with = "feature_provider", required_unless_present = "feature_provider")]
    bench_manifest: Option<PathBuf>,
    /// External feature provider executable, invoked as
    /// `<provider> <checkpoint> <samples> <out_features>`. Requires the
    /// config's `models` section.
    #[arg(long)]
    feature_provider: Option<PathBuf>,
    /// Output directory for report.json and report.csv.
    #[arg(long)]
    out: PathBuf,
    /// Worker parallelism; results are identical for every value.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct TapArgs {
    /// Merged-model feature file as name=path; repeatable.
    #[arg(long = "merged-features", value_name = "NAME=PATH", required = true)]
    merged_features: Vec<String>,
    /// Teacher feature file as name=path; repeatable.
    #[arg(long = "teacher-features", value_name = "NAME=PATH", required = true)]
    teacher_features: Vec<String>,
    /// Dissimilarity metric: l1, l2, cosine.
    #[arg(long, default_value = "l2")]
    metric: String,
    /// Output TAP report path (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Base checkpoint (MKT1).
    #[arg(long)]
    base: PathBuf,
    /// Fine-tuned checkpoint as name=path; repeatable.
    #[arg(long = "task", value_name = "NAME=PATH", required = true)]
    tasks: Vec<String>,
    /// Norm scope: global or per-layer.
    #[arg(long, value_parser = ["global", "per-layer"], default_value = "global")]
    scope: String,
    /// Output directory for norms.csv, cosine.csv, and metadata.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Number of tasks to generate.
    #[arg(long, default_value_t = 3)]
    tasks: usize,
    /// Output directory for checkpoints, task data, and manifest.json.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AdamergeArgs {
    /// Toy benchmark manifest.
    #[arg(long)]
    bench_manifest: PathBuf,
    /// Optimizer iterations.
    #[arg(long, default_value_t = 500)]
    iterations: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Mini-batch size per task.
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Output trace path (CSV).
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind as ClapKind;
            let code = match e.kind() {
                ClapKind::DisplayHelp | ClapKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let json_errors = cli.json_errors;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (kind_name, code) = match err.kind() {
                ErrorKind::Usage => ("usage", 1),
                ErrorKind::Data => ("data", 2),
                ErrorKind::Numerical => ("numerical", 3),
            };
            eprintln!("error: {err}");
            if json_errors {
                let payload = serde_json::json!({
                    "error": { "kind": kind_name, "message": err.to_string() }
                });
                eprintln!("{payload}");
            }
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Merge(args) => cmd_merge(args),
        Command::Sweep(args) => cmd_sweep(args, cli.seed),
        Command::Tap(args) => cmd_tap(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Bench(args) => cmd_bench(args, cli.seed),
        Command::Adamerge(args) => cmd_adamerge(args, cli.seed),
    }
}

/// Split a `name=value` argument.
fn split_pair(raw: &str, what: &str) -> Result<(String, String), Error> {
    match raw.split_once('=') {
        Some((name, value)) if !name.is_empty() && !value.is_empty() => {
            Ok((name.to_string(), value.to_string()))
        }
        _ => Err(Error::InvalidInput(format!(
            "expected {what} as NAME=VALUE, got '{raw}'"
        ))),
    }
}

fn parse_task_paths(raw: &[String]) -> Result<Vec<(String, PathBuf)>, Error> {
    let mut out = Vec::with_capacity(raw.len());
    for item in raw {
        let (name, path) = split_pair(item, "a task")?;
        if out.iter().any(|(n, _)| *n == name) {
            return Err(Error::InvalidInput(format!("duplicate task name '{name}'")));
        }
        out.push((name, PathBuf::from(path)));
    }
    Ok(out)
}

fn cmd_merge(args: MergeArgs) -> Result<(), Error> {
    let method = Method::parse(&args.method)?;
    let base = load_checkpoint(&args.base)?;
    let mut tvs = Vec::new();
    for (name, path) in parse_task_paths(&args.tasks)? {
        let finetuned = load_checkpoint(&path)?;
        tvs.push(compute_task_vector(&base, &finetuned, name)?);
    }
    let mut mu = BTreeMap::new();
    for item in &args.mu {
        let (key, value) = split_pair(item, "a mu entry")?;
        let value: f64 = value
            .parse()
            .map_err(|_| Error::InvalidInput(format!("mu value '{value}' is not a number")))?;
        mu.insert(key, value);
    }
    let spec = MergeSpec {
        method,
        lambda: Lambda::Scalar(args.lambda),
        mu,
    };
    let merged = merge(&base, &tvs, &spec)?;
    save_checkpoint(&merged.weights, &args.out)
}

fn cmd_sweep(args: SweepArgs, seed: Option<u64>) -> Result<(), Error> {
    let bytes = fsutil::read_bytes(&args.config)?;
    let mut config: SweepConfig = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Format(format!("sweep config: {e}")))?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;

    let report = if let Some(manifest) = &args.bench_manifest {
        let bench = load_bench(manifest)?;
        let tvs = bench.task_vectors()?;
        let source = ToyBenchSource::new(&bench, config.n_samples, config.seed)?;
        run_sweep(&bench.base, &tvs, &config, &source, Some(&source), args.jobs)?
    } else {
        let exe = args.feature_provider.as_ref().expect("clap enforces the pair");
        let models = config.models.clone().ok_or_else(|| {
            Error::InvalidSpec(
                "--feature-provider needs the config's 'models' section".to_string(),
            )
        })?;
        let base = load_checkpoint(&models.base)?;
        let mut tvs = Vec::new();
        for (task_id, path) in &models.tasks {
            let finetuned = load_checkpoint(path)?;
            tvs.push(compute_task_vector(&base, &finetuned, task_id.clone())?);
        }
        let scratch = args.out.join("provider_scratch");
        let provider = ExternalProvider::new(exe, &models, config.n_samples, config.seed, &scratch)?;
        let report = run_sweep(&base, &tvs, &config, &provider, None, args.jobs)?;
        let _ = std::fs::remove_dir_all(&scratch);
        report
    };

    fsutil::write_atomic(&args.out.join("report.json"), &report.to_json()?)?;
    fsutil::write_atomic(&args.out.join("report.csv"), report.to_csv().as_bytes())?;
    eprintln!(
        "sweep: {} candidates, {} forward passes, {} decoder trainings, {} ms",
        report.rows.len(),
        report.cost.encoder_forward_passes,
        report.cost.decoder_trainings,
        report.cost.wall_clock_ms
    );
    Ok(())
}

fn cmd_tap(args: TapArgs) -> Result<(), Error> {
    let metric = Metric::parse(&args.metric)?;
    let merged = parse_task_paths(&args.merged_features)?;
    let teachers: BTreeMap<String, PathBuf> =
        parse_task_paths(&args.teacher_features)?.into_iter().collect();

    let mut per_task = BTreeMap::new();
    let mut n_samples: Option<usize> = None;
    for (task_id, merged_path) in &merged {
        let teacher_path = teachers.get(task_id).ok_or_else(|| {
            Error::InvalidInput(format!("no teacher features for task '{task_id}'"))
        })?;
        let merged_fs = FeatureSet::load(merged_path, task_id, FeatureOrigin::ExternalProvider)?;
        let teacher_fs = FeatureSet::load(teacher_path, task_id, FeatureOrigin::ExternalProvider)?;
        match n_samples {
            None => n_samples = Some(merged_fs.n_samples()),
            Some(n) if n == merged_fs.n_samples() => {}
            Some(n) => {
                return Err(Error::InvalidInput(format!(
                    "feature sets disagree on sample count ({n} vs {})",
                    merged_fs.n_samples()
                )))
            }
        }
        per_task.insert(task_id.clone(), tap_task(&merged_fs, &teacher_fs, metric)?);
    }
    for task_id in teachers.keys() {
        if !per_task.contains_key(task_id) {
            return Err(Error::InvalidInput(format!(
                "no merged features for task '{task_id}'"
            )));
        }
    }
    let report = TapReport::new(metric, n_samples.unwrap_or(0), per_task)?;
    let json = serde_json::to_vec_pretty(&report)
        .map_err(|e| Error::Format(format!("report serialization: {e}")))?;
    fsutil::write_atomic(&args.out, &json)
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<(), Error> {
    let base = load_checkpoint(&args.base)?;
    let mut tvs = Vec::new();
    for (name, path) in parse_task_paths(&args.tasks)? {
        let finetuned = load_checkpoint(&path)?;
        tvs.push(compute_task_vector(&base, &finetuned, name)?);
    }
    let scope = match args.scope.as_str() {
        "global" => NormScope::Global,
        "per-layer" => NormScope::PerLayer,
        other => return Err(Error::InvalidInput(format!("unknown scope '{other}'"))),
    };
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;

    let grouping = LayerGrouping::default();
    let norm_report = norms(&tvs, scope, grouping)?;
    fsutil::write_atomic(&args.out.join("norms.csv"), norm_report.to_csv().as_bytes())?;
    if tvs.len() >= 2 {
        let cosine = cosine_analysis(&tvs)?;
        fsutil::write_atomic(&args.out.join("cosine.csv"), cosine.to_csv().as_bytes())?;
    }
    let metadata = serde_json::json!({
        "cosine_flattening": "all_parameters",
        "layer_grouping": "strip_last_dot_component",
        "tasks": tvs.iter().map(|tv| tv.task_id.clone()).collect::<Vec<_>>(),
    });
    fsutil::write_atomic(
        &args.out.join("metadata.json"),
        serde_json::to_vec_pretty(&metadata)
            .map_err(|e| Error::Format(format!("metadata serialization: {e}")))?
            .as_slice(),
    )
}

fn cmd_bench(args: BenchArgs, seed: Option<u64>) -> Result<(), Error> {
    let params = BenchParams {
        seed: seed.unwrap_or(BenchParams::default().seed),
        tasks: args.tasks,
        ..BenchParams::default()
    };
    generate_bench(&params, &args.out_dir)?;
    eprintln!(
        "bench: seed {}, {} tasks, written to {}",
        params.seed,
        params.tasks,
        args.out_dir.display()
    );
    Ok(())
}

fn cmd_adamerge(args: AdamergeArgs, seed: Option<u64>) -> Result<(), Error> {
    let bench = load_bench(&args.bench_manifest)?;
    let tvs = bench.task_vectors()?;
    let config = AdaConfig {
        iterations: args.iterations,
        lr: args.lr,
        batch_size: args.batch,
        seed: seed.unwrap_or(0),
        ..AdaConfig::default()
    };
    let (lambda, trace) = optimize(
        &bench.manifest.encoder,
        &bench.base,
        &tvs,
        &bench.tasks,
        &config,
    )?;
    fsutil::write_atomic(&args.out, trace.to_csv().as_bytes())?;

    let lambda_json: BTreeMap<String, f64> = lambda
        .names()
        .into_iter()
        .zip(lambda.values.iter().copied())
        .collect();
    let summary = serde_json::json!({
        "lambda": lambda_json,
        "final_loss": trace.records.last().map(|r| r.total_loss),
        "iterations": trace.records.len(),
        "normalization": trace.normalization,
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&summary)
            .map_err(|e| Error::Format(format!("summary serialization: {e}")))?
    );
    Ok(())
}
