use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use contraprompt::error::{DatasetError, GatewayError, RunError};
use contraprompt::gateway::{Cassette, CassetteMode, Gateway, OpenAiCompatProvider};
use contraprompt::harness::convert::{self, Benchmark};
use contraprompt::harness::{build_report, load_dataset, split};
use contraprompt::io::{from_jsonl, to_jsonl, write_atomic};
use contraprompt::mining::{mine, MineOptions};
use contraprompt::optimizer::{evaluate, load_run, Module, OptimizationConfig, Optimizer};
use contraprompt::prompts::DEFAULT_BASE_PROMPT;
use contraprompt::retry::{compute_retry_success_rate, AttemptSet};
use contraprompt::tree::{self, RoutingMode};

#[derive(Parser)]
#[command(name = "contraprompt", version, about = "Contrastive prompt optimization")]
struct Cli {
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct GatewayArgs {
    /// record, replay or passthrough.
    #[arg(long, default_value = "record")]
    mode: CassetteMode,
    /// Cassette file; defaults to `<run-dir>/cassette.jsonl`.
    #[arg(long)]
    cassette: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    routing: Option<RoutingMode>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    disable_contrastive: bool,
    #[arg(long)]
    disable_failure_analysis: bool,
    #[arg(long)]
    flat_injection: bool,
    #[arg(long)]
    answer_only_extraction: bool,
    /// Override any config key, e.g. `--set iterations=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the optimization loop on a dataset.
    Optimize {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        run_dir: PathBuf,
        /// File holding the base prompt.
        #[arg(long)]
        base_prompt: Option<PathBuf>,
        /// Continue the run in `--run-dir` instead of starting a new one.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        gateway: GatewayArgs,
    },
    /// Score a dataset under a tree with single attempts.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        /// Tree file; defaults to the best tree of `--run-dir`.
        #[arg(long)]
        tree: Option<PathBuf>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long)]
        base_prompt: Option<PathBuf>,
        /// Name for the written `eval-<split>.jsonl`.
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        gateway: GatewayArgs,
    },
    /// Mine contrastive pairs from an attempts log offline.
    Mine {
        #[arg(long)]
        attempts: PathBuf,
        #[arg(long, default_value_t = contraprompt::mining::DEFAULT_DELTA_MIN)]
        delta_min: f64,
        /// Overrides the thresholds recorded in the log.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        strict_success_pairs: bool,
        /// Directory for pairs.jsonl and groups.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print and validate a tree file.
    InspectTree { path: PathBuf },
    /// Print the report for a run directory.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
        /// Also write the line-delimited report here.
        #[arg(long)]
        jsonl: Option<PathBuf>,
    },
    /// Re-run a recorded run from its cassette into a fresh directory.
    Replay {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cassette: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Convert a benchmark dump into a dataset file.
    Convert {
        #[arg(long)]
        benchmark: Benchmark,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// BBH task name used in ids; defaults to the input file stem.
        #[arg(long)]
        task: Option<String>,
        /// Comma-separated label universe for gdpr.
        #[arg(long)]
        labels: Option<String>,
    },
}

/// 1 for task failures, 2 for anything the user must fix in the setup.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn task(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        let code = match &e {
            RunError::Config(_) | RunError::Dataset(_) | RunError::Resume { .. } => 2,
            RunError::Gateway(g) if g.is_configuration() => 2,
            RunError::Gateway(GatewayError::CorruptCassette { .. } | GatewayError::Io(_)) => 2,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<GatewayError> for Failure {
    fn from(e: GatewayError) -> Self {
        RunError::Gateway(e).into()
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        Failure::config(e.to_string())
    }
}

fn build_config(args: &ConfigArgs) -> Result<OptimizationConfig, Failure> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
            OptimizationConfig::parse(&text)
                .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?
        }
        None => OptimizationConfig::default(),
    };
    if let Some(r) = args.routing {
        config.routing = r;
    }
    if let Some(w) = args.workers {
        config.workers = w;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    let a = &mut config.ablations;
    a.disable_contrastive |= args.disable_contrastive;
    a.disable_failure_analysis |= args.disable_failure_analysis;
    a.flat_injection |= args.flat_injection;
    a.answer_only_extraction |= args.answer_only_extraction;
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Failure::config(format!("--set expects KEY=VALUE, got `{o}`")))?;
        config
            .set(k.trim(), v.trim())
            .map_err(|e| Failure::config(format!("--set {o}: {e}")))?;
    }
    config
        .validate()
        .map_err(|e| Failure::config(e.to_string()))?;
    Ok(config)
}

fn build_gateway(
    mode: CassetteMode,
    cassette_path: &Path,
    config: &OptimizationConfig,
) -> Result<Gateway, Failure> {
    let cassette = Arc::new(Cassette::load(cassette_path, mode)?);
    let gateway = match mode {
        CassetteMode::Replay => Gateway::replay(cassette),
        CassetteMode::Record | CassetteMode::Passthrough => {
            let provider = OpenAiCompatProvider::from_env(config.base_url.clone())?;
            Gateway::new(Arc::new(provider), cassette)
        }
    };
    Ok(gateway
        .with_model(config.model.clone())
        .with_limits(config.limits.clone()))
}

fn read_base_prompt(path: Option<&Path>) -> Result<String, Failure> {
    match path {
        Some(p) => std::fs::read_to_string(p)
            .map(|s| s.trim_end().to_string())
            .map_err(|e| Failure::config(format!("{}: {e}", p.display()))),
        None => Ok(DEFAULT_BASE_PROMPT.to_string()),
    }
}

fn save_cassette(gateway: &Gateway, path: &Path) -> Result<(), Failure> {
    if gateway.cassette().mode() == CassetteMode::Record {
        gateway
            .cassette()
            .save(path)
            .map_err(|e| Failure::task(format!("saving cassette {}: {e}", path.display())))?;
    }
    Ok(())
}

fn report_outcome(outcome: &contraprompt::RunOutcome, run_dir: &Path) -> Result<(), Failure> {
    println!(
        "best iteration {} with train score {:.4} after {} iterations",
        outcome.best.iteration, outcome.best.train_score, outcome.state.completed
    );
    println!(
        "best tree: {}",
        run_dir
            .join(format!("iter-{:02}", outcome.best.iteration))
            .join("tree.txt")
            .display()
    );
    match &outcome.aborted {
        Some(reason) => Err(Failure::task(format!(
            "run stopped early ({reason}); the best checkpoint above is still valid and the run can be resumed"
        ))),
        None => Ok(()),
    }
}

fn optimize(
    dataset: Option<&Path>,
    run_dir: &Path,
    base_prompt: Option<&Path>,
    resume: bool,
    config_args: &ConfigArgs,
    gateway_args: &GatewayArgs,
) -> Result<(), Failure> {
    let cassette_path = gateway_args
        .cassette
        .clone()
        .unwrap_or_else(|| run_dir.join("cassette.jsonl"));
    if resume {
        let loaded = load_run(run_dir)?;
        let mut config = loaded.config.clone();
        if let Some(w) = config_args.workers {
            config.workers = w;
        }
        let gateway = build_gateway(gateway_args.mode, &cassette_path, &config)?;
        let outcome = Optimizer::new(config, &gateway)
            .with_run_dir(run_dir)
            .with_cassette_file(&cassette_path)
            .resume(loaded);
        save_cassette(&gateway, &cassette_path)?;
        return report_outcome(&outcome?, run_dir);
    }
    let dataset = dataset.ok_or_else(|| Failure::config("--dataset is required unless --resume"))?;
    let config = build_config(config_args)?;
    let gateway = build_gateway(gateway_args.mode, &cassette_path, &config)?;
    let examples = load_dataset(dataset, config.seed)?;
    let splits = split(&examples, config.train_n, config.val_n, config.seed)?;
    let base = read_base_prompt(base_prompt)?;
    let test_path = run_dir.join("test.jsonl");
    write_atomic(&test_path, to_jsonl(&splits.test).as_bytes())
        .map_err(|e| Failure::task(format!("{}: {e}", test_path.display())))?;
    let outcome = Optimizer::new(config, &gateway)
        .with_run_dir(run_dir)
        .with_cassette_file(&cassette_path)
        .run(&splits.train, &splits.val, &base);
    save_cassette(&gateway, &cassette_path)?;
    report_outcome(&outcome?, run_dir)
}

#[allow(clippy::too_many_arguments)]
fn evaluate_cmd(
    dataset: &Path,
    tree_path: Option<&Path>,
    run_dir: Option<&Path>,
    base_prompt: Option<&Path>,
    split_name: &str,
    config_args: &ConfigArgs,
    gateway_args: &GatewayArgs,
) -> Result<(), Failure> {
    let mut config = build_config(config_args)?;
    let (tree_text, base) = match (tree_path, run_dir) {
        (Some(p), _) => (
            std::fs::read_to_string(p).map_err(|e| Failure::config(format!("{}: {e}", p.display())))?,
            read_base_prompt(base_prompt)?,
        ),
        (None, Some(dir)) => {
            let run = load_run(dir)?;
            let best = run
                .state
                .best()
                .ok_or_else(|| Failure::config("run has no completed iteration"))?;
            if config_args.routing.is_none() {
                config.routing = run.config.routing;
            }
            config.ablations.flat_injection |= run.config.ablations.flat_injection;
            let base = match base_prompt {
                Some(p) => read_base_prompt(Some(p))?,
                None => run.base_prompt.clone(),
            };
            (best.tree.clone(), base)
        }
        (None, None) => return Err(Failure::config("pass --tree or --run-dir")),
    };
    let tree = tree::parse(&tree_text).map_err(|e| Failure::config(format!("tree: {e}")))?;
    let cassette_path = match (&gateway_args.cassette, run_dir) {
        (Some(p), _) => p.clone(),
        (None, Some(dir)) => dir.join(format!("cassette-eval-{split_name}.jsonl")),
        (None, None) => PathBuf::from(format!("cassette-eval-{split_name}.jsonl")),
    };
    let gateway = build_gateway(gateway_args.mode, &cassette_path, &config)?;
    let examples = load_dataset(dataset, config.seed)?;
    let module = if config.ablations.flat_injection {
        Module::flat(base, tree)
    } else {
        Module::new(base, tree, config.routing)
    };
    let result = evaluate(&examples, &module, &gateway, config.workers);
    save_cassette(&gateway, &cassette_path)?;
    let evaluation = result?;
    if let Some(e) = gateway.take_fatal() {
        return Err(e.into());
    }
    println!(
        "mean {:.4} over {} examples ({} provider failures)",
        evaluation.mean,
        evaluation.records.len(),
        evaluation.provider_failures()
    );
    if let Some(dir) = run_dir {
        let path = dir.join(format!("eval-{split_name}.jsonl"));
        write_atomic(&path, to_jsonl(&evaluation.records).as_bytes())
            .map_err(|e| Failure::task(format!("{}: {e}", path.display())))?;
        println!("records: {}", path.display());
    }
    Ok(())
}

fn mine_cmd(
    attempts: &Path,
    delta_min: f64,
    threshold: Option<f64>,
    strict: bool,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let text = std::fs::read_to_string(attempts)
        .map_err(|e| Failure::config(format!("{}: {e}", attempts.display())))?;
    let sets: Vec<AttemptSet> = from_jsonl(&text)
        .map_err(|(line, msg)| Failure::config(format!("{} line {line}: {msg}", attempts.display())))?;
    let options = MineOptions {
        delta_min,
        threshold,
        strict_success_pairs: strict,
    };
    let mined = mine(&sets, &options);
    println!(
        "{} attempt sets, {} pairs, {} all-fail groups",
        sets.len(),
        mined.pairs.len(),
        mined.groups.len()
    );
    for p in &mined.pairs {
        println!(
            "  pair {} delta {:.4} ({} -> {}) {}",
            p.example_id,
            p.delta,
            p.failed.score.value(),
            p.success.score.value(),
            p.error_type
        );
    }
    for g in &mined.groups {
        println!("  group {} with {} examples", g.error_type, g.members.len());
    }
    match compute_retry_success_rate(&sets) {
        Some(rho) => println!("retry success rate {rho:.4}"),
        None => println!("retry success rate absent (no first-attempt failures)"),
    }
    if let Some(dir) = out {
        for (name, body) in [
            ("pairs.jsonl", to_jsonl(&mined.pairs)),
            ("groups.jsonl", to_jsonl(&mined.groups)),
        ] {
            let path = dir.join(name);
            write_atomic(&path, body.as_bytes())
                .map_err(|e| Failure::task(format!("{}: {e}", path.display())))?;
        }
    }
    Ok(())
}

fn inspect_tree(path: &Path) -> Result<(), Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    let parsed = tree::parse_unchecked(&text).map_err(|e| Failure::task(e.to_string()))?;
    println!(
        "{} always-rules, {} branches, depth {}",
        parsed.always.len(),
        parsed.branches.len(),
        parsed.depth()
    );
    if let Err(violations) = tree::validate(&parsed) {
        for v in &violations {
            eprintln!("invalid: {v}");
        }
        return Err(Failure::task(format!("{} violations", violations.len())));
    }
    println!("{}", tree::serialize(&parsed).map_err(|e| Failure::task(e.to_string()))?);
    Ok(())
}

fn report(run_dir: &Path, jsonl: Option<&Path>) -> Result<(), Failure> {
    let report = build_report(run_dir)?;
    print!("{}", report.to_table());
    if let Some(path) = jsonl {
        write_atomic(path, report.to_jsonl().as_bytes())
            .map_err(|e| Failure::task(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn replay(
    run_dir: &Path,
    out: &Path,
    cassette: Option<&Path>,
    workers: Option<usize>,
) -> Result<(), Failure> {
    let source = load_run(run_dir)?;
    let mut config = source.config.clone();
    if let Some(w) = workers {
        config.workers = w;
    }
    let cassette_path = cassette
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run_dir.join("cassette.jsonl"));
    let gateway = build_gateway(CassetteMode::Replay, &cassette_path, &config)?;
    let outcome = Optimizer::new(config, &gateway)
        .with_run_dir(out)
        .run(&source.train, &source.val, &source.base_prompt)?;
    report_outcome(&outcome, out)?;
    if let Some(original) = source.state.best() {
        if original.tree != outcome.best.tree {
            return Err(Failure::task("replayed best tree differs from the recorded run"));
        }
    }
    Ok(())
}

fn convert_cmd(
    benchmark: Benchmark,
    input: &Path,
    output: &Path,
    task: Option<&str>,
    labels: Option<&str>,
) -> Result<(), Failure> {
    let text = std::fs::read_to_string(input)
        .map_err(|e| Failure::config(format!("{}: {e}", input.display())))?;
    let records = match benchmark {
        Benchmark::HotpotQa => convert::hotpotqa(&text),
        Benchmark::Gpqa => convert::gpqa(&text),
        Benchmark::Bbh => {
            let stem = input
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "bbh".into());
            convert::bbh(&text, task.unwrap_or(&stem))
        }
        Benchmark::Gdpr => convert::gdpr(
            &text,
            labels.map(|l| l.split(',').map(|s| s.trim().to_string()).collect()),
        ),
    }
    .map_err(|e| Failure::config(format!("{}: {e}", input.display())))?;
    write_atomic(output, to_jsonl(&records).as_bytes())
        .map_err(|e| Failure::task(format!("{}: {e}", output.display())))?;
    println!("wrote {} records to {}", records.len(), output.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Optimize {
            dataset,
            run_dir,
            base_prompt,
            resume,
            config,
            gateway,
        } => optimize(
            dataset.as_deref(),
            &run_dir,
            base_prompt.as_deref(),
            resume,
            &config,
            &gateway,
        ),
        Command::Evaluate {
            dataset,
            tree,
            run_dir,
            base_prompt,
            split,
            config,
            gateway,
        } => evaluate_cmd(
            &dataset,
            tree.as_deref(),
            run_dir.as_deref(),
            base_prompt.as_deref(),
            &split,
            &config,
            &gateway,
        ),
        Command::Mine {
            attempts,
            delta_min,
            threshold,
            strict_success_pairs,
            out,
        } => mine_cmd(&attempts, delta_min, threshold, strict_success_pairs, out.as_deref()),
        Command::InspectTree { path } => inspect_tree(&path),
        Command::Report { run_dir, jsonl } => report(&run_dir, jsonl.as_deref()),
        Command::Replay {
            run_dir,
            out,
            cassette,
            workers,
        } => replay(&run_dir, &out, cassette.as_deref(), workers),
        Command::Convert {
            benchmark,
            input,
            output,
            task,
            labels,
        } => convert_cmd(benchmark, &input, &output, task.as_deref(), labels.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
