use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use thinslice::config::RunConfig;
use thinslice::corpus::{lookup_task, summarize, SliceKey};
use thinslice::ensemble::Penalty;
use thinslice::fixture::write_fixture;
use thinslice::inference::{latest_by_key, read_journal, run_experiment, RunOptions, JOURNAL_FILE};
use thinslice::promptkit::Configuration;
use thinslice::report::{build_report, Analysis, ReportInputs, ReportOptions, REPORT_DIR};

/// Evaluate prompted language models on thin-sliced clinical transcripts.
#[derive(Parser)]
#[command(name = "thinslice", version)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "thinslice.toml")]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured run directory.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check that every input parses and that labels, slices and metadata agree.
    Validate,
    /// Slice the transcripts and print corpus statistics.
    Slice,
    /// Print the compiled prompt for one slice, task and configuration.
    PromptPreview(PreviewArgs),
    /// Query the backends for every pending prediction.
    Run(RunArgs),
    /// Write the report bundle from the prediction journal.
    Analyze(AnalyzeArgs),
    /// Run only the ensemble analysis.
    Ensemble(EnsembleArgs),
    /// Write a synthetic study with mock backends into a directory.
    Fixture(FixtureArgs),
}

#[derive(Args)]
struct PreviewArgs {
    /// Configuration id, e.g. LLaMA-FS.
    #[arg(long = "config-id")]
    config_id: String,
    #[arg(long)]
    task: String,
    #[arg(long)]
    visit: String,
    #[arg(long)]
    slice: usize,
}

#[derive(Args)]
struct RunArgs {
    /// Upper bound on concurrent backend requests.
    #[arg(long)]
    max_in_flight: Option<usize>,
    /// Stop after this many new predictions.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Comma-separated analyses; defaults to the configured set.
    #[arg(long, value_delimiter = ',')]
    which: Vec<String>,
    /// Output directory; defaults to `report` inside the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EnsembleArgs {
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_parser = ["l1", "l2"])]
    penalty: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FixtureArgs {
    dir: PathBuf,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Invalid(anyhow::Error),
    BackendExhausted(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Invalid(e)
    }
}

impl From<thinslice::Error> for Failure {
    fn from(e: thinslice::Error) -> Self {
        Failure::Invalid(e.into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::BackendExhausted(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(&cli.config).with_context(|| format!("loading {}", cli.config.display()))?;
    if let Some(seed) = cli.seed {
        cfg.seed = Some(seed);
    }
    if let Some(dir) = &cli.run_dir {
        cfg.paths.run_dir = std::path::absolute(dir)?;
    }
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    if let Command::Fixture(args) = &cli.command {
        let paths = write_fixture(&args.dir, cli.seed.unwrap_or(7))?;
        println!("wrote synthetic study to {}", paths.dir.display());
        println!("next: thinslice --config {} run", paths.config.display());
        return Ok(());
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Validate => validate(&cfg),
        Command::Slice => slice(&cfg),
        Command::PromptPreview(a) => preview(&cfg, a),
        Command::Run(a) => run(&cfg, a),
        Command::Analyze(a) => {
            let which = if a.which.is_empty() {
                cfg.selected_analyses()?
            } else {
                a.which.iter().map(|w| w.parse()).collect::<Result<Vec<Analysis>, _>>()?
            };
            analyze(&cfg, &which, a.out.as_deref())
        }
        Command::Ensemble(a) => {
            let mut cfg = cfg;
            if let Some(l) = a.lambda {
                cfg.analysis.lambda = l;
            }
            if let Some(p) = &a.penalty {
                cfg.analysis.penalty = if p == "l2" { Penalty::L2 } else { Penalty::L1 };
            }
            analyze(&cfg, &[Analysis::Ensemble], a.out.as_deref())
        }
        Command::Fixture(_) => unreachable!("handled above"),
    }
}

fn validate(cfg: &RunConfig) -> Result<(), Failure> {
    let report = cfg.validate();
    for n in &report.notes {
        println!("note: {n}");
    }
    if report.is_clean() {
        println!("ok: configuration and inputs are consistent");
        return Ok(());
    }
    for v in &report.violations {
        println!("violation: {v}");
    }
    Err(Failure::Invalid(anyhow::anyhow!("{} violation(s)", report.violations.len())))
}

fn slice(cfg: &RunConfig) -> Result<(), Failure> {
    let corpus = cfg.load_corpus()?;
    let summary = summarize(&corpus.slices, corpus.dropped_slices);
    println!(
        "{} visits, {} slices kept, {} dropped below {} words, {} labels",
        summary.visits,
        summary.slices,
        summary.dropped_slices,
        cfg.corpus.min_words,
        corpus.labels.len()
    );
    print!("{}", summary.to_markdown());
    Ok(())
}

fn preview(cfg: &RunConfig, a: &PreviewArgs) -> Result<(), Failure> {
    let config: Configuration = a.config_id.parse()?;
    let task = lookup_task(&a.task).with_context(|| format!("unknown task `{}`", a.task))?;
    let corpus = cfg.load_corpus()?;
    let key = SliceKey {
        visit_id: a.visit.clone(),
        slice_index: a.slice,
    };
    let slice = corpus
        .slice(&key)
        .with_context(|| format!("no slice {key} (it may fall below min_words)"))?;
    let compiler = cfg.build_compiler(&corpus, &[config])?;
    let prompt = compiler.compile(config, task, slice)?;
    println!("{}", prompt.full_text);
    Ok(())
}

fn run(cfg: &RunConfig, a: &RunArgs) -> Result<(), Failure> {
    let report = cfg.validate();
    if !report.is_clean() {
        for v in &report.violations {
            eprintln!("violation: {v}");
        }
        return Err(Failure::Invalid(anyhow::anyhow!("validation failed; nothing was run")));
    }
    let corpus = cfg.load_corpus()?;
    let configs = cfg.selected_configs()?;
    let tasks = cfg.selected_tasks()?;
    let compiler = cfg.build_compiler(&corpus, &configs)?;
    let backends = cfg.build_backends(&configs)?;
    let run_dir = cfg.run_dir();
    std::fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    let options = RunOptions {
        max_in_flight: a.max_in_flight.unwrap_or_else(|| cfg.max_in_flight(&configs)),
        max_new_keys: a.limit,
    };
    println!(
        "running {} configuration(s) x {} task(s) with up to {} request(s) in flight",
        configs.len(),
        tasks.len(),
        options.max_in_flight
    );
    let summary = run_experiment(&corpus, &configs, &tasks, &backends, &compiler, &run_dir, &options)?;
    println!(
        "{} pending, {} new records, {} backend calls, {} abstentions, {} transport errors",
        summary.pending_before, summary.new_records, summary.backend_calls, summary.abstentions, summary.transport_errors
    );
    let mut by_config: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in &summary.records {
        let e = by_config.entry(r.config_id.clone()).or_default();
        e.0 += 1;
        e.1 += usize::from(!r.is_answered());
    }
    for c in &configs {
        if let Some((n, abstained)) = by_config.get(&c.config_id()) {
            println!("  {:<12} {n:>6} records, {abstained:>5} unanswered", c.config_id());
        }
    }
    println!("journal: {}", run_dir.join(JOURNAL_FILE).display());
    if summary.transport_errors > 0 {
        return Err(Failure::BackendExhausted(format!(
            "{} request(s) failed after all retries; rerun to retry them",
            summary.transport_errors
        )));
    }
    Ok(())
}

fn analyze(cfg: &RunConfig, which: &[Analysis], out: Option<&Path>) -> Result<(), Failure> {
    let corpus = cfg.load_corpus()?;
    let configs = cfg.selected_configs()?;
    let tasks = cfg.selected_tasks()?;
    let lexicon = cfg.load_lexicon()?;
    let run_dir = cfg.run_dir();
    let records = latest_by_key(read_journal(run_dir.join(JOURNAL_FILE))?);
    if records.is_empty() {
        bail_invalid(format!("no predictions in {}; run first", run_dir.display()))?;
    }
    let inputs = ReportInputs {
        corpus: &corpus,
        records: &records,
        configs: &configs,
        tasks: &tasks,
        lexicon: lexicon.as_ref(),
        options: ReportOptions {
            q: cfg.analysis.q,
            lambda: cfg.analysis.lambda,
            penalty: cfg.analysis.penalty,
        },
    };
    let bundle = build_report(&inputs, which)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| run_dir.join(REPORT_DIR));
    bundle.write(&dir)?;
    for n in bundle.notices() {
        println!("skipped {n}");
    }
    println!(
        "wrote {} file(s) to {} (source sha256 {})",
        bundle.artifacts.len(),
        dir.display(),
        &bundle.stamp[..12]
    );
    Ok(())
}

fn bail_invalid(msg: String) -> anyhow::Result<()> {
    bail!(msg)
}
