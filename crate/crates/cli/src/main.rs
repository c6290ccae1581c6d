//! Command-line driver: prepare a split, train, evaluate and grid-search.

mod config;
mod output;

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use occf_core::data::{compact, load_ratings, popularity, select_holdout, split_random, split_temporal, SplitSnapshot};
use occf_core::eval::{
    cold_start_eval, evaluate, popularity_report, write_cold_start_table, write_metrics_table, write_popularity_table,
};
use occf_core::synth::{generate, write_tsv, SynthConfig};
use occf_core::trainer::{pick_best, train_and_validate, train_model, GridOutcome, GridResult};
use occf_core::{ModelKind, TrainConfig, TrainMode};
use serde::{Deserialize, Serialize};

use config::{ExperimentConfig, SplitKind};
use output::{sha256_hex, Staged};

/// Failure classes, each with its own exit status.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Diverged(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Diverged(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Diverged(m) => write!(f, "numerical divergence: {m}"),
        }
    }
}

impl From<occf_core::Error> for CliError {
    fn from(e: occf_core::Error) -> Self {
        match e {
            occf_core::Error::Diverged { .. } => CliError::Diverged(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "occf", version, about = "One-class collaborative filtering with two-headed autoencoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Binarize a ratings file, split it and write a split snapshot.
    Prepare(PrepareArgs),
    /// Train one model on a prepared split.
    Train(TrainArgs),
    /// Score trained models and write metric, popularity and cold-start tables.
    Evaluate(EvaluateArgs),
    /// Train every configuration of the lattice and keep the best.
    Grid(GridArgs),
    /// Write a synthetic ratings file.
    Synth(SynthArgs),
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Flags override its values.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output root directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct PrepareArgs {
    #[command(flatten)]
    common: Common,
    /// Ratings file.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long, value_enum)]
    split: Option<SplitKind>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    holdout_fraction: Option<f64>,
}

#[derive(Args)]
struct TrainOverrides {
    /// Model kind: autorec, ohns, ns or nce.
    #[arg(long)]
    model: Option<ModelKind>,
    /// joint, alternating, limited_fine_tune or full_fine_tune.
    #[arg(long)]
    mode: Option<TrainMode>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    overrides: TrainOverrides,
    /// Split snapshot; defaults to `<output>/split.bin`.
    #[arg(long)]
    split_file: Option<PathBuf>,
    /// Run directory; defaults to `<output>/<model>`, suffixed with the mode
    /// for two-headed kinds.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    /// Model snapshot as `name=path` or `path`; repeatable.
    #[arg(long = "model", required = true)]
    models: Vec<String>,
    #[arg(long)]
    split_file: Option<PathBuf>,
    /// Comma-separated @K cutoffs.
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    /// Report directory; defaults to `<output>/eval`.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    overrides: TrainOverrides,
    #[arg(long)]
    split_file: Option<PathBuf>,
    /// Grid directory; defaults to `<output>/grid-<model>`.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Destination ratings file.
    #[arg(long)]
    out: PathBuf,
    /// Generator settings (TOML); flags override.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    items: Option<usize>,
}

const THREADS_VAR: &str = "OCCF_THREADS";

fn configure_threads() -> CliResult<usize> {
    let threads = match std::env::var(THREADS_VAR) {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Usage(format!("{THREADS_VAR} must be a positive integer, got {v:?}")))?,
        Err(_) => 1,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    Ok(threads)
}

fn load_config(common: &Common) -> CliResult<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.output {
        config.output = out.clone();
    }
    Ok(config)
}

fn absolute(path: &Path) -> PathBuf {
    std::path::absolute(path).unwrap_or_else(|_| path.to_path_buf())
}

/// The resolved config with absolute paths, so it reloads from anywhere.
fn resolved_toml(config: &ExperimentConfig, threads: usize) -> Vec<u8> {
    let mut c = config.clone();
    c.data.path = absolute(&c.data.path);
    c.output = absolute(&c.output);
    let mut text = String::new();
    if threads > 1 {
        text.push_str(&format!(
            "# produced with {THREADS_VAR}={threads}: float reductions are not bit-reproducible\n"
        ));
    }
    text.push_str(&c.to_toml());
    text.into_bytes()
}

fn apply_overrides(config: &mut ExperimentConfig, o: &TrainOverrides) {
    let t = &mut config.train;
    if let Some(v) = o.model {
        config.model = v;
    }
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = o.$field { t.$field = v; })* };
    }
    set!(mode, latent_dim, lambda, beta, learning_rate, batch_size, max_epochs, patience, seed);
    if o.negatives.is_some() {
        t.negatives = o.negatives;
    }
}

fn check_model_config(config: &ExperimentConfig) -> CliResult {
    config.validate()?;
    if matches!(config.model, ModelKind::Ns | ModelKind::Ohns)
        && config.train.negatives.is_none()
        && config.grid.negatives.is_empty()
    {
        return Err(CliError::Usage(format!(
            "model {} needs the per-user negative count: set train.negatives or --negatives",
            config.model
        )));
    }
    Ok(())
}

/// Directory name of a run: the mode only matters for two-headed kinds.
fn run_name(config: &ExperimentConfig) -> String {
    match config.model {
        ModelKind::Ns | ModelKind::Nce => format!("{}-{}", config.model, config.train.mode.name()),
        kind => kind.to_string(),
    }
}

fn read_snapshot(config: &ExperimentConfig, split_file: &Option<PathBuf>) -> CliResult<(PathBuf, SplitSnapshot)> {
    let path = split_file.clone().unwrap_or_else(|| config.output.join("split.bin"));
    let snapshot = SplitSnapshot::load(&path)?;
    Ok((path, snapshot))
}

fn cmd_prepare(args: PrepareArgs, threads: usize) -> CliResult {
    let mut config = load_config(&args.common)?;
    let d = &mut config.data;
    if let Some(v) = args.data {
        d.path = v;
    }
    if let Some(v) = args.eta {
        d.eta = v;
    }
    if let Some(v) = args.split {
        d.split = v;
    }
    if let Some(v) = args.split_seed {
        d.split_seed = v;
    }
    if let Some(v) = args.holdout_fraction {
        d.holdout_fraction = v;
    }
    config.validate()?;
    let d = &config.data;
    if d.path.as_os_str().is_empty() {
        return Err(CliError::Usage("no ratings file given (data.path or --data)".into()));
    }

    let (records, vocab) = load_ratings(&d.path, &d.layout)?;
    let (vocab, matrix) = compact(&records, &vocab, d.eta)?;
    if matrix.nnz() == 0 {
        return Err(CliError::Data(format!("no ratings at or above eta = {}", d.eta)));
    }
    let split = match d.split {
        SplitKind::Temporal => split_temporal(&matrix, &records, &vocab, &d.ratios)?,
        SplitKind::Random => split_random(&matrix, &d.ratios, d.split_seed)?,
    };
    let heldout: Vec<u32> = if d.holdout_fraction > 0.0 {
        select_holdout(matrix.n_users(), d.holdout_fraction, d.holdout_seed)?
            .iter()
            .enumerate()
            .filter(|(_, &h)| h)
            .map(|(u, _)| u as u32)
            .collect()
    } else {
        Vec::new()
    };
    let snapshot = SplitSnapshot::new(vocab, split, heldout)?;
    let bytes = snapshot.to_bytes();
    let digest = sha256_hex(&bytes);

    let view = snapshot.training_view();
    let profile = popularity(&view.train)?;
    let (m, n, nnz) = (matrix.n_users(), matrix.n_items(), matrix.nnz());
    let sparsity = matrix.density();

    let mut staged = Staged::new(&config.output);
    staged.add("split.bin", bytes);
    staged.add_with("popularity.tsv", |w| {
        writeln!(w, "item\tcount\tprobability")?;
        for (j, (c, p)) in profile.counts.iter().zip(&profile.probs).enumerate() {
            writeln!(w, "{}\t{c}\t{p}", snapshot.vocab.item_key(j).unwrap_or_default())?;
        }
        Ok(())
    });
    staged.add_with("summary.tsv", |w| {
        writeln!(w, "users\titems\tinteractions\tsparsity\ttrain\tvalidation\ttest\theldout_users\tsplit_sha256")?;
        writeln!(
            w,
            "{m}\t{n}\t{nnz}\t{sparsity:.3e}\t{}\t{}\t{}\t{}\t{digest}",
            snapshot.split.train.nnz(),
            snapshot.split.validation.nnz(),
            snapshot.split.test.nnz(),
            snapshot.heldout.len()
        )
    });
    staged.add("config.toml", resolved_toml(&config, threads));
    staged.commit()?;

    println!("{:>10} {:>10} {:>14} {:>12}", "m", "n", "|r>=eta|", "sparsity");
    println!("{m:>10} {n:>10} {nnz:>14} {sparsity:>12.3e}");
    println!("split snapshot sha256 {digest}");
    Ok(())
}

fn cmd_train(args: TrainArgs, threads: usize) -> CliResult {
    let mut config = load_config(&args.common)?;
    apply_overrides(&mut config, &args.overrides);
    check_model_config(&config)?;
    let (_, snapshot) = read_snapshot(&config, &args.split_file)?;
    let run_dir = args
        .run_dir
        .unwrap_or_else(|| config.output.join(run_name(&config)));

    let view = snapshot.training_view();
    let (model, report) = train_model(config.model, &view.train, &view.validation, &config.train)?;
    let bytes = model.to_bytes();
    let digest = sha256_hex(&bytes);

    let mut staged = Staged::new(&run_dir);
    staged.add("model.bin", bytes);
    staged.add_with("report.tsv", |w| report.write_table(w));
    staged.add(
        "report.json",
        serde_json::to_vec_pretty(&report).expect("report serializes"),
    );
    staged.add("config.toml", resolved_toml(&config, threads));
    staged.commit()?;

    println!(
        "{} ({}): {} epochs, best validation NDCG {:.4}, {:.1}s{}",
        config.model,
        config.train.mode.name(),
        report.stopped_epoch,
        report.best_val_ndcg,
        report.total_seconds(),
        report
            .phase_boundary
            .map(|b| format!(", second phase from epoch {b}"))
            .unwrap_or_default()
    );
    println!("model sha256 {digest}");
    println!("wrote {}", run_dir.display());
    Ok(())
}

fn parse_model_arg(arg: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((name, path)) if !name.is_empty() => (name.to_string(), PathBuf::from(path)),
        _ => {
            let path = PathBuf::from(arg);
            let name = path
                .parent()
                .and_then(|p| p.file_name())
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "model".into());
            (name, path)
        }
    }
}

fn cmd_evaluate(args: EvaluateArgs, threads: usize) -> CliResult {
    let mut config = load_config(&args.common)?;
    if let Some(ks) = args.ks {
        config.ks = ks;
    }
    config.validate()?;

    // every input is read and checked before anything is written
    let (_, snapshot) = read_snapshot(&config, &args.split_file)?;
    let mut models = Vec::new();
    for arg in &args.models {
        let (name, path) = parse_model_arg(arg);
        if models.iter().any(|(n, _)| n == &name) {
            return Err(CliError::Usage(format!("model name {name:?} given twice")));
        }
        let model = occf_core::TwoHeadedModel::load(&path)?;
        if model.n_items() != snapshot.split.n_items() {
            return Err(CliError::Data(format!(
                "{} scores {} items but the split vocabulary has {}",
                path.display(),
                model.n_items(),
                snapshot.split.n_items()
            )));
        }
        models.push((name, model));
    }
    let named: Vec<(&str, &occf_core::TwoHeadedModel)> = models.iter().map(|(n, m)| (n.as_str(), m)).collect();

    let view = snapshot.training_view();
    let profile = popularity(&view.train)?;
    let mut reports = Vec::new();
    for (name, model) in &named {
        reports.push((*name, evaluate(model, &view.train, &view.test, &config.ks)?.report));
    }
    let popularity_tables = popularity_report(&named, &view, &profile, config.popularity_k)?;
    let cold = if snapshot.heldout.is_empty() {
        None
    } else {
        Some(cold_start_eval(&named, &snapshot.heldout_view(), config.popularity_k)?)
    };

    let run_dir = args.run_dir.unwrap_or_else(|| config.output.join("eval"));
    let mut staged = Staged::new(&run_dir);
    let metric_refs: Vec<(&str, &_)> = reports.iter().map(|(n, r)| (*n, r)).collect();
    staged.add_with("metrics.csv", |w| write_metrics_table(w, &metric_refs));
    staged.add_with("popularity.csv", |w| write_popularity_table(w, &popularity_tables));
    if let Some(cold) = &cold {
        staged.add_with("cold_start.csv", |w| write_cold_start_table(w, cold));
    }
    staged.add("config.toml", resolved_toml(&config, threads));
    staged.commit()?;

    for ((name, report), pop) in reports.iter().zip(&popularity_tables) {
        println!(
            "{name}: NDCG {:.4} over {} users, mean popularity of top-{} {:.1}",
            report.ndcg(),
            report.users,
            config.popularity_k,
            pop.mean_popularity
        );
    }
    if let Some(cold) = &cold {
        for (i, name) in cold.models.iter().enumerate() {
            println!("{name}: cold-start NDCG {:.4} over {} users", cold.mean_ndcg(i), cold.rows.len());
        }
    }
    println!("wrote {}", run_dir.display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct JournalEntry {
    index: usize,
    config: TrainConfig,
    val_ndcg: f64,
    seconds: f64,
}

const JOURNAL: &str = "grid_journal.jsonl";

/// Completed rows of an earlier run, keyed by lattice position. Rows whose
/// config no longer matches the lattice are ignored, as is a torn last line.
fn read_journal(path: &Path, configs: &[TrainConfig]) -> Vec<Option<GridResult>> {
    let mut done = vec![None; configs.len()];
    let Ok(file) = fs::File::open(path) else {
        return done;
    };
    for line in std::io::BufReader::new(file).lines().map_while(Result::ok) {
        let Ok(e) = serde_json::from_str::<JournalEntry>(&line) else {
            continue;
        };
        if configs.get(e.index) == Some(&e.config) {
            done[e.index] = Some(GridResult {
                config: e.config,
                val_ndcg: e.val_ndcg,
                seconds: e.seconds,
            });
        }
    }
    done
}

fn cmd_grid(args: GridArgs, threads: usize) -> CliResult {
    let mut config = load_config(&args.common)?;
    apply_overrides(&mut config, &args.overrides);
    check_model_config(&config)?;
    let (_, snapshot) = read_snapshot(&config, &args.split_file)?;
    let configs = config.grid.expand(&config.train);
    for c in &configs {
        c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if matches!(config.model, ModelKind::Ns | ModelKind::Ohns) && c.negatives.is_none() {
            return Err(CliError::Usage("lattice point without a negative count".into()));
        }
    }
    let run_dir = args
        .run_dir
        .unwrap_or_else(|| config.output.join(format!("grid-{}", config.model)));
    fs::create_dir_all(&run_dir).map_err(|e| CliError::Data(format!("{}: {e}", run_dir.display())))?;
    let journal_path = run_dir.join(JOURNAL);
    let mut done = read_journal(&journal_path, &configs);
    let resumed = done.iter().filter(|d| d.is_some()).count();
    if resumed > 0 {
        println!("resuming: {resumed} of {} configurations already done", configs.len());
    }
    let mut journal = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&journal_path)
        .map_err(|e| CliError::Data(format!("{}: {e}", journal_path.display())))?;

    let view = snapshot.training_view();
    for (i, c) in configs.iter().enumerate() {
        if done[i].is_some() {
            continue;
        }
        let started = Instant::now();
        let val_ndcg = train_and_validate(config.model, &view.train, &view.validation, c)?;
        let seconds = started.elapsed().as_secs_f64();
        let entry = JournalEntry {
            index: i,
            config: c.clone(),
            val_ndcg,
            seconds,
        };
        let line = serde_json::to_string(&entry).expect("journal entry serializes");
        writeln!(journal, "{line}")
            .and_then(|_| journal.sync_data())
            .map_err(|e| CliError::Data(format!("{}: {e}", journal_path.display())))?;
        println!("[{}/{}] validation NDCG {val_ndcg:.4} ({seconds:.1}s)", i + 1, configs.len());
        done[i] = Some(GridResult {
            config: c.clone(),
            val_ndcg,
            seconds,
        });
    }

    let results: Vec<GridResult> = done.into_iter().map(|d| d.expect("every row done")).collect();
    let best = pick_best(&results).expect("nonempty lattice");
    let outcome = GridOutcome { results, best };
    let mut best_config = config.clone();
    best_config.train = outcome.best().config.clone();
    best_config.grid = Default::default();

    let mut staged = Staged::new(&run_dir);
    staged.add_with("grid.csv", |w| outcome.write_table(w));
    staged.add("best_config.toml", resolved_toml(&best_config, threads));
    staged.add("config.toml", resolved_toml(&config, threads));
    staged.commit()?;
    println!(
        "best: r={} lambda={} beta={} N={} mode={} validation NDCG {:.4}",
        outcome.best().config.latent_dim,
        outcome.best().config.lambda,
        outcome.best().config.beta,
        outcome.best().config.negatives.map(|n| n.to_string()).unwrap_or("-".into()),
        outcome.best().config.mode.name(),
        outcome.best().val_ndcg
    );
    println!("wrote {}", run_dir.display());
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> CliResult {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => SynthConfig::default(),
    };
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.users {
        config.users = v;
    }
    if let Some(v) = args.items {
        config.items = v;
    }
    let records = generate(&config).map_err(|e| CliError::Usage(e.to_string()))?;
    let dir = args.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = args
        .out
        .file_name()
        .ok_or_else(|| CliError::Usage("--out must name a file".into()))?
        .to_string_lossy()
        .into_owned();
    let mut staged = Staged::new(dir);
    staged.add_with(&name, |w| write_tsv(&records, w));
    staged.commit()?;
    println!("wrote {} ratings to {}", records.len(), args.out.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    let command = cli.command;
    if let Command::Synth(args) = command {
        return cmd_synth(args);
    }
    let threads = configure_threads()?;
    match command {
        Command::Prepare(a) => cmd_prepare(a, threads),
        Command::Train(a) => cmd_train(a, threads),
        Command::Evaluate(a) => cmd_evaluate(a, threads),
        Command::Grid(a) => cmd_grid(a, threads),
        Command::Synth(_) => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("occf: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
