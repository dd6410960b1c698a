//! `uavtype`: command-line driver for the UAV type classification pipeline.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::ArrayView2;

use uavtype_core::cache::{read_dataset, write_cache, write_dataset};
use uavtype_core::config::{DataSource, RunConfig};
use uavtype_core::eval::baseline_scores;
use uavtype_core::features::{compute_coverage, prune_by_coverage};
use uavtype_core::lstm::save_checkpoint;
use uavtype_core::pipeline::{load_corpus, prepare_dataset, run_grid, run_single, write_outputs, Grid};
use uavtype_core::rebalance::rebalance;
use uavtype_core::report::{load_trials, render_table, render_tradeoff, write_atomic, write_report_files};
use uavtype_core::resample::Standardizer;
use uavtype_core::synth::{generate_corpus, write_ulog, CorpusProfile};
use uavtype_core::train::train;
use uavtype_core::ulog::{ingest_files, list_ulog_files};
use uavtype_core::{ClassCounts, Dataset, VehicleType};

/// Environment variable naming the default ULog directory.
const DATA_DIR_ENV: &str = "UAVTYPE_DATA_DIR";

#[derive(Parser)]
#[command(name = "uavtype", version, about = "Classify UAV type from PX4 flight logs")]
struct Cli {
    /// Log more (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a directory of .ulg files into a flight cache.
    Ingest {
        /// Directory holding the .ulg files.
        #[arg(env = DATA_DIR_ENV)]
        dir: PathBuf,
        /// Cache file to write.
        #[arg(short, long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Report feature coverage over a corpus.
    Catalog {
        #[command(flatten)]
        config: ConfigArgs,
        /// Write the full coverage table to this CSV file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Assemble and resample flights into a dataset file.
    Sample {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset file to write.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Rebalance a dataset file with the configured method.
    Balance {
        /// Dataset written by `sample`.
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train one network on a whole dataset file and save it.
    Train {
        /// Dataset written by `sample` or `balance`.
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint file to write.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Cross-validate the configured pipeline as a single trial.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run a numbered trial grid.
    Experiment {
        grid: GridArg,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Render tables and plot data from saved trial reports.
    Report {
        /// Directory holding trial_*.json files.
        dir: PathBuf,
        /// Trial the tradeoff table compares against.
        #[arg(long, default_value_t = 1)]
        reference: u32,
        /// Where to write the rendered files (defaults to `dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a labelled synthetic corpus.
    Synth {
        /// Cache file to write.
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        quadrotor: usize,
        #[arg(long, default_value_t = 40)]
        hexarotor: usize,
        #[arg(long, default_value_t = 40)]
        fixed_wing: usize,
        /// Logging rate of every topic.
        #[arg(long, default_value_t = 5.0)]
        sample_rate_hz: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write every flight as a .ulg file here.
        #[arg(long)]
        ulog_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum GridArg {
    /// Trials 1 to 12: sampling method and parameters.
    Sampling,
    /// Trials 13 to 27: balancing method and level.
    Imbalance,
}

/// Run configuration: a TOML file plus command-line overrides.
#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Read flights from this cache file (takes precedence over --data-dir).
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Read flights from this directory of .ulg files.
    #[arg(long, env = DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,
    /// Directory for reports.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let text = match &self.config {
            Some(path) => std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
            None => String::new(),
        };
        let mut table: toml::Table = toml::from_str(&text).context("parsing config")?;
        for item in &self.overrides {
            apply_override(&mut table, item)?;
        }
        let mut config = RunConfig::from_toml(&table.to_string())?;
        if let Some(path) = &self.cache {
            config.data = DataSource::Cache { path: path.clone() };
        } else if let Some(path) = &self.data_dir {
            // an explicit data block in the file wins over the environment
            if !table.contains_key("data") {
                config.data = DataSource::UlogDir { path: path.clone() };
            }
        }
        if let Some(dir) = &self.output_dir {
            config.output_dir = dir.clone();
        }
        config.validate()?;
        Ok(config)
    }
}

/// Sets a dotted key in a TOML table. The value is parsed as TOML and
/// falls back to a bare string.
fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item.split_once('=').with_context(|| format!("override {item:?} is not KEY=VALUE"))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).with_context(|| format!("empty key in {item:?}"))?;
    let mut node = table;
    for part in parts {
        node = node
            .entry(part)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("{part} in {key} is not a table"))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

fn print_counts(title: &str, counts: &ClassCounts) {
    println!("{title}");
    for class in VehicleType::CLASSES {
        println!("  {:<12} {}", class.name(), counts.get(class));
    }
}

fn load_flights(config: &RunConfig) -> Result<Vec<uavtype_core::FlightLog>> {
    if let DataSource::Cache { path } = &config.data {
        if !path.exists() {
            bail!(
                "cache {} not found; create it with `uavtype ingest` or `uavtype synth`",
                path.display()
            );
        }
    }
    Ok(load_corpus(config)?)
}

/// Writes the resolved config before training so a failed run still records it.
fn prepare_output(config: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&config.output_dir)
        .with_context(|| format!("creating {}", config.output_dir.display()))?;
    write_atomic(&config.output_dir.join("run_config.toml"), config.to_toml()?.as_bytes())?;
    Ok(())
}

fn cmd_ingest(dir: &Path, out: &Path, config: &ConfigArgs) -> Result<()> {
    let config = config.resolve()?;
    if !dir.is_dir() {
        bail!("{} is not a directory", dir.display());
    }
    let files = list_ulog_files(dir)?;
    let report = ingest_files(&files, &config.vehicle_types);
    for (file, reason) in &report.skipped {
        println!("skipped {}: {reason}", file.display());
    }
    for file in &report.truncated {
        println!("truncated {} (kept complete messages)", file.display());
    }
    if report.logs.is_empty() {
        bail!("no parsable logs in {}", dir.display());
    }
    write_cache(&report.logs, out)?;
    println!(
        "{} of {} files ingested into {}",
        report.logs.len(),
        files.len(),
        out.display()
    );
    for (class, n) in report.class_counts() {
        println!("  {:<12} {n}", class.name());
    }
    Ok(())
}

fn cmd_catalog(config: &ConfigArgs, out: Option<&Path>) -> Result<()> {
    let config = config.resolve()?;
    let corpus = load_flights(&config)?;
    let table = compute_coverage(&corpus)?;
    let threshold = config.features.coverage_threshold;
    let kept = prune_by_coverage(&table, threshold)?;
    println!("{} flights, {} raw features", table.corpus_size, table.counts.len());
    println!("{} features in at least {:.0}% of flights:", kept.len(), threshold * 100.0);
    for key in &kept {
        println!("  {key:<48} {:.3}", table.fraction(key));
    }
    if let Some(path) = out {
        write_atomic(path, table.to_csv().as_bytes())?;
        println!("coverage table written to {}", path.display());
    }
    Ok(())
}

fn cmd_sample(config: &ConfigArgs, out: &Path) -> Result<()> {
    let config = config.resolve()?;
    let corpus = load_flights(&config)?;
    let (dataset, excluded) = prepare_dataset(&config, &corpus, &config.sampling)?;
    if dataset.is_empty() {
        bail!("no flight could be sampled");
    }
    write_dataset(&dataset, out)?;
    println!(
        "{} instances of {} intervals x {} features written to {} ({excluded} flights excluded)",
        dataset.len(),
        config.sampling.n_intervals,
        dataset.feature_names.len(),
        out.display()
    );
    print_counts("class counts:", &dataset.class_counts());
    Ok(())
}

fn cmd_balance(dataset: &Path, config: &ConfigArgs, out: &Path) -> Result<()> {
    let config = config.resolve()?;
    let before = read_dataset(dataset)?;
    let after = rebalance(&before, &config.balance)?;
    write_dataset(&after, out)?;
    println!("{} {}", config.balance.method.label(), config.balance.parameter_label());
    print_counts("before:", &before.class_counts());
    print_counts("after:", &after.class_counts());
    Ok(())
}

fn labels_of(dataset: &Dataset) -> Result<Vec<usize>> {
    dataset
        .instances
        .iter()
        .map(|i| {
            i.label
                .class_index()
                .with_context(|| format!("{} has no class label", i.source_id))
        })
        .collect()
}

fn cmd_train(dataset: &Path, config: &ConfigArgs, out: &Path) -> Result<()> {
    let config = config.resolve()?;
    let mut data = read_dataset(dataset)?;
    if data.sampling.standardize {
        let scaler = Standardizer::fit(&data.instances)?;
        for inst in &mut data.instances {
            scaler.apply(inst);
        }
        let path = out.with_extension("scaler.json");
        write_atomic(&path, serde_json::to_string_pretty(&scaler)?.as_bytes())?;
        println!("feature scaling written to {}", path.display());
    }
    let labels = labels_of(&data)?;
    let inputs: Vec<ArrayView2<f64>> = data.instances.iter().map(|i| i.values.view()).collect();
    let outcome = train(&inputs, &labels, &config.train)?;
    for (epoch, loss) in outcome.loss_history.iter().enumerate() {
        println!("epoch {:>3}  loss {loss:.5}", epoch + 1);
    }
    save_checkpoint(&outcome.network, out)?;
    println!("checkpoint written to {}", out.display());
    Ok(())
}

fn print_baselines(counts: &ClassCounts) {
    let b = baseline_scores(counts.0);
    println!(
        "baselines: majority macro F {:.2}%, uniform macro F {:.2}%",
        b.majority_macro_f * 100.0,
        b.uniform_macro_f * 100.0
    );
}

fn cmd_evaluate(config: &ConfigArgs) -> Result<()> {
    let config = config.resolve()?;
    let corpus = load_flights(&config)?;
    prepare_output(&config)?;
    let report = run_single(&config, &corpus)?;
    write_outputs(&config, std::slice::from_ref(&report), &config.output_dir)?;
    println!("{}", render_table(std::slice::from_ref(&report)));
    println!("pooled confusion (rows truth, columns predicted):");
    for (class, row) in VehicleType::CLASSES.iter().zip(report.pooled.0) {
        println!("  {:<12} {:?}", class.name(), row);
    }
    let counts = ClassCounts([
        report.pooled.row_sum(0) as usize,
        report.pooled.row_sum(1) as usize,
        report.pooled.row_sum(2) as usize,
    ]);
    print_baselines(&counts);
    println!("outputs written to {}", config.output_dir.display());
    Ok(())
}

fn cmd_experiment(grid: GridArg, config: &ConfigArgs) -> Result<()> {
    let config = config.resolve()?;
    let corpus = load_flights(&config)?;
    prepare_output(&config)?;
    let grid = match grid {
        GridArg::Sampling => Grid::Sampling,
        GridArg::Imbalance => Grid::Imbalance,
    };
    let reports = run_grid(&config, &corpus, grid)?;
    write_outputs(&config, &reports, &config.output_dir)?;
    println!("{}", render_table(&reports));
    println!("{}", render_tradeoff(&reports, config.eval.reference_trial));
    println!("outputs written to {}", config.output_dir.display());
    Ok(())
}

fn cmd_report(dir: &Path, reference: u32, out: Option<&Path>) -> Result<()> {
    let reports = load_trials(dir)?;
    if reports.is_empty() {
        bail!("no trial reports in {}", dir.display());
    }
    let out = out.unwrap_or(dir);
    std::fs::create_dir_all(out)?;
    write_report_files(&reports, reference, out)?;
    println!("{}", render_table(&reports));
    println!("{}", render_tradeoff(&reports, reference));
    println!("report files written to {}", out.display());
    Ok(())
}

fn cmd_synth(out: &Path, profile: CorpusProfile, ulog_dir: Option<&Path>) -> Result<()> {
    let corpus = generate_corpus(&profile)?;
    write_cache(&corpus, out)?;
    if let Some(dir) = ulog_dir {
        std::fs::create_dir_all(dir)?;
        for log in &corpus {
            write_atomic(&dir.join(format!("{}.ulg", log.source_id)), &write_ulog(log)?)?;
        }
        println!("{} .ulg files written to {}", corpus.len(), dir.display());
    }
    println!("{} flights written to {}", corpus.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { dir, out, config } => cmd_ingest(&dir, &out, &config),
        Command::Catalog { config, out } => cmd_catalog(&config, out.as_deref()),
        Command::Sample { config, out } => cmd_sample(&config, &out),
        Command::Balance { dataset, config, out } => cmd_balance(&dataset, &config, &out),
        Command::Train { dataset, config, out } => cmd_train(&dataset, &config, &out),
        Command::Evaluate { config } => cmd_evaluate(&config),
        Command::Experiment { grid, config } => cmd_experiment(grid, &config),
        Command::Report { dir, reference, out } => cmd_report(&dir, reference, out.as_deref()),
        Command::Synth {
            out,
            quadrotor,
            hexarotor,
            fixed_wing,
            sample_rate_hz,
            seed,
            ulog_dir,
        } => {
            let profile = CorpusProfile {
                quadrotor,
                hexarotor,
                fixed_wing,
                sample_rate_hz,
                seed,
            };
            cmd_synth(&out, profile, ulog_dir.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
