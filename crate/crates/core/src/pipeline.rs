//! End-to-end runs: corpus loading, per-fold split/standardise/rebalance/
//! train/evaluate, and the two experiment grids.

use std::path::Path;

use ndarray::ArrayView2;
use rayon::prelude::*;
use thiserror::Error;

use crate::cache::{read_cache, CacheError};
use crate::config::{ConfigError, DataSource, RunConfig};
use crate::dataset::{build_dataset, ClassCounts, Dataset};
use crate::eval::{aggregate_folds, pooled_confusion, stratified_kfold, EvalError, FoldMetrics};
use crate::features::{compute_coverage, prune_by_coverage, random_subsets, FeatureError, FeatureSubset, SubsetDeclaration};
use crate::lstm::{predict_many, LstmError};
use crate::rebalance::{
    assert_test_fold_purity, fold_seed, rebalance, BalanceConfig, BalanceMethod, RebalanceError, Split,
};
use crate::report::{save_trial, write_atomic, write_report_files, ReportError, TrialReport};
use crate::resample::{standardize, ResampleError, SamplingConfig, SamplingMethod};
use crate::synth::{generate_corpus, SynthError};
use crate::train::{train, TrainConfig};
use crate::ulog::{ingest_files, list_ulog_files, FlightLog};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Resample(#[from] ResampleError),
    #[error(transparent)]
    Rebalance(#[from] RebalanceError),
    #[error(transparent)]
    Model(#[from] LstmError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("no parsable logs in {0}")]
    NoParsableLogs(String),
    #[error("dataset has no instances")]
    EmptyDataset,
}

/// Loads the flights named by the data source.
pub fn load_corpus(config: &RunConfig) -> Result<Vec<FlightLog>, PipelineError> {
    match &config.data {
        DataSource::Synth(profile) => Ok(generate_corpus(profile)?),
        DataSource::Cache { path } => Ok(read_cache(path)?),
        DataSource::UlogDir { path } => {
            let files = list_ulog_files(path)?;
            let report = ingest_files(&files, &config.vehicle_types);
            for (file, reason) in &report.skipped {
                log::info!("skipped {}: {reason}", file.display());
            }
            if report.logs.is_empty() {
                return Err(PipelineError::NoParsableLogs(path.display().to_string()));
            }
            Ok(report.logs)
        }
    }
}

/// The base subset when no random features are requested, otherwise `k`
/// random extensions drawn from the features meeting the coverage bar.
pub fn resolve_subsets(decl: &SubsetDeclaration, corpus: &[FlightLog]) -> Result<Vec<FeatureSubset>, FeatureError> {
    let base = decl.base_subset();
    if decl.n_random == 0 {
        return Ok(vec![base]);
    }
    let table = compute_coverage(corpus)?;
    let pruned = prune_by_coverage(&table, decl.coverage_threshold)?;
    random_subsets(&pruned, &base, decl.n_random, decl.k.max(1), &decl.exclusions, decl.seed)
}

/// What one fold produced.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub metrics: FoldMetrics,
    pub train_counts: ClassCounts,
    pub loss_history: Vec<f64>,
}

/// Split, standardise on the training part, rebalance it, train, and score
/// the untouched held-out part.
pub fn run_fold(
    dataset: &Dataset,
    train_idx: &[usize],
    test_idx: &[usize],
    fold: usize,
    balance: &BalanceConfig,
    train_cfg: &TrainConfig,
) -> Result<FoldOutcome, PipelineError> {
    let mut train_part: Vec<_> = train_idx.iter().map(|&i| dataset.instances[i].clone()).collect();
    let mut test_part: Vec<_> = test_idx.iter().map(|&i| dataset.instances[i].clone()).collect();
    if dataset.sampling.standardize {
        standardize(&mut train_part, &mut test_part)?;
    }
    let reference = test_part.clone();

    let balance_cfg = BalanceConfig {
        seed: fold_seed(balance.seed, fold),
        ..balance.clone()
    };
    let balanced = rebalance(&dataset.with_instances(train_part), &balance_cfg)?;

    let mut combined = balanced.instances.clone();
    combined.extend(test_part.iter().cloned());
    let mut splits = vec![Split::Train; balanced.len()];
    splits.extend(std::iter::repeat_n(Split::Test, test_part.len()));
    assert_test_fold_purity(&combined, &splits, &reference)?;

    let views: Vec<ArrayView2<f64>> = balanced.instances.iter().map(|i| i.values.view()).collect();
    let labels: Vec<usize> = balanced
        .instances
        .iter()
        .map(|i| i.label.class_index().expect("datasets hold the three classes only"))
        .collect();
    let fold_train = TrainConfig {
        seed: fold_seed(train_cfg.seed, fold),
        ..train_cfg.clone()
    };
    let outcome = train(&views, &labels, &fold_train)?;

    let test_views: Vec<ArrayView2<f64>> = test_part.iter().map(|i| i.values.view()).collect();
    let truth: Vec<usize> = test_part.iter().map(|i| i.label.class_index().unwrap()).collect();
    let predicted = predict_many(&outcome.network, &test_views, 256)?;
    let cm = crate::eval::confusion(&predicted, &truth)?;
    Ok(FoldOutcome {
        metrics: FoldMetrics::from_confusion(cm),
        train_counts: balanced.class_counts(),
        loss_history: outcome.loss_history,
    })
}

/// Identifies a trial in reports.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSpec {
    pub trial_id: u32,
    pub method: String,
    pub parameters: String,
    pub balance: BalanceConfig,
}

/// k-fold evaluation of one configuration. Folds run in parallel; results
/// are collected in fold order so the report does not depend on
/// scheduling.
pub fn run_trial(
    dataset: &Dataset,
    n_excluded: usize,
    spec: &TrialSpec,
    train_cfg: &TrainConfig,
    k: usize,
    fold_seed_base: u64,
) -> Result<TrialReport, PipelineError> {
    if dataset.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let folds = stratified_kfold(&dataset.labels(), k, fold_seed_base)?;
    let outcomes: Vec<FoldOutcome> = (0..k)
        .into_par_iter()
        .map(|f| {
            run_fold(
                dataset,
                &folds.train_indices(f),
                &folds.test_indices(f),
                f,
                &spec.balance,
                train_cfg,
            )
        })
        .collect::<Result<_, _>>()?;
    let metrics: Vec<FoldMetrics> = outcomes.iter().map(|o| o.metrics.clone()).collect();
    log::info!(
        "trial {} ({} {}): macro F {:.4}",
        spec.trial_id,
        spec.method,
        spec.parameters,
        metrics.iter().map(|m| m.macro_f).sum::<f64>() / k as f64
    );
    Ok(TrialReport {
        trial_id: spec.trial_id,
        method: spec.method.clone(),
        parameters: spec.parameters.clone(),
        aggregate: aggregate_folds(&metrics)?,
        pooled: pooled_confusion(&metrics),
        folds: metrics,
        train_counts: outcomes.iter().map(|o| o.train_counts).collect(),
        n_instances: dataset.len(),
        n_excluded,
    })
}

pub fn sampling_label(sampling: &SamplingConfig) -> &'static str {
    match sampling.method {
        SamplingMethod::Average => "Average Sampling",
        SamplingMethod::FixedWindow => "Fixed Window Average Sampling",
    }
}

/// Trials 1–12: average sampling over {50, 200, 500} intervals, then fixed
/// windows of {2, 5, 10} s for each interval count.
pub fn sampling_grid(standardize: bool) -> Vec<(u32, SamplingConfig)> {
    let mut grid = Vec::new();
    for n in [50, 200, 500] {
        grid.push(SamplingConfig::average(n));
    }
    for n in [50, 200, 500] {
        for w in [2.0, 5.0, 10.0] {
            grid.push(SamplingConfig::fixed_window(n, w));
        }
    }
    grid.into_iter()
        .enumerate()
        .map(|(i, mut s)| {
            s.standardize = standardize;
            (i as u32 + 1, s)
        })
        .collect()
}

/// Trials 13–27: augmentation, random oversampling, random undersampling,
/// SMOTE and cluster centroids, three levels each.
pub fn imbalance_grid(template: &BalanceConfig) -> Vec<(u32, BalanceConfig)> {
    let methods = [
        BalanceMethod::Augmentation,
        BalanceMethod::RandomOversample,
        BalanceMethod::RandomUndersample,
        BalanceMethod::Smote,
        BalanceMethod::ClusterCentroid,
    ];
    let mut grid = Vec::new();
    let mut id = 13;
    for method in methods {
        for level in 0..3 {
            let mut cfg = BalanceConfig {
                method,
                ..template.clone()
            };
            if method.is_oversampling() {
                cfg.minority_factor = [1.5, 2.0, 2.5][level];
            } else {
                cfg.majority_reduction = [0.25, 0.5, 0.75][level];
            }
            grid.push((id, cfg));
            id += 1;
        }
    }
    grid
}

/// Which set of trials to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grid {
    Sampling,
    Imbalance,
}

fn first_subset(config: &RunConfig, corpus: &[FlightLog]) -> Result<FeatureSubset, PipelineError> {
    let subsets = resolve_subsets(&config.features, corpus)?;
    if subsets.len() > 1 {
        log::info!("{} subsets declared; using {}", subsets.len(), subsets[0].name);
    }
    Ok(subsets.into_iter().next().expect("at least one subset"))
}

/// Builds the dataset for the configured subset and sampling.
pub fn prepare_dataset(
    config: &RunConfig,
    corpus: &[FlightLog],
    sampling: &SamplingConfig,
) -> Result<(Dataset, usize), PipelineError> {
    let subset = first_subset(config, corpus)?;
    let (dataset, excluded) = build_dataset(corpus, &subset, sampling)?;
    Ok((dataset, excluded.len()))
}

/// The configured sampling and balancing as a single trial.
pub fn run_single(config: &RunConfig, corpus: &[FlightLog]) -> Result<TrialReport, PipelineError> {
    let (dataset, excluded) = prepare_dataset(config, corpus, &config.sampling)?;
    let (method, parameters) = if config.balance.method == BalanceMethod::None {
        (sampling_label(&config.sampling).to_string(), config.sampling.parameter_label())
    } else {
        (config.balance.method.label().to_string(), config.balance.parameter_label())
    };
    let spec = TrialSpec {
        trial_id: config.eval.trial_id,
        method,
        parameters,
        balance: config.balance.clone(),
    };
    run_trial(&dataset, excluded, &spec, &config.train, config.eval.k, config.eval.seed)
}

/// Runs every trial of a grid, sequentially, in trial order.
pub fn run_grid(config: &RunConfig, corpus: &[FlightLog], grid: Grid) -> Result<Vec<TrialReport>, PipelineError> {
    let mut reports = Vec::new();
    match grid {
        Grid::Sampling => {
            for (id, sampling) in sampling_grid(config.sampling.standardize) {
                let (dataset, excluded) = prepare_dataset(config, corpus, &sampling)?;
                let spec = TrialSpec {
                    trial_id: id,
                    method: sampling_label(&sampling).to_string(),
                    parameters: sampling.parameter_label(),
                    balance: BalanceConfig::default(),
                };
                reports.push(run_trial(&dataset, excluded, &spec, &config.train, config.eval.k, config.eval.seed)?);
            }
        }
        Grid::Imbalance => {
            let (dataset, excluded) = prepare_dataset(config, corpus, &config.sampling)?;
            for (id, balance) in imbalance_grid(&config.balance) {
                let spec = TrialSpec {
                    trial_id: id,
                    method: balance.method.label().to_string(),
                    parameters: balance.parameter_label(),
                    balance,
                };
                reports.push(run_trial(&dataset, excluded, &spec, &config.train, config.eval.k, config.eval.seed)?);
            }
        }
    }
    Ok(reports)
}

/// Writes the resolved config, one JSON file per trial and the rendered
/// report files into `dir`.
pub fn write_outputs(config: &RunConfig, reports: &[TrialReport], dir: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join("run_config.toml"), config.to_toml()?.as_bytes())?;
    for r in reports {
        save_trial(r, &dir.join(format!("trial_{}.json", r.trial_id)))?;
    }
    write_report_files(reports, config.eval.reference_trial, dir)?;
    Ok(())
}
