//! Executes scenarios for single runs and whole experiments.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::{evaluate, forgetting_report, EvalReport, MetricKind, ReportMeta, StageRecord};
use crate::netcore::init_network;
use crate::strategies::{train_dataset, StrategyConfig, TrainState};
use crate::taskgen::{generate_stream, load_csv, subsample, Dataset, Split};

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::config::{ExperimentConfig, RunSpec, Scenario};
use super::table::{emit_table, TableValue};
use super::write_atomic;

const INIT_SALT: u64 = 0x5E_ED0F_1A7E_u64;

/// Datasets of the stream for one seed.
pub fn build_stream(config: &ExperimentConfig, seed: u64) -> Result<Vec<Dataset>> {
    if config.csv.is_empty() {
        let mut g = config.generator_config();
        g.seed = g.seed.wrapping_add(seed);
        return generate_stream(&g);
    }
    let mut sets = config
        .csv
        .iter()
        .map(|p| load_csv(p))
        .collect::<Result<Vec<_>>>()?;
    let dim = sets[0].dim();
    if let Some(bad) = sets.iter().find(|d| d.dim() != dim) {
        return Err(Error::Config(format!(
            "dataset '{}' has {} features, expected {dim}",
            bad.name(),
            bad.dim()
        )));
    }
    let classes = sets.iter().map(Dataset::classes).max().unwrap_or(0);
    sets = sets
        .into_iter()
        .map(|d| d.with_classes(classes))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::Config(e.to_string()))?;
    Ok(sets)
}

pub fn metric_for(config: &ExperimentConfig, classes: usize) -> MetricKind {
    config.metric.unwrap_or(if classes == 2 {
        MetricKind::Eer
    } else {
        MetricKind::Accuracy
    })
}

/// The union of every training split, shuffled.
pub fn concat_training(datasets: &[Dataset], seed: u64) -> Result<Dataset> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for d in datasets {
        for i in d.indices(Split::Train) {
            rows.push(d.features().row(i).to_vec());
            labels.push(d.labels()[i]);
        }
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let rows: Vec<Vec<f64>> = order.iter().map(|&i| rows[i].clone()).collect();
    let labels: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
    let classes = datasets.iter().map(Dataset::classes).max().unwrap_or(0);
    let n = rows.len();
    Dataset::new("all", crate::matcore::Matrix::from_rows(&rows)?, labels, vec![Split::Train; n], classes)
}

/// Result of one run: the report and the state after the last completed stage.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: EvalReport,
    pub checkpoint: Checkpoint,
}

struct Runner<'a> {
    config: &'a ExperimentConfig,
    strategy: StrategyConfig,
    datasets: Vec<Dataset>,
    names: Vec<String>,
    metric: MetricKind,
    meta: ReportMeta,
    seed: u64,
}

impl Runner<'_> {
    fn evaluate_all(&self, state: &TrainState) -> Result<Vec<Option<f64>>> {
        self.datasets
            .iter()
            .map(|d| evaluate(&state.net, d, self.metric).map(Some))
            .collect()
    }

    fn stage(&self, name: String, trained: Vec<usize>, state: &TrainState) -> Result<StageRecord> {
        Ok(StageRecord {
            name,
            trained,
            values: self.evaluate_all(state)?,
        })
    }

    fn training_set(&self, k: usize) -> Result<Dataset> {
        match self.config.scenario {
            Scenario::FewSample(n) if k > 0 => {
                let d = subsample(&self.datasets[k], n, self.seed.wrapping_add(k as u64))?;
                let name = format!("{}[{n}]", d.name());
                Ok(d.with_name(name))
            }
            _ => Ok(self.datasets[k].clone()),
        }
    }

    /// Trains the scenario, extending `history`. Stops after `stop_after`
    /// datasets in the sequential scenarios.
    fn drive(&self, state: &mut TrainState, history: &mut Vec<StageRecord>, stop_after: Option<usize>) -> Result<()> {
        let n = self.datasets.len();
        match self.config.scenario {
            Scenario::Sequence | Scenario::FewSample(_) => {
                let end = stop_after.map_or(n, |s| s.min(n));
                for k in state.dataset_index..end {
                    let train = self.training_set(k)?;
                    train_dataset(state, &train, &self.strategy)?;
                    history.push(self.stage(train.name().to_string(), vec![k], state)?);
                }
            }
            Scenario::Pairwise => {
                if state.dataset_index == 0 {
                    train_dataset(state, &self.datasets[0], &self.strategy)?;
                    history.push(self.stage(self.names[0].clone(), vec![0], state)?);
                }
                if stop_after.is_some_and(|s| s <= 1) {
                    return Ok(());
                }
                let base = state.clone();
                for k in history.len()..n {
                    *state = base.clone();
                    train_dataset(state, &self.datasets[k], &self.strategy)?;
                    let name = format!("{}->{}", self.names[0], self.names[k]);
                    history.push(self.stage(name, vec![k], state)?);
                }
            }
            Scenario::TrainOnAll => {
                if history.is_empty() {
                    let all = concat_training(&self.datasets, self.seed)?;
                    train_dataset(state, &all, &self.strategy)?;
                    history.push(self.stage("all".into(), (0..n).collect(), state)?);
                }
            }
        }
        Ok(())
    }
}

/// Runs one (strategy, seed) unit. Configuration problems are returned as
/// errors; failures during training yield a report flagged `failed` that
/// keeps the completed stages.
pub fn run_single(config: &ExperimentConfig, run: &RunSpec) -> Result<RunOutcome> {
    run_partial(config, run, None, None)
}

/// Like [`run_single`], optionally starting from a checkpoint and stopping
/// after a number of trained datasets.
pub fn run_partial(
    config: &ExperimentConfig,
    run: &RunSpec,
    resume: Option<Checkpoint>,
    stop_after: Option<usize>,
) -> Result<RunOutcome> {
    let datasets = build_stream(config, run.seed)?;
    let dim = datasets[0].dim();
    let classes = datasets[0].classes();
    let specs = config.network.specs(dim, classes)?;
    let mut strategy = run.strategy.clone();
    strategy.seed = run.seed;

    let (mut state, mut history) = match resume {
        Some(c) => {
            if c.seed != run.seed || c.specs != specs {
                return Err(Error::Config(format!(
                    "checkpoint (seed {}, {} layers) does not match this run (seed {}, {} layers)",
                    c.seed,
                    c.specs.len(),
                    run.seed,
                    specs.len()
                )));
            }
            let sequential = matches!(config.scenario, Scenario::Sequence | Scenario::FewSample(_));
            if sequential && c.history.len() != c.state.dataset_index {
                return Err(Error::Config("checkpoint history does not match its dataset index".into()));
            }
            (c.state, c.history)
        }
        None => {
            let net = init_network(&specs, run.seed ^ INIT_SALT)?;
            (TrainState::new(net, &strategy)?, Vec::new())
        }
    };

    let runner = Runner {
        config,
        names: datasets.iter().map(|d| d.name().to_string()).collect(),
        datasets,
        metric: metric_for(config, classes),
        meta: ReportMeta {
            label: run.label.clone(),
            scenario: config.scenario.to_string(),
            config_hash: config.config_hash(&run.strategy)?,
            seed: run.seed,
        },
        strategy,
        seed: run.seed,
    };

    let mut work = state.clone();
    let result = runner.drive(&mut work, &mut history, stop_after);
    let report = match result {
        Ok(()) => {
            state = work;
            forgetting_report(&history, &runner.names, runner.metric, &runner.meta)?
        }
        Err(e) => EvalReport::failed(&history, &runner.names, runner.metric, &runner.meta, &e),
    };
    let checkpoint = Checkpoint {
        label: run.label.clone(),
        seed: run.seed,
        specs,
        state,
        history,
    };
    Ok(RunOutcome { report, checkpoint })
}

/// Directory name for a row label.
pub fn slug(label: &str) -> String {
    let s: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect();
    if s.is_empty() {
        "run".into()
    } else {
        s
    }
}

pub fn run_dir(out: &Path, run: &RunSpec) -> PathBuf {
    out.join(slug(&run.label)).join(format!("seed-{}", run.seed))
}

#[derive(Debug)]
pub struct ExperimentSummary {
    pub reports: Vec<(PathBuf, EvalReport)>,
    pub failed: usize,
    pub table: String,
}

/// Runs every (sweep point, seed) pair on `jobs` threads and writes
/// `report.json`, `report.csv` and `checkpoint.ckpt` per run, plus the
/// resolved config and aggregate tables at the root.
pub fn run_experiment(config: &ExperimentConfig, out: &Path, jobs: usize) -> Result<ExperimentSummary> {
    config.validate()?;
    let runs = config.runs()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_atomic(&out.join("config.toml"), config.to_toml()?.as_bytes())?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<(PathBuf, EvalReport)>> = pool.install(|| {
        runs.par_iter()
            .map(|run| {
                let outcome = run_single(config, run)?;
                let dir = run_dir(out, run);
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let path = dir.join("report.json");
                write_atomic(&path, outcome.report.to_json()?.as_bytes())?;
                write_atomic(&dir.join("report.csv"), outcome.report.to_csv().as_bytes())?;
                save_checkpoint(&outcome.checkpoint, &dir.join("checkpoint.ckpt"))?;
                Ok((path, outcome.report))
            })
            .collect()
    });
    let reports = results.into_iter().collect::<Result<Vec<_>>>()?;
    let failed = reports.iter().filter(|(_, r)| r.failed).count();
    let all: Vec<EvalReport> = reports.iter().map(|(_, r)| r.clone()).collect();
    let (table, csv) = emit_table(&all, TableValue::Final)?;
    write_atomic(&out.join("table.txt"), table.as_bytes())?;
    write_atomic(&out.join("table.csv"), csv.as_bytes())?;
    Ok(ExperimentSummary { reports, failed, table })
}
