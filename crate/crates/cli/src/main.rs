use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rawm_core::harness::{
    collect_reports, emit_table, load_checkpoint, run_dir, run_experiment, run_partial, save_checkpoint,
    write_atomic, ExperimentConfig, RunSpec, Scenario, TableValue, OUTPUT_ROOT_ENV,
};
use rawm_core::selfcheck::run_checks;
use rawm_core::taskgen::{generate_stream, save_csv, GeneratorConfig};
use rawm_core::Error;

#[derive(Parser)]
#[command(name = "rawm", version, about = "Continual-learning experiments with adaptive weight modification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic stream as one CSV per dataset.
    Gen {
        /// Experiment config whose [generator] section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Use the four-class preset with one stable class.
        #[arg(long)]
        ser: bool,
    },
    /// Run an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Override the config's scenario.
        #[arg(long)]
        scenario: Option<String>,
        /// Continue a single run from this checkpoint (requires --seed).
        #[arg(long, requires = "seed")]
        resume: Option<PathBuf>,
    },
    /// Aggregate the reports below a directory.
    Table {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Show forgetting instead of final-stage values.
        #[arg(long)]
        forgetting: bool,
    },
    /// Run the built-in invariant and oracle checks.
    Check,
}

fn output_root(flag: Option<PathBuf>, config: Option<&ExperimentConfig>) -> PathBuf {
    flag.or_else(|| config.and_then(|c| c.output_dir.clone()))
        .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(args: std::fmt::Arguments<'_>) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_fmt(args);
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            let payload = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{payload}");
            if e.is_config_error() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn execute(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::Gen { config, seed, out, ser } => {
            let cfg = config.as_deref().map(ExperimentConfig::load).transpose()?;
            let mut g = match (&cfg, ser) {
                (_, true) => GeneratorConfig::ser_preset(),
                (Some(c), false) => c.generator_config(),
                (None, false) => GeneratorConfig::default(),
            };
            if let Some(s) = seed {
                g.seed = s;
            }
            let dir = output_root(out, cfg.as_ref());
            for d in generate_stream(&g)? {
                let path = dir.join(format!("{}.csv", d.name()));
                save_csv(&d, &path)?;
                emit(format_args!("{}\n", path.display()));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Run {
            config,
            seed,
            out,
            jobs,
            scenario,
            resume,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = scenario {
                cfg.scenario = s.parse::<Scenario>()?;
            }
            if let Some(s) = seed {
                cfg.seed = s;
                cfg.n_seeds = 1;
            }
            cfg.validate()?;
            let root = output_root(out, Some(&cfg));
            if let Some(path) = resume {
                return resume_run(&cfg, &root, &path);
            }
            let summary = run_experiment(&cfg, &root, jobs)?;
            emit(format_args!("{}", summary.table));
            emit(format_args!("{} runs written to {}\n", summary.reports.len(), root.display()));
            if summary.failed > 0 {
                eprintln!("{} runs failed; see the reports flagged failed", summary.failed);
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Table { out, forgetting } => {
            let root = output_root(out, None);
            let reports = collect_reports(&root)?;
            let value = if forgetting { TableValue::Forgetting } else { TableValue::Final };
            let (text, csv) = emit_table(&reports, value)?;
            let name = if forgetting { "forgetting" } else { "table" };
            write_atomic(&root.join(format!("{name}.csv")), csv.as_bytes())?;
            emit(format_args!("{text}"));
            Ok(ExitCode::SUCCESS)
        }
        Command::Check => {
            let results = run_checks();
            for r in &results {
                emit(format_args!("{} {}: {}\n", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail));
            }
            let ok = results.iter().all(|r| r.passed);
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
    }
}

fn resume_run(cfg: &ExperimentConfig, root: &Path, path: &Path) -> Result<ExitCode, Error> {
    let ckpt = load_checkpoint(path)?;
    let (label, strategy) = cfg
        .sweep_points()?
        .into_iter()
        .find(|(l, _)| *l == ckpt.label)
        .ok_or_else(|| Error::Config(format!("checkpoint label '{}' is not part of this config", ckpt.label)))?;
    let run = RunSpec {
        label,
        strategy,
        seed: cfg.seed,
    };
    let outcome = run_partial(cfg, &run, Some(ckpt), None)?;
    let dir = run_dir(root, &run);
    write_atomic(&dir.join("report.json"), outcome.report.to_json()?.as_bytes())?;
    write_atomic(&dir.join("report.csv"), outcome.report.to_csv().as_bytes())?;
    save_checkpoint(&outcome.checkpoint, &dir.join("checkpoint.ckpt"))?;
    emit(format_args!("{}\n", dir.display()));
    Ok(if outcome.report.failed { ExitCode::from(2) } else { ExitCode::SUCCESS })
}
