use gnas_core::evaluator::encode_checkpoint;
use gnas_core::trainer::{
    dry_run, train_supernet_with, CostLedger, DryRunSpec, StopReason, TrainError, TrainOutcome,
};
use gnas_core::{Evaluator, SupernetBackend, Trainable};
use serde::Serialize;

use crate::config::{self, Backend, DryRun, OracleBundle, TrainRun};
use crate::io::{output_dir, unix_seconds, Metadata, OutDir};
use crate::{CliError, Common};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const ORACLE_FILE: &str = "oracle.json";
pub const POOL_FILE: &str = "pool.json";
pub const LEDGER_FILE: &str = "ledger.json";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const SPACE_FILE: &str = "space.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const METADATA_FILE: &str = "metadata.json";

#[derive(Serialize)]
struct LedgerFile<'a> {
    #[serde(flatten)]
    ledger: &'a CostLedger,
    corrected_cost: f64,
}

#[derive(Serialize)]
struct Summary {
    completed: bool,
    iterations: u64,
    rounds: u64,
    stop: Option<StopReason>,
    final_turnover: Option<f64>,
    pool_size: usize,
    corrected_cost: f64,
}

fn millions(x: f64) -> String {
    format!("{:.2}M", x / 1e6)
}

pub fn run_dry(common: &Common) -> Result<(), CliError> {
    let (greedy, out) = match &common.config {
        Some(path) => {
            let run: DryRun = config::load(path, &common.overrides)?;
            let out = common.out.clone().or(run
                .output_dir
                .map(|d| config::resolve(&common.base_dir(), &d)));
            (run.dry_run, out)
        }
        None => (DryRunSpec::imagenet_greedy(), common.out.clone()),
    };
    let uniform = DryRunSpec {
        m: 0,
        epochs: DryRunSpec::imagenet_uniform().epochs,
        ..greedy
    };
    let g = dry_run(&greedy);
    let u = dry_run(&uniform);
    println!(
        "greedy: optimization {} evaluation {} corrected {}",
        millions(g.optimization_images as f64),
        millions(g.evaluation_images as f64),
        millions(g.corrected_cost())
    );
    println!(
        "uniform baseline ({} epochs): corrected {}",
        uniform.epochs,
        millions(u.corrected_cost())
    );
    if let Some(dir) = out {
        let out = OutDir::create(dir)?;
        out.write_json(
            LEDGER_FILE,
            &LedgerFile {
                ledger: &g,
                corrected_cost: g.corrected_cost(),
            },
        )?;
    }
    Ok(())
}

fn write_artifacts(out: &OutDir, outcome: &TrainOutcome, completed: bool) -> Result<(), CliError> {
    out.write_text(POOL_FILE, &(outcome.pool.to_json() + "\n"))?;
    out.write_json(
        LEDGER_FILE,
        &LedgerFile {
            ledger: &outcome.ledger,
            corrected_cost: outcome.ledger.corrected_cost(),
        },
    )?;
    out.write_text(LOG_FILE, &outcome.log_jsonl())?;
    let summary = Summary {
        completed,
        iterations: outcome.iters,
        rounds: outcome.rounds,
        stop: outcome.stop,
        final_turnover: outcome.last_turnover(),
        pool_size: outcome.pool.len(),
        corrected_cost: outcome.ledger.corrected_cost(),
    };
    out.write_json(SUMMARY_FILE, &summary)
}

fn write_checkpoint(out: &OutDir, backend: &SupernetBackend) -> Result<(), String> {
    let bytes = encode_checkpoint(&backend.weights, backend.space().fingerprint());
    out.write_bytes(CHECKPOINT_FILE, &bytes)
        .map_err(|e| e.to_string())
}

fn train_with<B: Trainable>(
    backend: &mut B,
    run: &TrainRun,
    out: &OutDir,
    checkpoint: impl FnMut(&B, u64) -> Result<(), String>,
    final_checkpoint: impl Fn(&B) -> Result<(), String>,
) -> Result<TrainOutcome, CliError> {
    match train_supernet_with(backend, &run.train, checkpoint) {
        Ok(outcome) => {
            write_artifacts(out, &outcome, true)?;
            Ok(outcome)
        }
        Err(TrainError::Aborted {
            iter,
            source,
            partial,
        }) => {
            write_artifacts(out, &partial, false)?;
            final_checkpoint(backend).map_err(CliError::Runtime)?;
            Err(CliError::Runtime(format!(
                "training aborted at iteration {iter}: {source}; partial artifacts kept in {}",
                out.path("").display()
            )))
        }
        Err(TrainError::Config(msg)) => Err(CliError::Config(msg)),
        Err(TrainError::Filter(gnas_core::greedy_filter::FilterError::Config(msg))) => {
            Err(CliError::Config(msg))
        }
        Err(e) => Err(CliError::Runtime(e.to_string())),
    }
}

pub fn run_train(common: &Common) -> Result<(), CliError> {
    let started = unix_seconds();
    let path = common.config_path()?;
    let run: TrainRun = config::load(path, &common.overrides)?;
    run.train
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let out = OutDir::create(output_dir(
        common.out.as_deref(),
        run.output_dir
            .as_deref()
            .map(|d| config::resolve(&common.base_dir(), d)),
    )?)?;
    let backend = config::build_backend(&common.base_dir(), &run.backend, run.train.seed, None)?;
    out.write_text(SPACE_FILE, &(backend.space().to_json_pretty() + "\n"))?;

    let outcome = match backend {
        Backend::Supernet(mut b) => train_with(
            &mut b,
            &run,
            &out,
            |b, _| write_checkpoint(&out, b),
            |b| write_checkpoint(&out, b),
        )?,
        Backend::Oracle(mut b) => {
            out.write_json(
                ORACLE_FILE,
                &OracleBundle {
                    space: b.space().clone(),
                    oracle: b.oracle.clone(),
                },
            )?;
            train_with(&mut b, &run, &out, |_, _| Ok(()), |_| Ok(()))?
        }
    };
    out.write_json(METADATA_FILE, &Metadata::new("train", Some(path), started))?;
    let turnover = outcome
        .last_turnover()
        .map_or("n/a".to_string(), |p| format!("{p:.4}"));
    let stop = match outcome.stop {
        Some(StopReason::Converged { .. }) => "turnover threshold",
        Some(StopReason::MaxIters) => "iteration cap",
        None => "no iterations",
    };
    println!(
        "rounds {} iterations {} stop {stop} final turnover {turnover} corrected cost {}",
        outcome.rounds,
        outcome.iters,
        millions(outcome.ledger.corrected_cost())
    );
    Ok(())
}
