use gnas_core::evolution::{
    evolve, EvaluatedPath, EvaluationSet, EvolutionConfig, EvolutionError, GenerationSummary,
    SearchOutcome,
};
use gnas_core::{CandidatePool, Evaluator};
use serde::Serialize;

use crate::config::{self, Backend, BackendConfig, SearchRun};
use crate::io::{output_dir, unix_seconds, Metadata, OutDir};
use crate::{CliError, Common};

pub const REPORT_FILE: &str = "search_report.json";
pub const PARETO_FILE: &str = "pareto.csv";

#[derive(Serialize)]
struct SearchReport<'a> {
    config: &'a EvolutionConfig,
    initialization: &'static str,
    space_fingerprint: String,
    best: &'a EvaluatedPath,
    evaluations: usize,
    generations: &'a [GenerationSummary],
    evaluation_set: &'a EvaluationSet,
}

fn pareto_csv(outcome: &SearchOutcome) -> String {
    let mut csv = String::from("generation,path,loss,flops\n");
    for g in &outcome.generations {
        for (path, obj) in &g.pareto_front {
            csv.push_str(&format!(
                "{},\"{}\",{},{}\n",
                g.generation, path, obj[0], obj[1]
            ));
        }
    }
    csv
}

fn run_evolve<E: Evaluator>(
    evaluator: &E,
    pool: Option<&CandidatePool>,
    config: &EvolutionConfig,
) -> Result<SearchOutcome, CliError> {
    evolve(evaluator, pool, config).map_err(|e| match e {
        EvolutionError::Config(msg) => CliError::Config(msg),
        EvolutionError::Infeasible { attempts } => CliError::Runtime(format!(
            "constraint {:?} is infeasible: no satisfying path found in {attempts} attempts",
            config.constraint
        )),
        other => CliError::Runtime(other.to_string()),
    })
}

pub fn run_search(common: &Common) -> Result<(), CliError> {
    let started = unix_seconds();
    let path = common.config_path()?;
    let run: SearchRun = config::load(path, &common.overrides)?;
    run.evolution
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let base = common.base_dir();
    if matches!(run.backend, BackendConfig::Supernet { .. }) && run.checkpoint.is_none() {
        return Err(CliError::Config(
            "searching a supernet needs a trained checkpoint".into(),
        ));
    }
    let out = OutDir::create(output_dir(
        common.out.as_deref(),
        run.output_dir
            .as_deref()
            .map(|d| config::resolve(&common.base_dir(), d)),
    )?)?;
    let backend = config::build_backend(
        &base,
        &run.backend,
        run.evolution.seed,
        run.checkpoint.as_deref(),
    )?;
    let pool = match &run.pool {
        Some(p) => {
            let full = config::resolve(&base, p);
            let text = std::fs::read_to_string(&full)
                .map_err(|e| CliError::Config(format!("reading pool {}: {e}", full.display())))?;
            let entries: Vec<gnas_core::PoolEntry> = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("pool {}: {e}", full.display())))?;
            for e in &entries {
                backend
                    .space()
                    .validate_path(&e.path)
                    .map_err(|err| CliError::Config(format!("pool path {}: {err}", e.path)))?;
            }
            let capacity = entries.len().max(1);
            Some(
                CandidatePool::from_entries(entries, capacity)
                    .map_err(|e| CliError::Config(format!("pool {}: {e}", full.display())))?,
            )
        }
        None => None,
    };
    let outcome = match &backend {
        Backend::Supernet(b) => run_evolve(b, pool.as_ref(), &run.evolution)?,
        Backend::Oracle(b) => run_evolve(b, pool.as_ref(), &run.evolution)?,
    };
    let report = SearchReport {
        config: &run.evolution,
        initialization: if pool.is_some() { "pool" } else { "uniform" },
        space_fingerprint: format!("{:016x}", backend.space().fingerprint()),
        best: &outcome.best,
        evaluations: outcome.evaluations,
        generations: &outcome.generations,
        evaluation_set: &outcome.evaluation_set,
    };
    out.write_json(REPORT_FILE, &report)?;
    out.write_text(PARETO_FILE, &pareto_csv(&outcome))?;
    out.write_json(
        "search_metadata.json",
        &Metadata::new("search", Some(path), started),
    )?;
    println!(
        "best {} accuracy {:.4} loss {:.4} flops {} latency {:.3}ms ({} paths evaluated)",
        outcome.best.path,
        outcome.best.accuracy,
        outcome.best.loss,
        outcome.best.cost.flops,
        outcome.best.cost.latency_ms,
        outcome.evaluations
    );
    Ok(())
}
