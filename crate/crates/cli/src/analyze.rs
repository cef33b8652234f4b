use gnas_core::greedy_filter::confidence;
use gnas_core::metrics::{correlation_experiment, rows_to_csv, CorrelationRow, TIE_CONVENTION};
use gnas_core::rng::substream;
use gnas_core::trainer::{log_from_jsonl, should_stop, Phase};

use crate::config::{
    self, AnalyzeMode, AnalyzeRun, Backend, BackendConfig, OracleBundle, OracleGenRun, OracleSource,
};
use crate::io::{output_dir, unix_seconds, Metadata, OutDir};
use crate::{CliError, Common};

pub const CORRELATION_FILE: &str = "correlation.csv";
pub const CONFIDENCE_FILE: &str = "confidence.csv";
pub const POOL_TRACE_FILE: &str = "pool_trace.csv";

/// `m,k,ratio,q,confidence` for every grid point.
pub fn confidence_grid(
    m_values: &[u64],
    ratios: &[f64],
    q_values: &[f64],
) -> Result<String, CliError> {
    let mut csv = String::from("m,k,ratio,q,confidence\n");
    for &m in m_values {
        for &r in ratios {
            if !(0.0..=1.0).contains(&r) {
                return Err(CliError::Config(format!("ratio {r} outside [0, 1]")));
            }
            let k = (r * m as f64).round() as u64;
            for &q in q_values {
                if !(0.0..=1.0).contains(&q) {
                    return Err(CliError::Config(format!("q {q} outside [0, 1]")));
                }
                csv.push_str(&format!("{m},{k},{r},{q},{}\n", confidence(m, k, q)));
            }
        }
    }
    Ok(csv)
}

fn correlation(
    common: &Common,
    backend: &BackendConfig,
    checkpoint: Option<&std::path::Path>,
    config: &gnas_core::metrics::CorrelationConfig,
) -> Result<Vec<CorrelationRow>, CliError> {
    let backend = config::build_backend(&common.base_dir(), backend, config.seed, checkpoint)?;
    let mut rng = substream(config.seed, "correlation");
    let rows = match &backend {
        Backend::Supernet(b) => correlation_experiment(b, config, &mut rng),
        Backend::Oracle(b) => correlation_experiment(b, config, &mut rng),
    };
    rows.map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn run_analyze(common: &Common) -> Result<(), CliError> {
    let started = unix_seconds();
    let path = common.config_path()?;
    let run: AnalyzeRun = config::load(path, &common.overrides)?;
    let out = OutDir::create(output_dir(
        common.out.as_deref(),
        run.output_dir
            .as_deref()
            .map(|d| config::resolve(&common.base_dir(), d)),
    )?)?;
    let mut meta = Metadata::new("analyze", Some(path), started);
    match &run.mode {
        AnalyzeMode::Correlation {
            backend,
            checkpoint,
            correlation: c,
        } => {
            let rows = correlation(common, backend, checkpoint.as_deref(), c)?;
            out.write_text(CORRELATION_FILE, &rows_to_csv(&rows))?;
            meta.notes.push(TIE_CONVENTION.to_string());
            meta.notes.push(format!(
                "subset ranking statistic: {:?}; reference: accuracy on {} examples",
                c.rank_by, c.full_eval_size
            ));
            for r in &rows {
                println!(
                    "subset {:>6}  spearman {:+.4}  kendall {:+.4}",
                    r.subset_size, r.spearman_rho, r.kendall_tau
                );
            }
        }
        AnalyzeMode::ConfidenceCurves {
            m_values,
            ratios,
            q_values,
        } => {
            let csv = confidence_grid(m_values, ratios, q_values)?;
            println!("{} grid points", csv.lines().count() - 1);
            out.write_text(CONFIDENCE_FILE, &csv)?;
        }
        AnalyzeMode::PoolTrace { log, alpha } => {
            let full = config::resolve(&common.base_dir(), log);
            let text = std::fs::read_to_string(&full)
                .map_err(|e| CliError::Config(format!("reading {}: {e}", full.display())))?;
            let records = log_from_jsonl(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", full.display())))?;
            let mut csv = String::from("round,iter,turnover,pool_size,below_alpha\n");
            let mut last = None;
            for r in records.iter().filter(|r| r.phase == Phase::Greedy) {
                if let Some(pi) = r.turnover {
                    csv.push_str(&format!(
                        "{},{},{},{},{}\n",
                        r.round,
                        r.iter,
                        pi,
                        r.pool_size,
                        should_stop(pi, *alpha)
                    ));
                    last = Some(pi);
                }
            }
            out.write_text(POOL_TRACE_FILE, &csv)?;
            match last {
                Some(pi) => println!(
                    "final turnover {pi:.4} ({} alpha {alpha})",
                    if should_stop(pi, *alpha) { "<=" } else { ">" }
                ),
                None => println!("no turnover measurements in log"),
            }
        }
    }
    out.write_json("analyze_metadata.json", &meta)
}

pub fn run_oracle_gen(common: &Common) -> Result<(), CliError> {
    let path = common.config_path()?;
    let run: OracleGenRun = config::load(path, &common.overrides)?;
    let out = OutDir::create(output_dir(
        common.out.as_deref(),
        run.output_dir
            .as_deref()
            .map(|d| config::resolve(&common.base_dir(), d)),
    )?)?;
    let bundle: OracleBundle =
        config::load_oracle(&common.base_dir(), &OracleSource::Spec(run.oracle.clone()))?;
    out.write_text(
        crate::train::SPACE_FILE,
        &(bundle.space.to_json_pretty() + "\n"),
    )?;
    out.write_json(crate::train::ORACLE_FILE, &bundle)?;
    let size = bundle.space.space_size();
    println!(
        "space of {size} paths, loss threshold {:.6}",
        bundle.oracle.threshold
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confidence_grid_rows() {
        let csv = confidence_grid(&[10], &[0.0, 0.5], &[0.6]).unwrap();
        let rows: Vec<&str> = csv.lines().collect();
        assert_eq!(rows[1], "10,0,0,0.6,1");
        let k5: Vec<&str> = rows[2].split(',').collect();
        assert_eq!(&k5[..4], &["10", "5", "0.5", "0.6"]);
        assert!((k5[4].parse::<f64>().unwrap() - 0.8338).abs() < 5e-5);
        assert!(confidence_grid(&[10], &[1.5], &[0.6]).is_err());
    }
}
