//! Run configuration files and the backends they describe.

use std::path::{Path as FsPath, PathBuf};
use std::sync::Arc;

use gnas_core::evaluator::{
    decode_checkpoint, make_oracle_space, Dataset, OracleSpec, SyntheticSpec, TabularOracle,
};
use gnas_core::evolution::EvolutionConfig;
use gnas_core::metrics::CorrelationConfig;
use gnas_core::rng::substream;
use gnas_core::trainer::{DryRunSpec, TrainConfig};
use gnas_core::{OracleBackend, SearchSpace, SupernetBackend};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniformSpace {
    pub num_layers: usize,
    pub dim: usize,
    pub widths: Vec<f64>,
    #[serde(default)]
    pub identity: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SpaceSource {
    File(PathBuf),
    Uniform(UniformSpace),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Csv(CsvSource),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleSource {
    Spec(OracleSpec),
    /// A bundle written by `oracle-gen`.
    File(PathBuf),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Supernet {
        space: SpaceSource,
        dataset: DatasetSource,
        /// Weight-init seed; defaults to the run seed.
        #[serde(default)]
        init_seed: Option<u64>,
    },
    Oracle {
        oracle: OracleSource,
        #[serde(default)]
        subset_noise: f64,
        #[serde(default)]
        val_len: Option<usize>,
        #[serde(default)]
        train_len: Option<usize>,
    },
}

/// Space plus oracle, as written by `oracle-gen`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleBundle {
    pub space: SearchSpace,
    pub oracle: TabularOracle,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    pub version: u32,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub backend: BackendConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DryRun {
    pub version: u32,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub dry_run: DryRunSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchRun {
    pub version: u32,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub backend: BackendConfig,
    /// Trained supernet weights; required for the supernet backend.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Candidate pool to seed the population; omitted means uniform init.
    #[serde(default)]
    pub pool: Option<PathBuf>,
    pub evolution: EvolutionConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum AnalyzeMode {
    Correlation {
        backend: BackendConfig,
        #[serde(default)]
        checkpoint: Option<PathBuf>,
        correlation: CorrelationConfig,
    },
    ConfidenceCurves {
        m_values: Vec<u64>,
        /// Kept fraction `k / m`; `k` is rounded to the nearest integer.
        ratios: Vec<f64>,
        q_values: Vec<f64>,
    },
    PoolTrace {
        log: PathBuf,
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
}

fn default_alpha() -> f64 {
    0.08
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalyzeRun {
    pub version: u32,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(flatten)]
    pub mode: AnalyzeMode,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleGenRun {
    pub version: u32,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub oracle: OracleSpec,
}

pub trait Versioned {
    fn version(&self) -> u32;
}

macro_rules! versioned {
    ($($t:ty),*) => {$(
        impl Versioned for $t {
            fn version(&self) -> u32 {
                self.version
            }
        }
    )*};
}

versioned!(TrainRun, DryRun, SearchRun, AnalyzeRun, OracleGenRun);

/// Sets `key` (dot-separated) in `root` to `value`, parsed as JSON when
/// possible and kept as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not key=value")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!("bad override key {key:?}")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        let map = node.as_object_mut().ok_or_else(|| {
            CliError::Config(format!("override {key:?}: {part:?} is inside a non-object"))
        })?;
        if parts.peek().is_none() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(part)
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("key has at least one part")
}

/// Reads, overrides and parses a config file, checking its version.
pub fn load<T: DeserializeOwned + Versioned>(
    path: &FsPath,
    overrides: &[String],
) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("reading {}: {e}", path.display())))?;
    parse(&text, overrides).map_err(|e| match e {
        CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse<T: DeserializeOwned + Versioned>(
    text: &str,
    overrides: &[String],
) -> Result<T, CliError> {
    let mut value: Value =
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid JSON: {e}")))?;
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let config: T = serde_json::from_value(value)
        .map_err(|e| CliError::Config(format!("schema error: {e}")))?;
    if config.version() != CONFIG_VERSION {
        return Err(CliError::Config(format!(
            "config version {} unsupported (expected {CONFIG_VERSION})",
            config.version()
        )));
    }
    Ok(config)
}

pub fn resolve(base: &FsPath, p: &FsPath) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn read(base: &FsPath, p: &FsPath) -> Result<String, CliError> {
    let full = resolve(base, p);
    std::fs::read_to_string(&full)
        .map_err(|e| CliError::Config(format!("reading {}: {e}", full.display())))
}

pub enum Backend {
    Supernet(SupernetBackend),
    Oracle(OracleBackend),
}

impl Backend {
    pub fn space(&self) -> &SearchSpace {
        use gnas_core::Evaluator;
        match self {
            Backend::Supernet(b) => b.space(),
            Backend::Oracle(b) => b.space(),
        }
    }
}

pub fn load_oracle(base: &FsPath, source: &OracleSource) -> Result<OracleBundle, CliError> {
    match source {
        OracleSource::Spec(spec) => {
            let (space, oracle) = make_oracle_space(spec)
                .map_err(|e| CliError::Config(format!("oracle spec: {e}")))?;
            Ok(OracleBundle { space, oracle })
        }
        OracleSource::File(p) => serde_json::from_str(&read(base, p)?)
            .map_err(|e| CliError::Config(format!("oracle file {}: {e}", p.display()))),
    }
}

/// Builds the backend; supernet weights come from `checkpoint` when given,
/// otherwise from a fresh init seeded by `init_seed` or `run_seed`.
pub fn build_backend(
    base: &FsPath,
    config: &BackendConfig,
    run_seed: u64,
    checkpoint: Option<&FsPath>,
) -> Result<Backend, CliError> {
    match config {
        BackendConfig::Supernet {
            space,
            dataset,
            init_seed,
        } => {
            let space = match space {
                SpaceSource::File(p) => SearchSpace::from_json(&read(base, p)?)
                    .map_err(|e| CliError::Config(format!("space file {}: {e}", p.display())))?,
                SpaceSource::Uniform(u) => {
                    SearchSpace::uniform(u.num_layers, u.dim, &u.widths, u.identity)
                        .map_err(|e| CliError::Config(format!("space: {e}")))?
                }
            };
            let data = match dataset {
                DatasetSource::Synthetic(spec) => Dataset::synthetic(spec),
                DatasetSource::Csv(c) => Dataset::from_csv(
                    &read(base, &c.path)?,
                    c.train_fraction,
                    c.val_fraction,
                    c.seed,
                ),
            }
            .map_err(|e| CliError::Config(format!("dataset: {e}")))?;
            let data = Arc::new(data);
            let mut backend = SupernetBackend::init(
                space,
                data,
                &mut substream(init_seed.unwrap_or(run_seed), "init"),
            )
            .map_err(|e| CliError::Config(format!("backend: {e}")))?;
            if let Some(path) = checkpoint {
                let full = resolve(base, path);
                let bytes = std::fs::read(&full).map_err(|e| {
                    CliError::Config(format!("reading checkpoint {}: {e}", full.display()))
                })?;
                let weights = {
                    use gnas_core::Evaluator;
                    decode_checkpoint(&bytes, backend.space()).map_err(|e| {
                        CliError::Config(format!("checkpoint {}: {e}", full.display()))
                    })?
                };
                if weights.num_classes() < backend.data().num_classes() {
                    return Err(CliError::Config(
                        "checkpoint classifier has fewer classes than the dataset".into(),
                    ));
                }
                backend.weights = weights;
            }
            Ok(Backend::Supernet(backend))
        }
        BackendConfig::Oracle {
            oracle,
            subset_noise,
            val_len,
            train_len,
        } => {
            let bundle = load_oracle(base, oracle)?;
            let mut backend = OracleBackend::new(bundle.space, bundle.oracle)
                .map_err(|e| CliError::Config(format!("oracle: {e}")))?
                .with_subset_noise(*subset_noise);
            if let Some(v) = val_len {
                backend.val_len = *v;
            }
            if let Some(t) = train_len {
                backend.train_len = *t;
            }
            if backend.val_len == 0 || backend.train_len == 0 {
                return Err(CliError::Config(
                    "oracle val_len and train_len must be positive".into(),
                ));
            }
            Ok(Backend::Oracle(backend))
        }
    }
}
