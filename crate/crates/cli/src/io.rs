//! Output directory handling. Every artifact is written to a temporary
//! sibling and renamed into place, so readers never see a partial file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::CliError;

pub const OUT_DIR_ENV: &str = "GNAS_OUT_DIR";

/// `--out`, then the config's `output_dir`, then `$GNAS_OUT_DIR`.
pub fn output_dir(flag: Option<&Path>, from_config: Option<PathBuf>) -> Result<PathBuf, CliError> {
    flag.map(Path::to_path_buf)
        .or(from_config)
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .ok_or_else(|| {
            CliError::Config(format!(
                "no output directory: pass --out, set output_dir, or set {OUT_DIR_ENV}"
            ))
        })
}

pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: PathBuf) -> Result<Self, CliError> {
        fs::create_dir_all(&root)
            .map_err(|e| CliError::Runtime(format!("creating {}: {e}", root.display())))?;
        Ok(Self { root })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write_bytes(&self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let target = self.path(name);
        let tmp = self.path(&format!(".{name}.tmp"));
        let io =
            |e: std::io::Error| CliError::Runtime(format!("writing {}: {e}", target.display()));
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
        drop(f);
        fs::rename(&tmp, &target).map_err(io)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<(), CliError> {
        self.write_bytes(name, text.as_bytes())
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| CliError::Runtime(format!("serializing {name}: {e}")))?;
        text.push('\n');
        self.write_text(name, &text)
    }
}

pub fn unix_seconds() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Wall-clock and environment details, kept out of the primary artifacts
/// so those stay byte-identical across runs.
#[derive(Debug, Serialize)]
pub struct Metadata {
    pub command: String,
    pub config: Option<PathBuf>,
    pub tool_version: &'static str,
    pub threads: usize,
    pub started_unix: u64,
    pub finished_unix: u64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl Metadata {
    pub fn new(command: &str, config: Option<&Path>, started_unix: u64) -> Self {
        Self {
            command: command.to_string(),
            config: config.map(Path::to_path_buf),
            tool_version: env!("CARGO_PKG_VERSION"),
            threads: rayon::current_num_threads(),
            started_unix,
            finished_unix: unix_seconds(),
            notes: Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_replace_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let out = OutDir::create(dir.path().join("a/b")).unwrap();
        out.write_text("x.txt", "one").unwrap();
        out.write_text("x.txt", "two").unwrap();
        assert_eq!(fs::read_to_string(out.path("x.txt")).unwrap(), "two");
        let names: Vec<_> = fs::read_dir(dir.path().join("a/b"))
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names, vec![std::ffi::OsString::from("x.txt")]);
    }

    #[test]
    fn flag_beats_config() {
        let p = output_dir(Some(Path::new("flag")), Some(PathBuf::from("cfg"))).unwrap();
        assert_eq!(p, PathBuf::from("flag"));
        let p = output_dir(None, Some(PathBuf::from("cfg"))).unwrap();
        assert_eq!(p, PathBuf::from("cfg"));
    }
}
