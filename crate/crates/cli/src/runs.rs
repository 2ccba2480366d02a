//! Run-directory scaffolding: effective-config echo, artifact index, and the
//! two-phase error model behind the exit codes.
//!
//! Phase rules: anything that goes wrong while assembling a run (config file,
//! checkpoints, datasets, stored manifests) is an input/config error → exit 2;
//! anything after that is a runtime/numeric failure → exit 3. `MANIFEST.json`
//! indexes every artifact a run produced and carries no wall-clock state, so
//! a re-run from the echoed config is bit-identical file for file.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::Serialize;

/// A command failure carrying the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    /// Input/config error → exit code 2.
    pub fn config(msg: impl Display) -> Failure {
        Failure {
            code: 2,
            message: msg.to_string(),
        }
    }

    /// Numeric/runtime failure → exit code 3.
    pub fn runtime(msg: impl Display) -> Failure {
        Failure {
            code: 3,
            message: msg.to_string(),
        }
    }
}

/// Shorthand for mapping library errors at the phase boundary.
pub trait Phase<T> {
    /// Treat an error as an input/config problem (exit 2).
    fn setup(self) -> Result<T, Failure>;
    /// Treat an error as a runtime problem (exit 3).
    fn run(self) -> Result<T, Failure>;
}

impl<T, E: Display> Phase<T> for Result<T, E> {
    fn setup(self) -> Result<T, Failure> {
        self.map_err(Failure::config)
    }

    fn run(self) -> Result<T, Failure> {
        self.map_err(Failure::runtime)
    }
}

/// Load a run config: the file when given, the type's defaults otherwise.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Failure::config(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::config(format!("invalid config {}: {e}", p.display())))
        }
    }
}

#[derive(Serialize)]
struct ArtifactEntry {
    path: String,
    kind: String,
}

#[derive(Serialize)]
struct ManifestIndex<'a> {
    command: &'a str,
    seed: u64,
    jobs: usize,
    artifacts: &'a [ArtifactEntry],
}

/// An output directory plus the index of everything written into it.
pub struct RunDir {
    path: PathBuf,
    command: String,
    seed: u64,
    jobs: usize,
    artifacts: Vec<ArtifactEntry>,
}

impl RunDir {
    /// Create the directory (explicit `--out`, or `runs/<command>-<time>`).
    pub fn create(
        out: Option<&Path>,
        command: &str,
        seed: u64,
        jobs: usize,
    ) -> Result<RunDir, Failure> {
        let path = match out {
            Some(p) => p.to_path_buf(),
            None => {
                let stamp = SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0);
                let slug = command.replace(' ', "-");
                let mut candidate = PathBuf::from(format!("runs/{slug}-{stamp}"));
                let mut n = 1;
                while candidate.exists() {
                    n += 1;
                    candidate = PathBuf::from(format!("runs/{slug}-{stamp}-{n}"));
                }
                candidate
            }
        };
        fs::create_dir_all(&path).map_err(|e| {
            Failure::config(format!(
                "cannot create output directory {}: {e}",
                path.display()
            ))
        })?;
        Ok(RunDir {
            path,
            command: command.to_string(),
            seed,
            jobs,
            artifacts: Vec::new(),
        })
    }

    /// Absolute path of a file inside the run directory.
    pub fn file(&self, rel: &str) -> PathBuf {
        self.path.join(rel)
    }

    /// Register an artifact some other writer already produced.
    pub fn note(&mut self, rel: &str, kind: &str) {
        self.artifacts.push(ArtifactEntry {
            path: rel.to_string(),
            kind: kind.to_string(),
        });
    }

    /// Serialize `value` as pretty JSON into `rel` and index it.
    pub fn write_json<T: Serialize>(
        &mut self,
        rel: &str,
        kind: &str,
        value: &T,
    ) -> Result<(), Failure> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| Failure::runtime(format!("cannot serialize {rel}: {e}")))?;
        text.push('\n');
        let target = self.file(rel);
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent)
                .map_err(|e| Failure::runtime(format!("cannot create {}: {e}", parent.display())))?;
        }
        fs::write(&target, text)
            .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", target.display())))?;
        self.note(rel, kind);
        Ok(())
    }

    /// Echo the effective config into the run directory and onto stdout.
    pub fn echo_config<T: Serialize>(&mut self, config: &T) -> Result<(), Failure> {
        self.write_json("config.json", "config", config)?;
        let pretty = serde_json::to_string_pretty(config)
            .map_err(|e| Failure::runtime(format!("cannot serialize config: {e}")))?;
        println!("effective config ({}):", self.file("config.json").display());
        println!("{pretty}");
        Ok(())
    }

    /// Write `MANIFEST.json`, the artifact index of the whole run.
    pub fn finish(mut self) -> Result<(), Failure> {
        let index = ManifestIndex {
            command: &self.command,
            seed: self.seed,
            jobs: self.jobs,
            artifacts: &self.artifacts,
        };
        let mut text = serde_json::to_string_pretty(&index)
            .map_err(|e| Failure::runtime(format!("cannot serialize MANIFEST: {e}")))?;
        text.push('\n');
        let target = self.path.join("MANIFEST.json");
        fs::write(&target, text)
            .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", target.display())))?;
        println!("run complete: {}", self.path.display());
        self.artifacts.clear();
        Ok(())
    }
}

/// Write a CSV of numeric records with a header line, `{v:.17e}` cells.
pub fn write_csv(
    dir: &mut RunDir,
    rel: &str,
    kind: &str,
    header: &[&str],
    rows: &[Vec<f64>],
) -> Result<(), Failure> {
    patchlab_core::csvgrid::write_records(&dir.file(rel), header, rows).run()?;
    dir.note(rel, kind);
    Ok(())
}
