//! Output locations, exit codes and error classification.

use std::path::{Path, PathBuf};

use apa_core::config::RunConfig;
use apa_core::Error;

pub const EXIT_VERIFY: u8 = 1;
pub const EXIT_MISSING: u8 = 2;
pub const EXIT_CONFIG: u8 = 3;
pub const EXIT_RUNTIME: u8 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Failure { code, message: message.into() }
    }

    pub fn missing(message: impl Into<String>) -> Self {
        Failure::new(EXIT_MISSING, message)
    }

    pub fn config(message: impl Into<String>) -> Self {
        Failure::new(EXIT_CONFIG, message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::InvalidArgument(_) | Error::InvalidSplit { .. } => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::new(EXIT_RUNTIME, e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::new(EXIT_RUNTIME, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::new(EXIT_RUNTIME, e.to_string())
    }
}

pub type Outcome<T = ()> = Result<T, Failure>;

/// `--out`, then `[run] out_dir`, then `$APA_OUT_DIR`, then `./apa-out`.
pub fn out_root(flag: Option<&Path>, cfg: Option<&RunConfig>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = cfg.and_then(|c| c.run.out_dir.as_ref()) {
        return PathBuf::from(p);
    }
    match std::env::var_os("APA_OUT_DIR") {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from("apa-out"),
    }
}

/// Creates `dir` for a command's outputs. An existing non-empty directory
/// is an error unless `force`, in which case it is emptied first.
pub fn claim_dir(dir: &Path, force: bool) -> Outcome<()> {
    let occupied = dir.is_dir() && std::fs::read_dir(dir)?.next().is_some();
    if occupied {
        if !force {
            return Err(Failure::config(format!(
                "output directory {} already has results; pass --force to replace them",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

pub fn require(path: &Path, hint: &str) -> Outcome<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::missing(format!("{} not found; {hint}", path.display())))
    }
}

pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn source(&self) -> PathBuf {
        self.root.join("source")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.source().join("model.json")
    }

    pub fn adapt(&self, source_free: bool, loss: &str) -> PathBuf {
        self.root.join(if source_free { "adapt-sf" } else { "adapt" }).join(loss)
    }

    pub fn sweep(&self, param: &str) -> PathBuf {
        self.root.join("sweep").join(param)
    }

    pub fn probe(&self, kind: &str) -> PathBuf {
        self.root.join("probe").join(kind)
    }

    pub fn verify(&self, level: &str) -> PathBuf {
        self.root.join("verify").join(level)
    }
}
