//! Run directories, manifests and the error-to-exit-code mapping.

use std::fs;
use std::path::{Path, PathBuf};

use lwat::Error;
use serde::{Deserialize, Serialize};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

pub fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        return EXIT_NUMERIC;
    }
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Training { source, .. } => exit_code(source),
        _ => EXIT_DATA,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub lwat: String,
    pub os: String,
    pub arch: String,
}

impl Versions {
    fn current() -> Self {
        Versions {
            lwat: env!("CARGO_PKG_VERSION").into(),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
        }
    }
}

/// Written last by every command; its presence marks a completed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub threads: usize,
    pub versions: Versions,
    /// File names relative to the manifest's directory.
    pub artifacts: Vec<String>,
}

/// Output location of one command invocation, keyed by a content hash.
pub struct RunDir {
    pub dir: PathBuf,
    pub hash: String,
    command: String,
    artifacts: Vec<String>,
}

impl RunDir {
    pub fn new(dir: PathBuf, command: &str, hash: String) -> Self {
        RunDir {
            dir,
            hash,
            command: command.into(),
            artifacts: Vec::new(),
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dir
            .join(format!("manifest-{}-{}.json", self.command, self.hash))
    }

    /// `stem-<hash>.ext`
    pub fn name(&self, stem: &str, ext: &str) -> String {
        format!("{stem}-{}.{ext}", self.hash)
    }

    pub fn path(&self, stem: &str, ext: &str) -> PathBuf {
        self.dir.join(self.name(stem, ext))
    }

    /// True when a previous run with the same hash finished and all of its
    /// artifacts are still present.
    pub fn is_complete(&self) -> bool {
        let Ok(text) = fs::read_to_string(self.manifest_path()) else {
            return false;
        };
        let Ok(m) = serde_json::from_str::<Manifest>(&text) else {
            return false;
        };
        m.config_hash == self.hash && m.artifacts.iter().all(|a| self.dir.join(a).is_file())
    }

    pub fn write(
        &mut self,
        stem: &str,
        ext: &str,
        contents: impl AsRef<[u8]>,
    ) -> lwat::Result<PathBuf> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let path = self.path(stem, ext);
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.artifacts.push(self.name(stem, ext));
        Ok(path)
    }

    /// Records an artifact written by other means.
    pub fn record(&mut self, path: &Path) {
        if let Some(name) = path.file_name() {
            self.artifacts.push(name.to_string_lossy().into_owned());
        }
    }

    pub fn finish(self, seed: u64, threads: usize) -> lwat::Result<()> {
        let m = Manifest {
            command: self.command.clone(),
            config_hash: self.hash.clone(),
            seed,
            threads,
            versions: Versions::current(),
            artifacts: self.artifacts.clone(),
        };
        let path = self.manifest_path();
        let json = serde_json::to_string_pretty(&m).expect("manifest serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}
