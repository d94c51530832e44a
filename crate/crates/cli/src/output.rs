//! Output directory bookkeeping: overwrite protection and the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    /// Files written by each subcommand, latest version of each path.
    pub commands: BTreeMap<String, CommandRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommandRecord {
    pub seeds: Vec<u64>,
    pub files: Vec<FileRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileRecord {
    /// Relative to the output directory.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

pub struct OutDir {
    root: PathBuf,
    force: bool,
    written: Vec<PathBuf>,
}

impl OutDir {
    pub fn create(root: &Path, force: bool) -> Result<Self, CliError> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            force,
            written: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Path for a new output file; refuses existing files unless forced.
    pub fn claim(&mut self, rel: impl AsRef<Path>) -> Result<PathBuf, CliError> {
        let path = self.root.join(rel.as_ref());
        if path.exists() && !self.force {
            return Err(CliError::Config(format!(
                "{} already exists; pass --force to overwrite",
                path.display()
            )));
        }
        self.record(path)
    }

    /// Like [`claim`](Self::claim) but overwriting is expected (resume).
    pub fn reclaim(&mut self, rel: impl AsRef<Path>) -> Result<PathBuf, CliError> {
        let path = self.root.join(rel.as_ref());
        self.record(path)
    }

    fn record(&mut self, path: PathBuf) -> Result<PathBuf, CliError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        if !self.written.contains(&path) {
            self.written.push(path.clone());
        }
        Ok(path)
    }

    /// Hashes everything written and merges this command into the manifest.
    pub fn finish(self, command: &str, seeds: &[u64]) -> Result<PathBuf, CliError> {
        let manifest_path = self.root.join(MANIFEST);
        let mut manifest = match fs::read_to_string(&manifest_path) {
            Ok(text) => serde_json::from_str(&text)?,
            Err(_) => Manifest::default(),
        };
        manifest.version = env!("CARGO_PKG_VERSION").to_string();
        let mut files = Vec::with_capacity(self.written.len());
        for p in &self.written {
            let bytes = fs::read(p)?;
            let rel = p.strip_prefix(&self.root).unwrap_or(p);
            files.push(FileRecord {
                path: rel.to_string_lossy().replace('\\', "/"),
                bytes: bytes.len() as u64,
                sha256: format!("{:x}", Sha256::digest(&bytes)),
            });
        }
        // repeated runs of a command (e.g. one seed at a time) accumulate
        let record = manifest.commands.entry(command.to_string()).or_insert(CommandRecord {
            seeds: Vec::new(),
            files: Vec::new(),
        });
        for s in seeds {
            if !record.seeds.contains(s) {
                record.seeds.push(*s);
            }
        }
        record.seeds.sort_unstable();
        record.files.retain(|f| !files.iter().any(|g| g.path == f.path));
        record.files.extend(files);
        record.files.sort_by(|a, b| a.path.cmp(&b.path));
        fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest_path)
    }
}
