//! Output tree bookkeeping and the run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{read_text, to_json, write_text};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum FileStatus {
    Ok { sha256: String },
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    #[serde(flatten)]
    pub status: FileStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub config_digest: String,
    pub checkpoint_digest: Option<String>,
    pub complete: bool,
    pub error: Option<String>,
    pub files: Vec<FileEntry>,
    /// Seconds since the Unix epoch; the only field that differs between
    /// identical runs.
    pub timestamp: u64,
}

/// `manifest.json` at the top of the output directory, one record per
/// command that has written there.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub commands: BTreeMap<String, CommandRecord>,
}

pub const MANIFEST: &str = "manifest.json";

impl Manifest {
    pub fn load_or_default(root: &Path) -> Self {
        let path = root.join(MANIFEST);
        if !path.exists() {
            return Self::default();
        }
        match read_text(&path).and_then(|t| serde_json::from_str(&t).map_err(|e| Error::json(path.display().to_string(), e))) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("replacing unreadable manifest: {e}");
                Self::default()
            }
        }
    }
}

/// Writes files under `root/command/` and remembers what happened to each.
pub struct Outputs {
    root: PathBuf,
    command: String,
    files: Vec<FileEntry>,
}

impl Outputs {
    pub fn new(root: impl Into<PathBuf>, command: &str) -> Self {
        Self {
            root: root.into(),
            command: command.to_owned(),
            files: Vec::new(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn rel(&self, parts: &[&str]) -> String {
        std::iter::once(self.command.as_str())
            .chain(parts.iter().copied())
            .collect::<Vec<_>>()
            .join("/")
    }

    /// Write `root/command/parts…`.
    pub fn write(&mut self, parts: &[&str], contents: &str) -> Result<()> {
        let rel = self.rel(parts);
        match write_text(&self.root.join(&rel), contents) {
            Ok(()) => {
                self.files.push(FileEntry {
                    path: rel,
                    status: FileStatus::Ok {
                        sha256: hex::encode(Sha256::digest(contents.as_bytes())),
                    },
                });
                Ok(())
            }
            Err(e) => {
                self.fail(parts, &e);
                Err(e)
            }
        }
    }

    /// Note that the output at `parts` could not be produced.
    pub fn fail(&mut self, parts: &[&str], err: &Error) {
        self.files.push(FileEntry {
            path: self.rel(parts),
            status: FileStatus::Failed { error: err.to_string() },
        });
    }

    /// Merge this command's record into the manifest.
    pub fn finish(self, config_digest: String, checkpoint_digest: Option<String>, outcome: &Result<()>) -> Result<()> {
        let mut manifest = Manifest::load_or_default(&self.root);
        manifest.version = env!("CARGO_PKG_VERSION").to_owned();
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        manifest.commands.insert(
            self.command,
            CommandRecord {
                config_digest,
                checkpoint_digest,
                complete: outcome.is_ok(),
                error: outcome.as_ref().err().map(|e| e.to_string()),
                files: self.files,
                timestamp,
            },
        );
        write_text(&self.root.join(MANIFEST), &to_json(&manifest))
    }
}
