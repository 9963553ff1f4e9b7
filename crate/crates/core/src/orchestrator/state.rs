use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::forge::IssueRef;

/// What the bot remembers about one repository between runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepoState {
    pub repo_id: String,
    pub issue: Option<IssueRef>,
    /// Present whenever `issue` is.
    pub last_content_hash: Option<String>,
    pub last_assessed_commit: Option<String>,
    pub last_run_at: DateTime<Utc>,
}

#[derive(Debug, thiserror::Error)]
pub enum StateError {
    #[error("state file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt state file {path}: {source}")]
    Corrupt {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("state invariant violated for {0}: issue recorded without a content hash")]
    MissingHash(String),
    #[error("{0}")]
    Other(String),
}

pub trait StateStore: Send + Sync {
    fn load(&self, repo_id: &str) -> Result<Option<RepoState>, StateError>;
    fn save(&self, state: &RepoState) -> Result<(), StateError>;
}

/// All repo states of one roster in a single JSON document, replaced
/// atomically (temp file + rename) on every save.
pub struct FileStateStore {
    path: PathBuf,
    lock: Mutex<()>,
}

impl FileStateStore {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            lock: Mutex::new(()),
        }
    }

    /// `<dir>/<roster_name>.state.json`
    pub fn for_roster(dir: &Path, roster_name: &str) -> Self {
        Self::new(dir.join(format!("{roster_name}.state.json")))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn io(&self, source: std::io::Error) -> StateError {
        StateError::Io {
            path: self.path.clone(),
            source,
        }
    }

    fn read_all(&self) -> Result<BTreeMap<String, RepoState>, StateError> {
        match std::fs::read(&self.path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|source| StateError::Corrupt {
                path: self.path.clone(),
                source,
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(BTreeMap::new()),
            Err(e) => Err(self.io(e)),
        }
    }

    pub fn load_all(&self) -> Result<BTreeMap<String, RepoState>, StateError> {
        let _g = self.lock.lock().expect("state lock");
        self.read_all()
    }
}

impl StateStore for FileStateStore {
    fn load(&self, repo_id: &str) -> Result<Option<RepoState>, StateError> {
        Ok(self.load_all()?.remove(repo_id))
    }

    fn save(&self, state: &RepoState) -> Result<(), StateError> {
        if state.issue.is_some() && state.last_content_hash.is_none() {
            return Err(StateError::MissingHash(state.repo_id.clone()));
        }
        let _g = self.lock.lock().expect("state lock");
        let mut all = self.read_all()?;
        all.insert(state.repo_id.clone(), state.clone());

        let dir = self
            .path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        std::fs::create_dir_all(dir).map_err(|e| self.io(e))?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| self.io(e))?;
        serde_json::to_writer_pretty(&mut tmp, &all).map_err(|e| self.io(e.into()))?;
        tmp.write_all(b"\n").map_err(|e| self.io(e))?;
        tmp.as_file().sync_all().map_err(|e| self.io(e))?;
        tmp.persist(&self.path).map_err(|e| self.io(e.error))?;
        Ok(())
    }
}
