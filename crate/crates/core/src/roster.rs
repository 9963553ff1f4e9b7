//! Roster file: which repositories take part and which rubric applies.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepoEntry {
    pub id: String,
    /// Clone URL; a local path works too.
    pub url: String,
    /// `owner/name` on the forge. Defaults to the id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forge_repo: Option<String>,
}

impl RepoEntry {
    pub fn forge_repo(&self) -> &str {
        self.forge_repo.as_deref().unwrap_or(&self.id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roster {
    /// Rubric path, relative to the roster file's directory when not absolute.
    pub rubric: PathBuf,
    pub repos: Vec<RepoEntry>,
}

#[derive(Debug, thiserror::Error)]
pub enum RosterError {
    #[error("cannot read roster {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed roster {path}: {source}")]
    Malformed {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("duplicate repo id {0:?} in roster")]
    DuplicateId(String),
    #[error("repo id {0:?} must be non-empty and use only letters, digits, '.', '_' or '-'")]
    BadId(String),
}

impl Roster {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, RosterError> {
        let roster: Roster = serde_json::from_str(text).map_err(|source| RosterError::Malformed {
            path: origin.to_path_buf(),
            source,
        })?;
        let mut seen = HashSet::new();
        for r in &roster.repos {
            if !valid_id(&r.id) {
                return Err(RosterError::BadId(r.id.clone()));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(RosterError::DuplicateId(r.id.clone()));
            }
        }
        Ok(roster)
    }

    /// Loads a roster and resolves its rubric path against the file's directory.
    pub fn load(path: &Path) -> Result<Self, RosterError> {
        let text = std::fs::read_to_string(path).map_err(|source| RosterError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut roster = Self::parse(&text, path)?;
        if roster.rubric.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            roster.rubric = base.join(&roster.rubric);
        }
        Ok(roster)
    }

    /// Identifier used for the state document (file stem of the roster).
    pub fn name_from_path(path: &Path) -> String {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "roster".into())
    }
}

/// Ids name per-repo working directories, so they must be plain path
/// components.
fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'))
}
