//! Runs rubric checks against a repository working tree.
//!
//! Checks never run inside the repository itself. The tracked tree (minus
//! `.git`) is copied into a scratch directory first and every command of one
//! assessment runs there, in rubric order, so a build step can feed a later
//! test step while the repository's refs and objects stay out of reach.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::exec::{self, Exit};
use crate::rubric::{CheckKind, CheckSpec, Rubric};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckStatus {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub item_id: String,
    pub status: CheckStatus,
    /// Short diagnostic; never empty for a failed check.
    pub detail: String,
    pub duration_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssessmentReport {
    pub repo_id: String,
    pub rubric_name: String,
    pub generated_at: DateTime<Utc>,
    /// One entry per rubric item, in rubric order.
    pub results: Vec<CheckResult>,
    pub head_commit: String,
}

impl AssessmentReport {
    pub fn passed(&self) -> usize {
        self.results.iter().filter(|r| r.status == CheckStatus::Pass).count()
    }

    pub fn all_passed(&self) -> bool {
        self.passed() == self.results.len()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AnalyzerError {
    #[error("working tree {0} does not exist or is not a directory")]
    WorkdirMissing(PathBuf),
    #[error("cannot prepare scratch copy of {path}: {source}")]
    Scratch {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Check runner. `extra_env` holds operator-declared variables passed to
/// every check command on top of PATH, HOME and LANG.
#[derive(Debug, Clone, Default)]
pub struct Analyzer {
    pub extra_env: Vec<(String, String)>,
}

impl Analyzer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_env(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.extra_env.push((key.into(), value.into()));
        self
    }

    /// Runs a single check against a scratch copy of `workdir`.
    pub fn run_check(&self, workdir: &Path, spec: &CheckSpec) -> Result<CheckResult, AnalyzerError> {
        let scratch = ScratchTree::copy_of(workdir)?;
        Ok(self.run_check_in(scratch.path(), spec))
    }

    /// Runs every rubric check in order. A failing check never stops the
    /// remaining ones.
    pub fn assess(
        &self,
        workdir: &Path,
        repo_id: &str,
        rubric: &Rubric,
        head: &str,
    ) -> Result<AssessmentReport, AnalyzerError> {
        self.assess_at(workdir, repo_id, rubric, head, Utc::now())
    }

    pub fn assess_at(
        &self,
        workdir: &Path,
        repo_id: &str,
        rubric: &Rubric,
        head: &str,
        generated_at: DateTime<Utc>,
    ) -> Result<AssessmentReport, AnalyzerError> {
        let scratch = ScratchTree::copy_of(workdir)?;
        let results = rubric
            .items()
            .map(|spec| {
                let r = self.run_check_in(scratch.path(), spec);
                tracing::debug!(
                    repo = repo_id,
                    item = %r.item_id,
                    status = ?r.status,
                    detail = %r.detail,
                    "check finished"
                );
                r
            })
            .collect();
        Ok(AssessmentReport {
            repo_id: repo_id.to_string(),
            rubric_name: rubric.assignment_name.clone(),
            generated_at,
            results,
            head_commit: head.to_string(),
        })
    }

    fn run_check_in(&self, root: &Path, spec: &CheckSpec) -> CheckResult {
        let started = Instant::now();
        let (pass, detail) = match &spec.kind {
            CheckKind::FileExists { path } => {
                if is_regular_file(root, path) {
                    (true, "found".to_string())
                } else {
                    (false, format!("missing {path}"))
                }
            }
            CheckKind::FileAbsent { path } => {
                if is_regular_file(root, path) {
                    (false, format!("unexpected {path}"))
                } else {
                    (true, "absent".to_string())
                }
            }
            CheckKind::CommandSucceeds { command, timeout_secs } => {
                let done = exec::run(command, root, &self.extra_env, Duration::from_secs(*timeout_secs));
                match done.exit {
                    Exit::Code(0) => (true, "exit 0".to_string()),
                    other => (false, exit_detail(&other)),
                }
            }
            CheckKind::MaxPatternCount {
                command,
                timeout_secs,
                pattern,
                threshold,
            } => {
                let done = exec::run(command, root, &self.extra_env, Duration::from_secs(*timeout_secs));
                match done.exit {
                    Exit::Code(_) | Exit::Signal(_) => match Regex::new(pattern) {
                        Ok(re) => {
                            let count = count_matching_lines(&re, &done.output);
                            if count <= *threshold {
                                (true, format!("{count} <= {threshold}"))
                            } else {
                                (false, format!("{count} > {threshold}"))
                            }
                        }
                        Err(e) => (false, format!("invalid pattern: {e}")),
                    },
                    other => (false, exit_detail(&other)),
                }
            }
        };
        CheckResult {
            item_id: spec.id.clone(),
            status: if pass { CheckStatus::Pass } else { CheckStatus::Fail },
            detail,
            duration_ms: started.elapsed().as_millis() as u64,
        }
    }
}

fn exit_detail(exit: &Exit) -> String {
    match exit {
        Exit::Code(c) => format!("exit {c}"),
        Exit::Signal(s) => format!("killed by signal {s}"),
        Exit::TimedOut => "timeout".to_string(),
        Exit::NotFound => "command not found".to_string(),
        Exit::SpawnFailed(m) => format!("could not start: {m}"),
    }
}

fn is_regular_file(root: &Path, rel: &str) -> bool {
    fs::metadata(root.join(rel)).map(|m| m.is_file()).unwrap_or(false)
}

/// Counts lines of `output` (UTF-8, invalid bytes replaced) matched by `re`.
pub fn count_matching_lines(re: &Regex, output: &[u8]) -> u64 {
    String::from_utf8_lossy(output)
        .lines()
        .filter(|line| re.is_match(line))
        .count() as u64
}

/// Temporary copy of a working tree without its `.git` entry.
struct ScratchTree {
    dir: tempfile::TempDir,
}

impl ScratchTree {
    fn copy_of(workdir: &Path) -> Result<Self, AnalyzerError> {
        if !workdir.is_dir() {
            return Err(AnalyzerError::WorkdirMissing(workdir.to_path_buf()));
        }
        let err = |source| AnalyzerError::Scratch {
            path: workdir.to_path_buf(),
            source,
        };
        let dir = tempfile::Builder::new()
            .prefix("classbot-assess-")
            .tempdir()
            .map_err(err)?;
        copy_tree(workdir, dir.path()).map_err(err)?;
        Ok(Self { dir })
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }
}

fn copy_tree(from: &Path, to: &Path) -> std::io::Result<()> {
    let walker = walkdir::WalkDir::new(from)
        .min_depth(1)
        .follow_links(false)
        .into_iter()
        .filter_entry(|e| !(e.depth() == 1 && e.file_name() == ".git"));
    for entry in walker {
        let entry = entry.map_err(std::io::Error::other)?;
        let rel = entry
            .path()
            .strip_prefix(from)
            .expect("walkdir yields paths under its root");
        let target = to.join(rel);
        let ft = entry.file_type();
        if ft.is_dir() {
            fs::create_dir_all(&target)?;
        } else if ft.is_symlink() {
            let link = fs::read_link(entry.path())?;
            std::os::unix::fs::symlink(link, &target)?;
        } else if ft.is_file() {
            fs::copy(entry.path(), &target)?;
        }
    }
    Ok(())
}
