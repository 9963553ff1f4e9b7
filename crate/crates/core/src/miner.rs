//! Productivity metrics mined from git history: commit count, code churn,
//! time to first commit and time of last commit relative to the deadline.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use chrono::{DateTime, Duration, Utc};
use regex::Regex;
use serde::Serialize;

use crate::git::{self, GitError};
use crate::roster::RepoEntry;

/// Header of the per-repository metrics CSV.
pub const METRICS_HEADER: [&str; 6] = [
    "repo_id",
    "group",
    "commits",
    "churn",
    "first_commit_days",
    "last_commit_hours",
];

/// Header of the per-commit CSV written with `--per-commit`.
pub const COMMITS_HEADER: [&str; 7] = [
    "repo_id",
    "group",
    "commit",
    "author_time",
    "lines_added",
    "lines_deleted",
    "churn",
];

/// Late-submission window counted after the deadline.
pub const GRACE_HOURS: i64 = 24;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CommitRecord {
    pub hash: String,
    /// `Name <email>`
    pub author: String,
    pub timestamp: DateTime<Utc>,
    pub lines_added: u64,
    pub lines_deleted: u64,
}

impl CommitRecord {
    pub fn churn(&self) -> u64 {
        self.lines_added + self.lines_deleted
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepoMetrics {
    pub repo_id: String,
    pub group_label: String,
    pub commit_count: u64,
    pub code_churn: u64,
    /// Days from assignment start to the first counted commit.
    pub first_commit_days: Option<f64>,
    /// Hours from the deadline to the last counted commit; negative means
    /// before the deadline.
    pub last_commit_hours: Option<f64>,
}

/// Which commits count: author time within `[start, deadline + grace]`,
/// author not matching any exclusion pattern.
#[derive(Debug, Clone)]
pub struct MiningWindow {
    pub start: DateTime<Utc>,
    pub deadline: DateTime<Utc>,
    pub grace: Duration,
    pub exclude_authors: Vec<Regex>,
}

impl MiningWindow {
    pub fn new(start: DateTime<Utc>, deadline: DateTime<Utc>) -> Self {
        Self {
            start,
            deadline,
            grace: Duration::hours(GRACE_HOURS),
            exclude_authors: Vec::new(),
        }
    }

    pub fn excluding(mut self, patterns: Vec<Regex>) -> Self {
        self.exclude_authors = patterns;
        self
    }

    pub fn counts(&self, c: &CommitRecord) -> bool {
        c.timestamp >= self.start
            && c.timestamp <= self.deadline + self.grace
            && !self.exclude_authors.iter().any(|re| re.is_match(&c.author))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MinerError {
    #[error("cannot read repository {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: GitError,
    },
    #[error("branch {branch:?} not found in {path}")]
    BranchMissing { path: PathBuf, branch: String },
    #[error("cannot clone {url}: {source}")]
    Clone {
        url: String,
        #[source]
        source: GitError,
    },
    #[error("unexpected git log output: {0}")]
    Parse(String),
}

const RECORD_SEP: char = '\u{1e}';
const FIELD_SEP: char = '\u{1f}';

/// First-parent history of `branch`, newest first. Merge commits carry
/// their diff against the first parent.
pub fn read_history(repo: &Path, branch: &str) -> Result<Vec<CommitRecord>, MinerError> {
    let unreadable = |source| MinerError::Unreadable {
        path: repo.to_path_buf(),
        source,
    };
    git::run(repo, &["rev-parse", "--git-dir"]).map_err(unreadable)?;
    let Some(tip) = git::resolve_commit(repo, branch).map_err(unreadable)? else {
        return Err(MinerError::BranchMissing {
            path: repo.to_path_buf(),
            branch: branch.to_string(),
        });
    };
    let out = git::run(
        repo,
        &[
            "log",
            "--first-parent",
            "--diff-merges=first-parent",
            "-M",
            "--numstat",
            "--no-color",
            "--format=%x1e%H%x1f%at%x1f%an%x1f%ae",
            &tip,
            "--",
        ],
    )
    .map_err(unreadable)?;
    parse_log(&out)
}

fn parse_log(out: &str) -> Result<Vec<CommitRecord>, MinerError> {
    let mut commits = Vec::new();
    for record in out.split(RECORD_SEP).filter(|r| !r.trim().is_empty()) {
        let mut lines = record.lines();
        let header = lines.next().unwrap_or_default();
        let fields: Vec<&str> = header.split(FIELD_SEP).collect();
        let [hash, time, name, email] = fields[..] else {
            return Err(MinerError::Parse(format!("bad commit header {header:?}")));
        };
        let secs: i64 = time
            .parse()
            .map_err(|_| MinerError::Parse(format!("bad author time {time:?}")))?;
        let timestamp = DateTime::from_timestamp(secs, 0)
            .ok_or_else(|| MinerError::Parse(format!("author time out of range {secs}")))?;
        let (mut added, mut deleted) = (0u64, 0u64);
        for line in lines.filter(|l| !l.is_empty()) {
            let mut cols = line.splitn(3, '\t');
            let (a, d) = (cols.next().unwrap_or(""), cols.next().unwrap_or(""));
            // binary files report "-"
            added += a.parse::<u64>().unwrap_or(0);
            deleted += d.parse::<u64>().unwrap_or(0);
        }
        commits.push(CommitRecord {
            hash: hash.to_string(),
            author: format!("{name} <{email}>"),
            timestamp,
            lines_added: added,
            lines_deleted: deleted,
        });
    }
    Ok(commits)
}

/// Aggregates counted commits into metrics. Order of `commits` is irrelevant.
pub fn compute_metrics(repo_id: &str, group: &str, commits: &[CommitRecord], window: &MiningWindow) -> RepoMetrics {
    let counted: Vec<&CommitRecord> = commits.iter().filter(|c| window.counts(c)).collect();
    let first = counted.iter().map(|c| c.timestamp).min();
    let last = counted.iter().map(|c| c.timestamp).max();
    RepoMetrics {
        repo_id: repo_id.to_string(),
        group_label: group.to_string(),
        commit_count: counted.len() as u64,
        code_churn: counted.iter().map(|c| c.churn()).sum(),
        first_commit_days: first.map(|t| (t - window.start).num_seconds() as f64 / 86_400.0),
        last_commit_hours: last.map(|t| (t - window.deadline).num_seconds() as f64 / 3_600.0),
    }
}

/// Mines one repository (working clone or bare) on `branch`.
pub fn mine_repo(
    repo: &Path,
    repo_id: &str,
    group: &str,
    branch: &str,
    window: &MiningWindow,
) -> Result<(RepoMetrics, Vec<CommitRecord>), MinerError> {
    let history = read_history(repo, branch)?;
    let metrics = compute_metrics(repo_id, group, &history, window);
    let counted = history.into_iter().filter(|c| window.counts(c)).collect();
    Ok((metrics, counted))
}

#[derive(Debug, Default)]
pub struct MinedRoster {
    /// Sorted by repo id.
    pub metrics: Vec<RepoMetrics>,
    /// Counted commits per repo, same order as `metrics`.
    pub commits: Vec<(String, Vec<CommitRecord>)>,
    pub skipped: Vec<(String, String)>,
}

/// Clones each entry (bare, into a temporary directory) and mines it.
/// Failures are logged and skipped.
pub fn mine_roster(
    entries: &[RepoEntry],
    group: &str,
    branch: &str,
    window: &MiningWindow,
    jobs: usize,
) -> MinedRoster {
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::with_capacity(entries.len()));
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, entries.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(entry) = entries.get(i) else { break };
                let r = mine_entry(entry, group, branch, window);
                results.lock().expect("mining results lock").push((entry.id.clone(), r));
            });
        }
    });

    let mut results = results.into_inner().expect("mining results lock");
    results.sort_by(|a, b| a.0.cmp(&b.0));
    let mut out = MinedRoster::default();
    for (id, r) in results {
        match r {
            Ok((m, commits)) => {
                tracing::info!(repo = %id, commits = m.commit_count, churn = m.code_churn, "mined");
                out.metrics.push(m);
                out.commits.push((id, commits));
            }
            Err(e) => {
                tracing::warn!(repo = %id, error = %e, "skipped");
                out.skipped.push((id, e.to_string()));
            }
        }
    }
    out
}

fn mine_entry(
    entry: &RepoEntry,
    group: &str,
    branch: &str,
    window: &MiningWindow,
) -> Result<(RepoMetrics, Vec<CommitRecord>), MinerError> {
    let clone_err = |source| MinerError::Clone {
        url: entry.url.clone(),
        source,
    };
    let tmp = tempfile::Builder::new()
        .prefix("classbot-mine-")
        .tempdir()
        .map_err(|e| clone_err(GitError::Spawn(e)))?;
    let dest = tmp.path().join("repo.git");
    git::run(
        tmp.path(),
        &["clone", "--bare", "--quiet", &entry.url, &dest.to_string_lossy()],
    )
    .map_err(clone_err)?;
    mine_repo(&dest, &entry.id, group, branch, window)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_metrics_csv<W: Write>(w: W, rows: &[RepoMetrics]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(METRICS_HEADER)?;
    for m in rows {
        out.write_record([
            m.repo_id.clone(),
            m.group_label.clone(),
            m.commit_count.to_string(),
            m.code_churn.to_string(),
            fmt_opt(m.first_commit_days),
            fmt_opt(m.last_commit_hours),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_commits_csv<W: Write>(w: W, group: &str, rows: &[(String, Vec<CommitRecord>)]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(COMMITS_HEADER)?;
    for (repo_id, commits) in rows {
        let mut commits: Vec<&CommitRecord> = commits.iter().collect();
        commits.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.hash.cmp(&b.hash)));
        for c in commits {
            out.write_record([
                repo_id.clone(),
                group.to_string(),
                c.hash.clone(),
                c.timestamp.format("%Y-%m-%dT%H:%M:%SZ").to_string(),
                c.lines_added.to_string(),
                c.lines_deleted.to_string(),
                c.churn().to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}
