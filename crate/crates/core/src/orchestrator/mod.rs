//! The nudge cycle: refresh a repository, assess it, render the progress
//! issue and create or update it on the forge, remembering what was posted.

mod schedule;
mod state;

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use chrono::{DateTime, Duration, Utc};

use crate::analyzer::Analyzer;
use crate::forge::{ForgeBackend, ForgeClient, ForgeError, IssueRef};
use crate::git::{self, GitError};
use crate::renderer::{self, NudgeIssue, MARKER};
use crate::roster::RepoEntry;
use crate::rubric::{Rubric, UpdateMode};

pub use schedule::{Scheduler, DEFAULT_POLL_INTERVAL};
pub use state::{FileStateStore, RepoState, StateError, StateStore};

/// Nudging continues this long after the deadline.
pub const GRACE_PERIOD_HOURS: i64 = 24;

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
    fn sleep(&self, d: std::time::Duration);
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }

    fn sleep(&self, d: std::time::Duration) {
        std::thread::sleep(d);
    }
}

/// Clock that only moves when told to; `sleep` advances it instantly.
#[derive(Debug)]
pub struct ManualClock(Mutex<DateTime<Utc>>);

impl ManualClock {
    pub fn new(at: DateTime<Utc>) -> Self {
        Self(Mutex::new(at))
    }

    pub fn set(&self, at: DateTime<Utc>) {
        *self.0.lock().expect("clock lock") = at;
    }

    pub fn advance(&self, by: Duration) {
        *self.0.lock().expect("clock lock") += by;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.0.lock().expect("clock lock")
    }

    fn sleep(&self, d: std::time::Duration) {
        self.advance(Duration::from_std(d).unwrap_or(Duration::MAX));
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Created(IssueRef),
    Updated(IssueRef),
    Unchanged,
    Skipped(String),
    Failed(String),
}

impl Outcome {
    pub fn name(&self) -> &'static str {
        match self {
            Outcome::Created(_) => "created",
            Outcome::Updated(_) => "updated",
            Outcome::Unchanged => "unchanged",
            Outcome::Skipped(_) => "skipped",
            Outcome::Failed(_) => "failed",
        }
    }

    pub fn is_failed(&self) -> bool {
        matches!(self, Outcome::Failed(_))
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Created(r) | Outcome::Updated(r) => write!(f, "{} {r}", self.name()),
            Outcome::Unchanged => f.write_str("unchanged"),
            Outcome::Skipped(why) | Outcome::Failed(why) => write!(f, "{}: {why}", self.name()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct NudgeReport {
    pub repo_id: String,
    pub outcome: Outcome,
    /// Whether checks ran in this cycle.
    pub assessed: bool,
    pub head: Option<String>,
    /// Rendered issue, whenever an assessment happened.
    pub issue: Option<NudgeIssue>,
}

/// Everything one nudge cycle needs. Work clones live under `work_root/<id>`.
pub struct Nudger<'a, B> {
    pub rubric: &'a Rubric,
    pub store: &'a dyn StateStore,
    pub forge: &'a ForgeClient<B>,
    pub analyzer: &'a Analyzer,
    pub clock: &'a dyn Clock,
    pub work_root: PathBuf,
    /// Assess and render, but never touch the forge or the state store.
    pub dry_run: bool,
}

/// Clones `url` into `dir` or refreshes an existing clone to the remote
/// HEAD, discarding local changes. Returns the checked-out commit.
pub fn sync_repo(url: &str, dir: &Path) -> Result<String, GitError> {
    if dir.join(".git").exists() {
        git::run(dir, &["remote", "set-url", "origin", url])?;
        git::run(dir, &["fetch", "--quiet", "--force", "--no-tags", "origin", "HEAD"])?;
        git::run(dir, &["checkout", "--quiet", "--force", "--detach", "FETCH_HEAD"])?;
        git::run(dir, &["clean", "-ffdxq"])?;
    } else {
        let parent = dir.parent().unwrap_or(Path::new("."));
        std::fs::create_dir_all(parent)?;
        if dir.exists() {
            std::fs::remove_dir_all(dir)?;
        }
        git::run(parent, &["clone", "--quiet", "--no-tags", url, &dir.to_string_lossy()])?;
    }
    Ok(git::run(dir, &["rev-parse", "--verify", "HEAD"])?.trim().to_string())
}

impl<B: ForgeBackend> Nudger<'_, B> {
    pub fn workdir(&self, entry: &RepoEntry) -> PathBuf {
        self.work_root.join(&entry.id)
    }

    /// One create-or-update cycle for `entry`. State is written only after
    /// the forge accepted the change, and never in dry-run mode.
    pub fn nudge_once(&self, entry: &RepoEntry) -> NudgeReport {
        let report = self.cycle(entry);
        match &report.outcome {
            Outcome::Failed(why) => tracing::warn!(
                repo = %entry.id,
                outcome = report.outcome.name(),
                reason = %why,
                dry_run = self.dry_run,
                "nudge"
            ),
            o => tracing::info!(
                repo = %entry.id,
                outcome = o.name(),
                issue = %match o {
                    Outcome::Created(r) | Outcome::Updated(r) => r.to_string(),
                    _ => String::new(),
                },
                head = %report.head.as_deref().map(|h| &h[..h.len().min(7)]).unwrap_or(""),
                assessed = report.assessed,
                dry_run = self.dry_run,
                "nudge"
            ),
        }
        report
    }

    /// Runs `nudge_once` over `entries` with up to `jobs` workers. Reports
    /// come back in input order.
    pub fn nudge_all(&self, entries: &[RepoEntry], jobs: usize) -> Vec<NudgeReport>
    where
        B: Sync,
    {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<NudgeReport>>> = entries.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|s| {
            for _ in 0..jobs.clamp(1, entries.len().max(1)) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(entry) = entries.get(i) else { break };
                    let r = self.nudge_once(entry);
                    *slots[i].lock().expect("report slot") = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().expect("report slot").expect("every entry processed"))
            .collect()
    }

    fn cycle(&self, entry: &RepoEntry) -> NudgeReport {
        let mut report = NudgeReport {
            repo_id: entry.id.clone(),
            outcome: Outcome::Unchanged,
            assessed: false,
            head: None,
            issue: None,
        };
        let fail = |mut r: NudgeReport, why: String| {
            r.outcome = Outcome::Failed(why);
            r
        };

        let now = self.clock.now();
        let cutoff = self.rubric.deadline + Duration::hours(GRACE_PERIOD_HOURS);
        if now > cutoff {
            report.outcome = Outcome::Skipped(format!("grace period ended at {}", cutoff.format("%Y-%m-%dT%H:%M:%SZ")));
            return report;
        }

        let previous = match self.store.load(&entry.id) {
            Ok(s) => s,
            Err(e) => return fail(report, format!("state: {e}")),
        };

        let workdir = self.workdir(entry);
        let head = match sync_repo(&entry.url, &workdir) {
            Ok(h) => h,
            Err(e) => return fail(report, format!("fetch: {e}")),
        };
        report.head = Some(head.clone());

        // generated_at never moves backwards for a repo
        let generated_at = previous.as_ref().map_or(now, |p| p.last_run_at.max(now));

        if self.rubric.update_mode == UpdateMode::OnChange {
            if let Some(prev) = previous
                .as_ref()
                .filter(|p| p.last_assessed_commit.as_deref() == Some(&head))
            {
                if !self.dry_run {
                    let mut st = prev.clone();
                    st.last_run_at = generated_at;
                    if let Err(e) = self.store.save(&st) {
                        return fail(report, format!("state: {e}"));
                    }
                }
                return report;
            }
        }

        let assessment = match self
            .analyzer
            .assess_at(&workdir, &entry.id, self.rubric, &head, generated_at)
        {
            Ok(a) => a,
            Err(e) => return fail(report, format!("assess: {e}")),
        };
        report.assessed = true;
        let issue = match renderer::render(&assessment, self.rubric) {
            Ok(i) => i,
            Err(e) => return fail(report, format!("render: {e}")),
        };
        report.issue = Some(issue.clone());

        let forge_repo = entry.forge_repo();
        let (outcome, posted) = match self.publish(forge_repo, previous.as_ref(), &issue) {
            Ok(x) => x,
            Err(e) => return fail(report, format!("forge: {e}")),
        };
        report.outcome = outcome;

        if !self.dry_run {
            let st = RepoState {
                repo_id: entry.id.clone(),
                issue: posted,
                last_content_hash: Some(issue.content_hash.clone()),
                last_assessed_commit: Some(head),
                last_run_at: generated_at,
            };
            if let Err(e) = self.store.save(&st) {
                return fail(report, format!("state: {e}"));
            }
        }
        report
    }

    /// Decides between create, update and no-op. Returns the outcome and the
    /// issue now holding the body.
    fn publish(
        &self,
        repo: &str,
        previous: Option<&RepoState>,
        issue: &NudgeIssue,
    ) -> Result<(Outcome, Option<IssueRef>), ForgeError> {
        let mut tracked = previous.and_then(|p| p.issue.clone().zip(p.last_content_hash.clone()));

        if tracked.is_none() {
            // Recovers issues created by a run that died before saving state.
            if let Some(found) = self.forge.find_marked_issue(repo, MARKER)? {
                tracked = Some((found.issue, renderer::content_hash(&found.body)));
            }
        }

        match tracked {
            None => {
                if self.dry_run {
                    let placeholder = IssueRef {
                        repo: repo.to_string(),
                        number: 0,
                    };
                    return Ok((Outcome::Created(placeholder), None));
                }
                let r = self.forge.create_issue(repo, &issue.title, &issue.body)?;
                Ok((Outcome::Created(r.clone()), Some(r)))
            }
            Some((r, hash)) if hash == issue.content_hash => Ok((Outcome::Unchanged, Some(r))),
            Some((r, _)) => {
                if self.dry_run {
                    return Ok((Outcome::Updated(r.clone()), Some(r)));
                }
                match self.forge.update_issue(&r, &issue.body) {
                    Ok(()) => Ok((Outcome::Updated(r.clone()), Some(r))),
                    Err(ForgeError::NotFound(_)) => {
                        // Tracked issue vanished: fall back to discovery or a fresh issue.
                        match self.forge.find_marked_issue(repo, MARKER)? {
                            Some(found) => {
                                self.forge.update_issue(&found.issue, &issue.body)?;
                                Ok((Outcome::Updated(found.issue.clone()), Some(found.issue)))
                            }
                            None => {
                                let n = self.forge.create_issue(repo, &issue.title, &issue.body)?;
                                Ok((Outcome::Created(n.clone()), Some(n)))
                            }
                        }
                    }
                    Err(e) => Err(e),
                }
            }
        }
    }
}
