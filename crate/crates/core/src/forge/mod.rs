//! Issue tracker access. [`ForgeClient`] adds retries, request spacing,
//! body truncation and the dry-run guard on top of a [`ForgeBackend`]:
//! either the GitHub-compatible HTTP API or the in-memory [`FakeForge`].

mod fake;
mod http;

use std::collections::HashMap;
use std::fmt;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use fake::{FakeForge, Mutation};
pub use http::HttpForge;

/// Longest issue body the forge accepts, in characters.
pub const MAX_BODY_CHARS: usize = 65_536;

/// Appended to bodies cut down to [`MAX_BODY_CHARS`].
pub const TRUNCATION_NOTICE: &str = "\n\n_(truncated: body exceeded the 65536 character limit)_";

pub const DEFAULT_BASE_URL: &str = "https://api.github.com";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IssueRef {
    /// `owner/name`
    pub repo: String,
    pub number: u64,
}

impl fmt::Display for IssueRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.repo, self.number)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub number: u64,
    pub title: String,
    pub body: String,
    pub open: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ForgeError {
    #[error("network failure: {0}")]
    Network(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limit exhausted")]
    RateLimited { retry_after: Option<Duration> },
    #[error("server error {status}: {message}")]
    Server { status: u16, message: String },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("issue {0} is closed")]
    Closed(IssueRef),
    #[error("unexpected response: {0}")]
    Protocol(String),
    #[error("refusing to modify the forge in dry-run mode")]
    DryRun,
    #[error("issue body must not be empty")]
    EmptyBody,
}

impl ForgeError {
    pub fn is_transient(&self) -> bool {
        matches!(
            self,
            ForgeError::Network(_) | ForgeError::Server { .. } | ForgeError::RateLimited { .. }
        )
    }
}

/// Raw forge operations, without retries or pacing.
pub trait ForgeBackend: Send + Sync {
    fn list_open_issues(&self, repo: &str) -> Result<Vec<Issue>, ForgeError>;
    fn get_issue(&self, issue: &IssueRef) -> Result<Issue, ForgeError>;
    fn create_issue(&self, repo: &str, title: &str, body: &str) -> Result<IssueRef, ForgeError>;
    fn edit_issue_body(&self, issue: &IssueRef, body: &str) -> Result<(), ForgeError>;
}

impl<T: ForgeBackend + ?Sized> ForgeBackend for Box<T> {
    fn list_open_issues(&self, repo: &str) -> Result<Vec<Issue>, ForgeError> {
        (**self).list_open_issues(repo)
    }
    fn get_issue(&self, issue: &IssueRef) -> Result<Issue, ForgeError> {
        (**self).get_issue(issue)
    }
    fn create_issue(&self, repo: &str, title: &str, body: &str) -> Result<IssueRef, ForgeError> {
        (**self).create_issue(repo, title, body)
    }
    fn edit_issue_body(&self, issue: &IssueRef, body: &str) -> Result<(), ForgeError> {
        (**self).edit_issue_body(issue, body)
    }
}

/// API token. Never printed.
#[derive(Clone, Default, PartialEq, Eq)]
pub struct Secret(String);

impl Secret {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Secret(***)")
    }
}

#[derive(Debug, Clone)]
pub struct ForgeConfig {
    pub base_url: String,
    pub token: Secret,
    pub max_retries: u32,
    pub min_request_interval: Duration,
    /// First backoff delay; doubles per attempt up to `backoff_max`.
    pub backoff_base: Duration,
    pub backoff_max: Duration,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        Self {
            base_url: DEFAULT_BASE_URL.into(),
            token: Secret::default(),
            max_retries: 3,
            min_request_interval: Duration::from_millis(250),
            backoff_base: Duration::from_millis(500),
            backoff_max: Duration::from_secs(30),
        }
    }
}

/// A marked issue lookup. `duplicates` lists further open marked issues,
/// which should not exist.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Found {
    pub issue: IssueRef,
    pub body: String,
    pub duplicates: Vec<IssueRef>,
}

pub struct ForgeClient<B> {
    backend: B,
    config: ForgeConfig,
    dry_run: bool,
    last_request: Mutex<HashMap<String, Instant>>,
}

impl<B: ForgeBackend> ForgeClient<B> {
    pub fn new(backend: B, config: ForgeConfig) -> Self {
        Self {
            backend,
            config,
            dry_run: false,
            last_request: Mutex::new(HashMap::new()),
        }
    }

    /// In dry-run mode every mutation fails with [`ForgeError::DryRun`]
    /// before reaching the backend.
    pub fn dry_run(mut self, on: bool) -> Self {
        self.dry_run = on;
        self
    }

    pub fn is_dry_run(&self) -> bool {
        self.dry_run
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    /// The open issue whose body starts with `marker`; the lowest number wins
    /// when there are several.
    pub fn find_marked_issue(&self, repo: &str, marker: &str) -> Result<Option<Found>, ForgeError> {
        let issues = self.call(repo, || self.backend.list_open_issues(repo))?;
        let mut marked: Vec<Issue> = issues
            .into_iter()
            .filter(|i| i.open && i.body.starts_with(marker))
            .collect();
        marked.sort_by_key(|i| i.number);
        let mut it = marked.into_iter();
        let Some(first) = it.next() else {
            return Ok(None);
        };
        let duplicates: Vec<IssueRef> = it
            .map(|i| IssueRef {
                repo: repo.to_string(),
                number: i.number,
            })
            .collect();
        if !duplicates.is_empty() {
            tracing::warn!(
                repo,
                chosen = first.number,
                others = ?duplicates.iter().map(|d| d.number).collect::<Vec<_>>(),
                "several marked issues are open; using the lowest number"
            );
        }
        Ok(Some(Found {
            issue: IssueRef {
                repo: repo.to_string(),
                number: first.number,
            },
            body: first.body,
            duplicates,
        }))
    }

    pub fn create_issue(&self, repo: &str, title: &str, body: &str) -> Result<IssueRef, ForgeError> {
        let body = self.prepare_body(body)?;
        let marker = body.lines().next().unwrap_or_default().to_string();
        let mut attempt = 0;
        loop {
            self.pace(repo);
            match self.backend.create_issue(repo, title, &body) {
                Ok(r) => return Ok(r),
                Err(e) if e.is_transient() && attempt < self.config.max_retries => {
                    // The failed request may still have created the issue.
                    if !marker.is_empty() {
                        if let Ok(Some(found)) = self.find_marked_issue(repo, &marker) {
                            if found.body == body {
                                return Ok(found.issue);
                            }
                        }
                    }
                    self.backoff(attempt, &e)?;
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Replaces the body of an open issue.
    pub fn update_issue(&self, issue: &IssueRef, body: &str) -> Result<(), ForgeError> {
        let body = self.prepare_body(body)?;
        let current = self.call(&issue.repo, || self.backend.get_issue(issue))?;
        if !current.open {
            return Err(ForgeError::Closed(issue.clone()));
        }
        self.call(&issue.repo, || self.backend.edit_issue_body(issue, &body))
    }

    fn prepare_body(&self, body: &str) -> Result<String, ForgeError> {
        if self.dry_run {
            return Err(ForgeError::DryRun);
        }
        if body.is_empty() {
            return Err(ForgeError::EmptyBody);
        }
        Ok(fit_body(body))
    }

    fn call<T>(&self, repo: &str, mut op: impl FnMut() -> Result<T, ForgeError>) -> Result<T, ForgeError> {
        let mut attempt = 0;
        loop {
            self.pace(repo);
            match op() {
                Err(e) if e.is_transient() && attempt < self.config.max_retries => {
                    self.backoff(attempt, &e)?;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn backoff(&self, attempt: u32, err: &ForgeError) -> Result<(), ForgeError> {
        let exp = self
            .config
            .backoff_base
            .saturating_mul(1u32.checked_shl(attempt).unwrap_or(u32::MAX))
            .min(self.config.backoff_max);
        let delay = match err {
            ForgeError::RateLimited {
                retry_after: Some(wait),
            } => {
                if *wait > self.config.backoff_max {
                    return Err(err.clone());
                }
                (*wait).max(exp)
            }
            _ => exp,
        };
        tracing::debug!(attempt, ?delay, error = %err, "retrying forge request");
        std::thread::sleep(delay);
        Ok(())
    }

    /// Blocks until `min_request_interval` has passed since the previous
    /// request to `repo`. Dispatch is serialized through the lock.
    fn pace(&self, repo: &str) {
        let mut last = self.last_request.lock().expect("rate limiter lock");
        if let Some(prev) = last.get(repo) {
            let ready = *prev + self.config.min_request_interval;
            let now = Instant::now();
            if ready > now {
                std::thread::sleep(ready - now);
            }
        }
        last.insert(repo.to_string(), Instant::now());
    }
}

/// Cuts `body` to [`MAX_BODY_CHARS`] characters, ending with the notice.
pub fn fit_body(body: &str) -> String {
    if body.chars().count() <= MAX_BODY_CHARS {
        return body.to_string();
    }
    let keep = MAX_BODY_CHARS - TRUNCATION_NOTICE.chars().count();
    let mut out: String = body.chars().take(keep).collect();
    out.push_str(TRUNCATION_NOTICE);
    out
}
