use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};

use super::{ForgeBackend, ForgeError, Issue, IssueRef};

/// A recorded write.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mutation {
    Create { issue: IssueRef },
    Edit { issue: IssueRef },
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct State {
    repos: BTreeMap<String, BTreeMap<u64, Issue>>,
    mutations: Vec<Mutation>,
    #[serde(skip)]
    calls: usize,
    #[serde(skip)]
    faults: VecDeque<ForgeError>,
    #[serde(skip)]
    fault_after_write: Option<ForgeError>,
}

/// In-memory issue tracker. Clones share state. Bodies are stored exactly
/// as received.
#[derive(Debug, Clone, Default)]
pub struct FakeForge {
    state: Arc<Mutex<State>>,
}

impl FakeForge {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads a fake previously written by [`FakeForge::save`]; a missing file
    /// gives an empty forge.
    pub fn load(path: &Path) -> std::io::Result<Self> {
        match std::fs::read(path) {
            Ok(bytes) => {
                let state: State = serde_json::from_slice(&bytes).map_err(std::io::Error::other)?;
                Ok(Self {
                    state: Arc::new(Mutex::new(state)),
                })
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::new()),
            Err(e) => Err(e),
        }
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let json = serde_json::to_vec_pretty(&*self.lock()).map_err(std::io::Error::other)?;
        std::fs::write(path, json)
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().expect("fake forge lock")
    }

    pub fn seed_issue(&self, repo: &str, number: u64, title: &str, body: &str, open: bool) {
        self.lock().repos.entry(repo.to_string()).or_default().insert(
            number,
            Issue {
                number,
                title: title.into(),
                body: body.into(),
                open,
            },
        );
    }

    pub fn set_open(&self, issue: &IssueRef, open: bool) {
        if let Some(i) = self
            .lock()
            .repos
            .get_mut(&issue.repo)
            .and_then(|r| r.get_mut(&issue.number))
        {
            i.open = open;
        }
    }

    pub fn issue(&self, issue: &IssueRef) -> Option<Issue> {
        self.lock()
            .repos
            .get(&issue.repo)
            .and_then(|r| r.get(&issue.number))
            .cloned()
    }

    pub fn issues(&self, repo: &str) -> Vec<Issue> {
        self.lock()
            .repos
            .get(repo)
            .map(|r| r.values().cloned().collect())
            .unwrap_or_default()
    }

    pub fn open_issues(&self, repo: &str) -> Vec<Issue> {
        self.issues(repo).into_iter().filter(|i| i.open).collect()
    }

    /// Issues in `repo` (open or closed) whose body starts with `marker`.
    pub fn marked_issue_count(&self, repo: &str, marker: &str) -> usize {
        self.issues(repo).iter().filter(|i| i.body.starts_with(marker)).count()
    }

    pub fn repos(&self) -> Vec<String> {
        self.lock().repos.keys().cloned().collect()
    }

    pub fn mutations(&self) -> Vec<Mutation> {
        self.lock().mutations.clone()
    }

    pub fn write_count(&self) -> usize {
        self.lock().mutations.len()
    }

    /// Backend calls received, including failed ones.
    pub fn call_count(&self) -> usize {
        self.lock().calls
    }

    pub fn reset_counters(&self) {
        let mut s = self.lock();
        s.calls = 0;
        s.mutations.clear();
    }

    /// The next calls fail with these errors, in order.
    pub fn fail_next(&self, errors: Vec<ForgeError>) {
        self.lock().faults.extend(errors);
    }

    /// The next write is applied but reported as failed with `error`.
    pub fn fail_after_next_write(&self, error: ForgeError) {
        self.lock().fault_after_write = Some(error);
    }

    fn enter(&self) -> Result<MutexGuard<'_, State>, ForgeError> {
        let mut s = self.lock();
        s.calls += 1;
        match s.faults.pop_front() {
            Some(e) => Err(e),
            None => Ok(s),
        }
    }
}

fn not_found(issue: &IssueRef) -> ForgeError {
    ForgeError::NotFound(issue.to_string())
}

impl ForgeBackend for FakeForge {
    fn list_open_issues(&self, repo: &str) -> Result<Vec<Issue>, ForgeError> {
        let s = self.enter()?;
        Ok(s.repos
            .get(repo)
            .map(|r| r.values().filter(|i| i.open).cloned().collect())
            .unwrap_or_default())
    }

    fn get_issue(&self, issue: &IssueRef) -> Result<Issue, ForgeError> {
        let s = self.enter()?;
        s.repos
            .get(&issue.repo)
            .and_then(|r| r.get(&issue.number))
            .cloned()
            .ok_or_else(|| not_found(issue))
    }

    fn create_issue(&self, repo: &str, title: &str, body: &str) -> Result<IssueRef, ForgeError> {
        let mut s = self.enter()?;
        let issues = s.repos.entry(repo.to_string()).or_default();
        let number = issues.keys().next_back().map_or(1, |n| n + 1);
        issues.insert(
            number,
            Issue {
                number,
                title: title.into(),
                body: body.into(),
                open: true,
            },
        );
        let r = IssueRef {
            repo: repo.to_string(),
            number,
        };
        s.mutations.push(Mutation::Create { issue: r.clone() });
        match s.fault_after_write.take() {
            Some(e) => Err(e),
            None => Ok(r),
        }
    }

    fn edit_issue_body(&self, issue: &IssueRef, body: &str) -> Result<(), ForgeError> {
        let mut s = self.enter()?;
        let slot = s
            .repos
            .get_mut(&issue.repo)
            .and_then(|r| r.get_mut(&issue.number))
            .ok_or_else(|| not_found(issue))?;
        slot.body = body.to_string();
        s.mutations.push(Mutation::Edit { issue: issue.clone() });
        match s.fault_after_write.take() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}
