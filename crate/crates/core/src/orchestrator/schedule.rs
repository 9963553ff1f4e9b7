use std::collections::HashMap;
use std::sync::Mutex;

use chrono::{DateTime, Duration, NaiveTime, Utc};

use super::{NudgeReport, Nudger};
use crate::forge::ForgeBackend;
use crate::roster::RepoEntry;
use crate::rubric::UpdateMode;

pub const DEFAULT_POLL_INTERVAL: std::time::Duration = std::time::Duration::from_secs(300);

/// How often daily mode wakes up to look for due repositories.
const DAILY_TICK: std::time::Duration = std::time::Duration::from_secs(60);

#[derive(Debug, Clone, Copy)]
struct Attempt {
    at: DateTime<Utc>,
    failed: bool,
}

/// Decides which repositories are due and nudges them.
///
/// Daily mode: a repo is due once per UTC day, at `hour_utc`, or right away
/// when its last run predates the most recent scheduled instant (catch-up
/// after downtime). On-change mode: every repo is polled each
/// `poll_interval` and only assessed when its head moved. Failed repos are
/// retried after `poll_interval`.
pub struct Scheduler<'a, B> {
    nudger: Nudger<'a, B>,
    entries: &'a [RepoEntry],
    poll_interval: Duration,
    jobs: usize,
    attempts: Mutex<HashMap<String, Attempt>>,
}

impl<'a, B: ForgeBackend + Sync> Scheduler<'a, B> {
    pub fn new(
        nudger: Nudger<'a, B>,
        entries: &'a [RepoEntry],
        poll_interval: std::time::Duration,
        jobs: usize,
    ) -> Self {
        Self {
            nudger,
            entries,
            poll_interval: Duration::from_std(poll_interval).unwrap_or(Duration::seconds(300)),
            jobs,
            attempts: Mutex::new(HashMap::new()),
        }
    }

    /// Most recent scheduled daily instant at or before `now`.
    pub fn daily_slot(now: DateTime<Utc>, hour_utc: u8) -> DateTime<Utc> {
        let today = now
            .date_naive()
            .and_time(NaiveTime::from_hms_opt(u32::from(hour_utc), 0, 0).expect("hour in 0..=23"))
            .and_utc();
        if now >= today {
            today
        } else {
            today - Duration::days(1)
        }
    }

    fn due(&self, entry: &RepoEntry, now: DateTime<Utc>) -> bool {
        let attempt = self.attempts.lock().expect("attempts lock").get(&entry.id).copied();
        if let Some(a) = attempt {
            if now < a.at + self.poll_interval && (a.failed || self.nudger.rubric.update_mode == UpdateMode::OnChange) {
                return false;
            }
        }
        match self.nudger.rubric.update_mode {
            UpdateMode::OnChange => true,
            UpdateMode::Daily { hour_utc } => {
                let slot = Self::daily_slot(now, hour_utc);
                if attempt.is_some_and(|a| !a.failed && a.at >= slot) {
                    return false;
                }
                match self.nudger.store.load(&entry.id) {
                    Ok(Some(st)) => st.last_run_at < slot,
                    Ok(None) => true,
                    // let nudge_once surface the state problem
                    Err(_) => true,
                }
            }
        }
    }

    /// One scheduling pass at the current clock time. Returns the reports of
    /// the repos that were due.
    pub fn tick(&self) -> Vec<NudgeReport> {
        let now = self.nudger.clock.now();
        let due: Vec<RepoEntry> = self.entries.iter().filter(|e| self.due(e, now)).cloned().collect();
        if due.is_empty() {
            return Vec::new();
        }
        let reports = self.nudger.nudge_all(&due, self.jobs);
        let mut attempts = self.attempts.lock().expect("attempts lock");
        for r in &reports {
            attempts.insert(
                r.repo_id.clone(),
                Attempt {
                    at: now,
                    failed: r.outcome.is_failed(),
                },
            );
        }
        reports
    }

    /// Wait between passes: `poll_interval` in on-change mode, one minute in
    /// daily mode.
    pub fn interval(&self) -> std::time::Duration {
        match self.nudger.rubric.update_mode {
            UpdateMode::OnChange => self.poll_interval.to_std().unwrap_or(DEFAULT_POLL_INTERVAL),
            UpdateMode::Daily { .. } => DAILY_TICK,
        }
    }

    /// Runs `n` passes, sleeping on the nudger's clock between them.
    pub fn run_ticks(&self, n: usize) -> Vec<NudgeReport> {
        let mut all = Vec::new();
        for i in 0..n {
            all.extend(self.tick());
            if i + 1 < n {
                self.nudger.clock.sleep(self.interval());
            }
        }
        all
    }

    /// Service loop; never returns.
    pub fn run(&self) -> ! {
        loop {
            self.tick();
            self.nudger.clock.sleep(self.interval());
        }
    }
}
