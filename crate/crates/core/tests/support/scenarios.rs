//! End-to-end scenarios shared by the integration tests and the acceptance
//! runner. Each returns a short summary on success and a reason on failure.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use chrono::Duration as Span;
use classbot::analyzer::Analyzer;
use classbot::forge::{FakeForge, ForgeClient, ForgeConfig, ForgeError};
use classbot::git;
use classbot::miner::{mine_repo, MiningWindow};
use classbot::orchestrator::{FileStateStore, ManualClock, Nudger, Outcome, RepoState, StateError, StateStore};
use classbot::renderer::MARKER;
use classbot::roster::RepoEntry;
use classbot::rubric::{parse_rubric, Rubric};
use classbot::stats::{format_table, mann_whitney, GroupSummary, Method, MetricComparison, Sample, TableFormat};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use regex::Regex;

use super::*;

pub type Verdict = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !($cond) {
            return Err(format!($($fmt)+));
        }
    };
}

pub fn fast_forge_config() -> ForgeConfig {
    ForgeConfig {
        min_request_interval: Duration::ZERO,
        backoff_base: Duration::from_millis(1),
        backoff_max: Duration::from_millis(5),
        ..ForgeConfig::default()
    }
}

/// Fake forge, state file, clock and rubric for driving nudge cycles.
pub struct Harness {
    pub fake: FakeForge,
    pub client: ForgeClient<FakeForge>,
    pub store: FileStateStore,
    pub analyzer: Analyzer,
    pub clock: ManualClock,
    pub rubric: Rubric,
    pub tmp: tempfile::TempDir,
}

impl Harness {
    pub fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let fake = FakeForge::new();
        Self {
            client: ForgeClient::new(fake.clone(), fast_forge_config()),
            fake,
            store: FileStateStore::for_roster(tmp.path(), "p6"),
            analyzer: Analyzer::new(),
            clock: ManualClock::new(utc(2020, 3, 10, 6, 0, 0)),
            rubric: sample_rubric(),
            tmp,
        }
    }

    pub fn nudger<'a>(&'a self, store: &'a dyn StateStore, dry_run: bool) -> Nudger<'a, FakeForge> {
        Nudger {
            rubric: &self.rubric,
            store,
            forge: &self.client,
            analyzer: &self.analyzer,
            clock: &self.clock,
            work_root: self.tmp.path().join("work"),
            dry_run,
        }
    }
}

pub fn entry(id: &str, repo: &FixtureRepo) -> RepoEntry {
    RepoEntry {
        id: id.into(),
        url: repo.url(),
        forge_repo: Some(format!("course/{id}")),
    }
}

/// Exact p against pair-counting enumeration on small samples with heavy ties.
pub fn mann_whitney_oracle(cases: usize, seed: u64) -> Verdict {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(seed);
    let mut worst = 0f64;
    for case in 0..cases {
        let total = rng.gen_range(2..=10);
        let n_a = rng.gen_range(1..total);
        // few distinct values, so ties are common
        let levels = rng.gen_range(1..=5);
        let mut draw = |n: usize| {
            (0..n)
                .map(|_| f64::from(rng.gen_range(0..levels)) * 1.5)
                .collect::<Vec<_>>()
        };
        let a = draw(n_a);
        let b = draw(total - n_a);
        let r = mann_whitney(
            "x",
            &Sample::new("a", a.clone()).unwrap(),
            &Sample::new("b", b.clone()).unwrap(),
            0.05,
        )
        .map_err(|e| e.to_string())?;
        ensure!(r.method == Method::Exact, "case {case}: expected exact method");
        let want = oracle_exact_p(&a, &b);
        let diff = (r.p_value - want).abs();
        worst = worst.max(diff);
        ensure!(
            diff <= 1e-12,
            "case {case}: a={a:?} b={b:?} p={} oracle={want}",
            r.p_value
        );
        ensure!(
            r.u_statistic == oracle_u(&a, &b),
            "case {case}: U {} vs oracle {}",
            r.u_statistic,
            oracle_u(&a, &b)
        );
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(format!("{cases} cases, max |dp| = {worst:e}, {:.2?}", elapsed))
}

/// U_a + U_b = n_a n_b, and p unchanged by a strictly increasing transform
/// or by swapping the samples.
pub fn rank_identities(cases: usize, seed: u64) -> Verdict {
    let mut rng = StdRng::seed_from_u64(seed);
    let transforms: [fn(f64) -> f64; 3] = [|x| x.exp(), |x| 3.0 * x - 7.0, |x| x * x * x];
    for case in 0..cases {
        // mix of exact and normal-approximation sizes
        let n_a = rng.gen_range(1..=25);
        let n_b = rng.gen_range(1..=25);
        let levels = rng.gen_range(2..=12);
        let mut draw = |n: usize| {
            (0..n)
                .map(|_| f64::from(rng.gen_range(0..levels)) / 4.0 - 1.0)
                .collect::<Vec<_>>()
        };
        let a = draw(n_a);
        let b = draw(n_b);
        let sa = Sample::new("a", a.clone()).unwrap();
        let sb = Sample::new("b", b.clone()).unwrap();
        let r = mann_whitney("x", &sa, &sb, 0.05).map_err(|e| e.to_string())?;
        ensure!(
            r.u_a + r.u_b == (n_a * n_b) as f64,
            "case {case}: U_a {} + U_b {} != {}",
            r.u_a,
            r.u_b,
            n_a * n_b
        );
        ensure!(
            (0.0..=(n_a * n_b) as f64).contains(&r.u_statistic) && (0.0..=1.0).contains(&r.p_value),
            "case {case}: out of range"
        );
        let f = transforms[case % transforms.len()];
        let ta = Sample::new("a", a.iter().map(|&x| f(x)).collect()).unwrap();
        let tb = Sample::new("b", b.iter().map(|&x| f(x)).collect()).unwrap();
        let t = mann_whitney("x", &ta, &tb, 0.05).map_err(|e| e.to_string())?;
        ensure!(
            t.p_value == r.p_value,
            "case {case}: transform changed p {} -> {}",
            r.p_value,
            t.p_value
        );
        let s = mann_whitney("x", &sb, &sa, 0.05).map_err(|e| e.to_string())?;
        ensure!(
            s.p_value == r.p_value,
            "case {case}: swap changed p {} -> {}",
            r.p_value,
            s.p_value
        );
        ensure!(r.significant == (r.p_value < r.alpha), "case {case}: significance flag");
    }
    Ok(format!("{cases} cases"))
}

fn published(metric: &str, no: (f64, f64), yes: (f64, f64), p: f64) -> MetricComparison {
    let g = |label: &str, (mean, median): (f64, f64)| GroupSummary {
        label: label.into(),
        n: None,
        mean,
        median,
    };
    MetricComparison::from_summaries(metric, g("No", no), g("Yes", yes), p, 0.05)
}

/// Published summary rows rendered through the table formatter.
pub fn published_tables() -> (String, String) {
    let t1 = [
        published("Grade", (74.29, 87.66), (76.89, 95.0), 0.0097),
        published("Deductions", (-20.71, -5.0), (-9.43, 0.0), 0.0672),
    ];
    let t2 = [
        published("Commits", (9.84, 7.0), (12.64, 9.0), 0.1646),
        published("Code Churn", (205.03, 4.0), (1101.57, 11.0), 0.0348),
        // published only as "< 0.0001"
        published("First Commit (days)", (8.32, 7.41), (1.99, 5.94), 0.00003),
        published("Last Commit (hours)", (-21.72, -1.60), (-9.67, -2.47), 0.7909),
    ];
    (
        format_table(&t1, TableFormat::Text),
        format_table(&t2, TableFormat::Text),
    )
}

pub fn table_golden() -> Verdict {
    let (t1, t2) = published_tables();
    let g1 = include_str!("../fixtures/table1_golden.txt");
    let g2 = include_str!("../fixtures/table2_golden.txt");
    ensure!(t1 == g1, "table I differs:\n{t1}\nexpected:\n{g1}");
    ensure!(t2 == g2, "table II differs:\n{t2}\nexpected:\n{g2}");
    Ok("tables I and II match byte for byte".into())
}

pub const EXCLUDED: &str = "Course Staff <staff@course.example.edu>";

/// Start and deadline for the miner fixture.
pub fn miner_window() -> MiningWindow {
    MiningWindow::new(utc(2020, 3, 1, 0, 0, 0), utc(2020, 3, 15, 23, 59, 59))
        .excluding(vec![Regex::new("staff@course").unwrap()])
}

/// Four commits; the staff one is excluded.
///
/// | # | author  | author time          | +  | -  |
/// |---|---------|----------------------|----|----|
/// | 1 | staff   | 2020-03-01 09:00:00  | 12 | 0  |
/// | 2 | student | 2020-03-03 12:00:00  | 10 | 0  |
/// | 3 | student | 2020-03-08 17:30:00  | 3  | 2  |
/// | 4 | student | 2020-03-15 22:23:59  | 5  | 1  |
pub fn miner_fixture_repo() -> FixtureRepo {
    let r = FixtureRepo::new();
    let lines = |n: usize, tag: &str| (1..=n).map(|i| format!("{tag} {i}\n")).collect::<String>();
    r.write("starter/Skeleton.java", &lines(12, "skeleton"));
    r.commit("starter code", EXCLUDED, utc(2020, 3, 1, 9, 0, 0));
    r.write("src/Calc.java", &lines(10, "line"));
    r.commit("calculator", STUDENT, utc(2020, 3, 3, 12, 0, 0));
    // replace lines 4 and 7, add one
    let mut v: Vec<String> = lines(10, "line").lines().map(String::from).collect();
    v[3] = "changed 4".into();
    v[6] = "changed 7".into();
    v.push("line 11".into());
    r.write("src/Calc.java", &(v.join("\n") + "\n"));
    r.commit("fix", STUDENT, utc(2020, 3, 8, 17, 30, 0));
    // 1.6 h before the deadline: 23:59:59 - 1:36:00
    r.write("README.md", "# Calc\n\nusage\n\nmore\n");
    r.write("starter/Skeleton.java", &lines(11, "skeleton"));
    r.commit("docs", STUDENT, utc(2020, 3, 15, 22, 23, 59));
    r
}

pub fn miner_correctness() -> Verdict {
    let repo = miner_fixture_repo();
    let window = miner_window();
    let (m, counted) = mine_repo(repo.path(), "stu01", "No", "HEAD", &window).map_err(|e| e.to_string())?;
    ensure!(m.commit_count == 3, "commit_count {} != 3", m.commit_count);
    // commit 2: +10, commit 3: +3 -2, commit 4: +5 -1
    let by_hand = 10 + (3 + 2) + (5 + 1);
    ensure!(m.code_churn == by_hand, "churn {} != {by_hand}", m.code_churn);
    let counted_churn: u64 = counted.iter().map(|c| c.lines_added + c.lines_deleted).sum();
    ensure!(
        counted_churn == by_hand,
        "per-commit churn {counted_churn} != {by_hand}"
    );
    // 2 days 12 h after start
    let days = m.first_commit_days.ok_or("no first commit")?;
    ensure!((days - 2.5).abs() < 1e-9, "first_commit_days {days} != 2.5");
    let hours = m.last_commit_hours.ok_or("no last commit")?;
    ensure!((hours - -1.6).abs() < 1e-9, "last_commit_hours {hours} != -1.6");
    ensure!(format!("{hours:.2}") == "-1.60", "rendered {hours:.2}");
    Ok(format!(
        "commits={} churn={} first={days} d last={hours:.2} h",
        m.commit_count, m.code_churn
    ))
}

/// Lines that differ between two bodies, ignoring the timestamp line.
pub fn changed_lines(old: &str, new: &str) -> Vec<(String, String)> {
    let (o, n): (Vec<&str>, Vec<&str>) = (old.lines().collect(), new.lines().collect());
    if o.len() != n.len() {
        return vec![(old.into(), new.into())];
    }
    o.iter()
        .zip(&n)
        .enumerate()
        .filter(|(i, (a, b))| *i != 2 && a != b)
        .map(|(_, (a, b))| (a.to_string(), b.to_string()))
        .collect()
}

pub fn nudge_end_to_end() -> Verdict {
    let started = Instant::now();
    let repo = project_repo();
    let h = Harness::new();
    let e = entry("stu01", &repo);
    let n = h.nudger(&h.store, false);

    let first = n.nudge_once(&e);
    let Outcome::Created(issue) = first.outcome.clone() else {
        return Err(format!("first cycle: {}", first.outcome));
    };
    let body = h.fake.issue(&issue).ok_or("created issue missing")?.body;
    let golden = golden_for(&repo.head());
    ensure!(body == golden, "created body differs from golden:\n{body}");

    let writes = h.fake.write_count();
    h.clock.advance(Span::days(1));
    let second = n.nudge_once(&e);
    ensure!(second.outcome == Outcome::Unchanged, "second cycle: {}", second.outcome);
    ensure!(h.fake.write_count() == writes, "unchanged cycle wrote to the forge");

    repo.write("docs/design.md", "# Design\n\nclasses and interactions\n");
    repo.commit("design doc", STUDENT, utc(2020, 3, 10, 20, 0, 0));
    h.clock.advance(Span::days(1));
    let third = n.nudge_once(&e);
    ensure!(
        third.outcome == Outcome::Updated(issue.clone()),
        "third cycle: {}",
        third.outcome
    );
    ensure!(
        h.fake.write_count() == writes + 1,
        "update took {} writes",
        h.fake.write_count() - writes
    );
    let updated = h.fake.issue(&issue).unwrap().body;
    // The template also carries the timestamp line (ignored by changed_lines)
    // and the pass count, both of which must move with the flip.
    let diff = changed_lines(&body, &updated);
    ensure!(
        diff == [
            (
                "- :x: Design document committed".to_string(),
                "- :white_check_mark: Design document committed".to_string()
            ),
            (
                "Progress: 4/8 tasks complete.".to_string(),
                "Progress: 5/8 tasks complete.".to_string()
            )
        ],
        "unexpected diff {diff:?}"
    );
    let item_lines = diff.iter().filter(|(a, _)| a.starts_with("- :")).count();
    ensure!(
        h.fake.marked_issue_count("course/stu01", MARKER) == 1,
        "more than one marked issue"
    );
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!(
        "created -> unchanged (0 writes) -> updated ({item_lines} item line flipped), {elapsed:.2?}"
    ))
}

/// Store whose saves fail at random, as if the process died right after the
/// forge accepted a write.
pub struct CrashingStore<'a> {
    pub inner: &'a dyn StateStore,
    pub rng: Mutex<StdRng>,
    pub crash_rate: f64,
    pub crashes: Mutex<usize>,
}

impl StateStore for CrashingStore<'_> {
    fn load(&self, repo_id: &str) -> Result<Option<RepoState>, StateError> {
        self.inner.load(repo_id)
    }

    fn save(&self, state: &RepoState) -> Result<(), StateError> {
        if self.rng.lock().unwrap().gen_bool(self.crash_rate) {
            *self.crashes.lock().unwrap() += 1;
            return Err(StateError::Other("injected crash".into()));
        }
        self.inner.save(state)
    }
}

pub fn single_issue_invariant(cycles: usize, seed: u64) -> Verdict {
    let repo = project_repo();
    let h = Harness::new();
    h.clock.set(utc(2020, 3, 2, 15, 0, 0));
    let e = entry("stu01", &repo);
    let forge_repo = e.forge_repo().to_string();
    let store = CrashingStore {
        inner: &h.store,
        rng: Mutex::new(StdRng::seed_from_u64(seed)),
        crash_rate: 0.5,
        crashes: Mutex::new(0),
    };
    let mut rng = StdRng::seed_from_u64(seed ^ 0x5eed);
    let mut lost_replies = 0;
    let mut when = utc(2020, 3, 2, 14, 30, 0);
    for cycle in 0..cycles {
        if rng.gen_bool(0.3) {
            // toggle one item so the body changes
            if repo.path().join("docs/design.md").exists() {
                repo.remove("docs/design.md");
            } else {
                repo.write("docs/design.md", "# Design\n");
            }
            when += Span::minutes(30);
            repo.commit(&format!("edit {cycle}"), STUDENT, when);
        }
        if rng.gen_bool(0.2) {
            // the forge applies the write but the reply is lost
            h.fake
                .fail_after_next_write(ForgeError::Network("connection reset".into()));
            lost_replies += 1;
        }
        h.clock.advance(Span::minutes(30));
        // fresh nudger each cycle: nothing survives a crash but the store
        let report = h.nudger(&store, false).nudge_once(&e);
        let marked = h.fake.marked_issue_count(&forge_repo, MARKER);
        ensure!(
            marked <= 1,
            "cycle {cycle}: {marked} marked issues after {}",
            report.outcome
        );
    }
    let crashes = *store.crashes.lock().unwrap();
    ensure!(crashes > 0, "no crash was injected");
    let marked = h.fake.marked_issue_count(&forge_repo, MARKER);
    ensure!(marked == 1, "{marked} marked issues at the end");
    Ok(format!(
        "{cycles} cycles, {crashes} crashes before state write, {lost_replies} lost replies, 1 marked issue"
    ))
}

/// Rubric whose only check tries to rewrite history and the tree.
pub fn malicious_rubric() -> Rubric {
    let script = "git config user.email x@y; git config user.name x; \
        echo pwned > README.md; git add -A; git commit -qm pwned; \
        git tag evil; git branch -f main HEAD; git update-ref refs/heads/main HEAD; \
        git -C \"$OLDPWD\" tag evil2; rm -rf .git; mkdir -p .git/refs/heads; \
        echo 0000000000000000000000000000000000000000 > .git/refs/heads/main; exit 0";
    let doc = serde_json::json!({
        "assignment": {"name": "Safety", "start": "2020-03-01T00:00:00Z", "deadline": "2020-03-15T23:59:59Z"},
        "phases": [{"id": "Im", "title": "Implementation", "items": [
            {"id": "evil", "description": "Harmless looking check", "kind": "command_succeeds",
             "command": ["sh", "-c", script], "timeout": 30},
            {"id": "readme", "description": "README present", "kind": "file_exists", "path": "README.md"}
        ]}]
    });
    parse_rubric(doc.to_string().as_bytes()).unwrap()
}

pub fn analyzer_ref_safety() -> Verdict {
    let repo = project_repo();
    repo.git(&["tag", "v1"], None);
    repo.git(&["branch", "feature"], None);
    let rubric = malicious_rubric();
    let before = git::ref_snapshot(repo.path()).map_err(|e| e.to_string())?;
    let readme = std::fs::read(repo.path().join("README.md")).unwrap();
    let report = Analyzer::new()
        .assess(repo.path(), "stu01", &rubric, &repo.head())
        .map_err(|e| e.to_string())?;
    let after = git::ref_snapshot(repo.path()).map_err(|e| e.to_string())?;
    ensure!(before == after, "refs changed:\nbefore {before:?}\nafter {after:?}");
    ensure!(
        std::fs::read(repo.path().join("README.md")).unwrap() == readme,
        "working tree file was modified"
    );
    let status = repo.git(&["status", "--porcelain"], None);
    ensure!(status.is_empty(), "working tree dirty: {status}");
    Ok(format!(
        "{} refs unchanged after {} checks",
        before.len(),
        report.results.len()
    ))
}

/// Library-level dry run: every repo is assessed and rendered, nothing is
/// written anywhere.
pub fn dry_run_library(repos: usize) -> Verdict {
    let fixtures: Vec<FixtureRepo> = (0..repos).map(|_| project_repo()).collect();
    let entries: Vec<RepoEntry> = fixtures
        .iter()
        .enumerate()
        .map(|(i, r)| entry(&format!("stu{:02}", i + 1), r))
        .collect();
    let mut h = Harness::new();
    h.client = ForgeClient::new(h.fake.clone(), fast_forge_config()).dry_run(true);
    let reports = h.nudger(&h.store, true).nudge_all(&entries, 2);
    let bodies = reports.iter().filter(|r| r.issue.is_some()).count();
    ensure!(bodies == repos, "{bodies} bodies rendered for {repos} repos");
    ensure!(h.fake.write_count() == 0, "{} forge mutations", h.fake.write_count());
    ensure!(!h.store.path().exists(), "state file written");
    Ok(format!("{bodies} bodies, 0 mutations, no state file"))
}

pub fn path_str(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}
