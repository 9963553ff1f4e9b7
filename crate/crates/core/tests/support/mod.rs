//! Shared helpers for the integration tests: scripted git repositories and
//! an independent brute-force Mann-Whitney oracle.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

use chrono::{DateTime, TimeZone, Utc};
use classbot::rubric::{parse_rubric, Rubric};

pub mod scenarios;

pub const SAMPLE_RUBRIC: &str = include_str!("../fixtures/sample_rubric.json");
pub const GOLDEN_BODY: &str = include_str!("../fixtures/golden_issue_body.md");

pub fn sample_rubric() -> Rubric {
    parse_rubric(SAMPLE_RUBRIC.as_bytes()).expect("sample rubric parses")
}

pub fn utc(y: i32, mo: u32, d: u32, h: u32, mi: u32, s: u32) -> DateTime<Utc> {
    Utc.with_ymd_and_hms(y, mo, d, h, mi, s).unwrap()
}

/// A throwaway git repository whose commits get fixed identities and dates,
/// so hashes are reproducible.
pub struct FixtureRepo {
    dir: tempfile::TempDir,
}

impl FixtureRepo {
    pub fn new() -> Self {
        let dir = tempfile::Builder::new().prefix("classbot-fixture-").tempdir().unwrap();
        let r = Self { dir };
        r.git(&["init", "--quiet", "--initial-branch=main"], None);
        r
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn url(&self) -> String {
        self.dir.path().to_string_lossy().into_owned()
    }

    pub fn write(&self, rel: &str, contents: &str) -> &Self {
        let p = self.dir.path().join(rel);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        std::fs::write(p, contents).unwrap();
        self
    }

    pub fn remove(&self, rel: &str) -> &Self {
        std::fs::remove_file(self.dir.path().join(rel)).unwrap();
        self
    }

    /// Stages everything and commits as `author` ("Name <email>") at `when`.
    pub fn commit(&self, msg: &str, author: &str, when: DateTime<Utc>) -> String {
        self.git(&["add", "--all"], None);
        let (name, email) = author
            .split_once(" <")
            .map(|(n, e)| (n, e.trim_end_matches('>')))
            .expect("author is 'Name <email>'");
        let date = format!("{} +0000", when.timestamp());
        let env = [
            ("GIT_AUTHOR_NAME", name),
            ("GIT_AUTHOR_EMAIL", email),
            ("GIT_AUTHOR_DATE", date.as_str()),
            ("GIT_COMMITTER_NAME", name),
            ("GIT_COMMITTER_EMAIL", email),
            ("GIT_COMMITTER_DATE", date.as_str()),
        ];
        self.git(&["commit", "--quiet", "--allow-empty", "-m", msg], Some(&env));
        self.head()
    }

    pub fn head(&self) -> String {
        self.git(&["rev-parse", "HEAD"], None).trim().to_string()
    }

    pub fn git(&self, args: &[&str], env: Option<&[(&str, &str)]>) -> String {
        let mut cmd = Command::new("git");
        cmd.arg("-C")
            .arg(self.dir.path())
            .args(["-c", "commit.gpgsign=false", "-c", "core.hooksPath=/dev/null"])
            .args(args)
            .env("GIT_CONFIG_GLOBAL", "/dev/null")
            .env("GIT_CONFIG_NOSYSTEM", "1");
        for (k, v) in env.unwrap_or(&[]) {
            cmd.env(k, v);
        }
        let out = cmd.output().expect("git runs");
        assert!(
            out.status.success(),
            "git {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }
}

pub const STUDENT: &str = "Pat Student <pat@students.example.edu>";

/// Project tree matching the golden issue: README, .gitignore and a
/// Makefile whose build and test fail while lint stays under the threshold.
pub fn project_repo() -> FixtureRepo {
    let r = FixtureRepo::new();
    r.write("README.md", "# Project 6\n\nA calculator.\n")
        .write(".gitignore", "bin/\n")
        .write(
            "Makefile",
            "build:\n\t@echo 'src/Main.java:3: error: missing semicolon'; exit 1\n\
             lint:\n\t@printf '[WARN] line too long\\n[WARN] unused import\\n[INFO] done\\n'\n\
             test:\n\t@echo 'no tests found'; exit 1\n",
        );
    r.commit("initial import", STUDENT, utc(2020, 3, 2, 14, 0, 0));
    r
}

/// Golden body with the commit abbreviation replaced by `head`'s.
pub fn golden_for(head: &str) -> String {
    GOLDEN_BODY.replace("(commit 0123456)", &format!("(commit {})", &head[..7]))
}

/// Number of pairs (x in a, y in b) with x > y, ties counting a half.
/// Returned doubled so it stays an integer.
fn pair_count_doubled(a: &[f64], b: &[f64]) -> u64 {
    let mut u2 = 0;
    for x in a {
        for y in b {
            if x > y {
                u2 += 2;
            } else if x == y {
                u2 += 1;
            }
        }
    }
    u2
}

/// min(U_a, U_b) straight from the definition, by pair counting.
pub fn oracle_u(a: &[f64], b: &[f64]) -> f64 {
    let u2 = pair_count_doubled(a, b);
    let total2 = 2 * (a.len() * b.len()) as u64;
    u2.min(total2 - u2) as f64 / 2.0
}

/// Two-sided exact p: the share of all ways to split the pooled values into
/// groups of the original sizes whose min-U is at most the observed one.
/// Walks every bitmask of the pooled indices.
pub fn oracle_exact_p(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let n = pooled.len();
    assert!(n <= 24, "oracle is exponential");
    let total2 = 2 * (a.len() * b.len()) as u64;
    let observed = {
        let u2 = pair_count_doubled(a, b);
        u2.min(total2 - u2)
    };
    let (mut hits, mut all) = (0u64, 0u64);
    let mut ga = Vec::with_capacity(a.len());
    let mut gb = Vec::with_capacity(b.len());
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != a.len() {
            continue;
        }
        ga.clear();
        gb.clear();
        for (i, v) in pooled.iter().enumerate() {
            if mask & (1 << i) != 0 {
                ga.push(*v);
            } else {
                gb.push(*v);
            }
        }
        let u2 = pair_count_doubled(&ga, &gb);
        all += 1;
        if u2.min(total2 - u2) <= observed {
            hits += 1;
        }
    }
    hits as f64 / all as f64
}

pub fn workdir(tmp: &tempfile::TempDir, name: &str) -> PathBuf {
    tmp.path().join(name)
}
