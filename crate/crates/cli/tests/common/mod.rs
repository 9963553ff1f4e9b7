#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crate::support::{self, FixtureRepo};

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_classbot"));
    c.env_remove("CLASSBOT_TOKEN")
        .env_remove("CLASSBOT_FORGE_URL")
        .env_remove("CLASSBOT_STATE_DIR")
        .env_remove("CLASSBOT_LOG");
    c
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("classbot runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A roster over `repos` (ids stu01, stu02, ...) with the sample rubric
/// copied next to it.
pub struct Workspace {
    pub dir: tempfile::TempDir,
    pub repos: Vec<FixtureRepo>,
}

impl Workspace {
    pub fn new(repos: Vec<FixtureRepo>) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("rubric.json"), support::SAMPLE_RUBRIC).unwrap();
        let entries: Vec<serde_json::Value> = repos
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let id = format!("stu{:02}", i + 1);
                serde_json::json!({"id": id, "url": r.url(), "forge_repo": format!("course/{id}")})
            })
            .collect();
        let roster = serde_json::json!({"rubric": "rubric.json", "repos": entries});
        std::fs::write(dir.path().join("p6.json"), roster.to_string()).unwrap();
        Self { dir, repos }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    pub fn roster(&self) -> String {
        s(&self.path("p6.json"))
    }

    /// `nudge` with a fake forge file and state dir inside the workspace.
    pub fn nudge(&self, forge: &str, state: &str, extra: &[&str]) -> Output {
        let forge = s(&self.path(forge));
        let state = s(&self.path(state));
        let mut args = vec![
            "nudge",
            "--roster",
            &*self.roster(),
            "--fake-forge",
            &forge,
            "--state-dir",
            &state,
            "--now",
            "2020-03-10T06:00:00Z",
        ]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
        args.extend(extra.iter().map(|a| a.to_string()));
        bin().args(&args).output().expect("classbot runs")
    }
}

pub fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}
