//! Thin wrapper over the `git` binary.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

#[derive(Debug, thiserror::Error)]
pub enum GitError {
    #[error("cannot run git: {0}")]
    Spawn(#[from] std::io::Error),
    #[error("git {args} failed ({status}): {stderr}")]
    Failed {
        args: String,
        status: String,
        stderr: String,
    },
}

/// Runs git in `dir` and returns stdout. User and system config that changes
/// output shape is neutralized.
pub fn run(dir: &Path, args: &[&str]) -> Result<String, GitError> {
    let out = Command::new("git")
        .arg("-C")
        .arg(dir)
        .args([
            "-c",
            "log.showSignature=false",
            "-c",
            "core.quotepath=off",
            "-c",
            "color.ui=false",
        ])
        .args(args)
        .env("GIT_TERMINAL_PROMPT", "0")
        .env("LC_ALL", "C")
        .output()?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(GitError::Failed {
            args: args.join(" "),
            status: out.status.to_string(),
            stderr: String::from_utf8_lossy(&out.stderr).trim().to_string(),
        })
    }
}

/// Every ref (plus HEAD) mapped to the object it points at.
pub fn ref_snapshot(repo: &Path) -> Result<BTreeMap<String, String>, GitError> {
    let mut refs: BTreeMap<String, String> = run(repo, &["for-each-ref", "--format=%(refname) %(objectname)"])?
        .lines()
        .filter_map(|l| l.split_once(' '))
        .map(|(name, oid)| (name.to_string(), oid.to_string()))
        .collect();
    if let Ok(head) = run(repo, &["rev-parse", "--verify", "--quiet", "HEAD"]) {
        refs.insert("HEAD".into(), head.trim().to_string());
    }
    if let Ok(sym) = run(repo, &["symbolic-ref", "--quiet", "HEAD"]) {
        refs.insert("HEAD@symbolic".into(), sym.trim().to_string());
    }
    Ok(refs)
}

/// Resolves `rev` to a full commit id, or `None` if it does not name a commit.
pub fn resolve_commit(repo: &Path, rev: &str) -> Result<Option<String>, GitError> {
    let spec = format!("{rev}^{{commit}}");
    match run(repo, &["rev-parse", "--verify", "--quiet", &spec]) {
        Ok(s) => Ok(Some(s.trim().to_string())),
        Err(GitError::Failed { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}
