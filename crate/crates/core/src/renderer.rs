//! Issue body rendering for assessment reports.

use sha2::{Digest, Sha256};

use crate::analyzer::{AssessmentReport, CheckStatus};
use crate::rubric::Rubric;

/// First line of every bot-owned issue body.
pub const MARKER: &str = "<!-- class-bot:v1 -->";

const PASS: &str = ":white_check_mark:";
const FAIL: &str = ":x:";

/// Index of the `_Last updated: ..._` line, excluded from the content hash.
const TIMESTAMP_LINE: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NudgeIssue {
    pub title: String,
    pub body: String,
    pub marker: &'static str,
    /// Hex SHA-256 of the body with the timestamp line removed.
    pub content_hash: String,
}

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("report has {got} results but rubric has {expected} items")]
    CountMismatch { expected: usize, got: usize },
    #[error("report result #{index} is for {got:?}, rubric expects {expected:?}")]
    ItemMismatch {
        index: usize,
        expected: String,
        got: String,
    },
}

pub fn issue_title(rubric: &Rubric) -> String {
    format!("[class-bot] {} progress", rubric.assignment_name)
}

pub fn render(report: &AssessmentReport, rubric: &Rubric) -> Result<NudgeIssue, RenderError> {
    let expected = rubric.item_count();
    if report.results.len() != expected {
        return Err(RenderError::CountMismatch {
            expected,
            got: report.results.len(),
        });
    }
    for (index, (res, spec)) in report.results.iter().zip(rubric.items()).enumerate() {
        if res.item_id != spec.id {
            return Err(RenderError::ItemMismatch {
                index,
                expected: spec.id.clone(),
                got: res.item_id.clone(),
            });
        }
    }

    let short_head: String = report.head_commit.chars().take(7).collect();
    let mut body = String::new();
    body.push_str(MARKER);
    body.push('\n');
    body.push_str(&format!(
        "# {} — Development Process Progress\n",
        rubric.assignment_name
    ));
    body.push_str(&format!(
        "_Last updated: {} (commit {})_\n",
        report.generated_at.format("%Y-%m-%dT%H:%M:%SZ"),
        short_head
    ));

    let mut results = report.results.iter();
    for phase in &rubric.phases {
        body.push('\n');
        body.push_str(&format!("## {} ({})\n", phase.title, phase.id));
        for item in &phase.items {
            let res = results.next().expect("lengths checked above");
            let mark = match res.status {
                CheckStatus::Pass => PASS,
                CheckStatus::Fail => FAIL,
            };
            body.push_str(&format!("- {mark} {}\n", item.description));
        }
    }
    body.push('\n');
    body.push_str(&format!("Progress: {}/{} tasks complete.\n", report.passed(), expected));

    Ok(NudgeIssue {
        title: issue_title(rubric),
        content_hash: content_hash(&body),
        body,
        marker: MARKER,
    })
}

/// Hash of `body` ignoring its timestamp line.
pub fn content_hash(body: &str) -> String {
    let mut h = Sha256::new();
    for (i, line) in body.split_inclusive('\n').enumerate() {
        if i != TIMESTAMP_LINE {
            h.update(line.as_bytes());
        }
    }
    hex::encode(h.finalize())
}
