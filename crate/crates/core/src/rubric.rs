//! Declarative assignment rubric: phases of the development process and the
//! checkable items listed under each one.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};

/// Timeout applied to command checks that do not declare one.
pub const DEFAULT_TIMEOUT_SECS: u64 = 120;

/// Scheduled hour used when the document omits the `update` block.
pub const DEFAULT_UPDATE_HOUR_UTC: u8 = 6;

/// Development process phase, in process order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PhaseId {
    /// Requirements
    Rq,
    /// Design
    Ds,
    /// Implementation
    Im,
    /// Unit tests
    Ut,
    /// System / functional tests
    St,
    /// Deployment
    Dp,
}

impl PhaseId {
    pub const ALL: [PhaseId; 6] = [
        PhaseId::Rq,
        PhaseId::Ds,
        PhaseId::Im,
        PhaseId::Ut,
        PhaseId::St,
        PhaseId::Dp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PhaseId::Rq => "Rq",
            PhaseId::Ds => "Ds",
            PhaseId::Im => "Im",
            PhaseId::Ut => "Ut",
            PhaseId::St => "St",
            PhaseId::Dp => "Dp",
        }
    }
}

impl fmt::Display for PhaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PhaseId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PhaseId::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown phase id {s:?} (expected one of Rq, Ds, Im, Ut, St, Dp)"))
    }
}

/// What a rubric item checks and how.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CheckKind {
    FileExists {
        path: String,
    },
    FileAbsent {
        path: String,
    },
    CommandSucceeds {
        command: Vec<String>,
        timeout_secs: u64,
    },
    /// Passes when at most `threshold` lines of the command's merged output
    /// match `pattern`. The command's exit status is not consulted.
    MaxPatternCount {
        command: Vec<String>,
        timeout_secs: u64,
        pattern: String,
        threshold: u64,
    },
}

impl CheckKind {
    pub fn name(&self) -> &'static str {
        match self {
            CheckKind::FileExists { .. } => "file_exists",
            CheckKind::FileAbsent { .. } => "file_absent",
            CheckKind::CommandSucceeds { .. } => "command_succeeds",
            CheckKind::MaxPatternCount { .. } => "max_pattern_count",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckSpec {
    pub id: String,
    pub description: String,
    pub kind: CheckKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Phase {
    pub id: PhaseId,
    pub title: String,
    pub items: Vec<CheckSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateMode {
    /// Once per UTC day at the given hour.
    Daily { hour_utc: u8 },
    /// Whenever the repository head moves.
    OnChange,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rubric {
    pub assignment_name: String,
    pub start: DateTime<Utc>,
    pub deadline: DateTime<Utc>,
    pub phases: Vec<Phase>,
    pub update_mode: UpdateMode,
}

impl Rubric {
    /// All items in document order.
    pub fn items(&self) -> impl Iterator<Item = &CheckSpec> {
        self.phases.iter().flat_map(|p| p.items.iter())
    }

    pub fn item_count(&self) -> usize {
        self.phases.iter().map(|p| p.items.len()).sum()
    }

    /// Serializes to the JSON document format accepted by [`parse_rubric`].
    pub fn to_json(&self) -> String {
        let doc = RubricDoc::from(self);
        serde_json::to_string_pretty(&doc).expect("rubric document serializes")
    }
}

/// One broken rule, located by a JSON-style field path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.rule)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RubricError {
    #[error("malformed rubric document: {0}")]
    Malformed(String),
    #[error("rubric schema violation at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("invalid rubric: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

// Wire format. Kind-specific fields are all optional here; presence rules
// are enforced while lowering into `CheckKind`.

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RubricDoc {
    assignment: AssignmentDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    update: Option<UpdateDoc>,
    phases: Vec<PhaseDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AssignmentDoc {
    name: String,
    start: DateTime<Utc>,
    deadline: DateTime<Utc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UpdateDoc {
    mode: ModeDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hour_utc: Option<i64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ModeDoc {
    Daily,
    OnChange,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PhaseDoc {
    id: String,
    title: String,
    items: Vec<ItemDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ItemDoc {
    id: String,
    description: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    command: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    timeout: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pattern: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    threshold: Option<i64>,
}

impl From<&Rubric> for RubricDoc {
    fn from(r: &Rubric) -> Self {
        let update = match r.update_mode {
            UpdateMode::Daily { hour_utc } => UpdateDoc {
                mode: ModeDoc::Daily,
                hour_utc: Some(i64::from(hour_utc)),
            },
            UpdateMode::OnChange => UpdateDoc {
                mode: ModeDoc::OnChange,
                hour_utc: None,
            },
        };
        RubricDoc {
            assignment: AssignmentDoc {
                name: r.assignment_name.clone(),
                start: r.start,
                deadline: r.deadline,
            },
            update: Some(update),
            phases: r
                .phases
                .iter()
                .map(|p| PhaseDoc {
                    id: p.id.to_string(),
                    title: p.title.clone(),
                    items: p.items.iter().map(ItemDoc::from).collect(),
                })
                .collect(),
        }
    }
}

impl From<&CheckSpec> for ItemDoc {
    fn from(c: &CheckSpec) -> Self {
        let mut doc = ItemDoc {
            id: c.id.clone(),
            description: c.description.clone(),
            kind: c.kind.name().to_string(),
            path: None,
            command: None,
            timeout: None,
            pattern: None,
            threshold: None,
        };
        match &c.kind {
            CheckKind::FileExists { path } | CheckKind::FileAbsent { path } => {
                doc.path = Some(path.clone());
            }
            CheckKind::CommandSucceeds { command, timeout_secs } => {
                doc.command = Some(command.clone());
                doc.timeout = Some(*timeout_secs as i64);
            }
            CheckKind::MaxPatternCount {
                command,
                timeout_secs,
                pattern,
                threshold,
            } => {
                doc.command = Some(command.clone());
                doc.timeout = Some(*timeout_secs as i64);
                doc.pattern = Some(pattern.clone());
                doc.threshold = Some(*threshold as i64);
            }
        }
        doc
    }
}

/// Parses and validates a rubric document. Never panics on arbitrary input.
pub fn parse_rubric(source: &[u8]) -> Result<Rubric, RubricError> {
    let text = std::str::from_utf8(source).map_err(|e| RubricError::Malformed(format!("not valid UTF-8: {e}")))?;
    // Syntax errors first, so they are reported as malformed rather than
    // as a schema problem.
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| RubricError::Malformed(e.to_string()))?;
    let doc: RubricDoc = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        RubricError::Schema {
            path: if path == "." { "$".into() } else { path },
            message: e.into_inner().to_string(),
        }
    })?;
    let rubric = lower(doc)?;
    let violations = validate_rubric(&rubric);
    if violations.is_empty() {
        Ok(rubric)
    } else {
        Err(RubricError::Invalid(violations))
    }
}

fn schema(path: String, message: impl Into<String>) -> RubricError {
    RubricError::Schema {
        path,
        message: message.into(),
    }
}

fn lower(doc: RubricDoc) -> Result<Rubric, RubricError> {
    let update_mode = match doc.update {
        None => UpdateMode::Daily {
            hour_utc: DEFAULT_UPDATE_HOUR_UTC,
        },
        Some(UpdateDoc {
            mode: ModeDoc::Daily,
            hour_utc,
        }) => {
            let hour = hour_utc.ok_or_else(|| schema("update.hour_utc".into(), "required when mode is \"daily\""))?;
            let hour = u8::try_from(hour)
                .ok()
                .filter(|h| *h <= 23)
                .ok_or_else(|| schema("update.hour_utc".into(), "must be an integer in 0..=23"))?;
            UpdateMode::Daily { hour_utc: hour }
        }
        Some(UpdateDoc {
            mode: ModeDoc::OnChange,
            hour_utc,
        }) => {
            if hour_utc.is_some() {
                return Err(schema("update.hour_utc".into(), "only allowed when mode is \"daily\""));
            }
            UpdateMode::OnChange
        }
    };

    let mut phases = Vec::with_capacity(doc.phases.len());
    for (pi, p) in doc.phases.into_iter().enumerate() {
        let id =
            p.id.parse::<PhaseId>()
                .map_err(|m| schema(format!("phases[{pi}].id"), m))?;
        let mut items = Vec::with_capacity(p.items.len());
        for (ii, item) in p.items.into_iter().enumerate() {
            items.push(lower_item(item, &format!("phases[{pi}].items[{ii}]"))?);
        }
        phases.push(Phase {
            id,
            title: p.title,
            items,
        });
    }

    Ok(Rubric {
        assignment_name: doc.assignment.name,
        start: doc.assignment.start,
        deadline: doc.assignment.deadline,
        phases,
        update_mode,
    })
}

fn lower_item(item: ItemDoc, at: &str) -> Result<CheckSpec, RubricError> {
    let field = |name: &str| format!("{at}.{name}");
    let forbid = |present: bool, name: &str, kind: &str| {
        if present {
            Err(schema(field(name), format!("not allowed for kind \"{kind}\"")))
        } else {
            Ok(())
        }
    };
    let timeout = |t: Option<i64>| -> Result<u64, RubricError> {
        match t {
            None => Ok(DEFAULT_TIMEOUT_SECS),
            Some(t) if t > 0 => Ok(t as u64),
            Some(_) => Err(schema(field("timeout"), "must be a positive integer")),
        }
    };

    let kind = match item.kind.as_str() {
        k @ ("file_exists" | "file_absent") => {
            forbid(item.command.is_some(), "command", k)?;
            forbid(item.timeout.is_some(), "timeout", k)?;
            forbid(item.pattern.is_some(), "pattern", k)?;
            forbid(item.threshold.is_some(), "threshold", k)?;
            let path = item
                .path
                .ok_or_else(|| schema(field("path"), format!("required for kind \"{k}\"")))?;
            if k == "file_exists" {
                CheckKind::FileExists { path }
            } else {
                CheckKind::FileAbsent { path }
            }
        }
        k @ "command_succeeds" => {
            forbid(item.path.is_some(), "path", k)?;
            forbid(item.pattern.is_some(), "pattern", k)?;
            forbid(item.threshold.is_some(), "threshold", k)?;
            CheckKind::CommandSucceeds {
                command: item
                    .command
                    .ok_or_else(|| schema(field("command"), format!("required for kind \"{k}\"")))?,
                timeout_secs: timeout(item.timeout)?,
            }
        }
        k @ "max_pattern_count" => {
            forbid(item.path.is_some(), "path", k)?;
            let required = |name: &str| schema(field(name), format!("required for kind \"{k}\""));
            let threshold = item.threshold.ok_or_else(|| required("threshold"))?;
            if threshold < 0 {
                return Err(schema(field("threshold"), "must be a non-negative integer"));
            }
            CheckKind::MaxPatternCount {
                command: item.command.ok_or_else(|| required("command"))?,
                timeout_secs: timeout(item.timeout)?,
                pattern: item.pattern.ok_or_else(|| required("pattern"))?,
                threshold: threshold as u64,
            }
        }
        other => {
            return Err(schema(
                field("kind"),
                format!(
                    "unknown kind {other:?} (expected file_exists, file_absent, \
                     command_succeeds or max_pattern_count)"
                ),
            ))
        }
    };

    Ok(CheckSpec {
        id: item.id,
        description: item.description,
        kind,
    })
}

fn valid_item_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

fn valid_repo_path(path: &str) -> bool {
    !path.is_empty() && !path.starts_with('/') && !path.split(['/', '\\']).any(|seg| seg == "..")
}

/// Checks every rubric invariant. Empty iff the rubric is valid.
pub fn validate_rubric(r: &Rubric) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |path: String, rule: &str| {
        out.push(Violation {
            path,
            rule: rule.to_string(),
        })
    };

    if r.assignment_name.trim().is_empty() {
        push("assignment.name".into(), "must not be empty");
    }
    if r.start >= r.deadline {
        push("assignment.deadline".into(), "deadline must be later than start");
    }
    if let UpdateMode::Daily { hour_utc } = r.update_mode {
        if hour_utc > 23 {
            push("update.hour_utc".into(), "must be in 0..=23");
        }
    }

    if r.phases.is_empty() {
        push("phases".into(), "at least one phase is required");
    } else if r.phases.iter().all(|p| p.items.is_empty()) {
        push("phases".into(), "at least one phase must list an item");
    }

    let mut seen_ids: HashSet<&str> = HashSet::new();
    let mut seen_phases: HashSet<PhaseId> = HashSet::new();
    let mut latest: Option<PhaseId> = None;
    for (pi, phase) in r.phases.iter().enumerate() {
        if !seen_phases.insert(phase.id) {
            push(format!("phases[{pi}].id"), &format!("duplicate phase {}", phase.id));
        } else if let Some(prev) = latest.filter(|prev| phase.id < *prev) {
            push(
                format!("phases[{pi}].id"),
                &format!("phase {} is out of process order (after {prev})", phase.id),
            );
        }
        latest = latest.max(Some(phase.id));

        if phase.title.trim().is_empty() {
            push(format!("phases[{pi}].title"), "must not be empty");
        }

        for (ii, item) in phase.items.iter().enumerate() {
            let at = format!("phases[{pi}].items[{ii}]");
            if !valid_item_id(&item.id) {
                push(
                    format!("{at}.id"),
                    &format!(
                        "item id {:?} must be non-empty lowercase alphanumeric or underscore",
                        item.id
                    ),
                );
            }
            if !seen_ids.insert(item.id.as_str()) {
                push(format!("{at}.id"), &format!("duplicate item id \"{}\"", item.id));
            }
            if item.description.trim().is_empty() {
                push(format!("{at}.description"), "must not be empty");
            }
            match &item.kind {
                CheckKind::FileExists { path } | CheckKind::FileAbsent { path } => {
                    if !valid_repo_path(path) {
                        push(
                            format!("{at}.path"),
                            "must be a non-empty repository-relative path without '..'",
                        );
                    }
                }
                CheckKind::CommandSucceeds { command, timeout_secs } => {
                    check_command(&mut push, &at, command, *timeout_secs);
                }
                CheckKind::MaxPatternCount {
                    command,
                    timeout_secs,
                    pattern,
                    ..
                } => {
                    check_command(&mut push, &at, command, *timeout_secs);
                    if let Err(e) = Regex::new(pattern) {
                        push(format!("{at}.pattern"), &format!("invalid regular expression: {e}"));
                    }
                }
            }
        }
    }
    out
}

fn check_command(push: &mut impl FnMut(String, &str), at: &str, command: &[String], timeout: u64) {
    if command.first().is_none_or(|c| c.is_empty()) {
        push(format!("{at}.command"), "must be a non-empty argument vector");
    }
    if timeout == 0 {
        push(format!("{at}.timeout"), "must be a positive integer");
    }
}
