use std::time::Duration;

use reqwest::blocking::{Client, RequestBuilder, Response};
use reqwest::header::{HeaderMap, ACCEPT, AUTHORIZATION, USER_AGENT};
use reqwest::StatusCode;
use serde::Deserialize;
use serde_json::json;

use super::{ForgeBackend, ForgeConfig, ForgeError, Issue, IssueRef, Secret};

const PER_PAGE: usize = 100;
/// Stop paginating after this many pages.
const MAX_PAGES: usize = 50;

/// GitHub-compatible REST backend.
pub struct HttpForge {
    client: Client,
    base_url: String,
    token: Secret,
}

#[derive(Deserialize)]
struct WireIssue {
    number: u64,
    #[serde(default)]
    title: String,
    #[serde(default)]
    body: Option<String>,
    #[serde(default)]
    state: String,
    #[serde(default)]
    pull_request: Option<serde_json::Value>,
}

impl From<WireIssue> for Issue {
    fn from(w: WireIssue) -> Self {
        Issue {
            number: w.number,
            title: w.title,
            body: w.body.unwrap_or_default(),
            open: w.state == "open",
        }
    }
}

impl HttpForge {
    pub fn new(config: &ForgeConfig) -> Result<Self, ForgeError> {
        let client = Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| ForgeError::Network(e.to_string()))?;
        Ok(Self {
            client,
            base_url: config.base_url.trim_end_matches('/').to_string(),
            token: config.token.clone(),
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base_url)
    }

    fn send(&self, req: RequestBuilder, what: &str) -> Result<Response, ForgeError> {
        let mut req = req
            .header(ACCEPT, "application/vnd.github+json")
            .header(USER_AGENT, "class-bot");
        if !self.token.expose().is_empty() {
            req = req.header(AUTHORIZATION, format!("token {}", self.token.expose()));
        }
        let resp = req
            .send()
            .map_err(|e| ForgeError::Network(e.without_url().to_string()))?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status();
        let headers = resp.headers().clone();
        let text = resp.text().unwrap_or_default();
        Err(classify(status, &headers, &text, what))
    }
}

fn retry_after(headers: &HeaderMap) -> Option<Duration> {
    headers
        .get("retry-after")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<u64>().ok())
        .map(Duration::from_secs)
}

fn classify(status: StatusCode, headers: &HeaderMap, body: &str, what: &str) -> ForgeError {
    let message = serde_json::from_str::<serde_json::Value>(body)
        .ok()
        .and_then(|v| v.get("message").and_then(|m| m.as_str()).map(String::from))
        .unwrap_or_else(|| body.chars().take(200).collect());
    let exhausted = headers
        .get("x-ratelimit-remaining")
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.trim() == "0");
    match status.as_u16() {
        429 => ForgeError::RateLimited {
            retry_after: retry_after(headers),
        },
        403 if exhausted || headers.contains_key("retry-after") || message.to_lowercase().contains("rate limit") => {
            ForgeError::RateLimited {
                retry_after: retry_after(headers),
            }
        }
        401 | 403 => ForgeError::Auth(message),
        404 | 410 => ForgeError::NotFound(what.to_string()),
        s @ 500..=599 => ForgeError::Server { status: s, message },
        s => ForgeError::Protocol(format!("{s} for {what}: {message}")),
    }
}

impl ForgeBackend for HttpForge {
    fn list_open_issues(&self, repo: &str) -> Result<Vec<Issue>, ForgeError> {
        let mut out = Vec::new();
        for page in 1..=MAX_PAGES {
            let req = self.client.get(self.url(&format!("/repos/{repo}/issues"))).query(&[
                ("state", "open".to_string()),
                ("per_page", PER_PAGE.to_string()),
                ("page", page.to_string()),
            ]);
            let batch: Vec<WireIssue> = self
                .send(req, repo)?
                .json()
                .map_err(|e| ForgeError::Protocol(e.to_string()))?;
            let n = batch.len();
            out.extend(batch.into_iter().filter(|w| w.pull_request.is_none()).map(Issue::from));
            if n < PER_PAGE {
                break;
            }
        }
        Ok(out)
    }

    fn get_issue(&self, issue: &IssueRef) -> Result<Issue, ForgeError> {
        let req = self
            .client
            .get(self.url(&format!("/repos/{}/issues/{}", issue.repo, issue.number)));
        let wire: WireIssue = self
            .send(req, &issue.to_string())?
            .json()
            .map_err(|e| ForgeError::Protocol(e.to_string()))?;
        Ok(wire.into())
    }

    fn create_issue(&self, repo: &str, title: &str, body: &str) -> Result<IssueRef, ForgeError> {
        let req = self
            .client
            .post(self.url(&format!("/repos/{repo}/issues")))
            .json(&json!({ "title": title, "body": body }));
        let wire: WireIssue = self
            .send(req, repo)?
            .json()
            .map_err(|e| ForgeError::Protocol(e.to_string()))?;
        Ok(IssueRef {
            repo: repo.to_string(),
            number: wire.number,
        })
    }

    fn edit_issue_body(&self, issue: &IssueRef, body: &str) -> Result<(), ForgeError> {
        let req = self
            .client
            .patch(self.url(&format!("/repos/{}/issues/{}", issue.repo, issue.number)))
            .json(&json!({ "body": body }));
        self.send(req, &issue.to_string())?;
        Ok(())
    }
}
