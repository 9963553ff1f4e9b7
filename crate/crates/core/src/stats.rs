//! Group summaries, the Mann-Whitney-Wilcoxon rank-sum test and comparison
//! tables in the layout used for quality/productivity reports.
//!
//! Ranks are handled as doubled integers (a midrank is always a multiple of
//! one half), so U statistics and the exact null distribution are computed
//! without floating point error.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Read;

use serde::Serialize;
use statrs::function::erf::erfc;

pub const DEFAULT_ALPHA: f64 = 0.05;

/// Largest pooled sample size tested by full enumeration.
pub const EXACT_MAX_TOTAL: usize = 20;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StatsError {
    #[error("sample {0:?} is empty")]
    EmptySample(String),
    #[error("sample {label:?} contains a non-finite value ({value})")]
    NonFinite { label: String, value: f64 },
    #[error("alpha must lie strictly between 0 and 1, got {0}")]
    BadAlpha(f64),
    #[error("column {0:?} not found in CSV header")]
    MissingColumn(String),
    #[error("no data for metric {metric:?} in group {group:?}")]
    NoData { metric: String, group: String },
    #[error("expected exactly two groups in column {column:?}, found {found:?}")]
    GroupCount { column: String, found: Vec<String> },
    #[error("group {0:?} does not occur in the data")]
    UnknownGroup(String),
    #[error("CSV error: {0}")]
    Csv(String),
}

/// Non-empty list of finite observations for one group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sample {
    label: String,
    values: Vec<f64>,
}

impl Sample {
    pub fn new(label: impl Into<String>, values: Vec<f64>) -> Result<Self, StatsError> {
        let label = label.into();
        if values.is_empty() {
            return Err(StatsError::EmptySample(label));
        }
        if let Some(&value) = values.iter().find(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite { label, value });
        }
        Ok(Self { label, values })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
}

pub fn summarize(s: &Sample) -> Summary {
    let n = s.values.len();
    let mean = s.values.iter().sum::<f64>() / n as f64;
    let mut sorted = s.values.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    Summary { mean, median }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatTestResult {
    pub metric_name: String,
    pub n_a: usize,
    pub n_b: usize,
    pub mean_a: f64,
    pub median_a: f64,
    pub mean_b: f64,
    pub median_b: f64,
    /// U of the first sample: pairs where it is larger, ties counting half.
    pub u_a: f64,
    pub u_b: f64,
    /// min(U_a, U_b)
    pub u_statistic: f64,
    /// Two-sided.
    pub p_value: f64,
    pub method: Method,
    pub alpha: f64,
    pub significant: bool,
}

/// Midranks of the pooled values, doubled. Tied values share the average of
/// the positions they occupy.
pub(crate) fn doubled_midranks(pooled: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&i, &j| pooled[i].total_cmp(&pooled[j]));
    let mut ranks = vec![0u64; pooled.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && pooled[order[j]] == pooled[order[i]] {
            j += 1;
        }
        // positions i+1 ..= j share rank (i+1+j)/2
        let doubled = (i + 1 + j) as u64;
        for &k in &order[i..j] {
            ranks[k] = doubled;
        }
        i = j;
    }
    ranks
}

/// Sizes of runs of tied values.
fn tie_groups(pooled: &[f64]) -> Vec<usize> {
    let mut sorted = pooled.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut groups = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        groups.push(j - i);
        i = j;
    }
    groups
}

/// Doubled U for the group whose doubled rank sum is `rank_sum2`.
fn doubled_u(rank_sum2: u64, n_group: usize) -> u64 {
    rank_sum2 - (n_group * (n_group + 1)) as u64
}

/// Two-sided Mann-Whitney-Wilcoxon test of `a` against `b`.
///
/// With at most [`EXACT_MAX_TOTAL`] pooled observations the p-value is the
/// share of all C(n_a + n_b, n_a) relabelings of the pooled values whose
/// min(U) is no larger than the observed one. Larger samples use the normal
/// approximation with tie-corrected variance and a 0.5 continuity correction.
pub fn mann_whitney(metric_name: &str, a: &Sample, b: &Sample, alpha: f64) -> Result<StatTestResult, StatsError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(StatsError::BadAlpha(alpha));
    }
    let (n_a, n_b) = (a.len(), b.len());
    let pooled: Vec<f64> = a.values.iter().chain(&b.values).copied().collect();
    let ranks = doubled_midranks(&pooled);
    let sum_a2: u64 = ranks[..n_a].iter().sum();
    let u_a2 = doubled_u(sum_a2, n_a);
    let total2 = 2 * (n_a * n_b) as u64;
    let u_min2 = u_a2.min(total2 - u_a2);

    let (p_value, method) = if n_a + n_b <= EXACT_MAX_TOTAL {
        (exact_p(&ranks, n_a, u_min2), Method::Exact)
    } else {
        (normal_p(&pooled, n_a, n_b, u_a2 as f64 / 2.0), Method::NormalApprox)
    };

    let sa = summarize(a);
    let sb = summarize(b);
    Ok(StatTestResult {
        metric_name: metric_name.to_string(),
        n_a,
        n_b,
        mean_a: sa.mean,
        median_a: sa.median,
        mean_b: sb.mean,
        median_b: sb.median,
        u_a: u_a2 as f64 / 2.0,
        u_b: (total2 - u_a2) as f64 / 2.0,
        u_statistic: u_min2 as f64 / 2.0,
        p_value,
        method,
        alpha,
        significant: p_value < alpha,
    })
}

/// Enumerates every size-`n_a` subset of pooled positions with Gosper's hack.
fn exact_p(ranks: &[u64], n_a: usize, observed_min2: u64) -> f64 {
    let n = ranks.len();
    let n_b = n - n_a;
    let total2 = 2 * (n_a * n_b) as u64;
    let limit: u64 = 1 << n;
    let mut mask: u64 = (1 << n_a) - 1;
    let (mut hits, mut total) = (0u64, 0u64);
    while mask < limit {
        let mut sum2 = 0u64;
        let mut bits = mask;
        while bits != 0 {
            sum2 += ranks[bits.trailing_zeros() as usize];
            bits &= bits - 1;
        }
        let u2 = doubled_u(sum2, n_a);
        if u2.min(total2 - u2) <= observed_min2 {
            hits += 1;
        }
        total += 1;
        if n_a == 0 {
            break;
        }
        let low = mask & mask.wrapping_neg();
        let ripple = mask + low;
        mask = (((ripple ^ mask) >> 2) / low) | ripple;
    }
    hits as f64 / total as f64
}

fn normal_p(pooled: &[f64], n_a: usize, n_b: usize, u_a: f64) -> f64 {
    let n = (n_a + n_b) as f64;
    let (na, nb) = (n_a as f64, n_b as f64);
    let mean = na * nb / 2.0;
    let ties: f64 = tie_groups(pooled)
        .into_iter()
        .map(|t| {
            let t = t as f64;
            t * t * t - t
        })
        .sum();
    let var = na * nb / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((u_a - mean).abs() - 0.5).max(0.0) / var.sqrt();
    erfc(z / std::f64::consts::SQRT_2).min(1.0)
}

// ---------------------------------------------------------------------------
// Comparison tables

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSummary {
    pub label: String,
    /// Unknown when the row was built from published summaries.
    pub n: Option<usize>,
    pub mean: f64,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricComparison {
    pub metric: String,
    pub control: GroupSummary,
    pub treatment: GroupSummary,
    pub p_value: f64,
    pub alpha: f64,
    pub significant: bool,
}

impl MetricComparison {
    /// Row built from already-computed summary statistics.
    pub fn from_summaries(
        metric: &str,
        control: GroupSummary,
        treatment: GroupSummary,
        p_value: f64,
        alpha: f64,
    ) -> Self {
        Self {
            metric: metric.to_string(),
            control,
            treatment,
            p_value,
            alpha,
            significant: p_value < alpha,
        }
    }

    pub fn from_test(control: &Sample, treatment: &Sample, t: &StatTestResult) -> Self {
        Self {
            metric: t.metric_name.clone(),
            control: GroupSummary {
                label: control.label.clone(),
                n: Some(t.n_a),
                mean: t.mean_a,
                median: t.median_a,
            },
            treatment: GroupSummary {
                label: treatment.label.clone(),
                n: Some(t.n_b),
                mean: t.mean_b,
                median: t.median_b,
            },
            p_value: t.p_value,
            alpha: t.alpha,
            significant: t.significant,
        }
    }
}

/// One metric's control and treatment samples.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSamples {
    pub metric: String,
    pub control: Sample,
    pub treatment: Sample,
}

/// Runs the test for every metric, in input order.
pub fn compare_table(rows: &[MetricSamples], alpha: f64) -> Result<Vec<MetricComparison>, StatsError> {
    rows.iter()
        .map(|r| {
            let t = mann_whitney(&r.metric, &r.control, &r.treatment, alpha)?;
            Ok(MetricComparison::from_test(&r.control, &r.treatment, &t))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Text,
    Csv,
}

const STARS: &str = "***";

pub fn format_number(x: f64) -> String {
    let s = format!("{x:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

/// Four decimals, `< 0.0001` when it would round to zero, stars when significant.
pub fn format_p(p: f64, significant: bool) -> String {
    let mut s = if p < 0.00005 {
        "< 0.0001".to_string()
    } else {
        format!("{p:.4}")
    };
    if significant {
        s.push_str(STARS);
    }
    s
}

pub fn format_table(rows: &[MetricComparison], format: TableFormat) -> String {
    match format {
        TableFormat::Text => format_text(rows),
        TableFormat::Csv => format_csv(rows),
    }
}

fn format_text(rows: &[MetricComparison]) -> String {
    let header = ["Metric", "Group", "Mean", "Median", "p-value"];
    let mut cells: Vec<[String; 5]> = Vec::new();
    for r in rows {
        let name = if r.significant {
            format!("{}{STARS}", r.metric)
        } else {
            r.metric.clone()
        };
        cells.push([
            name,
            r.control.label.clone(),
            format_number(r.control.mean),
            format_number(r.control.median),
            "-".into(),
        ]);
        cells.push([
            String::new(),
            r.treatment.label.clone(),
            format_number(r.treatment.mean),
            format_number(r.treatment.median),
            format_p(r.p_value, r.significant),
        ]);
    }
    let mut width = header.map(str::len);
    for row in &cells {
        for (w, c) in width.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let right_aligned = [false, false, true, true, false];

    let mut out = String::new();
    let mut line = |cols: &[String]| {
        let mut s = String::new();
        for (i, c) in cols.iter().enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            let pad = width[i] - c.chars().count();
            if right_aligned[i] {
                s.push_str(&" ".repeat(pad));
                s.push_str(c);
            } else {
                s.push_str(c);
                s.push_str(&" ".repeat(pad));
            }
        }
        out.push_str(s.trim_end());
        out.push('\n');
    };
    line(&header.map(String::from));
    line(&width.map(|w| "-".repeat(w)));
    for row in &cells {
        line(row);
    }
    out
}

fn format_csv(rows: &[MetricComparison]) -> String {
    let mut out = String::from("metric,group,n,mean,median,p_value,significant\n");
    let field = |s: &str| {
        if s.contains([',', '"', '\n']) {
            format!("\"{}\"", s.replace('"', "\"\""))
        } else {
            s.to_string()
        }
    };
    for r in rows {
        for (g, p) in [(&r.control, None), (&r.treatment, Some(r.p_value))] {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                field(&r.metric),
                field(&g.label),
                g.n.map(|n| n.to_string()).unwrap_or_default(),
                g.mean,
                g.median,
                p.map(|p| p.to_string()).unwrap_or_default(),
                if p.is_some() {
                    r.significant.to_string()
                } else {
                    String::new()
                },
            );
        }
    }
    out
}

// ---------------------------------------------------------------------------
// CSV ingestion

#[derive(Debug, Clone, Default)]
pub struct GroupSelection {
    pub control: Option<String>,
    pub treatment: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub rows: Vec<MetricSamples>,
    /// Cells skipped per metric because they were empty or not numeric.
    pub skipped: Vec<(String, usize)>,
}

/// Reads per-entity rows and splits each metric column by group label.
///
/// Without an explicit [`GroupSelection`] the data must contain exactly two
/// labels; the first one seen is the control group.
pub fn ingest_csv<R: Read, S: AsRef<str>>(
    input: R,
    metrics: &[S],
    group_col: &str,
    groups: &GroupSelection,
) -> Result<Ingested, StatsError> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let headers = reader.headers().map_err(|e| StatsError::Csv(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| StatsError::MissingColumn(name.to_string()))
    };
    let group_idx = col(group_col)?;
    let metric_idx: Vec<usize> = metrics.iter().map(|m| col(m.as_ref())).collect::<Result<_, _>>()?;

    let mut labels_seen: Vec<String> = Vec::new();
    let mut values: HashMap<(usize, String), Vec<f64>> = HashMap::new();
    let mut skipped = vec![0usize; metrics.len()];
    for record in reader.records() {
        let record = match record {
            Ok(r) => r,
            Err(_) => {
                skipped.iter_mut().for_each(|s| *s += 1);
                continue;
            }
        };
        let Some(label) = record.get(group_idx).map(str::trim).filter(|l| !l.is_empty()) else {
            skipped.iter_mut().for_each(|s| *s += 1);
            continue;
        };
        if !labels_seen.iter().any(|l| l == label) {
            labels_seen.push(label.to_string());
        }
        for (mi, &ci) in metric_idx.iter().enumerate() {
            match record
                .get(ci)
                .map(str::trim)
                .and_then(|c| c.parse::<f64>().ok())
                .filter(|v| v.is_finite())
            {
                Some(v) => values.entry((mi, label.to_string())).or_default().push(v),
                None => skipped[mi] += 1,
            }
        }
    }

    let (control, treatment) = match (&groups.control, &groups.treatment) {
        (Some(c), Some(t)) => (c.clone(), t.clone()),
        (Some(c), None) => {
            let others: Vec<_> = labels_seen.iter().filter(|l| *l != c).cloned().collect();
            match others.as_slice() {
                [t] => (c.clone(), t.clone()),
                _ => return Err(group_count(group_col, &labels_seen)),
            }
        }
        (None, Some(t)) => {
            let others: Vec<_> = labels_seen.iter().filter(|l| *l != t).cloned().collect();
            match others.as_slice() {
                [c] => (c.clone(), t.clone()),
                _ => return Err(group_count(group_col, &labels_seen)),
            }
        }
        (None, None) => match labels_seen.as_slice() {
            [c, t] => (c.clone(), t.clone()),
            _ => return Err(group_count(group_col, &labels_seen)),
        },
    };
    for g in [&control, &treatment] {
        if !labels_seen.contains(g) {
            return Err(StatsError::UnknownGroup(g.clone()));
        }
    }

    let mut rows = Vec::with_capacity(metrics.len());
    for (mi, metric) in metrics.iter().map(|m| m.as_ref().to_string()).enumerate() {
        let mut take = |g: &String| {
            let v = values.remove(&(mi, g.clone())).unwrap_or_default();
            if v.is_empty() {
                Err(StatsError::NoData {
                    metric: metric.clone(),
                    group: g.clone(),
                })
            } else {
                Sample::new(g.clone(), v)
            }
        };
        rows.push(MetricSamples {
            control: take(&control)?,
            treatment: take(&treatment)?,
            metric,
        });
    }
    Ok(Ingested {
        rows,
        skipped: metrics.iter().map(|m| m.as_ref().to_string()).zip(skipped).collect(),
    })
}

fn group_count(column: &str, found: &[String]) -> StatsError {
    StatsError::GroupCount {
        column: column.to_string(),
        found: found.to_vec(),
    }
}
