use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, Context};
use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use classbot::analyzer::Analyzer;
use classbot::forge::{FakeForge, ForgeBackend, ForgeClient, ForgeConfig, HttpForge, Secret, DEFAULT_BASE_URL};
use classbot::git;
use classbot::miner::{self, MiningWindow};
use classbot::orchestrator::{
    Clock, FileStateStore, ManualClock, Nudger, Outcome, Scheduler, SystemClock, DEFAULT_POLL_INTERVAL,
};
use classbot::renderer;
use classbot::roster::Roster;
use classbot::rubric::{parse_rubric, Rubric};
use classbot::stats::{self, GroupSelection, TableFormat};
use regex::Regex;

/// Only secret the tool reads; never logged.
const TOKEN_ENV: &str = "CLASSBOT_TOKEN";

#[derive(Parser)]
#[command(
    name = "classbot",
    version,
    about = "Rubric-driven progress issues for student repositories"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Forge API base URL.
    #[arg(long, global = true, env = "CLASSBOT_FORGE_URL", default_value = DEFAULT_BASE_URL)]
    forge_url: String,
    /// Use a file-backed fake forge instead of the HTTP API (demos, tests).
    #[arg(long, global = true, value_name = "PATH")]
    fake_forge: Option<PathBuf>,
    /// Where state documents and working clones live.
    #[arg(long, global = true, env = "CLASSBOT_STATE_DIR", default_value = ".classbot")]
    state_dir: PathBuf,
    /// Assess and render only; no forge writes, no state writes.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Parallel repositories.
    #[arg(long, global = true, default_value_t = 4)]
    jobs: usize,
    /// Pretend the current time is this RFC 3339 instant.
    #[arg(long, global = true, value_name = "TIME")]
    now: Option<DateTime<Utc>>,
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Assess one local checkout and print the rendered issue body.
    Check {
        #[arg(long)]
        rubric: PathBuf,
        #[arg(long)]
        repo: PathBuf,
    },
    /// One create-or-update pass over every repository in the roster.
    Nudge {
        #[arg(long)]
        roster: PathBuf,
    },
    /// Keep nudging on the rubric's schedule.
    Serve {
        #[arg(long)]
        roster: PathBuf,
        /// Seconds between polls in on-change mode.
        #[arg(long, default_value_t = DEFAULT_POLL_INTERVAL.as_secs())]
        poll_interval: u64,
        /// Stop after this many passes.
        #[arg(long, hide = true)]
        max_ticks: Option<usize>,
    },
    /// Mine commit history into a metrics CSV.
    Mine {
        #[arg(long)]
        roster: PathBuf,
        /// Group label written to every row.
        #[arg(long)]
        group: String,
        #[arg(long)]
        out: PathBuf,
        /// Write one row per counted commit instead of one per repository.
        #[arg(long)]
        per_commit: bool,
        /// Regex on "Name <email>"; matching authors are not counted. Repeatable.
        #[arg(long = "exclude-author", value_name = "REGEX")]
        exclude_author: Vec<String>,
        #[arg(long, default_value = "HEAD")]
        branch: String,
    },
    /// Compare two groups with the Mann-Whitney-Wilcoxon test.
    Compare {
        #[arg(long)]
        csv: PathBuf,
        /// Comma-separated metric columns.
        #[arg(long, value_delimiter = ',', required = true)]
        metrics: Vec<String>,
        #[arg(long, default_value = "group")]
        group_col: String,
        #[arg(long, default_value_t = stats::DEFAULT_ALPHA)]
        alpha: f64,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Control group label (defaults to the first label in the file).
        #[arg(long)]
        control: Option<String>,
        #[arg(long)]
        treatment: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
}

/// Failure with its exit status: 2 for configuration problems, 1 otherwise.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn config<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure {
        code: 2,
        error: e.into(),
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure {
            code: 1,
            error: e.into(),
        }
    }
}

type CmdResult = Result<ExitCode, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.global.verbose);
    match run(cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_env("CLASSBOT_LOG")
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_ansi(false)
        .with_target(false)
        .init();
}

fn run(cli: Cli) -> CmdResult {
    let g = &cli.global;
    match &cli.command {
        Command::Check { rubric, repo } => cmd_check(g, rubric, repo),
        Command::Nudge { roster } => cmd_nudge(g, roster),
        Command::Serve {
            roster,
            poll_interval,
            max_ticks,
        } => cmd_serve(g, roster, Duration::from_secs(*poll_interval), *max_ticks),
        Command::Mine {
            roster,
            group,
            out,
            per_commit,
            exclude_author,
            branch,
        } => cmd_mine(g, roster, group, out, *per_commit, exclude_author, branch),
        Command::Compare {
            csv,
            metrics,
            group_col,
            alpha,
            format,
            control,
            treatment,
        } => cmd_compare(csv, metrics, group_col, *alpha, *format, control, treatment),
    }
}

fn clock(g: &Global) -> Box<dyn Clock> {
    match g.now {
        Some(t) => Box::new(ManualClock::new(t)),
        None => Box::new(SystemClock),
    }
}

fn load_rubric(path: &Path) -> Result<Rubric, Failure> {
    let bytes = std::fs::read(path)
        .with_context(|| format!("cannot read rubric {}", path.display()))
        .map_err(config)?;
    parse_rubric(&bytes)
        .with_context(|| format!("invalid rubric {}", path.display()))
        .map_err(config)
}

fn load_roster(path: &Path) -> Result<(Roster, Rubric), Failure> {
    let roster = Roster::load(path).map_err(config)?;
    let rubric = load_rubric(&roster.rubric)?;
    Ok((roster, rubric))
}

fn cmd_check(g: &Global, rubric: &Path, repo: &Path) -> CmdResult {
    let rubric = load_rubric(rubric)?;
    if !repo.is_dir() {
        return Err(config(anyhow!("{} is not a directory", repo.display())));
    }
    let head = git::resolve_commit(repo, "HEAD")
        .ok()
        .flatten()
        .unwrap_or_else(|| "0000000".into());
    let id = repo
        .canonicalize()
        .ok()
        .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "repo".into());
    let report = Analyzer::new().assess_at(repo, &id, &rubric, &head, clock(g).now())?;
    let issue = renderer::render(&report, &rubric)?;
    print!("{}", issue.body);
    std::io::stdout().flush()?;
    Ok(if report.all_passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

/// The forge backend plus, for the fake, a handle to persist it afterwards.
struct Forge {
    client: ForgeClient<Box<dyn ForgeBackend>>,
    fake: Option<(FakeForge, PathBuf)>,
}

impl Forge {
    fn open(g: &Global) -> Result<Self, Failure> {
        let token = std::env::var(TOKEN_ENV).unwrap_or_default();
        let cfg = ForgeConfig {
            base_url: g.forge_url.clone(),
            token: Secret::new(token),
            ..ForgeConfig::default()
        };
        let (backend, fake): (Box<dyn ForgeBackend>, _) = match &g.fake_forge {
            Some(path) => {
                let fake = FakeForge::load(path)
                    .with_context(|| format!("cannot load fake forge {}", path.display()))
                    .map_err(config)?;
                let cfg = ForgeConfig {
                    min_request_interval: Duration::ZERO,
                    ..cfg
                };
                return Ok(Self {
                    client: ForgeClient::new(Box::new(fake.clone()) as Box<dyn ForgeBackend>, cfg).dry_run(g.dry_run),
                    fake: Some((fake, path.clone())),
                });
            }
            None => {
                if cfg.token.expose().is_empty() && !g.dry_run {
                    return Err(config(anyhow!("{TOKEN_ENV} is not set")));
                }
                (Box::new(HttpForge::new(&cfg)?), None)
            }
        };
        Ok(Self {
            client: ForgeClient::new(backend, cfg).dry_run(g.dry_run),
            fake,
        })
    }

    fn persist(&self, dry_run: bool) -> Result<(), Failure> {
        if let (Some((fake, path)), false) = (&self.fake, dry_run) {
            fake.save(path)
                .with_context(|| format!("cannot save fake forge {}", path.display()))?;
        }
        Ok(())
    }
}

struct NudgeSetup {
    roster: Roster,
    rubric: Rubric,
    store: FileStateStore,
    work_root: PathBuf,
}

fn nudge_setup(g: &Global, roster_path: &Path) -> Result<NudgeSetup, Failure> {
    let (roster, rubric) = load_roster(roster_path)?;
    let name = Roster::name_from_path(roster_path);
    Ok(NudgeSetup {
        store: FileStateStore::for_roster(&g.state_dir, &name),
        work_root: g.state_dir.join("work").join(&name),
        roster,
        rubric,
    })
}

fn cmd_nudge(g: &Global, roster_path: &Path) -> CmdResult {
    let s = nudge_setup(g, roster_path)?;
    let forge = Forge::open(g)?;
    let analyzer = Analyzer::new();
    let clock = clock(g);
    let nudger = Nudger {
        rubric: &s.rubric,
        store: &s.store,
        forge: &forge.client,
        analyzer: &analyzer,
        clock: clock.as_ref(),
        work_root: s.work_root.clone(),
        dry_run: g.dry_run,
    };
    let reports = nudger.nudge_all(&s.roster.repos, g.jobs);
    forge.persist(g.dry_run)?;

    let mut out = std::io::stdout().lock();
    for r in &reports {
        if let Some(issue) = &r.issue {
            out.write_all(issue.body.as_bytes())?;
        }
    }
    out.flush()?;
    let failed = reports.iter().filter(|r| r.outcome.is_failed()).count();
    if failed > 0 {
        tracing::error!(failed, total = reports.len(), "some repositories failed");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_serve(g: &Global, roster_path: &Path, poll: Duration, max_ticks: Option<usize>) -> CmdResult {
    let s = nudge_setup(g, roster_path)?;
    let forge = Forge::open(g)?;
    let analyzer = Analyzer::new();
    let clock = clock(g);
    let nudger = Nudger {
        rubric: &s.rubric,
        store: &s.store,
        forge: &forge.client,
        analyzer: &analyzer,
        clock: clock.as_ref(),
        work_root: s.work_root.clone(),
        dry_run: g.dry_run,
    };
    let scheduler = Scheduler::new(nudger, &s.roster.repos, poll, g.jobs);
    tracing::info!(repos = s.roster.repos.len(), "serving");
    let mut ticks = 0;
    loop {
        let reports = scheduler.tick();
        if reports
            .iter()
            .any(|r| matches!(r.outcome, Outcome::Created(_) | Outcome::Updated(_)))
        {
            forge.persist(g.dry_run)?;
        }
        ticks += 1;
        if max_ticks.is_some_and(|m| ticks >= m) {
            return Ok(ExitCode::SUCCESS);
        }
        clock.sleep(scheduler.interval());
    }
}

fn cmd_mine(
    g: &Global,
    roster_path: &Path,
    group: &str,
    out: &Path,
    per_commit: bool,
    exclude: &[String],
    branch: &str,
) -> CmdResult {
    let (roster, rubric) = load_roster(roster_path)?;
    let patterns = exclude
        .iter()
        .map(|p| Regex::new(p).with_context(|| format!("bad --exclude-author pattern {p:?}")))
        .collect::<Result<Vec<_>, _>>()
        .map_err(config)?;
    let window = MiningWindow::new(rubric.start, rubric.deadline).excluding(patterns);
    let mined = miner::mine_roster(&roster.repos, group, branch, &window, g.jobs);

    let file = File::create(out).with_context(|| format!("cannot write {}", out.display()))?;
    let w = BufWriter::new(file);
    if per_commit {
        miner::write_commits_csv(w, group, &mined.commits)?;
    } else {
        miner::write_metrics_csv(w, &mined.metrics)?;
    }
    tracing::info!(
        rows = mined.metrics.len(),
        skipped = mined.skipped.len(),
        out = %out.display(),
        "mining finished"
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_compare(
    csv: &Path,
    metrics: &[String],
    group_col: &str,
    alpha: f64,
    format: Format,
    control: &Option<String>,
    treatment: &Option<String>,
) -> CmdResult {
    let file = File::open(csv)
        .with_context(|| format!("cannot read {}", csv.display()))
        .map_err(config)?;
    let selection = GroupSelection {
        control: control.clone(),
        treatment: treatment.clone(),
    };
    let ingested = stats::ingest_csv(file, metrics, group_col, &selection)?;
    for (metric, n) in ingested.skipped.iter().filter(|(_, n)| *n > 0) {
        tracing::warn!(metric = %metric, cells = n, "skipped empty or non-numeric cells");
    }
    let table = stats::compare_table(&ingested.rows, alpha)?;
    for row in &table {
        tracing::info!(
            metric = %row.metric,
            p_value = row.p_value,
            significant = row.significant,
            "compared"
        );
    }
    let format = match format {
        Format::Text => TableFormat::Text,
        Format::Csv => TableFormat::Csv,
    };
    print!("{}", stats::format_table(&table, format));
    std::io::stdout().flush()?;
    Ok(ExitCode::SUCCESS)
}
