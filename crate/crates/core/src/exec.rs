//! Child process execution for rubric commands.

use std::io::{Read, Seek, SeekFrom};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

/// Variables passed through from the bot's own environment.
const INHERITED_ENV: [&str; 3] = ["PATH", "HOME", "LANG"];
const FALLBACK_PATH: &str = "/usr/local/bin:/usr/bin:/bin";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Exit {
    Code(i32),
    Signal(i32),
    TimedOut,
    NotFound,
    SpawnFailed(String),
}

#[derive(Debug)]
pub struct Finished {
    pub exit: Exit,
    /// stdout and stderr interleaved in write order.
    pub output: Vec<u8>,
}

/// Runs `argv` in `cwd` with a scrubbed environment. The child gets its own
/// process group, which is killed on timeout and reaped after exit so that
/// stray background children do not outlive the check.
pub fn run(argv: &[String], cwd: &Path, extra_env: &[(String, String)], timeout: Duration) -> Finished {
    let Some((program, args)) = argv.split_first() else {
        return Finished {
            exit: Exit::SpawnFailed("empty command".into()),
            output: Vec::new(),
        };
    };

    let mut sink = match tempfile::tempfile() {
        Ok(f) => f,
        Err(e) => {
            return Finished {
                exit: Exit::SpawnFailed(format!("cannot create output buffer: {e}")),
                output: Vec::new(),
            }
        }
    };
    let (out, err) = match (sink.try_clone(), sink.try_clone()) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => {
            return Finished {
                exit: Exit::SpawnFailed(format!("cannot create output buffer: {e}")),
                output: Vec::new(),
            }
        }
    };

    let mut cmd = Command::new(program);
    cmd.args(args)
        .current_dir(cwd)
        .env_clear()
        .stdin(Stdio::null())
        .stdout(Stdio::from(out))
        .stderr(Stdio::from(err))
        .process_group(0);
    for key in INHERITED_ENV {
        match std::env::var_os(key) {
            Some(v) => {
                cmd.env(key, v);
            }
            None if key == "PATH" => {
                cmd.env(key, FALLBACK_PATH);
            }
            None => {}
        }
    }
    for (k, v) in extra_env {
        cmd.env(k, v);
    }

    let mut child = match cmd.spawn() {
        Ok(c) => c,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Finished {
                exit: Exit::NotFound,
                output: Vec::new(),
            }
        }
        Err(e) => {
            return Finished {
                exit: Exit::SpawnFailed(e.to_string()),
                output: Vec::new(),
            }
        }
    };
    let pgid = child.id() as libc::pid_t;

    let started = Instant::now();
    let mut backoff = Duration::from_millis(2);
    let exit = loop {
        match child.try_wait() {
            Ok(Some(status)) => {
                break match (status.code(), status.signal()) {
                    (Some(c), _) => Exit::Code(c),
                    (None, Some(s)) => Exit::Signal(s),
                    (None, None) => Exit::SpawnFailed("unknown exit status".into()),
                };
            }
            Ok(None) => {}
            Err(e) => break Exit::SpawnFailed(e.to_string()),
        }
        if started.elapsed() >= timeout {
            kill_group(pgid);
            let _ = child.wait();
            break Exit::TimedOut;
        }
        std::thread::sleep(backoff.min(timeout.saturating_sub(started.elapsed())));
        backoff = (backoff * 2).min(Duration::from_millis(50));
    };
    kill_group(pgid);

    let mut output = Vec::new();
    if sink.seek(SeekFrom::Start(0)).is_ok() {
        let _ = sink.read_to_end(&mut output);
    }
    Finished { exit, output }
}

fn kill_group(pgid: libc::pid_t) {
    // SAFETY: killpg only sends a signal; ESRCH for an empty group is ignored.
    unsafe {
        libc::killpg(pgid, libc::SIGKILL);
    }
}
