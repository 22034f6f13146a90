//! Execution of code/test concatenations in throwaway external processes, and
//! assembly of the binary feedback matrix.
//!
//! Each script is written into its own temporary directory and run with a
//! cleared environment (plus an allowlist), in its own process group so a
//! timeout kills any children too. A cell passes iff the process exits with
//! status 0 before the deadline.

use std::collections::HashMap;
use std::io::{ErrorKind, Read};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ingest::CandidateSet;
use crate::select::PassMatrix;

/// Upper bound on captured stderr per cell.
pub const STDERR_LIMIT: usize = 4096;

const POLL_INTERVAL: Duration = Duration::from_millis(5);
const SCRIPT_PLACEHOLDER: &str = "{script}";

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("interpreter {0:?} not found")]
    InterpreterNotFound(String),
    #[error("invalid sandbox configuration: {0}")]
    Config(String),
    #[error("sandbox I/O failure: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecutionLimits {
    pub timeout_seconds: f64,
    pub memory_limit_bytes: Option<u64>,
    pub max_workers: usize,
}

impl Default for ExecutionLimits {
    fn default() -> Self {
        ExecutionLimits {
            timeout_seconds: 10.0,
            memory_limit_bytes: None,
            max_workers: thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

impl ExecutionLimits {
    pub fn validate(&self) -> Result<(), SandboxError> {
        if !(self.timeout_seconds.is_finite() && self.timeout_seconds > 0.0) {
            return Err(SandboxError::Config(format!(
                "timeout_seconds must be positive, got {}",
                self.timeout_seconds
            )));
        }
        if self.max_workers == 0 {
            return Err(SandboxError::Config("max_workers must be at least 1".into()));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_seconds)
    }
}

/// How scripts are launched.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SandboxCommand {
    /// Whitespace-separated command; `{script}` is replaced by the script
    /// path, or the path is appended when the placeholder is absent.
    pub interpreter_command: String,
    /// File name of the script inside the fresh working directory.
    pub script_name: String,
    /// Environment variables copied from the parent; everything else is
    /// cleared.
    pub env_allowlist: Vec<String>,
    /// stderr substrings that classify a failure as an assertion failure.
    pub assertion_markers: Vec<String>,
    /// stderr substrings that classify a failure as a resource kill.
    pub resource_markers: Vec<String>,
}

impl Default for SandboxCommand {
    fn default() -> Self {
        SandboxCommand {
            interpreter_command: "python3 {script}".into(),
            script_name: "main.py".into(),
            env_allowlist: vec!["PATH".into(), "LANG".into(), "LC_ALL".into()],
            assertion_markers: vec!["AssertionError".into()],
            resource_markers: vec!["MemoryError".into()],
        }
    }
}

impl SandboxCommand {
    fn argv(&self, script_path: &str) -> Result<Vec<String>, SandboxError> {
        let mut argv: Vec<String> = self
            .interpreter_command
            .split_whitespace()
            .map(|part| part.replace(SCRIPT_PLACEHOLDER, script_path))
            .collect();
        if argv.is_empty() {
            return Err(SandboxError::Config("interpreter_command is empty".into()));
        }
        if !self.interpreter_command.contains(SCRIPT_PLACEHOLDER) {
            argv.push(script_path.to_string());
        }
        Ok(argv)
    }

    /// Stable digest of a script under this command; used to key cached cells.
    pub fn fingerprint(&self, script: &str) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.interpreter_command.as_bytes());
        hasher.update([0u8]);
        hasher.update(self.script_name.as_bytes());
        hasher.update([0u8]);
        hasher.update(script.as_bytes());
        hex::encode(&hasher.finalize()[..16])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionStatus {
    Pass,
    AssertionFailed,
    RuntimeError,
    Timeout,
    ResourceKilled,
    ParseSkipped,
}

impl ExecutionStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ExecutionStatus::Pass => "pass",
            ExecutionStatus::AssertionFailed => "assertion_failed",
            ExecutionStatus::RuntimeError => "runtime_error",
            ExecutionStatus::Timeout => "timeout",
            ExecutionStatus::ResourceKilled => "resource_killed",
            ExecutionStatus::ParseSkipped => "parse_skipped",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub status: ExecutionStatus,
    pub duration: f64,
    pub stderr_excerpt: String,
}

impl ExecutionResult {
    pub fn new(status: ExecutionStatus, duration: f64) -> Self {
        ExecutionResult {
            status,
            duration,
            stderr_excerpt: String::new(),
        }
    }

    pub fn skipped() -> Self {
        Self::new(ExecutionStatus::ParseSkipped, 0.0)
    }

    /// Binary feedback: 1 iff the cell passed.
    pub fn r(&self) -> u8 {
        u8::from(self.status == ExecutionStatus::Pass)
    }

    pub fn passed(&self) -> bool {
        self.status == ExecutionStatus::Pass
    }
}

/// Code `j` × test `k` outcomes for one instruction.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackMatrix {
    pub instruction_id: String,
    n: usize,
    cells: Vec<ExecutionResult>,
}

impl FeedbackMatrix {
    /// `cells` is row-major (code-major) with `n * n` entries.
    pub fn from_cells(instruction_id: impl Into<String>, n: usize, cells: Vec<ExecutionResult>) -> Self {
        assert_eq!(cells.len(), n * n, "feedback matrix must be fully populated");
        FeedbackMatrix {
            instruction_id: instruction_id.into(),
            n,
            cells,
        }
    }

    pub fn cell(&self, j: usize, k: usize) -> &ExecutionResult {
        &self.cells[j * self.n + k]
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, &ExecutionResult)> {
        self.cells
            .iter()
            .enumerate()
            .map(move |(i, c)| (i / self.n, i % self.n, c))
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        (0..self.n)
            .map(|j| (0..self.n).map(|k| self.cell(j, k).r()).collect())
            .collect()
    }
}

impl PassMatrix for FeedbackMatrix {
    fn size(&self) -> usize {
        self.n
    }

    fn passes(&self, j: usize, k: usize) -> bool {
        self.cell(j, k).passed()
    }
}

/// Joins code and test into one executable script.
pub fn concat_for_execution(code: &str, test: &str) -> String {
    format!("{code}\n\n{test}")
}

fn truncate_utf8(bytes: &[u8], limit: usize) -> String {
    let mut end = bytes.len().min(limit);
    while end > 0 && std::str::from_utf8(&bytes[..end]).is_err() {
        end -= 1;
    }
    String::from_utf8_lossy(&bytes[..end]).into_owned()
}

fn drain_stderr(mut child_stderr: impl Read + Send + 'static) -> thread::JoinHandle<Vec<u8>> {
    thread::spawn(move || {
        let mut kept = Vec::new();
        let mut buf = [0u8; 4096];
        loop {
            match child_stderr.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let room = STDERR_LIMIT.saturating_sub(kept.len());
                    kept.extend_from_slice(&buf[..n.min(room)]);
                }
            }
        }
        kept
    })
}

fn kill_group(child: &mut Child) {
    let pid = child.id() as libc::pid_t;
    // SAFETY: plain syscall; the child leads its own process group.
    unsafe {
        libc::kill(-pid, libc::SIGKILL);
    }
    let _ = child.kill();
}

/// Runs a single script under the given limits.
pub fn execute(
    script: &str,
    limits: &ExecutionLimits,
    command: &SandboxCommand,
) -> Result<ExecutionResult, SandboxError> {
    limits.validate()?;
    let workdir = tempfile::Builder::new().prefix("dstc-cell-").tempdir()?;
    let script_path = workdir.path().join(&command.script_name);
    std::fs::write(&script_path, script)?;
    let argv = command.argv(&script_path.to_string_lossy())?;

    let mut cmd = Command::new(&argv[0]);
    cmd.args(&argv[1..])
        .current_dir(workdir.path())
        .env_clear()
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .process_group(0);
    for key in &command.env_allowlist {
        if let Ok(value) = std::env::var(key) {
            cmd.env(key, value);
        }
    }
    cmd.env("HOME", workdir.path()).env("TMPDIR", workdir.path());
    if let Some(bytes) = limits.memory_limit_bytes {
        let limit = bytes as libc::rlim_t;
        // SAFETY: setrlimit is async-signal-safe and touches no shared state.
        unsafe {
            cmd.pre_exec(move || {
                let rl = libc::rlimit {
                    rlim_cur: limit,
                    rlim_max: limit,
                };
                if libc::setrlimit(libc::RLIMIT_AS, &rl) != 0 {
                    return Err(std::io::Error::last_os_error());
                }
                Ok(())
            });
        }
    }

    let start = Instant::now();
    let mut child = match cmd.spawn() {
        Ok(child) => child,
        Err(e) if e.kind() == ErrorKind::NotFound => {
            return Err(SandboxError::InterpreterNotFound(argv[0].clone()))
        }
        Err(e) => return Err(e.into()),
    };
    let stderr = drain_stderr(child.stderr.take().expect("stderr is piped"));

    let timeout = limits.timeout();
    let mut timed_out = false;
    let exit = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if start.elapsed() >= timeout {
            kill_group(&mut child);
            timed_out = true;
            break child.wait()?;
        }
        thread::sleep(POLL_INTERVAL);
    };
    let duration = start.elapsed().as_secs_f64();
    // Grandchildren may still hold the pipe open; the group kill above covers
    // the timeout path, and on normal exit they are killed here.
    // SAFETY: plain syscall on our own process group.
    unsafe {
        libc::kill(-(child.id() as libc::pid_t), libc::SIGKILL);
    }
    let stderr_bytes = stderr.join().unwrap_or_default();
    let stderr_excerpt = truncate_utf8(&stderr_bytes, STDERR_LIMIT);

    let status = if timed_out {
        ExecutionStatus::Timeout
    } else if exit.success() {
        ExecutionStatus::Pass
    } else if exit.signal().is_some()
        || command
            .resource_markers
            .iter()
            .any(|m| stderr_excerpt.contains(m.as_str()))
    {
        ExecutionStatus::ResourceKilled
    } else if command
        .assertion_markers
        .iter()
        .any(|m| stderr_excerpt.contains(m.as_str()))
    {
        ExecutionStatus::AssertionFailed
    } else {
        ExecutionStatus::RuntimeError
    };

    Ok(ExecutionResult {
        status,
        duration,
        stderr_excerpt,
    })
}

/// Runs `jobs` on at most `workers` threads and returns results in job order.
/// The first error stops dispatching further jobs.
pub(crate) fn run_pool<T, R, E, F>(jobs: &[T], workers: usize, f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Sync,
{
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let slots: Vec<Mutex<Option<R>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let first_error: Mutex<Option<E>> = Mutex::new(None);

    thread::scope(|scope| {
        for _ in 0..workers.max(1).min(jobs.len().max(1)) {
            scope.spawn(|| loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                match f(&jobs[i]) {
                    Ok(r) => *slots[i].lock().expect("slot lock") = Some(r),
                    Err(e) => {
                        abort.store(true, Ordering::SeqCst);
                        first_error.lock().expect("error lock").get_or_insert(e);
                        break;
                    }
                }
            });
        }
    });

    if let Some(e) = first_error.into_inner().expect("error lock") {
        return Err(e);
    }
    Ok(slots
        .into_iter()
        .map(|s| s.into_inner().expect("slot lock").expect("every job ran"))
        .collect())
}

/// A cell result already known from a previous run.
pub type KnownCells = HashMap<(usize, usize), ExecutionResult>;

/// Source of per-cell outcomes; the real implementation shells out, tests can
/// substitute a table.
pub trait CellExecutor: Sync {
    fn run(&self, script: &str) -> Result<ExecutionResult, SandboxError>;
}

pub struct ProcessExecutor {
    pub limits: ExecutionLimits,
    pub command: SandboxCommand,
}

impl CellExecutor for ProcessExecutor {
    fn run(&self, script: &str) -> Result<ExecutionResult, SandboxError> {
        execute(script, &self.limits, &self.command)
    }
}

/// Fills every cell of the matrix. Cells whose code or test did not parse are
/// marked skipped without running; cells in `known` are reused. `on_executed`
/// sees every freshly executed cell as it completes.
pub fn build_matrix_with<X: CellExecutor + ?Sized>(
    cs: &CandidateSet,
    executor: &X,
    workers: usize,
    known: &KnownCells,
    on_executed: &(dyn Fn(usize, usize, &ExecutionResult) + Sync),
) -> Result<FeedbackMatrix, SandboxError> {
    let n = cs.len();
    let jobs: Vec<(usize, usize)> = (0..n).flat_map(|j| (0..n).map(move |k| (j, k))).collect();
    let cells = run_pool(&jobs, workers, |&(j, k)| -> Result<ExecutionResult, SandboxError> {
        let code = &cs.candidates[j];
        let test = &cs.candidates[k];
        if !code.is_ok() || !test.is_ok() {
            return Ok(ExecutionResult::skipped());
        }
        if let Some(hit) = known.get(&(j, k)) {
            return Ok(hit.clone());
        }
        let result = executor.run(&concat_for_execution(&code.code, &test.test))?;
        on_executed(j, k, &result);
        Ok(result)
    })?;
    Ok(FeedbackMatrix::from_cells(cs.id(), n, cells))
}

/// Executes every code × test concatenation of `cs`.
pub fn build_matrix(
    cs: &CandidateSet,
    limits: &ExecutionLimits,
    command: &SandboxCommand,
) -> Result<FeedbackMatrix, SandboxError> {
    limits.validate()?;
    let executor = ProcessExecutor {
        limits: limits.clone(),
        command: command.clone(),
    };
    build_matrix_with(cs, &executor, limits.max_workers, &KnownCells::new(), &|_, _, _| {})
}
