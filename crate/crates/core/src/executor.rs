//! Runs candidate programs against their unit tests in throwaway subprocess
//! sandboxes and classifies each run as a compile error, runtime error,
//! partial pass or full pass.
//!
//! A sandbox is a fresh scratch directory, a child process in its own process
//! group with an empty environment, rlimits on address space, CPU time and
//! file size, and (where the kernel allows unprivileged namespaces) no network.
//! That is process isolation, not a security boundary: candidate code is
//! untrusted and should only be run on a disposable host.
//!
//! Each test runs in its own interpreter process. A run goes through three
//! phases:
//!
//! 1. syntax check (`RunnerSpec::check_args`); failure is a compile error;
//! 2. load the candidate on its own; a crash or timeout is a runtime error;
//! 3. candidate + test `i` for every test; the passed/total weights decide
//!    between runtime error (nothing passed), partial pass and all pass.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use crate::datamodel::{
    CandidateResponse, ExecutionOutcome, ExecutionRecord, Extra, ProgrammingProblem, Situation,
    TestCase,
};

/// Stands in for the scratch dir in stderr excerpts.
pub const SANDBOX_PLACEHOLDER: &str = "<sandbox>";

pub const TIMEOUT_MARKER: &str = "[timeout]";
const FILE_SLOT: &str = "{file}";

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error("runner executable {0:?} not found")]
    RunnerNotFound(String),
    #[error("invalid sandbox limits: {0}")]
    InvalidLimits(String),
    #[error("sandbox i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SandboxLimits {
    pub wall_timeout_ms: u64,
    pub memory_limit_mb: u64,
    pub max_output_bytes: usize,
}

impl Default for SandboxLimits {
    fn default() -> Self {
        Self {
            wall_timeout_ms: 10_000,
            memory_limit_mb: 512,
            max_output_bytes: 65_536,
        }
    }
}

impl SandboxLimits {
    pub fn validate(&self) -> Result<(), ExecError> {
        if self.wall_timeout_ms == 0 || self.memory_limit_mb == 0 || self.max_output_bytes == 0 {
            return Err(ExecError::InvalidLimits(format!("all limits must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// How to syntax-check and run a source file. `{file}` in an argument is
/// replaced by the path of the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunnerSpec {
    pub program: String,
    pub check_args: Vec<String>,
    pub run_args: Vec<String>,
    pub extension: String,
}

impl RunnerSpec {
    pub fn python3() -> Self {
        Self {
            program: "python3".into(),
            check_args: vec![
                "-I".into(),
                "-c".into(),
                "import sys; compile(open(sys.argv[1], encoding='utf-8').read(), sys.argv[1], 'exec')"
                    .into(),
                FILE_SLOT.into(),
            ],
            run_args: vec!["-I".into(), FILE_SLOT.into()],
            extension: "py".into(),
        }
    }

    /// Absolute path of the runner program, searched on `PATH` when the name
    /// has no slash.
    pub fn resolve(&self) -> Result<PathBuf, ExecError> {
        let not_found = || ExecError::RunnerNotFound(self.program.clone());
        if self.program.contains('/') {
            let p = PathBuf::from(&self.program);
            return if p.is_file() { Ok(p) } else { Err(not_found()) };
        }
        let path = std::env::var_os("PATH").ok_or_else(not_found)?;
        std::env::split_paths(&path)
            .map(|dir| dir.join(&self.program))
            .find(|p| p.is_file())
            .ok_or_else(not_found)
    }
}

impl Default for RunnerSpec {
    fn default() -> Self {
        Self::python3()
    }
}

/// Everything the executor needs besides the candidates themselves.
#[derive(Debug, Clone)]
pub struct Executor {
    pub runner: RunnerSpec,
    pub limits: SandboxLimits,
    /// Parent directory for sandbox scratch dirs; the system temp dir if unset.
    pub scratch_root: Option<PathBuf>,
    /// Keep the scratch dirs of runs that did not pass every test.
    pub keep_failures: bool,
    pub isolate_network: bool,
}

impl Executor {
    pub fn new(runner: RunnerSpec, limits: SandboxLimits) -> Self {
        Self {
            runner,
            limits,
            scratch_root: None,
            keep_failures: false,
            isolate_network: true,
        }
    }

    pub fn run_candidate(&self, code: &str, tests: &[TestCase]) -> Result<ExecutionOutcome, ExecError> {
        self.limits.validate()?;
        let program = self.runner.resolve()?;
        self.run_resolved(&program, code, tests)
    }

    fn run_resolved(&self, program: &Path, code: &str, tests: &[TestCase]) -> Result<ExecutionOutcome, ExecError> {
        let started = Instant::now();
        let mut builder = tempfile::Builder::new();
        builder.prefix("rrtf-sandbox-");
        let dir = match &self.scratch_root {
            Some(root) => {
                fs::create_dir_all(root)?;
                builder.tempdir_in(root)?
            }
            None => builder.tempdir()?,
        };
        let sandbox = Sandbox {
            dir: dir.path(),
            program,
            runner: &self.runner,
            limits: &self.limits,
            isolate_network: self.isolate_network,
        };
        let (situation, stderr) = sandbox.classify(code, tests)?;
        let stderr = scrub_dir(&stderr, dir.path());
        if self.keep_failures && !matches!(situation, Situation::AllPass { .. }) {
            let kept = dir.keep();
            log::info!("kept sandbox {}", kept.display());
        }
        Ok(ExecutionOutcome {
            situation,
            wall_time_ms: started.elapsed().as_millis() as u64,
            stderr_excerpt: truncate_utf8(&stderr, self.limits.max_output_bytes).to_string(),
        })
    }

    /// Runs every candidate against its problem's tests on a pool of
    /// `workers` threads. Output order follows `candidates`.
    pub fn execute_batch(
        &self,
        candidates: &[CandidateResponse],
        problems: &HashMap<String, ProgrammingProblem>,
        workers: usize,
    ) -> Result<Vec<ExecutionRecord>, ExecError> {
        self.limits.validate()?;
        let program = self.runner.resolve()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| ExecError::Pool(e.to_string()))?;
        pool.install(|| {
            use rayon::prelude::*;
            candidates
                .par_iter()
                .map(|cand| self.execute_one(&program, cand, problems))
                .collect()
        })
    }

    fn execute_one(
        &self,
        program: &Path,
        cand: &CandidateResponse,
        problems: &HashMap<String, ProgrammingProblem>,
    ) -> Result<ExecutionRecord, ExecError> {
        let mut record = ExecutionRecord {
            candidate_id: cand.id.clone(),
            problem_id: cand.problem_id.clone(),
            outcome: None,
            error: None,
            extra: Extra::new(),
        };
        let Some(problem) = problems.get(&cand.problem_id) else {
            record.error = Some(format!("unknown problem id {:?}", cand.problem_id));
            return Ok(record);
        };
        if problem.tests.is_empty() {
            record.error = Some(format!("problem {:?} has no tests", problem.id));
            return Ok(record);
        }
        let code = assemble_program(&problem.signature, &cand.extracted_code);
        match self.run_resolved(program, &code, &problem.tests) {
            Ok(outcome) => record.outcome = Some(outcome),
            Err(ExecError::Io(e)) => record.error = Some(format!("sandbox i/o: {e}")),
            Err(e) => return Err(e),
        }
        Ok(record)
    }
}

/// Runs one candidate with a default [`Executor`] for `runner` and `limits`.
pub fn run_candidate(
    code: &str,
    tests: &[TestCase],
    limits: &SandboxLimits,
    runner: &RunnerSpec,
) -> Result<ExecutionOutcome, ExecError> {
    Executor::new(runner.clone(), limits.clone()).run_candidate(code, tests)
}

/// Pulls the contents of fenced code blocks out of a model response.
///
/// Blocks are concatenated first to last with a newline between them. The
/// info string after the opening fence (e.g. `python`) is dropped, as is the
/// final newline before the closing fence. Text without a complete fenced
/// block is returned unchanged.
pub fn extract_code(raw: &str) -> String {
    const FENCE: &str = "```";
    let mut blocks: Vec<&str> = Vec::new();
    let mut rest = raw;
    while let Some(open) = rest.find(FENCE) {
        let after_open = &rest[open + FENCE.len()..];
        let body_start = match after_open.find('\n') {
            Some(nl) => nl + 1,
            None => break,
        };
        let body = &after_open[body_start..];
        let Some(close) = body.find(FENCE) else { break };
        let block = &body[..close];
        blocks.push(block.strip_suffix('\n').unwrap_or(block));
        rest = &body[close + FENCE.len()..];
    }
    if blocks.is_empty() {
        raw.to_string()
    } else {
        blocks.join("\n")
    }
}

/// Builds the program to run from a problem signature and extracted code.
/// Code that already contains the signature is used as is; otherwise it is
/// taken to be the continuation of the signature line.
pub fn assemble_program(signature: &str, code: &str) -> String {
    let sig = signature.trim();
    if sig.is_empty() || code.contains(sig) {
        return code.to_string();
    }
    if code.starts_with('\n') {
        format!("{sig}{code}")
    } else {
        format!("{sig}\n{code}")
    }
}

/// Replaces the scratch dir in `text` with a fixed name so outcomes do not
/// depend on where the sandbox happened to live.
fn scrub_dir(text: &str, dir: &Path) -> String {
    let mut out = text.replace(&*dir.to_string_lossy(), SANDBOX_PLACEHOLDER);
    if let Ok(real) = dir.canonicalize() {
        out = out.replace(&*real.to_string_lossy(), SANDBOX_PLACEHOLDER);
    }
    out
}

fn truncate_utf8(s: &str, max: usize) -> &str {
    if s.len() <= max {
        return s;
    }
    let mut end = max;
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    &s[..end]
}

struct Sandbox<'a> {
    dir: &'a Path,
    program: &'a Path,
    runner: &'a RunnerSpec,
    limits: &'a SandboxLimits,
    isolate_network: bool,
}

struct ProcessResult {
    success: bool,
    timed_out: bool,
    stderr: String,
}

impl Sandbox<'_> {
    fn classify(&self, code: &str, tests: &[TestCase]) -> Result<(Situation, String), ExecError> {
        let candidate = self.write_file("candidate", code)?;

        let check = self.run(&self.runner.check_args, &candidate)?;
        if check.timed_out {
            return Ok((Situation::RuntimeError, check.stderr));
        }
        if !check.success {
            return Ok((Situation::CompileError, check.stderr));
        }

        let load = self.run(&self.runner.run_args, &candidate)?;
        if !load.success {
            return Ok((Situation::RuntimeError, load.stderr));
        }

        let mut passed = 0u32;
        let mut total = 0u32;
        let mut stderr = String::new();
        for (i, test) in tests.iter().enumerate() {
            total += test.weight;
            let file = self.write_file(&format!("test_{i}"), &format!("{code}\n\n{}\n", test.code))?;
            let result = self.run(&self.runner.run_args, &file)?;
            if result.success {
                passed += test.weight;
            } else if stderr.len() < self.limits.max_output_bytes {
                stderr.push_str(&format!("--- test #{i} ---\n{}\n", result.stderr));
            }
        }
        Ok((Situation::from_counts(passed, total), stderr))
    }

    fn write_file(&self, stem: &str, contents: &str) -> Result<PathBuf, ExecError> {
        let path = self.dir.join(format!("{stem}.{}", self.runner.extension));
        fs::write(&path, contents)?;
        Ok(path)
    }

    fn run(&self, template: &[String], file: &Path) -> Result<ProcessResult, ExecError> {
        let file_arg = file.to_string_lossy();
        let args: Vec<String> = template.iter().map(|a| a.replace(FILE_SLOT, &file_arg)).collect();
        let stdout_path = self.dir.join(".stdout");
        let stderr_path = self.dir.join(".stderr");

        let mut cmd = Command::new(self.program);
        cmd.args(&args)
            .current_dir(self.dir)
            .env_clear()
            .env("PATH", "/usr/local/bin:/usr/bin:/bin")
            .env("HOME", self.dir)
            .env("LANG", "C.UTF-8")
            .stdin(Stdio::null())
            .stdout(File::create(&stdout_path)?)
            .stderr(File::create(&stderr_path)?);

        let limits = ChildLimits {
            address_space: self.limits.memory_limit_mb.saturating_mul(1024 * 1024),
            cpu_seconds: self.limits.wall_timeout_ms.div_ceil(1000) + 1,
            file_size: (self.limits.max_output_bytes as u64).saturating_mul(16).max(1 << 20),
            isolate_network: self.isolate_network,
        };
        // SAFETY: the closure only issues async-signal-safe syscalls.
        unsafe {
            cmd.pre_exec(move || limits.apply());
        }

        let mut child = match cmd.spawn() {
            Ok(c) => c,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(ExecError::RunnerNotFound(self.program.display().to_string()))
            }
            Err(e) => return Err(e.into()),
        };
        let timeout = Duration::from_millis(self.limits.wall_timeout_ms);
        let (status, timed_out) = match child.wait_timeout(timeout)? {
            Some(status) => (status, false),
            None => {
                // The child leads its own process group; take down anything it forked too.
                unsafe {
                    libc::kill(-(child.id() as libc::pid_t), libc::SIGKILL);
                }
                (child.wait()?, true)
            }
        };

        let mut stderr = read_prefix(&stderr_path, self.limits.max_output_bytes)?;
        if timed_out {
            stderr.push_str(&format!(
                "\n{TIMEOUT_MARKER} exceeded wall limit of {} ms",
                self.limits.wall_timeout_ms
            ));
        } else if !status.success() && status.code().is_none() {
            stderr.push_str(&format!("\nterminated by signal ({status})"));
        }
        Ok(ProcessResult {
            success: status.success() && !timed_out,
            timed_out,
            stderr,
        })
    }
}

fn read_prefix(path: &Path, max: usize) -> Result<String, ExecError> {
    let mut buf = Vec::new();
    File::open(path)?.take(max as u64).read_to_end(&mut buf)?;
    Ok(String::from_utf8_lossy(&buf).into_owned())
}

#[derive(Clone, Copy)]
struct ChildLimits {
    address_space: u64,
    cpu_seconds: u64,
    file_size: u64,
    isolate_network: bool,
}

impl ChildLimits {
    fn apply(&self) -> std::io::Result<()> {
        unsafe {
            if libc::setpgid(0, 0) != 0 {
                return Err(std::io::Error::last_os_error());
            }
            set_limit(libc::RLIMIT_AS, self.address_space)?;
            set_limit(libc::RLIMIT_CPU, self.cpu_seconds)?;
            set_limit(libc::RLIMIT_FSIZE, self.file_size)?;
            set_limit(libc::RLIMIT_CORE, 0)?;
            if self.isolate_network {
                // Best effort: hosts without unprivileged user namespaces run
                // the child with the parent's network.
                libc::unshare(libc::CLONE_NEWUSER | libc::CLONE_NEWNET);
            }
        }
        Ok(())
    }
}

unsafe fn set_limit(resource: libc::__rlimit_resource_t, value: u64) -> std::io::Result<()> {
    let lim = libc::rlimit {
        rlim_cur: value as libc::rlim_t,
        rlim_max: value as libc::rlim_t,
    };
    if libc::setrlimit(resource, &lim) != 0 {
        return Err(std::io::Error::last_os_error());
    }
    Ok(())
}
