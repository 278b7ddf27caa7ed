//! Resource-limited execution of untrusted commands.
//!
//! Limits are enforced with kernel rlimits set between fork and exec
//! (CPU seconds, address space, process count, file size, no core dumps)
//! plus a supervising watchdog that owns the wall clock, resident memory and
//! output flooding. The child runs in its own process group; the whole group
//! and every descendant observed while it ran are killed before `run`
//! returns.
//!
//! This is a lightweight sandbox: no network or filesystem namespaces.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::Read;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

pub const DEFAULT_MAX_OUTPUT_BYTES: usize = 1 << 20;
pub const DEFAULT_MAX_PROCESSES: u64 = 16;
pub const DEFAULT_MAX_FILE_BYTES: u64 = 64 << 20;
/// Output beyond `max_output_bytes * FLOOD_FACTOR` kills the run.
pub const FLOOD_FACTOR: u64 = 16;
pub const GRACE: Duration = Duration::from_secs(2);

const MEMORY_MARKERS: &[&str] = &[
    "MemoryError",
    "std::bad_alloc",
    "Cannot allocate memory",
    "out of memory",
    "Out of memory",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ResourceLimits {
    pub cpu_s: f64,
    pub mem_bytes: u64,
    pub wall_s: f64,
    pub max_output_bytes: usize,
    pub max_processes: u64,
    pub max_file_bytes: u64,
}

impl ResourceLimits {
    pub fn new(cpu_s: f64, mem_bytes: u64, wall_s: f64) -> Self {
        ResourceLimits {
            cpu_s,
            mem_bytes,
            wall_s: wall_s.max(cpu_s),
            max_output_bytes: DEFAULT_MAX_OUTPUT_BYTES,
            max_processes: DEFAULT_MAX_PROCESSES,
            max_file_bytes: DEFAULT_MAX_FILE_BYTES,
        }
    }

    fn validate(&self) -> Result<(), SandboxError> {
        let ok = self.cpu_s > 0.0
            && self.mem_bytes > 0
            && self.wall_s >= self.cpu_s
            && self.max_output_bytes > 0
            && self.max_processes > 0;
        if ok {
            Ok(())
        } else {
            Err(SandboxError::InvalidLimits(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verdict {
    Ok,
    TimeLimit,
    MemoryLimit,
    RuntimeError,
    OutputLimit,
    SandboxError,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Captured {
    pub bytes: Vec<u8>,
    pub truncated: bool,
    pub total_bytes: u64,
}

impl Captured {
    pub fn text(&self) -> String {
        String::from_utf8_lossy(&self.bytes).into_owned()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub verdict: Verdict,
    pub exit_code: Option<i32>,
    pub term_signal: Option<i32>,
    pub cpu_used_s: f64,
    pub wall_used_s: f64,
    pub peak_mem_bytes: u64,
    pub stdout: Captured,
    pub stderr: Captured,
}

impl RunOutcome {
    pub fn truncated(&self) -> bool {
        self.stdout.truncated || self.stderr.truncated
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SandboxError {
    #[error("empty command")]
    EmptyCommand,
    #[error("workdir {0} is not a directory")]
    Workdir(PathBuf),
    #[error("cannot open stdin source {path}: {source}")]
    Stdin {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid limits: {0}")]
    InvalidLimits(String),
    #[error("failed to start child: {0}")]
    Spawn(std::io::Error),
}

struct Stream {
    buf: Mutex<Captured>,
}

fn pump(
    mut src: impl Read,
    dst: Arc<Stream>,
    cap: usize,
    total: Arc<AtomicU64>,
    flood_at: u64,
    flooded: Arc<AtomicBool>,
) {
    let mut chunk = [0u8; 64 * 1024];
    loop {
        let n = match src.read(&mut chunk) {
            Ok(0) | Err(_) => break,
            Ok(n) => n,
        };
        {
            let mut b = dst.buf.lock().unwrap_or_else(|e| e.into_inner());
            b.total_bytes += n as u64;
            let room = cap.saturating_sub(b.bytes.len());
            if room >= n {
                b.bytes.extend_from_slice(&chunk[..n]);
            } else {
                b.bytes.extend_from_slice(&chunk[..room]);
                b.truncated = true;
            }
        }
        if total.fetch_add(n as u64, Ordering::Relaxed) + n as u64 > flood_at {
            flooded.store(true, Ordering::Relaxed);
        }
    }
}

fn set_rlimit(resource: libc::__rlimit_resource_t, soft: u64, hard: u64) -> std::io::Result<()> {
    let lim = libc::rlimit {
        rlim_cur: soft as libc::rlim_t,
        rlim_max: hard as libc::rlim_t,
    };
    // SAFETY: plain syscall on a valid struct; async-signal-safe after fork.
    if unsafe { libc::setrlimit(resource, &lim) } != 0 {
        return Err(std::io::Error::last_os_error());
    }
    Ok(())
}

fn kill_group(pgid: i32) {
    // SAFETY: signalling a process group we created.
    unsafe {
        libc::killpg(pgid, libc::SIGKILL);
    }
}

fn kill_pid(pid: i32) {
    // SAFETY: best-effort kill of an observed descendant.
    unsafe {
        libc::kill(pid, libc::SIGKILL);
    }
}

/// (pid, ppid, pgrp, state, cpu ticks) from `/proc/<pid>/stat`. The ticks
/// include reaped children.
fn proc_stat(pid: i32) -> Option<(i32, i32, i32, char, u64)> {
    let s = std::fs::read_to_string(format!("/proc/{pid}/stat")).ok()?;
    let close = s.rfind(')')?;
    let rest: Vec<&str> = s[close + 2..].split_whitespace().collect();
    let state = rest.first()?.chars().next()?;
    let ppid = rest.get(1)?.parse().ok()?;
    let pgrp = rest.get(2)?.parse().ok()?;
    let utime: u64 = rest.get(11)?.parse().ok()?;
    let stime: u64 = rest.get(12)?.parse().ok()?;
    let cutime: u64 = rest.get(13)?.parse().unwrap_or(0);
    let cstime: u64 = rest.get(14)?.parse().unwrap_or(0);
    Some((pid, ppid, pgrp, state, utime + stime + cutime + cstime))
}

fn all_procs() -> Vec<(i32, i32, i32, char, u64)> {
    let Ok(rd) = std::fs::read_dir("/proc") else {
        return Vec::new();
    };
    rd.filter_map(Result::ok)
        .filter_map(|e| e.file_name().to_str()?.parse::<i32>().ok())
        .filter_map(proc_stat)
        .collect()
}

/// Live (non-zombie) descendants of `root`, or members of its process group.
pub fn live_descendants(root: i32) -> BTreeSet<i32> {
    let procs = all_procs();
    let mut found: BTreeSet<i32> = procs
        .iter()
        .filter(|p| p.2 == root && p.0 != root && p.3 != 'Z')
        .map(|p| p.0)
        .collect();
    let mut visited = BTreeSet::from([root]);
    let mut frontier = vec![root];
    while let Some(parent) = frontier.pop() {
        for p in procs.iter().filter(|p| p.1 == parent && p.3 != 'Z') {
            if visited.insert(p.0) {
                found.insert(p.0);
                frontier.push(p.0);
            }
        }
    }
    found
}

fn status_kib(pid: i32, key: &str) -> Option<u64> {
    let s = std::fs::read_to_string(format!("/proc/{pid}/status")).ok()?;
    s.lines()
        .find(|l| l.starts_with(key))?
        .split_whitespace()
        .nth(1)?
        .parse()
        .ok()
}

fn ticks_per_second() -> f64 {
    // SAFETY: sysconf has no preconditions.
    let t = unsafe { libc::sysconf(libc::_SC_CLK_TCK) };
    if t > 0 {
        t as f64
    } else {
        100.0
    }
}

/// Runs `command` in `workdir` under `limits`.
///
/// Misbehaving children never produce an `Err`; those are verdicts. `Err` is
/// reserved for engine faults such as a missing workdir.
pub fn run(
    command: &[String],
    stdin_source: Option<&Path>,
    workdir: &Path,
    limits: &ResourceLimits,
) -> Result<RunOutcome, SandboxError> {
    let (program, args) = command.split_first().ok_or(SandboxError::EmptyCommand)?;
    if !workdir.is_dir() {
        return Err(SandboxError::Workdir(workdir.to_path_buf()));
    }
    limits.validate()?;
    let stdin = match stdin_source {
        Some(p) => Stdio::from(File::open(p).map_err(|source| SandboxError::Stdin {
            path: p.to_path_buf(),
            source,
        })?),
        None => Stdio::null(),
    };

    // The watchdog enforces the exact limit; the rlimit is a backstop.
    let cpu_soft = limits.cpu_s.ceil().max(1.0) as u64 + 1;
    let mem = limits.mem_bytes;
    let nproc = limits.max_processes;
    let fsize = limits.max_file_bytes;

    let mut cmd = Command::new(program);
    cmd.args(args)
        .current_dir(workdir)
        .env_clear()
        .env(
            "PATH",
            std::env::var("PATH").unwrap_or_else(|_| "/usr/local/bin:/usr/bin:/bin".into()),
        )
        .env("HOME", workdir)
        .env("TMPDIR", workdir)
        .env("LANG", "C.UTF-8")
        .stdin(stdin)
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    // SAFETY: only async-signal-safe syscalls run between fork and exec.
    unsafe {
        cmd.pre_exec(move || {
            if libc::setpgid(0, 0) != 0 {
                return Err(std::io::Error::last_os_error());
            }
            set_rlimit(libc::RLIMIT_CPU, cpu_soft, cpu_soft + 1)?;
            set_rlimit(libc::RLIMIT_AS, mem, mem)?;
            set_rlimit(libc::RLIMIT_NPROC, nproc, nproc)?;
            set_rlimit(libc::RLIMIT_FSIZE, fsize, fsize)?;
            set_rlimit(libc::RLIMIT_CORE, 0, 0)?;
            Ok(())
        });
    }

    let start = Instant::now();
    let mut child = match cmd.spawn() {
        Ok(c) => c,
        Err(e)
            if matches!(
                e.kind(),
                std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied
            ) =>
        {
            let msg = format!("cannot execute `{program}`: {e}\n");
            return Ok(RunOutcome {
                verdict: Verdict::RuntimeError,
                exit_code: None,
                term_signal: None,
                cpu_used_s: 0.0,
                wall_used_s: start.elapsed().as_secs_f64(),
                peak_mem_bytes: 0,
                stdout: Captured::default(),
                stderr: Captured {
                    total_bytes: msg.len() as u64,
                    bytes: msg.into_bytes(),
                    truncated: false,
                },
            });
        }
        Err(e) => return Err(SandboxError::Spawn(e)),
    };
    let pid = child.id() as i32;

    let total = Arc::new(AtomicU64::new(0));
    let flooded = Arc::new(AtomicBool::new(false));
    let flood_at = (limits.max_output_bytes as u64).saturating_mul(FLOOD_FACTOR);
    let out_stream = Arc::new(Stream {
        buf: Mutex::new(Captured::default()),
    });
    let err_stream = Arc::new(Stream {
        buf: Mutex::new(Captured::default()),
    });
    let (done_tx, done_rx) = mpsc::channel::<()>();
    let mut readers = 0;
    if let Some(out) = child.stdout.take() {
        let (s, t, f, tx) = (out_stream.clone(), total.clone(), flooded.clone(), done_tx.clone());
        let cap = limits.max_output_bytes;
        thread::spawn(move || {
            pump(out, s, cap, t, flood_at, f);
            let _ = tx.send(());
        });
        readers += 1;
    }
    if let Some(err) = child.stderr.take() {
        let (s, t, f, tx) = (err_stream.clone(), total.clone(), flooded.clone(), done_tx.clone());
        let cap = limits.max_output_bytes;
        thread::spawn(move || {
            pump(err, s, cap, t, flood_at, f);
            let _ = tx.send(());
        });
        readers += 1;
    }
    drop(done_tx);

    let tick = ticks_per_second();
    let wall_limit = Duration::from_secs_f64(limits.wall_s);
    let mut seen: BTreeSet<i32> = BTreeSet::new();
    let mut wall_killed = false;
    let mut cpu_killed = false;
    let mut observed_cpu: f64 = 0.0;
    let mut mem_killed = false;
    let mut flood_killed = false;
    let mut peak_kib: u64 = 0;
    let mut last_scan = Instant::now() - Duration::from_secs(1);
    let mut status: libc::c_int = 0;
    // SAFETY: zeroed rusage is a valid out-parameter.
    let mut usage: libc::rusage = unsafe { std::mem::zeroed() };
    let mut sleep = Duration::from_millis(2);
    let mut wait_failed = false;

    loop {
        // SAFETY: waiting on our own child with valid out-pointers.
        let r = unsafe { libc::wait4(pid, &mut status, libc::WNOHANG, &mut usage) };
        if r == pid {
            break;
        }
        if r < 0 {
            let e = std::io::Error::last_os_error();
            if e.kind() == std::io::ErrorKind::Interrupted {
                continue;
            }
            wait_failed = true;
            kill_group(pid);
            break;
        }
        let killed = wall_killed || cpu_killed || mem_killed || flood_killed;
        if !killed {
            if start.elapsed() >= wall_limit {
                wall_killed = true;
            } else if flooded.load(Ordering::Relaxed) {
                flood_killed = true;
            } else if let Some(st) = proc_stat(pid) {
                observed_cpu = observed_cpu.max(st.4 as f64 / tick);
                if observed_cpu >= limits.cpu_s {
                    cpu_killed = true;
                }
            }
            if let Some(rss) = status_kib(pid, "VmRSS:") {
                peak_kib = peak_kib.max(status_kib(pid, "VmPeak:").unwrap_or(rss));
                if rss.saturating_mul(1024) > limits.mem_bytes {
                    mem_killed = true;
                }
            }
            if wall_killed || cpu_killed || mem_killed || flood_killed {
                kill_group(pid);
                seen.iter().for_each(|&p| kill_pid(p));
            }
        } else {
            kill_group(pid);
        }
        if last_scan.elapsed() >= Duration::from_millis(50) {
            seen.extend(live_descendants(pid));
            last_scan = Instant::now();
        }
        thread::sleep(sleep);
        sleep = (sleep * 2).min(Duration::from_millis(20));
    }
    let wall_used_s = start.elapsed().as_secs_f64();

    // Reap everything left in the group and every descendant we observed.
    kill_group(pid);
    seen.extend(live_descendants(pid));
    for &p in &seen {
        kill_pid(p);
    }
    let deadline = Instant::now() + Duration::from_millis(500);
    while Instant::now() < deadline {
        let alive = seen.iter().any(|&p| proc_stat(p).is_some_and(|s| s.3 != 'Z'))
            || all_procs().iter().any(|p| p.2 == pid && p.3 != 'Z');
        if !alive {
            break;
        }
        thread::sleep(Duration::from_millis(5));
    }

    for _ in 0..readers {
        if done_rx.recv_timeout(Duration::from_secs(1)).is_err() {
            // an escaped descendant still holds the pipe; keep what we have
            log::warn!("sandbox_reader_timeout pid={pid}");
            break;
        }
    }
    let stdout = out_stream.buf.lock().unwrap_or_else(|e| e.into_inner()).clone();
    let stderr = err_stream.buf.lock().unwrap_or_else(|e| e.into_inner()).clone();

    let cpu_used_s = usage.ru_utime.tv_sec as f64
        + usage.ru_utime.tv_usec as f64 / 1e6
        + usage.ru_stime.tv_sec as f64
        + usage.ru_stime.tv_usec as f64 / 1e6;
    let cpu_used_s = cpu_used_s.max(observed_cpu);
    let maxrss_bytes = (usage.ru_maxrss as u64).saturating_mul(1024);
    let peak_mem_bytes = maxrss_bytes.max(peak_kib.saturating_mul(1024));

    let exit = std::process::ExitStatus::from_raw(status);
    let (exit_code, term_signal) = if wait_failed {
        (None, None)
    } else {
        (exit.code(), exit.signal())
    };

    let verdict = if wait_failed {
        Verdict::SandboxError
    } else if flood_killed {
        Verdict::OutputLimit
    } else if wall_killed || cpu_killed || cpu_used_s >= limits.cpu_s || term_signal == Some(libc::SIGXCPU) {
        Verdict::TimeLimit
    } else if mem_killed {
        Verdict::MemoryLimit
    } else if exit_code == Some(0) {
        Verdict::Ok
    } else if memory_cap_hit(limits, peak_mem_bytes, &stderr) {
        Verdict::MemoryLimit
    } else {
        Verdict::RuntimeError
    };

    Ok(RunOutcome {
        verdict,
        exit_code,
        term_signal,
        cpu_used_s,
        wall_used_s,
        peak_mem_bytes,
        stdout,
        stderr,
    })
}

/// Allocation failures under an address-space cap surface either as a
/// signal or as a runtime's own out-of-memory error; both count as hitting
/// the cap when usage came close to it or the runtime said so.
fn memory_cap_hit(limits: &ResourceLimits, peak: u64, stderr: &Captured) -> bool {
    if peak as f64 >= 0.9 * limits.mem_bytes as f64 {
        return true;
    }
    let text = String::from_utf8_lossy(&stderr.bytes);
    MEMORY_MARKERS.iter().any(|m| text.contains(m))
}
