//! Process-level confinement for plugin workers: resource limits, a private
//! process group, and (where the kernel supports Landlock) write access
//! restricted to the worker's scratch directory.

use std::ffi::CString;
use std::io;
use std::os::fd::{FromRawFd, OwnedFd, RawFd};
use std::os::unix::ffi::OsStrExt;
use std::os::unix::process::CommandExt;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;

const ACCESS_FS_WRITE_FILE: u64 = 1 << 1;
const ACCESS_FS_REMOVE_DIR: u64 = 1 << 4;
const ACCESS_FS_REMOVE_FILE: u64 = 1 << 5;
const ACCESS_FS_MAKE_CHAR: u64 = 1 << 6;
const ACCESS_FS_MAKE_DIR: u64 = 1 << 7;
const ACCESS_FS_MAKE_REG: u64 = 1 << 8;
const ACCESS_FS_MAKE_SOCK: u64 = 1 << 9;
const ACCESS_FS_MAKE_FIFO: u64 = 1 << 10;
const ACCESS_FS_MAKE_BLOCK: u64 = 1 << 11;
const ACCESS_FS_MAKE_SYM: u64 = 1 << 12;
const ACCESS_FS_REFER: u64 = 1 << 13;
const ACCESS_FS_TRUNCATE: u64 = 1 << 14;

const CREATE_RULESET_VERSION: u32 = 1 << 0;
const RULE_PATH_BENEATH: libc::c_int = 1;

#[repr(C)]
struct RulesetAttr {
    handled_access_fs: u64,
}

#[repr(C, packed)]
struct PathBeneathAttr {
    allowed_access: u64,
    parent_fd: i32,
}

/// Landlock ABI version supported by the running kernel, or `None`.
pub fn landlock_abi() -> Option<u32> {
    static ABI: OnceLock<Option<u32>> = OnceLock::new();
    *ABI.get_or_init(|| {
        let ret = unsafe {
            libc::syscall(
                libc::SYS_landlock_create_ruleset,
                std::ptr::null::<RulesetAttr>(),
                0usize,
                CREATE_RULESET_VERSION,
            )
        };
        (ret > 0).then_some(ret as u32)
    })
}

fn write_rights(abi: u32) -> u64 {
    let mut rights = ACCESS_FS_WRITE_FILE
        | ACCESS_FS_REMOVE_DIR
        | ACCESS_FS_REMOVE_FILE
        | ACCESS_FS_MAKE_CHAR
        | ACCESS_FS_MAKE_DIR
        | ACCESS_FS_MAKE_REG
        | ACCESS_FS_MAKE_SOCK
        | ACCESS_FS_MAKE_FIFO
        | ACCESS_FS_MAKE_BLOCK
        | ACCESS_FS_MAKE_SYM;
    if abi >= 2 {
        rights |= ACCESS_FS_REFER;
    }
    if abi >= 3 {
        rights |= ACCESS_FS_TRUNCATE;
    }
    rights
}

fn open_path(path: &Path) -> io::Result<OwnedFd> {
    let c = CString::new(path.as_os_str().as_bytes())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "path contains NUL"))?;
    let fd = unsafe { libc::open(c.as_ptr(), libc::O_PATH | libc::O_CLOEXEC) };
    if fd < 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(unsafe { OwnedFd::from_raw_fd(fd) })
}

fn add_rule(ruleset: RawFd, path: &Path, allowed: u64) -> io::Result<()> {
    let target = open_path(path)?;
    let attr = PathBeneathAttr {
        allowed_access: allowed,
        parent_fd: std::os::fd::AsRawFd::as_raw_fd(&target),
    };
    let ret = unsafe {
        libc::syscall(
            libc::SYS_landlock_add_rule,
            ruleset,
            RULE_PATH_BENEATH,
            &attr as *const PathBeneathAttr,
            0u32,
        )
    };
    if ret < 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(())
}

/// Builds a ruleset that denies filesystem writes everywhere except beneath
/// `scratch` (and `/dev/null`). Returns `Ok(None)` when Landlock is
/// unavailable. The fd is close-on-exec; the child applies it in `pre_exec`.
pub fn write_confinement(scratch: &Path) -> io::Result<Option<OwnedFd>> {
    let Some(abi) = landlock_abi() else {
        return Ok(None);
    };
    let rights = write_rights(abi);
    let attr = RulesetAttr {
        handled_access_fs: rights,
    };
    let fd = unsafe {
        libc::syscall(
            libc::SYS_landlock_create_ruleset,
            &attr as *const RulesetAttr,
            std::mem::size_of::<RulesetAttr>(),
            0u32,
        )
    };
    if fd < 0 {
        return Err(io::Error::last_os_error());
    }
    let ruleset = unsafe { OwnedFd::from_raw_fd(fd as RawFd) };
    let raw = std::os::fd::AsRawFd::as_raw_fd(&ruleset);
    add_rule(raw, scratch, rights)?;
    let mut file_rights = ACCESS_FS_WRITE_FILE;
    if abi >= 3 {
        file_rights |= ACCESS_FS_TRUNCATE;
    }
    add_rule(raw, Path::new("/dev/null"), file_rights)?;
    Ok(Some(ruleset))
}

#[derive(Debug, Clone, Copy)]
pub struct ChildLimits {
    pub cpu_seconds: u64,
    pub address_space_bytes: u64,
}

/// Installs the post-fork, pre-exec setup: own process group, rlimits, and
/// the optional Landlock ruleset. Only async-signal-safe calls run in the
/// child.
pub fn configure(cmd: &mut Command, limits: ChildLimits, ruleset: Option<RawFd>) {
    cmd.process_group(0);
    unsafe {
        cmd.pre_exec(move || {
            let cpu = libc::rlimit {
                rlim_cur: limits.cpu_seconds,
                rlim_max: limits.cpu_seconds + 1,
            };
            if libc::setrlimit(libc::RLIMIT_CPU, &cpu) != 0 {
                return Err(io::Error::last_os_error());
            }
            let mem = libc::rlimit {
                rlim_cur: limits.address_space_bytes,
                rlim_max: limits.address_space_bytes,
            };
            if libc::setrlimit(libc::RLIMIT_AS, &mem) != 0 {
                return Err(io::Error::last_os_error());
            }
            let core = libc::rlimit {
                rlim_cur: 0,
                rlim_max: 0,
            };
            libc::setrlimit(libc::RLIMIT_CORE, &core);
            if let Some(fd) = ruleset {
                if libc::prctl(libc::PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0) != 0 {
                    return Err(io::Error::last_os_error());
                }
                if libc::syscall(libc::SYS_landlock_restrict_self, fd, 0u32) != 0 {
                    return Err(io::Error::last_os_error());
                }
            }
            Ok(())
        });
    }
}

/// Sends `signal` to every process in the worker's group.
pub fn kill_group(pgid: u32, signal: libc::c_int) {
    unsafe {
        libc::kill(-(pgid as libc::pid_t), signal);
    }
}

pub enum WaitStatus {
    Running,
    Exited(i32),
    Signaled(i32),
}

pub struct Reaped {
    pub status: WaitStatus,
    pub cpu_seconds: f64,
}

/// Non-blocking `wait4`. Once a terminal status is returned the pid has
/// been reaped and must not be waited on again.
pub fn try_reap(pid: u32) -> io::Result<Reaped> {
    let mut status: libc::c_int = 0;
    let mut usage: libc::rusage = unsafe { std::mem::zeroed() };
    let ret = unsafe { libc::wait4(pid as libc::pid_t, &mut status, libc::WNOHANG, &mut usage) };
    if ret < 0 {
        return Err(io::Error::last_os_error());
    }
    if ret == 0 {
        return Ok(Reaped {
            status: WaitStatus::Running,
            cpu_seconds: 0.0,
        });
    }
    let tv = |t: libc::timeval| t.tv_sec as f64 + t.tv_usec as f64 / 1e6;
    let cpu_seconds = tv(usage.ru_utime) + tv(usage.ru_stime);
    let status = if libc::WIFEXITED(status) {
        WaitStatus::Exited(libc::WEXITSTATUS(status))
    } else if libc::WIFSIGNALED(status) {
        WaitStatus::Signaled(libc::WTERMSIG(status))
    } else {
        WaitStatus::Running
    };
    Ok(Reaped { status, cpu_seconds })
}

pub fn signal_name(sig: i32) -> &'static str {
    match sig {
        libc::SIGKILL => "SIGKILL",
        libc::SIGTERM => "SIGTERM",
        libc::SIGXCPU => "SIGXCPU",
        libc::SIGABRT => "SIGABRT",
        libc::SIGSEGV => "SIGSEGV",
        libc::SIGBUS => "SIGBUS",
        libc::SIGPIPE => "SIGPIPE",
        _ => "signal",
    }
}
