//! Subprocess launch with a wall-clock limit and whole-tree termination.

use std::fs::File;
use std::path::Path;
use std::process::{Command, ExitStatus, Stdio};
use std::time::{Duration, Instant};

use std::os::unix::process::CommandExt;

const POLL: Duration = Duration::from_millis(20);

#[derive(Debug)]
pub(crate) struct Finished {
    pub status: Option<ExitStatus>,
    pub timed_out: bool,
    pub elapsed: Duration,
}

/// Runs `program args` in `cwd` with a cleared environment plus `env`,
/// stdout/stderr redirected to files. On timeout the whole process group
/// and every known descendant are killed.
pub(crate) fn run_limited(
    program: &str,
    args: &[String],
    cwd: &Path,
    env: &[(String, String)],
    stdout: &Path,
    stderr: &Path,
    timeout: Duration,
) -> std::io::Result<Finished> {
    let out = File::create(stdout)?;
    let err = File::create(stderr)?;
    let mut cmd = Command::new(program);
    cmd.args(args)
        .current_dir(cwd)
        .env_clear()
        .envs(env.iter().map(|(k, v)| (k, v)))
        .stdin(Stdio::null())
        .stdout(out)
        .stderr(err)
        .process_group(0);
    let start = Instant::now();
    let mut child = cmd.spawn()?;
    let pid = child.id() as i32;
    loop {
        if let Some(status) = child.try_wait()? {
            // reap anything the script left running in its group
            kill_tree(pid);
            return Ok(Finished {
                status: Some(status),
                timed_out: false,
                elapsed: start.elapsed(),
            });
        }
        if start.elapsed() >= timeout {
            kill_tree(pid);
            let _ = child.kill();
            let _ = child.wait();
            return Ok(Finished {
                status: None,
                timed_out: true,
                elapsed: start.elapsed(),
            });
        }
        std::thread::sleep(POLL);
    }
}

/// Parent pid from `/proc/<pid>/stat`.
fn parent_of(pid: i32) -> Option<i32> {
    let stat = std::fs::read_to_string(format!("/proc/{pid}/stat")).ok()?;
    // the command name may contain spaces; fields resume after the last ')'
    let rest = &stat[stat.rfind(')')? + 1..];
    rest.split_whitespace().nth(1)?.parse().ok()
}

/// Every live process whose ancestry reaches `root`.
pub fn descendants(root: i32) -> Vec<i32> {
    let Ok(entries) = std::fs::read_dir("/proc") else {
        return Vec::new();
    };
    let pids: Vec<i32> = entries
        .filter_map(|e| e.ok()?.file_name().to_str()?.parse().ok())
        .collect();
    let parents: Vec<(i32, i32)> = pids.iter().filter_map(|p| Some((*p, parent_of(*p)?))).collect();
    let mut found = vec![root];
    let mut i = 0;
    while i < found.len() {
        let cur = found[i];
        for (p, pp) in &parents {
            if *pp == cur && !found.contains(p) {
                found.push(*p);
            }
        }
        i += 1;
    }
    found.remove(0);
    found
}

pub fn is_alive(pid: i32) -> bool {
    // a zombie still has a /proc entry but state 'Z'
    match std::fs::read_to_string(format!("/proc/{pid}/stat")) {
        Ok(stat) => stat
            .rfind(')')
            .and_then(|i| stat[i + 1..].split_whitespace().next())
            .is_some_and(|state| state != "Z" && state != "X"),
        Err(_) => false,
    }
}

fn kill_tree(pid: i32) {
    // collect before killing: orphans get reparented once their parent dies
    let mut victims = descendants(pid);
    for extra in descendants(pid) {
        if !victims.contains(&extra) {
            victims.push(extra);
        }
    }
    // SAFETY: plain signal delivery to a process group / pids we spawned.
    unsafe {
        libc::killpg(pid, libc::SIGKILL);
        for v in &victims {
            libc::kill(*v, libc::SIGKILL);
        }
    }
}
