//! Channels start processes on the resource a provider manages.

use std::io;
use std::os::unix::process::CommandExt;
use std::process::{Child, Command, Stdio};

use super::LaunchCommand;

pub trait Channel: Send + Sync {
    /// Starts `cmd` in a new process group so the whole tree can be
    /// signalled at once.
    fn spawn(&self, cmd: &LaunchCommand) -> io::Result<Child>;
}

/// Starts processes on the local host.
#[derive(Debug, Clone, Copy, Default)]
pub struct LocalChannel;

impl Channel for LocalChannel {
    fn spawn(&self, cmd: &LaunchCommand) -> io::Result<Child> {
        Command::new(&cmd.program)
            .args(&cmd.args)
            .envs(&cmd.env)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::inherit())
            .process_group(0)
            .spawn()
    }
}

/// Remote-shell channel. Only the interface exists; spawning always fails.
#[derive(Debug, Clone)]
pub struct SshChannel {
    pub host: String,
}

impl Channel for SshChannel {
    fn spawn(&self, _cmd: &LaunchCommand) -> io::Result<Child> {
        Err(io::Error::new(
            io::ErrorKind::Unsupported,
            format!("ssh channel to {} is not implemented", self.host),
        ))
    }
}

/// Kills the process group led by `child` and reaps it.
pub(crate) fn kill_tree(child: &mut Child) {
    let pid = child.id() as i32;
    // SAFETY: kill(2) with a negative pid signals the process group; it has
    // no memory-safety preconditions.
    unsafe {
        libc::kill(-pid, libc::SIGKILL);
    }
    let _ = child.kill();
    let _ = child.wait();
}
