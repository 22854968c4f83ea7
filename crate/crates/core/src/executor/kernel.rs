//! Worker-side execution of a single task attempt.

use std::fs::File;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Arc;

use crate::app::{AppKind, AppSpec, Registry};
use crate::future::Outcome;
use crate::task::TaskError;
use crate::value::{Kwargs, TaskId, Value};

/// Function registry plus the directory under which shell tasks get their
/// per-attempt sandboxes.
#[derive(Debug, Clone)]
pub struct ExecutionKernel {
    registry: Arc<Registry>,
    sandbox_root: PathBuf,
}

impl ExecutionKernel {
    pub fn new(registry: Arc<Registry>, sandbox_root: impl Into<PathBuf>) -> Self {
        ExecutionKernel {
            registry,
            sandbox_root: sandbox_root.into(),
        }
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn sandbox_root(&self) -> &Path {
        &self.sandbox_root
    }

    pub fn sandbox_dir(&self, task_id: TaskId, attempt: u32) -> PathBuf {
        self.sandbox_root
            .join(format!("task_{}_try_{}", task_id.0, attempt))
    }

    pub fn execute(
        &self,
        task_id: TaskId,
        attempt: u32,
        app: &AppSpec,
        args: &[Value],
        kwargs: &Kwargs,
    ) -> Outcome {
        if let Some(id) = args.iter().chain(kwargs.values()).find_map(|v| {
            let mut ids = Vec::new();
            v.collect_futures(&mut ids);
            ids.first().copied()
        }) {
            return Err(TaskError::Serialization(format!(
                "argument still refers to the future of task {id}"
            )));
        }
        match &app.kind {
            AppKind::NativeFunction => self.call_native(&app.name, args, kwargs),
            AppKind::ShellCommand { template } => {
                self.run_shell(task_id, attempt, app, template, args, kwargs)
            }
        }
    }

    fn call_native(&self, name: &str, args: &[Value], kwargs: &Kwargs) -> Outcome {
        if !self.registry.contains(name) {
            return Err(TaskError::UnknownApp(name.to_string()));
        }
        match panic::catch_unwind(AssertUnwindSafe(|| self.registry.call(name, args, kwargs))) {
            Ok(outcome) => outcome,
            Err(payload) => {
                let msg = payload
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| payload.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "panic".to_string());
                Err(TaskError::app(format!("{name} panicked: {msg}")))
            }
        }
    }

    fn run_shell(
        &self,
        task_id: TaskId,
        attempt: u32,
        app: &AppSpec,
        template: &str,
        args: &[Value],
        kwargs: &Kwargs,
    ) -> Outcome {
        let command = render_template(template, args, kwargs)?;
        let dir = self.sandbox_dir(task_id, attempt);
        let sandbox_err = |what: &str, e: std::io::Error| {
            TaskError::Sandbox(format!("{what} {}: {e}", dir.display()))
        };
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| sandbox_err("cannot clear", e))?;
        }
        std::fs::create_dir_all(&dir).map_err(|e| sandbox_err("cannot create", e))?;

        let stdout_path = app
            .stdout_path
            .clone()
            .unwrap_or_else(|| dir.join("stdout"));
        let stderr_path = app
            .stderr_path
            .clone()
            .unwrap_or_else(|| dir.join("stderr"));
        let open = |p: &Path| {
            File::create(p)
                .map_err(|e| TaskError::Sandbox(format!("cannot open {}: {e}", p.display())))
        };
        let stdout = open(&stdout_path)?;
        let stderr = open(&stderr_path)?;

        tracing::debug!(task = task_id.0, attempt, %command, "running shell task");
        let status = Command::new("sh")
            .arg("-c")
            .arg(&command)
            .current_dir(&dir)
            .env("PILOTFLOW_SANDBOX", &dir)
            .stdin(Stdio::null())
            .stdout(Stdio::from(stdout))
            .stderr(Stdio::from(stderr))
            .status()
            .map_err(|e| TaskError::Sandbox(format!("cannot spawn sh: {e}")))?;

        let code = status.code().unwrap_or_else(|| {
            use std::os::unix::process::ExitStatusExt;
            128 + status.signal().unwrap_or(0)
        });
        if code == 0 {
            Ok(Value::Status(0))
        } else {
            Err(TaskError::ShellExit {
                status: code,
                stderr: Some(stderr_path),
            })
        }
    }
}

fn render_value(v: &Value) -> String {
    match v {
        Value::Str(s) => s.clone(),
        Value::Int(i) => i.to_string(),
        Value::Float(f) => f.to_string(),
        Value::Bool(b) => b.to_string(),
        Value::Status(s) => s.to_string(),
        Value::Bytes(b) => String::from_utf8_lossy(b).into_owned(),
        Value::File(f) => f
            .path()
            .map(|p| p.to_string_lossy().into_owned())
            .unwrap_or_else(|| f.uri.clone()),
        Value::List(items) => items.iter().map(render_value).collect::<Vec<_>>().join(" "),
        other => other.to_string(),
    }
}

/// Fills `{0}`, `{name}` and `{}` placeholders. `{{` and `}}` stand for
/// literal braces.
pub fn render_template(
    template: &str,
    args: &[Value],
    kwargs: &Kwargs,
) -> Result<String, TaskError> {
    let mut out = String::with_capacity(template.len());
    let mut chars = template.chars().peekable();
    let mut auto = 0usize;
    while let Some(c) = chars.next() {
        match c {
            '{' if chars.peek() == Some(&'{') => {
                chars.next();
                out.push('{');
            }
            '}' if chars.peek() == Some(&'}') => {
                chars.next();
                out.push('}');
            }
            '}' => return Err(TaskError::Template("unmatched `}`".into())),
            '{' => {
                let mut key = String::new();
                loop {
                    match chars.next() {
                        Some('}') => break,
                        Some('{') | None => {
                            return Err(TaskError::Template(format!(
                                "unterminated placeholder `{{{key}`"
                            )))
                        }
                        Some(ch) => key.push(ch),
                    }
                }
                let value = if key.is_empty() {
                    auto += 1;
                    args.get(auto - 1).ok_or_else(|| {
                        TaskError::Template(format!("no positional argument {}", auto - 1))
                    })?
                } else if let Ok(i) = key.parse::<usize>() {
                    args.get(i)
                        .ok_or_else(|| TaskError::Template(format!("no positional argument {i}")))?
                } else {
                    kwargs.get(&key).ok_or_else(|| {
                        TaskError::Template(format!("unbound placeholder `{{{key}}}`"))
                    })?
                };
                out.push_str(&render_value(value));
            }
            c => out.push(c),
        }
    }
    Ok(out)
}
