//! Subprocess evaluator: writes the artifact to disk, runs it, and reads the
//! score from a `metric: <value>` line on stdout.

use std::io::Read;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use super::{EngineError, EnsembleMember, Environment, EvalOutcome, TaskSpec};
use crate::graph::{ExecState, SolutionPayload};
use crate::operators::OperatorKind;

#[derive(Debug)]
pub struct ScriptEnvironment {
    /// Program and leading arguments; the script path is appended.
    pub command: Vec<String>,
    pub workdir: PathBuf,
    pub timeout: Duration,
    counter: AtomicU64,
}

/// Last `metric: <float>` line in `stdout`.
pub fn parse_metric(stdout: &str) -> Option<f64> {
    stdout.lines().rev().find_map(|l| {
        let (key, value) = l.split_once(':')?;
        if key.trim().eq_ignore_ascii_case("metric") {
            value.trim().parse::<f64>().ok().filter(|v| v.is_finite())
        } else {
            None
        }
    })
}

fn tail(text: &str, lines: usize) -> String {
    let all: Vec<&str> = text.lines().collect();
    all[all.len().saturating_sub(lines)..].join("\n")
}

impl ScriptEnvironment {
    pub fn new(command: Vec<String>, workdir: impl Into<PathBuf>, timeout: Duration) -> Self {
        ScriptEnvironment {
            command,
            workdir: workdir.into(),
            timeout,
            counter: AtomicU64::new(0),
        }
    }

    fn run(&self, payload: &SolutionPayload) -> Result<(bool, String, String), String> {
        std::fs::create_dir_all(&self.workdir).map_err(|e| e.to_string())?;
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let path = self.workdir.join(format!("solution_{}_{n}.py", std::process::id()));
        std::fs::write(&path, &payload.artifact).map_err(|e| e.to_string())?;
        let (program, args) = self.command.split_first().ok_or("empty evaluation command")?;
        let mut child = Command::new(program)
            .args(args)
            .arg(&path)
            .current_dir(&self.workdir)
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| format!("spawning {program}: {e}"))?;
        let drain = |mut pipe: Box<dyn Read + Send>| {
            std::thread::spawn(move || {
                let mut s = String::new();
                let _ = pipe.read_to_string(&mut s);
                s
            })
        };
        let out = drain(Box::new(child.stdout.take().expect("piped")));
        let err = drain(Box::new(child.stderr.take().expect("piped")));
        let start = Instant::now();
        let status = loop {
            if let Some(status) = child.try_wait().map_err(|e| e.to_string())? {
                break Some(status);
            }
            if start.elapsed() >= self.timeout {
                let _ = child.kill();
                let _ = child.wait();
                break None;
            }
            std::thread::sleep(Duration::from_millis(20));
        };
        let stdout = out.join().unwrap_or_default();
        let mut stderr = err.join().unwrap_or_default();
        let _ = std::fs::remove_file(&path);
        if status.is_none() {
            stderr.push_str(&format!("\ntimed out after {:?}", self.timeout));
        }
        Ok((status.is_some_and(|s| s.success()), stdout, stderr))
    }
}

impl Environment for ScriptEnvironment {
    fn evaluate(&self, payload: &SolutionPayload, _task: &TaskSpec) -> EvalOutcome {
        match self.run(payload) {
            Err(e) => EvalOutcome::failed(ExecState::Failed, e),
            Ok((false, _, stderr)) => EvalOutcome::failed(ExecState::Buggy, tail(&stderr, 20)),
            Ok((true, stdout, stderr)) => match parse_metric(&stdout) {
                Some(m) => EvalOutcome::evaluated(m, tail(&stdout, 20)),
                None => EvalOutcome::failed(
                    ExecState::Buggy,
                    format!(
                        "no `metric:` line in output\n{}",
                        tail(&format!("{stdout}\n{stderr}"), 20)
                    ),
                ),
            },
        }
    }

    fn ensemble_combine(&self, _: &[EnsembleMember], _: &TaskSpec) -> Result<SolutionPayload, EngineError> {
        Err(EngineError::Unsupported(OperatorKind::Ensemble))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn payload(code: &str) -> SolutionPayload {
        SolutionPayload {
            artifact: code.into(),
            ..Default::default()
        }
    }

    #[test]
    fn metric_line_parsing() {
        assert_eq!(parse_metric("loading\nmetric: 0.93\n"), Some(0.93));
        assert_eq!(parse_metric("Metric : 1\nmetric: 2"), Some(2.0));
        assert_eq!(parse_metric("metric: nan"), None);
        assert_eq!(parse_metric("score 3"), None);
    }

    #[test]
    fn runs_shell_scripts() {
        let dir = tempfile::tempdir().unwrap();
        let env = ScriptEnvironment::new(vec!["sh".into()], dir.path(), Duration::from_secs(5));
        let task = TaskSpec::default();
        let ok = env.evaluate(&payload("echo 'metric: 0.75'"), &task);
        assert_eq!(ok.metric, Some(0.75));
        let crash = env.evaluate(&payload("echo boom >&2; exit 3"), &task);
        assert_eq!(crash.status, ExecState::Buggy);
        assert!(crash.log.contains("boom"));
        let silent = env.evaluate(&payload("true"), &task);
        assert_eq!(silent.status, ExecState::Buggy);
    }

    #[test]
    fn timeout_kills_the_script() {
        let dir = tempfile::tempdir().unwrap();
        let env = ScriptEnvironment::new(vec!["sh".into()], dir.path(), Duration::from_millis(200));
        let out = env.evaluate(&payload("exec sleep 5; echo 'metric: 1'"), &TaskSpec::default());
        assert_eq!(out.status, ExecState::Buggy);
        assert!(out.log.contains("timed out"));
    }
}
