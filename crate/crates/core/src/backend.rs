//! Subprocess adapter shared by the external VAD, face-crop and STT backends.
//!
//! The adapter writes one JSON request to the child's stdin and expects one
//! JSON response on stdout. A nonzero exit or unparseable response is a
//! [`BackendError`].

use std::io::Write;
use std::process::{Command, Stdio};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, Error)]
#[error("{backend} backend failed: {message}")]
pub struct BackendError {
    pub backend: String,
    pub message: String,
}

impl BackendError {
    pub fn new(backend: impl Into<String>, message: impl ToString) -> Self {
        BackendError { backend: backend.into(), message: message.to_string() }
    }
}

#[derive(Debug, Clone)]
pub struct SubprocessAdapter {
    name: String,
    program: String,
    args: Vec<String>,
}

impl SubprocessAdapter {
    /// `command` is split on whitespace; the first word is the program.
    pub fn new(name: &str, command: &str) -> Self {
        let mut words = command.split_whitespace().map(str::to_string);
        let program = words.next().unwrap_or_default();
        SubprocessAdapter { name: name.to_string(), program, args: words.collect() }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn call<Req: Serialize, Resp: DeserializeOwned>(&self, request: &Req) -> Result<Resp, BackendError> {
        let err = |m: String| BackendError::new(&self.name, m);
        let payload = serde_json::to_vec(request).map_err(|e| err(e.to_string()))?;
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| err(format!("cannot start {}: {e}", self.program)))?;
        {
            let mut stdin = child.stdin.take().expect("piped stdin");
            // A child that exits without reading its input is reported via its status.
            let _ = stdin.write_all(&payload);
        }
        let out = child.wait_with_output().map_err(|e| err(e.to_string()))?;
        if !out.status.success() {
            return Err(err(format!(
                "exit status {:?}: {}",
                out.status.code(),
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        serde_json::from_slice(&out.stdout).map_err(|e| err(format!("bad response: {e}")))
    }
}
