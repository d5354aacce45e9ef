//! Transports for talking to model backends.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("no response within {0:?}")]
    Timeout(Duration),
    #[error("backend i/o: {0}")]
    Io(String),
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("backend reported {code}: {message}")]
    Remote { code: String, message: String },
    #[error("backend closed the connection")]
    Closed,
}

/// One request/response exchange. Requests carry a string `id`; the
/// response must echo it.
pub trait Backend: Send + Sync {
    fn call(&self, request: &Value, timeout: Duration) -> Result<Value, BackendError>;
}

fn request_id(request: &Value) -> Result<String, BackendError> {
    request
        .get("id")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| BackendError::Protocol("request has no string id".into()))
}

/// Splits an `{id, error}` response into a [`BackendError`].
fn check_response(id: &str, response: Value) -> Result<Value, BackendError> {
    if response.get("id").and_then(Value::as_str) != Some(id) {
        return Err(BackendError::Protocol(format!(
            "response id does not match `{id}`"
        )));
    }
    if let Some(err) = response.get("error") {
        let field = |k: &str| err.get(k).and_then(Value::as_str).unwrap_or("").to_string();
        return Err(BackendError::Remote {
            code: field("code"),
            message: field("message"),
        });
    }
    Ok(response)
}

/// Counting semaphore bounding in-flight requests.
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Permits {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock().expect("permit lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("permit lock");
        }
        *free -= 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("permit lock") += 1;
        self.0.cv.notify_one();
    }
}

type Pending = Arc<Mutex<Option<HashMap<String, Sender<Value>>>>>;

/// A child process speaking newline-delimited json on stdin/stdout.
/// Responses may arrive in any order; they are matched to callers by id.
pub struct StdioBackend {
    child: Mutex<Child>,
    stdin: Mutex<Option<ChildStdin>>,
    /// `None` once the child's stdout has closed.
    pending: Pending,
    permits: Permits,
    reader: Option<JoinHandle<()>>,
}

impl StdioBackend {
    /// Launches `argv[0]` with the remaining arguments.
    pub fn spawn(argv: &[String], max_inflight: usize) -> std::io::Result<Self> {
        let (program, args) = argv.split_first().ok_or_else(|| {
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty command")
        })?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let pending: Pending = Arc::new(Mutex::new(Some(HashMap::new())));
        let reader_pending = Arc::clone(&pending);
        let reader = std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                let Ok(value) = serde_json::from_str::<Value>(&line) else {
                    continue;
                };
                let Some(id) = value.get("id").and_then(Value::as_str) else {
                    continue;
                };
                let sender = reader_pending
                    .lock()
                    .expect("pending lock")
                    .as_mut()
                    .and_then(|map| map.remove(id));
                if let Some(tx) = sender {
                    let _ = tx.send(value);
                }
            }
            // dropping the senders wakes every waiting caller
            reader_pending.lock().expect("pending lock").take();
        });
        Ok(Self {
            child: Mutex::new(child),
            stdin: Mutex::new(Some(stdin)),
            pending,
            permits: Permits::new(max_inflight),
            reader: Some(reader),
        })
    }

    fn forget(&self, id: &str) {
        if let Some(map) = self.pending.lock().expect("pending lock").as_mut() {
            map.remove(id);
        }
    }
}

impl Backend for StdioBackend {
    fn call(&self, request: &Value, timeout: Duration) -> Result<Value, BackendError> {
        let id = request_id(request)?;
        let _permit = self.permits.acquire();
        let (tx, rx) = mpsc::channel();
        match self.pending.lock().expect("pending lock").as_mut() {
            Some(map) => {
                map.insert(id.clone(), tx);
            }
            None => return Err(BackendError::Closed),
        }
        let mut line =
            serde_json::to_string(request).map_err(|e| BackendError::Protocol(e.to_string()))?;
        line.push('\n');
        let written = match self.stdin.lock().expect("stdin lock").as_mut() {
            Some(stdin) => stdin.write_all(line.as_bytes()).and_then(|_| stdin.flush()),
            None => Err(std::io::Error::new(
                std::io::ErrorKind::BrokenPipe,
                "stdin closed",
            )),
        };
        if let Err(e) = written {
            self.forget(&id);
            return Err(BackendError::Io(e.to_string()));
        }
        match rx.recv_timeout(timeout) {
            Ok(response) => check_response(&id, response),
            Err(RecvTimeoutError::Timeout) => {
                self.forget(&id);
                Err(BackendError::Timeout(timeout))
            }
            Err(RecvTimeoutError::Disconnected) => Err(BackendError::Closed),
        }
    }
}

impl Drop for StdioBackend {
    fn drop(&mut self) {
        // closing stdin lets a well-behaved child exit on its own
        self.stdin.lock().expect("stdin lock").take();
        let mut child = self.child.lock().expect("child lock");
        let exited = (0..50).any(|_| {
            if matches!(child.try_wait(), Ok(Some(_))) {
                return true;
            }
            std::thread::sleep(Duration::from_millis(10));
            false
        });
        if !exited {
            let _ = child.kill();
            let _ = child.wait();
        }
        drop(child);
        if let Some(reader) = self.reader.take() {
            let _ = reader.join();
        }
    }
}

/// POSTs each request as a json body and reads one json response.
pub struct HttpBackend {
    url: String,
    agent: ureq::Agent,
    permits: Permits,
}

impl HttpBackend {
    pub fn new(url: impl Into<String>, max_inflight: usize) -> Self {
        Self {
            url: url.into(),
            agent: ureq::AgentBuilder::new().build(),
            permits: Permits::new(max_inflight),
        }
    }
}

impl Backend for HttpBackend {
    fn call(&self, request: &Value, timeout: Duration) -> Result<Value, BackendError> {
        let id = request_id(request)?;
        let _permit = self.permits.acquire();
        let body =
            serde_json::to_string(request).map_err(|e| BackendError::Protocol(e.to_string()))?;
        let result = self
            .agent
            .post(&self.url)
            .timeout(timeout)
            .set("Content-Type", "application/json")
            .send_string(&body);
        let response = match result {
            Ok(r) => r,
            // an error status may still carry a json error body
            Err(ureq::Error::Status(_, r)) => r,
            Err(ureq::Error::Transport(t)) => {
                let msg = t.to_string();
                return Err(if msg.contains("timed out") || msg.contains("WouldBlock") {
                    BackendError::Timeout(timeout)
                } else {
                    BackendError::Io(msg)
                });
            }
        };
        let text = response
            .into_string()
            .map_err(|e| BackendError::Io(e.to_string()))?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| BackendError::Protocol(e.to_string()))?;
        check_response(&id, value)
    }
}

/// Wraps a closure as a backend; used for tests and in-process stubs.
pub struct FnBackend<F>(pub F);

impl<F> Backend for FnBackend<F>
where
    F: Fn(&Value) -> Value + Send + Sync,
{
    fn call(&self, request: &Value, _timeout: Duration) -> Result<Value, BackendError> {
        let id = request_id(request)?;
        check_response(&id, (self.0)(request))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn fn_backend_maps_errors() {
        let b = FnBackend(|req: &Value| {
            let id = req["id"].as_str().unwrap();
            if id == "bad" {
                json!({"id": id, "error": {"code": "NOPE", "message": "no"}})
            } else if id == "wrong" {
                json!({"id": "other"})
            } else {
                json!({"id": id, "text": "ok"})
            }
        });
        let t = Duration::from_secs(1);
        assert_eq!(b.call(&json!({"id": "a"}), t).unwrap()["text"], "ok");
        assert!(
            matches!(b.call(&json!({"id": "bad"}), t), Err(BackendError::Remote { code, .. }) if code == "NOPE")
        );
        assert!(matches!(
            b.call(&json!({"id": "wrong"}), t),
            Err(BackendError::Protocol(_))
        ));
        assert!(matches!(
            b.call(&json!({"x": 1}), t),
            Err(BackendError::Protocol(_))
        ));
    }

    #[test]
    fn stdio_round_trip_and_timeout() {
        // `cat` echoes every request back, which is a valid response
        let cat = StdioBackend::spawn(&["cat".to_string()], 4).unwrap();
        let v = cat
            .call(&json!({"id": "1", "text": "hi"}), Duration::from_secs(5))
            .unwrap();
        assert_eq!(v["text"], "hi");

        let silent = StdioBackend::spawn(&["sleep".to_string(), "5".to_string()], 1).unwrap();
        let err = silent
            .call(&json!({"id": "1"}), Duration::from_millis(50))
            .unwrap_err();
        assert_eq!(err, BackendError::Timeout(Duration::from_millis(50)));
    }

    #[test]
    fn stdio_reports_closed_child() {
        let t = StdioBackend::spawn(&["true".to_string()], 1).unwrap();
        std::thread::sleep(Duration::from_millis(100));
        let err = t
            .call(&json!({"id": "1"}), Duration::from_secs(2))
            .unwrap_err();
        assert!(
            matches!(err, BackendError::Closed | BackendError::Io(_)),
            "{err:?}"
        );
    }

    #[test]
    fn spawn_failure_is_an_error() {
        assert!(StdioBackend::spawn(&["/definitely/not/here".to_string()], 1).is_err());
        assert!(StdioBackend::spawn(&[], 1).is_err());
    }
}
