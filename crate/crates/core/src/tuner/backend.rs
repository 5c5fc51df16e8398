//! Chat backends: a scripted mock and an OpenAI-compatible HTTP client.

use std::fs;
use std::path::Path;
use std::time::Duration;

use serde_json::{json, Value};

use super::TunerError;

/// A script line consisting of exactly this token simulates a timeout.
pub const TIMEOUT_TOKEN: &str = "<timeout>";
pub const API_KEY_ENV: &str = "DMLITE_LLM_API_KEY";

pub trait LlmBackend {
    fn query(&mut self, prompt: &str) -> Result<String, TunerError>;
    fn identity(&self) -> String;
}

/// Replays one scripted response per call, ignoring the prompt.
#[derive(Debug, Clone)]
pub struct MockBackend {
    script: Vec<String>,
    next: usize,
}

impl MockBackend {
    pub fn new(script: Vec<String>) -> Self {
        Self { script, next: 0 }
    }

    /// One response per line.
    pub fn from_file(path: &Path) -> Result<Self, TunerError> {
        let text = fs::read_to_string(path).map_err(|source| TunerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::new(text.lines().map(str::to_string).collect()))
    }
}

impl LlmBackend for MockBackend {
    fn query(&mut self, _prompt: &str) -> Result<String, TunerError> {
        let line = self
            .script
            .get(self.next)
            .ok_or(TunerError::ScriptExhausted(self.script.len()))?;
        self.next += 1;
        if line.trim() == TIMEOUT_TOKEN {
            return Err(TunerError::Timeout);
        }
        Ok(line.clone())
    }

    fn identity(&self) -> String {
        format!("mock[{}]", self.script.len())
    }
}

#[derive(Debug, Clone)]
pub struct HttpBackend {
    pub url: String,
    pub model: String,
    pub temperature: f64,
    pub timeout: Duration,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpBackend {
    /// Reads the bearer token from `DMLITE_LLM_API_KEY` when set.
    pub fn new(url: &str, model: &str, temperature: f64, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            url: url.to_string(),
            model: model.to_string(),
            temperature,
            timeout,
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            agent,
        }
    }
}

impl LlmBackend for HttpBackend {
    fn query(&mut self, prompt: &str) -> Result<String, TunerError> {
        let body = json!({
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| match e {
            ureq::Error::Timeout(_) => TunerError::Timeout,
            other => TunerError::Transport(other.to_string()),
        })?;
        let v: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| TunerError::Response(e.to_string()))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| TunerError::Response(format!("no message content in {v}")))
    }

    fn identity(&self) -> String {
        format!("http[{} {}]", self.url, self.model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::thread;

    /// Serves one canned chat completion and hands back the request body.
    fn one_shot_server(reply: &'static str) -> (String, thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let handle = thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let payload = format!(
                "{{\"choices\":[{{\"message\":{{\"role\":\"assistant\",\"content\":\"{reply}\"}}}}]}}"
            );
            let mut out = stream;
            write!(
                out,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            )
            .unwrap();
            String::from_utf8(body).unwrap()
        });
        (url, handle)
    }

    #[test]
    fn http_roundtrip() {
        let (url, server) = one_shot_server("increase w by 0.1");
        let mut b = HttpBackend::new(&url, "test-model", 0.0, Duration::from_secs(5));
        assert_eq!(b.query("hello").unwrap(), "increase w by 0.1");
        let sent: Value = serde_json::from_str(&server.join().unwrap()).unwrap();
        assert_eq!(sent["model"], "test-model");
        assert_eq!(sent["temperature"], 0.0);
        assert_eq!(sent["messages"][0]["content"], "hello");
    }

    #[test]
    fn unreachable_endpoint_is_an_error() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let mut b = HttpBackend::new(&format!("http://{addr}/"), "m", 0.0, Duration::from_secs(2));
        assert!(b.query("x").is_err());
    }

    #[test]
    fn mock_reads_script_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("script.txt");
        fs::write(&p, "first\n<timeout>\nthird\n").unwrap();
        let mut m = MockBackend::from_file(&p).unwrap();
        assert_eq!(m.query("").unwrap(), "first");
        assert!(matches!(m.query(""), Err(TunerError::Timeout)));
        assert_eq!(m.query("").unwrap(), "third");
        assert!(matches!(m.query(""), Err(TunerError::ScriptExhausted(3))));
    }
}
