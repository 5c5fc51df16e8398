//! Language-model guidance for the swarm coefficients: prompt, query,
//! directive parsing and validated update with whole-set fallback.

pub mod advice;
pub mod backend;
pub mod prompt;

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::swarm::{IterationMetric, ParamBounds, ParamTuner, PsoParams};

pub use advice::{apply_advice, parse_advice, Advice, Directive};
pub use backend::{HttpBackend, LlmBackend, MockBackend};
pub use prompt::build_prompt;

#[derive(Debug, thiserror::Error)]
pub enum TunerError {
    #[error("language model request timed out")]
    Timeout,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("unexpected response: {0}")]
    Response(String),
    #[error("mock script exhausted after {0} responses")]
    ScriptExhausted(usize),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Serialize)]
struct AuditRecord<'a> {
    call: usize,
    backend: &'a str,
    prompt: &'a str,
    response: Option<&'a str>,
    error: Option<String>,
    before: PsoParams,
    after: PsoParams,
    accepted: bool,
}

/// Appends one JSON object per tuner call.
pub struct AuditLog {
    file: File,
}

impl AuditLog {
    pub fn open(path: &Path) -> Result<Self, TunerError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| TunerError::Io {
                path: path.display().to_string(),
                source,
            })?;
        Ok(Self { file })
    }

    fn append(&mut self, record: &AuditRecord<'_>) {
        let line = serde_json::to_string(record).expect("audit record serializes");
        if let Err(e) = writeln!(self.file, "{line}") {
            log::warn!("audit log write failed: {e}");
        }
    }
}

/// Prompt, query, parse, validate. Any failure leaves the coefficients as
/// they were.
pub struct LlmTuner<B: LlmBackend> {
    pub backend: B,
    pub bounds: ParamBounds,
    audit: Option<AuditLog>,
    calls: usize,
    exhausted: bool,
}

impl<B: LlmBackend> LlmTuner<B> {
    pub fn new(backend: B, bounds: ParamBounds) -> Self {
        Self {
            backend,
            bounds,
            audit: None,
            calls: 0,
            exhausted: false,
        }
    }

    pub fn with_audit(mut self, audit: AuditLog) -> Self {
        self.audit = Some(audit);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls
    }
}

pub fn tune(
    current: PsoParams,
    window: &[IterationMetric],
    backend: &mut dyn LlmBackend,
    bounds: &ParamBounds,
) -> (PsoParams, String, Result<String, TunerError>) {
    let prompt = build_prompt(&current, window);
    let reply = backend.query(&prompt);
    let next = match &reply {
        Ok(text) => apply_advice(&current, &parse_advice(text, &current), bounds),
        Err(e @ TunerError::ScriptExhausted(_)) => {
            log::debug!("tuner query failed, keeping parameters: {e}");
            current
        }
        Err(e) => {
            log::warn!("tuner query failed, keeping parameters: {e}");
            current
        }
    };
    (next, prompt, reply)
}

impl<B: LlmBackend> ParamTuner for LlmTuner<B> {
    fn tune(&mut self, current: PsoParams, window: &[IterationMetric]) -> PsoParams {
        self.calls += 1;
        let (next, prompt, reply) = tune(current, window, &mut self.backend, &self.bounds);
        if let Err(e @ TunerError::ScriptExhausted(_)) = &reply {
            if !self.exhausted {
                log::warn!("{e}; keeping parameters for the remaining calls");
                self.exhausted = true;
            }
        }
        if let Some(audit) = &mut self.audit {
            let identity = self.backend.identity();
            audit.append(&AuditRecord {
                call: self.calls,
                backend: &identity,
                prompt: &prompt,
                response: reply.as_ref().ok().map(String::as_str),
                error: reply.as_ref().err().map(ToString::to_string),
                before: current,
                after: next,
                accepted: next != current,
            });
        }
        next
    }
}
