//! Compiler backed by an OpenAI-compatible chat-completions endpoint.
//!
//! The model must answer with one JSON object:
//!
//! ```text
//! {"type": "EXPERIENCE"|"BRIEF"|"HYBRID"|"NOACTION",
//!  "guidance": string|null, "reason": string|null,
//!  "brief_ops": [{"op", "section", "key", "value"}]}
//! ```
//!
//! Malformed replies are retried, then downgraded to NOACTION with reason
//! `parse_failure`. Transport and auth failures are downgraded the same way
//! (reasons `transport_error` / `auth_error`) so an episode never aborts.

use std::path::PathBuf;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tracing::{debug, warn};

use crate::brief::{apply, render_brief, BriefDelta, BriefOp, OpKind, Section};
use crate::env::GroundTruth;
use crate::memory::{render_pool, CandidatePool};
use crate::scalar::Scalar;

use super::{Compiled, CompiledOutput, CompilerBackend, RuntimeState, Variant};

pub const DEFAULT_TEMPLATE: &str = include_str!("../../templates/compiler_prompt.txt");
pub const PARSE_FAILURE: &str = "parse_failure";
pub const TRANSPORT_ERROR: &str = "transport_error";
pub const AUTH_ERROR: &str = "auth_error";

const SYSTEM_PROMPT: &str = "You are the memory compiler of an embodied agent. Answer with one JSON object.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    /// Full URL of the chat-completions route.
    pub url: String,
    pub model: String,
    pub temperature: f64,
    /// Name of the environment variable holding the bearer token, if any.
    pub token_env: Option<String>,
    pub retries: u32,
    pub backoff_ms: u64,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
    /// Prompt template with `{goal}`, `{brief}`, `{memory}`, `{observation}` slots.
    pub template_path: Option<PathBuf>,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            url: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "compiler".into(),
            temperature: 0.0,
            token_env: None,
            retries: 3,
            backoff_ms: 500,
            timeout_ms: 30_000,
            max_in_flight: 4,
            template_path: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum RemoteError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("endpoint rejected credentials (status {0})")]
    Auth(u16),
    #[error("unusable reply: {0}")]
    Parse(String),
    #[error("prompt template: {0}")]
    Template(String),
}

#[derive(Debug, Deserialize)]
struct WireOp {
    op: OpKind,
    section: Section,
    #[serde(default)]
    key: String,
    #[serde(default)]
    value: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireReply {
    #[serde(rename = "type")]
    kind: Variant,
    #[serde(default)]
    guidance: Option<String>,
    #[serde(default)]
    reason: Option<String>,
    #[serde(default)]
    brief_ops: Vec<WireOp>,
}

/// Fills the four named slots.
pub fn render_prompt(template: &str, state: &RuntimeState, pool: &CandidatePool) -> String {
    template
        .replace("{goal}", &state.brief.goal)
        .replace("{brief}", &render_brief(&state.brief))
        .replace("{memory}", &render_pool(pool, false))
        .replace("{observation}", &state.observation)
}

/// Strict mapping from the model's text to a compiled output that is valid
/// against `state`'s brief.
pub fn parse_reply(content: &str, state: &RuntimeState) -> Result<CompiledOutput, RemoteError> {
    let trimmed = content.trim();
    let body = trimmed
        .strip_prefix("```json")
        .or_else(|| trimmed.strip_prefix("```"))
        .and_then(|s| s.strip_suffix("```"))
        .unwrap_or(trimmed)
        .trim();
    let wire: WireReply = serde_json::from_str(body).map_err(|e| RemoteError::Parse(e.to_string()))?;
    let guidance = wire.guidance.filter(|g| !g.trim().is_empty());
    let ops: Vec<BriefOp> = wire
        .brief_ops
        .into_iter()
        .map(|o| BriefOp { kind: o.op, section: o.section, key: o.key, value: o.value })
        .collect();
    let delta = BriefDelta::new(ops);
    let out = CompiledOutput { variant: wire.kind, guidance, reason: wire.reason, delta };
    if !out.is_well_formed() {
        return Err(RemoteError::Parse(format!("{} reply with mismatched fields", wire.kind.as_str())));
    }
    if let Some(d) = &out.delta {
        apply(d, &state.brief).map_err(|e| RemoteError::Parse(format!("delta rejected: {e}")))?;
    }
    Ok(out)
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct Gate {
    slots: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn acquire(&self) {
        let mut n = self.slots.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.cv.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
    }

    fn release(&self) {
        *self.slots.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.cv.notify_one();
    }
}

#[derive(Debug)]
pub struct RemoteCompiler {
    cfg: RemoteConfig,
    template: String,
    client: reqwest::blocking::Client,
    gate: Gate,
}

impl RemoteCompiler {
    pub fn new(cfg: RemoteConfig) -> Result<Self, RemoteError> {
        let template = match &cfg.template_path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| RemoteError::Template(format!("{}: {e}", p.display())))?,
            None => DEFAULT_TEMPLATE.to_string(),
        };
        for slot in ["{goal}", "{brief}", "{memory}", "{observation}"] {
            if !template.contains(slot) {
                return Err(RemoteError::Template(format!("missing slot {slot}")));
            }
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| RemoteError::Transport(e.to_string()))?;
        let gate = Gate { slots: Mutex::new(cfg.max_in_flight.max(1)), cv: Condvar::new() };
        Ok(Self { cfg, template, client, gate })
    }

    fn request_once(&self, body: &serde_json::Value) -> Result<String, RemoteError> {
        let mut req = self.client.post(&self.cfg.url).json(body);
        if let Some(var) = &self.cfg.token_env {
            if let Ok(token) = std::env::var(var) {
                req = req.bearer_auth(token);
            }
        }
        self.gate.acquire();
        let resp = req.send();
        self.gate.release();
        let resp = resp.map_err(|e| RemoteError::Transport(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(RemoteError::Auth(status.as_u16()));
        }
        if !status.is_success() {
            return Err(RemoteError::Transport(format!("status {status}")));
        }
        let v: serde_json::Value = resp.json().map_err(|e| RemoteError::Parse(format!("envelope: {e}")))?;
        v.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| RemoteError::Parse("reply has no choices[0].message.content".into()))
    }

    /// Full request cycle with retries; errors are returned, not downgraded.
    pub fn try_compile(&self, state: &RuntimeState, pool: &CandidatePool) -> Result<CompiledOutput, RemoteError> {
        let body = json!({
            "model": self.cfg.model,
            "temperature": self.cfg.temperature,
            "messages": [
                {"role": "system", "content": SYSTEM_PROMPT},
                {"role": "user", "content": render_prompt(&self.template, state, pool)},
            ],
        });
        let attempts = self.cfg.retries.max(1);
        let mut last = RemoteError::Transport("no attempt made".into());
        for attempt in 0..attempts {
            if attempt > 0 && self.cfg.backoff_ms > 0 {
                std::thread::sleep(Duration::from_millis(self.cfg.backoff_ms << (attempt - 1)));
            }
            match self.request_once(&body).and_then(|c| parse_reply(&c, state)) {
                Ok(out) => return Ok(out),
                Err(RemoteError::Auth(s)) => return Err(RemoteError::Auth(s)),
                Err(e) => {
                    debug!(attempt, error = %e, "remote compile attempt failed");
                    last = e;
                }
            }
        }
        Err(last)
    }
}

impl<T: Scalar> CompilerBackend<T> for RemoteCompiler {
    fn name(&self) -> &'static str {
        "remote"
    }

    fn compile(
        &self,
        state: &RuntimeState,
        pool: &CandidatePool,
        _probe: Option<&dyn GroundTruth>,
        _rng: &mut ChaCha8Rng,
    ) -> Compiled<T> {
        let out = match self.try_compile(state, pool) {
            Ok(out) => out,
            Err(e) => {
                let reason = match e {
                    RemoteError::Parse(_) => PARSE_FAILURE,
                    RemoteError::Auth(_) => AUTH_ERROR,
                    _ => TRANSPORT_ERROR,
                };
                warn!(step = state.step, error = %e, reason, "remote compiler downgraded to NOACTION");
                CompiledOutput::no_action(Some(reason))
            }
        };
        Compiled::plain(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brief::init_brief;

    fn state() -> RuntimeState {
        RuntimeState::new("you are at desk.", init_brief("put apple in desk", &["find apple", "take apple"]).unwrap())
    }

    #[test]
    fn parses_each_variant() {
        let s = state();
        let out = parse_reply(r#"{"type":"NOACTION"}"#, &s).unwrap();
        assert_eq!(out.variant, Variant::NoAction);
        let out = parse_reply(
            r#"{"type":"HYBRID","guidance":"goto fridge","reason":"seen there","brief_ops":[{"op":"CREATE","section":"belief","key":"apple_loc","value":"fridge"}]}"#,
            &s,
        )
        .unwrap();
        assert_eq!(out.guidance.as_deref(), Some("goto fridge"));
        assert_eq!(out.delta.unwrap().len(), 1);
        let out = parse_reply("```json\n{\"type\":\"BRIEF\",\"brief_ops\":[{\"op\":\"FOLD\",\"section\":\"progress\",\"key\":\"\",\"value\":null}]}\n```", &s).unwrap();
        assert_eq!(out.variant, Variant::Brief);
    }

    #[test]
    fn rejects_bad_replies() {
        let s = state();
        for bad in [
            "not json",
            r#"{"type":"EXPERIENCE"}"#,
            r#"{"type":"BRIEF","brief_ops":[]}"#,
            r#"{"type":"SOMETHING"}"#,
            r#"{"type":"BRIEF","brief_ops":[{"op":"DELETE","section":"belief","key":"nope","value":null}]}"#,
        ] {
            assert!(parse_reply(bad, &s).is_err(), "{bad}");
        }
    }

    #[test]
    fn template_slots_filled() {
        let p = render_prompt(DEFAULT_TEMPLATE, &state(), &CandidatePool::default());
        assert!(p.contains("put apple in desk") && p.contains("you are at desk.") && !p.contains("{memory}"));
    }
}
