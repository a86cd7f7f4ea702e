//! Confidence-gated arbitration by an external LLM.
//!
//! A pair is escalated when [`should_trigger`] fires for its primary
//! distribution. The arbiter receives a prompt built by [`build_prompt`],
//! must answer with one strict JSON object ([`ArbitrationVerdict`]), and is
//! retried with a repair instruction when the answer does not validate. Any
//! failure falls back to the primary prediction.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::fusion::ProbabilityDistribution;
use crate::{LABEL_NAMES, NUM_CLASSES};

pub const DEFAULT_TAU: f64 = 0.6;
pub const DEFAULT_CODE_BUDGET: usize = 4000;
pub const DEFAULT_RETRIES: usize = 2;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;
pub const API_KEY_ENV: &str = "ARBITER_API_KEY";
const TRUNCATION_MARKER: &str = "/* ... truncated ... */";
const REPAIR_INSTRUCTION: &str =
    "Your previous reply could not be used. Return only the JSON object described above, with no other text.";

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ArbiterError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("verdict rejected: {0}")]
    Schema(String),
    #[error("invalid policy: {0}")]
    Policy(String),
    #[error("prompt: {0}")]
    Prompt(String),
    #[error("mock responses: {0}")]
    Mock(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TriggerMode {
    Off,
    AllLowConfidence,
    #[default]
    Label5Only,
    Labels2345,
}

impl std::str::FromStr for TriggerMode {
    type Err = ArbiterError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" => Ok(Self::Off),
            "all" | "all_low_confidence" => Ok(Self::AllLowConfidence),
            "label5" | "label5_only" => Ok(Self::Label5Only),
            "labels2345" => Ok(Self::Labels2345),
            other => Err(ArbiterError::Policy(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerPolicy {
    pub tau: f64,
    pub mode: TriggerMode,
    pub skip_labels: BTreeSet<u8>,
}

impl Default for TriggerPolicy {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            mode: TriggerMode::Label5Only,
            skip_labels: BTreeSet::from([0, 1, 6]),
        }
    }
}

impl TriggerPolicy {
    pub fn new(mode: TriggerMode, tau: f64) -> Result<Self, ArbiterError> {
        let p = Self {
            tau,
            mode,
            ..Default::default()
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ArbiterError> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(ArbiterError::Policy(format!("tau {} outside (0, 1)", self.tau)));
        }
        Ok(())
    }
}

pub fn should_trigger(p: &ProbabilityDistribution, policy: &TriggerPolicy) -> bool {
    let label = p.label();
    if policy.skip_labels.contains(&label) || p.confidence >= policy.tau {
        return false;
    }
    match policy.mode {
        TriggerMode::Off => false,
        TriggerMode::AllLowConfidence => true,
        TriggerMode::Label5Only => label == 5,
        TriggerMode::Labels2345 => (2..=5).contains(&label),
    }
}

/// The strict JSON reply expected from the arbiter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArbitrationVerdict {
    pub mode: String,
    pub thought: String,
    pub prediction: u8,
    pub confidence: f64,
    pub explanation: String,
    pub probabilities: [f64; NUM_CLASSES],
}

impl ArbitrationVerdict {
    pub fn validate(&self) -> Result<(), ArbiterError> {
        let bad = |m: String| Err(ArbiterError::Schema(m));
        if self.prediction as usize >= NUM_CLASSES {
            return bad(format!("prediction {} outside 0..=6", self.prediction));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return bad(format!("confidence {} outside [0, 1]", self.confidence));
        }
        if self.probabilities.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("probability outside [0, 1]".into());
        }
        let sum: f64 = self.probabilities.iter().sum();
        if (sum - 1.0).abs() > 1e-3 {
            return bad(format!("probabilities sum to {sum}"));
        }
        Ok(())
    }
}

/// Byte range of the first balanced `{...}` in `text`, skipping braces inside
/// JSON strings.
pub fn first_json_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let (mut depth, mut in_str, mut escaped) = (0usize, false, false);
    for (i, c) in text[start..].char_indices() {
        if in_str {
            match (escaped, c) {
                (true, _) => escaped = false,
                (false, '\\') => escaped = true,
                (false, '"') => in_str = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_str = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Extracts and validates the verdict from a free-form reply.
pub fn parse_verdict(text: &str) -> Result<ArbitrationVerdict, ArbiterError> {
    let obj = first_json_object(text).ok_or_else(|| ArbiterError::Schema("no JSON object in reply".into()))?;
    let value: serde_json::Value = serde_json::from_str(obj).map_err(|e| ArbiterError::Schema(e.to_string()))?;
    if let Some(pred) = value.get("prediction") {
        match pred.as_u64() {
            Some(p) if p < NUM_CLASSES as u64 => {}
            _ => return Err(ArbiterError::Schema(format!("prediction {pred} outside 0..=6"))),
        }
    }
    let verdict: ArbitrationVerdict = serde_json::from_value(value).map_err(|e| ArbiterError::Schema(e.to_string()))?;
    verdict.validate()?;
    Ok(verdict)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub max_code_chars: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            max_code_chars: DEFAULT_CODE_BUDGET,
        }
    }
}

fn truncate_code(code: &str, budget: usize) -> String {
    match code.char_indices().nth(budget) {
        None => code.to_string(),
        Some((cut, _)) => format!("{}\n{TRUNCATION_MARKER}", &code[..cut]),
    }
}

const RUBRIC: [&str; NUM_CLASSES] = [
    "[0] Non-clone: the two fragments implement unrelated logic",
    "[1] Type-1: the same code apart from layout and comments",
    "[2] Type-2: the same structure apart from renamed identifiers or changed literals",
    "[3] Very Strong Type-3 (VST3): syntactic similarity in [90%, 100%)",
    "[4] Strong Type-3 (ST3): syntactic similarity in [70%, 90%)",
    "[5] Moderate Type-3 (MT3): syntactic similarity in [50%, 70%)",
    "[6] Weak Type-3 / Type-4 (WT3/T4): syntactic similarity below 50%, same behaviour",
];

/// Instantiates the arbitration prompt. `guided` adds the primary model's
/// Top-3 candidates; the unguided variant carries no model output at all.
pub fn build_prompt(
    code_left: &str,
    code_right: &str,
    p: &ProbabilityDistribution,
    guided: bool,
    cfg: &PromptConfig,
) -> Result<String, ArbiterError> {
    if code_left.trim().is_empty() || code_right.trim().is_empty() {
        return Err(ArbiterError::Prompt("empty code fragment".into()));
    }
    let mode = if guided { "prior-guided" } else { "code-only" };
    let mut out = String::new();
    out.push_str(
        "You are an expert program-analysis arbitrator. Decide the clone type (0-6) of the code pair below.\n\
         Two modes exist:\n\
         prior-guided: weigh the code together with the candidate labels and probabilities from a trained classifier.\n\
         code-only: judge from the code alone; no classifier output is given.\n",
    );
    out.push_str(&format!("Current mode: {mode}\n"));
    out.push_str("--- Code 1 ---\n");
    out.push_str(&truncate_code(code_left, cfg.max_code_chars));
    out.push_str("\n--- Code 2 ---\n");
    out.push_str(&truncate_code(code_right, cfg.max_code_chars));
    out.push('\n');
    if guided {
        out.push_str("--- Classifier Top-3 candidates (label: probability) ---\n");
        for (label, prob) in p.top3 {
            out.push_str(&format!("{label}: {prob:.3}\n"));
        }
    }
    out.push_str("--- Labels (0-6) ---\n");
    for line in RUBRIC {
        out.push_str(line);
        out.push('\n');
    }
    out.push_str(
        "Reply with STRICT JSON only, exactly this object:\n\
         {\n  \"mode\": \"<prior-guided or code-only>\",\n  \"thought\": \"<analysis of the core differences>\",\n  \
         \"prediction\": <integer 0-6>,\n  \"confidence\": <number 0.0-1.0>,\n  \"explanation\": \"<key reasoning>\",\n  \
         \"probabilities\": [p0, p1, p2, p3, p4, p5, p6]\n}\n",
    );
    Ok(out)
}

/// Something that answers prompts. Implementations must be thread-safe.
pub trait Arbiter: Sync {
    fn complete(&self, pair_id: &str, prompt: &str) -> Result<String, ArbiterError>;

    /// True for replayed responses; latency is then recorded as 0 so that
    /// decisions are a pure function of the inputs.
    fn is_replay(&self) -> bool {
        false
    }
}

/// Chat-completion HTTP client. The bearer token is read from an
/// environment variable, never from config files.
pub struct HttpArbiter {
    url: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpArbiter {
    pub fn new(url: impl Into<String>, model: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            url: url.into(),
            model: model.into(),
            api_key,
            agent,
        }
    }

    pub fn from_env(url: impl Into<String>, model: impl Into<String>, key_var: &str, timeout: Duration) -> Self {
        Self::new(url, model, std::env::var(key_var).ok().filter(|k| !k.is_empty()), timeout)
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

impl Arbiter for HttpArbiter {
    fn complete(&self, _pair_id: &str, prompt: &str) -> Result<String, ArbiterError> {
        let body = serde_json::json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| ArbiterError::Transport(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(ArbiterError::Transport(format!("HTTP {}", status.as_u16())));
        }
        let parsed: ChatResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| ArbiterError::Transport(format!("malformed response body: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| ArbiterError::Transport("response has no choices".into()))
    }
}

/// Replays recorded replies keyed by pair id. Each value is either a verdict
/// object or a raw reply string; both go through [`parse_verdict`].
#[derive(Debug, Clone, Default)]
pub struct MockArbiter {
    replies: HashMap<String, String>,
}

impl MockArbiter {
    pub fn from_replies(replies: HashMap<String, String>) -> Self {
        Self { replies }
    }

    /// Loads a JSON object `{pair_id: verdict | string}`.
    pub fn load(path: &Path) -> Result<Self, ArbiterError> {
        let text = std::fs::read_to_string(path).map_err(|e| ArbiterError::Mock(format!("{}: {e}", path.display())))?;
        let map: BTreeMap<String, serde_json::Value> =
            serde_json::from_str(&text).map_err(|e| ArbiterError::Mock(format!("{}: {e}", path.display())))?;
        let replies = map
            .into_iter()
            .map(|(k, v)| {
                let s = match v {
                    serde_json::Value::String(s) => s,
                    other => other.to_string(),
                };
                (k, s)
            })
            .collect();
        Ok(Self { replies })
    }
}

impl Arbiter for MockArbiter {
    fn complete(&self, pair_id: &str, _prompt: &str) -> Result<String, ArbiterError> {
        self.replies
            .get(pair_id)
            .cloned()
            .ok_or_else(|| ArbiterError::Transport(format!("no recorded reply for {pair_id}")))
    }

    fn is_replay(&self) -> bool {
        true
    }
}

/// Wraps a closure as a replay arbiter (synthetic experiments).
pub struct FnArbiter<F>(pub F);

impl<F> Arbiter for FnArbiter<F>
where
    F: Fn(&str, &str) -> Result<String, ArbiterError> + Sync,
{
    fn complete(&self, pair_id: &str, prompt: &str) -> Result<String, ArbiterError> {
        (self.0)(pair_id, prompt)
    }

    fn is_replay(&self) -> bool {
        true
    }
}

/// Sends `prompt`, retrying up to `retries` times with a repair instruction
/// when the reply fails validation. Transport errors are not retried.
pub fn call_arbiter(arbiter: &dyn Arbiter, pair_id: &str, prompt: &str, retries: usize) -> Result<ArbitrationVerdict, ArbiterError> {
    let mut current = prompt.to_string();
    let mut last = None;
    for _ in 0..=retries {
        let reply = arbiter.complete(pair_id, &current)?;
        match parse_verdict(&reply) {
            Ok(v) => return Ok(v),
            Err(e) => {
                current = format!("{prompt}\n{REPAIR_INSTRUCTION} ({e})\n");
                last = Some(e);
            }
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Token bucket: `per_minute` tokens per minute, burst of `per_minute`.
pub struct RateLimiter {
    per_minute: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn new(per_minute: u32) -> Self {
        let cap = f64::from(per_minute.max(1));
        Self {
            per_minute: cap,
            state: Mutex::new((cap, Instant::now())),
        }
    }

    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut s = self.state.lock().expect("rate limiter poisoned");
                let now = Instant::now();
                let refill = now.duration_since(s.1).as_secs_f64() * self.per_minute / 60.0;
                s.0 = (s.0 + refill).min(self.per_minute);
                s.1 = now;
                if s.0 >= 1.0 {
                    s.0 -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - s.0) * 60.0 / self.per_minute)
            };
            std::thread::sleep(wait);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalDecision {
    pub pair_id: String,
    pub primary_prediction: u8,
    pub confidence: f64,
    pub triggered: bool,
    /// an arbiter call was attempted
    pub arbitrated: bool,
    pub final_prediction: u8,
    pub verdict: Option<ArbitrationVerdict>,
    pub fallback_reason: Option<String>,
    pub latency_ms: u64,
}

impl FinalDecision {
    pub fn log_row(&self) -> DecisionLogRow {
        DecisionLogRow {
            pair_id: self.pair_id.clone(),
            primary: self.primary_prediction,
            confidence: self.confidence,
            triggered: self.triggered,
            final_label: self.final_prediction,
            fallback_reason: self.fallback_reason.clone(),
            latency_ms: self.latency_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionLogRow {
    pub pair_id: String,
    pub primary: u8,
    pub confidence: f64,
    pub triggered: bool,
    #[serde(rename = "final")]
    pub final_label: u8,
    pub fallback_reason: Option<String>,
    pub latency_ms: u64,
}

/// One pair awaiting a decision.
#[derive(Debug, Clone)]
pub struct ArbitrationItem<'a> {
    pub pair_id: &'a str,
    pub code_left: &'a str,
    pub code_right: &'a str,
    pub distribution: &'a ProbabilityDistribution,
}

#[derive(Debug, Clone)]
pub struct ArbiterRunConfig {
    pub retries: usize,
    pub max_in_flight: usize,
    /// `None` disables rate limiting.
    pub per_minute: Option<u32>,
    pub prompt: PromptConfig,
}

impl Default for ArbiterRunConfig {
    fn default() -> Self {
        Self {
            retries: DEFAULT_RETRIES,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            per_minute: None,
            prompt: PromptConfig::default(),
        }
    }
}

fn primary_only(item: &ArbitrationItem<'_>, triggered: bool) -> FinalDecision {
    let label = item.distribution.label();
    FinalDecision {
        pair_id: item.pair_id.to_string(),
        primary_prediction: label,
        confidence: item.distribution.confidence,
        triggered,
        arbitrated: false,
        final_prediction: label,
        verdict: None,
        fallback_reason: None,
        latency_ms: 0,
    }
}

/// Decides one pair. Untriggered pairs never reach the arbiter.
pub fn decide(
    item: &ArbitrationItem<'_>,
    policy: &TriggerPolicy,
    arbiter: &dyn Arbiter,
    cfg: &ArbiterRunConfig,
    limiter: Option<&RateLimiter>,
) -> FinalDecision {
    if !should_trigger(item.distribution, policy) {
        return primary_only(item, false);
    }
    let mut d = primary_only(item, true);
    d.arbitrated = true;
    let prompt = match build_prompt(item.code_left, item.code_right, item.distribution, true, &cfg.prompt) {
        Ok(p) => p,
        Err(e) => {
            d.fallback_reason = Some(e.to_string());
            return d;
        }
    };
    if let Some(l) = limiter {
        l.acquire();
    }
    let start = Instant::now();
    let result = call_arbiter(arbiter, item.pair_id, &prompt, cfg.retries);
    if !arbiter.is_replay() {
        d.latency_ms = start.elapsed().as_millis() as u64;
    }
    match result {
        Ok(v) => {
            d.final_prediction = v.prediction;
            d.verdict = Some(v);
        }
        Err(e) => d.fallback_reason = Some(e.to_string()),
    }
    d
}

/// Decides every item with at most `cfg.max_in_flight` arbiter calls in
/// flight. Output order matches input order regardless of scheduling.
pub fn decide_all(
    items: &[ArbitrationItem<'_>],
    policy: &TriggerPolicy,
    arbiter: &dyn Arbiter,
    cfg: &ArbiterRunConfig,
) -> Result<Vec<FinalDecision>, ArbiterError> {
    policy.validate()?;
    let limiter = cfg.per_minute.map(RateLimiter::new);
    let slots: Vec<Mutex<Option<FinalDecision>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = cfg.max_in_flight.max(1).min(items.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let d = decide(&items[i], policy, arbiter, cfg, limiter.as_ref());
                *slots[i].lock().expect("slot poisoned") = Some(d);
            });
        }
    });
    Ok(slots
        .into_iter()
        .map(|s| s.into_inner().expect("slot poisoned").expect("every slot filled"))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArbitrationSummary {
    pub total: usize,
    pub triggered: usize,
    pub arbitrated_ok: usize,
    pub fallbacks: usize,
    pub changed: usize,
    pub arbitration_fraction: f64,
}

pub fn summarize(decisions: &[FinalDecision]) -> ArbitrationSummary {
    let total = decisions.len();
    let triggered = decisions.iter().filter(|d| d.triggered).count();
    ArbitrationSummary {
        total,
        triggered,
        arbitrated_ok: decisions.iter().filter(|d| d.verdict.is_some()).count(),
        fallbacks: decisions.iter().filter(|d| d.fallback_reason.is_some()).count(),
        changed: decisions.iter().filter(|d| d.final_prediction != d.primary_prediction).count(),
        arbitration_fraction: if total == 0 { 0.0 } else { triggered as f64 / total as f64 },
    }
}

/// Human-readable name of a label.
pub fn label_name(label: u8) -> &'static str {
    LABEL_NAMES[label as usize]
}
