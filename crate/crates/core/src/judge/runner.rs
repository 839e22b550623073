//! Transport abstraction, retry policy and the bounded-concurrency judging
//! loop with audit log and checkpoint resume.
//!
//! Requests use the common chat-completion shape:
//!
//! ```json
//! {"model": "...", "messages": [{"role": "user", "content": "..."}], "temperature": 0.0}
//! ```
//!
//! and the reply text is read from `choices[0].message.content`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::parse::parse_evaluations;
use super::prompt::{render_prompt, stable_hash, JudgeQuestion, TaskKind};
use super::JudgeError;
use crate::model::{ScoreDataset, ScoreRecord};

pub const ENV_BASE_URL: &str = "SIMPLEX_RANK_BASE_URL";
pub const ENV_API_KEY: &str = "SIMPLEX_RANK_API_KEY";
pub const ENV_MODEL: &str = "SIMPLEX_RANK_MODEL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
}

/// What the transport knows about the call besides the request body.
#[derive(Debug, Clone, Copy)]
pub struct CallContext<'a> {
    pub judge_id: &'a str,
    pub question_id: &'a str,
    /// Candidate id shown at each position of the prompt.
    pub order: &'a [String],
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    /// Worth retrying: rate limits, server errors, timeouts, dropped
    /// connections.
    Transient(String),
    /// Retrying cannot help: rejected credentials, bad requests, unknown
    /// models, exhausted quota.
    Fatal(String),
}

impl std::fmt::Display for TransportError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Transient(m) => write!(f, "transient: {m}"),
            Self::Fatal(m) => write!(f, "fatal: {m}"),
        }
    }
}

pub trait Transport: Send + Sync {
    fn complete(&self, request: &ChatRequest, ctx: &CallContext) -> Result<String, TransportError>;
}

impl<F> Transport for F
where
    F: Fn(&ChatRequest, &CallContext) -> Result<String, TransportError> + Send + Sync,
{
    fn complete(&self, request: &ChatRequest, ctx: &CallContext) -> Result<String, TransportError> {
        self(request, ctx)
    }
}

/// Blocking HTTP client for an OpenAI-compatible `/chat/completions` route.
pub struct HttpTransport {
    url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(base_url: &str, api_key: Option<String>, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        Self {
            url: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            api_key,
            agent: ureq::Agent::new_with_config(config),
        }
    }

    /// Reads the base URL, key and default model name from the environment.
    pub fn from_env(timeout: Duration) -> Result<(Self, Option<String>), JudgeError> {
        let base = std::env::var(ENV_BASE_URL)
            .map_err(|_| JudgeError::Config(format!("{ENV_BASE_URL} is not set")))?;
        let key = std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty());
        let model = std::env::var(ENV_MODEL).ok().filter(|m| !m.is_empty());
        Ok((Self::new(&base, key, timeout), model))
    }
}

/// HTTP status classification: auth and client errors are final, rate
/// limits and server errors are retried.
pub fn classify_status(status: u16, body: &str) -> TransportError {
    let snippet: String = body.chars().take(300).collect();
    let msg = format!("HTTP {status}: {snippet}");
    match status {
        401 | 403 => TransportError::Fatal(format!("authentication rejected ({msg})")),
        408 | 409 | 425 | 429 | 500..=599 => TransportError::Transient(msg),
        _ => TransportError::Fatal(msg),
    }
}

impl Transport for HttpTransport {
    fn complete(&self, request: &ChatRequest, _ctx: &CallContext) -> Result<String, TransportError> {
        let mut call = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = call
            .send_json(request)
            .map_err(|e| TransportError::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::Transient(e.to_string()))?;
        if status != 200 {
            return Err(classify_status(status, &body));
        }
        let v: Value = serde_json::from_str(&body)
            .map_err(|e| TransportError::Transient(format!("unreadable reply body: {e}")))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| {
                TransportError::Fatal("reply has no choices[0].message.content".to_string())
            })
    }
}

/// One canned reply: either raw judge scores per candidate id, turned into
/// a well-formed response in prompt order, or a verbatim response text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockEntry {
    pub judge_id: String,
    pub question_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<BTreeMap<String, i64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
}

/// Offline transport answering from canned entries.
#[derive(Debug, Clone)]
pub struct MockTransport {
    kind: TaskKind,
    entries: BTreeMap<(String, String), MockEntry>,
}

impl MockTransport {
    pub fn new(kind: TaskKind, entries: Vec<MockEntry>) -> Self {
        Self {
            kind,
            entries: entries
                .into_iter()
                .map(|e| ((e.judge_id.clone(), e.question_id.clone()), e))
                .collect(),
        }
    }

    /// Reads entries from a JSON array or JSON lines.
    pub fn load(kind: TaskKind, path: &Path) -> Result<Self, JudgeError> {
        let text = std::fs::read_to_string(path).map_err(|source| JudgeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let bad = |line: usize, e: serde_json::Error| JudgeError::BadLine {
            path: path.display().to_string(),
            line,
            message: e.to_string(),
        };
        let entries = if text.trim_start().starts_with('[') {
            serde_json::from_str(&text).map_err(|e| bad(1, e))?
        } else {
            let mut out = Vec::new();
            for (i, line) in text.lines().enumerate() {
                if !line.trim().is_empty() {
                    out.push(serde_json::from_str(line).map_err(|e| bad(i + 1, e))?);
                }
            }
            out
        };
        Ok(Self::new(kind, entries))
    }

    fn synthesize(&self, scores: &BTreeMap<String, i64>, order: &[String]) -> String {
        let evals: Vec<Value> = order
            .iter()
            .enumerate()
            .filter_map(|(i, id)| {
                let s = *scores.get(id)?;
                let crit = json!({"reasoning": "canned", "score": s});
                let mut item = json!({"model_id": (i + 1).to_string()});
                let keys: &[&str] = match self.kind {
                    TaskKind::MtbenchStyle => &["overall"],
                    TaskKind::TldrStyle => &["relevance", "consistency", "fluency", "coherence"],
                    _ => &["accuracy"],
                };
                for k in keys {
                    item[*k] = crit.clone();
                }
                Some(item)
            })
            .collect();
        json!({ "evaluations": evals }).to_string()
    }
}

impl Transport for MockTransport {
    fn complete(&self, _request: &ChatRequest, ctx: &CallContext) -> Result<String, TransportError> {
        let key = (ctx.judge_id.to_string(), ctx.question_id.to_string());
        let entry = self.entries.get(&key).ok_or_else(|| {
            TransportError::Fatal(format!(
                "no canned response for judge {:?}, question {:?}",
                ctx.judge_id, ctx.question_id
            ))
        })?;
        match (&entry.response, &entry.scores) {
            (Some(text), _) => Ok(text.clone()),
            (None, Some(scores)) => Ok(self.synthesize(scores, ctx.order)),
            (None, None) => Err(TransportError::Fatal(format!(
                "canned entry for judge {:?}, question {:?} has neither scores nor response",
                ctx.judge_id, ctx.question_id
            ))),
        }
    }
}

/// Exponential backoff: attempt `k` (0-based retry index) waits
/// `min(initial * multiplier^k, max)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub multiplier: f64,
    pub max_backoff: Duration,
    /// Also retry replies that fail to parse completely.
    pub retry_malformed: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 4,
            initial_backoff: Duration::from_millis(500),
            multiplier: 2.0,
            max_backoff: Duration::from_secs(30),
            retry_malformed: true,
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, retry: u32) -> Duration {
        let secs = self.initial_backoff.as_secs_f64() * self.multiplier.powi(retry as i32);
        Duration::from_secs_f64(secs.min(self.max_backoff.as_secs_f64()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeSpec {
    pub judge_id: String,
    /// Model name sent in the request body.
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub kind: TaskKind,
    pub judges: Vec<JudgeSpec>,
    /// Maximum requests in flight.
    pub concurrency: usize,
    pub retry: RetryPolicy,
    /// Seed of the candidate-order shuffle.
    pub seed: u64,
    pub temperature: Option<f64>,
    /// JSON lines, one per attempt, with the verbatim reply.
    pub audit_log: Option<PathBuf>,
    /// JSON lines, one per finished (question, judge) pair; read back to
    /// skip finished pairs.
    pub checkpoint: Option<PathBuf>,
    pub candidate_family: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn new(kind: TaskKind, judges: Vec<JudgeSpec>) -> Self {
        Self {
            kind,
            judges,
            concurrency: 4,
            retry: RetryPolicy::default(),
            seed: 0,
            temperature: Some(0.0),
            audit_log: None,
            checkpoint: None,
            candidate_family: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dataset: ScoreDataset,
    /// Requests sent in this run, retries included.
    pub calls: usize,
    pub retries: usize,
    /// Pairs taken from the checkpoint instead of being requested.
    pub resumed: usize,
    /// Pairs whose final reply was incomplete, with the reason; their
    /// salvaged scores are kept.
    pub incomplete: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AuditEntry {
    judge_id: String,
    question_id: String,
    attempt: u32,
    order: Vec<String>,
    prompt: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    response: Option<String>,
    outcome: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointEntry {
    judge_id: String,
    question_id: String,
    records: Vec<ScoreRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    incomplete: Option<String>,
}

struct Job {
    q: usize,
    j: usize,
}

enum Event {
    Attempt(AuditEntry),
    Done {
        job: Job,
        records: Vec<ScoreRecord>,
        incomplete: Option<String>,
    },
    Failed {
        job: Job,
        message: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> JudgeError + '_ {
    move |source| JudgeError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn read_checkpoint(path: &Path) -> Result<Vec<CheckpointEntry>, JudgeError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(e) => out.push(e),
            Err(e) => {
                return Err(JudgeError::BadLine {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

/// Drops a partial trailing line left by a run killed mid-write.
fn repair_tail(path: &Path) -> Result<(), JudgeError> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(io_err(path)(e)),
    };
    if bytes.last().is_some_and(|&b| b != b'\n') {
        let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        OpenOptions::new()
            .write(true)
            .open(path)
            .and_then(|f| f.set_len(keep as u64))
            .map_err(io_err(path))?;
    }
    Ok(())
}

fn append_line(file: &mut Option<(File, PathBuf)>, value: &impl Serialize) -> Result<(), JudgeError> {
    if let Some((f, path)) = file {
        let line = serde_json::to_string(value).expect("serializable");
        writeln!(f, "{line}")
            .and_then(|_| f.flush())
            .map_err(io_err(path))?;
    }
    Ok(())
}

fn open_append(path: &Option<PathBuf>) -> Result<Option<(File, PathBuf)>, JudgeError> {
    path.as_ref()
        .map(|p| {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            }
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map(|f| (f, p.clone()))
                .map_err(io_err(p))
        })
        .transpose()
}

/// Calls one judge on one question until the reply parses or the retry
/// budget runs out, reporting every attempt.
fn judge_one(
    transport: &dyn Transport,
    question: &JudgeQuestion,
    judge: &JudgeSpec,
    cfg: &RunConfig,
    job: Job,
    events: &mpsc::Sender<Event>,
) {
    let seed = cfg.seed ^ stable_hash(&judge.judge_id);
    let rendered = match render_prompt(cfg.kind, question, seed) {
        Ok(r) => r,
        Err(e) => {
            let _ = events.send(Event::Failed {
                job,
                message: e.to_string(),
            });
            return;
        }
    };
    let request = ChatRequest {
        model: judge.model.clone(),
        messages: vec![ChatMessage {
            role: "user".into(),
            content: rendered.text.clone(),
        }],
        temperature: cfg.temperature,
    };
    let to_records = |scored: Vec<(String, u32)>| -> Vec<ScoreRecord> {
        let levels: BTreeMap<String, u32> = scored.into_iter().collect();
        question
            .candidates
            .iter()
            .filter_map(|c| {
                levels.get(&c.candidate_id).map(|&l| {
                    ScoreRecord::new(
                        &question.question_id,
                        &judge.judge_id,
                        &c.candidate_id,
                        &question.stratum,
                        l,
                    )
                })
            })
            .collect()
    };
    let mut attempt = 0;
    loop {
        let ctx = CallContext {
            judge_id: &judge.judge_id,
            question_id: &question.question_id,
            order: &rendered.order,
            attempt,
        };
        let audit = |response: Option<String>, outcome: String| {
            Event::Attempt(AuditEntry {
                judge_id: judge.judge_id.clone(),
                question_id: question.question_id.clone(),
                attempt,
                order: rendered.order.clone(),
                prompt: rendered.text.clone(),
                response,
                outcome,
            })
        };
        let retries_left = attempt < cfg.retry.max_retries;
        match transport.complete(&request, &ctx) {
            Ok(text) => match parse_evaluations(cfg.kind, &text, &rendered.order) {
                Ok(scored) => {
                    let _ = events.send(audit(Some(text), "ok".into()));
                    let _ = events.send(Event::Done {
                        job,
                        records: to_records(scored),
                        incomplete: None,
                    });
                    return;
                }
                Err(e) => {
                    let salvaged = match &e {
                        JudgeError::MalformedResponse { salvaged, .. } => salvaged.clone(),
                        JudgeError::MissingCandidate { parsed, .. } => parsed.clone(),
                        _ => Vec::new(),
                    };
                    let _ = events.send(audit(Some(text), format!("unparsed: {e}")));
                    if !(cfg.retry.retry_malformed && retries_left) {
                        let _ = events.send(Event::Done {
                            job,
                            records: to_records(salvaged),
                            incomplete: Some(e.to_string()),
                        });
                        return;
                    }
                }
            },
            Err(TransportError::Transient(m)) if retries_left => {
                let _ = events.send(audit(None, format!("transient: {m}")));
            }
            Err(e) => {
                let _ = events.send(audit(None, e.to_string()));
                let message = match e {
                    TransportError::Transient(m) => format!(
                        "gave up after {} attempts, last error: {m}",
                        attempt + 1
                    ),
                    TransportError::Fatal(m) => m,
                };
                let _ = events.send(Event::Failed { job, message });
                return;
            }
        }
        std::thread::sleep(cfg.retry.backoff(attempt));
        attempt += 1;
    }
}

/// Scores every question with every judge. At most `cfg.concurrency`
/// requests are in flight; audit and checkpoint writes happen on the calling
/// thread in completion order, while the returned records follow question
/// order, then judge order, then the question's candidate order.
pub fn run_judging(
    transport: &dyn Transport,
    questions: &[JudgeQuestion],
    cfg: &RunConfig,
) -> Result<RunSummary, JudgeError> {
    if cfg.judges.is_empty() {
        return Err(JudgeError::MissingData("no judges configured".into()));
    }
    let mut done: BTreeMap<(usize, usize), Vec<ScoreRecord>> = BTreeMap::new();
    let mut incomplete = Vec::new();
    let q_index: BTreeMap<&str, usize> = questions
        .iter()
        .enumerate()
        .map(|(i, q)| (q.question_id.as_str(), i))
        .collect();
    let j_index: BTreeMap<&str, usize> = cfg
        .judges
        .iter()
        .enumerate()
        .map(|(i, j)| (j.judge_id.as_str(), i))
        .collect();
    if let Some(path) = &cfg.checkpoint {
        repair_tail(path)?;
        for e in read_checkpoint(path)? {
            if let (Some(&q), Some(&j)) = (
                q_index.get(e.question_id.as_str()),
                j_index.get(e.judge_id.as_str()),
            ) {
                if let Some(why) = e.incomplete {
                    incomplete.push(format!("{}/{}: {why}", e.judge_id, e.question_id));
                }
                done.insert((q, j), e.records);
            }
        }
    }
    let resumed = done.len();
    let queue: Mutex<VecDeque<Job>> = Mutex::new(
        (0..questions.len())
            .flat_map(|q| (0..cfg.judges.len()).map(move |j| Job { q, j }))
            .filter(|job| !done.contains_key(&(job.q, job.j)))
            .collect(),
    );
    let mut audit = open_append(&cfg.audit_log)?;
    let mut checkpoint = open_append(&cfg.checkpoint)?;
    let mut calls = 0;
    let mut retries = 0;
    let mut failure: Option<JudgeError> = None;
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| {
        for _ in 0..cfg.concurrency.max(1) {
            let tx = tx.clone();
            let queue = &queue;
            scope.spawn(move || loop {
                let Some(job) = queue.lock().expect("queue lock").pop_front() else {
                    break;
                };
                judge_one(
                    transport,
                    &questions[job.q],
                    &cfg.judges[job.j],
                    cfg,
                    job,
                    &tx,
                );
            });
        }
        drop(tx);
        for event in rx {
            let result = match event {
                Event::Attempt(entry) => {
                    calls += 1;
                    if entry.attempt > 0 {
                        retries += 1;
                    }
                    append_line(&mut audit, &entry)
                }
                Event::Done {
                    job,
                    records,
                    incomplete: why,
                } => {
                    let entry = CheckpointEntry {
                        judge_id: cfg.judges[job.j].judge_id.clone(),
                        question_id: questions[job.q].question_id.clone(),
                        records: records.clone(),
                        incomplete: why.clone(),
                    };
                    if let Some(why) = why {
                        incomplete.push(format!("{}/{}: {why}", entry.judge_id, entry.question_id));
                    }
                    done.insert((job.q, job.j), records);
                    append_line(&mut checkpoint, &entry)
                }
                Event::Failed { job, message } => Err(JudgeError::Transport {
                    judge_id: cfg.judges[job.j].judge_id.clone(),
                    question_id: questions[job.q].question_id.clone(),
                    message,
                }),
            };
            if let Err(e) = result {
                // Stop handing out work; in-flight calls still finish and
                // are recorded.
                queue.lock().expect("queue lock").clear();
                failure.get_or_insert(e);
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let mut judge_family = BTreeMap::new();
    for j in &cfg.judges {
        if let Some(f) = &j.family {
            judge_family.insert(j.judge_id.clone(), f.clone());
        }
    }
    let judged: BTreeSet<&str> = questions
        .iter()
        .flat_map(|q| q.candidates.iter().map(|c| c.candidate_id.as_str()))
        .collect();
    let candidate_family = cfg
        .candidate_family
        .iter()
        .filter(|(c, _)| judged.contains(c.as_str()))
        .map(|(c, f)| (c.clone(), f.clone()))
        .collect();
    let records = done.into_values().flatten().collect();
    Ok(RunSummary {
        dataset: ScoreDataset::new(cfg.kind.rubric(), records, judge_family, candidate_family),
        calls,
        retries,
        resumed,
        incomplete,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::judge::CandidateAnswer;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn questions(n: usize) -> Vec<JudgeQuestion> {
        (0..n)
            .map(|q| JudgeQuestion {
                question_id: format!("q{q}"),
                stratum: "default".into(),
                prompt: format!("Question {q}?"),
                second_prompt: None,
                reference: Some("42".into()),
                candidates: ["a", "b", "c"]
                    .iter()
                    .map(|c| CandidateAnswer {
                        candidate_id: c.to_string(),
                        answer: format!("answer of {c}"),
                        rationale: None,
                        second_answer: None,
                    })
                    .collect(),
            })
            .collect()
    }

    fn judges() -> Vec<JudgeSpec> {
        vec![
            JudgeSpec {
                judge_id: "j1".into(),
                model: "m1".into(),
                family: Some("fam1".into()),
            },
            JudgeSpec {
                judge_id: "j2".into(),
                model: "m2".into(),
                family: None,
            },
        ]
    }

    fn canned(qs: &[JudgeQuestion]) -> MockTransport {
        let mut entries = Vec::new();
        for (qi, q) in qs.iter().enumerate() {
            for j in ["j1", "j2"] {
                let scores = [("a", 1), ("b", (qi % 3) as i64 - 1), ("c", -1)]
                    .iter()
                    .map(|(c, s)| (c.to_string(), *s))
                    .collect();
                entries.push(MockEntry {
                    judge_id: j.into(),
                    question_id: q.question_id.clone(),
                    scores: Some(scores),
                    response: None,
                });
            }
        }
        MockTransport::new(TaskKind::MathNoRef, entries)
    }

    fn fast(cfg: &mut RunConfig) {
        cfg.retry.initial_backoff = Duration::ZERO;
    }

    #[test]
    fn mock_run_is_deterministic() {
        let qs = questions(6);
        let mock = canned(&qs);
        let mut cfg = RunConfig::new(TaskKind::MathNoRef, judges());
        fast(&mut cfg);
        let first = run_judging(&mock, &qs, &cfg).unwrap();
        cfg.concurrency = 1;
        let second = run_judging(&mock, &qs, &cfg).unwrap();
        assert_eq!(first.dataset, second.dataset);
        assert_eq!(first.dataset.records.len(), 6 * 2 * 3);
        assert_eq!(first.calls, 12);
        let r = &first.dataset.records[0];
        assert_eq!((r.question_id.as_str(), r.judge_id.as_str(), r.candidate_id.as_str()), ("q0", "j1", "a"));
        assert_eq!(r.assigned_level, 3);
        assert_eq!(first.dataset.judge_family["j1"], "fam1");
        assert_eq!(first.dataset.judge_family["j2"], "j2");
    }

    #[test]
    fn transient_failures_are_retried_and_logged() {
        let qs = questions(1);
        let mock = canned(&qs);
        let failures = AtomicUsize::new(0);
        let flaky = |req: &ChatRequest, ctx: &CallContext| {
            if ctx.judge_id == "j1" && failures.fetch_add(1, Ordering::SeqCst) < 2 {
                return Err(TransportError::Transient("HTTP 503".into()));
            }
            mock.complete(req, ctx)
        };
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::new(TaskKind::MathNoRef, judges());
        fast(&mut cfg);
        cfg.audit_log = Some(dir.path().join("audit.jsonl"));
        let out = run_judging(&flaky, &qs, &cfg).unwrap();
        assert_eq!(out.retries, 2);
        assert_eq!(out.calls, 4);
        assert_eq!(out.dataset.records.len(), 6);
        let log = std::fs::read_to_string(dir.path().join("audit.jsonl")).unwrap();
        let entries: Vec<AuditEntry> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        let j1: Vec<&AuditEntry> = entries.iter().filter(|e| e.judge_id == "j1").collect();
        assert_eq!(j1.len(), 3);
        assert_eq!(j1.iter().filter(|e| e.outcome.starts_with("transient")).count(), 2);
        assert!(j1[2].response.as_deref().unwrap().contains("evaluations"));
    }

    #[test]
    fn fatal_errors_carry_context() {
        let qs = questions(2);
        let denied = |_: &ChatRequest, _: &CallContext| {
            Err(classify_status(401, "{\"error\": \"bad key\"}"))
        };
        let mut cfg = RunConfig::new(TaskKind::MathNoRef, judges());
        fast(&mut cfg);
        let err = run_judging(&denied, &qs, &cfg).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("authentication rejected"), "{text}");
        assert!(text.contains("q0") || text.contains("q1"), "{text}");
        assert!(matches!(classify_status(429, ""), TransportError::Transient(_)));
        assert!(matches!(classify_status(502, ""), TransportError::Transient(_)));
        assert!(matches!(classify_status(400, ""), TransportError::Fatal(_)));
    }

    #[test]
    fn retry_budget_exhaustion_fails() {
        let qs = questions(1);
        let down = |_: &ChatRequest, _: &CallContext| Err(TransportError::Transient("timeout".into()));
        let mut cfg = RunConfig::new(TaskKind::MathNoRef, judges());
        fast(&mut cfg);
        cfg.retry.max_retries = 2;
        let err = run_judging(&down, &qs, &cfg).unwrap_err();
        assert!(err.to_string().contains("gave up after 3 attempts"), "{err}");
    }

    #[test]
    fn malformed_replies_keep_salvage() {
        let qs = questions(1);
        let truncated = |_: &ChatRequest, _: &CallContext| {
            Ok(r#"{"evaluations": [{"model_id": "1", "accuracy": {"score": 1}}, {"model_id": "2", "accu"#.to_string())
        };
        let mut cfg = RunConfig::new(TaskKind::MathNoRef, judges()[..1].to_vec());
        fast(&mut cfg);
        cfg.retry.max_retries = 1;
        let out = run_judging(&truncated, &qs, &cfg).unwrap();
        assert_eq!(out.calls, 2);
        assert_eq!(out.incomplete.len(), 1);
        assert_eq!(out.dataset.records.len(), 1);
        assert_eq!(out.dataset.records[0].assigned_level, 3);
    }

    #[test]
    fn backoff_grows_and_caps() {
        let p = RetryPolicy {
            max_retries: 10,
            initial_backoff: Duration::from_millis(100),
            multiplier: 2.0,
            max_backoff: Duration::from_millis(500),
            retry_malformed: true,
        };
        assert_eq!(p.backoff(0), Duration::from_millis(100));
        assert_eq!(p.backoff(2), Duration::from_millis(400));
        assert_eq!(p.backoff(5), Duration::from_millis(500));
    }

    #[test]
    fn checkpoint_resume_skips_finished_pairs() {
        let qs = questions(5);
        let mock = canned(&qs);
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::new(TaskKind::MathNoRef, judges());
        fast(&mut cfg);
        cfg.concurrency = 1;
        let reference = run_judging(&mock, &qs, &cfg).unwrap();

        cfg.checkpoint = Some(dir.path().join("ckpt.jsonl"));
        let served = AtomicUsize::new(0);
        let interrupted = |req: &ChatRequest, ctx: &CallContext| {
            if served.fetch_add(1, Ordering::SeqCst) >= 4 {
                return Err(TransportError::Fatal("quota exhausted".into()));
            }
            mock.complete(req, ctx)
        };
        assert!(run_judging(&interrupted, &qs, &cfg).is_err());
        // Simulate a kill mid-write.
        let mut f = OpenOptions::new()
            .append(true)
            .open(dir.path().join("ckpt.jsonl"))
            .unwrap();
        write!(f, "{{\"judge_id\": \"j1\", \"quest").unwrap();
        drop(f);

        let calls = AtomicUsize::new(0);
        let counting = |req: &ChatRequest, ctx: &CallContext| {
            calls.fetch_add(1, Ordering::SeqCst);
            mock.complete(req, ctx)
        };
        cfg.concurrency = 3;
        let resumed = run_judging(&counting, &qs, &cfg).unwrap();
        assert_eq!(resumed.resumed, 4);
        assert_eq!(calls.load(Ordering::SeqCst), 10 - 4);
        assert_eq!(resumed.dataset, reference.dataset);
    }
}
