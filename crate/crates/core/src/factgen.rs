//! Two-stage fact generation against an OpenAI-compatible chat-completions
//! service, with request/response archiving, offline replay and manual
//! audit bookkeeping.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::darc::{normalize_whitespace, FactRecord};
use crate::tracing::fact_id;

pub const ENDPOINT_ENV: &str = "CATRACE_LLM_ENDPOINT";
pub const API_KEY_ENV: &str = "CATRACE_LLM_API_KEY";
pub const DEFAULT_BATCH_SIZE: usize = 100;
pub const AUDIT_SAMPLE_SIZE: usize = 25;
pub const AUDIT_THRESHOLD: f64 = 0.01;

#[derive(Debug, Error)]
pub enum FactgenError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited after {attempts} attempts: {message}")]
    RateLimited { attempts: usize, message: String },
    #[error("transport: {0}")]
    Transport(String),
    #[error("no facts to convert")]
    EmptyBatch,
    #[error("archive: {0}")]
    Archive(#[from] std::io::Error),
    #[error("missing configuration: {0}")]
    Config(String),
    #[error("invalid job: {0}")]
    InvalidJob(String),
    #[error("audit: {0}")]
    Audit(String),
}

/// Failure of a single service call.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClientError {
    #[error("auth: {0}")]
    Auth(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    /// Server-side or connection failure worth retrying.
    #[error("transient: {0}")]
    Transient(String),
    #[error("bad response: {0}")]
    BadResponse(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// Request body. Sampling parameters are deliberately absent so the service
/// defaults apply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
}

impl ChatRequest {
    pub fn user(model: &str, content: String) -> Self {
        Self {
            model: model.to_string(),
            messages: vec![ChatMessage {
                role: "user".into(),
                content,
            }],
        }
    }
}

pub trait ChatClient: Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError>;
}

/// Blocking HTTP client for a chat-completions endpoint.
pub struct HttpChatClient {
    endpoint: String,
    api_key: String,
    agent: ureq::Agent,
}

impl HttpChatClient {
    pub fn new(endpoint: &str, api_key: &str) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(300)))
            .build()
            .into();
        Self {
            endpoint: endpoint.to_string(),
            api_key: api_key.to_string(),
            agent,
        }
    }

    pub fn from_env() -> Result<Self, FactgenError> {
        let endpoint = std::env::var(ENDPOINT_ENV).map_err(|_| FactgenError::Config(ENDPOINT_ENV.into()))?;
        let key = std::env::var(API_KEY_ENV).map_err(|_| FactgenError::Config(API_KEY_ENV.into()))?;
        Ok(Self::new(&endpoint, &key))
    }
}

#[derive(Deserialize)]
struct CompletionBody {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChatMessage,
}

impl ChatClient for HttpChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(request)
            .map_err(|e| ClientError::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ClientError::Transient(e.to_string()))?;
        match status {
            200..=299 => {}
            401 | 403 => return Err(ClientError::Auth(body)),
            429 => return Err(ClientError::RateLimited(body)),
            500..=599 => return Err(ClientError::Transient(format!("{status}: {body}"))),
            _ => return Err(ClientError::BadResponse(format!("{status}: {body}"))),
        }
        let parsed: CompletionBody =
            serde_json::from_str(&body).map_err(|e| ClientError::BadResponse(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| ClientError::BadResponse("no choices".into()))
    }
}

/// Answers requests from a previously recorded archive.
pub struct ReplayClient {
    responses: HashMap<String, String>,
}

impl ReplayClient {
    pub fn open(root: &Path) -> Result<Self, FactgenError> {
        let mut responses = HashMap::new();
        for sub in sorted_entries(root)? {
            if !sub.is_dir() {
                continue;
            }
            for path in sorted_entries(&sub)? {
                let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                let Some(stem) = name.strip_suffix(".request.json") else {
                    continue;
                };
                let response_path = sub.join(format!("{stem}.response.json"));
                if !response_path.exists() {
                    continue;
                }
                let request: ChatRequest = serde_json::from_str(&fs::read_to_string(&path)?)
                    .map_err(|e| FactgenError::Transport(format!("{}: {e}", path.display())))?;
                let response: ArchivedResponse = serde_json::from_str(&fs::read_to_string(&response_path)?)
                    .map_err(|e| FactgenError::Transport(format!("{}: {e}", response_path.display())))?;
                responses.insert(request_key(&request), response.content);
            }
        }
        Ok(Self { responses })
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

fn request_key(r: &ChatRequest) -> String {
    serde_json::to_string(r).expect("serializable")
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, std::io::Error> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    v.sort();
    Ok(v)
}

impl ChatClient for ReplayClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        self.responses
            .get(&request_key(request))
            .cloned()
            .ok_or_else(|| ClientError::BadResponse("request not in archive".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ArchivedResponse {
    model: String,
    content: String,
}

/// On-disk record of every request and raw response, laid out as
/// `<root>/<subcategory>/<batch>.{request,response}.json`.
#[derive(Debug, Clone)]
pub struct Archive {
    root: PathBuf,
}

fn path_safe(name: &str) -> String {
    name.chars()
        .map(|c| if c == '/' || c == '\\' || c == '\0' { '_' } else { c })
        .collect()
}

impl Archive {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, subcategory: &str) -> PathBuf {
        self.root.join(path_safe(subcategory))
    }

    pub fn request_path(&self, subcategory: &str, batch: &str) -> PathBuf {
        self.dir(subcategory).join(format!("{batch}.request.json"))
    }

    pub fn response_path(&self, subcategory: &str, batch: &str) -> PathBuf {
        self.dir(subcategory).join(format!("{batch}.response.json"))
    }

    fn write_request(&self, subcategory: &str, batch: &str, request: &ChatRequest) -> Result<(), FactgenError> {
        fs::create_dir_all(self.dir(subcategory))?;
        let json = serde_json::to_string_pretty(request).expect("serializable");
        fs::write(self.request_path(subcategory, batch), json + "\n")?;
        Ok(())
    }

    fn write_response(&self, subcategory: &str, batch: &str, model: &str, content: &str) -> Result<(), FactgenError> {
        let body = ArchivedResponse {
            model: model.to_string(),
            content: content.to_string(),
        };
        let json = serde_json::to_string_pretty(&body).expect("serializable");
        fs::write(self.response_path(subcategory, batch), json + "\n")?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: usize,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            initial_backoff: Duration::from_secs(2),
        }
    }
}

/// One service call with retries. The request is archived before the call
/// and the raw completion is archived before it is returned.
pub fn run_stage(
    client: &dyn ChatClient,
    request: &ChatRequest,
    archive: &Archive,
    subcategory: &str,
    batch: &str,
    policy: RetryPolicy,
    sleep: &dyn Fn(Duration),
) -> Result<String, FactgenError> {
    archive.write_request(subcategory, batch, request)?;
    let mut backoff = policy.initial_backoff;
    let attempts = policy.attempts.max(1);
    for attempt in 1..=attempts {
        let last = attempt == attempts;
        match client.complete(request) {
            Ok(text) => {
                archive.write_response(subcategory, batch, &request.model, &text)?;
                return Ok(text);
            }
            Err(ClientError::Auth(m)) => return Err(FactgenError::Auth(m)),
            Err(ClientError::BadResponse(m)) => return Err(FactgenError::Transport(m)),
            Err(ClientError::RateLimited(m)) if last => return Err(FactgenError::RateLimited { attempts, message: m }),
            Err(ClientError::Transient(m)) if last => return Err(FactgenError::Transport(m)),
            Err(e) => {
                log::warn!("{subcategory}/{batch}: attempt {attempt} failed: {e}; retrying in {backoff:?}");
                sleep(backoff);
                backoff *= 2;
            }
        }
    }
    unreachable!("loop returns on the last attempt")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationJob {
    pub subcategory: String,
    pub target_count: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Completes "Generate N facts about ...".
    pub topic: String,
    pub exemplars: [String; 3],
    #[serde(default)]
    pub prior_facts: Vec<String>,
}

fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}

impl GenerationJob {
    pub fn validate(&self) -> Result<(), FactgenError> {
        if self.batch_size == 0 {
            return Err(FactgenError::InvalidJob("batch size must be at least 1".into()));
        }
        if self.exemplars.iter().any(|e| e.trim().is_empty()) {
            return Err(FactgenError::InvalidJob("empty exemplar".into()));
        }
        if self.topic.trim().is_empty() {
            return Err(FactgenError::InvalidJob("empty topic".into()));
        }
        Ok(())
    }
}

/// First-stage prompt. The newest `batch_size` prior facts are listed so the
/// service can avoid repeating them.
pub fn build_generation_prompt(job: &GenerationJob, count: usize) -> String {
    let mut p = format!(
        "Generate {count} facts about {}.\n\n\
         Limit the size of each fact to no more than 15 words.\n\
         Do not include punctuation in any fact.\n\
         Do not reuse any of the previous facts provided.\n\n\
         Here is an example of three facts and their correct formatting:\n",
        job.topic
    );
    for e in &job.exemplars {
        p.push('\n');
        p.push_str(e.trim());
        p.push('\n');
    }
    let keep = job.batch_size.min(job.prior_facts.len());
    if keep > 0 {
        p.push_str("\nPrevious facts:\n\n");
        for f in &job.prior_facts[job.prior_facts.len() - keep..] {
            p.push_str(f);
            p.push('\n');
        }
    }
    p
}

fn conversion_example() -> FactRecord {
    FactRecord {
        known_id: Some("NONE".into()),
        full_fact: "The first bronchi to branch from the trachea are the right and left main bronchi".into(),
        subject: "bronchi".into(),
        attribute: "bronchi".into(),
        prediction: "bronchi".into(),
        prompt: "The first bronchi to branch from the trachea are the right and left main".into(),
        group: "Respiratory".into(),
        relation_id: Some("NONE".into()),
        template: Some("NONE".into()),
    }
}

const CONVERSION_SCHEMA: &str = r#"{
  "known_id": "NONE",
  "full_fact": "COMPLETE FACT",
  "subject": "SUBJECT OF FACT",
  "attribute": "OBJECT OF FACT or FINAL WORD OF FACT",
  "prediction": "OBJECT OF FACT or FINAL WORD OF FACT",
  "prompt": "ALL OF full_fact UP TO BUT NOT INCLUDING THE OBJECT OF FACT OR THE FINAL WORD OF FACT",
  "group": "CATEGORY OF SUBJECT",
  "relation_id": "NONE",
  "template": "NONE"
}"#;

/// Second-stage prompt asking for one JSON object per raw fact.
pub fn build_conversion_prompt(facts: &[String], subcategory: &str) -> Result<String, FactgenError> {
    if facts.is_empty() {
        return Err(FactgenError::EmptyBatch);
    }
    let example = conversion_example();
    let mut p = format!(
        "Interpret and then format each of the provided facts about {subcategory} \
         according to the following json format:\n\n{CONVERSION_SCHEMA}\n\n\
         Here is an example of a fact with its correct JSON formatting:\n\n{}\n\n{}\n\n\
         The facts to be converted are:\n\n",
        example.full_fact,
        serde_json::to_string_pretty(&example).expect("serializable"),
    );
    for f in facts {
        p.push_str(f);
        p.push('\n');
    }
    Ok(p)
}

/// Fact lines from a first-stage completion, with list markers removed.
pub fn parse_generated_facts(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| {
            let t = l.trim();
            let digits = t.trim_start_matches(|c: char| c.is_ascii_digit());
            let t = match digits.strip_prefix(['.', ')']) {
                Some(rest) if digits.len() < t.len() => rest,
                _ => t,
            };
            let t = t.trim_start_matches(['-', '*', '\u{2022}']).trim();
            t.trim_matches('"').trim().to_string()
        })
        .filter(|l| !l.is_empty() && !l.ends_with(':'))
        .collect()
}

fn strip_code_fences(text: &str) -> String {
    text.lines()
        .filter(|l| !l.trim_start().starts_with("```"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Top-level `{...}` spans, honoring JSON string quoting.
fn brace_objects(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let (mut depth, mut start, mut in_str, mut escaped) = (0usize, 0usize, false, false);
    for (i, c) in text.char_indices() {
        if in_str {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_str = true,
            '{' => {
                if depth == 0 {
                    start = i;
                }
                depth += 1;
            }
            '}' if depth > 0 => {
                depth -= 1;
                if depth == 0 {
                    out.push(&text[start..=i]);
                }
            }
            _ => {}
        }
    }
    out
}

fn strip_trailing_commas(obj: &str) -> String {
    let mut out = String::with_capacity(obj.len());
    let (mut in_str, mut escaped) = (false, false);
    let chars: Vec<char> = obj.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        if in_str {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            out.push(c);
            continue;
        }
        if c == '"' {
            in_str = true;
        }
        if c == ',' {
            let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
            if matches!(next, Some('}') | Some(']')) {
                continue;
            }
        }
        out.push(c);
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConversionOutput {
    pub records: Vec<FactRecord>,
    /// Object texts that could not be read as fact records.
    pub rejected: Vec<String>,
}

/// Fact records from a second-stage completion. Code fences and trailing
/// commas are tolerated; other malformed objects are rejected.
pub fn parse_conversion_output(text: &str) -> ConversionOutput {
    let cleaned = strip_code_fences(text);
    let mut out = ConversionOutput::default();
    for obj in brace_objects(&cleaned) {
        match serde_json::from_str::<FactRecord>(&strip_trailing_commas(obj)) {
            Ok(r) => out.records.push(r),
            Err(_) => out.rejected.push(obj.to_string()),
        }
    }
    out
}

fn dedupe_key(fact: &str) -> String {
    normalize_whitespace(fact).to_lowercase()
}

/// Appends facts not already present (ignoring case and whitespace) and
/// returns how many were dropped as duplicates.
pub fn dedupe_and_merge(new_facts: Vec<String>, accumulated: &mut Vec<String>) -> usize {
    let mut seen: HashSet<String> = accumulated.iter().map(|f| dedupe_key(f)).collect();
    let mut removed = 0;
    for f in new_facts {
        if seen.insert(dedupe_key(&f)) {
            accumulated.push(f);
        } else {
            removed += 1;
        }
    }
    removed
}

pub fn dedupe(facts: Vec<String>) -> Vec<String> {
    let mut out = Vec::new();
    dedupe_and_merge(facts, &mut out);
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GenerationOutcome {
    pub facts: Vec<String>,
    pub batches: usize,
    pub duplicates_removed: usize,
}

/// Runs first-stage batches until the target is reached or `max_batches`
/// calls have been made. Batches are sequential because each one lists the
/// facts gathered so far.
pub fn run_generation(
    job: &GenerationJob,
    model: &str,
    client: &dyn ChatClient,
    archive: &Archive,
    max_batches: usize,
    policy: RetryPolicy,
    sleep: &dyn Fn(Duration),
) -> Result<GenerationOutcome, FactgenError> {
    job.validate()?;
    let mut job = job.clone();
    let mut facts = Vec::new();
    let mut duplicates_removed = 0;
    let mut batches = 0;
    while facts.len() < job.target_count && batches < max_batches {
        let count = job.batch_size.min(job.target_count - facts.len());
        let request = ChatRequest::user(model, build_generation_prompt(&job, count));
        let batch = format!("generate-{batches:04}");
        let text = run_stage(client, &request, archive, &job.subcategory, &batch, policy, sleep)?;
        batches += 1;
        let before = facts.len();
        duplicates_removed += dedupe_and_merge(parse_generated_facts(&text), &mut facts);
        job.prior_facts.extend(facts[before..].iter().cloned());
    }
    facts.truncate(job.target_count);
    Ok(GenerationOutcome {
        facts,
        batches,
        duplicates_removed,
    })
}

/// Runs second-stage conversion in batches. The `group` of every record is
/// set to the subcategory name.
#[allow(clippy::too_many_arguments)]
pub fn run_conversion(
    facts: &[String],
    subcategory: &str,
    batch_size: usize,
    model: &str,
    client: &dyn ChatClient,
    archive: &Archive,
    policy: RetryPolicy,
    sleep: &dyn Fn(Duration),
) -> Result<ConversionOutput, FactgenError> {
    if facts.is_empty() {
        return Err(FactgenError::EmptyBatch);
    }
    let mut out = ConversionOutput::default();
    for (i, chunk) in facts.chunks(batch_size.max(1)).enumerate() {
        let request = ChatRequest::user(model, build_conversion_prompt(chunk, subcategory)?);
        let text = run_stage(
            client,
            &request,
            archive,
            subcategory,
            &format!("convert-{i:04}"),
            policy,
            sleep,
        )?;
        let mut parsed = parse_conversion_output(&text);
        for r in &mut parsed.records {
            r.group = subcategory.to_string();
        }
        out.records.extend(parsed.records);
        out.rejected.extend(parsed.rejected);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Ok,
    Vague,
    Inaccurate,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSample {
    pub subcategory: String,
    pub seed: u64,
    pub fact_ids: Vec<String>,
    pub verdicts: Option<Vec<Verdict>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AuditResult {
    pub sample_size: usize,
    pub errors: usize,
    pub error_rate: f64,
    /// No errors in the sample, or an estimated rate within the threshold.
    pub pass: bool,
}

/// Draws up to 25 facts of one subcategory, reproducibly for a seed.
pub fn audit(subcategory: &str, facts: &[FactRecord], seed: u64) -> AuditSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = AUDIT_SAMPLE_SIZE.min(facts.len());
    let mut idx = rand::seq::index::sample(&mut rng, facts.len(), n).into_vec();
    idx.sort_unstable();
    AuditSample {
        subcategory: subcategory.to_string(),
        seed,
        fact_ids: idx.into_iter().map(|i| fact_id(&facts[i])).collect(),
        verdicts: None,
    }
}

pub fn record_audit(sample: &mut AuditSample, verdicts: Vec<Verdict>) -> Result<AuditResult, FactgenError> {
    if verdicts.len() != sample.fact_ids.len() {
        return Err(FactgenError::Audit(format!(
            "{} verdicts for {} sampled facts",
            verdicts.len(),
            sample.fact_ids.len()
        )));
    }
    sample.verdicts = Some(verdicts);
    Ok(audit_result(sample).expect("verdicts recorded"))
}

pub fn audit_result(sample: &AuditSample) -> Option<AuditResult> {
    let v = sample.verdicts.as_ref()?;
    let errors = v.iter().filter(|&&x| x != Verdict::Ok).count();
    let error_rate = if v.is_empty() {
        0.0
    } else {
        errors as f64 / v.len() as f64
    };
    Some(AuditResult {
        sample_size: v.len(),
        errors,
        error_rate,
        pass: errors == 0 || error_rate <= AUDIT_THRESHOLD,
    })
}

/// Errors over all audited facts.
pub fn pooled_error_rate(results: &[AuditResult]) -> f64 {
    let n: usize = results.iter().map(|r| r.sample_size).sum();
    let e: usize = results.iter().map(|r| r.errors).sum();
    if n == 0 {
        0.0
    } else {
        e as f64 / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    fn job() -> GenerationJob {
        GenerationJob {
            subcategory: "Respiratory".into(),
            target_count: 10,
            batch_size: 100,
            topic: "the human respiratory system".into(),
            exemplars: [
                "The trachea splits into two main bronchi".into(),
                "Alveoli are where gas exchange happens".into(),
                "The diaphragm contracts to draw air into the lungs".into(),
            ],
            prior_facts: vec![],
        }
    }

    #[test]
    fn generation_prompt_contents() {
        let p = build_generation_prompt(&job(), 10);
        assert!(p.starts_with("Generate 10 facts about the human respiratory system."));
        assert!(p.contains("no more than 15 words"));
        for e in &job().exemplars {
            assert!(p.contains(e.as_str()));
        }
        assert!(!p.contains("Previous facts"));
    }

    #[test]
    fn only_newest_prior_facts_are_listed() {
        let mut j = job();
        j.prior_facts = (0..250).map(|i| format!("prior fact number {i}")).collect();
        let p = build_generation_prompt(&j, 10);
        assert!(!p.contains("prior fact number 149\n"));
        assert!(p.contains("prior fact number 150\n"));
        assert!(p.contains("prior fact number 249\n"));
        assert_eq!(p.matches("prior fact number").count(), 100);
    }

    #[test]
    fn conversion_prompt() {
        assert!(matches!(
            build_conversion_prompt(&[], "X"),
            Err(FactgenError::EmptyBatch)
        ));
        let facts: Vec<String> = (0..100).map(|i| format!("fact {i}")).collect();
        let p = build_conversion_prompt(&facts, "Respiratory").unwrap();
        assert!(facts.iter().all(|f| p.contains(&format!("{f}\n"))));
        assert!(p.contains("\"subject\": \"bronchi\""));
    }

    struct Scripted {
        replies: Mutex<Vec<Result<String, ClientError>>>,
        calls: Mutex<usize>,
    }

    impl ChatClient for Scripted {
        fn complete(&self, _: &ChatRequest) -> Result<String, ClientError> {
            *self.calls.lock().unwrap() += 1;
            self.replies.lock().unwrap().remove(0)
        }
    }

    #[test]
    fn retries_rate_limits_then_succeeds() {
        let dir = tempfile::tempdir().unwrap();
        let archive = Archive::new(dir.path());
        let client = Scripted {
            replies: Mutex::new(vec![
                Err(ClientError::RateLimited("slow down".into())),
                Err(ClientError::RateLimited("slow down".into())),
                Ok("done".into()),
            ]),
            calls: Mutex::new(0),
        };
        let slept = Mutex::new(Vec::new());
        let req = ChatRequest::user("m", "hi".into());
        let out = run_stage(
            &client,
            &req,
            &archive,
            "Resp/x",
            "generate-0000",
            RetryPolicy::default(),
            &|d| slept.lock().unwrap().push(d),
        )
        .unwrap();
        assert_eq!(out, "done");
        assert_eq!(*client.calls.lock().unwrap(), 3);
        assert_eq!(
            *slept.lock().unwrap(),
            vec![Duration::from_secs(2), Duration::from_secs(4)]
        );
        assert!(archive.response_path("Resp/x", "generate-0000").exists());
        assert!(dir.path().join("Resp_x").is_dir());
    }

    #[test]
    fn gives_up_after_three_attempts() {
        let dir = tempfile::tempdir().unwrap();
        let client = Scripted {
            replies: Mutex::new(vec![Err(ClientError::RateLimited("x".into())); 3]),
            calls: Mutex::new(0),
        };
        let req = ChatRequest::user("m", "hi".into());
        let err = run_stage(
            &client,
            &req,
            &Archive::new(dir.path()),
            "S",
            "b",
            RetryPolicy::default(),
            &|_| {},
        )
        .unwrap_err();
        assert!(matches!(err, FactgenError::RateLimited { attempts: 3, .. }));
        let client = Scripted {
            replies: Mutex::new(vec![Err(ClientError::Auth("no".into()))]),
            calls: Mutex::new(0),
        };
        let err = run_stage(
            &client,
            &req,
            &Archive::new(dir.path()),
            "S",
            "b",
            RetryPolicy::default(),
            &|_| {},
        )
        .unwrap_err();
        assert!(matches!(err, FactgenError::Auth(_)));
        assert_eq!(*client.calls.lock().unwrap(), 1);
    }

    #[test]
    fn parses_fenced_output_with_trailing_commas() {
        let text = "Here you go:\n```json\n{\n \"known_id\": \"NONE\",\n \"full_fact\": \"Gas exchange happens in alveoli\",\n \"subject\": \"Gas exchange\",\n \"attribute\": \"alveoli\",\n \"prediction\": \"alveoli\",\n \"prompt\": \"Gas exchange happens in\",\n \"group\": \"Respiratory\",\n \"relation_id\": \"NONE\",\n \"template\": \"NONE\",\n},\n{\"full_fact\": \"broken {\"}\n```";
        let out = parse_conversion_output(text);
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].prediction, "alveoli");
        assert_eq!(out.rejected.len(), 1);
    }

    #[test]
    fn generated_fact_lines() {
        let facts = parse_generated_facts("Here are facts:\n1. The lungs hold air\n- Alveoli are small\n\n\"Quoted fact\"\n206 bones form the skeleton\n");
        assert_eq!(
            facts,
            vec![
                "The lungs hold air",
                "Alveoli are small",
                "Quoted fact",
                "206 bones form the skeleton"
            ]
        );
    }

    #[test]
    fn dedupe_rules() {
        let mut acc = vec!["The lungs hold air".to_string()];
        let removed = dedupe_and_merge(
            vec![
                "the  LUNGS hold air ".into(),
                "Bronchi branch".into(),
                "bronchi branch".into(),
            ],
            &mut acc,
        );
        assert_eq!(removed, 2);
        assert_eq!(acc.len(), 2);
        let once = dedupe(acc.clone());
        assert_eq!(dedupe(once.clone()), once);
    }

    #[test]
    fn audit_arithmetic() {
        let mut s = AuditSample {
            subcategory: "S".into(),
            seed: 0,
            fact_ids: (0..25).map(|i| i.to_string()).collect(),
            verdicts: None,
        };
        let r = record_audit(&mut s, vec![Verdict::Ok; 25]).unwrap();
        assert_eq!((r.error_rate, r.pass), (0.0, true));
        let mut v = vec![Verdict::Ok; 25];
        v[3] = Verdict::Inaccurate;
        let r = record_audit(&mut s, v).unwrap();
        assert_eq!((r.errors, r.error_rate, r.pass), (1, 0.04, false));
        assert!(record_audit(&mut s, vec![Verdict::Ok]).is_err());
    }
}
