//! Candidate sampling from teacher and student generators.
//!
//! A generator turns a prompt into raw response text. Three kinds exist:
//! a scripted mock (a lookup table, used for fixtures and tests), an HTTP
//! completion endpoint, and the in-process toy model. Sampling fans out
//! every (problem, generator, temperature, sample) tuple over a bounded
//! worker pool; a failed tuple is logged and the rest of the run continues.
//!
//! # HTTP completion contract
//!
//! `POST <endpoint>` with a JSON body
//! `{"model", "prompt", "temperature", "top_p", "max_tokens", "seed"}` and,
//! when `auth_token_env` is set, `Authorization: Bearer <token>`. A 2xx reply
//! must be JSON holding the text either as `{"text": ...}` or as
//! `{"choices": [{"text": ...}]}`. Timeouts, connection failures, 429 and
//! 5xx replies are retried with exponential backoff.

use std::collections::HashSet;
use std::path::PathBuf;
use std::thread;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::datamodel::{candidate_id, CandidateResponse, FailureRecord, ProgrammingProblem, Role, Source};
use crate::evaluator::{render_inference_prompt, PromptStyle};
use crate::tokenizer::{detokenize, prompt_tokens, TokenSequence};
use crate::trainer::format::training_prompt;
use crate::trainer::ToyLm;

#[derive(Debug, thiserror::Error)]
pub enum GeneratorError {
    #[error("mock script has no entry for prompt {prompt_hash} at temperature {temperature}")]
    MockMissing { prompt_hash: String, temperature: f64 },
    #[error("request to {endpoint} failed after {attempts} attempt(s): {message}")]
    Transport {
        endpoint: String,
        attempts: u32,
        message: String,
    },
    #[error("malformed reply from {endpoint} (status {status}): {excerpt}")]
    MalformedReply {
        endpoint: String,
        status: u16,
        excerpt: String,
    },
    #[error("auth token variable {0} is not set")]
    MissingToken(String),
    #[error("cannot load generator: {0}")]
    Load(String),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, thiserror::Error)]
pub enum SamplingError {
    #[error("sampling needs at least one teacher and one student generator")]
    MissingRole,
    #[error("duplicate generator id {0:?}")]
    DuplicateGenerator(String),
    #[error("invalid sampling plan: {0}")]
    InvalidPlan(String),
    #[error("generator {id}: {source}")]
    Build {
        id: String,
        #[source]
        source: GeneratorError,
    },
}

/// One call to a generator.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest<'a> {
    pub prompt: &'a str,
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    /// Seed for generators that sample locally.
    pub seed: u64,
}

pub trait Generator: Send + Sync {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, GeneratorError>;
}

impl<F> Generator for F
where
    F: Fn(&CompletionRequest<'_>) -> Result<String, GeneratorError> + Send + Sync,
{
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, GeneratorError> {
        self(request)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockEntry {
    pub prompt: String,
    /// `None` matches any temperature.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    pub response: String,
}

/// Deterministic response table keyed by (prompt, temperature).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MockScript {
    pub entries: Vec<MockEntry>,
}

impl MockScript {
    pub fn insert(&mut self, prompt: impl Into<String>, temperature: Option<f64>, response: impl Into<String>) {
        self.entries.push(MockEntry {
            prompt: prompt.into(),
            temperature,
            response: response.into(),
        });
    }

    /// Exact-temperature entries win over wildcard ones; earlier entries win
    /// over later ones.
    pub fn lookup(&self, prompt: &str, temperature: f64) -> Result<&str, GeneratorError> {
        let matching = |exact: bool| {
            self.entries.iter().find(|e| {
                e.prompt == prompt
                    && match e.temperature {
                        Some(t) => exact && t == temperature,
                        None => !exact,
                    }
            })
        };
        matching(true)
            .or_else(|| matching(false))
            .map(|e| e.response.as_str())
            .ok_or_else(|| GeneratorError::MockMissing {
                prompt_hash: prompt_hash(prompt),
                temperature,
            })
    }
}

impl Generator for MockScript {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, GeneratorError> {
        self.lookup(request.prompt, request.temperature).map(str::to_string)
    }
}

/// First 16 hex digits of the prompt's SHA-256.
pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(&Sha256::digest(prompt.as_bytes())[..8])
}

fn default_timeout_ms() -> u64 {
    30_000
}
fn default_max_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpCompletion {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub auth_token_env: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

impl HttpCompletion {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            auth_token_env: None,
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            backoff_ms: default_backoff_ms(),
        }
    }
}

pub struct HttpGenerator {
    config: HttpCompletion,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpGenerator {
    pub fn new(config: HttpCompletion) -> Result<Self, GeneratorError> {
        let token = match &config.auth_token_env {
            Some(var) => Some(std::env::var(var).map_err(|_| GeneratorError::MissingToken(var.clone()))?),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { config, token, agent })
    }

    fn attempt(&self, body: &Value) -> Attempt {
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(token) = &self.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = match req.send_json(body) {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(format!("reading body: {e}")),
        };
        if status == 429 || status >= 500 {
            return Attempt::Retry(format!("status {status}: {}", excerpt(&text)));
        }
        let malformed = || GeneratorError::MalformedReply {
            endpoint: self.config.endpoint.clone(),
            status,
            excerpt: excerpt(&text),
        };
        if !(200..300).contains(&status) {
            return Attempt::Fatal(malformed());
        }
        match serde_json::from_str::<Value>(&text).ok().and_then(|v| reply_text(&v)) {
            Some(t) => Attempt::Done(t),
            None => Attempt::Fatal(malformed()),
        }
    }
}

enum Attempt {
    Done(String),
    Retry(String),
    Fatal(GeneratorError),
}

fn reply_text(v: &Value) -> Option<String> {
    if let Some(t) = v.get("text").and_then(Value::as_str) {
        return Some(t.to_string());
    }
    v.get("choices")?.get(0)?.get("text")?.as_str().map(str::to_string)
}

fn excerpt(text: &str) -> String {
    text.chars().take(200).collect()
}

impl Generator for HttpGenerator {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, GeneratorError> {
        let body = serde_json::json!({
            "model": self.config.model,
            "prompt": request.prompt,
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_new_tokens,
            "seed": request.seed,
        });
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body) {
                Attempt::Done(text) => return Ok(text),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(message) => {
                    if attempts > self.config.max_retries {
                        return Err(GeneratorError::Transport {
                            endpoint: self.config.endpoint.clone(),
                            attempts,
                            message,
                        });
                    }
                    log::debug!("{}: attempt {attempts} failed: {message}", self.config.endpoint);
                    let delay = self.config.backoff_ms.saturating_mul(1 << (attempts - 1).min(16));
                    thread::sleep(Duration::from_millis(delay));
                }
            }
        }
    }
}

/// The toy model as a generator: the prompt is byte-tokenized and the model
/// continues it. Temperature 0 decodes greedily.
pub struct ToyLmGenerator {
    model: ToyLm,
}

impl ToyLmGenerator {
    pub fn new(model: ToyLm) -> Self {
        Self { model }
    }
}

impl Generator for ToyLmGenerator {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, GeneratorError> {
        let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
        let prompt = prompt_tokens(request.prompt);
        let out = self.model.generate(
            prompt.as_slice(),
            request.max_new_tokens,
            request.temperature,
            request.top_p,
            &mut rng,
        );
        Ok(detokenize(&TokenSequence(out)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GeneratorKind {
    Mock { script: MockScript },
    HttpCompletion(HttpCompletion),
    ToyLm { model_path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub generator_id: String,
    pub role: Role,
    pub kind: GeneratorKind,
}

impl GeneratorSpec {
    pub fn build(&self) -> Result<Box<dyn Generator>, GeneratorError> {
        Ok(match &self.kind {
            GeneratorKind::Mock { script } => Box::new(script.clone()),
            GeneratorKind::HttpCompletion(cfg) => Box::new(HttpGenerator::new(cfg.clone())?),
            GeneratorKind::ToyLm { model_path } => {
                let model = ToyLm::load(model_path).map_err(|e| GeneratorError::Load(e.to_string()))?;
                Box::new(ToyLmGenerator::new(model))
            }
        })
    }
}

/// Calls `generator` once.
pub fn complete(
    generator: &dyn Generator,
    prompt: &str,
    temperature: f64,
    top_p: f64,
    max_new_tokens: usize,
) -> Result<String, GeneratorError> {
    generator.complete(&CompletionRequest {
        prompt,
        temperature,
        top_p,
        max_new_tokens,
        seed: 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingPlan {
    pub temperatures: Vec<f64>,
    pub top_p: f64,
    pub samples_per_temperature: u32,
    pub max_new_tokens: usize,
    pub workers: usize,
    pub prompt_style: PromptStyle,
    pub seed: u64,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        Self {
            temperatures: vec![0.2, 0.8, 1.2],
            top_p: 0.95,
            samples_per_temperature: 1,
            max_new_tokens: 512,
            workers: 8,
            prompt_style: PromptStyle::PanGu2,
            seed: 0,
        }
    }
}

impl SamplingPlan {
    pub fn validate(&self) -> Result<(), SamplingError> {
        let bad = |m: String| Err(SamplingError::InvalidPlan(m));
        if self.temperatures.is_empty() {
            return bad("temperatures must not be empty".into());
        }
        if let Some(t) = self.temperatures.iter().find(|t| !(0.0..=2.0).contains(*t)) {
            return bad(format!("temperature {t} outside [0, 2]"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad(format!("top_p {} outside (0, 1]", self.top_p));
        }
        if self.samples_per_temperature == 0 || self.max_new_tokens == 0 || self.workers == 0 {
            return bad("samples_per_temperature, max_new_tokens and workers must be positive".into());
        }
        Ok(())
    }
}

/// The prompt a generator sees for `problem`. PanGu2-style prompts tolerate
/// a missing signature; the other styles require one.
pub fn sampling_prompt(problem: &ProgrammingProblem, style: PromptStyle) -> Result<String, String> {
    match style {
        PromptStyle::PanGu2 => Ok(training_prompt(problem)),
        other => render_inference_prompt(problem, other).map_err(|e| e.to_string()),
    }
}

/// Seed for one sampling call, derived from its identity.
pub fn sample_seed(base: u64, problem_id: &str, generator_id: &str, temperature: f64, index: u32) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(problem_id.as_bytes());
    h.update([0]);
    h.update(generator_id.as_bytes());
    h.update([0]);
    h.update(temperature.to_bits().to_le_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// A generator together with its identity in a sampling run.
pub struct NamedGenerator<'a> {
    pub generator_id: String,
    pub role: Role,
    pub generator: &'a dyn Generator,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SamplingOutput {
    pub responses: Vec<CandidateResponse>,
    pub failures: Vec<FailureRecord>,
}

/// Builds each generator from its spec and samples with them.
pub fn sample_responses(
    problems: &[ProgrammingProblem],
    specs: &[GeneratorSpec],
    plan: &SamplingPlan,
) -> Result<SamplingOutput, SamplingError> {
    check_generators(specs.iter().map(|s| (s.generator_id.as_str(), s.role)))?;
    plan.validate()?;
    let built = specs
        .iter()
        .map(|s| {
            s.build().map_err(|source| SamplingError::Build {
                id: s.generator_id.clone(),
                source,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let named: Vec<NamedGenerator<'_>> = specs
        .iter()
        .zip(&built)
        .map(|(s, g)| NamedGenerator {
            generator_id: s.generator_id.clone(),
            role: s.role,
            generator: g.as_ref(),
        })
        .collect();
    sample_with(problems, &named, plan)
}

fn check_generators<'a>(ids: impl Iterator<Item = (&'a str, Role)>) -> Result<(), SamplingError> {
    let mut seen = HashSet::new();
    let (mut teachers, mut students) = (0, 0);
    for (id, role) in ids {
        if !seen.insert(id) {
            return Err(SamplingError::DuplicateGenerator(id.to_string()));
        }
        match role {
            Role::Teacher => teachers += 1,
            Role::Student => students += 1,
        }
    }
    if teachers == 0 || students == 0 {
        return Err(SamplingError::MissingRole);
    }
    Ok(())
}

struct Job<'a> {
    problem: &'a ProgrammingProblem,
    generator: &'a NamedGenerator<'a>,
    temperature: f64,
    index: u32,
}

pub fn sample_with(
    problems: &[ProgrammingProblem],
    generators: &[NamedGenerator<'_>],
    plan: &SamplingPlan,
) -> Result<SamplingOutput, SamplingError> {
    check_generators(generators.iter().map(|g| (g.generator_id.as_str(), g.role)))?;
    plan.validate()?;

    let mut jobs = Vec::new();
    for problem in problems {
        for generator in generators {
            for &temperature in &plan.temperatures {
                for index in 0..plan.samples_per_temperature {
                    jobs.push(Job {
                        problem,
                        generator,
                        temperature,
                        index,
                    });
                }
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.workers)
        .build()
        .map_err(|e| SamplingError::InvalidPlan(format!("worker pool: {e}")))?;
    let results: Vec<Result<CandidateResponse, FailureRecord>> = pool.install(|| {
        use rayon::prelude::*;
        jobs.par_iter().map(|job| run_job(job, plan)).collect()
    });

    let mut out = SamplingOutput::default();
    for r in results {
        match r {
            Ok(c) => out.responses.push(c),
            Err(f) => out.failures.push(f),
        }
    }
    out.responses.sort_by(|a, b| {
        (&a.problem_id, &a.source().generator_id)
            .cmp(&(&b.problem_id, &b.source().generator_id))
            .then(a.temperature.total_cmp(&b.temperature))
            .then(a.sample_index.cmp(&b.sample_index))
    });
    out.failures.sort_by(|a, b| a.subject.cmp(&b.subject));
    Ok(out)
}

fn run_job(job: &Job<'_>, plan: &SamplingPlan) -> Result<CandidateResponse, FailureRecord> {
    let gen_id = &job.generator.generator_id;
    let id = candidate_id(&job.problem.id, gen_id, job.temperature, job.index);
    let fail = |message: String| FailureRecord {
        stage: "sample".into(),
        subject: id.clone(),
        message,
    };
    let prompt = sampling_prompt(job.problem, plan.prompt_style).map_err(fail)?;
    let request = CompletionRequest {
        prompt: &prompt,
        temperature: job.temperature,
        top_p: plan.top_p,
        max_new_tokens: plan.max_new_tokens,
        seed: sample_seed(plan.seed, &job.problem.id, gen_id, job.temperature, job.index),
    };
    let raw = job
        .generator
        .generator
        .complete(&request)
        .map_err(|e| fail(e.to_string()))?;
    let source = Source {
        role: job.generator.role,
        generator_id: gen_id.clone(),
    };
    Ok(CandidateResponse::new(
        &job.problem.id,
        source,
        job.index,
        raw,
        job.temperature,
        plan.top_p,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mock_lookup_hits_and_misses() {
        let mut script = MockScript::default();
        script.insert("p", Some(0.2), "r");
        assert_eq!(complete(&script, "p", 0.2, 0.95, 16).unwrap(), "r");
        match complete(&script, "p", 0.8, 0.95, 16).unwrap_err() {
            GeneratorError::MockMissing { prompt_hash: h, temperature } => {
                assert_eq!(h, prompt_hash("p"));
                assert_eq!(temperature, 0.8);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn exact_temperature_beats_wildcard() {
        let mut script = MockScript::default();
        script.insert("p", None, "any");
        script.insert("p", Some(1.2), "hot");
        assert_eq!(script.lookup("p", 1.2).unwrap(), "hot");
        assert_eq!(script.lookup("p", 0.2).unwrap(), "any");
    }

    #[test]
    fn plan_validation() {
        assert!(SamplingPlan::default().validate().is_ok());
        let empty = SamplingPlan {
            temperatures: vec![],
            ..Default::default()
        };
        assert!(empty.validate().is_err());
        let hot = SamplingPlan {
            temperatures: vec![2.5],
            ..Default::default()
        };
        assert!(hot.validate().is_err());
    }

    #[test]
    fn seeds_differ_per_tuple() {
        let a = sample_seed(0, "p", "g", 0.2, 0);
        assert_eq!(a, sample_seed(0, "p", "g", 0.2, 0));
        assert_ne!(a, sample_seed(0, "p", "g", 0.2, 1));
        assert_ne!(a, sample_seed(0, "p", "g", 0.8, 0));
        assert_ne!(a, sample_seed(1, "p", "g", 0.2, 0));
    }

    #[test]
    fn reply_shapes() {
        assert_eq!(reply_text(&serde_json::json!({"text": "a"})).as_deref(), Some("a"));
        assert_eq!(
            reply_text(&serde_json::json!({"choices": [{"text": "b"}]})).as_deref(),
            Some("b")
        );
        assert_eq!(reply_text(&serde_json::json!({"output": "c"})), None);
    }
}
