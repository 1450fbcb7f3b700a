//! Record types shared by every pipeline stage, and their line-delimited JSON
//! encoding.
//!
//! Each record is written as one JSON object per line. The object carries a
//! schema version field `v` (currently `1`) next to the record's own fields.
//! Fields this version does not know about are kept in an `extra` map and
//! written back out unchanged, so older tools can pass newer records through.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::evaluator::DecodingConfig;
use crate::executor::extract_code;

pub const SCHEMA_VERSION: u64 = 1;
const VERSION_FIELD: &str = "v";

/// Unknown fields carried through a read/write cycle.
pub type Extra = serde_json::Map<String, Value>;

/// A type that can be stored as one line of a corpus file.
pub trait Record: Serialize + DeserializeOwned {
    /// Short name used in diagnostics.
    const KIND: &'static str;

    /// Identifier that must be unique within one file, if the type has one.
    fn key(&self) -> Option<&str> {
        None
    }

    fn validate(&self) -> Result<(), String> {
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("cannot encode {kind} record #{index}: {message}")]
    Encode {
        kind: &'static str,
        index: usize,
        message: String,
    },
    #[error("duplicate {kind} id {id:?} (records #{first} and #{second})")]
    DuplicateId {
        kind: &'static str,
        id: String,
        first: usize,
        second: usize,
    },
    #[error("{path}: {} malformed line(s): {}", .lines.len(), LineList(.lines))]
    Malformed { path: PathBuf, lines: Vec<LineError> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

struct LineList<'a>(&'a [LineError]);

impl fmt::Display for LineList<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "line {}: {}", e.line, e.message)?;
        }
        Ok(())
    }
}

/// Encodes one record as a single JSON line (without the trailing newline).
pub fn encode_record<T: Record>(record: &T) -> Result<String, String> {
    let value = serde_json::to_value(record).map_err(|e| e.to_string())?;
    let Value::Object(mut map) = value else {
        return Err(format!("{} does not encode to a JSON object", T::KIND));
    };
    map.insert(VERSION_FIELD.to_string(), Value::from(SCHEMA_VERSION));
    serde_json::to_string(&Value::Object(map)).map_err(|e| e.to_string())
}

/// Decodes one JSON line into a record, checking the schema version.
pub fn decode_record<T: Record>(line: &str) -> Result<T, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let Value::Object(mut map) = value else {
        return Err("expected a JSON object".to_string());
    };
    match map.remove(VERSION_FIELD) {
        Some(v) if v.as_u64() == Some(SCHEMA_VERSION) => {}
        Some(v) => return Err(format!("unsupported schema version {v}")),
        None => return Err("missing schema version field `v`".to_string()),
    }
    let record: T = serde_json::from_value(Value::Object(map)).map_err(|e| e.to_string())?;
    record.validate()?;
    Ok(record)
}

/// Writes `records` to `path`, one per line. Nothing is written if any record
/// fails validation or two records share an id.
pub fn write_corpus<T: Record>(records: &[T], path: &Path) -> Result<usize, CorpusError> {
    let bytes = encode_corpus(records)?;
    fs::write(path, bytes).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(records.len())
}

/// The exact bytes [`write_corpus`] would write.
pub fn encode_corpus<T: Record>(records: &[T]) -> Result<Vec<u8>, CorpusError> {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    let mut out = Vec::new();
    for (index, record) in records.iter().enumerate() {
        if let Some(id) = record.key() {
            if let Some(&first) = seen.get(id) {
                return Err(CorpusError::DuplicateId {
                    kind: T::KIND,
                    id: id.to_string(),
                    first,
                    second: index,
                });
            }
            seen.insert(id, index);
        }
        record.validate().map_err(|message| CorpusError::Encode {
            kind: T::KIND,
            index,
            message,
        })?;
        let line = encode_record(record).map_err(|message| CorpusError::Encode {
            kind: T::KIND,
            index,
            message,
        })?;
        out.write_all(line.as_bytes()).expect("write to Vec");
        out.push(b'\n');
    }
    Ok(out)
}

/// Reads every record in `path`. All malformed lines are collected and
/// reported together; none are skipped.
pub fn read_corpus<T: Record>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let bytes = fs::read(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_corpus(&bytes).map_err(|lines| CorpusError::Malformed {
        path: path.to_path_buf(),
        lines,
    })
}

pub fn decode_corpus<T: Record>(bytes: &[u8]) -> Result<Vec<T>, Vec<LineError>> {
    let mut records = Vec::new();
    let mut errors = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (i, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let line_no = i + 1;
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        let line = match std::str::from_utf8(raw) {
            Ok(s) => s,
            Err(e) => {
                errors.push(LineError {
                    line: line_no,
                    message: format!("invalid UTF-8: {e}"),
                });
                continue;
            }
        };
        if line.trim().is_empty() {
            continue;
        }
        match decode_record::<T>(line) {
            Ok(record) => {
                if let Some(id) = record.key() {
                    if !seen.insert(id.to_string()) {
                        errors.push(LineError {
                            line: line_no,
                            message: format!("duplicate {} id {id:?}", T::KIND),
                        });
                        continue;
                    }
                }
                records.push(record);
            }
            Err(message) => errors.push(LineError {
                line: line_no,
                message,
            }),
        }
    }
    if errors.is_empty() {
        Ok(records)
    } else {
        Err(errors)
    }
}

fn default_weight() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    pub code: String,
    #[serde(default = "default_weight")]
    pub weight: u32,
}

impl TestCase {
    pub fn new(code: impl Into<String>) -> Self {
        Self {
            code: code.into(),
            weight: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Seed,
    Evolved { depth: u32, parent_id: String },
}

impl Provenance {
    pub fn depth(&self) -> u32 {
        match self {
            Provenance::Seed => 0,
            Provenance::Evolved { depth, .. } => *depth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgrammingProblem {
    pub id: String,
    pub instruction: String,
    #[serde(default)]
    pub signature: String,
    #[serde(default)]
    pub tests: Vec<TestCase>,
    pub provenance: Provenance,
    #[serde(flatten)]
    pub extra: Extra,
}

impl ProgrammingProblem {
    pub fn seed(id: impl Into<String>, instruction: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            instruction: instruction.into(),
            signature: String::new(),
            tests: Vec::new(),
            provenance: Provenance::Seed,
            extra: Extra::new(),
        }
    }

    pub fn with_signature(mut self, signature: impl Into<String>) -> Self {
        self.signature = signature.into();
        self
    }

    pub fn with_tests<I, S>(mut self, tests: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.tests = tests.into_iter().map(TestCase::new).collect();
        self
    }
}

impl Record for ProgrammingProblem {
    const KIND: &'static str = "problem";

    fn key(&self) -> Option<&str> {
        Some(&self.id)
    }

    fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("problem id is empty".into());
        }
        if let Provenance::Evolved { depth, parent_id } = &self.provenance {
            if *depth == 0 {
                return Err(format!("problem {}: evolved depth must be >= 1", self.id));
            }
            if parent_id.is_empty() {
                return Err(format!("problem {}: evolved parent_id is empty", self.id));
            }
        }
        if let Some(i) = self.tests.iter().position(|t| t.code.trim().is_empty()) {
            return Err(format!("problem {}: test #{i} has empty code", self.id));
        }
        if let Some(i) = self.tests.iter().position(|t| t.weight == 0) {
            return Err(format!("problem {}: test #{i} has zero weight", self.id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Source {
    pub role: Role,
    pub generator_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateResponse {
    pub id: String,
    pub problem_id: String,
    source: Source,
    pub sample_index: u32,
    pub raw_text: String,
    pub extracted_code: String,
    pub temperature: f64,
    pub top_p: f64,
    #[serde(flatten)]
    pub extra: Extra,
}

impl CandidateResponse {
    pub fn new(
        problem_id: impl Into<String>,
        source: Source,
        sample_index: u32,
        raw_text: impl Into<String>,
        temperature: f64,
        top_p: f64,
    ) -> Self {
        let problem_id = problem_id.into();
        let raw_text = raw_text.into();
        Self {
            id: candidate_id(&problem_id, &source.generator_id, temperature, sample_index),
            extracted_code: extract_code(&raw_text),
            problem_id,
            source,
            sample_index,
            raw_text,
            temperature,
            top_p,
            extra: Extra::new(),
        }
    }

    pub fn source(&self) -> &Source {
        &self.source
    }

    pub fn role(&self) -> Role {
        self.source.role
    }
}

pub fn candidate_id(problem_id: &str, generator_id: &str, temperature: f64, index: u32) -> String {
    format!("{problem_id}/{generator_id}/t{temperature}/s{index}")
}

impl Record for CandidateResponse {
    const KIND: &'static str = "candidate";

    fn key(&self) -> Option<&str> {
        Some(&self.id)
    }

    fn validate(&self) -> Result<(), String> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(format!("{}: temperature {} outside [0, 2]", self.id, self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("{}: top_p {} outside (0, 1]", self.id, self.top_p));
        }
        if self.extracted_code != extract_code(&self.raw_text) {
            return Err(format!("{}: extracted_code does not match raw_text", self.id));
        }
        Ok(())
    }
}

/// The four ways a candidate run can end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Situation {
    CompileError,
    RuntimeError,
    PartialPass { passed: u32, total: u32 },
    AllPass { total: u32 },
}

impl Situation {
    /// Classifies counted test results. Zero passes is a runtime error: no
    /// test ran to completion.
    pub fn from_counts(passed: u32, total: u32) -> Self {
        if total == 0 || passed == 0 {
            Situation::RuntimeError
        } else if passed >= total {
            Situation::AllPass { total }
        } else {
            Situation::PartialPass { passed, total }
        }
    }

    pub fn is_valid(&self) -> bool {
        match *self {
            Situation::PartialPass { passed, total } => passed > 0 && passed < total,
            Situation::AllPass { total } => total >= 1,
            _ => true,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Situation::CompileError => "compile_error",
            Situation::RuntimeError => "runtime_error",
            Situation::PartialPass { .. } => "partial_pass",
            Situation::AllPass { .. } => "all_pass",
        }
    }
}

impl fmt::Display for Situation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Situation::PartialPass { passed, total } => write!(f, "partial_pass({passed}/{total})"),
            Situation::AllPass { total } => write!(f, "all_pass({total})"),
            other => f.write_str(other.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub situation: Situation,
    pub wall_time_ms: u64,
    pub stderr_excerpt: String,
}

/// One line of an outcomes file: the outcome for a candidate, or the reason
/// it could not be executed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub candidate_id: String,
    pub problem_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<ExecutionOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(flatten)]
    pub extra: Extra,
}

impl Record for ExecutionRecord {
    const KIND: &'static str = "outcome";

    fn key(&self) -> Option<&str> {
        Some(&self.candidate_id)
    }

    fn validate(&self) -> Result<(), String> {
        match (&self.outcome, &self.error) {
            (Some(o), None) if o.situation.is_valid() => Ok(()),
            (Some(o), None) => Err(format!("{}: invalid situation {:?}", self.candidate_id, o.situation)),
            (None, Some(_)) => Ok(()),
            _ => Err(format!(
                "{}: exactly one of `outcome` and `error` must be set",
                self.candidate_id
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseTokens {
    pub tokens: Vec<u32>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTriple {
    pub problem_id: String,
    pub prompt: String,
    pub y_tea: ResponseTokens,
    pub y_stu: ResponseTokens,
    pub r_tea: f64,
    pub r_stu: f64,
    #[serde(flatten)]
    pub extra: Extra,
}

impl Record for TrainingTriple {
    const KIND: &'static str = "triple";

    fn key(&self) -> Option<&str> {
        Some(&self.problem_id)
    }

    fn validate(&self) -> Result<(), String> {
        if self.r_tea < self.r_stu {
            return Err(format!(
                "{}: r_tea {} < r_stu {}",
                self.problem_id, self.r_tea, self.r_stu
            ));
        }
        if self.y_tea.tokens.is_empty() || self.y_stu.tokens.is_empty() {
            return Err(format!("{}: empty response token sequence", self.problem_id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemTally {
    pub problem_id: String,
    pub n: u32,
    pub c: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassAtKReport {
    pub generator_id: String,
    pub per_problem: Vec<ProblemTally>,
    pub estimates: BTreeMap<u32, f64>,
    pub decoding: DecodingConfig,
    #[serde(flatten)]
    pub extra: Extra,
}

impl Record for PassAtKReport {
    const KIND: &'static str = "report";

    fn validate(&self) -> Result<(), String> {
        if let Some(row) = self.per_problem.iter().find(|r| r.c > r.n) {
            return Err(format!("{}: c={} exceeds n={}", row.problem_id, row.c, row.n));
        }
        if let Some((k, e)) = self.estimates.iter().find(|(_, e)| !(0.0..=1.0).contains(*e)) {
            return Err(format!("pass@{k} estimate {e} outside [0, 1]"));
        }
        Ok(())
    }
}

/// A non-fatal failure recorded by a stage (a generator call that errored,
/// a seed that could not be evolved).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub stage: String,
    pub subject: String,
    pub message: String,
}

impl Record for FailureRecord {
    const KIND: &'static str = "failure";
}
