//! Corpus construction: rewriting seed problems into harder ones, cleaning
//! the result with fixed rules, and checking it for overlap with a
//! benchmark.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::datamodel::{Extra, FailureRecord, ProgrammingProblem, Provenance, Record};
use crate::sampler::{sample_seed, CompletionRequest, Generator};

pub const EVOLUTION_TEMPLATE: &str = r##"I want you to act as a Programming Contest Designer. Your objective is to rewrite a programming task based on the given task by increasing the difficulty a bit.
You can increase the difficulty using, but not limited to, the following methods:
{methods}

Your response is the rewritten programming task (#Rewritten Task#).
The #Rewritten Task# must be reasonable and must be understood and responded by humans, and also solvable with code. It should not be dependent on the #Given Task#. Your rewriting cannot omit the non-text parts such as the table and code in #Given Task#:. Also, please do not omit the input in #Given Task#.
**The rewritten task and the given task should have the similar length. **
**The rewritten task should ask for a function-level code solution.**
"#Given Task#", "#Rewritten Task#", "given task", and "rewritten task" are NOT allowed to appear in #Rewritten Task#.
#Given Task#
{instruction}
#Rewritten Task#
"##;

pub fn default_methods() -> Vec<String> {
    [
        "Add new constraints and requirements to the original problem.",
        "Require the use of specific data structures.",
        "Increase the number of reasoning steps needed to solve the problem.",
        "Add edge cases the solution must handle.",
    ]
    .map(String::from)
    .to_vec()
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvolveError {
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("method list is empty")]
    NoMethods,
    #[error("no seed problems")]
    NoSeeds,
    #[error("invalid evolution config: {0}")]
    InvalidConfig(String),
    #[error("leakage threshold {0} outside [0, 1]")]
    Threshold(f64),
}

/// Fills the template slots in one pass, so slot markers that occur inside
/// the instruction or the methods are left as they are.
pub fn render_evolution_prompt(instruction: &str, methods: &[String]) -> Result<String, EvolveError> {
    if instruction.trim().is_empty() {
        return Err(EvolveError::EmptyInstruction);
    }
    if methods.is_empty() {
        return Err(EvolveError::NoMethods);
    }
    let joined = methods.join("\n");
    let mut out = String::with_capacity(EVOLUTION_TEMPLATE.len() + instruction.len() + joined.len());
    let mut rest = EVOLUTION_TEMPLATE;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let tail = &rest[start..];
        if let Some(after) = tail.strip_prefix("{methods}") {
            out.push_str(&joined);
            rest = after;
        } else if let Some(after) = tail.strip_prefix("{instruction}") {
            out.push_str(instruction);
            rest = after;
        } else {
            out.push('{');
            rest = &tail[1..];
        }
    }
    out.push_str(rest);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessRules {
    pub min_chars: usize,
    pub max_chars: usize,
    pub require_alphabetic: bool,
    pub dedup: bool,
}

impl Default for PreprocessRules {
    fn default() -> Self {
        Self {
            min_chars: 10,
            max_chars: 4096,
            require_alphabetic: true,
            dedup: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvolutionConfig {
    pub methods: Vec<String>,
    pub max_depth: u32,
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub workers: usize,
    pub seed: u64,
    /// Copy the parent's signature and tests onto each rewritten problem.
    /// Off by default: a harder task usually invalidates the old tests.
    pub inherit_tests: bool,
    pub rules: PreprocessRules,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            methods: default_methods(),
            max_depth: 1,
            temperature: 1.0,
            top_p: 0.95,
            max_new_tokens: 1024,
            workers: 8,
            seed: 0,
            inherit_tests: false,
            rules: PreprocessRules::default(),
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<(), EvolveError> {
        if self.methods.is_empty() {
            return Err(EvolveError::NoMethods);
        }
        if self.max_depth == 0 {
            return Err(EvolveError::InvalidConfig("max_depth must be positive".into()));
        }
        if self.workers == 0 || self.max_new_tokens == 0 {
            return Err(EvolveError::InvalidConfig("workers and max_new_tokens must be positive".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(EvolveError::InvalidConfig(format!("temperature {} outside [0, 2]", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(EvolveError::InvalidConfig(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvolutionOutput {
    pub problems: Vec<ProgrammingProblem>,
    pub failures: Vec<FailureRecord>,
}

pub fn evolved_id(parent_id: &str, depth: u32) -> String {
    format!("{parent_id}.e{depth}")
}

fn clean_reply(reply: &str) -> String {
    let text = reply.trim();
    let text = text.strip_prefix("#Rewritten Task#").unwrap_or(text);
    text.trim_start_matches(':').trim().to_string()
}

/// Rewrites every seed `max_depth` times, each round working on the
/// previous round's output. Seeds come first in the output, then each round
/// in seed order. A failed call is recorded and ends that seed's lineage.
pub fn evolve_corpus(
    seeds: &[ProgrammingProblem],
    generator_id: &str,
    generator: &dyn Generator,
    config: &EvolutionConfig,
) -> Result<EvolutionOutput, EvolveError> {
    if seeds.is_empty() {
        return Err(EvolveError::NoSeeds);
    }
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| EvolveError::InvalidConfig(format!("worker pool: {e}")))?;

    let mut ids: HashSet<String> = seeds.iter().map(|p| p.id.clone()).collect();
    let mut out = EvolutionOutput {
        problems: seeds.to_vec(),
        failures: Vec::new(),
    };
    let mut frontier: Vec<ProgrammingProblem> = seeds.to_vec();
    for _ in 0..config.max_depth {
        let results: Vec<Result<ProgrammingProblem, FailureRecord>> = pool.install(|| {
            use rayon::prelude::*;
            frontier.par_iter().map(|p| evolve_one(p, generator_id, generator, config)).collect()
        });
        let mut next = Vec::new();
        for r in results {
            match r {
                Ok(child) if ids.contains(&child.id) => out.failures.push(FailureRecord {
                    stage: "evolve".into(),
                    subject: child.id.clone(),
                    message: "evolved id collides with an existing problem".into(),
                }),
                Ok(child) => {
                    ids.insert(child.id.clone());
                    next.push(child);
                }
                Err(f) => out.failures.push(f),
            }
        }
        out.problems.extend(next.iter().cloned());
        frontier = next;
        if frontier.is_empty() {
            break;
        }
    }
    Ok(out)
}

fn evolve_one(
    parent: &ProgrammingProblem,
    generator_id: &str,
    generator: &dyn Generator,
    config: &EvolutionConfig,
) -> Result<ProgrammingProblem, FailureRecord> {
    let fail = |message: String| FailureRecord {
        stage: "evolve".into(),
        subject: parent.id.clone(),
        message,
    };
    let prompt = render_evolution_prompt(&parent.instruction, &config.methods).map_err(|e| fail(e.to_string()))?;
    let depth = parent.provenance.depth() + 1;
    let request = CompletionRequest {
        prompt: &prompt,
        temperature: config.temperature,
        top_p: config.top_p,
        max_new_tokens: config.max_new_tokens,
        seed: sample_seed(config.seed, &parent.id, generator_id, config.temperature, depth),
    };
    let reply = generator.complete(&request).map_err(|e| fail(e.to_string()))?;
    let instruction = clean_reply(&reply);
    if instruction.is_empty() {
        return Err(fail("generator returned an empty rewrite".into()));
    }
    let (signature, tests) = if config.inherit_tests {
        (parent.signature.clone(), parent.tests.clone())
    } else {
        (String::new(), Vec::new())
    };
    Ok(ProgrammingProblem {
        id: evolved_id(&parent.id, depth),
        instruction,
        signature,
        tests,
        provenance: Provenance::Evolved {
            depth,
            parent_id: parent.id.clone(),
        },
        extra: Extra::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalRule {
    TooShort,
    TooLong,
    NoAlphabetic,
    ExactDuplicate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Removal {
    pub id: String,
    pub rule: RemovalRule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duplicate_of: Option<String>,
}

impl Record for Removal {
    const KIND: &'static str = "removal";
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn rule_violation(instruction: &str, rules: &PreprocessRules) -> Option<RemovalRule> {
    let chars = instruction.trim().chars().count();
    if chars < rules.min_chars {
        Some(RemovalRule::TooShort)
    } else if chars > rules.max_chars {
        Some(RemovalRule::TooLong)
    } else if rules.require_alphabetic && !instruction.chars().any(char::is_alphabetic) {
        Some(RemovalRule::NoAlphabetic)
    } else {
        None
    }
}

/// Filters the corpus, keeping the first of any run of duplicates. Input
/// order is preserved and every dropped record gets one log entry.
pub fn preprocess(corpus: &[ProgrammingProblem], rules: &PreprocessRules) -> (Vec<ProgrammingProblem>, Vec<Removal>) {
    let mut kept = Vec::new();
    let mut log = Vec::new();
    let mut seen: HashMap<String, String> = HashMap::new();
    for p in corpus {
        if let Some(rule) = rule_violation(&p.instruction, rules) {
            log.push(Removal {
                id: p.id.clone(),
                rule,
                duplicate_of: None,
            });
            continue;
        }
        if rules.dedup {
            let key = normalize_ws(&p.instruction);
            if let Some(first) = seen.get(&key) {
                log.push(Removal {
                    id: p.id.clone(),
                    rule: RemovalRule::ExactDuplicate,
                    duplicate_of: Some(first.clone()),
                });
                continue;
            }
            seen.insert(key, p.id.clone());
        }
        kept.push(p.clone());
    }
    (kept, log)
}

pub const DEFAULT_LEAKAGE_THRESHOLD: f64 = 0.6;
const GRAM: usize = 4;

/// Lowercased alphanumeric runs.
pub fn leakage_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Token 4-grams of `text`. Texts shorter than four tokens yield a single
/// gram of all their tokens; an empty text yields none.
pub fn ngrams(text: &str) -> HashSet<String> {
    let tokens = leakage_tokens(text);
    if tokens.is_empty() {
        return HashSet::new();
    }
    if tokens.len() < GRAM {
        return HashSet::from([tokens.join(" ")]);
    }
    tokens.windows(GRAM).map(|w| w.join(" ")).collect()
}

/// Jaccard similarity of the two texts' 4-gram sets; 0 when both are empty.
pub fn similarity(a: &str, b: &str) -> f64 {
    let (a, b) = (ngrams(a), ngrams(b));
    let inter = a.intersection(&b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageHit {
    pub corpus_id: String,
    pub benchmark_id: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub threshold: f64,
    pub corpus_size: usize,
    pub benchmark_size: usize,
    pub hits: Vec<LeakageHit>,
}

impl LeakageReport {
    pub fn is_clean(&self) -> bool {
        self.hits.is_empty()
    }
}

/// Every (corpus, benchmark) pair with similarity at or above `threshold`,
/// in corpus order then benchmark order.
pub fn check_leakage(
    corpus: &[ProgrammingProblem],
    benchmark: &[ProgrammingProblem],
    threshold: f64,
) -> Result<LeakageReport, EvolveError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(EvolveError::Threshold(threshold));
    }
    let bench_grams: Vec<HashSet<String>> = benchmark.iter().map(|b| ngrams(&b.instruction)).collect();
    let mut index: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, grams) in bench_grams.iter().enumerate() {
        for g in grams {
            index.entry(g.as_str()).or_default().push(j);
        }
    }

    let per_item: Vec<Vec<LeakageHit>> = {
        use rayon::prelude::*;
        corpus
            .par_iter()
            .map(|c| {
                let grams = ngrams(&c.instruction);
                let mut shared: HashMap<usize, usize> = HashMap::new();
                for g in &grams {
                    for &j in index.get(g.as_str()).map(Vec::as_slice).unwrap_or(&[]) {
                        *shared.entry(j).or_default() += 1;
                    }
                }
                let sim = |j: usize| {
                    let inter = shared.get(&j).copied().unwrap_or(0);
                    let union = grams.len() + bench_grams[j].len() - inter;
                    if union == 0 {
                        0.0
                    } else {
                        inter as f64 / union as f64
                    }
                };
                let candidates: Vec<usize> = if threshold <= 0.0 {
                    (0..benchmark.len()).collect()
                } else {
                    let mut js: Vec<usize> = shared.keys().copied().collect();
                    js.sort_unstable();
                    js
                };
                candidates
                    .into_iter()
                    .filter_map(|j| {
                        let s = sim(j);
                        (s >= threshold).then(|| LeakageHit {
                            corpus_id: c.id.clone(),
                            benchmark_id: benchmark[j].id.clone(),
                            similarity: s,
                        })
                    })
                    .collect()
            })
            .collect()
    };
    Ok(LeakageReport {
        threshold,
        corpus_size: corpus.len(),
        benchmark_size: benchmark.len(),
        hits: per_item.into_iter().flatten().collect(),
    })
}
