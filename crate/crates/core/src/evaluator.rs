//! pass@k evaluation: the unbiased estimator, the inference prompt styles,
//! and the generate → execute → count loop that produces a report.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datamodel::{
    CandidateResponse, Extra, PassAtKReport, ProblemTally, ProgrammingProblem, Role, Situation, Source,
};
use crate::executor::{ExecError, Executor};
use crate::sampler::{sample_seed, sampling_prompt, CompletionRequest, Generator};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EstimatorError {
    #[error("pass@k needs 1 <= k <= n and c <= n, got n={n}, c={c}, k={k}")]
    Domain { n: u64, c: u64, k: u64 },
}

/// Unbiased pass@k estimate `1 - C(n-c, k) / C(n, k)` for one problem with
/// `c` correct samples out of `n`.
///
/// Evaluated as `1 - prod_{i=n-c+1}^{n} (1 - k/i)`, which stays finite for
/// any `n` where the binomials would overflow.
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<f64, EstimatorError> {
    if k == 0 || k > n || c > n {
        return Err(EstimatorError::Domain { n, c, k });
    }
    if n - c < k {
        return Ok(1.0);
    }
    let kf = k as f64;
    let keep_all_wrong: f64 = ((n - c + 1)..=n).map(|i| 1.0 - kf / i as f64).product();
    Ok((1.0 - keep_all_wrong).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodingStrategy {
    Greedy,
    Nucleus,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    #[default]
    #[serde(rename = "pangu2")]
    PanGu2,
    StarCoder,
    WizardCoder,
}

impl std::str::FromStr for PromptStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pangu2" => Ok(PromptStyle::PanGu2),
            "starcoder" | "star_coder" => Ok(PromptStyle::StarCoder),
            "wizardcoder" | "wizard_coder" => Ok(PromptStyle::WizardCoder),
            other => Err(format!("unknown prompt style {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodingConfig {
    pub strategy: DecodingStrategy,
    pub temperature: f64,
    pub top_p: f64,
    pub n: u32,
    pub k_values: Vec<u32>,
    pub max_new_tokens: usize,
    pub prompt_style: PromptStyle,
    pub seed: u64,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        Self::pass_at_1()
    }
}

impl DecodingConfig {
    /// Nucleus sampling at temperature 0.2, the pass@1 setting.
    pub fn pass_at_1() -> Self {
        Self {
            strategy: DecodingStrategy::Nucleus,
            temperature: 0.2,
            top_p: 0.95,
            n: 200,
            k_values: vec![1, 10, 100],
            max_new_tokens: 512,
            prompt_style: PromptStyle::PanGu2,
            seed: 0,
        }
    }

    /// Nucleus sampling at temperature 1.2, the pass@10 / pass@100 setting.
    pub fn pass_at_10_100() -> Self {
        Self {
            temperature: 1.2,
            ..Self::pass_at_1()
        }
    }

    /// One greedy sample per problem, scored as pass@1.
    pub fn greedy() -> Self {
        Self {
            strategy: DecodingStrategy::Greedy,
            temperature: 0.0,
            n: 1,
            k_values: vec![1],
            ..Self::pass_at_1()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n == 0 || self.k_values.is_empty() {
            return Err("n and k_values must be non-empty/positive".into());
        }
        if let Some(k) = self.k_values.iter().find(|&&k| k == 0 || k > self.n) {
            return Err(format!("k={k} must lie in 1..={}", self.n));
        }
        if self.strategy == DecodingStrategy::Greedy && (self.n != 1 || self.k_values != [1]) {
            return Err("greedy decoding requires n = 1 and k_values = [1]".into());
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p {} outside (0, 1]", self.top_p));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(format!("temperature {} outside [0, 2]", self.temperature));
        }
        Ok(())
    }

    fn effective_temperature(&self) -> f64 {
        match self.strategy {
            DecodingStrategy::Greedy => 0.0,
            DecodingStrategy::Nucleus => self.temperature,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PromptError {
    #[error("problem {0} has no function signature, which this prompt style requires")]
    MissingSignature(String),
}

fn indent_block(text: &str, prefix: &str) -> String {
    text.lines().map(|l| format!("{prefix}{l}")).collect::<Vec<_>>().join("\n")
}

/// Renders the code-generation prompt for `problem` in the given style. The
/// instruction is used as the docstring.
pub fn render_inference_prompt(problem: &ProgrammingProblem, style: PromptStyle) -> Result<String, PromptError> {
    let signature = problem.signature.trim();
    if signature.is_empty() {
        return Err(PromptError::MissingSignature(problem.id.clone()));
    }
    let doc = &problem.instruction;
    Ok(match style {
        PromptStyle::PanGu2 => format!("\"\"\"\n{doc}\n\"\"\"\n{signature}"),
        PromptStyle::StarCoder => format!(
            "{signature}\n    \"\"\"\n{}\n    \"\"\"\n",
            indent_block(doc, "    ")
        ),
        PromptStyle::WizardCoder => format!(
            "Below is an instruction that describes a task, paired with an input that provides further context. \
             Write a response that appropriately completes the request.\n\
             ### Instruction:\n\
             Create a Python Script for this problem:\n\
             {signature}\n    \"\"\"\n{}\n    \"\"\"\n\n\
             ### Response:",
            indent_block(doc, "    ")
        ),
    })
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("invalid decoding config: {0}")]
    Decoding(String),
    #[error("problem {0} has no tests")]
    NoTests(String),
    #[error(transparent)]
    Exec(#[from] ExecError),
}

/// Mean pass@k over problems for every k, from `(n, c)` tallies. Rows are
/// summed in problem-id order so the result does not depend on input order.
pub fn estimate(per_problem: &[ProblemTally], k_values: &[u32]) -> Result<BTreeMap<u32, f64>, EstimatorError> {
    let mut rows: Vec<&ProblemTally> = per_problem.iter().collect();
    rows.sort_by(|a, b| a.problem_id.cmp(&b.problem_id));
    let mut out = BTreeMap::new();
    for &k in k_values {
        let mut sum = 0.0;
        for r in &rows {
            sum += pass_at_k(u64::from(r.n), u64::from(r.c), u64::from(k))?;
        }
        out.insert(k, if rows.is_empty() { 0.0 } else { sum / rows.len() as f64 });
    }
    Ok(out)
}

/// Generates `decoding.n` samples per problem, runs them through the
/// executor and reports pass@k. A sample counts as correct only when it
/// passes every test; failed generations count as incorrect samples.
pub fn evaluate(
    problems: &[ProgrammingProblem],
    generator_id: &str,
    generator: &dyn Generator,
    decoding: &DecodingConfig,
    executor: &Executor,
    workers: usize,
) -> Result<PassAtKReport, EvalError> {
    decoding.validate().map_err(EvalError::Decoding)?;
    if let Some(p) = problems.iter().find(|p| p.tests.is_empty()) {
        return Err(EvalError::NoTests(p.id.clone()));
    }
    let temperature = decoding.effective_temperature();

    let jobs: Vec<(&ProgrammingProblem, u32)> = problems
        .iter()
        .flat_map(|p| (0..decoding.n).map(move |i| (p, i)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| ExecError::Pool(e.to_string()))?;
    let generated: Vec<Option<CandidateResponse>> = pool.install(|| {
        use rayon::prelude::*;
        jobs.par_iter()
            .map(|&(problem, index)| {
                let prompt = match sampling_prompt(problem, decoding.prompt_style) {
                    Ok(p) => p,
                    Err(e) => {
                        log::warn!("{}: {e}", problem.id);
                        return None;
                    }
                };
                let request = CompletionRequest {
                    prompt: &prompt,
                    temperature,
                    top_p: decoding.top_p,
                    max_new_tokens: decoding.max_new_tokens,
                    seed: sample_seed(decoding.seed, &problem.id, generator_id, temperature, index),
                };
                match generator.complete(&request) {
                    Ok(raw) => Some(CandidateResponse::new(
                        &problem.id,
                        Source {
                            role: Role::Student,
                            generator_id: generator_id.to_string(),
                        },
                        index,
                        raw,
                        temperature,
                        decoding.top_p,
                    )),
                    Err(e) => {
                        log::warn!("{} sample {index}: {e}", problem.id);
                        None
                    }
                }
            })
            .collect()
    });
    let candidates: Vec<CandidateResponse> = generated.into_iter().flatten().collect();

    let by_id: HashMap<String, ProgrammingProblem> = problems.iter().map(|p| (p.id.clone(), p.clone())).collect();
    let records = executor.execute_batch(&candidates, &by_id, workers)?;
    let mut correct: HashMap<&str, u32> = HashMap::new();
    for r in &records {
        if matches!(r.outcome.as_ref().map(|o| o.situation), Some(Situation::AllPass { .. })) {
            *correct.entry(r.problem_id.as_str()).or_default() += 1;
        }
    }

    let mut per_problem: Vec<ProblemTally> = problems
        .iter()
        .map(|p| ProblemTally {
            problem_id: p.id.clone(),
            n: decoding.n,
            c: correct.get(p.id.as_str()).copied().unwrap_or(0),
        })
        .collect();
    per_problem.sort_by(|a, b| a.problem_id.cmp(&b.problem_id));
    let estimates = estimate(&per_problem, &decoding.k_values).expect("k validated against n");
    Ok(PassAtKReport {
        generator_id: generator_id.to_string(),
        per_problem,
        estimates,
        decoding: decoding.clone(),
        extra: Extra::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!("unknown report format {other:?} (expected table or csv)")),
        }
    }
}

/// One row per report, one pass@k column per k seen in any report, values
/// in percent.
pub fn format_reports(reports: &[PassAtKReport], format: ReportFormat) -> String {
    let ks: BTreeSet<u32> = reports.iter().flat_map(|r| r.estimates.keys().copied()).collect();
    let header: Vec<String> = ["model".to_string(), "decoding".to_string(), "problems".to_string()]
        .into_iter()
        .chain(ks.iter().map(|k| format!("pass@{k}")))
        .collect();
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let decoding = match r.decoding.strategy {
                DecodingStrategy::Greedy => "greedy".to_string(),
                DecodingStrategy::Nucleus => format!("T={} top_p={} n={}", r.decoding.temperature, r.decoding.top_p, r.decoding.n),
            };
            [r.generator_id.clone(), decoding, r.per_problem.len().to_string()]
                .into_iter()
                .chain(ks.iter().map(|k| match r.estimates.get(k) {
                    Some(v) => format!("{:.2}", v * 100.0),
                    None => "-".to_string(),
                }))
                .collect()
        })
        .collect();

    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            for line in std::iter::once(&header).chain(&rows) {
                let cells: Vec<String> = line.iter().map(|c| csv_cell(c)).collect();
                out.push_str(&cells.join(","));
                out.push('\n');
            }
        }
        ReportFormat::Table => {
            let widths: Vec<usize> = (0..header.len())
                .map(|i| std::iter::once(&header).chain(&rows).map(|r| r[i].len()).max().unwrap_or(0))
                .collect();
            let render = |out: &mut String, cells: &[String]| {
                let line: Vec<String> = cells
                    .iter()
                    .zip(&widths)
                    .enumerate()
                    .map(|(i, (c, w))| if i < 3 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                    .collect();
                let _ = writeln!(out, "| {} |", line.join(" | "));
            };
            render(&mut out, &header);
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            let _ = writeln!(out, "|-{}-|", rule.join("-|-"));
            for row in &rows {
                render(&mut out, row);
            }
        }
    }
    out
}

fn csv_cell(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
