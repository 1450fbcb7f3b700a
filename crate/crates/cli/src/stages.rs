//! The pipeline stages. Each stage reads its inputs from files named in the
//! configuration and writes its outputs to files, so any stage can be rerun
//! on its own.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use rrtf_core::datamodel::{
    encode_corpus, read_corpus, CandidateResponse, ExecutionRecord, PassAtKReport, ProgrammingProblem, Record, Role,
    TrainingTriple,
};
use rrtf_core::evaluator::{evaluate, format_reports, ReportFormat};
use rrtf_core::evolver::{check_leakage, evolve_corpus, preprocess};
use rrtf_core::ranker::{build_training_triples, group_candidates};
use rrtf_core::sampler::{sample_responses, GeneratorKind, GeneratorSpec};
use rrtf_core::trainer::{train, ToyLm};

use crate::config::{ConfigError, NamedGenerator, PipelineConfig};
use crate::manifest::{config_digest, manifest_path, FileDigest, Manifest, Status, TOOL, VERSION};

#[derive(Debug, thiserror::Error)]
pub enum StageError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Failed(#[from] anyhow::Error),
}

impl StageError {
    pub fn exit_code(&self) -> u8 {
        match self {
            StageError::Config(_) => 2,
            StageError::Failed(_) => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Stage {
    Evolve,
    CheckLeakage,
    Sample,
    Execute,
    Rank,
    Train,
    Eval,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Evolve => "evolve",
            Stage::CheckLeakage => "check-leakage",
            Stage::Sample => "sample",
            Stage::Execute => "execute",
            Stage::Rank => "rank",
            Stage::Train => "train",
            Stage::Eval => "eval",
        }
    }

    /// Path keys the stage cannot run without.
    pub fn required_paths(self, config: &PipelineConfig) -> Vec<&'static str> {
        match self {
            Stage::Evolve => vec!["seeds", "corpus"],
            Stage::CheckLeakage => vec!["corpus", "benchmark"],
            Stage::Sample => vec!["corpus", "candidates"],
            Stage::Execute => vec!["corpus", "candidates", "outcomes"],
            Stage::Rank => vec!["corpus", "candidates", "outcomes", "triples"],
            Stage::Train => vec!["triples", "model"],
            Stage::Eval if config.eval.generator.is_none() => vec!["benchmark", "model", "report"],
            Stage::Eval => vec!["benchmark", "report"],
        }
    }
}

/// What a stage did, for the log line printed when it ends.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub message: String,
    /// The stage ran but its check did not pass (leakage found).
    pub check_failed: bool,
}

impl Summary {
    fn ok(message: String) -> Self {
        Self {
            message,
            check_failed: false,
        }
    }
}

/// One invocation: the effective configuration and the command that
/// produced it.
pub struct Run {
    pub config: PipelineConfig,
    pub command: Vec<String>,
}

impl Run {
    pub fn new(config: &PipelineConfig, command: Vec<String>) -> Self {
        Self {
            config: config.effective(),
            command,
        }
    }

    fn path(&self, key: &'static str) -> Result<PathBuf, StageError> {
        Ok(self.config.require(key)?.to_path_buf())
    }
}

/// Tracks a stage's inputs and outputs and writes their manifests.
pub struct Writer<'a> {
    run: &'a Run,
    stage: &'static str,
    inputs: Vec<FileDigest>,
    written: Vec<PathBuf>,
}

impl<'a> Writer<'a> {
    pub fn new(run: &'a Run, stage: &'static str) -> Self {
        Self {
            run,
            stage,
            inputs: Vec::new(),
            written: Vec::new(),
        }
    }

    fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        let digest = FileDigest::of(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.push(digest);
        Ok(())
    }

    fn read<T: Record>(&mut self, path: &Path) -> anyhow::Result<Vec<T>> {
        self.input(path)?;
        Ok(read_corpus(path)?)
    }

    fn bytes(&mut self, path: &Path, data: &[u8]) -> anyhow::Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        fs::write(path, data).with_context(|| format!("writing {}", path.display()))?;
        self.written.push(path.to_path_buf());
        Ok(())
    }

    fn records<T: Record>(&mut self, path: &Path, records: &[T]) -> anyhow::Result<()> {
        let data = encode_corpus(records)?;
        self.bytes(path, &data)
    }

    fn file_written(&mut self, path: &Path) {
        self.written.push(path.to_path_buf());
    }

    /// Writes a manifest next to every output written so far.
    pub fn finish(&self, status: Status) -> anyhow::Result<()> {
        let config_sha256 = config_digest(&self.run.config);
        for out in &self.written {
            let manifest = Manifest {
                tool: TOOL.into(),
                version: VERSION.into(),
                stage: self.stage.into(),
                status,
                command: self.run.command.clone(),
                config_sha256: config_sha256.clone(),
                config: self.run.config.clone(),
                inputs: self.inputs.clone(),
                output: FileDigest::of(out)?,
                notes: Vec::new(),
            };
            let text = serde_json::to_string_pretty(&manifest)?;
            fs::write(manifest_path(out), text + "\n")?;
        }
        Ok(())
    }
}

pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_name().unwrap_or_default().to_string_lossy();
    let stem = stem.strip_suffix(".jsonl").unwrap_or(&stem);
    path.with_file_name(format!("{stem}.{suffix}.jsonl"))
}

/// Runs one stage: checks its required paths before touching any file,
/// then runs it and writes manifests. Outputs of a failed stage get a
/// `partial` manifest.
pub fn run_stage(stage: Stage, run: &Run) -> Result<Summary, StageError> {
    for key in stage.required_paths(&run.config) {
        run.config.require(key)?;
    }
    let mut writer = Writer::new(run, stage.name());
    let result = match stage {
        Stage::Evolve => evolve(run, &mut writer),
        Stage::CheckLeakage => leakage(run, &mut writer),
        Stage::Sample => sample(run, &mut writer),
        Stage::Execute => execute(run, &mut writer),
        Stage::Rank => rank(run, &mut writer),
        Stage::Train => train_stage(run, &mut writer),
        Stage::Eval => eval(run, &mut writer),
    };
    let status = if result.is_ok() { Status::Complete } else { Status::Partial };
    writer.finish(status)?;
    result
}

fn build(named: &NamedGenerator, role: Role) -> anyhow::Result<Box<dyn rrtf_core::sampler::Generator>> {
    let spec = GeneratorSpec {
        generator_id: named.generator_id.clone(),
        role,
        kind: named.kind.clone(),
    };
    spec.build().with_context(|| format!("building generator {}", named.generator_id))
}

fn evolve(run: &Run, w: &mut Writer) -> Result<Summary, StageError> {
    let c = &run.config;
    let evolver = c
        .evolver
        .as_ref()
        .ok_or_else(|| ConfigError::Invalid("evolve needs an [evolver] generator".into()))?;
    let seeds_path = run.path("seeds")?;
    let out = run.path("corpus")?;
    let seeds: Vec<ProgrammingProblem> = w.read(&seeds_path)?;
    let generator = build(evolver, Role::Teacher)?;
    let evolved = evolve_corpus(&seeds, &evolver.generator_id, generator.as_ref(), &c.evolution)
        .map_err(anyhow::Error::from)?;
    let (kept, removed) = preprocess(&evolved.problems, &c.evolution.rules);
    w.records(&out, &kept)?;
    w.records(&sidecar(&out, "failures"), &evolved.failures)?;
    w.records(&sidecar(&out, "removed"), &removed)?;
    Ok(Summary::ok(format!(
        "{} seeds -> {} problems ({} generation failures, {} removed by preprocessing)",
        seeds.len(),
        kept.len(),
        evolved.failures.len(),
        removed.len()
    )))
}

fn leakage(run: &Run, w: &mut Writer) -> Result<Summary, StageError> {
    let corpus: Vec<ProgrammingProblem> = w.read(&run.path("corpus")?)?;
    let benchmark: Vec<ProgrammingProblem> = w.read(&run.path("benchmark")?)?;
    let report = check_leakage(&corpus, &benchmark, run.config.leakage_threshold).map_err(anyhow::Error::from)?;
    let text = serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)? + "\n";
    match &run.config.paths.leakage {
        Some(path) => w.bytes(path, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(Summary {
        message: format!(
            "{} flagged pairs at threshold {} ({} x {} problems)",
            report.hits.len(),
            report.threshold,
            report.corpus_size,
            report.benchmark_size
        ),
        check_failed: !report.is_clean(),
    })
}

fn sample(run: &Run, w: &mut Writer) -> Result<Summary, StageError> {
    let c = &run.config;
    let problems: Vec<ProgrammingProblem> = w.read(&run.path("corpus")?)?;
    let out = run.path("candidates")?;
    let sampled = sample_responses(&problems, &c.generators, &c.sampling).map_err(|e| match e {
        rrtf_core::sampler::SamplingError::Build { .. } => StageError::Failed(e.into()),
        other => StageError::Config(ConfigError::Invalid(format!("sampling: {other}"))),
    })?;
    w.records(&out, &sampled.responses)?;
    w.records(&sidecar(&out, "failures"), &sampled.failures)?;
    Ok(Summary::ok(format!(
        "{} candidates for {} problems ({} failed calls)",
        sampled.responses.len(),
        problems.len(),
        sampled.failures.len()
    )))
}

fn problem_map(problems: &[ProgrammingProblem]) -> HashMap<String, ProgrammingProblem> {
    problems.iter().map(|p| (p.id.clone(), p.clone())).collect()
}

fn execute(run: &Run, w: &mut Writer) -> Result<Summary, StageError> {
    let problems: Vec<ProgrammingProblem> = w.read(&run.path("corpus")?)?;
    let candidates: Vec<CandidateResponse> = w.read(&run.path("candidates")?)?;
    let records = run
        .config
        .executor()
        .execute_batch(&candidates, &problem_map(&problems), run.config.stage_workers())
        .map_err(anyhow::Error::from)?;
    w.records(&run.path("outcomes")?, &records)?;
    let mut counts: std::collections::BTreeMap<&str, usize> = Default::default();
    for r in &records {
        let name = r.outcome.as_ref().map_or("error", |o| o.situation.name());
        *counts.entry(name).or_default() += 1;
    }
    Ok(Summary::ok(format!("{} candidates executed: {counts:?}", records.len())))
}

fn rank(run: &Run, w: &mut Writer) -> Result<Summary, StageError> {
    let problems: Vec<ProgrammingProblem> = w.read(&run.path("corpus")?)?;
    let candidates: Vec<CandidateResponse> = w.read(&run.path("candidates")?)?;
    let records: Vec<ExecutionRecord> = w.read(&run.path("outcomes")?)?;
    let groups = group_candidates(&problems, &candidates, &records);
    let (triples, log) = build_training_triples(&groups, &run.config.policy);
    let out = run.path("triples")?;
    w.records(&out, &triples)?;
    w.records(&sidecar(&out, "filter_log"), &log)?;
    Ok(Summary::ok(format!(
        "{} triples from {} problem groups ({} filtered or skipped)",
        triples.len(),
        groups.len(),
        log.len()
    )))
}

fn train_stage(run: &Run, w: &mut Writer) -> Result<Summary, StageError> {
    let c = &run.config;
    let triples: Vec<TrainingTriple> = w.read(&run.path("triples")?)?;
    let model = match &c.paths.init_model {
        Some(path) => {
            w.input(path)?;
            ToyLm::load(path).map_err(anyhow::Error::from)?
        }
        None => ToyLm::new(c.model).map_err(anyhow::Error::from)?,
    };
    let (model, trace) = train(&triples, model, &c.train).map_err(anyhow::Error::from)?;
    let out = run.path("model")?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(anyhow::Error::from)?;
    }
    model.save(&out).map_err(anyhow::Error::from)?;
    w.file_written(&out);
    w.records(&sidecar(&out, "trace"), &trace)?;
    let last = trace.last().expect("epochs >= 1");
    Ok(Summary::ok(format!(
        "{} triples, {} epochs: final loss {:.6} (rank {:.6}, ft {:.6})",
        triples.len(),
        trace.len(),
        last.mean_total,
        last.mean_rank,
        last.mean_ft
    )))
}

fn eval(run: &Run, w: &mut Writer) -> Result<Summary, StageError> {
    let c = &run.config;
    let problems: Vec<ProgrammingProblem> = w.read(&run.path("benchmark")?)?;
    let named = match &c.eval.generator {
        Some(g) => g.clone(),
        None => {
            let model_path = run.path("model")?;
            w.input(&model_path)?;
            NamedGenerator {
                generator_id: "toy-lm".into(),
                kind: GeneratorKind::ToyLm { model_path },
            }
        }
    };
    let generator = build(&named, Role::Student)?;
    let report = evaluate(
        &problems,
        &named.generator_id,
        generator.as_ref(),
        &c.eval.decoding,
        &c.executor(),
        c.stage_workers(),
    )
    .map_err(anyhow::Error::from)?;
    w.records(&run.path("report")?, std::slice::from_ref(&report))?;
    let estimates: Vec<String> = report.estimates.iter().map(|(k, v)| format!("pass@{k}={:.2}%", v * 100.0)).collect();
    Ok(Summary::ok(format!(
        "{} on {} problems: {}",
        named.generator_id,
        problems.len(),
        estimates.join(" ")
    )))
}

/// Renders reports from one or more report files.
pub fn render_reports(inputs: &[PathBuf], format: ReportFormat) -> anyhow::Result<String> {
    let mut reports: Vec<PassAtKReport> = Vec::new();
    for path in inputs {
        reports.extend(read_corpus::<PassAtKReport>(path)?);
    }
    Ok(format_reports(&reports, format))
}

/// Writes a rendered report with a manifest.
pub fn write_report(run: &Run, inputs: &[PathBuf], out: &Path, text: &str) -> anyhow::Result<()> {
    let mut w = Writer::new(run, "report");
    for p in inputs {
        w.input(p)?;
    }
    w.bytes(out, text.as_bytes())?;
    w.finish(Status::Complete)
}

pub const PIPELINE: [Stage; 6] = [Stage::Evolve, Stage::Sample, Stage::Execute, Stage::Rank, Stage::Train, Stage::Eval];

/// Runs the stages in order and stops at the first failure. Evolution is
/// skipped when no evolver is configured, in which case `paths.corpus`
/// must already exist.
pub fn run_pipeline(run: &Run, mut on_stage: impl FnMut(Stage, &Summary)) -> Result<(), StageError> {
    let stages: Vec<Stage> = PIPELINE
        .into_iter()
        .filter(|s| *s != Stage::Evolve || run.config.evolver.is_some())
        .collect();
    for stage in &stages {
        for key in stage.required_paths(&run.config) {
            run.config.require(key)?;
        }
    }
    for stage in stages {
        let summary = run_stage(stage, run)?;
        on_stage(stage, &summary);
    }
    Ok(())
}
