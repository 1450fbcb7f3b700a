//! The desk-scale fixture: a small corpus of arithmetic problems, scripted
//! teacher, student and rewriting generators, and model settings small
//! enough to train on a laptop in seconds.

use std::path::{Path, PathBuf};

use rrtf_core::datamodel::{write_corpus, ProgrammingProblem, Role};
use rrtf_core::evaluator::{DecodingConfig, PromptStyle};
use rrtf_core::evolver::{default_methods, render_evolution_prompt};
use rrtf_core::sampler::{sampling_prompt, GeneratorKind, GeneratorSpec, MockScript};
use rrtf_core::trainer::{ModelConfig, TrainConfig};

use crate::config::{NamedGenerator, Paths, PipelineConfig};

pub const DEFAULT_PROBLEMS: usize = 24;

/// What the scripted student writes for a problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudentBehavior {
    Correct,
    Partial,
    SyntaxError,
    NameError,
}

impl StudentBehavior {
    pub fn for_index(k: usize) -> Self {
        match k % 4 {
            0 => StudentBehavior::Correct,
            1 => StudentBehavior::Partial,
            2 => StudentBehavior::SyntaxError,
            _ => StudentBehavior::NameError,
        }
    }
}

pub fn problem_id(k: usize) -> String {
    format!("f{k:02}")
}

/// Problem `k` asks for `x + k`.
pub fn desk_problem(k: usize) -> ProgrammingProblem {
    let id = problem_id(k);
    ProgrammingProblem::seed(&id, format!("Return x plus {k}."))
        .with_signature(format!("def {id}(x):"))
        .with_tests([
            format!("assert {id}(0) == {k}"),
            format!("assert {id}(5) == {}", 5 + k),
            format!("assert {id}(-3) == {}", k as i64 - 3),
        ])
}

pub fn desk_problems(count: usize) -> Vec<ProgrammingProblem> {
    (1..=count).map(desk_problem).collect()
}

fn number(problem: &ProgrammingProblem) -> usize {
    problem.id.trim_start_matches('f').split('.').next().and_then(|n| n.parse().ok()).expect("fixture id")
}

pub fn teacher_reply(problem: &ProgrammingProblem) -> String {
    format!("```python\n{}\n    return x + {}\n```", problem.signature, number(problem))
}

pub fn student_reply(problem: &ProgrammingProblem) -> String {
    let k = number(problem);
    let sig = &problem.signature;
    match StudentBehavior::for_index(k) {
        StudentBehavior::Correct => teacher_reply(problem),
        StudentBehavior::Partial => format!("```python\n{sig}\n    return x + {k} if x > 0 else {k}\n```"),
        StudentBehavior::SyntaxError => format!("```python\n{sig}\n    return x +\n```"),
        StudentBehavior::NameError => format!("```python\n{sig}\n    return y + {k}\n```"),
    }
}

/// The rewrite the scripted evolver returns for problem `k`.
pub fn evolved_instruction(problem: &ProgrammingProblem) -> String {
    format!("Given an integer x, return x plus {}.", number(problem))
}

/// Maps every problem's sampling prompt to `reply`, for any temperature.
pub fn script_for(problems: &[ProgrammingProblem], reply: impl Fn(&ProgrammingProblem) -> String) -> MockScript {
    let mut script = MockScript::default();
    for p in problems {
        let prompt = sampling_prompt(p, PromptStyle::PanGu2).expect("pangu2 prompts always render");
        script.insert(prompt, None, reply(p));
    }
    script
}

/// The seeds plus the problems the scripted evolver turns them into, which
/// keep their parent's signature and tests.
pub fn with_evolved(seeds: &[ProgrammingProblem]) -> Vec<ProgrammingProblem> {
    let mut all = seeds.to_vec();
    for p in seeds {
        let mut child = p.clone();
        child.id = rrtf_core::evolver::evolved_id(&p.id, 1);
        child.instruction = evolved_instruction(p);
        all.push(child);
    }
    all
}

pub fn teacher_script(seeds: &[ProgrammingProblem]) -> MockScript {
    script_for(&with_evolved(seeds), teacher_reply)
}

pub fn student_script(seeds: &[ProgrammingProblem]) -> MockScript {
    script_for(&with_evolved(seeds), student_reply)
}

pub fn evolver_script(seeds: &[ProgrammingProblem], methods: &[String]) -> MockScript {
    let mut script = MockScript::default();
    for p in seeds {
        let prompt = render_evolution_prompt(&p.instruction, methods).expect("fixture instructions are non-empty");
        script.insert(prompt, None, evolved_instruction(p));
    }
    script
}

pub fn default_evolver_script(seeds: &[ProgrammingProblem]) -> MockScript {
    evolver_script(seeds, &default_methods())
}

pub fn desk_model_config() -> ModelConfig {
    ModelConfig {
        context_window: 24,
        embedding_dim: 16,
        hidden_dim: 64,
        seed: 7,
        ..ModelConfig::default()
    }
}

pub fn desk_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 40,
        batch_size: 4,
        learning_rate: 0.1,
        seed: 7,
        ..TrainConfig::default()
    }
}

/// Greedy decoding with a token budget that fits the fixture's one-line
/// solutions.
pub fn desk_decoding() -> DecodingConfig {
    DecodingConfig {
        max_new_tokens: 40,
        ..DecodingConfig::greedy()
    }
}

/// The whole pipeline over `seeds` with scripted generators. Paths are
/// relative, meant to be resolved against the fixture directory.
pub fn fixture_config(seeds: &[ProgrammingProblem]) -> PipelineConfig {
    let mock = |id: &str, script: MockScript| NamedGenerator {
        generator_id: id.into(),
        kind: GeneratorKind::Mock { script },
    };
    let mut config = PipelineConfig {
        paths: Paths {
            seeds: Some("seeds.jsonl".into()),
            corpus: Some("work/corpus.jsonl".into()),
            benchmark: Some("seeds.jsonl".into()),
            candidates: Some("work/candidates.jsonl".into()),
            outcomes: Some("work/outcomes.jsonl".into()),
            triples: Some("work/triples.jsonl".into()),
            init_model: None,
            model: Some("work/model.json".into()),
            report: Some("work/report.jsonl".into()),
            leakage: Some("work/leakage.json".into()),
        },
        evolver: Some(mock("mock-evolver", default_evolver_script(seeds))),
        generators: vec![
            GeneratorSpec {
                generator_id: "mock-teacher".into(),
                role: Role::Teacher,
                kind: GeneratorKind::Mock {
                    script: teacher_script(seeds),
                },
            },
            GeneratorSpec {
                generator_id: "mock-student".into(),
                role: Role::Student,
                kind: GeneratorKind::Mock {
                    script: student_script(seeds),
                },
            },
        ],
        model: desk_model_config(),
        train: desk_train_config(),
        ..PipelineConfig::default()
    };
    config.evolution.inherit_tests = true;
    config.sampling.temperatures = vec![0.8];
    config.eval.decoding = desk_decoding();
    config
}

/// Writes `seeds.jsonl` and `config.toml` for a fixture of `count`
/// problems into `dir`. Returns the config path.
pub fn write_fixture(dir: &Path, count: usize) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let seeds = desk_problems(count);
    write_corpus(&seeds, &dir.join("seeds.jsonl"))?;
    let config = fixture_config(&seeds);
    let path = dir.join("config.toml");
    std::fs::write(&path, toml::to_string(&config)?)?;
    Ok(path)
}
