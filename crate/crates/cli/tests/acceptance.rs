//! End-to-end acceptance checks. Each check prints one PASS or FAIL line;
//! the process exits non-zero if any check fails. A command-line argument
//! that does not start with `-` selects checks by substring.

use std::collections::{BTreeSet, HashMap};
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rrtf_cli::fixture::{desk_problems, fixture_config, with_evolved, write_fixture};
use rrtf_core::datamodel::{
    CandidateResponse, ExecutionOutcome, ExecutionRecord, ProgrammingProblem, Role, Situation, Source,
};
use rrtf_core::evaluator::{evaluate, pass_at_k, render_inference_prompt, PromptStyle};
use rrtf_core::evolver::{check_leakage, render_evolution_prompt};
use rrtf_core::executor::{Executor, RunnerSpec, SandboxLimits, TIMEOUT_MARKER};
use rrtf_core::ranker::{build_training_triples, group_candidates, FilterDecision, ProblemGroup, RankPolicy};
use rrtf_core::sampler::{sample_responses, ToyLmGenerator};
use rrtf_core::tokenizer::{prompt_tokens, response_tokens};
use rrtf_core::trainer::{
    evaluate_losses, ft_loss, log_prob_length_normalized, rank_loss, total_loss_encoded, train_encoded,
    EncodedTriple, ModelConfig, ToyLm,
};

type Outcome = Result<String, String>;
type Check = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// 1. pass@k against subset enumeration.

fn brute_pass_at_k(n: u32, c: u32, k: u32) -> f64 {
    // Items 0..c are the correct ones.
    let correct_mask: u32 = (1 << c) - 1;
    let (mut hit, mut total) = (0u64, 0u64);
    for subset in 0u32..(1 << n) {
        if subset.count_ones() != k {
            continue;
        }
        total += 1;
        if subset & correct_mask != 0 {
            hit += 1;
        }
    }
    hit as f64 / total as f64
}

fn estimator() -> Outcome {
    let mut cases = 0;
    let mut worst: f64 = 0.0;
    for n in 1..=12u32 {
        for c in 0..=n {
            for k in 1..=n {
                let got = pass_at_k(n as u64, c as u64, k as u64).map_err(err)?;
                let want = brute_pass_at_k(n, c, k);
                worst = worst.max((got - want).abs());
                ensure!((got - want).abs() <= 1e-12, "n={n} c={c} k={k}: {got} vs {want}");
                cases += 1;
            }
        }
    }
    for k in [1, 10, 100] {
        for c in [0, 1, 7, 100, 199, 200] {
            let v = pass_at_k(200, c, k).map_err(err)?;
            ensure!(v.is_finite() && (0.0..=1.0).contains(&v), "n=200 c={c} k={k}: {v}");
        }
    }
    Ok(format!("{cases} cases, max abs error {worst:.1e}; n=200 finite for k in {{1,10,100}}"))
}

// 2. Loss formulas against hand-evaluated values.

fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        context_window: 3,
        embedding_dim: 4,
        hidden_dim: 5,
        seed,
        ..ModelConfig::default()
    }
}

fn loss_fixtures() -> Outcome {
    // (p_tea, p_stu, r_tea, r_stu, expected), worked out by hand.
    let rank_cases = [
        (-1.0, -2.0, 3.0, 1.0, 0.0),
        (-2.0, -1.0, 3.0, 1.0, 2.0),
        (-2.0, -1.0, 3.5, 1.0, 2.5),
        (-0.5, -0.5, 2.0, 0.0, 0.0),
        (-3.25, -0.25, 1.5, 1.0, 1.5),
        (-4.0, -3.0, 2.0, 1.5, 0.5),
        (-0.125, -0.0625, 3.5, 0.0, 0.21875),
        (-10.0, -1.0, 3.5, 2.0, 13.5),
        (-1.5, -2.75, 3.5, 0.0, 0.0),
        (-0.75, -0.25, 2.5, 1.0, 0.75),
        (-6.0, -5.5, 3.0, 2.0, 0.5),
    ];
    for (p_tea, p_stu, r_tea, r_stu, want) in rank_cases {
        let got = rank_loss(p_tea, p_stu, r_tea, r_stu).map_err(err)?;
        ensure!((got - want).abs() <= 1e-10, "rank_loss({p_tea}, {p_stu}, {r_tea}, {r_stu}) = {got}, want {want}");
    }
    let mut ft_cases = 0;
    let x = prompt_tokens("\"\"\"\nReturn x plus 3.\n\"\"\"\ndef f03(x):");
    for seed in [1, 2, 3] {
        let model = ToyLm::new(small_config(seed)).map_err(err)?;
        for text in ["\n    return x + 3", "\n    return x", "a"] {
            let y = response_tokens(text);
            let p = log_prob_length_normalized(&model, &x, &y).map_err(err)?;
            let ft = ft_loss(&model, &x, &y).map_err(err)?;
            ensure!((ft + y.len() as f64 * p).abs() <= 1e-10, "ft {ft} vs -|y| p = {}", -(y.len() as f64) * p);
            ft_cases += 1;
        }
    }
    // A zeroed output layer gives the uniform distribution.
    let mut model = ToyLm::new(small_config(9)).map_err(err)?;
    model.zero_output_layer();
    let ln_v = (model.vocab_size() as f64).ln();
    for text in ["a", "return a + b"] {
        let y = response_tokens(text);
        let ft = ft_loss(&model, &x, &y).map_err(err)?;
        ensure!((ft - y.len() as f64 * ln_v).abs() <= 1e-10, "uniform ft {ft}");
        ft_cases += 1;
    }
    Ok(format!("{} rank fixtures, {ft_cases} fine-tune fixtures within 1e-10", rank_cases.len()))
}

// 3. Analytic gradient against central differences.

fn gradient() -> Outcome {
    let t = EncodedTriple {
        x: prompt_tokens("\"\"\"\nsum\n\"\"\"\ndef f(a, b):"),
        y_tea: response_tokens("\n    return a + b"),
        y_stu: response_tokens("\n    return a"),
        r_tea: 3.5,
        r_stu: 2.0,
    };
    let loss_at = |m: &ToyLm| total_loss_encoded(&t, m, 1.0, 1.0).map(|(l, _)| l.total);
    let step = 1e-5;
    let (mut checked, mut skipped, mut active) = (0, 0, 0);
    let mut overall: f64 = 0.0;
    for seed in 100..112u64 {
        let mut model = ToyLm::new(small_config(seed)).map_err(err)?;
        let range = model.layout().output_weight.clone();
        for w in &mut model.params_mut()[range] {
            *w *= 4.0;
        }
        let (loss, grad) = total_loss_encoded(&t, &model, 1.0, 1.0).map_err(err)?;
        // Too close to the hinge's kink for a probe of this size.
        if (loss.p_stu - loss.p_tea).abs() < 1e-4 {
            skipped += 1;
            continue;
        }
        if loss.p_stu > loss.p_tea {
            active += 1;
        }
        for i in 0..model.params().len() {
            let orig = model.params()[i];
            model.params_mut()[i] = orig + step;
            let up = loss_at(&model).map_err(err)?;
            model.params_mut()[i] = orig - step;
            let down = loss_at(&model).map_err(err)?;
            model.params_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let denom = grad[i].abs().max(numeric.abs()).max(1e-4);
            overall = overall.max((grad[i] - numeric).abs() / denom);
        }
        checked += 1;
    }
    ensure!(checked >= 5, "only {checked} usable points");
    ensure!(overall < 1e-4, "max relative error {overall:.2e}");
    Ok(format!(
        "{checked} points ({active} with the hinge active, {skipped} near the kink skipped), max relative error {overall:.2e}"
    ))
}

// 4. Execution outcomes.

fn add_problem() -> ProgrammingProblem {
    ProgrammingProblem::seed("add", "Return the sum of a and b.")
        .with_signature("def add(a, b):")
        .with_tests(["assert add(1, 2) == 3", "assert add(0, 0) == 0", "assert add(-1, 1) == 0"])
}

fn add_candidate(index: u32, body: &str) -> CandidateResponse {
    let source = Source {
        role: Role::Student,
        generator_id: "crafted".into(),
    };
    CandidateResponse::new("add", source, index, format!("```python\ndef add(a, b):\n{body}\n```"), 0.2, 0.95)
}

fn executor(wall_ms: u64) -> Executor {
    let limits = SandboxLimits {
        wall_timeout_ms: wall_ms,
        ..SandboxLimits::default()
    };
    Executor::new(RunnerSpec::python3(), limits)
}

fn situations(records: &[ExecutionRecord]) -> Result<Vec<Situation>, String> {
    records
        .iter()
        .map(|r| r.outcome.as_ref().map(|o| o.situation).ok_or_else(|| format!("{:?}", r.error)))
        .collect()
}

fn four_situations() -> Outcome {
    let candidates = vec![
        add_candidate(0, "    return a +"),
        add_candidate(1, "    return a + b\nraise RuntimeError('boom')"),
        add_candidate(2, "    return a + b if a != 0 else 1"),
        add_candidate(3, "    return a + b"),
    ];
    let problems = HashMap::from([("add".to_string(), add_problem())]);
    let want = vec![
        Situation::CompileError,
        Situation::RuntimeError,
        Situation::PartialPass { passed: 2, total: 3 },
        Situation::AllPass { total: 3 },
    ];
    let exec = executor(10_000);
    for workers in [1, 8] {
        let got = situations(&exec.execute_batch(&candidates, &problems, workers).map_err(err)?)?;
        ensure!(got == want, "workers {workers}: {got:?}");
    }
    let started = Instant::now();
    let sleeper = "def add(a, b):\n    import time\n    time.sleep(30)\n    return a + b";
    let out = executor(1_000).run_candidate(sleeper, &add_problem().tests).map_err(err)?;
    ensure!(out.situation == Situation::RuntimeError, "sleeper: {:?}", out.situation);
    ensure!(out.stderr_excerpt.contains(TIMEOUT_MARKER), "sleeper stderr: {}", out.stderr_excerpt);
    Ok(format!(
        "compile/runtime/partial 2 of 3/all 3 for workers 1 and 8; sleeper timed out in {:.1}s",
        started.elapsed().as_secs_f64()
    ))
}

// 5. Ranking contract on random populations.

const SITUATION_SCORE: [f64; 4] = [0.0, 1.0, 2.0, 3.0];

fn random_situation(rng: &mut StdRng) -> (Situation, usize) {
    match rng.gen_range(0..4) {
        0 => (Situation::CompileError, 0),
        1 => (Situation::RuntimeError, 1),
        2 => (
            Situation::PartialPass {
                passed: rng.gen_range(1..5),
                total: 5,
            },
            2,
        ),
        _ => (Situation::AllPass { total: 5 }, 3),
    }
}

fn ranking() -> Outcome {
    const GROUPS: usize = 2000;
    let mut rng = StdRng::seed_from_u64(2024);
    let policy = RankPolicy::default();
    let mut groups = Vec::new();
    // Best raw score per role, computed here independently of the ranker.
    let mut best: HashMap<String, (Option<f64>, Option<f64>)> = HashMap::new();
    for g in 0..GROUPS {
        let id = format!("g{g:04}");
        let problem = ProgrammingProblem::seed(&id, "Return the input unchanged.").with_signature("def f(x):");
        let mut entries = Vec::new();
        let mut bests = (None::<f64>, None::<f64>);
        for (role, slot) in [(Role::Teacher, 0), (Role::Student, 1)] {
            for i in 0..rng.gen_range(0..4u32) {
                let (situation, level) = random_situation(&mut rng);
                let source = Source {
                    role,
                    generator_id: role.to_string(),
                };
                let c = CandidateResponse::new(&id, source, i, format!("    return x  # {i}"), 0.8, 0.95);
                let outcome = ExecutionOutcome {
                    situation,
                    wall_time_ms: 0,
                    stderr_excerpt: String::new(),
                };
                entries.push((c, outcome));
                let b = if slot == 0 { &mut bests.0 } else { &mut bests.1 };
                *b = Some(b.map_or(SITUATION_SCORE[level], |v: f64| v.max(SITUATION_SCORE[level])));
            }
        }
        entries.shuffle(&mut rng);
        best.insert(id.clone(), bests);
        groups.push(ProblemGroup {
            problem_id: id,
            problem: Some(problem),
            entries,
        });
    }
    let (triples, log) = build_training_triples(&groups, &policy);
    let logged: HashMap<&str, FilterDecision> = log.iter().map(|e| (e.problem_id.as_str(), e.decision)).collect();
    let emitted: HashMap<&str, (f64, f64)> =
        triples.iter().map(|t| (t.problem_id.as_str(), (t.r_tea, t.r_stu))).collect();
    ensure!(triples.len() + log.len() == GROUPS, "{} triples + {} log entries", triples.len(), log.len());
    let (mut kept, mut ties, mut filtered) = (0, 0, 0);
    for t in &triples {
        ensure!(t.r_tea > t.r_stu, "{}: r_tea {} <= r_stu {}", t.problem_id, t.r_tea, t.r_stu);
    }
    for (id, (tea, stu)) in &best {
        match (tea, stu) {
            (Some(tea), Some(stu)) if tea < stu => {
                ensure!(logged.get(id.as_str()) == Some(&FilterDecision::Filtered), "{id}: teacher worse but not filtered");
                filtered += 1;
            }
            (Some(tea), Some(stu)) => {
                let Some(&(r_tea, r_stu)) = emitted.get(id.as_str()) else {
                    return Err(format!("{id}: teacher not worse but no triple"));
                };
                ensure!(r_tea > r_stu, "{id}: teacher not ranked higher");
                ensure!(r_stu == *stu && r_tea - tea == policy.teacher_tiebreak_bonus, "{id}: scores {r_tea}, {r_stu}");
                if tea == stu {
                    ties += 1;
                }
                kept += 1;
            }
            _ => ensure!(logged.get(id.as_str()) == Some(&FilterDecision::Skipped), "{id}: missing role not skipped"),
        }
    }
    ensure!(ties > 0 && filtered > 0, "population too narrow: {ties} ties, {filtered} filtered");
    Ok(format!("{GROUPS} groups: {kept} kept ({ties} ties), {filtered} filtered, {} skipped", GROUPS - kept - filtered))
}

// 6. Desk-scale training effect.

fn desk_training() -> Outcome {
    let seeds = desk_problems(24);
    let problems = with_evolved(&seeds);
    let config = fixture_config(&seeds).effective();
    let sampled = sample_responses(&problems, &config.generators, &config.sampling).map_err(err)?;
    ensure!(sampled.failures.is_empty(), "{} sampling failures", sampled.failures.len());
    let by_id: HashMap<String, ProgrammingProblem> = problems.iter().map(|p| (p.id.clone(), p.clone())).collect();
    let exec = config.executor();
    let records = exec.execute_batch(&sampled.responses, &by_id, 8).map_err(err)?;
    let groups = group_candidates(&problems, &sampled.responses, &records);
    let (triples, _) = build_training_triples(&groups, &config.policy);
    ensure!(triples.len() >= 20, "only {} triples", triples.len());
    let encoded: Vec<EncodedTriple> = triples.iter().map(EncodedTriple::from_triple).collect();

    let model = ToyLm::new(config.model).map_err(err)?;
    let before = evaluate_losses(&encoded, &model, &config.train).map_err(err)?;
    ensure!(config.train.epochs <= 50, "{} epochs", config.train.epochs);
    let (trained, _) = train_encoded(&encoded, model, &config.train).map_err(err)?;
    let after = evaluate_losses(&encoded, &trained, &config.train).map_err(err)?;
    ensure!(before.mean_rank > 0.0, "initial rank loss is already zero");
    ensure!(
        after.mean_rank < 0.01 * before.mean_rank,
        "rank loss {:.3e} -> {:.3e}",
        before.mean_rank,
        after.mean_rank
    );

    let generator = ToyLmGenerator::new(trained);
    let report = evaluate(&seeds, "toy-lm", &generator, &config.eval.decoding, &exec, 8).map_err(err)?;
    let pass1 = report.estimates.get(&1).copied().ok_or("no pass@1")?;
    ensure!(pass1 >= 0.9, "greedy pass@1 {:.1}%", pass1 * 100.0);
    Ok(format!(
        "{} triples, {} epochs: rank loss {:.3e} -> {:.3e}, fine-tune loss {:.2} -> {:.3}, greedy pass@1 {:.1}% on {} problems",
        triples.len(),
        config.train.epochs,
        before.mean_rank,
        after.mean_rank,
        before.mean_ft,
        after.mean_ft,
        pass1 * 100.0,
        seeds.len()
    ))
}

// 7. Prompt goldens.

fn golden(name: &str) -> Result<String, String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden").join(name);
    std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))
}

fn goldens() -> Outcome {
    let methods = vec![
        "Add edge cases the solution must handle.".to_string(),
        "Require the use of specific data structures.".to_string(),
    ];
    let evolution = render_evolution_prompt("Write a function that reverses a string.", &methods).map_err(err)?;
    ensure!(evolution == golden("evolution_prompt.txt")?, "evolution prompt differs");
    let problem = ProgrammingProblem::seed("golden", "Return the sum of a and b.").with_signature("def add(a, b):");
    for (style, file) in [
        (PromptStyle::PanGu2, "inference_pangu2.txt"),
        (PromptStyle::StarCoder, "inference_starcoder.txt"),
        (PromptStyle::WizardCoder, "inference_wizardcoder.txt"),
    ] {
        let got = render_inference_prompt(&problem, style).map_err(err)?;
        ensure!(got == golden(file)?, "{style:?} prompt differs");
    }
    Ok("evolution prompt and three inference styles byte-exact".into())
}

// 8. Pipeline determinism through the binary.

fn run_pipeline(dir: &Path, workers: usize) -> Result<(), String> {
    let config = write_fixture(dir, 24).map_err(err)?;
    let out = Command::new(env!("CARGO_BIN_EXE_rrtf"))
        .arg("--config")
        .arg(&config)
        .args(["--seed", "13", "--workers", &workers.to_string(), "pipeline"])
        .env("RUST_LOG", "warn")
        .output()
        .map_err(err)?;
    ensure!(out.status.success(), "pipeline (workers {workers}) failed: {}", String::from_utf8_lossy(&out.stderr));
    Ok(())
}

/// Outcome lines with the measured wall time zeroed, the one field that is
/// a measurement rather than a result.
fn without_wall_time(bytes: &[u8]) -> Result<Vec<u8>, String> {
    let mut out = Vec::new();
    for line in bytes.split(|b| *b == b'\n').filter(|l| !l.is_empty()) {
        let mut v: serde_json::Value = serde_json::from_slice(line).map_err(err)?;
        if let Some(t) = v.pointer_mut("/outcome/wall_time_ms") {
            *t = serde_json::Value::from(0);
        }
        out.extend(serde_json::to_vec(&v).map_err(err)?);
        out.push(b'\n');
    }
    Ok(out)
}

/// Every non-manifest output of a run, by file name.
fn outputs(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir.join("work")).map_err(err)? {
        let path = entry.map_err(err)?.path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        if name.ends_with(".manifest.json") {
            continue;
        }
        let mut bytes = std::fs::read(&path).map_err(err)?;
        if name == "outcomes.jsonl" {
            bytes = without_wall_time(&bytes)?;
        }
        files.push((name, bytes));
    }
    files.sort();
    Ok(files)
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().map_err(err)?;
    let runs = [("a", 1), ("b", 1), ("c", 8)];
    let results: Vec<Result<(), String>> = std::thread::scope(|s| {
        let handles: Vec<_> = runs
            .iter()
            .map(|(name, workers)| {
                let dir = root.path().join(name);
                s.spawn(move || run_pipeline(&dir, *workers))
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err("panicked".into()))).collect()
    });
    for r in results {
        r?;
    }
    let reference = outputs(&root.path().join("a"))?;
    ensure!(reference.iter().any(|(n, _)| n == "report.jsonl"), "no report written");
    for (name, workers) in &runs[1..] {
        let other = outputs(&root.path().join(name))?;
        let names = |v: &[(String, Vec<u8>)]| v.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>();
        ensure!(names(&other) == names(&reference), "run {name}: different output files");
        for ((file, a), (_, b)) in reference.iter().zip(&other) {
            ensure!(a == b, "run {name} (workers {workers}): {file} differs");
        }
    }
    Ok(format!(
        "report and {} other outputs identical across 2 runs with 1 worker and 1 run with 8 (outcome wall times excluded)",
        reference.len() - 1
    ))
}

// 9. Leakage detection against an all-pairs oracle.

fn oracle_grams(text: &str) -> BTreeSet<Vec<String>> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    match tokens.len() {
        0 => BTreeSet::new(),
        1..=3 => BTreeSet::from([tokens]),
        _ => tokens.windows(4).map(<[String]>::to_vec).collect(),
    }
}

fn oracle_similarity(a: &str, b: &str) -> f64 {
    let (a, b) = (oracle_grams(a), oracle_grams(b));
    let inter = a.intersection(&b).count();
    let union = a.union(&b).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

const WORDS: [&str; 40] = [
    "return", "list", "sum", "of", "the", "integers", "string", "reverse", "count", "vowels", "sorted", "order",
    "given", "an", "array", "find", "maximum", "minimum", "element", "index", "each", "word", "length", "even",
    "odd", "numbers", "prime", "value", "pair", "matrix", "row", "column", "key", "dictionary", "unique", "first",
    "last", "character", "digits", "product",
];

fn sentence(rng: &mut StdRng) -> Vec<&'static str> {
    let len = rng.gen_range(8..24);
    (0..len).map(|_| *WORDS.choose(rng).unwrap()).collect()
}

fn mutate(words: &[&'static str], changes: usize, rng: &mut StdRng) -> Vec<&'static str> {
    let mut out = words.to_vec();
    for _ in 0..changes {
        let i = rng.gen_range(0..out.len());
        out[i] = WORDS.choose(rng).unwrap();
    }
    out
}

fn render(words: &[&str], shout: bool) -> String {
    let text = words.join(" ");
    if shout {
        format!("{}!", text.to_uppercase())
    } else {
        format!("{text}.")
    }
}

fn leakage() -> Outcome {
    let mut rng = StdRng::seed_from_u64(99);
    let bench_words: Vec<Vec<&str>> = (0..100).map(|_| sentence(&mut rng)).collect();
    let benchmark: Vec<ProgrammingProblem> = bench_words
        .iter()
        .enumerate()
        .map(|(i, w)| ProgrammingProblem::seed(format!("b{i:03}"), render(w, false)))
        .collect();

    let planted = vec![ProgrammingProblem::seed("copy", benchmark[17].instruction.clone())];
    let report = check_leakage(&planted, &benchmark, 0.99).map_err(err)?;
    ensure!(
        report.hits.iter().any(|h| h.benchmark_id == "b017" && h.similarity == 1.0),
        "planted copy not flagged at 1.0: {:?}",
        report.hits
    );

    let corpus: Vec<ProgrammingProblem> = (0..100)
        .map(|i| {
            let source = &bench_words[(i * 37) % 100];
            let words = match i % 5 {
                0 => source.clone(),
                1 => mutate(source, 1, &mut rng),
                2 => mutate(source, 2, &mut rng),
                3 => mutate(source, 4, &mut rng),
                _ => sentence(&mut rng),
            };
            ProgrammingProblem::seed(format!("c{i:03}"), render(&words, i % 2 == 1))
        })
        .collect();

    let mut summary = Vec::new();
    for threshold in [0.4, 0.6, 0.8] {
        let mut want = BTreeSet::new();
        for c in &corpus {
            for b in &benchmark {
                if oracle_similarity(&c.instruction, &b.instruction) >= threshold {
                    want.insert((c.id.clone(), b.id.clone()));
                }
            }
        }
        let report = check_leakage(&corpus, &benchmark, threshold).map_err(err)?;
        let got: BTreeSet<(String, String)> =
            report.hits.iter().map(|h| (h.corpus_id.clone(), h.benchmark_id.clone())).collect();
        ensure!(got.len() == report.hits.len(), "duplicate hits at {threshold}");
        ensure!(got == want, "threshold {threshold}: {} flagged, oracle {}", got.len(), want.len());
        for h in &report.hits {
            let c = corpus.iter().find(|p| p.id == h.corpus_id).unwrap();
            let b = benchmark.iter().find(|p| p.id == h.benchmark_id).unwrap();
            let s = oracle_similarity(&c.instruction, &b.instruction);
            ensure!((s - h.similarity).abs() < 1e-12, "{}/{}: {} vs {s}", h.corpus_id, h.benchmark_id, h.similarity);
        }
        ensure!(!want.is_empty() && want.len() < 100 * 100, "degenerate fixture at {threshold}");
        summary.push(format!("{} at {threshold}", want.len()));
    }
    Ok(format!("planted copy flagged at 1.0; flagged pairs match the oracle: {}", summary.join(", ")))
}

fn main() -> ExitCode {
    let checks: [Check; 9] = [
        ("estimator exactness", estimator),
        ("loss formula fidelity", loss_fixtures),
        ("gradient correctness", gradient),
        ("four-situation classification", four_situations),
        ("ranking contract", ranking),
        ("desk-scale training effect", desk_training),
        ("prompt goldens", goldens),
        ("pipeline determinism", determinism),
        ("leakage detector", leakage),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let started = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS [{}] {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{}] {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
