use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rrtf_cli::config::{absolute, methods_file, parse_override, side_file, ConfigDoc, ConfigError};
use rrtf_cli::fixture::{write_fixture, DEFAULT_PROBLEMS};
use rrtf_cli::stages::{render_reports, run_pipeline, run_stage, write_report, Run, Stage, StageError};
use rrtf_core::evaluator::ReportFormat;
use toml::Value;

/// Teacher/student ranked fine-tuning pipeline for code generation.
#[derive(Parser)]
#[command(name = "rrtf", version)]
struct Cli {
    /// Pipeline configuration (TOML). Relative paths in it are resolved
    /// against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set train.epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Global seed, pushed into every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Global worker count.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rewrite seed problems into harder ones and clean the result.
    Evolve {
        #[arg(long)]
        seeds: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// One rewriting method per line.
        #[arg(long)]
        methods: Option<PathBuf>,
        #[arg(long)]
        max_depth: Option<u32>,
    },
    /// Compare a corpus with a benchmark for near-duplicates. Exits 1 when
    /// any pair is flagged.
    CheckLeakage {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        benchmark: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample teacher and student responses for every problem.
    Sample {
        #[arg(long)]
        problems: Option<PathBuf>,
        /// TOML file with a `[[generators]]` list.
        #[arg(long)]
        generators: Option<PathBuf>,
        /// TOML file with the sampling plan.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every candidate against its problem's tests.
    Execute {
        #[arg(long)]
        candidates: Option<PathBuf>,
        #[arg(long)]
        problems: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        timeout_ms: Option<u64>,
        #[arg(long)]
        keep_failures: bool,
    },
    /// Pair the best teacher and student response per problem.
    Rank {
        #[arg(long)]
        candidates: Option<PathBuf>,
        #[arg(long)]
        outcomes: Option<PathBuf>,
        #[arg(long)]
        problems: Option<PathBuf>,
        /// TOML file with the ranking policy.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the toy model on ranked triples.
    Train {
        #[arg(long)]
        triples: Option<PathBuf>,
        #[arg(long)]
        init_model: Option<PathBuf>,
        #[arg(long)]
        out_model: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Estimate pass@k on a benchmark.
    Eval {
        #[arg(long)]
        problems: Option<PathBuf>,
        /// Toy model to evaluate; ignored when a generator is configured.
        #[arg(long)]
        model: Option<PathBuf>,
        /// TOML file describing the generator under evaluation.
        #[arg(long)]
        generator: Option<PathBuf>,
        #[arg(long)]
        n: Option<u32>,
        #[arg(long, value_delimiter = ',')]
        k: Vec<u32>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        top_p: Option<f64>,
        #[arg(long)]
        greedy: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print pass@k reports as a table or CSV.
    Report {
        #[arg(long = "in", value_name = "REPORT")]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "table")]
        format: ReportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run evolve, sample, execute, rank, train and eval in order.
    Pipeline,
    /// Write a small scripted fixture (seeds and config) to a directory.
    InitFixture(InitFixture),
}

#[derive(Args)]
struct InitFixture {
    #[arg(long)]
    dir: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PROBLEMS)]
    problems: usize,
}

#[derive(Default)]
struct Overrides(Vec<(String, Value)>);

impl Overrides {
    fn path(&mut self, key: &str, path: &Option<PathBuf>) {
        if let Some(p) = path {
            self.0.push((key.into(), Value::String(absolute(p).display().to_string())));
        }
    }

    fn value(&mut self, key: &str, value: Option<Value>) {
        if let Some(v) = value {
            self.0.push((key.into(), v));
        }
    }

    fn file(&mut self, key: &str, path: &Option<PathBuf>) -> Result<(), ConfigError> {
        if let Some(p) = path {
            self.0.push((key.into(), side_file(p, key)?));
        }
        Ok(())
    }
}

fn int(v: Option<impl Into<i64>>) -> Option<Value> {
    v.map(|v| Value::Integer(v.into()))
}

fn float(v: Option<f64>) -> Option<Value> {
    v.map(Value::Float)
}

fn usize_value(v: Option<usize>) -> Option<Value> {
    v.map(|v| Value::Integer(v as i64))
}

/// Translates stage flags into configuration overrides.
fn flag_overrides(command: &Command) -> Result<Overrides, ConfigError> {
    let mut o = Overrides::default();
    match command {
        Command::Evolve {
            seeds,
            out,
            methods,
            max_depth,
        } => {
            o.path("paths.seeds", seeds);
            o.path("paths.corpus", out);
            if let Some(m) = methods {
                o.0.push(("evolution.methods".into(), methods_file(m)?));
            }
            o.value("evolution.max_depth", int(*max_depth));
        }
        Command::CheckLeakage {
            corpus,
            benchmark,
            threshold,
            out,
        } => {
            o.path("paths.corpus", corpus);
            o.path("paths.benchmark", benchmark);
            o.value("leakage_threshold", float(*threshold));
            o.path("paths.leakage", out);
        }
        Command::Sample {
            problems,
            generators,
            plan,
            out,
        } => {
            o.path("paths.corpus", problems);
            o.file("generators", generators)?;
            o.file("sampling", plan)?;
            o.path("paths.candidates", out);
        }
        Command::Execute {
            candidates,
            problems,
            out,
            timeout_ms,
            keep_failures,
        } => {
            o.path("paths.candidates", candidates);
            o.path("paths.corpus", problems);
            o.path("paths.outcomes", out);
            o.value("executor.limits.wall_timeout_ms", timeout_ms.map(|t| Value::Integer(t as i64)));
            if *keep_failures {
                o.value("executor.keep_failures", Some(Value::Boolean(true)));
            }
        }
        Command::Rank {
            candidates,
            outcomes,
            problems,
            policy,
            out,
        } => {
            o.path("paths.candidates", candidates);
            o.path("paths.outcomes", outcomes);
            o.path("paths.corpus", problems);
            o.file("policy", policy)?;
            o.path("paths.triples", out);
        }
        Command::Train {
            triples,
            init_model,
            out_model,
            epochs,
            lr,
        } => {
            o.path("paths.triples", triples);
            o.path("paths.init_model", init_model);
            o.path("paths.model", out_model);
            o.value("train.epochs", usize_value(*epochs));
            o.value("train.learning_rate", float(*lr));
        }
        Command::Eval {
            problems,
            model,
            generator,
            n,
            k,
            temperature,
            top_p,
            greedy,
            out,
        } => {
            o.path("paths.benchmark", problems);
            o.path("paths.model", model);
            o.file("eval.generator", generator)?;
            if *greedy {
                o.value("eval.decoding.strategy", Some(Value::String("greedy".into())));
                o.value("eval.decoding.temperature", Some(Value::Float(0.0)));
                o.value("eval.decoding.n", Some(Value::Integer(1)));
                o.value("eval.decoding.k_values", Some(Value::Array(vec![Value::Integer(1)])));
            }
            o.value("eval.decoding.n", int(*n));
            if !k.is_empty() {
                let ks = k.iter().map(|k| Value::Integer(*k as i64)).collect();
                o.value("eval.decoding.k_values", Some(Value::Array(ks)));
            }
            o.value("eval.decoding.temperature", float(*temperature));
            o.value("eval.decoding.top_p", float(*top_p));
            o.path("paths.report", out);
        }
        Command::Report { .. } | Command::Pipeline | Command::InitFixture(_) => {}
    }
    Ok(o)
}

fn load_config(cli: &Cli) -> Result<rrtf_cli::config::PipelineConfig, ConfigError> {
    let mut doc = match &cli.config {
        Some(path) => ConfigDoc::load(path)?,
        None => ConfigDoc::empty(absolute(Path::new("."))),
    };
    let mut overrides = flag_overrides(&cli.command)?;
    overrides.value("seed", cli.seed.map(|s| Value::Integer(s as i64)));
    overrides.value("workers", usize_value(cli.workers));
    for raw in &cli.set {
        overrides.0.push(parse_override(raw)?);
    }
    doc.overlay(&overrides.0)?;
    doc.resolve()
}

fn report_command(
    run_cfg: Result<Run, ConfigError>,
    inputs: &[PathBuf],
    format: ReportFormat,
    out: &Option<PathBuf>,
) -> Result<(), StageError> {
    let run = run_cfg?;
    let inputs: Vec<PathBuf> = if inputs.is_empty() {
        vec![run.config.require("report")?.to_path_buf()]
    } else {
        inputs.to_vec()
    };
    let text = render_reports(&inputs, format)?;
    match out {
        Some(path) => write_report(&run, &inputs, path, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn stage_of(command: &Command) -> Option<Stage> {
    Some(match command {
        Command::Evolve { .. } => Stage::Evolve,
        Command::CheckLeakage { .. } => Stage::CheckLeakage,
        Command::Sample { .. } => Stage::Sample,
        Command::Execute { .. } => Stage::Execute,
        Command::Rank { .. } => Stage::Rank,
        Command::Train { .. } => Stage::Train,
        Command::Eval { .. } => Stage::Eval,
        _ => return None,
    })
}

fn fail(err: &dyn std::fmt::Display, code: u8) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(code)
}

fn init_fixture(args: &InitFixture) -> ExitCode {
    match write_fixture(Path::new(&args.dir), args.problems) {
        Ok(path) => {
            println!("{}", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(&format!("{e:#}"), 1),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Command::InitFixture(args) = &cli.command {
        return init_fixture(args);
    }
    let command_line: Vec<String> = std::env::args().collect();
    let run = load_config(&cli).map(|c| Run::new(&c, command_line));

    if let Command::Report { inputs, format, out } = &cli.command {
        return match report_command(run, inputs, *format, out) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => fail(&e, e.exit_code()),
        };
    }
    let run = match run {
        Ok(run) => run,
        Err(e) => return fail(&e, 2),
    };
    let result = match stage_of(&cli.command) {
        Some(stage) => run_stage(stage, &run).map(|summary| {
            log::info!("{}: {}", stage.name(), summary.message);
            summary.check_failed
        }),
        None => run_pipeline(&run, |stage, summary| log::info!("{}: {}", stage.name(), summary.message)).map(|()| false),
    };
    match result {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(1),
        Err(e) => fail(&format!("{:#}", DisplayChain(&e)), e.exit_code()),
    }
}

struct DisplayChain<'a>(&'a StageError);

impl std::fmt::Display for DisplayChain<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.0 {
            StageError::Failed(e) => write!(f, "{e:#}"),
            other => write!(f, "{other}"),
        }
    }
}
