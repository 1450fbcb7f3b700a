//! Ranking-feedback training for code models: corpus evolution, candidate
//! sampling, sandboxed execution, ranking into training triples, a toy
//! language model trainer, and pass@k evaluation.

pub mod datamodel;
pub mod evaluator;
pub mod evolver;
pub mod executor;
pub mod ranker;
pub mod sampler;
pub mod tokenizer;
pub mod trainer;
