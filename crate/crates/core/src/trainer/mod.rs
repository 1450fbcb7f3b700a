//! Rank + fine-tune training of the toy model on teacher/student triples.
//!
//! For a prompt `x` and a response `y`, the model's length-normalized
//! conditional log-probability is
//!
//! ```text
//! p(y) = (1/|y|) * sum_t log P(y_t | x, y_<t)
//! ```
//!
//! and each triple contributes
//!
//! ```text
//! L_rank = (r_tea - r_stu) * max(0, p_stu - p_tea)
//! L_ft   = -sum_t log P(y_tea,t | x, y_tea,<t)
//! L      = L_rank + L_ft
//! ```
//!
//! The derivative of `max(0, z)` is taken to be 0 at `z = 0`.

pub mod format;
pub mod model;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Record, TrainingTriple};
use crate::tokenizer::{prompt_tokens, TokenSequence};
pub use model::{ModelConfig, ToyLm};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("empty response sequence")]
    EmptySequence,
    #[error("rank loss requires r_tea > r_stu, got r_tea={r_tea}, r_stu={r_stu}")]
    RankOrder { r_tea: f64, r_stu: f64 },
    #[error("token {token} outside model vocabulary of {vocab_size}")]
    VocabMismatch { token: u32, vocab_size: usize },
    #[error("no training triples")]
    NoTriples,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("model file: {0}")]
    ModelFile(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub rank_weight: f64,
    pub ft_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 512,
            learning_rate: 0.05,
            seed: 0,
            rank_weight: 1.0,
            ft_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// A triple with its prompt and responses already tokenized.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTriple {
    pub x: TokenSequence,
    pub y_tea: TokenSequence,
    pub y_stu: TokenSequence,
    pub r_tea: f64,
    pub r_stu: f64,
}

impl EncodedTriple {
    pub fn from_triple(t: &TrainingTriple) -> Self {
        Self {
            x: prompt_tokens(&t.prompt),
            y_tea: TokenSequence(t.y_tea.tokens.clone()),
            y_stu: TokenSequence(t.y_stu.tokens.clone()),
            r_tea: t.r_tea,
            r_stu: t.r_stu,
        }
    }

    fn check(&self, model: &ToyLm) -> Result<(), TrainError> {
        if self.y_tea.is_empty() || self.y_stu.is_empty() {
            return Err(TrainError::EmptySequence);
        }
        model.check_tokens(&self.x)?;
        model.check_tokens(&self.y_tea)?;
        model.check_tokens(&self.y_stu)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub rank: f64,
    pub ft: f64,
    pub p_tea: f64,
    pub p_stu: f64,
}

/// Length-normalized conditional log-probability of `y` given `x`.
pub fn log_prob_length_normalized(model: &ToyLm, x: &TokenSequence, y: &TokenSequence) -> Result<f64, TrainError> {
    if y.is_empty() {
        return Err(TrainError::EmptySequence);
    }
    model.check_tokens(x)?;
    model.check_tokens(y)?;
    Ok(model.sequence_log_prob(x.as_slice(), y.as_slice()) / y.len() as f64)
}

pub fn rank_loss(p_tea: f64, p_stu: f64, r_tea: f64, r_stu: f64) -> Result<f64, TrainError> {
    if !(r_tea > r_stu) {
        return Err(TrainError::RankOrder { r_tea, r_stu });
    }
    Ok((r_tea - r_stu) * (p_stu - p_tea).max(0.0))
}

/// Summed (not normalized) cross-entropy of the teacher response.
pub fn ft_loss(model: &ToyLm, x: &TokenSequence, y_tea: &TokenSequence) -> Result<f64, TrainError> {
    if y_tea.is_empty() {
        return Err(TrainError::EmptySequence);
    }
    model.check_tokens(x)?;
    model.check_tokens(y_tea)?;
    Ok(-model.sequence_log_prob(x.as_slice(), y_tea.as_slice()))
}

/// `L_rank + L_ft` on one triple and its exact gradient with respect to every
/// model parameter.
pub fn total_loss(triple: &TrainingTriple, model: &ToyLm) -> Result<(LossBreakdown, Vec<f64>), TrainError> {
    total_loss_encoded(&EncodedTriple::from_triple(triple), model, 1.0, 1.0)
}

/// Weighted `rank_weight * L_rank + ft_weight * L_ft` with its gradient.
pub fn total_loss_encoded(
    t: &EncodedTriple,
    model: &ToyLm,
    rank_weight: f64,
    ft_weight: f64,
) -> Result<(LossBreakdown, Vec<f64>), TrainError> {
    t.check(model)?;
    if !(t.r_tea > t.r_stu) {
        return Err(TrainError::RankOrder {
            r_tea: t.r_tea,
            r_stu: t.r_stu,
        });
    }
    let x = t.x.as_slice();
    let (len_tea, len_stu) = (t.y_tea.len() as f64, t.y_stu.len() as f64);
    let p_tea = model.sequence_log_prob(x, t.y_tea.as_slice()) / len_tea;
    let p_stu = model.sequence_log_prob(x, t.y_stu.as_slice()) / len_stu;
    let margin = t.r_tea - t.r_stu;
    let rank = margin * (p_stu - p_tea).max(0.0);
    let ft = -p_tea * len_tea;

    // Only the teacher sequence contributes unless the rank hinge is active.
    let rank_active = p_stu > p_tea;
    let mut grad = vec![0.0; model.params().len()];
    let mut tea_weight = -ft_weight;
    if rank_active {
        tea_weight -= rank_weight * margin / len_tea;
        model.accumulate_log_prob_grad(x, t.y_stu.as_slice(), rank_weight * margin / len_stu, &mut grad);
    }
    model.accumulate_log_prob_grad(x, t.y_tea.as_slice(), tea_weight, &mut grad);

    Ok((
        LossBreakdown {
            total: rank_weight * rank + ft_weight * ft,
            rank,
            ft,
            p_tea,
            p_stu,
        },
        grad,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_total: f64,
    pub mean_rank: f64,
    pub mean_ft: f64,
}

impl Record for EpochStats {
    const KIND: &'static str = "epoch";
}

/// Mean losses over `triples` without updating anything.
pub fn evaluate_losses(triples: &[EncodedTriple], model: &ToyLm, config: &TrainConfig) -> Result<EpochStats, TrainError> {
    let mut stats = EpochStats {
        epoch: 0,
        mean_total: 0.0,
        mean_rank: 0.0,
        mean_ft: 0.0,
    };
    for t in triples {
        t.check(model)?;
        let x = t.x.as_slice();
        let p_tea = model.sequence_log_prob(x, t.y_tea.as_slice()) / t.y_tea.len() as f64;
        let p_stu = model.sequence_log_prob(x, t.y_stu.as_slice()) / t.y_stu.len() as f64;
        let rank = rank_loss(p_tea, p_stu, t.r_tea, t.r_stu)?;
        let ft = -p_tea * t.y_tea.len() as f64;
        stats.mean_rank += rank;
        stats.mean_ft += ft;
        stats.mean_total += config.rank_weight * rank + config.ft_weight * ft;
    }
    let n = triples.len().max(1) as f64;
    stats.mean_total /= n;
    stats.mean_rank /= n;
    stats.mean_ft /= n;
    Ok(stats)
}

/// Minibatch SGD over the triples. The loss trace holds, per epoch, the mean
/// of the losses seen before each batch's update.
pub fn train(
    triples: &[TrainingTriple],
    model: ToyLm,
    config: &TrainConfig,
) -> Result<(ToyLm, Vec<EpochStats>), TrainError> {
    let encoded: Vec<EncodedTriple> = triples.iter().map(EncodedTriple::from_triple).collect();
    train_encoded(&encoded, model, config)
}

pub fn train_encoded(
    triples: &[EncodedTriple],
    mut model: ToyLm,
    config: &TrainConfig,
) -> Result<(ToyLm, Vec<EpochStats>), TrainError> {
    config.validate()?;
    if triples.is_empty() {
        return Err(TrainError::NoTriples);
    }
    for t in triples {
        t.check(&model)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..triples.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0);
        for batch in order.chunks(config.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| total_loss_encoded(&triples[i], &model, config.rank_weight, config.ft_weight))
                .collect::<Result<Vec<_>, _>>()?;
            let scale = config.learning_rate / batch.len() as f64;
            let mut step = vec![0.0; model.params().len()];
            for (loss, grad) in &results {
                sums.0 += loss.total;
                sums.1 += loss.rank;
                sums.2 += loss.ft;
                for (s, g) in step.iter_mut().zip(grad) {
                    *s += g;
                }
            }
            if scale != 0.0 {
                for (p, s) in model.params_mut().iter_mut().zip(&step) {
                    *p -= scale * s;
                }
            }
        }
        let n = triples.len() as f64;
        let stats = EpochStats {
            epoch: epoch + 1,
            mean_total: sums.0 / n,
            mean_rank: sums.1 / n,
            mean_ft: sums.2 / n,
        };
        log::debug!("epoch {}: loss {:.6} (rank {:.6}, ft {:.6})", stats.epoch, stats.mean_total, stats.mean_rank, stats.mean_ft);
        trace.push(stats);
    }
    Ok((model, trace))
}
