//! Fixed-window autoregressive model over the byte vocabulary.
//!
//! The last `context_window` tokens are embedded, concatenated, passed through
//! one tanh layer and projected to vocabulary logits. All parameters live in a
//! single flat `Vec<f64>` so gradients, SGD updates and finite-difference
//! checks can treat the model as one vector.

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::tokenizer::{TokenSequence, BOS, EOS, VOCAB_SIZE};

const FORMAT: &str = "rrtf-toylm";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_window: usize,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: VOCAB_SIZE,
            context_window: 8,
            embedding_dim: 32,
            hidden_dim: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.vocab_size <= BOS.max(EOS) as usize
            || self.context_window == 0
            || self.embedding_dim == 0
            || self.hidden_dim == 0
        {
            return Err(TrainError::InvalidConfig(format!(
                "model dimensions must be positive and vocab must hold the marker tokens: {self:?}"
            )));
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        self.context_window * self.embedding_dim
    }
}

/// Where each tensor sits inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub embedding: Range<usize>,
    pub hidden_weight: Range<usize>,
    pub hidden_bias: Range<usize>,
    pub output_weight: Range<usize>,
    pub output_bias: Range<usize>,
}

impl Layout {
    fn new(c: &ModelConfig) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        Self {
            embedding: take(c.vocab_size * c.embedding_dim),
            hidden_weight: take(c.hidden_dim * c.input_dim()),
            hidden_bias: take(c.hidden_dim),
            output_weight: take(c.vocab_size * c.hidden_dim),
            output_bias: take(c.vocab_size),
        }
    }

    pub fn len(&self) -> usize {
        self.output_bias.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn tensors(&self, c: &ModelConfig) -> [(&'static str, Range<usize>, Vec<usize>); 5] {
        [
            ("embedding", self.embedding.clone(), vec![c.vocab_size, c.embedding_dim]),
            ("hidden_weight", self.hidden_weight.clone(), vec![c.hidden_dim, c.input_dim()]),
            ("hidden_bias", self.hidden_bias.clone(), vec![c.hidden_dim]),
            ("output_weight", self.output_weight.clone(), vec![c.vocab_size, c.hidden_dim]),
            ("output_bias", self.output_bias.clone(), vec![c.vocab_size]),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLm {
    config: ModelConfig,
    layout: Layout,
    params: Vec<f64>,
}

/// Intermediate values of one forward step, kept for backpropagation.
pub struct Step {
    context: Vec<u32>,
    input: Vec<f64>,
    hidden: Vec<f64>,
    /// Log-probabilities over the vocabulary.
    pub log_probs: Vec<f64>,
}

impl ToyLm {
    /// Randomly initialized model; the parameters depend only on `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut fill = |range: Range<usize>, scale: f64| {
            for p in &mut params[range] {
                *p = rng.gen_range(-scale..scale);
            }
        };
        fill(layout.embedding.clone(), 0.5);
        fill(layout.hidden_weight.clone(), 1.0 / (config.input_dim() as f64).sqrt());
        fill(layout.output_weight.clone(), 1.0 / (config.hidden_dim as f64).sqrt());
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    /// Zeroes the output projection so every position predicts the uniform
    /// distribution.
    pub fn zero_output_layer(&mut self) {
        let range = self.layout.output_weight.start..self.layout.output_bias.end;
        self.params[range].fill(0.0);
    }

    pub fn check_tokens(&self, seq: &TokenSequence) -> Result<(), TrainError> {
        match seq.max_token() {
            Some(t) if t as usize >= self.config.vocab_size => Err(TrainError::VocabMismatch {
                token: t,
                vocab_size: self.config.vocab_size,
            }),
            _ => Ok(()),
        }
    }

    /// The window of tokens that conditions the prediction after `prefix`,
    /// left-padded with BOS.
    pub fn context(&self, prefix: &[u32]) -> Vec<u32> {
        let w = self.config.context_window;
        let start = prefix.len().saturating_sub(w);
        let mut ctx = vec![BOS; w - (prefix.len() - start)];
        ctx.extend_from_slice(&prefix[start..]);
        ctx
    }

    pub fn forward(&self, context: &[u32]) -> Step {
        let c = &self.config;
        let d = c.embedding_dim;
        let emb = &self.params[self.layout.embedding.clone()];
        let mut input = Vec::with_capacity(c.input_dim());
        for &tok in context {
            let row = tok as usize * d;
            input.extend_from_slice(&emb[row..row + d]);
        }

        let w1 = &self.params[self.layout.hidden_weight.clone()];
        let b1 = &self.params[self.layout.hidden_bias.clone()];
        let hidden: Vec<f64> = (0..c.hidden_dim)
            .map(|j| {
                let row = &w1[j * input.len()..(j + 1) * input.len()];
                (b1[j] + dot(row, &input)).tanh()
            })
            .collect();

        let w2 = &self.params[self.layout.output_weight.clone()];
        let b2 = &self.params[self.layout.output_bias.clone()];
        let h = c.hidden_dim;
        let mut logits: Vec<f64> = (0..c.vocab_size)
            .map(|v| b2[v] + dot(&w2[v * h..(v + 1) * h], &hidden))
            .collect();
        log_softmax_in_place(&mut logits);

        Step {
            context: context.to_vec(),
            input,
            hidden,
            log_probs: logits,
        }
    }

    /// Next-token probabilities after `prefix`.
    pub fn next_token_probs(&self, prefix: &[u32]) -> Vec<f64> {
        self.forward(&self.context(prefix)).log_probs.iter().map(|l| l.exp()).collect()
    }

    /// `sum_t log P(y_t | x, y_<t)`.
    pub fn sequence_log_prob(&self, x: &[u32], y: &[u32]) -> f64 {
        let mut seq = x.to_vec();
        let mut total = 0.0;
        for &target in y {
            let step = self.forward(&self.context(&seq));
            total += step.log_probs[target as usize];
            seq.push(target);
        }
        total
    }

    /// Adds `weight * d/dθ sum_t log P(y_t | x, y_<t)` into `grad` and
    /// returns the summed log-probability.
    pub fn accumulate_log_prob_grad(&self, x: &[u32], y: &[u32], weight: f64, grad: &mut [f64]) -> f64 {
        let mut seq = x.to_vec();
        let mut total = 0.0;
        for &target in y {
            let step = self.forward(&self.context(&seq));
            total += step.log_probs[target as usize];
            if weight != 0.0 {
                self.backward(&step, target, weight, grad);
            }
            seq.push(target);
        }
        total
    }

    fn backward(&self, step: &Step, target: u32, weight: f64, grad: &mut [f64]) {
        let c = &self.config;
        let (d, h, v_size, in_dim) = (c.embedding_dim, c.hidden_dim, c.vocab_size, c.input_dim());
        let lay = &self.layout;

        // d(weight * log softmax[target]) / d logits
        let g_logits: Vec<f64> = step
            .log_probs
            .iter()
            .enumerate()
            .map(|(v, lp)| weight * (f64::from(v == target as usize) - lp.exp()))
            .collect();

        let w2 = &self.params[lay.output_weight.clone()];
        let mut g_hidden = vec![0.0; h];
        for v in 0..v_size {
            let g = g_logits[v];
            grad[lay.output_bias.start + v] += g;
            let gw = &mut grad[lay.output_weight.start + v * h..lay.output_weight.start + (v + 1) * h];
            let wrow = &w2[v * h..(v + 1) * h];
            for j in 0..h {
                gw[j] += g * step.hidden[j];
                g_hidden[j] += g * wrow[j];
            }
        }

        let w1 = &self.params[lay.hidden_weight.clone()];
        let mut g_input = vec![0.0; in_dim];
        for j in 0..h {
            let g_pre = g_hidden[j] * (1.0 - step.hidden[j] * step.hidden[j]);
            if g_pre == 0.0 {
                continue;
            }
            grad[lay.hidden_bias.start + j] += g_pre;
            let base = lay.hidden_weight.start + j * in_dim;
            let wrow = &w1[j * in_dim..(j + 1) * in_dim];
            for i in 0..in_dim {
                grad[base + i] += g_pre * step.input[i];
                g_input[i] += g_pre * wrow[i];
            }
        }

        for (slot, &tok) in step.context.iter().enumerate() {
            let base = lay.embedding.start + tok as usize * d;
            for k in 0..d {
                grad[base + k] += g_input[slot * d + k];
            }
        }
    }

    /// Generates up to `max_new_tokens` tokens after `prompt`, stopping at EOS
    /// (which is not included). Temperature 0 is greedy decoding; otherwise
    /// nucleus sampling with `top_p`.
    pub fn generate<R: Rng>(
        &self,
        prompt: &[u32],
        max_new_tokens: usize,
        temperature: f64,
        top_p: f64,
        rng: &mut R,
    ) -> Vec<u32> {
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_new_tokens {
            let step = self.forward(&self.context(&seq));
            let next = if temperature <= 0.0 {
                argmax(&step.log_probs)
            } else {
                sample_nucleus(&step.log_probs, temperature, top_p, rng)
            };
            if next == EOS {
                break;
            }
            out.push(next);
            seq.push(next);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let file = ModelFile {
            format: FORMAT.into(),
            version: FORMAT_VERSION,
            config: self.config,
            tensors: self
                .layout
                .tensors(&self.config)
                .into_iter()
                .map(|(name, range, shape)| TensorDump {
                    name: name.into(),
                    shape,
                    data: self.params[range].to_vec(),
                })
                .collect(),
        };
        let text = serde_json::to_string(&file).map_err(|e| TrainError::ModelFile(e.to_string()))?;
        fs::write(path, text).map_err(|e| TrainError::ModelFile(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).map_err(|e| TrainError::ModelFile(format!("{}: {e}", path.display())))?;
        let file: ModelFile = serde_json::from_str(&text).map_err(|e| TrainError::ModelFile(e.to_string()))?;
        if file.format != FORMAT || file.version != FORMAT_VERSION {
            return Err(TrainError::ModelFile(format!(
                "unsupported model format {} v{}",
                file.format, file.version
            )));
        }
        file.config.validate()?;
        let layout = Layout::new(&file.config);
        let mut params = vec![0.0; layout.len()];
        let expected = layout.tensors(&file.config);
        if file.tensors.len() != expected.len() {
            return Err(TrainError::ModelFile(format!("expected {} tensors", expected.len())));
        }
        for (dump, (name, range, shape)) in file.tensors.iter().zip(expected) {
            if dump.name != name || dump.shape != shape || dump.data.len() != range.len() {
                return Err(TrainError::ModelFile(format!(
                    "tensor {} has shape {:?} / {} values, expected {name} {shape:?}",
                    dump.name,
                    dump.shape,
                    dump.data.len()
                )));
            }
            params[range].copy_from_slice(&dump.data);
        }
        Ok(Self {
            config: file.config,
            layout,
            params,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorDump>,
}

#[derive(Serialize, Deserialize)]
struct TensorDump {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    for l in logits.iter_mut() {
        *l -= lse;
    }
}

/// Index of the largest value; the lowest index wins ties.
fn argmax(values: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best as u32
}

fn sample_nucleus<R: Rng>(log_probs: &[f64], temperature: f64, top_p: f64, rng: &mut R) -> u32 {
    let mut scaled: Vec<f64> = log_probs.iter().map(|l| l / temperature).collect();
    log_softmax_in_place(&mut scaled);
    let mut order: Vec<(usize, f64)> = scaled.iter().map(|l| l.exp()).enumerate().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut mass = 0.0;
    let mut keep = 0;
    for (_, p) in &order {
        mass += p;
        keep += 1;
        if mass >= top_p {
            break;
        }
    }
    let nucleus = &order[..keep];
    let mut draw = rng.gen::<f64>() * mass;
    for &(tok, p) in nucleus {
        if draw < p {
            return tok as u32;
        }
        draw -= p;
    }
    nucleus[keep - 1].0 as u32
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            context_window: 3,
            embedding_dim: 4,
            hidden_dim: 5,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn distributions_are_normalized() {
        let model = ToyLm::new(small()).unwrap();
        for prefix in [&[][..], &[BOS, 97, 98][..], &[1, 2, 3, 4, 5, 6][..]] {
            let probs = model.next_token_probs(prefix);
            assert!(probs.iter().all(|&p| p > 0.0));
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn init_is_a_function_of_the_seed() {
        let a = ToyLm::new(small()).unwrap();
        let b = ToyLm::new(small()).unwrap();
        let c = ToyLm::new(ModelConfig { seed: 12, ..small() }).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn context_pads_with_bos() {
        let model = ToyLm::new(small()).unwrap();
        assert_eq!(model.context(&[7]), vec![BOS, BOS, 7]);
        assert_eq!(model.context(&[1, 2, 3, 4]), vec![2, 3, 4]);
    }

    #[test]
    fn save_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let model = ToyLm::new(small()).unwrap();
        model.save(&path).unwrap();
        let back = ToyLm::load(&path).unwrap();
        assert_eq!(
            model.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>(),
            back.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(back.config(), model.config());
    }

    #[test]
    fn greedy_generation_is_deterministic() {
        let model = ToyLm::new(small()).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(0);
        let mut r2 = ChaCha8Rng::seed_from_u64(99);
        assert_eq!(
            model.generate(&[BOS, 97], 20, 0.0, 1.0, &mut r1),
            model.generate(&[BOS, 97], 20, 0.0, 1.0, &mut r2)
        );
    }

    #[test]
    fn nucleus_with_tiny_top_p_is_greedy() {
        let lp = vec![(0.1f64).ln(), (0.7f64).ln(), (0.2f64).ln()];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            assert_eq!(sample_nucleus(&lp, 1.0, 1e-6, &mut rng), 1);
        }
    }
}
