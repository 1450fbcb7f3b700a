use rrtf_core::tokenizer::{prompt_tokens, response_tokens, TokenSequence, BOS};
use rrtf_core::trainer::{
    ft_loss, log_prob_length_normalized, rank_loss, total_loss_encoded, train_encoded, EncodedTriple, ModelConfig,
    TrainConfig, ToyLm,
};

fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        context_window: 3,
        embedding_dim: 4,
        hidden_dim: 5,
        seed,
        ..ModelConfig::default()
    }
}

/// Straight-line re-derivation of the forward pass from the flat parameter
/// vector, one token at a time.
fn oracle_log_prob(model: &ToyLm, x: &[u32], y: &[u32]) -> f64 {
    let c = model.config();
    let l = model.layout();
    let p = model.params();
    let (w, d, h, v) = (c.context_window, c.embedding_dim, c.hidden_dim, c.vocab_size);
    let mut seq: Vec<u32> = x.to_vec();
    let mut total = 0.0;
    for &target in y {
        let mut ctx = Vec::new();
        for i in 0..w {
            let pos = seq.len() as isize - w as isize + i as isize;
            ctx.push(if pos < 0 { BOS } else { seq[pos as usize] });
        }
        let mut input = Vec::new();
        for &t in &ctx {
            for k in 0..d {
                input.push(p[l.embedding.start + t as usize * d + k]);
            }
        }
        let mut hidden = vec![0.0; h];
        for (j, hj) in hidden.iter_mut().enumerate() {
            let mut s = p[l.hidden_bias.start + j];
            for (i, xi) in input.iter().enumerate() {
                s += p[l.hidden_weight.start + j * w * d + i] * xi;
            }
            *hj = s.tanh();
        }
        let mut logits = vec![0.0; v];
        for (o, lo) in logits.iter_mut().enumerate() {
            let mut s = p[l.output_bias.start + o];
            for (j, hj) in hidden.iter().enumerate() {
                s += p[l.output_weight.start + o * h + j] * hj;
            }
            *lo = s;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|s| (s - max).exp()).sum();
        total += logits[target as usize] - max - z.ln();
        seq.push(target);
    }
    total
}

fn triple(prompt: &str, tea: &str, stu: &str, r_tea: f64, r_stu: f64) -> EncodedTriple {
    EncodedTriple {
        x: prompt_tokens(prompt),
        y_tea: response_tokens(tea),
        y_stu: response_tokens(stu),
        r_tea,
        r_stu,
    }
}

#[test]
fn forward_matches_stepwise_oracle() {
    for seed in 0..4 {
        let model = ToyLm::new(small_config(seed)).unwrap();
        let x = prompt_tokens("\"\"\"\nadd\n\"\"\"\ndef f(a):");
        let y = response_tokens("\n    return a + 1");
        let got = model.sequence_log_prob(x.as_slice(), y.as_slice());
        let want = oracle_log_prob(&model, x.as_slice(), y.as_slice());
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
}

#[test]
fn hand_evaluated_losses() {
    let cases = [
        (-1.0, -2.0, 3.0, 1.0, 0.0),
        (-2.0, -1.0, 3.0, 1.0, 2.0),
        (-2.0, -1.0, 3.5, 1.0, 2.5),
        (-0.5, -0.5, 2.0, 0.0, 0.0),
        (-3.25, -0.25, 1.5, 1.0, 1.5),
        (-4.0, -3.0, 2.0, 1.5, 0.5),
    ];
    for (p_tea, p_stu, r_tea, r_stu, want) in cases {
        let got = rank_loss(p_tea, p_stu, r_tea, r_stu).unwrap();
        assert!((got - want).abs() < 1e-12, "{p_tea} {p_stu} {r_tea} {r_stu}: {got}");
    }
    assert!(rank_loss(-1.0, -2.0, 1.0, 1.0).is_err());

    let mut model = ToyLm::new(small_config(7)).unwrap();
    model.zero_output_layer();
    let ln_v = (model.vocab_size() as f64).ln();
    let x = prompt_tokens("q");
    for text in ["a", "abc", "return x"] {
        let y = response_tokens(text);
        let p = log_prob_length_normalized(&model, &x, &y).unwrap();
        assert!((p + ln_v).abs() < 1e-12);
        let ft = ft_loss(&model, &x, &y).unwrap();
        assert!((ft - y.len() as f64 * ln_v).abs() < 1e-10);
    }

    let model = ToyLm::new(small_config(3)).unwrap();
    let y = response_tokens("return a");
    let p = log_prob_length_normalized(&model, &x, &y).unwrap();
    let ft = ft_loss(&model, &x, &y).unwrap();
    assert!((ft + y.len() as f64 * p).abs() < 1e-10);
}

fn loss_at(t: &EncodedTriple, model: &ToyLm) -> f64 {
    total_loss_encoded(t, model, 1.0, 1.0).unwrap().0.total
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let t = triple("\"\"\"\nsum\n\"\"\"\ndef f(a, b):", "\n    return a + b", "\n    return a", 3.5, 2.0);
    let step = 1e-5;
    let (mut checked, mut active, mut inactive) = (0, 0, 0);
    for seed in 0..12u64 {
        let mut model = ToyLm::new(small_config(seed)).unwrap();
        // Widen the output layer so the two responses' probabilities differ
        // by more than the probe step in either direction.
        let range = model.layout().output_weight.clone();
        for w in &mut model.params_mut()[range] {
            *w *= 4.0;
        }
        let (loss, grad) = total_loss_encoded(&t, &model, 1.0, 1.0).unwrap();
        if (loss.p_stu - loss.p_tea).abs() < 1e-4 {
            continue;
        }
        if loss.p_stu > loss.p_tea {
            active += 1;
        } else {
            inactive += 1;
        }
        let mut worst: f64 = 0.0;
        for i in 0..model.params().len() {
            let orig = model.params()[i];
            model.params_mut()[i] = orig + step;
            let up = loss_at(&t, &model);
            model.params_mut()[i] = orig - step;
            let down = loss_at(&t, &model);
            model.params_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            // Central differences on a loss near 100 carry a few 1e-9 of
            // rounding noise, so coordinates below 1e-4 are compared on that
            // scale instead of their own.
            let denom = grad[i].abs().max(numeric.abs()).max(1e-4);
            worst = worst.max((grad[i] - numeric).abs() / denom);
        }
        assert!(worst < 1e-4, "seed {seed}: max relative error {worst}");
        checked += 1;
    }
    assert!(checked >= 5, "only {checked} usable points");
    assert!(active > 0 && inactive > 0, "active {active}, inactive {inactive}");
}

fn fixture_triples() -> Vec<EncodedTriple> {
    (0..6)
        .map(|i| {
            triple(
                &format!("\"\"\"\nReturn x plus {i}.\n\"\"\"\ndef f(x):"),
                &format!("\n    return x + {i}"),
                "\n    return x +",
                3.5,
                0.0,
            )
        })
        .collect()
}

fn train_in_pool(threads: usize, config: &TrainConfig) -> ToyLm {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| train_encoded(&fixture_triples(), ToyLm::new(small_config(11)).unwrap(), config).unwrap().0)
}

#[test]
fn training_is_deterministic_across_thread_counts() {
    let config = TrainConfig {
        epochs: 3,
        batch_size: 4,
        learning_rate: 0.1,
        seed: 5,
        ..TrainConfig::default()
    };
    let a = train_in_pool(1, &config);
    let b = train_in_pool(4, &config);
    assert!(a.params().iter().zip(b.params()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let again = train_in_pool(1, &config);
    assert_eq!(a, again);
}

#[test]
fn small_step_descends() {
    let triples = fixture_triples();
    let model = ToyLm::new(small_config(2)).unwrap();
    let before: f64 = triples.iter().map(|t| loss_at(t, &model)).sum();
    let config = TrainConfig {
        epochs: 1,
        batch_size: triples.len(),
        learning_rate: 1e-4,
        ..TrainConfig::default()
    };
    let (trained, _) = train_encoded(&triples, model, &config).unwrap();
    let after: f64 = triples.iter().map(|t| loss_at(t, &trained)).sum();
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let model = ToyLm::new(small_config(2)).unwrap();
    let config = TrainConfig {
        epochs: 2,
        learning_rate: 0.0,
        ..TrainConfig::default()
    };
    let (trained, trace) = train_encoded(&fixture_triples(), model.clone(), &config).unwrap();
    assert_eq!(trained, model);
    assert_eq!(trace.len(), 2);
    assert!((trace[0].mean_total - trace[1].mean_total).abs() < 1e-12 * trace[0].mean_total);
}

#[test]
fn trained_model_survives_save_and_load() {
    let config = TrainConfig {
        epochs: 2,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let (model, _) = train_encoded(&fixture_triples(), ToyLm::new(small_config(4)).unwrap(), &config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    model.save(&path).unwrap();
    let loaded = ToyLm::load(&path).unwrap();
    assert_eq!(loaded, model);
    let x = TokenSequence(vec![BOS, 100, 101]);
    assert_eq!(loaded.next_token_probs(x.as_slice()), model.next_token_probs(x.as_slice()));
}
