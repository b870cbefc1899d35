//! Skip-gram with negative sampling.
//!
//! Follows the reference word2vec recipe: frequent-word subsampling, a
//! randomly shrunk window per center word, negatives drawn from the unigram
//! distribution raised to 3/4, and a learning rate decaying linearly over all
//! epochs. Training is single threaded, so a fixed seed reproduces the output
//! bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EmbedError, EmbeddingTable, Provenance};
use crate::corpus::TokenCounts;

#[derive(Debug, Clone, PartialEq)]
pub struct Word2vecConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub min_count: u64,
    pub initial_lr: f32,
    /// Subsampling threshold; 0 disables subsampling.
    pub subsample: f64,
    pub seed: u64,
}

impl Default for Word2vecConfig {
    fn default() -> Self {
        Word2vecConfig {
            dim: 100,
            window: 5,
            negatives: 5,
            epochs: 5,
            min_count: 5,
            initial_lr: 0.025,
            subsample: 1e-3,
            seed: 0,
        }
    }
}

impl Word2vecConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        let bad = |what: &str| Err(EmbedError::InvalidConfig(what.to_string()));
        if self.dim == 0 {
            return Err(EmbedError::InvalidDim(0));
        }
        if self.window == 0 {
            return bad("window must be >= 1");
        }
        if self.negatives == 0 {
            return bad("negatives must be >= 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.min_count == 0 {
            return bad("min_count must be >= 1");
        }
        if !(self.initial_lr > 0.0) || !self.initial_lr.is_finite() {
            return bad("initial_lr must be > 0");
        }
        if !(self.subsample >= 0.0) {
            return bad("subsample must be >= 0");
        }
        Ok(())
    }
}

/// Cumulative unigram^0.75 weights, sampled by binary search.
struct NegativeSampler {
    cumulative: Vec<f64>,
}

impl NegativeSampler {
    fn new(counts: &[u64]) -> Self {
        let mut acc = 0.0;
        let cumulative = counts
            .iter()
            .map(|&c| {
                acc += (c as f64).powf(0.75);
                acc
            })
            .collect();
        NegativeSampler { cumulative }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let total = *self.cumulative.last().expect("non-empty vocabulary");
        let x = rng.gen::<f64>() * total;
        self.cumulative
            .partition_point(|&c| c <= x)
            .min(self.cumulative.len() - 1)
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Trains skip-gram vectors on `sentences`. The result holds exactly the
/// tokens seen at least `min_count` times, ordered by descending frequency.
pub fn train_word2vec(sentences: &[Vec<String>], config: &Word2vecConfig) -> Result<EmbeddingTable, EmbedError> {
    config.validate()?;
    if sentences.is_empty() {
        return Err(EmbedError::EmptyInput("no training sentences"));
    }
    let mut counts = TokenCounts::new();
    for s in sentences {
        counts.add_tokens(s);
    }
    let vocab = counts.into_vocabulary(config.min_count);
    let n_words = vocab.len() - 2;
    let dim = config.dim;
    let mut table = EmbeddingTable::new(dim, Provenance::Trained)?;
    if n_words == 0 {
        return Ok(table);
    }
    let word_counts: Vec<u64> = (2..vocab.len() as u32).map(|id| vocab.count(id)).collect();
    let total_words: u64 = word_counts.iter().sum();

    let keep_prob: Vec<f64> = word_counts
        .iter()
        .map(|&c| {
            if config.subsample <= 0.0 {
                return 1.0;
            }
            let threshold = config.subsample * total_words as f64;
            let f = c as f64;
            ((f / threshold).sqrt() + 1.0) * threshold / f
        })
        .collect();

    let encoded: Vec<Vec<usize>> = sentences
        .iter()
        .map(|s| {
            s.iter()
                .filter_map(|t| vocab.get(t).map(|id| id as usize - 2))
                .collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut input: Vec<f32> = (0..n_words * dim)
        .map(|_| (rng.gen::<f32>() - 0.5) / dim as f32)
        .collect();
    let mut output = vec![0f32; n_words * dim];
    let sampler = NegativeSampler::new(&word_counts);

    let total_steps = (config.epochs as u64 * total_words).max(1) as f64;
    let min_lr = config.initial_lr * 1e-4;
    let mut processed = 0u64;
    let mut grad_in = vec![0f32; dim];
    let mut kept = Vec::new();

    for _ in 0..config.epochs {
        for sentence in &encoded {
            kept.clear();
            kept.extend(
                sentence
                    .iter()
                    .copied()
                    .filter(|&w| keep_prob[w] >= 1.0 || rng.gen::<f64>() < keep_prob[w]),
            );
            let progress = processed as f64 / total_steps;
            let lr = (config.initial_lr - (config.initial_lr - min_lr) * progress as f32).max(min_lr);
            processed += sentence.len() as u64;

            for (pos, &center) in kept.iter().enumerate() {
                let reach = rng.gen_range(1..=config.window);
                let lo = pos.saturating_sub(reach);
                let hi = (pos + reach).min(kept.len() - 1);
                for ctx_pos in lo..=hi {
                    if ctx_pos == pos {
                        continue;
                    }
                    let context = kept[ctx_pos];
                    grad_in.iter_mut().for_each(|g| *g = 0.0);
                    let v_in = center * dim;
                    for d in 0..=config.negatives {
                        let (target, label) = if d == 0 {
                            (context, 1.0)
                        } else {
                            let t = sampler.sample(&mut rng);
                            if t == context {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let v_out = target * dim;
                        let dot: f32 = (0..dim).map(|k| input[v_in + k] * output[v_out + k]).sum();
                        let g = (label - sigmoid(dot)) * lr;
                        for k in 0..dim {
                            grad_in[k] += g * output[v_out + k];
                            output[v_out + k] += g * input[v_in + k];
                        }
                    }
                    for k in 0..dim {
                        input[v_in + k] += grad_in[k];
                    }
                }
            }
        }
    }

    for (i, token) in vocab.tokens().enumerate() {
        table.insert(token, &input[i * dim..(i + 1) * dim])?;
    }
    Ok(table)
}
