use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{forward, loss, EsimModel, EsimVars};
use super::score::score_groups;
use super::{EsimConfig, EsimError};
use crate::corpus::{DialogueExample, RankingGroup};
use crate::metrics;
use crate::tensor::{Tape, Tensor};

/// `initial_lr * decay_rate^(step / decay_steps)`, decayed continuously.
pub fn learning_rate(cfg: &EsimConfig, step: u64) -> f64 {
    cfg.initial_lr * cfg.lr_decay_rate.powf(step as f64 / cfg.lr_decay_steps as f64)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m, v }
    }

    /// One update; parameters whose gradient is `None` are left alone.
    pub fn step(&mut self, params: &mut [&mut Tensor<f32>], grads: &[Option<Tensor<f32>>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = f64::from(gi);
                *mi = (b1 * f64::from(*mi) + (1.0 - b1) * gi) as f32;
                *vi = (b2 * f64::from(*vi) + (1.0 - b2) * gi * gi) as f32;
                let mhat = f64::from(*mi) / c1;
                let vhat = f64::from(*vi) / c2;
                *x = (f64::from(*x) - lr * mhat / (vhat.sqrt() + self.eps)) as f32;
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Stop after this many optimizer steps.
    pub max_steps: Option<u64>,
    /// Emit a loss line every this many steps; 0 logs only at validation points.
    pub log_every: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogLine {
    pub step: u64,
    pub lr: f64,
    /// Mean training loss since the previous line.
    pub loss: f64,
    pub valid_r_at_1: Option<f64>,
}

impl fmt::Display for TrainLogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step={} lr={:.6e} loss={:.6}", self.step, self.lr, self.loss)?;
        match self.valid_r_at_1 {
            Some(r) => write!(f, " valid_r@1={r:.4}"),
            None => write!(f, " valid_r@1=-"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best validation R@1 (the final ones without a validation set).
    pub best: EsimModel,
    pub best_valid_r_at_1: Option<f64>,
    pub last: EsimModel,
    pub log: Vec<TrainLogLine>,
    pub steps: u64,
}

struct Progress<'a> {
    log: Vec<TrainLogLine>,
    sink: &'a mut dyn FnMut(&TrainLogLine),
    loss_sum: f64,
    loss_n: u64,
}

impl Progress<'_> {
    fn emit(&mut self, step: u64, lr: f64, valid_r_at_1: Option<f64>) {
        let loss = if self.loss_n == 0 { f64::NAN } else { self.loss_sum / self.loss_n as f64 };
        let line = TrainLogLine { step, lr, loss, valid_r_at_1 };
        (self.sink)(&line);
        self.log.push(line);
        self.loss_sum = 0.0;
        self.loss_n = 0;
    }
}

fn global_norm(grads: &[Option<Tensor<f32>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt()
}

/// Loss and per-parameter gradients for one batch of training pairs.
fn batch_gradients(model: &EsimModel, examples: &[&DialogueExample]) -> Result<(f64, Vec<Option<Tensor<f32>>>), EsimError> {
    let batch = model.encode(examples.iter().map(|e| (&e.context, &e.response, e.label)))?;
    let mut tape = Tape::<f32>::new();
    let vars = EsimVars::load(&mut tape, &model.params, true, model.config.trainable_word_embeddings);
    let f = forward(&mut tape, &model.params, &vars, &batch)?;
    let l = loss(&mut tape, f.logits, &batch.labels)?;
    let value = f64::from(tape.value(l).data()[0]);
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let g = tape.backward(l)?;
    let mut grads: Vec<Option<Tensor<f32>>> = vars.in_order().into_iter().map(|v| v.map(|v| g.get_or_zero(v))).collect();
    if let Some(emb) = grads[0].as_mut() {
        // pad and unknown rows stay zero
        let dim = emb.shape()[1];
        emb.data_mut()[..2 * dim].iter_mut().for_each(|x| *x = 0.0);
    }
    Ok((value, grads))
}

fn valid_r_at_1(model: &EsimModel, valid: &[RankingGroup]) -> Result<Option<f64>, EsimError> {
    if valid.is_empty() {
        return Ok(None);
    }
    let scored = score_groups(model, valid)?;
    let report = metrics::evaluate(&scored, false).map_err(|e| EsimError::Config(e.to_string()))?;
    Ok(Some(report.r_at_1))
}

/// Trains `model` on `train_set` with Adam, shuffling every epoch, checking
/// validation R@1 twice per epoch and keeping the best parameters.
pub fn train(
    mut model: EsimModel,
    train_set: &[DialogueExample],
    valid: &[RankingGroup],
    opts: &TrainOptions,
    on_log: &mut dyn FnMut(&TrainLogLine),
) -> Result<TrainOutcome, EsimError> {
    if train_set.is_empty() {
        return Err(EsimError::EmptyTrainingSet);
    }
    let cfg = model.config.clone();
    cfg.validate()?;
    let mut adam = Adam::new(model.params.tensors().iter().map(|(_, t)| t.numel()));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let half = steps_per_epoch.div_ceil(2);

    let mut progress = Progress { log: Vec::new(), sink: on_log, loss_sum: 0.0, loss_n: 0 };
    let mut best: Option<(f64, EsimModel)> = None;
    let mut step = 0u64;
    let mut evaluated_at = None;

    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if opts.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let examples: Vec<&DialogueExample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let lr = learning_rate(&cfg, step);
            let (loss_value, mut grads) = batch_gradients(&model, &examples)?;
            let norm = global_norm(&grads);
            if !loss_value.is_finite() || !norm.is_finite() {
                return Err(EsimError::Diverged { step, loss: loss_value, lr, grad_norm: norm });
            }
            if let Some(clip) = cfg.grad_clip {
                if norm > clip {
                    let s = (clip / norm) as f32;
                    grads.iter_mut().flatten().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= s));
                }
            }
            adam.step(&mut model.params.tensors_mut(), &grads, lr);
            step += 1;
            progress.loss_sum += loss_value;
            progress.loss_n += 1;

            if bi + 1 == half || bi + 1 == steps_per_epoch {
                let r = valid_r_at_1(&model, valid)?;
                progress.emit(step, lr, r);
                evaluated_at = Some(step);
                if let Some(r) = r {
                    if best.as_ref().map_or(true, |(b, _)| r > *b) {
                        best = Some((r, model.clone()));
                    }
                }
            } else if opts.log_every > 0 && step % opts.log_every == 0 {
                progress.emit(step, lr, None);
            }
        }
    }
    if evaluated_at != Some(step) && step > 0 {
        let r = valid_r_at_1(&model, valid)?;
        progress.emit(step, learning_rate(&cfg, step.saturating_sub(1)), r);
        if let Some(r) = r {
            if best.as_ref().map_or(true, |(b, _)| r > *b) {
                best = Some((r, model.clone()));
            }
        }
    }
    let (best_valid_r_at_1, best_model) = match best {
        Some((r, m)) => (Some(r), m),
        None => (None, model.clone()),
    };
    Ok(TrainOutcome { best: best_model, best_valid_r_at_1, last: model, log: progress.log, steps: step })
}

#[cfg(test)]
mod tests {
    use super::super::model::tests::{tiny_config, tiny_model, toks};
    use super::*;
    use crate::corpus::Candidate;

    #[test]
    fn schedule_hits_decay_rate_at_decay_steps() {
        let cfg = EsimConfig::default();
        assert_eq!(learning_rate(&cfg, 0), 0.001);
        assert!((learning_rate(&cfg, 5000) - 0.001 * 0.96).abs() < 1e-18);
        assert!(learning_rate(&cfg, 2500) < 0.001 && learning_rate(&cfg, 2500) > 0.00096);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Tensor::new(vec![2], vec![1.0f32, -1.0]).unwrap();
        let mut adam = Adam::new([2]);
        let g = Some(Tensor::new(vec![2], vec![0.5f32, -3.0]).unwrap());
        adam.step(&mut [&mut p], &[g], 0.1);
        // bias-corrected first step is lr * sign(g)
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 0.9).abs() < 1e-6);
    }

    fn data() -> (Vec<DialogueExample>, Vec<RankingGroup>) {
        let pairs = [("hello there", "fine thanks", 1), ("how are you", "hello", 0), ("hello", "there", 1), ("you", "how", 0)];
        let train = pairs
            .iter()
            .map(|(c, r, l)| DialogueExample { context: toks(c), response: toks(r), label: *l })
            .collect();
        let valid = vec![RankingGroup {
            context: toks("hello there"),
            candidates: vec![
                Candidate { response: toks("fine thanks"), label: 1 },
                Candidate { response: toks("how"), label: 0 },
            ],
        }];
        (train, valid)
    }

    #[test]
    fn fixed_seed_training_is_bit_deterministic_and_keeps_embeddings() {
        let cfg = EsimConfig { epochs: 2, batch_size: 2, ..tiny_config() };
        let (train_set, valid) = data();
        let run = || train(tiny_model(cfg.clone()), &train_set, &valid, &TrainOptions::default(), &mut |_| {}).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.last.params, b.last.params);
        assert_eq!(a.log, b.log);
        // 2 steps per epoch: one validation line per half epoch
        assert_eq!(a.log.len(), 4);
        assert_eq!(a.steps, 4);
        let init = tiny_model(cfg.clone());
        assert_eq!(a.last.params.word_emb, init.params.word_emb);
        assert_ne!(a.last.params.w1, init.params.w1);
        assert!(a.best_valid_r_at_1.is_some());
    }

    #[test]
    fn trainable_embeddings_update_but_keep_reserved_rows() {
        let cfg = EsimConfig { epochs: 1, batch_size: 4, trainable_word_embeddings: true, ..tiny_config() };
        let (train_set, _) = data();
        let out = train(tiny_model(cfg.clone()), &train_set, &[], &TrainOptions::default(), &mut |_| {}).unwrap();
        let init = tiny_model(cfg);
        let (before, after) = (&init.params.word_emb, &out.last.params.word_emb);
        assert_ne!(before, after);
        assert!(after.data()[..2 * 4].iter().all(|&x| x == 0.0));
        assert!(out.best_valid_r_at_1.is_none());
    }

    #[test]
    fn max_steps_and_empty_input() {
        let cfg = EsimConfig { epochs: 5, batch_size: 1, ..tiny_config() };
        let (train_set, valid) = data();
        let mut lines = Vec::new();
        let out = train(tiny_model(cfg.clone()), &train_set, &valid, &TrainOptions { max_steps: Some(3), log_every: 1 }, &mut |l| lines.push(l.to_string())).unwrap();
        assert_eq!(out.steps, 3);
        assert!(lines.last().unwrap().contains("valid_r@1="));
        assert!(matches!(
            train(tiny_model(cfg), &[], &valid, &TrainOptions::default(), &mut |_| {}),
            Err(EsimError::EmptyTrainingSet)
        ));
    }

    #[test]
    fn huge_learning_rate_is_reported_as_divergence_or_stays_finite() {
        let cfg = EsimConfig { epochs: 3, batch_size: 2, initial_lr: 1e30, grad_clip: None, ..tiny_config() };
        let (train_set, _) = data();
        match train(tiny_model(cfg), &train_set, &[], &TrainOptions::default(), &mut |_| {}) {
            Err(EsimError::Diverged { .. }) => {}
            Err(e) => panic!("unexpected error {e}"),
            Ok(o) => assert!(o.log.iter().all(|l| l.loss.is_finite())),
        }
    }
}
