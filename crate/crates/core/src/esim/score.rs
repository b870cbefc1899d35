use rayon::prelude::*;

use super::model::{forward, Batch, EsimModel, EsimVars};
use super::EsimError;
use crate::corpus::RankingGroup;
use crate::metrics::GroupScores;
use crate::tensor::Tape;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Probabilities for one encoded batch. Values are rounded to `f32` so that
/// averaging identical members reproduces them exactly.
pub(crate) fn batch_probabilities(model: &EsimModel, batch: &Batch) -> Result<Vec<f64>, EsimError> {
    let mut tape = Tape::<f32>::new();
    let vars = EsimVars::load(&mut tape, &model.params, false, false);
    let f = forward(&mut tape, &model.params, &vars, batch)?;
    Ok(tape
        .value(f.logits)
        .data()
        .iter()
        .map(|&z| f64::from(sigmoid(f64::from(z)) as f32))
        .collect())
}

/// P(y=1 | context, response) per pair, in input order. Batches are scored in parallel;
/// results do not depend on how pairs are grouped into batches.
pub fn score_pairs(model: &EsimModel, pairs: &[(&[String], &[String])]) -> Result<Vec<f64>, EsimError> {
    let chunks: Vec<Vec<f64>> = pairs
        .par_chunks(model.config.batch_size)
        .map(|chunk| {
            let batch = model.encode(chunk.iter().map(|&(c, r)| (c, r, 0u8)))?;
            batch_probabilities(model, &batch)
        })
        .collect::<Result<_, _>>()?;
    Ok(chunks.concat())
}

/// Candidate probabilities in candidate order.
pub fn score(model: &EsimModel, group: &RankingGroup) -> Result<Vec<f64>, EsimError> {
    let pairs: Vec<(&[String], &[String])> = group
        .candidates
        .iter()
        .map(|c| (group.context.as_slice(), c.response.as_slice()))
        .collect();
    score_pairs(model, &pairs)
}

pub fn score_groups(model: &EsimModel, groups: &[RankingGroup]) -> Result<Vec<GroupScores>, EsimError> {
    let pairs: Vec<(&[String], &[String])> = groups
        .iter()
        .flat_map(|g| g.candidates.iter().map(move |c| (g.context.as_slice(), c.response.as_slice())))
        .collect();
    let flat = score_pairs(model, &pairs)?;
    let mut out = Vec::with_capacity(groups.len());
    let mut at = 0;
    for g in groups {
        let n = g.candidates.len();
        out.push(GroupScores::new(g.labels(), flat[at..at + n].to_vec()));
        at += n;
    }
    Ok(out)
}

/// Mean of member values. Sorting first makes the result independent of member order.
fn mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

/// Arithmetic mean of the members' candidate probabilities.
pub fn ensemble_score(models: &[EsimModel], group: &RankingGroup) -> Result<Vec<f64>, EsimError> {
    Ok(ensemble_score_groups(models, std::slice::from_ref(group))?
        .pop()
        .map(|g| g.scores)
        .unwrap_or_default())
}

pub fn ensemble_score_groups(models: &[EsimModel], groups: &[RankingGroup]) -> Result<Vec<GroupScores>, EsimError> {
    if models.is_empty() {
        return Err(EsimError::EmptyEnsemble);
    }
    let members: Vec<Vec<GroupScores>> = models.iter().map(|m| score_groups(m, groups)).collect::<Result<_, _>>()?;
    let mut out = members[0].clone();
    let mut buf = Vec::with_capacity(models.len());
    for (gi, g) in out.iter_mut().enumerate() {
        for (ci, s) in g.scores.iter_mut().enumerate() {
            buf.clear();
            buf.extend(members.iter().map(|m| m[gi].scores[ci]));
            *s = mean(&mut buf);
        }
    }
    Ok(out)
}

/// Tokens ranked by the maximum component of their aggregation-layer output.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalStrength {
    pub context: Vec<(String, f64)>,
    pub response: Vec<(String, f64)>,
}

fn ranked(tokens: &[String], states: &[f32], width: usize) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let row = &states[i * width..(i + 1) * width];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            (t.clone(), f64::from(max))
        })
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1));
    out
}

/// Signal strength of each (truncated) context and response token; ties keep token order.
pub fn token_signal_strength(model: &EsimModel, context: &[String], response: &[String]) -> Result<SignalStrength, EsimError> {
    let batch = model.encode([(context, response, 0u8)])?;
    let mut tape = Tape::<f32>::new();
    let vars = EsimVars::load(&mut tape, &model.params, false, false);
    let f = forward(&mut tape, &model.params, &vars, &batch)?;
    let cfg = &model.config;
    let ctx = &context[context.len().saturating_sub(cfg.max_context)..];
    let resp = &response[..response.len().min(cfg.max_response)];
    let width = 2 * cfg.ctx_hidden;
    Ok(SignalStrength {
        context: ranked(ctx, tape.value(f.pooled.hidden_a).data(), width),
        response: ranked(resp, tape.value(f.pooled.hidden_b).data(), width),
    })
}
