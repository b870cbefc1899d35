use indexmap::IndexSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{char_ids, EsimConfig, EsimError, CHAR_ALPHABET_SIZE};
use crate::corpus::Vocabulary;
use crate::embed::EmbeddingTable;
use crate::tensor::{bilstm, glorot, LstmParams, LstmVars, Real, Tape, Tensor, TensorError, Var};

/// Every learnable (or fixed) tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct EsimParams<T> {
    /// `[vocab, word_dim]`; rows 0 (pad) and 1 (unknown) are zero.
    pub word_emb: Tensor<T>,
    pub char_fwd: LstmParams<T>,
    pub char_bwd: LstmParams<T>,
    pub ctx_fwd: LstmParams<T>,
    pub ctx_bwd: LstmParams<T>,
    pub agg_fwd: LstmParams<T>,
    pub agg_bwd: LstmParams<T>,
    /// `[mlp_hidden, 8*ctx_hidden]`
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    /// `[1, mlp_hidden]`
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

const LSTM_NAMES: [&str; 6] = ["char_fwd", "char_bwd", "ctx_fwd", "ctx_bwd", "agg_fwd", "agg_bwd"];

impl<T: Real> EsimParams<T> {
    /// All-zero parameters with the shapes implied by `cfg` and the vocabulary size.
    pub fn zeros(cfg: &EsimConfig, vocab_size: usize) -> Self {
        let (ch, h) = (cfg.char_hidden, cfg.ctx_hidden);
        EsimParams {
            word_emb: Tensor::zeros(&[vocab_size, cfg.word_dim]),
            char_fwd: LstmParams::zeros(CHAR_ALPHABET_SIZE, ch),
            char_bwd: LstmParams::zeros(CHAR_ALPHABET_SIZE, ch),
            ctx_fwd: LstmParams::zeros(cfg.token_dim(), h),
            ctx_bwd: LstmParams::zeros(cfg.token_dim(), h),
            agg_fwd: LstmParams::zeros(8 * h, h),
            agg_bwd: LstmParams::zeros(8 * h, h),
            w1: Tensor::zeros(&[cfg.mlp_hidden, cfg.pooled_dim()]),
            b1: Tensor::zeros(&[cfg.mlp_hidden]),
            w2: Tensor::zeros(&[1, cfg.mlp_hidden]),
            b2: Tensor::zeros(&[1]),
        }
    }

    /// Random weights around the given word-embedding matrix.
    pub fn init<R: Rng>(cfg: &EsimConfig, word_emb: Tensor<T>, rng: &mut R) -> Result<Self, EsimError> {
        cfg.validate()?;
        let ws = word_emb.shape();
        if ws.len() != 2 || ws[1] != cfg.word_dim || ws[0] < 2 {
            return Err(EsimError::Config(format!(
                "word embedding matrix has shape {ws:?}, expected [vocab >= 2, {}]",
                cfg.word_dim
            )));
        }
        let (ch, h) = (cfg.char_hidden, cfg.ctx_hidden);
        let mut p = EsimParams {
            char_fwd: LstmParams::init(CHAR_ALPHABET_SIZE, ch, rng),
            char_bwd: LstmParams::init(CHAR_ALPHABET_SIZE, ch, rng),
            ctx_fwd: LstmParams::init(cfg.token_dim(), h, rng),
            ctx_bwd: LstmParams::init(cfg.token_dim(), h, rng),
            agg_fwd: LstmParams::init(8 * h, h, rng),
            agg_bwd: LstmParams::init(8 * h, h, rng),
            ..Self::zeros(cfg, 2)
        };
        p.word_emb = word_emb;
        glorot(&mut p.w1, rng);
        glorot(&mut p.w2, rng);
        Ok(p)
    }

    fn lstms(&self) -> [&LstmParams<T>; 6] {
        [&self.char_fwd, &self.char_bwd, &self.ctx_fwd, &self.ctx_bwd, &self.agg_fwd, &self.agg_bwd]
    }

    /// Named tensors in a fixed order (the checkpoint and optimizer order).
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("word_emb".to_string(), &self.word_emb)];
        for (name, l) in LSTM_NAMES.iter().zip(self.lstms()) {
            out.push((format!("{name}.w_ih"), &l.w_ih));
            out.push((format!("{name}.w_hh"), &l.w_hh));
            out.push((format!("{name}.bias"), &l.bias));
        }
        out.push(("w1".into(), &self.w1));
        out.push(("b1".into(), &self.b1));
        out.push(("w2".into(), &self.w2));
        out.push(("b2".into(), &self.b2));
        out
    }

    /// Same order as [`EsimParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let EsimParams { word_emb, char_fwd, char_bwd, ctx_fwd, ctx_bwd, agg_fwd, agg_bwd, w1, b1, w2, b2 } = self;
        let mut out = vec![word_emb];
        for l in [char_fwd, char_bwd, ctx_fwd, ctx_bwd, agg_fwd, agg_bwd] {
            let LstmParams { w_ih, w_hh, bias } = l;
            out.extend([w_ih, w_hh, bias]);
        }
        out.extend([w1, b1, w2, b2]);
        out
    }

    pub fn cast<U: Real>(&self) -> EsimParams<U> {
        EsimParams {
            word_emb: self.word_emb.cast(),
            char_fwd: self.char_fwd.cast(),
            char_bwd: self.char_bwd.cast(),
            ctx_fwd: self.ctx_fwd.cast(),
            ctx_bwd: self.ctx_bwd.cast(),
            agg_fwd: self.agg_fwd.cast(),
            agg_bwd: self.agg_bwd.cast(),
            w1: self.w1.cast(),
            b1: self.b1.cast(),
            w2: self.w2.cast(),
            b2: self.b2.cast(),
        }
    }

    /// Checks every tensor against the shapes `cfg` implies.
    pub fn check_shapes(&self, cfg: &EsimConfig) -> Result<(), EsimError> {
        let expected = Self::zeros(cfg, self.word_emb.shape().first().copied().unwrap_or(0));
        for ((name, got), (_, want)) in self.tensors().into_iter().zip(expected.tensors()) {
            if got.shape() != want.shape() {
                return Err(EsimError::Config(format!(
                    "parameter {name} has shape {:?}, config implies {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Word-embedding matrix aligned with `vocab`: row `i` is the table vector of
/// token `i`, or zeros when the table lacks it. Reserved rows are zero.
pub fn embedding_matrix(vocab: &Vocabulary, table: &EmbeddingTable) -> Tensor<f32> {
    let dim = table.dim();
    let mut m = Tensor::zeros(&[vocab.len(), dim]);
    let data = m.data_mut();
    for (i, tok) in vocab.tokens().enumerate() {
        if let Some(v) = table.get(tok) {
            let row = i + 2;
            data[row * dim..(row + 1) * dim].copy_from_slice(v);
        }
    }
    m
}

/// [`EsimParams`] placed on a tape.
#[derive(Debug, Clone, Copy)]
pub struct EsimVars {
    /// Present only when the embedding matrix is differentiated; otherwise
    /// rows are gathered directly from the parameter tensor.
    pub word_emb: Option<Var>,
    pub char_fwd: LstmVars,
    pub char_bwd: LstmVars,
    pub ctx_fwd: LstmVars,
    pub ctx_bwd: LstmVars,
    pub agg_fwd: LstmVars,
    pub agg_bwd: LstmVars,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl EsimVars {
    /// `trainable` marks the LSTM and MLP weights; `word_trainable` the embedding matrix.
    pub fn load<T: Real>(tape: &mut Tape<T>, p: &EsimParams<T>, trainable: bool, word_trainable: bool) -> Self {
        let word_emb = word_trainable.then(|| tape.param(p.word_emb.clone()));
        EsimVars {
            word_emb,
            char_fwd: LstmVars::load(tape, &p.char_fwd, trainable),
            char_bwd: LstmVars::load(tape, &p.char_bwd, trainable),
            ctx_fwd: LstmVars::load(tape, &p.ctx_fwd, trainable),
            ctx_bwd: LstmVars::load(tape, &p.ctx_bwd, trainable),
            agg_fwd: LstmVars::load(tape, &p.agg_fwd, trainable),
            agg_bwd: LstmVars::load(tape, &p.agg_bwd, trainable),
            w1: tape.leaf(p.w1.clone(), trainable),
            b1: tape.leaf(p.b1.clone(), trainable),
            w2: tape.leaf(p.w2.clone(), trainable),
            b2: tape.leaf(p.b2.clone(), trainable),
        }
    }

    /// Vars in [`EsimParams::tensors`] order; `None` for a word matrix kept off the tape.
    pub fn in_order(&self) -> Vec<Option<Var>> {
        let mut out = vec![self.word_emb];
        for l in [self.char_fwd, self.char_bwd, self.ctx_fwd, self.ctx_bwd, self.agg_fwd, self.agg_bwd] {
            out.extend([Some(l.w_ih), Some(l.w_hh), Some(l.bias)]);
        }
        out.extend([Some(self.w1), Some(self.b1), Some(self.w2), Some(self.b2)]);
        out
    }
}

/// One side of a padded batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Side {
    /// `[batch * len]` vocabulary ids, pad id 0 beyond each length.
    pub ids: Vec<usize>,
    /// `[batch * len]` 1-based index into the batch's distinct tokens; 0 at padding.
    pub token_index: Vec<usize>,
    pub lengths: Vec<usize>,
    pub len: usize,
}

/// Truncated, id-encoded (context, response) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub context: Side,
    pub response: Side,
    pub labels: Vec<f64>,
    /// Distinct token strings of the batch, in first-seen order.
    pub tokens: Vec<String>,
    pub token_chars: Vec<Vec<usize>>,
}

impl Batch {
    /// Keeps the last `max_context` context tokens and the first `max_response` response tokens.
    pub fn encode<'a, C, R>(
        items: impl IntoIterator<Item = (&'a C, &'a R, u8)>,
        vocab: &Vocabulary,
        cfg: &EsimConfig,
    ) -> Result<Batch, EsimError>
    where
        C: AsRef<[String]> + ?Sized + 'a,
        R: AsRef<[String]> + ?Sized + 'a,
    {
        let mut ctxs = Vec::new();
        let mut resps = Vec::new();
        let mut labels = Vec::new();
        for (index, (c, r, label)) in items.into_iter().enumerate() {
            let (c, r) = (c.as_ref(), r.as_ref());
            if c.is_empty() {
                return Err(EsimError::EmptySequence { index, side: "context" });
            }
            if r.is_empty() {
                return Err(EsimError::EmptySequence { index, side: "response" });
            }
            ctxs.push(&c[c.len().saturating_sub(cfg.max_context)..]);
            resps.push(&r[..r.len().min(cfg.max_response)]);
            labels.push(f64::from(label));
        }
        let mut distinct: IndexSet<&str> = IndexSet::new();
        let mut side = |seqs: &[&'a [String]]| {
            let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
            let mut ids = vec![0; seqs.len() * len];
            let mut token_index = vec![0; seqs.len() * len];
            for (b, s) in seqs.iter().enumerate() {
                for (t, tok) in s.iter().enumerate() {
                    ids[b * len + t] = vocab.id(tok) as usize;
                    token_index[b * len + t] = distinct.insert_full(tok.as_str()).0 + 1;
                }
            }
            Side { ids, token_index, lengths: seqs.iter().map(|s| s.len()).collect(), len }
        };
        let context = side(&ctxs);
        let response = side(&resps);
        let tokens: Vec<String> = distinct.iter().map(|s| s.to_string()).collect();
        let token_chars = tokens.iter().map(|t| char_ids(t, cfg.max_token_chars)).collect();
        Ok(Batch { size: labels.len(), context, response, labels, tokens, token_chars })
    }
}

/// Final char-BiLSTM states `[h_fwd(last); h_bwd(first)]` for each character
/// sequence, as `[tokens, 2*char_hidden]`.
pub fn char_compose_batch<T: Real>(
    tape: &mut Tape<T>,
    fwd: &LstmVars,
    bwd: &LstmVars,
    token_chars: &[Vec<usize>],
) -> Result<Var, EsimError> {
    let lc = token_chars.iter().map(Vec::len).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(token_chars.len() * lc);
    for chars in token_chars {
        ids.extend(chars);
        ids.extend(std::iter::repeat(0).take(lc - chars.len()));
    }
    let basis = tape.constant(Tensor::identity(CHAR_ALPHABET_SIZE));
    let onehot = tape.embedding_lookup(basis, &ids)?;
    let seq = tape.reshape(onehot, &[token_chars.len(), lc, CHAR_ALPHABET_SIZE])?;
    let lengths: Vec<usize> = token_chars.iter().map(Vec::len).collect();
    Ok(bilstm(tape, seq, &lengths, fwd, bwd)?.last_states)
}

/// Character-composed vector of a single token.
pub fn char_compose<T: Real>(params: &EsimParams<T>, token: &str, max_chars: usize) -> Result<Vec<T>, EsimError> {
    let mut tape = Tape::new();
    let fwd = LstmVars::load(&mut tape, &params.char_fwd, false);
    let bwd = LstmVars::load(&mut tape, &params.char_bwd, false);
    let out = char_compose_batch(&mut tape, &fwd, &bwd, &[char_ids(token, max_chars)])?;
    Ok(tape.value(out).data().to_vec())
}

/// Token representations `[batch, len, word_dim + 2*char_hidden]` for one side.
/// `char_table` holds a zero row followed by one char-composed row per distinct token.
pub fn represent<T: Real>(
    tape: &mut Tape<T>,
    params: &EsimParams<T>,
    vars: &EsimVars,
    char_table: Var,
    batch_size: usize,
    side: &Side,
) -> Result<Var, EsimError> {
    let word = match vars.word_emb {
        Some(table) => tape.embedding_lookup(table, &side.ids)?,
        None => {
            let (rows, dim) = (params.word_emb.shape()[0], params.word_emb.shape()[1]);
            let src = params.word_emb.data();
            let mut data = Vec::with_capacity(side.ids.len() * dim);
            for &id in &side.ids {
                if id >= rows {
                    return Err(TensorError::IndexOutOfRange { op: "represent", index: id, bound: rows }.into());
                }
                data.extend_from_slice(&src[id * dim..(id + 1) * dim]);
            }
            tape.constant(Tensor::new(vec![side.ids.len(), dim], data)?)
        }
    };
    let chars = tape.embedding_lookup(char_table, &side.token_index)?;
    let rep = tape.concat(&[word, chars], 1)?;
    let width = tape.shape(rep)[1];
    Ok(tape.reshape(rep, &[batch_size, side.len, width])?)
}

#[derive(Debug, Clone, Copy)]
pub struct Attention {
    /// `[batch, m, n]` raw alignment scores.
    pub e: Var,
    /// `[batch, m, n]`, softmax over response positions.
    pub weights_a: Var,
    /// `[batch, n, m]`, softmax over context positions.
    pub weights_b: Var,
    pub a_tilde: Var,
    pub b_tilde: Var,
}

fn check_lengths(op: &'static str, shape: &[usize], lengths: &[usize]) -> Result<(), EsimError> {
    if lengths.len() != shape[0] || lengths.iter().any(|&l| l == 0 || l > shape[1]) {
        return Err(TensorError::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: format!("lengths {lengths:?} must be in 1..={} per item", shape[1]),
        }
        .into());
    }
    Ok(())
}

/// `[batch, rows, cols]` mask, true where `col >= limit[batch]`.
fn column_mask(batch: usize, rows: usize, cols: usize, limit: &[usize]) -> Vec<bool> {
    let mut m = Vec::with_capacity(batch * rows * cols);
    for &l in limit.iter().take(batch) {
        for _ in 0..rows {
            m.extend((0..cols).map(|c| c >= l));
        }
    }
    m
}

/// Co-attention between `a_bar [batch, m, k]` and `b_bar [batch, n, k]`.
/// Padded positions get weight exactly zero.
pub fn attend<T: Real>(
    tape: &mut Tape<T>,
    a_bar: Var,
    b_bar: Var,
    len_a: &[usize],
    len_b: &[usize],
) -> Result<Attention, EsimError> {
    let (sa, sb) = (tape.shape(a_bar).to_vec(), tape.shape(b_bar).to_vec());
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
        return Err(TensorError::ShapeMismatch { op: "attend", left: sa, right: sb }.into());
    }
    check_lengths("attend", &sa, len_a)?;
    check_lengths("attend", &sb, len_b)?;
    let (batch, m, n) = (sa[0], sa[1], sb[1]);
    let e = tape.matmul(a_bar, b_bar, true)?;
    let masked = tape.mask_fill(e, &column_mask(batch, m, n, len_b), f64::NEG_INFINITY)?;
    let weights_a = tape.softmax(masked, 2)?;
    let a_tilde = tape.matmul(weights_a, b_bar, false)?;
    let et = tape.transpose(e)?;
    let masked = tape.mask_fill(et, &column_mask(batch, n, m, len_a), f64::NEG_INFINITY)?;
    let weights_b = tape.softmax(masked, 2)?;
    let b_tilde = tape.matmul(weights_b, a_bar, false)?;
    Ok(Attention { e, weights_a, weights_b, a_tilde, b_tilde })
}

/// `[x; x~; x - x~; x * x~]` along the last axis.
pub fn enrich<T: Real>(tape: &mut Tape<T>, x_bar: Var, x_tilde: Var) -> Result<Var, EsimError> {
    let (s, t) = (tape.shape(x_bar).to_vec(), tape.shape(x_tilde).to_vec());
    if s != t || s.is_empty() {
        return Err(TensorError::ShapeMismatch { op: "enrich", left: s, right: t }.into());
    }
    let diff = tape.sub(x_bar, x_tilde)?;
    let prod = tape.mul(x_bar, x_tilde)?;
    Ok(tape.concat(&[x_bar, x_tilde, diff, prod], s.len() - 1)?)
}

#[derive(Debug, Clone, Copy)]
pub struct Pooled {
    /// `[batch, 8*ctx_hidden]`
    pub v: Var,
    /// Aggregation outputs `[batch, len, 2*ctx_hidden]`, zero at padding.
    pub hidden_a: Var,
    pub hidden_b: Var,
}

fn masked_max<T: Real>(tape: &mut Tape<T>, states: Var, lengths: &[usize]) -> Result<Var, EsimError> {
    let s = tape.shape(states).to_vec();
    let mask = column_mask(s[0], 1, s[1], lengths);
    let mask: Vec<bool> = mask.into_iter().flat_map(|m| std::iter::repeat(m).take(s[2])).collect();
    let filled = tape.mask_fill(states, &mask, f64::NEG_INFINITY)?;
    Ok(tape.max_reduce(filled, 1)?.0)
}

/// Aggregation BiLSTM over both enriched sequences, then
/// `[max_a; max_b; last_a; last_b]` with maxima over valid positions only.
#[allow(clippy::too_many_arguments)]
pub fn aggregate_and_pool<T: Real>(
    tape: &mut Tape<T>,
    m_a: Var,
    m_b: Var,
    len_a: &[usize],
    len_b: &[usize],
    fwd: &LstmVars,
    bwd: &LstmVars,
) -> Result<Pooled, EsimError> {
    let agg_a = bilstm(tape, m_a, len_a, fwd, bwd)?;
    let agg_b = bilstm(tape, m_b, len_b, fwd, bwd)?;
    let max_a = masked_max(tape, agg_a.hidden_states, len_a)?;
    let max_b = masked_max(tape, agg_b.hidden_states, len_b)?;
    let v = tape.concat(&[max_a, max_b, agg_a.last_states, agg_b.last_states], 1)?;
    Ok(Pooled { v, hidden_a: agg_a.hidden_states, hidden_b: agg_b.hidden_states })
}

/// Logits `[batch, 1]` of `W2 relu(W1 v + b1) + b2`; the probability is their sigmoid.
pub fn predict<T: Real>(tape: &mut Tape<T>, v: Var, vars: &EsimVars) -> Result<Var, EsimError> {
    let h = tape.matmul(v, vars.w1, true)?;
    let h = tape.add(h, vars.b1)?;
    let h = tape.relu(h)?;
    let z = tape.matmul(h, vars.w2, true)?;
    Ok(tape.add(z, vars.b2)?)
}

/// Mean binary cross-entropy, evaluated from logits.
pub fn loss<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[f64]) -> Result<Var, EsimError> {
    Ok(tape.bce_with_logits(logits, labels)?)
}

#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub logits: Var,
    pub a_bar: Var,
    pub b_bar: Var,
    pub attention: Attention,
    pub pooled: Pooled,
}

/// The full network on one batch.
pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    params: &EsimParams<T>,
    vars: &EsimVars,
    batch: &Batch,
) -> Result<Forward, EsimError> {
    let composed = char_compose_batch(tape, &vars.char_fwd, &vars.char_bwd, &batch.token_chars)?;
    let width = tape.shape(composed)[1];
    let zero = tape.constant(Tensor::zeros(&[1, width]));
    let char_table = tape.concat(&[zero, composed], 0)?;

    let rep_a = represent(tape, params, vars, char_table, batch.size, &batch.context)?;
    let rep_b = represent(tape, params, vars, char_table, batch.size, &batch.response)?;
    let (la, lb) = (&batch.context.lengths, &batch.response.lengths);
    let a_bar = bilstm(tape, rep_a, la, &vars.ctx_fwd, &vars.ctx_bwd)?.hidden_states;
    let b_bar = bilstm(tape, rep_b, lb, &vars.ctx_fwd, &vars.ctx_bwd)?.hidden_states;

    let attention = attend(tape, a_bar, b_bar, la, lb)?;
    let m_a = enrich(tape, a_bar, attention.a_tilde)?;
    let m_b = enrich(tape, b_bar, attention.b_tilde)?;
    let pooled = aggregate_and_pool(tape, m_a, m_b, la, lb, &vars.agg_fwd, &vars.agg_bwd)?;
    let logits = predict(tape, pooled.v, vars)?;
    Ok(Forward { logits, a_bar, b_bar, attention, pooled })
}

/// Configuration, vocabulary and `f32` parameters of a trained or fresh model.
#[derive(Debug, Clone, PartialEq)]
pub struct EsimModel {
    pub config: EsimConfig,
    pub vocab: Vocabulary,
    pub params: EsimParams<f32>,
}

impl EsimModel {
    /// Fresh model whose word part comes from `table`, seeded by `config.seed`.
    pub fn new(config: EsimConfig, vocab: Vocabulary, table: &EmbeddingTable) -> Result<Self, EsimError> {
        config.validate()?;
        if table.dim() != config.word_dim {
            return Err(EsimError::Config(format!(
                "word_dim is {} but the embedding table has dim {}",
                config.word_dim,
                table.dim()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = EsimParams::init(&config, embedding_matrix(&vocab, table), &mut rng)?;
        Ok(EsimModel { config, vocab, params })
    }

    pub fn encode<'a, C, R>(&self, items: impl IntoIterator<Item = (&'a C, &'a R, u8)>) -> Result<Batch, EsimError>
    where
        C: AsRef<[String]> + ?Sized + 'a,
        R: AsRef<[String]> + ?Sized + 'a,
    {
        Batch::encode(items, &self.vocab, &self.config)
    }
}
