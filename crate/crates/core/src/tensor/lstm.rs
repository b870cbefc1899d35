use rand::Rng;

use super::{Real, Result, Tape, Tensor, TensorError, Var};

/// Weights of one LSTM direction. Gate blocks are stacked in the order
/// input, forget, candidate, output along the first axis of every tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams<T> {
    /// `[4*hidden, input]`
    pub w_ih: Tensor<T>,
    /// `[4*hidden, hidden]`
    pub w_hh: Tensor<T>,
    /// `[4*hidden]`
    pub bias: Tensor<T>,
}

impl<T: Real> LstmParams<T> {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmParams {
            w_ih: Tensor::zeros(&[4 * hidden, input]),
            w_hh: Tensor::zeros(&[4 * hidden, hidden]),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    /// Glorot-uniform weights, zero biases except the forget gate at 1.0.
    pub fn init<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(input, hidden);
        glorot(&mut p.w_ih, rng);
        glorot(&mut p.w_hh, rng);
        for b in &mut p.bias.data_mut()[hidden..2 * hidden] {
            *b = T::one();
        }
        p
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.shape()[1]
    }

    pub fn input(&self) -> usize {
        self.w_ih.shape()[1]
    }

    pub fn cast<U: Real>(&self) -> LstmParams<U> {
        LstmParams {
            w_ih: self.w_ih.cast(),
            w_hh: self.w_hh.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// Uniform(-r, r) with r = sqrt(6 / (fan_in + fan_out)) for a `[fan_out, fan_in]` matrix.
pub(crate) fn glorot<T: Real, R: Rng>(w: &mut Tensor<T>, rng: &mut R) {
    let (fan_out, fan_in) = (w.shape()[0], w.shape()[1]);
    let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for x in w.data_mut() {
        *x = T::lit(rng.gen_range(-r..r));
    }
}

/// [`LstmParams`] placed on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
    hidden: usize,
}

impl LstmVars {
    pub fn load<T: Real>(tape: &mut Tape<T>, params: &LstmParams<T>, trainable: bool) -> Self {
        LstmVars {
            w_ih: tape.leaf(params.w_ih.clone(), trainable),
            w_hh: tape.leaf(params.w_hh.clone(), trainable),
            bias: tape.leaf(params.bias.clone(), trainable),
            hidden: params.hidden(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }
}

/// Gate update given the already projected input `x W_ih^T`.
fn cell_from_projection<T: Real>(
    tape: &mut Tape<T>,
    x_proj: Var,
    h_prev: Var,
    c_prev: Var,
    p: &LstmVars,
) -> Result<(Var, Var)> {
    let h = p.hidden;
    let rec = tape.matmul(h_prev, p.w_hh, true)?;
    let pre = tape.add(x_proj, rec)?;
    let gates = tape.add(pre, p.bias)?;
    let i = tape.slice(gates, 1, 0, h)?;
    let f = tape.slice(gates, 1, h, h)?;
    let g = tape.slice(gates, 1, 2 * h, h)?;
    let o = tape.slice(gates, 1, 3 * h, h)?;
    let i = tape.sigmoid(i)?;
    let f = tape.sigmoid(f)?;
    let g = tape.tanh(g)?;
    let o = tape.sigmoid(o)?;
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c)?;
    let h_new = tape.mul(o, tc)?;
    Ok((h_new, c))
}

/// One LSTM step: `c = f*c_prev + i*g`, `h = o*tanh(c)`.
pub fn lstm_cell<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    p: &LstmVars,
) -> Result<(Var, Var)> {
    let hs = tape.shape(h_prev).to_vec();
    if hs.len() != 2 || hs[1] != p.hidden || tape.shape(c_prev) != hs.as_slice() {
        return Err(TensorError::ShapeMismatch {
            op: "lstm_cell",
            left: hs,
            right: tape.shape(c_prev).to_vec(),
        });
    }
    let x_proj = tape.matmul(x, p.w_ih, true)?;
    cell_from_projection(tape, x_proj, h_prev, c_prev, p)
}

#[derive(Debug, Clone, Copy)]
pub struct BiLstmOutput {
    /// `[batch, len, 2*hidden]`, zero at padded positions.
    pub hidden_states: Var,
    /// `[batch, 2*hidden]`: forward state at the last valid position joined with
    /// the backward state at the first position.
    pub last_states: Var,
}

/// Runs one direction over `[batch, len, in]`, left to right. Items shorter than
/// `len` carry their state unchanged through the padded tail.
fn run_direction<T: Real>(
    tape: &mut Tape<T>,
    seq: Var,
    lengths: &[usize],
    p: &LstmVars,
) -> Result<(Var, Var)> {
    let s = tape.shape(seq).to_vec();
    let (batch, len, input) = (s[0], s[1], s[2]);
    let hidden = p.hidden;
    let flat = tape.reshape(seq, &[batch * len, input])?;
    let proj = tape.matmul(flat, p.w_ih, true)?;
    let proj = tape.reshape(proj, &[batch, len, 4 * hidden])?;

    let mut h = tape.constant(Tensor::zeros(&[batch, hidden]));
    let mut c = tape.constant(Tensor::zeros(&[batch, hidden]));
    let mut outputs = Vec::with_capacity(len);
    for t in 0..len {
        let xt = tape.slice(proj, 1, t, 1)?;
        let xt = tape.reshape(xt, &[batch, 4 * hidden])?;
        let (h_new, c_new) = cell_from_projection(tape, xt, h, c, p)?;
        let valid: Vec<bool> = lengths.iter().map(|&l| t < l).collect();
        let out = if valid.iter().all(|&v| v) {
            h = h_new;
            c = c_new;
            h_new
        } else {
            h = tape.where_rows(&valid, h_new, h)?;
            c = tape.where_rows(&valid, c_new, c)?;
            let pad: Vec<bool> = valid
                .iter()
                .flat_map(|&v| std::iter::repeat(!v).take(hidden))
                .collect();
            tape.mask_fill(h_new, &pad, 0.0)?
        };
        outputs.push(tape.reshape(out, &[batch, 1, hidden])?);
    }
    let states = tape.concat(&outputs, 1)?;
    Ok((states, h))
}

/// Reverses each item of `[batch, len, width]` within its valid prefix; the
/// padded tail stays in place.
fn reverse_valid<T: Real>(tape: &mut Tape<T>, seq: Var, lengths: &[usize]) -> Result<Var> {
    let s = tape.shape(seq).to_vec();
    let (batch, len, width) = (s[0], s[1], s[2]);
    let mut perm = Vec::with_capacity(batch * len);
    for (b, &l) in lengths.iter().enumerate() {
        for t in 0..len {
            let src = if t < l { l - 1 - t } else { t };
            perm.push(b * len + src);
        }
    }
    let flat = tape.reshape(seq, &[batch * len, width])?;
    let rev = tape.embedding_lookup(flat, &perm)?;
    tape.reshape(rev, &[batch, len, width])
}

/// Bidirectional LSTM over a padded batch `[batch, len, in]`.
pub fn bilstm<T: Real>(
    tape: &mut Tape<T>,
    seq: Var,
    lengths: &[usize],
    fwd: &LstmVars,
    bwd: &LstmVars,
) -> Result<BiLstmOutput> {
    let s = tape.shape(seq).to_vec();
    if s.len() != 3 || lengths.len() != s[0] {
        return Err(TensorError::InvalidShape {
            op: "bilstm",
            shape: s,
            reason: format!("expected [batch, len, in] with {} lengths", lengths.len()),
        });
    }
    if let Some(&bad) = lengths.iter().find(|&&l| l == 0 || l > s[1]) {
        return Err(TensorError::InvalidShape {
            op: "bilstm",
            shape: s,
            reason: format!("item length {bad} outside 1..=len"),
        });
    }
    let (fwd_states, fwd_last) = run_direction(tape, seq, lengths, fwd)?;
    let reversed = reverse_valid(tape, seq, lengths)?;
    let (bwd_rev, bwd_last) = run_direction(tape, reversed, lengths, bwd)?;
    let bwd_states = reverse_valid(tape, bwd_rev, lengths)?;
    let hidden_states = tape.concat(&[fwd_states, bwd_states], 2)?;
    let last_states = tape.concat(&[fwd_last, bwd_last], 1)?;
    Ok(BiLstmOutput {
        hidden_states,
        last_states,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn zero_weights_give_zero_hidden_state() {
        let mut tape = Tape::<f64>::new();
        let p = LstmVars::load(&mut tape, &LstmParams::zeros(3, 2), false);
        let x = tape.constant(Tensor::full(&[1, 3], 5.0));
        let h0 = tape.constant(Tensor::zeros(&[1, 2]));
        let c0 = tape.constant(Tensor::zeros(&[1, 2]));
        let (h, _) = lstm_cell(&mut tape, x, h0, c0, &p).unwrap();
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cell_matches_scalar_hand_computation() {
        // hidden = 1, input = 1: every gate is a scalar affine map
        let w_ih = [0.5, -0.3, 0.8, 0.1];
        let w_hh = [0.2, 0.4, -0.6, 0.7];
        let bias = [0.0, 20.0, 0.1, -0.2];
        let params = LstmParams {
            w_ih: Tensor::new(vec![4, 1], w_ih.to_vec()).unwrap(),
            w_hh: Tensor::new(vec![4, 1], w_hh.to_vec()).unwrap(),
            bias: Tensor::new(vec![4], bias.to_vec()).unwrap(),
        };
        let (x, h_prev, c_prev) = (0.9, -0.4, 1.5);
        let pre = |k: usize| w_ih[k] * x + w_hh[k] * h_prev + bias[k];
        let (i, f, g, o) = (sig(pre(0)), sig(pre(1)), pre(2).tanh(), sig(pre(3)));
        let c_expected = f * c_prev + i * g;
        let h_expected = o * c_expected.tanh();

        let mut tape = Tape::<f64>::new();
        let p = LstmVars::load(&mut tape, &params, false);
        let xv = tape.constant(Tensor::new(vec![1, 1], vec![x]).unwrap());
        let hv = tape.constant(Tensor::new(vec![1, 1], vec![h_prev]).unwrap());
        let cv = tape.constant(Tensor::new(vec![1, 1], vec![c_prev]).unwrap());
        let (h, c) = lstm_cell(&mut tape, xv, hv, cv, &p).unwrap();
        assert!((tape.value(c).data()[0] - c_expected).abs() < 1e-12);
        assert!((tape.value(h).data()[0] - h_expected).abs() < 1e-12);
        // a saturated forget gate keeps the old cell and adds the write
        assert!((c_expected - (c_prev + i * g)).abs() < 1e-8);
    }

    #[test]
    fn single_step_sequence_hidden_equals_last() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::<f64>::new();
        let f = LstmVars::load(&mut tape, &LstmParams::init(3, 2, &mut rng), false);
        let b = LstmVars::load(&mut tape, &LstmParams::init(3, 2, &mut rng), false);
        let x = tape.constant(Tensor::from_fn(&[1, 1, 3], |i| i as f64 - 1.0));
        let out = bilstm(&mut tape, x, &[1], &f, &b).unwrap();
        assert_eq!(
            tape.value(out.hidden_states).data(),
            tape.value(out.last_states).data()
        );
    }

    #[test]
    fn padded_positions_are_zero_and_batch_matches_unbatched() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fp = LstmParams::<f64>::init(3, 2, &mut rng);
        let bp = LstmParams::<f64>::init(3, 2, &mut rng);
        let data = Tensor::from_fn(&[2, 3, 3], |i| ((i * 37) % 11) as f64 / 5.0 - 1.0);

        let mut tape = Tape::<f64>::new();
        let f = LstmVars::load(&mut tape, &fp, false);
        let b = LstmVars::load(&mut tape, &bp, false);
        let x = tape.constant(data.clone());
        let lengths = [1, 3];
        let out = bilstm(&mut tape, x, &lengths, &f, &b).unwrap();
        let hs = tape.value(out.hidden_states).clone();
        for t in 1..3 {
            for k in 0..4 {
                assert_eq!(hs.at(&[0, t, k]), 0.0);
            }
        }
        let last = tape.value(out.last_states).clone();

        for (item, &len) in lengths.iter().enumerate() {
            let mut t2 = Tape::<f64>::new();
            let f2 = LstmVars::load(&mut t2, &fp, false);
            let b2 = LstmVars::load(&mut t2, &bp, false);
            let single = Tensor::from_fn(&[1, len, 3], |i| data.at(&[item, i / 3, i % 3]));
            let xv = t2.constant(single);
            let o = bilstm(&mut t2, xv, &[len], &f2, &b2).unwrap();
            let h1 = t2.value(o.hidden_states);
            for t in 0..len {
                for k in 0..4 {
                    assert!((h1.at(&[0, t, k]) - hs.at(&[item, t, k])).abs() < 1e-6);
                }
            }
            for k in 0..4 {
                assert!((t2.value(o.last_states).at(&[0, k]) - last.at(&[item, k])).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_length_item_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let p = LstmVars::load(&mut tape, &LstmParams::zeros(2, 2), false);
        let x = tape.constant(Tensor::zeros(&[2, 3, 2]));
        assert!(bilstm(&mut tape, x, &[0, 2], &p, &p).is_err());
    }

    #[test]
    fn padded_inputs_do_not_change_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fp = LstmParams::<f64>::init(2, 3, &mut rng);
        let bp = LstmParams::<f64>::init(2, 3, &mut rng);
        let run = |pad_value: f64| {
            let mut tape = Tape::<f64>::new();
            let f = LstmVars::load(&mut tape, &fp, true);
            let b = LstmVars::load(&mut tape, &bp, true);
            let x = tape.constant(Tensor::from_fn(&[1, 4, 2], |i| {
                if i >= 4 { pad_value } else { i as f64 * 0.3 - 0.2 }
            }));
            let out = bilstm(&mut tape, x, &[2], &f, &b).unwrap();
            let s1 = tape.sum_all(out.hidden_states).unwrap();
            let s2 = tape.sum_all(out.last_states).unwrap();
            let s = tape.add(s1, s2).unwrap();
            let g = tape.backward(s).unwrap();
            (tape.value(s).data()[0], g.get_or_zero(f.w_ih), g.get_or_zero(b.w_hh))
        };
        assert_eq!(run(0.0), run(123.0));
    }
}
