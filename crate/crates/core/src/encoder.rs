//! Token representations and the stacked BiLSTM contextualizer.
//!
//! Each position is `[word embedding; CharEnc(chars); UPOS embedding]`, where
//! CharEnc concatenates the final forward and final backward states of a
//! character-level BiLSTM. Position 0 is the root, built from the reserved
//! indices like any other row.
//!
//! LSTM cell (gate order i, f, g, o):
//!
//! ```text
//! [i f g o] = x_t W_ih + h_{t-1} W_hh + b
//! c_t = σ(f) ⊙ c_{t-1} + σ(i) ⊙ tanh(g)
//! h_t = σ(o) ⊙ tanh(c_t)
//! ```

use rand::Rng;

use crate::autodiff::{AutodiffError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::model::{Mode, ModelDims};
use crate::vocab::EncodedSentence;

/// Weights of one LSTM direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BiLstmParams {
    pub forward: LstmParams,
    pub backward: LstmParams,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderParams {
    pub word_emb: ParamId,
    pub char_emb: ParamId,
    pub char_rnn: BiLstmParams,
    pub feat_emb: ParamId,
    pub layers: Vec<BiLstmParams>,
}

pub(crate) fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::from_vec(shape, data).expect("shape product matches")
}

/// Embedding rows are drawn from U[-0.1, 0.1].
pub const EMBEDDING_INIT: f64 = 0.1;

fn init_lstm<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> LstmParams {
    let w_ih = store.add(format!("{}.w_ih", name), uniform(&[input, 4 * hidden], 1.0 / (input as f64).sqrt(), rng));
    let w_hh = store.add(format!("{}.w_hh", name), uniform(&[hidden, 4 * hidden], 1.0 / (hidden as f64).sqrt(), rng));
    let mut b = Tensor::zeros(&[4 * hidden]);
    b.data_mut()[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
    let bias = store.add(format!("{}.bias", name), b);
    LstmParams { w_ih, w_hh, bias }
}

fn init_bilstm<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> BiLstmParams {
    BiLstmParams {
        forward: init_lstm(store, &format!("{}.fwd", name), input, hidden, rng),
        backward: init_lstm(store, &format!("{}.bwd", name), input, hidden, rng),
    }
}

/// Vocabulary table sizes the embeddings are shaped by.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TableSizes {
    pub words: usize,
    pub chars: usize,
    pub upos: usize,
}

impl EncoderParams {
    pub fn init<R: Rng>(store: &mut ParamStore, dims: &ModelDims, sizes: TableSizes, rng: &mut R) -> Self {
        let word_emb = store.add("enc.word_emb", uniform(&[sizes.words, dims.word_dim], EMBEDDING_INIT, rng));
        let char_emb = store.add("enc.char_emb", uniform(&[sizes.chars, dims.char_dim], EMBEDDING_INIT, rng));
        let char_rnn = init_bilstm(store, "enc.char_rnn", dims.char_dim, dims.char_hidden, rng);
        let feat_emb = store.add("enc.feat_emb", uniform(&[sizes.upos, dims.feat_dim], EMBEDDING_INIT, rng));
        let layers = (0..dims.lstm_layers)
            .map(|l| {
                let input = if l == 0 { dims.input_width() } else { 2 * dims.lstm_hidden };
                init_bilstm(store, &format!("enc.lstm{}", l), input, dims.lstm_hidden, rng)
            })
            .collect();
        EncoderParams { word_emb, char_emb, char_rnn, feat_emb, layers }
    }

    /// Every parameter owned by the encoder.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.word_emb, self.char_emb, self.feat_emb];
        for bi in std::iter::once(&self.char_rnn).chain(&self.layers) {
            for d in [bi.forward, bi.backward] {
                ids.extend([d.w_ih, d.w_hh, d.bias]);
            }
        }
        ids
    }
}

fn run_lstm(tape: &mut Tape, p: &LstmParams, input: Var, reverse: bool) -> Result<Var, AutodiffError> {
    let (wi, wh, b) = (tape.param(p.w_ih), tape.param(p.w_hh), tape.param(p.bias));
    tape.lstm(input, wi, wh, b, reverse)
}

/// Forward and backward passes concatenated column-wise.
pub fn bilstm(tape: &mut Tape, p: &BiLstmParams, input: Var) -> Result<Var, AutodiffError> {
    let f = run_lstm(tape, &p.forward, input, false)?;
    let b = run_lstm(tape, &p.backward, input, true)?;
    tape.concat_cols(&[f, b])
}

/// CharEnc for one token: `[h_fwd(last); h_bwd(first)]`, shape 1×2·d_ch.
pub fn char_encode(tape: &mut Tape, p: &EncoderParams, char_ids: &[usize]) -> Result<Var, AutodiffError> {
    let table = tape.param(p.char_emb);
    let chars = tape.embedding_lookup(table, char_ids)?;
    let f = run_lstm(tape, &p.char_rnn.forward, chars, false)?;
    let b = run_lstm(tape, &p.char_rnn.backward, chars, true)?;
    let last = tape.slice_rows(f, char_ids.len() - 1, char_ids.len())?;
    let first = tape.slice_rows(b, 0, 1)?;
    tape.concat_cols(&[last, first])
}

/// Input representations, (n+1) × (d_w + 2·d_ch + d_f). With `d_f = 0` the
/// UPOS column is ignored.
pub fn embed_tokens(tape: &mut Tape, p: &EncoderParams, es: &EncodedSentence, mode: &mut Mode) -> Result<Var, AutodiffError> {
    let words = tape.param(p.word_emb);
    let words = tape.embedding_lookup(words, &es.word_ids)?;
    let words = mode.dropout(tape, words);

    let mut char_rows = Vec::with_capacity(es.char_ids.len());
    for ids in &es.char_ids {
        char_rows.push(char_encode(tape, p, ids)?);
    }
    let chars = tape.concat_rows(&char_rows)?;
    let chars = mode.dropout(tape, chars);

    if tape.store().value(p.feat_emb).cols() == 0 {
        return tape.concat_cols(&[words, chars]);
    }
    let feats = tape.param(p.feat_emb);
    let feats = tape.embedding_lookup(feats, &es.feat_ids)?;
    let feats = mode.dropout(tape, feats);

    tape.concat_cols(&[words, chars, feats])
}

/// Stacked BiLSTM over `x`, (n+1) × 2·d_h.
pub fn contextualize(tape: &mut Tape, p: &EncoderParams, x: Var, mode: &mut Mode) -> Result<Var, AutodiffError> {
    let expected = tape.store().value(p.layers[0].forward.w_ih).rows();
    let width = tape.value(x).cols();
    if width != expected {
        return Err(AutodiffError::Dimension { op: "contextualize", lhs: tape.value(x).shape().to_vec(), rhs: vec![expected] });
    }
    let mut h = x;
    for (l, layer) in p.layers.iter().enumerate() {
        if l > 0 {
            h = mode.dropout(tape, h);
        }
        h = bilstm(tape, layer, h)?;
    }
    Ok(h)
}
