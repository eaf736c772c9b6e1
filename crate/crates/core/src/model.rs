//! The full parser: encoder + biaffine scorers over one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AutodiffError, ParamId, ParamStore, Tape, Var};
use crate::conllu::{Sentence, Treebank};
use crate::decoder::{assign_labels, mst_decode, DecodeError, ParseTree};
use crate::encoder::{contextualize, embed_tokens, EncoderParams, TableSizes};
use crate::exec::Execution;
use crate::scorer::{arc_scores_from, project, rel_scores_pairs, BiaffineParams, Projections};
use crate::vocab::{EncodedSentence, Vocabulary};

/// Layer widths. Defaults follow the usual biaffine configuration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub word_dim: usize,
    pub char_dim: usize,
    pub char_hidden: usize,
    pub feat_dim: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub arc_dim: usize,
    pub rel_dim: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            word_dim: 100,
            char_dim: 32,
            char_hidden: 64,
            feat_dim: 32,
            lstm_hidden: 200,
            lstm_layers: 2,
            arc_dim: 256,
            rel_dim: 128,
        }
    }
}

impl ModelDims {
    pub fn input_width(&self) -> usize {
        self.word_dim + 2 * self.char_hidden + self.feat_dim
    }
}

/// Training mode carries the dropout rate and the mask RNG.
pub enum Mode<'r> {
    Eval,
    Train { dropout: f64, rng: &'r mut ChaCha8Rng },
}

impl Mode<'_> {
    pub fn dropout(&mut self, tape: &mut Tape, v: Var) -> Var {
        match self {
            Mode::Eval => v,
            Mode::Train { dropout, rng } => tape.dropout(v, *dropout, *rng),
        }
    }

    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// Every learned tensor of the parser, plus the handles into the store.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub scorer: BiaffineParams,
    pub dims: ModelDims,
}

impl ModelParams {
    pub fn init(dims: &ModelDims, vocab: &Vocabulary, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let sizes = TableSizes { words: vocab.words.len(), chars: vocab.chars.len(), upos: vocab.upos.len() };
        let encoder = EncoderParams::init(&mut store, dims, sizes, &mut rng);
        let scorer = BiaffineParams::init(&mut store, dims, vocab.label_count(), &mut rng);
        ModelParams { store, encoder, scorer, dims: dims.clone() }
    }

    /// Rebuild handles for a store whose parameters were created by [`ModelParams::init`]
    /// with the same dims (parameter order is fixed by construction).
    pub fn with_store(dims: &ModelDims, vocab: &Vocabulary, store: ParamStore) -> Result<Self, String> {
        let template = ModelParams::init(dims, vocab, 0);
        if template.store.len() != store.len() {
            return Err(format!("expected {} parameters, found {}", template.store.len(), store.len()));
        }
        for (a, b) in template.store.iter().zip(store.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                ));
            }
        }
        Ok(ModelParams { store, ..template })
    }

    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        self.encoder.param_ids()
    }
}

/// Loss terms of one sentence, summed over tokens (not normalized).
#[derive(Clone, Copy, Debug)]
pub struct SentenceLoss {
    pub arc: Var,
    pub rel: Option<Var>,
    pub tokens: usize,
}

/// Representations, projections and arc scores for one sentence.
pub struct Forward {
    pub repr: Var,
    pub proj: Projections,
    pub arc_scores: Var,
}

pub fn forward(tape: &mut Tape, params: &ModelParams, es: &EncodedSentence, mode: &mut Mode) -> Result<Forward, AutodiffError> {
    let x = embed_tokens(tape, &params.encoder, es, mode)?;
    let repr = contextualize(tape, &params.encoder, x, mode)?;
    let proj = project(tape, &params.scorer, repr, mode)?;
    let arc_scores = arc_scores_from(tape, &params.scorer, &proj)?;
    Ok(Forward { repr, proj, arc_scores })
}

/// Summed head NLL from an `(n+1)×(n+1)` score matrix (row = dependent,
/// column = head, row 0 is the root). Self-attachment is masked out, so each
/// token chooses among `n` heads.
pub fn arc_nll(tape: &mut Tape, arc_scores: Var, gold_heads: &[usize]) -> Result<Var, AutodiffError> {
    let n1 = gold_heads.len() + 1;
    let dep_rows = tape.slice_rows(arc_scores, 1, n1)?;
    let mask: Vec<bool> = (1..n1).flat_map(|i| (0..n1).map(move |j| j != i)).collect();
    let logp = tape.log_softmax(dep_rows, Some(mask))?;
    let picks: Vec<(usize, usize)> = gold_heads.iter().enumerate().map(|(k, &h)| (k, h)).collect();
    tape.nll_from_log_probs(logp, &picks)
}

/// Arc and relation negative log-likelihoods, conditioning labels on gold heads.
/// Tokens whose gold label is outside the inventory only contribute to the arc term.
pub fn sentence_loss(tape: &mut Tape, params: &ModelParams, es: &EncodedSentence, mode: &mut Mode) -> Result<SentenceLoss, AutodiffError> {
    let n = es.len();
    if n == 0 {
        return Err(AutodiffError::Argument("sentence has no tokens".into()));
    }
    let f = forward(tape, params, es, mode)?;
    let arc = arc_nll(tape, f.arc_scores, &es.gold_heads)?;

    let labelled: Vec<(usize, usize, usize)> =
        es.gold_heads.iter().zip(&es.gold_labels).enumerate().filter_map(|(k, (&h, l))| l.map(|l| (k + 1, h, l))).collect();
    let rel = if labelled.is_empty() {
        None
    } else {
        let pairs: Vec<(usize, usize)> = labelled.iter().map(|&(i, h, _)| (i, h)).collect();
        let scores = rel_scores_pairs(tape, &params.scorer, &f.proj, &pairs)?;
        let logp = tape.log_softmax(scores, None)?;
        let picks: Vec<(usize, usize)> = labelled.iter().enumerate().map(|(k, &(_, _, l))| (k, l)).collect();
        Some(tape.nll_from_log_probs(logp, &picks)?)
    };
    Ok(SentenceLoss { arc, rel, tokens: n })
}

/// Scalar loss nodes for a batch: `(L_arc, L_rel, L_total)` where the NLL
/// sums are divided by the batch token count before `λ‖θ‖²` is added.
pub fn batch_loss(
    tape: &mut Tape,
    params: &ModelParams,
    batch: &[EncodedSentence],
    l2_lambda: f64,
    mode: &mut Mode,
) -> Result<(Var, Var, Var), AutodiffError> {
    if batch.is_empty() {
        return Err(AutodiffError::Argument("empty batch".into()));
    }
    let mut arcs = Vec::new();
    let mut rels = Vec::new();
    let mut tokens = 0;
    for es in batch {
        let l = sentence_loss(tape, params, es, mode)?;
        arcs.push(l.arc);
        rels.extend(l.rel);
        tokens += l.tokens;
    }
    let scale = 1.0 / tokens as f64;
    let arc_sum = tape.concat_rows(&arcs)?;
    let arc_sum = tape.sum(arc_sum);
    let arc = tape.scale(arc_sum, scale);
    let rel = if rels.is_empty() {
        tape.constant(crate::autodiff::Tensor::scalar(0.0))
    } else {
        let r = tape.concat_rows(&rels)?;
        let r = tape.sum(r);
        tape.scale(r, scale)
    };
    let mut total = tape.add(arc, rel)?;
    if l2_lambda != 0.0 {
        let mut norms = Vec::with_capacity(params.store.len());
        for k in 0..params.store.len() {
            let p = tape.param(ParamId(k));
            norms.push(tape.squared_norm(p));
        }
        let stacked = tape.concat_rows(&norms)?;
        let norm = tape.sum(stacked);
        let reg = tape.scale(norm, l2_lambda);
        total = tape.add(total, reg)?;
    }
    Ok((arc, rel, total))
}

/// A trained parser: parameters together with the vocabulary that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct Parser {
    pub params: ModelParams,
    pub vocab: Vocabulary,
}

impl Parser {
    pub fn new(vocab: Vocabulary, dims: &ModelDims, seed: u64) -> Self {
        let params = ModelParams::init(dims, &vocab, seed);
        Parser { params, vocab }
    }

    pub fn parse_encoded(&self, es: &EncodedSentence, single_root: bool) -> Result<ParseTree, DecodeError> {
        if es.is_empty() {
            return Err(DecodeError::Empty);
        }
        let mut tape = Tape::new(&self.params.store);
        let f = forward(&mut tape, &self.params, es, &mut Mode::Eval)?;
        let scores = tape.value(f.arc_scores).clone();
        let heads = mst_decode(&scores, single_root)?;
        let labels = assign_labels(&mut tape, &self.params.scorer, &f.proj, &heads)?;
        Ok(ParseTree { heads, labels })
    }

    /// Copy of `sentence` with predicted HEAD and DEPREL columns.
    pub fn parse(&self, sentence: &Sentence, single_root: bool) -> Result<Sentence, DecodeError> {
        let es = self.vocab.encode_unannotated(sentence);
        let tree = self.parse_encoded(&es, single_root)?;
        let mut out = sentence.clone();
        for (token, (&h, &l)) in out.tokens.iter_mut().zip(tree.heads.iter().zip(&tree.labels)) {
            token.head = Some(h);
            token.deprel = self.vocab.deprels.symbol(l).unwrap_or("_").to_owned();
        }
        Ok(out)
    }

    /// Parse every sentence; empty sentences are copied unchanged.
    pub fn parse_treebank(&self, tb: &Treebank, single_root: bool, exec: Execution) -> Result<Treebank, DecodeError> {
        let parsed = exec.map(&tb.sentences, |s| if s.is_empty() { Ok(s.clone()) } else { self.parse(s, single_root) });
        Ok(Treebank { sentences: parsed.into_iter().collect::<Result<_, _>>()?, source_tag: tb.source_tag })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::autodiff::{finite_difference_check, Gradients};
    use crate::conllu::Token;
    use crate::vocab::{build_vocab, encode_sentence};

    pub(crate) fn tiny_dims() -> ModelDims {
        ModelDims { word_dim: 8, char_dim: 4, char_hidden: 4, feat_dim: 4, lstm_hidden: 8, lstm_layers: 2, arc_dim: 8, rel_dim: 4 }
    }

    pub(crate) fn toy_treebank() -> Treebank {
        let s = |words: &[(&str, &str, usize, &str)]| {
            Sentence::new(words.iter().enumerate().map(|(i, (f, p, h, d))| Token::new(i + 1, *f).with_upos(*p).with_head(*h, *d)).collect())
        };
        Treebank::new(vec![
            s(&[("the", "DET", 2, "det"), ("dog", "NOUN", 3, "nsubj"), ("barks", "VERB", 0, "root"), ("loud", "ADV", 3, "det")]),
            s(&[("dog", "NOUN", 2, "nsubj"), ("sleeps", "VERB", 0, "root")]),
        ])
    }

    #[test]
    fn parse_output_is_a_tree_with_known_labels() {
        let tb = toy_treebank();
        let vocab = build_vocab(&tb, 1);
        let parser = Parser::new(vocab, &tiny_dims(), 5);
        let out = parser.parse(&tb.sentences[0], true).unwrap();
        assert!(crate::conllu::validate_tree(&out).is_tree);
        assert!(out.tokens.iter().all(|t| parser.vocab.deprels.get(&t.deprel).is_some()));
    }

    #[test]
    fn full_loss_gradcheck_small_config() {
        let tb = toy_treebank();
        let vocab = build_vocab(&tb, 1);
        let mut params = ModelParams::init(&tiny_dims(), &vocab, 3);
        // move the biaffine weights off zero so every path carries gradient
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for id in params.scorer.arc_param_ids().into_iter().chain(params.scorer.rel_param_ids()) {
            let shape = params.store.value(id).shape().to_vec();
            params.store.get_mut(id).value = crate::encoder::uniform(&shape, 0.5, &mut rng);
        }
        let es = encode_sentence(&vocab, &tb.sentences[0]).unwrap();
        let handles = params.clone();
        let report = finite_difference_check(&mut params.store, 1e-5, |tape| {
            let (_, _, total) = batch_loss(tape, &handles, std::slice::from_ref(&es), 1e-3, &mut Mode::Eval)?;
            Ok(total)
        })
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{:?}", report);
    }

    #[test]
    fn rel_loss_ignores_arc_parameters() {
        let tb = toy_treebank();
        let vocab = build_vocab(&tb, 1);
        let params = ModelParams::init(&tiny_dims(), &vocab, 3);
        let es = encode_sentence(&vocab, &tb.sentences[0]).unwrap();
        let mut tape = Tape::new(&params.store);
        let l = sentence_loss(&mut tape, &params, &es, &mut Mode::Eval).unwrap();
        let mut grads = Gradients::zeros_like(&params.store);
        tape.backward(l.rel.unwrap(), &mut grads).unwrap();
        for id in params.scorer.arc_param_ids() {
            assert!(grads.get(id).data().iter().all(|&g| g == 0.0));
        }
    }
}
