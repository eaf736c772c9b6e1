//! Optimization: batched gradients, Adam, early stopping on dev LAS, fine-tuning.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Gradients, ParamId, ParamStore, Tape, Tensor};
use crate::conllu::Treebank;
use crate::decoder::DecodeError;
use crate::eval::{attachment_scores, EvalError, Metrics};
use crate::exec::Execution;
use crate::model::{sentence_loss, Mode, ModelDims, ModelParams, Parser};
use crate::vocab::{build_vocab, EncodedSentence, VocabError, Vocabulary};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0}")]
    Argument(String),
    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Sentences per gradient chunk. Chunks are reduced in a fixed order, so the
/// summed gradient does not depend on how many threads ran them.
const GRAD_CHUNK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub l2_lambda: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub dropout: f64,
    pub min_word_freq: usize,
    pub freeze_encoder: bool,
    pub dims: ModelDims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.9,
            adam_eps: 1e-8,
            l2_lambda: 1e-6,
            batch_size: 8,
            max_epochs: 100,
            patience: 10,
            grad_clip: 5.0,
            seed: 1,
            dropout: 0.33,
            min_word_freq: 2,
            freeze_encoder: false,
            dims: ModelDims::default(),
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| TrainError::Config { key: key.to_owned(), message: format!("cannot parse {:?}", value.trim()) })
}

impl TrainConfig {
    /// Defaults for adapting an existing model: half the learning rate.
    pub fn finetune_from(base: &TrainConfig) -> Self {
        TrainConfig { learning_rate: 0.5 * base.learning_rate, patience: 10, ..base.clone() }
    }

    // the negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| Err(TrainError::Config { key: key.to_owned(), message: message.to_owned() });
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate", "must be > 0");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must lie in [0, 1)");
        }
        if self.patience < 1 {
            return bad("patience", "must be >= 1");
        }
        if !(self.l2_lambda >= 0.0) {
            return bad("l2_lambda", "must be >= 0");
        }
        if self.batch_size < 1 {
            return bad("batch_size", "must be >= 1");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip", "must be > 0");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam_beta", "must lie in [0, 1)");
        }
        let d = &self.dims;
        // feat_dim = 0 turns the UPOS input off
        let widths = [d.word_dim, d.char_dim, d.char_hidden, d.lstm_hidden, d.lstm_layers, d.arc_dim, d.rel_dim];
        if widths.contains(&0) {
            return bad("dims", "every dimension except feat_dim must be >= 1");
        }
        Ok(())
    }

    /// Set one `key=value` entry. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = key.trim();
        match k {
            "learning_rate" => self.learning_rate = parse_value(k, value)?,
            "adam_beta1" => self.adam_beta1 = parse_value(k, value)?,
            "adam_beta2" => self.adam_beta2 = parse_value(k, value)?,
            "adam_eps" => self.adam_eps = parse_value(k, value)?,
            "l2_lambda" => self.l2_lambda = parse_value(k, value)?,
            "batch_size" => self.batch_size = parse_value(k, value)?,
            "max_epochs" => self.max_epochs = parse_value(k, value)?,
            "patience" => self.patience = parse_value(k, value)?,
            "grad_clip" => self.grad_clip = parse_value(k, value)?,
            "seed" => self.seed = parse_value(k, value)?,
            "dropout" => self.dropout = parse_value(k, value)?,
            "min_word_freq" => self.min_word_freq = parse_value(k, value)?,
            "freeze_encoder" => self.freeze_encoder = parse_value(k, value)?,
            "word_dim" => self.dims.word_dim = parse_value(k, value)?,
            "char_dim" => self.dims.char_dim = parse_value(k, value)?,
            "char_hidden" => self.dims.char_hidden = parse_value(k, value)?,
            "feat_dim" => self.dims.feat_dim = parse_value(k, value)?,
            "lstm_hidden" => self.dims.lstm_hidden = parse_value(k, value)?,
            "lstm_layers" => self.dims.lstm_layers = parse_value(k, value)?,
            "arc_dim" => self.dims.arc_dim = parse_value(k, value)?,
            "rel_dim" => self.dims.rel_dim = parse_value(k, value)?,
            _ => return Err(TrainError::Config { key: k.to_owned(), message: "unknown key".into() }),
        }
        Ok(())
    }

    /// Apply a `key=value` text (blank lines and `#` comments ignored).
    pub fn overlay(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| TrainError::Config { key: line.to_owned(), message: "expected key=value".into() })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        c.overlay(text)?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let d = &self.dims;
        let mut out = String::new();
        let entries: [(&str, String); 21] = [
            ("learning_rate", self.learning_rate.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("l2_lambda", self.l2_lambda.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("seed", self.seed.to_string()),
            ("dropout", self.dropout.to_string()),
            ("min_word_freq", self.min_word_freq.to_string()),
            ("freeze_encoder", self.freeze_encoder.to_string()),
            ("word_dim", d.word_dim.to_string()),
            ("char_dim", d.char_dim.to_string()),
            ("char_hidden", d.char_hidden.to_string()),
            ("feat_dim", d.feat_dim.to_string()),
            ("lstm_hidden", d.lstm_hidden.to_string()),
            ("lstm_layers", d.lstm_layers.to_string()),
            ("arc_dim", d.arc_dim.to_string()),
            ("rel_dim", d.rel_dim.to_string()),
        ];
        for (k, v) in entries {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_uas: f64,
    pub dev_las: f64,
}

/// A trained model with the config and history that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub parser: Parser,
    pub config: TrainConfig,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    /// Record with the highest dev LAS (earliest on ties).
    pub fn best(&self) -> Option<&EpochRecord> {
        self.history.iter().fold(None, |best: Option<&EpochRecord>, r| match best {
            Some(b) if b.dev_las >= r.dev_las => Some(b),
            _ => Some(r),
        })
    }
}

/// Hooks for progress reporting.
pub trait Observer {
    fn epoch(&mut self, _record: &EpochRecord) {}
    fn notice(&mut self, _message: &str) {}
}

impl Observer for () {}

/// splitmix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

/// Losses of a batch through the tape: `(L_arc, L_rel, L_total)` as plain numbers.
pub fn compute_loss(params: &ModelParams, batch: &[EncodedSentence], l2_lambda: f64) -> Result<(f64, f64, f64)> {
    let mut tape = Tape::new(&params.store);
    let (arc, rel, total) = crate::model::batch_loss(&mut tape, params, batch, l2_lambda, &mut Mode::Eval)?;
    Ok((tape.value(arc).item(), tape.value(rel).item(), tape.value(total).item()))
}

/// Where the dropout masks come from during a gradient computation.
#[derive(Clone, Copy, Debug)]
pub enum Noise {
    Off,
    /// Dropout at `rate`, masks seeded from `stream` and the sentence position.
    On {
        rate: f64,
        stream: u64,
    },
}

/// Rows of each parameter that a batch touched; `None` marks a dense parameter.
pub type RowMask = Vec<Option<Vec<bool>>>;

/// Every parameter dense.
pub fn dense_rows(store: &ParamStore) -> RowMask {
    vec![None; store.len()]
}

/// Embedding rows looked up by `batch`. Other parameters are dense.
pub fn touched_rows(params: &ModelParams, batch: &[&EncodedSentence]) -> RowMask {
    let mut mask = dense_rows(&params.store);
    let enc = &params.encoder;
    let mut mark = |id: ParamId, ids: &mut dyn Iterator<Item = usize>| {
        let mut rows = vec![false; params.store.value(id).rows()];
        for i in ids {
            rows[i] = true;
        }
        mask[id.0] = Some(rows);
    };
    mark(enc.word_emb, &mut batch.iter().flat_map(|es| es.word_ids.iter().copied()));
    mark(enc.char_emb, &mut batch.iter().flat_map(|es| es.char_ids.iter().flatten().copied()));
    mark(enc.feat_emb, &mut batch.iter().flat_map(|es| es.feat_ids.iter().copied()));
    mask
}

/// Gradient of a batch objective, its value, and the rows it touched.
#[derive(Clone, Debug)]
pub struct BatchGradient {
    pub grads: Gradients,
    pub loss: f64,
    pub rows: RowMask,
}

/// Gradient of the batch objective. Sentences are processed independently
/// (one tape each) and reduced in a fixed order. The L2 term reaches every
/// dense parameter but only the embedding rows the batch looked up; the
/// reported loss includes the full `λ‖θ‖²`.
pub fn batch_gradient(
    params: &ModelParams,
    batch: &[&EncodedSentence],
    l2_lambda: f64,
    noise: Noise,
    exec: Execution,
) -> Result<BatchGradient> {
    if batch.is_empty() {
        return Err(TrainError::Argument("empty batch".into()));
    }
    let tokens: usize = batch.iter().map(|es| es.len()).sum();
    let scale = 1.0 / tokens as f64;
    let chunks: Vec<&[&EncodedSentence]> = batch.chunks(GRAD_CHUNK).collect();
    let partials = exec.map_range(chunks.len(), |c| -> Result<(Gradients, f64)> {
        let mut grads = Gradients::zeros_like(&params.store);
        let mut loss = 0.0;
        for (k, es) in chunks[c].iter().enumerate() {
            let position = (c * GRAD_CHUNK + k) as u64;
            let mut rng;
            let mut mode = match noise {
                Noise::Off => Mode::Eval,
                Noise::On { rate, stream } => {
                    rng = ChaCha8Rng::seed_from_u64(mix_seed(&[stream, position]));
                    Mode::Train { dropout: rate, rng: &mut rng }
                }
            };
            let mut tape = Tape::new(&params.store);
            let l = sentence_loss(&mut tape, params, es, &mut mode)?;
            let total = match l.rel {
                Some(rel) => tape.add(l.arc, rel)?,
                None => l.arc,
            };
            let scaled = tape.scale(total, scale);
            loss += tape.value(scaled).item();
            tape.backward(scaled, &mut grads)?;
        }
        Ok((grads, loss))
    });
    let mut iter = partials.into_iter();
    let (mut grads, mut loss) = iter.next().expect("non-empty batch")?;
    for part in iter {
        let (g, l) = part?;
        grads.add_assign(&g);
        loss += l;
    }
    let rows = touched_rows(params, batch);
    if l2_lambda > 0.0 {
        for ((g, p), mask) in grads.0.iter_mut().zip(params.store.iter()).zip(&rows) {
            let cols = p.value.len() / p.value.rows().max(1);
            for (i, (gi, &vi)) in g.data_mut().iter_mut().zip(p.value.data()).enumerate() {
                if mask.as_ref().is_none_or(|m| m[i / cols]) {
                    *gi += 2.0 * l2_lambda * vi;
                }
            }
        }
        loss += l2_lambda * params.store.squared_norm();
    }
    Ok(BatchGradient { grads, loss, rows })
}

/// Adam with bias correction, applied after global-norm clipping. Rows
/// outside a parameter's row mask keep both their value and their moments
/// (lazy updates for embedding tables).
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Adam { m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Parameters with `trainable[k] == false` are left untouched
    /// and their gradients do not count towards the clipping norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut Gradients, rows: &RowMask, config: &TrainConfig, trainable: &[bool]) {
        for (g, &t) in grads.0.iter_mut().zip(trainable) {
            if !t {
                g.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let norm = grads.global_norm();
        if norm > config.grad_clip {
            grads.scale(config.grad_clip / norm);
        }
        self.step += 1;
        let (b1, b2) = (config.adam_beta1, config.adam_beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (k, p) in store.iter_mut().enumerate() {
            if !trainable[k] {
                continue;
            }
            let cols = p.value.len() / p.value.rows().max(1);
            let g = grads.0[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (i, (((w, &gi), mi), vi)) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()).enumerate() {
                if let Some(mask) = &rows[k] {
                    if !mask[i / cols] {
                        continue;
                    }
                }
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_eps);
            }
        }
    }
}

/// Length-bucketed batches in a seeded random order.
pub fn make_batches(lengths: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(rng);
    // stable sort keeps the shuffled order inside each length
    order.sort_by_key(|&i| lengths[i]);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect();
    batches.shuffle(rng);
    batches
}

/// Parse `tb` and score it against its own gold annotation.
pub fn evaluate(parser: &Parser, tb: &Treebank, single_root: bool, exclude_punct: bool, exec: Execution) -> Result<(Metrics, Treebank)> {
    let pred = parser.parse_treebank(tb, single_root, exec)?;
    let metrics = attachment_scores(tb, &pred, exclude_punct)?;
    Ok((metrics, pred))
}

fn encode_all(vocab: &Vocabulary, tb: &Treebank, observer: &mut dyn Observer) -> Result<Vec<EncodedSentence>> {
    let mut out = Vec::with_capacity(tb.len());
    let mut unknown = 0;
    for s in &tb.sentences {
        if s.is_empty() {
            continue;
        }
        let (es, errs) = vocab.encode_lenient(s)?;
        if let Some(first) = errs.first() {
            if unknown == 0 {
                observer.notice(&format!("sentence {}: {}; such arcs are excluded from the label loss", s.sent_id(), first));
            }
        }
        unknown += errs.len();
        out.push(es);
    }
    if unknown > 1 {
        observer.notice(&format!("{unknown} arcs carry labels outside the inventory"));
    }
    if out.is_empty() {
        return Err(TrainError::Argument("training treebank has no tokens".into()));
    }
    Ok(out)
}

fn run_epochs(
    mut parser: Parser,
    config: &TrainConfig,
    train: &[EncodedSentence],
    dev: &Treebank,
    trainable: &[bool],
    exec: Execution,
    observer: &mut dyn Observer,
) -> Result<(Parser, Vec<EpochRecord>)> {
    let lengths: Vec<usize> = train.iter().map(|es| es.len()).collect();
    let mut adam = Adam::new(&parser.params.store);
    let mut history = Vec::new();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut since_best = 0;
    for epoch in 1..=config.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 0x74_7261_696e, epoch as u64]));
        let batches = make_batches(&lengths, config.batch_size, &mut rng);
        let mut loss_sum = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let batch: Vec<&EncodedSentence> = idx.iter().map(|&i| &train[i]).collect();
            let noise = if config.dropout > 0.0 {
                Noise::On { rate: config.dropout, stream: mix_seed(&[config.seed, epoch as u64, b as u64]) }
            } else {
                Noise::Off
            };
            let mut bg = batch_gradient(&parser.params, &batch, config.l2_lambda, noise, exec)?;
            loss_sum += bg.loss;
            adam.step(&mut parser.params.store, &mut bg.grads, &bg.rows, config, trainable);
        }
        let (metrics, _) = evaluate(&parser, dev, true, true, exec)?;
        let record = EpochRecord { epoch, train_loss: loss_sum / batches.len() as f64, dev_uas: metrics.uas, dev_las: metrics.las };
        observer.epoch(&record);
        history.push(record);
        let improved = best.as_ref().is_none_or(|(las, _)| metrics.las > *las);
        if improved {
            best = Some((metrics.las, parser.params.store.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    if let Some((_, store)) = best {
        parser.params.store = store;
    }
    Ok((parser, history))
}

fn check_inputs(config: &TrainConfig, train_tb: &Treebank, dev_tb: &Treebank) -> Result<()> {
    config.validate()?;
    if train_tb.token_count() == 0 {
        return Err(TrainError::Argument("training treebank is empty".into()));
    }
    if dev_tb.token_count() == 0 {
        return Err(TrainError::Argument("dev treebank is empty".into()));
    }
    Ok(())
}

pub fn train(config: &TrainConfig, train_tb: &Treebank, dev_tb: &Treebank) -> Result<Checkpoint> {
    train_with(config, train_tb, dev_tb, Execution::default(), &mut ())
}

pub fn train_with(
    config: &TrainConfig,
    train_tb: &Treebank,
    dev_tb: &Treebank,
    exec: Execution,
    observer: &mut dyn Observer,
) -> Result<Checkpoint> {
    check_inputs(config, train_tb, dev_tb)?;
    let vocab = build_vocab(train_tb, config.min_word_freq);
    if vocab.label_count() == 0 {
        return Err(TrainError::Argument("training treebank has no dependency labels".into()));
    }
    let encoded = encode_all(&vocab, train_tb, observer)?;
    let parser = Parser::new(vocab, &config.dims, config.seed);
    let trainable = trainable_mask(&parser.params, config.freeze_encoder);
    let (parser, history) = run_epochs(parser, config, &encoded, dev_tb, &trainable, exec, observer)?;
    Ok(Checkpoint { parser, config: config.clone(), history })
}

fn trainable_mask(params: &ModelParams, freeze_encoder: bool) -> Vec<bool> {
    let mut mask = vec![true; params.store.len()];
    if freeze_encoder {
        for id in params.encoder_param_ids() {
            mask[id.0] = false;
        }
    }
    mask
}

/// Extend `base` to a larger vocabulary: existing rows are copied, new rows
/// come from a fresh initialization seeded by `seed`.
pub fn grow_params(base: &ModelParams, vocab: &Vocabulary, seed: u64) -> Result<ModelParams> {
    let mut grown = ModelParams::init(&base.dims, vocab, seed);
    if grown.store.len() != base.store.len() {
        return Err(TrainError::Argument("parameter layouts differ".into()));
    }
    for k in 0..base.store.len() {
        let src = base.store.get(ParamId(k));
        let dst = grown.store.get_mut(ParamId(k));
        let (ss, ds) = (src.value.shape(), dst.value.shape());
        if src.name != dst.name || ss.len() != ds.len() || ss[1..] != ds[1..] || ss[0] > ds[0] {
            return Err(TrainError::Argument(format!("cannot grow parameter {} from {:?} to {:?}", src.name, ss, ds)));
        }
        dst.value.data_mut()[..src.value.len()].copy_from_slice(src.value.data());
    }
    Ok(grown)
}

/// Continue training `base` on new data. The vocabulary is extended and all
/// other parameters start from the base values.
pub fn finetune(base: &Checkpoint, config: &TrainConfig, train_tb: &Treebank, dev_tb: &Treebank) -> Result<Checkpoint> {
    finetune_with(base, config, train_tb, dev_tb, Execution::default(), &mut ())
}

pub fn finetune_with(
    base: &Checkpoint,
    config: &TrainConfig,
    train_tb: &Treebank,
    dev_tb: &Treebank,
    exec: Execution,
    observer: &mut dyn Observer,
) -> Result<Checkpoint> {
    let mut config = config.clone();
    config.dims = base.parser.params.dims.clone();
    check_inputs(&config, train_tb, dev_tb)?;
    let mut vocab = base.parser.vocab.clone();
    let growth = vocab.extend_with(train_tb);
    observer.notice(&format!(
        "vocabulary extended: words {} -> {}, chars {} -> {}, upos {} -> {}",
        growth.words.0, growth.words.1, growth.chars.0, growth.chars.1, growth.upos.0, growth.upos.1
    ));
    let params = grow_params(&base.parser.params, &vocab, mix_seed(&[config.seed, 0x67726f77]))?;
    let encoded = encode_all(&vocab, train_tb, observer)?;
    let parser = Parser { params, vocab };
    let trainable = trainable_mask(&parser.params, config.freeze_encoder);
    let (parser, history) = run_epochs(parser, &config, &encoded, dev_tb, &trainable, exec, observer)?;
    Ok(Checkpoint { parser, config, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conllu::{Sentence, Token};
    use crate::model::tests::{tiny_dims, toy_treebank};
    use crate::vocab::encode_sentence;

    fn tiny_config() -> TrainConfig {
        TrainConfig { dims: tiny_dims(), min_word_freq: 1, ..TrainConfig::default() }
    }

    fn setup() -> (ModelParams, Vec<EncodedSentence>) {
        let tb = toy_treebank();
        let vocab = build_vocab(&tb, 1);
        let params = ModelParams::init(&tiny_dims(), &vocab, 9);
        let es = tb.sentences.iter().map(|s| encode_sentence(&vocab, s).unwrap()).collect();
        (params, es)
    }

    #[test]
    fn config_text_round_trip() {
        let mut c = tiny_config();
        c.learning_rate = 1.0 / 3.0;
        c.freeze_encoder = true;
        assert_eq!(TrainConfig::from_text(&c.to_text()).unwrap(), c);
        assert!(TrainConfig::from_text("bogus=1").is_err());
        assert!(TrainConfig::from_text("seed=x").is_err());
        let c = TrainConfig::from_text("# comment\n\nseed = 7 # trailing\n").unwrap();
        assert_eq!(c.seed, 7);
    }

    #[test]
    fn validation_rejects_bad_values() {
        for (k, v) in [("learning_rate", "0"), ("dropout", "1"), ("patience", "0"), ("l2_lambda", "-1")] {
            let mut c = TrainConfig::default();
            c.set(k, v).unwrap();
            assert!(c.validate().is_err(), "{k}={v}");
        }
    }

    #[test]
    fn chunked_gradient_matches_tape_route() {
        let (params, es) = setup();
        let mut tape = Tape::new(&params.store);
        let (_, _, total) = crate::model::batch_loss(&mut tape, &params, &es, 1e-2, &mut Mode::Eval).unwrap();
        let mut expected = Gradients::zeros_like(&params.store);
        tape.backward(total, &mut expected).unwrap();
        let refs: Vec<&EncodedSentence> = es.iter().collect();
        let bg = batch_gradient(&params, &refs, 1e-2, Noise::Off, Execution::Sequential).unwrap();
        assert!((bg.loss - tape.value(total).item()).abs() < 1e-12);
        // rows no sentence looks up (padding, unknown) only differ by their L2 gradient
        for ((a, b), (p, mask)) in bg.grads.0.iter().zip(&expected.0).zip(params.store.iter().zip(&bg.rows)) {
            let cols = p.value.len() / p.value.rows();
            for (i, ((x, y), w)) in a.data().iter().zip(b.data()).zip(p.value.data()).enumerate() {
                let touched = mask.as_ref().is_none_or(|m| m[i / cols]);
                let expected = if touched { *y } else { y - 2e-2 * w };
                assert!((x - expected).abs() < 1e-12, "{} [{i}]", p.name);
            }
        }
        let word_rows = bg.rows[params.encoder.word_emb.0].as_ref().unwrap();
        assert!(!word_rows[crate::vocab::PAD] && !word_rows[crate::vocab::UNK] && word_rows[crate::vocab::ROOT]);
    }

    #[test]
    fn execution_modes_give_identical_gradients() {
        let (params, es) = setup();
        let many: Vec<&EncodedSentence> = es.iter().cycle().take(11).collect();
        let noise = Noise::On { rate: 0.3, stream: 4 };
        let a = batch_gradient(&params, &many, 1e-6, noise, Execution::Sequential).unwrap();
        let b = batch_gradient(&params, &many, 1e-6, noise, Execution::Parallel).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.grads, b.grads);
    }

    #[test]
    fn lambda_zero_total_is_sum_and_monotone_in_lambda() {
        let (params, es) = setup();
        let (arc, rel, total) = compute_loss(&params, &es, 0.0).unwrap();
        assert_eq!(total, arc + rel);
        let (_, _, t1) = compute_loss(&params, &es, 1e-3).unwrap();
        let (_, _, t2) = compute_loss(&params, &es, 2e-3).unwrap();
        assert!(total < t1 && t1 < t2);
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(1.0));
        let config = TrainConfig { learning_rate: 0.1, ..TrainConfig::default() };
        let mut adam = Adam::new(&store);
        let mut zero = Gradients::zeros_like(&store);
        adam.step(&mut store, &mut zero, &vec![None], &config, &[true]);
        assert_eq!(store.value(ParamId(0)).item(), 1.0);
        let mut adam = Adam::new(&store);
        let mut g = Gradients(vec![Tensor::scalar(1.0)]);
        adam.step(&mut store, &mut g, &vec![None], &config, &[true]);
        assert!((store.value(ParamId(0)).item() - 0.9).abs() < 1e-6);
    }

    #[test]
    fn adam_leaves_untouched_rows_alone() {
        let mut store = ParamStore::new();
        store.add("emb", Tensor::filled(&[3, 2], 1.0));
        let config = TrainConfig::default();
        let mut adam = Adam::new(&store);
        let rows = vec![Some(vec![true, false, true])];
        let mut g = Gradients(vec![Tensor::filled(&[3, 2], 0.5)]);
        adam.step(&mut store, &mut g, &rows, &config, &[true]);
        let w = store.value(ParamId(0));
        assert!(w.row(0)[0] < 1.0 && w.row(2)[1] < 1.0);
        assert_eq!(w.row(1), &[1.0, 1.0]);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::from_vec(&[3], vec![2.0, -1.5, 0.5]).unwrap());
        let config = TrainConfig { learning_rate: 0.01, ..TrainConfig::default() };
        let mut adam = Adam::new(&store);
        let mut losses = Vec::new();
        for _ in 0..100 {
            let w = store.value(ParamId(0)).clone();
            losses.push(w.squared_norm());
            let mut g = Gradients(vec![Tensor::from_vec(&[3], w.data().iter().map(|x| 2.0 * x).collect()).unwrap()]);
            adam.step(&mut store, &mut g, &vec![None], &config, &[true]);
        }
        assert!(losses[5..].windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn fifty_steps_halve_the_loss() {
        let (mut params, es) = setup();
        let refs: Vec<&EncodedSentence> = es.iter().collect();
        // biaffine weights start at zero, so tiny dims need a larger step
        let config = TrainConfig { l2_lambda: 0.0, learning_rate: 1e-2, ..tiny_config() };
        let (_, _, initial) = compute_loss(&params, &es, 0.0).unwrap();
        let mut adam = Adam::new(&params.store);
        let all = vec![true; params.store.len()];
        for _ in 0..50 {
            let mut bg = batch_gradient(&params, &refs, 0.0, Noise::Off, Execution::Sequential).unwrap();
            adam.step(&mut params.store, &mut bg.grads, &bg.rows, &config, &all);
        }
        let (_, _, after) = compute_loss(&params, &es, 0.0).unwrap();
        assert!(after <= 0.5 * initial, "{initial} -> {after}");
    }

    #[test]
    fn batches_cover_every_sentence_once() {
        let lengths = [3, 1, 4, 1, 5, 9, 2, 6, 5, 3];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches = make_batches(&lengths, 3, &mut rng);
        let mut all: Vec<usize> = batches.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(batches.iter().all(|b| b.len() <= 3));
    }

    #[test]
    fn patience_one_stops_by_epoch_two() {
        let tb = toy_treebank();
        // a label unseen in training keeps dev LAS at zero
        let dev = Treebank::new(vec![Sentence::new(vec![Token::new(1, "dog").with_upos("NOUN").with_head(0, "vocative")])]);
        let config = TrainConfig { patience: 1, max_epochs: 20, ..tiny_config() };
        let ck = train(&config, &tb, &dev).unwrap();
        assert!(ck.history.len() <= 2);
        let best = ck.best().unwrap();
        assert!(ck.history.iter().all(|r| r.dev_las <= best.dev_las));
    }

    #[test]
    fn finetune_zero_epochs_keeps_base_values() {
        let tb = toy_treebank();
        let base = train(&TrainConfig { max_epochs: 2, ..tiny_config() }, &tb, &tb).unwrap();
        let mut new_tb = tb.clone();
        new_tb.sentences[0].tokens[0].form = "zebra".into();
        let config = TrainConfig { max_epochs: 0, ..TrainConfig::finetune_from(&base.config) };
        let tuned = finetune(&base, &config, &new_tb, &tb).unwrap();
        assert!(tuned.history.is_empty());
        assert_eq!(tuned.parser.vocab.words.len(), base.parser.vocab.words.len() + 1);
        for (a, b) in tuned.parser.params.store.iter().zip(base.parser.params.store.iter()) {
            assert_eq!(&a.value.data()[..b.value.len()], b.value.data(), "{}", a.name);
            if a.value.len() > b.value.len() {
                assert!(a.value.data()[b.value.len()..].iter().all(|x| x.abs() <= 0.1));
            }
        }
        let (before, _) = evaluate(&base.parser, &tb, true, true, Execution::Sequential).unwrap();
        let (after, _) = evaluate(&tuned.parser, &tb, true, true, Execution::Sequential).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn empty_treebank_is_an_argument_error() {
        let tb = toy_treebank();
        let err = train(&tiny_config(), &Treebank::new(vec![]), &tb).unwrap_err();
        assert!(matches!(err, TrainError::Argument(_)));
    }
}
