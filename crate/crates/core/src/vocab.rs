//! Symbol inventories and sentence encoding.

use std::collections::HashMap;

use thiserror::Error;

use crate::conllu::{Sentence, Treebank};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const ROOT: usize = 2;

const WORD_RESERVED: [&str; 3] = ["<pad>", "<unk>", "<root>"];
const CHAR_RESERVED: [&str; 3] = ["<pad>", "<unk>", "<root-mark>"];
const POS_RESERVED: [&str; 3] = ["<pad>", "<unk>", "<root-pos>"];

#[derive(Debug, Error, PartialEq)]
pub enum VocabError {
    #[error("token {token} has relation label '{label}' outside the training label set")]
    UnknownLabel { token: usize, label: String },

    #[error("token {token} has no head")]
    MissingHead { token: usize },

    #[error("malformed vocabulary text: {0}")]
    Format(String),
}

/// Bidirectional string/index map.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SymbolTable {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl SymbolTable {
    fn with_reserved(reserved: &[&str]) -> Self {
        let mut table = SymbolTable::default();
        for r in reserved {
            table.insert(r);
        }
        table
    }

    /// Insert if absent, returning the symbol's index.
    pub fn insert(&mut self, symbol: &str) -> usize {
        if let Some(&i) = self.index.get(symbol) {
            return i;
        }
        let i = self.symbols.len();
        self.symbols.push(symbol.to_owned());
        self.index.insert(symbol.to_owned(), i);
        i
    }

    pub fn get(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, index: usize) -> Option<&str> {
        self.symbols.get(index).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.symbols.iter().map(String::as_str)
    }
}

/// Frequency-descending, then lexicographic.
fn ranked(counts: HashMap<String, usize>, min_freq: usize) -> Vec<String> {
    let mut items: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    items.into_iter().map(|(s, _)| s).collect()
}

#[derive(Default)]
struct Counts {
    words: HashMap<String, usize>,
    chars: HashMap<String, usize>,
    upos: HashMap<String, usize>,
    deprels: HashMap<String, usize>,
}

impl Counts {
    fn of(tb: &Treebank) -> Self {
        let mut counts = Counts::default();
        for token in tb.sentences.iter().flat_map(|s| &s.tokens) {
            *counts.words.entry(normalize_form(&token.form)).or_default() += 1;
            for c in token.form.chars() {
                *counts.chars.entry(c.to_string()).or_default() += 1;
            }
            if !is_blank(&token.upos) {
                *counts.upos.entry(token.upos.clone()).or_default() += 1;
            }
            if token.head.is_some() && token.has_deprel() {
                *counts.deprels.entry(token.deprel.clone()).or_default() += 1;
            }
        }
        counts
    }
}

fn is_blank(s: &str) -> bool {
    s.is_empty() || s == "_"
}

/// Word-level lookup key.
pub fn normalize_form(form: &str) -> String {
    form.to_lowercase()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    pub words: SymbolTable,
    pub chars: SymbolTable,
    pub upos: SymbolTable,
    pub deprels: SymbolTable,
    pub min_word_freq: usize,
}

/// Sizes of the tables before an extension, so callers can grow parameter rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VocabGrowth {
    pub words: (usize, usize),
    pub chars: (usize, usize),
    pub upos: (usize, usize),
}

pub fn build_vocab(tb: &Treebank, min_word_freq: usize) -> Vocabulary {
    let counts = Counts::of(tb);
    let mut v = Vocabulary {
        words: SymbolTable::with_reserved(&WORD_RESERVED),
        chars: SymbolTable::with_reserved(&CHAR_RESERVED),
        upos: SymbolTable::with_reserved(&POS_RESERVED),
        deprels: SymbolTable::default(),
        min_word_freq,
    };
    for w in ranked(counts.words, min_word_freq.max(1)) {
        v.words.insert(&w);
    }
    for c in ranked(counts.chars, 1) {
        v.chars.insert(&c);
    }
    for p in ranked(counts.upos, 1) {
        v.upos.insert(&p);
    }
    for d in ranked(counts.deprels, 1) {
        v.deprels.insert(&d);
    }
    v
}

/// Index form of one sentence. Position 0 is the artificial root.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSentence {
    pub word_ids: Vec<usize>,
    pub char_ids: Vec<Vec<usize>>,
    pub feat_ids: Vec<usize>,
    /// Gold head of token `k + 1` at index `k`.
    pub gold_heads: Vec<usize>,
    /// Gold label of token `k + 1`; `None` when the label is outside the inventory.
    pub gold_labels: Vec<Option<usize>>,
}

impl EncodedSentence {
    /// Number of real tokens.
    pub fn len(&self) -> usize {
        self.word_ids.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Vocabulary {
    pub fn word_id(&self, form: &str) -> usize {
        self.words.get(&normalize_form(form)).unwrap_or(UNK)
    }

    pub fn char_ids(&self, form: &str) -> Vec<usize> {
        let ids: Vec<usize> = form.chars().map(|c| self.chars.get(c.encode_utf8(&mut [0; 4])).unwrap_or(UNK)).collect();
        if ids.is_empty() {
            vec![UNK]
        } else {
            ids
        }
    }

    pub fn upos_id(&self, upos: &str) -> usize {
        self.upos.get(upos).unwrap_or(UNK)
    }

    pub fn label_count(&self) -> usize {
        self.deprels.len()
    }

    fn encode_inputs(&self, s: &Sentence) -> (Vec<usize>, Vec<Vec<usize>>, Vec<usize>) {
        let mut word_ids = vec![ROOT];
        let mut char_ids = vec![vec![ROOT]];
        let mut feat_ids = vec![ROOT];
        for token in &s.tokens {
            word_ids.push(self.word_id(&token.form));
            char_ids.push(self.char_ids(&token.form));
            feat_ids.push(self.upos_id(&token.upos));
        }
        (word_ids, char_ids, feat_ids)
    }

    /// Encode with gold annotation, keeping arcs whose label is unknown
    /// (their `gold_labels` entry is `None`) and reporting those labels.
    pub fn encode_lenient(&self, s: &Sentence) -> Result<(EncodedSentence, Vec<VocabError>), VocabError> {
        let (word_ids, char_ids, feat_ids) = self.encode_inputs(s);
        let mut gold_heads = Vec::with_capacity(s.len());
        let mut gold_labels = Vec::with_capacity(s.len());
        let mut unknown = Vec::new();
        for token in &s.tokens {
            let head = token.head.ok_or(VocabError::MissingHead { token: token.id })?;
            gold_heads.push(head);
            let label = self.deprels.get(&token.deprel);
            if label.is_none() {
                unknown.push(VocabError::UnknownLabel { token: token.id, label: token.deprel.clone() });
            }
            gold_labels.push(label);
        }
        Ok((EncodedSentence { word_ids, char_ids, feat_ids, gold_heads, gold_labels }, unknown))
    }

    /// Encode for parsing only; gold fields are filled with placeholders.
    pub fn encode_unannotated(&self, s: &Sentence) -> EncodedSentence {
        let (word_ids, char_ids, feat_ids) = self.encode_inputs(s);
        EncodedSentence {
            word_ids,
            char_ids,
            feat_ids,
            gold_heads: s.tokens.iter().map(|t| t.head.unwrap_or(0)).collect(),
            gold_labels: s.tokens.iter().map(|t| self.deprels.get(&t.deprel)).collect(),
        }
    }

    /// Append unseen word types (at `min_word_freq`), characters and POS tags
    /// from `tb`. Existing indices are untouched; labels are never added.
    pub fn extend_with(&mut self, tb: &Treebank) -> VocabGrowth {
        let before = (self.words.len(), self.chars.len(), self.upos.len());
        let counts = Counts::of(tb);
        for w in ranked(counts.words, self.min_word_freq.max(1)) {
            self.words.insert(&w);
        }
        for c in ranked(counts.chars, 1) {
            self.chars.insert(&c);
        }
        for p in ranked(counts.upos, 1) {
            self.upos.insert(&p);
        }
        VocabGrowth { words: (before.0, self.words.len()), chars: (before.1, self.chars.len()), upos: (before.2, self.upos.len()) }
    }

    /// Line-oriented text form: a header per table, then one symbol per line.
    pub fn to_text(&self) -> String {
        let mut out = format!("min_word_freq\t{}\n", self.min_word_freq);
        for (name, table) in self.tables() {
            out.push_str(&format!("{}\t{}\n", name, table.len()));
            for s in table.iter() {
                out.push_str(s);
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Vocabulary, VocabError> {
        let fmt_err = |m: &str| VocabError::Format(m.to_owned());
        let mut lines = text.split('\n');
        let min_word_freq = lines
            .next()
            .and_then(|l| l.strip_prefix("min_word_freq\t"))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| fmt_err("missing min_word_freq"))?;
        let mut read_table = |name: &str| -> Result<SymbolTable, VocabError> {
            let header = lines.next().ok_or_else(|| fmt_err("truncated"))?;
            let count: usize = header
                .strip_prefix(name)
                .and_then(|h| h.strip_prefix('\t'))
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| VocabError::Format(format!("expected '{}' header", name)))?;
            let mut table = SymbolTable::default();
            for _ in 0..count {
                let sym = lines.next().ok_or_else(|| fmt_err("truncated table"))?;
                if table.get(sym).is_some() {
                    return Err(VocabError::Format(format!("duplicate symbol '{}'", sym)));
                }
                table.insert(sym);
            }
            Ok(table)
        };
        let words = read_table("words")?;
        let chars = read_table("chars")?;
        let upos = read_table("upos")?;
        let deprels = read_table("deprels")?;
        Ok(Vocabulary { words, chars, upos, deprels, min_word_freq })
    }

    fn tables(&self) -> [(&'static str, &SymbolTable); 4] {
        [("words", &self.words), ("chars", &self.chars), ("upos", &self.upos), ("deprels", &self.deprels)]
    }
}

/// Strict encoding: every label must belong to the inventory.
pub fn encode_sentence(v: &Vocabulary, s: &Sentence) -> Result<EncodedSentence, VocabError> {
    let (encoded, unknown) = v.encode_lenient(s)?;
    match unknown.into_iter().next() {
        Some(e) => Err(e),
        None => Ok(encoded),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conllu::Token;

    fn sent(words: &[(&str, &str, usize, &str)]) -> Sentence {
        Sentence::new(words.iter().enumerate().map(|(i, (f, p, h, d))| Token::new(i + 1, *f).with_upos(*p).with_head(*h, *d)).collect())
    }

    fn tb() -> Treebank {
        Treebank::new(vec![
            sent(&[("a", "NOUN", 2, "nsubj"), ("b", "VERB", 0, "root")]),
            sent(&[("A", "NOUN", 0, "root")]),
            sent(&[("a", "NOUN", 0, "root")]),
        ])
    }

    #[test]
    fn min_freq_filters_words_only() {
        let v = build_vocab(&tb(), 2);
        assert!(v.words.get("a").is_some());
        assert!(v.words.get("b").is_none());
        assert!(v.chars.get("b").is_some());
        assert!(v.chars.get("A").is_some());
        assert_eq!(v.deprels.len(), 2);
        assert_eq!(v.words.symbol(ROOT), Some("<root>"));
    }

    #[test]
    fn build_is_deterministic() {
        assert_eq!(build_vocab(&tb(), 2), build_vocab(&tb(), 2));
    }

    #[test]
    fn encode_layout() {
        let v = build_vocab(&tb(), 1);
        let s = sent(&[("a", "NOUN", 2, "nsubj"), ("zzz", "NOUN", 0, "root")]);
        let e = encode_sentence(&v, &s).unwrap();
        assert_eq!(e.word_ids.len(), 3);
        assert_eq!(e.word_ids[0], ROOT);
        assert_eq!(e.word_ids[2], UNK);
        assert_eq!(e.char_ids[0], vec![ROOT]);
        assert_eq!(e.gold_heads, vec![2, 0]);

        let na = sent(&[("na", "ADP", 0, "root")]);
        assert_eq!(encode_sentence(&v, &na).unwrap().char_ids[1].len(), 2);
    }

    #[test]
    fn unknown_label_is_reported() {
        let v = build_vocab(&tb(), 1);
        let s = sent(&[("a", "NOUN", 0, "obj")]);
        assert_eq!(encode_sentence(&v, &s), Err(VocabError::UnknownLabel { token: 1, label: "obj".into() }));
        let (e, unknown) = v.encode_lenient(&s).unwrap();
        assert_eq!(e.gold_labels, vec![None]);
        assert_eq!(unknown.len(), 1);
    }

    #[test]
    fn extension_preserves_indices() {
        let mut v = build_vocab(&tb(), 1);
        let before = v.clone();
        let extra = Treebank::new(vec![sent(&[("c", "ADJ", 0, "amod")])]);
        let growth = v.extend_with(&extra);
        for (i, s) in before.words.iter().enumerate() {
            assert_eq!(v.words.get(s), Some(i));
        }
        assert_eq!(growth.words.1, growth.words.0 + 1);
        assert_eq!(v.deprels, before.deprels);
    }

    #[test]
    fn text_round_trip() {
        let v = build_vocab(&tb(), 1);
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
    }
}
