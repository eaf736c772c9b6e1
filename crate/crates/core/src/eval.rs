//! Word-level attachment scores and the regime comparison table.

use std::fmt::Write as _;

use thiserror::Error;

use crate::conllu::Treebank;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("sentence count mismatch: gold has {gold}, prediction has {pred}")]
    SentenceCount { gold: usize, pred: usize },
    #[error("sentence {sentence}: token count mismatch (gold {gold}, prediction {pred})")]
    TokenCount { sentence: usize, gold: usize, pred: usize },
    #[error("sentence {sentence}, token {position}: form mismatch ({gold:?} vs {pred:?})")]
    Form { sentence: usize, position: usize, gold: String, pred: String },
    #[error("sentence {sentence}, token {position}: gold head missing")]
    MissingGoldHead { sentence: usize, position: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub uas: f64,
    pub las: f64,
    pub correct_heads: usize,
    pub correct_labeled: usize,
    pub scored_tokens: usize,
    pub excluded_punct: usize,
}

impl Metrics {
    pub fn from_counts(correct_heads: usize, correct_labeled: usize, scored_tokens: usize, excluded_punct: usize) -> Self {
        let ratio = |c: usize| if scored_tokens == 0 { 0.0 } else { c as f64 / scored_tokens as f64 };
        Metrics { uas: ratio(correct_heads), las: ratio(correct_labeled), correct_heads, correct_labeled, scored_tokens, excluded_punct }
    }
}

/// Micro-averaged UAS/LAS. Sentences are 1-based in errors, tokens use their CoNLL-U position.
/// Tokens with gold UPOS `PUNCT` are skipped when `exclude_punct` is set.
pub fn attachment_scores(gold: &Treebank, pred: &Treebank, exclude_punct: bool) -> Result<Metrics, EvalError> {
    if gold.len() != pred.len() {
        return Err(EvalError::SentenceCount { gold: gold.len(), pred: pred.len() });
    }
    let (mut heads, mut labeled, mut scored, mut excluded) = (0, 0, 0, 0);
    for (si, (g, p)) in gold.sentences.iter().zip(&pred.sentences).enumerate() {
        let sentence = si + 1;
        if g.len() != p.len() {
            return Err(EvalError::TokenCount { sentence, gold: g.len(), pred: p.len() });
        }
        for (k, (gt, pt)) in g.tokens.iter().zip(&p.tokens).enumerate() {
            if gt.form != pt.form {
                return Err(EvalError::Form { sentence, position: k + 1, gold: gt.form.clone(), pred: pt.form.clone() });
            }
            let gold_head = gt.head.ok_or(EvalError::MissingGoldHead { sentence, position: k + 1 })?;
            if exclude_punct && gt.upos == "PUNCT" {
                excluded += 1;
                continue;
            }
            scored += 1;
            if pt.head == Some(gold_head) {
                heads += 1;
                if pt.deprel == gt.deprel {
                    labeled += 1;
                }
            }
        }
    }
    Ok(Metrics::from_counts(heads, labeled, scored, excluded))
}

/// Integer percent, rounding halves up.
pub fn percent(x: f64) -> u32 {
    (x * 100.0 + 0.5).floor() as u32
}

pub struct RegimeReport {
    pub text: String,
    pub tsv: String,
}

pub fn regime_report(results: &[(String, Metrics)]) -> RegimeReport {
    let width = results.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max("regime".len());
    let mut text = format!("{:<width$}  UAS  LAS\n", "regime");
    let mut tsv = String::from("regime\tuas_raw\tlas_raw\tuas_pct\tlas_pct\tscored_tokens\n");
    for (name, m) in results {
        let _ = writeln!(text, "{:<width$}  {}% {}%", name, percent(m.uas), percent(m.las));
        let _ = writeln!(tsv, "{}\t{}\t{}\t{}\t{}\t{}", name, m.uas, m.las, percent(m.uas), percent(m.las), m.scored_tokens);
    }
    RegimeReport { text, tsv }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conllu::{Sentence, Token};

    fn tb(rows: &[(&str, &str, usize, &str)]) -> Treebank {
        Treebank::new(vec![Sentence::new(
            rows.iter().enumerate().map(|(i, (f, p, h, d))| Token::new(i + 1, *f).with_upos(*p).with_head(*h, *d)).collect(),
        )])
    }

    #[test]
    fn label_only_error() {
        let gold = tb(&[("a", "DET", 2, "det"), ("b", "NOUN", 3, "nsubj"), ("c", "VERB", 0, "root"), ("d", "NOUN", 3, "obj")]);
        let pred = tb(&[("a", "DET", 2, "det"), ("b", "NOUN", 3, "obj"), ("c", "VERB", 0, "root"), ("d", "NOUN", 3, "obj")]);
        let m = attachment_scores(&gold, &pred, true).unwrap();
        assert_eq!((m.uas, m.las, m.scored_tokens), (1.0, 0.75, 4));
    }

    #[test]
    fn punctuation_exclusion() {
        let rows = [
            ("a", "NOUN", 2, "nsubj"),
            ("b", "VERB", 0, "root"),
            ("c", "NOUN", 2, "obj"),
            ("d", "ADV", 2, "advmod"),
            (".", "PUNCT", 2, "punct"),
        ];
        let gold = tb(&rows);
        let mut wrong = rows;
        wrong[4].2 = 1;
        let pred = tb(&wrong);
        let on = attachment_scores(&gold, &pred, true).unwrap();
        assert_eq!((on.scored_tokens, on.uas, on.excluded_punct), (4, 1.0, 1));
        let off = attachment_scores(&gold, &pred, false).unwrap();
        assert_eq!((off.scored_tokens, off.uas), (5, 0.8));
    }

    #[test]
    fn misalignment_names_position() {
        let gold = tb(&[("a", "NOUN", 2, "nsubj"), ("b", "VERB", 0, "root")]);
        let pred = tb(&[("a", "NOUN", 2, "nsubj"), ("x", "VERB", 0, "root")]);
        let err = attachment_scores(&gold, &pred, true).unwrap_err();
        assert!(matches!(err, EvalError::Form { sentence: 1, position: 2, .. }));
        let short = tb(&[("a", "NOUN", 0, "root")]);
        assert!(matches!(attachment_scores(&gold, &short, true), Err(EvalError::TokenCount { .. })));
    }

    #[test]
    fn report_rows_and_rounding() {
        let m = |u, l| Metrics { uas: u, las: l, ..Metrics::default() };
        let r = regime_report(&[("baseline".into(), m(0.59, 0.51)), ("mini".into(), m(0.50, 0.44)), ("transfer".into(), m(0.68, 0.62))]);
        let rows: Vec<&str> = r.text.lines().skip(1).collect();
        assert!(rows[0].ends_with("59% 51%"));
        assert!(rows[1].ends_with("50% 44%"));
        assert!(rows[2].ends_with("68% 62%"));
        assert_eq!(r.tsv.lines().count(), 4);
        assert_eq!(percent(0.6849), 68);
        assert_eq!(percent(0.685), 69);
    }
}
