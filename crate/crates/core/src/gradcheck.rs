//! Finite-difference checks of the parser objective on a small model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_difference_check, AutodiffError, GradCheckReport, Tape, Var};
use crate::conllu::{Sentence, Token, Treebank};
use crate::model::{batch_loss, sentence_loss, Mode, ModelDims, ModelParams};
use crate::vocab::{build_vocab, encode_sentence};

pub const EPSILON: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Dimensions small enough to difference every scalar in well under a minute.
pub fn small_dims() -> ModelDims {
    ModelDims { word_dim: 8, char_dim: 4, char_hidden: 4, feat_dim: 4, lstm_hidden: 8, lstm_layers: 2, arc_dim: 8, rel_dim: 4 }
}

/// One four-token sentence using exactly three relation labels.
pub fn fixture() -> Treebank {
    let rows = [("the", "DET", 2, "det"), ("dog", "NOUN", 3, "nsubj"), ("saw", "VERB", 0, "root"), ("us", "PRON", 3, "nsubj")];
    Treebank::new(vec![Sentence::new(
        rows.iter().enumerate().map(|(i, (f, p, h, d))| Token::new(i + 1, *f).with_upos(*p).with_head(*h, *d)).collect(),
    )])
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.max_relative_error < TOLERANCE
    }
}

#[derive(Clone, Copy)]
enum Objective {
    Full,
    Arc,
    Rel,
}

/// Full objective (with L2), arc term alone and label term alone, each
/// checked over every parameter.
pub fn run_suite(seed: u64) -> Result<Vec<CaseResult>, AutodiffError> {
    let tb = fixture();
    let vocab = build_vocab(&tb, 1);
    let es = encode_sentence(&vocab, &tb.sentences[0]).map_err(|e| AutodiffError::Argument(e.to_string()))?;
    let mut params = ModelParams::init(&small_dims(), &vocab, seed);
    // the biaffine weights start at zero, which would hide their second-order paths
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for id in params.scorer.arc_param_ids().into_iter().chain(params.scorer.rel_param_ids()) {
        let shape = params.store.value(id).shape().to_vec();
        params.store.get_mut(id).value = crate::encoder::uniform(&shape, 0.5, &mut rng);
    }
    let handles = params.clone();
    let cases = [("full objective", Objective::Full), ("arc loss", Objective::Arc), ("label loss", Objective::Rel)];
    cases
        .into_iter()
        .map(|(name, objective)| {
            let report = finite_difference_check(&mut params.store, EPSILON, |tape: &mut Tape| -> Result<Var, AutodiffError> {
                match objective {
                    Objective::Full => Ok(batch_loss(tape, &handles, std::slice::from_ref(&es), 1e-3, &mut Mode::Eval)?.2),
                    Objective::Arc => Ok(sentence_loss(tape, &handles, &es, &mut Mode::Eval)?.arc),
                    Objective::Rel => sentence_loss(tape, &handles, &es, &mut Mode::Eval)?
                        .rel
                        .ok_or_else(|| AutodiffError::Argument("fixture has no labels".into())),
                }
            })?;
            Ok(CaseResult { name, report })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for case in run_suite(3).unwrap() {
            assert!(case.passed(), "{}: {:?}", case.name, case.report);
        }
    }
}
