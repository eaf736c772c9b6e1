//! Synthetic treebanks for a pair of closely related varieties.
//!
//! A grammar is a lexicon of word classes plus weighted clause templates.
//! Which class a noun or adjective belongs to decides its attachment
//! (kin nouns are bare possessors, person nouns are clause arguments,
//! adjectives are either pre- or post-nominal), and word forms carry no
//! trace of their class. Parsing well therefore needs lexical knowledge,
//! which is what a lexical shift between varieties takes away.
//!
//! The two varieties differ in how the recipient of a ditransitive verb is
//! realized (a dative suffix on the noun, or a separate marker token), in a
//! fraction of their word forms, and optionally in ditransitive word order.

use std::collections::HashSet;
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::save_checkpoint;
use crate::conllu::{split_treebank, write_conllu, ConlluError, DatasetRole, Sentence, Token, Treebank};
use crate::eval::{regime_report, Metrics, RegimeReport};
use crate::exec::Execution;
use crate::trainer::{evaluate, finetune_with, mix_seed, train_with, Checkpoint, Observer, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("word class {0} is empty but a template needs it")]
    EmptyClass(WordClass),
    #[error("{0}")]
    Argument(String),
    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error(transparent)]
    Conllu(#[from] ConlluError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// The eight relations every grammar uses.
pub const LABELS: [&str; 8] = ["root", "nsubj", "obj", "iobj", "case", "det", "amod", "nmod:poss"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WordClass {
    Det,
    AdjPre,
    AdjPost,
    Person,
    Kin,
    Thing,
    VerbIntr,
    VerbTr,
    VerbDitr,
}

impl WordClass {
    pub const ALL: [WordClass; 9] = [
        WordClass::Det,
        WordClass::AdjPre,
        WordClass::AdjPost,
        WordClass::Person,
        WordClass::Kin,
        WordClass::Thing,
        WordClass::VerbIntr,
        WordClass::VerbTr,
        WordClass::VerbDitr,
    ];

    pub fn upos(self) -> &'static str {
        match self {
            WordClass::Det => "DET",
            WordClass::AdjPre | WordClass::AdjPost => "ADJ",
            WordClass::Person | WordClass::Kin | WordClass::Thing => "NOUN",
            WordClass::VerbIntr | WordClass::VerbTr | WordClass::VerbDitr => "VERB",
        }
    }

    fn index(self) -> usize {
        WordClass::ALL.iter().position(|&c| c == self).expect("listed")
    }
}

impl fmt::Display for WordClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MarkerStrategy {
    /// The recipient noun carries a dative suffix.
    Suffix,
    /// A marker token (`case`) precedes the recipient.
    Marker,
}

impl FromStr for MarkerStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "suffix" => Ok(MarkerStrategy::Suffix),
            "marker" => Ok(MarkerStrategy::Marker),
            other => Err(format!("unknown marker strategy {other:?}")),
        }
    }
}

impl fmt::Display for MarkerStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MarkerStrategy::Suffix => "suffix",
            MarkerStrategy::Marker => "marker",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Template {
    /// S V
    Intransitive,
    /// S V O
    Transitive,
    /// S V O R, recipient marked per the marker strategy
    Ditransitive,
    /// S ADJ, the adjective is the root
    Adjectival,
}

/// Orders of subject, verb and object: SVO, SOV, VSO, VOS, OSV, OVS.
const ORDERS: [[Slot; 3]; 6] = [
    [Slot::S, Slot::V, Slot::O],
    [Slot::S, Slot::O, Slot::V],
    [Slot::V, Slot::S, Slot::O],
    [Slot::V, Slot::O, Slot::S],
    [Slot::O, Slot::S, Slot::V],
    [Slot::O, Slot::V, Slot::S],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    S,
    V,
    O,
    R,
}

/// Per-class word lists, most frequent first.
#[derive(Clone, Debug, PartialEq)]
pub struct Lexicon {
    pub classes: Vec<Vec<String>>,
}

impl Lexicon {
    pub fn words(&self, class: WordClass) -> &[String] {
        &self.classes[class.index()]
    }

    pub fn len(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn forms(&self) -> HashSet<&str> {
        self.classes.iter().flatten().map(String::as_str).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrammarSpec {
    pub lexicon: Lexicon,
    pub templates: Vec<(Template, f64)>,
    /// Weights over [`ORDERS`].
    pub order_weights: [f64; 6],
    pub marker_strategy: MarkerStrategy,
    pub verb_final_ditransitive: bool,
    pub dative_suffix: String,
    pub recipient_marker: String,
    pub possessive_marker: String,
    /// Probability of a determiner in a noun phrase.
    pub det_rate: f64,
    /// Continuation probability of the geometric number of pre-/post-nominal adjectives.
    pub pre_adj_rate: f64,
    pub post_adj_rate: f64,
    /// Probability of a bare kin possessor, and of a marked person possessor.
    pub kin_poss_rate: f64,
    pub marked_poss_rate: f64,
    /// Probability that a verbal clause has no overt subject.
    pub subject_drop_rate: f64,
    /// Cap on each modifier count.
    pub max_modifiers: usize,
    pub zipf_exponent: f64,
}

/// Sizes of the generated word classes, in [`WordClass::ALL`] order.
pub const DEFAULT_CLASS_SIZES: [usize; 9] = [6, 120, 120, 300, 80, 400, 80, 150, 50];

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Pronounceable stem of 2-3 syllables. Stems never contain `j`, so forms
/// ending in the dative suffix cannot collide with a stem.
fn fresh_form(rng: &mut ChaCha8Rng, taken: &mut HashSet<String>) -> String {
    loop {
        let syllables = rng.gen_range(2..=3);
        let mut s = String::new();
        for _ in 0..syllables {
            s.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
            s.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
        }
        if taken.insert(s.clone()) {
            return s;
        }
    }
}

fn reserved_forms(g: &GrammarSpec) -> HashSet<String> {
    let mut taken: HashSet<String> = g.lexicon.classes.iter().flatten().cloned().collect();
    taken.insert(g.recipient_marker.clone());
    taken.insert(g.possessive_marker.clone());
    taken
}

impl GrammarSpec {
    /// The base variety: suffix-marked recipients, free order of subject and object.
    pub fn base(class_sizes: [usize; 9], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut taken: HashSet<String> = ["na", "ot"].iter().map(|s| s.to_string()).collect();
        let classes = class_sizes.iter().map(|&n| (0..n).map(|_| fresh_form(&mut rng, &mut taken)).collect()).collect();
        GrammarSpec {
            lexicon: Lexicon { classes },
            templates: vec![
                (Template::Intransitive, 0.2),
                (Template::Transitive, 0.5),
                (Template::Ditransitive, 0.15),
                (Template::Adjectival, 0.15),
            ],
            order_weights: [1.0; 6],
            marker_strategy: MarkerStrategy::Suffix,
            verb_final_ditransitive: false,
            dative_suffix: "je".into(),
            recipient_marker: "na".into(),
            possessive_marker: "ot".into(),
            det_rate: 0.35,
            pre_adj_rate: 0.3,
            post_adj_rate: 0.25,
            kin_poss_rate: 0.2,
            marked_poss_rate: 0.15,
            subject_drop_rate: 0.4,
            max_modifiers: 3,
            zipf_exponent: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.templates.iter().map(|(_, w)| w).sum();
        if self.templates.is_empty() || (total - 1.0).abs() > 1e-9 || self.templates.iter().any(|(_, w)| *w < 0.0) {
            return Err(SynthError::Argument(format!("template weights must be non-negative and sum to 1 (sum {total})")));
        }
        if self.order_weights.iter().any(|w| *w < 0.0) || self.order_weights.iter().sum::<f64>() <= 0.0 {
            return Err(SynthError::Argument("order weights must be non-negative with a positive sum".into()));
        }
        let rates =
            [self.subject_drop_rate, self.det_rate, self.pre_adj_rate, self.post_adj_rate, self.kin_poss_rate, self.marked_poss_rate];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) || self.kin_poss_rate + self.marked_poss_rate > 1.0 {
            return Err(SynthError::Argument("modifier rates must be probabilities".into()));
        }
        if self.dative_suffix.is_empty() || self.recipient_marker.is_empty() || self.possessive_marker.is_empty() {
            return Err(SynthError::Argument("markers must be non-empty".into()));
        }
        Ok(())
    }
}

/// A contact-style difference between two varieties.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftSpec {
    pub marker_strategy: MarkerStrategy,
    /// Fraction of lexicon entries given variety-specific forms.
    pub lexical_swap_rate: f64,
    /// Ditransitive clauses become verb-final (S R O V).
    pub word_order_swap: bool,
}

/// Entries to swap in one class: ranks spread evenly over the frequency
/// list, so the swapped share of tokens tracks the swapped share of types.
fn spread_ranks(n: usize, k: usize) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    let rate = k as f64 / n as f64;
    (0..n).filter(|&r| ((r + 1) as f64 * rate + 0.5).floor() > (r as f64 * rate + 0.5).floor()).collect()
}

/// Split `total` over classes in proportion to their sizes (largest remainder).
fn apportion(sizes: &[usize], total: usize) -> Vec<usize> {
    let all: usize = sizes.iter().sum();
    if all == 0 {
        return vec![0; sizes.len()];
    }
    let exact: Vec<f64> = sizes.iter().map(|&n| total as f64 * n as f64 / all as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = total - counts.iter().sum::<usize>();
    for i in order {
        if left == 0 {
            break;
        }
        if counts[i] < sizes[i] {
            counts[i] += 1;
            left -= 1;
        }
    }
    counts
}

pub fn derive_shifted_variety(g: &GrammarSpec, s: &ShiftSpec, seed: u64) -> Result<GrammarSpec> {
    if !(0.0..=1.0).contains(&s.lexical_swap_rate) {
        return Err(SynthError::Argument(format!("swap rate {} outside [0, 1]", s.lexical_swap_rate)));
    }
    let mut out = g.clone();
    out.marker_strategy = s.marker_strategy;
    out.verb_final_ditransitive = g.verb_final_ditransitive || s.word_order_swap;
    // determiners form a closed class and keep their forms
    let sizes: Vec<usize> = WordClass::ALL.iter().map(|&c| if c == WordClass::Det { 0 } else { g.lexicon.words(c).len() }).collect();
    let open: usize = sizes.iter().sum();
    let total = ((s.lexical_swap_rate * g.lexicon.len() as f64).round() as usize).min(open);
    let per_class = apportion(&sizes, total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = reserved_forms(g);
    for (words, k) in out.lexicon.classes.iter_mut().zip(per_class) {
        for r in spread_ranks(words.len(), k) {
            words[r] = fresh_form(&mut rng, &mut taken);
        }
    }
    Ok(out)
}

struct Node {
    form: String,
    lemma: String,
    upos: &'static str,
    feats: &'static str,
    /// Local head index, or `None` for the phrase head / marker attachment.
    head: Option<usize>,
    label: &'static str,
}

/// Tokens of one phrase; `head` indexes the phrase head.
struct Phrase {
    nodes: Vec<Node>,
    head: usize,
}

struct Sampler<'g> {
    g: &'g GrammarSpec,
    class_dists: Vec<Option<WeightedIndex<f64>>>,
    template_dist: WeightedIndex<f64>,
    order_dist: WeightedIndex<f64>,
}

impl<'g> Sampler<'g> {
    fn new(g: &'g GrammarSpec) -> Result<Self> {
        g.validate()?;
        let class_dists = g
            .lexicon
            .classes
            .iter()
            .map(|words| {
                if words.is_empty() {
                    None
                } else {
                    let w: Vec<f64> = (0..words.len()).map(|r| 1.0 / ((r + 1) as f64).powf(g.zipf_exponent)).collect();
                    Some(WeightedIndex::new(w).expect("positive weights"))
                }
            })
            .collect();
        let template_dist =
            WeightedIndex::new(g.templates.iter().map(|(_, w)| *w)).map_err(|e| SynthError::Argument(format!("template weights: {e}")))?;
        let order_dist = WeightedIndex::new(g.order_weights).map_err(|e| SynthError::Argument(format!("order weights: {e}")))?;
        Ok(Sampler { g, class_dists, template_dist, order_dist })
    }

    fn word(&self, class: WordClass, rng: &mut ChaCha8Rng) -> Result<String> {
        let dist = self.class_dists[class.index()].as_ref().ok_or(SynthError::EmptyClass(class))?;
        Ok(self.g.lexicon.words(class)[dist.sample(rng)].clone())
    }

    fn node(&self, class: WordClass, head: Option<usize>, label: &'static str, rng: &mut ChaCha8Rng) -> Result<Node> {
        let form = self.word(class, rng)?;
        Ok(Node { lemma: form.clone(), form, upos: class.upos(), feats: "_", head, label })
    }

    fn count(&self, rate: f64, rng: &mut ChaCha8Rng) -> usize {
        let mut n = 0;
        while n < self.g.max_modifiers && rng.gen_bool(rate) {
            n += 1;
        }
        n
    }

    /// `[kin] [det] adj* NOUN adj* [ot person]`. Draws are the same for every
    /// marker strategy, so paired grammars generate aligned sentences.
    fn noun_phrase(&self, class: WordClass, label: &'static str, recipient: bool, rng: &mut ChaCha8Rng) -> Result<Phrase> {
        let poss_roll: f64 = rng.gen();
        let kin = poss_roll < self.g.kin_poss_rate;
        let marked = !kin && poss_roll < self.g.kin_poss_rate + self.g.marked_poss_rate;
        let det = rng.gen_bool(self.g.det_rate);
        let pre = self.count(self.g.pre_adj_rate, rng);
        let post = self.count(self.g.post_adj_rate, rng);

        let mut nodes = Vec::new();
        let mut dependents = Vec::new();
        if recipient && self.g.marker_strategy == MarkerStrategy::Marker {
            dependents.push(nodes.len());
            nodes.push(Node {
                form: self.g.recipient_marker.clone(),
                lemma: self.g.recipient_marker.clone(),
                upos: "ADP",
                feats: "_",
                head: None,
                label: "case",
            });
        }
        if kin {
            dependents.push(nodes.len());
            nodes.push(self.node(WordClass::Kin, None, "nmod:poss", rng)?);
        }
        if det {
            dependents.push(nodes.len());
            nodes.push(self.node(WordClass::Det, None, "det", rng)?);
        }
        for _ in 0..pre {
            dependents.push(nodes.len());
            nodes.push(self.node(WordClass::AdjPre, None, "amod", rng)?);
        }
        let head = nodes.len();
        let mut noun = self.node(class, None, label, rng)?;
        if recipient && self.g.marker_strategy == MarkerStrategy::Suffix {
            noun.form.push_str(&self.g.dative_suffix);
            noun.feats = "Case=Dat";
        }
        nodes.push(noun);
        for _ in 0..post {
            dependents.push(nodes.len());
            nodes.push(self.node(WordClass::AdjPost, None, "amod", rng)?);
        }
        if marked {
            let possessor = nodes.len() + 1;
            nodes.push(Node {
                form: self.g.possessive_marker.clone(),
                lemma: self.g.possessive_marker.clone(),
                upos: "ADP",
                feats: "_",
                head: Some(possessor),
                label: "case",
            });
            dependents.push(possessor);
            nodes.push(self.node(WordClass::Person, None, "nmod:poss", rng)?);
        }
        for d in dependents {
            nodes[d].head = Some(head);
        }
        Ok(Phrase { nodes, head })
    }

    fn single(&self, class: WordClass, label: &'static str, rng: &mut ChaCha8Rng) -> Result<Phrase> {
        Ok(Phrase { nodes: vec![self.node(class, None, label, rng)?], head: 0 })
    }

    fn sentence(&self, rng: &mut ChaCha8Rng) -> Result<Vec<Token>> {
        let template = self.g.templates[self.template_dist.sample(rng)].0;
        let order = ORDERS[self.order_dist.sample(rng)];
        let drop_subject = rng.gen_bool(self.g.subject_drop_rate) && template != Template::Adjectival;
        let (slots, phrases): (Vec<Slot>, Vec<Phrase>) = match template {
            Template::Intransitive => {
                let v = self.single(WordClass::VerbIntr, "root", rng)?;
                let s = self.noun_phrase(WordClass::Person, "nsubj", false, rng)?;
                let sv: Vec<Slot> = order.iter().copied().filter(|&x| x != Slot::O).collect();
                (sv, vec![s, v])
            }
            Template::Transitive => {
                let v = self.single(WordClass::VerbTr, "root", rng)?;
                let s = self.noun_phrase(WordClass::Person, "nsubj", false, rng)?;
                let o = self.noun_phrase(WordClass::Thing, "obj", false, rng)?;
                (order.to_vec(), vec![s, v, o])
            }
            Template::Ditransitive => {
                let v = self.single(WordClass::VerbDitr, "root", rng)?;
                let s = self.noun_phrase(WordClass::Person, "nsubj", false, rng)?;
                let o = self.noun_phrase(WordClass::Thing, "obj", false, rng)?;
                let r = self.noun_phrase(WordClass::Person, "iobj", true, rng)?;
                let slots = if self.g.verb_final_ditransitive {
                    vec![Slot::S, Slot::R, Slot::O, Slot::V]
                } else {
                    let mut slots = order.to_vec();
                    let v_at = slots.iter().position(|&x| x == Slot::V).expect("verb slot");
                    let at = if v_at + 1 < slots.len() { v_at + 1 } else { v_at };
                    slots.insert(at, Slot::R);
                    slots
                };
                (slots, vec![s, v, o, r])
            }
            Template::Adjectival => {
                let class = if rng.gen_bool(0.5) { WordClass::Person } else { WordClass::Thing };
                let s = self.noun_phrase(class, "nsubj", false, rng)?;
                let adj_class = if rng.gen_bool(0.5) { WordClass::AdjPre } else { WordClass::AdjPost };
                let a = self.single(adj_class, "root", rng)?;
                (vec![Slot::S, Slot::V], vec![s, a])
            }
        };
        let phrase_of = |slot: Slot| match slot {
            Slot::S => 0,
            Slot::V => 1,
            Slot::O => 2,
            Slot::R => 3,
        };
        // 1-based position of the first token of each phrase
        let mut start = [0usize; 4];
        let mut next = 1;
        let slots: Vec<Slot> = slots.into_iter().filter(|&x| !(drop_subject && x == Slot::S)).collect();
        for &slot in &slots {
            start[phrase_of(slot)] = next;
            next += phrases[phrase_of(slot)].nodes.len();
        }
        let root = start[1] + phrases[1].head;
        let mut tokens = Vec::with_capacity(next - 1);
        for &slot in &slots {
            let p = phrase_of(slot);
            for (k, node) in phrases[p].nodes.iter().enumerate() {
                let head = match node.head {
                    Some(local) => start[p] + local,
                    None if p == 1 && k == phrases[1].head => 0,
                    None => root,
                };
                let mut t = Token::new(tokens.len() + 1, node.form.as_str()).with_upos(node.upos).with_head(head, node.label);
                t.lemma = node.lemma.clone();
                t.feats = node.feats.to_owned();
                tokens.push(t);
            }
        }
        Ok(tokens)
    }
}

/// `n_sentences` seeded sentences from `g`.
pub fn generate_treebank(g: &GrammarSpec, n_sentences: usize, seed: u64) -> Result<Treebank> {
    if n_sentences == 0 {
        return Err(SynthError::Argument("n_sentences must be >= 1".into()));
    }
    let sampler = Sampler::new(g)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sentences = Vec::with_capacity(n_sentences);
    for k in 0..n_sentences {
        let tokens = sampler.sentence(&mut rng)?;
        let text = tokens.iter().map(|t| t.form.as_str()).collect::<Vec<_>>().join(" ");
        let mut s = Sentence::new(tokens);
        s.comments = vec![format!("# sent_id = {seed:x}-{}", k + 1), format!("# text = {text}")];
        sentences.push(s);
    }
    Ok(Treebank::new(sentences))
}

/// Fraction of non-marker tokens in `tb` whose form is not in `lexicon`.
/// Dative-suffixed forms count by their lemma.
pub fn foreign_token_share(tb: &Treebank, lexicon: &Lexicon) -> f64 {
    let forms = lexicon.forms();
    let (mut foreign, mut total) = (0usize, 0usize);
    for t in tb.sentences.iter().flat_map(|s| &s.tokens) {
        if t.upos == "ADP" {
            continue;
        }
        total += 1;
        if !forms.contains(t.lemma.as_str()) {
            foreign += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        foreign as f64 / total as f64
    }
}

/// Modifier and pro-drop probabilities shared by both varieties.
#[derive(Clone, Debug, PartialEq)]
pub struct PhraseRates {
    pub det: f64,
    pub pre_adj: f64,
    pub post_adj: f64,
    pub kin_poss: f64,
    pub marked_poss: f64,
    pub subject_drop: f64,
}

impl PhraseRates {
    pub fn of(g: &GrammarSpec) -> Self {
        PhraseRates {
            det: g.det_rate,
            pre_adj: g.pre_adj_rate,
            post_adj: g.post_adj_rate,
            kin_poss: g.kin_poss_rate,
            marked_poss: g.marked_poss_rate,
            subject_drop: g.subject_drop_rate,
        }
    }

    pub fn apply(&self, g: &mut GrammarSpec) {
        g.det_rate = self.det;
        g.pre_adj_rate = self.pre_adj;
        g.post_adj_rate = self.post_adj;
        g.kin_poss_rate = self.kin_poss;
        g.marked_poss_rate = self.marked_poss;
        g.subject_drop_rate = self.subject_drop;
    }
}

const RATE_KEYS: [&str; 6] = ["det_rate", "pre_adj_rate", "post_adj_rate", "kin_poss_rate", "marked_poss_rate", "subject_drop_rate"];

impl PhraseRates {
    fn slot(&mut self, key: &str) -> Option<&mut f64> {
        match key {
            "det_rate" => Some(&mut self.det),
            "pre_adj_rate" => Some(&mut self.pre_adj),
            "post_adj_rate" => Some(&mut self.post_adj),
            "kin_poss_rate" => Some(&mut self.kin_poss),
            "marked_poss_rate" => Some(&mut self.marked_poss),
            "subject_drop_rate" => Some(&mut self.subject_drop),
            _ => None,
        }
    }
}

/// Lexicon sizes for the transfer experiment: flat frequencies and classes
/// large enough that 2000 sentences see most lexemes a handful of times
/// while 520 sentences miss about half of them.
pub const EXPERIMENT_CLASS_SIZES: [usize; 9] = [6, 500, 500, 400, 400, 300, 80, 150, 50];

/// Everything that defines one transfer experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub a_sentences: usize,
    pub b_sentences: usize,
    pub b_train_fraction: f64,
    pub c_sentences: usize,
    pub class_sizes: [usize; 9],
    pub zipf_exponent: f64,
    /// Weights over the six S/V/O orders (SVO, SOV, VSO, VOS, OSV, OVS).
    pub order_weights: [f64; 6],
    pub rates: PhraseRates,
    pub shift: ShiftSpec,
    pub train: TrainConfig,
    pub finetune_lr_scale: f64,
    pub finetune_patience: usize,
    pub finetune_max_epochs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        // Raw tokens only: gold UPOS would give away most of the structure
        // that the two varieties are meant to disagree on.
        let train = TrainConfig {
            max_epochs: 100,
            patience: 10,
            batch_size: 16,
            dims: crate::model::ModelDims {
                word_dim: 64,
                char_dim: 16,
                char_hidden: 32,
                feat_dim: 0,
                lstm_hidden: 96,
                lstm_layers: 2,
                arc_dim: 96,
                rel_dim: 48,
            },
            ..TrainConfig::default()
        };
        ExperimentConfig {
            seed: 1,
            a_sentences: 2000,
            b_sentences: 650,
            b_train_fraction: 0.8,
            c_sentences: 90,
            class_sizes: EXPERIMENT_CLASS_SIZES,
            zipf_exponent: 0.0,
            order_weights: [0.1, 0.3, 0.3, 0.1, 0.1, 0.1],
            rates: PhraseRates {
                pre_adj: 0.4,
                post_adj: 0.4,
                kin_poss: 0.5,
                subject_drop: 0.4,
                ..PhraseRates::of(&GrammarSpec::base(DEFAULT_CLASS_SIZES, 0))
            },
            shift: ShiftSpec { marker_strategy: MarkerStrategy::Marker, lexical_swap_rate: 0.3, word_order_swap: false },
            train,
            finetune_lr_scale: 0.5,
            finetune_patience: 10,
            finetune_max_epochs: 30,
        }
    }
}

fn config_err(key: &str, message: impl Into<String>) -> SynthError {
    SynthError::Config { key: key.to_owned(), message: message.into() }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| config_err(key, format!("cannot parse {value:?}")))
}

const CLASS_KEYS: [&str; 9] = [
    "size_det",
    "size_adj_pre",
    "size_adj_post",
    "size_person",
    "size_kin",
    "size_thing",
    "size_verb_intr",
    "size_verb_tr",
    "size_verb_ditr",
];

impl ExperimentConfig {
    /// Apply `key=value` lines. Keys not owned by the experiment are passed
    /// on to the training configuration.
    pub fn overlay(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| config_err(line, "expected key=value"))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "a_sentences" => self.a_sentences = parse(key, value)?,
            "b_sentences" => self.b_sentences = parse(key, value)?,
            "b_train_fraction" => self.b_train_fraction = parse(key, value)?,
            "c_sentences" => self.c_sentences = parse(key, value)?,
            "zipf_exponent" => self.zipf_exponent = parse(key, value)?,
            "order_weights" => {
                let ws = value.split(',').map(|w| parse::<f64>(key, w.trim())).collect::<Result<Vec<_>>>()?;
                self.order_weights = ws.try_into().map_err(|_| config_err(key, "expected six comma-separated weights"))?;
            }
            "marker_strategy" => self.shift.marker_strategy = value.parse().map_err(|e: String| config_err(key, e))?,
            "lexical_swap_rate" => self.shift.lexical_swap_rate = parse(key, value)?,
            "word_order_swap" => self.shift.word_order_swap = parse(key, value)?,
            "finetune_lr_scale" => self.finetune_lr_scale = parse(key, value)?,
            "finetune_patience" => self.finetune_patience = parse(key, value)?,
            "finetune_max_epochs" => self.finetune_max_epochs = parse(key, value)?,
            _ => {
                if let Some(i) = CLASS_KEYS.iter().position(|&c| c == key) {
                    self.class_sizes[i] = parse(key, value)?;
                } else if let Some(slot) = self.rates.slot(key) {
                    *slot = parse(key, value)?;
                } else {
                    self.train.set(key, value)?;
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "a_sentences={}", self.a_sentences);
        let _ = writeln!(out, "b_sentences={}", self.b_sentences);
        let _ = writeln!(out, "b_train_fraction={}", self.b_train_fraction);
        let _ = writeln!(out, "c_sentences={}", self.c_sentences);
        let _ = writeln!(out, "zipf_exponent={}", self.zipf_exponent);
        let ws: Vec<String> = self.order_weights.iter().map(|w| w.to_string()).collect();
        let _ = writeln!(out, "order_weights={}", ws.join(","));
        let _ = writeln!(out, "marker_strategy={}", self.shift.marker_strategy);
        let _ = writeln!(out, "lexical_swap_rate={}", self.shift.lexical_swap_rate);
        let _ = writeln!(out, "word_order_swap={}", self.shift.word_order_swap);
        let _ = writeln!(out, "finetune_lr_scale={}", self.finetune_lr_scale);
        let _ = writeln!(out, "finetune_patience={}", self.finetune_patience);
        let _ = writeln!(out, "finetune_max_epochs={}", self.finetune_max_epochs);
        for (k, n) in CLASS_KEYS.iter().zip(self.class_sizes) {
            let _ = writeln!(out, "{k}={n}");
        }
        let mut rates = self.rates.clone();
        for k in RATE_KEYS {
            let _ = writeln!(out, "{k}={}", rates.slot(k).expect("rate key"));
        }
        let train = self.train.to_text();
        out.push_str(train.lines().filter(|l| !l.starts_with("seed=")).map(|l| format!("{l}\n")).collect::<String>().as_str());
        out
    }
}

/// The generated data of one experiment.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub grammar_a: GrammarSpec,
    pub grammar_b: GrammarSpec,
    pub a: Treebank,
    pub b_train: Treebank,
    pub b_dev: Treebank,
    pub c: Treebank,
}

pub fn build_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    let seed = cfg.seed;
    let mut grammar_a = GrammarSpec::base(cfg.class_sizes, mix_seed(&[seed, 1]));
    grammar_a.zipf_exponent = cfg.zipf_exponent;
    grammar_a.order_weights = cfg.order_weights;
    cfg.rates.apply(&mut grammar_a);
    grammar_a.validate()?;
    let grammar_b = derive_shifted_variety(&grammar_a, &cfg.shift, mix_seed(&[seed, 2]))?;
    let a = generate_treebank(&grammar_a, cfg.a_sentences, mix_seed(&[seed, 3]))?;
    let (b_train, b_dev) = if cfg.b_sentences == 0 {
        (Treebank::default(), Treebank::default())
    } else {
        let b = generate_treebank(&grammar_b, cfg.b_sentences, mix_seed(&[seed, 5]))?;
        split_treebank(&b, cfg.b_train_fraction, mix_seed(&[seed, 6]))?
    };
    // a separate stream stands in for held-out speakers
    let c = generate_treebank(&grammar_b, cfg.c_sentences, mix_seed(&[seed, 7]))?;
    Ok(Datasets {
        grammar_a,
        grammar_b,
        a: a.with_role(DatasetRole::DatasetA),
        b_train: b_train.with_role(DatasetRole::DatasetBTrain),
        b_dev: b_dev.with_role(DatasetRole::DatasetBDev),
        c: c.with_role(DatasetRole::DatasetC),
    })
}

pub const REGIME_A: &str = "A-only";
pub const REGIME_B: &str = "B-only";
pub const REGIME_AB: &str = "A->B";

pub struct ExperimentResult {
    pub results: Vec<(String, Metrics)>,
    pub report: RegimeReport,
    pub checkpoints: Vec<(String, Checkpoint)>,
}

impl ExperimentResult {
    pub fn metrics(&self, regime: &str) -> Option<&Metrics> {
        self.results.iter().find(|(n, _)| n == regime).map(|(_, m)| m)
    }
}

/// Write the config and the four treebanks into `dir`, creating it if needed.
/// Returns the paths written.
pub fn write_datasets(cfg: &ExperimentConfig, data: &Datasets, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = vec![dir.join("experiment.cfg")];
    std::fs::write(&written[0], cfg.to_text())?;
    for (name, tb) in [("a", &data.a), ("b_train", &data.b_train), ("b_dev", &data.b_dev), ("c_test", &data.c)] {
        let path = dir.join(format!("{name}.conllu"));
        std::fs::write(&path, write_conllu(tb)?)?;
        written.push(path);
    }
    Ok(written)
}

/// Train the three regimes and score each on C. With `out_dir`, datasets,
/// checkpoints and the report are written there.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_dir: Option<&Path>,
    exec: Execution,
    observer: &mut dyn Observer,
) -> Result<ExperimentResult> {
    let data = build_datasets(cfg)?;
    if let Some(dir) = out_dir {
        write_datasets(cfg, &data, dir)?;
    }
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.seed;
    let mut results = Vec::new();
    let mut checkpoints = Vec::new();

    observer.notice(&format!("regime {REGIME_A}: training on {} sentences", data.a.len()));
    // model selection uses the target-variety dev set whenever there is one
    let a_only = if data.b_dev.is_empty() {
        let (train, dev) = split_treebank(&data.a, 0.9, mix_seed(&[cfg.seed, 4]))?;
        observer.notice(&format!("no B dev set: selecting on {} held-out A sentences", dev.len()));
        train_with(&train_cfg, &train, &dev, exec, observer)?
    } else {
        train_with(&train_cfg, &data.a, &data.b_dev, exec, observer)?
    };
    results.push((REGIME_A.to_owned(), evaluate(&a_only.parser, &data.c, true, true, exec)?.0));

    if data.b_train.is_empty() || data.b_dev.is_empty() {
        observer.notice(&format!("B training data is empty: regimes {REGIME_B} and {REGIME_AB} skipped"));
        checkpoints.push((REGIME_A.to_owned(), a_only));
    } else {
        observer.notice(&format!("regime {REGIME_B}: training on {} sentences", data.b_train.len()));
        let b_only = train_with(&train_cfg, &data.b_train, &data.b_dev, exec, observer)?;
        results.push((REGIME_B.to_owned(), evaluate(&b_only.parser, &data.c, true, true, exec)?.0));

        observer.notice(&format!("regime {REGIME_AB}: fine-tuning on {} sentences", data.b_train.len()));
        let mut ft_cfg = TrainConfig::finetune_from(&train_cfg);
        ft_cfg.learning_rate = cfg.finetune_lr_scale * train_cfg.learning_rate;
        ft_cfg.patience = cfg.finetune_patience;
        ft_cfg.max_epochs = cfg.finetune_max_epochs;
        let tuned = finetune_with(&a_only, &ft_cfg, &data.b_train, &data.b_dev, exec, observer)?;
        results.push((REGIME_AB.to_owned(), evaluate(&tuned.parser, &data.c, true, true, exec)?.0));
        checkpoints.push((REGIME_A.to_owned(), a_only));
        checkpoints.push((REGIME_B.to_owned(), b_only));
        checkpoints.push((REGIME_AB.to_owned(), tuned));
    }

    let report = regime_report(&results);
    if let Some(dir) = out_dir {
        for (name, ck) in &checkpoints {
            let file = name.replace("->", "_to_").to_lowercase();
            save_checkpoint(ck, &dir.join(format!("{file}.ckpt")))?;
        }
        std::fs::write(dir.join("report.txt"), &report.text)?;
        std::fs::write(dir.join("report.tsv"), &report.tsv)?;
    }
    Ok(ExperimentResult { results, report, checkpoints })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conllu::{read_conllu, validate_tree};

    fn small() -> GrammarSpec {
        GrammarSpec::base([3, 10, 10, 20, 8, 30, 8, 10, 5], 11)
    }

    #[test]
    fn forced_intransitive_template() {
        let mut g = small();
        g.templates = vec![(Template::Intransitive, 1.0)];
        g.order_weights = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        g.subject_drop_rate = 0.0;
        g.det_rate = 0.0;
        g.pre_adj_rate = 0.0;
        g.post_adj_rate = 0.0;
        g.kin_poss_rate = 0.0;
        g.marked_poss_rate = 0.0;
        let tb = generate_treebank(&g, 1, 3).unwrap();
        let s = &tb.sentences[0];
        assert_eq!(s.len(), 2);
        assert_eq!(s.heads(), vec![Some(2), Some(0)]);
        assert_eq!((s.tokens[0].deprel.as_str(), s.tokens[1].deprel.as_str()), ("nsubj", "root"));
        assert_eq!((s.tokens[0].upos.as_str(), s.tokens[1].upos.as_str()), ("NOUN", "VERB"));
    }

    #[test]
    fn generated_sentences_are_trees_with_shared_labels() {
        let g = small();
        let b = derive_shifted_variety(
            &g,
            &ShiftSpec { marker_strategy: MarkerStrategy::Marker, lexical_swap_rate: 0.3, word_order_swap: true },
            5,
        )
        .unwrap();
        let mut seen_a = HashSet::new();
        let mut seen_b = HashSet::new();
        for (grammar, seen) in [(&g, &mut seen_a), (&b, &mut seen_b)] {
            let tb = generate_treebank(grammar, 400, 9).unwrap();
            for s in &tb.sentences {
                assert!(validate_tree(s).is_tree, "{:?}", s);
                for t in &s.tokens {
                    assert!(LABELS.contains(&t.deprel.as_str()));
                    seen.insert(t.deprel.clone());
                }
            }
            let text = write_conllu(&tb).unwrap();
            assert_eq!(write_conllu(&read_conllu(&text).unwrap()).unwrap(), text);
        }
        assert_eq!(seen_a, seen_b);
        assert_eq!(seen_a.len(), LABELS.len());
    }

    #[test]
    fn marker_attaches_to_recipient() {
        let mut g = small();
        g.marker_strategy = MarkerStrategy::Marker;
        g.templates = vec![(Template::Ditransitive, 1.0)];
        let tb = generate_treebank(&g, 50, 2).unwrap();
        for s in &tb.sentences {
            let marker = s.tokens.iter().find(|t| t.form == "na").expect("marker present");
            let head = &s.tokens[marker.head.unwrap() - 1];
            assert_eq!((marker.deprel.as_str(), head.deprel.as_str()), ("case", "iobj"));
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let g = small();
        let a = write_conllu(&generate_treebank(&g, 30, 4).unwrap()).unwrap();
        let b = write_conllu(&generate_treebank(&g, 30, 4).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_shift() {
        let g = small();
        let same = ShiftSpec { marker_strategy: g.marker_strategy, lexical_swap_rate: 0.0, word_order_swap: false };
        assert_eq!(derive_shifted_variety(&g, &same, 1).unwrap(), g);
    }

    #[test]
    fn marker_flip_adds_exactly_one_token() {
        let mut g = small();
        g.templates = vec![(Template::Ditransitive, 1.0)];
        let flip = ShiftSpec { marker_strategy: MarkerStrategy::Marker, lexical_swap_rate: 0.0, word_order_swap: false };
        let b = derive_shifted_variety(&g, &flip, 1).unwrap();
        let ta = generate_treebank(&g, 40, 6).unwrap();
        let tb = generate_treebank(&b, 40, 6).unwrap();
        for (x, y) in ta.sentences.iter().zip(&tb.sentences) {
            assert_eq!(x.len() + 1, y.len());
        }
    }

    #[test]
    fn swap_count_is_exact_and_bijective() {
        let g = GrammarSpec::base([10, 10, 10, 10, 10, 20, 10, 10, 10], 2);
        assert_eq!(g.lexicon.len(), 100);
        let s = ShiftSpec { marker_strategy: MarkerStrategy::Suffix, lexical_swap_rate: 0.3, word_order_swap: false };
        let b = derive_shifted_variety(&g, &s, 8).unwrap();
        let changed = g.lexicon.classes.iter().flatten().zip(b.lexicon.classes.iter().flatten()).filter(|(x, y)| x != y).count();
        assert_eq!(changed, 30);
        let forms_b: HashSet<&str> = b.lexicon.forms();
        assert_eq!(forms_b.len(), 100);
        let forms_a = g.lexicon.forms();
        assert_eq!(forms_b.difference(&forms_a).count(), 30);
    }

    #[test]
    fn apportion_and_spread() {
        assert_eq!(apportion(&[10, 10, 10], 10).iter().sum::<usize>(), 10);
        assert_eq!(apportion(&[0, 5], 2), vec![0, 2]);
        assert_eq!(spread_ranks(10, 3).len(), 3);
        assert_eq!(spread_ranks(7, 7), (0..7).collect::<Vec<_>>());
        assert!(spread_ranks(5, 0).is_empty());
    }

    #[test]
    fn empty_class_is_reported() {
        let mut g = small();
        g.lexicon.classes[WordClass::VerbIntr.index()].clear();
        g.templates = vec![(Template::Intransitive, 1.0)];
        assert!(matches!(generate_treebank(&g, 1, 1), Err(SynthError::EmptyClass(WordClass::VerbIntr))));
    }

    #[test]
    fn swapped_token_share_tracks_the_rate() {
        let g = GrammarSpec::base(DEFAULT_CLASS_SIZES, 3);
        let s = ShiftSpec { marker_strategy: MarkerStrategy::Marker, lexical_swap_rate: 0.3, word_order_swap: false };
        let b = derive_shifted_variety(&g, &s, 4).unwrap();
        let tb = generate_treebank(&b, 2000, 5).unwrap();
        let share = foreign_token_share(&tb, &g.lexicon);
        assert!((share - 0.3).abs() <= 0.05, "share {share}");
    }

    #[test]
    fn experiment_config_round_trip() {
        let mut c = ExperimentConfig::default();
        c.overlay("seed=4\nmarker_strategy=suffix\nsize_kin=7\nlstm_hidden=12\nkin_poss_rate=0.5\n").unwrap();
        assert_eq!(c.rates.kin_poss, 0.5);
        assert_eq!((c.seed, c.shift.marker_strategy, c.class_sizes[4], c.train.dims.lstm_hidden), (4, MarkerStrategy::Suffix, 7, 12));
        let mut d = ExperimentConfig::default();
        d.overlay(&c.to_text()).unwrap();
        assert_eq!(c, d);
        assert!(c.overlay("nonsense=1").is_err());
    }
}
