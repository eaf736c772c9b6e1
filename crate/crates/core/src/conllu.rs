//! CoNLL-U treebank reading, validation and writing.
//!
//! Tokens keep every column verbatim so that a canonical file survives a
//! read/write cycle byte for byte. Multiword-token ranges (`3-4`) and empty
//! nodes (`3.1`) are kept as opaque lines and never reach the parser.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConlluError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("sentence {sentence}: {message}")]
    Structure { sentence: String, message: String },

    #[error("invalid argument: {0}")]
    Argument(String),
}

/// One syntactic word.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub id: usize,
    pub form: String,
    pub lemma: String,
    pub upos: String,
    pub xpos: String,
    pub feats: String,
    /// `None` when the HEAD column is `_` (unannotated input).
    pub head: Option<usize>,
    pub deprel: String,
    pub deps: String,
    pub misc: String,
}

impl Token {
    /// A token with empty (`_`) annotation columns.
    pub fn new(id: usize, form: impl Into<String>) -> Self {
        Token {
            id,
            form: form.into(),
            lemma: "_".into(),
            upos: "_".into(),
            xpos: "_".into(),
            feats: "_".into(),
            head: None,
            deprel: "_".into(),
            deps: "_".into(),
            misc: "_".into(),
        }
    }

    pub fn with_upos(mut self, upos: impl Into<String>) -> Self {
        self.upos = upos.into();
        self
    }

    pub fn with_head(mut self, head: usize, deprel: impl Into<String>) -> Self {
        self.head = Some(head);
        self.deprel = deprel.into();
        self
    }

    /// FEATS as ordered key/value pairs.
    pub fn feats(&self) -> Vec<(&str, &str)> {
        if is_empty_field(&self.feats) {
            return Vec::new();
        }
        self.feats
            .split('|')
            .map(|kv| match kv.split_once('=') {
                Some((k, v)) => (k, v),
                None => (kv, ""),
            })
            .collect()
    }

    pub fn has_deprel(&self) -> bool {
        !is_empty_field(&self.deprel)
    }
}

fn is_empty_field(s: &str) -> bool {
    s.is_empty() || s == "_"
}

/// A line that is carried through unchanged: multiword ranges and empty nodes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Passthrough {
    /// Number of regular tokens preceding this line.
    pub position: usize,
    pub line: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<Token>,
    /// Comment lines including the leading `#`.
    pub comments: Vec<String>,
    pub passthrough: Vec<Passthrough>,
}

impl Sentence {
    pub fn new(tokens: Vec<Token>) -> Self {
        Sentence { tokens, ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Value of a `# sent_id = ...` comment, or the empty string.
    pub fn sent_id(&self) -> &str {
        self.comments
            .iter()
            .find_map(|c| {
                let rest = c.strip_prefix('#')?.trim_start();
                let rest = rest.strip_prefix("sent_id")?.trim_start();
                Some(rest.strip_prefix('=')?.trim())
            })
            .unwrap_or("")
    }

    /// Heads of tokens `1..=n`; missing heads map to `None`.
    pub fn heads(&self) -> Vec<Option<usize>> {
        self.tokens.iter().map(|t| t.head).collect()
    }

    fn label(&self, index: usize) -> String {
        match self.sent_id() {
            "" => format!("#{}", index + 1),
            id => format!("#{} ({})", index + 1, id),
        }
    }

    fn check_structure(&self, index: usize) -> Result<(), ConlluError> {
        let n = self.tokens.len();
        let err = |message: String| ConlluError::Structure { sentence: self.label(index), message };
        for (i, token) in self.tokens.iter().enumerate() {
            if token.id != i + 1 {
                return Err(err(format!("token ids must be consecutive from 1, found {} at position {}", token.id, i + 1)));
            }
            if let Some(head) = token.head {
                if head > n {
                    return Err(err(format!("head {} of token {} is outside [0, {}]", head, token.id, n)));
                }
                if !token.has_deprel() {
                    return Err(err(format!("token {} has a head but no deprel", token.id)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DatasetRole {
    DatasetA,
    DatasetBTrain,
    DatasetBDev,
    DatasetC,
    #[default]
    Other,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Treebank {
    pub sentences: Vec<Sentence>,
    pub source_tag: DatasetRole,
}

impl Treebank {
    pub fn new(sentences: Vec<Sentence>) -> Self {
        Treebank { sentences, source_tag: DatasetRole::Other }
    }

    pub fn with_role(mut self, role: DatasetRole) -> Self {
        self.source_tag = role;
        self
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(Sentence::len).sum()
    }
}

impl FromStr for Treebank {
    type Err = ConlluError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        read_conllu(s)
    }
}

impl fmt::Display for Treebank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match write_conllu(self) {
            Ok(s) => f.write_str(&s),
            Err(_) => Err(fmt::Error),
        }
    }
}

enum LineKind {
    Word(usize),
    Range,
    Empty,
}

fn classify_id(id: &str, line: usize) -> Result<LineKind, ConlluError> {
    let parse_err = || ConlluError::Parse { line, message: format!("invalid token id '{}'", id) };
    if let Some((a, b)) = id.split_once('-') {
        a.parse::<usize>().map_err(|_| parse_err())?;
        b.parse::<usize>().map_err(|_| parse_err())?;
        Ok(LineKind::Range)
    } else if let Some((a, b)) = id.split_once('.') {
        a.parse::<usize>().map_err(|_| parse_err())?;
        b.parse::<usize>().map_err(|_| parse_err())?;
        Ok(LineKind::Empty)
    } else {
        let id = id.parse::<usize>().map_err(|_| parse_err())?;
        if id == 0 {
            return Err(parse_err());
        }
        Ok(LineKind::Word(id))
    }
}

fn parse_token(fields: &[&str], id: usize, line: usize) -> Result<Token, ConlluError> {
    let head = match fields[6] {
        "_" => None,
        h => Some(h.parse::<usize>().map_err(|_| ConlluError::Parse { line, message: format!("invalid head '{}'", h) })?),
    };
    Ok(Token {
        id,
        form: fields[1].to_owned(),
        lemma: fields[2].to_owned(),
        upos: fields[3].to_owned(),
        xpos: fields[4].to_owned(),
        feats: fields[5].to_owned(),
        head,
        deprel: fields[7].to_owned(),
        deps: fields[8].to_owned(),
        misc: fields[9].to_owned(),
    })
}

/// Parse CoNLL-U text into a treebank.
pub fn read_conllu(text: &str) -> Result<Treebank, ConlluError> {
    let mut sentences = Vec::new();
    let mut current = Sentence::default();
    let mut has_content = false;

    let mut finish = |current: &mut Sentence, has_content: &mut bool| -> Result<(), ConlluError> {
        if *has_content {
            let sentence = std::mem::take(current);
            sentence.check_structure(sentences.len())?;
            sentences.push(sentence);
            *has_content = false;
        }
        Ok(())
    };

    for (lineno, raw) in text.split('\n').enumerate() {
        let line_number = lineno + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.is_empty() {
            finish(&mut current, &mut has_content)?;
            continue;
        }
        has_content = true;
        if line.starts_with('#') {
            current.comments.push(line.to_owned());
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 10 {
            return Err(ConlluError::Parse {
                line: line_number,
                message: format!("expected 10 tab-separated fields, found {}", fields.len()),
            });
        }
        match classify_id(fields[0], line_number)? {
            LineKind::Word(id) => {
                let token = parse_token(&fields, id, line_number)?;
                current.tokens.push(token);
            }
            LineKind::Range | LineKind::Empty => {
                current.passthrough.push(Passthrough { position: current.tokens.len(), line: line.to_owned() })
            }
        }
    }
    finish(&mut current, &mut has_content)?;

    Ok(Treebank::new(sentences))
}

fn field(s: &str) -> &str {
    if s.is_empty() {
        "_"
    } else {
        s
    }
}

fn check_writable(sentence: &Sentence, index: usize) -> Result<(), ConlluError> {
    sentence.check_structure(index)?;
    for token in &sentence.tokens {
        let columns = [&token.form, &token.lemma, &token.upos, &token.xpos, &token.feats, &token.deprel, &token.deps, &token.misc];
        if columns.iter().any(|c| c.contains(['\t', '\n'])) {
            return Err(ConlluError::Structure {
                sentence: sentence.label(index),
                message: format!("token {} has a field containing a tab or newline", token.id),
            });
        }
    }
    if sentence.comments.iter().any(|c| !c.starts_with('#') || c.contains('\n')) {
        return Err(ConlluError::Structure {
            sentence: sentence.label(index),
            message: "comment lines must start with '#' and span one line".into(),
        });
    }
    Ok(())
}

/// Serialize a treebank in canonical CoNLL-U.
pub fn write_conllu(tb: &Treebank) -> Result<String, ConlluError> {
    let mut out = String::new();
    for (index, sentence) in tb.sentences.iter().enumerate() {
        check_writable(sentence, index)?;
        for comment in &sentence.comments {
            out.push_str(comment);
            out.push('\n');
        }
        let mut extra = sentence.passthrough.iter().peekable();
        for (i, token) in sentence.tokens.iter().enumerate() {
            while let Some(p) = extra.next_if(|p| p.position <= i) {
                out.push_str(&p.line);
                out.push('\n');
            }
            let head = token.head.map(|h| h.to_string()).unwrap_or_else(|| "_".to_owned());
            let line = [
                &token.id.to_string(),
                field(&token.form),
                field(&token.lemma),
                field(&token.upos),
                field(&token.xpos),
                field(&token.feats),
                &head,
                field(&token.deprel),
                field(&token.deps),
                field(&token.misc),
            ]
            .join("\t");
            out.push_str(&line);
            out.push('\n');
        }
        for p in extra {
            out.push_str(&p.line);
            out.push('\n');
        }
        out.push('\n');
    }
    Ok(out)
}

/// Outcome of checking that a head assignment is a 0-rooted arborescence.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TreeReport {
    pub is_tree: bool,
    /// Each cycle as a sorted list of token ids.
    pub cycles: Vec<Vec<usize>>,
    /// Tokens not reachable from the root (includes cycle members).
    pub unreachable: Vec<usize>,
    /// Tokens without a head or with a head outside `[0, n]`.
    pub missing_heads: Vec<usize>,
    pub root_children: usize,
}

pub fn validate_tree(s: &Sentence) -> TreeReport {
    validate_heads(&s.heads())
}

/// Check heads of tokens `1..=n` (element `k` is the head of token `k + 1`).
pub fn validate_heads(heads: &[Option<usize>]) -> TreeReport {
    let n = heads.len();
    let mut report = TreeReport::default();
    let head_of = |t: usize| heads[t - 1].filter(|&h| h <= n && h != t);

    for t in 1..=n {
        if head_of(t).is_none() && heads[t - 1] != Some(t) {
            report.missing_heads.push(t);
        }
    }
    report.root_children = (1..=n).filter(|&t| heads[t - 1] == Some(0)).count();

    // 0 = unvisited, 1 = on current path, 2 = resolved reachable, 3 = resolved unreachable
    let mut state = vec![0u8; n + 1];
    state[0] = 2;
    for start in 1..=n {
        if state[start] != 0 {
            continue;
        }
        let mut path = Vec::new();
        let mut node = start;
        let outcome = loop {
            if state[node] == 2 || state[node] == 3 {
                break state[node];
            }
            if state[node] == 1 {
                let pos = path.iter().position(|&p| p == node).unwrap();
                let mut cycle: Vec<usize> = path[pos..].to_vec();
                cycle.sort_unstable();
                report.cycles.push(cycle);
                break 3;
            }
            state[node] = 1;
            path.push(node);
            let self_loop = heads[node - 1] == Some(node);
            match head_of(node) {
                Some(h) => node = h,
                None if self_loop => {
                    report.cycles.push(vec![node]);
                    break 3;
                }
                None => break 3,
            }
        };
        for p in path {
            state[p] = outcome;
        }
    }
    report.unreachable = (1..=n).filter(|&t| state[t] == 3).collect();
    report.cycles.sort();
    report.is_tree = report.unreachable.is_empty() && report.missing_heads.is_empty();
    report
}

/// Seeded random partition into `(train, dev)`; each part keeps input order.
pub fn split_treebank(tb: &Treebank, train_fraction: f64, seed: u64) -> Result<(Treebank, Treebank), ConlluError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(ConlluError::Argument(format!("train fraction must lie in (0, 1), got {}", train_fraction)));
    }
    if tb.is_empty() {
        return Err(ConlluError::Argument("cannot split an empty treebank".into()));
    }
    let n = tb.len();
    let n_train = (train_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train_idx, dev_idx) = order.split_at(n_train);
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        Treebank::new(idx.into_iter().map(|i| tb.sentences[i].clone()).collect())
    };
    Ok((pick(train_idx), pick(dev_idx)))
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO: &str = "# sent_id = s1\n1\tdog\tdog\tNOUN\t_\t_\t2\tnsubj\t_\t_\n2\tbarks\tbark\tVERB\t_\t_\t0\troot\t_\t_\n\n";

    #[test]
    fn reads_minimal_sentence() {
        let tb = read_conllu(TWO).unwrap();
        assert_eq!(tb.len(), 1);
        assert_eq!(tb.sentences[0].len(), 2);
        assert_eq!(tb.sentences[0].sent_id(), "s1");
        assert_eq!(tb.sentences[0].tokens[0].head, Some(2));
    }

    #[test]
    fn head_out_of_range_names_sentence() {
        let bad = TWO.replace("\t2\tnsubj", "\t5\tnsubj");
        match read_conllu(&bad) {
            Err(ConlluError::Structure { sentence, .. }) => assert!(sentence.contains("s1")),
            other => panic!("expected structural error, got {:?}", other),
        }
    }

    #[test]
    fn wrong_field_count_reports_line() {
        let bad = "1\tdog\tdog\n\n";
        assert!(matches!(read_conllu(bad), Err(ConlluError::Parse { line: 1, .. })));
    }

    #[test]
    fn non_consecutive_ids_rejected() {
        let bad = TWO.replace("2\tbarks", "3\tbarks");
        assert!(matches!(read_conllu(&bad), Err(ConlluError::Structure { .. })));
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let text = "# sent_id = a\n# text = vamos a casa\n1-2\tvamos\t_\t_\t_\t_\t_\t_\t_\t_\n1\tva\tir\tVERB\t_\tMood=Ind|Number=Plur\t0\troot\t_\t_\n2\tmos\tnos\tPRON\t_\t_\t1\tnsubj\t_\tSpaceAfter=No\n2.1\telided\t_\t_\t_\t_\t_\t_\t1:obj\t_\n3\tcasa\tcasa\tNOUN\t_\t_\t1\tobj\t_\t_\n\n1\tok\tok\tINTJ\t_\t_\t0\troot\t_\t_\n\n";
        let tb = read_conllu(text).unwrap();
        assert_eq!(tb.sentences[0].len(), 3);
        assert_eq!(tb.sentences[0].passthrough.len(), 2);
        assert_eq!(write_conllu(&tb).unwrap(), text);
        assert_eq!(tb.sentences[0].tokens[0].feats(), vec![("Mood", "Ind"), ("Number", "Plur")]);
    }

    #[test]
    fn empty_treebank_writes_nothing() {
        assert_eq!(write_conllu(&Treebank::default()).unwrap(), "");
    }

    #[test]
    fn single_token_writes_one_line_and_blank() {
        let tb = Treebank::new(vec![Sentence::new(vec![Token::new(1, "hi").with_head(0, "root")])]);
        assert_eq!(write_conllu(&tb).unwrap(), "1\thi\t_\t_\t_\t_\t0\troot\t_\t_\n\n");
    }

    #[test]
    fn write_refuses_invalid_heads() {
        let tb = Treebank::new(vec![Sentence::new(vec![Token::new(1, "x").with_head(3, "root")])]);
        assert!(write_conllu(&tb).is_err());
        let tb = Treebank::new(vec![Sentence::new(vec![Token::new(1, "x").with_head(0, "_")])]);
        assert!(write_conllu(&tb).is_err());
    }

    #[test]
    fn validate_examples() {
        let chain = validate_heads(&[Some(0), Some(1), Some(2)]);
        assert!(chain.is_tree);
        assert_eq!(chain.root_children, 1);

        let cyc = validate_heads(&[Some(2), Some(1)]);
        assert!(!cyc.is_tree);
        assert_eq!(cyc.cycles, vec![vec![1, 2]]);
        assert_eq!(cyc.unreachable, vec![1, 2]);

        let two_roots = validate_heads(&[Some(0), Some(0)]);
        assert!(two_roots.is_tree);
        assert_eq!(two_roots.root_children, 2);
    }

    #[test]
    fn validate_flags_self_loops_and_dangling() {
        let r = validate_heads(&[Some(0), Some(2), Some(2)]);
        assert!(!r.is_tree);
        assert_eq!(r.cycles, vec![vec![2]]);
        assert_eq!(r.unreachable, vec![2, 3]);

        let r = validate_heads(&[Some(0), None]);
        assert!(!r.is_tree);
        assert_eq!(r.missing_heads, vec![2]);
    }

    fn numbered(n: usize) -> Treebank {
        Treebank::new((0..n).map(|i| Sentence::new(vec![Token::new(1, format!("w{}", i)).with_head(0, "root")])).collect())
    }

    #[test]
    fn split_sizes_follow_rounding() {
        let (train, dev) = split_treebank(&numbered(650), 0.8, 7).unwrap();
        assert_eq!((train.len(), dev.len()), (520, 130));
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let tb = numbered(10);
        let a = split_treebank(&tb, 0.8, 3).unwrap();
        let b = split_treebank(&tb, 0.8, 3).unwrap();
        assert_eq!(a, b);

        let (train, dev) = split_treebank(&numbered(4), 0.5, 1).unwrap();
        assert_eq!((train.len(), dev.len()), (2, 2));
        let mut all: Vec<String> = train.sentences.iter().chain(&dev.sentences).map(|s| s.tokens[0].form.clone()).collect();
        all.sort();
        assert_eq!(all, vec!["w0", "w1", "w2", "w3"]);
    }

    #[test]
    fn split_rejects_bad_fraction() {
        assert!(split_treebank(&numbered(3), 1.0, 0).is_err());
        assert!(split_treebank(&numbered(3), 0.0, 0).is_err());
        assert!(split_treebank(&Treebank::default(), 0.5, 0).is_err());
    }
}
