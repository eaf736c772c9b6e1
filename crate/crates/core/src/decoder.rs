//! Maximum spanning arborescence decoding (Chu-Liu/Edmonds) and label
//! assignment.
//!
//! Score matrices are (n+1)×(n+1) with `scores[dep][head]`; row 0 and the
//! diagonal are ignored. Returned head vectors have length n, entry `k`
//! holding the head of token `k + 1`.

use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::scorer::{rel_scores_pairs, BiaffineParams, Projections};

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error("cannot decode a sentence without tokens")]
    Empty,

    #[error("score matrix must be square, got {0:?}")]
    NotSquare(Vec<usize>),

    #[error("non-finite score for dependent {dep}, head {head}")]
    NonFinite { dep: usize, head: usize },

    #[error(transparent)]
    Scorer(#[from] AutodiffError),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParseTree {
    pub heads: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Index of the maximum; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn checked_matrix(scores: &Tensor) -> Result<Vec<Vec<f64>>, DecodeError> {
    let shape = scores.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(DecodeError::NotSquare(shape.to_vec()));
    }
    let n1 = shape[0];
    if n1 < 2 {
        return Err(DecodeError::Empty);
    }
    let mut m = vec![vec![f64::NEG_INFINITY; n1]; n1];
    for (dep, row) in m.iter_mut().enumerate().skip(1) {
        for head in (0..n1).filter(|&h| h != dep) {
            let s = scores.at(dep, head);
            if !s.is_finite() {
                return Err(DecodeError::NonFinite { dep, head });
            }
            row[head] = s;
        }
    }
    Ok(m)
}

/// Sum of `scores[dep][head]` over the tree.
pub fn tree_score(scores: &Tensor, heads: &[usize]) -> f64 {
    heads.iter().enumerate().map(|(k, &h)| scores.at(k + 1, h)).sum()
}

/// Per-dependent best head, with no well-formedness guarantee.
pub fn greedy_heads(scores: &Tensor) -> Vec<usize> {
    let n1 = scores.rows();
    (1..n1)
        .map(|dep| {
            let mut best = 0;
            for head in 1..n1 {
                if head != dep && scores.at(dep, head) > scores.at(dep, best) {
                    best = head;
                }
            }
            best
        })
        .collect()
}

fn find_cycle(heads: &[usize]) -> Option<Vec<usize>> {
    let n1 = heads.len();
    let mut state = vec![0u8; n1];
    state[0] = 2;
    for start in 1..n1 {
        let mut path = Vec::new();
        let mut v = start;
        while state[v] == 0 {
            state[v] = 1;
            path.push(v);
            v = heads[v];
        }
        if state[v] == 1 {
            let pos = path.iter().position(|&p| p == v).unwrap();
            return Some(path[pos..].to_vec());
        }
        for p in path {
            state[p] = 2;
        }
    }
    None
}

/// Chu-Liu/Edmonds on a dense matrix with `-inf` for forbidden arcs.
/// Returns a head for every node; entry 0 is unused.
fn chu_liu_edmonds(w: &[Vec<f64>]) -> Vec<usize> {
    let n1 = w.len();
    let mut heads = vec![0usize; n1];
    for dep in 1..n1 {
        let mut best = 0;
        for head in 1..n1 {
            if head != dep && w[dep][head] > w[dep][best] {
                best = head;
            }
        }
        heads[dep] = best;
    }
    let Some(cycle) = find_cycle(&heads) else {
        return heads;
    };

    let mut in_cycle = vec![false; n1];
    for &v in &cycle {
        in_cycle[v] = true;
    }
    // Contracted graph: outside nodes keep their relative order, the cycle becomes the last node.
    let outside: Vec<usize> = (0..n1).filter(|&v| !in_cycle[v]).collect();
    let m = outside.len() + 1;
    let c = m - 1;
    let mut new_index = vec![usize::MAX; n1];
    for (k, &v) in outside.iter().enumerate() {
        new_index[v] = k;
    }

    let sub = |a: f64, b: f64| if a == f64::NEG_INFINITY { a } else { a - b };
    let mut sorted_cycle = cycle.clone();
    sorted_cycle.sort_unstable();
    let mut cw = vec![vec![f64::NEG_INFINITY; m]; m];
    let mut enter_from = vec![0usize; n1];
    let mut leave_to = vec![0usize; n1];
    for &dep in outside.iter().filter(|&&v| v != 0) {
        for &head in &outside {
            if head != dep {
                cw[new_index[dep]][new_index[head]] = w[dep][head];
            }
        }
        let mut best = f64::NEG_INFINITY;
        enter_from[dep] = sorted_cycle[0];
        for &h in &sorted_cycle {
            if w[dep][h] > best {
                best = w[dep][h];
                enter_from[dep] = h;
            }
        }
        cw[new_index[dep]][c] = best;
    }
    for &head in &outside {
        let mut best = f64::NEG_INFINITY;
        leave_to[head] = sorted_cycle[0];
        for &v in &sorted_cycle {
            let s = sub(w[v][head], w[v][heads[v]]);
            if s > best {
                best = s;
                leave_to[head] = v;
            }
        }
        cw[c][new_index[head]] = best;
    }

    let sub_heads = chu_liu_edmonds(&cw);
    let mut result = heads.clone();
    for &dep in outside.iter().filter(|&&v| v != 0) {
        let h = sub_heads[new_index[dep]];
        result[dep] = if h == c { enter_from[dep] } else { outside[h] };
    }
    let entry_head = outside[sub_heads[c]];
    result[leave_to[entry_head]] = entry_head;
    result
}

/// Highest-scoring 0-rooted arborescence. With `single_root`, exactly one
/// token attaches to the root: if the unconstrained tree has several root
/// children, every token is tried as the sole root child and the best
/// constrained tree is kept.
pub fn mst_decode(scores: &Tensor, single_root: bool) -> Result<Vec<usize>, DecodeError> {
    let w = checked_matrix(scores)?;
    let n1 = w.len();
    let heads = chu_liu_edmonds(&w)[1..].to_vec();
    let root_children = heads.iter().filter(|&&h| h == 0).count();
    if !single_root || root_children == 1 {
        return Ok(heads);
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for root_child in 1..n1 {
        let mut masked = w.clone();
        for (dep, row) in masked.iter_mut().enumerate().skip(1) {
            if dep != root_child {
                row[0] = f64::NEG_INFINITY;
            }
        }
        let candidate = chu_liu_edmonds(&masked)[1..].to_vec();
        let total = tree_score(scores, &candidate);
        if best.as_ref().is_none_or(|(s, _)| total > *s) {
            best = Some((total, candidate));
        }
    }
    Ok(best.expect("at least one token").1)
}

/// Most probable label for each `(token, head)` arc; lowest index wins ties.
pub fn assign_labels(tape: &mut Tape, p: &BiaffineParams, proj: &Projections, heads: &[usize]) -> Result<Vec<usize>, DecodeError> {
    if heads.is_empty() {
        return Ok(Vec::new());
    }
    let pairs: Vec<(usize, usize)> = heads.iter().enumerate().map(|(k, &h)| (k + 1, h)).collect();
    let s = rel_scores_pairs(tape, p, proj, &pairs)?;
    let s = tape.value(s);
    Ok((0..pairs.len()).map(|k| argmax(s.row(k))).collect())
}

/// Convenience used by tests and diagnostics that already hold projections.
pub fn decode_tree(
    tape: &mut Tape,
    p: &BiaffineParams,
    proj: &Projections,
    arc_scores: &Tensor,
    single_root: bool,
) -> Result<ParseTree, DecodeError> {
    let heads = mst_decode(arc_scores, single_root)?;
    let labels = assign_labels(tape, p, proj, &heads)?;
    Ok(ParseTree { heads, labels })
}
