//! Biaffine arc and relation scorers.
//!
//! Score matrices are oriented rows = dependents, columns = candidate heads.
//! Row 0 (the root as dependent) is computed but never consumed. Self-arcs
//! are left in place; masking happens in the loss and the decoder.

use rand::Rng;

use crate::autodiff::{softmax, AutodiffError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::encoder::uniform;
use crate::model::{Mode, ModelDims};

/// One-hidden-layer projection `relu(x W + b)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Mlp {
    fn init<R: Rng>(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        let weight = store.add(format!("{}.w", name), uniform(&[input, output], 1.0 / (input as f64).sqrt(), rng));
        let bias = store.add(format!("{}.b", name), Tensor::zeros(&[output]));
        Mlp { weight, bias }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var, mode: &mut Mode) -> Result<Var, AutodiffError> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let h = tape.matmul(x, w)?;
        let h = tape.add_row(h, b)?;
        let h = tape.relu(h);
        Ok(mode.dropout(tape, h))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BiaffineParams {
    pub mlp_dep_arc: Mlp,
    pub mlp_head_arc: Mlp,
    /// d_a × d_a
    pub u_arc: ParamId,
    /// 2·d_a × 1: dependent half first, head half second.
    pub u_arc_vec: ParamId,
    /// shape [1]
    pub b_arc: ParamId,
    pub mlp_dep_rel: Mlp,
    pub mlp_head_rel: Mlp,
    /// |R| × d_r × d_r
    pub u_rel: ParamId,
    /// |R| × 2·d_r
    pub w_rel: ParamId,
    /// |R|
    pub b_rel: ParamId,
}

impl BiaffineParams {
    /// MLPs get scaled-uniform weights; the biaffine forms start at zero.
    pub fn init<R: Rng>(store: &mut ParamStore, dims: &ModelDims, labels: usize, rng: &mut R) -> Self {
        let r_dim = 2 * dims.lstm_hidden;
        let (da, dr) = (dims.arc_dim, dims.rel_dim);
        BiaffineParams {
            mlp_dep_arc: Mlp::init(store, "arc.dep", r_dim, da, rng),
            mlp_head_arc: Mlp::init(store, "arc.head", r_dim, da, rng),
            u_arc: store.add("arc.U", Tensor::zeros(&[da, da])),
            u_arc_vec: store.add("arc.u", Tensor::zeros(&[2 * da, 1])),
            b_arc: store.add("arc.b", Tensor::zeros(&[1])),
            mlp_dep_rel: Mlp::init(store, "rel.dep", r_dim, dr, rng),
            mlp_head_rel: Mlp::init(store, "rel.head", r_dim, dr, rng),
            u_rel: store.add("rel.U", Tensor::zeros(&[labels, dr, dr])),
            w_rel: store.add("rel.W", Tensor::zeros(&[labels, 2 * dr])),
            b_rel: store.add("rel.b", Tensor::zeros(&[labels])),
        }
    }

    pub fn arc_param_ids(&self) -> Vec<ParamId> {
        vec![
            self.mlp_dep_arc.weight,
            self.mlp_dep_arc.bias,
            self.mlp_head_arc.weight,
            self.mlp_head_arc.bias,
            self.u_arc,
            self.u_arc_vec,
            self.b_arc,
        ]
    }

    pub fn rel_param_ids(&self) -> Vec<ParamId> {
        vec![
            self.mlp_dep_rel.weight,
            self.mlp_dep_rel.bias,
            self.mlp_head_rel.weight,
            self.mlp_head_rel.bias,
            self.u_rel,
            self.w_rel,
            self.b_rel,
        ]
    }
}

/// The four MLP projections of the contextual representations.
#[derive(Clone, Copy, Debug)]
pub struct Projections {
    pub dep_arc: Var,
    pub head_arc: Var,
    pub dep_rel: Var,
    pub head_rel: Var,
}

pub fn project(tape: &mut Tape, p: &BiaffineParams, r: Var, mode: &mut Mode) -> Result<Projections, AutodiffError> {
    Ok(Projections {
        dep_arc: p.mlp_dep_arc.apply(tape, r, mode)?,
        head_arc: p.mlp_head_arc.apply(tape, r, mode)?,
        dep_rel: p.mlp_dep_rel.apply(tape, r, mode)?,
        head_rel: p.mlp_head_rel.apply(tape, r, mode)?,
    })
}

/// `s[i, j] = d_iᵀ U h_j + uᵀ[d_i; h_j] + b`, shape (n+1)×(n+1).
pub fn arc_scores_from(tape: &mut Tape, p: &BiaffineParams, proj: &Projections) -> Result<Var, AutodiffError> {
    let da = tape.store().value(p.u_arc).rows();
    let u = tape.param(p.u_arc);
    let bilinear = tape.bilinear(proj.dep_arc, u, proj.head_arc)?;
    let uvec = tape.param(p.u_arc_vec);
    let u_dep = tape.slice_rows(uvec, 0, da)?;
    let u_head = tape.slice_rows(uvec, da, 2 * da)?;
    let dep_term = tape.matmul(proj.dep_arc, u_dep)?;
    let head_term = tape.matmul(proj.head_arc, u_head)?;
    let affine = tape.outer_sum(dep_term, head_term)?;
    let s = tape.add(bilinear, affine)?;
    let b = tape.param(p.b_arc);
    tape.add_scalar(s, b)
}

pub fn arc_scores(tape: &mut Tape, p: &BiaffineParams, r: Var, mode: &mut Mode) -> Result<Var, AutodiffError> {
    let proj = project(tape, p, r, mode)?;
    arc_scores_from(tape, p, &proj)
}

/// Label scores for each `(dependent, head)` pair, shape m × |R|.
pub fn rel_scores_pairs(tape: &mut Tape, p: &BiaffineParams, proj: &Projections, pairs: &[(usize, usize)]) -> Result<Var, AutodiffError> {
    let n1 = tape.value(proj.dep_rel).rows();
    if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i == 0 || i >= n1 || j >= n1) {
        return Err(AutodiffError::Argument(format!("pair ({}, {}) outside dependents 1..{} / heads 0..{}", i, j, n1 - 1, n1 - 1)));
    }
    let deps: Vec<usize> = pairs.iter().map(|&(i, _)| i).collect();
    let heads: Vec<usize> = pairs.iter().map(|&(_, j)| j).collect();
    let d = tape.gather(proj.dep_rel, &deps)?;
    let h = tape.gather(proj.head_rel, &heads)?;
    let u = tape.param(p.u_rel);
    let bilinear = tape.label_bilinear(d, u, h)?;
    let dh = tape.concat_cols(&[d, h])?;
    let w = tape.param(p.w_rel);
    let affine = tape.matmul_nt(dh, w)?;
    let s = tape.add(bilinear, affine)?;
    let b = tape.param(p.b_rel);
    tape.add_row(s, b)
}

/// Label scores for one arc `head → dep`, length |R|.
pub fn rel_scores(tape: &mut Tape, p: &BiaffineParams, proj: &Projections, dep: usize, head: usize) -> Result<Vec<f64>, AutodiffError> {
    let s = rel_scores_pairs(tape, p, proj, &[(dep, head)])?;
    Ok(tape.value(s).data().to_vec())
}

/// Softmax over the unmasked entries of one score row.
pub fn head_distribution(scores: &[f64], mask: &[bool]) -> Result<Vec<f64>, AutodiffError> {
    if scores.len() != mask.len() {
        return Err(AutodiffError::Dimension { op: "head_distribution", lhs: vec![scores.len()], rhs: vec![mask.len()] });
    }
    let kept: Vec<f64> = scores.iter().zip(mask).filter(|(_, &m)| m).map(|(&s, _)| s).collect();
    if kept.is_empty() {
        return Err(AutodiffError::Argument("every head candidate is masked".into()));
    }
    let mut probs = softmax(&kept).into_iter();
    Ok(mask.iter().map(|&m| if m { probs.next().unwrap() } else { 0.0 }).collect())
}

/// Mask for dependent `i` in an (n+1)-wide row: every head except itself.
pub fn valid_head_mask(n_plus_one: usize, dep: usize) -> Vec<bool> {
    (0..n_plus_one).map(|j| j != dep).collect()
}
