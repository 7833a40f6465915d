use crate::error::{dim_err, Result};
use crate::numerics::{Axis, ParamStore, Tape, Tensor, Var};

use super::{AttentionKind, AttentionParams, Branch, Projections};

/// Positional embeddings added to attention queries and keys (never values).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PositionalInputs {
    /// `(H·W) × d`, used by global and CC attention.
    pub grid: Option<Tensor>,
    /// `H × d`, used by the HV row branch.
    pub row: Option<Tensor>,
    /// `W × d`, used by the HV column branch.
    pub col: Option<Tensor>,
}

impl PositionalInputs {
    pub fn validate(&self, h: usize, w: usize, d: usize) -> Result<()> {
        for (name, t, rows) in [("grid", &self.grid, h * w), ("row", &self.row, h), ("col", &self.col, w)] {
            if let Some(t) = t {
                if t.shape() != [rows, d] {
                    return Err(dim_err!("{name} embedding has shape {:?}, expected [{rows}, {d}]", t.shape()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Attended {
    pub out: Var,
    /// Branch results before combination, `(H·W) × d` each.
    pub branches: Vec<Var>,
    /// `(branch, head, weights)` with weights `(H·W) × keys`.
    pub weights: Vec<(Branch, usize, Var)>,
}

/// Attention over a token-major `(H·W) × d` map on the tape.
pub fn attend(
    t: &mut Tape,
    store: &ParamStore,
    p: &AttentionParams,
    x: Var,
    h: usize,
    w: usize,
    pe: &PositionalInputs,
) -> Result<Attended> {
    if t.shape(x) != [h * w, p.d] {
        return Err(dim_err!("attention input has shape {:?}, expected [{}, {}]", t.shape(x), h * w, p.d));
    }
    pe.validate(h, w, p.d)?;
    let mut weights = Vec::new();
    let branches = match p.kind {
        AttentionKind::Global => {
            let proj = &p.projections[0];
            let qk_in = add_pe(t, x, pe.grid.as_ref());
            let (q, k, v) = project(t, store, proj, qk_in, x);
            let keys_fn = |t: &mut Tape, qh: Var, kh: Var| t.matmul_nt(qh, kh);
            let mix_fn = |t: &mut Tape, a: Var, vh: Var| t.matmul(a, vh);
            vec![heads(t, p, Branch::Global, q, k, v, keys_fn, mix_fn, &mut weights)]
        }
        AttentionKind::Hv => {
            let mut outs = Vec::new();
            for proj in &p.projections {
                let (embed, axis) = match proj.branch {
                    Branch::Row => (pe.row.as_ref().map(|r| expand_rows(r, h, w)), Axis::Column),
                    _ => (pe.col.as_ref().map(|c| expand_cols(c, h, w)), Axis::Row),
                };
                let qk_in = add_pe(t, x, embed.as_ref());
                let (q, k, v) = project(t, store, proj, qk_in, x);
                let pooled = match proj.branch {
                    Branch::Row => t.pool_rows(k, h, w),
                    _ => t.pool_cols(k, h, w),
                };
                let keys_fn = |t: &mut Tape, qh: Var, kh: Var| t.matmul_nt(qh, kh);
                let mix_fn = |t: &mut Tape, a: Var, vh: Var| t.axial_mix(a, vh, h, w, axis);
                outs.push(heads(t, p, proj.branch, q, pooled, v, keys_fn, mix_fn, &mut weights));
            }
            outs
        }
        AttentionKind::Cc => {
            let proj = &p.projections[0];
            let qk_in = add_pe(t, x, pe.grid.as_ref());
            let (q, k, v) = project(t, store, proj, qk_in, x);
            let mut outs = Vec::new();
            for branch in p.branches() {
                let axis = if branch == Branch::Column { Axis::Column } else { Axis::Row };
                let keys_fn = |t: &mut Tape, qh: Var, kh: Var| t.axial_scores(qh, kh, h, w, axis);
                let mix_fn = |t: &mut Tape, a: Var, vh: Var| t.axial_mix(a, vh, h, w, axis);
                outs.push(heads(t, p, branch, q, k, v, keys_fn, mix_fn, &mut weights));
            }
            outs
        }
    };
    let combined = match p.kind {
        AttentionKind::Hv if branches.len() > 1 => t.concat_cols(&branches),
        AttentionKind::Cc if branches.len() > 1 => t.add(branches[0], branches[1]),
        _ => branches[0],
    };
    let out = match p.out {
        Some(l) => l.apply(t, store, combined),
        None => combined,
    };
    Ok(Attended { out, branches, weights })
}

fn add_pe(t: &mut Tape, x: Var, pe: Option<&Tensor>) -> Var {
    match pe {
        Some(e) => {
            let c = t.constant(e.clone());
            t.add(x, c)
        }
        None => x,
    }
}

fn project(t: &mut Tape, store: &ParamStore, proj: &Projections, qk_in: Var, x: Var) -> (Var, Var, Var) {
    let q = proj.q.apply(t, store, qk_in);
    let k = proj.k.apply(t, store, qk_in);
    let v = proj.v.apply(t, store, x);
    (q, k, v)
}

/// Scaled softmax attention per head; heads split the width evenly.
#[allow(clippy::too_many_arguments)]
fn heads(
    t: &mut Tape,
    p: &AttentionParams,
    branch: Branch,
    q: Var,
    k: Var,
    v: Var,
    scores: impl Fn(&mut Tape, Var, Var) -> Var,
    mix: impl Fn(&mut Tape, Var, Var) -> Var,
    weights: &mut Vec<(Branch, usize, Var)>,
) -> Var {
    let dh = p.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(p.heads);
    for head in 0..p.heads {
        let (qh, kh, vh) = if p.heads == 1 {
            (q, k, v)
        } else {
            (t.slice_cols(q, head * dh, dh), t.slice_cols(k, head * dh, dh), t.slice_cols(v, head * dh, dh))
        };
        let s = scores(t, qh, kh);
        let s = t.scale(s, scale);
        let a = t.softmax_rows(s);
        weights.push((branch, head, a));
        outs.push(mix(t, a, vh));
    }
    if outs.len() == 1 {
        outs[0]
    } else {
        t.concat_cols(&outs)
    }
}

/// `H × d` per-row embedding broadcast to every pixel of its row.
pub(crate) fn expand_rows(e: &Tensor, h: usize, w: usize) -> Tensor {
    let d = e.cols();
    let mut out = Vec::with_capacity(h * w * d);
    for u in 0..h {
        for _ in 0..w {
            out.extend_from_slice(e.row(u));
        }
    }
    Tensor::new(&[h * w, d], out).expect("nonzero extents")
}

/// `W × d` per-column embedding broadcast to every pixel of its column.
pub(crate) fn expand_cols(e: &Tensor, h: usize, w: usize) -> Tensor {
    let d = e.cols();
    let mut out = Vec::with_capacity(h * w * d);
    for _ in 0..h {
        for v in 0..w {
            out.extend_from_slice(e.row(v));
        }
    }
    Tensor::new(&[h * w, d], out).expect("nonzero extents")
}
