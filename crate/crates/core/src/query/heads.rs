//! Query construction on the tape, batched over encoder positions.

use super::{reference_point, top_k, AnchorScaleSet, ContentInit, ObjectnessScores, QueryMode, ReferencePoint};
use crate::error::{dim_err, Error, Result};
use crate::numerics::pe::cell_center;
use crate::numerics::{inverse_sigmoid, Ffn, Init, ParamId, ParamStore, Tape, Tensor, Var};

/// Parameters of the first-layer query construction.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryParams {
    pub mode: QueryMode,
    pub content_init: ContentInit,
    pub k: usize,
    pub d: usize,
    pub temperature: f64,
    pub anchors: AnchorScaleSet,
    /// One `d → d → 2` head per anchor scale (content modes only).
    pub objectness: Vec<Ffn>,
    /// One `d → d → 4` head per anchor scale (content modes only).
    pub boxes: Vec<Ffn>,
    pub content: Option<Ffn>,
    /// `d → d → d`, IP+IT only.
    pub lambda_ffn: Option<Ffn>,
    /// `K × d`, RB and IP.
    pub lambda: Option<ParamId>,
    /// `K × 2` logits of `(cx, cy)`, RB only.
    pub reference: Option<ParamId>,
}

#[derive(Debug, Clone)]
pub struct QuerySpec {
    pub mode: QueryMode,
    pub content_init: ContentInit,
    pub k: usize,
    pub d: usize,
    pub temperature: f64,
    pub anchors: AnchorScaleSet,
}

impl QueryParams {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, spec: QuerySpec) -> Result<Self> {
        let QuerySpec { mode, content_init, k, d, temperature, anchors } = spec;
        anchors.validate()?;
        if k == 0 || d % 4 != 0 {
            return Err(Error::Config(format!("query count {k} must be positive and width {d} a multiple of 4")));
        }
        let content_mode = mode.selects_from_content();
        let (mut objectness, mut boxes) = (Vec::new(), Vec::new());
        let (mut content, mut lambda_ffn, mut lambda, mut reference) = (None, None, None, None);
        if content_mode {
            for s in 0..anchors.len() {
                objectness.push(Ffn::new(store, init, &format!("{name}.objectness.{s}"), &[d, d, 2]));
                boxes.push(Ffn::new(store, init, &format!("{name}.box.{s}"), &[d, d, 4]));
            }
            content = Some(Ffn::new(store, init, &format!("{name}.content"), &[d, d, d]));
        }
        if mode == QueryMode::IpIt {
            lambda_ffn = Some(Ffn::new(store, init, &format!("{name}.lambda"), &[d, d, d]));
        } else {
            lambda = Some(store.insert(format!("{name}.lambda"), init.normal(&[k, d], 1.0)));
        }
        if mode == QueryMode::Rb {
            let points = init.uniform(&[k, 2], 0.0, 1.0).map(inverse_sigmoid);
            reference = Some(store.insert(format!("{name}.reference"), points));
        }
        Ok(Self { mode, content_init, k, d, temperature, anchors, objectness, boxes, content, lambda_ffn, lambda, reference })
    }
}

/// Every encoder-side candidate, indexed `cell · S + scale`.
#[derive(Debug, Clone)]
pub struct Candidates {
    /// `N × 1` object probabilities.
    pub probs: Var,
    /// `N × 4` boxes.
    pub boxes: Var,
    pub scores: ObjectnessScores,
}

#[derive(Debug, Clone)]
pub struct InitialQueries {
    pub candidates: Option<Candidates>,
    /// Candidate indices behind each query (content modes).
    pub selected: Vec<usize>,
    pub refs: Vec<ReferencePoint>,
    /// `K × d`.
    pub content: Var,
    /// `K × d`.
    pub lambda: Var,
    /// `K × d` sinusoidal embeddings of the reference points.
    pub p_s: Var,
    /// `K × 4` box-head offsets `[σ⁻¹cx, σ⁻¹cy, 0, 0]`.
    pub ref_offset: Var,
}

fn candidates(t: &mut Tape, store: &ParamStore, q: &QueryParams, enc: Var, h: usize, w: usize) -> Candidates {
    let s = q.anchors.len();
    let mut probs = Vec::with_capacity(s);
    let mut boxes = Vec::with_capacity(s);
    let mut logit_tables = Vec::with_capacity(s);
    for (si, anchor) in q.anchors.0.iter().enumerate() {
        let l = q.objectness[si].apply(t, store, enc);
        logit_tables.push(t.value(l).clone());
        let l0 = t.slice_cols(l, 0, 1);
        let l1 = t.slice_cols(l, 1, 1);
        let diff = t.sub(l1, l0);
        probs.push(t.sigmoid(diff));
        let raw = q.boxes[si].apply(t, store, enc);
        let mut prior = Vec::with_capacity(h * w * 4);
        for u in 0..h {
            for v in 0..w {
                let c = [cell_center(v, w), cell_center(u, h), anchor[0], anchor[1]];
                prior.extend(c.iter().map(|&x| inverse_sigmoid(x)));
            }
        }
        let prior = t.constant(Tensor::from_parts(vec![h * w, 4], prior));
        let z = t.add(raw, prior);
        boxes.push(t.sigmoid(z));
    }
    let n = h * w * s;
    let p = t.concat_cols(&probs);
    let probs = t.reshape(p, &[n, 1]);
    let b = t.concat_cols(&boxes);
    let boxes = t.reshape(b, &[n, 4]);
    let mut logits = Vec::with_capacity(n);
    for cell in 0..h * w {
        for tab in &logit_tables {
            logits.push([tab.at(cell, 0), tab.at(cell, 1)]);
        }
    }
    Candidates { probs, boxes, scores: ObjectnessScores { h, w, scales: s, logits } }
}

/// Builds the first decoder layer's queries from a token-major `(H·W) × d`
/// encoder output. `frozen` replaces top-K selection with fixed candidate
/// indices, which keeps the decision constant under parameter perturbation.
pub fn initial_queries(
    t: &mut Tape,
    store: &ParamStore,
    q: &QueryParams,
    enc: Var,
    h: usize,
    w: usize,
    frozen: Option<&[usize]>,
) -> Result<InitialQueries> {
    if t.shape(enc) != [h * w, q.d] {
        return Err(dim_err!("encoder output has shape {:?}, expected [{}, {}]", t.shape(enc), h * w, q.d));
    }
    let k = q.k;
    if q.mode == QueryMode::Rb {
        let r = t.param(store, q.reference.expect("rb reference parameter"));
        let pts = t.sigmoid(r);
        let (x, y) = (t.slice_cols(pts, 0, 1), t.slice_cols(pts, 1, 1));
        let yx = t.concat_cols(&[y, x]);
        let p_s = t.sin_embed(yx, q.d / 2, q.temperature);
        let zeros = t.constant(Tensor::zeros(&[k, 2]));
        let ref_offset = t.concat_cols(&[r, zeros]);
        let lambda = t.param(store, q.lambda.expect("rb lambda parameter"));
        let content = t.constant(Tensor::zeros(&[k, q.d]));
        let refs = t
            .value(pts)
            .data()
            .chunks(2)
            .map(|c| ReferencePoint { cx: c[0], cy: c[1], source_index: None, scale_index: None, objectness: None })
            .collect();
        return Ok(InitialQueries { candidates: None, selected: Vec::new(), refs, content, lambda, p_s, ref_offset });
    }

    let cand = candidates(t, store, q, enc, h, w);
    let n = cand.scores.len();
    let probs = t.value(cand.probs).data().to_vec();
    let selected = match frozen {
        Some(f) => {
            if f.len() != k || f.iter().any(|&i| i >= n) {
                return Err(dim_err!("frozen selection must hold {k} indices below {n}"));
            }
            f.to_vec()
        }
        None => top_k(&probs, k)?,
    };
    let refs: Vec<ReferencePoint> = selected.iter().map(|&i| reference_point(&cand.scores, i, probs[i])).collect();
    let cells: Vec<usize> = selected.iter().map(|&i| i / cand.scores.scales).collect();

    let mut yx = Vec::with_capacity(2 * k);
    let mut offset = Vec::with_capacity(4 * k);
    for r in &refs {
        yx.extend([r.cy, r.cx]);
        offset.extend([inverse_sigmoid(r.cx), inverse_sigmoid(r.cy), 0.0, 0.0]);
    }
    let yx = t.constant(Tensor::from_parts(vec![k, 2], yx));
    let p_s = t.sin_embed(yx, q.d / 2, q.temperature);
    let ref_offset = t.constant(Tensor::from_parts(vec![k, 4], offset));

    let at_cells = t.gather_rows(enc, &cells);
    let content_ffn = q.content.as_ref().expect("content ffn");
    let content = match q.content_init {
        ContentInit::FromEmbedding => content_ffn.apply(t, store, at_cells),
        ContentInit::FromBox => {
            let b = t.gather_rows(cand.boxes, &selected);
            let e = t.sin_embed(b, q.d / 4, q.temperature);
            content_ffn.apply(t, store, e)
        }
    };
    let lambda = match (&q.lambda_ffn, q.lambda) {
        (Some(f), _) => f.apply(t, store, at_cells),
        (None, Some(p)) => t.param(store, p),
        (None, None) => unreachable!("either a transformation ffn or parameter exists"),
    };
    Ok(InitialQueries { candidates: Some(cand), selected, refs, content, lambda, p_s, ref_offset })
}
