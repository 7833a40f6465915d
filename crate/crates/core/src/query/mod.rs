//! Box queries, reference-point selection, content-query initialization and
//! the per-layer box head.
//!
//! The plain functions here operate on tensors and parameter stores directly.
//! [`heads`] holds the same computations on the tape, batched over positions,
//! for use inside the model.

pub mod export;
pub mod heads;

use serde::{Deserialize, Serialize};

use crate::attention::FeatureMap;
use crate::error::{dim_err, Error, Result};
use crate::loss::Box4;
use crate::numerics::pe::{cell_center, sinusoidal_pe, DEFAULT_TEMPERATURE};
use crate::numerics::{inverse_sigmoid, sigmoid, Ffn, ParamStore, Tensor};

pub use heads::{initial_queries, Candidates, InitialQueries, QueryParams, QuerySpec};

/// Normalized prior extents `(c_w, c_h)` seeding candidate boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnchorScaleSet(pub Vec<[f64; 2]>);

impl Default for AnchorScaleSet {
    fn default() -> Self {
        Self(vec![[0.1, 0.1], [0.2, 0.2], [0.4, 0.4]])
    }
}

impl AnchorScaleSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::Config("at least one anchor scale is required".into()));
        }
        for s in &self.0 {
            if !s.iter().all(|&c| c > 0.0 && c < 1.0) {
                return Err(Error::Config(format!("anchor scale {s:?} must lie in (0, 1)")));
            }
        }
        Ok(())
    }
}

/// How the first decoder layer gets its reference points and transformations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryMode {
    /// Learned reference points and transformations, identical for every image.
    #[serde(rename = "rb")]
    Rb,
    /// Reference points selected from encoder content, learned transformations.
    #[serde(rename = "ip")]
    Ip,
    /// Reference points and transformations both predicted from content.
    #[serde(rename = "ip+it")]
    IpIt,
}

impl QueryMode {
    pub const ALL: [QueryMode; 3] = [QueryMode::Rb, QueryMode::Ip, QueryMode::IpIt];

    pub fn name(self) -> &'static str {
        match self {
            QueryMode::Rb => "rb",
            QueryMode::Ip => "ip",
            QueryMode::IpIt => "ip+it",
        }
    }

    pub fn selects_from_content(self) -> bool {
        self != QueryMode::Rb
    }
}

impl std::str::FromStr for QueryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown query mode {s:?} (expected rb, ip or ip+it)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentInit {
    FromEmbedding,
    FromBox,
}

impl std::str::FromStr for ContentInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "from_embedding" => Ok(ContentInit::FromEmbedding),
            "from_box" => Ok(ContentInit::FromBox),
            _ => Err(Error::Config(format!("unknown content init {s:?} (expected from_embedding or from_box)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub cx: f64,
    pub cy: f64,
    /// Flat encoder position `u·W + v`; absent for learned points.
    pub source_index: Option<usize>,
    pub scale_index: Option<usize>,
    pub objectness: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxQuery {
    pub p_s: Tensor,
    pub lambda_q: Tensor,
    pub p_q: Tensor,
}

impl BoxQuery {
    pub fn new(p_s: Tensor, lambda_q: Tensor) -> Result<Self> {
        let p_q = compose_box_query(&p_s, &lambda_q)?;
        Ok(Self { p_s, lambda_q, p_q })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateBox {
    pub bbox: Box4,
    pub objectness: f64,
}

/// `λ ⊙ p_s`.
pub fn compose_box_query(p_s: &Tensor, lambda_q: &Tensor) -> Result<Tensor> {
    if p_s.len() != lambda_q.len() {
        return Err(dim_err!("box query operands have lengths {} and {}", p_s.len(), lambda_q.len()));
    }
    p_s.mul(lambda_q)
}

/// Grid cell `(u, v)` containing the normalized point.
pub fn cell_of(h: usize, w: usize, cx: f64, cy: f64) -> Result<(usize, usize)> {
    if !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) {
        return Err(Error::Domain(format!("point ({cx}, {cy}) lies outside the grid")));
    }
    let u = ((cy * h as f64) as usize).min(h - 1);
    let v = ((cx * w as f64) as usize).min(w - 1);
    Ok((u, v))
}

/// The `1 × d` encoder embedding at a cell.
pub fn cell_embedding(enc: &FeatureMap, u: usize, v: usize) -> Tensor {
    let data = (0..enc.d).map(|c| enc.at(c, u, v)).collect();
    Tensor::from_parts(vec![1, enc.d], data)
}

fn ffn_vector(store: &ParamStore, ffn: &Ffn, x: Tensor) -> Result<Tensor> {
    let y = ffn.forward(store, &x)?;
    Ok(Tensor::vector(y.into_data()))
}

/// `λ = FFN(x̂(c_x, c_y))`.
pub fn predict_transformation(store: &ParamStore, enc: &FeatureMap, point: &ReferencePoint, ffn: &Ffn) -> Result<Tensor> {
    let (u, v) = cell_of(enc.h, enc.w, point.cx, point.cy)?;
    ffn_vector(store, ffn, cell_embedding(enc, u, v))
}

/// Probability of the object class from a two-logit score.
pub fn object_probability(logits: [f64; 2]) -> f64 {
    sigmoid(logits[1] - logits[0])
}

/// Two-class scores for every cell and anchor scale. Candidate `i` is cell
/// `i / scales`, scale `i % scales`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectnessScores {
    pub h: usize,
    pub w: usize,
    pub scales: usize,
    pub logits: Vec<[f64; 2]>,
}

impl ObjectnessScores {
    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.logits.iter().map(|&l| object_probability(l)).collect()
    }

    /// `(u, v, scale)` of a candidate.
    pub fn locate(&self, index: usize) -> (usize, usize, usize) {
        let cell = index / self.scales;
        (cell / self.w, cell % self.w, index % self.scales)
    }
}

pub fn objectness_scores(store: &ParamStore, enc: &FeatureMap, heads: &[Ffn]) -> Result<ObjectnessScores> {
    if heads.is_empty() {
        return Err(Error::Config("at least one objectness head is required".into()));
    }
    let tokens = enc.to_tokens();
    let per_scale: Vec<Tensor> = heads
        .iter()
        .map(|f| {
            if f.out_dim() != 2 {
                return Err(dim_err!("objectness head outputs {} logits, expected 2", f.out_dim()));
            }
            f.forward(store, &tokens)
        })
        .collect::<Result<_>>()?;
    let mut logits = Vec::with_capacity(enc.h * enc.w * heads.len());
    for cell in 0..enc.h * enc.w {
        for s in &per_scale {
            logits.push([s.at(cell, 0), s.at(cell, 1)]);
        }
    }
    Ok(ObjectnessScores { h: enc.h, w: enc.w, scales: heads.len(), logits })
}

/// Indices of the `k` largest probabilities, descending, ties by ascending index.
pub fn top_k(probs: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > probs.len() {
        return Err(Error::Config(format!("cannot select {k} of {} candidates", probs.len())));
    }
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

pub fn select_reference_points(scores: &ObjectnessScores, k: usize) -> Result<Vec<ReferencePoint>> {
    let probs = scores.probabilities();
    Ok(top_k(&probs, k)?.into_iter().map(|i| reference_point(scores, i, probs[i])).collect())
}

pub(crate) fn reference_point(scores: &ObjectnessScores, index: usize, prob: f64) -> ReferencePoint {
    let (u, v, s) = scores.locate(index);
    ReferencePoint {
        cx: cell_center(v, scores.w),
        cy: cell_center(u, scores.h),
        source_index: Some(u * scores.w + v),
        scale_index: Some(s),
        objectness: Some(prob),
    }
}

/// `sigmoid(FFN(x̂) + σ⁻¹([c_x, c_y, c_w, c_h]))` at the cell containing `(cx, cy)`.
pub fn estimate_candidate_box(store: &ParamStore, enc: &FeatureMap, cx: f64, cy: f64, anchor: [f64; 2], ffn: &Ffn) -> Result<Box4> {
    if !anchor.iter().all(|&c| c > 0.0 && c < 1.0) {
        return Err(Error::Domain(format!("anchor {anchor:?} must lie in (0, 1)")));
    }
    let (u, v) = cell_of(enc.h, enc.w, cx, cy)?;
    let out = ffn_vector(store, ffn, cell_embedding(enc, u, v))?;
    if out.len() != 4 {
        return Err(dim_err!("box ffn outputs {} values, expected 4", out.len()));
    }
    let prior = [cx, cy, anchor[0], anchor[1]];
    Ok(std::array::from_fn(|i| sigmoid(out.data()[i] + inverse_sigmoid(prior[i]))))
}

/// Concatenated embeddings of `cx, cy, w, h`, each at `d / 4`.
pub fn box_embedding(b: &Box4, d: usize) -> Result<Tensor> {
    if d % 4 != 0 {
        return Err(dim_err!("box embedding width {d} is not a multiple of 4"));
    }
    let mut data = Vec::with_capacity(d);
    for &c in b {
        data.extend(sinusoidal_pe(c, d / 4, DEFAULT_TEMPERATURE)?.into_data());
    }
    Ok(Tensor::vector(data))
}

#[derive(Debug, Clone, Copy)]
pub enum ContentInput<'a> {
    Embedding(&'a Tensor),
    Box(&'a Box4),
}

pub fn init_content_query(store: &ParamStore, mode: ContentInit, input: ContentInput<'_>, ffn: &Ffn) -> Result<Tensor> {
    let x = match (mode, input) {
        (ContentInit::FromEmbedding, ContentInput::Embedding(e)) => e.clone(),
        (ContentInit::FromBox, ContentInput::Box(b)) => box_embedding(b, ffn.in_dim())?,
        (m, _) => return Err(Error::Config(format!("content init {m:?} got the wrong kind of input"))),
    };
    let row = Tensor::from_parts(vec![1, x.len()], x.into_data());
    ffn_vector(store, ffn, row)
}

/// `sigmoid(FFN(f) + [σ⁻¹(c_x), σ⁻¹(c_y), 0, 0])`.
pub fn box_head(store: &ParamStore, f: &Tensor, reference: (f64, f64), ffn: &Ffn) -> Result<Box4> {
    let row = Tensor::from_parts(vec![1, f.len()], f.data().to_vec());
    let out = ffn_vector(store, ffn, row)?;
    if out.len() != 4 {
        return Err(dim_err!("box ffn outputs {} values, expected 4", out.len()));
    }
    let offset = [inverse_sigmoid(reference.0), inverse_sigmoid(reference.1), 0.0, 0.0];
    Ok(std::array::from_fn(|i| sigmoid(out.data()[i] + offset[i])))
}

#[cfg(test)]
mod tests;
