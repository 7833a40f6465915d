//! Held-out evaluation, the random-box baseline and attention/reference dumps.

use rayon::prelude::*;

use crate::attention::export::AttentionRow;
use crate::error::Result;
use crate::model::{Detection, DetectionSet, ForwardOptions, Model};
use crate::numerics::rng::XorShift64Star;
use crate::numerics::Tape;
use crate::query::ReferencePoint;
use crate::synthdata::{evaluate_ap, generate_scene, DatasetSpec, SceneRecord};

pub const AP_IOU: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub detections: Vec<SceneRecord>,
    pub ground_truth: Vec<SceneRecord>,
    pub ap: f64,
}

/// Detections of the last decoder layer, every query kept.
pub fn detect_scene(model: &Model, image: &crate::numerics::Tensor) -> Result<Vec<Detection>> {
    let sets: Vec<DetectionSet> = model.detect(image)?;
    Ok(sets.last().map(|s| s.detections()).unwrap_or_default())
}

pub fn evaluate(model: &Model, spec: &DatasetSpec, indices: std::ops::Range<usize>) -> Result<EvalOutcome> {
    let pairs: Vec<Result<(SceneRecord, SceneRecord)>> = indices
        .into_par_iter()
        .map(|i| {
            let scene = generate_scene(spec, i);
            let dets = detect_scene(model, &scene.image)?;
            Ok((SceneRecord::detections(i, &dets), SceneRecord::ground_truth(&scene)))
        })
        .collect();
    let (detections, ground_truth): (Vec<_>, Vec<_>) = pairs.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
    let ap = evaluate_ap(&detections, &ground_truth, AP_IOU)?;
    Ok(EvalOutcome { detections, ground_truth, ap })
}

/// `k` boxes per scene with uniform centers, sides uniform over the data
/// size range, uniform classes and uniform scores.
pub fn random_box_detections(spec: &DatasetSpec, indices: std::ops::Range<usize>, k: usize, seed: u64) -> Vec<SceneRecord> {
    indices
        .map(|i| {
            let mut rng = XorShift64Star::for_stream(seed, i as u64);
            let dets: Vec<Detection> = (0..k)
                .map(|_| {
                    let w = rng.uniform(spec.min_size, spec.max_size);
                    let h = rng.uniform(spec.min_size, spec.max_size);
                    let cx = rng.uniform(w / 2.0, 1.0 - w / 2.0);
                    let cy = rng.uniform(h / 2.0, 1.0 - h / 2.0);
                    let class_id = rng.range_inclusive(0, spec.num_classes - 1);
                    Detection { class_id, score: rng.next_f64(), bbox: [cx, cy, w, h] }
                })
                .collect();
            SceneRecord::detections(i, &dets)
        })
        .collect()
}

pub fn random_box_ap(spec: &DatasetSpec, indices: std::ops::Range<usize>, k: usize, seed: u64) -> Result<f64> {
    let gts: Vec<SceneRecord> = indices.clone().map(|i| SceneRecord::ground_truth(&generate_scene(spec, i))).collect();
    evaluate_ap(&random_box_detections(spec, indices, k, seed), &gts, AP_IOU)
}

/// First-decoder-layer cross-attention: one row per (head, query, pixel),
/// with the query index in `query_row`, 0 in `query_col` and the pixel
/// index `u·W + v` in `key_index`.
pub fn decoder_attention_rows(model: &Model, image: &crate::numerics::Tensor) -> Result<Vec<AttentionRow>> {
    let mut t = Tape::new();
    let pass = model.forward(&mut t, image, &ForwardOptions::default())?;
    let mut rows = Vec::new();
    if let Some(layer) = pass.layers.first() {
        for (head, &wv) in layer.cross_weights.iter().enumerate() {
            let w = t.value(wv);
            for q in 0..w.rows() {
                for (key_index, &weight) in w.row(q).iter().enumerate() {
                    rows.push(AttentionRow { head, query_row: q, query_col: 0, key_index, weight });
                }
            }
        }
    }
    Ok(rows)
}

pub fn reference_points(model: &Model, image: &crate::numerics::Tensor) -> Result<Vec<ReferencePoint>> {
    let mut t = Tape::new();
    Ok(model.forward(&mut t, image, &ForwardOptions::default())?.queries.refs)
}
