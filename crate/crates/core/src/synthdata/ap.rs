//! Single-threshold average precision with all-point interpolation.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use super::io::SceneRecord;
use crate::error::{Error, Result};
use crate::loss::iou;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassAp {
    pub class_id: usize,
    pub ap: f64,
    pub gt_count: usize,
    pub detection_count: usize,
}

/// Area under the precision envelope. `hits` is ordered by descending
/// confidence; `positives` is the ground-truth count.
pub fn average_precision(hits: &[bool], positives: usize) -> f64 {
    if positives == 0 {
        return if hits.is_empty() { 1.0 } else { 0.0 };
    }
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(hits.len());
    for (k, &hit) in hits.iter().enumerate() {
        tp += hit as usize;
        curve.push((tp as f64 / positives as f64, tp as f64 / (k + 1) as f64));
    }
    let mut envelope = 0.0f64;
    for c in curve.iter_mut().rev() {
        envelope = envelope.max(c.1);
        c.1 = envelope;
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in curve {
        area += (r - prev_recall) * p;
        prev_recall = r;
    }
    area
}

fn by_scene(records: &[SceneRecord], what: &str) -> Result<HashMap<usize, usize>> {
    let mut map = HashMap::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        r.validate()?;
        if map.insert(r.scene_id, i).is_some() {
            return Err(Error::Format(format!("scene {} appears twice in the {what}", r.scene_id)));
        }
    }
    Ok(map)
}

/// AP per class that has ground truth. Detections are ranked by score, ties
/// by `(scene_id, position in the scene record)`; each one claims the
/// unmatched same-class ground truth of its scene with the highest IoU,
/// counting as a hit when that IoU is at least `iou_threshold`.
pub fn evaluate_ap_per_class(detections: &[SceneRecord], gts: &[SceneRecord], iou_threshold: f64) -> Result<Vec<ClassAp>> {
    let gt_index = by_scene(gts, "ground truth")?;
    by_scene(detections, "detections")?;

    let mut gt_counts: BTreeMap<usize, usize> = BTreeMap::new();
    for r in gts {
        r.classes.iter().for_each(|&c| *gt_counts.entry(c).or_default() += 1);
    }
    let classes: BTreeSet<usize> = gt_counts.keys().copied().collect();

    let mut ranked: BTreeMap<usize, Vec<(f64, usize, usize)>> = BTreeMap::new();
    for r in detections {
        for (j, (&c, &s)) in r.classes.iter().zip(&r.scores).enumerate() {
            if classes.contains(&c) {
                ranked.entry(c).or_default().push((s, r.scene_id, j));
            }
        }
    }
    let det_of: HashMap<usize, &SceneRecord> = detections.iter().map(|r| (r.scene_id, r)).collect();

    let mut out = Vec::with_capacity(classes.len());
    for (&class_id, &gt_count) in &gt_counts {
        let mut dets = ranked.remove(&class_id).unwrap_or_default();
        dets.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut taken = HashSet::new();
        let mut hits = Vec::with_capacity(dets.len());
        for &(_, scene, j) in &dets {
            let bbox = det_of[&scene].boxes[j];
            let mut best: Option<(f64, usize)> = None;
            if let Some(&gi) = gt_index.get(&scene) {
                let g = &gts[gi];
                for (k, (&gc, gb)) in g.classes.iter().zip(&g.boxes).enumerate() {
                    if gc != class_id || taken.contains(&(scene, k)) {
                        continue;
                    }
                    let v = iou(&bbox, gb);
                    if v >= iou_threshold && best.map_or(true, |(bv, _)| v > bv) {
                        best = Some((v, k));
                    }
                }
            }
            if let Some((_, k)) = best {
                taken.insert((scene, k));
            }
            hits.push(best.is_some());
        }
        out.push(ClassAp { class_id, ap: average_precision(&hits, gt_count), gt_count, detection_count: dets.len() });
    }
    Ok(out)
}

/// Mean AP over classes that have ground truth. With no ground truth at all
/// the result is 1 when there are also no detections and 0 otherwise.
pub fn evaluate_ap(detections: &[SceneRecord], gts: &[SceneRecord], iou_threshold: f64) -> Result<f64> {
    let per_class = evaluate_ap_per_class(detections, gts, iou_threshold)?;
    if per_class.is_empty() {
        let any = detections.iter().any(|r| !r.boxes.is_empty());
        return Ok(if any { 0.0 } else { 1.0 });
    }
    Ok(per_class.iter().map(|c| c.ap).sum::<f64>() / per_class.len() as f64)
}
