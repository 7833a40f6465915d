//! Set-prediction losses: focal classification, L1 + GIoU boxes, bipartite
//! matching, and their combination at the candidate and decoder sites.

pub mod focal;
pub mod giou;
pub mod hungarian;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
pub use focal::{focal_loss, FOCAL_ALPHA, FOCAL_GAMMA};
pub use giou::{box_loss, giou, iou, Box4, GIOU_WEIGHT, L1_WEIGHT};

/// Weight on the classification term (both matching and loss).
pub const CLS_WEIGHT: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub class_id: usize,
    /// `(cx, cy, w, h)`, normalized.
    pub bbox: Box4,
}

/// A scored box: probability of the relevant class and its box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub prob: f64,
    pub bbox: Box4,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `assignment[i]` is the prediction matched to ground truth `i`.
    pub assignment: Vec<usize>,
    pub total_cost: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub focal: f64,
    pub l1: f64,
    pub giou: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(focal: f64, l1: f64, giou: f64) -> Self {
        Self { focal, l1, giou, total: CLS_WEIGHT * focal + L1_WEIGHT * l1 + GIOU_WEIGHT * giou }
    }
}

/// `2·focal(p, 1) + box_loss(pred, gt)`.
pub fn match_cost(pred: &Prediction, gt: &GroundTruthObject) -> Result<f64> {
    Ok(CLS_WEIGHT * focal_loss(pred.prob, 1) + box_loss(&pred.bbox, &gt.bbox)?)
}

/// Row-major `gts × preds` matrix of [`match_cost`] values where the
/// probability for each pair comes from `prob_of(pred_index, gt)`.
pub fn cost_matrix(
    boxes: &[Box4],
    gts: &[GroundTruthObject],
    prob_of: impl Fn(usize, &GroundTruthObject) -> f64,
) -> Result<Vec<f64>> {
    let mut cost = Vec::with_capacity(gts.len() * boxes.len());
    for gt in gts {
        for (j, b) in boxes.iter().enumerate() {
            cost.push(match_cost(&Prediction { prob: prob_of(j, gt), bbox: *b }, gt)?);
        }
    }
    Ok(cost)
}

pub fn match_costs(cost: &[f64], n_gt: usize, n_pred: usize) -> Result<MatchResult> {
    if n_gt > n_pred {
        return Err(Error::Domain(format!("{n_gt} ground truths but only {n_pred} predictions")));
    }
    let a = hungarian::assign(cost, n_gt, n_pred)?;
    Ok(MatchResult { assignment: a.cols, total_cost: a.cost })
}

/// Minimum-cost injective matching of ground truths to predictions.
pub fn hungarian_match(preds: &[Prediction], gts: &[GroundTruthObject]) -> Result<MatchResult> {
    let boxes: Vec<Box4> = preds.iter().map(|p| p.bbox).collect();
    let cost = cost_matrix(&boxes, gts, |j, _| preds[j].prob)?;
    match_costs(&cost, gts.len(), preds.len())
}

/// Candidate-site loss for already-matched predictions (binarized labels):
/// focal on every prediction, box terms on matched ones.
pub fn loss_init_matched(preds: &[Prediction], gts: &[GroundTruthObject], m: &MatchResult) -> Result<LossBreakdown> {
    let mut target = vec![0u8; preds.len()];
    for &j in &m.assignment {
        target[j] = 1;
    }
    let focal = preds.iter().zip(&target).map(|(p, &t)| focal_loss(p.prob, t)).sum();
    let (mut l1, mut g) = (0.0, 0.0);
    for (gt, &j) in gts.iter().zip(&m.assignment) {
        l1 += giou::l1(&preds[j].bbox, &gt.bbox);
        g += 1.0 - giou(&preds[j].bbox, &gt.bbox)?;
    }
    Ok(LossBreakdown::new(focal, l1, g))
}

/// Matches then scores encoder-side candidates.
pub fn loss_init(preds: &[Prediction], gts: &[GroundTruthObject]) -> Result<LossBreakdown> {
    let m = hungarian_match(preds, gts)?;
    loss_init_matched(preds, gts, &m)
}

/// Init total plus every decoder-layer total.
pub fn loss_total(init: &LossBreakdown, per_layer: &[LossBreakdown]) -> Result<f64> {
    if per_layer.is_empty() {
        return Err(Error::Config("at least one decoder layer loss is required".into()));
    }
    Ok(init.total + per_layer.iter().map(|l| l.total).sum::<f64>())
}

/// Tape handles of one site's loss.
#[derive(Debug, Clone, Copy)]
pub struct SiteLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

fn gt_boxes(gts: &[GroundTruthObject]) -> Tensor {
    let data: Vec<f64> = gts.iter().flat_map(|g| g.bbox).collect();
    Tensor::from_parts(vec![gts.len(), 4], data)
}

/// Weighted focal + box loss on the tape. `probs` has one column per
/// classification output, `targets` the matching 0/1 layout, and
/// `matched_pred[i]` is the row of `boxes` assigned to `gts[i]`.
pub fn site_loss(
    tape: &mut Tape,
    probs: Var,
    targets: &[f64],
    boxes: Var,
    gts: &[GroundTruthObject],
    matched_pred: &[usize],
) -> SiteLoss {
    let f = tape.focal(probs, targets, FOCAL_ALPHA, FOCAL_GAMMA);
    let focal = tape.sum(f);
    let focal_w = tape.scale(focal, CLS_WEIGHT);
    let focal_v = tape.value(focal).item();
    if gts.is_empty() {
        return SiteLoss { total: focal_w, breakdown: LossBreakdown::new(focal_v, 0.0, 0.0) };
    }
    let picked = tape.gather_rows(boxes, matched_pred);
    let (l1, g) = giou::box_terms(tape, picked, &gt_boxes(gts));
    let l1w = tape.scale(l1, L1_WEIGHT);
    let gw = tape.scale(g, GIOU_WEIGHT);
    let boxes_total = tape.add(l1w, gw);
    let total = tape.add(focal_w, boxes_total);
    let breakdown = LossBreakdown::new(focal_v, tape.value(l1).item(), tape.value(g).item());
    SiteLoss { total, breakdown }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(b: Box4) -> GroundTruthObject {
        GroundTruthObject { class_id: 0, bbox: b }
    }

    #[test]
    fn match_cost_values() {
        let b = [0.4, 0.4, 0.2, 0.3];
        assert!(match_cost(&Prediction { prob: 1.0, bbox: b }, &gt(b)).unwrap() < 1e-12);
        let c = match_cost(&Prediction { prob: 0.5, bbox: b }, &gt(b)).unwrap();
        assert!((c - 0.0866434).abs() < 1e-7);
        assert!((c - 2.0 * focal_loss(0.5, 1)).abs() < 1e-15);
    }

    #[test]
    fn init_without_objects_is_pure_negative_focal() {
        let preds = [Prediction { prob: 0.3, bbox: [0.5, 0.5, 0.1, 0.1] }, Prediction { prob: 0.6, bbox: [0.2, 0.2, 0.1, 0.1] }];
        let l = loss_init(&preds, &[]).unwrap();
        let want = focal_loss(0.3, 0) + focal_loss(0.6, 0);
        assert!((l.focal - want).abs() < 1e-15);
        assert_eq!(l.l1, 0.0);
        assert!((l.total - 2.0 * want).abs() < 1e-15);
    }

    #[test]
    fn perfect_matched_candidate_has_no_box_term() {
        let b = [0.3, 0.6, 0.2, 0.2];
        let preds = [Prediction { prob: 0.9, bbox: b }, Prediction { prob: 0.1, bbox: [0.8, 0.8, 0.1, 0.1] }];
        let l = loss_init(&preds, &[gt(b)]).unwrap();
        assert!(l.l1.abs() < 1e-15 && l.giou.abs() < 1e-15);
    }

    #[test]
    fn three_candidates_two_objects_by_hand() {
        let preds = [
            Prediction { prob: 0.7, bbox: [0.30, 0.30, 0.20, 0.20] },
            Prediction { prob: 0.2, bbox: [0.70, 0.70, 0.30, 0.20] },
            Prediction { prob: 0.6, bbox: [0.72, 0.68, 0.25, 0.25] },
        ];
        let gts = [gt([0.31, 0.29, 0.2, 0.22]), gt([0.7, 0.7, 0.26, 0.24])];
        let m = hungarian_match(&preds, &gts).unwrap();
        // Enumerate all six injections by hand.
        let mut best = (f64::INFINITY, vec![]);
        for a in 0..3 {
            for b in 0..3 {
                if a == b {
                    continue;
                }
                let c = match_cost(&preds[a], &gts[0]).unwrap() + match_cost(&preds[b], &gts[1]).unwrap();
                if c < best.0 {
                    best = (c, vec![a, b]);
                }
            }
        }
        assert_eq!(m.assignment, best.1);
        let l = loss_init(&preds, &gts).unwrap();
        let (a, b) = (best.1[0], best.1[1]);
        let other = 3 - a - b;
        let focal = focal_loss(preds[a].prob, 1) + focal_loss(preds[b].prob, 1) + focal_loss(preds[other].prob, 0);
        let boxes = box_loss(&preds[a].bbox, &gts[0].bbox).unwrap() + box_loss(&preds[b].bbox, &gts[1].bbox).unwrap();
        assert!((l.total - (2.0 * focal + boxes)).abs() < 1e-12);
    }

    #[test]
    fn totals_add_up() {
        assert_eq!(loss_total(&LossBreakdown::default(), &[LossBreakdown::default()]).unwrap(), 0.0);
        let init = LossBreakdown { total: 1.5, ..Default::default() };
        let layers = [LossBreakdown { total: 2.0, ..Default::default() }, LossBreakdown { total: 3.0, ..Default::default() }];
        assert_eq!(loss_total(&init, &layers).unwrap(), 6.5);
        assert!(loss_total(&init, &[]).is_err());
    }

    #[test]
    fn more_truths_than_predictions() {
        let preds = [Prediction { prob: 0.5, bbox: [0.5, 0.5, 0.1, 0.1] }];
        let gts = [gt([0.2, 0.2, 0.1, 0.1]), gt([0.7, 0.7, 0.1, 0.1])];
        assert!(hungarian_match(&preds, &gts).is_err());
    }

    #[test]
    fn permuting_predictions_permutes_assignment() {
        let preds: Vec<Prediction> = (0..6)
            .map(|i| Prediction { prob: 0.1 + 0.13 * i as f64, bbox: [0.1 + 0.12 * i as f64, 0.5, 0.1, 0.15] })
            .collect();
        let gts = [gt([0.35, 0.5, 0.1, 0.1]), gt([0.7, 0.45, 0.12, 0.15])];
        let base = hungarian_match(&preds, &gts).unwrap();
        let perm = [3, 5, 0, 1, 4, 2];
        let shuffled: Vec<Prediction> = perm.iter().map(|&i| preds[i]).collect();
        let m = hungarian_match(&shuffled, &gts).unwrap();
        assert_eq!(m.total_cost, base.total_cost);
        for (g, &j) in m.assignment.iter().enumerate() {
            assert_eq!(perm[j], base.assignment[g]);
        }
    }

    #[test]
    fn site_loss_on_tape_matches_plain() {
        let preds = [
            Prediction { prob: 0.7, bbox: [0.30, 0.30, 0.20, 0.20] },
            Prediction { prob: 0.2, bbox: [0.70, 0.70, 0.30, 0.20] },
            Prediction { prob: 0.6, bbox: [0.72, 0.68, 0.25, 0.25] },
        ];
        let gts = [gt([0.31, 0.29, 0.2, 0.22]), gt([0.7, 0.7, 0.26, 0.24])];
        let plain = loss_init(&preds, &gts).unwrap();
        let m = hungarian_match(&preds, &gts).unwrap();
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(preds.iter().map(|p| p.prob).collect()));
        let b = tape.constant(Tensor::matrix(3, 4, preds.iter().flat_map(|p| p.bbox).collect()).unwrap());
        let mut targets = vec![0.0; 3];
        m.assignment.iter().for_each(|&j| targets[j] = 1.0);
        let s = site_loss(&mut tape, p, &targets, b, &gts, &m.assignment);
        assert!((tape.value(s.total).item() - plain.total).abs() < 1e-12);
        assert!((s.breakdown.total - plain.total).abs() < 1e-12);
    }
}
