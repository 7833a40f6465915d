//! Box geometry: GIoU on `(cx, cy, w, h)` boxes and the L1 + GIoU box loss.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub const L1_WEIGHT: f64 = 5.0;
pub const GIOU_WEIGHT: f64 = 2.0;

pub type Box4 = [f64; 4];

fn corners(b: &Box4) -> [f64; 4] {
    [b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0]
}

fn check(b: &Box4) -> Result<()> {
    if !(b[2] > 0.0 && b[3] > 0.0) || b.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("degenerate box {b:?}")));
    }
    Ok(())
}

/// Plain IoU; boxes with no overlap give 0.
pub fn iou(a: &Box4, b: &Box4) -> f64 {
    let (ca, cb) = (corners(a), corners(b));
    let iw = (ca[2].min(cb[2]) - ca[0].max(cb[0])).max(0.0);
    let ih = (ca[3].min(cb[3]) - ca[1].max(cb[1])).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

pub fn giou(a: &Box4, b: &Box4) -> Result<f64> {
    check(a)?;
    check(b)?;
    let (ca, cb) = (corners(a), corners(b));
    let iw = (ca[2].min(cb[2]) - ca[0].max(cb[0])).max(0.0);
    let ih = (ca[3].min(cb[3]) - ca[1].max(cb[1])).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    let hull = (ca[2].max(cb[2]) - ca[0].min(cb[0])) * (ca[3].max(cb[3]) - ca[1].min(cb[1]));
    Ok(inter / union - (hull - union) / hull)
}

pub fn l1(a: &Box4, b: &Box4) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// `5·‖a − b‖₁ + 2·(1 − giou(a, b))`.
pub fn box_loss(a: &Box4, b: &Box4) -> Result<f64> {
    Ok(L1_WEIGHT * l1(a, b) + GIOU_WEIGHT * (1.0 - giou(a, b)?))
}

/// Differentiable sums of L1 distance and `1 − GIoU` over row pairs of
/// `pred` (`m × 4`, on the tape) and `target` (`m × 4`, constant).
pub fn box_terms(tape: &mut Tape, pred: Var, target: &Tensor) -> (Var, Var) {
    assert_eq!(tape.value(pred).shape(), target.shape(), "box_terms shapes");
    let m = target.rows() as f64;
    let tgt = tape.constant(target.clone());
    let diff = tape.sub(pred, tgt);
    let ad = tape.abs(diff);
    let l1 = tape.sum(ad);

    let pc = split_corners(tape, pred);
    let tc = split_corners(tape, tgt);
    let ix0 = tape.max(pc[0], tc[0]);
    let iy0 = tape.max(pc[1], tc[1]);
    let ix1 = tape.min(pc[2], tc[2]);
    let iy1 = tape.min(pc[3], tc[3]);
    let iw = tape.sub(ix1, ix0);
    let iw = tape.relu(iw);
    let ih = tape.sub(iy1, iy0);
    let ih = tape.relu(ih);
    let inter = tape.mul(iw, ih);
    let area_p = tape.mul(pc[4], pc[5]);
    let area_t = tape.mul(tc[4], tc[5]);
    let both = tape.add(area_p, area_t);
    let union = tape.sub(both, inter);
    let iou = tape.div(inter, union);
    let hx0 = tape.min(pc[0], tc[0]);
    let hy0 = tape.min(pc[1], tc[1]);
    let hx1 = tape.max(pc[2], tc[2]);
    let hy1 = tape.max(pc[3], tc[3]);
    let hw = tape.sub(hx1, hx0);
    let hh = tape.sub(hy1, hy0);
    let hull = tape.mul(hw, hh);
    let gap = tape.sub(hull, union);
    let pen = tape.div(gap, hull);
    let g = tape.sub(iou, pen);
    let gsum = tape.sum(g);
    let neg = tape.scale(gsum, -1.0);
    let giou_loss = tape.add_scalar(neg, m);
    (l1, giou_loss)
}

/// `[x0, y0, x1, y1, w, h]` column vectors of an `m × 4` box matrix.
fn split_corners(tape: &mut Tape, boxes: Var) -> [Var; 6] {
    let cx = tape.slice_cols(boxes, 0, 1);
    let cy = tape.slice_cols(boxes, 1, 1);
    let w = tape.slice_cols(boxes, 2, 1);
    let h = tape.slice_cols(boxes, 3, 1);
    let hw = tape.scale(w, 0.5);
    let hh = tape.scale(h, 0.5);
    let x0 = tape.sub(cx, hw);
    let y0 = tape.sub(cy, hh);
    let x1 = tape.add(cx, hw);
    let y1 = tape.add(cy, hh);
    [x0, y0, x1, y1, w, h]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corner_oracle(a: &Box4, b: &Box4) -> f64 {
        // Direct corner-form evaluation, independent of `corners`.
        let (ax0, ay0, ax1, ay1) = (a[0] - a[2] * 0.5, a[1] - a[3] * 0.5, a[0] + a[2] * 0.5, a[1] + a[3] * 0.5);
        let (bx0, by0, bx1, by1) = (b[0] - b[2] * 0.5, b[1] - b[3] * 0.5, b[0] + b[2] * 0.5, b[1] + b[3] * 0.5);
        let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
        let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
        let inter = iw * ih;
        let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
        let hull = (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0));
        inter / union - (hull - union) / hull
    }

    #[test]
    fn identical_boxes() {
        let a = [0.3, 0.4, 0.2, 0.1];
        assert!((giou(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!(box_loss(&a, &a).unwrap().abs() < 1e-15);
    }

    #[test]
    fn disjoint_unit_squares() {
        let a = [0.5, 0.5, 1.0, 1.0];
        let b = [1.5, 1.5, 1.0, 1.0];
        assert!((giou(&a, &b).unwrap() + 0.5).abs() < 1e-15);
    }

    #[test]
    fn nested_half_area() {
        let a = [0.5, 0.5, 0.2, 0.2];
        let b = [0.5, 0.5, 0.4, 0.2];
        let g = giou(&a, &b).unwrap();
        assert!((g - 0.5).abs() < 1e-12);
        assert!((g - corner_oracle(&a, &b)).abs() < 1e-15);
        assert!((box_loss(&a, &b).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(matches!(giou(&[0.5, 0.5, 0.0, 0.1], &[0.5, 0.5, 0.1, 0.1]), Err(Error::Domain(_))));
    }

    #[test]
    fn tape_terms_match_plain() {
        let preds = [[0.3, 0.4, 0.2, 0.3], [0.6, 0.5, 0.1, 0.4]];
        let tgts = [[0.35, 0.45, 0.25, 0.2], [0.2, 0.2, 0.1, 0.1]];
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::matrix(2, 4, preds.concat()).unwrap());
        let (l1v, gv) = box_terms(&mut tape, p, &Tensor::matrix(2, 4, tgts.concat()).unwrap());
        let want_l1: f64 = preds.iter().zip(&tgts).map(|(a, b)| l1(a, b)).sum();
        let want_g: f64 = preds.iter().zip(&tgts).map(|(a, b)| 1.0 - giou(a, b).unwrap()).sum();
        assert!((tape.value(l1v).item() - want_l1).abs() < 1e-12);
        assert!((tape.value(gv).item() - want_g).abs() < 1e-12);
    }

    fn arb_box() -> impl proptest::strategy::Strategy<Value = Box4> {
        use proptest::prelude::*;
        (0.05f64..0.95, 0.05f64..0.95, 0.01f64..0.6, 0.01f64..0.6).prop_map(|(a, b, c, d)| [a, b, c, d])
    }

    proptest::proptest! {
        #[test]
        fn giou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = giou(&a, &b).unwrap();
            let ba = giou(&b, &a).unwrap();
            proptest::prop_assert!((ab - ba).abs() < 1e-12);
            proptest::prop_assert!((-1.0..=1.0).contains(&ab));
            proptest::prop_assert!((ab - corner_oracle(&a, &b)).abs() < 1e-12);
        }
    }
}
