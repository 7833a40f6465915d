use crate::numerics::autograd::PROB_EPS;

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

fn p_t(p: f64, target: f64) -> f64 {
    let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if target >= 0.5 {
        pc
    } else {
        1.0 - pc
    }
}

pub(crate) fn focal_value(p: f64, target: f64, alpha: f64, gamma: f64) -> f64 {
    let pt = p_t(p, target);
    -alpha * (1.0 - pt).powf(gamma) * pt.ln()
}

/// Derivative of [`focal_value`] with respect to `p`; zero inside the clamp.
pub(crate) fn focal_grad(p: f64, target: f64, alpha: f64, gamma: f64) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        return 0.0;
    }
    let pt = p_t(p, target);
    let d_pt = alpha * (gamma * (1.0 - pt).powf(gamma - 1.0) * pt.ln() - (1.0 - pt).powf(gamma) / pt);
    if target >= 0.5 {
        d_pt
    } else {
        -d_pt
    }
}

/// `-α (1-p_t)^γ ln p_t` with `α = 0.25`, `γ = 2`.
pub fn focal_loss(p: f64, target: u8) -> f64 {
    focal_value(p, f64::from(target), FOCAL_ALPHA, FOCAL_GAMMA)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_is_free() {
        assert!(focal_loss(1.0, 1) < 1e-15);
        assert!(focal_loss(0.0, 0) < 1e-15);
    }

    #[test]
    fn half_probability_value() {
        let want = 0.25 * 0.25 * 2f64.ln();
        assert!((focal_loss(0.5, 1) - want).abs() < 1e-15);
        assert!((focal_loss(0.5, 1) - 0.0433217).abs() < 1e-7);
        assert!((focal_loss(0.5, 0) - want).abs() < 1e-15);
    }

    #[test]
    fn grad_matches_central_difference() {
        for &(p, t) in &[(0.3, 1.0), (0.8, 0.0), (0.55, 1.0), (0.02, 0.0)] {
            let h = 1e-6;
            let fd = (focal_value(p + h, t, 0.25, 2.0) - focal_value(p - h, t, 0.25, 2.0)) / (2.0 * h);
            let g = focal_grad(p, t, 0.25, 2.0);
            assert!((fd - g).abs() < 1e-6 * (1.0 + g.abs()), "p={p} t={t}");
        }
    }

    proptest::proptest! {
        #[test]
        fn nonnegative_and_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            proptest::prop_assert!(focal_loss(lo, 1) >= 0.0);
            proptest::prop_assert!(focal_loss(lo, 1) >= focal_loss(hi, 1));
            proptest::prop_assert!(focal_loss(hi, 0) >= focal_loss(lo, 0));
        }
    }
}
