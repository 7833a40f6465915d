//! Analytic FLOP and memory counts for the encoder attention kernels.

use serde::{Deserialize, Serialize};

use super::AttentionKind;

/// `4·HW·d² + 2·(HW)²·d`.
pub fn flops_global(h: u64, w: u64, d: u64) -> u128 {
    let (h, w, d) = (h as u128, w as u128, d as u128);
    let hw = h * w;
    4 * hw * d * d + 2 * hw * hw * d
}

/// `7·HW·d² + 2·HW·d·(H+W)`.
pub fn flops_hv(h: u64, w: u64, d: u64) -> u128 {
    let (h, w, d) = (h as u128, w as u128, d as u128);
    let hw = h * w;
    7 * hw * d * d + 2 * hw * d * (h + w)
}

/// Multiplications actually performed by this crate's kernels.
///
/// Global: q/k/v/out projections plus scores and aggregation. HV: two
/// q/k/v triples, a `2d → d` output projection, and `H + W` scores and
/// mixes per pixel. CC: one q/k/v triple, a `d → d` output, and `H + W`
/// scores and mixes per pixel.
pub fn kernel_multiplies(kind: AttentionKind, h: u64, w: u64, d: u64) -> u128 {
    let (h, w, d) = (h as u128, w as u128, d as u128);
    let hw = h * w;
    match kind {
        AttentionKind::Global => 4 * hw * d * d + 2 * hw * hw * d,
        AttentionKind::Hv => 8 * hw * d * d + 2 * hw * d * (h + w),
        AttentionKind::Cc => 4 * hw * d * d + 2 * hw * d * (h + w),
    }
}

/// Analytic FLOPs: the closed forms for global and HV, the kernel count for CC.
pub fn flops_analytic(kind: AttentionKind, h: u64, w: u64, d: u64) -> u128 {
    match kind {
        AttentionKind::Global => flops_global(h, w, d),
        AttentionKind::Hv => flops_hv(h, w, d),
        AttentionKind::Cc => kernel_multiplies(kind, h, w, d),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionCost {
    pub flops: u128,
    /// Keys seen by one query.
    pub key_count: u64,
    /// Attention weights stored for all queries.
    pub weight_entries: u64,
    /// Key vectors materialized, in scalars: shared `(H+W)·d` for HV,
    /// per-query `HW·(H+W−1)·d` for CC, `HW·d` for global.
    pub key_storage: u64,
}

pub fn memory_model(kind: AttentionKind, h: u64, w: u64, d: u64) -> AttentionCost {
    let hw = h * w;
    let flops = flops_analytic(kind, h, w, d);
    match kind {
        AttentionKind::Global => AttentionCost { flops, key_count: hw, weight_entries: hw * hw, key_storage: hw * d },
        AttentionKind::Hv => AttentionCost {
            flops,
            key_count: h + w,
            weight_entries: hw * (h + w),
            key_storage: (h + w) * d,
        },
        AttentionKind::Cc => AttentionCost {
            flops,
            key_count: h + w - 1,
            weight_entries: hw * (h + w - 1),
            key_storage: hw * (h + w - 1) * d,
        },
    }
}
