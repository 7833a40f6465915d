//! Wall-clock timing of the direct kernels.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::direct::{DirectKernel, Workspace};
use super::{memory_model, AttentionKind, AttentionParams, AttentionSpec};
use crate::error::Result;
use crate::numerics::gemm::Real;
use crate::numerics::{Init, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchSettings {
    pub warmup: usize,
    pub reps: usize,
    pub heads: usize,
    pub seed: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self { warmup: 3, reps: 20, heads: 1, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub kind: AttentionKind,
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub wall_ns: u128,
    pub flops_analytic: u128,
    pub weight_entries: u64,
    pub key_count: u64,
}

fn median(mut v: Vec<u128>) -> u128 {
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2
    }
}

struct Case<T> {
    kind: AttentionKind,
    h: usize,
    w: usize,
    d: usize,
    kernel: DirectKernel<T>,
    x: Vec<T>,
    ws: Workspace<T>,
    times: Vec<u128>,
}

/// Times every `kind × (H, W, d)` case on seeded random maps and attaches the
/// cost model. Repetitions are interleaved across cases, so slow periods of a
/// shared machine affect all cases alike; each case reports the median of
/// `reps` timed runs after `warmup` discarded rounds.
pub fn bench_grid<T: Real>(kinds: &[AttentionKind], cells: &[(usize, usize, usize)], s: &BenchSettings) -> Result<Vec<BenchRow>> {
    let mut cases = Vec::new();
    for &kind in kinds {
        for &(h, w, d) in cells {
            let mut store = ParamStore::new();
            let mut init = Init::new(s.seed);
            let params = AttentionParams::new(&mut store, &mut init, "bench", AttentionSpec::new(kind, d, s.heads))?;
            let kernel = DirectKernel::<T>::new(&params, &store);
            let x = init.normal(&[h * w, d], 1.0).data().iter().map(|&v| T::from_f64(v)).collect();
            cases.push(Case { kind, h, w, d, kernel, x, ws: Workspace::default(), times: Vec::new() });
        }
    }
    let reps = s.reps.max(1);
    for round in 0..s.warmup + reps {
        for c in &mut cases {
            let start = Instant::now();
            std::hint::black_box(c.kernel.forward_into(std::hint::black_box(&c.x), c.h, c.w, &mut c.ws, None)?);
            let ns = start.elapsed().as_nanos();
            if round >= s.warmup {
                c.times.push(ns);
            }
        }
    }
    Ok(cases
        .into_iter()
        .map(|c| {
            let cost = memory_model(c.kind, c.h as u64, c.w as u64, c.d as u64);
            BenchRow {
                kind: c.kind,
                h: c.h,
                w: c.w,
                d: c.d,
                wall_ns: median(c.times),
                flops_analytic: cost.flops,
                weight_entries: cost.weight_entries,
                key_count: cost.key_count,
            }
        })
        .collect())
}

pub const CSV_HEADER: &str = "kind,H,W,d,wall_ns,flops_analytic,weight_entries,key_count";

pub fn write_csv<W: std::io::Write>(mut out: W, rows: &[BenchRow]) -> std::io::Result<()> {
    writeln!(out, "# schema_version=1")?;
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.kind.name(),
            r.h,
            r.w,
            r.d,
            r.wall_ns,
            r.flops_analytic,
            r.weight_entries,
            r.key_count
        )?;
    }
    out.flush()
}
