//! Attention-map CSV export.

use std::io::Write;

use super::AttentionWeights;

pub const SCHEMA_VERSION: u32 = 1;
pub const HEADER: &str = "head,query_row,query_col,key_index,weight";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionRow {
    pub head: usize,
    pub query_row: usize,
    pub query_col: usize,
    pub key_index: usize,
    pub weight: f64,
}

/// Flattens encoder weights. Keys of successive branches are numbered
/// consecutively, so an HV query lists its `H` row keys then its `W` column keys.
pub fn encoder_rows(weights: &AttentionWeights) -> Vec<AttentionRow> {
    let heads = weights.blocks.iter().map(|b| b.head + 1).max().unwrap_or(0);
    let mut rows = Vec::new();
    for head in 0..heads {
        let blocks: Vec<_> = weights.blocks.iter().filter(|b| b.head == head).collect();
        for u in 0..weights.h {
            for v in 0..weights.w {
                let q = u * weights.w + v;
                let mut offset = 0;
                for b in &blocks {
                    for (k, &wt) in b.row(q).iter().enumerate() {
                        rows.push(AttentionRow { head, query_row: u, query_col: v, key_index: offset + k, weight: wt });
                    }
                    offset += b.keys;
                }
            }
        }
    }
    rows
}

pub fn write_csv<W: Write>(mut out: W, rows: &[AttentionRow]) -> std::io::Result<()> {
    writeln!(out, "# schema_version={SCHEMA_VERSION}")?;
    writeln!(out, "{HEADER}")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{:e}", r.head, r.query_row, r.query_col, r.key_index, r.weight)?;
    }
    out.flush()
}
