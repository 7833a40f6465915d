//! Reference-point CSV export.

use std::io::Write;

use super::ReferencePoint;

pub const HEADER: &str = "index,cx,cy,scale,objectness";

/// Learned points have no scale or objectness; those fields are left empty.
pub fn write_csv<W: Write>(mut out: W, refs: &[ReferencePoint]) -> std::io::Result<()> {
    writeln!(out, "# schema_version=1")?;
    writeln!(out, "{HEADER}")?;
    for (i, r) in refs.iter().enumerate() {
        let scale = r.scale_index.map(|s| s.to_string()).unwrap_or_default();
        let obj = r.objectness.map(|p| format!("{p:e}")).unwrap_or_default();
        writeln!(out, "{i},{},{},{scale},{obj}", r.cx, r.cy)?;
    }
    out.flush()
}
