//! Tape-free kernels over flat buffers, generic in float width, for timing.
//! Positional embeddings are not applied here.

use crate::error::{dim_err, Result};
use crate::numerics::gemm::{gemm_strided, Real, Strides};
use crate::numerics::{Linear, ParamStore};

use super::{AttentionKind, AttentionParams, Branch};

#[derive(Debug, Clone)]
struct Dense<T> {
    /// `out × in`, row-major.
    weight: Vec<T>,
    bias: Vec<T>,
    in_dim: usize,
    out_dim: usize,
}

impl<T: Real> Dense<T> {
    fn from_linears(layers: &[&Linear], store: &ParamStore) -> Self {
        let cvt = |v: &[f64]| v.iter().map(|&x| T::from_f64(x)).collect::<Vec<T>>();
        Self {
            weight: layers.iter().flat_map(|l| cvt(store.get(l.weight).data())).collect(),
            bias: layers.iter().flat_map(|l| cvt(store.get(l.bias).data())).collect(),
            in_dim: layers[0].in_dim,
            out_dim: layers.iter().map(|l| l.out_dim).sum(),
        }
    }

    fn apply_into(&self, x: &[T], rows: usize, y: &mut [T]) {
        let sw = Strides::col_major(self.in_dim);
        gemm_strided(rows, self.in_dim, self.out_dim, x, Strides::row_major(self.in_dim), &self.weight, sw, y, Strides::row_major(self.out_dim), false);
        for r in y[..rows * self.out_dim].chunks_exact_mut(self.out_dim) {
            r.iter_mut().zip(&self.bias).for_each(|(a, &b)| *a += b);
        }
    }
}

/// Scratch buffers reused across calls.
#[derive(Debug, Default)]
pub struct Workspace<T> {
    proj: Vec<T>,
    scores: Vec<T>,
    branch: Vec<T>,
    transposed: Vec<T>,
    combined: Vec<T>,
    out: Vec<T>,
    tiles: Tiles<T>,
}

#[derive(Debug, Default)]
struct Tiles<T> {
    keys: Vec<T>,
    k: Vec<T>,
    qv: Vec<T>,
    scores: Vec<T>,
}

/// Pixels per tile in the HV kernel.
const TILE_PIXELS: usize = 256;

fn sized<T: Real>(v: &mut Vec<T>, n: usize) -> &mut [T] {
    if v.len() < n {
        v.resize(n, T::ZERO);
    }
    &mut v[..n]
}

/// A snapshot of attention parameters converted to `T`.
#[derive(Debug, Clone)]
pub struct DirectKernel<T> {
    kind: AttentionKind,
    d: usize,
    heads: usize,
    branches: Vec<Branch>,
    /// Branch of each q/k/v triple, in projection order.
    triples: Vec<Branch>,
    /// Each triple's q/k/v projections stacked into one layer.
    qkv: Vec<Dense<T>>,
    out: Option<Dense<T>>,
}

#[derive(Debug, Clone)]
pub struct DirectOutput<T> {
    /// `(H·W) × output_width`, token-major.
    pub out: Vec<T>,
    /// `(branch, head, weights)` when requested.
    pub weights: Vec<(Branch, usize, Vec<T>)>,
}

type Keep<'a, T> = Option<&'a mut Vec<(Branch, usize, Vec<T>)>>;

impl<T: Real> DirectKernel<T> {
    pub fn new(params: &AttentionParams, store: &ParamStore) -> Self {
        Self {
            kind: params.kind,
            d: params.d,
            heads: params.heads,
            branches: params.branches(),
            triples: params.projections.iter().map(|p| p.branch).collect(),
            qkv: params.projections.iter().map(|p| Dense::from_linears(&[&p.q, &p.k, &p.v], store)).collect(),
            out: params.out.as_ref().map(|l| Dense::from_linears(&[l], store)),
        }
    }

    pub fn kind(&self) -> AttentionKind {
        self.kind
    }

    fn concat_width(&self) -> usize {
        match self.kind {
            AttentionKind::Hv => self.d * self.triples.len(),
            _ => self.d,
        }
    }

    pub fn output_width(&self) -> usize {
        self.out.as_ref().map_or(self.concat_width(), |o| o.out_dim)
    }

    /// Runs on a token-major `(H·W) × d` buffer.
    pub fn forward(&self, x: &[T], h: usize, w: usize, keep_weights: bool) -> Result<DirectOutput<T>> {
        let mut ws = Workspace::default();
        let mut weights = Vec::new();
        let out = self.forward_into(x, h, w, &mut ws, keep_weights.then_some(&mut weights))?.to_vec();
        Ok(DirectOutput { out, weights })
    }

    /// As [`forward`](Self::forward) but reusing `ws`; returns a view into it.
    pub fn forward_into<'w>(&self, x: &[T], h: usize, w: usize, ws: &'w mut Workspace<T>, mut keep: Keep<T>) -> Result<&'w [T]> {
        let (d, hw) = (self.d, h * w);
        if x.len() != hw * d || hw == 0 {
            return Err(dim_err!("input has {} values, expected {}·{}·{}", x.len(), h, w, d));
        }
        let pw = 3 * d;
        let cw = self.concat_width();
        if self.kind == AttentionKind::Hv {
            return self.hv(x, h, w, ws, keep);
        }
        let proj = sized(&mut ws.proj, hw * pw);
        self.qkv[0].apply_into(x, hw, proj);
        let combined = sized(&mut ws.combined, hw * cw);
        if self.kind == AttentionKind::Global {
            let scores = sized(&mut ws.scores, hw * hw);
            self.global(proj, pw, hw, scores, combined, &mut keep);
        } else {
            combined.iter_mut().for_each(|c| *c = T::ZERO);
            for &branch in &self.branches {
                let n = if branch == Branch::Column { h } else { w };
                let scores = sized(&mut ws.scores, hw * n);
                self.cc_branch(proj, pw, h, w, branch, scores, combined, &mut keep);
            }
        }
        match &self.out {
            Some(o) => {
                let out = sized(&mut ws.out, hw * o.out_dim);
                o.apply_into(combined, hw, out);
                Ok(out)
            }
            None => Ok(&ws.combined[..hw * cw]),
        }
    }

    /// Branch by branch, in row tiles small enough to stay in cache. The
    /// output projection is accumulated per branch block.
    fn hv<'w>(&self, x: &[T], h: usize, w: usize, ws: &'w mut Workspace<T>, mut keep: Keep<T>) -> Result<&'w [T]> {
        let (d, hw) = (self.d, h * w);
        let cw = self.concat_width();
        let rm = Strides::row_major;
        let mut res = std::mem::take(&mut ws.branch);
        let mut xt = std::mem::take(&mut ws.transposed);
        let target = match &self.out {
            Some(o) => sized(&mut ws.out, hw * o.out_dim),
            None => sized(&mut ws.combined, hw * cw),
        };
        for (i, &branch) in self.triples.iter().enumerate() {
            let res = sized(&mut res, hw * d);
            if branch == Branch::Column {
                self.hv_rowwise(&self.qkv[i], x, h, w, &mut ws.tiles, res, branch, &mut keep, false);
            } else {
                // Mixing along image columns is mixing along rows of the transposed grid.
                let xt = sized(&mut xt, hw * d);
                transpose_grid(x, h, w, d, xt);
                let out_t = sized(&mut ws.proj, hw * d);
                self.hv_rowwise(&self.qkv[i], xt, w, h, &mut ws.tiles, out_t, branch, &mut keep, true);
                transpose_grid(out_t, w, h, d, res);
            }
            match &self.out {
                Some(o) => {
                    // Columns i·d..(i+1)·d of the `out × cw` weight.
                    let wb = &o.weight[i * d..];
                    gemm_strided(hw, d, o.out_dim, res, rm(d), wb, Strides::col_major(cw), target, rm(o.out_dim), i > 0);
                }
                None => {
                    for p in 0..hw {
                        target[p * cw + i * d..p * cw + (i + 1) * d].copy_from_slice(&res[p * d..(p + 1) * d]);
                    }
                }
            }
        }
        if let Some(o) = &self.out {
            for r in target.chunks_exact_mut(o.out_dim) {
                r.iter_mut().zip(&o.bias).for_each(|(a, &b)| *a += b);
            }
        }
        ws.branch = res;
        ws.transposed = xt;
        Ok(match &self.out {
            Some(o) => &ws.out[..hw * o.out_dim],
            None => &ws.combined[..hw * cw],
        })
    }

    /// One HV branch where every pixel mixes values from its own grid row and
    /// attends over the `w` column-mean keys. `transposed` marks a grid that
    /// is the transpose of the image, for weight bookkeeping.
    #[allow(clippy::too_many_arguments)]
    fn hv_rowwise(
        &self,
        qkv: &Dense<T>,
        x: &[T],
        h: usize,
        w: usize,
        tiles: &mut Tiles<T>,
        res: &mut [T],
        branch: Branch,
        keep: &mut Keep<T>,
        transposed: bool,
    ) {
        let (d, dh, hw) = (self.d, self.d / self.heads, h * w);
        let scale = self.scale();
        let rm = Strides::row_major;
        let rows_per_tile = (TILE_PIXELS / w).clamp(1, h);
        let tile_px = rows_per_tile * w;
        // Keys: column means of the projected map, accumulated tile by tile.
        let keys = sized(&mut tiles.keys, w * d);
        keys.iter_mut().for_each(|k| *k = T::ZERO);
        let kt = sized(&mut tiles.k, tile_px * d);
        let inv = T::ONE / T::from_f64(h as f64);
        let kw = &qkv.weight[d * d..2 * d * d];
        for r0 in (0..h).step_by(rows_per_tile) {
            let m = (rows_per_tile.min(h - r0)) * w;
            gemm_strided(m, d, d, &x[r0 * w * d..], rm(d), kw, Strides::col_major(d), kt, rm(d), false);
            for (p, row) in kt[..m * d].chunks_exact(d).enumerate() {
                let dst = &mut keys[(p % w) * d..(p % w + 1) * d];
                dst.iter_mut().zip(row).for_each(|(o, &v)| *o += v * inv);
            }
        }
        for kc in keys.chunks_exact_mut(d) {
            kc.iter_mut().zip(&qkv.bias[d..2 * d]).for_each(|(a, &b)| *a += b);
        }
        let mut full: Vec<Vec<T>> = if keep.is_some() { vec![vec![T::ZERO; hw * w]; self.heads] } else { Vec::new() };
        let qv = sized(&mut tiles.qv, tile_px * 2 * d);
        let s = sized(&mut tiles.scores, tile_px * w);
        for r0 in (0..h).step_by(rows_per_tile) {
            let rows = rows_per_tile.min(h - r0);
            let m = rows * w;
            let xs = &x[r0 * w * d..];
            // q and v projections for the tile: weight blocks 0 and 2.
            gemm_strided(m, d, d, xs, rm(d), &qkv.weight[..d * d], Strides::col_major(d), qv, rm(2 * d), false);
            gemm_strided(m, d, d, xs, rm(d), &qkv.weight[2 * d * d..], Strides::col_major(d), &mut qv[d..], rm(2 * d), false);
            for r in qv[..m * 2 * d].chunks_exact_mut(2 * d) {
                r[..d].iter_mut().zip(&qkv.bias[..d]).for_each(|(a, &b)| *a += b);
                r[d..].iter_mut().zip(&qkv.bias[2 * d..]).for_each(|(a, &b)| *a += b);
            }
            for head in 0..self.heads {
                let lo = head * dh;
                gemm_strided(m, dh, w, &qv[lo..], rm(2 * d), &keys[lo..], Strides::col_major(d), s, rm(w), false);
                s[..m * w].chunks_exact_mut(w).for_each(|r| softmax_scaled(r, scale));
                for r in 0..rows {
                    let p = r * w;
                    let dst = &mut res[(r0 * w + p) * d + lo..];
                    gemm_strided(w, w, dh, &s[p * w..], rm(w), &qv[p * 2 * d + d + lo..], rm(2 * d), dst, rm(d), false);
                }
                if let Some(f) = full.get_mut(head) {
                    f[r0 * w * w..(r0 * w + m) * w].copy_from_slice(&s[..m * w]);
                }
            }
        }
        if let Some(kp) = keep {
            for (head, f) in full.into_iter().enumerate() {
                let f = if transposed { transpose_grid_owned(&f, h, w, w) } else { f };
                kp.push((branch, head, f));
            }
        }
    }

    fn scale(&self) -> T {
        T::ONE / T::from_f64((self.d / self.heads) as f64).sqrt()
    }

    fn global(&self, proj: &[T], pw: usize, hw: usize, s: &mut [T], combined: &mut [T], keep: &mut Keep<T>) {
        let (d, dh) = (self.d, self.d / self.heads);
        let scale = self.scale();
        let rm = Strides::row_major;
        for head in 0..self.heads {
            let (q, k, v) = (&proj[head * dh..], &proj[d + head * dh..], &proj[2 * d + head * dh..]);
            gemm_strided(hw, dh, hw, q, rm(pw), k, Strides::col_major(pw), s, rm(hw), false);
            s.chunks_exact_mut(hw).for_each(|r| softmax_scaled(r, scale));
            if let Some(kp) = keep {
                kp.push((Branch::Global, head, s.to_vec()));
            }
            gemm_strided(hw, hw, dh, s, rm(hw), v, rm(pw), &mut combined[head * dh..], rm(d), false);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn cc_branch(&self, proj: &[T], pw: usize, h: usize, w: usize, branch: Branch, s: &mut [T], combined: &mut [T], keep: &mut Keep<T>) {
        let (d, dh) = (self.d, self.d / self.heads);
        let n = if branch == Branch::Column { h } else { w };
        let pix = |u: usize, c: usize, t: usize| if branch == Branch::Column { t * w + c } else { u * w + t };
        let scale = self.scale();
        for head in 0..self.heads {
            let lo = head * dh;
            for u in 0..h {
                for c in 0..w {
                    let p = u * w + c;
                    let qr = &proj[p * pw + lo..p * pw + lo + dh];
                    for t in 0..n {
                        let kp = pix(u, c, t) * pw + d + lo;
                        s[p * n + t] = qr.iter().zip(&proj[kp..kp + dh]).fold(T::ZERO, |acc, (&a, &b)| acc + a * b);
                    }
                    softmax_scaled(&mut s[p * n..(p + 1) * n], scale);
                    let dst = &mut combined[p * d + lo..p * d + lo + dh];
                    for t in 0..n {
                        let vp = pix(u, c, t) * pw + 2 * d + lo;
                        let a = s[p * n + t];
                        dst.iter_mut().zip(&proj[vp..vp + dh]).for_each(|(o, &x)| *o += a * x);
                    }
                }
            }
            if let Some(kp) = keep {
                kp.push((branch, head, s.to_vec()));
            }
        }
    }
}

fn softmax_scaled<T: Real>(row: &mut [T], scale: T) {
    let mut peaks = [row[0]; 8];
    let mut chunks = row.chunks_exact(8);
    for c in &mut chunks {
        peaks.iter_mut().zip(c).for_each(|(m, &x)| *m = if x > *m { x } else { *m });
    }
    let mx = peaks.iter().chain(chunks.remainder()).fold(row[0], |m, &x| if x > m { x } else { m });
    row.iter_mut().for_each(|x| *x = ((*x - mx) * scale).exp_nonpositive());
    let mut lanes = [T::ZERO; 8];
    let mut chunks = row.chunks_exact(8);
    for c in &mut chunks {
        lanes.iter_mut().zip(c).for_each(|(l, &x)| *l += x);
    }
    let sum = lanes.iter().chain(chunks.remainder()).fold(T::ZERO, |a, &b| a + b);
    let inv = T::ONE / sum;
    row.iter_mut().for_each(|x| *x = *x * inv);
}

/// Swaps the grid axes of a token-major `(h·w) × d` buffer.
fn transpose_grid<T: Real>(x: &[T], h: usize, w: usize, d: usize, out: &mut [T]) {
    for u in 0..h {
        for c in 0..w {
            out[(c * h + u) * d..(c * h + u + 1) * d].copy_from_slice(&x[(u * w + c) * d..(u * w + c + 1) * d]);
        }
    }
}

fn transpose_grid_owned<T: Real>(x: &[T], h: usize, w: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    transpose_grid(x, h, w, d, &mut out);
    out
}

