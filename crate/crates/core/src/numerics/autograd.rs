//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Every forward operation appends a node holding its value. `backward`
//! walks the tape in reverse and accumulates gradients for nodes that
//! depend on a parameter.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::f64::consts::PI;

use super::gemm::gemm;
use super::params::{GradRecord, ParamId, ParamStore};
use super::tensor::Tensor;

/// Clamp applied to probabilities before taking logarithms in focal terms.
pub const PROB_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which neighbours a pixel attends to along one image axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Pixels `(i, v)` sharing the query's column: `h` keys.
    Column,
    /// Pixels `(u, j)` sharing the query's row: `w` keys.
    Row,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Abs(Var),
    Max(Var, Var),
    Min(Var, Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, normed: Vec<f64>, rstd: Vec<f64> },
    Sum(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    Reshape(Var),
    Transpose(Var),
    Im2Col { x: Var, h: usize, w: usize, k: usize },
    PoolRows { x: Var, h: usize, w: usize },
    PoolCols { x: Var, h: usize, w: usize },
    AxialScores { q: Var, k: Var, h: usize, w: usize, axis: Axis },
    AxialMix { a: Var, v: Var, h: usize, w: usize, axis: Axis },
    Focal { p: Var, targets: Vec<f64>, alpha: f64, gamma: f64 },
    SinEmbed { coords: Var, dim: usize, temperature: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradients of every parameter that was read on the tape, ordered by id.
    pub fn param_grads(&self, tape: &Tape, store: &ParamStore) -> Vec<GradRecord> {
        let mut ids: Vec<(ParamId, Var)> = tape.params.iter().map(|(&p, &v)| (p, v)).collect();
        ids.sort_by_key(|(p, _)| p.index());
        ids.into_iter()
            .map(|(p, v)| {
                let shape = store.get(p).shape().to_vec();
                let data = self.grads[v.0].clone().unwrap_or_else(|| vec![0.0; shape.iter().product()]);
                GradRecord { param: p, grad: Tensor::from_parts(shape, data) }
            })
            .collect()
    }
}

fn acc_into(slot: &mut Option<Vec<f64>>, add: &[f64]) {
    match slot {
        Some(buf) => buf.iter_mut().zip(add).for_each(|(a, b)| *a += b),
        None => *slot = Some(add.to_vec()),
    }
}

fn slot_mut(slot: &mut Option<Vec<f64>>, n: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; n])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Hash of every branch taken by a non-smooth operation: ReLU and abs
    /// signs, max/min sides and focal clamps. Two tapes with equal
    /// signatures lie on the same smooth piece of the loss.
    pub fn branch_signature(&self) -> u64 {
        let mut hasher = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                &Op::Relu(x) | &Op::Abs(x) => self.value(x).data().iter().for_each(|&v| (v > 0.0).hash(&mut hasher)),
                &Op::Max(a, b) | &Op::Min(a, b) => {
                    self.value(a).data().iter().zip(self.value(b).data()).for_each(|(x, y)| (x >= y).hash(&mut hasher))
                }
                Op::Focal { p, .. } => {
                    self.value(*p).data().iter().for_each(|v| (PROB_EPS..=1.0 - PROB_EPS).contains(v).hash(&mut hasher))
                }
                _ => {}
            }
        }
        hasher.finish()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; gradients are not tracked through it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Reads a parameter. Repeated reads of the same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let ng = self.needs(x);
        self.push(value, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let ng = self.needs(a) || self.needs(b);
        self.push(value, op, ng)
    }

    fn same_len(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.value(a).len(),
            self.value(b).len(),
            "{what}: operand shapes {:?} and {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    // ---- linear algebra ----

    fn mat_dims(t: &Tensor, trans: bool) -> (usize, usize) {
        if trans {
            (t.cols(), t.rows())
        } else {
            (t.rows(), t.cols())
        }
    }

    /// `op(a) @ op(b)` where `op` optionally transposes the matrix view.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (m, k) = Self::mat_dims(self.value(a), ta);
        let (k2, n) = Self::mat_dims(self.value(b), tb);
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", self.shape(a), self.shape(b));
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), ta, self.value(b).data(), tb, &mut out, false);
        self.binary(a, b, Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, ta, tb })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `a @ bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, true)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b, "add");
        let v = self.value(a).zip_map_unchecked(self.value(b), |x, y| x + y);
        self.binary(a, b, v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b, "sub");
        let v = self.value(a).zip_map_unchecked(self.value(b), |x, y| x - y);
        self.binary(a, b, v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b, "mul");
        let v = self.value(a).zip_map_unchecked(self.value(b), |x, y| x * y);
        self.binary(a, b, v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b, "div");
        let v = self.value(a).zip_map_unchecked(self.value(b), |x, y| x / y);
        self.binary(a, b, v, Op::Div(a, b))
    }

    pub fn max(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b, "max");
        let v = self.value(a).zip_map_unchecked(self.value(b), f64::max);
        self.binary(a, b, v, Op::Max(a, b))
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b, "min");
        let v = self.value(a).zip_map_unchecked(self.value(b), f64::min);
        self.binary(a, b, v, Op::Min(a, b))
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        assert_eq!(self.value(row).len(), c, "add_row: bias length");
        let r = self.value(row).data();
        let mut out = xv.data().to_vec();
        for chunk in out.chunks_mut(c) {
            chunk.iter_mut().zip(r).for_each(|(o, b)| *o += b);
        }
        let v = Tensor::from_parts(xv.shape().to_vec(), out);
        self.binary(x, row, v, Op::AddRow(x, row))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).scale(s);
        self.unary(x, v, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).map(|t| t + s);
        self.unary(x, v, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|t| t.max(0.0));
        self.unary(x, v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(super::sigmoid);
        self.unary(x, v, Op::Sigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::ln);
        self.unary(x, v, Op::Log(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::abs);
        self.unary(x, v, Op::Abs(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            super::softmax_in_place(row);
        }
        let v = Tensor::from_parts(xv.shape().to_vec(), out);
        self.unary(x, v, Op::SoftmaxRows(x))
    }

    /// Row-wise layer normalization with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        assert_eq!(self.value(gamma).len(), c, "layer_norm gamma");
        assert_eq!(self.value(beta).len(), c, "layer_norm beta");
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut normed = vec![0.0; xv.len()];
        let mut rstd = Vec::with_capacity(xv.rows());
        let mut out = vec![0.0; xv.len()];
        for (r, row) in xv.data().chunks(c).enumerate() {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..c {
                let n = (row[j] - mean) * rs;
                normed[r * c + j] = n;
                out[r * c + j] = n * g[j] + b[j];
            }
        }
        let v = Tensor::from_parts(xv.shape().to_vec(), out);
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(v, Op::LayerNorm { x, gamma, beta, normed, rstd }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.unary(x, v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    // ---- layout ----

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(pv.row(r));
            }
            off += w;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::from_parts(vec![rows, total], out), Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        assert!(start + len <= c, "slice_cols {start}+{len} beyond {c}");
        let rows = xv.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        self.unary(x, Tensor::from_parts(vec![rows, len], out), Op::SliceCols { x, start })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let c = self.value(parts[0]).cols();
        let mut out = Vec::new();
        for &p in parts {
            assert_eq!(self.value(p).cols(), c, "concat_rows col mismatch");
            out.extend_from_slice(self.value(p).data());
        }
        let rows = out.len() / c;
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::from_parts(vec![rows, c], out), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(xv.row(i));
        }
        let v = Tensor::from_parts(vec![idx.len(), c], out);
        self.unary(x, v, Op::GatherRows { x, idx: idx.to_vec() })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).reshape(shape).expect("reshape preserves length");
        self.unary(x, v, Op::Reshape(x))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).transpose();
        self.unary(x, v, Op::Transpose(x))
    }

    /// Non-overlapping `k × k` patches of a token-major `(h·w) × c` map.
    /// Output row `(pi, pj)` holds columns ordered `(di, dj, c)`.
    pub fn im2col(&mut self, x: Var, h: usize, w: usize, k: usize) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        assert_eq!(xv.rows(), h * w, "im2col token count");
        assert!(h % k == 0 && w % k == 0, "im2col needs {h}x{w} divisible by {k}");
        let (ph, pw) = (h / k, w / k);
        let width = k * k * c;
        let mut out = vec![0.0; ph * pw * width];
        for_each_patch(ph, pw, k, w, c, |dst, src| {
            out[dst..dst + c].copy_from_slice(&xv.data()[src..src + c]);
        });
        self.unary(x, Tensor::from_parts(vec![ph * pw, width], out), Op::Im2Col { x, h, w, k })
    }

    /// Mean over each image row: `(h·w) × d → h × d`.
    pub fn pool_rows(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        assert_eq!(xv.rows(), h * w, "pool_rows token count");
        let mut out = vec![0.0; h * d];
        let inv = 1.0 / w as f64;
        for i in 0..h {
            let dst = &mut out[i * d..(i + 1) * d];
            for j in 0..w {
                dst.iter_mut().zip(xv.row(i * w + j)).for_each(|(o, v)| *o += v * inv);
            }
        }
        self.unary(x, Tensor::from_parts(vec![h, d], out), Op::PoolRows { x, h, w })
    }

    /// Mean over each image column: `(h·w) × d → w × d`.
    pub fn pool_cols(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        assert_eq!(xv.rows(), h * w, "pool_cols token count");
        let mut out = vec![0.0; w * d];
        let inv = 1.0 / h as f64;
        for i in 0..h {
            for j in 0..w {
                let dst = &mut out[j * d..(j + 1) * d];
                dst.iter_mut().zip(xv.row(i * w + j)).for_each(|(o, v)| *o += v * inv);
            }
        }
        self.unary(x, Tensor::from_parts(vec![w, d], out), Op::PoolCols { x, h, w })
    }

    /// Dot products between each pixel query and the pixels on one of its axes.
    pub fn axial_scores(&mut self, q: Var, k: Var, h: usize, w: usize, axis: Axis) -> Var {
        let (qv, kv) = (self.value(q), self.value(k));
        assert_eq!(qv.rows(), h * w, "axial_scores query count");
        assert_eq!(kv.rows(), h * w, "axial_scores key count");
        assert_eq!(qv.cols(), kv.cols(), "axial_scores width");
        let n = axis_len(axis, h, w);
        let mut out = vec![0.0; h * w * n];
        for u in 0..h {
            for v in 0..w {
                let p = u * w + v;
                let qr = qv.row(p);
                for t in 0..n {
                    out[p * n + t] = dotp(qr, kv.row(axis_pixel(axis, u, v, t, w)));
                }
            }
        }
        let val = Tensor::from_parts(vec![h * w, n], out);
        self.binary(q, k, val, Op::AxialScores { q, k, h, w, axis })
    }

    /// Weighted sums of values along one axis, weights `(h·w) × n_axis`.
    pub fn axial_mix(&mut self, a: Var, v: Var, h: usize, w: usize, axis: Axis) -> Var {
        let (av, vv) = (self.value(a), self.value(v));
        let n = axis_len(axis, h, w);
        assert_eq!(av.rows(), h * w, "axial_mix weight rows");
        assert_eq!(av.cols(), n, "axial_mix weight cols");
        assert_eq!(vv.rows(), h * w, "axial_mix value rows");
        let d = vv.cols();
        let mut out = vec![0.0; h * w * d];
        for u in 0..h {
            for c in 0..w {
                let p = u * w + c;
                let dst = &mut out[p * d..(p + 1) * d];
                for t in 0..n {
                    let wt = av.data()[p * n + t];
                    let src = vv.row(axis_pixel(axis, u, c, t, w));
                    dst.iter_mut().zip(src).for_each(|(o, s)| *o += wt * s);
                }
            }
        }
        let val = Tensor::from_parts(vec![h * w, d], out);
        self.binary(a, v, val, Op::AxialMix { a, v, h, w, axis })
    }

    /// Elementwise focal loss `-α (1-p_t)^γ ln p_t` of probabilities against
    /// 0/1 targets. Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn focal(&mut self, p: Var, targets: &[f64], alpha: f64, gamma: f64) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.len(), targets.len(), "focal targets length");
        let data = pv
            .data()
            .iter()
            .zip(targets)
            .map(|(&pp, &t)| crate::loss::focal::focal_value(pp, t, alpha, gamma))
            .collect();
        let v = Tensor::from_parts(pv.shape().to_vec(), data);
        self.unary(p, v, Op::Focal { p, targets: targets.to_vec(), alpha, gamma })
    }

    /// Sinusoidal embedding of each coordinate of each row: `n × m → n × (m·dim)`.
    pub fn sin_embed(&mut self, coords: Var, dim: usize, temperature: f64) -> Var {
        let cv = self.value(coords);
        let m = cv.cols();
        let n = cv.rows();
        let mut out = Vec::with_capacity(n * m * dim);
        for &c in cv.data() {
            out.extend(super::pe::sinusoidal_raw(c, dim, temperature));
        }
        let v = Tensor::from_parts(vec![n, m * dim], out);
        self.unary(coords, v, Op::SinEmbed { coords, dim, temperature })
    }

    // ---- backward ----

    /// Gradients of the scalar `loss` with respect to every node on the tape.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let need = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k) = Self::mat_dims(av, ta);
                let n = Self::mat_dims(bv, tb).1;
                if need(a) {
                    let buf = slot_mut(&mut grads[a.0], m * k);
                    if ta {
                        gemm(k, n, m, bv.data(), tb, g, true, buf, true);
                    } else {
                        gemm(m, n, k, g, false, bv.data(), !tb, buf, true);
                    }
                }
                if need(b) {
                    let buf = slot_mut(&mut grads[b.0], k * n);
                    if tb {
                        gemm(n, m, k, g, true, av.data(), ta, buf, true);
                    } else {
                        gemm(k, m, n, av.data(), !ta, g, false, buf, true);
                    }
                }
            }
            &Op::Add(a, b) => {
                if need(a) {
                    acc_into(&mut grads[a.0], g);
                }
                if need(b) {
                    acc_into(&mut grads[b.0], g);
                }
            }
            &Op::Sub(a, b) => {
                if need(a) {
                    acc_into(&mut grads[a.0], g);
                }
                if need(b) {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    acc_into(&mut grads[b.0], &neg);
                }
            }
            &Op::Mul(a, b) => {
                if need(a) {
                    let d: Vec<f64> = g.iter().zip(val(b)).map(|(g, y)| g * y).collect();
                    acc_into(&mut grads[a.0], &d);
                }
                if need(b) {
                    let d: Vec<f64> = g.iter().zip(val(a)).map(|(g, x)| g * x).collect();
                    acc_into(&mut grads[b.0], &d);
                }
            }
            &Op::Div(a, b) => {
                if need(a) {
                    let d: Vec<f64> = g.iter().zip(val(b)).map(|(g, y)| g / y).collect();
                    acc_into(&mut grads[a.0], &d);
                }
                if need(b) {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(val(a).iter().zip(val(b)))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    acc_into(&mut grads[b.0], &d);
                }
            }
            &Op::Max(a, b) | &Op::Min(a, b) => {
                let is_max = matches!(node.op, Op::Max(..));
                let pick_a: Vec<bool> = val(a)
                    .iter()
                    .zip(val(b))
                    .map(|(x, y)| if is_max { x >= y } else { x <= y })
                    .collect();
                if need(a) {
                    let d: Vec<f64> = g.iter().zip(&pick_a).map(|(g, &p)| if p { *g } else { 0.0 }).collect();
                    acc_into(&mut grads[a.0], &d);
                }
                if need(b) {
                    let d: Vec<f64> = g.iter().zip(&pick_a).map(|(g, &p)| if p { 0.0 } else { *g }).collect();
                    acc_into(&mut grads[b.0], &d);
                }
            }
            &Op::AddRow(x, row) => {
                if need(x) {
                    acc_into(&mut grads[x.0], g);
                }
                if need(row) {
                    let c = self.value(row).len();
                    let buf = slot_mut(&mut grads[row.0], c);
                    for chunk in g.chunks(c) {
                        buf.iter_mut().zip(chunk).for_each(|(b, v)| *b += v);
                    }
                }
            }
            &Op::Scale(x, s) => {
                let d: Vec<f64> = g.iter().map(|v| v * s).collect();
                acc_into(&mut grads[x.0], &d);
            }
            &Op::AddScalar(x) => acc_into(&mut grads[x.0], g),
            &Op::Relu(x) => {
                let d: Vec<f64> = g.iter().zip(val(x)).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                acc_into(&mut grads[x.0], &d);
            }
            &Op::Sigmoid(x) => {
                let y = node.value.data();
                let d: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                acc_into(&mut grads[x.0], &d);
            }
            &Op::Log(x) => {
                let d: Vec<f64> = g.iter().zip(val(x)).map(|(g, v)| g / v).collect();
                acc_into(&mut grads[x.0], &d);
            }
            &Op::Abs(x) => {
                let d: Vec<f64> = g.iter().zip(val(x)).map(|(g, &v)| if v >= 0.0 { *g } else { -g }).collect();
                acc_into(&mut grads[x.0], &d);
            }
            &Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                acc_into(&mut grads[x.0], &d);
            }
            Op::LayerNorm { x, gamma, beta, normed, rstd } => {
                let c = node.value.cols();
                let gam = val(*gamma);
                if need(*gamma) {
                    let buf = slot_mut(&mut grads[gamma.0], c);
                    for (gr, nr) in g.chunks(c).zip(normed.chunks(c)) {
                        for j in 0..c {
                            buf[j] += gr[j] * nr[j];
                        }
                    }
                }
                if need(*beta) {
                    let buf = slot_mut(&mut grads[beta.0], c);
                    for gr in g.chunks(c) {
                        buf.iter_mut().zip(gr).for_each(|(b, v)| *b += v);
                    }
                }
                if need(*x) {
                    let mut d = vec![0.0; g.len()];
                    for (r, ((dr, gr), nr)) in d.chunks_mut(c).zip(g.chunks(c)).zip(normed.chunks(c)).enumerate() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dn = gr[j] * gam[j];
                            m1 += dn;
                            m2 += dn * nr[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            dr[j] = rstd[r] * (gr[j] * gam[j] - m1 - nr[j] * m2);
                        }
                    }
                    acc_into(&mut grads[x.0], &d);
                }
            }
            &Op::Sum(x) => {
                let n = self.value(x).len();
                let buf = slot_mut(&mut grads[x.0], n);
                buf.iter_mut().for_each(|b| *b += g[0]);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if need(p) {
                        let buf = slot_mut(&mut grads[p.0], rows * w);
                        for r in 0..rows {
                            let src = &g[r * total + off..r * total + off + w];
                            buf[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(b, v)| *b += v);
                        }
                    }
                    off += w;
                }
            }
            &Op::SliceCols { x, start } => {
                let len = node.value.cols();
                let c = self.value(x).cols();
                let rows = node.value.rows();
                let buf = slot_mut(&mut grads[x.0], rows * c);
                for r in 0..rows {
                    let dst = &mut buf[r * c + start..r * c + start + len];
                    dst.iter_mut().zip(&g[r * len..(r + 1) * len]).for_each(|(b, v)| *b += v);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if need(p) {
                        acc_into(&mut grads[p.0], &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let buf = slot_mut(&mut grads[x.0], xv.len());
                for (r, &i) in idx.iter().enumerate() {
                    let dst = &mut buf[i * c..(i + 1) * c];
                    dst.iter_mut().zip(&g[r * c..(r + 1) * c]).for_each(|(b, v)| *b += v);
                }
            }
            &Op::Reshape(x) => acc_into(&mut grads[x.0], g),
            &Op::Transpose(x) => {
                let (r, c) = (node.value.rows(), node.value.cols());
                let mut d = vec![0.0; g.len()];
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] = g[i * c + j];
                    }
                }
                acc_into(&mut grads[x.0], &d);
            }
            &Op::Im2Col { x, h, w, k } => {
                let c = self.value(x).cols();
                let buf = slot_mut(&mut grads[x.0], h * w * c);
                for_each_patch(h / k, w / k, k, w, c, |dst, src| {
                    buf[src..src + c].iter_mut().zip(&g[dst..dst + c]).for_each(|(b, v)| *b += v);
                });
            }
            &Op::PoolRows { x, h, w } => {
                let d = node.value.cols();
                let buf = slot_mut(&mut grads[x.0], h * w * d);
                let inv = 1.0 / w as f64;
                for i in 0..h {
                    for j in 0..w {
                        let p = i * w + j;
                        buf[p * d..(p + 1) * d]
                            .iter_mut()
                            .zip(&g[i * d..(i + 1) * d])
                            .for_each(|(b, v)| *b += v * inv);
                    }
                }
            }
            &Op::PoolCols { x, h, w } => {
                let d = node.value.cols();
                let buf = slot_mut(&mut grads[x.0], h * w * d);
                let inv = 1.0 / h as f64;
                for i in 0..h {
                    for j in 0..w {
                        let p = i * w + j;
                        buf[p * d..(p + 1) * d]
                            .iter_mut()
                            .zip(&g[j * d..(j + 1) * d])
                            .for_each(|(b, v)| *b += v * inv);
                    }
                }
            }
            &Op::AxialScores { q, k, h, w, axis } => {
                let n = axis_len(axis, h, w);
                let (qv, kv) = (self.value(q), self.value(k));
                let d = qv.cols();
                if need(q) {
                    let buf = slot_mut(&mut grads[q.0], h * w * d);
                    for u in 0..h {
                        for v in 0..w {
                            let p = u * w + v;
                            for t in 0..n {
                                let gs = g[p * n + t];
                                let kr = kv.row(axis_pixel(axis, u, v, t, w));
                                buf[p * d..(p + 1) * d].iter_mut().zip(kr).for_each(|(b, kk)| *b += gs * kk);
                            }
                        }
                    }
                }
                if need(k) {
                    let buf = slot_mut(&mut grads[k.0], h * w * d);
                    for u in 0..h {
                        for v in 0..w {
                            let p = u * w + v;
                            let qr = qv.row(p);
                            for t in 0..n {
                                let gs = g[p * n + t];
                                let kp = axis_pixel(axis, u, v, t, w);
                                buf[kp * d..(kp + 1) * d].iter_mut().zip(qr).for_each(|(b, qq)| *b += gs * qq);
                            }
                        }
                    }
                }
            }
            &Op::AxialMix { a, v, h, w, axis } => {
                let n = axis_len(axis, h, w);
                let (av, vv) = (self.value(a), self.value(v));
                let d = vv.cols();
                if need(a) {
                    let buf = slot_mut(&mut grads[a.0], h * w * n);
                    for u in 0..h {
                        for c in 0..w {
                            let p = u * w + c;
                            let gr = &g[p * d..(p + 1) * d];
                            for t in 0..n {
                                buf[p * n + t] += dotp(gr, vv.row(axis_pixel(axis, u, c, t, w)));
                            }
                        }
                    }
                }
                if need(v) {
                    let buf = slot_mut(&mut grads[v.0], h * w * d);
                    for u in 0..h {
                        for c in 0..w {
                            let p = u * w + c;
                            let gr = &g[p * d..(p + 1) * d];
                            for t in 0..n {
                                let wt = av.data()[p * n + t];
                                let kp = axis_pixel(axis, u, c, t, w);
                                buf[kp * d..(kp + 1) * d].iter_mut().zip(gr).for_each(|(b, gg)| *b += wt * gg);
                            }
                        }
                    }
                }
            }
            Op::Focal { p, targets, alpha, gamma } => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(val(*p).iter().zip(targets))
                    .map(|(g, (&pp, &t))| g * crate::loss::focal::focal_grad(pp, t, *alpha, *gamma))
                    .collect();
                acc_into(&mut grads[p.0], &d);
            }
            &Op::SinEmbed { coords, dim, temperature } => {
                let cv = self.value(coords);
                let mut d = vec![0.0; cv.len()];
                for (ci, &c) in cv.data().iter().enumerate() {
                    let gs = &g[ci * dim..(ci + 1) * dim];
                    let mut acc = 0.0;
                    for i in 0..dim / 2 {
                        let omega = 2.0 * PI / temperature.powf(2.0 * i as f64 / dim as f64);
                        let arg = c * omega;
                        acc += gs[2 * i] * arg.cos() * omega - gs[2 * i + 1] * arg.sin() * omega;
                    }
                    d[ci] = acc;
                }
                acc_into(&mut grads[coords.0], &d);
            }
        }
    }
}

fn dotp(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axis_len(axis: Axis, h: usize, w: usize) -> usize {
    match axis {
        Axis::Column => h,
        Axis::Row => w,
    }
}

/// Flat index of the `t`-th pixel on the given axis through `(u, v)`.
#[inline]
fn axis_pixel(axis: Axis, u: usize, v: usize, t: usize, w: usize) -> usize {
    match axis {
        Axis::Column => t * w + v,
        Axis::Row => u * w + t,
    }
}

/// Calls `f(dst_offset, src_offset)` for every (patch, in-patch pixel) pair,
/// offsets counted in scalars with channel width `c`.
fn for_each_patch(ph: usize, pw: usize, k: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize)) {
    let width = k * k * c;
    for pi in 0..ph {
        for pj in 0..pw {
            let row = pi * pw + pj;
            for di in 0..k {
                for dj in 0..k {
                    let src_pix = (pi * k + di) * w + (pj * k + dj);
                    f(row * width + (di * k + dj) * c, src_pix * c);
                }
            }
        }
    }
}

impl Tensor {
    pub(crate) fn zip_map_unchecked(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
        Tensor::from_parts(self.shape().to_vec(), data)
    }
}
