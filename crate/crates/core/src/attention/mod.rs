//! Encoder attention: global, horizontal-vertical (pooled row/column keys)
//! and criss-cross (own row and column pixels), plus their cost model.

pub mod bench;
pub mod cost;
pub mod direct;
pub mod export;
mod tape;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{Init, Linear, ParamStore, Tape, Tensor};

pub use cost::{flops_analytic, flops_global, flops_hv, kernel_multiplies, memory_model, AttentionCost};
pub use tape::{attend, Attended, PositionalInputs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Global,
    Hv,
    Cc,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 3] = [AttentionKind::Global, AttentionKind::Hv, AttentionKind::Cc];

    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::Global => "global",
            AttentionKind::Hv => "hv",
            AttentionKind::Cc => "cc",
        }
    }
}

impl std::str::FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(AttentionKind::Global),
            "hv" => Ok(AttentionKind::Hv),
            "cc" => Ok(AttentionKind::Cc),
            _ => Err(Error::Config(format!("unknown attention kind {s:?}"))),
        }
    }
}

/// Channel-major `d × H × W` map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub data: Tensor,
}

impl FeatureMap {
    pub fn new(data: Tensor) -> Result<Self> {
        match *data.shape() {
            [d, h, w] => Ok(Self { d, h, w, data }),
            _ => Err(dim_err!("feature map needs rank 3, got shape {:?}", data.shape())),
        }
    }

    /// From a token-major `(H·W) × d` matrix.
    pub fn from_tokens(tokens: &Tensor, h: usize, w: usize) -> Result<Self> {
        if tokens.rank() != 2 || tokens.rows() != h * w {
            return Err(dim_err!("expected {} tokens, got shape {:?}", h * w, tokens.shape()));
        }
        let d = tokens.cols();
        let t = tokens.transpose();
        Ok(Self { d, h, w, data: t.reshape(&[d, h, w])? })
    }

    /// Token-major `(H·W) × d` view; token `u·W + v` is pixel `(u, v)`.
    pub fn to_tokens(&self) -> Tensor {
        self.data.reshape(&[self.d, self.h * self.w]).expect("consistent shape").transpose()
    }

    pub fn at(&self, c: usize, u: usize, v: usize) -> f64 {
        self.data.data()[(c * self.h + u) * self.w + v]
    }
}

/// Which branches of the axial kernels are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchFlags {
    pub row: bool,
    pub col: bool,
}

impl Default for BranchFlags {
    fn default() -> Self {
        Self { row: true, col: true }
    }
}

/// One attention branch.
///
/// For HV, `Row` attends over the `H` row-mean keys with values from the
/// query's column, and `Column` over the `W` column-mean keys with values
/// from the query's row. For CC, `Row` attends over the query's own row
/// pixels and `Column` over its own column pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Global,
    Row,
    Column,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Global => "global",
            Branch::Row => "row",
            Branch::Column => "column",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Projections {
    pub branch: Branch,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionSpec {
    pub kind: AttentionKind,
    pub d: usize,
    pub heads: usize,
    pub flags: BranchFlags,
    pub with_output: bool,
}

impl AttentionSpec {
    pub fn new(kind: AttentionKind, d: usize, heads: usize) -> Self {
        Self { kind, d, heads, flags: BranchFlags::default(), with_output: true }
    }
}

/// Projection weights for one attention layer.
///
/// HV keeps a separate q/k/v triple per branch and concatenates the branch
/// outputs before `out`; CC shares one triple across both branches and adds
/// them. Without `out` the kernel returns the raw (concatenated) result.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionParams {
    pub kind: AttentionKind,
    pub d: usize,
    pub heads: usize,
    pub flags: BranchFlags,
    pub projections: Vec<Projections>,
    pub out: Option<Linear>,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, spec: AttentionSpec) -> Result<Self> {
        let AttentionSpec { kind, d, heads, flags, with_output } = spec;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("model dim {d} is not divisible by {heads} heads")));
        }
        if kind != AttentionKind::Global && !flags.row && !flags.col {
            return Err(Error::Config("at least one attention branch must be enabled".into()));
        }
        let triple = |store: &mut ParamStore, init: &mut Init, branch: Branch, prefix: &str| Projections {
            branch,
            q: Linear::new(store, init, &format!("{prefix}.q"), d, d),
            k: Linear::new(store, init, &format!("{prefix}.k"), d, d),
            v: Linear::new(store, init, &format!("{prefix}.v"), d, d),
        };
        let (projections, concat_width) = match kind {
            AttentionKind::Global => (vec![triple(store, init, Branch::Global, name)], d),
            AttentionKind::Hv => {
                let mut p = Vec::new();
                if flags.row {
                    p.push(triple(store, init, Branch::Row, &format!("{name}.row")));
                }
                if flags.col {
                    p.push(triple(store, init, Branch::Column, &format!("{name}.col")));
                }
                let width = d * p.len();
                (p, width)
            }
            AttentionKind::Cc => (vec![triple(store, init, Branch::Global, name)], d),
        };
        let out = with_output.then(|| Linear::new(store, init, &format!("{name}.out"), concat_width, d));
        Ok(Self { kind, d, heads, flags, projections, out })
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Width of the result before the output projection.
    pub fn concat_width(&self) -> usize {
        match self.kind {
            AttentionKind::Hv => self.d * self.projections.len(),
            _ => self.d,
        }
    }

    pub fn output_width(&self) -> usize {
        self.out.map_or(self.concat_width(), |l| l.out_dim)
    }

    /// Branches that produce weights, in output order.
    pub fn branches(&self) -> Vec<Branch> {
        match self.kind {
            AttentionKind::Global => vec![Branch::Global],
            AttentionKind::Hv => self.projections.iter().map(|p| p.branch).collect(),
            AttentionKind::Cc => {
                let mut b = Vec::new();
                if self.flags.col {
                    b.push(Branch::Column);
                }
                if self.flags.row {
                    b.push(Branch::Row);
                }
                b
            }
        }
    }

    /// Identity q/k/v projections; square output projections too.
    pub fn set_identity(&self, store: &mut ParamStore) {
        for p in &self.projections {
            p.q.set_identity(store);
            p.k.set_identity(store);
            p.v.set_identity(store);
        }
        if let Some(out) = self.out {
            if out.in_dim == out.out_dim {
                out.set_identity(store);
            }
        }
    }
}

/// Keys seen by one query of `kind` with both branches enabled.
pub fn key_count(kind: AttentionKind, h: usize, w: usize) -> usize {
    match kind {
        AttentionKind::Global => h * w,
        AttentionKind::Hv => h + w,
        AttentionKind::Cc => h + w - 1,
    }
}

/// Softmax weights of one head of one branch: `(H·W) × keys`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBlock {
    pub branch: Branch,
    pub head: usize,
    pub keys: usize,
    pub data: Vec<f64>,
}

impl WeightBlock {
    pub fn row(&self, query: usize) -> &[f64] {
        &self.data[query * self.keys..(query + 1) * self.keys]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub h: usize,
    pub w: usize,
    pub blocks: Vec<WeightBlock>,
}

impl AttentionWeights {
    /// Keys per query summed over branches. CC counts its own pixel in both
    /// branches, so this is `H + W` there even though `H + W − 1` are distinct.
    pub fn keys_per_query(&self) -> usize {
        let head0 = self.blocks.iter().filter(|b| b.head == 0);
        head0.map(|b| b.keys).sum()
    }

    /// Largest deviation of any weight vector's sum from 1.
    pub fn max_sum_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for b in &self.blocks {
            for q in 0..self.h * self.w {
                worst = worst.max((b.row(q).iter().sum::<f64>() - 1.0).abs());
            }
        }
        worst
    }

    pub fn min_weight(&self) -> f64 {
        self.blocks.iter().flat_map(|b| b.data.iter().copied()).fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub output: FeatureMap,
    /// Per-branch results before combination and output projection.
    pub branches: Vec<FeatureMap>,
    pub weights: AttentionWeights,
}

fn check_kind(params: &AttentionParams, kind: AttentionKind) -> Result<()> {
    if params.kind != kind {
        return Err(Error::Config(format!("expected {} parameters, got {}", kind.name(), params.kind.name())));
    }
    Ok(())
}

fn run(store: &ParamStore, params: &AttentionParams, x: &FeatureMap, pe: &PositionalInputs) -> Result<AttentionOutput> {
    if x.d != params.d {
        return Err(dim_err!("feature map has {} channels, parameters expect {}", x.d, params.d));
    }
    pe.validate(x.h, x.w, x.d)?;
    let mut t = Tape::new();
    let xv = t.constant(x.to_tokens());
    let res = attend(&mut t, store, params, xv, x.h, x.w, pe)?;
    let output = FeatureMap::from_tokens(t.value(res.out), x.h, x.w)?;
    let branches = res
        .branches
        .iter()
        .map(|&b| FeatureMap::from_tokens(t.value(b), x.h, x.w))
        .collect::<Result<_>>()?;
    let blocks = res
        .weights
        .iter()
        .map(|&(branch, head, v)| {
            let val = t.value(v);
            WeightBlock { branch, head, keys: val.cols(), data: val.data().to_vec() }
        })
        .collect();
    Ok(AttentionOutput { output, branches, weights: AttentionWeights { h: x.h, w: x.w, blocks } })
}

/// Softmax attention of every pixel over all `H·W` pixels. `pe` is an
/// optional `(H·W) × d` embedding added to queries and keys.
pub fn global_attention(store: &ParamStore, params: &AttentionParams, x: &FeatureMap, pe: Option<&Tensor>) -> Result<AttentionOutput> {
    check_kind(params, AttentionKind::Global)?;
    run(store, params, x, &PositionalInputs { grid: pe.cloned(), ..Default::default() })
}

/// Horizontal-vertical attention over `H` row-mean and `W` column-mean keys.
/// `row_pe` is `H × d`, `col_pe` is `W × d`.
pub fn hv_attention(
    store: &ParamStore,
    params: &AttentionParams,
    x: &FeatureMap,
    row_pe: Option<&Tensor>,
    col_pe: Option<&Tensor>,
) -> Result<AttentionOutput> {
    check_kind(params, AttentionKind::Hv)?;
    run(store, params, x, &PositionalInputs { grid: None, row: row_pe.cloned(), col: col_pe.cloned() })
}

/// Criss-cross attention over each pixel's own row and column, branches added.
pub fn cc_attention(store: &ParamStore, params: &AttentionParams, x: &FeatureMap, pe: Option<&Tensor>) -> Result<AttentionOutput> {
    check_kind(params, AttentionKind::Cc)?;
    run(store, params, x, &PositionalInputs { grid: pe.cloned(), ..Default::default() })
}
