//! Convolutional stem, transformer encoder, and the box-query decoder with
//! per-layer class and box heads.

pub mod checkpoint;
pub mod config;
pub mod objective;

use crate::attention::{attend, AttentionKind, AttentionParams, AttentionSpec, FeatureMap, PositionalInputs};
use crate::error::{dim_err, Result};
use crate::loss::Box4;
use crate::numerics::pe::{axis_pe, grid_pe};
use crate::numerics::rng::XorShift64Star;
use crate::numerics::{sigmoid, Ffn, Init, LayerNorm, Linear, ParamStore, Tape, Tensor, Var};
use crate::query::{initial_queries, InitialQueries, QueryParams, QuerySpec};

pub use config::{ModelConfig, STEM_STRIDE};
pub use objective::{objective, Decisions, LossReport, Objective};

/// Name prefix of every stem parameter.
pub const STEM_PREFIX: &str = "stem.";

/// Initial probability of every classification output.
pub const PRIOR_PROB: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct Stem {
    /// 4×4 stride-4 patches, `48 → stem_channels`.
    pub conv1: Linear,
    /// 2×2 stride-2 patches, `4·stem_channels → d`.
    pub conv2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attn: AttentionParams,
    pub norm1: LayerNorm,
    pub ffn: Ffn,
    pub norm2: LayerNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

/// Separate content and spatial projections; queries and keys are the
/// per-head concatenation of both parts.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttention {
    pub content_q: Linear,
    pub content_k: Linear,
    pub spatial_k: Linear,
    pub v: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub self_attn: SelfAttention,
    pub norm1: LayerNorm,
    pub cross: CrossAttention,
    pub norm2: LayerNorm,
    pub ffn: Ffn,
    pub norm3: LayerNorm,
    /// Transformation predicted from the layer's input embedding; the first
    /// layer takes it from the query module instead.
    pub lambda: Option<Ffn>,
}

/// Parameter layout of the whole detector. Values live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: ModelConfig,
    pub stem: Stem,
    pub encoder: Vec<EncoderLayer>,
    pub query: QueryParams,
    pub decoder: Vec<DecoderLayer>,
    /// `d → C + 1`; the last column is no-object.
    pub class_head: Linear,
    pub box_head: Ffn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub net: Network,
    pub store: ParamStore,
}

fn prior_logit() -> f64 {
    -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln()
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let net = Network::build(&mut store, &mut init, config)?;
        Ok(Self { net, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn forward(&self, t: &mut Tape, image: &Tensor, opts: &ForwardOptions<'_>) -> Result<ForwardPass> {
        self.net.forward(t, &self.store, image, opts)
    }

    pub fn stem_forward(&self, image: &Tensor) -> Result<FeatureMap> {
        let mut t = Tape::new();
        let (x, h, w) = self.net.stem_forward(&mut t, &self.store, image)?;
        FeatureMap::from_tokens(t.value(x), h, w)
    }

    pub fn encoder_forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        let mut t = Tape::new();
        let xv = t.constant(x.to_tokens());
        let y = self.net.encoder_forward(&mut t, &self.store, xv, x.h, x.w, &mut Dropout::off())?;
        FeatureMap::from_tokens(t.value(y), x.h, x.w)
    }

    /// Inference: one detection set per decoder layer.
    pub fn detect(&self, image: &Tensor) -> Result<Vec<DetectionSet>> {
        let mut t = Tape::new();
        let pass = self.forward(&mut t, image, &ForwardOptions::default())?;
        Ok(pass.layers.iter().map(|l| DetectionSet::from_values(t.value(l.logits), t.value(l.boxes))).collect())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    /// Seed of the dropout masks; `None` disables dropout.
    pub dropout_seed: Option<u64>,
    /// Fixed candidate indices in place of top-K selection.
    pub frozen_selection: Option<&'a [usize]>,
}

/// Constant random masks scaled by `1 / (1 - rate)`.
pub struct Dropout {
    rate: f64,
    rng: Option<XorShift64Star>,
}

impl Dropout {
    pub fn off() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, seed: Option<u64>) -> Self {
        Self { rate, rng: seed.filter(|_| rate > 0.0).map(XorShift64Star::new) }
    }

    pub fn apply(&mut self, t: &mut Tape, x: Var) -> Var {
        let Some(rng) = self.rng.as_mut() else { return x };
        let keep = 1.0 / (1.0 - self.rate);
        let rate = self.rate;
        let shape = t.shape(x).to_vec();
        let n = t.value(x).len();
        let mask: Vec<f64> = (0..n).map(|_| if rng.next_f64() < rate { 0.0 } else { keep }).collect();
        let m = t.constant(Tensor::from_parts(shape, mask));
        t.mul(x, m)
    }
}

#[derive(Debug, Clone)]
pub struct LayerOutput {
    /// `K × (C + 1)` class logits.
    pub logits: Var,
    /// `K × 4` boxes.
    pub boxes: Var,
    /// Per head, `K × (H·W)` cross-attention weights.
    pub cross_weights: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub h: usize,
    pub w: usize,
    /// `(H·W) × d` encoder output.
    pub memory: Var,
    pub queries: InitialQueries,
    pub layers: Vec<LayerOutput>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: Box4,
}

/// Per-query class logits and boxes of one decoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    pub logits: Tensor,
    pub boxes: Vec<Box4>,
}

impl DetectionSet {
    pub fn from_values(logits: &Tensor, boxes: &Tensor) -> Self {
        let boxes = boxes.data().chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
        Self { logits: logits.clone(), boxes }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Best object class per query (the no-object column is ignored) with its
    /// sigmoid probability as the score.
    pub fn detections(&self) -> Vec<Detection> {
        let c = self.logits.cols();
        (0..self.len())
            .map(|j| {
                let row = &self.logits.row(j)[..c - 1];
                let (class_id, &best) = row.iter().enumerate().fold((0, &row[0]), |a, b| if b.1 > a.1 { b } else { a });
                Detection { class_id, score: sigmoid(best), bbox: self.boxes[j] }
            })
            .collect()
    }
}

/// `c_q·c_k + (λ_q ⊙ p_s)·p_k`.
pub fn decoder_cross_attention_weight(c_q: &[f64], c_k: &[f64], lambda_q: &[f64], p_s: &[f64], p_k: &[f64]) -> Result<f64> {
    let n = c_q.len();
    if c_k.len() != n || lambda_q.len() != p_s.len() || p_s.len() != p_k.len() {
        return Err(dim_err!(
            "cross-attention weight operands have lengths {}, {}, {}, {}, {}",
            c_q.len(),
            c_k.len(),
            lambda_q.len(),
            p_s.len(),
            p_k.len()
        ));
    }
    let content: f64 = c_q.iter().zip(c_k).map(|(a, b)| a * b).sum();
    let spatial: f64 = lambda_q.iter().zip(p_s).zip(p_k).map(|((l, s), k)| l * s * k).sum();
    Ok(content + spatial)
}

/// Per-head scaled dot-product attention where each head's query and key
/// are the concatenation of the matching column blocks of every part.
fn multi_head(t: &mut Tape, q_parts: &[Var], k_parts: &[Var], v: Var, heads: usize) -> (Var, Vec<Var>) {
    let d = t.value(v).cols();
    let dh = d / heads;
    let scale = 1.0 / ((dh * q_parts.len()) as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    let block = |t: &mut Tape, parts: &[Var], h: usize| {
        let s: Vec<Var> = parts.iter().map(|&p| t.slice_cols(p, h * dh, dh)).collect();
        if s.len() == 1 {
            s[0]
        } else {
            t.concat_cols(&s)
        }
    };
    for h in 0..heads {
        let qh = block(t, q_parts, h);
        let kh = block(t, k_parts, h);
        let s = t.matmul_nt(qh, kh);
        let s = t.scale(s, scale);
        let a = t.softmax_rows(s);
        let vh = t.slice_cols(v, h * dh, dh);
        outs.push(t.matmul(a, vh));
        weights.push(a);
    }
    let out = if heads == 1 { outs[0] } else { t.concat_cols(&outs) };
    (out, weights)
}

impl Network {
    pub fn build(store: &mut ParamStore, init: &mut Init, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let stem = Stem {
            conv1: Linear::new(store, init, &format!("{STEM_PREFIX}conv1"), 3 * 16, config.stem_channels),
            conv2: Linear::new(store, init, &format!("{STEM_PREFIX}conv2"), 4 * config.stem_channels, d),
        };
        let mut encoder = Vec::with_capacity(config.n_enc);
        for i in 0..config.n_enc {
            let p = format!("encoder.{i}");
            encoder.push(EncoderLayer {
                attn: AttentionParams::new(store, init, &format!("{p}.attn"), AttentionSpec::new(config.attention, d, config.heads))?,
                norm1: LayerNorm::new(store, &format!("{p}.norm1"), d),
                ffn: Ffn::new(store, init, &format!("{p}.ffn"), &[d, config.ffn_hidden, d]),
                norm2: LayerNorm::new(store, &format!("{p}.norm2"), d),
            });
        }
        let query = QueryParams::new(
            store,
            init,
            "query",
            QuerySpec {
                mode: config.query_mode,
                content_init: config.content_init,
                k: config.num_queries,
                d,
                temperature: config.temperature,
                anchors: config.anchors.clone(),
            },
        )?;
        for head in &query.objectness {
            let last = head.layers.last().expect("objectness layers");
            store.get_mut(last.bias).data_mut()[1] = prior_logit();
        }
        let mut decoder = Vec::with_capacity(config.n_dec);
        for i in 0..config.n_dec {
            let p = format!("decoder.{i}");
            let lin = |store: &mut ParamStore, init: &mut Init, n: &str| Linear::new(store, init, &format!("{p}.{n}"), d, d);
            decoder.push(DecoderLayer {
                self_attn: SelfAttention {
                    q: lin(store, init, "self.q"),
                    k: lin(store, init, "self.k"),
                    v: lin(store, init, "self.v"),
                    out: lin(store, init, "self.out"),
                },
                norm1: LayerNorm::new(store, &format!("{p}.norm1"), d),
                cross: CrossAttention {
                    content_q: lin(store, init, "cross.content_q"),
                    content_k: lin(store, init, "cross.content_k"),
                    spatial_k: lin(store, init, "cross.spatial_k"),
                    v: lin(store, init, "cross.v"),
                    out: lin(store, init, "cross.out"),
                },
                norm2: LayerNorm::new(store, &format!("{p}.norm2"), d),
                ffn: Ffn::new(store, init, &format!("{p}.ffn"), &[d, config.ffn_hidden, d]),
                norm3: LayerNorm::new(store, &format!("{p}.norm3"), d),
                lambda: (i > 0).then(|| Ffn::new(store, init, &format!("{p}.lambda"), &[d, d, d])),
            });
        }
        let class_head = Linear::new(store, init, "head.class", d, config.num_classes + 1);
        *store.get_mut(class_head.bias) = Tensor::full(&[config.num_classes + 1], prior_logit());
        let box_head = Ffn::new(store, init, "head.box", &[d, d, 4]);
        Ok(Self { config, stem, encoder, query, decoder, class_head, box_head })
    }

    /// `3 × H0 × W0` image to a token-major map at stride 8.
    pub fn stem_forward(&self, t: &mut Tape, store: &ParamStore, image: &Tensor) -> Result<(Var, usize, usize)> {
        let (h0, w0) = match *image.shape() {
            [3, h, w] => (h, w),
            _ => return Err(dim_err!("image must have shape [3, H, W], got {:?}", image.shape())),
        };
        if h0 % STEM_STRIDE != 0 || w0 % STEM_STRIDE != 0 {
            return Err(dim_err!("image size {h0}x{w0} is not divisible by the stem stride {STEM_STRIDE}"));
        }
        let tokens = image.reshape(&[3, h0 * w0])?.transpose();
        let x = t.constant(tokens);
        let p1 = t.im2col(x, h0, w0, 4);
        let c1 = self.stem.conv1.apply(t, store, p1);
        let a1 = t.relu(c1);
        let p2 = t.im2col(a1, h0 / 4, w0 / 4, 2);
        let out = self.stem.conv2.apply(t, store, p2);
        Ok((out, h0 / STEM_STRIDE, w0 / STEM_STRIDE))
    }

    pub fn positional_inputs(&self, h: usize, w: usize) -> Result<PositionalInputs> {
        let (d, temp) = (self.config.d, self.config.temperature);
        Ok(match self.config.attention {
            AttentionKind::Hv => PositionalInputs { grid: None, row: Some(axis_pe(h, d, temp)?), col: Some(axis_pe(w, d, temp)?) },
            _ => PositionalInputs { grid: Some(grid_pe(h, w, d, temp)?), ..Default::default() },
        })
    }

    pub fn encoder_forward(&self, t: &mut Tape, store: &ParamStore, x: Var, h: usize, w: usize, drop: &mut Dropout) -> Result<Var> {
        if self.encoder.is_empty() {
            return Ok(x);
        }
        let pe = self.positional_inputs(h, w)?;
        let mut x = x;
        for layer in &self.encoder {
            let a = attend(t, store, &layer.attn, x, h, w, &pe)?.out;
            let a = drop.apply(t, a);
            let r = t.add(x, a);
            x = layer.norm1.apply(t, store, r);
            let f = layer.ffn.apply(t, store, x);
            let f = drop.apply(t, f);
            let r = t.add(x, f);
            x = layer.norm2.apply(t, store, r);
        }
        Ok(x)
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, image: &Tensor, opts: &ForwardOptions<'_>) -> Result<ForwardPass> {
        let cfg = &self.config;
        let mut drop = Dropout::new(cfg.dropout, opts.dropout_seed);
        let (x, h, w) = self.stem_forward(t, store, image)?;
        let memory = self.encoder_forward(t, store, x, h, w, &mut drop)?;
        let queries = initial_queries(t, store, &self.query, memory, h, w, opts.frozen_selection)?;
        let pos = t.constant(grid_pe(h, w, cfg.d, cfg.temperature)?);

        let mut tgt = queries.content;
        let mut layers = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let lambda = match &layer.lambda {
                Some(f) => f.apply(t, store, tgt),
                None => queries.lambda,
            };
            let p_q = t.mul(lambda, queries.p_s);

            let sa = &layer.self_attn;
            let qk_in = t.add(tgt, p_q);
            let q = sa.q.apply(t, store, qk_in);
            let k = sa.k.apply(t, store, qk_in);
            let v = sa.v.apply(t, store, tgt);
            let (o, _) = multi_head(t, &[q], &[k], v, cfg.heads);
            let o = sa.out.apply(t, store, o);
            let o = drop.apply(t, o);
            let r = t.add(tgt, o);
            tgt = layer.norm1.apply(t, store, r);

            let ca = &layer.cross;
            let c_q = ca.content_q.apply(t, store, tgt);
            let c_k = ca.content_k.apply(t, store, memory);
            let p_k = ca.spatial_k.apply(t, store, pos);
            let v = ca.v.apply(t, store, memory);
            let (o, cross_weights) = multi_head(t, &[c_q, p_q], &[c_k, p_k], v, cfg.heads);
            let o = ca.out.apply(t, store, o);
            let o = drop.apply(t, o);
            let r = t.add(tgt, o);
            tgt = layer.norm2.apply(t, store, r);

            let f = layer.ffn.apply(t, store, tgt);
            let f = drop.apply(t, f);
            let r = t.add(tgt, f);
            tgt = layer.norm3.apply(t, store, r);

            let logits = self.class_head.apply(t, store, tgt);
            let raw = self.box_head.apply(t, store, tgt);
            let z = t.add(raw, queries.ref_offset);
            let boxes = t.sigmoid(z);
            layers.push(LayerOutput { logits, boxes, cross_weights });
        }
        Ok(ForwardPass { h, w, memory, queries, layers })
    }
}
