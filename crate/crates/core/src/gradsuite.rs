//! Named finite-difference gradient suites over every trainable operation.

use crate::attention::{attend, AttentionKind, AttentionParams, AttentionSpec};
use crate::error::{Error, Result};
use crate::loss::GroundTruthObject;
use crate::model::{objective, ForwardOptions, Model, ModelConfig};
use crate::numerics::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::numerics::pe::{axis_pe, grid_pe, DEFAULT_TEMPERATURE};
use crate::numerics::{Ffn, Init, Linear, ParamStore, Tape, Tensor, Var};
use crate::query::{initial_queries, AnchorScaleSet, ContentInit, QueryMode, QueryParams, QuerySpec};
use crate::attention::PositionalInputs;

/// Tolerance for single operations.
pub const OP_TOL: f64 = 1e-4;
/// Tolerance for whole-model losses.
pub const END_TO_END_TOL: f64 = 1e-3;

pub const SUITES: [&str; 13] = [
    "linear",
    "softmax_cross_entropy",
    "attention.global",
    "attention.hv",
    "attention.cc",
    "query.objectness",
    "query.candidate_box",
    "query.content_from_box",
    "query.content_from_embedding",
    "query.transformation",
    "box_head",
    "decoder.layer_loss",
    "model.total_loss",
];

pub fn tolerance(name: &str) -> f64 {
    if name.starts_with("decoder.") || name.starts_with("model.") {
        END_TO_END_TOL
    } else {
        OP_TOL
    }
}

/// `Σ x ⊙ r` for a fixed random readout `r`.
fn readout(t: &mut Tape, x: Var, seed: u64) -> Var {
    let shape = t.shape(x).to_vec();
    let r = t.constant(Init::new(seed).normal(&shape, 1.0));
    let p = t.mul(x, r);
    t.sum(p)
}

fn attention_suite(kind: AttentionKind, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (h, w, d) = (3, 4, 8);
    let mut store = ParamStore::new();
    let mut init = Init::new(31);
    let params = AttentionParams::new(&mut store, &mut init, "attn", AttentionSpec::new(kind, d, 2))?;
    let x = store.insert("x", init.normal(&[h * w, d], 0.5));
    let pe = match kind {
        AttentionKind::Hv => PositionalInputs { grid: None, row: Some(axis_pe(h, d, DEFAULT_TEMPERATURE)?), col: Some(axis_pe(w, d, DEFAULT_TEMPERATURE)?) },
        _ => PositionalInputs { grid: Some(grid_pe(h, w, d, DEFAULT_TEMPERATURE)?), ..Default::default() },
    };
    grad_check(
        &format!("attention.{}", kind.name()),
        &store,
        |t, s| {
            let xv = t.param(s, x);
            let out = attend(t, s, &params, xv, h, w, &pe).expect("validated shapes").out;
            readout(t, out, 32)
        },
        opts,
    )
}

fn query_suite(name: &str, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (h, w, d, k) = (2, 3, 8, 4);
    let (mode, content_init) = match name {
        "query.content_from_embedding" => (QueryMode::IpIt, ContentInit::FromEmbedding),
        _ => (QueryMode::IpIt, ContentInit::FromBox),
    };
    let mut store = ParamStore::new();
    let mut init = Init::new(41);
    let spec = QuerySpec { mode, content_init, k, d, temperature: DEFAULT_TEMPERATURE, anchors: AnchorScaleSet::default() };
    let q = QueryParams::new(&mut store, &mut init, "query", spec)?;
    let enc = store.insert("enc", init.normal(&[h * w, d], 1.0));
    let selected = {
        let mut t = Tape::new();
        let e = t.param(&store, enc);
        initial_queries(&mut t, &store, &q, e, h, w, None)?.selected
    };
    let which = name.to_string();
    grad_check(
        name,
        &store,
        |t, s| {
            let e = t.param(s, enc);
            let iq = initial_queries(t, s, &q, e, h, w, Some(&selected)).expect("validated shapes");
            let c = iq.candidates.as_ref().expect("content mode");
            match which.as_str() {
                "query.objectness" => readout(t, c.probs, 42),
                "query.candidate_box" => readout(t, c.boxes, 43),
                "query.transformation" => readout(t, iq.lambda, 44),
                _ => readout(t, iq.content, 45),
            }
        },
        opts,
    )
}

fn box_head_suite(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let mut init = Init::new(51);
    let ffn = Ffn::new(&mut store, &mut init, "box", &[8, 8, 4]);
    let f = store.insert("f", init.normal(&[5, 8], 1.0));
    let offset: Vec<f64> = (0..5).flat_map(|j| [crate::numerics::inverse_sigmoid(0.1 + 0.15 * j as f64), 0.3, 0.0, 0.0]).collect();
    grad_check(
        "box_head",
        &store,
        |t, s| {
            let x = t.param(s, f);
            let raw = ffn.apply(t, s, x);
            let o = t.constant(Tensor::from_parts(vec![5, 4], offset.clone()));
            let z = t.add(raw, o);
            let b = t.sigmoid(z);
            readout(t, b, 52)
        },
        opts,
    )
}

/// Ground truths used by the whole-model suites.
pub fn fixture_truths() -> Vec<GroundTruthObject> {
    vec![
        GroundTruthObject { class_id: 1, bbox: [0.3, 0.4, 0.2, 0.3] },
        GroundTruthObject { class_id: 0, bbox: [0.7, 0.6, 0.25, 0.2] },
    ]
}

/// Total loss of a tiny model with selection and matching frozen at their
/// values for the unperturbed parameters.
pub fn model_loss_check(name: &str, config: ModelConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let model = Model::new(config, 61)?;
    let image = Init::new(62).uniform(&[3, 16, 16], 0.0, 1.0);
    let gts = fixture_truths();
    let decisions = {
        let mut t = Tape::new();
        let pass = model.forward(&mut t, &image, &ForwardOptions::default())?;
        objective(&mut t, &model.net, &pass, &gts, None)?.decisions
    };
    let frozen = (!decisions.selected.is_empty()).then_some(&decisions.selected[..]);
    grad_check(
        name,
        &model.store,
        |t, s| {
            let opts = ForwardOptions { dropout_seed: None, frozen_selection: frozen };
            let pass = model.net.forward(t, s, &image, &opts).expect("valid fixture");
            objective(t, &model.net, &pass, &gts, Some(&decisions)).expect("valid fixture").total
        },
        opts,
    )
}

pub fn run_suite(name: &str, corrupt: bool) -> Result<GradCheckReport> {
    run_suite_with(name, &GradCheckOptions { corrupt, ..GradCheckOptions::with_tol(tolerance(name)) })
}

pub fn run_suite_with(name: &str, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let opts = opts.clone();
    match name {
        "linear" => {
            let mut store = ParamStore::new();
            let mut init = Init::new(11);
            let l = Linear::new(&mut store, &mut init, "lin", 5, 3);
            *store.get_mut(l.bias) = init.normal(&[3], 1.0);
            let x = store.insert("x", init.normal(&[4, 5], 1.0));
            grad_check(
                name,
                &store,
                |t, s| {
                    let xv = t.param(s, x);
                    let y = l.apply(t, s, xv);
                    readout(t, y, 12)
                },
                &opts,
            )
        }
        "softmax_cross_entropy" => {
            let mut store = ParamStore::new();
            let mut init = Init::new(21);
            let l = Linear::new(&mut store, &mut init, "logits", 6, 4);
            let x = init.normal(&[5, 6], 1.0);
            let targets: Vec<f64> = (0..20).map(|i| if i % 4 == (i / 4) % 4 { 1.0 } else { 0.0 }).collect();
            grad_check(
                name,
                &store,
                |t, s| {
                    let xv = t.constant(x.clone());
                    let z = l.apply(t, s, xv);
                    let p = t.softmax_rows(z);
                    let lp = t.log(p);
                    let tg = t.constant(Tensor::from_parts(vec![5, 4], targets.clone()));
                    let m = t.mul(lp, tg);
                    let sum = t.sum(m);
                    t.scale(sum, -1.0)
                },
                &opts,
            )
        }
        "attention.global" => attention_suite(AttentionKind::Global, &opts),
        "attention.hv" => attention_suite(AttentionKind::Hv, &opts),
        "attention.cc" => attention_suite(AttentionKind::Cc, &opts),
        n if n.starts_with("query.") => query_suite(n, &opts),
        "box_head" => box_head_suite(&opts),
        "decoder.layer_loss" => model_loss_check(name, ModelConfig { n_enc: 0, n_dec: 1, ..ModelConfig::tiny() }, &opts),
        "model.total_loss" => model_loss_check(name, ModelConfig::tiny(), &opts),
        _ => Err(Error::Config(format!("unknown gradient suite {name:?}"))),
    }
}
