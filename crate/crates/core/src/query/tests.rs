use super::*;
use crate::attention::FeatureMap;
use crate::numerics::pe::sinusoidal_pe_2d;
use crate::numerics::{Init, Tape};
use proptest::prelude::*;

fn naive_ffn(store: &ParamStore, ffn: &Ffn, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (li, l) in ffn.layers.iter().enumerate() {
        let (w, b) = (store.get(l.weight).data(), store.get(l.bias).data());
        h = (0..l.out_dim)
            .map(|o| {
                let s = b[o] + (0..l.in_dim).map(|i| w[o * l.in_dim + i] * h[i]).sum::<f64>();
                if li + 1 < ffn.layers.len() {
                    s.max(0.0)
                } else {
                    s
                }
            })
            .collect();
    }
    h
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(x: f64) -> f64 {
    (x / (1.0 - x)).ln()
}

fn random_ffn(store: &mut ParamStore, init: &mut Init, name: &str, dims: &[usize]) -> Ffn {
    let f = Ffn::new(store, init, name, dims);
    for l in &f.layers {
        *store.get_mut(l.bias) = init.normal(&[l.out_dim], 0.3);
    }
    f
}

fn random_map(init: &mut Init, d: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap::new(init.normal(&[d, h, w], 1.0)).unwrap()
}

#[test]
fn compose_identities_and_products() {
    let mut init = Init::new(3);
    let p = init.normal(&[8], 1.0);
    assert_eq!(compose_box_query(&p, &Tensor::ones(&[8])).unwrap(), p);
    assert!(compose_box_query(&p, &Tensor::zeros(&[8])).unwrap().data().iter().all(|&v| v == 0.0));
    let l = init.normal(&[8], 1.0);
    let q = BoxQuery::new(p.clone(), l.clone()).unwrap();
    for i in 0..8 {
        assert_eq!(q.p_q.data()[i], p.data()[i] * l.data()[i]);
    }
    assert!(compose_box_query(&p, &Tensor::ones(&[7])).is_err());
}

#[test]
fn transformation_from_cell_embedding() {
    let (d, h, w) = (4, 3, 5);
    let mut store = ParamStore::new();
    let mut init = Init::new(5);
    let enc = random_map(&mut init, d, h, w);
    let point = ReferencePoint { cx: 0.7, cy: 0.2, source_index: None, scale_index: None, objectness: None };
    let (u, v) = (0, 3);

    let zero = Ffn::new(&mut store, &mut init, "z", &[d, d, d]);
    zero.set_zero(&mut store);
    let lambda = predict_transformation(&store, &enc, &point, &zero).unwrap();
    assert!(lambda.data().iter().all(|&x| x == 0.0));
    let p_s = sinusoidal_pe_2d(point.cx, point.cy, d, DEFAULT_TEMPERATURE).unwrap();
    assert!(BoxQuery::new(p_s, lambda).unwrap().p_q.data().iter().all(|&x| x == 0.0));

    let ident = Ffn::new(&mut store, &mut init, "i", &[d, d]);
    ident.set_identity(&mut store);
    let got = predict_transformation(&store, &enc, &point, &ident).unwrap();
    let want: Vec<f64> = (0..d).map(|c| enc.at(c, u, v)).collect();
    assert_eq!(got.data(), &want[..]);

    let f = random_ffn(&mut store, &mut init, "r", &[d, 6, d]);
    let got = predict_transformation(&store, &enc, &point, &f).unwrap();
    for (a, b) in got.data().iter().zip(naive_ffn(&store, &f, &want)) {
        assert!((a - b).abs() < 1e-12);
    }
    let outside = ReferencePoint { cx: 1.2, ..point };
    assert!(predict_transformation(&store, &enc, &outside, &f).is_err());
}

#[test]
fn objectness_probabilities() {
    assert_eq!(object_probability([0.0, 0.0]), 0.5);
    assert!((object_probability([0.0, 3f64.ln()]) - 0.75).abs() < 1e-12);
    let mut store = ParamStore::new();
    let mut init = Init::new(8);
    let enc = random_map(&mut init, 4, 2, 3);
    let heads: Vec<Ffn> = (0..3).map(|s| random_ffn(&mut store, &mut init, &format!("o{s}"), &[4, 4, 2])).collect();
    let scores = objectness_scores(&store, &enc, &heads).unwrap();
    assert_eq!(scores.len(), 2 * 3 * 3);
    let tokens = enc.to_tokens();
    for i in 0..scores.len() {
        let (u, v, s) = scores.locate(i);
        let want = naive_ffn(&store, &heads[s], tokens.row(u * 3 + v));
        assert!((scores.logits[i][0] - want[0]).abs() < 1e-12);
        let p = (want[1]).exp() / (want[0].exp() + want[1].exp());
        assert!((scores.probabilities()[i] - p).abs() < 1e-12);
    }
}

#[test]
fn top_k_examples() {
    assert_eq!(top_k(&[0.9, 0.1, 0.5], 2).unwrap(), vec![0, 2]);
    assert_eq!(top_k(&[0.3; 5], 3).unwrap(), vec![0, 1, 2]);
    assert!(top_k(&[0.3; 2], 3).is_err());
    let mut rng = crate::numerics::rng::XorShift64Star::new(11);
    let probs: Vec<f64> = (0..200).map(|_| rng.next_f64()).collect();
    let mut oracle: Vec<(f64, usize)> = probs.iter().copied().zip(0..).collect();
    oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let want: Vec<usize> = oracle[..50].iter().map(|p| p.1).collect();
    assert_eq!(top_k(&probs, 50).unwrap(), want);
}

proptest! {
    #[test]
    fn selection_is_sorted_and_maximal(raw in proptest::collection::vec(0u8..20, 1..60), k_frac in 0.0f64..1.0) {
        let probs: Vec<f64> = raw.iter().map(|&r| r as f64 / 20.0).collect();
        let k = ((probs.len() as f64) * k_frac) as usize;
        let sel = top_k(&probs, k).unwrap();
        prop_assert_eq!(sel.len(), k);
        for pair in sel.windows(2) {
            prop_assert!(probs[pair[0]] >= probs[pair[1]]);
            if probs[pair[0]] == probs[pair[1]] {
                prop_assert!(pair[0] < pair[1]);
            }
        }
        if let Some(&last) = sel.last() {
            for (i, &p) in probs.iter().enumerate() {
                if !sel.contains(&i) {
                    prop_assert!(p < probs[last] || (p == probs[last] && i > last));
                }
            }
        }
    }
}

#[test]
fn reference_points_come_from_cell_centers() {
    let scores = ObjectnessScores { h: 2, w: 4, scales: 3, logits: (0..24).map(|i| [0.0, (i % 7) as f64]).collect() };
    let refs = select_reference_points(&scores, 4).unwrap();
    let p = scores.probabilities();
    for pair in refs.windows(2) {
        assert!(pair[0].objectness >= pair[1].objectness);
    }
    let first = refs[0];
    // Highest logit 6 first appears at candidate 6: cell 2, scale 0.
    assert_eq!((first.source_index, first.scale_index), (Some(2), Some(0)));
    assert_eq!((first.cx, first.cy), (2.5 / 4.0, 0.25));
    assert_eq!(first.objectness, Some(p[6]));
}

#[test]
fn candidate_box_with_zero_ffn_reproduces_prior() {
    let mut store = ParamStore::new();
    let mut init = Init::new(1);
    let enc = random_map(&mut init, 4, 4, 4);
    let f = Ffn::new(&mut store, &mut init, "b", &[4, 4, 4]);
    f.set_zero(&mut store);
    let b = estimate_candidate_box(&store, &enc, 0.25, 0.75, [0.2, 0.2], &f).unwrap();
    for (a, e) in b.iter().zip([0.25, 0.75, 0.2, 0.2]) {
        assert!((a - e).abs() < 1e-9);
    }
    let b = estimate_candidate_box(&store, &enc, 0.5, 0.5, [0.4, 0.4], &f).unwrap();
    for (a, e) in b.iter().zip([0.5, 0.5, 0.4, 0.4]) {
        assert!((a - e).abs() < 1e-9);
    }
    assert!(estimate_candidate_box(&store, &enc, 0.5, 0.5, [0.0, 0.4], &f).is_err());
}

#[test]
fn candidate_box_matches_composition() {
    let mut store = ParamStore::new();
    let mut init = Init::new(2);
    let enc = random_map(&mut init, 4, 3, 3);
    let f = random_ffn(&mut store, &mut init, "b", &[4, 5, 4]);
    let (cx, cy, a) = (0.4, 0.9, [0.1, 0.3]);
    let got = estimate_candidate_box(&store, &enc, cx, cy, a, &f).unwrap();
    let x: Vec<f64> = (0..4).map(|c| enc.at(c, 2, 1)).collect();
    let raw = naive_ffn(&store, &f, &x);
    let prior = [cx, cy, a[0], a[1]];
    for i in 0..4 {
        assert!((got[i] - logistic(raw[i] + logit(prior[i]))).abs() < 1e-12);
        assert!(got[i] > 0.0 && got[i] < 1.0);
    }
}

#[test]
fn content_query_modes() {
    let d = 8;
    let mut store = ParamStore::new();
    let mut init = Init::new(4);
    let e = init.normal(&[1, d], 1.0);
    let ident = Ffn::new(&mut store, &mut init, "i", &[d, d]);
    ident.set_identity(&mut store);
    let got = init_content_query(&store, ContentInit::FromEmbedding, ContentInput::Embedding(&e), &ident).unwrap();
    assert_eq!(got.data(), e.data());

    let zero = Ffn::new(&mut store, &mut init, "z", &[d, d, d]);
    zero.set_zero(&mut store);
    let b = [0.5, 0.5, 0.2, 0.2];
    let got = init_content_query(&store, ContentInit::FromBox, ContentInput::Box(&b), &zero).unwrap();
    assert!(got.data().iter().all(|&v| v == 0.0));

    let f = random_ffn(&mut store, &mut init, "r", &[d, d, d]);
    let got = init_content_query(&store, ContentInit::FromBox, ContentInput::Box(&b), &f).unwrap();
    let mut pe = Vec::new();
    for c in b {
        for i in 0..d / 8 {
            let arg = c * 2.0 * std::f64::consts::PI / 10_000f64.powf(2.0 * i as f64 / (d / 4) as f64);
            pe.extend([arg.sin(), arg.cos()]);
        }
    }
    for (a, w) in got.data().iter().zip(naive_ffn(&store, &f, &pe)) {
        assert!((a - w).abs() < 1e-12);
    }
    assert!(init_content_query(&store, ContentInit::FromBox, ContentInput::Embedding(&e), &f).is_err());
}

#[test]
fn box_head_identities() {
    let mut store = ParamStore::new();
    let mut init = Init::new(6);
    let f = Ffn::new(&mut store, &mut init, "h", &[8, 8, 4]);
    f.set_zero(&mut store);
    let x = init.normal(&[8], 1.0);
    let b = box_head(&store, &x, (0.5, 0.5), &f).unwrap();
    assert_eq!(b, [0.5; 4]);
    let b = box_head(&store, &x, (0.13, 0.81), &f).unwrap();
    for (a, e) in b.iter().zip([0.13, 0.81, 0.5, 0.5]) {
        assert!((a - e).abs() < 1e-9);
    }
    let g = random_ffn(&mut store, &mut init, "g", &[8, 8, 4]);
    let b = box_head(&store, &x, (0.3, 0.7), &g).unwrap();
    let raw = naive_ffn(&store, &g, x.data());
    let off = [logit(0.3), logit(0.7), 0.0, 0.0];
    for i in 0..4 {
        assert!((b[i] - logistic(raw[i] + off[i])).abs() < 1e-12);
    }
}

fn spec(mode: QueryMode, content_init: ContentInit, k: usize, d: usize) -> QuerySpec {
    QuerySpec { mode, content_init, k, d, temperature: DEFAULT_TEMPERATURE, anchors: AnchorScaleSet::default() }
}

#[test]
fn tape_queries_agree_with_plain_operations() {
    let (d, h, w, k) = (8, 3, 4, 5);
    for content_init in [ContentInit::FromBox, ContentInit::FromEmbedding] {
        let mut store = ParamStore::new();
        let mut init = Init::new(12);
        let q = QueryParams::new(&mut store, &mut init, "q", spec(QueryMode::IpIt, content_init, k, d)).unwrap();
        let enc = random_map(&mut init, d, h, w);
        let mut t = Tape::new();
        let x = t.constant(enc.to_tokens());
        let iq = initial_queries(&mut t, &store, &q, x, h, w, None).unwrap();
        let cand = iq.candidates.as_ref().unwrap();
        let plain = objectness_scores(&store, &enc, &q.objectness).unwrap();
        let probs = plain.probabilities();
        for (a, b) in t.value(cand.probs).data().iter().zip(&probs) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(iq.selected, top_k(&probs, k).unwrap());
        assert_eq!(iq.refs, select_reference_points(&plain, k).unwrap());
        for (j, r) in iq.refs.iter().enumerate() {
            let s = r.scale_index.unwrap();
            let b = estimate_candidate_box(&store, &enc, r.cx, r.cy, q.anchors.0[s], &q.boxes[s]).unwrap();
            let tb = t.value(cand.boxes).row(iq.selected[j]);
            assert!(b.iter().zip(tb).all(|(x, y)| (x - y).abs() < 1e-12));
            let input = match content_init {
                ContentInit::FromBox => ContentInput::Box(&b),
                ContentInit::FromEmbedding => ContentInput::Embedding(&cell_embedding(&enc, r.source_index.unwrap() / w, r.source_index.unwrap() % w)),
            };
            let c = init_content_query(&store, content_init, input, q.content.as_ref().unwrap()).unwrap();
            assert!(c.data().iter().zip(t.value(iq.content).row(j)).all(|(x, y)| (x - y).abs() < 1e-12));
            let l = predict_transformation(&store, &enc, r, q.lambda_ffn.as_ref().unwrap()).unwrap();
            assert!(l.data().iter().zip(t.value(iq.lambda).row(j)).all(|(x, y)| (x - y).abs() < 1e-12));
            let p_s = sinusoidal_pe_2d(r.cx, r.cy, d, DEFAULT_TEMPERATURE).unwrap();
            assert!(p_s.data().iter().zip(t.value(iq.p_s).row(j)).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }
}

#[test]
fn candidate_boxes_stay_inside_unit_square() {
    let mut store = ParamStore::new();
    let mut init = Init::new(13);
    let q = QueryParams::new(&mut store, &mut init, "q", spec(QueryMode::Ip, ContentInit::FromBox, 4, 8)).unwrap();
    let enc = FeatureMap::new(init.normal(&[8, 4, 4], 5.0)).unwrap();
    let mut t = Tape::new();
    let x = t.constant(enc.to_tokens());
    let iq = initial_queries(&mut t, &store, &q, x, 4, 4, None).unwrap();
    let boxes = t.value(iq.candidates.unwrap().boxes);
    assert_eq!(boxes.shape(), [48, 4]);
    assert!(boxes.data().iter().all(|&v| v > 0.0 && v < 1.0));
    assert_eq!(t.value(iq.lambda).shape(), [4, 8]);
}

#[test]
fn learned_box_queries() {
    let (d, k) = (8, 6);
    let mut store = ParamStore::new();
    let mut init = Init::new(14);
    let q = QueryParams::new(&mut store, &mut init, "q", spec(QueryMode::Rb, ContentInit::FromBox, k, d)).unwrap();
    assert!(q.objectness.is_empty() && q.content.is_none());
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[6, d]));
    let iq = initial_queries(&mut t, &store, &q, x, 2, 3, None).unwrap();
    assert!(iq.candidates.is_none());
    assert_eq!(iq.refs.len(), k);
    assert!(t.value(iq.content).data().iter().all(|&v| v == 0.0));
    let off = t.value(iq.ref_offset);
    for (j, r) in iq.refs.iter().enumerate() {
        assert!((0.0..=1.0).contains(&r.cx) && (0.0..=1.0).contains(&r.cy));
        assert!((off.at(j, 0) - logit(r.cx)).abs() < 1e-9);
        let p_s = sinusoidal_pe_2d(r.cx, r.cy, d, DEFAULT_TEMPERATURE).unwrap();
        assert!(p_s.data().iter().zip(t.value(iq.p_s).row(j)).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}

#[test]
fn frozen_selection_is_respected_and_checked() {
    let mut store = ParamStore::new();
    let mut init = Init::new(15);
    let q = QueryParams::new(&mut store, &mut init, "q", spec(QueryMode::IpIt, ContentInit::FromBox, 2, 8)).unwrap();
    let mut t = Tape::new();
    let x = t.constant(init.normal(&[4, 8], 1.0));
    let iq = initial_queries(&mut t, &store, &q, x, 2, 2, Some(&[7, 1])).unwrap();
    assert_eq!(iq.selected, vec![7, 1]);
    assert_eq!(iq.refs[0].source_index, Some(2));
    assert!(initial_queries(&mut t, &store, &q, x, 2, 2, Some(&[12, 1])).is_err());
    assert!(initial_queries(&mut t, &store, &q, x, 2, 2, Some(&[1])).is_err());
}

#[test]
fn mode_names_round_trip() {
    for m in QueryMode::ALL {
        assert_eq!(m.name().parse::<QueryMode>().unwrap(), m);
        let j = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<QueryMode>(&j).unwrap(), m);
    }
    assert!("box".parse::<QueryMode>().is_err());
    assert_eq!(serde_json::to_string(&ContentInit::FromBox).unwrap(), "\"from_box\"");
}

#[test]
fn reference_csv_layout() {
    let refs = [
        ReferencePoint { cx: 0.5, cy: 0.25, source_index: Some(1), scale_index: Some(2), objectness: Some(0.75) },
        ReferencePoint { cx: 0.1, cy: 0.9, source_index: None, scale_index: None, objectness: None },
    ];
    let mut buf = Vec::new();
    export::write_csv(&mut buf, &refs).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines, ["# schema_version=1", export::HEADER, "0,0.5,0.25,2,7.5e-1", "1,0.1,0.9,,"]);
}
