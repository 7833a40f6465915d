use super::*;
use crate::model::{checkpoint, Model, ModelConfig};
use crate::synthdata::{generate_scene, DatasetSpec};

fn tiny_run(epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig { num_queries: 4, ..ModelConfig::tiny() };
    cfg.model.dropout = 0.1;
    cfg.data = DatasetSpec { image_size: 16, train_scenes: 6, eval_scenes: 3, max_objects: 2, ..Default::default() };
    cfg.optim.epochs = epochs;
    cfg.optim.lr_drop_epoch = 1;
    cfg.optim.batch_size = 2;
    cfg.seed = 9;
    cfg
}

#[test]
fn empty_document_gives_defaults() {
    let cfg = RunConfig::parse("", &[]).unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(cfg.optim.epochs, 10);
    assert_eq!(cfg.optim.lr_drop_epoch, 8);
    assert_eq!(cfg.optim.weight_decay, 1e-4);
}

#[test]
fn overrides_follow_dot_paths() {
    let cfg = RunConfig::parse(r#"{"model": {"d": 32}}"#, &["model.heads=2".into(), "optim.lr=0.5".into(), "output.dir=/tmp/x".into(), "model.attention=\"cc\"".into()]).unwrap();
    assert_eq!((cfg.model.d, cfg.model.heads), (32, 2));
    assert_eq!(cfg.optim.lr, 0.5);
    assert_eq!(cfg.output.dir, std::path::PathBuf::from("/tmp/x"));
    assert_eq!(cfg.model.attention, crate::attention::AttentionKind::Cc);
    let bare = RunConfig::parse("", &["model.attention=global".into()]).unwrap();
    assert_eq!(bare.model.attention, crate::attention::AttentionKind::Global);
}

#[test]
fn bad_documents_are_config_errors() {
    for (doc, ov) in [
        ("", "model.bogus=1"),
        ("", "nokey"),
        ("", "model..d=1"),
        ("", "seed.x=1"),
        ("", "model.num_classes=4"),
        ("", "optim.batch_size=0"),
        ("", "optim.lr=-1"),
        ("", "data.image_size=60"),
        ("{", "seed=1"),
    ] {
        let r = RunConfig::parse(doc, &[ov.to_string()]);
        assert!(matches!(r, Err(crate::Error::Config(_))), "{doc} {ov}: {r:?}");
    }
}

#[test]
fn hash_tracks_the_resolved_config() {
    let a = RunConfig::default();
    let b = RunConfig::parse(r#"{"seed": 0}"#, &[]).unwrap();
    assert_eq!(a.hash().unwrap(), b.hash().unwrap());
    assert_eq!(a.hash().unwrap().len(), 64);
    let c = RunConfig::parse("", &["seed=1".into()]).unwrap();
    assert_ne!(a.hash().unwrap(), c.hash().unwrap());
}

#[test]
fn epoch_order_is_a_seeded_permutation() {
    let a = epoch_order(3, 0, 50);
    let mut sorted = a.clone();
    sorted.sort();
    assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    assert_eq!(a, epoch_order(3, 0, 50));
    assert_ne!(a, epoch_order(3, 1, 50));
    assert_ne!(a, epoch_order(4, 0, 50));
}

#[test]
fn zero_epochs_leave_the_initialization() {
    let cfg = tiny_run(0);
    let out = train(&cfg, None, |_, _| {}).unwrap();
    let fresh = Model::new(cfg.model.clone(), cfg.seed).unwrap();
    assert_eq!(checkpoint::to_bytes(&out.model).unwrap(), checkpoint::to_bytes(&fresh).unwrap());
    assert!(out.steps.is_empty());
}

#[test]
fn training_is_reproducible_and_logged() {
    let cfg = tiny_run(2);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    let mut epochs = Vec::new();
    let ra = train(&cfg, Some(&mut a), |e, m| epochs.push((e, m))).unwrap();
    train(&cfg, Some(&mut b), |_, _| {}).unwrap();
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "# schema_version=1");
    assert_eq!(lines[1], format!("# config_sha256={}", cfg.hash().unwrap()));
    assert_eq!(lines[2], "step,epoch,l_init,l_dec_layer0,l_dec_layer1,total,lr");
    assert_eq!(lines.len(), 3 + 6);
    assert_eq!(ra.steps.len(), 6);
    assert_eq!(epochs.len(), 2);
    assert_eq!(ra.steps[0].lr, cfg.optim.lr);
    assert!((ra.steps[5].lr - cfg.optim.lr * 0.1).abs() < 1e-18);
    for s in &ra.steps {
        let parts = s.l_init.unwrap() + s.layers.iter().sum::<f64>();
        assert!((parts - s.total).abs() < 1e-9 * s.total.abs().max(1.0));
    }
    let fresh = Model::new(cfg.model.clone(), cfg.seed).unwrap();
    assert_ne!(fresh.store, ra.model.store);
}

#[test]
fn rb_mode_logs_no_init_loss() {
    let mut cfg = tiny_run(1);
    cfg.model.query_mode = crate::query::QueryMode::Rb;
    let mut log = Vec::new();
    let out = train(&cfg, Some(&mut log), |_, _| {}).unwrap();
    assert!(out.steps.iter().all(|s| s.l_init.is_none()));
    let text = String::from_utf8(log).unwrap();
    assert!(text.lines().nth(3).unwrap().starts_with("0,0,,"));
}

#[test]
fn evaluation_and_dumps_have_the_documented_shapes() {
    let cfg = tiny_run(0);
    let model = Model::new(cfg.model.clone(), cfg.seed).unwrap();
    let ev = evaluate(&model, &cfg.data, cfg.data.eval_indices()).unwrap();
    assert_eq!(ev.detections.len(), 3);
    assert!(ev.detections.iter().all(|r| r.boxes.len() == cfg.model.num_queries));
    assert!((0.0..=1.0).contains(&ev.ap));
    let scene = generate_scene(&cfg.data, 0);
    let rows = decoder_attention_rows(&model, &scene.image).unwrap();
    let hw = (16 / crate::model::STEM_STRIDE).pow(2);
    assert_eq!(rows.len(), cfg.model.heads * cfg.model.num_queries * hw);
    for q in rows.chunks(hw) {
        assert!((q.iter().map(|r| r.weight).sum::<f64>() - 1.0).abs() < 1e-9);
    }
    assert_eq!(reference_points(&model, &scene.image).unwrap().len(), cfg.model.num_queries);
}

#[test]
fn random_baseline_is_seeded() {
    let spec = DatasetSpec { train_scenes: 0, eval_scenes: 20, ..Default::default() };
    let a = random_box_detections(&spec, spec.eval_indices(), 5, 1);
    assert_eq!(a, random_box_detections(&spec, spec.eval_indices(), 5, 1));
    assert_ne!(a, random_box_detections(&spec, spec.eval_indices(), 5, 2));
    for r in &a {
        for b in &r.boxes {
            assert!(b[0] - b[2] / 2.0 >= 0.0 && b[0] + b[2] / 2.0 <= 1.0 + 1e-12);
        }
    }
    let ap = random_box_ap(&spec, spec.eval_indices(), 5, 1).unwrap();
    assert!((0.0..0.2).contains(&ap), "{ap}");
}
