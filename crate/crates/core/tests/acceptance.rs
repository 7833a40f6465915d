//! One PASS/FAIL line per acceptance criterion. Run with
//! `cargo test --release --test acceptance -- --nocapture --test-threads 1`
//! to watch the lines as they appear; they are also written when captured.

use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};

use hvdetr::attention::bench::{bench_grid, BenchSettings};
use hvdetr::attention::{cc_attention, flops_global, flops_hv, global_attention, hv_attention, AttentionKind, AttentionParams, AttentionSpec, BranchFlags, FeatureMap};
use hvdetr::gradsuite::{run_suite, SUITES};
use hvdetr::loss::{hungarian_match, match_cost, GroundTruthObject, Prediction};
use hvdetr::model::{checkpoint, Model};
use hvdetr::numerics::nn::Ffn;
use hvdetr::numerics::pe::{cell_center, grid_pe, DEFAULT_TEMPERATURE};
use hvdetr::numerics::rng::XorShift64Star;
use hvdetr::numerics::{Init, ParamStore};
use hvdetr::query::{box_head, estimate_candidate_box, ContentInit, QueryMode};
use hvdetr::run::{evaluate, random_box_ap, train, RunConfig};
use hvdetr::synthdata::{generate_scenes, read_dataset, write_dataset, DatasetSpec};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("criterion {id:>2} {verdict} {name}: {detail}");
    // Bypasses the test harness capture so the line is always shown.
    let _ = writeln!(std::io::stdout().lock(), "{line}");
    assert!(pass, "{line}");
}

#[test]
fn c01_flop_model_is_exact() {
    let _g = serial();
    let (g, hv) = (flops_global(100, 150, 256), flops_hv(100, 150, 256));
    report(1, "flop model", g == 119_132_160_000 && hv == 8_801_280_000, &format!("global {g} hv {hv}"));
}

#[test]
fn c02_hv_time_grows_sub_quadratically() {
    let _g = serial();
    let settings = BenchSettings { warmup: 3, reps: 20, heads: 1, seed: 0 };
    let rows = bench_grid::<f32>(&[AttentionKind::Global, AttentionKind::Hv], &[(32, 32, 64), (64, 64, 64)], &settings).unwrap();
    let time = |kind, h| rows.iter().find(|r| r.kind == kind && r.h == h).unwrap().wall_ns as f64;
    let hv = time(AttentionKind::Hv, 64) / time(AttentionKind::Hv, 32);
    let global = time(AttentionKind::Global, 64) / time(AttentionKind::Global, 32);
    report(2, "attention scaling", hv < 6.0 && global > 10.0, &format!("hv x{hv:.2} (< 6), global x{global:.2} (> 10)"));
}

fn brute_force(cost: &[Vec<f64>], n_pred: usize) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == cost.len() {
            *best = best.min(acc);
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                go(cost, row + 1, used, acc + cost[row][j], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; n_pred], 0.0, &mut best);
    best
}

fn random_box(rng: &mut XorShift64Star) -> [f64; 4] {
    let (w, h) = (rng.uniform(0.05, 0.6), rng.uniform(0.05, 0.6));
    [rng.uniform(w / 2.0, 1.0 - w / 2.0), rng.uniform(h / 2.0, 1.0 - h / 2.0), w, h]
}

#[test]
fn c03_hungarian_equals_brute_force() {
    let _g = serial();
    let mut rng = XorShift64Star::new(3);
    let mut mismatches = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n_pred = rng.range_inclusive(1, 8);
        let n_gt = rng.range_inclusive(0, n_pred.min(6));
        let preds: Vec<Prediction> = (0..n_pred).map(|_| Prediction { prob: rng.uniform(0.01, 0.99), bbox: random_box(&mut rng) }).collect();
        let gts: Vec<GroundTruthObject> = (0..n_gt).map(|_| GroundTruthObject { class_id: rng.range_inclusive(0, 2), bbox: random_box(&mut rng) }).collect();
        let cost: Vec<Vec<f64>> = gts.iter().map(|g| preds.iter().map(|p| match_cost(p, g).unwrap()).collect()).collect();
        let want = brute_force(&cost, n_pred);
        let got = hungarian_match(&preds, &gts).unwrap();
        let mut seen = got.assignment.clone();
        seen.sort_unstable();
        seen.dedup();
        let injective = seen.len() == n_gt && got.assignment.iter().all(|&j| j < n_pred);
        let recomputed: f64 = got.assignment.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        worst = worst.max((got.total_cost - want).abs());
        if !injective || got.total_cost != want || recomputed != want {
            mismatches += 1;
        }
    }
    report(3, "hungarian oracle", mismatches == 0, &format!("{mismatches}/200 instances differ, max |diff| {worst:e}"));
}

#[test]
fn c04_gradient_suites_pass() {
    let _g = serial();
    let mut failed = Vec::new();
    let mut lines = Vec::new();
    for name in SUITES {
        let r = run_suite(name, false).unwrap();
        lines.push(format!("{name} {:.2e}/{:.0e}", r.max_rel_error, r.tol));
        if !r.passed() {
            failed.push(name);
        }
    }
    report(4, "gradient suites", failed.is_empty(), &format!("{} suites, failing {failed:?}; {}", SUITES.len(), lines.join(", ")));
}

#[test]
fn c05_hv_column_branch_degenerates_to_global() {
    let _g = serial();
    let d = 8;
    let mut worst: f64 = 0.0;
    for w in [1, 5, 17] {
        let build = |kind| {
            let mut store = ParamStore::new();
            let mut init = Init::new(5);
            let spec = AttentionSpec { with_output: false, ..AttentionSpec::new(kind, d, 1) };
            let p = AttentionParams::new(&mut store, &mut init, "a", spec).unwrap();
            p.set_identity(&mut store);
            (store, p)
        };
        let (hs, hp) = build(AttentionKind::Hv);
        let (gs, gp) = build(AttentionKind::Global);
        let x = FeatureMap::new(Init::new(100 + w as u64).normal(&[d, 1, w], 1.0)).unwrap();
        let hv = hv_attention(&hs, &hp, &x, None, None).unwrap();
        let g = global_attention(&gs, &gp, &x, None).unwrap();
        worst = worst.max(hv.branches[1].data.max_abs_diff(&g.output.data));
    }
    report(5, "degenerate equivalence", worst < 1e-9, &format!("max |diff| {worst:.1e} over W in {{1, 5, 17}}"));
}

#[test]
fn c06_zero_ffn_identities() {
    let _g = serial();
    let mut store = ParamStore::new();
    let mut init = Init::new(6);
    let (d, h, w) = (8, 4, 5);
    let enc = FeatureMap::new(init.normal(&[d, h, w], 1.0)).unwrap();
    let est = Ffn::new(&mut store, &mut init, "est", &[d, d, 4]);
    let head = Ffn::new(&mut store, &mut init, "head", &[d, d, 4]);
    est.set_zero(&mut store);
    head.set_zero(&mut store);
    let mut worst: f64 = 0.0;
    for u in 0..h {
        for v in 0..w {
            let (cx, cy) = (cell_center(v, w), cell_center(u, h));
            for anchor in [[0.1, 0.1], [0.2, 0.2], [0.4, 0.4], [0.15, 0.35]] {
                let b = estimate_candidate_box(&store, &enc, cx, cy, anchor, &est).unwrap();
                for (a, e) in b.iter().zip([cx, cy, anchor[0], anchor[1]]) {
                    worst = worst.max((a - e).abs());
                }
            }
            let f = init.normal(&[d], 1.0);
            let b = box_head(&store, &f, (cx, cy), &head).unwrap();
            for (a, e) in b.iter().zip([cx, cy, 0.5, 0.5]) {
                worst = worst.max((a - e).abs());
            }
        }
    }
    report(6, "zero-ffn identities", worst < 1e-9, &format!("max |diff| {worst:.1e}"));
}

struct TrainedRun {
    first_epoch: f64,
    last_epoch: f64,
    ap: f64,
}

fn train_and_eval(mode: QueryMode, seed: u64) -> TrainedRun {
    let mut cfg = RunConfig { seed, ..RunConfig::default() };
    cfg.model.query_mode = mode;
    let out = train(&cfg, None, |_, _| {}).unwrap();
    let ev = evaluate(&out.model, &cfg.data, cfg.data.eval_indices()).unwrap();
    TrainedRun { first_epoch: out.epoch_means[0], last_epoch: *out.epoch_means.last().unwrap(), ap: ev.ap }
}

fn default_ipit_run() -> &'static TrainedRun {
    static RUN: OnceLock<TrainedRun> = OnceLock::new();
    RUN.get_or_init(|| train_and_eval(QueryMode::IpIt, 0))
}

#[test]
fn c07_toy_training_learns() {
    let _g = serial();
    let cfg = RunConfig::default();
    let m = &cfg.model;
    assert_eq!((m.d, m.n_enc, m.n_dec, m.num_queries), (64, 2, 2, 25));
    assert_eq!((m.attention, m.query_mode, m.content_init), (AttentionKind::Hv, QueryMode::IpIt, ContentInit::FromBox));
    assert_eq!(m.anchors.0, vec![[0.1, 0.1], [0.2, 0.2], [0.4, 0.4]]);
    assert_eq!(cfg.data, DatasetSpec::default());
    assert_eq!(cfg.optim.epochs, 10);

    let start = std::time::Instant::now();
    let run = default_ipit_run();
    let random = random_box_ap(&cfg.data, cfg.data.eval_indices(), m.num_queries, cfg.seed).unwrap();
    let drop = 1.0 - run.last_epoch / run.first_epoch;
    let ratio = run.ap / random;
    let pass = drop >= 0.5 && ratio >= 10.0;
    let detail = format!(
        "epoch loss {:.3} -> {:.3} (drop {:.1}%, need 50%), AP@0.5 {:.4} vs random {:.5} (x{ratio:.1}, need 10), {:.0}s",
        run.first_epoch,
        run.last_epoch,
        100.0 * drop,
        run.ap,
        random,
        start.elapsed().as_secs_f64()
    );
    report(7, "toy training", pass, &detail);
}

#[test]
fn c08_content_queries_beat_random_boxes() {
    let _g = serial();
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..3 {
        let ipit = if seed == 0 { default_ipit_run().ap } else { train_and_eval(QueryMode::IpIt, seed).ap };
        let rb = train_and_eval(QueryMode::Rb, seed).ap;
        if ipit >= rb {
            wins += 1;
        }
        lines.push(format!("seed {seed}: ip+it {ipit:.4} rb {rb:.4}"));
    }
    report(8, "ablation trend", wins >= 2, &format!("ip+it >= rb in {wins}/3 ({})", lines.join("; ")));
}

#[test]
fn c09_attention_weights_are_distributions() {
    let _g = serial();
    let mut rng = XorShift64Star::new(9);
    let mut lines = Vec::new();
    let mut pass = true;
    for kind in AttentionKind::ALL {
        let mut worst: f64 = 0.0;
        let mut negative = false;
        for i in 0..100 {
            let heads = [1, 2, 4][rng.range_inclusive(0, 2)];
            let d = heads * 4 * rng.range_inclusive(1, 3);
            let (h, w) = (rng.range_inclusive(1, 8), rng.range_inclusive(1, 8));
            let flags = match rng.range_inclusive(0, 2) {
                0 => BranchFlags { row: true, col: false },
                1 => BranchFlags { row: false, col: true },
                _ => BranchFlags::default(),
            };
            let mut store = ParamStore::new();
            let mut init = Init::new(1000 + i);
            let spec = AttentionSpec { flags, ..AttentionSpec::new(kind, d, heads) };
            let params = AttentionParams::new(&mut store, &mut init, "a", spec).unwrap();
            let x = FeatureMap::new(init.normal(&[d, h, w], rng.uniform(0.1, 10.0))).unwrap();
            let out = match kind {
                AttentionKind::Global => global_attention(&store, &params, &x, Some(&grid_pe(h, w, d, DEFAULT_TEMPERATURE).unwrap())),
                AttentionKind::Hv => hv_attention(&store, &params, &x, None, None),
                AttentionKind::Cc => cc_attention(&store, &params, &x, None),
            }
            .unwrap();
            worst = worst.max(out.weights.max_sum_error());
            negative |= out.weights.min_weight() < 0.0;
        }
        pass &= worst < 1e-6 && !negative;
        lines.push(format!("{} {worst:.1e}", kind.name()));
    }
    report(9, "softmax invariants", pass, &format!("max |sum - 1| per kind: {}", lines.join(", ")));
}

#[test]
fn c10_serialization_round_trips() {
    let _g = serial();
    let model = Model::new(RunConfig::default().model, 4).unwrap();
    let once = checkpoint::to_bytes(&model).unwrap();
    let twice = checkpoint::to_bytes(&checkpoint::read(&once[..]).unwrap()).unwrap();
    let ckpt_ok = once == twice;

    let spec = DatasetSpec { train_scenes: 40, eval_scenes: 10, seed: 11, ..DatasetSpec::default() };
    let scenes = generate_scenes(&spec, 0..spec.scene_count());
    let again = generate_scenes(&spec, 0..spec.scene_count());
    let mut a = Vec::new();
    write_dataset(&mut a, &spec, &scenes).unwrap();
    let mut b = Vec::new();
    write_dataset(&mut b, &spec, &again).unwrap();
    let (spec2, read_back) = read_dataset(&a[..]).unwrap();
    let mut c = Vec::new();
    write_dataset(&mut c, &spec2, &read_back).unwrap();
    let data_ok = a == b && a == c && scenes == read_back;
    let detail = format!("checkpoint {} bytes identical: {ckpt_ok}; dataset {} bytes regenerated and re-read identically: {data_ok}", once.len(), a.len());
    report(10, "serialization", ckpt_ok && data_ok, &detail);
}
