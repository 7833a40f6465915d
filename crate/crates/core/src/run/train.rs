//! Training loop over seeded synthetic scenes with a per-step loss log.

use std::io::Write;

use super::optim::{clip_grad_norm, AdamW};
use super::RunConfig;
use crate::error::{Error, Result};
use crate::model::{objective, ForwardOptions, Model, STEM_PREFIX};
use crate::numerics::rng::{splitmix64, XorShift64Star};
use crate::numerics::GradRecord;
use crate::synthdata::generate_scene;

const SHUFFLE_SALT: u64 = 0x5348_5546;
const DROPOUT_SALT: u64 = 0x4452_4f50;

pub const LOG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    /// Batch means; `l_init` is absent without candidate supervision.
    pub l_init: Option<f64>,
    pub layers: Vec<f64>,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub steps: Vec<StepLog>,
    /// Mean total loss of every epoch.
    pub epoch_means: Vec<f64>,
}

/// Training scene order of `epoch`: a seeded Fisher-Yates shuffle.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = XorShift64Star::for_stream(seed ^ SHUFFLE_SALT, epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.range_inclusive(0, i));
    }
    order
}

pub fn lr_scale(cfg: &RunConfig, epoch: usize) -> f64 {
    if epoch >= cfg.optim.lr_drop_epoch {
        cfg.optim.lr_drop_factor
    } else {
        1.0
    }
}

pub fn log_header(cfg: &RunConfig) -> Result<String> {
    let layers: Vec<String> = (0..cfg.model.n_dec).map(|i| format!("l_dec_layer{i}")).collect();
    Ok(format!(
        "# schema_version={LOG_SCHEMA_VERSION}\n# config_sha256={}\nstep,epoch,l_init,{},total,lr\n",
        cfg.hash()?,
        layers.join(",")
    ))
}

fn write_row(out: &mut dyn Write, s: &StepLog) -> std::io::Result<()> {
    let init = s.l_init.map(|v| format!("{v:e}")).unwrap_or_default();
    let layers: Vec<String> = s.layers.iter().map(|v| format!("{v:e}")).collect();
    writeln!(out, "{},{},{init},{},{:e},{:e}", s.step, s.epoch, layers.join(","), s.total, s.lr)
}

/// Trains a fresh model for `cfg.optim.epochs` epochs. Every step is
/// appended to `log` when given; `on_epoch(epoch, mean_loss)` runs after
/// each epoch. A non-finite loss stops training with an error.
pub fn train(cfg: &RunConfig, mut log: Option<&mut dyn Write>, mut on_epoch: impl FnMut(usize, f64)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let mut opt = AdamW::new(&model.store, cfg.optim.weight_decay);
    if let Some(out) = log.as_deref_mut() {
        out.write_all(log_header(cfg)?.as_bytes())?;
    }
    let n = cfg.data.train_scenes;
    let batch = cfg.optim.batch_size;
    let mut steps = Vec::new();
    let mut epoch_means = Vec::with_capacity(cfg.optim.epochs);
    let mut seen = 0u64;
    for epoch in 0..cfg.optim.epochs {
        let order = epoch_order(cfg.seed, epoch, n);
        let scale = lr_scale(cfg, epoch);
        let mut epoch_sum = 0.0;
        for chunk in order.chunks(batch) {
            let mut sum: Option<Vec<GradRecord>> = None;
            let mut init_sum = 0.0;
            let mut layer_sum = vec![0.0; cfg.model.n_dec];
            let mut total_sum = 0.0;
            let mut has_init = false;
            for &idx in chunk {
                let scene = generate_scene(&cfg.data, idx);
                let mut t = crate::numerics::Tape::new();
                let opts = ForwardOptions { dropout_seed: Some(splitmix64(cfg.seed ^ DROPOUT_SALT) ^ seen), frozen_selection: None };
                seen += 1;
                let pass = model.forward(&mut t, &scene.image, &opts)?;
                let obj = objective(&mut t, &model.net, &pass, &scene.objects, None)?;
                let total = obj.report.total;
                if !total.is_finite() {
                    return Err(Error::NonFinite(format!("step {}: loss {total} on scene {idx}", steps.len())));
                }
                if let Some(i) = obj.report.init {
                    init_sum += i.total;
                    has_init = true;
                }
                layer_sum.iter_mut().zip(&obj.report.layers).for_each(|(a, l)| *a += l.total);
                total_sum += total;
                let grads = t.backward(obj.total).param_grads(&t, &model.store);
                match sum.as_mut() {
                    None => sum = Some(grads),
                    Some(acc) => acc.iter_mut().zip(grads).for_each(|(a, g)| a.grad.data_mut().iter_mut().zip(g.grad.data()).for_each(|(x, y)| *x += y)),
                }
            }
            let b = chunk.len() as f64;
            let mut grads = sum.expect("chunks are non-empty");
            grads.iter_mut().for_each(|g| g.grad.data_mut().iter_mut().for_each(|v| *v /= b));
            let norm = clip_grad_norm(&mut grads, cfg.optim.grad_clip);
            if !norm.is_finite() {
                return Err(Error::NonFinite(format!("step {}: gradient norm {norm}", steps.len())));
            }
            let (lr, backbone_lr) = (cfg.optim.lr * scale, cfg.optim.backbone_lr * scale);
            opt.step(&mut model.store, &grads, |name| if name.starts_with(STEM_PREFIX) { backbone_lr } else { lr });
            let row = StepLog {
                step: steps.len(),
                epoch,
                l_init: has_init.then_some(init_sum / b),
                layers: layer_sum.iter().map(|v| v / b).collect(),
                total: total_sum / b,
                lr,
            };
            if let Some(out) = log.as_deref_mut() {
                write_row(out, &row)?;
            }
            epoch_sum += row.total;
            steps.push(row);
        }
        let mean = epoch_sum / order.len().div_ceil(batch).max(1) as f64;
        epoch_means.push(mean);
        on_epoch(epoch, mean);
    }
    if let Some(out) = log.as_deref_mut() {
        out.flush()?;
    }
    Ok(TrainOutcome { model, steps, epoch_means })
}
