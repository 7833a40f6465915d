//! Candidate-site and per-layer set losses on a forward pass.

use serde::{Deserialize, Serialize};

use super::{ForwardPass, Network};
use crate::error::{dim_err, Result};
use crate::loss::{cost_matrix, match_costs, site_loss, Box4, GroundTruthObject, LossBreakdown};
use crate::numerics::{Tape, Var};

/// Discrete choices of one forward pass. Replaying them holds the loss
/// surface fixed under small parameter changes.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decisions {
    pub selected: Vec<usize>,
    /// Candidate matched to each ground truth; empty without candidates.
    pub init_match: Vec<usize>,
    /// Per decoder layer, the query matched to each ground truth.
    pub layer_matches: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub init: Option<LossBreakdown>,
    pub layers: Vec<LossBreakdown>,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct Objective {
    pub total: Var,
    pub report: LossReport,
    pub decisions: Decisions,
}

fn rows4(data: &[f64]) -> Vec<Box4> {
    data.chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect()
}

fn matching(frozen: Option<&Vec<usize>>, boxes: &[Box4], gts: &[GroundTruthObject], prob_of: impl Fn(usize, &GroundTruthObject) -> f64) -> Result<Vec<usize>> {
    if let Some(m) = frozen {
        if m.len() != gts.len() || m.iter().any(|&j| j >= boxes.len()) {
            return Err(dim_err!("frozen matching does not fit {} ground truths and {} predictions", gts.len(), boxes.len()));
        }
        return Ok(m.clone());
    }
    let cost = cost_matrix(boxes, gts, prob_of)?;
    Ok(match_costs(&cost, gts.len(), boxes.len())?.assignment)
}

/// `L_init` over every candidate (content modes) plus the loss of every
/// decoder layer, summed without normalization.
pub fn objective(t: &mut Tape, net: &Network, pass: &ForwardPass, gts: &[GroundTruthObject], frozen: Option<&Decisions>) -> Result<Objective> {
    let mut decisions = Decisions { selected: pass.queries.selected.clone(), ..Default::default() };
    let mut sites = Vec::new();
    let mut init = None;
    if let Some(c) = &pass.queries.candidates {
        let probs = t.value(c.probs).data().to_vec();
        let boxes = rows4(t.value(c.boxes).data());
        let m = matching(frozen.map(|f| &f.init_match), &boxes, gts, |j, _| probs[j])?;
        let mut targets = vec![0.0; probs.len()];
        m.iter().for_each(|&j| targets[j] = 1.0);
        let s = site_loss(t, c.probs, &targets, c.boxes, gts, &m);
        init = Some(s.breakdown);
        sites.push(s.total);
        decisions.init_match = m;
    }
    let cols = net.config.num_classes + 1;
    let mut layers = Vec::with_capacity(pass.layers.len());
    for (li, layer) in pass.layers.iter().enumerate() {
        let p = t.sigmoid(layer.logits);
        let probs = t.value(p).data().to_vec();
        let boxes = rows4(t.value(layer.boxes).data());
        if let Some(g) = gts.iter().find(|g| g.class_id >= net.config.num_classes) {
            return Err(dim_err!("ground-truth class {} is outside the {} model classes", g.class_id, net.config.num_classes));
        }
        let m = matching(frozen.and_then(|f| f.layer_matches.get(li)), &boxes, gts, |j, g| probs[j * cols + g.class_id])?;
        let mut targets = vec![0.0; probs.len()];
        for j in 0..boxes.len() {
            targets[j * cols + cols - 1] = 1.0;
        }
        for (g, &j) in gts.iter().zip(&m) {
            targets[j * cols + cols - 1] = 0.0;
            targets[j * cols + g.class_id] = 1.0;
        }
        let s = site_loss(t, p, &targets, layer.boxes, gts, &m);
        layers.push(s.breakdown);
        sites.push(s.total);
        decisions.layer_matches.push(m);
    }
    let mut total = sites[0];
    for &s in &sites[1..] {
        total = t.add(total, s);
    }
    let report = LossReport { init, layers, total: t.value(total).item() };
    Ok(Objective { total, report, decisions })
}
