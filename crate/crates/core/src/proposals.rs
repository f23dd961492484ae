//! Class-agnostic proposals: the query decoder's outputs, set matching against
//! ground truth, and the box loss.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::boxes::{self, BoxCxcywh, BoxXyxy};
use crate::checkpoint::ParamSet;
use crate::encoders::PatchGrid;
use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BoxCxcywh,
    pub objectness: f64,
}

impl Proposal {
    pub fn validate(&self) -> Result<()> {
        let b = self.bbox;
        let ok = b.w > 0.0
            && b.w <= 1.0
            && b.h > 0.0
            && b.h <= 1.0
            && (0.0..=1.0).contains(&b.cx)
            && (0.0..=1.0).contains(&b.cy)
            && (0.0..=1.0).contains(&self.objectness);
        if ok {
            Ok(())
        } else {
            Err(Error::arg(format!("invalid proposal {self:?}")))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(query, target)` pairs sorted by query index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_queries: Vec<usize>,
}

impl MatchResult {
    pub fn matched_queries(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.0).collect()
    }

    pub fn matched_targets(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.1).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub num_queries: usize,
    pub num_layers: usize,
    /// 1-based layer whose state feeds query-conditioned classification.
    pub split_layer: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { num_queries: 100, num_layers: 6, split_layer: 2, hidden_dim: 256, num_heads: 8, ffn_dim: 1024 }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_queries == 0 {
            return Err(Error::arg("num_queries must be at least 1"));
        }
        if self.split_layer == 0 || self.split_layer > self.num_layers {
            return Err(Error::arg(format!(
                "split_layer {} outside 1..={}",
                self.split_layer, self.num_layers
            )));
        }
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(Error::arg(format!(
                "hidden_dim {} not divisible by {} heads",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.ffn_dim == 0 {
            return Err(Error::arg("ffn_dim must be positive"));
        }
        Ok(())
    }
}

/// `(w_obj, w_l1, w_giou)`; used both as matching cost and as loss weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoxWeights {
    pub obj: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for BoxWeights {
    fn default() -> Self {
        BoxWeights { obj: 2.0, l1: 5.0, giou: 2.0 }
    }
}

impl BoxWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.obj, self.l1, self.giou].iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::arg(format!("box weights must be nonnegative, got {self:?}")));
        }
        Ok(())
    }
}

/// Minimum-cost assignment of rows to columns. Every row is assigned when
/// `rows <= cols` and every column otherwise. Returns `(row, col)` pairs
/// sorted by row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    if m == 0 {
        return Vec::new();
    }
    if n > m {
        let t: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| cost[i][j]).collect()).collect();
        let mut pairs: Vec<(usize, usize)> = hungarian(&t).into_iter().map(|(j, i)| (i, j)).collect();
        pairs.sort_unstable();
        return pairs;
    }
    // Potentials formulation over 1-based indices; column 0 is a sentinel.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    pairs
}

fn l1_cxcywh(a: &BoxCxcywh, b: &BoxCxcywh) -> f64 {
    a.to_array().iter().zip(b.to_array()).map(|(x, y)| (x - y).abs()).sum()
}

/// `cost[q][t] = w_obj·(1 − objectness) + w_l1·L1 + w_giou·(1 − GIoU)`.
pub fn matching_cost(proposals: &[Proposal], targets: &[BoxXyxy], w: &BoxWeights) -> Vec<Vec<f64>> {
    let tc: Vec<BoxCxcywh> = targets.iter().map(BoxXyxy::to_cxcywh).collect();
    proposals
        .iter()
        .map(|p| {
            let pb = p.bbox.to_xyxy();
            targets
                .iter()
                .zip(&tc)
                .map(|(t, tcx)| {
                    w.obj * (1.0 - p.objectness) + w.l1 * l1_cxcywh(&p.bbox, tcx) + w.giou * (1.0 - boxes::giou(&pb, t))
                })
                .collect()
        })
        .collect()
}

pub fn bipartite_match(proposals: &[Proposal], targets: &[BoxXyxy], w: &BoxWeights) -> MatchResult {
    let pairs = if targets.is_empty() { Vec::new() } else { hungarian(&matching_cost(proposals, targets, w)) };
    let mut matched = vec![false; proposals.len()];
    for &(q, _) in &pairs {
        matched[q] = true;
    }
    let unmatched_queries = (0..proposals.len()).filter(|&q| !matched[q]).collect();
    MatchResult { pairs, unmatched_queries }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxLoss {
    /// Mean BCE of objectness over all queries.
    pub obj: f64,
    /// L1 over the 4 box coordinates, averaged over matched pairs.
    pub l1: f64,
    /// Mean `1 − GIoU` over matched pairs.
    pub giou: f64,
    /// `w_obj·obj + w_l1·l1 + w_giou·giou`.
    pub total: f64,
}

fn bce_prob(p: f64, target: f64) -> f64 {
    let lp = if p > 0.0 { p.ln() } else { f64::NEG_INFINITY };
    let lq = if p < 1.0 { (1.0 - p).ln() } else { f64::NEG_INFINITY };
    let a = if target > 0.0 { -target * lp } else { 0.0 };
    let b = if target < 1.0 { -(1.0 - target) * lq } else { 0.0 };
    a + b
}

/// Box loss from detached proposal values.
pub fn box_loss(proposals: &[Proposal], targets: &[BoxXyxy], m: &MatchResult, w: &BoxWeights) -> BoxLoss {
    let mut obj_t = vec![0.0; proposals.len()];
    for &(q, _) in &m.pairs {
        obj_t[q] = 1.0;
    }
    let obj = if proposals.is_empty() {
        0.0
    } else {
        proposals.iter().zip(&obj_t).map(|(p, &t)| bce_prob(p.objectness, t)).sum::<f64>() / proposals.len() as f64
    };
    let (mut l1, mut giou) = (0.0, 0.0);
    if !m.pairs.is_empty() {
        for &(q, t) in &m.pairs {
            l1 += l1_cxcywh(&proposals[q].bbox, &targets[t].to_cxcywh());
            giou += 1.0 - boxes::giou(&proposals[q].bbox.to_xyxy(), &targets[t]);
        }
        l1 /= m.pairs.len() as f64;
        giou /= m.pairs.len() as f64;
    }
    BoxLoss { obj, l1, giou, total: w.obj * obj + w.l1 * l1 + w.giou * giou }
}

/// Differentiable box loss. `boxes` is `nq × 4` cxcywh, `obj_logits` `nq × 1`.
/// Returns the weighted total and its detached parts.
pub fn box_loss_tape(
    tape: &mut Tape,
    boxes: Var,
    obj_logits: Var,
    targets: &[BoxXyxy],
    m: &MatchResult,
    w: &BoxWeights,
) -> (Var, BoxLoss) {
    let nq = tape.value(obj_logits).rows();
    let mut obj_t = vec![0.0; nq];
    for &(q, _) in &m.pairs {
        obj_t[q] = 1.0;
    }
    let obj = tape.bce_with_logits(obj_logits, &obj_t);
    let mut parts = BoxLoss { obj: tape.scalar(obj), ..BoxLoss::default() };
    let mut total = tape.scale(obj, w.obj);
    if !m.pairs.is_empty() {
        let qs = m.matched_queries();
        let rows: Vec<Vec<f64>> = m.pairs.iter().map(|&(_, t)| targets[t].to_cxcywh().to_array().to_vec()).collect();
        let tmat = Mat::from_rows(&rows);
        let sel = tape.select_rows(boxes, &qs);
        let tv = tape.constant(tmat.clone());
        let diff = tape.sub(sel, tv);
        let ad = tape.abs(diff);
        let s = tape.sum_all(ad);
        let l1 = tape.scale(s, 1.0 / qs.len() as f64);
        let giou = tape.giou_loss(sel, &tmat);
        parts.l1 = tape.scalar(l1);
        parts.giou = tape.scalar(giou);
        let a = tape.scale(l1, w.l1);
        let b = tape.scale(giou, w.giou);
        let ab = tape.add(a, b);
        total = tape.add(total, ab);
    }
    parts.total = tape.scalar(total);
    (total, parts)
}

/// `(box branch input, cls branch input)`: the last layer's state and the
/// `split_layer`-th state.
pub fn split_branches<T: Clone>(states: &[T], cfg: &DecoderConfig) -> Result<(T, T)> {
    if states.len() != cfg.num_layers {
        return Err(Error::shape(format!("{} decoder states for {} layers", states.len(), cfg.num_layers)));
    }
    if cfg.split_layer == 0 || cfg.split_layer > cfg.num_layers {
        return Err(Error::arg(format!("split_layer {} outside 1..={}", cfg.split_layer, cfg.num_layers)));
    }
    Ok((states[cfg.num_layers - 1].clone(), states[cfg.split_layer - 1].clone()))
}

/// Run the query decoder over a memory grid and read out proposals.
pub fn generate_proposals(memory: &PatchGrid, cfg: &DecoderConfig, params: &ParamSet) -> Result<Vec<Proposal>> {
    cfg.validate()?;
    if !memory.values().is_finite() {
        return Err(Error::arg("decoder memory is not finite"));
    }
    let mut tape = Tape::new();
    let bound = crate::model::Bound::constants(&mut tape, params);
    let mem = tape.constant(memory.values().clone());
    let out = crate::model::decode(&mut tape, &bound, cfg, mem, memory.height(), memory.width())?;
    Ok(crate::model::read_proposals(&tape, out.boxes, out.obj_logits))
}

/// Proposals with objectness above `min_objectness` whose best IoU with every
/// annotation is below `max_iou`, as extra box targets.
pub fn confident_unlabeled(proposals: &[Proposal], annotations: &[BoxXyxy], min_objectness: f64, max_iou: f64) -> Vec<BoxXyxy> {
    proposals
        .iter()
        .filter(|p| p.objectness > min_objectness)
        .map(|p| p.bbox.to_xyxy().clamp_unit())
        .filter(|b| b.area() > 0.0 && annotations.iter().all(|a| boxes::iou(b, a) < max_iou))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ProposalRecord {
    image_id: u64,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    objectness: f64,
}

/// One JSON line per proposal: `{image_id, box: [cx, cy, w, h], objectness}`.
pub fn write_proposal_dump(out: &mut impl Write, image_id: u64, proposals: &[Proposal]) -> Result<()> {
    for p in proposals {
        let rec = ProposalRecord { image_id, bbox: p.bbox.to_array(), objectness: p.objectness };
        serde_json::to_writer(&mut *out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
