//! The multi-task objective: TEM boundary loss, PEM map losses,
//! refinement regression, focal classification, and L2 regularization.
//!
//! total = tem_bcls + lambda1 * pem_bcls + lambda2 * pem_loc
//!       + r_loc + gamma * r_cls + lambda_reg * l2

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{iou, GroundTruth, ModelConfig};
use crate::graph::{Graph, Vid};
use crate::model::{Binding, Params};
use crate::proposal_gen::BmCells;
use crate::tensor::Tensor;

/// Positive-cell IoU threshold for the PEM classification target.
pub const PEM_CLS_POS_IOU: f64 = 0.8;
/// Band edges for PEM regression cell balancing.
pub const PEM_REG_HIGH: f64 = 0.6;
pub const PEM_REG_LOW: f64 = 0.2;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub tem_bcls: f64,
    pub pem_bcls: f64,
    pub pem_loc: f64,
    pub r_loc: f64,
    pub r_cls: f64,
    pub l2_reg: f64,
}

impl LossReport {
    /// Add `scale * other` componentwise (batch averaging).
    pub fn accumulate(&mut self, other: &LossReport, scale: f64) {
        self.total += scale * other.total;
        self.tem_bcls += scale * other.tem_bcls;
        self.pem_bcls += scale * other.pem_bcls;
        self.pem_loc += scale * other.pem_loc;
        self.r_loc += scale * other.r_loc;
        self.r_cls += scale * other.r_cls;
        self.l2_reg += scale * other.l2_reg;
    }
}

/// Scalar tape nodes for each component plus the assembled total.
pub struct LossVids {
    pub total: Vid,
    pub tem_bcls: Vid,
    pub pem_bcls: Vid,
    pub pem_loc: Vid,
    pub r_loc: Vid,
    pub r_cls: Vid,
    pub l2_reg: Vid,
}

impl LossVids {
    pub fn report(&self, g: &Graph) -> LossReport {
        LossReport {
            total: g.value(self.total).item(),
            tem_bcls: g.value(self.tem_bcls).item(),
            pem_bcls: g.value(self.pem_bcls).item(),
            pem_loc: g.value(self.pem_loc).item(),
            r_loc: g.value(self.r_loc).item(),
            r_cls: g.value(self.r_cls).item(),
            l2_reg: g.value(self.l2_reg).item(),
        }
    }
}

/// Class-balanced binary logistic loss (BMN convention): positives
/// weighted 0.5 n/n+, negatives 0.5 n/n-. Falls back to the unweighted
/// form when one class is absent.
pub fn weighted_binary_logistic(g: &mut Graph, pred: Vid, targets: &[f64]) -> Vid {
    let n = targets.len();
    assert_eq!(g.value(pred).numel(), n);
    let n_pos = targets.iter().filter(|&&t| t > 0.5).count();
    let n_neg = n - n_pos;
    let (cp, cn) = if n_pos == 0 || n_neg == 0 {
        (1.0, 1.0)
    } else {
        (0.5 * n as f64 / n_pos as f64, 0.5 * n as f64 / n_neg as f64)
    };
    let shape = g.value(pred).shape.clone();
    let wp = Tensor::new(
        targets.iter().map(|&t| if t > 0.5 { cp } else { 0.0 }).collect(),
        shape.clone(),
    );
    let wn = Tensor::new(
        targets.iter().map(|&t| if t > 0.5 { 0.0 } else { cn }).collect(),
        shape,
    );
    let wp = g.constant(wp);
    let wn = g.constant(wn);
    let ln_p = g.ln_clamped(pred, 1e-12);
    let neg = g.scale(pred, -1.0);
    let one_minus = g.add_scalar(neg, 1.0);
    let ln_q = g.ln_clamped(one_minus, 1e-12);
    let tp = g.mul(wp, ln_p);
    let tn = g.mul(wn, ln_q);
    let s = g.add(tp, tn);
    let total = g.sum(s);
    g.scale(total, -1.0 / n as f64)
}

/// TEM boundary targets: a location is positive when it lies within
/// max(duration/10, 1 clip) of a GT start (resp. end).
pub fn tem_targets(gts: &[GroundTruth], l_s: usize) -> (Vec<f64>, Vec<f64>) {
    let mut start = vec![0.0; l_s];
    let mut end = vec![0.0; l_s];
    for gt in gts {
        let radius = (gt.segment.duration() / 10.0).max(1.0);
        for (boundary, out) in [(gt.segment.start(), &mut start), (gt.segment.end(), &mut end)] {
            for (i, slot) in out.iter_mut().enumerate() {
                if (i as f64 - boundary).abs() <= radius {
                    *slot = 1.0;
                }
            }
        }
    }
    (start, end)
}

/// Per-cell best IoU against the ground truth set.
pub fn bm_iou_targets(cells: &BmCells, gts: &[GroundTruth]) -> Vec<f64> {
    cells
        .cells
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let seg = cells.segment(i);
            gts.iter()
                .map(|gt| iou(seg, gt.segment))
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Binary PEM classification targets from the IoU map.
pub fn pem_cls_targets(iou_targets: &[f64]) -> Vec<f64> {
    iou_targets
        .iter()
        .map(|&v| if v > PEM_CLS_POS_IOU { 1.0 } else { 0.0 })
        .collect()
}

/// L2 regression to IoU targets with band-balanced cell selection:
/// every high-IoU cell, mid and low bands subsampled (seeded) to about
/// the high-cell count. Mean over the selected cells.
pub fn pem_loc_loss(g: &mut Graph, reg: Vid, iou_targets: &[f64], rng: &mut ChaCha8Rng) -> Vid {
    let n = iou_targets.len();
    assert_eq!(g.value(reg).numel(), n);
    let n_high = iou_targets.iter().filter(|&&v| v > PEM_REG_HIGH).count();
    let n_mid = iou_targets
        .iter()
        .filter(|&&v| v > PEM_REG_LOW && v <= PEM_REG_HIGH)
        .count();
    let n_low = n - n_high - n_mid;
    let p_mid = if n_mid > 0 { (n_high as f64 / n_mid as f64).min(1.0) } else { 0.0 };
    let p_low = if n_low > 0 { (n_high as f64 / n_low as f64).min(1.0) } else { 0.0 };
    let mut mask = vec![0.0; n];
    let mut selected = 0usize;
    for (i, &v) in iou_targets.iter().enumerate() {
        let keep = if v > PEM_REG_HIGH {
            true
        } else if v > PEM_REG_LOW {
            rng.gen::<f64>() < p_mid
        } else {
            rng.gen::<f64>() < p_low
        };
        if keep {
            mask[i] = 1.0;
            selected += 1;
        }
    }
    if selected == 0 {
        mask.iter_mut().for_each(|m| *m = 1.0);
        selected = n;
    }
    let shape = g.value(reg).shape.clone();
    let t = g.constant(Tensor::new(iou_targets.to_vec(), shape.clone()));
    let w = g.constant(Tensor::new(mask, shape));
    let diff = g.sub(reg, t);
    let sq = g.mul(diff, diff);
    let weighted = g.mul(w, sq);
    let s = g.sum(weighted);
    g.scale(s, 1.0 / selected as f64)
}

/// Softmax focal loss against soft labels, normalized by 1/(2M):
/// L = (1/2M) sum_i sum_c y * (1-p)^gamma * (-ln p).
pub fn focal_cls_loss(g: &mut Graph, logits: Vid, soft_labels: &Tensor, focusing: f64, m: usize) -> Vid {
    assert_eq!(g.value(logits).shape, soft_labels.shape);
    let p = g.softmax_rows(logits);
    let neg = g.scale(p, -1.0);
    let one_minus = g.add_scalar(neg, 1.0);
    let focus = g.powf(one_minus, focusing);
    let ln_p = g.ln_clamped(p, 1e-12);
    let y = g.constant(soft_labels.clone());
    let a = g.mul(y, focus);
    let b = g.mul(a, ln_p);
    let s = g.sum(b);
    g.scale(s, -1.0 / (2 * m) as f64)
}

/// Smooth-L1 over normalized offsets, mean over contributing
/// coordinates. Returns (loss, contributed).
pub fn refinement_loc_loss(
    g: &mut Graph,
    pred: Vid,
    targets: &[Option<(f64, f64)>],
) -> (Vid, bool) {
    let k = targets.len();
    assert_eq!(g.value(pred).shape, vec![k, 2]);
    let mut tvals = vec![0.0; 2 * k];
    let mut mask = vec![0.0; 2 * k];
    let mut count = 0usize;
    for (i, t) in targets.iter().enumerate() {
        if let Some((ds, de)) = t {
            tvals[2 * i] = *ds;
            tvals[2 * i + 1] = *de;
            mask[2 * i] = 1.0;
            mask[2 * i + 1] = 1.0;
            count += 2;
        }
    }
    if count == 0 {
        return (g.constant(Tensor::scalar(0.0)), false);
    }
    let t = g.constant(Tensor::matrix(k, 2, tvals));
    let w = g.constant(Tensor::matrix(k, 2, mask));
    let diff = g.sub(pred, t);
    let h = g.smooth_l1(diff);
    let masked = g.mul(w, h);
    let s = g.sum(masked);
    (g.scale(s, 1.0 / count as f64), true)
}

/// Tape-side sum of squares over decaying parameters.
pub fn l2_param_sum(g: &mut Graph, bind: &Binding, params: &Params) -> Vid {
    let mut acc: Option<Vid> = None;
    for (i, decay) in params.decay.iter().enumerate() {
        if !decay {
            continue;
        }
        let p = bind.ids[i];
        let sq = g.mul(p, p);
        let s = g.sum(sq);
        acc = Some(match acc {
            Some(a) => g.add(a, s),
            None => s,
        });
    }
    acc.unwrap_or_else(|| g.constant(Tensor::scalar(0.0)))
}

/// Weighted assembly of the full objective.
pub fn total_loss(
    g: &mut Graph,
    cfg: &ModelConfig,
    tem_bcls: Vid,
    pem_bcls: Vid,
    pem_loc: Vid,
    r_loc: Vid,
    r_cls: Vid,
    l2_reg: Vid,
) -> LossVids {
    let a = g.scale(pem_bcls, cfg.lambda1);
    let b = g.scale(pem_loc, cfg.lambda2);
    let c = g.scale(r_cls, cfg.gamma);
    let d = g.scale(l2_reg, cfg.lambda_reg);
    let mut total = g.add(tem_bcls, a);
    total = g.add(total, b);
    total = g.add(total, r_loc);
    total = g.add(total, c);
    total = g.add(total, d);
    LossVids { total, tem_bcls, pem_bcls, pem_loc, r_loc, r_cls, l2_reg }
}
