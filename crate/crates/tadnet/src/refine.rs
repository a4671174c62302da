//! Fake-proposal generation and the boundary-regression refinement head.
//!
//! Each GT of duration w spawns fakes by offsetting each boundary by
//! {0, +-w/8, +-w/6, +-w/4}; the 7x7 mode grid gives 49 fakes per GT.
//! Offsets are fractions of the GT duration, applied per boundary.

use crate::cls_head::roi_positions;
use crate::domain::{iou, GroundTruth, ModelConfig, Proposal, Segment};
use crate::graph::{Graph, Vid};
use crate::model::{Binding, Init, Params};
use crate::tensor::Tensor;

/// Per-boundary offset fractions: zero first, then increasing magnitude,
/// positive before negative.
pub const OFFSET_MODES: [f64; 7] = [
    0.0,
    1.0 / 8.0,
    -1.0 / 8.0,
    1.0 / 6.0,
    -1.0 / 6.0,
    1.0 / 4.0,
    -1.0 / 4.0,
];

/// Proposals to refine plus regression targets; `None` target means the
/// proposal does not contribute to the refinement loss.
pub struct RefinementBatch {
    pub proposals: Vec<Proposal>,
    pub targets: Vec<Option<(f64, f64)>>,
    /// Count of real (non-fake) proposals at the front of the list.
    pub real_count: usize,
}

fn fake_from_mode(gt: Segment, s_off: f64, e_off: f64, l_s: f64) -> Option<Segment> {
    let w = gt.duration();
    Segment::clamped(gt.start() + s_off * w, gt.end() + e_off * w, l_s)
}

/// Exactly `count` fake proposals, cycling modes (start-mode-major,
/// (0,0) first) round-robin over GTs, clamped to [0, l_s], degenerate
/// results discarded.
pub fn generate_fake_proposals(gts: &[GroundTruth], count: usize, l_s: f64) -> Vec<Proposal> {
    assert!(!gts.is_empty(), "fake proposals require ground truth");
    let mut out = Vec::with_capacity(count);
    let mut mode = 0usize;
    let mut dry_cycle = 0usize;
    let total_modes = OFFSET_MODES.len() * OFFSET_MODES.len();
    while out.len() < count {
        let s_off = OFFSET_MODES[mode / OFFSET_MODES.len()];
        let e_off = OFFSET_MODES[mode % OFFSET_MODES.len()];
        let before = out.len();
        for gt in gts {
            if out.len() >= count {
                break;
            }
            if let Some(seg) = fake_from_mode(gt.segment, s_off, e_off, l_s) {
                out.push(Proposal::new(seg, 0.0));
            }
        }
        dry_cycle = if out.len() == before { dry_cycle + 1 } else { 0 };
        if dry_cycle >= total_modes {
            // every mode degenerate: fall back to clamped GT copies with a
            // minimal jitter so the batch is still full
            for gt in gts.iter().cycle() {
                if out.len() >= count {
                    break;
                }
                let w = gt.segment.duration().max(1e-3);
                let seg = Segment::clamped(gt.segment.start(), gt.segment.start() + w / 8.0, l_s)
                    .unwrap_or_else(|| Segment::new(0.0, l_s.max(1e-3)).unwrap());
                out.push(Proposal::new(seg, 0.0));
            }
            break;
        }
        mode = (mode + 1) % total_modes;
    }
    out
}

/// start' = start + ds*w, end' = end + de*w, clamped; falls back to the
/// original segment when the refined interval inverts.
pub fn apply_refinement(p: &Proposal, deltas: (f64, f64), l_s: f64) -> Segment {
    let w = p.segment.duration();
    match Segment::clamped(
        p.segment.start() + deltas.0 * w,
        p.segment.end() + deltas.1 * w,
        l_s,
    ) {
        Some(seg) => seg,
        None => p.segment,
    }
}

/// Top-mu real proposals plus K-mu fakes (training) or all K real
/// (inference / fake-proposal ablation). `proposals` must be sorted by
/// confidence descending.
pub fn build_refinement_batch(
    proposals: &[Proposal],
    gts: &[GroundTruth],
    cfg: &ModelConfig,
    training: bool,
) -> RefinementBatch {
    let l_s = cfg.l_shared() as f64;
    let mut list: Vec<Proposal>;
    let real_count;
    if training && cfg.use_fake_proposals && !gts.is_empty() {
        let mu = cfg.mu.min(proposals.len());
        list = proposals[..mu].to_vec();
        real_count = mu;
        list.extend(generate_fake_proposals(gts, cfg.k - mu, l_s));
    } else {
        list = proposals[..cfg.k.min(proposals.len())].to_vec();
        real_count = list.len();
    }
    let targets = list
        .iter()
        .map(|p| {
            if gts.is_empty() {
                return None;
            }
            let (best, gi) = gts.iter().enumerate().fold((f64::NEG_INFINITY, 0), |acc, (i, gt)| {
                let v = iou(p.segment, gt.segment);
                if v > acc.0 {
                    (v, i)
                } else {
                    acc
                }
            });
            if best >= cfg.tau2 {
                let w = p.segment.duration();
                let gt = gts[gi].segment;
                Some(((gt.start() - p.segment.start()) / w, (gt.end() - p.segment.end()) / w))
            } else {
                None
            }
        })
        .collect();
    RefinementBatch { proposals: list, targets, real_count }
}

pub fn init_params(cfg: &ModelConfig, params: &mut Params, init: &mut Init) {
    let c = cfg.c_h;
    for i in 0..2 {
        params.add(&format!("ref.c{i}.w"), init.conv(c, c, 3), true);
        params.add(&format!("ref.c{i}.b"), Tensor::zeros(&[c]), false);
    }
    let flat = (cfg.t / 4) * c;
    params.add("ref.out.w", init.gaussian(&[flat, 2], 0.01), true);
    params.add("ref.out.b", Tensor::zeros(&[2]), false);
}

/// ROI over each proposal extended by 0.5w of context per side, small
/// conv stack, linear head predicting (dstart/w, dend/w). Output K x 2.
pub fn refine_forward(
    g: &mut Graph,
    bind: &Binding,
    cfg: &ModelConfig,
    shared: Vid,
    proposals: &[Proposal],
) -> Vid {
    let rows: Vec<Vid> = proposals
        .iter()
        .map(|p| {
            let w = p.segment.duration();
            let ext = Segment::new(
                (p.segment.start() - 0.5 * w).max(0.0).min(p.segment.end() + 0.5 * w - 1e-9),
                p.segment.end() + 0.5 * w,
            )
            .expect("extended span");
            let mut x = g.interp_cols(shared, &roi_positions(ext, cfg.t));
            for i in 0..2 {
                let y = g.conv1d(
                    x,
                    bind.vid(&format!("ref.c{i}.w")),
                    bind.vid(&format!("ref.c{i}.b")),
                    2,
                    1,
                );
                x = g.relu(y);
            }
            let (c, t) = (g.value(x).rows(), g.value(x).cols());
            let flat = g.transpose(x);
            let row = g.reshape(flat, vec![1, c * t]);
            g.linear(row, bind.vid("ref.out.w"), bind.vid("ref.out.b"))
        })
        .collect();
    let mut out = rows[0];
    for &r in &rows[1..] {
        out = g.concat_rows(out, r);
    }
    out
}
