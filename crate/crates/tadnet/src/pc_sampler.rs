//! Soft labels over 2M proximity-augmented categories and the ~1:1
//! positive/PC sampling of proposals for the classification head.
//!
//! Label rule, per proposal with best ground-truth IoU `IoU_best`:
//!   - IoU_best >= tau1: one-hot at idx (label of the argmax-IoU GT)
//!   - tau2 <= IoU_best < tau1: alpha*IoU_best at idx, 1 - alpha*IoU_best
//!     at idx + M (the proximity shadow class)
//!   - IoU_best < tau2: one-hot at idy + M, idy from the center-nearest GT
//!
//! alpha*IoU_best is clamped to [0, 1]; ties in argmax IoU and min
//! center distance break toward the earliest GT start.

use crate::domain::{center_distance, iou, GroundTruth, ModelConfig, Proposal};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Positive,
    Pc,
    Padded,
}

/// Sampled proposals with soft labels set, length N.
pub struct LabeledProposalBatch {
    pub proposals: Vec<Proposal>,
    pub origin_flags: Vec<Origin>,
}

impl LabeledProposalBatch {
    /// N x 2M label matrix (zero rows where a proposal is unsupervised).
    pub fn label_matrix(&self, m: usize) -> Tensor {
        let n = self.proposals.len();
        let mut out = Tensor::zeros(&[n, 2 * m]);
        for (i, p) in self.proposals.iter().enumerate() {
            if let Some(sl) = &p.soft_label {
                out.data[i * 2 * m..(i + 1) * 2 * m].copy_from_slice(sl);
            }
        }
        out
    }
}

fn best_iou_gt(p: &Proposal, gts: &[GroundTruth]) -> (f64, usize) {
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, gt) in gts.iter().enumerate() {
        let v = iou(p.segment, gt.segment);
        let better = v > best.0
            || (v == best.0 && gt.segment.start() < gts[best.1].segment.start());
        if better {
            best = (v, i);
        }
    }
    best
}

fn nearest_center_gt(p: &Proposal, gts: &[GroundTruth]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, gt) in gts.iter().enumerate() {
        let d = center_distance(p.segment, gt.segment);
        if d < best_d || (d == best_d && gt.segment.start() < gts[best].segment.start()) {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Soft label vector of length 2M. `gts` must be non-empty (action-free
/// videos are skipped upstream).
pub fn assign_soft_label(p: &Proposal, gts: &[GroundTruth], cfg: &ModelConfig) -> Vec<f64> {
    assert!(!gts.is_empty(), "soft labels require at least one ground truth");
    let m = cfg.m;
    let mut label = vec![0.0; 2 * m];
    let (iou_best, gi) = best_iou_gt(p, gts);
    let idx = gts[gi].label_index;
    if iou_best >= cfg.tau1 {
        label[idx] = 1.0;
    } else if iou_best >= cfg.tau2 {
        let v = (cfg.alpha * iou_best).clamp(0.0, 1.0);
        label[idx] = v;
        label[idx + m] = 1.0 - v;
    } else {
        let idy = gts[nearest_center_gt(p, gts)].label_index;
        label[idy + m] = 1.0;
    }
    label
}

/// All positives first (capped at N), remaining slots filled by
/// highest-confidence non-positive proposals, padded by repeating the
/// highest-confidence entries when K < N.
pub fn sample_for_classification(
    proposals: &[Proposal],
    gts: &[GroundTruth],
    cfg: &ModelConfig,
) -> LabeledProposalBatch {
    assert!(!proposals.is_empty());
    let n = cfg.n;
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| {
        proposals[b]
            .confidence
            .partial_cmp(&proposals[a].confidence)
            .unwrap()
            .then_with(|| {
                proposals[a]
                    .segment
                    .start()
                    .partial_cmp(&proposals[b].segment.start())
                    .unwrap()
            })
            .then_with(|| {
                proposals[a]
                    .segment
                    .end()
                    .partial_cmp(&proposals[b].segment.end())
                    .unwrap()
            })
    });

    let is_positive: Vec<bool> = proposals
        .iter()
        .map(|p| best_iou_gt(p, gts).0 >= cfg.tau1)
        .collect();

    let mut picked: Vec<(usize, Origin)> = Vec::with_capacity(n);
    for &i in &order {
        if picked.len() >= n {
            break;
        }
        if is_positive[i] {
            picked.push((i, Origin::Positive));
        }
    }
    for &i in &order {
        if picked.len() >= n {
            break;
        }
        if !is_positive[i] {
            picked.push((i, Origin::Pc));
        }
    }
    let unique = picked.len();
    let mut cursor = 0;
    while picked.len() < n {
        let (i, _) = picked[cursor % unique];
        picked.push((i, Origin::Padded));
        cursor += 1;
    }

    let mut out_props = Vec::with_capacity(n);
    let mut flags = Vec::with_capacity(n);
    for (i, origin) in picked {
        let mut p = proposals[i].clone();
        let supervised = cfg.use_pc_labels || is_positive[i];
        p.soft_label = if supervised {
            let label = if cfg.use_pc_labels {
                assign_soft_label(&p, gts, cfg)
            } else {
                let mut l = vec![0.0; 2 * cfg.m];
                l[gts[best_iou_gt(&p, gts).1].label_index] = 1.0;
                l
            };
            Some(label)
        } else {
            None
        };
        out_props.push(p);
        flags.push(origin);
    }
    LabeledProposalBatch { proposals: out_props, origin_flags: flags }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Segment;
    use proptest::prelude::*;

    fn cfg() -> ModelConfig {
        ModelConfig { m: 10, n: 8, ..ModelConfig::default() }
    }

    fn gt(s: f64, e: f64, label: usize) -> GroundTruth {
        GroundTruth { segment: Segment::new(s, e).unwrap(), label_index: label }
    }

    fn prop(s: f64, e: f64, conf: f64) -> Proposal {
        Proposal::new(Segment::new(s, e).unwrap(), conf)
    }

    #[test]
    fn high_iou_is_one_hot_at_idx() {
        // IoU = 0.85 >= tau1 = 0.7
        let gts = vec![gt(10.0, 30.0, 3)];
        let p = prop(10.0, 27.0, 0.9); // IoU 17/20 = 0.85
        let label = assign_soft_label(&p, &gts, &cfg());
        assert_eq!(label[3], 1.0);
        assert_eq!(label.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn mid_band_splits_between_idx_and_shadow() {
        // IoU = 0.5, alpha = 1 -> 0.5 at idx, 0.5 at idx + M
        let gts = vec![gt(0.0, 10.0, 3)];
        let p = prop(0.0, 20.0, 0.5); // IoU 10/20 = 0.5
        let label = assign_soft_label(&p, &gts, &cfg());
        assert_eq!(label[3], 0.5);
        assert_eq!(label[13], 0.5);
        assert!((label.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn low_iou_goes_to_nearest_center_shadow() {
        let gts = vec![gt(0.0, 10.0, 2), gt(80.0, 95.0, 7)];
        let p = prop(70.0, 75.0, 0.4); // disjoint from both, nearer to second
        let label = assign_soft_label(&p, &gts, &cfg());
        assert_eq!(label[17], 1.0);
        assert_eq!(label.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn boundary_continuity_at_tau1_when_alpha_is_inverse() {
        let mut c = cfg();
        c.alpha = 1.0 / c.tau1;
        let gts = vec![gt(0.0, 100.0, 4)];
        // IoU just below tau1
        let just_below = prop(0.0, 100.0 / 0.69999, 0.5);
        let label = assign_soft_label(&just_below, &gts, &c);
        assert!(label[4] > 0.999 && label[4] <= 1.0);
        assert!(label[14] < 1e-3);
    }

    #[test]
    fn sampler_keeps_all_positives_and_fills_with_best_pc() {
        let c = cfg();
        let gts = vec![gt(10.0, 30.0, 1)];
        let mut proposals = Vec::new();
        for i in 0..5 {
            proposals.push(prop(10.0 + i as f64 * 0.1, 30.0, 0.5)); // IoU ~1
        }
        for i in 0..6 {
            proposals.push(prop(40.0 + i as f64, 60.0 + i as f64, 0.9 - 0.1 * i as f64));
        }
        let batch = sample_for_classification(&proposals, &gts, &c);
        assert_eq!(batch.proposals.len(), 8);
        let positives = batch.origin_flags.iter().filter(|&&f| f == Origin::Positive).count();
        assert_eq!(positives, 5);
        let pcs: Vec<&Proposal> = batch
            .proposals
            .iter()
            .zip(&batch.origin_flags)
            .filter(|(_, &f)| f == Origin::Pc)
            .map(|(p, _)| p)
            .collect();
        assert_eq!(pcs.len(), 3);
        // highest-scoring PC proposals were taken
        assert!(pcs.iter().all(|p| p.confidence >= 0.7 - 1e-12));
    }

    #[test]
    fn sampler_pads_when_short() {
        let mut c = cfg();
        c.n = 5;
        let gts = vec![gt(0.0, 10.0, 0)];
        let proposals = vec![prop(0.0, 10.0, 0.9), prop(50.0, 60.0, 0.3)];
        let batch = sample_for_classification(&proposals, &gts, &c);
        assert_eq!(batch.proposals.len(), 5);
        assert_eq!(
            batch.origin_flags.iter().filter(|&&f| f == Origin::Padded).count(),
            3
        );
    }

    #[test]
    fn zero_positives_takes_top_confidence() {
        let c = cfg();
        let gts = vec![gt(0.0, 5.0, 0)];
        let proposals: Vec<Proposal> =
            (0..10).map(|i| prop(50.0, 60.0 + i as f64, 0.1 * i as f64)).collect();
        let batch = sample_for_classification(&proposals, &gts, &c);
        assert!(batch.origin_flags.iter().all(|&f| f == Origin::Pc));
        assert!(batch.proposals[0].confidence >= 0.8);
    }

    proptest! {
        #[test]
        fn soft_labels_are_sparse_distributions(
            ps in 0.0..80.0f64, pd in 1.0..30.0f64,
            g1 in 0.0..80.0f64, d1 in 1.0..30.0f64,
            g2 in 0.0..80.0f64, d2 in 1.0..30.0f64,
            l1 in 0usize..10, l2 in 0usize..10,
        ) {
            let c = cfg();
            let gts = vec![gt(g1, g1 + d1, l1), gt(g2, g2 + d2, l2)];
            let p = prop(ps, ps + pd, 0.5);
            let label = assign_soft_label(&p, &gts, &c);
            let nonzero = label.iter().filter(|&&v| v != 0.0).count();
            prop_assert!(nonzero <= 2);
            prop_assert!(label.iter().all(|&v| v >= 0.0));
            prop_assert!((label.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn idx_matches_brute_force_argmax(
            ps in 0.0..50.0f64, pd in 5.0..30.0f64,
            offsets in proptest::collection::vec((0.0..50.0f64, 1.0..30.0f64, 0usize..10), 1..5),
        ) {
            let gts: Vec<GroundTruth> = offsets.iter().map(|&(s, d, l)| gt(s, s + d, l)).collect();
            let p = prop(ps, ps + pd, 0.5);
            let (got_iou, gi) = best_iou_gt(&p, &gts);
            let brute = gts.iter()
                .map(|g| iou(p.segment, g.segment))
                .fold(f64::NEG_INFINITY, f64::max);
            prop_assert!((got_iou - brute).abs() < 1e-12);
            prop_assert!((iou(p.segment, gts[gi].segment) - brute).abs() < 1e-12);
        }
    }
}
