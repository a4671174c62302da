//! Inference post-processing (score fusion, Gaussian Soft-NMS, top-M
//! detections) and the tIoU-mAP evaluator.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{iou, GroundTruth, ModelConfig, Proposal, Segment};

/// Final per-video output tuple: boundaries (seconds after
/// de-normalization), class, fused score.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Detection {
    pub segment: Segment,
    pub class_index: usize,
    pub score: f64,
}

/// The standard tIoU grid for average mAP.
pub fn default_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

// ── score fusion strategies ──────────────────────────────────────────

/// How the proposal confidence and the best class posterior combine
/// into the emitted score. Selected by name via `ModelConfig::score_fusion`.
pub trait ScoreFusion {
    fn name(&self) -> &'static str;
    fn fuse(&self, proposal_confidence: f64, class_posterior: f64) -> f64;
}

struct Product;
impl ScoreFusion for Product {
    fn name(&self) -> &'static str {
        "product"
    }
    fn fuse(&self, c: f64, p: f64) -> f64 {
        c * p
    }
}

struct ProposalOnly;
impl ScoreFusion for ProposalOnly {
    fn name(&self) -> &'static str {
        "proposal-only"
    }
    fn fuse(&self, c: f64, _: f64) -> f64 {
        c
    }
}

struct ClassificationOnly;
impl ScoreFusion for ClassificationOnly {
    fn name(&self) -> &'static str {
        "classification-only"
    }
    fn fuse(&self, _: f64, p: f64) -> f64 {
        p
    }
}

pub struct FusionRegistry {
    strategies: Vec<Box<dyn ScoreFusion>>,
}

impl FusionRegistry {
    pub fn builtin() -> Self {
        FusionRegistry {
            strategies: vec![Box::new(Product), Box::new(ProposalOnly), Box::new(ClassificationOnly)],
        }
    }

    pub fn get(&self, name: &str) -> &dyn ScoreFusion {
        self.strategies
            .iter()
            .find(|s| s.name() == name)
            .unwrap_or_else(|| panic!("unknown score fusion '{name}'"))
            .as_ref()
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.strategies.iter().map(|s| s.name()).collect()
    }
}

// ── Soft-NMS ─────────────────────────────────────────────────────────

/// Class-agnostic Gaussian Soft-NMS: repeatedly keep the max-score
/// remaining detection and decay every other remaining score by
/// exp(-IoU^2 / sigma); results below `score_floor` are dropped.
pub fn soft_nms(dets: &[Detection], sigma: f64, score_floor: f64) -> Vec<Detection> {
    let mut pool: Vec<Detection> = dets.to_vec();
    let mut out = Vec::with_capacity(pool.len());
    while !pool.is_empty() {
        let best = pool
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| {
                a.score
                    .partial_cmp(&b.score)
                    .unwrap()
                    .then_with(|| b.segment.start().partial_cmp(&a.segment.start()).unwrap())
            })
            .map(|(i, _)| i)
            .unwrap();
        let keep = pool.swap_remove(best);
        for d in &mut pool {
            let o = iou(keep.segment, d.segment);
            d.score *= (-o * o / sigma).exp();
        }
        pool.retain(|d| d.score >= score_floor);
        out.push(keep);
    }
    out
}

// ── fusion + emission ────────────────────────────────────────────────

/// Per-proposal classification posterior restricted to the first M
/// classes and renormalized; returns (argmax class, posterior).
pub fn class_decision(probs_2m: &[f64], m: usize) -> (usize, f64) {
    let head = &probs_2m[..m];
    let total: f64 = head.iter().sum();
    let (mut best, mut best_v) = (0, f64::NEG_INFINITY);
    for (i, &v) in head.iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    let posterior = if total > 0.0 { best_v / total } else { 1.0 / m as f64 };
    (best, posterior)
}

/// Fuse refined proposals with classification posteriors into at most
/// top_M detections, Soft-NMS applied, clip units converted to seconds.
pub fn fuse_and_emit(
    proposals: &[Proposal],
    refined: &[Segment],
    posteriors_2m: &[Vec<f64>],
    cfg: &ModelConfig,
    seconds_per_clip: f64,
) -> Vec<Detection> {
    assert_eq!(proposals.len(), refined.len());
    assert_eq!(proposals.len(), posteriors_2m.len());
    let fusion = FusionRegistry::builtin();
    let fuse = fusion.get(&cfg.score_fusion);
    let dets: Vec<Detection> = proposals
        .iter()
        .zip(refined)
        .zip(posteriors_2m)
        .map(|((p, seg), probs)| {
            let (class_index, posterior) = class_decision(probs, cfg.m);
            Detection {
                segment: *seg,
                class_index,
                score: fuse.fuse(p.confidence, posterior).clamp(0.0, 1.0),
            }
        })
        .collect();
    let mut kept = soft_nms(&dets, cfg.nms_sigma, cfg.nms_score_floor);
    kept.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| a.segment.start().partial_cmp(&b.segment.start()).unwrap())
    });
    kept.truncate(cfg.top_m);
    kept.into_iter()
        .map(|d| Detection {
            segment: Segment::new(
                d.segment.start() * seconds_per_clip,
                d.segment.end() * seconds_per_clip,
            )
            .unwrap_or(d.segment),
            ..d
        })
        .collect()
}

// ── mAP evaluation ───────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub thresholds: Vec<f64>,
    /// class index -> AP per threshold (classes present in GT only).
    pub per_class_ap: BTreeMap<usize, Vec<f64>>,
    pub map_per_threshold: Vec<f64>,
    pub average_map: f64,
}

fn sort_predictions(preds: &mut [(String, Detection)]) {
    preds.sort_by(|a, b| {
        b.1.score
            .partial_cmp(&a.1.score)
            .unwrap()
            .then_with(|| a.1.segment.start().partial_cmp(&b.1.segment.start()).unwrap())
            .then_with(|| a.1.segment.end().partial_cmp(&b.1.segment.end()).unwrap())
            .then_with(|| a.0.cmp(&b.0))
    });
}

/// Interpolated AP: precision made monotone from the right, summed over
/// recall increments.
fn ap_from_counts(hits: &[bool], npos: usize) -> f64 {
    if npos == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        if h {
            tp += 1;
        }
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / npos as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

fn collect_class_preds(
    preds: &BTreeMap<String, Vec<Detection>>,
    class: usize,
) -> Vec<(String, Detection)> {
    let mut out: Vec<(String, Detection)> = preds
        .iter()
        .flat_map(|(vid, ds)| {
            ds.iter()
                .filter(|d| d.class_index == class)
                .map(move |d| (vid.clone(), d.clone()))
        })
        .collect();
    sort_predictions(&mut out);
    out
}

/// Greedy one-to-one matching of score-sorted class predictions at one
/// tIoU threshold; true/false positive flag per prediction in order.
fn match_class(
    class_preds: &[(String, Detection)],
    gts: &BTreeMap<String, Vec<GroundTruth>>,
    class: usize,
    thr: f64,
) -> Vec<bool> {
    let mut matched: BTreeMap<&str, Vec<bool>> = gts
        .iter()
        .map(|(vid, g)| (vid.as_str(), vec![false; g.len()]))
        .collect();
    class_preds
        .iter()
        .map(|(vid, d)| {
            let Some(video_gts) = gts.get(vid) else { return false };
            let flags = matched.get_mut(vid.as_str()).unwrap();
            let mut best: Option<(usize, f64)> = None;
            for (gi, gt) in video_gts.iter().enumerate() {
                if gt.label_index != class || flags[gi] {
                    continue;
                }
                let o = iou(d.segment, gt.segment);
                if o >= thr && best.map(|(_, b)| o > b).unwrap_or(true) {
                    best = Some((gi, o));
                }
            }
            match best {
                Some((gi, _)) => {
                    flags[gi] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// (recall, precision) after each prediction in score order; raw,
/// uninterpolated — suitable for plotting.
pub fn precision_recall_curve(
    preds: &BTreeMap<String, Vec<Detection>>,
    gts: &BTreeMap<String, Vec<GroundTruth>>,
    class: usize,
    thr: f64,
) -> Vec<(f64, f64)> {
    let npos = gts.values().flatten().filter(|g| g.label_index == class).count();
    if npos == 0 {
        return Vec::new();
    }
    let class_preds = collect_class_preds(preds, class);
    let hits = match_class(&class_preds, gts, class, thr);
    let mut tp = 0usize;
    hits.iter()
        .enumerate()
        .map(|(i, &h)| {
            if h {
                tp += 1;
            }
            (tp as f64 / npos as f64, tp as f64 / (i + 1) as f64)
        })
        .collect()
}

/// Greedy one-to-one matching per class at each tIoU threshold,
/// ActivityNet-style interpolated AP, mAP over classes present in GT.
pub fn evaluate_map(
    preds: &BTreeMap<String, Vec<Detection>>,
    gts: &BTreeMap<String, Vec<GroundTruth>>,
    thresholds: &[f64],
) -> EvalResult {
    let mut classes: Vec<usize> = gts
        .values()
        .flatten()
        .map(|g| g.label_index)
        .collect();
    classes.sort_unstable();
    classes.dedup();

    let mut per_class_ap: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for &c in &classes {
        let npos: usize = gts
            .values()
            .flatten()
            .filter(|g| g.label_index == c)
            .count();
        let class_preds = collect_class_preds(preds, c);
        let aps: Vec<f64> = thresholds
            .iter()
            .map(|&thr| ap_from_counts(&match_class(&class_preds, gts, c, thr), npos))
            .collect();
        per_class_ap.insert(c, aps);
    }

    let map_per_threshold: Vec<f64> = (0..thresholds.len())
        .map(|ti| {
            if per_class_ap.is_empty() {
                0.0
            } else {
                per_class_ap.values().map(|aps| aps[ti]).sum::<f64>() / per_class_ap.len() as f64
            }
        })
        .collect();
    let average_map = if map_per_threshold.is_empty() {
        0.0
    } else {
        map_per_threshold.iter().sum::<f64>() / map_per_threshold.len() as f64
    };
    EvalResult {
        thresholds: thresholds.to_vec(),
        per_class_ap,
        map_per_threshold,
        average_map,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(s: f64, e: f64, c: usize, score: f64) -> Detection {
        Detection { segment: Segment::new(s, e).unwrap(), class_index: c, score }
    }

    fn gt(s: f64, e: f64, c: usize) -> GroundTruth {
        GroundTruth { segment: Segment::new(s, e).unwrap(), label_index: c }
    }

    #[test]
    fn soft_nms_fixtures() {
        // single detection unchanged
        let one = soft_nms(&[det(0.0, 10.0, 0, 0.9)], 0.4, 1e-4);
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].score, 0.9);

        // disjoint detections unchanged
        let two = soft_nms(&[det(0.0, 10.0, 0, 0.9), det(20.0, 30.0, 0, 0.8)], 0.4, 1e-4);
        assert_eq!(two.len(), 2);
        assert_eq!(two[1].score, 0.8);

        // IoU 0.5 pair ([0,15] vs [5,20]): s2' = 0.8 * exp(-0.25/0.4)
        let pair = soft_nms(&[det(0.0, 15.0, 0, 0.9), det(5.0, 20.0, 0, 0.8)], 0.4, 1e-4);
        assert!((pair[1].score - 0.8 * (-0.25f64 / 0.4).exp()).abs() < 1e-9);
        assert!((pair[1].score - 0.4282).abs() < 1e-3);
    }

    #[test]
    fn soft_nms_never_increases_scores() {
        let dets: Vec<Detection> = (0..8)
            .map(|i| det(i as f64 * 3.0, i as f64 * 3.0 + 10.0, 0, 0.9 - 0.05 * i as f64))
            .collect();
        let out = soft_nms(&dets, 0.4, 1e-4);
        assert_eq!(out[0].score, 0.9); // top-1 unchanged
        let mut orig: Vec<f64> = dets.iter().map(|d| d.score).collect();
        orig.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let mut kept: Vec<f64> = out.iter().map(|d| d.score).collect();
        kept.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for (k, o) in kept.iter().zip(orig.iter()) {
            assert!(k <= o);
        }
    }

    #[test]
    fn fuse_product_and_truncation() {
        let cfg = ModelConfig { m: 2, top_m: 120, ..ModelConfig::default() };
        let p = Proposal::new(Segment::new(10.0, 20.0).unwrap(), 0.9);
        let refined = [Segment::new(10.0, 20.0).unwrap()];
        // posterior over 2M=4 entries; first M renormalized: 0.6/0.75 = 0.8
        let posts = vec![vec![0.6, 0.15, 0.2, 0.05]];
        let out = fuse_and_emit(&[p], &refined, &posts, &cfg, 1.0);
        assert_eq!(out.len(), 1);
        assert!((out[0].score - 0.9 * 0.8).abs() < 1e-12);
        assert_eq!(out[0].class_index, 0);
    }

    #[test]
    fn clip_to_seconds_roundtrip() {
        let l = 100usize;
        let duration = 237.41;
        let spc = duration / l as f64;
        for clip in [0.001, 13.37, 99.9] {
            let sec = clip * spc;
            let back = sec / spc;
            assert!((back - clip).abs() < 1e-9);
        }
    }

    #[test]
    fn eval_exact_match_is_perfect() {
        let mut preds = BTreeMap::new();
        let mut gts = BTreeMap::new();
        preds.insert("v1".to_string(), vec![det(5.0, 15.0, 3, 1.0)]);
        gts.insert("v1".to_string(), vec![gt(5.0, 15.0, 3)]);
        let r = evaluate_map(&preds, &gts, &default_thresholds());
        assert_eq!(r.average_map, 1.0);
        assert!(r.map_per_threshold.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn eval_no_predictions_is_zero() {
        let preds = BTreeMap::new();
        let mut gts = BTreeMap::new();
        gts.insert("v1".to_string(), vec![gt(5.0, 15.0, 3)]);
        let r = evaluate_map(&preds, &gts, &default_thresholds());
        assert_eq!(r.average_map, 0.0);
    }

    #[test]
    fn eval_fp_above_tp_halves_ap() {
        let mut preds = BTreeMap::new();
        let mut gts = BTreeMap::new();
        preds.insert(
            "v1".to_string(),
            vec![det(50.0, 60.0, 0, 0.9), det(5.0, 15.0, 0, 0.8)],
        );
        gts.insert("v1".to_string(), vec![gt(5.0, 15.0, 0)]);
        let r = evaluate_map(&preds, &gts, &[0.5]);
        assert!((r.map_per_threshold[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn registry_names() {
        let reg = FusionRegistry::builtin();
        assert_eq!(reg.names(), vec!["product", "proposal-only", "classification-only"]);
        assert_eq!(reg.get("proposal-only").fuse(0.7, 0.1), 0.7);
        assert_eq!(reg.get("classification-only").fuse(0.7, 0.1), 0.1);
    }

    proptest! {
        #[test]
        fn soft_nms_scores_bounded(segs in proptest::collection::vec((0.0..50.0f64, 1.0..20.0f64, 0.01..1.0f64), 1..10)) {
            let dets: Vec<Detection> = segs.iter().map(|&(s, d, sc)| det(s, s + d, 0, sc)).collect();
            let out = soft_nms(&dets, 0.4, 1e-4);
            prop_assert!(out.len() <= dets.len());
            for d in &out {
                prop_assert!(d.score > 0.0 && d.score <= 1.0);
            }
        }
    }
}
