//! Domain types and temporal geometry shared by every other module.
//!
//! All temporal coordinates are continuous clip units; conversion to
//! seconds happens only at ingestion/serialization.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("invalid segment [{0}, {1}]: need 0 <= start < end")]
    InvalidSegment(f64, f64),
    #[error("feature sequence must have L >= 2 for resizing, got {0}")]
    TooShort(usize),
    #[error("invalid model config: {0}")]
    BadConfig(String),
}

/// Temporal interval in clip units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    start: f64,
    end: f64,
}

impl Segment {
    pub fn new(start: f64, end: f64) -> Result<Self, DomainError> {
        if !(start >= 0.0 && start < end && end.is_finite()) {
            return Err(DomainError::InvalidSegment(start, end));
        }
        Ok(Segment { start, end })
    }

    /// Construction with clamping to [0, l]; returns None when the clamped
    /// interval degenerates.
    pub fn clamped(start: f64, end: f64, l: f64) -> Option<Self> {
        let s = start.clamp(0.0, l);
        let e = end.clamp(0.0, l);
        Segment::new(s, e).ok()
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }
}

/// Temporal intersection over union of two segments.
pub fn iou(a: Segment, b: Segment) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.duration() + b.duration() - inter;
    inter / union
}

/// Distance between segment midpoints.
pub fn center_distance(a: Segment, b: Segment) -> f64 {
    (a.center() - b.center()).abs()
}

/// Annotated action instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub segment: Segment,
    pub label_index: usize,
}

/// Per-video clip-feature matrix, shape C x L.
#[derive(Debug, Clone)]
pub struct FeatureSequence {
    pub data: Tensor,
    pub clip_stride: usize,
}

impl FeatureSequence {
    pub fn new(data: Tensor, clip_stride: usize) -> Self {
        assert_eq!(data.shape.len(), 2);
        assert!(data.rows() > 0 && data.cols() > 0);
        FeatureSequence { data, clip_stride }
    }

    pub fn channels(&self) -> usize {
        self.data.rows()
    }

    pub fn len(&self) -> usize {
        self.data.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-channel 1-D linear interpolation onto `target_l` uniformly spaced
/// positions, endpoints preserved.
pub fn resize_features(x: &FeatureSequence, target_l: usize) -> Result<FeatureSequence, DomainError> {
    let l = x.len();
    if l < 2 {
        return Err(DomainError::TooShort(l));
    }
    assert!(target_l >= 2, "target_L must be >= 2");
    if l == target_l {
        return Ok(x.clone());
    }
    let c = x.channels();
    let mut out = Tensor::zeros(&[c, target_l]);
    let scale = (l - 1) as f64 / (target_l - 1) as f64;
    for j in 0..target_l {
        let u = j as f64 * scale;
        let j0 = (u.floor() as usize).min(l - 2);
        let fr = u - j0 as f64;
        for ci in 0..c {
            let row = &x.data.data[ci * l..(ci + 1) * l];
            out.data[ci * target_l + j] = row[j0] * (1.0 - fr) + row[j0 + 1] * fr;
        }
    }
    Ok(FeatureSequence::new(out, x.clip_stride))
}

/// Candidate segment with confidence and, during training, a soft label
/// over 2M proximity-augmented classes.
#[derive(Debug, Clone)]
pub struct Proposal {
    pub segment: Segment,
    pub confidence: f64,
    pub soft_label: Option<Vec<f64>>,
}

impl Proposal {
    pub fn new(segment: Segment, confidence: f64) -> Self {
        Proposal { segment, confidence, soft_label: None }
    }
}

/// Network-wide hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Original class count.
    pub m: usize,
    /// Coarse proposal count.
    pub k: usize,
    /// Sampled proposal count for the classification head.
    pub n: usize,
    /// Real proposals kept for refinement; K - mu are fake.
    pub mu: usize,
    /// ROI temporal resolution.
    pub t: usize,
    /// Clip count after resizing.
    pub l: usize,
    /// Input feature channels.
    pub c_in: usize,
    /// Hidden channel width of the shared features.
    pub c_h: usize,
    /// Attention model width.
    pub d_model: usize,
    /// Attention heads.
    pub heads: usize,
    /// High / low IoU thresholds for soft labeling.
    pub tau1: f64,
    pub tau2: f64,
    /// Proximity-category mixing coefficient.
    pub alpha: f64,
    /// Loss weights.
    pub lambda_reg: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma: f64,
    /// Focal focusing parameter.
    pub focal_gamma: f64,
    /// Boundary-map samples per candidate.
    pub bm_samples: usize,
    /// Channel width the shared features are projected to before
    /// boundary-map sampling.
    pub bm_channels: usize,
    /// Hidden width of the boundary-map scoring stack.
    pub bm_hidden: usize,
    /// Detections kept per video at inference.
    pub top_m: usize,
    /// Soft-NMS decay width and floor.
    pub nms_sigma: f64,
    pub nms_score_floor: f64,
    /// Peak selection threshold as a fraction of the global max.
    pub peak_fraction: f64,
    /// Named context-block variant (see `backbone::registry`).
    pub context_block: String,
    /// Named score-fusion variant (see `infer_eval::fusion`).
    pub score_fusion: String,
    /// Toggles mirroring the ablatable blocks.
    pub use_pc_labels: bool,
    pub use_cross_attention: bool,
    pub use_fake_proposals: bool,
    pub use_positional_keys: bool,
    /// Dual-stream auxiliary mode.
    pub auxiliary: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            m: 10,
            k: 120,
            n: 32,
            mu: 90,
            t: 16,
            l: 100,
            c_in: 64,
            c_h: 256,
            d_model: 256,
            heads: 8,
            tau1: 0.7,
            tau2: 0.3,
            alpha: 1.0,
            lambda_reg: 1e-4,
            lambda1: 1.0,
            lambda2: 10.0,
            gamma: 0.5,
            focal_gamma: 2.0,
            bm_samples: 32,
            bm_channels: 32,
            bm_hidden: 64,
            top_m: 120,
            nms_sigma: 0.4,
            nms_score_floor: 1e-4,
            peak_fraction: 0.5,
            context_block: "dilated_residual".to_string(),
            score_fusion: "product".to_string(),
            use_pc_labels: true,
            use_cross_attention: true,
            use_fake_proposals: true,
            use_positional_keys: true,
            auxiliary: false,
        }
    }
}

impl ModelConfig {
    /// Temporal length of the shared features (2L in auxiliary mode).
    pub fn l_shared(&self) -> usize {
        if self.auxiliary {
            2 * self.l
        } else {
            self.l
        }
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if !(0.0 <= self.tau2 && self.tau2 < self.tau1 && self.tau1 <= 1.0) {
            return Err(DomainError::BadConfig(format!(
                "need 0 <= tau2 < tau1 <= 1, got tau1={} tau2={}",
                self.tau1, self.tau2
            )));
        }
        if self.mu >= self.k {
            return Err(DomainError::BadConfig(format!(
                "need mu < K, got mu={} K={}",
                self.mu, self.k
            )));
        }
        if self.t % 8 != 0 {
            return Err(DomainError::BadConfig(format!(
                "T must be divisible by 8, got {}",
                self.t
            )));
        }
        if self.d_model % self.heads != 0 {
            return Err(DomainError::BadConfig(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.n > self.k {
            return Err(DomainError::BadConfig(format!(
                "need N <= K, got N={} K={}",
                self.n, self.k
            )));
        }
        Ok(())
    }
}
