//! On-disk artifacts: annotation JSON, flat binary feature files with
//! JSON sidecars, and prediction dumps.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::domain::{FeatureSequence, GroundTruth, Segment};
use crate::infer_eval::Detection;
use crate::tensor::Tensor;

use super::HarnessError;

// ── annotations ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Training,
    Validation,
    Testing,
}

impl std::str::FromStr for Subset {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, HarnessError> {
        match s {
            "training" | "train" => Ok(Subset::Training),
            "validation" | "val" => Ok(Subset::Validation),
            "testing" | "test" => Ok(Subset::Testing),
            other => Err(HarnessError::Config(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationEntry {
    /// [start, end] in seconds.
    pub segment: [f64; 2],
    pub label: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoAnnotation {
    pub duration_seconds: f64,
    pub subset: Subset,
    pub annotations: Vec<AnnotationEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationFile {
    /// Declared label vocabulary; label indices follow this order.
    pub labels: Vec<String>,
    pub database: BTreeMap<String, VideoAnnotation>,
}

impl AnnotationFile {
    pub fn label_index(&self, label: &str) -> Result<usize, HarnessError> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| HarnessError::Data(format!("label '{label}' not in declared list")))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        for (vid, v) in &self.database {
            if !(v.duration_seconds > 0.0 && v.duration_seconds.is_finite()) {
                return Err(HarnessError::Data(format!("{vid}: bad duration")));
            }
            for a in &v.annotations {
                let [s, e] = a.segment;
                if !(0.0 <= s && s < e && e <= v.duration_seconds) {
                    return Err(HarnessError::Data(format!(
                        "{vid}: segment [{s}, {e}] outside [0, {}]",
                        v.duration_seconds
                    )));
                }
                self.label_index(&a.label)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| HarnessError::Data(format!("annotation encode: {e}")))?;
        fs::write(path, json)
            .map_err(|e| HarnessError::Data(format!("write {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::Data(format!("read {}: {e}", path.display())))?;
        let file: AnnotationFile = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
        file.validate()?;
        Ok(file)
    }

    /// Ground truth in seconds per video, for the evaluator.
    pub fn ground_truth_seconds(
        &self,
        subset: Option<Subset>,
    ) -> Result<BTreeMap<String, Vec<GroundTruth>>, HarnessError> {
        let mut out = BTreeMap::new();
        for (vid, v) in &self.database {
            if let Some(want) = subset {
                if v.subset != want {
                    continue;
                }
            }
            let mut gts = Vec::with_capacity(v.annotations.len());
            for a in &v.annotations {
                gts.push(GroundTruth {
                    segment: Segment::new(a.segment[0], a.segment[1])
                        .map_err(|e| HarnessError::Data(format!("{vid}: {e}")))?,
                    label_index: self.label_index(&a.label)?,
                });
            }
            out.insert(vid.clone(), gts);
        }
        Ok(out)
    }
}

// ── feature files ────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSidecar {
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub clip_stride: usize,
}

pub fn feature_paths(dir: &Path, video_id: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{video_id}.bin")), dir.join(format!("{video_id}.json")))
}

/// Write a C x L feature matrix as row-major L x C little-endian f32
/// plus the JSON sidecar.
pub fn save_features(dir: &Path, video_id: &str, feats: &FeatureSequence) -> Result<(), HarnessError> {
    let (bin_path, json_path) = feature_paths(dir, video_id);
    let (c, l) = (feats.channels(), feats.len());
    let mut buf = Vec::with_capacity(4 * c * l);
    for t in 0..l {
        for ch in 0..c {
            buf.write_f32::<LittleEndian>(feats.data.at(ch, t) as f32)
                .expect("in-memory write");
        }
    }
    fs::write(&bin_path, &buf)
        .map_err(|e| HarnessError::Data(format!("write {}: {e}", bin_path.display())))?;
    let sidecar = FeatureSidecar { l, c, clip_stride: feats.clip_stride };
    fs::write(&json_path, serde_json::to_string(&sidecar).expect("sidecar encodes"))
        .map_err(|e| HarnessError::Data(format!("write {}: {e}", json_path.display())))
}

pub fn load_features(dir: &Path, video_id: &str) -> Result<FeatureSequence, HarnessError> {
    let (bin_path, json_path) = feature_paths(dir, video_id);
    let sidecar: FeatureSidecar = serde_json::from_str(
        &fs::read_to_string(&json_path)
            .map_err(|e| HarnessError::Data(format!("read {}: {e}", json_path.display())))?,
    )
    .map_err(|e| HarnessError::Data(format!("{}: {e}", json_path.display())))?;
    let mut file = fs::File::open(&bin_path)
        .map_err(|e| HarnessError::Data(format!("open {}: {e}", bin_path.display())))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| HarnessError::Data(format!("read {}: {e}", bin_path.display())))?;
    let expected = 4 * sidecar.l * sidecar.c;
    if bytes.len() != expected {
        return Err(HarnessError::Data(format!(
            "{}: {} bytes, sidecar promises {}",
            bin_path.display(),
            bytes.len(),
            expected
        )));
    }
    let mut cursor = &bytes[..];
    let mut data = Tensor::zeros(&[sidecar.c, sidecar.l]);
    for t in 0..sidecar.l {
        for ch in 0..sidecar.c {
            let v = cursor.read_f32::<LittleEndian>().expect("length checked");
            *data.at_mut(ch, t) = v as f64;
        }
    }
    Ok(FeatureSequence::new(data, sidecar.clip_stride))
}

// ── prediction dumps ─────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredEntry {
    /// [start, end] in seconds.
    pub segment: [f64; 2],
    pub label: String,
    pub score: f64,
}

pub type PredictionDump = BTreeMap<String, Vec<PredEntry>>;

pub fn detections_to_entries(dets: &[Detection], labels: &[String]) -> Vec<PredEntry> {
    dets.iter()
        .map(|d| PredEntry {
            segment: [d.segment.start(), d.segment.end()],
            label: labels[d.class_index].clone(),
            score: d.score,
        })
        .collect()
}

pub fn entries_to_detections(
    entries: &[PredEntry],
    ann: &AnnotationFile,
) -> Result<Vec<Detection>, HarnessError> {
    entries
        .iter()
        .map(|e| {
            Ok(Detection {
                segment: Segment::new(e.segment[0], e.segment[1])
                    .map_err(|err| HarnessError::Data(err.to_string()))?,
                class_index: ann.label_index(&e.label)?,
                score: e.score,
            })
        })
        .collect()
}

pub fn save_predictions(path: &Path, dump: &PredictionDump) -> Result<(), HarnessError> {
    fs::write(path, serde_json::to_string_pretty(dump).expect("dump encodes"))
        .map_err(|e| HarnessError::Data(format!("write {}: {e}", path.display())))
}

pub fn load_predictions(path: &Path) -> Result<PredictionDump, HarnessError> {
    serde_json::from_str(
        &fs::read_to_string(path)
            .map_err(|e| HarnessError::Data(format!("read {}: {e}", path.display())))?,
    )
    .map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))
}

/// Atomic write used for checkpoints and metric files: write to a
/// sibling temp file, then rename into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)
            .map_err(|e| HarnessError::Data(format!("create {}: {e}", tmp.display())))?;
        f.write_all(bytes)
            .map_err(|e| HarnessError::Data(format!("write {}: {e}", tmp.display())))?;
        f.sync_all().ok();
    }
    fs::rename(&tmp, path)
        .map_err(|e| HarnessError::Data(format!("rename to {}: {e}", path.display())))
}
