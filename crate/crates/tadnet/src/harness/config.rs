//! Flat dotted-key configuration: a text file of `section.key = value`
//! lines, with CLI overrides in the same syntax applied on top.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::domain::ModelConfig;

use super::HarnessError;

/// Optimizer schedule: fixed epoch count, step drops of the learning
/// rate at the listed epochs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_drop_epochs: Vec<usize>,
    pub drop_factor: f64,
    pub checkpoint_every: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 10,
            batch_size: 4,
            base_lr: 6e-4,
            lr_drop_epochs: vec![3, 7],
            drop_factor: 10.0,
            checkpoint_every: 1,
        }
    }
}

impl TrainSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|&&d| d <= epoch).count();
        self.base_lr / self.drop_factor.powi(drops as i32)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(HarnessError::Config("epochs and batch_size must be positive".into()));
        }
        if self.lr_drop_epochs.iter().any(|&d| d >= self.epochs) {
            return Err(HarnessError::Config(format!(
                "lr drop epochs {:?} must precede total epochs {}",
                self.lr_drop_epochs, self.epochs
            )));
        }
        Ok(())
    }
}

/// Generator parameters for the synthetic benchmark.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_videos: usize,
    pub c: usize,
    pub l: usize,
    pub m: usize,
    pub actions_min: usize,
    pub actions_max: usize,
    pub min_duration_fraction: f64,
    pub max_duration_fraction: f64,
    pub noise: f64,
    pub val_fraction: f64,
    pub seconds_per_clip: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_videos: 250,
            c: 64,
            l: 100,
            m: 10,
            actions_min: 1,
            actions_max: 3,
            min_duration_fraction: 0.08,
            max_duration_fraction: 0.25,
            noise: 0.1,
            val_fraction: 0.2,
            seconds_per_clip: 1.0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.num_videos == 0 || self.c == 0 || self.l < 4 || self.m == 0 {
            return Err(HarnessError::Config("synthetic spec dimensions too small".into()));
        }
        if self.actions_min > self.actions_max {
            return Err(HarnessError::Config("actions_min > actions_max".into()));
        }
        if !(0.0 < self.min_duration_fraction
            && self.min_duration_fraction <= self.max_duration_fraction
            && self.max_duration_fraction <= 1.0)
        {
            return Err(HarnessError::Config("bad duration fractions".into()));
        }
        // worst-case packing: all actions at max duration plus one clip
        // of separation each must fit
        let worst = self.actions_max as f64 * (self.max_duration_fraction * self.l as f64 + 1.0);
        if worst >= self.l as f64 {
            return Err(HarnessError::Config(format!(
                "actions cannot pack: {} actions x {:.1} clips exceeds L={}",
                self.actions_max,
                self.max_duration_fraction * self.l as f64,
                self.l
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DataPaths {
    pub features_dir: String,
    pub annotations: String,
}

/// Everything a run needs, addressable as `model.*`, `train.*`,
/// `synth.*`, `data.*`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainSchedule,
    pub synth: SyntheticSpec,
    pub data: DataPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainSchedule::default(),
            synth: SyntheticSpec::default(),
            data: DataPaths::default(),
        }
    }
}

impl RunConfig {
    /// Defaults, then file entries, then CLI overrides, then validation.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, HarnessError> {
        let mut tree = serde_json::to_value(RunConfig::default()).expect("config serializes");
        if let Some(p) = path {
            let text = fs::read_to_string(p)
                .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", p.display())))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap().trim();
                if line.is_empty() {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    HarnessError::Config(format!("{}:{}: expected key = value", p.display(), lineno + 1))
                })?;
                set_dotted(&mut tree, key.trim(), value.trim())?;
            }
        }
        for ov in overrides {
            let (key, value) = ov
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("override '{ov}': expected key=value")))?;
            set_dotted(&mut tree, key.trim(), value.trim())?;
        }
        let cfg: RunConfig = serde_json::from_value(tree)
            .map_err(|e| HarnessError::Config(format!("config materialization: {e}")))?;
        cfg.model
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.train.validate()?;
        cfg.synth.validate()?;
        Ok(cfg)
    }

    /// Stable digest of the full effective configuration, stored in
    /// checkpoints to detect mismatched resumes.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        format!("{:x}", h.finalize())
    }
}

/// Assign `raw` into the JSON tree at a dotted path, coercing the string
/// to the type already present at that slot.
fn set_dotted(tree: &mut Value, key: &str, raw: &str) -> Result<(), HarnessError> {
    let mut slot = &mut *tree;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| HarnessError::Config(format!("unknown config key '{key}'")))?;
    }
    let coerced = match &*slot {
        Value::Bool(_) => Value::Bool(raw.parse::<bool>().map_err(|_| {
            HarnessError::Config(format!("key '{key}' wants a bool, got '{raw}'"))
        })?),
        Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| {
            HarnessError::Config(format!("key '{key}' wants an integer, got '{raw}'"))
        })?),
        Value::Number(_) => Value::from(raw.parse::<f64>().map_err(|_| {
            HarnessError::Config(format!("key '{key}' wants a number, got '{raw}'"))
        })?),
        Value::String(_) => Value::from(raw.to_string()),
        Value::Array(_) => {
            let items: Result<Vec<u64>, _> = raw
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.trim().parse::<u64>())
                .collect();
            Value::from(items.map_err(|_| {
                HarnessError::Config(format!("key '{key}' wants a comma-separated integer list, got '{raw}'"))
            })?)
        }
        _ => return Err(HarnessError::Config(format!("key '{key}' is not assignable"))),
    };
    *slot = coerced;
    Ok(())
}
