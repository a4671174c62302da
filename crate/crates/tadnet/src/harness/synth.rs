//! Synthetic benchmark generator plus a template-correlation oracle
//! detector used to calibrate dataset solvability.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::domain::{FeatureSequence, Segment};
use crate::infer_eval::Detection;
use crate::tensor::Tensor;

use super::config::SyntheticSpec;
use super::data::{AnnotationEntry, AnnotationFile, Subset, VideoAnnotation};
use super::{data, HarnessError};

/// Linear onset/offset ramp width in clips.
pub const RAMP_CLIPS: f64 = 2.0;
/// Oracle run threshold on normalized template correlation; the ramp
/// crosses it exactly RAMP_CLIPS/2 inside the action.
const ORACLE_LEVEL: f64 = 0.5;

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn label_name(class: usize) -> String {
    format!("class_{class:02}")
}

pub fn video_name(index: usize) -> String {
    format!("video_{index:04}")
}

/// Fixed per-class feature template, unit norm, drawn from the spec
/// seed alone so generator and oracle agree.
pub fn class_templates(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.m)
        .map(|_| {
            let mut v: Vec<f64> = (0..spec.c).map(|_| gauss(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter_mut().for_each(|x| *x /= norm);
            v
        })
        .collect()
}

/// Trapezoidal blend weight of an action [s, e] at clip center tc.
fn ramp_weight(tc: f64, s: f64, e: f64) -> f64 {
    if tc <= s || tc >= e {
        0.0
    } else {
        ((tc - s).min(e - tc) / RAMP_CLIPS).min(1.0)
    }
}

struct PlannedAction {
    start: f64,
    end: f64,
    class: usize,
}

/// Non-overlapping placement: sample durations, reject if they cannot
/// pack with one-clip gaps, then distribute the slack randomly.
fn plan_actions(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Vec<PlannedAction>, HarnessError> {
    let l = spec.l as f64;
    for _ in 0..100 {
        let count = rng.gen_range(spec.actions_min..=spec.actions_max);
        let durations: Vec<f64> = (0..count)
            .map(|_| l * rng.gen_range(spec.min_duration_fraction..=spec.max_duration_fraction))
            .collect();
        let gap = 1.0;
        let used: f64 = durations.iter().sum::<f64>() + gap * (count + 1) as f64;
        if used >= l {
            continue;
        }
        let mut cuts: Vec<f64> = (0..count).map(|_| rng.gen_range(0.0..1.0)).collect();
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let slack = l - used;
        let mut cursor = gap + slack * cuts.first().copied().unwrap_or(0.0);
        let mut out = Vec::with_capacity(count);
        for (i, d) in durations.iter().enumerate() {
            out.push(PlannedAction {
                start: cursor,
                end: cursor + d,
                class: rng.gen_range(0..spec.m),
            });
            let next_cut = cuts.get(i + 1).copied().unwrap_or(1.0);
            let this_cut = cuts[i];
            cursor += d + gap + slack * (next_cut - this_cut);
        }
        return Ok(out);
    }
    Err(HarnessError::Config(
        "synthetic spec rejected: actions cannot pack into the video length".into(),
    ))
}

/// Build one video's feature matrix (C x L) for a set of planned actions.
fn render_video(
    spec: &SyntheticSpec,
    templates: &[Vec<f64>],
    actions: &[PlannedAction],
    rng: &mut ChaCha8Rng,
) -> FeatureSequence {
    let mut data = Tensor::zeros(&[spec.c, spec.l]);
    for t in 0..spec.l {
        let tc = t as f64 + 0.5;
        for ch in 0..spec.c {
            let mut v = spec.noise * gauss(rng);
            for a in actions {
                v += ramp_weight(tc, a.start, a.end) * templates[a.class][ch];
            }
            // keep values f32-representable so feature files round-trip
            *data.at_mut(ch, t) = v as f32 as f64;
        }
    }
    FeatureSequence::new(data, 1)
}

/// Generate the dataset on disk: one feature file pair per video plus
/// `annotations.json`. Bit-exact under a fixed spec.
pub fn generate(spec: &SyntheticSpec, out_dir: &Path) -> Result<AnnotationFile, HarnessError> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| HarnessError::Data(format!("create {}: {e}", out_dir.display())))?;
    let templates = class_templates(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1));
    let n_val = ((spec.num_videos as f64) * spec.val_fraction).round() as usize;
    let n_train = spec.num_videos - n_val;
    let mut database = BTreeMap::new();
    for vi in 0..spec.num_videos {
        let actions = plan_actions(spec, &mut rng)?;
        let feats = render_video(spec, &templates, &actions, &mut rng);
        let id = video_name(vi);
        data::save_features(out_dir, &id, &feats)?;
        let spc = spec.seconds_per_clip;
        database.insert(
            id,
            VideoAnnotation {
                duration_seconds: spec.l as f64 * spc,
                subset: if vi < n_train { Subset::Training } else { Subset::Validation },
                annotations: actions
                    .iter()
                    .map(|a| AnnotationEntry {
                        segment: [a.start * spc, a.end * spc],
                        label: label_name(a.class),
                    })
                    .collect(),
            },
        );
    }
    let ann = AnnotationFile {
        labels: (0..spec.m).map(label_name).collect(),
        database,
    };
    ann.validate()?;
    ann.save(&out_dir.join("annotations.json"))?;
    Ok(ann)
}

/// Template-correlation oracle: per-clip normalized correlation against
/// every class template, runs above ORACLE_LEVEL become detections with
/// ramp-crossing boundaries recovered by linear interpolation.
pub fn oracle_detect(
    feats: &FeatureSequence,
    templates: &[Vec<f64>],
    seconds_per_clip: f64,
) -> Vec<Detection> {
    let l = feats.len();
    let m = templates.len();
    // corr[class][t] = <x_t, template> (templates are unit norm)
    let corr: Vec<Vec<f64>> = templates
        .iter()
        .map(|tmpl| {
            (0..l)
                .map(|t| (0..feats.channels()).map(|ch| feats.data.at(ch, t) * tmpl[ch]).sum())
                .collect()
        })
        .collect();
    let best: Vec<f64> = (0..l)
        .map(|t| (0..m).map(|c| corr[c][t]).fold(f64::NEG_INFINITY, f64::max))
        .collect();

    // 0.5-level crossing between clip centers i-0.5+0.5 = i+0.5 grid
    let center = |t: usize| t as f64 + 0.5;
    let cross = |a_t: usize, b_t: usize, va: f64, vb: f64| -> f64 {
        if (vb - va).abs() < 1e-12 {
            center(b_t)
        } else {
            center(a_t) + (ORACLE_LEVEL - va) / (vb - va) * (center(b_t) as f64 - center(a_t))
        }
    };

    let mut dets = Vec::new();
    let mut t = 0usize;
    while t < l {
        if best[t] <= ORACLE_LEVEL {
            t += 1;
            continue;
        }
        let run_start = t;
        while t < l && best[t] > ORACLE_LEVEL {
            t += 1;
        }
        let run_end = t; // exclusive
        if run_end - run_start < 2 {
            continue;
        }
        // class with the largest summed correlation over the run
        let class = (0..m)
            .max_by(|&a, &b| {
                let sa: f64 = corr[a][run_start..run_end].iter().sum();
                let sb: f64 = corr[b][run_start..run_end].iter().sum();
                sa.partial_cmp(&sb).unwrap()
            })
            .unwrap();
        // refine the 0.5 crossings, then shift by half a ramp outward
        let onset = if run_start == 0 {
            center(0) - RAMP_CLIPS / 2.0
        } else {
            cross(run_start - 1, run_start, best[run_start - 1], best[run_start])
        };
        let offset = if run_end == l {
            center(l - 1) + RAMP_CLIPS / 2.0
        } else {
            cross(run_end - 1, run_end, best[run_end - 1], best[run_end])
        };
        let start = (onset - RAMP_CLIPS / 2.0).max(0.0);
        let end = (offset + RAMP_CLIPS / 2.0).min(l as f64);
        if start >= end {
            continue;
        }
        let plateau_mean = best[run_start..run_end].iter().sum::<f64>() / (run_end - run_start) as f64;
        dets.push(Detection {
            segment: Segment::new(start * seconds_per_clip, end * seconds_per_clip).unwrap(),
            class_index: class,
            score: plateau_mean.clamp(0.0, 1.0),
        });
    }
    dets
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::load_features;
    use crate::infer_eval::{default_thresholds, evaluate_map};

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_videos: 8,
            c: 16,
            l: 64,
            m: 4,
            actions_min: 1,
            actions_max: 2,
            noise: 0.0,
            seed: 11,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        generate(&spec, d1.path()).unwrap();
        generate(&spec, d2.path()).unwrap();
        for name in ["video_0000.bin", "video_0003.bin", "annotations.json"] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs across regenerations");
        }
    }

    #[test]
    fn plateau_equals_template_at_zero_noise() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        let ann = generate(&spec, dir.path()).unwrap();
        let templates = class_templates(&spec);
        let v = &ann.database["video_0000"];
        let feats = load_features(dir.path(), "video_0000").unwrap();
        let a = &v.annotations[0];
        let class = ann.label_index(&a.label).unwrap();
        let (s, e) = (a.segment[0], a.segment[1]);
        // any clip center fully inside the plateau
        let t = ((s + RAMP_CLIPS + 0.6).ceil()) as usize;
        let tc = t as f64 + 0.5;
        assert!(tc > s + RAMP_CLIPS && tc < e - RAMP_CLIPS, "plateau clip exists");
        for ch in 0..spec.c {
            let got = feats.data.at(ch, t);
            let want = templates[class][ch] as f32 as f64;
            assert!((got - want).abs() < 1e-12, "channel {ch}: {got} vs {want}");
        }
    }

    #[test]
    fn oracle_is_near_perfect_at_zero_noise() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec { num_videos: 20, ..tiny_spec() };
        let ann = generate(&spec, dir.path()).unwrap();
        let templates = class_templates(&spec);
        let mut preds = std::collections::BTreeMap::new();
        for vid in ann.database.keys() {
            let feats = load_features(dir.path(), vid).unwrap();
            preds.insert(vid.clone(), oracle_detect(&feats, &templates, spec.seconds_per_clip));
        }
        let gts = ann.ground_truth_seconds(None).unwrap();
        let r = evaluate_map(&preds, &gts, &default_thresholds());
        assert!(r.average_map > 0.95, "oracle average mAP {} too low", r.average_map);
    }

    #[test]
    fn oracle_survives_moderate_noise() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec { num_videos: 12, noise: 0.1, c: 64, ..tiny_spec() };
        let ann = generate(&spec, dir.path()).unwrap();
        let templates = class_templates(&spec);
        let mut preds = std::collections::BTreeMap::new();
        for vid in ann.database.keys() {
            let feats = load_features(dir.path(), vid).unwrap();
            preds.insert(vid.clone(), oracle_detect(&feats, &templates, spec.seconds_per_clip));
        }
        let gts = ann.ground_truth_seconds(None).unwrap();
        let r = evaluate_map(&preds, &gts, &[0.5]);
        assert!(r.average_map > 0.9, "noisy oracle mAP@0.5 {} too low", r.average_map);
    }

    #[test]
    fn infeasible_packing_rejected() {
        let spec = SyntheticSpec {
            actions_min: 5,
            actions_max: 5,
            min_duration_fraction: 0.3,
            max_duration_fraction: 0.4,
            ..tiny_spec()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn split_counts_follow_val_fraction() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec { num_videos: 10, val_fraction: 0.2, ..tiny_spec() };
        let ann = generate(&spec, dir.path()).unwrap();
        let train = ann.database.values().filter(|v| v.subset == Subset::Training).count();
        let val = ann.database.values().filter(|v| v.subset == Subset::Validation).count();
        assert_eq!((train, val), (8, 2));
    }
}
