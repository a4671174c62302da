//! Training and inference drivers: per-video loss tapes, Adam with the
//! step schedule, checkpointing, and the full detection pipeline.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{resize_features, FeatureSequence, GroundTruth, ModelConfig, Proposal, Segment};
use crate::graph::Graph;
use crate::infer_eval::{fuse_and_emit, Detection};
use crate::losses::{self, LossReport};
use crate::model::{Model, Params};
use crate::pc_sampler;
use crate::proposal_gen::decode_proposals;
use crate::refine::{self, apply_refinement};
use crate::tensor::Tensor;

use super::config::RunConfig;
use super::data::{self, AnnotationFile, Subset};
use super::HarnessError;

/// One loaded video: resized features plus ground truth in clip units.
pub struct VideoSample {
    pub id: String,
    pub features: FeatureSequence,
    pub gts: Vec<GroundTruth>,
    pub seconds_per_clip: f64,
}

/// Load every video of a subset; missing feature files are skipped with
/// a note, returned separately so callers can report them.
pub fn load_split(
    cfg: &ModelConfig,
    ann: &AnnotationFile,
    features_dir: &Path,
    subset: Option<Subset>,
) -> Result<(Vec<VideoSample>, Vec<String>), HarnessError> {
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for (vid, v) in &ann.database {
        if let Some(want) = subset {
            if v.subset != want {
                continue;
            }
        }
        let raw = match data::load_features(features_dir, vid) {
            Ok(f) => f,
            Err(_) => {
                skipped.push(vid.clone());
                continue;
            }
        };
        let features = resize_features(&raw, cfg.l)
            .map_err(|e| HarnessError::Data(format!("{vid}: {e}")))?;
        let spc = v.duration_seconds / cfg.l as f64;
        let gts = v
            .annotations
            .iter()
            .map(|a| {
                Ok(GroundTruth {
                    segment: Segment::new(a.segment[0] / spc, a.segment[1] / spc)
                        .map_err(|e| HarnessError::Data(format!("{vid}: {e}")))?,
                    label_index: ann.label_index(&a.label)?,
                })
            })
            .collect::<Result<Vec<_>, HarnessError>>()?;
        samples.push(VideoSample { id: vid.clone(), features, gts, seconds_per_clip: spc });
    }
    Ok((samples, skipped))
}

// ── per-video loss tape ──────────────────────────────────────────────

/// Build the full multi-task loss for one video and return its report
/// plus per-parameter gradients (aligned with `model.params`).
pub fn video_loss_and_grads(
    model: &Model,
    sample: &VideoSample,
    loss_seed: u64,
) -> (LossReport, Vec<Tensor>) {
    let cfg = &model.cfg;
    let mut g = Graph::new();
    let bind = model.params.bind(&mut g);
    let out = model.forward_trunk(&mut g, &bind, &sample.features, None);

    let p_start = g.value(out.boundary.start).data.clone();
    let p_end = g.value(out.boundary.end).data.clone();
    let map = g.value(out.bm.scores).clone();
    let cell_scores: Vec<(f64, f64)> = (0..map.rows()).map(|i| (map.at(i, 0), map.at(i, 1))).collect();
    let proposals = decode_proposals(&p_start, &p_end, &model.cells, &cell_scores, cfg);

    // boundary heads
    let (t_start, t_end) = losses::tem_targets(&sample.gts, cfg.l_shared());
    let ls = losses::weighted_binary_logistic(&mut g, out.boundary.start, &t_start);
    let le = losses::weighted_binary_logistic(&mut g, out.boundary.end, &t_end);
    let tem_sum = g.add(ls, le);
    let tem_bcls = g.scale(tem_sum, 0.5);

    // confidence map
    let iou_t = losses::bm_iou_targets(&model.cells, &sample.gts);
    let cls_col = g.slice_cols(out.bm.scores, 0, 1);
    let reg_col = g.slice_cols(out.bm.scores, 1, 2);
    let pem_bcls = losses::weighted_binary_logistic(&mut g, cls_col, &losses::pem_cls_targets(&iou_t));
    let mut loss_rng = ChaCha8Rng::seed_from_u64(loss_seed);
    let pem_loc = losses::pem_loc_loss(&mut g, reg_col, &iou_t, &mut loss_rng);

    // classification over the sampled proposal batch
    let batch = pc_sampler::sample_for_classification(&proposals, &sample.gts, cfg);
    let logits = model.forward_classifier(&mut g, &bind, out.shared, &batch);
    let labels = batch.label_matrix(cfg.m);
    let r_cls = losses::focal_cls_loss(&mut g, logits, &labels, cfg.focal_gamma, cfg.m);

    // refinement over real + fake proposals
    let rb = refine::build_refinement_batch(&proposals, &sample.gts, cfg, true);
    let r_pred = model.forward_refiner(&mut g, &bind, out.shared, &rb.proposals);
    let (r_loc, _) = losses::refinement_loc_loss(&mut g, r_pred, &rb.targets);

    let l2 = losses::l2_param_sum(&mut g, &bind, &model.params);
    let lv = losses::total_loss(&mut g, cfg, tem_bcls, pem_bcls, pem_loc, r_loc, r_cls, l2);
    let report = lv.report(&g);

    let grads = g.backward(lv.total);
    let param_grads: Vec<Tensor> = model
        .params
        .tensors
        .iter()
        .enumerate()
        .map(|(i, t)| {
            grads[bind.ids[i]]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(&t.shape))
        })
        .collect();
    (report, param_grads)
}

// ── optimizer & checkpoints ──────────────────────────────────────────

/// Adaptive-moment optimizer state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: usize,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        AdamState {
            m: params.tensors.iter().map(|t| vec![0.0; t.numel()]).collect(),
            v: params.tensors.iter().map(|t| vec![0.0; t.numel()]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &[Tensor], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for (i, grad) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = &mut params.tensors[i];
            for (j, &gj) in grad.data.iter().enumerate() {
                m[j] = B1 * m[j] + (1.0 - B1) * gj;
                v[j] = B2 * v[j] + (1.0 - B2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p.data[j] -= lr * mh / (vh.sqrt() + EPS);
            }
        }
    }
}

fn model_digest(cfg: &ModelConfig) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(serde_json::to_string(cfg).expect("config encodes").as_bytes());
    format!("{:x}", h.finalize())
}

#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    /// Hash of the full effective run configuration (informational).
    pub config_digest: String,
    /// Hash of the model section alone; restores require it to match.
    pub model_digest: String,
    pub epochs_done: usize,
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub values: Vec<Vec<f64>>,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn capture(run: &RunConfig, model: &Model, adam: &AdamState, epochs_done: usize) -> Self {
        Checkpoint {
            config_digest: run.digest(),
            model_digest: model_digest(&model.cfg),
            epochs_done,
            names: model.params.names.clone(),
            shapes: model.params.tensors.iter().map(|t| t.shape.clone()).collect(),
            values: model.params.tensors.iter().map(|t| t.data.clone()).collect(),
            adam: adam.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let json = serde_json::to_vec(self).expect("checkpoint encodes");
        data::atomic_write(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Data(format!("read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))
    }

    /// Restore parameters into a freshly built model.
    pub fn restore(&self, model: &mut Model, _run: &RunConfig) -> Result<AdamState, HarnessError> {
        if self.model_digest != model_digest(&model.cfg) {
            return Err(HarnessError::Config(
                "checkpoint was written under a different model configuration".into(),
            ));
        }
        if self.names != model.params.names {
            return Err(HarnessError::Data("checkpoint parameter names mismatch".into()));
        }
        for (i, vals) in self.values.iter().enumerate() {
            if model.params.tensors[i].shape != self.shapes[i] {
                return Err(HarnessError::Data(format!(
                    "checkpoint shape mismatch for {}",
                    self.names[i]
                )));
            }
            model.params.tensors[i].data = vals.clone();
        }
        Ok(self.adam.clone())
    }
}

// ── training loop ────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossReport,
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<StepLog>,
}

/// Run the schedule from `start_epoch`; action-free videos are dropped
/// up front. NaN losses abort with the offending batch identified.
pub fn train(
    run: &RunConfig,
    seed: u64,
    samples: &[VideoSample],
    resume: Option<(Model, AdamState, usize)>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, HarnessError> {
    let with_actions: Vec<&VideoSample> = samples.iter().filter(|s| !s.gts.is_empty()).collect();
    if with_actions.is_empty() {
        return Err(HarnessError::Data("no videos with actions to train on".into()));
    }
    let (mut model, mut adam, start_epoch) = match resume {
        Some((m, a, e)) => (m, a, e),
        None => {
            let m = Model::new(run.model.clone(), seed);
            let a = AdamState::new(&m.params);
            (m, a, 0)
        }
    };

    let sched = &run.train;
    let mut log = Vec::new();
    let mut step = start_epoch * with_actions.len().div_ceil(sched.batch_size);
    for epoch in start_epoch..sched.epochs {
        let lr = sched.lr_at(epoch);
        let mut order: Vec<usize> = (0..with_actions.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed ^ (0xE70C ^ epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut shuffle_rng);

        for chunk in order.chunks(sched.batch_size) {
            // independent tapes in parallel, summed in deterministic order
            let results: Vec<(LossReport, Vec<Tensor>)> = chunk
                .par_iter()
                .map(|&vi| video_loss_and_grads(&model, with_actions[vi], seed ^ (step as u64) << 20 ^ vi as u64))
                .collect();
            let scale = 1.0 / chunk.len() as f64;
            let mut grads: Vec<Tensor> =
                model.params.tensors.iter().map(|t| Tensor::zeros(&t.shape)).collect();
            let mut mean = LossReport::default();
            for (rep, g) in &results {
                mean.accumulate(rep, scale);
                for (acc, gi) in grads.iter_mut().zip(g) {
                    for (a, b) in acc.data.iter_mut().zip(&gi.data) {
                        *a += scale * b;
                    }
                }
            }
            if !mean.total.is_finite() {
                return Err(HarnessError::Train(format!(
                    "non-finite loss at epoch {epoch} step {step}, batch videos {:?}",
                    chunk.iter().map(|&vi| with_actions[vi].id.as_str()).collect::<Vec<_>>()
                )));
            }
            adam.step(&mut model.params, &grads, lr);
            log.push(StepLog { epoch, step, lr, loss: mean });
            step += 1;
        }

        if let Some(dir) = out_dir {
            if (epoch + 1) % sched.checkpoint_every == 0 || epoch + 1 == sched.epochs {
                Checkpoint::capture(run, &model, &adam, epoch + 1)
                    .save(&dir.join("checkpoint.json"))?;
            }
            let lines: String = log
                .iter()
                .map(|s| serde_json::to_string(s).expect("log encodes") + "\n")
                .collect();
            data::atomic_write(&dir.join("metrics.jsonl"), lines.as_bytes())?;
        }
    }
    Ok(TrainOutcome { model, log })
}

// ── inference ────────────────────────────────────────────────────────

/// Full detection pipeline for one video, output in seconds.
pub fn infer_video(model: &Model, sample: &VideoSample) -> Vec<Detection> {
    let cfg = &model.cfg;
    let mut g = Graph::new();
    let bind = model.params.bind(&mut g);
    let out = model.forward_trunk(&mut g, &bind, &sample.features, None);

    let p_start = g.value(out.boundary.start).data.clone();
    let p_end = g.value(out.boundary.end).data.clone();
    let map = g.value(out.bm.scores).clone();
    let cell_scores: Vec<(f64, f64)> = (0..map.rows()).map(|i| (map.at(i, 0), map.at(i, 1))).collect();
    let proposals = decode_proposals(&p_start, &p_end, &model.cells, &cell_scores, cfg);

    // boundary refinement on the coarse proposals
    let rb = refine::build_refinement_batch(&proposals, &[], cfg, false);
    let r_pred = model.forward_refiner(&mut g, &bind, out.shared, &rb.proposals);
    let deltas = g.value(r_pred).clone();
    let refined: Vec<Segment> = rb
        .proposals
        .iter()
        .enumerate()
        .map(|(i, p)| apply_refinement(p, (deltas.at(i, 0), deltas.at(i, 1)), cfg.l_shared() as f64))
        .collect();

    // classify the refined spans
    let logits = crate::cls_head::classify_segments(&mut g, &bind, cfg, out.shared, &refined);
    let probs_id = g.softmax_rows(logits);
    let probs = g.value(probs_id);
    let posteriors: Vec<Vec<f64>> = (0..probs.rows())
        .map(|i| (0..probs.cols()).map(|j| probs.at(i, j)).collect())
        .collect();

    let kept: Vec<Proposal> = rb.proposals.clone();
    fuse_and_emit(&kept, &refined, &posteriors, cfg, sample.seconds_per_clip)
}

/// Detections for every sample, in parallel, as a prediction dump.
pub fn infer_split(model: &Model, samples: &[VideoSample], labels: &[String]) -> data::PredictionDump {
    let rows: Vec<(String, Vec<data::PredEntry>)> = samples
        .par_iter()
        .map(|s| {
            let dets = infer_video(model, s);
            (s.id.clone(), data::detections_to_entries(&dets, labels))
        })
        .collect();
    rows.into_iter().collect::<BTreeMap<_, _>>()
}

/// Convenience for tests and acceptance: average mAP of the model on a
/// set of samples against annotation ground truth.
pub fn quick_eval(
    model: &Model,
    samples: &[VideoSample],
    ann: &AnnotationFile,
    subset: Option<Subset>,
    thresholds: &[f64],
) -> crate::infer_eval::EvalResult {
    let dump = infer_split(model, samples, &ann.labels);
    let preds: BTreeMap<String, Vec<Detection>> = dump
        .iter()
        .map(|(vid, entries)| {
            (vid.clone(), data::entries_to_detections(entries, ann).expect("own labels"))
        })
        .collect();
    let gts = ann.ground_truth_seconds(subset).expect("own annotations");
    crate::infer_eval::evaluate_map(&preds, &gts, thresholds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::SyntheticSpec;
    use crate::harness::synth;

    fn tiny_run() -> RunConfig {
        let mut run = RunConfig::default();
        run.model = ModelConfig {
            m: 3,
            k: 12,
            n: 6,
            mu: 8,
            t: 8,
            l: 24,
            c_in: 8,
            c_h: 8,
            d_model: 8,
            heads: 2,
            bm_samples: 8,
            bm_channels: 4,
            bm_hidden: 8,
            top_m: 12,
            ..ModelConfig::default()
        };
        run.train.epochs = 1;
        run.train.batch_size = 2;
        run.synth = SyntheticSpec {
            num_videos: 4,
            c: 8,
            l: 24,
            m: 3,
            actions_min: 1,
            actions_max: 1,
            min_duration_fraction: 0.2,
            max_duration_fraction: 0.35,
            noise: 0.05,
            val_fraction: 0.0,
            seed: 3,
            ..SyntheticSpec::default()
        };
        run
    }

    fn tiny_samples(run: &RunConfig, dir: &Path) -> (AnnotationFile, Vec<VideoSample>) {
        let ann = synth::generate(&run.synth, dir).unwrap();
        let (samples, skipped) = load_split(&run.model, &ann, dir, None).unwrap();
        assert!(skipped.is_empty());
        (ann, samples)
    }

    #[test]
    fn single_epoch_trains_and_infers() {
        let dir = tempfile::tempdir().unwrap();
        let run = tiny_run();
        let (ann, samples) = tiny_samples(&run, dir.path());
        let out = train(&run, 5, &samples, None, None).unwrap();
        assert_eq!(out.log.len(), 2); // 4 videos / batch 2
        assert!(out.log.iter().all(|s| s.loss.total.is_finite()));
        let dets = infer_video(&out.model, &samples[0]);
        assert!(dets.len() <= run.model.top_m);
        for d in &dets {
            assert!(d.segment.end() <= run.synth.l as f64 * run.synth.seconds_per_clip + 1e-9);
        }
        let _ = ann;
    }

    #[test]
    fn overfit_loss_decreases_in_moving_average() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = tiny_run();
        run.synth.num_videos = 2;
        run.train.epochs = 50; // 2 videos, batch 2 -> 50 steps
        run.train.batch_size = 2;
        run.train.base_lr = 3e-3;
        run.train.lr_drop_epochs = vec![];
        let (_ann, samples) = tiny_samples(&run, dir.path());
        let out = train(&run, 1, &samples, None, None).unwrap();
        let totals: Vec<f64> = out.log.iter().map(|s| s.loss.total).collect();
        let head: f64 = totals[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = totals[totals.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(
            tail < head,
            "moving-average loss should fall: first {head:.4} vs last {tail:.4}"
        );
    }

    #[test]
    fn training_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let run = {
            let mut r = tiny_run();
            r.train.epochs = 2;
            r
        };
        let (_ann, samples) = tiny_samples(&run, dir.path());
        let full = train(&run, 9, &samples, None, None).unwrap();
        let full2 = train(&run, 9, &samples, None, None).unwrap();
        for (a, b) in full.log.iter().zip(&full2.log) {
            assert_eq!(a.loss.total.to_bits(), b.loss.total.to_bits(), "training not deterministic");
        }
    }

    #[test]
    fn checkpoint_resume_reproduces_the_full_run() {
        let dir = tempfile::tempdir().unwrap();
        let ckdir = tempfile::tempdir().unwrap();
        let run = {
            let mut r = tiny_run();
            r.train.epochs = 2;
            r
        };
        let (_ann, samples) = tiny_samples(&run, dir.path());
        let full = train(&run, 9, &samples, None, None).unwrap();

        // epoch 0 only, checkpointed to disk with its real optimizer state
        let one = {
            let mut r = run.clone();
            r.train.epochs = 1;
            r
        };
        train(&one, 9, &samples, None, Some(ckdir.path())).unwrap();

        // resume from the stored state through epoch 1 of the 2-epoch run
        let ck = Checkpoint::load(&ckdir.path().join("checkpoint.json")).unwrap();
        assert_eq!(ck.epochs_done, 1);
        let mut resumed_model = Model::new(run.model.clone(), 9);
        let adam = ck.restore(&mut resumed_model, &run).unwrap();
        let resumed = train(&run, 9, &samples, Some((resumed_model, adam, ck.epochs_done)), None).unwrap();
        for (a, b) in resumed.model.params.tensors.iter().zip(&full.model.params.tensors) {
            assert_eq!(a.data, b.data, "resumed run must match the uninterrupted run bit-exactly");
        }
        // and the resumed epoch's step losses match the full run's epoch 1
        let full_ep1: Vec<u64> = full
            .log
            .iter()
            .filter(|s| s.epoch == 1)
            .map(|s| s.loss.total.to_bits())
            .collect();
        let res_ep1: Vec<u64> = resumed.log.iter().map(|s| s.loss.total.to_bits()).collect();
        assert_eq!(full_ep1, res_ep1);

        // mismatched config digest is rejected
        let mut other = run.clone();
        other.model.m = 4;
        let mut m2 = Model::new(other.model.clone(), 9);
        assert!(ck.restore(&mut m2, &other).is_err());
    }

    #[test]
    fn nan_abort_identifies_batch() {
        let dir = tempfile::tempdir().unwrap();
        let run = tiny_run();
        let (_ann, samples) = tiny_samples(&run, dir.path());
        // a NaN parameter in the confidence-map head poisons the
        // regression loss on the first batch
        let mut model = Model::new(run.model.clone(), 5);
        let idx = model.params.index_of("pem.fc2.b");
        for v in &mut model.params.tensors[idx].data {
            *v = f64::NAN;
        }
        let adam = AdamState::new(&model.params);
        let Err(err) = train(&run, 5, &samples, Some((model, adam, 0)), None) else {
            panic!("NaN loss must abort training");
        };
        match err {
            HarnessError::Train(msg) => assert!(msg.contains("video_"), "message names the batch: {msg}"),
            other => panic!("wrong error {other}"),
        }
    }

    #[test]
    fn action_free_videos_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let run = tiny_run();
        let (_ann, mut samples) = tiny_samples(&run, dir.path());
        for s in &mut samples {
            s.gts.clear();
        }
        assert!(matches!(train(&run, 5, &samples, None, None), Err(HarnessError::Data(_))));
    }
}
