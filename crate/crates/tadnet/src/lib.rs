//! Unified temporal action detection in one network: boundary-matching
//! proposal generation, context-adaptive proposal classification, and
//! fake-proposal boundary refinement, trained with a multi-task loss.
//!
//! The crate ships the full desk-scale stack: the model itself (built on
//! a small reverse-mode tape in [`graph`]), a synthetic data generator,
//! a training/inference harness, and a tIoU-mAP evaluator.

pub mod backbone;
pub mod cls_head;
pub mod domain;
pub mod graph;
pub mod harness;
pub mod infer_eval;
pub mod losses;
pub mod model;
pub mod pc_sampler;
pub mod proposal_gen;
pub mod refine;
pub mod tensor;
