//! Parameter store, initialization, and the assembled network.
//!
//! Parameters live in a flat named list. Every forward pass registers
//! them on a fresh tape ([`Params::bind`]) and modules look ids up by
//! name through the returned [`Binding`].

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{self, ContextRegistry};
use crate::cls_head;
use crate::domain::{FeatureSequence, ModelConfig, Proposal};
use crate::graph::{Graph, Vid};
use crate::pc_sampler::LabeledProposalBatch;
use crate::proposal_gen::{self, BmCells, BmMapOutput, BoundaryProbs};
use crate::refine;
use crate::tensor::Tensor;

/// Named trainable tensors with an L2-decay mask (biases and norm gains
/// excluded from regularization).
#[derive(Clone)]
pub struct Params {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
    pub decay: Vec<bool>,
    index: BTreeMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Params {
            names: Vec::new(),
            tensors: Vec::new(),
            decay: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, t: Tensor, decay: bool) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
        self.decay.push(decay);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[self.index[name]]
    }

    pub fn index_of(&self, name: &str) -> usize {
        self.index[name]
    }

    /// Register every tensor on the tape; ids are parallel to `tensors`.
    pub fn bind(&self, g: &mut Graph) -> Binding {
        let ids = self.tensors.iter().map(|t| g.param(t.clone())).collect();
        Binding { ids, index: self.index.clone() }
    }

    /// Sum of squares over decaying parameters (the L2 term operand).
    pub fn l2_sum(&self) -> f64 {
        self.tensors
            .iter()
            .zip(&self.decay)
            .filter(|(_, d)| **d)
            .flat_map(|(t, _)| t.data.iter())
            .map(|v| v * v)
            .sum()
    }
}

impl Default for Params {
    fn default() -> Self {
        Self::new()
    }
}

/// Tape-side view of a [`Params`] set.
pub struct Binding {
    pub ids: Vec<Vid>,
    index: BTreeMap<String, usize>,
}

impl Binding {
    pub fn id(&self, name: &str) -> Vid {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn vid(&self, name: &str) -> Vid {
        self.ids[self.id(name)]
    }
}

/// Initializer utilities shared by the module param builders.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn gaussian(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                // Box-Muller
                let u1: f64 = self.rng.gen_range(1e-12..1.0);
                let u2: f64 = self.rng.gen_range(0.0..1.0);
                std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        Tensor::new(data, shape.to_vec())
    }

    /// He-style fan-in scaling for conv (C_out, C_in, k) and linear (in, out).
    pub fn conv(&mut self, cout: usize, cin: usize, k: usize) -> Tensor {
        let std = (2.0 / (cin * k) as f64).sqrt();
        self.gaussian(&[cout, cin, k], std)
    }

    pub fn linear(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let std = (2.0 / fan_in as f64).sqrt();
        self.gaussian(&[fan_in, fan_out], std)
    }
}

/// All raw per-video outputs of the network needed by losses and inference.
pub struct ForwardOutputs {
    pub shared: Vid,
    pub boundary: BoundaryProbs,
    pub bm: BmMapOutput,
}

/// The assembled network: config + parameters + the BM cell layout.
pub struct Model {
    pub cfg: ModelConfig,
    pub params: Params,
    pub cells: BmCells,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        cfg.validate().expect("invalid model config");
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SEED_SALT);
        let mut init = Init { rng: &mut rng };
        let mut p = Params::new();
        let registry = ContextRegistry::builtin();
        backbone::init_params(&cfg, &mut p, &mut init, &registry);
        proposal_gen::init_params(&cfg, &mut p, &mut init);
        cls_head::init_params(&cfg, &mut p, &mut init);
        refine::init_params(&cfg, &mut p, &mut init);
        let cells = BmCells::new(cfg.l_shared());
        Model { cfg, params: p, cells }
    }

    /// Shared trunk + both proposal-generation heads.
    pub fn forward_trunk(&self, g: &mut Graph, bind: &Binding, x: &FeatureSequence, aux: Option<&FeatureSequence>) -> ForwardOutputs {
        let registry = ContextRegistry::builtin();
        let shared = match (self.cfg.auxiliary, aux) {
            (true, Some(a)) => backbone::auxiliary_combine(g, bind, &self.cfg, &registry, x, a),
            (false, _) => backbone::base_forward(g, bind, &self.cfg, &registry, x, "base"),
            (true, None) => panic!("auxiliary mode requires a second stream"),
        };
        let boundary = proposal_gen::tem_forward(g, bind, &self.cfg, shared);
        let bm = proposal_gen::pem_forward(g, bind, &self.cfg, &self.cells, shared);
        ForwardOutputs { shared, boundary, bm }
    }

    /// Classification logits (N x 2M) for a sampled proposal batch.
    pub fn forward_classifier(&self, g: &mut Graph, bind: &Binding, shared: Vid, batch: &LabeledProposalBatch) -> Vid {
        cls_head::classify_batch(g, bind, &self.cfg, shared, batch)
    }

    /// Refinement offsets (K x 2) for a proposal list.
    pub fn forward_refiner(&self, g: &mut Graph, bind: &Binding, shared: Vid, proposals: &[Proposal]) -> Vid {
        refine::refine_forward(g, bind, &self.cfg, shared, proposals)
    }
}

const SEED_SALT: u64 = 0x7ad_de7;
