//! Base module: maps input feature sequences to shared features, plus
//! the dual-stream auxiliary combiner.
//!
//! The local-context block after the first convolution is a strategy
//! behind [`ContextBlock`], registered by name in [`ContextRegistry`]
//! and selected through `ModelConfig::context_block`, so a different
//! context aggregator can be slotted in without touching the trunk.

use crate::domain::{FeatureSequence, ModelConfig};
use crate::graph::{Graph, Vid};
use crate::model::{Binding, Init, Params};

/// A swappable temporal-context aggregator operating on C_h x L features.
pub trait ContextBlock {
    fn name(&self) -> &'static str;
    /// Register this block's parameters under `prefix`.
    fn init_params(&self, cfg: &ModelConfig, prefix: &str, params: &mut Params, init: &mut Init);
    /// Forward; must preserve the temporal length.
    fn forward(&self, g: &mut Graph, bind: &Binding, prefix: &str, x: Vid) -> Vid;
}

/// Two parallel temporal convolutions (kernel 3, dilations 1 and 2)
/// summed with a residual connection.
struct DilatedResidual;

impl ContextBlock for DilatedResidual {
    fn name(&self) -> &'static str {
        "dilated_residual"
    }

    fn init_params(&self, cfg: &ModelConfig, prefix: &str, params: &mut Params, init: &mut Init) {
        let c = cfg.c_h;
        params.add(&format!("{prefix}.d1.w"), init.conv(c, c, 3), true);
        params.add(&format!("{prefix}.d1.b"), crate::tensor::Tensor::zeros(&[c]), false);
        params.add(&format!("{prefix}.d2.w"), init.conv(c, c, 3), true);
        params.add(&format!("{prefix}.d2.b"), crate::tensor::Tensor::zeros(&[c]), false);
    }

    fn forward(&self, g: &mut Graph, bind: &Binding, prefix: &str, x: Vid) -> Vid {
        let b1 = g.conv1d(
            x,
            bind.vid(&format!("{prefix}.d1.w")),
            bind.vid(&format!("{prefix}.d1.b")),
            1,
            1,
        );
        let b2 = g.conv1d(
            x,
            bind.vid(&format!("{prefix}.d2.w")),
            bind.vid(&format!("{prefix}.d2.b")),
            1,
            2,
        );
        let s = g.add(b1, b2);
        let r = g.add(x, s);
        g.relu(r)
    }
}

/// Single plain convolution, the cheapest variant.
struct PlainConv;

impl ContextBlock for PlainConv {
    fn name(&self) -> &'static str {
        "conv"
    }

    fn init_params(&self, cfg: &ModelConfig, prefix: &str, params: &mut Params, init: &mut Init) {
        let c = cfg.c_h;
        params.add(&format!("{prefix}.w"), init.conv(c, c, 3), true);
        params.add(&format!("{prefix}.b"), crate::tensor::Tensor::zeros(&[c]), false);
    }

    fn forward(&self, g: &mut Graph, bind: &Binding, prefix: &str, x: Vid) -> Vid {
        let y = g.conv1d(
            x,
            bind.vid(&format!("{prefix}.w")),
            bind.vid(&format!("{prefix}.b")),
            1,
            1,
        );
        g.relu(y)
    }
}

/// Pass-through, for ablating the context block entirely.
struct Identity;

impl ContextBlock for Identity {
    fn name(&self) -> &'static str {
        "identity"
    }

    fn init_params(&self, _: &ModelConfig, _: &str, _: &mut Params, _: &mut Init) {}

    fn forward(&self, _: &mut Graph, _: &Binding, _: &str, x: Vid) -> Vid {
        x
    }
}

/// Name-keyed set of available context blocks.
pub struct ContextRegistry {
    blocks: Vec<Box<dyn ContextBlock>>,
}

impl ContextRegistry {
    pub fn builtin() -> Self {
        ContextRegistry {
            blocks: vec![Box::new(DilatedResidual), Box::new(PlainConv), Box::new(Identity)],
        }
    }

    pub fn get(&self, name: &str) -> &dyn ContextBlock {
        self.blocks
            .iter()
            .find(|b| b.name() == name)
            .unwrap_or_else(|| panic!("unknown context block '{name}'"))
            .as_ref()
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.blocks.iter().map(|b| b.name()).collect()
    }
}

fn stream_prefixes(cfg: &ModelConfig) -> Vec<(&'static str, usize)> {
    if cfg.auxiliary {
        vec![("base", cfg.c_in), ("base_aux", cfg.c_in)]
    } else {
        vec![("base", cfg.c_in)]
    }
}

pub fn init_params(cfg: &ModelConfig, params: &mut Params, init: &mut Init, registry: &ContextRegistry) {
    let block = registry.get(&cfg.context_block);
    for (prefix, c_in) in stream_prefixes(cfg) {
        params.add(&format!("{prefix}.conv.w"), init.conv(cfg.c_h, c_in, 3), true);
        params.add(&format!("{prefix}.conv.b"), crate::tensor::Tensor::zeros(&[cfg.c_h]), false);
        block.init_params(cfg, &format!("{prefix}.ctx"), params, init);
    }
}

/// conv(k3) -> relu -> context block; temporal length preserved.
pub fn base_forward(
    g: &mut Graph,
    bind: &Binding,
    cfg: &ModelConfig,
    registry: &ContextRegistry,
    x: &FeatureSequence,
    prefix: &str,
) -> Vid {
    assert_eq!(
        x.channels(),
        g.value(bind.vid(&format!("{prefix}.conv.w"))).shape[1],
        "input channel count does not match base-module parameters"
    );
    let xin = g.constant(x.data.clone());
    let y = g.conv1d(
        xin,
        bind.vid(&format!("{prefix}.conv.w")),
        bind.vid(&format!("{prefix}.conv.b")),
        1,
        1,
    );
    let y = g.relu(y);
    registry.get(&cfg.context_block).forward(g, bind, &format!("{prefix}.ctx"), y)
}

/// Two streams through separate base modules, concatenated along the
/// temporal axis (length 2L).
pub fn auxiliary_combine(
    g: &mut Graph,
    bind: &Binding,
    cfg: &ModelConfig,
    registry: &ContextRegistry,
    main: &FeatureSequence,
    aux: &FeatureSequence,
) -> Vid {
    assert_eq!(main.len(), aux.len(), "both streams must be resized to the same L");
    let a = base_forward(g, bind, cfg, registry, main, "base");
    let b = base_forward(g, bind, cfg, registry, aux, "base_aux");
    g.concat_cols(a, b)
}
