//! Context-adaptive proposal classification: ROI extraction, residual
//! encoder, Middle-LN self/cross attention decoder blocks, FFN, and the
//! 2M-way classifier.
//!
//! The Middle-LN layer normalizes the attention output BEFORE the
//! residual add: out = LN(MHA(Q,K,V)) + Q.

use crate::domain::{ModelConfig, Segment};
use crate::graph::{Graph, Vid};
use crate::model::{Binding, Init, Params};
use crate::pc_sampler::LabeledProposalBatch;
use crate::tensor::Tensor;

/// Registers Q/K/V/output projections plus layer-norm gain/bias under
/// `prefix`. `d_q_in` / `d_kv_in` are the incoming widths; `d` is the
/// attention width (and the residual width).
pub fn init_attention_params(
    params: &mut Params,
    init: &mut Init,
    prefix: &str,
    d_q_in: usize,
    d_kv_in: usize,
    d: usize,
) {
    params.add(&format!("{prefix}.wq"), init.linear(d_q_in, d), true);
    params.add(&format!("{prefix}.wk"), init.linear(d_kv_in, d), true);
    params.add(&format!("{prefix}.wv"), init.linear(d_kv_in, d), true);
    params.add(&format!("{prefix}.wo"), init.linear(d, d), true);
    params.add(&format!("{prefix}.ln.g"), Tensor::full(&[d], 1.0), false);
    params.add(&format!("{prefix}.ln.b"), Tensor::zeros(&[d]), false);
}

/// Scaled dot-product multi-head attention. q: n_q x d_q_in,
/// k/v: n_k x d_kv_in; returns n_q x d.
pub fn multi_head_attention(
    g: &mut Graph,
    bind: &Binding,
    prefix: &str,
    q: Vid,
    k: Vid,
    v: Vid,
    heads: usize,
) -> Vid {
    let qp = g.matmul(q, bind.vid(&format!("{prefix}.wq")));
    let kp = g.matmul(k, bind.vid(&format!("{prefix}.wk")));
    let vp = g.matmul(v, bind.vid(&format!("{prefix}.wv")));
    let d = g.value(qp).cols();
    assert_eq!(d % heads, 0);
    let dh = d / heads;
    let mut parts = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(qp, h * dh, (h + 1) * dh);
        let kh = g.slice_cols(kp, h * dh, (h + 1) * dh);
        let vh = g.slice_cols(vp, h * dh, (h + 1) * dh);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax_rows(scaled);
        parts.push(g.matmul(attn, vh));
    }
    let mut cat = parts[0];
    for &p in &parts[1..] {
        cat = g.concat_cols(cat, p);
    }
    g.matmul(cat, bind.vid(&format!("{prefix}.wo")))
}

/// out = LN(MHA(Q,K,V)) + Q.
pub fn middle_ln_attention(
    g: &mut Graph,
    bind: &Binding,
    prefix: &str,
    q: Vid,
    k: Vid,
    v: Vid,
    heads: usize,
) -> Vid {
    let a = multi_head_attention(g, bind, prefix, q, k, v, heads);
    let n = g.layernorm_rows(
        a,
        bind.vid(&format!("{prefix}.ln.g")),
        bind.vid(&format!("{prefix}.ln.b")),
    );
    g.add(n, q)
}

pub fn init_params(cfg: &ModelConfig, params: &mut Params, init: &mut Init) {
    let c = cfg.c_h;
    for i in 0..3 {
        params.add(&format!("cls.enc{i}.conv.w"), init.conv(c, c, 3), true);
        params.add(&format!("cls.enc{i}.conv.b"), Tensor::zeros(&[c]), false);
        params.add(&format!("cls.enc{i}.proj.w"), init.conv(c, c, 1), true);
        params.add(&format!("cls.enc{i}.proj.b"), Tensor::zeros(&[c]), false);
    }
    let flat = (cfg.t / 8) * c; // three stride-2 halvings leave T/8 columns
    params.add("cls.proj.w", init.linear(flat, cfg.d_model), true);
    params.add("cls.proj.b", Tensor::zeros(&[cfg.d_model]), false);
    for l in 0..2 {
        init_attention_params(params, init, &format!("cls.dec{l}.self"), cfg.d_model, cfg.d_model, cfg.d_model);
        init_attention_params(params, init, &format!("cls.dec{l}.cross"), cfg.d_model, cfg.c_h, cfg.d_model);
        params.add(&format!("cls.dec{l}.ffn.w1"), init.linear(cfg.d_model, 4 * cfg.d_model), true);
        params.add(&format!("cls.dec{l}.ffn.b1"), Tensor::zeros(&[4 * cfg.d_model]), false);
        params.add(&format!("cls.dec{l}.ffn.w2"), init.linear(4 * cfg.d_model, cfg.d_model), true);
        params.add(&format!("cls.dec{l}.ffn.b2"), Tensor::zeros(&[cfg.d_model]), false);
    }
    params.add("cls.out.w", init.gaussian(&[cfg.d_model, 2 * cfg.m], 0.01), true);
    params.add("cls.out.b", Tensor::zeros(&[2 * cfg.m]), false);
}

/// Center-rule sampling positions: t samples uniformly spanning the
/// segment, exact at integer columns when the span covers the whole
/// sequence with t = L_s.
pub fn roi_positions(seg: Segment, t: usize) -> Vec<f64> {
    let w = seg.duration();
    (0..t)
        .map(|i| seg.start() + (i as f64 + 0.5) * w / t as f64 - 0.5)
        .collect()
}

/// One C_h x T tensor per segment, linearly interpolated from the shared
/// features. Segments are assumed pre-clamped to [0, L_s].
pub fn roi_extract(g: &mut Graph, shared: Vid, segments: &[Segment], t: usize) -> Vec<Vid> {
    segments
        .iter()
        .map(|&seg| g.interp_cols(shared, &roi_positions(seg, t)))
        .collect()
}

/// Three stride-2 residual conv blocks (16 -> 8 -> 4 -> 2), then flatten
/// to one row per proposal: N x (2 * C_h).
pub fn encode(g: &mut Graph, bind: &Binding, rois: &[Vid]) -> Vid {
    let rows: Vec<Vid> = rois
        .iter()
        .map(|&roi| {
            let mut x = roi;
            for i in 0..3 {
                let y = g.conv1d(
                    x,
                    bind.vid(&format!("cls.enc{i}.conv.w")),
                    bind.vid(&format!("cls.enc{i}.conv.b")),
                    2,
                    1,
                );
                let short = g.conv1d(
                    x,
                    bind.vid(&format!("cls.enc{i}.proj.w")),
                    bind.vid(&format!("cls.enc{i}.proj.b")),
                    2,
                    1,
                );
                let s = g.add(y, short);
                x = g.relu(s);
            }
            let c = g.value(x).rows();
            let t = g.value(x).cols();
            let flat = g.transpose(x); // t x c so time-major flatten
            g.reshape(flat, vec![1, t * c])
        })
        .collect();
    let mut out = rows[0];
    for &r in &rows[1..] {
        out = g.concat_rows(out, r);
    }
    out
}

/// Sinusoidal positional encoding over clip index, L x d.
pub fn positional_encoding(l: usize, d: usize) -> Tensor {
    let mut out = Tensor::zeros(&[l, d]);
    for pos in 0..l {
        for i in 0..d {
            let rate = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let angle = pos as f64 * rate;
            out.data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

/// Self-attention over proposals, cross-attention from proposals to all
/// clips, then a two-layer FFN.
pub fn decoder_block(
    g: &mut Graph,
    bind: &Binding,
    cfg: &ModelConfig,
    block: usize,
    p: Vid,
    shared: Vid,
) -> Vid {
    let p_self = middle_ln_attention(g, bind, &format!("cls.dec{block}.self"), p, p, p, cfg.heads);
    let p_cross = if cfg.use_cross_attention {
        let tokens = g.transpose(shared); // L_s x C_h
        let keys = if cfg.use_positional_keys {
            let pe = positional_encoding(g.value(tokens).rows(), cfg.c_h);
            let pe = g.constant(pe);
            g.add(tokens, pe)
        } else {
            tokens
        };
        middle_ln_attention(
            g,
            bind,
            &format!("cls.dec{block}.cross"),
            p_self,
            keys,
            tokens,
            cfg.heads,
        )
    } else {
        p_self
    };
    let h = g.linear(
        p_cross,
        bind.vid(&format!("cls.dec{block}.ffn.w1")),
        bind.vid(&format!("cls.dec{block}.ffn.b1")),
    );
    let h = g.relu(h);
    g.linear(
        h,
        bind.vid(&format!("cls.dec{block}.ffn.w2")),
        bind.vid(&format!("cls.dec{block}.ffn.b2")),
    )
}

/// Single linear projection to 2M logits.
pub fn classify(g: &mut Graph, bind: &Binding, p: Vid) -> Vid {
    g.linear(p, bind.vid("cls.out.w"), bind.vid("cls.out.b"))
}

/// Full head: ROI -> encoder -> projection -> 2 decoder blocks -> logits.
pub fn classify_batch(
    g: &mut Graph,
    bind: &Binding,
    cfg: &ModelConfig,
    shared: Vid,
    batch: &LabeledProposalBatch,
) -> Vid {
    let segments: Vec<Segment> = batch.proposals.iter().map(|p| p.segment).collect();
    classify_segments(g, bind, cfg, shared, &segments)
}

pub fn classify_segments(
    g: &mut Graph,
    bind: &Binding,
    cfg: &ModelConfig,
    shared: Vid,
    segments: &[Segment],
) -> Vid {
    let rois = roi_extract(g, shared, segments, cfg.t);
    let enc = encode(g, bind, &rois);
    let mut p = g.linear(enc, bind.vid("cls.proj.w"), bind.vid("cls.proj.b"));
    for block in 0..2 {
        p = decoder_block(g, bind, cfg, block, p, shared);
    }
    classify(g, bind, p)
}
