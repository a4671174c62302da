//! Proposal generation: start/end boundary probabilities (TEM), the
//! boundary-matching confidence map (PEM), and decoding into top-K
//! coarse proposals.

use crate::cls_head::{self, middle_ln_attention};
use crate::domain::{ModelConfig, Proposal, Segment};
use crate::graph::{Graph, Vid};
use crate::model::{Binding, Init, Params};
use crate::tensor::Tensor;

/// Valid (duration, start) cells of the boundary-matching map.
///
/// Durations run 1..=L_s, starts 0..=L_s-d, i.e. cell (d, s) scores the
/// candidate segment [s, s+d]. Cells are laid out duration-major.
#[derive(Clone)]
pub struct BmCells {
    pub l_s: usize,
    pub cells: Vec<(usize, usize)>,
    /// (d-1) * l_s + s -> flat cell index, usize::MAX off-mask.
    index: Vec<usize>,
}

impl BmCells {
    pub fn new(l_s: usize) -> Self {
        let mut cells = Vec::new();
        let mut index = vec![usize::MAX; l_s * l_s];
        for d in 1..=l_s {
            for s in 0..=(l_s - d) {
                index[(d - 1) * l_s + s] = cells.len();
                cells.push((d, s));
            }
        }
        BmCells { l_s, cells, index }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cell_index(&self, d: usize, s: usize) -> Option<usize> {
        if d == 0 || d > self.l_s || s + d > self.l_s {
            return None;
        }
        match self.index[(d - 1) * self.l_s + s] {
            usize::MAX => None,
            i => Some(i),
        }
    }

    pub fn valid(&self, d: usize, s: usize) -> bool {
        self.cell_index(d, s).is_some()
    }

    pub fn segment(&self, cell: usize) -> Segment {
        let (d, s) = self.cells[cell];
        Segment::new(s as f64, (s + d) as f64).unwrap()
    }

    /// Exact sampling positions for a cell: linspace(s, s+d, n).
    pub fn sample_positions(d: usize, s: usize, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| s as f64 + d as f64 * i as f64 / (n - 1) as f64)
            .collect()
    }

    /// Materialize a flat per-cell channel into a dense D x L_s matrix,
    /// zero off-mask.
    pub fn to_dense(&self, values: &[f64]) -> Tensor {
        let mut out = Tensor::zeros(&[self.l_s, self.l_s]);
        for (i, &(d, s)) in self.cells.iter().enumerate() {
            out.data[(d - 1) * self.l_s + s] = values[i];
        }
        out
    }
}

/// Tape-side boundary probabilities, each a 1 x L_s row.
pub struct BoundaryProbs {
    pub start: Vid,
    pub end: Vid,
}

/// Tape-side BM map: one (n_cells x 2) matrix, column 0 classification
/// confidence, column 1 regression confidence.
pub struct BmMapOutput {
    pub scores: Vid,
}

pub fn init_params(cfg: &ModelConfig, params: &mut Params, init: &mut Init) {
    // TEM: one self-attention layer over positions, then two conv heads
    cls_head::init_attention_params(params, init, "tem.attn", cfg.c_h, cfg.c_h, cfg.c_h);
    for head in ["start", "end"] {
        params.add(&format!("tem.{head}.w"), init.conv(1, cfg.c_h, 3), true);
        params.add(&format!("tem.{head}.b"), Tensor::zeros(&[1]), false);
    }
    // PEM: 1x1 projection, then a two-layer scorer over sampled columns
    params.add("pem.proj.w", init.conv(cfg.bm_channels, cfg.c_h, 1), true);
    params.add("pem.proj.b", Tensor::zeros(&[cfg.bm_channels]), false);
    let flat = cfg.bm_samples * cfg.bm_channels;
    params.add("pem.fc1.w", init.linear(flat, cfg.bm_hidden), true);
    params.add("pem.fc1.b", Tensor::zeros(&[cfg.bm_hidden]), false);
    params.add("pem.fc2.w", init.linear(cfg.bm_hidden, 2), true);
    params.add("pem.fc2.b", Tensor::zeros(&[2]), false);
}

/// Self-attention over temporal positions, then two sigmoid conv heads.
pub fn tem_forward(g: &mut Graph, bind: &Binding, cfg: &ModelConfig, shared: Vid) -> BoundaryProbs {
    let tokens = g.transpose(shared); // L_s x C_h
    let attended = middle_ln_attention(g, bind, "tem.attn", tokens, tokens, tokens, cfg.heads);
    let feat = g.transpose(attended); // C_h x L_s
    let mut heads = Vec::with_capacity(2);
    for head in ["start", "end"] {
        let y = g.conv1d(
            feat,
            bind.vid(&format!("tem.{head}.w")),
            bind.vid(&format!("tem.{head}.b")),
            1,
            1,
        );
        heads.push(g.sigmoid(y));
    }
    BoundaryProbs { start: heads[0], end: heads[1] }
}

/// Sample every valid cell with `bm_samples` interpolated columns and
/// score it with a shared two-layer stack; two sigmoid channels per cell.
pub fn pem_forward(
    g: &mut Graph,
    bind: &Binding,
    cfg: &ModelConfig,
    cells: &BmCells,
    shared: Vid,
) -> BmMapOutput {
    let proj = g.conv1d(shared, bind.vid("pem.proj.w"), bind.vid("pem.proj.b"), 1, 1);
    let proj = g.relu(proj); // bm_channels x L_s
    let n = cfg.bm_samples;
    let mut positions = Vec::with_capacity(cells.len() * n);
    for &(d, s) in &cells.cells {
        positions.extend(BmCells::sample_positions(d, s, n));
    }
    let sampled = g.interp_cols(proj, &positions); // bm_channels x (cells * n)
    let per_pos = g.transpose(sampled); // (cells * n) x bm_channels
    let flat = g.reshape(per_pos, vec![cells.len(), n * cfg.bm_channels]);
    let h = g.linear(flat, bind.vid("pem.fc1.w"), bind.vid("pem.fc1.b"));
    let h = g.relu(h);
    let y = g.linear(h, bind.vid("pem.fc2.w"), bind.vid("pem.fc2.b"));
    let scores = g.sigmoid(y);
    BmMapOutput { scores }
}

/// Fused per-cell score: geometric mean of the two map channels.
pub fn cell_score(cls: f64, reg: f64) -> f64 {
    (cls * reg).sqrt()
}

fn peak_locations(p: &[f64], fraction: f64) -> Vec<usize> {
    let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = Vec::new();
    for i in 0..p.len() {
        let left = if i > 0 { p[i - 1] } else { f64::NEG_INFINITY };
        let right = if i + 1 < p.len() { p[i + 1] } else { f64::NEG_INFINITY };
        if (p[i] > left && p[i] > right) || p[i] > fraction * max {
            out.push(i);
        }
    }
    out
}

/// Decode boundary probabilities + BM map into exactly K coarse
/// proposals, scored by ps * pe * sqrt(cls * reg), deterministically
/// ordered (score desc, then smaller start, then smaller end).
pub fn decode_proposals(
    p_start: &[f64],
    p_end: &[f64],
    cells: &BmCells,
    cell_scores: &[(f64, f64)],
    cfg: &ModelConfig,
) -> Vec<Proposal> {
    assert_eq!(p_start.len(), cells.l_s);
    assert_eq!(cell_scores.len(), cells.len());
    let starts = peak_locations(p_start, cfg.peak_fraction);
    let ends = peak_locations(p_end, cfg.peak_fraction);

    let mut chosen: Vec<(usize, usize, f64)> = Vec::new();
    let mut taken = vec![false; cells.len()];
    for &s in &starts {
        for &e in &ends {
            if e <= s {
                continue;
            }
            if let Some(ci) = cells.cell_index(e - s, s) {
                if !taken[ci] {
                    taken[ci] = true;
                    let (c, r) = cell_scores[ci];
                    chosen.push((s, e, finite_or_zero(p_start[s] * p_end[e] * cell_score(c, r))));
                }
            }
        }
    }

    sort_candidates(&mut chosen);
    chosen.truncate(cfg.k);

    if chosen.len() < cfg.k {
        // pad with the next-best grid cells by map score
        let mut rest: Vec<(usize, f64)> = (0..cells.len())
            .filter(|&ci| !taken[ci])
            .map(|ci| {
                let (c, r) = cell_scores[ci];
                (ci, finite_or_zero(cell_score(c, r)))
            })
            .collect();
        rest.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap()
                .then_with(|| cells.cells[a.0].1.cmp(&cells.cells[b.0].1))
                .then_with(|| cells.cells[a.0].0.cmp(&cells.cells[b.0].0))
        });
        for (ci, _) in rest {
            if chosen.len() >= cfg.k {
                break;
            }
            let (d, s) = cells.cells[ci];
            let e = s + d;
            let (c, r) = cell_scores[ci];
            chosen.push((s, e, finite_or_zero(p_start[s] * p_end[e.min(cells.l_s - 1)] * cell_score(c, r))));
        }
        sort_candidates(&mut chosen);
    }

    chosen
        .into_iter()
        .map(|(s, e, score)| {
            Proposal::new(
                Segment::new(s as f64, e as f64).unwrap(),
                score.clamp(0.0, 1.0),
            )
        })
        .collect()
}

/// Non-finite map scores (a diverging network mid-training) must not
/// panic the decode sort; they rank last instead.
fn finite_or_zero(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        0.0
    }
}

fn sort_candidates(v: &mut [(usize, usize, f64)]) {
    v.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap()
            .then_with(|| a.0.cmp(&b.0))
            .then_with(|| a.1.cmp(&b.1))
    });
}
