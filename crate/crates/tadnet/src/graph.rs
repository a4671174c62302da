//! Reverse-mode autodiff tape over [`Tensor`] values.
//!
//! Each forward op appends a node holding its value (behind `Rc`, so
//! closures can capture inputs without copying) and a backward closure
//! that maps the output gradient to per-parent gradients. `backward`
//! replays the tape in reverse and accumulates into per-node slots.
//!
//! The op set is exactly what the network needs: dense matmul, strided
//! dilated 1-D convolution, fractional-position column sampling (the ROI
//! and boundary-map gather), row softmax, row layernorm, and pointwise
//! maps. Sampling positions are treated as constants; gradients flow to
//! features only.

use std::rc::Rc;

use crate::tensor::Tensor;

pub type Vid = usize;

type BackFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<Vid>,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: Vid) -> &Tensor {
        &self.nodes[id].value
    }

    fn value_rc(&self, id: Vid) -> Rc<Tensor> {
        Rc::clone(&self.nodes[id].value)
    }

    fn push(&mut self, value: Tensor, parents: Vec<Vid>, back: Option<BackFn>) -> Vid {
        self.nodes.push(Node {
            value: Rc::new(value),
            parents,
            back,
        });
        self.nodes.len() - 1
    }

    /// Leaf with no gradient of interest (inputs, masks, targets).
    pub fn constant(&mut self, t: Tensor) -> Vid {
        self.push(t, vec![], None)
    }

    /// Leaf whose gradient will be read back after `backward`.
    pub fn param(&mut self, t: Tensor) -> Vid {
        self.push(t, vec![], None)
    }

    /// Reverse sweep from a scalar root. Returns one gradient slot per node.
    pub fn backward(&self, root: Vid) -> Vec<Option<Tensor>> {
        assert_eq!(self.value(root).numel(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root] = Some(Tensor::scalar(1.0));
        for i in (0..self.nodes.len()).rev() {
            let Some(og) = grads[i].take() else { continue };
            if let Some(back) = &self.nodes[i].back {
                let pgrads = back(&og);
                debug_assert_eq!(pgrads.len(), self.nodes[i].parents.len());
                for (p, pg) in self.nodes[i].parents.iter().zip(pgrads) {
                    match &mut grads[*p] {
                        Some(acc) => {
                            for (a, b) in acc.data.iter_mut().zip(&pg.data) {
                                *a += b;
                            }
                        }
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[i] = Some(og);
        }
        grads
    }

    // ── pointwise ────────────────────────────────────────────────────

    fn map_unary(
        &mut self,
        a: Vid,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Vid {
        let av = self.value_rc(a);
        let out = Tensor::new(av.data.iter().map(|&x| f(x)).collect(), av.shape.clone());
        let out_rc = Rc::new(out.clone());
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![Tensor::new(
                    av.data
                        .iter()
                        .zip(&out_rc.data)
                        .zip(&g.data)
                        .map(|((&x, &y), &gy)| gy * df(x, y))
                        .collect(),
                    av.shape.clone(),
                )]
            })),
        )
    }

    pub fn relu(&mut self, a: Vid) -> Vid {
        self.map_unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: Vid) -> Vid {
        self.map_unary(
            a,
            |x| 1.0 / (1.0 + (-x).exp()),
            |_, y| y * (1.0 - y),
        )
    }

    pub fn exp(&mut self, a: Vid) -> Vid {
        self.map_unary(a, f64::exp, |_, y| y)
    }

    /// Natural log with a floor to keep losses finite near 0.
    pub fn ln_clamped(&mut self, a: Vid, floor: f64) -> Vid {
        self.map_unary(
            a,
            move |x| x.max(floor).ln(),
            move |x, _| 1.0 / x.max(floor),
        )
    }

    pub fn powf(&mut self, a: Vid, p: f64) -> Vid {
        self.map_unary(
            a,
            move |x| x.powf(p),
            move |x, _| {
                if x == 0.0 && p < 1.0 {
                    0.0
                } else {
                    p * x.powf(p - 1.0)
                }
            },
        )
    }

    /// Elementwise smooth-L1: 0.5 x^2 for |x| < 1, |x| - 0.5 beyond.
    pub fn smooth_l1(&mut self, a: Vid) -> Vid {
        self.map_unary(
            a,
            |x| {
                if x.abs() < 1.0 {
                    0.5 * x * x
                } else {
                    x.abs() - 0.5
                }
            },
            |x, _| x.clamp(-1.0, 1.0),
        )
    }

    pub fn scale(&mut self, a: Vid, c: f64) -> Vid {
        self.map_unary(a, move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&mut self, a: Vid, c: f64) -> Vid {
        self.map_unary(a, move |x| x + c, |_, _| 1.0)
    }

    fn map_binary(
        &mut self,
        a: Vid,
        b: Vid,
        f: impl Fn(f64, f64) -> f64,
        dfa: impl Fn(f64, f64) -> f64 + 'static,
        dfb: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Vid {
        let av = self.value_rc(a);
        let bv = self.value_rc(b);
        assert_eq!(av.shape, bv.shape, "elementwise shape mismatch");
        let out = Tensor::new(
            av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect(),
            av.shape.clone(),
        );
        let (av2, bv2) = (Rc::clone(&av), Rc::clone(&bv));
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                let ga = Tensor::new(
                    av2.data
                        .iter()
                        .zip(&bv2.data)
                        .zip(&g.data)
                        .map(|((&x, &y), &gy)| gy * dfa(x, y))
                        .collect(),
                    av2.shape.clone(),
                );
                let gb = Tensor::new(
                    av2.data
                        .iter()
                        .zip(&bv2.data)
                        .zip(&g.data)
                        .map(|((&x, &y), &gy)| gy * dfb(x, y))
                        .collect(),
                    bv2.shape.clone(),
                );
                vec![ga, gb]
            })),
        )
    }

    pub fn add(&mut self, a: Vid, b: Vid) -> Vid {
        self.map_binary(a, b, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&mut self, a: Vid, b: Vid) -> Vid {
        self.map_binary(a, b, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&mut self, a: Vid, b: Vid) -> Vid {
        self.map_binary(a, b, |x, y| x * y, |_, y| y, |x, _| x)
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum(&mut self, a: Vid) -> Vid {
        let av = self.value_rc(a);
        let out = Tensor::scalar(av.data.iter().sum());
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![Tensor::full(&av.shape, g.data[0])]
            })),
        )
    }

    pub fn mean(&mut self, a: Vid) -> Vid {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    // ── linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Vid, b: Vid) -> Vid {
        let av = self.value_rc(a);
        let bv = self.value_rc(b);
        let out = av.matmul(&bv);
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                vec![g.matmul(&bv.transpose()), av.transpose().matmul(g)]
            })),
        )
    }

    pub fn transpose(&mut self, a: Vid) -> Vid {
        let av = self.value_rc(a);
        let out = av.transpose();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| vec![g.transpose()])),
        )
    }

    /// x (m x n) + row vector b (n), broadcast over rows.
    pub fn add_row_broadcast(&mut self, x: Vid, b: Vid) -> Vid {
        let xv = self.value_rc(x);
        let bv = self.value_rc(b);
        let (m, n) = (xv.rows(), xv.cols());
        assert_eq!(bv.numel(), n);
        let mut out = xv.as_ref().clone();
        for i in 0..m {
            for j in 0..n {
                out.data[i * n + j] += bv.data[j];
            }
        }
        self.push(
            out,
            vec![x, b],
            Some(Box::new(move |g| {
                let mut gb = Tensor::zeros(&[n]);
                for i in 0..m {
                    for j in 0..n {
                        gb.data[j] += g.data[i * n + j];
                    }
                }
                vec![g.clone(), gb]
            })),
        )
    }

    /// x @ w + b with b broadcast over rows.
    pub fn linear(&mut self, x: Vid, w: Vid, b: Vid) -> Vid {
        let y = self.matmul(x, w);
        self.add_row_broadcast(y, b)
    }

    pub fn reshape(&mut self, a: Vid, shape: Vec<usize>) -> Vid {
        let av = self.value_rc(a);
        assert_eq!(av.numel(), shape.iter().product::<usize>());
        let out = Tensor::new(av.data.clone(), shape);
        let orig = av.shape.clone();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![Tensor::new(g.data.clone(), orig.clone())]
            })),
        )
    }

    pub fn concat_rows(&mut self, a: Vid, b: Vid) -> Vid {
        let av = self.value_rc(a);
        let bv = self.value_rc(b);
        assert_eq!(av.cols(), bv.cols());
        let (ma, mb, n) = (av.rows(), bv.rows(), av.cols());
        let mut data = av.data.clone();
        data.extend_from_slice(&bv.data);
        let out = Tensor::matrix(ma + mb, n, data);
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                vec![
                    Tensor::matrix(ma, n, g.data[..ma * n].to_vec()),
                    Tensor::matrix(mb, n, g.data[ma * n..].to_vec()),
                ]
            })),
        )
    }

    pub fn concat_cols(&mut self, a: Vid, b: Vid) -> Vid {
        let ta = self.transpose(a);
        let tb = self.transpose(b);
        let cat = self.concat_rows(ta, tb);
        self.transpose(cat)
    }

    pub fn slice_cols(&mut self, a: Vid, from: usize, to: usize) -> Vid {
        let av = self.value_rc(a);
        let (m, n) = (av.rows(), av.cols());
        assert!(from < to && to <= n);
        let w = to - from;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&av.data[i * n + from..i * n + to]);
        }
        let out = Tensor::matrix(m, w, data);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut ga = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    for j in 0..w {
                        ga.data[i * n + from + j] = g.data[i * w + j];
                    }
                }
                vec![ga]
            })),
        )
    }

    pub fn slice_rows(&mut self, a: Vid, from: usize, to: usize) -> Vid {
        let av = self.value_rc(a);
        let (m, n) = (av.rows(), av.cols());
        assert!(from < to && to <= m);
        let out = Tensor::matrix(to - from, n, av.data[from * n..to * n].to_vec());
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut ga = Tensor::zeros(&[m, n]);
                ga.data[from * n..to * n].copy_from_slice(&g.data);
                vec![ga]
            })),
        )
    }

    // ── row softmax / layernorm ──────────────────────────────────────

    pub fn softmax_rows(&mut self, a: Vid) -> Vid {
        let av = self.value_rc(a);
        let (m, n) = (av.rows(), av.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let row = &av.data[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out.data[i * n + j] = e;
                s += e;
            }
            for j in 0..n {
                out.data[i * n + j] /= s;
            }
        }
        let yv = Rc::new(out.clone());
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut ga = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    let y = &yv.data[i * n..(i + 1) * n];
                    let gr = &g.data[i * n..(i + 1) * n];
                    let dot: f64 = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        ga.data[i * n + j] = y[j] * (gr[j] - dot);
                    }
                }
                vec![ga]
            })),
        )
    }

    /// Per-row layer normalization with learned gain and bias (length n).
    pub fn layernorm_rows(&mut self, x: Vid, gain: Vid, bias: Vid) -> Vid {
        const EPS: f64 = 1e-5;
        let xv = self.value_rc(x);
        let gv = self.value_rc(gain);
        let bv = self.value_rc(bias);
        let (m, n) = (xv.rows(), xv.cols());
        assert_eq!(gv.numel(), n);
        assert_eq!(bv.numel(), n);
        let mut xhat = Tensor::zeros(&[m, n]);
        let mut inv_std = vec![0.0; m];
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let row = &xv.data[i * n..(i + 1) * n];
            let mu: f64 = row.iter().sum::<f64>() / n as f64;
            let var: f64 = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let istd = 1.0 / (var + EPS).sqrt();
            inv_std[i] = istd;
            for j in 0..n {
                let xh = (row[j] - mu) * istd;
                xhat.data[i * n + j] = xh;
                out.data[i * n + j] = gv.data[j] * xh + bv.data[j];
            }
        }
        let xhat = Rc::new(xhat);
        let gv2 = Rc::clone(&gv);
        self.push(
            out,
            vec![x, gain, bias],
            Some(Box::new(move |g| {
                let mut gx = Tensor::zeros(&[m, n]);
                let mut ggain = Tensor::zeros(&[n]);
                let mut gbias = Tensor::zeros(&[n]);
                for i in 0..m {
                    let xh = &xhat.data[i * n..(i + 1) * n];
                    let gr = &g.data[i * n..(i + 1) * n];
                    let mut sum_gg = 0.0;
                    let mut sum_ggx = 0.0;
                    for j in 0..n {
                        let gg = gr[j] * gv2.data[j];
                        sum_gg += gg;
                        sum_ggx += gg * xh[j];
                        ggain.data[j] += gr[j] * xh[j];
                        gbias.data[j] += gr[j];
                    }
                    let mean_gg = sum_gg / n as f64;
                    let mean_ggx = sum_ggx / n as f64;
                    for j in 0..n {
                        let gg = gr[j] * gv2.data[j];
                        gx.data[i * n + j] = (gg - mean_gg - xh[j] * mean_ggx) * inv_std[i];
                    }
                }
                vec![gx, ggain, gbias]
            })),
        )
    }

    // ── 1-D convolution ──────────────────────────────────────────────

    /// Batched temporal convolution.
    ///
    /// x: (B, C_in, L) — rank-2 input is treated as B=1.
    /// w: (C_out, C_in, k), b: (C_out).
    /// Padding keeps `ceil(L/stride)` output length (same padding).
    pub fn conv1d(&mut self, x: Vid, w: Vid, b: Vid, stride: usize, dilation: usize) -> Vid {
        let xv = self.value_rc(x);
        let wv = self.value_rc(w);
        let bv = self.value_rc(b);
        let (bs, cin, l) = match xv.shape.len() {
            2 => (1, xv.shape[0], xv.shape[1]),
            3 => (xv.shape[0], xv.shape[1], xv.shape[2]),
            _ => panic!("conv1d expects rank-2 or rank-3 input"),
        };
        let (cout, cin_w, k) = (wv.shape[0], wv.shape[1], wv.shape[2]);
        assert_eq!(cin, cin_w, "conv1d channel mismatch");
        assert_eq!(bv.numel(), cout);
        let span = dilation * (k - 1);
        let lo = l.div_ceil(stride);
        // left pad to center the receptive field
        let pad = span / 2;
        let out_shape: Vec<usize> = if xv.shape.len() == 2 {
            vec![cout, lo]
        } else {
            vec![bs, cout, lo]
        };
        let mut out = Tensor::zeros(&out_shape);
        for bi in 0..bs {
            for co in 0..cout {
                for t in 0..lo {
                    let mut acc = bv.data[co];
                    let base = t * stride;
                    for ci in 0..cin {
                        let xrow = &xv.data[(bi * cin + ci) * l..(bi * cin + ci + 1) * l];
                        let wrow = &wv.data[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                        for kk in 0..k {
                            let pos = base as isize + (kk * dilation) as isize - pad as isize;
                            if pos >= 0 && (pos as usize) < l {
                                acc += wrow[kk] * xrow[pos as usize];
                            }
                        }
                    }
                    out.data[(bi * cout + co) * lo + t] = acc;
                }
            }
        }
        let xshape = xv.shape.clone();
        self.push(
            out,
            vec![x, w, b],
            Some(Box::new(move |g| {
                let mut gx = Tensor::zeros(&xshape);
                let mut gw = Tensor::zeros(&[cout, cin, k]);
                let mut gb = Tensor::zeros(&[cout]);
                for bi in 0..bs {
                    for co in 0..cout {
                        for t in 0..lo {
                            let gy = g.data[(bi * cout + co) * lo + t];
                            if gy == 0.0 {
                                continue;
                            }
                            gb.data[co] += gy;
                            let base = t * stride;
                            for ci in 0..cin {
                                for kk in 0..k {
                                    let pos =
                                        base as isize + (kk * dilation) as isize - pad as isize;
                                    if pos >= 0 && (pos as usize) < l {
                                        let xi = (bi * cin + ci) * l + pos as usize;
                                        gw.data[(co * cin + ci) * k + kk] += gy * xv.data[xi];
                                        gx.data[xi] += gy * wv.data[(co * cin + ci) * k + kk];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![gx, gw, gb]
            })),
        )
    }

    // ── fractional column sampling ───────────────────────────────────

    /// Linear interpolation of the columns of x (C x L) at fractional
    /// positions (clamped to [0, L-1]). Output is C x P. Positions are
    /// constants; no gradient flows to them.
    pub fn interp_cols(&mut self, x: Vid, positions: &[f64]) -> Vid {
        let xv = self.value_rc(x);
        let (c, l) = (xv.rows(), xv.cols());
        let p = positions.len();
        // precompute (left index, right weight) per position
        let lut: Vec<(usize, f64)> = positions
            .iter()
            .map(|&u| {
                let u = u.clamp(0.0, (l - 1) as f64);
                let j = if l >= 2 { (u.floor() as usize).min(l - 2) } else { 0 };
                (j, u - j as f64)
            })
            .collect();
        let mut out = Tensor::zeros(&[c, p]);
        for ci in 0..c {
            let row = &xv.data[ci * l..(ci + 1) * l];
            for (pi, &(j, fr)) in lut.iter().enumerate() {
                let right = if j + 1 < l { row[j + 1] } else { row[j] };
                out.data[ci * p + pi] = row[j] * (1.0 - fr) + right * fr;
            }
        }
        let lut2 = lut.clone();
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g| {
                let mut gx = Tensor::zeros(&[c, l]);
                for ci in 0..c {
                    for (pi, &(j, fr)) in lut2.iter().enumerate() {
                        let gy = g.data[ci * p + pi];
                        gx.data[ci * l + j] += gy * (1.0 - fr);
                        if j + 1 < l {
                            gx.data[ci * l + j + 1] += gy * fr;
                        }
                    }
                }
                vec![gx]
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Central finite-difference check of d(sum of f's scalar output)/d(leaf).
    fn fd_check(build: impl Fn(&mut Graph, &[Tensor]) -> Vid, leaves: Vec<Tensor>, tol: f64) {
        let mut g = Graph::new();
        let ids: Vec<Vid> = leaves.iter().map(|t| g.param(t.clone())).collect();
        let root = build(&mut g, &leaves);
        let grads = g.backward(root);
        let eps = 1e-5;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads[ids[li]]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(&leaf.shape));
            for ei in 0..leaf.numel() {
                let eval = |delta: f64| {
                    let mut g2 = Graph::new();
                    let mut l2 = leaves.clone();
                    l2[li].data[ei] += delta;
                    for t in &l2 {
                        g2.param(t.clone());
                    }
                    let r = build(&mut g2, &l2);
                    g2.value(r).item()
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let a = analytic.data[ei];
                let denom = fd.abs().max(a.abs()).max(1e-6);
                assert!(
                    (fd - a).abs() / denom < tol,
                    "leaf {} entry {}: analytic {} vs fd {}",
                    li,
                    ei,
                    a,
                    fd
                );
            }
        }
    }

    fn rng_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::new(
            (0..shape.iter().product::<usize>())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
            shape.to_vec(),
        )
    }

    #[test]
    fn fd_pointwise_and_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rng_tensor(&mut rng, &[3, 4]);
        let b = rng_tensor(&mut rng, &[3, 4]);
        fd_check(
            |g, _| {
                let x = 0;
                let y = 1;
                let s = g.sigmoid(x);
                let r = g.relu(y);
                let m = g.mul(s, r);
                let e = g.exp(m);
                let sc = g.scale(e, 0.3);
                g.sum(sc)
            },
            vec![a, b],
            1e-5,
        );
    }

    #[test]
    fn fd_matmul_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rng_tensor(&mut rng, &[3, 5]);
        let w = rng_tensor(&mut rng, &[5, 4]);
        let b = rng_tensor(&mut rng, &[4]);
        fd_check(
            |g, _| {
                let y = g.linear(0, 1, 2);
                let sm = g.softmax_rows(y);
                let ln = g.ln_clamped(sm, 1e-12);
                let m = g.mean(ln);
                g.scale(m, -1.0)
            },
            vec![x, w, b],
            1e-4,
        );
    }

    #[test]
    fn fd_conv1d_strided_dilated() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rng_tensor(&mut rng, &[2, 3, 9]);
        let w = rng_tensor(&mut rng, &[4, 3, 3]);
        let b = rng_tensor(&mut rng, &[4]);
        for (stride, dil) in [(1, 1), (2, 1), (1, 2)] {
            fd_check(
                move |g, _| {
                    let y = g.conv1d(0, 1, 2, stride, dil);
                    let r = g.relu(y);
                    g.sum(r)
                },
                vec![x.clone(), w.clone(), b.clone()],
                1e-5,
            );
        }
    }

    #[test]
    fn conv1d_same_length_at_stride_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 10]));
        let w = g.constant(Tensor::zeros(&[5, 3, 3]));
        let b = g.constant(Tensor::zeros(&[5]));
        let y = g.conv1d(x, w, b, 1, 1);
        assert_eq!(g.value(y).shape, vec![5, 10]);
    }

    #[test]
    fn fd_layernorm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rng_tensor(&mut rng, &[3, 6]);
        let gain = rng_tensor(&mut rng, &[6]);
        let bias = rng_tensor(&mut rng, &[6]);
        fd_check(
            |g, _| {
                let y = g.layernorm_rows(0, 1, 2);
                let s = g.sigmoid(y);
                g.sum(s)
            },
            vec![x, gain, bias],
            1e-4,
        );
    }

    #[test]
    fn fd_interp_slices_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rng_tensor(&mut rng, &[3, 8]);
        let y = rng_tensor(&mut rng, &[3, 8]);
        fd_check(
            |g, _| {
                let s = g.interp_cols(0, &[0.0, 1.5, 3.25, 6.9, 7.0]);
                let t = g.interp_cols(1, &[2.5, 4.5, 0.1, 5.0, 6.99]);
                let c = g.concat_cols(s, t);
                let sl = g.slice_cols(c, 1, 9);
                let sr = g.slice_rows(sl, 0, 2);
                g.sum(sr)
            },
            vec![x, y],
            1e-5,
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rng_tensor(&mut rng, &[4, 7]);
        let mut g = Graph::new();
        let xi = g.constant(x);
        let y = g.softmax_rows(xi);
        for i in 0..4 {
            let s: f64 = g.value(y).data[i * 7..(i + 1) * 7].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn interp_at_integer_positions_is_exact() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 5, (0..10).map(|v| v as f64).collect()));
        let y = g.interp_cols(x, &[0.0, 2.0, 4.0]);
        assert_eq!(g.value(y).data, vec![0.0, 2.0, 4.0, 5.0, 7.0, 9.0]);
    }
}
