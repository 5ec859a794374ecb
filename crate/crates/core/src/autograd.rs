//! A small reverse-mode tape over dense `f64` buffers.
//!
//! Values are row-major. Two-dimensional activations are `[channels, length]`;
//! convolution kernels are `[out, in, width]`. The tape records only the
//! operations the denoiser needs, each with a hand-written adjoint.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Position on the tape; indexes the buffers returned by [`Tape::backward`].
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Silu { x: Var },
    Add { a: Var, b: Var },
    Film { x: Var, ss: Var },
    ScaleChannels { x: Var, s: Var },
    Linear { x: Var, w: Var, b: Var },
    EmbedMean { table: Var, ids: Vec<usize> },
    Concat { parts: Vec<Var> },
    Upsample2 { x: Var },
    Transpose { x: Var },
    MatMul { a: Var, b: Var },
    Scale { x: Var, s: f64 },
    SoftmaxRows { x: Var },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
}

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { value, shape, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Vec<f64>, shape: &[usize]) -> Var {
        assert_eq!(value.len(), shape.iter().product::<usize>(), "leaf shape");
        self.push(value, shape.to_vec(), Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let s = &self.nodes[v.0].shape;
        assert_eq!(s.len(), 2, "expected a 2-d value, got {s:?}");
        (s[0], s[1])
    }

    /// 1D convolution with zero padding: `x [cin, L]`, `w [cout, cin, k]`, `b [cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (cin, len) = self.dims2(x);
        let ws = self.shape(w).to_vec();
        let (cout, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], cin, "conv input channels");
        let lout = (len + 2 * pad - k) / stride + 1;
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let mut y = vec![0.0; cout * lout];
        for o in 0..cout {
            let yrow = &mut y[o * lout..(o + 1) * lout];
            yrow.fill(bv[o]);
            for c in 0..cin {
                let xrow = &xv[c * len..(c + 1) * len];
                for kk in 0..k {
                    let wk = wv[(o * cin + c) * k + kk];
                    let (lo, hi) = tap_range(lout, len, stride, kk, pad);
                    if stride == 1 {
                        let off = kk as isize - pad as isize;
                        let xs = &xrow[(lo as isize + off) as usize..(hi as isize + off) as usize];
                        for (yv, xv) in yrow[lo..hi].iter_mut().zip(xs) {
                            *yv += wk * xv;
                        }
                    } else {
                        for l in lo..hi {
                            yrow[l] += wk * xrow[l * stride + kk - pad];
                        }
                    }
                }
            }
        }
        self.push(y, vec![cout, lout], Op::Conv1d { x, w, b, stride, pad })
    }

    /// Group normalization over `[C, L]` with per-channel affine parameters.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let (c, len) = self.dims2(x);
        assert_eq!(c % groups, 0, "channels divisible by groups");
        let per = c / groups;
        let n = (per * len) as f64;
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; c * len];
        let mut rstd = vec![0.0; groups];
        let mut y = vec![0.0; c * len];
        for grp in 0..groups {
            let span = grp * per * len..(grp + 1) * per * len;
            let xs = &xv[span.clone()];
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let r = 1.0 / (var + NORM_EPS).sqrt();
            rstd[grp] = r;
            for (i, idx) in span.enumerate() {
                let ch = idx / len;
                let h = (xs[i] - mean) * r;
                xhat[idx] = h;
                y[idx] = h * g[ch] + b[ch];
            }
        }
        self.push(y, vec![c, len], Op::GroupNorm { x, gamma, beta, groups, xhat, rstd })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let y = self.value(x).iter().map(|&v| v * sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(y, shape, Op::Silu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let y = self.value(a).iter().zip(self.value(b)).map(|(p, q)| p + q).collect();
        let shape = self.shape(a).to_vec();
        self.push(y, shape, Op::Add { a, b })
    }

    /// Feature-wise affine modulation: `x[c, l] · (1 + ss[c]) + ss[C + c]`.
    pub fn film(&mut self, x: Var, ss: Var) -> Var {
        let (c, len) = self.dims2(x);
        assert_eq!(self.value(ss).len(), 2 * c, "film vector length");
        let xv = self.value(x);
        let s = self.value(ss);
        let mut y = vec![0.0; c * len];
        for ch in 0..c {
            let (scale, shift) = (1.0 + s[ch], s[c + ch]);
            for l in 0..len {
                y[ch * len + l] = xv[ch * len + l] * scale + shift;
            }
        }
        self.push(y, vec![c, len], Op::Film { x, ss })
    }

    /// Per-channel gain: `x[c, l] · s[c]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Var {
        let (c, len) = self.dims2(x);
        assert_eq!(self.value(s).len(), c, "channel gain length");
        let xv = self.value(x);
        let sv = self.value(s);
        let y = (0..c * len).map(|i| xv[i] * sv[i / len]).collect();
        self.push(y, vec![c, len], Op::ScaleChannels { x, s })
    }

    /// Dense layer on a vector: `w [m, n] · x [n] + b [m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let ws = self.shape(w).to_vec();
        let (m, n) = (ws[0], ws[1]);
        assert_eq!(self.value(x).len(), n, "linear input width");
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let y = (0..m)
            .map(|i| bv[i] + wv[i * n..(i + 1) * n].iter().zip(xv).map(|(p, q)| p * q).sum::<f64>())
            .collect();
        self.push(y, vec![m], Op::Linear { x, w, b })
    }

    /// Mean of the table rows selected by `ids`.
    pub fn embed_mean(&mut self, table: Var, ids: &[usize]) -> Var {
        let ts = self.shape(table).to_vec();
        let (rows, width) = (ts[0], ts[1]);
        assert!(!ids.is_empty(), "embed_mean needs at least one id");
        let tv = self.value(table);
        let mut y = vec![0.0; width];
        for &id in ids {
            assert!(id < rows, "embedding id {id} out of range");
            for (acc, v) in y.iter_mut().zip(&tv[id * width..(id + 1) * width]) {
                *acc += v;
            }
        }
        let inv = 1.0 / ids.len() as f64;
        y.iter_mut().for_each(|v| *v *= inv);
        self.push(y, vec![width], Op::EmbedMean { table, ids: ids.to_vec() })
    }

    /// Concatenation along the leading axis (vectors, or `[C, L]` with equal `L`).
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let first = self.shape(parts[0]).to_vec();
        let mut lead = 0;
        let mut y = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s[1..], first[1..], "concat trailing dims");
            lead += s[0];
            y.extend_from_slice(self.value(p));
        }
        let mut shape = first;
        shape[0] = lead;
        self.push(y, shape, Op::Concat { parts: parts.to_vec() })
    }

    /// Nearest-neighbour upsampling by two along the length axis.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (c, len) = self.dims2(x);
        let xv = self.value(x);
        let mut y = vec![0.0; c * len * 2];
        for ch in 0..c {
            for l in 0..len {
                let v = xv[ch * len + l];
                y[ch * 2 * len + 2 * l] = v;
                y[ch * 2 * len + 2 * l + 1] = v;
            }
        }
        self.push(y, vec![c, 2 * len], Op::Upsample2 { x })
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.dims2(x);
        let xv = self.value(x);
        let mut y = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                y[j * r + i] = xv[i * c + j];
            }
        }
        self.push(y, vec![c, r], Op::Transpose { x })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        assert_eq!(k, k2, "matmul inner dims");
        let y = matmul_raw(self.value(a), self.value(b), m, k, n);
        self.push(y, vec![m, n], Op::MatMul { a, b })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let y = self.value(x).iter().map(|v| v * s).collect();
        let shape = self.shape(x).to_vec();
        self.push(y, shape, Op::Scale { x, s })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims2(x);
        let xv = self.value(x);
        let mut y = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                y[i * c + j] = e;
                sum += e;
            }
            y[i * c..(i + 1) * c].iter_mut().for_each(|v| *v /= sum);
        }
        self.push(y, vec![r, c], Op::SoftmaxRows { x })
    }

    /// Propagates `seed` (the gradient of a scalar loss with respect to
    /// `output`) back through the tape. Returns one gradient buffer per node;
    /// nodes the output does not depend on get `None`.
    pub fn backward(&self, output: Var, seed: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        if seed.len() != self.nodes[output.0].value.len() {
            return Err(crate::error::shape_mismatch(self.nodes[output.0].value.len(), seed.len()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed.to_vec());
        for idx in (0..=output.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            if !gy.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient at tape node {idx}")));
            }
            self.backprop_node(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Ok(grads)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let len = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn backprop_node(&self, idx: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d { x, w, b, stride, pad } => {
                let (stride, pad) = (*stride, *pad);
                let xs = &self.nodes[x.0];
                let (cin, len) = (xs.shape[0], xs.shape[1]);
                let ws = &self.nodes[w.0].shape;
                let (cout, k) = (ws[0], ws[2]);
                let lout = node.shape[1];
                let xv = &xs.value;
                let wv = &self.nodes[w.0].value;
                {
                    let gb = self.slot(grads, *b);
                    for o in 0..cout {
                        gb[o] += gy[o * lout..(o + 1) * lout].iter().sum::<f64>();
                    }
                }
                {
                    let gw = self.slot(grads, *w);
                    for o in 0..cout {
                        let grow = &gy[o * lout..(o + 1) * lout];
                        for c in 0..cin {
                            let xrow = &xv[c * len..(c + 1) * len];
                            for kk in 0..k {
                                let (lo, hi) = tap_range(lout, len, stride, kk, pad);
                                let mut s = 0.0;
                                if stride == 1 {
                                    let off = kk as isize - pad as isize;
                                    let xsl = &xrow[(lo as isize + off) as usize..(hi as isize + off) as usize];
                                    for (g, xv) in grow[lo..hi].iter().zip(xsl) {
                                        s += g * xv;
                                    }
                                } else {
                                    for l in lo..hi {
                                        s += grow[l] * xrow[l * stride + kk - pad];
                                    }
                                }
                                gw[(o * cin + c) * k + kk] += s;
                            }
                        }
                    }
                }
                {
                    let gx = self.slot(grads, *x);
                    for o in 0..cout {
                        let grow = &gy[o * lout..(o + 1) * lout];
                        for c in 0..cin {
                            let gxrow = &mut gx[c * len..(c + 1) * len];
                            for kk in 0..k {
                                let wk = wv[(o * cin + c) * k + kk];
                                let (lo, hi) = tap_range(lout, len, stride, kk, pad);
                                if stride == 1 {
                                    let off = kk as isize - pad as isize;
                                    let gxs = &mut gxrow[(lo as isize + off) as usize..(hi as isize + off) as usize];
                                    for (gxv, g) in gxs.iter_mut().zip(&grow[lo..hi]) {
                                        *gxv += wk * g;
                                    }
                                } else {
                                    for l in lo..hi {
                                        gxrow[l * stride + kk - pad] += wk * grow[l];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, xhat, rstd } => {
                let (c, len) = (node.shape[0], node.shape[1]);
                let per = c / groups;
                let n = (per * len) as f64;
                let g = &self.nodes[gamma.0].value;
                {
                    let gg = self.slot(grads, *gamma);
                    for ch in 0..c {
                        gg[ch] += (0..len).map(|l| gy[ch * len + l] * xhat[ch * len + l]).sum::<f64>();
                    }
                }
                {
                    let gbeta = self.slot(grads, *beta);
                    for ch in 0..c {
                        gbeta[ch] += gy[ch * len..(ch + 1) * len].iter().sum::<f64>();
                    }
                }
                let gx = self.slot(grads, *x);
                for grp in 0..*groups {
                    let span = grp * per * len..(grp + 1) * per * len;
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for idx in span.clone() {
                        let d = gy[idx] * g[idx / len];
                        sum_d += d;
                        sum_dx += d * xhat[idx];
                    }
                    let r = rstd[grp];
                    for idx in span {
                        let d = gy[idx] * g[idx / len];
                        gx[idx] += r / n * (n * d - sum_d - xhat[idx] * sum_dx);
                    }
                }
            }
            Op::Silu { x } => {
                let xv = &self.nodes[x.0].value;
                let gx = self.slot(grads, *x);
                for i in 0..xv.len() {
                    let s = sigmoid(xv[i]);
                    gx[i] += gy[i] * s * (1.0 + xv[i] * (1.0 - s));
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    let g = self.slot(grads, v);
                    for (gv, d) in g.iter_mut().zip(gy) {
                        *gv += d;
                    }
                }
            }
            Op::Film { x, ss } => {
                let (c, len) = (node.shape[0], node.shape[1]);
                let xv = &self.nodes[x.0].value;
                let s = &self.nodes[ss.0].value;
                {
                    let gs = self.slot(grads, *ss);
                    for ch in 0..c {
                        let row = ch * len..(ch + 1) * len;
                        gs[ch] += gy[row.clone()].iter().zip(&xv[row.clone()]).map(|(g, x)| g * x).sum::<f64>();
                        gs[c + ch] += gy[row].iter().sum::<f64>();
                    }
                }
                let gx = self.slot(grads, *x);
                for ch in 0..c {
                    let scale = 1.0 + s[ch];
                    for l in 0..len {
                        gx[ch * len + l] += gy[ch * len + l] * scale;
                    }
                }
            }
            Op::ScaleChannels { x, s } => {
                let (c, len) = (node.shape[0], node.shape[1]);
                let xv = &self.nodes[x.0].value;
                let sv = &self.nodes[s.0].value;
                {
                    let gs = self.slot(grads, *s);
                    for ch in 0..c {
                        let row = ch * len..(ch + 1) * len;
                        gs[ch] += gy[row.clone()].iter().zip(&xv[row]).map(|(g, x)| g * x).sum::<f64>();
                    }
                }
                let gx = self.slot(grads, *x);
                for i in 0..c * len {
                    gx[i] += gy[i] * sv[i / len];
                }
            }
            Op::Linear { x, w, b } => {
                let ws = &self.nodes[w.0].shape;
                let (m, n) = (ws[0], ws[1]);
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                {
                    let gb = self.slot(grads, *b);
                    for i in 0..m {
                        gb[i] += gy[i];
                    }
                }
                {
                    let gw = self.slot(grads, *w);
                    for i in 0..m {
                        for j in 0..n {
                            gw[i * n + j] += gy[i] * xv[j];
                        }
                    }
                }
                let gx = self.slot(grads, *x);
                for i in 0..m {
                    for j in 0..n {
                        gx[j] += wv[i * n + j] * gy[i];
                    }
                }
            }
            Op::EmbedMean { table, ids } => {
                let width = node.shape[0];
                let inv = 1.0 / ids.len() as f64;
                let gt = self.slot(grads, *table);
                for &id in ids {
                    for j in 0..width {
                        gt[id * width + j] += gy[j] * inv;
                    }
                }
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    let g = self.slot(grads, p);
                    for (gv, d) in g.iter_mut().zip(&gy[off..off + n]) {
                        *gv += d;
                    }
                    off += n;
                }
            }
            Op::Upsample2 { x } => {
                let (c, len) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let gx = self.slot(grads, *x);
                for ch in 0..c {
                    for l in 0..len {
                        gx[ch * len + l] += gy[ch * 2 * len + 2 * l] + gy[ch * 2 * len + 2 * l + 1];
                    }
                }
            }
            Op::Transpose { x } => {
                let (r, c) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let gx = self.slot(grads, *x);
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += gy[j * r + i];
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                {
                    // dA = dY · Bᵀ
                    let ga = self.slot(grads, *a);
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += gy[i * n + j] * bv[p * n + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                }
                // dB = Aᵀ · dY
                let gb = self.slot(grads, *b);
                for i in 0..m {
                    for p in 0..k {
                        let aval = av[i * k + p];
                        for j in 0..n {
                            gb[p * n + j] += aval * gy[i * n + j];
                        }
                    }
                }
            }
            Op::Scale { x, s } => {
                let gx = self.slot(grads, *x);
                for (gv, d) in gx.iter_mut().zip(gy) {
                    *gv += s * d;
                }
            }
            Op::SoftmaxRows { x } => {
                let (r, c) = (node.shape[0], node.shape[1]);
                let y = &node.value;
                let gx = self.slot(grads, *x);
                for i in 0..r {
                    let row = i * c..(i + 1) * c;
                    let dot: f64 = gy[row.clone()].iter().zip(&y[row.clone()]).map(|(g, v)| g * v).sum();
                    for j in row {
                        gx[j] += y[j] * (gy[j] - dot);
                    }
                }
            }
        }
    }
}

/// Output positions `lo..hi` whose tap `kk` lands inside the input.
fn tap_range(lout: usize, len: usize, stride: usize, kk: usize, pad: usize) -> (usize, usize) {
    // need 0 <= l*stride + kk - pad <= len - 1
    let lo = if pad > kk { (pad - kk).div_ceil(stride) } else { 0 };
    let top = len as isize - 1 + pad as isize - kk as isize;
    if top < 0 {
        return (0, 0);
    }
    let hi = ((top as usize) / stride + 1).min(lout);
    (lo.min(hi), hi)
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut y = vec![0.0; m * n];
    for i in 0..m {
        let yrow = &mut y[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (yv, bv) in yrow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *yv += av * bv;
            }
        }
    }
    y
}
