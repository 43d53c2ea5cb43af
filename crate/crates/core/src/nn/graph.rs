//! Reverse-mode differentiation over a small set of image ops.
//!
//! A [`Graph`] records one forward pass. Parameters are read from a borrowed
//! [`ParamStore`]; [`Graph::backward`] accumulates their gradients into a
//! [`Grads`] buffer.

use crate::tensor::Tensor;

use super::params::{Grads, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Conv2d { x: Var, w: ParamId, b: ParamId, k: usize },
    Linear { x: Var, w: ParamId, b: ParamId },
    Add(Var, Var),
    ChannelBias { x: Var, bias: Var },
    Silu(Var),
    Relu(Var),
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Same-padded stride-1 convolution. Weight dims are `[out, in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let wp = self.store.get(w);
        let (out_c, in_c, k) = (wp.dims[0], wp.dims[1], wp.dims[2]);
        let xin = &self.nodes[x.0].value;
        assert_eq!(xin.channels, in_c, "conv2d {}: input channels", wp.name);
        let out = conv_forward(xin, &wp.value, self.store.value(b), out_c, k);
        self.push(out, Op::Conv2d { x, w, b, k })
    }

    /// Dense layer on a vector tensor. Weight dims are `[out, in]`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let wp = self.store.get(w);
        let (out_n, in_n) = (wp.dims[0], wp.dims[1]);
        let xin = &self.nodes[x.0].value;
        assert_eq!(xin.len(), in_n, "linear {}: input size", wp.name);
        let bias = self.store.value(b);
        let data = (0..out_n)
            .map(|o| {
                let row = &wp.value[o * in_n..(o + 1) * in_n];
                bias[o] + row.iter().zip(&xin.data).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        self.push(Tensor::vector(data), Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y).expect("add: shape mismatch");
        self.push(out, Op::Add(a, b))
    }

    /// Adds a per-channel vector `bias` (length = channels of `x`).
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let mut out = self.value(x).clone();
        let bv = &self.nodes[bias.0].value;
        assert_eq!(bv.len(), out.channels, "channel_bias: length");
        for c in 0..out.channels {
            let add = bv.data[c];
            out.channel_mut(c).iter_mut().for_each(|v| *v += add);
        }
        self.push(out, Op::ChannelBias { x, bias })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v / (1.0 + (-v).exp()));
        self.push(out, Op::Silu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let out = avg_pool2(self.value(x));
        self.push(out, Op::AvgPool2(x))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (c, h, w) = t.shape();
        let mut out = Tensor::zeros(c, 2 * h, 2 * w);
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out.data[(ch * 2 * h + y) * 2 * w + xx] = t.at(ch, y / 2, xx / 2);
                }
            }
        }
        self.push(out, Op::Upsample2(x))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let refs: Vec<&Tensor> = parts.iter().map(|v| self.value(*v)).collect();
        let out = Tensor::concat_channels(&refs).expect("concat: spatial mismatch");
        self.push(out, Op::Concat(parts.to_vec()))
    }

    /// Back-propagates `seed` (dLoss/dOutput) from `out`, accumulating
    /// parameter gradients into `grads`.
    pub fn backward(&self, out: Var, seed: Tensor, grads: &mut Grads) {
        let mut g: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        g[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let Some(go) = g[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Conv2d { x, w, b, k } => {
                    let xin = &self.nodes[x.0].value;
                    let wv = self.store.value(*w);
                    let need_input = !matches!(self.nodes[x.0].op, Op::Input);
                    let (gw_b, gx) = conv_backward(xin, wv, &go, *k, need_input);
                    for (dst, src) in grads.get_mut(*w).iter_mut().zip(&gw_b.0) {
                        *dst += src;
                    }
                    for (dst, src) in grads.get_mut(*b).iter_mut().zip(&gw_b.1) {
                        *dst += src;
                    }
                    if let Some(gx) = gx {
                        accumulate(&mut g, *x, gx);
                    }
                }
                Op::Linear { x, w, b } => {
                    let xin = &self.nodes[x.0].value;
                    let in_n = xin.len();
                    let wv = self.store.value(*w);
                    {
                        let gw = grads.get_mut(*w);
                        for (o, &go_o) in go.data.iter().enumerate() {
                            for i in 0..in_n {
                                gw[o * in_n + i] += go_o * xin.data[i];
                            }
                        }
                    }
                    for (dst, src) in grads.get_mut(*b).iter_mut().zip(&go.data) {
                        *dst += src;
                    }
                    let mut gx = vec![0.0; in_n];
                    for (o, &go_o) in go.data.iter().enumerate() {
                        for i in 0..in_n {
                            gx[i] += go_o * wv[o * in_n + i];
                        }
                    }
                    accumulate(&mut g, *x, Tensor::vector(gx));
                }
                Op::Add(a, b) => {
                    accumulate(&mut g, *a, go.clone());
                    accumulate(&mut g, *b, go);
                }
                Op::ChannelBias { x, bias } => {
                    let gb = (0..go.channels).map(|c| go.channel(c).iter().sum()).collect();
                    accumulate(&mut g, *bias, Tensor::vector(gb));
                    accumulate(&mut g, *x, go);
                }
                Op::Silu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let gx = go
                        .zip_map(xv, |gv, v| {
                            let s = 1.0 / (1.0 + (-v).exp());
                            gv * (s + v * s * (1.0 - s))
                        })
                        .unwrap();
                    accumulate(&mut g, *x, gx);
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let gx = go.zip_map(xv, |gv, v| if v > 0.0 { gv } else { 0.0 }).unwrap();
                    accumulate(&mut g, *x, gx);
                }
                Op::AvgPool2(x) => {
                    let (c, h, w) = self.nodes[x.0].value.shape();
                    let mut gx = Tensor::zeros(c, h, w);
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                gx.data[(ch * h + y) * w + xx] = 0.25 * go.at(ch, y / 2, xx / 2);
                            }
                        }
                    }
                    accumulate(&mut g, *x, gx);
                }
                Op::Upsample2(x) => {
                    let (c, h, w) = self.nodes[x.0].value.shape();
                    let mut gx = Tensor::zeros(c, h, w);
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                gx.data[(ch * h + y / 2) * w + xx / 2] += go.at(ch, y, xx);
                            }
                        }
                    }
                    accumulate(&mut g, *x, gx);
                }
                Op::Concat(parts) => {
                    let plane = go.plane();
                    let mut offset = 0;
                    for p in parts {
                        let pv = &self.nodes[p.0].value;
                        let n = pv.channels * plane;
                        let part = Tensor {
                            channels: pv.channels,
                            height: pv.height,
                            width: pv.width,
                            data: go.data[offset..offset + n].to_vec(),
                        };
                        offset += n;
                        accumulate(&mut g, *p, part);
                    }
                }
            }
        }
    }
}

fn accumulate(g: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut g[v.0] {
        Some(existing) => existing.data.iter_mut().zip(&t.data).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(t),
    }
}

pub(crate) fn avg_pool2(t: &Tensor) -> Tensor {
    let (c, h, w) = t.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(c, oh, ow);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let s = t.at(ch, 2 * y, 2 * x)
                    + t.at(ch, 2 * y, 2 * x + 1)
                    + t.at(ch, 2 * y + 1, 2 * x)
                    + t.at(ch, 2 * y + 1, 2 * x + 1);
                out.data[(ch * oh + y) * ow + x] = 0.25 * s;
            }
        }
    }
    out
}

/// Valid output range along one axis for kernel offset `d` (in `-p..=p`).
#[inline]
fn span(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d.max(0)).max(lo as isize) as usize;
    (lo, hi)
}

fn conv_forward(x: &Tensor, w: &[f64], b: &[f64], out_c: usize, k: usize) -> Tensor {
    let (in_c, h, wd) = x.shape();
    let p = (k / 2) as isize;
    let mut out = Tensor::zeros(out_c, h, wd);
    let plane = h * wd;
    for o in 0..out_c {
        let dst = &mut out.data[o * plane..(o + 1) * plane];
        dst.iter_mut().for_each(|v| *v = b[o]);
        for i in 0..in_c {
            let src = &x.data[i * plane..(i + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - p;
                let (y0, y1) = span(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - p;
                    let (x0, x1) = span(wd, dx);
                    let wv = w[((o * in_c + i) * k + ky) * k + kx];
                    if wv == 0.0 || x0 >= x1 {
                        continue;
                    }
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let srow = &src[sy * wd + (x0 as isize + dx) as usize..sy * wd + (x1 as isize + dx) as usize];
                        let drow = &mut dst[y * wd + x0..y * wd + x1];
                        for (d, s) in drow.iter_mut().zip(srow) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

type ConvParamGrads = (Vec<f64>, Vec<f64>);

fn conv_backward(
    x: &Tensor,
    w: &[f64],
    go: &Tensor,
    k: usize,
    need_input: bool,
) -> (ConvParamGrads, Option<Tensor>) {
    let (in_c, h, wd) = x.shape();
    let out_c = go.channels;
    let p = (k / 2) as isize;
    let plane = h * wd;
    let mut gw = vec![0.0; w.len()];
    let gb: Vec<f64> = (0..out_c).map(|o| go.channel(o).iter().sum()).collect();
    let mut gx = need_input.then(|| Tensor::zeros(in_c, h, wd));
    for o in 0..out_c {
        let gsrc = &go.data[o * plane..(o + 1) * plane];
        for i in 0..in_c {
            let src = &x.data[i * plane..(i + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - p;
                let (y0, y1) = span(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - p;
                    let (x0, x1) = span(wd, dx);
                    if x0 >= x1 {
                        continue;
                    }
                    let widx = ((o * in_c + i) * k + ky) * k + kx;
                    let wv = w[widx];
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let s0 = sy * wd + (x0 as isize + dx) as usize;
                        let grow = &gsrc[y * wd + x0..y * wd + x1];
                        let srow = &src[s0..s0 + (x1 - x0)];
                        acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                        if let Some(gx) = gx.as_mut() {
                            let drow = &mut gx.data[i * plane + s0..i * plane + s0 + (x1 - x0)];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += wv * gv;
                            }
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    ((gw, gb), gx)
}
