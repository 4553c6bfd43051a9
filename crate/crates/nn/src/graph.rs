//! Tape-based reverse-mode differentiation over rank-5 `B × C × D × H × W`
//! tensors. Every op appends a node; [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients into every node that requires one.

use crate::error::{NnError, Result};
use crate::kernels::conv::{self, ConvGeom, UpGeom};
use crate::kernels::{norm, pool, Scratch};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Up {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: UpGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<f32>,
        rstd: Vec<f32>,
    },
    LeakyRelu {
        x: Var,
        slope: f32,
    },
    Sigmoid {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    GlobalAvg {
        x: Var,
    },
    GlobalMax {
        x: Var,
        argmax: Vec<u32>,
    },
    ChannelMean {
        x: Var,
    },
    ChannelMax {
        x: Var,
        argmax: Vec<u32>,
    },
    ScaleChannels {
        x: Var,
        a: Var,
    },
    ScaleSpatial {
        x: Var,
        m: Var,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
    scratch: Scratch,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, expected: &[usize], got: &[usize]) -> NnError {
    NnError::ShapeMismatch {
        op,
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

impl Graph {
    /// A graph that records gradients for leaves created with [`Graph::leaf`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
            scratch: Scratch::default(),
        }
    }

    /// A graph where nothing requires a gradient.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            grad: None,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf (a gradient is kept when the graph records).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let record = self.record;
        self.nodes.push(Node {
            value: t,
            grad: None,
            requires_grad: record,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Stride-1 same-padded cubic convolution. `w` is `out × in × k × k × k`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (batch, cin, dims) = self.value(x).dims5()?;
        let ws = self.value(w).shape().to_vec();
        let (cout, k) = match ws[..] {
            [o, i, k0, k1, k2] if i == cin && k0 == k1 && k1 == k2 && k0 % 2 == 1 => (o, k0),
            _ => return Err(shape_err("conv3d", &[0, cin, 3, 3, 3], &ws)),
        };
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(shape_err("conv3d bias", &[cout], self.value(b).shape()));
            }
        }
        let geom = ConvGeom {
            in_ch: cin,
            out_ch: cout,
            kernel: k,
            dims,
        };
        let mut out = Tensor::zeros(&[batch, cout, dims[0], dims[1], dims[2]]);
        for s in 0..batch {
            let bias = b.map(|b| self.nodes[b.0].value.data());
            conv::conv3d_forward(
                self.nodes[x.0].value.sample(s),
                self.nodes[w.0].value.data(),
                bias,
                &geom,
                out.sample_mut(s),
                &mut self.scratch,
            );
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv { x, w, b, geom }, &inputs))
    }

    /// Kernel-2 stride-2 transposed convolution. `w` is `in × out × 2 × 2 × 2`.
    pub fn up_conv(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (batch, cin, dims) = self.value(x).dims5()?;
        let ws = self.value(w).shape().to_vec();
        let cout = match ws[..] {
            [i, o, 2, 2, 2] if i == cin => o,
            _ => return Err(shape_err("up_conv", &[cin, 0, 2, 2, 2], &ws)),
        };
        let geom = UpGeom {
            in_ch: cin,
            out_ch: cout,
            dims,
        };
        let od = geom.out_dims();
        let mut out = Tensor::zeros(&[batch, cout, od[0], od[1], od[2]]);
        for s in 0..batch {
            let bias = b.map(|b| self.nodes[b.0].value.data());
            conv::conv_transpose2_forward(
                self.nodes[x.0].value.sample(s),
                self.nodes[w.0].value.data(),
                bias,
                &geom,
                out.sample_mut(s),
                &mut self.scratch,
            );
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Up { x, w, b, geom }, &inputs))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (batch, c, dims) = self.value(x).dims5()?;
        if dims.iter().any(|v| v % 2 != 0) {
            return Err(NnError::InvalidArgument {
                op: "max_pool2",
                msg: format!("spatial dims {dims:?} must be even"),
            });
        }
        let od = dims.map(|v| v / 2);
        let mut out = Tensor::zeros(&[batch, c, od[0], od[1], od[2]]);
        let per = out.len() / batch;
        let mut argmax = vec![0u32; out.len()];
        for s in 0..batch {
            pool::max_pool2_forward(
                self.nodes[x.0].value.sample(s),
                c,
                dims,
                out.sample_mut(s),
                &mut argmax[s * per..(s + 1) * per],
            );
        }
        Ok(self.push(out, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (batch, c, _) = self.value(x).dims5()?;
        if groups == 0 || c % groups != 0 {
            return Err(NnError::InvalidArgument {
                op: "group_norm",
                msg: format!("{c} channels not divisible into {groups} groups"),
            });
        }
        for p in [gamma, beta] {
            if self.value(p).len() != c {
                return Err(shape_err("group_norm affine", &[c], self.value(p).shape()));
            }
        }
        let mut out = Tensor::zeros(self.value(x).shape());
        let mut mean = vec![0.0; batch * groups];
        let mut rstd = vec![0.0; batch * groups];
        for s in 0..batch {
            norm::group_norm_forward(
                self.nodes[x.0].value.sample(s),
                c,
                groups,
                self.nodes[gamma.0].value.data(),
                self.nodes[beta.0].value.data(),
                out.sample_mut(s),
                &mut mean[s * groups..(s + 1) * groups],
                &mut rstd[s * groups..(s + 1) * groups],
            );
        }
        Ok(self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = if *v > 0.0 { *v } else { *v * slope });
        self.push(out, Op::LeakyRelu { x, slope }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
        self.push(out, Op::Sigmoid { x }, &[x])
    }

    /// Channel-axis concatenation `[a, b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ca, da) = self.value(a).dims5()?;
        let (bb, cb, db) = self.value(b).dims5()?;
        if ba != bb || da != db {
            return Err(shape_err("concat", self.value(a).shape(), self.value(b).shape()));
        }
        let s: usize = da.iter().product();
        let mut data = Vec::with_capacity(ba * (ca + cb) * s);
        for i in 0..ba {
            data.extend_from_slice(self.value(a).sample(i));
            data.extend_from_slice(self.value(b).sample(i));
        }
        let out = Tensor::from_vec(&[ba, ca + cb, da[0], da[1], da[2]], data)?;
        Ok(self.push(out, Op::Concat { a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))?;
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    /// Spatial mean per channel: `B × C × 1 × 1 × 1`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (batch, c, dims) = self.value(x).dims5()?;
        let s: usize = dims.iter().product();
        let data = self
            .value(x)
            .data()
            .chunks(s)
            .map(|ch| (ch.iter().map(|&v| v as f64).sum::<f64>() / s as f64) as f32)
            .collect();
        let out = Tensor::from_vec(&[batch, c, 1, 1, 1], data)?;
        Ok(self.push(out, Op::GlobalAvg { x }, &[x]))
    }

    /// Spatial max per channel: `B × C × 1 × 1 × 1`.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (batch, c, dims) = self.value(x).dims5()?;
        let s: usize = dims.iter().product();
        let mut argmax = Vec::with_capacity(batch * c);
        let mut data = Vec::with_capacity(batch * c);
        for (i, ch) in self.value(x).data().chunks(s).enumerate() {
            let (j, m) = ch.iter().enumerate().fold(
                (0, f32::NEG_INFINITY),
                |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc },
            );
            argmax.push((i * s + j) as u32);
            data.push(m);
        }
        let out = Tensor::from_vec(&[batch, c, 1, 1, 1], data)?;
        Ok(self.push(out, Op::GlobalMax { x, argmax }, &[x]))
    }

    /// Mean over channels: `B × 1 × D × H × W`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (batch, c, dims) = self.value(x).dims5()?;
        let s: usize = dims.iter().product();
        let mut out = Tensor::zeros(&[batch, 1, dims[0], dims[1], dims[2]]);
        for i in 0..batch {
            let src = self.nodes[x.0].value.sample(i);
            let dst = out.sample_mut(i);
            for ch in src.chunks(s) {
                dst.iter_mut().zip(ch).for_each(|(o, v)| *o += v);
            }
            dst.iter_mut().for_each(|o| *o /= c as f32);
        }
        Ok(self.push(out, Op::ChannelMean { x }, &[x]))
    }

    /// Max over channels: `B × 1 × D × H × W`.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let (batch, _, dims) = self.value(x).dims5()?;
        let s: usize = dims.iter().product();
        let mut out = Tensor::full(&[batch, 1, dims[0], dims[1], dims[2]], f32::NEG_INFINITY);
        let mut argmax = vec![0u32; batch * s];
        for i in 0..batch {
            let src = self.nodes[x.0].value.sample(i);
            let dst = out.sample_mut(i);
            for (ci, ch) in src.chunks(s).enumerate() {
                for (v, (o, v_in)) in dst.iter_mut().zip(ch).enumerate() {
                    if *v_in > *o {
                        *o = *v_in;
                        argmax[i * s + v] = ci as u32;
                    }
                }
            }
        }
        Ok(self.push(out, Op::ChannelMax { x, argmax }, &[x]))
    }

    /// `x[b, c, ·] * a[b, c]` with `a` shaped `B × C × 1 × 1 × 1`.
    pub fn scale_channels(&mut self, x: Var, a: Var) -> Result<Var> {
        let (batch, c, dims) = self.value(x).dims5()?;
        if self.value(a).shape() != [batch, c, 1, 1, 1] {
            return Err(shape_err("scale_channels", &[batch, c, 1, 1, 1], self.value(a).shape()));
        }
        let s: usize = dims.iter().product();
        let mut out = self.value(x).clone();
        let av = self.nodes[a.0].value.data();
        for (ch, &w) in out.data_mut().chunks_mut(s).zip(av) {
            ch.iter_mut().for_each(|v| *v *= w);
        }
        Ok(self.push(out, Op::ScaleChannels { x, a }, &[x, a]))
    }

    /// `x[b, c, v] * m[b, v]` with `m` shaped `B × 1 × D × H × W`.
    pub fn scale_spatial(&mut self, x: Var, m: Var) -> Result<Var> {
        let (batch, c, dims) = self.value(x).dims5()?;
        if self.value(m).shape() != [batch, 1, dims[0], dims[1], dims[2]] {
            return Err(shape_err(
                "scale_spatial",
                &[batch, 1, dims[0], dims[1], dims[2]],
                self.value(m).shape(),
            ));
        }
        let s: usize = dims.iter().product();
        let mut out = self.value(x).clone();
        for i in 0..batch {
            let mv = self.nodes[m.0].value.sample(i).to_vec();
            for ch in out.sample_mut(i).chunks_mut(s) {
                ch.iter_mut().zip(&mv).for_each(|(v, w)| *v *= w);
            }
            debug_assert_eq!(out.sample(i).len(), c * s);
        }
        Ok(self.push(out, Op::ScaleSpatial { x, m }, &[x, m]))
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => acc
                .add_assign(&g)
                .expect("gradient shape matches its node by construction"),
            None => node.grad = Some(g),
        }
    }

    /// Back-propagates the given output gradients (`d loss / d var`).
    pub fn backward(&mut self, seeds: Vec<(Var, Tensor)>) -> Result<()> {
        for (v, g) in seeds {
            if g.shape() != self.value(v).shape() {
                return Err(shape_err("backward seed", self.value(v).shape(), g.shape()));
            }
            self.accumulate(v, g);
        }
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = self.nodes[i].grad.take() else {
                continue;
            };
            let grads = self.input_grads(i, &dy);
            self.nodes[i].grad = Some(dy);
            for (v, g) in grads {
                self.accumulate(v, g);
            }
        }
        Ok(())
    }

    fn input_grads(&mut self, i: usize, dy: &Tensor) -> Vec<(Var, Tensor)> {
        let nodes = &self.nodes;
        let scratch = &mut self.scratch;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let (x, w, b) = (*x, *w, *b);
                let batch = val(x).shape()[0];
                let mut dx = wants(x).then(|| Tensor::zeros(val(x).shape()));
                let mut dw = wants(w).then(|| Tensor::zeros(val(w).shape()));
                let mut db = b.filter(|b| wants(*b)).map(|b| Tensor::zeros(val(b).shape()));
                for s in 0..batch {
                    conv::conv3d_backward(
                        val(x).sample(s),
                        val(w).data(),
                        dy.sample(s),
                        geom,
                        dx.as_mut().map(|t| t.sample_mut(s)),
                        dw.as_mut().map(|t| t.data_mut()),
                        db.as_mut().map(|t| t.data_mut()),
                        scratch,
                    );
                }
                out.extend(dx.map(|g| (x, g)));
                out.extend(dw.map(|g| (w, g)));
                if let (Some(b), Some(g)) = (b, db) {
                    out.push((b, g));
                }
            }
            Op::Up { x, w, b, geom } => {
                let (x, w, b) = (*x, *w, *b);
                let batch = val(x).shape()[0];
                let mut dx = wants(x).then(|| Tensor::zeros(val(x).shape()));
                let mut dw = wants(w).then(|| Tensor::zeros(val(w).shape()));
                let mut db = b.filter(|b| wants(*b)).map(|b| Tensor::zeros(val(b).shape()));
                for s in 0..batch {
                    conv::conv_transpose2_backward(
                        val(x).sample(s),
                        val(w).data(),
                        dy.sample(s),
                        geom,
                        dx.as_mut().map(|t| t.sample_mut(s)),
                        dw.as_mut().map(|t| t.data_mut()),
                        db.as_mut().map(|t| t.data_mut()),
                        scratch,
                    );
                }
                out.extend(dx.map(|g| (x, g)));
                out.extend(dw.map(|g| (w, g)));
                if let (Some(b), Some(g)) = (b, db) {
                    out.push((b, g));
                }
            }
            Op::MaxPool { x, argmax } => {
                if wants(*x) {
                    let batch = val(*x).shape()[0];
                    let per = dy.len() / batch;
                    let mut dx = Tensor::zeros(val(*x).shape());
                    for s in 0..batch {
                        pool::max_pool2_backward(dy.sample(s), &argmax[s * per..(s + 1) * per], dx.sample_mut(s));
                    }
                    out.push((*x, dx));
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let (x, gamma, beta, groups) = (*x, *gamma, *beta, *groups);
                let (batch, c, _) = val(x).dims5().expect("rank checked in forward");
                let mut dx = wants(x).then(|| Tensor::zeros(val(x).shape()));
                let mut dg = wants(gamma).then(|| Tensor::zeros(&[c]));
                let mut dbeta = wants(beta).then(|| Tensor::zeros(&[c]));
                for s in 0..batch {
                    norm::group_norm_backward(
                        val(x).sample(s),
                        dy.sample(s),
                        c,
                        groups,
                        val(gamma).data(),
                        &mean[s * groups..(s + 1) * groups],
                        &rstd[s * groups..(s + 1) * groups],
                        dx.as_mut().map(|t| t.sample_mut(s)),
                        dg.as_mut().map(|t| t.data_mut()),
                        dbeta.as_mut().map(|t| t.data_mut()),
                    );
                }
                let gshape = val(gamma).shape().to_vec();
                let bshape = val(beta).shape().to_vec();
                out.extend(dx.map(|g| (x, g)));
                out.extend(dg.map(|g| (gamma, g.reshape(&gshape).expect("same size"))));
                out.extend(dbeta.map(|g| (beta, g.reshape(&bshape).expect("same size"))));
            }
            Op::LeakyRelu { x, slope } => {
                let mut g = dy.clone();
                for (gv, xv) in g.data_mut().iter_mut().zip(val(*x).data()) {
                    if *xv <= 0.0 {
                        *gv *= slope;
                    }
                }
                out.push((*x, g));
            }
            Op::Sigmoid { x } => {
                let mut g = dy.clone();
                for (gv, y) in g.data_mut().iter_mut().zip(nodes[i].value.data()) {
                    *gv *= y * (1.0 - y);
                }
                out.push((*x, g));
            }
            Op::Concat { a, b } => {
                let ca = val(*a).shape()[1];
                let batch = dy.shape()[0];
                let per_a = val(*a).len() / batch;
                let mut ga = Tensor::zeros(val(*a).shape());
                let mut gb = Tensor::zeros(val(*b).shape());
                for s in 0..batch {
                    let src = dy.sample(s);
                    ga.sample_mut(s).copy_from_slice(&src[..per_a]);
                    gb.sample_mut(s).copy_from_slice(&src[per_a..]);
                }
                debug_assert!(ca > 0);
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::Add { a, b } => {
                out.push((*a, dy.clone()));
                out.push((*b, dy.clone()));
            }
            Op::GlobalAvg { x } => {
                let s = val(*x).len() / dy.len();
                let mut g = Tensor::zeros(val(*x).shape());
                for (ch, gy) in g.data_mut().chunks_mut(s).zip(dy.data()) {
                    ch.iter_mut().for_each(|v| *v = gy / s as f32);
                }
                out.push((*x, g));
            }
            Op::GlobalMax { x, argmax } => {
                let mut g = Tensor::zeros(val(*x).shape());
                for (gy, &j) in dy.data().iter().zip(argmax) {
                    g.data_mut()[j as usize] += gy;
                }
                out.push((*x, g));
            }
            Op::ChannelMean { x } => {
                let (batch, c, _) = val(*x).dims5().expect("rank checked in forward");
                let mut g = Tensor::zeros(val(*x).shape());
                for s in 0..batch {
                    let gy = dy.sample(s);
                    for ch in g.sample_mut(s).chunks_mut(gy.len()) {
                        ch.iter_mut().zip(gy).for_each(|(o, v)| *o = v / c as f32);
                    }
                }
                out.push((*x, g));
            }
            Op::ChannelMax { x, argmax } => {
                let batch = val(*x).shape()[0];
                let s = dy.len() / batch;
                let mut g = Tensor::zeros(val(*x).shape());
                for b in 0..batch {
                    let gs = g.sample_mut(b);
                    for v in 0..s {
                        gs[argmax[b * s + v] as usize * s + v] += dy.data()[b * s + v];
                    }
                }
                out.push((*x, g));
            }
            Op::ScaleChannels { x, a } => {
                let s = val(*x).len() / val(*a).len();
                if wants(*x) {
                    let mut g = dy.clone();
                    for (ch, &w) in g.data_mut().chunks_mut(s).zip(val(*a).data()) {
                        ch.iter_mut().for_each(|v| *v *= w);
                    }
                    out.push((*x, g));
                }
                if wants(*a) {
                    let data = dy
                        .data()
                        .chunks(s)
                        .zip(val(*x).data().chunks(s))
                        .map(|(g, xv)| g.iter().zip(xv).map(|(p, q)| p * q).sum())
                        .collect();
                    let g = Tensor::from_vec(val(*a).shape(), data).expect("one value per channel");
                    out.push((*a, g));
                }
            }
            Op::ScaleSpatial { x, m } => {
                let batch = val(*x).shape()[0];
                let s = val(*m).len() / batch;
                if wants(*x) {
                    let mut g = dy.clone();
                    for b in 0..batch {
                        let mv = val(*m).sample(b);
                        for ch in g.sample_mut(b).chunks_mut(s) {
                            ch.iter_mut().zip(mv).for_each(|(v, w)| *v *= w);
                        }
                    }
                    out.push((*x, g));
                }
                if wants(*m) {
                    let mut g = Tensor::zeros(val(*m).shape());
                    for b in 0..batch {
                        let gs = g.sample_mut(b);
                        for (gch, xch) in dy.sample(b).chunks(s).zip(val(*x).sample(b).chunks(s)) {
                            for ((o, p), q) in gs.iter_mut().zip(gch).zip(xch) {
                                *o += p * q;
                            }
                        }
                    }
                    out.push((*m, g));
                }
            }
        }
        out.retain(|(v, _)| wants(*v));
        out
    }
}
