//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation in creation order, which is already
//! a topological order, so [`Graph::backward`] is a single reverse sweep.
//! Parameters enter as leaves holding a copy of their current value; the
//! resulting [`Gradients`] are written back by the caller.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;
use std::rc::Rc;

use super::ops::{self, ConvGeometry};
use super::Parameter;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::volume::TrilinearStencil;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate gradient corruption, used to prove the gradient checker
/// actually detects broken backward passes.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    ConvWeightGrad,
}

enum Op<T> {
    Leaf,
    Conv3d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        geometry: ConvGeometry,
    },
    Relu(NodeId),
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Trilinear {
        volume: NodeId,
        stencil: Rc<TrilinearStencil<T>>,
    },
    ConcatCols(Vec<NodeId>),
    SoftmaxRows(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Rc<[usize]>,
        log_probs: Vec<T>,
    },
    DiceLoss {
        probs: NodeId,
        targets: Rc<[usize]>,
        smooth: T,
    },
    WeightedSum(Vec<(NodeId, T)>),
    Add(NodeId, NodeId),
    UpsampleNearest {
        input: NodeId,
        index: Vec<u32>,
    },
    ChannelsToRows(NodeId),
    Sum(NodeId),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    fault: Option<Fault>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn param(&mut self, p: &Parameter<T>) -> NodeId {
        self.leaf(p.value.clone(), true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn conv3d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
    ) -> Result<NodeId> {
        let g = ops::conv3d_geometry(self.value(input), self.value(weight), self.value(bias), stride)?;
        let out = ops::conv3d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &g,
        );
        let [d, h, w] = g.out_extent;
        let value = Tensor::new(&[g.c_out, d, h, w], out)?;
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(
            value,
            Op::Conv3d {
                input,
                weight,
                bias,
                geometry: g,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let value = Tensor::new(v.shape(), ops::relu(v.data())).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (n, f_in, f_out) = ops::linear_dims(self.value(input), self.value(weight), self.value(bias))?;
        let out = ops::linear_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            n,
            f_in,
            f_out,
        );
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(
            Tensor::new(&[n, f_out], out)?,
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    /// Samples a `(c, d, h, w)` node at the stencil's points → `n x c`.
    pub fn trilinear(&mut self, volume: NodeId, stencil: Rc<TrilinearStencil<T>>) -> Result<NodeId> {
        let (c, extent) = self.value(volume).dims4()?;
        if extent != stencil.extent() {
            return Err(Error::shape("trilinear stencil extent", extent, stencil.extent()));
        }
        let out = stencil.sample(self.value(volume).data(), c);
        let rg = self.rg(&[volume]);
        Ok(self.push(
            Tensor::new(&[stencil.len(), c], out)?,
            Op::Trilinear { volume, stencil },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut rows = None;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if *rows.get_or_insert(r) != r {
                return Err(Error::shape("concat_cols rows", rows.unwrap(), r));
            }
            widths.push(c);
        }
        let n = rows.ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let total: usize = widths.iter().sum();
        let mut out = vec![T::ZERO; n * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..n {
                out[i * total + offset..i * total + offset + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(&[n, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let value = ops::softmax_rows(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SoftmaxRows(x), rg))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, targets: Rc<[usize]>) -> Result<NodeId> {
        let (n, k) = self.value(logits).dims2()?;
        ops::check_targets(n, k, &targets)?;
        let (loss, log_probs) = ops::cross_entropy_raw(self.value(logits).data(), k, &targets);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets,
                log_probs,
            },
            rg,
        ))
    }

    pub fn dice_loss(&mut self, probs: NodeId, targets: Rc<[usize]>, smooth: T) -> Result<NodeId> {
        let (n, k) = self.value(probs).dims2()?;
        ops::check_targets(n, k, &targets)?;
        let sums = ops::dice_sums(self.value(probs).data(), k, &targets);
        let loss = ops::dice_from_sums(&sums, smooth);
        let rg = self.rg(&[probs]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::DiceLoss {
                probs,
                targets,
                smooth,
            },
            rg,
        ))
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, T)]) -> Result<NodeId> {
        let mut acc = T::ZERO;
        for &(id, w) in terms {
            let v = self.value(id);
            if v.len() != 1 {
                return Err(Error::shape("weighted_sum term", [1], v.shape()));
            }
            acc += w * v.item();
        }
        let ids: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::scalar(acc), Op::WeightedSum(terms.to_vec()), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape("add", self.value(a).shape(), self.value(b).shape()));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Nearest upsampling of a `(c, d, h, w)` node to `extent`, with source
    /// index `⌊i·n_src / n_dst⌋` per axis.
    pub fn upsample_nearest(&mut self, input: NodeId, extent: [usize; 3]) -> Result<NodeId> {
        let (c, src) = self.value(input).dims4()?;
        let index = nearest_upsample_index(src, extent);
        let vox_src: usize = src.iter().product();
        let vox_dst: usize = extent.iter().product();
        let data = self.value(input).data();
        let mut out = vec![T::ZERO; c * vox_dst];
        for ch in 0..c {
            let s = &data[ch * vox_src..(ch + 1) * vox_src];
            for (o, &i) in out[ch * vox_dst..(ch + 1) * vox_dst].iter_mut().zip(&index) {
                *o = s[i as usize];
            }
        }
        let rg = self.rg(&[input]);
        Ok(self.push(
            Tensor::new(&[c, extent[0], extent[1], extent[2]], out)?,
            Op::UpsampleNearest { input, index },
            rg,
        ))
    }

    /// `(c, d, h, w)` → `(d·h·w) x c`.
    pub fn channels_to_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, extent) = self.value(x).dims4()?;
        let vox: usize = extent.iter().product();
        let data = self.value(x).data();
        let mut out = vec![T::ZERO; c * vox];
        for ch in 0..c {
            for i in 0..vox {
                out[i * c + ch] = data[ch * vox + i];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[vox, c], out)?, Op::ChannelsToRows(x), rg))
    }

    /// Sum of all entries.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(total), Op::Sum(x), rg))
    }

    /// Hash of the activation pattern of every ReLU. Two evaluations with
    /// equal signatures lie on the same linear piece of the network.
    pub fn relu_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            if let Op::Relu(_) = node.op {
                for chunk in node.value.data().chunks(64) {
                    let mut bits = 0u64;
                    for (i, &v) in chunk.iter().enumerate() {
                        if v > T::ZERO {
                            bits |= 1 << i;
                        }
                    }
                    h.write_u64(bits);
                }
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward root", [1], self.value(root).shape()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::ONE]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[id.0].requires_grad {
                return;
            }
            let buf = grads[id.0].get_or_insert_with(|| vec![T::ZERO; nodes[id.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d {
                input,
                weight,
                bias,
                geometry,
            } => {
                let mut cg = ops::conv3d_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    geometry,
                    self.needs(*input),
                );
                if self.fault == Some(Fault::ConvWeightGrad) {
                    for v in cg.weight.iter_mut() {
                        *v *= T::from_f64(1.01);
                    }
                }
                acc(*weight, &mut |buf| add_into(buf, &cg.weight));
                acc(*bias, &mut |buf| add_into(buf, &cg.bias));
                if let Some(gi) = &cg.input {
                    acc(*input, &mut |buf| add_into(buf, gi));
                }
            }
            Op::Relu(x) => {
                let y = node.value.data();
                acc(*x, &mut |buf| {
                    for ((b, &gy), &yv) in buf.iter_mut().zip(g).zip(y) {
                        if yv > T::ZERO {
                            *b += gy;
                        }
                    }
                });
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n, f_in) = x.dims2().expect("checked at build");
                let f_out = w.shape()[1];
                acc(*weight, &mut |buf| {
                    T::gemm(true, false, f_in, n, f_out, T::ONE, x.data(), g, T::ONE, buf);
                });
                acc(*bias, &mut |buf| {
                    for row in g.chunks_exact(f_out) {
                        add_into(buf, row);
                    }
                });
                acc(*input, &mut |buf| {
                    T::gemm(false, true, n, f_out, f_in, T::ONE, g, w.data(), T::ONE, buf);
                });
            }
            Op::Trilinear { volume, stencil } => {
                let c = node.value.shape()[1];
                acc(*volume, &mut |buf| stencil.scatter(g, c, buf));
            }
            Op::ConcatCols(parts) => {
                let (n, total) = node.value.dims2().expect("rank 2");
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    acc(p, &mut |buf| {
                        for i in 0..n {
                            let src = &g[i * total + offset..i * total + offset + w];
                            add_into(&mut buf[i * w..(i + 1) * w], src);
                        }
                    });
                    offset += w;
                }
            }
            Op::SoftmaxRows(x) => {
                let k = node.value.shape()[1];
                let y = node.value.data();
                acc(*x, &mut |buf| {
                    for ((b, gy), yr) in buf.chunks_exact_mut(k).zip(g.chunks_exact(k)).zip(y.chunks_exact(k)) {
                        let dot: T = gy.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..k {
                            b[j] += yr[j] * (gy[j] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                log_probs,
            } => {
                let k = self.value(*logits).shape()[1];
                let scale = g[0] / T::from_f64(targets.len() as f64);
                acc(*logits, &mut |buf| {
                    for ((b, lp), &t) in buf.chunks_exact_mut(k).zip(log_probs.chunks_exact(k)).zip(targets.iter()) {
                        for j in 0..k {
                            b[j] += scale * lp[j].exp();
                        }
                        b[t] -= scale;
                    }
                });
            }
            Op::DiceLoss {
                probs,
                targets,
                smooth,
            } => {
                let p = self.value(*probs);
                let k = p.shape()[1];
                let sums = ops::dice_sums(p.data(), k, targets);
                let two = T::from_f64(2.0);
                let scale = -g[0] / T::from_f64(k as f64);
                // d term_c / d p_ic = (2·y_ic·den − num) / den²
                let coef: Vec<(T, T)> = sums
                    .iter()
                    .map(|&(inter, ps, ys)| {
                        let den = ps + ys + *smooth;
                        if den > T::ZERO {
                            let num = two * inter + *smooth;
                            (two / den, num / (den * den))
                        } else {
                            (T::ZERO, T::ZERO)
                        }
                    })
                    .collect();
                acc(*probs, &mut |buf| {
                    for (b, &t) in buf.chunks_exact_mut(k).zip(targets.iter()) {
                        for j in 0..k {
                            b[j] -= scale * coef[j].1;
                        }
                        b[t] += scale * coef[t].0;
                    }
                });
            }
            Op::WeightedSum(terms) => {
                for &(id, w) in terms {
                    acc(id, &mut |buf| buf[0] += w * g[0]);
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| add_into(buf, g));
            }
            Op::UpsampleNearest { input, index } => {
                let (c, src) = self.value(*input).dims4().expect("rank 4");
                let vox_src: usize = src.iter().product();
                let vox_dst = index.len();
                acc(*input, &mut |buf| {
                    for ch in 0..c {
                        let dst = &mut buf[ch * vox_src..(ch + 1) * vox_src];
                        for (&i, &gv) in index.iter().zip(&g[ch * vox_dst..(ch + 1) * vox_dst]) {
                            dst[i as usize] += gv;
                        }
                    }
                });
            }
            Op::ChannelsToRows(x) => {
                let (c, extent) = self.value(*x).dims4().expect("rank 4");
                let vox: usize = extent.iter().product();
                acc(*x, &mut |buf| {
                    for ch in 0..c {
                        for i in 0..vox {
                            buf[ch * vox + i] += g[i * c + ch];
                        }
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |buf| {
                    for b in buf.iter_mut() {
                        *b += g[0];
                    }
                });
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Flat source index for every destination voxel of a nearest upsampling.
pub fn nearest_upsample_index(src: [usize; 3], dst: [usize; 3]) -> Vec<u32> {
    let map = |i: usize, a: usize| (i * src[a] / dst[a]).min(src[a] - 1);
    let mut index = Vec::with_capacity(dst.iter().product());
    for d in 0..dst[0] {
        for h in 0..dst[1] {
            for w in 0..dst[2] {
                let (sd, sh, sw) = (map(d, 0), map(h, 1), map(w, 2));
                index.push(((sd * src[1] + sh) * src[2] + sw) as u32);
            }
        }
    }
    index
}

/// Gradients produced by one backward sweep, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Copies the gradient of `id` into `p.grad`, or zeroes it when the node
    /// did not receive any gradient.
    pub fn write_to(&self, id: NodeId, p: &mut Parameter<T>) {
        match self.get(id) {
            Some(g) => p.grad.copy_from_slice(g),
            None => p.grad.fill(T::ZERO),
        }
    }
}
