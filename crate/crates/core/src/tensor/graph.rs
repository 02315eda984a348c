use std::sync::atomic::{AtomicU64, Ordering};

use super::conv::{self, ConvGeometry, ConvGrads};
use super::kernels::{self, NormStats};
use super::{gemm, numel, Element, MatRef, Tensor};
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Relu(usize),
    Sum(usize),
    MaxLast {
        input: usize,
        argmax: Vec<usize>,
    },
    LogSumExpLast(usize),
    Concat {
        inputs: Vec<usize>,
        outer: usize,
        widths: Vec<usize>,
    },
    Conv3d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geom: ConvGeometry,
    },
    InstanceNorm {
        input: usize,
        scale: usize,
        shift: usize,
        stats: NormStats<T>,
    },
    Upsample {
        input: usize,
        outer: usize,
        dims: [usize; 3],
        factor: [usize; 3],
    },
    Linear {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        rows: usize,
        d_in: usize,
        d_out: usize,
    },
    MatmulNt {
        a: usize,
        b: usize,
        n: usize,
        m: usize,
        d: usize,
    },
    L2Normalize {
        input: usize,
        norms: Vec<T>,
    },
    GatherVoxels {
        input: usize,
        index: Vec<[usize; 4]>,
    },
    Take {
        input: usize,
        index: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The tape: an append-only record of executed ops.
///
/// Nodes are stored in execution order, so every node appears after the nodes
/// producing its inputs and a reverse scan visits each one exactly once.
#[derive(Debug)]
pub struct Graph<T: Element = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    graph: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the output w.r.t. `var`, if it was on the differentiable path.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        if var.graph != self.graph {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        if var.graph != self.graph {
            return None;
        }
        self.grads.get_mut(var.index).and_then(Option::take)
    }
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn spatial3(shape: &[usize], what: &str) -> Result<(usize, usize, [usize; 3])> {
    match *shape {
        [b, c, x, y, z] => Ok((b, c, [x, y, z])),
        _ => Err(Error::contract(format!(
            "{what} expects a [batch, ch, X, Y, Z] tensor, got {shape:?}"
        ))),
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn var(&self, index: usize) -> Var {
        Var {
            graph: self.id,
            index,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::contract("variable is not recorded on this graph"));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.var(self.nodes.len() - 1)
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.idx(v).expect("foreign variable")].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.idx(v).expect("foreign variable")].requires_grad
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<(usize, usize, Tensor<T>)> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape() != vb.shape() {
            return Err(Error::contract(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((ia, ib, Tensor::new(va.shape().to_vec(), data)?))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, out) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(ia, ib), &[ia, ib]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, out) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(ia, ib), &[ia, ib]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, out) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(ia, ib), &[ia, ib]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let c = T::from_f64(factor);
        let out = self.nodes[ia].value.map(|v| v * c);
        Ok(self.push(out, Op::Scale(ia, c), &[ia]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(|v| if v > T::zero() { v } else { T::zero() });
        Ok(self.push(out, Op::Relu(ia), &[ia]))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = Tensor::scalar(self.nodes[ia].value.sum());
        Ok(self.push(out, Op::Sum(ia), &[ia]))
    }

    fn split_last(&self, ia: usize, what: &str) -> Result<(Vec<usize>, usize)> {
        let shape = self.nodes[ia].value.shape();
        match shape.split_last() {
            Some((&w, rest)) if w > 0 => Ok((rest.to_vec(), w)),
            _ => Err(Error::contract(format!("{what}: needs a non-empty trailing axis, got {shape:?}"))),
        }
    }

    /// Maximum over the trailing axis.
    pub fn max_last(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let (rest, w) = self.split_last(ia, "max_last")?;
        let mut argmax = Vec::new();
        let mut data = Vec::new();
        for row in self.nodes[ia].value.data().chunks_exact(w) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            argmax.push(best);
            data.push(row[best]);
        }
        let out = Tensor::new(rest, data)?;
        Ok(self.push(out, Op::MaxLast { input: ia, argmax }, &[ia]))
    }

    /// `log(sum(exp(x)))` over the trailing axis, computed with max subtraction.
    /// Entries equal to `-inf` contribute nothing and receive zero gradient.
    pub fn logsumexp_last(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let (rest, w) = self.split_last(ia, "logsumexp_last")?;
        let data = kernels::logsumexp_rows(self.nodes[ia].value.data(), w);
        let out = Tensor::new(rest, data)?;
        Ok(self.push(out, Op::LogSumExpLast(ia), &[ia]))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let idx = parts.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let first = self
            .nodes
            .get(*idx.first().ok_or_else(|| Error::contract("concat of nothing"))?)
            .map(|n| n.value.shape().to_vec())
            .unwrap_or_default();
        if axis >= first.len() {
            return Err(Error::contract(format!("concat axis {axis} out of range for {first:?}")));
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut widths = Vec::with_capacity(idx.len());
        let mut total = 0;
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(Error::contract(format!("concat: incompatible shapes {first:?} and {s:?}")));
            }
            widths.push(s[axis] * inner);
            total += s[axis];
        }
        let row: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (&i, &w) in idx.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[i].value.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        let op = Op::Concat {
            inputs: idx.clone(),
            outer,
            widths,
        };
        Ok(self.push(out, op, &idx))
    }

    /// 3D cross-correlation: input `[B, Cin, X, Y, Z]`, weight `[Cout, Cin, kx, ky, kz]`.
    pub fn conv3d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Var> {
        let (ii, iw) = (self.idx(input)?, self.idx(weight)?);
        let ib = bias.map(|b| self.idx(b)).transpose()?;
        let (batch, in_ch, dims) = spatial3(self.nodes[ii].value.shape(), "conv3d input")?;
        let (out_ch, w_in, kernel) = spatial3(self.nodes[iw].value.shape(), "conv3d weight")?;
        if w_in != in_ch {
            return Err(Error::contract(format!(
                "conv3d: input has {in_ch} channels but weight expects {w_in}"
            )));
        }
        if let Some(ib) = ib {
            if self.nodes[ib].value.shape() != [out_ch] {
                return Err(Error::contract(format!(
                    "conv3d: bias shape {:?}, expected [{out_ch}]",
                    self.nodes[ib].value.shape()
                )));
            }
        }
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = conv::out_extent(dims[a], kernel[a], stride[a], padding[a]).ok_or_else(|| {
                Error::contract(format!(
                    "conv3d: kernel {kernel:?} / stride {stride:?} invalid for input {dims:?} with padding {padding:?}"
                ))
            })?;
        }
        let geom = ConvGeometry {
            batch,
            in_ch,
            out_ch,
            input: dims,
            kernel,
            stride,
            padding,
            output,
        };
        let data = conv::conv3d_forward(
            &geom,
            self.nodes[ii].value.data(),
            self.nodes[iw].value.data(),
            ib.map(|b| self.nodes[b].value.data()),
        );
        let out = Tensor::new(vec![batch, out_ch, output[0], output[1], output[2]], data)?;
        let mut inputs = vec![ii, iw];
        inputs.extend(ib);
        Ok(self.push(
            out,
            Op::Conv3d {
                input: ii,
                weight: iw,
                bias: ib,
                geom,
            },
            &inputs,
        ))
    }

    /// Instance normalization over the spatial axes of `[B, C, X, Y, Z]`, with
    /// per-channel affine `scale` and `shift`.
    pub fn instance_norm3d(&mut self, input: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        let (ii, is, ih) = (self.idx(input)?, self.idx(scale)?, self.idx(shift)?);
        let (batch, ch, dims) = spatial3(self.nodes[ii].value.shape(), "instance_norm3d")?;
        for i in [is, ih] {
            if self.nodes[i].value.shape() != [ch] {
                return Err(Error::contract(format!(
                    "instance_norm3d: affine parameter shape {:?}, expected [{ch}]",
                    self.nodes[i].value.shape()
                )));
            }
        }
        let spatial = numel(&dims);
        let (data, stats) = kernels::instance_norm_forward(
            self.nodes[ii].value.data(),
            batch,
            ch,
            spatial,
            self.nodes[is].value.data(),
            self.nodes[ih].value.data(),
            eps,
        )
        .map_err(|s| {
            Error::DivisionGuard(format!(
                "instance_norm3d: zero variance with eps={eps} in slice (batch {}, channel {}) of {spatial} voxels",
                s / ch,
                s % ch
            ))
        })?;
        let out = Tensor::new(self.nodes[ii].value.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            Op::InstanceNorm {
                input: ii,
                scale: is,
                shift: ih,
                stats,
            },
            &[ii, is, ih],
        ))
    }

    /// Nearest-neighbour upsampling of the three trailing axes.
    pub fn upsample3d(&mut self, input: Var, factor: [usize; 3]) -> Result<Var> {
        let ii = self.idx(input)?;
        if factor.contains(&0) {
            return Err(Error::contract(format!("upsample3d: factors must be >= 1, got {factor:?}")));
        }
        let shape = self.nodes[ii].value.shape().to_vec();
        if shape.len() < 3 {
            return Err(Error::contract(format!("upsample3d: needs >= 3 axes, got {shape:?}")));
        }
        let r = shape.len() - 3;
        let dims = [shape[r], shape[r + 1], shape[r + 2]];
        let outer = numel(&shape[..r]);
        let data = kernels::upsample_forward(self.nodes[ii].value.data(), outer, dims, factor);
        let mut out_shape = shape;
        for a in 0..3 {
            out_shape[r + a] *= factor[a];
        }
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(
            out,
            Op::Upsample {
                input: ii,
                outer,
                dims,
                factor,
            },
            &[ii],
        ))
    }

    /// Affine map `x W^T + b` applied to every trailing vector. `weight` is `[d_out, d_in]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (ii, iw) = (self.idx(input)?, self.idx(weight)?);
        let ib = bias.map(|b| self.idx(b)).transpose()?;
        let (rest, d_in) = self.split_last(ii, "linear")?;
        let (d_out, w_in) = match *self.nodes[iw].value.shape() {
            [o, i] => (o, i),
            ref s => return Err(Error::contract(format!("linear: weight must be 2-D, got {s:?}"))),
        };
        if w_in != d_in {
            return Err(Error::contract(format!(
                "linear: input trailing extent {d_in} but weight expects {w_in}"
            )));
        }
        if let Some(ib) = ib {
            if self.nodes[ib].value.shape() != [d_out] {
                return Err(Error::contract("linear: bias shape mismatch"));
            }
        }
        let rows = numel(&rest);
        let mut data = vec![T::zero(); rows * d_out];
        if let Some(ib) = ib {
            let b = self.nodes[ib].value.data();
            for row in data.chunks_exact_mut(d_out) {
                row.copy_from_slice(b);
            }
        }
        gemm(
            MatRef::new(self.nodes[ii].value.data(), rows, d_in),
            MatRef::new(self.nodes[iw].value.data(), d_out, d_in).t(),
            if ib.is_some() { T::one() } else { T::zero() },
            &mut data,
        );
        let mut shape = rest;
        shape.push(d_out);
        let out = Tensor::new(shape, data)?;
        let mut inputs = vec![ii, iw];
        inputs.extend(ib);
        Ok(self.push(
            out,
            Op::Linear {
                input: ii,
                weight: iw,
                bias: ib,
                rows,
                d_in,
                d_out,
            },
            &inputs,
        ))
    }

    /// `a b^T` for `a: [n, d]`, `b: [m, d]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (n, d, m, d2) = match (self.nodes[ia].value.shape(), self.nodes[ib].value.shape()) {
            (&[n, d], &[m, d2]) => (n, d, m, d2),
            (sa, sb) => return Err(Error::contract(format!("matmul_nt: need 2-D inputs, got {sa:?}, {sb:?}"))),
        };
        if d != d2 {
            return Err(Error::contract(format!("matmul_nt: inner extents {d} vs {d2}")));
        }
        let mut data = vec![T::zero(); n * m];
        gemm(
            MatRef::new(self.nodes[ia].value.data(), n, d),
            MatRef::new(self.nodes[ib].value.data(), m, d).t(),
            T::zero(),
            &mut data,
        );
        let out = Tensor::new(vec![n, m], data)?;
        Ok(self.push(out, Op::MatmulNt { a: ia, b: ib, n, m, d }, &[ia, ib]))
    }

    /// Scales every trailing vector to unit Euclidean norm; norms are floored
    /// at `1e-12` so zero vectors stay finite.
    pub fn l2_normalize(&mut self, input: Var) -> Result<Var> {
        let ii = self.idx(input)?;
        let (_, w) = self.split_last(ii, "l2_normalize")?;
        let floor = T::from_f64(1e-12);
        let src = &self.nodes[ii].value;
        let mut norms = Vec::with_capacity(src.numel() / w);
        let mut data = Vec::with_capacity(src.numel());
        for row in src.data().chunks_exact(w) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor);
            norms.push(norm);
            data.extend(row.iter().map(|&v| v / norm));
        }
        let out = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(out, Op::L2Normalize { input: ii, norms }, &[ii]))
    }

    /// Picks channel vectors at `(batch, x, y, z)` locations of a `[B, C, X, Y, Z]`
    /// tensor, giving `[index.len(), C]`.
    pub fn gather_voxels(&mut self, input: Var, index: &[[usize; 4]]) -> Result<Var> {
        let ii = self.idx(input)?;
        let (batch, ch, [x, y, z]) = spatial3(self.nodes[ii].value.shape(), "gather_voxels")?;
        let src = self.nodes[ii].value.data();
        let spatial = x * y * z;
        let mut data = Vec::with_capacity(index.len() * ch);
        for &[b, i, j, k] in index {
            if b >= batch || i >= x || j >= y || k >= z {
                return Err(Error::contract(format!(
                    "gather_voxels: index {:?} outside [{batch}, {x}, {y}, {z}]",
                    [b, i, j, k]
                )));
            }
            let base = b * ch * spatial + (i * y + j) * z + k;
            data.extend((0..ch).map(|c| src[base + c * spatial]));
        }
        let out = Tensor::new(vec![index.len(), ch], data)?;
        Ok(self.push(
            out,
            Op::GatherVoxels {
                input: ii,
                index: index.to_vec(),
            },
            &[ii],
        ))
    }

    /// Flat-index element selection, giving a 1-D tensor.
    pub fn take(&mut self, input: Var, index: &[usize]) -> Result<Var> {
        let ii = self.idx(input)?;
        let src = self.nodes[ii].value.data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::contract(format!("take: index {bad} out of range {}", src.len())));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(vec![index.len()], data)?;
        Ok(self.push(
            out,
            Op::Take {
                input: ii,
                index: index.to_vec(),
            },
            &[ii],
        ))
    }

    /// Mean voxel-wise softmax cross-entropy. `logits` is `[B, K, spatial...]`
    /// and `labels` holds one class id per `(batch, voxel)` in row-major order.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.idx(logits)?;
        let shape = self.nodes[il].value.shape();
        if shape.len() < 2 {
            return Err(Error::contract("cross_entropy: logits need [B, K, ...]"));
        }
        let (b, k) = (shape[0], shape[1]);
        let spatial = numel(&shape[2..]);
        if labels.len() != b * spatial {
            return Err(Error::contract(format!(
                "cross_entropy: {} labels for {} voxels",
                labels.len(),
                b * spatial
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Data(format!("class id {bad} >= num_classes {k}")));
        }
        let src = self.nodes[il].value.data();
        let mut total = 0.0f64;
        for bi in 0..b {
            let base = bi * k * spatial;
            for s in 0..spatial {
                let lse = log_softmax_denominator(src, base + s, spatial, k);
                let target = src[base + labels[bi * spatial + s] * spatial + s];
                total += (lse - target).as_f64();
            }
        }
        let out = Tensor::scalar(T::from_f64(total / (b * spatial).max(1) as f64));
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits: il,
                labels: labels.to_vec(),
            },
            &[il],
        ))
    }

    /// Reverse pass from a one-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = self.idx(output)?;
        if self.nodes[out].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.nodes[out].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[out].requires_grad {
            return Ok(Gradients { graph: self.id, grads });
        }
        grads[out] = Some(Tensor::full(self.nodes[out].value.shape().to_vec(), T::one()));
        for i in (0..=out).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { graph: self.id, grads })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn zeros_like(&self, i: usize) -> Tensor<T> {
        Tensor::zeros(self.nodes[i].value.shape().to_vec())
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                for (i, sign) in [(a, T::one()), (b, T::one())] {
                    if self.wants(i) {
                        accumulate(grads, i, g.map(|v| v * sign));
                    }
                }
            }
            &Op::Sub(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, g.clone());
                }
                if self.wants(b) {
                    accumulate(grads, b, g.map(|v| -v));
                }
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                if self.wants(a) {
                    let d = gd.iter().zip(vb.data()).map(|(&g, &y)| g * y).collect();
                    accumulate(grads, a, Tensor::new(va.shape().to_vec(), d).unwrap());
                }
                if self.wants(b) {
                    let d = gd.iter().zip(va.data()).map(|(&g, &x)| g * x).collect();
                    accumulate(grads, b, Tensor::new(vb.shape().to_vec(), d).unwrap());
                }
            }
            &Op::Scale(a, c) => {
                if self.wants(a) {
                    accumulate(grads, a, g.map(|v| v * c));
                }
            }
            &Op::Relu(a) => {
                let va = &self.nodes[a].value;
                let d = gd
                    .iter()
                    .zip(va.data())
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                accumulate(grads, a, Tensor::new(va.shape().to_vec(), d).unwrap());
            }
            &Op::Sum(a) => {
                accumulate(grads, a, Tensor::full(self.nodes[a].value.shape().to_vec(), g.item()));
            }
            Op::MaxLast { input, argmax } => {
                let mut d = self.zeros_like(*input);
                let w = d.numel() / argmax.len().max(1);
                for (r, (&j, &gv)) in argmax.iter().zip(gd).enumerate() {
                    d.data_mut()[r * w + j] += gv;
                }
                accumulate(grads, *input, d);
            }
            &Op::LogSumExpLast(a) => {
                let va = &self.nodes[a].value;
                let w = *va.shape().last().unwrap();
                let out = node.value.data();
                let mut d = Vec::with_capacity(va.numel());
                for ((row, &lse), &gv) in va.data().chunks_exact(w).zip(out).zip(gd) {
                    if lse == T::neg_infinity() {
                        d.extend(std::iter::repeat_n(T::zero(), w));
                    } else {
                        d.extend(row.iter().map(|&x| gv * (x - lse).exp()));
                    }
                }
                accumulate(grads, a, Tensor::new(va.shape().to_vec(), d).unwrap());
            }
            Op::Concat { inputs, outer, widths } => {
                let row: usize = widths.iter().sum();
                let mut offset = 0;
                for (&i, &w) in inputs.iter().zip(widths) {
                    if self.wants(i) {
                        let mut d = Vec::with_capacity(outer * w);
                        for o in 0..*outer {
                            d.extend_from_slice(&gd[o * row + offset..o * row + offset + w]);
                        }
                        accumulate(grads, i, Tensor::new(self.nodes[i].value.shape().to_vec(), d).unwrap());
                    }
                    offset += w;
                }
            }
            Op::Conv3d {
                input,
                weight,
                bias,
                geom,
            } => {
                let mut gi = self.wants(*input).then(|| self.zeros_like(*input));
                let mut gw = self.wants(*weight).then(|| self.zeros_like(*weight));
                let mut gb = bias.filter(|&b| self.wants(b)).map(|b| self.zeros_like(b));
                conv::conv3d_backward(
                    geom,
                    self.nodes[*input].value.data(),
                    self.nodes[*weight].value.data(),
                    gd,
                    ConvGrads {
                        input: gi.as_mut().map(|t| t.data_mut()),
                        weight: gw.as_mut().map(|t| t.data_mut()),
                        bias: gb.as_mut().map(|t| t.data_mut()),
                    },
                );
                if let Some(t) = gi {
                    accumulate(grads, *input, t);
                }
                if let Some(t) = gw {
                    accumulate(grads, *weight, t);
                }
                if let (Some(t), Some(b)) = (gb, *bias) {
                    accumulate(grads, b, t);
                }
            }
            Op::InstanceNorm {
                input,
                scale,
                shift,
                stats,
            } => {
                let shape = self.nodes[*input].value.shape();
                let (batch, ch) = (shape[0], shape[1]);
                let spatial = numel(&shape[2..]);
                let mut gi = self.wants(*input).then(|| self.zeros_like(*input));
                let mut gs = self.wants(*scale).then(|| self.zeros_like(*scale));
                let mut gh = self.wants(*shift).then(|| self.zeros_like(*shift));
                kernels::instance_norm_backward(
                    self.nodes[*input].value.data(),
                    gd,
                    batch,
                    ch,
                    spatial,
                    self.nodes[*scale].value.data(),
                    stats,
                    gi.as_mut().map(|t| t.data_mut()),
                    gs.as_mut().map(|t| t.data_mut()),
                    gh.as_mut().map(|t| t.data_mut()),
                );
                for (t, i) in [(gi, *input), (gs, *scale), (gh, *shift)] {
                    if let Some(t) = t {
                        accumulate(grads, i, t);
                    }
                }
            }
            &Op::Upsample {
                input,
                outer,
                dims,
                factor,
            } => {
                let d = kernels::upsample_backward(gd, outer, dims, factor);
                accumulate(grads, input, Tensor::new(self.nodes[input].value.shape().to_vec(), d).unwrap());
            }
            &Op::Linear {
                input,
                weight,
                bias,
                rows,
                d_in,
                d_out,
            } => {
                let dy = MatRef::new(gd, rows, d_out);
                if self.wants(input) {
                    let mut d = self.zeros_like(input);
                    gemm(dy, MatRef::new(self.nodes[weight].value.data(), d_out, d_in), T::zero(), d.data_mut());
                    accumulate(grads, input, d);
                }
                if self.wants(weight) {
                    let mut d = self.zeros_like(weight);
                    gemm(dy.t(), MatRef::new(self.nodes[input].value.data(), rows, d_in), T::zero(), d.data_mut());
                    accumulate(grads, weight, d);
                }
                if let Some(b) = bias.filter(|&b| self.wants(b)) {
                    let mut d = self.zeros_like(b);
                    for row in gd.chunks_exact(d_out) {
                        for (acc, &v) in d.data_mut().iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(grads, b, d);
                }
            }
            &Op::MatmulNt { a, b, n, m, d } => {
                let gm = MatRef::new(gd, n, m);
                if self.wants(a) {
                    let mut da = self.zeros_like(a);
                    gemm(gm, MatRef::new(self.nodes[b].value.data(), m, d), T::zero(), da.data_mut());
                    accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let mut db = self.zeros_like(b);
                    gemm(gm.t(), MatRef::new(self.nodes[a].value.data(), n, d), T::zero(), db.data_mut());
                    accumulate(grads, b, db);
                }
            }
            Op::L2Normalize { input, norms } => {
                let y = node.value.data();
                let w = y.len() / norms.len().max(1);
                let floor = T::from_f64(1e-12);
                let mut d = Vec::with_capacity(y.len());
                for ((yr, gr), &norm) in y.chunks_exact(w).zip(gd.chunks_exact(w)).zip(norms) {
                    let raw_norm = {
                        let xr = &self.nodes[*input].value.data()[d.len()..d.len() + w];
                        xr.iter().map(|&v| v * v).sum::<T>().sqrt()
                    };
                    if raw_norm < floor {
                        d.extend(gr.iter().map(|&g| g / norm));
                    } else {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        d.extend(yr.iter().zip(gr).map(|(&yv, &gv)| (gv - yv * dot) / norm));
                    }
                }
                accumulate(grads, *input, Tensor::new(node.value.shape().to_vec(), d).unwrap());
            }
            Op::GatherVoxels { input, index } => {
                let mut d = self.zeros_like(*input);
                let shape = d.shape().to_vec();
                let (ch, y, z) = (shape[1], shape[3], shape[4]);
                let spatial = numel(&shape[2..]);
                let dd = d.data_mut();
                for (row, &[b, i, j, k]) in gd.chunks_exact(ch).zip(index) {
                    let base = b * ch * spatial + (i * y + j) * z + k;
                    for (c, &v) in row.iter().enumerate() {
                        dd[base + c * spatial] += v;
                    }
                }
                accumulate(grads, *input, d);
            }
            Op::Take { input, index } => {
                let mut d = self.zeros_like(*input);
                for (&i, &v) in index.iter().zip(gd) {
                    d.data_mut()[i] += v;
                }
                accumulate(grads, *input, d);
            }
            Op::CrossEntropy { logits, labels } => {
                let src = self.nodes[*logits].value.data();
                let shape = self.nodes[*logits].value.shape();
                let (b, k) = (shape[0], shape[1]);
                let spatial = numel(&shape[2..]);
                let scale = g.item() / T::from_f64((b * spatial).max(1) as f64);
                let mut d = self.zeros_like(*logits);
                let dd = d.data_mut();
                for bi in 0..b {
                    let base = bi * k * spatial;
                    for s in 0..spatial {
                        let lse = log_softmax_denominator(src, base + s, spatial, k);
                        for c in 0..k {
                            let at = base + c * spatial + s;
                            dd[at] = (src[at] - lse).exp() * scale;
                        }
                        dd[base + labels[bi * spatial + s] * spatial + s] -= scale;
                    }
                }
                accumulate(grads, *logits, d);
            }
        }
    }
}

/// `log(sum_c exp(x[start + c * stride]))` for `c in 0..k`.
fn log_softmax_denominator<T: Element>(x: &[T], start: usize, stride: usize, k: usize) -> T {
    let m = (0..k).map(|c| x[start + c * stride]).fold(T::neg_infinity(), T::max);
    let s: T = (0..k).map(|c| (x[start + c * stride] - m).exp()).sum();
    m + s.ln()
}

fn accumulate<T: Element>(grads: &mut [Option<Tensor<T>>], i: usize, g: Tensor<T>) {
    match &mut grads[i] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
