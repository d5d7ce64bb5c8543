//! Tape of tensor operations with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order. `backward` walks it once in reverse.

use super::kernels::{col2im, conv_output_extent, im2col, ConvGeometry};
use super::{Scalar, Tensor};
use crate::error::{NernError, Result};

/// Probability floor applied to softmax outputs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-row distance between two kernel matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistanceKind {
    /// `1 - cos(a, b)`; 0 when both rows are zero, 1 when exactly one is.
    Cosine,
    /// `sum((a - b)^2)`, used for 1x1 kernels.
    SquaredL2,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeometry,
        out_channels: usize,
        cols: Vec<T>,
    },
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Relu(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Reshape(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    GlobalAvgPool(NodeId),
    Take {
        input: NodeId,
        indices: Vec<usize>,
    },
    L2Norm(NodeId),
    RowL2Norm(NodeId),
    RowNormalize {
        input: NodeId,
        norms: Vec<T>,
    },
    Softmax(NodeId),
    Log(NodeId),
    KlDiv {
        p: NodeId,
        q: NodeId,
    },
    RowDistance {
        a: NodeId,
        b: NodeId,
        kind: DistanceKind,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient w.r.t. `id`, or exact zeros when the node did not reach the loss.
    pub fn wrt(&self, id: NodeId) -> Tensor<T> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    pub fn take(&mut self, id: NodeId) -> Tensor<T> {
        match self.grads[id.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

fn shape_err(msg: String) -> NernError {
    NernError::Shape(msg)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
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

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (xs, ws) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(shape_err(format!("conv2d expects rank-4 input and weight, got {xs:?} and {ws:?}")));
        }
        let (batch, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if cin != wcin {
            return Err(shape_err(format!("conv2d channel mismatch: input has {cin}, weight expects {wcin}")));
        }
        if kh != kw {
            return Err(shape_err(format!("conv2d expects square kernels, got {kh}x{kw}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(shape_err(format!("conv2d bias must be [{cout}], got {:?}", self.shape(b))));
            }
        }
        let (oh, ow) = match (
            conv_output_extent(h, kh, stride, padding),
            conv_output_extent(w, kw, stride, padding),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(shape_err(format!(
                    "conv2d output extent < 1 for input {h}x{w}, kernel {kh}, stride {stride}, padding {padding}"
                )))
            }
        };
        let geom = ConvGeometry {
            batch,
            in_channels: cin,
            height: h,
            width: w,
            kernel: kh,
            stride,
            padding,
            out_height: oh,
            out_width: ow,
        };
        let cols = im2col(self.value(input).data(), &geom);
        let ncols = geom.columns();
        let plen = geom.patch_len();
        let mut out_t = vec![T::zero(); cout * ncols];
        T::gemm(
            cout,
            plen,
            ncols,
            T::one(),
            self.value(weight).data(),
            plen as isize,
            1,
            &cols,
            ncols as isize,
            1,
            T::zero(),
            &mut out_t,
            ncols as isize,
            1,
        );
        let spatial = geom.out_spatial();
        let mut out = vec![T::zero(); batch * cout * spatial];
        let bias_vals = bias.map(|b| self.value(b).data().to_vec());
        for co in 0..cout {
            let bv = bias_vals.as_ref().map_or(T::zero(), |b| b[co]);
            for b in 0..batch {
                let src = &out_t[co * ncols + b * spatial..co * ncols + (b + 1) * spatial];
                let dst = &mut out[(b * cout + co) * spatial..(b * cout + co + 1) * spatial];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bv;
                }
            }
        }
        let value = Tensor::new(vec![batch, cout, oh, ow], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                out_channels: cout,
                cols: if rg { cols } else { Vec::new() },
            },
            rg,
        ))
    }

    /// `input[B,Din] * weight[Dout,Din]^T + bias[Dout]`.
    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(shape_err(format!(
                "dense shape mismatch: input {xs:?}, weight {ws:?}, bias {bs:?}"
            )));
        }
        let (batch, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = Vec::with_capacity(batch * dout);
        let bias_vals = self.value(bias).data();
        for _ in 0..batch {
            out.extend_from_slice(bias_vals);
        }
        T::gemm(
            batch,
            din,
            dout,
            T::one(),
            self.value(input).data(),
            din as isize,
            1,
            self.value(weight).data(),
            1,
            din as isize,
            T::one(),
            &mut out,
            dout as isize,
            1,
        );
        let value = Tensor::new(vec![batch, dout], out)?;
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(value, Op::Dense { input, weight, bias }, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    fn zip_same(&self, a: NodeId, b: NodeId, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(format!("{what}: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        let value = self.value(a).map(|v| v * factor);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let value = Tensor::scalar(v.sum() / T::from_usize(v.len()).unwrap());
        let rg = self.rg(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    /// Mean over the spatial axes: `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(shape_err(format!("global_avg_pool expects rank 4, got {s:?}")));
        }
        let hw = s[2] * s[3];
        let denom = T::from_usize(hw).unwrap();
        let data: Vec<T> = self
            .value(a)
            .data()
            .chunks(hw)
            .map(|c| c.iter().copied().sum::<T>() / denom)
            .collect();
        let value = Tensor::new(vec![s[0], s[1]], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::GlobalAvgPool(a), rg))
    }

    /// Gathers `out[i] = input.flat[indices[i]]` into a tensor of `shape`.
    pub fn take(&mut self, input: NodeId, indices: Vec<usize>, shape: &[usize]) -> Result<NodeId> {
        let src = self.value(input).data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(shape_err(format!("take index {bad} out of range {}", src.len())));
        }
        let data = indices.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Take { input, indices }, rg))
    }

    pub fn l2_norm(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).l2_norm());
        let rg = self.rg(&[a]);
        self.push(value, Op::L2Norm(a), rg)
    }

    fn rows(&self, a: NodeId, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(shape_err(format!("{what} expects rank 2, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// Per-row Euclidean norm: `[R,D] -> [R]`.
    pub fn row_l2_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, d) = self.rows(a, "row_l2_norm")?;
        let data = self
            .value(a)
            .data()
            .chunks(d)
            .map(|row| row.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let value = Tensor::new(vec![r], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::RowL2Norm(a), rg))
    }

    /// Scales each row to unit norm; zero rows stay zero.
    pub fn row_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let (_, d) = self.rows(a, "row_normalize")?;
        let src = self.value(a);
        let mut norms = Vec::with_capacity(src.shape()[0]);
        let mut data = Vec::with_capacity(src.len());
        for row in src.data().chunks(d) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms.push(n);
            if n > T::zero() {
                data.extend(row.iter().map(|&v| v / n));
            } else {
                data.extend(std::iter::repeat(T::zero()).take(d));
            }
        }
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::RowNormalize { input: a, norms }, rg))
    }

    /// Row-wise softmax with max subtraction; outputs floored at [`PROB_FLOOR`].
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (_, k) = self.rows(a, "softmax")?;
        let value = softmax_rows(self.value(a), k);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| v.ln());
        let rg = self.rg(&[a]);
        self.push(value, Op::Log(a), rg)
    }

    /// Batch-mean `KL(p || q)` over rows, with `0 * ln(0 / q) = 0`.
    pub fn kl_div(&mut self, p: NodeId, q: NodeId) -> Result<NodeId> {
        let (b, _) = self.rows(p, "kl_div")?;
        if self.shape(p) != self.shape(q) {
            return Err(shape_err(format!(
                "kl_div: {:?} vs {:?}",
                self.shape(p),
                self.shape(q)
            )));
        }
        let value = kl_value(self.value(p), self.value(q))?;
        let value = Tensor::scalar(value / T::from_usize(b).unwrap());
        let rg = self.rg(&[p, q]);
        Ok(self.push(value, Op::KlDiv { p, q }, rg))
    }

    /// Per-row distance between `a[R,D]` and `b[R,D]`, giving `[R]`.
    pub fn row_distance(&mut self, a: NodeId, b: NodeId, kind: DistanceKind) -> Result<NodeId> {
        let (r, d) = self.rows(a, "row_distance")?;
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "row_distance: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data = (0..r)
            .map(|i| row_distance_value(&va[i * d..(i + 1) * d], &vb[i * d..(i + 1) * d], kind))
            .collect();
        let value = Tensor::new(vec![r], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::RowDistance { a, b, kind }, rg))
    }

    /// Allows [`Graph::backward`] to run again on the same tape.
    pub fn reset_backward(&mut self) {
        self.backward_done = false;
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(NernError::BackwardTwice);
        }
        if !self.value(loss).is_scalar() {
            return Err(NernError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                out_channels,
                cols,
            } => {
                let cout = *out_channels;
                let spatial = geom.out_spatial();
                let ncols = geom.columns();
                let plen = geom.patch_len();
                let mut g_t = vec![T::zero(); cout * ncols];
                for b in 0..geom.batch {
                    for co in 0..cout {
                        let src = &gd[(b * cout + co) * spatial..(b * cout + co + 1) * spatial];
                        g_t[co * ncols + b * spatial..co * ncols + (b + 1) * spatial].copy_from_slice(src);
                    }
                }
                if self.nodes[weight.0].requires_grad {
                    let gw = grad_slot(grads, *weight, self.shape(*weight));
                    T::gemm(
                        cout,
                        ncols,
                        plen,
                        T::one(),
                        &g_t,
                        ncols as isize,
                        1,
                        cols,
                        1,
                        ncols as isize,
                        T::one(),
                        gw.data_mut(),
                        plen as isize,
                        1,
                    );
                }
                if let Some(b) = bias {
                    if self.nodes[b.0].requires_grad {
                        let gb = grad_slot(grads, *b, self.shape(*b));
                        for (co, v) in gb.data_mut().iter_mut().enumerate() {
                            *v += g_t[co * ncols..(co + 1) * ncols].iter().copied().sum::<T>();
                        }
                    }
                }
                if self.nodes[input.0].requires_grad {
                    let mut dcols = vec![T::zero(); plen * ncols];
                    T::gemm(
                        plen,
                        cout,
                        ncols,
                        T::one(),
                        self.value(*weight).data(),
                        1,
                        plen as isize,
                        &g_t,
                        ncols as isize,
                        1,
                        T::zero(),
                        &mut dcols,
                        ncols as isize,
                        1,
                    );
                    let gi = grad_slot(grads, *input, self.shape(*input));
                    col2im(&dcols, geom, gi.data_mut());
                }
            }
            Op::Dense { input, weight, bias } => {
                let xs = self.shape(*input);
                let (batch, din) = (xs[0], xs[1]);
                let dout = self.shape(*weight)[0];
                if self.nodes[input.0].requires_grad {
                    let gi = grad_slot(grads, *input, xs);
                    T::gemm(
                        batch,
                        dout,
                        din,
                        T::one(),
                        gd,
                        dout as isize,
                        1,
                        self.value(*weight).data(),
                        din as isize,
                        1,
                        T::one(),
                        gi.data_mut(),
                        din as isize,
                        1,
                    );
                }
                if self.nodes[weight.0].requires_grad {
                    let gw = grad_slot(grads, *weight, self.shape(*weight));
                    T::gemm(
                        dout,
                        batch,
                        din,
                        T::one(),
                        gd,
                        1,
                        dout as isize,
                        self.value(*input).data(),
                        din as isize,
                        1,
                        T::one(),
                        gw.data_mut(),
                        din as isize,
                        1,
                    );
                }
                if self.nodes[bias.0].requires_grad {
                    let gb = grad_slot(grads, *bias, self.shape(*bias));
                    for row in gd.chunks(dout) {
                        for (acc, &v) in gb.data_mut().iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let out = node.value.data();
                self.accumulate(grads, *x, |i| if out[i] > T::zero() { gd[i] } else { T::zero() });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |i| gd[i]);
                self.accumulate(grads, *b, |i| gd[i]);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |i| gd[i]);
                self.accumulate(grads, *b, |i| -gd[i]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |i| gd[i] * vb[i]);
                self.accumulate(grads, *b, |i| gd[i] * va[i]);
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, |i| gd[i] * *s),
            Op::Reshape(a) => self.accumulate(grads, *a, |i| gd[i]),
            Op::Sum(a) => self.accumulate(grads, *a, |_| gd[0]),
            Op::Mean(a) => {
                let n = T::from_usize(self.value(*a).len()).unwrap();
                self.accumulate(grads, *a, |_| gd[0] / n)
            }
            Op::GlobalAvgPool(a) => {
                let s = self.shape(*a);
                let hw = s[2] * s[3];
                let denom = T::from_usize(hw).unwrap();
                self.accumulate(grads, *a, |i| gd[i / hw] / denom);
            }
            Op::Take { input, indices } => {
                if self.nodes[input.0].requires_grad {
                    let gi = grad_slot(grads, *input, self.shape(*input));
                    let dst = gi.data_mut();
                    for (&src_idx, &v) in indices.iter().zip(gd) {
                        dst[src_idx] += v;
                    }
                }
            }
            Op::L2Norm(a) => {
                let n = node.value.item();
                let va = self.value(*a).data();
                if n > T::zero() {
                    self.accumulate(grads, *a, |i| gd[0] * va[i] / n);
                }
            }
            Op::RowL2Norm(a) => {
                let d = self.shape(*a)[1];
                let va = self.value(*a).data();
                let norms = node.value.data();
                self.accumulate(grads, *a, |i| {
                    let n = norms[i / d];
                    if n > T::zero() {
                        gd[i / d] * va[i] / n
                    } else {
                        T::zero()
                    }
                });
            }
            Op::RowNormalize { input, norms } => {
                let d = self.shape(*input)[1];
                let y = node.value.data();
                let dots: Vec<T> = y
                    .chunks(d)
                    .zip(gd.chunks(d))
                    .map(|(yr, gr)| yr.iter().zip(gr).map(|(&a, &b)| a * b).sum())
                    .collect();
                self.accumulate(grads, *input, |i| {
                    let r = i / d;
                    if norms[r] > T::zero() {
                        (gd[i] - y[i] * dots[r]) / norms[r]
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Softmax(a) => {
                let k = self.shape(*a)[1];
                let y = node.value.data();
                let dots: Vec<T> = y
                    .chunks(k)
                    .zip(gd.chunks(k))
                    .map(|(yr, gr)| yr.iter().zip(gr).map(|(&a, &b)| a * b).sum())
                    .collect();
                self.accumulate(grads, *a, |i| y[i] * (gd[i] - dots[i / k]));
            }
            Op::Log(a) => {
                let va = self.value(*a).data();
                self.accumulate(grads, *a, |i| gd[i] / va[i]);
            }
            Op::KlDiv { p, q } => {
                let b = T::from_usize(self.shape(*p)[0]).unwrap();
                let (vp, vq) = (self.value(*p).data(), self.value(*q).data());
                let scale = gd[0] / b;
                self.accumulate(grads, *q, |i| {
                    if vp[i] > T::zero() {
                        -scale * vp[i] / vq[i]
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *p, |i| {
                    if vp[i] > T::zero() {
                        scale * (vp[i].ln() - vq[i].ln() + T::one())
                    } else {
                        T::zero()
                    }
                });
            }
            Op::RowDistance { a, b, kind } => {
                let d = self.shape(*a)[1];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                match kind {
                    DistanceKind::SquaredL2 => {
                        let two = T::from_f64_lossy(2.0);
                        self.accumulate(grads, *a, |i| gd[i / d] * two * (va[i] - vb[i]));
                        self.accumulate(grads, *b, |i| -gd[i / d] * two * (va[i] - vb[i]));
                    }
                    DistanceKind::Cosine => {
                        let rows = va.len() / d;
                        let mut ga = vec![T::zero(); va.len()];
                        let mut gb = vec![T::zero(); vb.len()];
                        for r in 0..rows {
                            let (ra, rb) = (&va[r * d..(r + 1) * d], &vb[r * d..(r + 1) * d]);
                            let na = ra.iter().map(|&v| v * v).sum::<T>().sqrt();
                            let nb = rb.iter().map(|&v| v * v).sum::<T>().sqrt();
                            if na == T::zero() || nb == T::zero() {
                                continue;
                            }
                            let cos = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum::<T>() / (na * nb);
                            let go = gd[r];
                            for j in 0..d {
                                // d(1 - cos)/da = -(b/|b| - cos * a/|a|) / |a|
                                ga[r * d + j] = -go * (rb[j] / nb - cos * ra[j] / na) / na;
                                gb[r * d + j] = -go * (ra[j] / na - cos * rb[j] / nb) / nb;
                            }
                        }
                        self.accumulate(grads, *a, |i| ga[i]);
                        self.accumulate(grads, *b, |i| gb[i]);
                    }
                }
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], target: NodeId, f: impl Fn(usize) -> T) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let slot = grad_slot(grads, target, self.shape(target));
        for (i, v) in slot.data_mut().iter_mut().enumerate() {
            *v += f(i);
        }
    }
}

fn grad_slot<'a, T: Scalar>(grads: &'a mut [Option<Tensor<T>>], id: NodeId, shape: &[usize]) -> &'a mut Tensor<T> {
    grads[id.0].get_or_insert_with(|| Tensor::zeros(shape))
}

pub(crate) fn softmax_rows<T: Scalar>(logits: &Tensor<T>, k: usize) -> Tensor<T> {
    let floor = T::from_f64_lossy(PROB_FLOOR);
    let mut data = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        data.extend(exps.into_iter().map(|e| (e / total).max(floor)));
    }
    Tensor::new(logits.shape().to_vec(), data).expect("same shape")
}

fn kl_value<T: Scalar>(p: &Tensor<T>, q: &Tensor<T>) -> Result<T> {
    let k = p.shape()[1];
    let tol = T::from_f64_lossy(1e-6).max(T::epsilon() * T::from_f64_lossy(100.0));
    for (name, t) in [("p", p), ("q", q)] {
        for row in t.data().chunks(k) {
            if row.iter().any(|&v| v < T::zero() || v.is_nan()) {
                return Err(NernError::InvalidDistribution(format!("{name} has a negative entry")));
            }
            let s: T = row.iter().copied().sum();
            if (s - T::one()).abs() > tol {
                return Err(NernError::InvalidDistribution(format!(
                    "{name} row sums to {s:?}"
                )));
            }
        }
    }
    let mut total = T::zero();
    for (&pv, &qv) in p.data().iter().zip(q.data()) {
        if pv > T::zero() {
            if qv <= T::zero() {
                return Err(NernError::InvalidDistribution(
                    "q is zero where p is positive".into(),
                ));
            }
            total += pv * (pv.ln() - qv.ln());
        }
    }
    Ok(total)
}

pub(crate) fn row_distance_value<T: Scalar>(a: &[T], b: &[T], kind: DistanceKind) -> T {
    match kind {
        DistanceKind::SquaredL2 => a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum(),
        DistanceKind::Cosine => {
            let na = a.iter().map(|&v| v * v).sum::<T>().sqrt();
            let nb = b.iter().map(|&v| v * v).sum::<T>().sqrt();
            match (na == T::zero(), nb == T::zero()) {
                (true, true) => T::zero(),
                (true, false) | (false, true) => T::one(),
                _ => T::one() - a.iter().zip(b).map(|(&x, &y)| x * y).sum::<T>() / (na * nb),
            }
        }
    }
}
