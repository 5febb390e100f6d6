//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every differentiable operation appends a node to a [`Tape`]; nodes only
//! reference earlier nodes, so the tape is topologically ordered by
//! construction. [`Tape::gradients`] walks it backwards once.
//!
//! ```
//! use lesioncascade::autodiff::Tape;
//! use lesioncascade::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.variable(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
//! let loss = x.mul(x).unwrap().sum().unwrap();
//! let grads = tape.gradients(loss).unwrap();
//! assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, ConvGeom, Mat, Precision};
pub use crate::kernels::Alignment;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

type NodeId = usize;

enum Op {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        padding: usize,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Relu(NodeId),
    Tanh(NodeId),
    Softmax {
        x: NodeId,
        axis: usize,
    },
    Normalize {
        x: NodeId,
        axis: usize,
    },
    Nll {
        p: NodeId,
        axis: usize,
        targets: Vec<usize>,
    },
    Upsample(NodeId, Alignment),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale {
        x: NodeId,
        factor: f64,
    },
    ScaleBy {
        x: NodeId,
        s: NodeId,
    },
    ChannelScale {
        x: NodeId,
        gate: NodeId,
    },
    ChannelMean(NodeId),
    RegionStats {
        x: NodeId,
        center: Vec<usize>,
        periphery: Vec<usize>,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    Reshape(NodeId),
    Sum(NodeId),
    Mean(NodeId),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    precision: Precision,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(NodeId, ParamId)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const NLL_EPS: f64 = 1e-12;

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn conv_geom(xs: &[usize], ws: &[usize], stride: usize, padding: usize) -> Result<ConvGeom> {
    if xs.len() != 4 || ws.len() != 4 {
        return Err(shape_err!(
            "conv2d expects 4-d input and weight, got {:?} and {:?}",
            xs,
            ws
        ));
    }
    if xs[1] != ws[1] {
        return Err(shape_err!(
            "conv2d input has {} channels but weight expects {}",
            xs[1],
            ws[1]
        ));
    }
    let (kh, kw) = (ws[2], ws[3]);
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Config(format!("conv2d kernel {kh}×{kw} must be odd")));
    }
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be ≥ 1".into()));
    }
    let (h, w) = (xs[2], xs[3]);
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::Config(format!(
            "conv2d kernel {kh}×{kw} does not fit input {h}×{w} with padding {padding}"
        )));
    }
    Ok(ConvGeom {
        channels: xs[1],
        height: h,
        width: w,
        kh,
        kw,
        stride,
        padding,
        out_h: (h + 2 * padding - kh) / stride + 1,
        out_w: (w + 2 * padding - kw) / stride + 1,
    })
}

impl Tape {
    pub fn new() -> Self {
        Self::with_precision(Precision::F64)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(Rc::new(value), Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(Rc::new(value), Op::Leaf, true)
    }

    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        self.push_leaf(store.shared_value(id), Op::Param(id), true)
    }

    fn push_leaf(&self, value: Rc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[NodeId], name: &'static str) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn value(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn gradients(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));
        let mut params = Vec::new();
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[id].take() else {
                continue;
            };
            match node.op {
                Op::Leaf => {
                    grads[id] = Some(grad);
                    continue;
                }
                Op::Param(pid) => {
                    params.push((id, pid));
                    grads[id] = Some(grad);
                    continue;
                }
                _ => {}
            }
            backward_node(self.precision, &nodes, id, &grad, &mut grads);
        }
        // unreachable params still report a (zero) gradient
        for (id, node) in nodes.iter().enumerate() {
            if let Op::Param(pid) = node.op {
                if grads[id].is_none() {
                    grads[id] = Some(Tensor::zeros(node.value.shape()));
                    params.push((id, pid));
                }
            }
        }
        params.sort_by_key(|&(id, _)| id);
        Ok(Gradients { grads, params })
    }

    /// Runs the backward pass and adds every parameter gradient into `store`.
    pub fn backward(&self, loss: Var<'_>, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        grads.accumulate_into(store);
        Ok(())
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backward_node(
    precision: Precision,
    nodes: &[Node],
    id: NodeId,
    grad: &Tensor,
    grads: &mut [Option<Tensor>],
) {
    let out = &nodes[id].value;
    let gd = grad.data();
    let needs = |i: NodeId| nodes[i].requires_grad;
    match &nodes[id].op {
        Op::Leaf | Op::Param(_) => unreachable!(),
        Op::Conv2d {
            x,
            w,
            b,
            stride,
            padding,
        } => {
            let xv = &nodes[*x].value;
            let wv = &nodes[*w].value;
            let g = conv_geom(xv.shape(), wv.shape(), *stride, *padding).expect("validated in forward");
            let (n, co) = (xv.shape()[0], wv.shape()[0]);
            let (q, p) = (g.patch_len(), g.out_len());
            let in_len = g.channels * g.height * g.width;
            let mut dw = needs(*w).then(|| Tensor::zeros(wv.shape()));
            let mut dx = needs(*x).then(|| Tensor::zeros(xv.shape()));
            let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; q * p] };
            let mut dcols = vec![0.0; q * p];
            for s in 0..n {
                let dy = &gd[s * co * p..(s + 1) * co * p];
                let xs = &xv.data()[s * in_len..(s + 1) * in_len];
                if let Some(dw) = dw.as_mut() {
                    let colv: &[f64] = if g.is_pointwise() {
                        xs
                    } else {
                        kernels::im2col(xs, &g, &mut cols);
                        &cols
                    };
                    kernels::gemm(
                        precision,
                        co,
                        p,
                        q,
                        Mat::rows(dy, p),
                        Mat::transposed(colv, p),
                        dw.data_mut(),
                        true,
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    let dxs = &mut dx.data_mut()[s * in_len..(s + 1) * in_len];
                    if g.is_pointwise() {
                        kernels::gemm(
                            precision,
                            q,
                            co,
                            p,
                            Mat::transposed(wv.data(), q),
                            Mat::rows(dy, p),
                            dxs,
                            true,
                        );
                    } else {
                        kernels::gemm(
                            precision,
                            q,
                            co,
                            p,
                            Mat::transposed(wv.data(), q),
                            Mat::rows(dy, p),
                            &mut dcols,
                            false,
                        );
                        kernels::col2im_add(&dcols, &g, dxs);
                    }
                }
            }
            if let Some(b) = b {
                if needs(*b) {
                    let mut db = Tensor::zeros(&[co]);
                    for s in 0..n {
                        for c in 0..co {
                            let base = (s * co + c) * p;
                            db.data_mut()[c] += gd[base..base + p].iter().sum::<f64>();
                        }
                    }
                    accumulate(nodes, grads, *b, db);
                }
            }
            if let Some(dw) = dw {
                accumulate(nodes, grads, *w, dw);
            }
            if let Some(dx) = dx {
                accumulate(nodes, grads, *x, dx);
            }
        }
        Op::Linear { x, w, b } => {
            let xv = &nodes[*x].value;
            let wv = &nodes[*w].value;
            let (n, din) = (xv.shape()[0], xv.shape()[1]);
            let dout = wv.shape()[0];
            if needs(*x) {
                let mut dx = Tensor::zeros(xv.shape());
                kernels::gemm(
                    precision,
                    n,
                    dout,
                    din,
                    Mat::rows(gd, dout),
                    Mat::rows(wv.data(), din),
                    dx.data_mut(),
                    false,
                );
                accumulate(nodes, grads, *x, dx);
            }
            if needs(*w) {
                let mut dw = Tensor::zeros(wv.shape());
                kernels::gemm(
                    precision,
                    dout,
                    n,
                    din,
                    Mat::transposed(gd, dout),
                    Mat::rows(xv.data(), din),
                    dw.data_mut(),
                    false,
                );
                accumulate(nodes, grads, *w, dw);
            }
            if let Some(b) = b {
                if needs(*b) {
                    let mut db = Tensor::zeros(&[dout]);
                    for row in gd.chunks(dout) {
                        for (d, g) in db.data_mut().iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    accumulate(nodes, grads, *b, db);
                }
            }
        }
        Op::Relu(x) => {
            let xv = &nodes[*x].value;
            let dx = Tensor::from_fn(xv.shape(), |i| if xv.data()[i] > 0.0 { gd[i] } else { 0.0 });
            accumulate(nodes, grads, *x, dx);
        }
        Op::Tanh(x) => {
            let y = out.data();
            let dx = Tensor::from_fn(out.shape(), |i| gd[i] * (1.0 - y[i] * y[i]));
            accumulate(nodes, grads, *x, dx);
        }
        Op::Softmax { x, axis } => {
            let (outer, c, inner) = axis_split(out.shape(), *axis);
            let y = out.data();
            let mut dx = Tensor::zeros(out.shape());
            let d = dx.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * c + j) * inner + i;
                    let dot: f64 = (0..c).map(|j| gd[idx(j)] * y[idx(j)]).sum();
                    for j in 0..c {
                        d[idx(j)] = y[idx(j)] * (gd[idx(j)] - dot);
                    }
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::Normalize { x, axis } => {
            let xv = &nodes[*x].value;
            let (outer, c, inner) = axis_split(out.shape(), *axis);
            let y = out.data();
            let mut dx = Tensor::zeros(out.shape());
            let d = dx.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * c + j) * inner + i;
                    let total: f64 = (0..c).map(|j| xv.data()[idx(j)]).sum();
                    let dot: f64 = (0..c).map(|j| gd[idx(j)] * y[idx(j)]).sum();
                    for j in 0..c {
                        d[idx(j)] = (gd[idx(j)] - dot) / total;
                    }
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::Nll { p, axis, targets } => {
            let pv = &nodes[*p].value;
            let (outer, c, inner) = axis_split(pv.shape(), *axis);
            let scale = gd[0] / targets.len() as f64;
            let mut dp = Tensor::zeros(pv.shape());
            for o in 0..outer {
                for i in 0..inner {
                    let t = targets[o * inner + i];
                    let idx = (o * c + t) * inner + i;
                    let prob = pv.data()[idx];
                    if prob > NLL_EPS {
                        dp.data_mut()[idx] = -scale / prob;
                    }
                }
            }
            accumulate(nodes, grads, *p, dp);
        }
        Op::Upsample(x, align) => {
            let xv = &nodes[*x].value;
            let s = xv.shape();
            let (h, w) = (s[2], s[3]);
            let (oh, ow) = (out.shape()[2], out.shape()[3]);
            let mut dx = Tensor::zeros(s);
            for plane in 0..s[0] * s[1] {
                kernels::resize_plane_backward(
                    &gd[plane * oh * ow..(plane + 1) * oh * ow],
                    h,
                    w,
                    oh,
                    ow,
                    *align,
                    &mut dx.data_mut()[plane * h * w..(plane + 1) * h * w],
                );
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, grad.clone());
            accumulate(nodes, grads, *b, grad.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, grad.clone());
            accumulate(nodes, grads, *b, Tensor::from_fn(grad.shape(), |i| -gd[i]));
        }
        Op::Mul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            accumulate(nodes, grads, *a, Tensor::from_fn(av.shape(), |i| gd[i] * bv.data()[i]));
            accumulate(nodes, grads, *b, Tensor::from_fn(bv.shape(), |i| gd[i] * av.data()[i]));
        }
        Op::Scale { x, factor } => {
            accumulate(nodes, grads, *x, Tensor::from_fn(grad.shape(), |i| gd[i] * factor));
        }
        Op::ScaleBy { x, s } => {
            let xv = &nodes[*x].value;
            let sv = nodes[*s].value.data()[0];
            if needs(*x) {
                accumulate(nodes, grads, *x, Tensor::from_fn(xv.shape(), |i| gd[i] * sv));
            }
            if needs(*s) {
                let ds: f64 = gd.iter().zip(xv.data()).map(|(g, v)| g * v).sum();
                accumulate(nodes, grads, *s, Tensor::new(nodes[*s].value.shape(), vec![ds]).unwrap());
            }
        }
        Op::ChannelScale { x, gate } => {
            let xv = &nodes[*x].value;
            let gv = &nodes[*gate].value;
            let planes = gv.numel();
            let hw = xv.numel() / planes;
            if needs(*x) {
                let dx = Tensor::from_fn(xv.shape(), |i| gd[i] * gv.data()[i / hw]);
                accumulate(nodes, grads, *x, dx);
            }
            if needs(*gate) {
                let dg = Tensor::from_fn(gv.shape(), |k| {
                    let r = k * hw..(k + 1) * hw;
                    gd[r.clone()].iter().zip(&xv.data()[r]).map(|(g, v)| g * v).sum()
                });
                accumulate(nodes, grads, *gate, dg);
            }
        }
        Op::ChannelMean(x) => {
            let xv = &nodes[*x].value;
            let planes = out.numel();
            let hw = xv.numel() / planes;
            let inv = 1.0 / hw as f64;
            let dx = Tensor::from_fn(xv.shape(), |i| gd[i / hw] * inv);
            accumulate(nodes, grads, *x, dx);
        }
        Op::RegionStats {
            x,
            center,
            periphery,
        } => {
            let xv = &nodes[*x].value;
            let k = out.shape()[0];
            let hw = xv.numel() / k;
            let z = out.data();
            let mut dx = Tensor::zeros(xv.shape());
            let d = dx.data_mut();
            for ch in 0..k {
                let plane = &xv.data()[ch * hw..(ch + 1) * hw];
                for (region, mean_col, std_col) in [(center, 0, 2), (periphery, 1, 3)] {
                    let n = region.len() as f64;
                    let mean = z[ch * 4 + mean_col];
                    let std = z[ch * 4 + std_col];
                    let g_mean = gd[ch * 4 + mean_col];
                    let g_std = gd[ch * 4 + std_col];
                    for &pix in region {
                        // d std / d f = (f - mean) / (n std); zero subgradient at std = 0
                        let dstd = if std > 0.0 { (plane[pix] - mean) / (n * std) } else { 0.0 };
                        d[ch * hw + pix] += g_mean / n + g_std * dstd;
                    }
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::Concat { a, b } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let rows = av.shape()[0];
            let (da_w, db_w) = (av.shape()[1], bv.shape()[1]);
            let w = da_w + db_w;
            let da = Tensor::from_fn(av.shape(), |i| gd[(i / da_w) * w + i % da_w]);
            let db = Tensor::from_fn(bv.shape(), |i| gd[(i / db_w) * w + da_w + i % db_w]);
            debug_assert_eq!(rows * w, gd.len());
            accumulate(nodes, grads, *a, da);
            accumulate(nodes, grads, *b, db);
        }
        Op::Reshape(x) => {
            let dx = grad.reshaped(nodes[*x].value.shape()).unwrap();
            accumulate(nodes, grads, *x, dx);
        }
        Op::Sum(x) => {
            let dx = Tensor::full(nodes[*x].value.shape(), gd[0]);
            accumulate(nodes, grads, *x, dx);
        }
        Op::Mean(x) => {
            let xv = &nodes[*x].value;
            let dx = Tensor::full(xv.shape(), gd[0] / xv.numel() as f64);
            accumulate(nodes, grads, *x, dx);
        }
    }
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf or parameter node.
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// `(parameter, gradient)` pairs in tape order; a parameter loaded twice appears twice.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .map(|&(node, pid)| (pid, self.grads[node].as_ref().expect("param grad present")))
    }

    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (pid, g) in self.params() {
            store.accumulate_grad(pid, g);
        }
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables from different tapes"
        );
    }

    /// Cross-correlation of `self[N,C_in,H,W]` with `weight[C_out,C_in,kh,kw]`.
    ///
    /// Output size is `(H + 2·padding − kh) / stride + 1` with floor division.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, stride: usize, padding: usize) -> Result<Var<'t>> {
        self.same_tape(&weight);
        let xv = self.value();
        let wv = weight.value();
        let g = conv_geom(xv.shape(), wv.shape(), stride, padding)?;
        let (n, co) = (xv.shape()[0], wv.shape()[0]);
        if let Some(b) = bias {
            let bs = b.shape();
            if bs != [co] {
                return Err(shape_err!("conv2d bias shape {:?}, expected [{}]", bs, co));
            }
        }
        let (q, p) = (g.patch_len(), g.out_len());
        let in_len = g.channels * g.height * g.width;
        let mut out = Tensor::zeros(&[n, co, g.out_h, g.out_w]);
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; q * p] };
        for s in 0..n {
            let xs = &xv.data()[s * in_len..(s + 1) * in_len];
            let colv: &[f64] = if g.is_pointwise() {
                xs
            } else {
                kernels::im2col(xs, &g, &mut cols);
                &cols
            };
            let ys = &mut out.data_mut()[s * co * p..(s + 1) * co * p];
            kernels::gemm(
                self.tape.precision,
                co,
                q,
                p,
                Mat::rows(wv.data(), q),
                Mat::rows(colv, p),
                ys,
                false,
            );
            if let Some(b) = bias {
                let bv = b.value();
                for (c, row) in ys.chunks_mut(p).enumerate() {
                    let bc = bv.data()[c];
                    row.iter_mut().for_each(|v| *v += bc);
                }
            }
        }
        let mut inputs = vec![self.id, weight.id];
        inputs.extend(bias.map(|b| b.id));
        self.tape.push(
            out,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                stride,
                padding,
            },
            &inputs,
            "conv2d",
        )
    }

    /// `y = x·weightᵀ + bias` for `x[N,D_in]`, `weight[D_out,D_in]`.
    pub fn linear(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        self.same_tape(&weight);
        let xv = self.value();
        let wv = weight.value();
        if xv.ndim() != 2 || wv.ndim() != 2 || xv.shape()[1] != wv.shape()[1] {
            return Err(shape_err!(
                "linear: input {:?} incompatible with weight {:?}",
                xv.shape(),
                wv.shape()
            ));
        }
        let (n, din, dout) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
        let mut out = Tensor::zeros(&[n, dout]);
        kernels::gemm(
            self.tape.precision,
            n,
            din,
            dout,
            Mat::rows(xv.data(), din),
            Mat::transposed(wv.data(), din),
            out.data_mut(),
            false,
        );
        if let Some(b) = bias {
            let bv = b.value();
            if bv.shape() != [dout] {
                return Err(shape_err!("linear bias shape {:?}, expected [{}]", bv.shape(), dout));
            }
            for row in out.data_mut().chunks_mut(dout) {
                for (v, bb) in row.iter_mut().zip(bv.data()) {
                    *v += bb;
                }
            }
        }
        let mut inputs = vec![self.id, weight.id];
        inputs.extend(bias.map(|b| b.id));
        self.tape.push(
            out,
            Op::Linear {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
            },
            &inputs,
            "linear",
        )
    }

    pub fn relu(self) -> Result<Var<'t>> {
        let xv = self.value();
        let out = Tensor::from_fn(xv.shape(), |i| xv.data()[i].max(0.0));
        self.tape.push(out, Op::Relu(self.id), &[self.id], "relu")
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        let xv = self.value();
        let out = Tensor::from_fn(xv.shape(), |i| xv.data()[i].tanh());
        self.tape.push(out, Op::Tanh(self.id), &[self.id], "tanh")
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let xv = self.value();
        if axis >= xv.ndim() || xv.shape()[axis] < 2 {
            return Err(shape_err!("softmax over axis {} of shape {:?}", axis, xv.shape()));
        }
        let (outer, c, inner) = axis_split(xv.shape(), axis);
        let mut out = Tensor::zeros(xv.shape());
        let x = xv.data();
        let y = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * c + j) * inner + i;
                let max = (0..c).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..c {
                    let e = (x[idx(j)] - max).exp();
                    y[idx(j)] = e;
                    total += e;
                }
                for j in 0..c {
                    y[idx(j)] /= total;
                }
            }
        }
        self.tape.push(out, Op::Softmax { x: self.id, axis }, &[self.id], "softmax")
    }

    /// Divides by the sum along `axis`; inputs must be positive.
    pub fn normalize(self, axis: usize) -> Result<Var<'t>> {
        let xv = self.value();
        if axis >= xv.ndim() {
            return Err(shape_err!("normalize over axis {} of shape {:?}", axis, xv.shape()));
        }
        let (outer, c, inner) = axis_split(xv.shape(), axis);
        let mut out = Tensor::zeros(xv.shape());
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * c + j) * inner + i;
                let total: f64 = (0..c).map(|j| xv.data()[idx(j)]).sum();
                for j in 0..c {
                    out.data_mut()[idx(j)] = xv.data()[idx(j)] / total;
                }
            }
        }
        self.tape.push(out, Op::Normalize { x: self.id, axis }, &[self.id], "normalize")
    }

    /// Mean negative log-probability of `targets` where `self` holds probabilities
    /// along `axis`. `targets` enumerates the remaining positions in row-major order.
    pub fn nll(self, targets: &[usize], axis: usize) -> Result<Var<'t>> {
        let pv = self.value();
        if axis >= pv.ndim() {
            return Err(shape_err!("nll over axis {} of shape {:?}", axis, pv.shape()));
        }
        let (outer, c, inner) = axis_split(pv.shape(), axis);
        if targets.len() != outer * inner {
            return Err(shape_err!(
                "nll: {} targets for {} positions",
                targets.len(),
                outer * inner
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Value(format!("target class {bad} outside [0, {c})")));
        }
        let mut total = 0.0;
        for o in 0..outer {
            for i in 0..inner {
                let t = targets[o * inner + i];
                total -= pv.data()[(o * c + t) * inner + i].max(NLL_EPS).ln();
            }
        }
        let loss = Tensor::scalar(total / targets.len() as f64);
        self.tape.push(
            loss,
            Op::Nll {
                p: self.id,
                axis,
                targets: targets.to_vec(),
            },
            &[self.id],
            "nll",
        )
    }

    /// Softmax followed by [`Var::nll`].
    pub fn cross_entropy_logits(self, targets: &[usize], axis: usize) -> Result<Var<'t>> {
        self.softmax(axis)?.nll(targets, axis)
    }

    /// Corner-aligned bilinear resize of `self[N,C,H,W]` to `[N,C,out_h,out_w]`.
    pub fn upsample_bilinear(self, out_h: usize, out_w: usize) -> Result<Var<'t>> {
        self.resize_bilinear(out_h, out_w, Alignment::Corners)
    }

    /// Bilinear resize of `self[N,C,H,W]` with the given grid alignment.
    pub fn resize_bilinear(self, out_h: usize, out_w: usize, align: Alignment) -> Result<Var<'t>> {
        let xv = self.value();
        let s = xv.shape();
        if s.len() != 4 || out_h == 0 || out_w == 0 {
            return Err(shape_err!(
                "upsample_bilinear: input {:?} to {}×{}",
                s,
                out_h,
                out_w
            ));
        }
        let (h, w) = (s[2], s[3]);
        let mut out = Tensor::zeros(&[s[0], s[1], out_h, out_w]);
        for plane in 0..s[0] * s[1] {
            kernels::resize_plane(
                &xv.data()[plane * h * w..(plane + 1) * h * w],
                h,
                w,
                out_h,
                out_w,
                align,
                &mut out.data_mut()[plane * out_h * out_w..(plane + 1) * out_h * out_w],
            );
        }
        self.tape.push(out, Op::Upsample(self.id, align), &[self.id], "upsample_bilinear")
    }

    fn binary(self, other: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, Var<'t>)> {
        self.same_tape(&other);
        let av = self.value();
        let bv = other.value();
        if av.shape() != bv.shape() {
            return Err(shape_err!("{}: shapes {:?} and {:?} differ", name, av.shape(), bv.shape()));
        }
        let out = Tensor::from_fn(av.shape(), |i| f(av.data()[i], bv.data()[i]));
        Ok((out, other))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (out, other) = self.binary(other, "add", |a, b| a + b)?;
        self.tape.push(out, Op::Add(self.id, other.id), &[self.id, other.id], "add")
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (out, other) = self.binary(other, "sub", |a, b| a - b)?;
        self.tape.push(out, Op::Sub(self.id, other.id), &[self.id, other.id], "sub")
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (out, other) = self.binary(other, "mul", |a, b| a * b)?;
        self.tape.push(out, Op::Mul(self.id, other.id), &[self.id, other.id], "mul")
    }

    /// Multiplication by a constant.
    pub fn scale(self, factor: f64) -> Result<Var<'t>> {
        let xv = self.value();
        let out = Tensor::from_fn(xv.shape(), |i| xv.data()[i] * factor);
        self.tape.push(out, Op::Scale { x: self.id, factor }, &[self.id], "scale")
    }

    /// Multiplication by a differentiable one-element tensor.
    pub fn scale_by(self, s: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&s);
        let sv = s.value();
        if sv.numel() != 1 {
            return Err(shape_err!("scale_by expects a one-element factor, got {:?}", sv.shape()));
        }
        let xv = self.value();
        let f = sv.data()[0];
        let out = Tensor::from_fn(xv.shape(), |i| xv.data()[i] * f);
        self.tape.push(out, Op::ScaleBy { x: self.id, s: s.id }, &[self.id, s.id], "scale_by")
    }

    /// Multiplies every `H×W` plane of `self[N,K,H,W]` by the matching entry of `gate` (`N·K` elements).
    pub fn channel_scale(self, gate: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&gate);
        let xv = self.value();
        let gv = gate.value();
        if xv.ndim() != 4 || gv.numel() != xv.shape()[0] * xv.shape()[1] {
            return Err(shape_err!(
                "channel_scale: features {:?} and gate {:?}",
                xv.shape(),
                gv.shape()
            ));
        }
        let hw = xv.shape()[2] * xv.shape()[3];
        let out = Tensor::from_fn(xv.shape(), |i| xv.data()[i] * gv.data()[i / hw]);
        self.tape.push(
            out,
            Op::ChannelScale {
                x: self.id,
                gate: gate.id,
            },
            &[self.id, gate.id],
            "channel_scale",
        )
    }

    /// Spatial mean of each plane: `[N,K,H,W] → [N,K]`.
    pub fn channel_mean(self) -> Result<Var<'t>> {
        let xv = self.value();
        let s = xv.shape();
        if s.len() != 4 || s[2] * s[3] == 0 {
            return Err(shape_err!("channel_mean expects [N,K,H,W], got {:?}", s));
        }
        let hw = s[2] * s[3];
        let out = Tensor::from_fn(&[s[0], s[1]], |k| {
            xv.data()[k * hw..(k + 1) * hw].iter().sum::<f64>() / hw as f64
        });
        self.tape.push(out, Op::ChannelMean(self.id), &[self.id], "channel_mean")
    }

    /// Per-channel `[mean_c, mean_p, std_c, std_p]` over two pixel index sets of
    /// each `H×W` plane of `self` (`[1,K,H,W]` or `[K,H,W]`). Output `[K,4]`.
    ///
    /// Standard deviations use the population (1/N) normalization. Region
    /// membership is treated as a constant.
    pub fn region_stats(self, center: &[usize], periphery: &[usize]) -> Result<Var<'t>> {
        let xv = self.value();
        let s = xv.shape();
        let (k, hw) = match s.len() {
            4 if s[0] == 1 => (s[1], s[2] * s[3]),
            3 => (s[0], s[1] * s[2]),
            _ => return Err(shape_err!("region_stats expects [1,K,H,W] or [K,H,W], got {:?}", s)),
        };
        if center.is_empty() || periphery.is_empty() {
            return Err(Error::Value("region_stats needs non-empty regions".into()));
        }
        if center.iter().chain(periphery).any(|&p| p >= hw) {
            return Err(shape_err!("region pixel index outside a {}-pixel plane", hw));
        }
        let mut out = Tensor::zeros(&[k, 4]);
        for ch in 0..k {
            let plane = &xv.data()[ch * hw..(ch + 1) * hw];
            for (region, mean_col, std_col) in [(center, 0, 2), (periphery, 1, 3)] {
                let n = region.len() as f64;
                let mean = region.iter().map(|&p| plane[p]).sum::<f64>() / n;
                let var = region.iter().map(|&p| (plane[p] - mean).powi(2)).sum::<f64>() / n;
                out.data_mut()[ch * 4 + mean_col] = mean;
                out.data_mut()[ch * 4 + std_col] = var.sqrt();
            }
        }
        self.tape.push(
            out,
            Op::RegionStats {
                x: self.id,
                center: center.to_vec(),
                periphery: periphery.to_vec(),
            },
            &[self.id],
            "region_stats",
        )
    }

    /// Concatenates `[N,A]` and `[N,B]` into `[N,A+B]`.
    pub fn concat(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let av = self.value();
        let bv = other.value();
        if av.ndim() != 2 || bv.ndim() != 2 || av.shape()[0] != bv.shape()[0] {
            return Err(shape_err!("concat: {:?} and {:?}", av.shape(), bv.shape()));
        }
        let (rows, a, b) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut data = Vec::with_capacity(rows * (a + b));
        for r in 0..rows {
            data.extend_from_slice(&av.data()[r * a..(r + 1) * a]);
            data.extend_from_slice(&bv.data()[r * b..(r + 1) * b]);
        }
        let out = Tensor::new(&[rows, a + b], data)?;
        self.tape.push(out, Op::Concat { a: self.id, b: other.id }, &[self.id, other.id], "concat")
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshaped(shape)?;
        self.tape.push(out, Op::Reshape(self.id), &[self.id], "reshape")
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.push(out, Op::Sum(self.id), &[self.id], "sum")
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let xv = self.value();
        let out = Tensor::scalar(xv.sum() / xv.numel() as f64);
        self.tape.push(out, Op::Mean(self.id), &[self.id], "mean")
    }
}
