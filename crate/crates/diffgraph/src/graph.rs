//! Define-by-run computation tape.
//!
//! Every forward operation appends a node holding its output value and
//! whatever it needs for the backward pass. Nodes are stored in creation
//! order, so inputs always precede their consumers and the reverse sweep in
//! [`Graph::backward`] is a simple reverse iteration.

use crate::error::{GraphError, Result};
use crate::kernels::{self, ConvGeom, Mat};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Exp(Var),
    Square(Var),
    Softplus(Var),
    Softmax(Var),
    Normalize { x: Var, inv_std: Vec<f64> },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    AvgPool2d { x: Var, k: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    PairwiseSqDist { x: Var, y: Var },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::ScaleRows(..) => "scale_rows",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "batch_matmul",
            Op::Transpose(..) => "transpose",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Square(..) => "square",
            Op::Softplus(..) => "softplus",
            Op::Softmax(..) => "softmax",
            Op::Normalize { .. } => "normalize",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2d { .. } => "avg_pool2d",
            Op::Concat { .. } => "concat",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::PairwiseSqDist { .. } => "pairwise_sq_dist",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. One graph per forward pass; not shared across threads.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if `v` is a leaf that
    /// requires a gradient and is reachable from the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const NORM_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Name of the operation that produced `v`.
    pub fn op_kind(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.kind()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(GraphError::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// Add a vector of length `D` to every length-`D` row of `x` (bias add).
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        let d = *xs.last().unwrap_or(&1);
        if bs.len() != 1 || bs[0] != d {
            return Err(GraphError::shape("add_row", xs, bs));
        }
        let mut v = self.value(x).clone();
        let bias = self.value(b).data();
        for row in v.data_mut().chunks_mut(d) {
            for (o, bi) in row.iter_mut().zip(bias) {
                *o += bi;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(v, Op::AddRow(x, b), rg))
    }

    /// Multiply each leading-dimension entry of `x` by the matching entry of `s`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xs, ss) = (self.shape(x), self.shape(s));
        if xs.is_empty() || ss.len() != 1 || ss[0] != xs[0] {
            return Err(GraphError::shape("scale_rows", xs, ss));
        }
        let w = self.value(x).row_len();
        let mut v = self.value(x).clone();
        let sv = self.value(s).data();
        for (row, si) in v.data_mut().chunks_mut(w.max(1)).zip(sv) {
            for o in row {
                *o *= si;
            }
        }
        let rg = self.rg(&[x, s]);
        Ok(self.push(v, Op::ScaleRows(x, s), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a * c);
        let rg = self.rg(&[x]);
        self.push(v, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a + c);
        let rg = self.rg(&[x]);
        self.push(v, Op::AddScalar(x), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// `a (.. x K) @ b (K x M)`; leading dimensions of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(GraphError::shape("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k.max(1);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            Mat::rm(self.value(a).data(), k),
            Mat::rm(self.value(b).data(), n),
            0.0,
            &mut out,
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let v = Tensor::new(&shape, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    /// `a (B x N x K) @ b (B x K x M)`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(GraphError::shape("batch_matmul", &sa, &sb));
        }
        let (bt, n, k, m) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bt * n * m];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bt {
            kernels::gemm(
                n,
                k,
                m,
                Mat::rm(&ad[i * n * k..][..n * k], k),
                Mat::rm(&bd[i * k * m..][..k * m], m),
                0.0,
                &mut out[i * n * m..][..n * m],
            );
        }
        let v = Tensor::new(&[bt, n, m], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::BatchMatMul(a, b), rg))
    }

    /// Swap the last two dimensions.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(GraphError::invalid("transpose", format!("rank {} < 2", s.len())));
        }
        let v = transpose_last2(self.value(x));
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Transpose(x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        // `f64::max` would turn NaN into 0 and hide it
        let v = self.value(x).map(|a| if a < 0.0 { 0.0 } else { a });
        let rg = self.rg(&[x]);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp);
        let rg = self.rg(&[x]);
        self.push(v, Op::Exp(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * a);
        let rg = self.rg(&[x]);
        self.push(v, Op::Square(x), rg)
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).map(kernels::softplus);
        let rg = self.rg(&[x]);
        self.push(v, Op::Softplus(x), rg)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let d = *self
            .shape(x)
            .last()
            .ok_or(GraphError::invalid("softmax", "scalar input"))?;
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(d.max(1)) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for a in row.iter_mut() {
                *a = (*a - mx).exp();
                z += *a;
            }
            for a in row.iter_mut() {
                *a /= z;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Softmax(x), rg))
    }

    /// Zero-mean, unit-variance normalization over the last dimension.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let d = *self
            .shape(x)
            .last()
            .ok_or(GraphError::invalid("normalize", "scalar input"))?;
        let mut v = self.value(x).clone();
        let mut inv_std = Vec::with_capacity(v.numel() / d.max(1));
        for row in v.data_mut().chunks_mut(d.max(1)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            for a in row.iter_mut() {
                *a = (*a - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Normalize { x, inv_std }, rg))
    }

    /// 2-D convolution of `x` (N x C x H x W) with `w` (O x C x k x k),
    /// symmetric zero padding `pad`, and optional per-channel bias `b`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(GraphError::shape("conv2d", &xs, &ws));
        }
        if stride == 0 || stride > 2 {
            return Err(GraphError::invalid("conv2d", format!("stride {stride} not in 1..=2")));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(GraphError::shape("conv2d", &xs, &ws));
        }
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs != [o] {
                return Err(GraphError::shape("conv2d bias", &ws, bs));
            }
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        };
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let (pk, np, p) = (geom.patch(), n * geom.positions(), geom.positions());
        let mut tmp = vec![0.0; o * np];
        kernels::gemm(
            o,
            pk,
            np,
            Mat::rm(self.value(w).data(), pk),
            Mat::rm(&cols, np),
            0.0,
            &mut tmp,
        );
        let mut out = vec![0.0; n * o * p];
        let bias = b.map(|b| self.value(b).data().to_vec());
        for oc in 0..o {
            let bo = bias.as_ref().map_or(0.0, |bv| bv[oc]);
            for ni in 0..n {
                let src = &tmp[oc * np + ni * p..][..p];
                let dst = &mut out[(ni * o + oc) * p..][..p];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bo;
                }
            }
        }
        let v = Tensor::new(&[n, o, geom.ho, geom.wo], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        // Columns are only needed to form the weight gradient.
        let keep_cols = self.requires_grad(w);
        let cols = if keep_cols { cols } else { Vec::new() };
        Ok(self.push(v, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    /// Non-overlapping `k x k` average pooling over the last two dimensions.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || s[2] % k != 0 || s[3] % k != 0 {
            return Err(GraphError::invalid(
                "avg_pool2d",
                format!("window {k} does not tile shape {s:?}"),
            ));
        }
        let out = kernels::avg_pool(self.value(x).data(), s[0] * s[1], s[2], s[3], k);
        let v = Tensor::new(&[s[0], s[1], s[2] / k, s[3] / k], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::AvgPool2d { x, k }, rg))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or(GraphError::Empty("concat"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(GraphError::invalid("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(GraphError::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Tensor::new(&shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(&[x]);
        self.push(v, Op::Mean(x), rg)
    }

    /// Sum over `axis`, dropping that dimension.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(GraphError::invalid("sum_axis", format!("axis {axis} out of range")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let len = s[axis];
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let row = &src[(o * len + a) * inner..][..inner];
                for (d, v) in out[o * inner..][..inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let v = Tensor::new(&shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::SumAxis { x, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or(GraphError::invalid("mean_axis", format!("axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// `D[i][j] = max(0, |x_i|^2 - 2 x_i.y_j + |y_j|^2)` for `x` (N x d), `y` (M x d).
    pub fn pairwise_sq_dist(&mut self, x: Var, y: Var) -> Result<Var> {
        let v = pairwise_sq_dists(self.value(x), self.value(y))?;
        let rg = self.rg(&[x, y]);
        Ok(self.push(v, Op::PairwiseSqDist { x, y }, rg))
    }

    /// Reverse sweep from a scalar `root`. Only leaves that require a
    /// gradient keep an entry in the result.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(GraphError::NotScalar {
                shape: rv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(node, &gy, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.map(|g| -g));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let g = gy.zip_map(self.value(*b), |g, bv| g * bv)?;
                    self.accumulate(grads, *a, g);
                }
                if self.requires_grad(*b) {
                    let g = gy.zip_map(self.value(*a), |g, av| g * av)?;
                    self.accumulate(grads, *b, g);
                }
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, gy.clone());
                if self.requires_grad(*b) {
                    let d = self.shape(*b)[0];
                    let mut gb = vec![0.0; d];
                    for row in gy.data().chunks(d) {
                        for (acc, g) in gb.iter_mut().zip(row) {
                            *acc += g;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(&[d], gb)?);
                }
            }
            Op::ScaleRows(x, s) => {
                let w = self.value(*x).row_len().max(1);
                if self.requires_grad(*x) {
                    let sv = self.value(*s).data();
                    let mut gx = gy.clone();
                    for (row, si) in gx.data_mut().chunks_mut(w).zip(sv) {
                        for g in row {
                            *g *= si;
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.requires_grad(*s) {
                    let gs: Vec<f64> = gy
                        .data()
                        .chunks(w)
                        .zip(self.value(*x).data().chunks(w))
                        .map(|(g, xv)| g.iter().zip(xv).map(|(a, b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *s, Tensor::new(self.shape(*s), gs)?);
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, gy.map(|g| g * c)),
            Op::AddScalar(x) => self.accumulate(grads, *x, gy.clone()),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let m = av.numel() / k.max(1);
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm(m, n, k, Mat::rm(gy.data(), n), Mat::tr(bv.data(), n), 0.0, &mut ga);
                    self.accumulate(grads, *a, Tensor::new(av.shape(), ga)?);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm(k, m, n, Mat::tr(av.data(), k), Mat::rm(gy.data(), n), 0.0, &mut gb);
                    self.accumulate(grads, *b, Tensor::new(bv.shape(), gb)?);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (bt, n, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let m = bv.shape()[2];
                let gd = gy.data();
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; bt * n * k];
                    for i in 0..bt {
                        kernels::gemm(
                            n,
                            m,
                            k,
                            Mat::rm(&gd[i * n * m..][..n * m], m),
                            Mat::tr(&bv.data()[i * k * m..][..k * m], m),
                            0.0,
                            &mut ga[i * n * k..][..n * k],
                        );
                    }
                    self.accumulate(grads, *a, Tensor::new(av.shape(), ga)?);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; bt * k * m];
                    for i in 0..bt {
                        kernels::gemm(
                            k,
                            n,
                            m,
                            Mat::tr(&av.data()[i * n * k..][..n * k], k),
                            Mat::rm(&gd[i * n * m..][..n * m], m),
                            0.0,
                            &mut gb[i * k * m..][..k * m],
                        );
                    }
                    self.accumulate(grads, *b, Tensor::new(bv.shape(), gb)?);
                }
            }
            Op::Transpose(x) => self.accumulate(grads, *x, transpose_last2(gy)),
            Op::Relu(x) => {
                let g = gy.zip_map(y, |g, yv| if yv > 0.0 || yv.is_nan() { g * yv.signum() } else { 0.0 })?;
                self.accumulate(grads, *x, g);
            }
            Op::Exp(x) => self.accumulate(grads, *x, gy.zip_map(y, |g, yv| g * yv)?),
            Op::Square(x) => {
                let g = gy.zip_map(self.value(*x), |g, xv| 2.0 * g * xv)?;
                self.accumulate(grads, *x, g);
            }
            Op::Softplus(x) => {
                let g = gy.zip_map(self.value(*x), |g, xv| g * kernels::sigmoid(xv))?;
                self.accumulate(grads, *x, g);
            }
            Op::Softmax(x) => {
                let d = *y.shape().last().unwrap();
                let mut gx = gy.clone();
                for (gr, yr) in gx.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (g, yv) in gr.iter_mut().zip(yr) {
                        *g = yv * (*g - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Normalize { x, inv_std } => {
                let d = *y.shape().last().unwrap();
                let dn = d as f64;
                let mut gx = gy.clone();
                for ((gr, yr), is) in gx.data_mut().chunks_mut(d).zip(y.data().chunks(d)).zip(inv_std) {
                    let mg = gr.iter().sum::<f64>() / dn;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / dn;
                    for (g, yv) in gr.iter_mut().zip(yr) {
                        *g = is * (*g - mg - yv * mgy);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let o = self.shape(*w)[0];
                let (p, np, pk) = (geom.positions(), geom.n * geom.positions(), geom.patch());
                // Regroup the output gradient as O x (N*P) to match the column layout.
                let mut gt = vec![0.0; o * np];
                for ni in 0..geom.n {
                    for oc in 0..o {
                        gt[oc * np + ni * p..][..p].copy_from_slice(&gy.data()[(ni * o + oc) * p..][..p]);
                    }
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let gb: Vec<f64> = gt.chunks(np).map(|r| r.iter().sum()).collect();
                        self.accumulate(grads, *b, Tensor::new(&[o], gb)?);
                    }
                }
                if self.requires_grad(*w) {
                    let mut gw = vec![0.0; o * pk];
                    kernels::gemm(o, np, pk, Mat::rm(&gt, np), Mat::tr(cols, np), 0.0, &mut gw);
                    self.accumulate(grads, *w, Tensor::new(self.shape(*w), gw)?);
                }
                if self.requires_grad(*x) {
                    let mut gcols = vec![0.0; pk * np];
                    kernels::gemm(
                        pk,
                        o,
                        np,
                        Mat::tr(self.value(*w).data(), pk),
                        Mat::rm(&gt, np),
                        0.0,
                        &mut gcols,
                    );
                    let gx = kernels::col2im(&gcols, geom);
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x), gx)?);
                }
            }
            Op::AvgPool2d { x, k } => {
                let s = self.shape(*x);
                let gx = kernels::avg_pool_backward(gy.data(), s[0] * s[1], s[2], s[3], *k);
                self.accumulate(grads, *x, Tensor::new(s, gx)?);
            }
            Op::Concat { parts, axis } => {
                let base = y.shape();
                let outer: usize = base[..*axis].iter().product();
                let inner: usize = base[axis + 1..].iter().product();
                let total = base[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * inner;
                    if self.requires_grad(p) {
                        let mut gp = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            gp.extend_from_slice(&gy.data()[o * total + offset..][..chunk]);
                        }
                        self.accumulate(grads, p, Tensor::new(self.shape(p), gp)?);
                    }
                    offset += chunk;
                }
            }
            Op::Reshape(x) => self.accumulate(grads, *x, gy.reshape(self.shape(*x))?),
            Op::Sum(x) => {
                let g = gy.item()?;
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                let g = gy.item()? / n;
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g));
            }
            Op::SumAxis { x, axis } => {
                let s = self.shape(*x);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = s[*axis];
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let src = &gy.data()[o * inner..][..inner];
                    for a in 0..len {
                        gx[(o * len + a) * inner..][..inner].copy_from_slice(src);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(s, gx)?);
            }
            Op::PairwiseSqDist { x, y: yv } => {
                let (xt, yt) = (self.value(*x), self.value(*yv));
                let (n, d) = (xt.shape()[0], xt.shape()[1]);
                let m = yt.shape()[0];
                // Entries clamped at zero carry no gradient.
                let g: Vec<f64> = gy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &dv)| if dv > 0.0 { g } else { 0.0 })
                    .collect();
                if self.requires_grad(*x) {
                    // dX = 2 (rowsum(G) * X - G Y)
                    let mut gx = vec![0.0; n * d];
                    kernels::gemm(n, m, d, Mat::rm(&g, m), Mat::rm(yt.data(), d), 0.0, &mut gx);
                    for i in 0..n {
                        let rs: f64 = g[i * m..(i + 1) * m].iter().sum();
                        for k in 0..d {
                            gx[i * d + k] = 2.0 * (rs * xt.data()[i * d + k] - gx[i * d + k]);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(&[n, d], gx)?);
                }
                if self.requires_grad(*yv) {
                    // dY = 2 (colsum(G) * Y - G^T X)
                    let mut gyv = vec![0.0; m * d];
                    kernels::gemm(m, n, d, Mat::tr(&g, m), Mat::rm(xt.data(), d), 0.0, &mut gyv);
                    for j in 0..m {
                        let cs: f64 = (0..n).map(|i| g[i * m + j]).sum();
                        for k in 0..d {
                            gyv[j * d + k] = 2.0 * (cs * yt.data()[j * d + k] - gyv[j * d + k]);
                        }
                    }
                    self.accumulate(grads, *yv, Tensor::new(&[m, d], gyv)?);
                }
            }
        }
        Ok(())
    }
}

fn transpose_last2(t: &Tensor) -> Tensor {
    let s = t.shape();
    let r = s.len();
    let (a, b) = (s[r - 2], s[r - 1]);
    let batch = t.numel() / (a * b).max(1);
    let mut out = vec![0.0; t.numel()];
    for bi in 0..batch {
        let src = &t.data()[bi * a * b..][..a * b];
        let dst = &mut out[bi * a * b..][..a * b];
        for i in 0..a {
            for j in 0..b {
                dst[j * a + i] = src[i * b + j];
            }
        }
    }
    let mut shape = s.to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::new(&shape, out).expect("transpose preserves element count")
}

/// Squared Euclidean distances between rows of `x` (N x d) and `y` (M x d)
/// via the expansion `x.x - 2 x.y + y.y`, clamped at zero.
pub fn pairwise_sq_dists(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let (xs, ys) = (x.shape(), y.shape());
    if xs.len() != 2 || ys.len() != 2 || xs[1] != ys[1] {
        return Err(GraphError::shape("pairwise_sq_dist", xs, ys));
    }
    let (n, m, d) = (xs[0], ys[0], xs[1]);
    let mut out = vec![0.0; n * m];
    kernels::gemm(n, d, m, Mat::rm(x.data(), d), Mat::tr(y.data(), d), 0.0, &mut out);
    let xn: Vec<f64> = x.data().chunks(d.max(1)).map(|r| r.iter().map(|v| v * v).sum()).collect();
    let yn: Vec<f64> = y.data().chunks(d.max(1)).map(|r| r.iter().map(|v| v * v).sum()).collect();
    for i in 0..n {
        for j in 0..m {
            let v = xn[i] - 2.0 * out[i * m + j] + yn[j];
            out[i * m + j] = v.max(0.0);
        }
    }
    Tensor::new(&[n, m], out)
}
