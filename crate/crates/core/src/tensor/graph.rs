use super::kernels::{col2im, gemm, im2col, max_pool2x2, ConvGeom, MatRef};
use super::{numel, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, T),
    MulCols(Var, Vec<T>),
    Relu(Var),
    Concat(Var, Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        // Saved only when the kernel needs a gradient.
        cols: Option<Vec<T>>,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<u32>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
    SqDist {
        x: Var,
        target: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Append-only record of executed operations.
///
/// Nodes are stored in execution order, which is a topological order, so
/// backward is a single reverse sweep. Leaf gradients persist across
/// `backward` calls and accumulate until [`Graph::zero_grad`].
#[derive(Debug)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a copy of `t` as a leaf; it tracks gradients iff `t` does.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// Records raw data as a leaf.
    pub fn input(&mut self, shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::dim("input", shape, &[data.len()]));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, requires_grad))
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, false)
    }

    /// Exact zero tensor shaped like `v`, with no gradient path.
    pub fn zeros_like(&mut self, v: Var) -> Var {
        let shape = self.nodes[v.0].shape.clone();
        let n = numel(&shape);
        self.push(shape, vec![T::zero(); n], Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        let n = &self.nodes[v.0];
        assert_eq!(n.value.len(), 1, "scalar() on non-scalar node");
        n.value[0]
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            MatRef::rm(self.value(a), m, k),
            MatRef::rm(self.value(b), k, n),
            T::zero(),
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// Adds a bias vector to every row of `x` (broadcast over the last axis).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let cols = *sx.last().unwrap_or(&1);
        if sb.len() != 1 || sb[0] != cols {
            return Err(Error::dim("add_bias", sx, sb));
        }
        let bias = self.value(b);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(cols) {
            row.iter_mut().zip(bias).for_each(|(o, &bv)| *o += bv);
        }
        let shape = sx.to_vec();
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(shape, out, Op::AddBias(x, b), rg))
    }

    /// Fully connected layer `x * w + b` with `w` stored as `in x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&p, &q)| p + q)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, Op::Scale(x, s), rg)
    }

    /// Multiplies column `j` of the last axis by the constant `s[j]`.
    pub fn mul_cols(&mut self, x: Var, s: &[T]) -> Result<Var> {
        let sx = self.shape(x);
        if sx.last() != Some(&s.len()) {
            return Err(Error::dim("mul_cols", sx, &[s.len()]));
        }
        let out: Vec<T> = self
            .value(x)
            .chunks(s.len())
            .flat_map(|row| row.iter().zip(s).map(|(&v, &k)| v * k))
            .collect();
        let shape = sx.to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::MulCols(x, s.to_vec()), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, Op::Relu(x), rg)
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::dim("concat", sa, sb));
        }
        let (ca, cb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let mut out = Vec::with_capacity(numel(&shape));
        for (ra, rb) in self.value(a).chunks(ca).zip(self.value(b).chunks(cb)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Concat(a, b), rg))
    }

    /// Columns `start..end` of the last axis; the inverse of [`Graph::concat`].
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let sx = self.shape(x);
        let c = sx.last().copied().unwrap_or(0);
        if start >= end || end > c {
            return Err(Error::Usage(format!("column slice {start}..{end} of shape {sx:?}")));
        }
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = end - start;
        let out: Vec<T> = self.value(x).chunks(c).flat_map(|row| row[start..end].iter().copied()).collect();
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::SliceCols { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), rg))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.is_empty() {
            return Err(Error::dim("flatten", s, &[]));
        }
        let shape = [s[0], numel(&s[1..])];
        self.reshape(x, &shape)
    }

    /// 2-D cross-correlation of `x: N x Cin x H x W` with `w: Cout x Cin x kh x kw`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sb != [sw[0]] {
            return Err(Error::dim("conv2d", sx, sw));
        }
        if stride == 0 {
            return Err(Error::Validation("conv2d stride must be positive".into()));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        let span_h = h + 2 * pad;
        let span_w = wd + 2 * pad;
        if span_h < kh || span_w < kw || (span_h - kh) % stride != 0 || (span_w - kw) % stride != 0 {
            return Err(Error::dim("conv2d output extent", sx, sw));
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            oh: (span_h - kh) / stride + 1,
            ow: (span_w - kw) / stride + 1,
        };
        let (k, p) = (geom.k(), geom.p());
        let cols = im2col(self.value(x), &geom);
        let mut tmp = vec![T::zero(); o * n * p];
        gemm(
            MatRef::rm(self.value(w), o, k),
            MatRef::rm(&cols, k, n * p),
            T::zero(),
            &mut tmp,
        );
        let bias = self.value(b);
        let mut out = vec![T::zero(); n * o * p];
        for oc in 0..o {
            for ni in 0..n {
                let src = &tmp[oc * n * p + ni * p..][..p];
                let dst = &mut out[(ni * o + oc) * p..][..p];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d = s + bias[oc]);
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let cols = self.rg(w).then_some(cols);
        Ok(self.push(
            vec![n, o, geom.oh, geom.ow],
            out,
            Op::Conv2d { x, w, b, geom, cols },
            rg,
        ))
    }

    /// 2x2 max pooling with stride 2 (odd trailing rows/columns dropped).
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::dim("max_pool2d", s, &[2, 2]));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (out, argmax) = max_pool2x2(self.value(x), n * c, h, w);
        let rg = self.rg(x);
        Ok(self.push(vec![n, c, h / 2, w / 2], out, Op::MaxPool2d { x, argmax }, rg))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim("cross_entropy", s, &[labels.len()]));
        }
        let classes = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut probs = Vec::with_capacity(labels.len() * classes);
        let mut total = T::zero();
        for (row, &label) in self.value(logits).chunks(classes).zip(labels) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            let log_z = z.ln();
            total += log_z - (row[label] - m);
            probs.extend(row.iter().map(|&v| (v - m - log_z).exp()));
        }
        let loss = total / T::of(labels.len() as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(vec![], vec![total], Op::Sum(x), rg)
    }

    /// Squared Euclidean distance to a constant target.
    pub fn sq_dist(&mut self, x: Var, target: &[T]) -> Result<Var> {
        if self.value(x).len() != target.len() {
            return Err(Error::dim("sq_dist", self.shape(x), &[target.len()]));
        }
        let d = self
            .value(x)
            .iter()
            .zip(target)
            .map(|(&a, &t)| (a - t) * (a - t))
            .sum();
        let rg = self.rg(x);
        Ok(self.push(
            vec![],
            vec![d],
            Op::SqDist {
                x,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();
        let nodes = &self.nodes;

        // Gradient buffer for `v`, or None when `v` needs none.
        fn slot<'g, T: Scalar>(
            nodes: &[Node<T>],
            grads: &'g mut [Option<Vec<T>>],
            v: Var,
        ) -> Option<&'g mut Vec<T>> {
            let node = &nodes[v.0];
            if !node.requires_grad {
                return None;
            }
            Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => leaf_grads.push((i, g)),
                Op::MatMul(a, b) => {
                    let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                    let n = nodes[b.0].shape[1];
                    if let Some(da) = slot(nodes, &mut grads, *a) {
                        gemm(
                            MatRef::rm(&g, m, n),
                            MatRef::rm(&nodes[b.0].value, k, n).t(),
                            T::one(),
                            da,
                        );
                    }
                    if let Some(db) = slot(nodes, &mut grads, *b) {
                        gemm(
                            MatRef::rm(&nodes[a.0].value, m, k).t(),
                            MatRef::rm(&g, m, n),
                            T::one(),
                            db,
                        );
                    }
                }
                Op::AddBias(x, b) => {
                    if let Some(dx) = slot(nodes, &mut grads, *x) {
                        dx.iter_mut().zip(&g).for_each(|(d, &v)| *d += v);
                    }
                    if let Some(db) = slot(nodes, &mut grads, *b) {
                        let cols = db.len();
                        for row in g.chunks(cols) {
                            db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        if let Some(d) = slot(nodes, &mut grads, *v) {
                            d.iter_mut().zip(&g).for_each(|(d, &v)| *d += v);
                        }
                    }
                }
                Op::Scale(x, s) => {
                    if let Some(dx) = slot(nodes, &mut grads, *x) {
                        dx.iter_mut().zip(&g).for_each(|(d, &v)| *d += v * *s);
                    }
                }
                Op::Relu(x) => {
                    if let Some(dx) = slot(nodes, &mut grads, *x) {
                        for ((d, &v), &out) in dx.iter_mut().zip(&g).zip(&node.value) {
                            if out > T::zero() {
                                *d += v;
                            }
                        }
                    }
                }
                Op::Concat(a, b) => {
                    let ca = *nodes[a.0].shape.last().unwrap();
                    let cb = *nodes[b.0].shape.last().unwrap();
                    if let Some(da) = slot(nodes, &mut grads, *a) {
                        for (d, row) in da.chunks_mut(ca).zip(g.chunks(ca + cb)) {
                            d.iter_mut().zip(&row[..ca]).for_each(|(d, &v)| *d += v);
                        }
                    }
                    if let Some(db) = slot(nodes, &mut grads, *b) {
                        for (d, row) in db.chunks_mut(cb).zip(g.chunks(ca + cb)) {
                            d.iter_mut().zip(&row[ca..]).for_each(|(d, &v)| *d += v);
                        }
                    }
                }
                Op::MulCols(x, s) => {
                    if let Some(dx) = slot(nodes, &mut grads, *x) {
                        for (d, row) in dx.chunks_mut(s.len()).zip(g.chunks(s.len())) {
                            d.iter_mut().zip(row).zip(s).for_each(|((d, &v), &k)| *d += v * k);
                        }
                    }
                }
                Op::SliceCols { x, start } => {
                    let c = *nodes[x.0].shape.last().unwrap();
                    let w = *node.shape.last().unwrap();
                    if let Some(dx) = slot(nodes, &mut grads, *x) {
                        for (d, row) in dx.chunks_mut(c).zip(g.chunks(w)) {
                            d[*start..start + w].iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                        }
                    }
                }
                Op::Reshape(x) => {
                    if let Some(dx) = slot(nodes, &mut grads, *x) {
                        dx.iter_mut().zip(&g).for_each(|(d, &v)| *d += v);
                    }
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    geom,
                    cols,
                } => {
                    let (o, k, n, p) = (nodes[w.0].shape[0], geom.k(), geom.n, geom.p());
                    // Permute N x O x P -> O x (N * P) to match the column layout.
                    let mut gt = vec![T::zero(); o * n * p];
                    for ni in 0..n {
                        for oc in 0..o {
                            gt[oc * n * p + ni * p..][..p]
                                .copy_from_slice(&g[(ni * o + oc) * p..][..p]);
                        }
                    }
                    if let Some(db) = slot(nodes, &mut grads, *b) {
                        for (d, row) in db.iter_mut().zip(gt.chunks(n * p)) {
                            *d += row.iter().copied().sum();
                        }
                    }
                    if let Some(dw) = slot(nodes, &mut grads, *w) {
                        let cols = cols.as_ref().expect("columns saved for kernel gradient");
                        gemm(
                            MatRef::rm(&gt, o, n * p),
                            MatRef::rm(cols, k, n * p).t(),
                            T::one(),
                            dw,
                        );
                    }
                    if let Some(dx) = slot(nodes, &mut grads, *x) {
                        let mut dcols = vec![T::zero(); k * n * p];
                        gemm(
                            MatRef::rm(&nodes[w.0].value, o, k).t(),
                            MatRef::rm(&gt, o, n * p),
                            T::zero(),
                            &mut dcols,
                        );
                        col2im(&dcols, geom, dx);
                    }
                }
                Op::MaxPool2d { x, argmax } => {
                    if let Some(dx) = slot(nodes, &mut grads, *x) {
                        for (&idx, &v) in argmax.iter().zip(&g) {
                            dx[idx as usize] += v;
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    if let Some(dl) = slot(nodes, &mut grads, *logits) {
                        let classes = probs.len() / labels.len();
                        let s = g[0] / T::of(labels.len() as f64);
                        for (r, &label) in labels.iter().enumerate() {
                            let row = &mut dl[r * classes..(r + 1) * classes];
                            for (c, d) in row.iter_mut().enumerate() {
                                let onehot = if c == label { T::one() } else { T::zero() };
                                *d += s * (probs[r * classes + c] - onehot);
                            }
                        }
                    }
                }
                Op::Sum(x) => {
                    if let Some(dx) = slot(nodes, &mut grads, *x) {
                        dx.iter_mut().for_each(|d| *d += g[0]);
                    }
                }
                Op::SqDist { x, target } => {
                    let xv = &nodes[x.0].value;
                    if let Some(dx) = slot(nodes, &mut grads, *x) {
                        let two = T::of(2.0);
                        for ((d, &a), &t) in dx.iter_mut().zip(xv).zip(target) {
                            *d += g[0] * two * (a - t);
                        }
                    }
                }
            }
        }

        for (i, g) in leaf_grads {
            match &mut self.nodes[i].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &v)| *a += v),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}
