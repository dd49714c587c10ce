use super::tensor::{gemm, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Square(Var),
    Relu(Var),
    Transpose(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    MaxPoolRows {
        input: Var,
        argmax: Vec<usize>,
    },
    ConcatCols(Var, Var),
    RepeatRows(Var),
    Chamfer {
        a: Var,
        b: Var,
        nearest_in_b: Vec<usize>,
        nearest_in_a: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    op: Op,
}

/// Define-by-run recording of tensor operations for reverse-mode
/// differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and `backward` simply walks it in reverse. Build a
/// fresh tape for every forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are only tracked for leaves created with
    /// `requires_grad` and for values that depend on them.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `var`.
    pub fn grad(&self, var: Var) -> Option<&Tensor> {
        self.nodes[var.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, var: Var) -> Option<Tensor> {
        self.nodes[var.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, n) = ta.dims2("matmul")?;
        let (n2, p) = tb.dims2("matmul")?;
        if n != n2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let out = Tensor::new(vec![m, p], gemm(ta.data(), tb.data(), m, n, p))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds `bias[c]` to every row of `x[r,c]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, c) = tx.dims2("add_bias")?;
        if tb.shape() != [c] {
            return Err(Error::shape("add_bias", tx.shape(), tb.shape()));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    /// `x * w + b`, with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (_, inp) = tx.dims2("linear")?;
        let (win, wout) = tw.dims2("linear")?;
        if inp != win {
            return Err(Error::shape("linear", tx.shape(), tw.shape()));
        }
        if tb.shape() != [wout] {
            return Err(Error::shape("linear", tw.shape(), tb.shape()));
        }
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= factor);
        self.push(out, Op::Scale(x, factor), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= *v);
        self.push(out, Op::Square(x), &[x])
    }

    /// Elementwise `max(x, 0)`; the subgradient at zero is taken as zero.
    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transposed()?;
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (_, n) = tx.dims2("softmax_rows")?;
        if n == 0 {
            return Err(Error::EmptyInput("softmax_rows"));
        }
        if tx.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("softmax_rows"));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(self.push(out, Op::SoftmaxRows(x), &[x]))
    }

    /// Column-wise maximum of `x[N,f]`, giving `[f]`. Ties go to the lowest
    /// row index, which is also the only row receiving gradient.
    pub fn maxpool_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, f) = tx.dims2("maxpool_rows")?;
        if n == 0 {
            return Err(Error::EmptyInput("maxpool_rows"));
        }
        let mut argmax = vec![0usize; f];
        let mut out = tx.row(0).to_vec();
        for i in 1..n {
            for (j, &v) in tx.row(i).iter().enumerate() {
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = i;
                }
            }
        }
        Ok(self.push(
            Tensor::vector(out),
            Op::MaxPoolRows { input: x, argmax },
            &[x],
        ))
    }

    /// `[a | b]` for `a[N,p]`, `b[N,q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, p) = ta.dims2("concat_cols")?;
        let (n2, q) = tb.dims2("concat_cols")?;
        if n != n2 {
            return Err(Error::shape("concat_cols", ta.shape(), tb.shape()));
        }
        let mut data = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            data.extend_from_slice(ta.row(i));
            data.extend_from_slice(tb.row(i));
        }
        let out = Tensor::new(vec![n, p + q], data)?;
        Ok(self.push(out, Op::ConcatCols(a, b), &[a, b]))
    }

    /// Stacks the vector `v[q]` into `[rows, q]`.
    pub fn repeat_rows(&mut self, v: Var, rows: usize) -> Result<Var> {
        let tv = self.value(v);
        if tv.ndim() != 1 {
            return Err(Error::shape("repeat_rows", tv.shape(), &[tv.len()]));
        }
        let q = tv.len();
        let data = tv.data().repeat(rows);
        let out = Tensor::new(vec![rows, q], data)?;
        Ok(self.push(out, Op::RepeatRows(v), &[v]))
    }

    /// Symmetric squared chamfer distance between point sets `a[N,3]` and
    /// `b[M,3]`: nearest-neighbour squared distances summed in both
    /// directions. Nearest-neighbour ties go to the lowest index.
    pub fn chamfer_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, ca) = ta.dims2("chamfer_loss")?;
        let (m, cb) = tb.dims2("chamfer_loss")?;
        if ca != 3 || cb != 3 {
            return Err(Error::shape("chamfer_loss", ta.shape(), tb.shape()));
        }
        if n == 0 || m == 0 {
            return Err(Error::EmptyInput("chamfer_loss"));
        }
        let (pa, pb) = (ta.data(), tb.data());
        let mut best_a = vec![f64::INFINITY; n];
        let mut best_b = vec![f64::INFINITY; m];
        let mut nearest_in_b = vec![0usize; n];
        let mut nearest_in_a = vec![0usize; m];
        for i in 0..n {
            let x = &pa[3 * i..3 * i + 3];
            for j in 0..m {
                let y = &pb[3 * j..3 * j + 3];
                let d = sq_dist(x, y);
                if d < best_a[i] {
                    best_a[i] = d;
                    nearest_in_b[i] = j;
                }
                if d < best_b[j] {
                    best_b[j] = d;
                    nearest_in_a[j] = i;
                }
            }
        }
        let forward: f64 = best_a.iter().sum();
        let backward: f64 = best_b.iter().sum();
        Ok(self.push(
            Tensor::scalar(forward + backward),
            Op::Chamfer {
                a,
                b,
                nearest_in_b,
                nearest_in_a,
            },
            &[a, b],
        ))
    }

    /// `-log softmax(logits)[label]` for a logit vector `[C]`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let tl = self.value(logits);
        if tl.ndim() != 1 || tl.is_empty() {
            return Err(Error::shape("cross_entropy", tl.shape(), &[tl.len()]));
        }
        let classes = tl.len();
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        if tl.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cross_entropy"));
        }
        let max = tl.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = tl.data().iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let loss = total.ln() + max - tl.data()[label];
        let probs = exps.iter().map(|e| e / total).collect();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            &[logits],
        ))
    }

    /// Accumulates `d loss / d v` into every reachable node that requires a
    /// gradient. Leaf gradients add up across calls until [`Tape::zero_grad`];
    /// intermediate gradients are reset on each call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.accumulate(loss, Tensor::full(&shape, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(grad) = node.grad.as_ref() else {
                continue;
            };
            let contributions = self.local_backward(idx, grad)?;
            for (var, g) in contributions {
                if self.nodes[var.0].requires_grad {
                    self.accumulate(var, g);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, var: Var, g: Tensor) {
        let slot = &mut self.nodes[var.0].grad;
        match slot {
            Some(existing) => existing.add_assign(&g),
            None => *slot = Some(g),
        }
    }

    fn local_backward(&self, idx: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[idx];
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, n) = ta.dims2("matmul")?;
                let p = tb.shape()[1];
                let mut out = Vec::with_capacity(2);
                if self.requires_grad(*a) {
                    let ga = gemm_nt(g.data(), tb.data(), m, n, p);
                    out.push((*a, Tensor::new(vec![m, n], ga)?));
                }
                if self.requires_grad(*b) {
                    let gb = gemm_tn(ta.data(), g.data(), m, n, p);
                    out.push((*b, Tensor::new(vec![n, p], gb)?));
                }
                out
            }
            Op::AddBias(x, b) => {
                let c = g.shape()[1];
                let mut gb = vec![0.0; c];
                for row in g.data().chunks_exact(c) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![(*x, g.clone()), (*b, Tensor::vector(gb))]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Scale(x, factor) => {
                let mut gx = g.clone();
                gx.data_mut().iter_mut().for_each(|v| *v *= factor);
                vec![(*x, gx)]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(self.value(*x).shape(), g.item()))],
            Op::Square(x) => {
                let mut gx = g.clone();
                for (gv, xv) in gx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    *gv *= 2.0 * xv;
                }
                vec![(*x, gx)]
            }
            Op::Relu(x) => {
                let mut gx = g.clone();
                for (gv, xv) in gx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if *xv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                vec![(*x, gx)]
            }
            Op::Transpose(x) => vec![(*x, g.transposed()?)],
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                vec![(*x, g.clone().reshaped(shape)?)]
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let n = y.shape()[1];
                let mut gx = g.clone();
                for (grow, yrow) in gx
                    .data_mut()
                    .chunks_exact_mut(n)
                    .zip(y.data().chunks_exact(n))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (gv, yv) in grow.iter_mut().zip(yrow) {
                        *gv = yv * (*gv - dot);
                    }
                }
                vec![(*x, gx)]
            }
            Op::MaxPoolRows { input, argmax } => {
                let shape = self.value(*input).shape();
                let f = shape[1];
                let mut gx = Tensor::zeros(shape);
                for (j, (&row, gv)) in argmax.iter().zip(g.data()).enumerate() {
                    gx.data_mut()[row * f + j] += gv;
                }
                vec![(*input, gx)]
            }
            Op::ConcatCols(a, b) => {
                let (n, p) = self.value(*a).dims2("concat_cols")?;
                let q = self.value(*b).shape()[1];
                let mut ga = Vec::with_capacity(n * p);
                let mut gb = Vec::with_capacity(n * q);
                for row in g.data().chunks_exact(p + q) {
                    ga.extend_from_slice(&row[..p]);
                    gb.extend_from_slice(&row[p..]);
                }
                vec![
                    (*a, Tensor::new(vec![n, p], ga)?),
                    (*b, Tensor::new(vec![n, q], gb)?),
                ]
            }
            Op::RepeatRows(v) => {
                let q = self.value(*v).len();
                let mut gv = vec![0.0; q];
                for row in g.data().chunks_exact(q) {
                    for (acc, x) in gv.iter_mut().zip(row) {
                        *acc += x;
                    }
                }
                vec![(*v, Tensor::vector(gv))]
            }
            Op::Chamfer {
                a,
                b,
                nearest_in_b,
                nearest_in_a,
            } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let scale = 2.0 * g.item();
                let mut ga = Tensor::zeros(ta.shape());
                let mut gb = Tensor::zeros(tb.shape());
                let (pa, pb) = (ta.data(), tb.data());
                for (i, &j) in nearest_in_b.iter().enumerate() {
                    for c in 0..3 {
                        let d = scale * (pa[3 * i + c] - pb[3 * j + c]);
                        ga.data_mut()[3 * i + c] += d;
                        gb.data_mut()[3 * j + c] -= d;
                    }
                }
                for (j, &i) in nearest_in_a.iter().enumerate() {
                    for c in 0..3 {
                        let d = scale * (pb[3 * j + c] - pa[3 * i + c]);
                        gb.data_mut()[3 * j + c] += d;
                        ga.data_mut()[3 * i + c] -= d;
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let scale = g.item();
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                gl[*label] -= scale;
                vec![(*logits, Tensor::vector(gl))]
            }
        };
        Ok(out)
    }
}

#[inline]
pub(crate) fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    let dx = x[0] - y[0];
    let dy = x[1] - y[1];
    let dz = x[2] - y[2];
    dx * dx + dy * dy + dz * dz
}
