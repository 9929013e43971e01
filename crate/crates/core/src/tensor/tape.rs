use super::{axis_extents, gemm, NoiseSource, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Conv1d {
        input: Var,
        kernel: Var,
        columns: Vec<f64>,
    },
    MaxAxis {
        input: Var,
        argmax: Vec<usize>,
    },
    MeanAxis {
        input: Var,
        axis: usize,
    },
    SumAxis {
        input: Var,
        axis: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    GaussianSample {
        mean: Var,
        std: Var,
        noise: Vec<f64>,
    },
    GatherRows {
        input: Var,
        index: Vec<usize>,
    },
    SegmentMean {
        input: Var,
        segments: Vec<usize>,
        counts: Vec<usize>,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    differentiable: bool,
}

/// Records tensor operations in execution order for reverse-mode
/// differentiation. Single-threaded; one tape per training context.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// Gradients of a scalar loss, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Takes ownership of a gradient, leaving `None` behind.
    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Clears the backward flag so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, op: Op, differentiable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            differentiable,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let d = self.nodes[x.0].differentiable;
        self.push(value, op, d)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let d = self.nodes[a.0].differentiable || self.nodes[b.0].differentiable;
        self.push(value, op, d)
    }

    /// A differentiable input (parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, 0.0, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.binary(a, b, value, Op::MatMul(a, b)))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)
        } else if tb.is_scalar() {
            let y = tb.item();
            Ok(ta.map(|x| f(x, y)))
        } else if ta.is_scalar() {
            let x = ta.item();
            Ok(tb.map(|y| f(x, y)))
        } else {
            Err(mismatch(name, ta, tb))
        }
    }

    /// Elementwise sum; either operand may be a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.elementwise("add", a, b, |x, y| x + y)?;
        Ok(self.binary(a, b, value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.elementwise("sub", a, b, |x, y| x - y)?;
        Ok(self.binary(a, b, value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.elementwise("mul", a, b, |x, y| x * y)?;
        Ok(self.binary(a, b, value, Op::Mul(a, b)))
    }

    /// Multiplication by a fixed constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.unary(x, value, Op::Scale(x, c))
    }

    /// Adds a length-`d` bias to every row of an `[n × d]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.rank() != 2 || tb.rank() != 1 || tx.shape()[1] != tb.shape()[0] {
            return Err(mismatch("add_bias", tx, tb));
        }
        let d = tb.len();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.binary(x, bias, value, Op::AddBias(x, bias)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.unary(x, value, Op::Relu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.value(x).map(softplus);
        self.unary(x, value, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        self.unary(x, value, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::ln);
        self.unary(x, value, Op::Log(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        self.unary(x, value, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::sqrt);
        self.unary(x, value, Op::Sqrt(x))
    }

    /// Temporal convolution with valid padding and stride 1.
    ///
    /// `input` is `[batch × time × c_in]`, `kernel` is `[width × c_in × c_out]`;
    /// the result is `[batch × (time − width + 1) × c_out]`.
    pub fn conv1d(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let (ti, tk) = (self.value(input), self.value(kernel));
        if ti.rank() != 3 || tk.rank() != 3 || ti.shape()[2] != tk.shape()[1] {
            return Err(mismatch("conv1d", ti, tk));
        }
        let (batch, time, c_in) = (ti.shape()[0], ti.shape()[1], ti.shape()[2]);
        let (width, c_out) = (tk.shape()[0], tk.shape()[2]);
        if width == 0 || width > time {
            return Err(mismatch("conv1d", ti, tk));
        }
        let t_out = time - width + 1;
        let patch = width * c_in;
        // A window of `width` consecutive time steps is contiguous in the
        // row-major input, so each im2col row is a plain slice copy.
        let mut columns = vec![0.0; batch * t_out * patch];
        for b in 0..batch {
            for t in 0..t_out {
                let src = (b * time + t) * c_in;
                let dst = (b * t_out + t) * patch;
                columns[dst..dst + patch].copy_from_slice(&ti.data()[src..src + patch]);
            }
        }
        let mut out = vec![0.0; batch * t_out * c_out];
        gemm(batch * t_out, patch, c_out, &columns, false, tk.data(), false, 0.0, &mut out);
        let value = Tensor::new(vec![batch, t_out, c_out], out)?;
        Ok(self.binary(
            input,
            kernel,
            value,
            Op::Conv1d {
                input,
                kernel,
                columns,
            },
        ))
    }

    fn check_axis(&self, x: Var, axis: usize, op: &'static str) -> Result<()> {
        let t = self.value(x);
        if axis >= t.rank() || t.shape()[axis] == 0 {
            return Err(Error::InvalidArgument(format!(
                "{op}: axis {axis} invalid for shape {:?}",
                t.shape()
            )));
        }
        Ok(())
    }

    fn reduce_axis(&self, x: Var, axis: usize) -> (Vec<usize>, usize, usize, usize) {
        let shape = self.value(x).shape();
        let (outer, n, inner) = axis_extents(shape, axis);
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        (out_shape, outer, n, inner)
    }

    pub fn max_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "max_over_axis")?;
        let (shape, outer, n, inner) = self.reduce_axis(x, axis);
        let data = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    let src = (o * n + j) * inner + i;
                    let dst = o * inner + i;
                    if data[src] > out[dst] || j == 0 {
                        out[dst] = data[src];
                        argmax[dst] = src;
                    }
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.unary(x, value, Op::MaxAxis { input: x, argmax }))
    }

    fn sum_axis_values(&self, x: Var, axis: usize, scale: f64) -> Result<Tensor> {
        let (shape, outer, n, inner) = self.reduce_axis(x, axis);
        let data = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &data[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
        Tensor::new(shape, out)
    }

    pub fn sum_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "sum_over_axis")?;
        let value = self.sum_axis_values(x, axis, 1.0)?;
        Ok(self.unary(x, value, Op::SumAxis { input: x, axis }))
    }

    pub fn mean_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "mean_over_axis")?;
        let n = self.value(x).shape()[axis];
        let value = self.sum_axis_values(x, axis, 1.0 / n as f64)?;
        Ok(self.unary(x, value, Op::MeanAxis { input: x, axis }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.unary(x, value, Op::SumAll(x))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.unary(x, value, Op::MeanAll(x))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.value(first).clone();
        if axis >= base.rank() {
            return Err(Error::InvalidArgument(format!(
                "concat: axis {axis} invalid for shape {:?}",
                base.shape()
            )));
        }
        let mut total = 0;
        for &v in inputs {
            let t = self.value(v);
            let same_rest = t.rank() == base.rank()
                && t.shape()
                    .iter()
                    .zip(base.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same_rest {
                return Err(mismatch("concat", &base, t));
            }
            total += t.shape()[axis];
        }
        let (outer, _, inner) = axis_extents(base.shape(), axis);
        let mut shape = base.shape().to_vec();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::new(shape, out)?;
        let d = inputs.iter().any(|v| self.nodes[v.0].differentiable);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            d,
        ))
    }

    /// `len` consecutive entries along `axis`, starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() || start + len > t.shape()[axis] {
            return Err(Error::InvalidArgument(format!(
                "slice: range {start}..{} along axis {axis} out of bounds for shape {:?}",
                start + len,
                t.shape()
            )));
        }
        let (outer, n, inner) = axis_extents(t.shape(), axis);
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&t.data()[from..from + len * inner]);
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.unary(x, value, Op::Slice { input: x, axis, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.unary(x, value, Op::Reshape(x)))
    }

    /// Reparametrized draw `mean + std ⊙ ε` with `ε` taken from `noise`.
    ///
    /// `mean` and `std` stay differentiable parents; the noise draw is
    /// recorded as a constant (pathwise gradient).
    pub fn gaussian_sample(
        &mut self,
        mean: Var,
        std: Var,
        noise: &mut dyn NoiseSource,
    ) -> Result<Var> {
        let (tm, ts) = (self.value(mean), self.value(std));
        if tm.shape() != ts.shape() {
            return Err(mismatch("gaussian_sample", tm, ts));
        }
        let eps = noise.standard_normal(tm.len());
        let data = tm
            .data()
            .iter()
            .zip(ts.data())
            .zip(&eps)
            .map(|((m, s), e)| m + s * e)
            .collect();
        let value = Tensor::new(tm.shape().to_vec(), data)?;
        Ok(self.binary(
            mean,
            std,
            value,
            Op::GaussianSample {
                mean,
                std,
                noise: eps,
            },
        ))
    }

    /// Selects rows of a 2D tensor: `out[i] = x[index[i]]`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::InvalidArgument(format!(
                "gather_rows needs a matrix, got shape {:?}",
                t.shape()
            )));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index {
            if i >= rows {
                return Err(Error::InvalidArgument(format!(
                    "gather_rows: index {i} out of range for {rows} rows"
                )));
            }
            out.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(vec![index.len(), cols], out)?;
        Ok(self.unary(
            x,
            value,
            Op::GatherRows {
                input: x,
                index: index.to_vec(),
            },
        ))
    }

    /// Mean of the rows of `x` grouped by `segments[row]`, producing
    /// `n_segments` rows. Segments that receive no rows are zero.
    pub fn segment_mean(&mut self, x: Var, segments: &[usize], n_segments: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || t.shape()[0] != segments.len() {
            return Err(Error::InvalidArgument(format!(
                "segment_mean: {} segment ids for shape {:?}",
                segments.len(),
                t.shape()
            )));
        }
        let cols = t.shape()[1];
        let mut counts = vec![0usize; n_segments];
        let mut out = vec![0.0; n_segments * cols];
        for (row, &s) in segments.iter().enumerate() {
            if s >= n_segments {
                return Err(Error::InvalidArgument(format!(
                    "segment_mean: segment {s} out of range for {n_segments}"
                )));
            }
            counts[s] += 1;
            for (o, v) in out[s * cols..(s + 1) * cols].iter_mut().zip(t.row(row)) {
                *o += v;
            }
        }
        for (s, &c) in counts.iter().enumerate() {
            if c > 0 {
                let inv = 1.0 / c as f64;
                out[s * cols..(s + 1) * cols].iter_mut().for_each(|v| *v *= inv);
            }
        }
        let value = Tensor::new(vec![n_segments, cols], out)?;
        Ok(self.unary(
            x,
            value,
            Op::SegmentMean {
                input: x,
                segments: segments.to_vec(),
                counts,
            },
        ))
    }

    /// Backpropagates from a scalar `loss` through the whole tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::BackwardRepeated);
        }
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].differentiable {
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.backward_done = true;
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.differentiable)
                    .map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].differentiable
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants(*a) {
                    let ga = slot(grads, *a, m * k);
                    gemm(m, n, k, g, false, tb.data(), true, 1.0, ga);
                }
                if self.wants(*b) {
                    let gb = slot(grads, *b, k * n);
                    gemm(k, m, n, ta.data(), true, g, false, 1.0, gb);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.accumulate_broadcast(*a, g, 1.0, None, grads);
                self.accumulate_broadcast(*b, g, sign, None, grads);
            }
            Op::Mul(a, b) => {
                self.accumulate_broadcast(*a, g, 1.0, Some(self.value(*b)), grads);
                self.accumulate_broadcast(*b, g, 1.0, Some(self.value(*a)), grads);
            }
            Op::Scale(x, c) => {
                let gx = slot(grads, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(d, &gi)| *d += c * gi);
            }
            Op::AddBias(x, bias) => {
                if self.wants(*x) {
                    let gx = slot(grads, *x, g.len());
                    gx.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
                }
                if self.wants(*bias) {
                    let d = self.value(*bias).len();
                    let gb = slot(grads, *bias, d);
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(s, &gi)| *s += gi);
                    }
                }
            }
            Op::Relu(x) => self.pointwise(*x, g, grads, |xi, _| if xi > 0.0 { 1.0 } else { 0.0 }, out),
            Op::Softplus(x) => self.pointwise(*x, g, grads, |xi, _| sigmoid(xi), out),
            Op::Exp(x) => self.pointwise(*x, g, grads, |_, yi| yi, out),
            Op::Log(x) => self.pointwise(*x, g, grads, |xi, _| 1.0 / xi, out),
            Op::Square(x) => self.pointwise(*x, g, grads, |xi, _| 2.0 * xi, out),
            Op::Sqrt(x) => self.pointwise(*x, g, grads, |_, yi| 0.5 / yi, out),
            Op::Conv1d {
                input,
                kernel,
                columns,
            } => {
                let (ti, tk) = (self.value(*input), self.value(*kernel));
                let (batch, time, c_in) = (ti.shape()[0], ti.shape()[1], ti.shape()[2]);
                let (width, c_out) = (tk.shape()[0], tk.shape()[2]);
                let t_out = time - width + 1;
                let patch = width * c_in;
                let rows = batch * t_out;
                if self.wants(*kernel) {
                    let gk = slot(grads, *kernel, patch * c_out);
                    gemm(patch, rows, c_out, columns, true, g, false, 1.0, gk);
                }
                if self.wants(*input) {
                    let mut gcols = vec![0.0; rows * patch];
                    gemm(rows, c_out, patch, g, false, tk.data(), true, 0.0, &mut gcols);
                    let gi = slot(grads, *input, batch * time * c_in);
                    for b in 0..batch {
                        for t in 0..t_out {
                            let dst = (b * time + t) * c_in;
                            let src = (b * t_out + t) * patch;
                            for (d, s) in gi[dst..dst + patch].iter_mut().zip(&gcols[src..src + patch]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            Op::MaxAxis { input, argmax } => {
                let n = self.value(*input).len();
                let gi = slot(grads, *input, n);
                for (&src, &gi_out) in argmax.iter().zip(g) {
                    gi[src] += gi_out;
                }
            }
            Op::MeanAxis { input, axis } | Op::SumAxis { input, axis } => {
                let shape = self.value(*input).shape();
                let (outer, n, inner) = axis_extents(shape, *axis);
                let scale = if matches!(node.op, Op::MeanAxis { .. }) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                let gi = slot(grads, *input, outer * n * inner);
                for o in 0..outer {
                    let go = &g[o * inner..(o + 1) * inner];
                    for j in 0..n {
                        let dst = &mut gi[(o * n + j) * inner..(o * n + j + 1) * inner];
                        dst.iter_mut().zip(go).for_each(|(d, &s)| *d += scale * s);
                    }
                }
            }
            Op::SumAll(x) | Op::MeanAll(x) => {
                let n = self.value(*x).len();
                let scale = if matches!(node.op, Op::MeanAll(_)) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                let gx = slot(grads, *x, n);
                gx.iter_mut().for_each(|d| *d += scale * g[0]);
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_extents(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let width = self.value(v).shape()[*axis];
                    let block = width * inner;
                    if self.wants(v) {
                        let gv = slot(grads, v, outer * block);
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            for (d, s) in gv[o * block..(o + 1) * block].iter_mut().zip(&g[src..src + block]) {
                                *d += s;
                            }
                        }
                    }
                    offset += width;
                }
            }
            Op::Slice { input, axis, start } => {
                let shape = self.value(*input).shape();
                let (outer, n, inner) = axis_extents(shape, *axis);
                let len = node.value.shape()[*axis];
                let gi = slot(grads, *input, outer * n * inner);
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    for (d, s) in gi[dst..dst + len * inner].iter_mut().zip(&g[src..src + len * inner]) {
                        *d += s;
                    }
                }
            }
            Op::GaussianSample { mean, std, noise } => {
                if self.wants(*mean) {
                    let gm = slot(grads, *mean, g.len());
                    gm.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
                }
                if self.wants(*std) {
                    let gs = slot(grads, *std, g.len());
                    for ((d, &gi), &e) in gs.iter_mut().zip(g).zip(noise) {
                        *d += gi * e;
                    }
                }
            }
            Op::GatherRows { input, index } => {
                let t = self.value(*input);
                let cols = t.shape()[1];
                let gi = slot(grads, *input, t.len());
                for (row, &i) in index.iter().enumerate() {
                    for (d, s) in gi[i * cols..(i + 1) * cols].iter_mut().zip(&g[row * cols..(row + 1) * cols]) {
                        *d += s;
                    }
                }
            }
            Op::SegmentMean {
                input,
                segments,
                counts,
            } => {
                let t = self.value(*input);
                let cols = t.shape()[1];
                let gi = slot(grads, *input, t.len());
                for (row, &s) in segments.iter().enumerate() {
                    let inv = 1.0 / counts[s] as f64;
                    for (d, &src) in gi[row * cols..(row + 1) * cols].iter_mut().zip(&g[s * cols..(s + 1) * cols]) {
                        *d += inv * src;
                    }
                }
            }
            Op::Reshape(x) => {
                let gx = slot(grads, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
            }
        }
    }

    fn pointwise(
        &self,
        x: Var,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        deriv: impl Fn(f64, f64) -> f64,
        out: &[f64],
    ) {
        let xs = self.value(x).data();
        let gx = slot(grads, x, g.len());
        for (((d, &gi), &xi), &yi) in gx.iter_mut().zip(g).zip(xs).zip(out) {
            *d += gi * deriv(xi, yi);
        }
    }

    /// Accumulates `sign * g * other` into `target`, summing when `target`
    /// was broadcast from a scalar.
    fn accumulate_broadcast(
        &self,
        target: Var,
        g: &[f64],
        sign: f64,
        other: Option<&Tensor>,
        grads: &mut [Option<Vec<f64>>],
    ) {
        if !self.wants(target) {
            return;
        }
        let n = self.value(target).len();
        let factor = |i: usize| -> f64 {
            match other {
                Some(t) if t.len() == 1 => t.data()[0],
                Some(t) => t.data()[i],
                None => 1.0,
            }
        };
        let gt = slot(grads, target, n);
        if n == g.len() {
            for (i, (d, &gi)) in gt.iter_mut().zip(g).enumerate() {
                *d += sign * gi * factor(i);
            }
        } else {
            // broadcast scalar operand
            gt[0] += g.iter().enumerate().map(|(i, &gi)| sign * gi * factor(i)).sum::<f64>();
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{FrozenNoise, RngNoise};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = tape.constant(Tensor::eye(2));
        let y = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn conv1d_valid_length() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 5, 1]));
        let k = tape.constant(Tensor::zeros(&[3, 1, 1]));
        let y = tape.conv1d(x, k).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 1]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.add(a, c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let sq = tape.square(x);
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_twice_is_an_error_until_reset() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = tape.square(x);
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::BackwardRepeated)));
        tape.reset_grads();
        assert!(tape.backward(y).is_ok());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn gaussian_sample_pathwise_gradient() {
        // loss = sum(sample(mu, sigma) * c) with fixed eps:
        // d/dmu = c, d/dsigma = c * eps
        let eps = vec![0.3, -1.2, 2.0];
        let c = [1.5, -0.5, 2.0];
        let mut tape = Tape::new();
        let mu = tape.leaf(Tensor::from_vec(vec![0.1, 0.2, 0.3]));
        let sigma = tape.leaf(Tensor::from_vec(vec![1.0, 0.5, 0.25]));
        let mut noise = FrozenNoise::new(vec![eps.clone()]);
        let s = tape.gaussian_sample(mu, sigma, &mut noise).unwrap();
        let cv = tape.constant(Tensor::from_vec(c.to_vec()));
        let prod = tape.mul(s, cv).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(mu).unwrap().data(), &c);
        let gs = grads.get(sigma).unwrap().data();
        for i in 0..3 {
            assert!((gs[i] - c[i] * eps[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn segment_mean_empty_segment_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let m = tape.segment_mean(x, &[0, 0, 2], 3).unwrap();
        assert_eq!(tape.value(m).data(), &[2.0, 3.0, 0.0, 0.0, 5.0, 6.0]);
    }

    #[test]
    fn max_over_axis_of_monotone_sequence_is_last() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 4, 1], &[0.1, 0.5, 0.9, 1.3]));
        let m = tape.max_over_axis(x, 1).unwrap();
        assert_eq!(tape.value(m).data(), &[1.3]);
    }

    #[test]
    fn forward_is_deterministic_for_fixed_seed() {
        let run = || {
            let mut tape = Tape::new();
            let mut noise = RngNoise(ChaCha8Rng::seed_from_u64(11));
            let m = tape.constant(Tensor::zeros(&[4]));
            let s = tape.constant(Tensor::full(&[4], 1.0));
            let y = tape.gaussian_sample(m, s, &mut noise).unwrap();
            tape.value(y).clone()
        };
        assert_eq!(run(), run());
    }
}
