//! Primitive kernels: forward evaluation and vector-Jacobian products.
//!
//! Each [`Op`] is a pure function of its input values, which is what lets
//! a recorded graph be re-evaluated with new inputs.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Reduction axis in matrix terms: `0` collapses rows (→ `1 × c`),
/// `1` collapses columns (→ `r × 1`).
pub type Axis = usize;

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input { name: String },
    Constant,
    MatMul { trans_a: bool, trans_b: bool },
    Add,
    Mul,
    Scale { factor: f64 },
    RowSoftmax,
    LayerNorm { eps: f64 },
    Silu,
    Gelu,
    Gather { indices: Vec<usize> },
    Concat { axis: Axis },
    Slice { axis: Axis, start: usize, end: usize },
    Sum { axis: Option<Axis> },
    Mean { axis: Option<Axis> },
    CrossEntropy { targets: Vec<usize>, mask: Vec<bool> },
    Mse,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Constant => "constant",
            Op::MatMul { .. } => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale { .. } => "scale",
            Op::RowSoftmax => "row_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Silu => "silu",
            Op::Gelu => "gelu",
            Op::Gather { .. } => "gather",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::CrossEntropy { .. } => "cross_entropy_with_logits",
            Op::Mse => "mse",
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, Op::Input { .. } | Op::Constant)
    }
}

fn mismatch(op: &Op, node: usize, expected: impl Into<String>, actual: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op: op.name(),
        node,
        expected: expected.into(),
        actual: actual.into(),
    }
}

fn bcast_dims(op: &Op, node: usize, a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(mismatch(op, node, format!("broadcast-compatible with {a:?}"), format!("{b:?}"))),
    }
}

fn out_shape_binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, dims: (usize, usize)) -> Vec<usize> {
    if a.shape() == b.shape() || a.dims2() == dims {
        a.shape().to_vec()
    } else if b.dims2() == dims {
        b.shape().to_vec()
    } else {
        vec![dims.0, dims.1]
    }
}

fn broadcast_binary<T: Scalar>(
    op: &Op,
    node: usize,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let (ra, ca) = a.dims2();
    let (rb, cb) = b.dims2();
    let (r, c) = bcast_dims(op, node, (ra, ca), (rb, cb))?;
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let ia = if ra == 1 { 0 } else { i };
        let ib = if rb == 1 { 0 } else { i };
        for j in 0..c {
            let x = a.data()[ia * ca + if ca == 1 { 0 } else { j }];
            let y = b.data()[ib * cb + if cb == 1 { 0 } else { j }];
            out.push(f(x, y));
        }
    }
    Tensor::new(out_shape_binary(a, b, (r, c)), out)
}

/// Sums a broadcast gradient back down to an operand's shape.
fn reduce_to<T: Scalar>(grad: &Tensor<T>, target: &Tensor<T>) -> Tensor<T> {
    if grad.numel() == target.numel() {
        return Tensor::new(target.shape().to_vec(), grad.data().to_vec()).expect("same numel");
    }
    let (r, c) = grad.dims2();
    let (tr, tc) = target.dims2();
    let mut out = vec![T::zero(); tr * tc];
    for i in 0..r {
        let oi = if tr == 1 { 0 } else { i };
        for j in 0..c {
            let oj = if tc == 1 { 0 } else { j };
            out[oi * tc + oj] = out[oi * tc + oj] + grad.data()[i * c + j];
        }
    }
    Tensor::new(target.shape().to_vec(), out).expect("target shape")
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

const GELU_K: f64 = 0.044_715;

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(GELU_K);
    let half = T::lit(0.5);
    let inner = c * (x + k * x * x * x);
    let th = inner.tanh();
    let value = half * x * (T::one() + th);
    let deriv = half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::lit(3.0) * k * x * x);
    (value, deriv)
}

pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

pub fn gelu<T: Scalar>(x: T) -> T {
    gelu_parts(x).0
}

fn matmul_dims<T: Scalar>(
    op: &Op,
    node: usize,
    a: &Tensor<T>,
    b: &Tensor<T>,
    trans_a: bool,
    trans_b: bool,
) -> Result<(usize, usize, usize)> {
    if a.shape().len() > 2 || b.shape().len() > 2 {
        return Err(mismatch(op, node, "matrices", format!("{:?} and {:?}", a.shape(), b.shape())));
    }
    let (ar, ac) = a.dims2();
    let (br, bc) = b.dims2();
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(mismatch(
            op,
            node,
            format!("inner dimension {k}"),
            format!("{k2} (lhs {:?}, rhs {:?})", a.shape(), b.shape()),
        ));
    }
    Ok((m, k, n))
}

/// Row/column strides of a stored `r × c` matrix read as its transpose or not.
fn strides(cols: usize, transposed: bool) -> (usize, usize) {
    if transposed {
        (1, cols)
    } else {
        (cols, 1)
    }
}

fn matmul_into<T: Scalar>(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool, m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    T::gemm(
        m,
        k,
        n,
        a.data(),
        strides(a.cols(), ta),
        b.data(),
        strides(b.cols(), tb),
        T::zero(),
        &mut out,
        (n, 1),
    );
    out
}

fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

fn row_stats<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::lit(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    (mean, (var + eps).sqrt())
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

/// Evaluates `op` on concrete input values. `node` only labels errors.
pub fn forward<T: Scalar>(op: &Op, node: usize, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    match op {
        Op::Input { .. } | Op::Constant => unreachable!("leaf nodes are not evaluated"),
        Op::MatMul { trans_a, trans_b } => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = matmul_dims(op, node, a, b, *trans_a, *trans_b)?;
            Tensor::new(vec![m, n], matmul_into(a, *trans_a, b, *trans_b, m, k, n))
        }
        Op::Add => broadcast_binary(op, node, inputs[0], inputs[1], |x, y| x + y),
        Op::Mul => broadcast_binary(op, node, inputs[0], inputs[1], |x, y| x * y),
        Op::Scale { factor } => {
            let f = T::lit(*factor);
            Ok(inputs[0].map(|x| x * f))
        }
        Op::RowSoftmax => {
            let x = inputs[0];
            let c = x.cols();
            let mut out = vec![T::zero(); x.numel()];
            for (row, o) in x.data().chunks(c).zip(out.chunks_mut(c)) {
                softmax_row(row, o);
            }
            Tensor::new(x.shape().to_vec(), out)
        }
        Op::LayerNorm { eps } => {
            let x = inputs[0];
            let c = x.cols();
            let eps = T::lit(*eps);
            let mut out = Vec::with_capacity(x.numel());
            for row in x.data().chunks(c) {
                let (mean, std) = row_stats(row, eps);
                out.extend(row.iter().map(|&v| (v - mean) / std));
            }
            Tensor::new(x.shape().to_vec(), out)
        }
        Op::Silu => Ok(inputs[0].map(silu)),
        Op::Gelu => Ok(inputs[0].map(gelu)),
        Op::Gather { indices } => {
            let table = inputs[0];
            let (rows, cols) = table.dims2();
            let mut out = Vec::with_capacity(indices.len() * cols);
            for &i in indices {
                if i >= rows {
                    return Err(TensorError::IndexOutOfRange { index: i, len: rows });
                }
                out.extend_from_slice(table.row(i));
            }
            if indices.is_empty() {
                return Err(mismatch(op, node, "at least one index", "none"));
            }
            Tensor::new(vec![indices.len(), cols], out)
        }
        Op::Concat { axis } => concat(op, node, inputs, *axis),
        Op::Slice { axis, start, end } => {
            let x = inputs[0];
            let (r, c) = x.dims2();
            let limit = if *axis == 0 { r } else { c };
            if start >= end || *end > limit {
                return Err(mismatch(
                    op,
                    node,
                    format!("range within 0..{limit}"),
                    format!("{start}..{end}"),
                ));
            }
            if *axis == 0 {
                Tensor::new(vec![end - start, c], x.data()[start * c..end * c].to_vec())
            } else {
                let w = end - start;
                let mut out = Vec::with_capacity(r * w);
                for i in 0..r {
                    out.extend_from_slice(&x.data()[i * c + start..i * c + end]);
                }
                Tensor::new(vec![r, w], out)
            }
        }
        Op::Sum { axis } => Ok(reduce_sum(inputs[0], *axis)),
        Op::Mean { axis } => {
            let x = inputs[0];
            let (r, c) = x.dims2();
            let count = match axis {
                None => r * c,
                Some(0) => r,
                Some(_) => c,
            };
            let inv = T::one() / T::lit(count as f64);
            Ok(reduce_sum(x, *axis).map(|v| v * inv))
        }
        Op::CrossEntropy { targets, mask } => {
            let logits = inputs[0];
            let (r, v) = logits.dims2();
            if targets.len() != r || mask.len() != r {
                return Err(mismatch(
                    op,
                    node,
                    format!("{r} targets and mask entries"),
                    format!("{} targets, {} mask entries", targets.len(), mask.len()),
                ));
            }
            let count = mask.iter().filter(|&&m| m).count();
            if count == 0 {
                return Err(TensorError::EmptyMask);
            }
            let mut total = T::zero();
            for i in 0..r {
                if !mask[i] {
                    continue;
                }
                if targets[i] >= v {
                    return Err(TensorError::IndexOutOfRange { index: targets[i], len: v });
                }
                let row = logits.row(i);
                total = total + log_sum_exp(row) - row[targets[i]];
            }
            Ok(Tensor::scalar(total / T::lit(count as f64)))
        }
        Op::Mse => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(mismatch(op, node, format!("{:?}", a.shape()), format!("{:?}", b.shape())));
            }
            let total: T = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
            Ok(Tensor::scalar(total / T::lit(a.numel() as f64)))
        }
    }
}

fn concat<T: Scalar>(op: &Op, node: usize, inputs: &[&Tensor<T>], axis: Axis) -> Result<Tensor<T>> {
    let first = inputs.first().ok_or_else(|| mismatch(op, node, "at least one input", "none"))?;
    let (r0, c0) = first.dims2();
    if axis == 0 {
        let mut rows = 0;
        let mut out = Vec::new();
        for t in inputs {
            let (r, c) = t.dims2();
            if c != c0 {
                return Err(mismatch(op, node, format!("{c0} columns"), format!("{c}")));
            }
            rows += r;
            out.extend_from_slice(t.data());
        }
        Tensor::new(vec![rows, c0], out)
    } else {
        let mut cols = 0;
        for t in inputs {
            let (r, c) = t.dims2();
            if r != r0 {
                return Err(mismatch(op, node, format!("{r0} rows"), format!("{r}")));
            }
            cols += c;
        }
        let mut out = Vec::with_capacity(r0 * cols);
        for i in 0..r0 {
            for t in inputs {
                out.extend_from_slice(t.row(i));
            }
        }
        Tensor::new(vec![r0, cols], out)
    }
}

fn reduce_sum<T: Scalar>(x: &Tensor<T>, axis: Option<Axis>) -> Tensor<T> {
    let (r, c) = x.dims2();
    match axis {
        None => Tensor::scalar(x.data().iter().copied().sum()),
        Some(0) => {
            let mut out = vec![T::zero(); c];
            for row in x.data().chunks(c) {
                for (o, &v) in out.iter_mut().zip(row) {
                    *o = *o + v;
                }
            }
            Tensor::matrix(1, c, out)
        }
        Some(_) => Tensor::matrix(r, 1, x.data().chunks(c).map(|row| row.iter().copied().sum()).collect()),
    }
}

/// Vector-Jacobian product: gradients for each input given the output
/// gradient. Entries are `None` for inputs whose flag in `needs` is false.
pub fn backward<T: Scalar>(
    op: &Op,
    inputs: &[&Tensor<T>],
    output: &Tensor<T>,
    grad: &Tensor<T>,
    needs: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let mut grads: Vec<Option<Tensor<T>>> = vec![None; inputs.len()];
    match op {
        Op::Input { .. } | Op::Constant => {}
        Op::MatMul { trans_a, trans_b } => {
            let (a, b) = (inputs[0], inputs[1]);
            let (ar, ac) = a.dims2();
            let (br, bc) = b.dims2();
            let n = grad.cols();
            let m = grad.rows();
            if needs[0] {
                // dA = G·op(B)^T, laid out as A (transposed back when trans_a).
                let k = if *trans_a { ar } else { ac };
                let data = if *trans_a {
                    // dA (k×m) = op(B)·G^T
                    matmul_into(b, *trans_b, grad, true, k, n, m)
                } else {
                    matmul_into(grad, false, b, !*trans_b, m, n, k)
                };
                grads[0] = Some(Tensor::new(a.shape().to_vec(), data).expect("lhs grad shape"));
            }
            if needs[1] {
                let k = if *trans_b { bc } else { br };
                let data = if *trans_b {
                    // dB (n×k) = G^T·op(A)
                    matmul_into(grad, true, a, *trans_a, n, m, k)
                } else {
                    matmul_into(a, !*trans_a, grad, false, k, m, n)
                };
                grads[1] = Some(Tensor::new(b.shape().to_vec(), data).expect("rhs grad shape"));
            }
        }
        Op::Add => {
            for i in 0..2 {
                if needs[i] {
                    grads[i] = Some(reduce_to(grad, inputs[i]));
                }
            }
        }
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let dummy = Op::Mul;
            if needs[0] {
                let full = broadcast_binary(&dummy, 0, grad, b, |g, y| g * y).expect("broadcast checked in forward");
                grads[0] = Some(reduce_to(&full, a));
            }
            if needs[1] {
                let full = broadcast_binary(&dummy, 0, grad, a, |g, x| g * x).expect("broadcast checked in forward");
                grads[1] = Some(reduce_to(&full, b));
            }
        }
        Op::Scale { factor } => {
            let f = T::lit(*factor);
            grads[0] = Some(grad.map(|g| g * f));
        }
        Op::RowSoftmax => {
            let c = output.cols();
            let mut out = Vec::with_capacity(output.numel());
            for (y, g) in output.data().chunks(c).zip(grad.data().chunks(c)) {
                let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                out.extend(y.iter().zip(g).map(|(&yi, &gi)| yi * (gi - dot)));
            }
            grads[0] = Some(Tensor::new(output.shape().to_vec(), out).expect("softmax grad"));
        }
        Op::LayerNorm { eps } => {
            let x = inputs[0];
            let c = x.cols();
            let n = T::lit(c as f64);
            let eps = T::lit(*eps);
            let mut out = Vec::with_capacity(x.numel());
            for ((xr, yr), gr) in x.data().chunks(c).zip(output.data().chunks(c)).zip(grad.data().chunks(c)) {
                let (_, std) = row_stats(xr, eps);
                let mean_g = gr.iter().copied().sum::<T>() / n;
                let mean_gy = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum::<T>() / n;
                out.extend(gr.iter().zip(yr).map(|(&g, &y)| (g - mean_g - y * mean_gy) / std));
            }
            grads[0] = Some(Tensor::new(x.shape().to_vec(), out).expect("layer_norm grad"));
        }
        Op::Silu => {
            let x = inputs[0];
            let data = x
                .data()
                .iter()
                .zip(grad.data())
                .map(|(&v, &g)| {
                    let s = sigmoid(v);
                    g * s * (T::one() + v * (T::one() - s))
                })
                .collect();
            grads[0] = Some(Tensor::new(x.shape().to_vec(), data).expect("silu grad"));
        }
        Op::Gelu => {
            let x = inputs[0];
            let data = x.data().iter().zip(grad.data()).map(|(&v, &g)| g * gelu_parts(v).1).collect();
            grads[0] = Some(Tensor::new(x.shape().to_vec(), data).expect("gelu grad"));
        }
        Op::Gather { indices } => {
            let table = inputs[0];
            let c = table.cols();
            let mut out = Tensor::zeros(table.shape());
            for (k, &i) in indices.iter().enumerate() {
                let src = &grad.data()[k * c..(k + 1) * c];
                for (o, &g) in out.row_mut(i).iter_mut().zip(src) {
                    *o = *o + g;
                }
            }
            grads[0] = Some(out);
        }
        Op::Concat { axis } => {
            let mut offset = 0;
            let gc = grad.cols();
            for (i, t) in inputs.iter().enumerate() {
                let (r, c) = t.dims2();
                if needs[i] {
                    let data = if *axis == 0 {
                        grad.data()[offset * gc..(offset + r) * gc].to_vec()
                    } else {
                        let mut d = Vec::with_capacity(r * c);
                        for row in 0..r {
                            d.extend_from_slice(&grad.data()[row * gc + offset..row * gc + offset + c]);
                        }
                        d
                    };
                    grads[i] = Some(Tensor::new(t.shape().to_vec(), data).expect("concat grad"));
                }
                offset += if *axis == 0 { r } else { c };
            }
        }
        Op::Slice { axis, start, end } => {
            let x = inputs[0];
            let (r, c) = x.dims2();
            let mut out = Tensor::zeros(x.shape());
            if *axis == 0 {
                out.data_mut()[start * c..end * c].copy_from_slice(grad.data());
            } else {
                let w = end - start;
                for i in 0..r {
                    out.data_mut()[i * c + start..i * c + end].copy_from_slice(&grad.data()[i * w..(i + 1) * w]);
                }
            }
            grads[0] = Some(out);
        }
        Op::Sum { axis } | Op::Mean { axis } => {
            let x = inputs[0];
            let (r, c) = x.dims2();
            let scale = match (op, axis) {
                (Op::Sum { .. }, _) => T::one(),
                (_, None) => T::one() / T::lit((r * c) as f64),
                (_, Some(0)) => T::one() / T::lit(r as f64),
                (_, Some(_)) => T::one() / T::lit(c as f64),
            };
            let data = (0..r * c)
                .map(|idx| {
                    let g = match axis {
                        None => grad.data()[0],
                        Some(0) => grad.data()[idx % c],
                        Some(_) => grad.data()[idx / c],
                    };
                    g * scale
                })
                .collect();
            grads[0] = Some(Tensor::new(x.shape().to_vec(), data).expect("reduce grad"));
        }
        Op::CrossEntropy { targets, mask } => {
            let logits = inputs[0];
            let v = logits.cols();
            let count = mask.iter().filter(|&&m| m).count();
            let scale = grad.item() / T::lit(count as f64);
            let mut out = Tensor::zeros(logits.shape());
            for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                if !m {
                    continue;
                }
                let dst = &mut out.data_mut()[i * v..(i + 1) * v];
                softmax_row(logits.row(i), dst);
                dst[t] = dst[t] - T::one();
                for d in dst.iter_mut() {
                    *d = *d * scale;
                }
            }
            grads[0] = Some(out);
        }
        Op::Mse => {
            let (a, b) = (inputs[0], inputs[1]);
            let k = T::lit(2.0) * grad.item() / T::lit(a.numel() as f64);
            let diff: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * k).collect();
            if needs[1] {
                let neg = diff.iter().map(|&d| -d).collect();
                grads[1] = Some(Tensor::new(b.shape().to_vec(), neg).expect("mse grad"));
            }
            if needs[0] {
                grads[0] = Some(Tensor::new(a.shape().to_vec(), diff).expect("mse grad"));
            }
        }
    }
    grads
}
