use rand::Rng;

use super::{gemm_acc, gemm_at_acc, gemm_bt_acc, Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    Relu(Var),
    Tanh(Var),
    Abs(Var),
    Scale(Var, T),
    AddScalar(Var),
    Div(Var, Var),
    MinScalar(Var, T),
    Transpose(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: T,
    },
    RowNorm(Var),
    Concat(Var, Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    Dropout {
        x: Var,
        keep_scale: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    RelBias {
        table: Var,
        row: usize,
        len: usize,
        max_dist: usize,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Append-only record of operations.
///
/// Nodes are pushed in evaluation order, so every node's inputs precede it
/// and [`Graph::backward`] can replay adjoints with a single reverse sweep.
/// Gradients accumulate across calls to `backward` until
/// [`Graph::zero_grads`].
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant or parameter. Any gradient carried by `t` is
    /// discarded so the node starts from zero.
    pub fn leaf(&mut self, mut t: Tensor<T>) -> Result<Var, TensorError> {
        if !t.is_all_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        t.zero_grad();
        Ok(self.push_unchecked(t, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// Drops every node recorded after the first `len`. Gradients already
    /// accumulated on the kept nodes stay.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn zero_grads(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    fn push_unchecked(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        if !value.is_all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        Ok(self.push_unchecked(value, op))
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::Shape {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize), TensorError> {
        let t = self.value(v);
        if t.shape().len() != 2 {
            return Err(TensorError::invalid(
                op,
                format!("expected a matrix, got shape {:?}", t.shape()),
            ));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    // ---- forward ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        self.push(
            "matmul",
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul(a, b),
        )
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(self.shape_err(name, a, b));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(name, t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.value(b).data().iter().any(|&x| x == T::zero()) {
            return Err(TensorError::invalid("div", "division by zero"));
        }
        self.zip_same("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, TensorError> {
        let (m, n) = self.matrix("add_row", x)?;
        if self.value(row).numel() != n {
            return Err(self.shape_err("add_row", x, row));
        }
        let r = self.value(row).data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..m {
            data[i * n..(i + 1) * n]
                .iter_mut()
                .zip(r)
                .for_each(|(d, &b)| *d += b);
        }
        self.push(
            "add_row",
            Tensor::from_parts(vec![m, n], data),
            Op::AddRow(x, row),
        )
    }

    /// Multiplies row `i` of an `m×n` matrix by entry `i` of an `m×1` column.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        let (m, n) = self.matrix("scale_rows", x)?;
        if self.value(s).numel() != m {
            return Err(self.shape_err("scale_rows", x, s));
        }
        let sv = self.value(s).data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..m {
            data[i * n..(i + 1) * n]
                .iter_mut()
                .for_each(|d| *d *= sv[i]);
        }
        self.push(
            "scale_rows",
            Tensor::from_parts(vec![m, n], data),
            Op::ScaleRows(x, s),
        )
    }

    fn unary(
        &mut self,
        name: &'static str,
        x: Var,
        f: impl Fn(T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        let t = self.value(x).map(f);
        self.push(name, t, op)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(
            "relu",
            x,
            |v| if v > T::zero() { v } else { T::zero() },
            Op::Relu(x),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary("tanh", x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary("abs", x, |v| v.abs(), Op::Abs(x))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var, TensorError> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var, TensorError> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    /// Elementwise `min(x, c)`; the adjoint is zero where the cap binds.
    pub fn min_scalar(&mut self, x: Var, c: T) -> Result<Var, TensorError> {
        self.unary(
            "min_scalar",
            x,
            |v| if v < c { v } else { c },
            Op::MinScalar(x, c),
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let (m, n) = self.matrix("transpose", x)?;
        let src = self.value(x).data();
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        self.push(
            "transpose",
            Tensor::from_parts(vec![n, m], data),
            Op::Transpose(x),
        )
    }

    /// Row-wise softmax with max subtraction. Columns with `keep[j] == false`
    /// get exactly zero weight.
    pub fn softmax_rows(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var, TensorError> {
        let (m, n) = self.matrix("softmax_rows", x)?;
        if let Some(k) = keep {
            if k.len() != n {
                return Err(TensorError::invalid(
                    "softmax_rows",
                    format!("mask length {} for {n} columns", k.len()),
                ));
            }
            if !k.iter().any(|&b| b) {
                return Err(TensorError::invalid(
                    "softmax_rows",
                    "every column is masked",
                ));
            }
        }
        let live = |j: usize| keep.is_none_or(|k| k[j]);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let max = (0..n)
                .filter(|&j| live(j))
                .map(|j| row[j])
                .fold(T::neg_infinity(), T::max);
            let out = &mut data[i * n..(i + 1) * n];
            let mut total = T::zero();
            for j in (0..n).filter(|&j| live(j)) {
                out[j] = (row[j] - max).exp();
                total += out[j];
            }
            out.iter_mut().for_each(|v| *v /= total);
        }
        self.push(
            "softmax_rows",
            Tensor::from_parts(vec![m, n], data),
            Op::Softmax(x),
        )
    }

    /// Per-row normalization to zero mean and unit (biased) variance, then
    /// `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var, TensorError> {
        if eps <= T::zero() {
            return Err(TensorError::invalid("layer_norm", "eps must be positive"));
        }
        let (m, n) = self.value(x).dims2();
        if self.value(gain).numel() != n {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        if self.value(bias).numel() != n {
            return Err(self.shape_err("layer_norm", x, bias));
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            let (xhat, _) = normalize_row(&src[i * n..(i + 1) * n], eps);
            for j in 0..n {
                data[i * n + j] = g[j] * xhat[j] + b[j];
            }
        }
        let shape = self.value(x).shape().to_vec();
        self.push(
            "layer_norm",
            Tensor::from_parts(shape, data),
            Op::LayerNorm { x, gain, bias, eps },
        )
    }

    /// Euclidean norm of each row, as an `m×1` column.
    pub fn row_l2_norm(&mut self, x: Var) -> Result<Var, TensorError> {
        let (m, n) = self.value(x).dims2();
        let src = self.value(x).data();
        let data = (0..m)
            .map(|i| super::l2(&src[i * n..(i + 1) * n]))
            .collect();
        self.push(
            "row_l2_norm",
            Tensor::from_parts(vec![m, 1], data),
            Op::RowNorm(x),
        )
    }

    /// Joins `a[m×p]` and `b[m×q]` along the last axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, p) = self.matrix("concat_last", a)?;
        let (m2, q) = self.matrix("concat_last", b)?;
        if m != m2 {
            return Err(self.shape_err("concat_last", a, b));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(&da[i * p..(i + 1) * p]);
            data.extend_from_slice(&db[i * q..(i + 1) * q]);
        }
        self.push(
            "concat_last",
            Tensor::from_parts(vec![m, p + q], data),
            Op::Concat(a, b),
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (m, n) = self.matrix("slice_cols", x)?;
        if len == 0 || start + len > n {
            return Err(TensorError::invalid(
                "slice_cols",
                format!("columns {start}..{} out of 0..{n}", start + len),
            ));
        }
        let src = self.value(x).data();
        let data = (0..m)
            .flat_map(|i| src[i * n + start..i * n + start + len].iter().copied())
            .collect();
        self.push(
            "slice_cols",
            Tensor::from_parts(vec![m, len], data),
            Op::SliceCols { x, start },
        )
    }

    /// Inverted dropout. Outside training, or with `p == 0`, returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        rng: &mut R,
        training: bool,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::invalid(
                "dropout",
                format!("probability {p} outside [0, 1)"),
            ));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let scale = T::from_f64_lossy(1.0 / (1.0 - p));
        let keep_scale: Vec<T> = (0..self.value(x).numel())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    scale
                }
            })
            .collect();
        let src = self.value(x);
        let data = src
            .data()
            .iter()
            .zip(&keep_scale)
            .map(|(&v, &k)| v * k)
            .collect();
        let t = Tensor::from_parts(src.shape().to_vec(), data);
        self.push("dropout", t, Op::Dropout { x, keep_scale })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::from_usize_lossy(t.numel());
        self.push("mean", Tensor::scalar(s), Op::Mean(x))
    }

    /// Picks rows of a `V×d` table: `out[i] = table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (v, d) = self.matrix("gather_rows", table)?;
        if ids.is_empty() {
            return Err(TensorError::invalid("gather_rows", "no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::invalid(
                "gather_rows",
                format!("id {bad} out of range for {v} rows"),
            ));
        }
        let src = self.value(table).data();
        let data = ids
            .iter()
            .flat_map(|&i| src[i * d..(i + 1) * d].iter().copied())
            .collect();
        self.push(
            "gather_rows",
            Tensor::from_parts(vec![ids.len(), d], data),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Builds the `len×len` matrix `out[i][j] = table[row][clip(i − j) + max_dist]`
    /// where `table` has `2·max_dist + 1` columns and `clip` saturates at
    /// `±max_dist`.
    pub fn relative_bias(
        &mut self,
        table: Var,
        row: usize,
        len: usize,
        max_dist: usize,
    ) -> Result<Var, TensorError> {
        let (rows, width) = self.matrix("relative_bias", table)?;
        if width != 2 * max_dist + 1 || row >= rows || len == 0 {
            return Err(TensorError::invalid(
                "relative_bias",
                format!("table {rows}×{width}, row {row}, max distance {max_dist}"),
            ));
        }
        let src = &self.value(table).data()[row * width..(row + 1) * width];
        let mut data = Vec::with_capacity(len * len);
        for i in 0..len {
            for j in 0..len {
                data.push(src[rel_index(i, j, max_dist)]);
            }
        }
        self.push(
            "relative_bias",
            Tensor::from_parts(vec![len, len], data),
            Op::RelBias {
                table,
                row,
                len,
                max_dist,
            },
        )
    }

    // ---- reverse sweep -----------------------------------------------------

    /// Propagates adjoints from a scalar `loss` and adds them into the
    /// gradient buffer of every node it reaches.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: lt.shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(idx, &g, &mut adj);
            self.nodes[idx].value.accumulate_grad(&g);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| self.value(v);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2();
                let n = val(*b).dims2().1;
                let ga = slot(adj, *a, m * k);
                gemm_bt_acc(g, val(*b).data(), ga, m, n, k);
                let gb = slot(adj, *b, k * n);
                gemm_at_acc(val(*a).data(), g, gb, m, k, n);
            }
            Op::Add(a, b) => {
                add_into(slot(adj, *a, g.len()), g);
                add_into(slot(adj, *b, g.len()), g);
            }
            Op::Sub(a, b) => {
                add_into(slot(adj, *a, g.len()), g);
                slot(adj, *b, g.len())
                    .iter_mut()
                    .zip(g)
                    .for_each(|(s, &x)| *s -= x);
            }
            Op::Mul(a, b) => {
                let (da, db) = (val(*a).data(), val(*b).data());
                for (i, s) in slot(adj, *a, g.len()).iter_mut().enumerate() {
                    *s += g[i] * db[i];
                }
                for (i, s) in slot(adj, *b, g.len()).iter_mut().enumerate() {
                    *s += g[i] * da[i];
                }
            }
            Op::Div(a, b) => {
                let (da, db) = (val(*a).data(), val(*b).data());
                for (i, s) in slot(adj, *a, g.len()).iter_mut().enumerate() {
                    *s += g[i] / db[i];
                }
                for (i, s) in slot(adj, *b, g.len()).iter_mut().enumerate() {
                    *s -= g[i] * da[i] / (db[i] * db[i]);
                }
            }
            Op::AddRow(x, row) => {
                add_into(slot(adj, *x, g.len()), g);
                let n = val(*row).numel();
                let gr = slot(adj, *row, n);
                for chunk in g.chunks(n) {
                    add_into(gr, chunk);
                }
            }
            Op::ScaleRows(x, s) => {
                let (m, n) = val(*x).dims2();
                let (dx, ds) = (val(*x).data(), val(*s).data());
                let gx = slot(adj, *x, m * n);
                for i in 0..m {
                    for j in 0..n {
                        gx[i * n + j] += g[i * n + j] * ds[i];
                    }
                }
                let gs = slot(adj, *s, m);
                for i in 0..m {
                    gs[i] += (0..n).map(|j| g[i * n + j] * dx[i * n + j]).sum::<T>();
                }
            }
            Op::Relu(x) => {
                let dx = val(*x).data();
                for (i, s) in slot(adj, *x, g.len()).iter_mut().enumerate() {
                    if dx[i] > T::zero() {
                        *s += g[i];
                    }
                }
            }
            Op::Tanh(x) => {
                let y = out.data();
                for (i, s) in slot(adj, *x, g.len()).iter_mut().enumerate() {
                    *s += g[i] * (T::one() - y[i] * y[i]);
                }
            }
            Op::Abs(x) => {
                let dx = val(*x).data();
                for (i, s) in slot(adj, *x, g.len()).iter_mut().enumerate() {
                    if dx[i] > T::zero() {
                        *s += g[i];
                    } else if dx[i] < T::zero() {
                        *s -= g[i];
                    }
                }
            }
            Op::Scale(x, c) => {
                slot(adj, *x, g.len())
                    .iter_mut()
                    .zip(g)
                    .for_each(|(s, &v)| *s += v * *c);
            }
            Op::AddScalar(x) => add_into(slot(adj, *x, g.len()), g),
            Op::MinScalar(x, c) => {
                let dx = val(*x).data();
                for (i, s) in slot(adj, *x, g.len()).iter_mut().enumerate() {
                    if dx[i] < *c {
                        *s += g[i];
                    }
                }
            }
            Op::Transpose(x) => {
                let (m, n) = val(*x).dims2();
                let gx = slot(adj, *x, m * n);
                for i in 0..m {
                    for j in 0..n {
                        gx[i * n + j] += g[j * m + i];
                    }
                }
            }
            Op::Softmax(x) => {
                let (m, n) = out.dims2();
                let y = out.data();
                let gx = slot(adj, *x, m * n);
                for i in 0..m {
                    let r = i * n..(i + 1) * n;
                    let dot: T = g[r.clone()]
                        .iter()
                        .zip(&y[r.clone()])
                        .map(|(&a, &b)| a * b)
                        .sum();
                    for j in r {
                        gx[j] += y[j] * (g[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (m, n) = val(*x).dims2();
                let src = val(*x).data();
                let gn = val(*gain).data();
                let nf = T::from_usize_lossy(n);
                let mut dgain = vec![T::zero(); n];
                let mut dbias = vec![T::zero(); n];
                let mut dx = vec![T::zero(); m * n];
                for i in 0..m {
                    let (xhat, inv_std) = normalize_row(&src[i * n..(i + 1) * n], *eps);
                    let gr = &g[i * n..(i + 1) * n];
                    let dxhat: Vec<T> = (0..n).map(|j| gr[j] * gn[j]).collect();
                    let mean_d = dxhat.iter().copied().sum::<T>() / nf;
                    let mean_dx = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / nf;
                    for j in 0..n {
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                        dx[i * n + j] = inv_std * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                    }
                }
                add_into(slot(adj, *x, m * n), &dx);
                add_into(slot(adj, *gain, n), &dgain);
                add_into(slot(adj, *bias, n), &dbias);
            }
            Op::RowNorm(x) => {
                let (m, n) = val(*x).dims2();
                let (src, norms) = (val(*x).data(), out.data());
                let gx = slot(adj, *x, m * n);
                for i in 0..m {
                    if norms[i] > T::zero() {
                        for j in 0..n {
                            gx[i * n + j] += g[i] * src[i * n + j] / norms[i];
                        }
                    }
                }
            }
            Op::Concat(a, b) => {
                let (m, p) = val(*a).dims2();
                let q = val(*b).dims2().1;
                let ga = slot(adj, *a, m * p);
                for i in 0..m {
                    add_into(
                        &mut ga[i * p..(i + 1) * p],
                        &g[i * (p + q)..i * (p + q) + p],
                    );
                }
                let gb = slot(adj, *b, m * q);
                for i in 0..m {
                    add_into(
                        &mut gb[i * q..(i + 1) * q],
                        &g[i * (p + q) + p..(i + 1) * (p + q)],
                    );
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = val(*x).dims2();
                let len = out.dims2().1;
                let gx = slot(adj, *x, m * n);
                for i in 0..m {
                    add_into(
                        &mut gx[i * n + start..i * n + start + len],
                        &g[i * len..(i + 1) * len],
                    );
                }
            }
            Op::Dropout { x, keep_scale } => {
                for (i, s) in slot(adj, *x, g.len()).iter_mut().enumerate() {
                    *s += g[i] * keep_scale[i];
                }
            }
            Op::Sum(x) => {
                let n = val(*x).numel();
                slot(adj, *x, n).iter_mut().for_each(|s| *s += g[0]);
            }
            Op::Mean(x) => {
                let n = val(*x).numel();
                let share = g[0] / T::from_usize_lossy(n);
                slot(adj, *x, n).iter_mut().for_each(|s| *s += share);
            }
            Op::Gather { table, ids } => {
                let (v, d) = val(*table).dims2();
                let gt = slot(adj, *table, v * d);
                for (i, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &g[i * d..(i + 1) * d]);
                }
            }
            Op::RelBias {
                table,
                row,
                len,
                max_dist,
            } => {
                let (rows, width) = val(*table).dims2();
                let gt = slot(adj, *table, rows * width);
                for i in 0..*len {
                    for j in 0..*len {
                        gt[row * width + rel_index(i, j, *max_dist)] += g[i * len + j];
                    }
                }
            }
        }
    }
}

fn slot<T: Scalar>(adj: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut [T] {
    adj[v.0].get_or_insert_with(|| vec![T::zero(); n])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn rel_index(i: usize, j: usize, max_dist: usize) -> usize {
    let d = i as isize - j as isize;
    let m = max_dist as isize;
    (d.clamp(-m, m) + m) as usize
}

/// Returns `(x̂, 1/σ)` for one row, with `σ = sqrt(var + eps)`.
fn normalize_row<T: Scalar>(row: &[T], eps: T) -> (Vec<T>, T) {
    let n = T::from_usize_lossy(row.len());
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    let inv_std = T::one() / (var + eps).sqrt();
    (row.iter().map(|&x| (x - mean) * inv_std).collect(), inv_std)
}
