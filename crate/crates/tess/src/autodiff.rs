//! Minimal reverse-mode automatic differentiation over dense row-major
//! matrices.
//!
//! Every tensor is two-dimensional; scalars are `[1, 1]` and vectors are row
//! vectors `[1, n]`. Each forward call records a fresh graph node holding its
//! parents and a backward closure. Retain policy: `backward` may be called
//! repeatedly on the same graph (gradients accumulate into every reachable
//! node); leaf gradients persist until [`Tensor::zero_grad`]; dropping the
//! output tensor frees the recorded graph, while parameter leaves live as
//! long as the model that owns them.

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{Result, TessError};

struct Node {
    values: Vec<f64>,
    rows: usize,
    cols: usize,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    needs_grad: bool,
    parents: Vec<Tensor>,
    backward_fn: Option<BackFn>,
    op: &'static str,
}

struct BackwardCtx<'a> {
    grad: &'a [f64],
    values: &'a [f64],
    parents: &'a [Tensor],
}

type BackFn = Box<dyn Fn(&BackwardCtx)>;

/// Shared handle to one node of the computation graph.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Node>>,
}

fn shape_err(op: &'static str, detail: String) -> TessError {
    TessError::ShapeMismatch { op, detail }
}

impl Tensor {
    fn from_node(node: Node) -> Self {
        Self {
            inner: Rc::new(RefCell::new(node)),
        }
    }

    /// Constant (non-differentiable) tensor.
    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(shape_err(
                "from_vec",
                format!("{} values for shape [{rows}, {cols}]", values.len()),
            ));
        }
        Ok(Self::from_node(Node {
            values,
            rows,
            cols,
            grad: None,
            requires_grad: false,
            needs_grad: false,
            parents: vec![],
            backward_fn: None,
            op: "const",
        }))
    }

    /// Trainable leaf.
    pub fn param(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        let t = Self::from_vec(rows, cols, values)?;
        {
            let mut n = t.inner.borrow_mut();
            n.requires_grad = true;
            n.needs_grad = true;
            n.op = "param";
        }
        Ok(t)
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v]).unwrap()
    }

    pub fn row(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::from_vec(1, n, values).unwrap()
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_vec(rows, cols, vec![0.0; rows * cols]).unwrap()
    }

    pub fn shape(&self) -> (usize, usize) {
        let n = self.inner.borrow();
        (n.rows, n.cols)
    }

    pub fn numel(&self) -> usize {
        let n = self.inner.borrow();
        n.rows * n.cols
    }

    pub fn values(&self) -> Vec<f64> {
        self.inner.borrow().values.clone()
    }

    /// Scalar value of a `[1, 1]` tensor.
    pub fn item(&self) -> Result<f64> {
        let n = self.inner.borrow();
        if n.rows * n.cols != 1 {
            return Err(shape_err(
                "item",
                format!("expected scalar, got [{}, {}]", n.rows, n.cols),
            ));
        }
        Ok(n.values[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Overwrite values in place (optimizer updates). Shape must match.
    pub fn set_values(&self, values: &[f64]) -> Result<()> {
        let mut n = self.inner.borrow_mut();
        if values.len() != n.values.len() {
            return Err(shape_err(
                "set_values",
                format!("{} values for {}", values.len(), n.values.len()),
            ));
        }
        n.values.copy_from_slice(values);
        Ok(())
    }

    /// Apply `f` to (value, grad) pairs in place; no-op when grad is absent.
    pub fn update_values(&self, f: impl FnMut(&mut f64, f64)) {
        let mut f = f;
        let mut n = self.inner.borrow_mut();
        if let Some(grad) = n.grad.take() {
            for (v, g) in n.values.iter_mut().zip(&grad) {
                f(v, *g);
            }
            n.grad = Some(grad);
        }
    }

    fn record(
        op: &'static str,
        rows: usize,
        cols: usize,
        values: Vec<f64>,
        parents: Vec<Tensor>,
        backward_fn: BackFn,
    ) -> Self {
        let needs_grad = parents.iter().any(|p| p.inner.borrow().needs_grad);
        Self::from_node(Node {
            values,
            rows,
            cols,
            grad: None,
            requires_grad: false,
            needs_grad,
            parents: if needs_grad { parents } else { vec![] },
            backward_fn: if needs_grad { Some(backward_fn) } else { None },
            op,
        })
    }

    fn accumulate_grad(&self, delta: &[f64]) {
        let mut n = self.inner.borrow_mut();
        if !n.needs_grad {
            return;
        }
        let len = n.values.len();
        let grad = n.grad.get_or_insert_with(|| vec![0.0; len]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// Reverse-mode pass from a scalar output.
    pub fn backward(&self) -> Result<()> {
        {
            let n = self.inner.borrow();
            if n.rows * n.cols != 1 {
                return Err(TessError::Autodiff(format!(
                    "backward requires a scalar output, got [{}, {}] from op {}",
                    n.rows, n.cols, n.op
                )));
            }
        }
        // Iterative post-order DFS over the needs-grad subgraph.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<*const RefCell<Node>> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            let key = Rc::as_ptr(&t.inner);
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(key) {
                continue;
            }
            if !t.inner.borrow().needs_grad {
                continue;
            }
            stack.push((t.clone(), true));
            for p in t.inner.borrow().parents.iter() {
                stack.push((p.clone(), false));
            }
        }
        self.accumulate_grad(&[1.0]);
        for t in order.iter().rev() {
            let n = t.inner.borrow();
            let (Some(backward_fn), Some(grad)) = (&n.backward_fn, &n.grad) else {
                continue;
            };
            backward_fn(&BackwardCtx {
                grad,
                values: &n.values,
                parents: &n.parents,
            });
        }
        Ok(())
    }

    // ---- elementwise ----

    fn check_same_shape(&self, other: &Tensor, op: &'static str) -> Result<(usize, usize)> {
        let (r1, c1) = self.shape();
        let (r2, c2) = other.shape();
        if (r1, c1) != (r2, c2) {
            return Err(shape_err(
                op,
                format!("[{r1}, {c1}] vs [{r2}, {c2}]"),
            ));
        }
        Ok((r1, c1))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (rows, cols) = self.check_same_shape(other, "add")?;
        let a = self.inner.borrow();
        let b = other.inner.borrow();
        let values = a.values.iter().zip(&b.values).map(|(x, y)| x + y).collect();
        drop(a);
        drop(b);
        Ok(Tensor::record(
            "add",
            rows,
            cols,
            values,
            vec![self.clone(), other.clone()],
            Box::new(|ctx| {
                ctx.parents[0].accumulate_grad(ctx.grad);
                ctx.parents[1].accumulate_grad(ctx.grad);
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let (rows, cols) = self.check_same_shape(other, "sub")?;
        let a = self.inner.borrow();
        let b = other.inner.borrow();
        let values = a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect();
        drop(a);
        drop(b);
        Ok(Tensor::record(
            "sub",
            rows,
            cols,
            values,
            vec![self.clone(), other.clone()],
            Box::new(|ctx| {
                ctx.parents[0].accumulate_grad(ctx.grad);
                let neg: Vec<f64> = ctx.grad.iter().map(|g| -g).collect();
                ctx.parents[1].accumulate_grad(&neg);
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (rows, cols) = self.check_same_shape(other, "mul")?;
        let av = self.inner.borrow().values.clone();
        let bv = other.inner.borrow().values.clone();
        let values = av.iter().zip(&bv).map(|(x, y)| x * y).collect();
        Ok(Tensor::record(
            "mul",
            rows,
            cols,
            values,
            vec![self.clone(), other.clone()],
            Box::new(move |ctx| {
                let da: Vec<f64> = ctx.grad.iter().zip(&bv).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = ctx.grad.iter().zip(&av).map(|(g, x)| g * x).collect();
                ctx.parents[0].accumulate_grad(&da);
                ctx.parents[1].accumulate_grad(&db);
            }),
        ))
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&self, scale: f64, shift: f64) -> Tensor {
        let (rows, cols) = self.shape();
        let values = self
            .inner
            .borrow()
            .values
            .iter()
            .map(|v| scale * v + shift)
            .collect();
        Tensor::record(
            "affine",
            rows,
            cols,
            values,
            vec![self.clone()],
            Box::new(move |ctx| {
                let d: Vec<f64> = ctx.grad.iter().map(|g| scale * g).collect();
                ctx.parents[0].accumulate_grad(&d);
            }),
        )
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.affine(c, 0.0)
    }

    /// Multiply every element by a `[1, 1]` tensor, differentiably.
    pub fn scale_by(&self, scalar: &Tensor) -> Result<Tensor> {
        let (srows, scols) = scalar.shape();
        if (srows, scols) != (1, 1) {
            return Err(shape_err(
                "scale_by",
                format!("scale factor must be [1, 1], got [{srows}, {scols}]"),
            ));
        }
        let (rows, cols) = self.shape();
        let s = scalar.inner.borrow().values[0];
        let xv = self.inner.borrow().values.clone();
        let values = xv.iter().map(|v| s * v).collect();
        Ok(Tensor::record(
            "scale_by",
            rows,
            cols,
            values,
            vec![self.clone(), scalar.clone()],
            Box::new(move |ctx| {
                let dx: Vec<f64> = ctx.grad.iter().map(|g| s * g).collect();
                ctx.parents[0].accumulate_grad(&dx);
                let ds: f64 = ctx.grad.iter().zip(&xv).map(|(g, x)| g * x).sum();
                ctx.parents[1].accumulate_grad(&[ds]);
            }),
        ))
    }

    // ---- linear algebra ----

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k1) = self.shape();
        let (k2, n) = other.shape();
        if k1 != k2 {
            return Err(shape_err(
                "matmul",
                format!("[{m}, {k1}] @ [{k2}, {n}]"),
            ));
        }
        let av = self.inner.borrow().values.clone();
        let bv = other.inner.borrow().values.clone();
        let values = mat_mul_raw(&av, &bv, m, k1, n, false, false);
        Ok(Tensor::record(
            "matmul",
            m,
            n,
            values,
            vec![self.clone(), other.clone()],
            Box::new(move |ctx| {
                // dA = dC @ B^T, dB = A^T @ dC
                let da = mat_mul_raw(ctx.grad, &bv, m, n, k1, false, true);
                let db = mat_mul_raw(&av, ctx.grad, k1, m, n, true, false);
                ctx.parents[0].accumulate_grad(&da);
                ctx.parents[1].accumulate_grad(&db);
            }),
        ))
    }

    /// `self @ other^T`; `other` is `[n, k]`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k1) = self.shape();
        let (n, k2) = other.shape();
        if k1 != k2 {
            return Err(shape_err(
                "matmul_nt",
                format!("[{m}, {k1}] @ [{n}, {k2}]^T"),
            ));
        }
        let av = self.inner.borrow().values.clone();
        let bv = other.inner.borrow().values.clone();
        let values = mat_mul_raw(&av, &bv, m, k1, n, false, true);
        Ok(Tensor::record(
            "matmul_nt",
            m,
            n,
            values,
            vec![self.clone(), other.clone()],
            Box::new(move |ctx| {
                // C = A @ B^T: dA = dC @ B, dB = dC^T @ A
                let da = mat_mul_raw(ctx.grad, &bv, m, n, k1, false, false);
                let db = mat_mul_raw(ctx.grad, &av, n, m, k1, true, false);
                ctx.parents[0].accumulate_grad(&da);
                ctx.parents[1].accumulate_grad(&db);
            }),
        ))
    }

    pub fn transpose(&self) -> Tensor {
        let (rows, cols) = self.shape();
        let v = self.inner.borrow().values.clone();
        let values = transpose_raw(&v, rows, cols);
        Tensor::record(
            "transpose",
            cols,
            rows,
            values,
            vec![self.clone()],
            Box::new(move |ctx| {
                let d = transpose_raw(ctx.grad, cols, rows);
                ctx.parents[0].accumulate_grad(&d);
            }),
        )
    }

    /// Add a `[1, n]` bias row to every row of `[m, n]`.
    pub fn add_row_broadcast(&self, bias: &Tensor) -> Result<Tensor> {
        let (m, n) = self.shape();
        let (br, bc) = bias.shape();
        if br != 1 || bc != n {
            return Err(shape_err(
                "add_row_broadcast",
                format!("[{m}, {n}] + [{br}, {bc}]"),
            ));
        }
        let bv = bias.inner.borrow().values.clone();
        let values = self
            .inner
            .borrow()
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i % n])
            .collect();
        Ok(Tensor::record(
            "add_row_broadcast",
            m,
            n,
            values,
            vec![self.clone(), bias.clone()],
            Box::new(move |ctx| {
                ctx.parents[0].accumulate_grad(ctx.grad);
                let mut db = vec![0.0; n];
                for (i, g) in ctx.grad.iter().enumerate() {
                    db[i % n] += g;
                }
                ctx.parents[1].accumulate_grad(&db);
            }),
        ))
    }

    // ---- structure ----

    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(shape_err("concat_rows", "no parts".into()));
        }
        let (_, cols) = parts[0].shape();
        let mut rows = 0;
        let mut values = Vec::new();
        let mut row_counts = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = p.shape();
            if c != cols {
                return Err(shape_err(
                    "concat_rows",
                    format!("column mismatch: {c} vs {cols}"),
                ));
            }
            rows += r;
            row_counts.push(r);
            values.extend_from_slice(&p.inner.borrow().values);
        }
        Ok(Tensor::record(
            "concat_rows",
            rows,
            cols,
            values,
            parts.to_vec(),
            Box::new(move |ctx| {
                let mut offset = 0;
                for (p, r) in ctx.parents.iter().zip(&row_counts) {
                    let len = r * cols;
                    p.accumulate_grad(&ctx.grad[offset..offset + len]);
                    offset += len;
                }
            }),
        ))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (rows, cols) = self.shape();
        if start + len > rows || len == 0 {
            return Err(shape_err(
                "slice_rows",
                format!("[{start}, {}) of {rows} rows", start + len),
            ));
        }
        let values = self.inner.borrow().values[start * cols..(start + len) * cols].to_vec();
        Ok(Tensor::record(
            "slice_rows",
            len,
            cols,
            values,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut d = vec![0.0; rows * cols];
                d[start * cols..(start + len) * cols].copy_from_slice(ctx.grad);
                ctx.parents[0].accumulate_grad(&d);
            }),
        ))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (rows, cols) = self.shape();
        if start + len > cols || len == 0 {
            return Err(shape_err(
                "slice_cols",
                format!("[{start}, {}) of {cols} cols", start + len),
            ));
        }
        let src = self.inner.borrow();
        let mut values = Vec::with_capacity(rows * len);
        for r in 0..rows {
            values.extend_from_slice(&src.values[r * cols + start..r * cols + start + len]);
        }
        drop(src);
        Ok(Tensor::record(
            "slice_cols",
            rows,
            len,
            values,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..len {
                        d[r * cols + start + c] = ctx.grad[r * len + c];
                    }
                }
                ctx.parents[0].accumulate_grad(&d);
            }),
        ))
    }

    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", "no parts".into()));
        }
        let (rows, _) = parts[0].shape();
        let mut col_counts = Vec::with_capacity(parts.len());
        let mut cols = 0;
        for p in parts {
            let (r, c) = p.shape();
            if r != rows {
                return Err(shape_err(
                    "concat_cols",
                    format!("row mismatch: {r} vs {rows}"),
                ));
            }
            cols += c;
            col_counts.push(c);
        }
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for (p, c) in parts.iter().zip(&col_counts) {
                let src = p.inner.borrow();
                values.extend_from_slice(&src.values[r * c..(r + 1) * c]);
            }
        }
        Ok(Tensor::record(
            "concat_cols",
            rows,
            cols,
            values,
            parts.to_vec(),
            Box::new(move |ctx| {
                let mut offset = 0;
                for (p, c) in ctx.parents.iter().zip(&col_counts) {
                    let mut d = vec![0.0; rows * c];
                    for r in 0..rows {
                        d[r * c..(r + 1) * c]
                            .copy_from_slice(&ctx.grad[r * cols + offset..r * cols + offset + c]);
                    }
                    p.accumulate_grad(&d);
                    offset += c;
                }
            }),
        ))
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Tensor> {
        let n = self.numel();
        if rows * cols != n {
            return Err(shape_err(
                "reshape",
                format!("{n} elements into [{rows}, {cols}]"),
            ));
        }
        let values = self.inner.borrow().values.clone();
        Ok(Tensor::record(
            "reshape",
            rows,
            cols,
            values,
            vec![self.clone()],
            Box::new(|ctx| ctx.parents[0].accumulate_grad(ctx.grad)),
        ))
    }

    /// Flatten to a single row vector `[1, numel]`.
    pub fn flatten(&self) -> Tensor {
        let n = self.numel();
        self.reshape(1, n).expect("flatten preserves element count")
    }

    // ---- nonlinearities ----

    pub fn softmax_rows(&self) -> Tensor {
        let (rows, cols) = self.shape();
        let src = self.inner.borrow().values.clone();
        let mut values = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (i, v) in row.iter().enumerate() {
                let e = (v - max).exp();
                values[r * cols + i] = e;
                sum += e;
            }
            for i in 0..cols {
                values[r * cols + i] /= sum;
            }
        }
        Tensor::record(
            "softmax_rows",
            rows,
            cols,
            values,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    let y = &ctx.values[r * cols..(r + 1) * cols];
                    let g = &ctx.grad[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(g).map(|(yi, gi)| yi * gi).sum();
                    for i in 0..cols {
                        d[r * cols + i] = y[i] * (g[i] - dot);
                    }
                }
                ctx.parents[0].accumulate_grad(&d);
            }),
        )
    }

    /// Row-wise layer normalization with learnable gain and bias.
    pub fn layer_norm_rows(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (rows, cols) = self.shape();
        for (t, name) in [(gamma, "gamma"), (beta, "beta")] {
            let (r, c) = t.shape();
            if r != 1 || c != cols {
                return Err(shape_err(
                    "layer_norm_rows",
                    format!("{name} must be [1, {cols}], got [{r}, {c}]"),
                ));
            }
        }
        let src = self.inner.borrow().values.clone();
        let gv = gamma.inner.borrow().values.clone();
        let bv = beta.inner.borrow().values.clone();
        let mut values = vec![0.0; rows * cols];
        let mut x_hat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for i in 0..cols {
                let h = (row[i] - mean) * istd;
                x_hat[r * cols + i] = h;
                values[r * cols + i] = gv[i] * h + bv[i];
            }
        }
        Ok(Tensor::record(
            "layer_norm_rows",
            rows,
            cols,
            values,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |ctx| {
                let mut dx = vec![0.0; rows * cols];
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                for r in 0..rows {
                    let g = &ctx.grad[r * cols..(r + 1) * cols];
                    let h = &x_hat[r * cols..(r + 1) * cols];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for i in 0..cols {
                        dgamma[i] += g[i] * h[i];
                        dbeta[i] += g[i];
                        let dh = g[i] * gv[i];
                        mean_dh += dh;
                        mean_dh_h += dh * h[i];
                    }
                    mean_dh /= cols as f64;
                    mean_dh_h /= cols as f64;
                    for i in 0..cols {
                        let dh = g[i] * gv[i];
                        dx[r * cols + i] = inv_std[r] * (dh - mean_dh - h[i] * mean_dh_h);
                    }
                }
                ctx.parents[0].accumulate_grad(&dx);
                ctx.parents[1].accumulate_grad(&dgamma);
                ctx.parents[2].accumulate_grad(&dbeta);
            }),
        ))
    }

    pub fn gelu(&self) -> Tensor {
        let (rows, cols) = self.shape();
        let src = self.inner.borrow().values.clone();
        let values = src.iter().map(|&x| gelu_fwd(x)).collect();
        Tensor::record(
            "gelu",
            rows,
            cols,
            values,
            vec![self.clone()],
            Box::new(move |ctx| {
                let d: Vec<f64> = ctx
                    .grad
                    .iter()
                    .zip(&src)
                    .map(|(g, &x)| g * gelu_grad(x))
                    .collect();
                ctx.parents[0].accumulate_grad(&d);
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let (rows, cols) = self.shape();
        let values: Vec<f64> = self
            .inner
            .borrow()
            .values
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        Tensor::record(
            "sigmoid",
            rows,
            cols,
            values,
            vec![self.clone()],
            Box::new(|ctx| {
                let d: Vec<f64> = ctx
                    .grad
                    .iter()
                    .zip(ctx.values)
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                ctx.parents[0].accumulate_grad(&d);
            }),
        )
    }

    // ---- reductions and losses ----

    pub fn sum_all(&self) -> Tensor {
        let n = self.numel();
        let total = self.inner.borrow().values.iter().sum();
        Tensor::record(
            "sum_all",
            1,
            1,
            vec![total],
            vec![self.clone()],
            Box::new(move |ctx| {
                let d = vec![ctx.grad[0]; n];
                ctx.parents[0].accumulate_grad(&d);
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel();
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Mean over all elements of the squared difference.
    pub fn mean_squared_error(&self, target: &Tensor) -> Result<Tensor> {
        let (rows, cols) = self.check_same_shape(target, "mean_squared_error")?;
        let n = (rows * cols) as f64;
        let av = self.inner.borrow().values.clone();
        let tv = target.inner.borrow().values.clone();
        let loss = av
            .iter()
            .zip(&tv)
            .map(|(a, t)| (a - t) * (a - t))
            .sum::<f64>()
            / n;
        Ok(Tensor::record(
            "mean_squared_error",
            1,
            1,
            vec![loss],
            vec![self.clone(), target.clone()],
            Box::new(move |ctx| {
                let up = ctx.grad[0];
                let da: Vec<f64> = av
                    .iter()
                    .zip(&tv)
                    .map(|(a, t)| up * 2.0 * (a - t) / n)
                    .collect();
                let dt: Vec<f64> = da.iter().map(|d| -d).collect();
                ctx.parents[0].accumulate_grad(&da);
                ctx.parents[1].accumulate_grad(&dt);
            }),
        ))
    }

    /// Unnormalized binary cross-entropy sum over a row of probabilities,
    /// with inputs clamped to `[eps, 1 - eps]` before the logs.
    pub fn binary_cross_entropy_sum(&self, labels: &[f64], eps: f64) -> Result<Tensor> {
        let (rows, cols) = self.shape();
        if rows != 1 || cols != labels.len() {
            return Err(shape_err(
                "binary_cross_entropy_sum",
                format!("[{rows}, {cols}] vs {} labels", labels.len()),
            ));
        }
        let gv = self.inner.borrow().values.clone();
        let yv = labels.to_vec();
        let mut loss = 0.0;
        for (g, y) in gv.iter().zip(&yv) {
            let gc = g.clamp(eps, 1.0 - eps);
            loss -= y * gc.ln() + (1.0 - y) * (1.0 - gc).ln();
        }
        Ok(Tensor::record(
            "binary_cross_entropy_sum",
            1,
            1,
            vec![loss],
            vec![self.clone()],
            Box::new(move |ctx| {
                let up = ctx.grad[0];
                let d: Vec<f64> = gv
                    .iter()
                    .zip(&yv)
                    .map(|(g, y)| {
                        if *g <= eps || *g >= 1.0 - eps {
                            0.0
                        } else {
                            up * (-y / g + (1.0 - y) / (1.0 - g))
                        }
                    })
                    .collect();
                ctx.parents[0].accumulate_grad(&d);
            }),
        ))
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2 / pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-major matmul with optional transposes: `op(a) @ op(b)` where the
/// logical result is `[m, n]` and the shared dimension is `k`. `a` holds
/// `[m, k]` (or `[k, m]` when `ta`), `b` holds `[k, n]` (or `[n, k]` when `tb`).
fn mat_mul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = if ta { a[p * m + i] } else { a[i * k + p] };
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                let bv = if tb { b[j * k + p] } else { b[p * n + j] };
                out[i * n + j] += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(v: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = v[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite_diff(loss: impl Fn(&[f64]) -> f64, at: &[f64], step: f64) -> Vec<f64> {
        let mut grads = Vec::with_capacity(at.len());
        for i in 0..at.len() {
            let mut plus = at.to_vec();
            let mut minus = at.to_vec();
            plus[i] += step;
            minus[i] -= step;
            grads.push((loss(&plus) - loss(&minus)) / (2.0 * step));
        }
        grads
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            let denom = x.abs().max(y.abs()).max(1.0);
            assert!(
                (x - y).abs() / denom < tol,
                "mismatch: {x} vs {y} (tol {tol})"
            );
        }
    }

    #[test]
    fn square_gradient() {
        let x = Tensor::param(1, 1, vec![3.0]).unwrap();
        let y = x.mul(&x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let x = Tensor::param(1, 2, vec![1.0, 2.0]).unwrap();
        let y = x.scale(2.0);
        assert!(y.backward().is_err());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::param(1, 1, vec![2.0]).unwrap();
        let y = x.mul(&x).unwrap();
        y.backward().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![8.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn matmul_shapes_checked() {
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(4, 2);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_forward_and_gradient() {
        let a = Tensor::param(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::param(3, 2, vec![1.0, 0.5, -1.0, 2.0, 0.0, 1.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.values(), vec![-1.0, 7.5, -1.0, 18.0]);
        let loss = c.mul(&c).unwrap().sum_all();
        loss.backward().unwrap();

        let av = a.values();
        let bv = b.values();
        let loss_a = |vals: &[f64]| {
            let a = Tensor::from_vec(2, 3, vals.to_vec()).unwrap();
            let b = Tensor::from_vec(3, 2, bv.clone()).unwrap();
            let c = a.matmul(&b).unwrap();
            c.values().iter().map(|v| v * v).sum()
        };
        let loss_b = |vals: &[f64]| {
            let a = Tensor::from_vec(2, 3, av.clone()).unwrap();
            let b = Tensor::from_vec(3, 2, vals.to_vec()).unwrap();
            let c = a.matmul(&b).unwrap();
            c.values().iter().map(|v| v * v).sum()
        };
        assert_close(&a.grad().unwrap(), &finite_diff(loss_a, &av, 1e-5), 1e-6);
        assert_close(&b.grad().unwrap(), &finite_diff(loss_b, &bv, 1e-5), 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grad_orthogonal_to_ones() {
        let x = Tensor::param(2, 4, vec![0.1, 2.0, -1.0, 0.5, 3.0, 3.0, 3.0, 3.0]).unwrap();
        let y = x.softmax_rows();
        let v = y.values();
        for r in 0..2 {
            let s: f64 = v[r * 4..(r + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // constant-sum upstream: sum of softmax is constant, so dx ~ 0
        let loss = y.sum_all();
        loss.backward().unwrap();
        for g in x.grad().unwrap() {
            assert!(g.abs() < 1e-9);
        }
    }

    #[test]
    fn composite_network_matches_finite_differences() {
        // small MLP-ish stack exercising most ops
        let w1 = Tensor::param(4, 3, vec![0.1, -0.2, 0.3, 0.4, 0.05, -0.6, 0.7, 0.8, -0.9, 0.11, 0.12, 0.13]).unwrap();
        let b1 = Tensor::param(1, 4, vec![0.01, -0.02, 0.03, 0.04]).unwrap();
        let gamma = Tensor::param(1, 4, vec![1.0, 0.9, 1.1, 1.0]).unwrap();
        let beta = Tensor::param(1, 4, vec![0.0, 0.1, -0.1, 0.0]).unwrap();
        let x = Tensor::from_vec(2, 3, vec![0.5, -0.3, 0.8, -0.1, 0.4, 0.2]).unwrap();
        let target = Tensor::from_vec(2, 4, vec![0.0, 1.0, 0.0, -1.0, 0.5, 0.5, -0.5, 0.0]).unwrap();

        let forward = |w1v: &[f64], b1v: &[f64], gv: &[f64], bv: &[f64]| -> f64 {
            let w1 = Tensor::from_vec(4, 3, w1v.to_vec()).unwrap();
            let b1 = Tensor::from_vec(1, 4, b1v.to_vec()).unwrap();
            let gamma = Tensor::from_vec(1, 4, gv.to_vec()).unwrap();
            let beta = Tensor::from_vec(1, 4, bv.to_vec()).unwrap();
            let h = x
                .matmul_nt(&w1)
                .unwrap()
                .add_row_broadcast(&b1)
                .unwrap()
                .gelu()
                .layer_norm_rows(&gamma, &beta, 1e-5)
                .unwrap()
                .softmax_rows();
            h.mean_squared_error(&target).unwrap().item().unwrap()
        };

        let h = x
            .matmul_nt(&w1)
            .unwrap()
            .add_row_broadcast(&b1)
            .unwrap()
            .gelu()
            .layer_norm_rows(&gamma, &beta, 1e-5)
            .unwrap()
            .softmax_rows();
        let loss = h.mean_squared_error(&target).unwrap();
        loss.backward().unwrap();

        let (w1v, b1v, gv, bv) = (w1.values(), b1.values(), gamma.values(), beta.values());
        let fd_w1 = finite_diff(|v| forward(v, &b1v, &gv, &bv), &w1v, 1e-5);
        let fd_b1 = finite_diff(|v| forward(&w1v, v, &gv, &bv), &b1v, 1e-5);
        let fd_g = finite_diff(|v| forward(&w1v, &b1v, v, &bv), &gv, 1e-5);
        let fd_b = finite_diff(|v| forward(&w1v, &b1v, &gv, v), &bv, 1e-5);
        assert_close(&w1.grad().unwrap(), &fd_w1, 1e-5);
        assert_close(&b1.grad().unwrap(), &fd_b1, 1e-5);
        assert_close(&gamma.grad().unwrap(), &fd_g, 1e-5);
        assert_close(&beta.grad().unwrap(), &fd_b, 1e-5);
    }

    #[test]
    fn structural_ops_route_gradients() {
        let a = Tensor::param(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::param(1, 2, vec![5.0, 6.0]).unwrap();
        let stacked = Tensor::concat_rows(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(stacked.shape(), (3, 2));
        let sliced = stacked.slice_rows(1, 2).unwrap();
        let loss = sliced.sum_all();
        loss.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(b.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn col_ops_route_gradients() {
        let a = Tensor::param(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let left = a.slice_cols(0, 2).unwrap();
        let right = a.slice_cols(2, 1).unwrap();
        assert_eq!(left.values(), vec![1.0, 2.0, 4.0, 5.0]);
        assert_eq!(right.values(), vec![3.0, 6.0]);
        let glued = Tensor::concat_cols(&[left, right]).unwrap();
        assert_eq!(glued.values(), a.values());
        let loss = glued.mul(&glued).unwrap().sum_all();
        loss.backward().unwrap();
        let expected: Vec<f64> = a.values().iter().map(|v| 2.0 * v).collect();
        assert_close(&a.grad().unwrap(), &expected, 1e-12);
    }

    #[test]
    fn scale_by_scalar_node() {
        let g = Tensor::param(1, 1, vec![0.5]).unwrap();
        let h = Tensor::param(1, 3, vec![1.0, -2.0, 4.0]).unwrap();
        let scaled = h.scale_by(&g).unwrap();
        assert_eq!(scaled.values(), vec![0.5, -1.0, 2.0]);
        let loss = scaled.sum_all();
        loss.backward().unwrap();
        assert_eq!(g.grad().unwrap(), vec![3.0]);
        assert_eq!(h.grad().unwrap(), vec![0.5, 0.5, 0.5]);
    }

    #[test]
    fn bce_matches_hand_values_and_logit_gradient() {
        let g = Tensor::param(1, 1, vec![0.5]).unwrap();
        let loss = g.binary_cross_entropy_sum(&[1.0], 1e-7).unwrap();
        assert!((loss.item().unwrap() - 0.6931471805599453).abs() < 1e-12);

        // logit gradient equals (g - y)
        let logit = Tensor::param(1, 1, vec![0.3]).unwrap();
        let gate = logit.sigmoid();
        let l = gate.binary_cross_entropy_sum(&[1.0], 1e-7).unwrap();
        l.backward().unwrap();
        let g_val = gate.values()[0];
        let analytic = logit.grad().unwrap()[0];
        assert!((analytic - (g_val - 1.0)).abs() < 1e-12);

        let fd = finite_diff(
            |v| {
                let logit = Tensor::from_vec(1, 1, v.to_vec()).unwrap();
                logit
                    .sigmoid()
                    .binary_cross_entropy_sum(&[1.0], 1e-7)
                    .unwrap()
                    .item()
                    .unwrap()
            },
            &[0.3],
            1e-5,
        );
        assert!((analytic - fd[0]).abs() < 1e-4);
    }

    #[test]
    fn mse_hand_value() {
        let a = Tensor::param(1, 2, vec![0.0, 0.0]).unwrap();
        let t = Tensor::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        let l = a.mean_squared_error(&t).unwrap();
        assert_eq!(l.item().unwrap(), 1.0);
        l.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![-1.0, -1.0]);
    }

    #[test]
    fn constants_do_not_track_gradients() {
        let c = Tensor::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let d = c.scale(3.0);
        let loss = d.sum_all();
        loss.backward().unwrap();
        assert!(c.grad().is_none());
    }
}
