use super::{Array, Graph, NodeId, Op, Result, Tensor, TensorError};

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        msg: msg.into(),
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

fn as_matrix(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

impl<'g> Tensor<'g> {
    fn same_graph(&self, other: &Tensor<'g>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(TensorError::ForeignGraph(op))
        }
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Tensor<'g> {
        let (value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let n = &nodes[self.id];
            let data = n.value.data.iter().map(|&x| f(x)).collect();
            (
                Array {
                    shape: n.value.shape.clone(),
                    data,
                },
                n.requires_grad,
            )
        };
        self.graph.push(value, op, rg)
    }

    fn binary(
        &self,
        other: &Tensor<'g>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor<'g>> {
        self.same_graph(other, name)?;
        let (value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.value.shape != b.value.shape {
                return Err(mismatch(name, &a.value.shape, &b.value.shape));
            }
            let data = a
                .value
                .data
                .iter()
                .zip(&b.value.data)
                .map(|(&x, &y)| f(x, y))
                .collect();
            (
                Array {
                    shape: a.value.shape.clone(),
                    data,
                },
                a.requires_grad || b.requires_grad,
            )
        };
        Ok(self.graph.push(value, op, rg))
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&self, other: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.same_graph(other, "matmul")?;
        let (value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let (m, k) = as_matrix(&a.value.shape)
                .ok_or_else(|| mismatch("matmul", &a.value.shape, &b.value.shape))?;
            let (k2, n) = as_matrix(&b.value.shape)
                .ok_or_else(|| mismatch("matmul", &a.value.shape, &b.value.shape))?;
            if k != k2 {
                return Err(mismatch("matmul", &a.value.shape, &b.value.shape));
            }
            let mut out = vec![0.0; m * n];
            gemm_nn(&a.value.data, &b.value.data, &mut out, m, k, n);
            (
                Array {
                    shape: vec![m, n],
                    data: out,
                },
                a.requires_grad || b.requires_grad,
            )
        };
        Ok(self.graph.push(value, Op::Matmul(self.id, other.id), rg))
    }

    /// `self · otherᵀ` for `self[m×k]`, `other[n×k]`.
    pub fn matmul_nt(&self, other: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.same_graph(other, "matmul_nt")?;
        let (value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let (m, k) = as_matrix(&a.value.shape)
                .ok_or_else(|| mismatch("matmul_nt", &a.value.shape, &b.value.shape))?;
            let (n, k2) = as_matrix(&b.value.shape)
                .ok_or_else(|| mismatch("matmul_nt", &a.value.shape, &b.value.shape))?;
            if k != k2 {
                return Err(mismatch("matmul_nt", &a.value.shape, &b.value.shape));
            }
            let mut out = vec![0.0; m * n];
            gemm_nt(&a.value.data, &b.value.data, &mut out, m, k, n);
            (
                Array {
                    shape: vec![m, n],
                    data: out,
                },
                a.requires_grad || b.requires_grad,
            )
        };
        Ok(self.graph.push(value, Op::MatmulNt(self.id, other.id), rg))
    }

    pub fn add(&self, other: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.binary(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn maximum(&self, other: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.binary(other, "maximum", Op::Maximum(self.id, other.id), f64::max)
    }

    /// Elementwise minimum; ties route the gradient to `self`.
    pub fn minimum(&self, other: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.binary(other, "minimum", Op::Minimum(self.id, other.id), f64::min)
    }

    fn rowwise(
        &self,
        vec: &Tensor<'g>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor<'g>> {
        self.same_graph(vec, name)?;
        let (value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[vec.id]);
            let c = a.value.cols();
            if b.value.shape.len() != 1 || b.value.shape[0] != c {
                return Err(mismatch(name, &a.value.shape, &b.value.shape));
            }
            let mut data = a.value.data.clone();
            for row in data.chunks_mut(c.max(1)) {
                for (x, &v) in row.iter_mut().zip(&b.value.data) {
                    *x = f(*x, v);
                }
            }
            (
                Array {
                    shape: a.value.shape.clone(),
                    data,
                },
                a.requires_grad || b.requires_grad,
            )
        };
        Ok(self.graph.push(value, op, rg))
    }

    /// Adds a length-`C` vector to every row of an `N×C` tensor.
    pub fn add_row(&self, bias: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.rowwise(bias, "add_row", Op::AddRow(self.id, bias.id), |x, b| x + b)
    }

    /// Multiplies every row of an `N×C` tensor by a length-`C` vector.
    pub fn mul_row(&self, gain: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.rowwise(gain, "mul_row", Op::MulRow(self.id, gain.id), |x, g| x * g)
    }

    pub fn scale(&self, k: f64) -> Tensor<'g> {
        self.unary(Op::Scale(self.id, k), |x| x * k)
    }

    pub fn neg(&self) -> Tensor<'g> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<'g> {
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }

    /// Multiplies every element by a single-element tensor.
    pub fn scale_by(&self, s: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.same_graph(s, "scale_by")?;
        let (value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[s.id]);
            if b.value.data.len() != 1 {
                return Err(mismatch("scale_by", &a.value.shape, &b.value.shape));
            }
            let k = b.value.data[0];
            (
                Array {
                    shape: a.value.shape.clone(),
                    data: a.value.data.iter().map(|x| x * k).collect(),
                },
                a.requires_grad || b.requires_grad,
            )
        };
        Ok(self.graph.push(value, Op::ScaleBy(self.id, s.id), rg))
    }

    pub fn exp(&self) -> Tensor<'g> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn log(&self) -> Tensor<'g> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn sigmoid(&self) -> Tensor<'g> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    /// `ln σ(x)`, stable for large `|x|`.
    pub fn log_sigmoid(&self) -> Tensor<'g> {
        self.unary(Op::LogSigmoid(self.id), log_sigmoid)
    }

    pub fn relu(&self) -> Tensor<'g> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn abs(&self) -> Tensor<'g> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    pub fn powf(&self, p: f64) -> Tensor<'g> {
        self.unary(Op::Powf(self.id, p), move |x| x.powf(p))
    }

    /// Softmax over the last dimension. With `causal`, the tensor must be a
    /// square matrix and entry `(i, j)` with `j > i` receives zero mass.
    pub fn softmax_lastdim(&self, causal: bool) -> Result<Tensor<'g>> {
        let (value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let c = a.value.cols();
            if c == 0 {
                return Err(invalid("softmax", "empty last dimension"));
            }
            if causal {
                match as_matrix(&a.value.shape) {
                    Some((r, c2)) if r == c2 => {}
                    _ => return Err(invalid("softmax", format!("causal mask needs a square matrix, got {:?}", a.value.shape))),
                }
            }
            let mut data = a.value.data.clone();
            for (i, row) in data.chunks_mut(c).enumerate() {
                let live = if causal { i + 1 } else { c };
                let m = row[..live].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for x in row[..live].iter_mut() {
                    *x = (*x - m).exp();
                    s += *x;
                }
                for x in row[..live].iter_mut() {
                    *x /= s;
                }
                for x in row[live..].iter_mut() {
                    *x = 0.0;
                }
            }
            (
                Array {
                    shape: a.value.shape.clone(),
                    data,
                },
                a.requires_grad,
            )
        };
        Ok(self.graph.push(value, Op::Softmax(self.id), rg))
    }

    /// Zero-mean, unit-variance normalization over the last dimension
    /// (no affine parameters; compose with `mul_row`/`add_row`).
    pub fn layernorm_lastdim(&self) -> Result<Tensor<'g>> {
        let (value, rstd, rg) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let c = a.value.cols();
            if c == 0 {
                return Err(invalid("layernorm", "empty last dimension"));
            }
            let mut data = a.value.data.clone();
            let mut rstd = Vec::with_capacity(data.len() / c);
            for row in data.chunks_mut(c) {
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
                let r = 1.0 / (var + LN_EPS).sqrt();
                for x in row.iter_mut() {
                    *x = (*x - mean) * r;
                }
                rstd.push(r);
            }
            (
                Array {
                    shape: a.value.shape.clone(),
                    data,
                },
                rstd,
                a.requires_grad,
            )
        };
        Ok(self.graph.push(value, Op::LayerNorm { x: self.id, rstd }, rg))
    }

    /// Scales every row (last dimension) to unit L2 norm.
    pub fn l2_normalize_rows(&self) -> Result<Tensor<'g>> {
        let (value, norms, rg) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let c = a.value.cols();
            if c == 0 {
                return Err(invalid("l2_normalize", "empty last dimension"));
            }
            let mut data = a.value.data.clone();
            let mut norms = Vec::with_capacity(data.len() / c);
            for row in data.chunks_mut(c) {
                let n = dot(row, row).sqrt().max(NORM_EPS);
                for x in row.iter_mut() {
                    *x /= n;
                }
                norms.push(n);
            }
            (
                Array {
                    shape: a.value.shape.clone(),
                    data,
                },
                norms,
                a.requires_grad,
            )
        };
        Ok(self.graph.push(value, Op::L2Normalize { x: self.id, norms }, rg))
    }

    pub fn transpose(&self) -> Result<Tensor<'g>> {
        let (value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let (r, c) = as_matrix(&a.value.shape)
                .ok_or_else(|| invalid("transpose", format!("needs a matrix, got {:?}", a.value.shape)))?;
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = a.value.data[i * c + j];
                }
            }
            (
                Array {
                    shape: vec![c, r],
                    data,
                },
                a.requires_grad,
            )
        };
        Ok(self.graph.push(value, Op::Transpose(self.id), rg))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<'g>> {
        let (value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let n: usize = shape.iter().product();
            if n != a.value.data.len() {
                return Err(mismatch("reshape", &a.value.shape, shape));
            }
            (
                Array {
                    shape: shape.to_vec(),
                    data: a.value.data.clone(),
                },
                a.requires_grad,
            )
        };
        Ok(self.graph.push(value, Op::Reshape(self.id), rg))
    }

    /// Selects rows (first axis of a matrix) by index; indices may repeat.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor<'g>> {
        let (value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let (r, c) = as_matrix(&a.value.shape)
                .ok_or_else(|| invalid("gather_rows", format!("needs a matrix, got {:?}", a.value.shape)))?;
            let mut data = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                if i >= r {
                    return Err(invalid("gather_rows", format!("row {i} out of range for {r} rows")));
                }
                data.extend_from_slice(&a.value.data[i * c..(i + 1) * c]);
            }
            (
                Array {
                    shape: vec![idx.len(), c],
                    data,
                },
                a.requires_grad,
            )
        };
        Ok(self.graph.push(
            value,
            Op::GatherRows {
                x: self.id,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Contiguous row block `[start, start + len)` of a matrix.
    pub fn narrow_rows(&self, start: usize, len: usize) -> Result<Tensor<'g>> {
        let (value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let (r, c) = as_matrix(&a.value.shape)
                .ok_or_else(|| invalid("narrow_rows", format!("needs a matrix, got {:?}", a.value.shape)))?;
            if start + len > r {
                return Err(invalid("narrow_rows", format!("rows {start}..{} exceed {r}", start + len)));
            }
            (
                Array {
                    shape: vec![len, c],
                    data: a.value.data[start * c..(start + len) * c].to_vec(),
                },
                a.requires_grad,
            )
        };
        Ok(self.graph.push(value, Op::NarrowRows { x: self.id, start }, rg))
    }

    /// Contiguous column block `[start, start + len)` of a matrix.
    pub fn narrow_cols(&self, start: usize, len: usize) -> Result<Tensor<'g>> {
        let (value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let (r, c) = as_matrix(&a.value.shape)
                .ok_or_else(|| invalid("narrow_cols", format!("needs a matrix, got {:?}", a.value.shape)))?;
            if start + len > c {
                return Err(invalid("narrow_cols", format!("cols {start}..{} exceed {c}", start + len)));
            }
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&a.value.data[i * c + start..i * c + start + len]);
            }
            (
                Array {
                    shape: vec![r, len],
                    data,
                },
                a.requires_grad,
            )
        };
        Ok(self.graph.push(value, Op::NarrowCols { x: self.id, start }, rg))
    }

    pub fn sum(&self) -> Tensor<'g> {
        let (value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            (Array::scalar(a.value.data.iter().sum()), a.requires_grad)
        };
        self.graph.push(value, Op::Sum(self.id), rg)
    }

    pub fn mean(&self) -> Result<Tensor<'g>> {
        let (value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            if a.value.data.is_empty() {
                return Err(invalid("mean", "empty tensor"));
            }
            let n = a.value.data.len() as f64;
            (Array::scalar(a.value.data.iter().sum::<f64>() / n), a.requires_grad)
        };
        Ok(self.graph.push(value, Op::Mean(self.id), rg))
    }

    /// Sums the last dimension: `[.., C] -> [..]` (a vector becomes `[1]`).
    pub fn sum_lastdim(&self) -> Tensor<'g> {
        let (value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let c = a.value.cols().max(1);
            let data: Vec<f64> = a.value.data.chunks(c).map(|r| r.iter().sum()).collect();
            let mut shape = a.value.shape[..a.value.shape.len().saturating_sub(1)].to_vec();
            if shape.is_empty() {
                shape.push(1);
            }
            (Array { shape, data }, a.requires_grad)
        };
        self.graph.push(value, Op::SumLastDim(self.id), rg)
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(parts: &[Tensor<'g>]) -> Result<Tensor<'g>> {
        let first = parts.first().ok_or_else(|| invalid("concat_rows", "no inputs"))?;
        let graph = first.graph;
        let (value, rg) = {
            let nodes = graph.nodes.borrow();
            let c = nodes[first.id].value.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            let mut rg = false;
            for p in parts {
                first.same_graph(p, "concat_rows")?;
                let n = &nodes[p.id];
                let (r, c2) = as_matrix(&n.value.shape)
                    .ok_or_else(|| mismatch("concat_rows", &nodes[first.id].value.shape, &n.value.shape))?;
                if c2 != c {
                    return Err(mismatch("concat_rows", &nodes[first.id].value.shape, &n.value.shape));
                }
                data.extend_from_slice(&n.value.data);
                rows += r;
                rg |= n.requires_grad;
            }
            (
                Array {
                    shape: vec![rows, c],
                    data,
                },
                rg,
            )
        };
        Ok(graph.push(value, Op::ConcatRows(parts.iter().map(|p| p.id).collect()), rg))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(parts: &[Tensor<'g>]) -> Result<Tensor<'g>> {
        let first = parts.first().ok_or_else(|| invalid("concat_cols", "no inputs"))?;
        let graph = first.graph;
        let (value, rg) = {
            let nodes = graph.nodes.borrow();
            let r = nodes[first.id].value.rows();
            let mut widths = Vec::with_capacity(parts.len());
            let mut rg = false;
            for p in parts {
                first.same_graph(p, "concat_cols")?;
                let n = &nodes[p.id];
                let (r2, c) = as_matrix(&n.value.shape)
                    .ok_or_else(|| mismatch("concat_cols", &nodes[first.id].value.shape, &n.value.shape))?;
                if r2 != r {
                    return Err(mismatch("concat_cols", &nodes[first.id].value.shape, &n.value.shape));
                }
                widths.push(c);
                rg |= n.requires_grad;
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(r * total);
            for i in 0..r {
                for (p, &w) in parts.iter().zip(&widths) {
                    data.extend_from_slice(&nodes[p.id].value.data[i * w..(i + 1) * w]);
                }
            }
            (
                Array {
                    shape: vec![r, total],
                    data,
                },
                rg,
            )
        };
        Ok(graph.push(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), rg))
    }

    /// Reverse sweep from a scalar root. Gradients accumulate on leaves that
    /// require them; repeated calls add to the stored values.
    pub fn backward(&self) -> Result<()> {
        let leaf_grads = {
            let nodes = self.graph.nodes.borrow();
            let root = &nodes[self.id];
            if root.value.data.len() != 1 {
                return Err(TensorError::NonScalarRoot(root.value.shape.clone()));
            }
            backward_sweep(&nodes, self.id)
        };
        let mut nodes = self.graph.nodes.borrow_mut();
        for (id, g) in leaf_grads {
            let node = &mut nodes[id];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }
}

fn backward_sweep(nodes: &[super::Node], root: NodeId) -> Vec<(NodeId, Vec<f64>)> {
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
    grads[root] = Some(vec![1.0]);
    let mut leaves = Vec::new();

    // Lazily allocates the gradient buffer of `id` when it takes part in
    // differentiation; returns None otherwise.
    fn slot<'a>(
        grads: &'a mut [Option<Vec<f64>>],
        nodes: &[super::Node],
        id: NodeId,
    ) -> Option<&'a mut Vec<f64>> {
        if !nodes[id].requires_grad {
            return None;
        }
        Some(grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.data.len()]))
    }

    for id in (0..=root).rev() {
        let Some(g) = grads[id].take() else { continue };
        let node = &nodes[id];
        if !node.requires_grad {
            continue;
        }
        let out = &node.value.data;
        match &node.op {
            Op::Leaf => leaves.push((id, g)),
            Op::Matmul(a, b) => {
                let (m, k) = as_matrix(&nodes[*a].value.shape).unwrap();
                let n = nodes[*b].value.shape[1];
                if let Some(da) = slot(&mut grads, nodes, *a) {
                    // dA = G · Bᵀ
                    gemm_nt(&g, &nodes[*b].value.data, da, m, n, k);
                }
                if let Some(db) = slot(&mut grads, nodes, *b) {
                    // dB = Aᵀ · G
                    gemm_tn(&nodes[*a].value.data, &g, db, m, k, n);
                }
            }
            Op::MatmulNt(a, b) => {
                let (m, k) = as_matrix(&nodes[*a].value.shape).unwrap();
                let n = nodes[*b].value.shape[0];
                if let Some(da) = slot(&mut grads, nodes, *a) {
                    // dA = G · B
                    gemm_nn(&g, &nodes[*b].value.data, da, m, n, k);
                }
                if let Some(db) = slot(&mut grads, nodes, *b) {
                    // dB = Gᵀ · A
                    gemm_tn(&g, &nodes[*a].value.data, db, m, n, k);
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = slot(&mut grads, nodes, *a) {
                    da.iter_mut().zip(&g).for_each(|(d, g)| *d += g);
                }
                if let Some(db) = slot(&mut grads, nodes, *b) {
                    db.iter_mut().zip(&g).for_each(|(d, g)| *d += g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = slot(&mut grads, nodes, *a) {
                    da.iter_mut().zip(&g).for_each(|(d, g)| *d += g);
                }
                if let Some(db) = slot(&mut grads, nodes, *b) {
                    db.iter_mut().zip(&g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[*a].value.data, &nodes[*b].value.data);
                if let Some(da) = slot(&mut grads, nodes, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                }
                if let Some(db) = slot(&mut grads, nodes, *b) {
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (&nodes[*a].value.data, &nodes[*b].value.data);
                if let Some(da) = slot(&mut grads, nodes, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i] / bv[i];
                    }
                }
                if let Some(db) = slot(&mut grads, nodes, *b) {
                    for i in 0..g.len() {
                        db[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                }
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let is_max = matches!(node.op, Op::Maximum(..));
                let (av, bv) = (&nodes[*a].value.data, &nodes[*b].value.data);
                let pick_a: Vec<bool> = av
                    .iter()
                    .zip(bv)
                    .map(|(x, y)| if is_max { x >= y } else { x <= y })
                    .collect();
                if let Some(da) = slot(&mut grads, nodes, *a) {
                    for i in 0..g.len() {
                        if pick_a[i] {
                            da[i] += g[i];
                        }
                    }
                }
                if let Some(db) = slot(&mut grads, nodes, *b) {
                    for i in 0..g.len() {
                        if !pick_a[i] {
                            db[i] += g[i];
                        }
                    }
                }
            }
            Op::AddRow(x, b) => {
                let c = node.value.cols();
                if let Some(dx) = slot(&mut grads, nodes, *x) {
                    dx.iter_mut().zip(&g).for_each(|(d, g)| *d += g);
                }
                if let Some(db) = slot(&mut grads, nodes, *b) {
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::MulRow(x, s) => {
                let c = node.value.cols();
                let (xv, sv) = (&nodes[*x].value.data, &nodes[*s].value.data);
                if let Some(dx) = slot(&mut grads, nodes, *x) {
                    for (i, d) in dx.iter_mut().enumerate() {
                        *d += g[i] * sv[i % c];
                    }
                }
                if let Some(ds) = slot(&mut grads, nodes, *s) {
                    for (i, gi) in g.iter().enumerate() {
                        ds[i % c] += gi * xv[i];
                    }
                }
            }
            Op::Scale(a, k) => {
                if let Some(da) = slot(&mut grads, nodes, *a) {
                    da.iter_mut().zip(&g).for_each(|(d, g)| *d += k * g);
                }
            }
            Op::AddScalar(a) => {
                if let Some(da) = slot(&mut grads, nodes, *a) {
                    da.iter_mut().zip(&g).for_each(|(d, g)| *d += g);
                }
            }
            Op::ScaleBy(a, s) => {
                let k = nodes[*s].value.data[0];
                let av = &nodes[*a].value.data;
                if let Some(da) = slot(&mut grads, nodes, *a) {
                    da.iter_mut().zip(&g).for_each(|(d, g)| *d += k * g);
                }
                if let Some(ds) = slot(&mut grads, nodes, *s) {
                    ds[0] += dot(&g, av);
                }
            }
            Op::Exp(a) => {
                if let Some(da) = slot(&mut grads, nodes, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * out[i];
                    }
                }
            }
            Op::Log(a) => {
                let av = &nodes[*a].value.data;
                if let Some(da) = slot(&mut grads, nodes, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i] / av[i];
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(da) = slot(&mut grads, nodes, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * out[i] * (1.0 - out[i]);
                    }
                }
            }
            Op::LogSigmoid(a) => {
                let av = &nodes[*a].value.data;
                if let Some(da) = slot(&mut grads, nodes, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * sigmoid(-av[i]);
                    }
                }
            }
            Op::Relu(a) => {
                let av = &nodes[*a].value.data;
                if let Some(da) = slot(&mut grads, nodes, *a) {
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            da[i] += g[i];
                        }
                    }
                }
            }
            Op::Abs(a) => {
                let av = &nodes[*a].value.data;
                if let Some(da) = slot(&mut grads, nodes, *a) {
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            da[i] += g[i];
                        } else if av[i] < 0.0 {
                            da[i] -= g[i];
                        }
                    }
                }
            }
            Op::Powf(a, p) => {
                let av = &nodes[*a].value.data;
                if let Some(da) = slot(&mut grads, nodes, *a) {
                    for i in 0..g.len() {
                        if *p == 0.0 {
                            continue;
                        }
                        let d = if av[i] == 0.0 && *p < 1.0 {
                            0.0
                        } else {
                            p * av[i].powf(p - 1.0)
                        };
                        da[i] += g[i] * d;
                    }
                }
            }
            Op::Softmax(x) => {
                let c = node.value.cols();
                if let Some(dx) = slot(&mut grads, nodes, *x) {
                    for (r, (yrow, grow)) in out.chunks(c).zip(g.chunks(c)).enumerate() {
                        let s = dot(yrow, grow);
                        let drow = &mut dx[r * c..(r + 1) * c];
                        for j in 0..c {
                            drow[j] += yrow[j] * (grow[j] - s);
                        }
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                let c = node.value.cols();
                if let Some(dx) = slot(&mut grads, nodes, *x) {
                    let cf = c as f64;
                    for (r, (yrow, grow)) in out.chunks(c).zip(g.chunks(c)).enumerate() {
                        let gm = grow.iter().sum::<f64>() / cf;
                        let gy = dot(grow, yrow) / cf;
                        let drow = &mut dx[r * c..(r + 1) * c];
                        for j in 0..c {
                            drow[j] += rstd[r] * (grow[j] - gm - yrow[j] * gy);
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let c = node.value.cols();
                if let Some(dx) = slot(&mut grads, nodes, *x) {
                    for (r, (yrow, grow)) in out.chunks(c).zip(g.chunks(c)).enumerate() {
                        let gy = dot(grow, yrow);
                        let drow = &mut dx[r * c..(r + 1) * c];
                        for j in 0..c {
                            drow[j] += (grow[j] - yrow[j] * gy) / norms[r];
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = as_matrix(&nodes[*a].value.shape).unwrap();
                if let Some(da) = slot(&mut grads, nodes, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(da) = slot(&mut grads, nodes, *a) {
                    da.iter_mut().zip(&g).for_each(|(d, g)| *d += g);
                }
            }
            Op::GatherRows { x, idx } => {
                let c = node.value.cols();
                if let Some(dx) = slot(&mut grads, nodes, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        let drow = &mut dx[i * c..(i + 1) * c];
                        drow.iter_mut().zip(&g[r * c..(r + 1) * c]).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::NarrowRows { x, start } => {
                let c = node.value.cols();
                if let Some(dx) = slot(&mut grads, nodes, *x) {
                    dx[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(d, g)| *d += g);
                }
            }
            Op::NarrowCols { x, start } => {
                let len = node.value.cols();
                let c = nodes[*x].value.cols();
                if let Some(dx) = slot(&mut grads, nodes, *x) {
                    for (r, grow) in g.chunks(len).enumerate() {
                        let base = r * c + start;
                        dx[base..base + len]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p].value.data.len();
                    if let Some(dp) = slot(&mut grads, nodes, p) {
                        dp.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(d, g)| *d += g);
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut col = 0;
                for &p in parts {
                    let w = nodes[p].value.cols();
                    if let Some(dp) = slot(&mut grads, nodes, p) {
                        for r in 0..rows {
                            let src = &g[r * total + col..r * total + col + w];
                            dp[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, g)| *d += g);
                        }
                    }
                    col += w;
                }
            }
            Op::Sum(a) => {
                if let Some(da) = slot(&mut grads, nodes, *a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = nodes[*a].value.data.len() as f64;
                if let Some(da) = slot(&mut grads, nodes, *a) {
                    da.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::SumLastDim(a) => {
                let c = nodes[*a].value.cols().max(1);
                if let Some(da) = slot(&mut grads, nodes, *a) {
                    for (i, d) in da.iter_mut().enumerate() {
                        *d += g[i / c];
                    }
                }
            }
        }
    }
    leaves
}

impl Graph {
    /// Convenience for `concat_rows` on an owned list.
    pub fn concat_rows<'g>(&'g self, parts: &[Tensor<'g>]) -> Result<Tensor<'g>> {
        Tensor::concat_rows(parts)
    }
}
