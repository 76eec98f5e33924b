use super::{NumericsError, Real, Tensor};

/// Handle to a node on the computation graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Padding mode for 1-d convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output length = ceil(input / stride); zeros split left/right.
    Same,
    /// No padding; input must cover at least one kernel window.
    Valid,
}

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale { x: usize, factor: f64 },
    MulScalar { x: usize, s: usize },
    AddRowBroadcast { x: usize, row: usize },
    AddColBroadcast { x: usize, col: usize },
    MulColBroadcast { x: usize, col: usize },
    MatMul { a: usize, b: usize },
    Transpose { x: usize },
    Linear { x: usize, w: usize, b: usize },
    Conv1d { x: usize, w: usize, b: usize, stride: usize, dilation: usize, pad_left: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize },
    Gelu { x: usize },
    SoftmaxRows { x: usize },
    Embedding { table: usize, indices: Vec<usize> },
    TemporalInterp { x: usize, pos: Vec<f64> },
    SliceCols { x: usize, start: usize },
    SliceRows { x: usize, start: usize },
    ConcatRows { xs: Vec<usize> },
    ConcatCols { xs: Vec<usize> },
    SumAll { x: usize },
    MeanAll { x: usize },
    RotCoeffSin { x: usize },
    RotCoeffVers { x: usize },
    Reshape { x: usize },
}

struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    /// Per-op saved values for backward (layer_norm keeps mean/rstd per row).
    aux: Vec<T>,
    op: Op,
}

/// Reverse-mode computation graph. Operations record onto the graph as they
/// run; `backward` replays them in reverse and accumulates gradients for
/// every node, leaving exact zeros on nodes with no path to the output.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Vec<T>>,
    grads_valid: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), grads_valid: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, aux: Vec<T>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, aux, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Vec::new(), Op::Leaf)
    }

    pub fn leaf_owned(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Vec::new(), Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn shape_of(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("node shape is consistent")
    }

    /// Gradient of the last `backward` output with respect to `v`.
    pub fn grad(&self, v: Var) -> &[T] {
        assert!(self.grads_valid, "grad() requires a prior backward() call");
        &self.grads[v.0]
    }

    fn dims2(&self, v: Var, layer: &'static str) -> Result<(usize, usize), NumericsError> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(NumericsError::shape(layer, format!("expected 2-d tensor, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    // ── elementwise and broadcast ────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape_binary(a, b, "add")?;
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x + y);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, Vec::new(), Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape_binary(a, b, "sub")?;
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x - y);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, Vec::new(), Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape_binary(a, b, "mul")?;
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x * y);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, Vec::new(), Op::Mul(a.0, b.0)))
    }

    fn same_shape_binary(&self, a: Var, b: Var, layer: &'static str) -> Result<(), NumericsError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(NumericsError::shape(
                layer,
                format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            ));
        }
        Ok(())
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::from_f64(factor);
        let data = self.nodes[x.0].data.iter().map(|&v| v * f).collect();
        self.push(self.nodes[x.0].shape.clone(), data, Vec::new(), Op::Scale { x: x.0, factor })
    }

    /// `y = s * x` where `s` is a scalar node (shape `[1]`).
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var, NumericsError> {
        if self.nodes[s.0].data.len() != 1 {
            return Err(NumericsError::shape(
                "mul_scalar",
                format!("scalar operand has shape {:?}", self.nodes[s.0].shape),
            ));
        }
        let sv = self.nodes[s.0].data[0];
        let data = self.nodes[x.0].data.iter().map(|&v| v * sv).collect();
        Ok(self.push(self.nodes[x.0].shape.clone(), data, Vec::new(), Op::MulScalar { x: x.0, s: s.0 }))
    }

    pub fn add_row_broadcast(&mut self, x: Var, row: Var) -> Result<Var, NumericsError> {
        let (m, n) = self.dims2(x, "add_row_broadcast")?;
        if self.nodes[row.0].data.len() != n {
            return Err(NumericsError::shape(
                "add_row_broadcast",
                format!("row has {} elements, matrix has {} columns", self.nodes[row.0].data.len(), n),
            ));
        }
        let mut data = self.nodes[x.0].data.clone();
        for i in 0..m {
            for (d, r) in data[i * n..(i + 1) * n].iter_mut().zip(&self.nodes[row.0].data) {
                *d += *r;
            }
        }
        Ok(self.push(vec![m, n], data, Vec::new(), Op::AddRowBroadcast { x: x.0, row: row.0 }))
    }

    pub fn add_col_broadcast(&mut self, x: Var, col: Var) -> Result<Var, NumericsError> {
        let (m, n) = self.dims2(x, "add_col_broadcast")?;
        if self.nodes[col.0].data.len() != m {
            return Err(NumericsError::shape(
                "add_col_broadcast",
                format!("column has {} elements, matrix has {} rows", self.nodes[col.0].data.len(), m),
            ));
        }
        let mut data = self.nodes[x.0].data.clone();
        for i in 0..m {
            let c = self.nodes[col.0].data[i];
            for d in data[i * n..(i + 1) * n].iter_mut() {
                *d += c;
            }
        }
        Ok(self.push(vec![m, n], data, Vec::new(), Op::AddColBroadcast { x: x.0, col: col.0 }))
    }

    pub fn mul_col_broadcast(&mut self, x: Var, col: Var) -> Result<Var, NumericsError> {
        let (m, n) = self.dims2(x, "mul_col_broadcast")?;
        if self.nodes[col.0].data.len() != m {
            return Err(NumericsError::shape(
                "mul_col_broadcast",
                format!("column has {} elements, matrix has {} rows", self.nodes[col.0].data.len(), m),
            ));
        }
        let mut data = self.nodes[x.0].data.clone();
        for i in 0..m {
            let c = self.nodes[col.0].data[i];
            for d in data[i * n..(i + 1) * n].iter_mut() {
                *d *= c;
            }
        }
        Ok(self.push(vec![m, n], data, Vec::new(), Op::MulColBroadcast { x: x.0, col: col.0 }))
    }

    // ── linear algebra ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(NumericsError::shape("matmul", format!("[{m},{ka}] x [{kb},{n}]")));
        }
        let mut out = vec![T::ZERO; m * n];
        matmul_acc(&self.nodes[a.0].data, &self.nodes[b.0].data, &mut out, m, ka, n);
        Ok(self.push(vec![m, n], out, Vec::new(), Op::MatMul { a: a.0, b: b.0 }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (m, n) = self.dims2(x, "transpose")?;
        let src = &self.nodes[x.0].data;
        let mut out = vec![T::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(vec![n, m], out, Vec::new(), Op::Transpose { x: x.0 }))
    }

    /// `y = x * w^T + b` with `x: [m,k]`, `w: [n,k]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.dims2(x, "linear")?;
        let (n, kw) = self.dims2(w, "linear")?;
        if kw != k || self.nodes[b.0].data.len() != n {
            return Err(NumericsError::shape(
                "linear",
                format!(
                    "input [{m},{k}], weight [{n},{kw}], bias [{}]",
                    self.nodes[b.0].data.len()
                ),
            ));
        }
        let xd = &self.nodes[x.0].data;
        let wd = &self.nodes[w.0].data;
        let bd = &self.nodes[b.0].data;
        let wt = transpose_buf(wd, n, k);
        let mut out = vec![T::ZERO; m * n];
        for i in 0..m {
            out[i * n..(i + 1) * n].copy_from_slice(bd);
        }
        matmul_acc(xd, &wt, &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Vec::new(), Op::Linear { x: x.0, w: w.0, b: b.0 }))
    }

    /// 1-d convolution over `x: [c_in, t]` with `w: [c_out, c_in, k]`,
    /// `b: [c_out]`, supporting stride, dilation and same/valid padding.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        dilation: usize,
        padding: Padding,
    ) -> Result<Var, NumericsError> {
        let (cin, t) = self.dims2(x, "conv1d")?;
        let ws = self.nodes[w.0].shape.clone();
        if ws.len() != 3 || ws[1] != cin {
            return Err(NumericsError::shape(
                "conv1d",
                format!("weight {ws:?} does not match input [{cin},{t}]"),
            ));
        }
        let (cout, k) = (ws[0], ws[2]);
        if self.nodes[b.0].data.len() != cout {
            return Err(NumericsError::shape(
                "conv1d",
                format!("bias [{}] vs {cout} output channels", self.nodes[b.0].data.len()),
            ));
        }
        if stride == 0 || dilation == 0 {
            return Err(NumericsError::shape("conv1d", "stride and dilation must be positive"));
        }
        let span = (k - 1) * dilation + 1;
        let (tout, pad_left) = match padding {
            Padding::Valid => {
                if t < span {
                    return Err(NumericsError::shape(
                        "conv1d",
                        format!("input length {t} shorter than kernel span {span}"),
                    ));
                }
                ((t - span) / stride + 1, 0)
            }
            Padding::Same => {
                let tout = t.div_ceil(stride);
                let pad_total = ((tout - 1) * stride + span).saturating_sub(t);
                (tout, pad_total / 2)
            }
        };
        let xd = &self.nodes[x.0].data;
        let wd = &self.nodes[w.0].data;
        let bd = &self.nodes[b.0].data;
        // im2col: the convolution becomes one gemm over [cin*k, tout].
        let col = im2col(xd, cin, t, k, tout, stride, dilation, pad_left);
        let mut out = vec![T::ZERO; cout * tout];
        for co in 0..cout {
            out[co * tout..(co + 1) * tout].iter_mut().for_each(|v| *v = bd[co]);
        }
        matmul_acc(wd, &col, &mut out, cout, cin * k, tout);
        Ok(self.push(
            vec![cout, tout],
            out,
            Vec::new(),
            Op::Conv1d { x: x.0, w: w.0, b: b.0, stride, dilation, pad_left },
        ))
    }

    // ── normalization and activations ────────────────────────────────────

    /// Row-wise layer norm with affine parameters, eps = 1e-5.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NumericsError> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        if self.nodes[gamma.0].data.len() != n || self.nodes[beta.0].data.len() != n {
            return Err(NumericsError::shape(
                "layer_norm",
                format!(
                    "gamma [{}] / beta [{}] vs {n} columns",
                    self.nodes[gamma.0].data.len(),
                    self.nodes[beta.0].data.len()
                ),
            ));
        }
        let xd = &self.nodes[x.0].data;
        let gd = &self.nodes[gamma.0].data;
        let bd = &self.nodes[beta.0].data;
        let inv_n = T::from_f64(1.0 / n as f64);
        let eps = T::from_f64(LAYER_NORM_EPS);
        let mut out = vec![T::ZERO; m * n];
        let mut aux = Vec::with_capacity(2 * m);
        for i in 0..m {
            let xr = &xd[i * n..(i + 1) * n];
            let mut mu = T::ZERO;
            for &v in xr {
                mu += v;
            }
            mu *= inv_n;
            let mut var = T::ZERO;
            for &v in xr {
                let d = v - mu;
                var += d * d;
            }
            var *= inv_n;
            let rstd = T::ONE / (var + eps).sqrt();
            for j in 0..n {
                out[i * n + j] = (xr[j] - mu) * rstd * gd[j] + bd[j];
            }
            aux.push(mu);
            aux.push(rstd);
        }
        Ok(self.push(vec![m, n], out, aux, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0 }))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::from_f64(GELU_C);
        let a = T::from_f64(GELU_A);
        let half = T::from_f64(0.5);
        let data = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| {
                let u = c * (v + a * v * v * v);
                half * v * (T::ONE + u.tanh())
            })
            .collect();
        self.push(self.nodes[x.0].shape.clone(), data, Vec::new(), Op::Gelu { x: x.0 })
    }

    /// Numerically stable row-wise softmax.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (m, n) = self.dims2(x, "softmax")?;
        let xd = &self.nodes[x.0].data;
        let mut out = vec![T::ZERO; m * n];
        for i in 0..m {
            let xr = &xd[i * n..(i + 1) * n];
            let mut mx = xr[0];
            for &v in xr {
                mx = mx.maximum(v);
            }
            let mut sum = T::ZERO;
            for j in 0..n {
                let e = (xr[j] - mx).exp();
                out[i * n + j] = e;
                sum += e;
            }
            let inv = T::ONE / sum;
            for v in out[i * n..(i + 1) * n].iter_mut() {
                *v *= inv;
            }
        }
        Ok(self.push(vec![m, n], out, Vec::new(), Op::SoftmaxRows { x: x.0 }))
    }

    // ── lookup and resampling ────────────────────────────────────────────

    /// Gather rows of `table: [v, d]` at `indices` -> `[len(indices), d]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var, NumericsError> {
        let (v, d) = self.dims2(table, "embedding")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(NumericsError::shape(
                "embedding",
                format!("index {bad} out of range for table with {v} rows"),
            ));
        }
        let td = &self.nodes[table.0].data;
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            vec![indices.len(), d],
            out,
            Vec::new(),
            Op::Embedding { table: table.0, indices: indices.to_vec() },
        ))
    }

    /// Piecewise-linear temporal resampling of `x: [t_in, d]` at fixed
    /// fractional input positions (one per output frame).
    pub fn temporal_interp(&mut self, x: Var, pos: &[f64]) -> Result<Var, NumericsError> {
        let (tin, d) = self.dims2(x, "temporal_interp")?;
        if pos.is_empty() || tin == 0 {
            return Err(NumericsError::shape("temporal_interp", "empty input or position list"));
        }
        let xd = &self.nodes[x.0].data;
        let mut out = vec![T::ZERO; pos.len() * d];
        for (j, &p) in pos.iter().enumerate() {
            let (i0, i1, f) = interp_anchor(p, tin);
            let w1 = T::from_f64(f);
            let w0 = T::from_f64(1.0 - f);
            let r0 = &xd[i0 * d..(i0 + 1) * d];
            let r1 = &xd[i1 * d..(i1 + 1) * d];
            for c in 0..d {
                out[j * d + c] = w0 * r0[c] + w1 * r1[c];
            }
        }
        Ok(self.push(
            vec![pos.len(), d],
            out,
            Vec::new(),
            Op::TemporalInterp { x: x.0, pos: pos.to_vec() },
        ))
    }

    // ── shape plumbing ───────────────────────────────────────────────────

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if start + len > n {
            return Err(NumericsError::shape(
                "slice_cols",
                format!("slice {start}..{} out of {n} columns", start + len),
            ));
        }
        let xd = &self.nodes[x.0].data;
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xd[i * n + start..i * n + start + len]);
        }
        Ok(self.push(vec![m, len], out, Vec::new(), Op::SliceCols { x: x.0, start }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let (m, n) = self.dims2(x, "slice_rows")?;
        if start + len > m {
            return Err(NumericsError::shape(
                "slice_rows",
                format!("slice {start}..{} out of {m} rows", start + len),
            ));
        }
        let out = self.nodes[x.0].data[start * n..(start + len) * n].to_vec();
        Ok(self.push(vec![len, n], out, Vec::new(), Op::SliceRows { x: x.0, start }))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var, NumericsError> {
        if xs.is_empty() {
            return Err(NumericsError::shape("concat_rows", "no operands"));
        }
        let (_, n) = self.dims2(xs[0], "concat_rows")?;
        let mut total = 0;
        for &v in xs {
            let (m, nv) = self.dims2(v, "concat_rows")?;
            if nv != n {
                return Err(NumericsError::shape("concat_rows", format!("{nv} vs {n} columns")));
            }
            total += m;
        }
        let mut out = Vec::with_capacity(total * n);
        for &v in xs {
            out.extend_from_slice(&self.nodes[v.0].data);
        }
        Ok(self.push(vec![total, n], out, Vec::new(), Op::ConcatRows { xs: xs.iter().map(|v| v.0).collect() }))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var, NumericsError> {
        if xs.is_empty() {
            return Err(NumericsError::shape("concat_cols", "no operands"));
        }
        let (m, _) = self.dims2(xs[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(xs.len());
        let mut total = 0;
        for &v in xs {
            let (mv, nv) = self.dims2(v, "concat_cols")?;
            if mv != m {
                return Err(NumericsError::shape("concat_cols", format!("{mv} vs {m} rows")));
            }
            widths.push(nv);
            total += nv;
        }
        let mut out = vec![T::ZERO; m * total];
        let mut offset = 0;
        for (&v, &nv) in xs.iter().zip(&widths) {
            let src = &self.nodes[v.0].data;
            for i in 0..m {
                out[i * total + offset..i * total + offset + nv]
                    .copy_from_slice(&src[i * nv..(i + 1) * nv]);
            }
            offset += nv;
        }
        Ok(self.push(vec![m, total], out, Vec::new(), Op::ConcatCols { xs: xs.iter().map(|v| v.0).collect() }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, NumericsError> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].data.len() {
            return Err(NumericsError::shape(
                "reshape",
                format!("cannot view {} elements as {shape:?}", self.nodes[x.0].data.len()),
            ));
        }
        let data = self.nodes[x.0].data.clone();
        Ok(self.push(shape, data, Vec::new(), Op::Reshape { x: x.0 }))
    }

    // ── reductions ───────────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut s = T::ZERO;
        for &v in &self.nodes[x.0].data {
            s += v;
        }
        self.push(vec![1], vec![s], Vec::new(), Op::SumAll { x: x.0 })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].data.len();
        let mut s = T::ZERO;
        for &v in &self.nodes[x.0].data {
            s += v;
        }
        let mean = s * T::from_f64(1.0 / n as f64);
        self.push(vec![1], vec![mean], Vec::new(), Op::MeanAll { x: x.0 })
    }

    // ── rotation coefficients (smooth in u = theta^2) ────────────────────

    /// `sin(sqrt(u))/sqrt(u)`, series-expanded near zero so the zero-pose
    /// case stays differentiable.
    pub fn rot_coeff_sin(&mut self, u: Var) -> Var {
        let data = self.nodes[u.0].data.iter().map(|&v| rot_sin_val(v)).collect();
        self.push(self.nodes[u.0].shape.clone(), data, Vec::new(), Op::RotCoeffSin { x: u.0 })
    }

    /// `(1 - cos(sqrt(u)))/u`, series-expanded near zero.
    pub fn rot_coeff_vers(&mut self, u: Var) -> Var {
        let data = self.nodes[u.0].data.iter().map(|&v| rot_vers_val(v)).collect();
        self.push(self.nodes[u.0].shape.clone(), data, Vec::new(), Op::RotCoeffVers { x: u.0 })
    }

    // ── composites ───────────────────────────────────────────────────────

    /// Mean squared error between two same-shape nodes.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    /// Multi-head softmax self-attention over `x: [t, d]`.
    ///
    /// Weights follow the `linear` convention (`w*: [d, d]`, `b*: [d]`).
    #[allow(clippy::too_many_arguments)]
    pub fn self_attention(
        &mut self,
        x: Var,
        wq: Var,
        bq: Var,
        wk: Var,
        bk: Var,
        wv: Var,
        bv: Var,
        wo: Var,
        bo: Var,
        heads: usize,
    ) -> Result<Var, NumericsError> {
        let (_t, d) = self.dims2(x, "self_attention")?;
        if heads == 0 || d % heads != 0 {
            return Err(NumericsError::shape(
                "self_attention",
                format!("model dim {d} not divisible by {heads} heads"),
            ));
        }
        let dh = d / heads;
        let q = self.linear(x, wq, bq)?;
        let k = self.linear(x, wk, bk)?;
        let v = self.linear(x, wv, bv)?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.slice_cols(q, h * dh, dh)?;
            let kh = self.slice_cols(k, h * dh, dh)?;
            let vh = self.slice_cols(v, h * dh, dh)?;
            let kt = self.transpose(kh)?;
            let scores = self.matmul(qh, kt)?;
            let scaled = self.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = self.softmax_rows(scaled)?;
            outs.push(self.matmul(attn, vh)?);
        }
        let cat = self.concat_cols(&outs)?;
        self.linear(cat, wo, bo)
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar output. Populates gradients for
    /// every node; nodes with no path to `out` keep exactly zero.
    pub fn backward(&mut self, out: Var) -> Result<(), NumericsError> {
        if self.nodes[out.0].data.len() != 1 {
            return Err(NumericsError::NonScalarOutput(self.nodes[out.0].shape.clone()));
        }
        self.grads.clear();
        self.grads.extend(self.nodes.iter().map(|n| vec![T::ZERO; n.data.len()]));
        self.grads[out.0][0] = T::ONE;
        for i in (0..=out.0).rev() {
            let go = std::mem::take(&mut self.grads[i]);
            self.backprop_node(i, &go);
            self.grads[i] = go;
        }
        self.grads_valid = true;
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, go: &[T]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                axpy(&mut self.grads[a], go, T::ONE);
                axpy(&mut self.grads[b], go, T::ONE);
            }
            Op::Sub(a, b) => {
                axpy(&mut self.grads[a], go, T::ONE);
                axpy(&mut self.grads[b], go, -T::ONE);
            }
            Op::Mul(a, b) => {
                for (j, &g) in go.iter().enumerate() {
                    self.grads[a][j] += g * self.nodes[b].data[j];
                }
                for (j, &g) in go.iter().enumerate() {
                    self.grads[b][j] += g * self.nodes[a].data[j];
                }
            }
            Op::Scale { x, factor } => {
                axpy(&mut self.grads[x], go, T::from_f64(factor));
            }
            Op::MulScalar { x, s } => {
                let sv = self.nodes[s].data[0];
                axpy(&mut self.grads[x], go, sv);
                let mut acc = T::ZERO;
                for (j, &g) in go.iter().enumerate() {
                    acc += g * self.nodes[x].data[j];
                }
                self.grads[s][0] += acc;
            }
            Op::AddRowBroadcast { x, row } => {
                axpy(&mut self.grads[x], go, T::ONE);
                let n = self.grads[row].len();
                for (j, &g) in go.iter().enumerate() {
                    self.grads[row][j % n] += g;
                }
            }
            Op::AddColBroadcast { x, col } => {
                axpy(&mut self.grads[x], go, T::ONE);
                let n = go.len() / self.grads[col].len();
                for (j, &g) in go.iter().enumerate() {
                    self.grads[col][j / n] += g;
                }
            }
            Op::MulColBroadcast { x, col } => {
                let m = self.grads[col].len();
                let n = go.len() / m;
                for r in 0..m {
                    let c = self.nodes[col].data[r];
                    let mut acc = T::ZERO;
                    for j in 0..n {
                        let g = go[r * n + j];
                        self.grads[x][r * n + j] += g * c;
                        acc += g * self.nodes[x].data[r * n + j];
                    }
                    self.grads[col][r] += acc;
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = self.nodes[b].shape[1];
                // da += go * b^T
                {
                    let (bd, ga) = (&self.nodes[b].data, &mut self.grads[a]);
                    for i2 in 0..m {
                        for p in 0..k {
                            ga[i2 * k + p] += dot(&go[i2 * n..(i2 + 1) * n], &bd[p * n..(p + 1) * n]);
                        }
                    }
                }
                // db += a^T * go
                {
                    let (ad, gb) = (&self.nodes[a].data, &mut self.grads[b]);
                    for i2 in 0..m {
                        let gr = &go[i2 * n..(i2 + 1) * n];
                        for p in 0..k {
                            let av = ad[i2 * k + p];
                            if av != T::ZERO {
                                axpy(&mut gb[p * n..(p + 1) * n], gr, av);
                            }
                        }
                    }
                }
            }
            Op::Transpose { x } => {
                let (n, m) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                for j in 0..n {
                    for r in 0..m {
                        self.grads[x][r * n + j] += go[j * m + r];
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (m, k) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
                let n = self.nodes[w].shape[0];
                // dx += go * w
                matmul_acc(go, &self.nodes[w].data, &mut self.grads[x], m, n, k);
                // dw += go^T * x
                let got = transpose_buf(go, m, n);
                matmul_acc(&got, &self.nodes[x].data, &mut self.grads[w], n, m, k);
                for i2 in 0..m {
                    for j in 0..n {
                        self.grads[b][j] += go[i2 * n + j];
                    }
                }
            }
            Op::Conv1d { x, w, b, stride, dilation, pad_left } => {
                let (cin, t) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
                let (cout, k) = (self.nodes[w].shape[0], self.nodes[w].shape[2]);
                let tout = self.nodes[i].shape[1];
                for co in 0..cout {
                    let mut acc = T::ZERO;
                    for &g in &go[co * tout..(co + 1) * tout] {
                        acc += g;
                    }
                    self.grads[b][co] += acc;
                }
                let col = im2col(&self.nodes[x].data, cin, t, k, tout, stride, dilation, pad_left);
                // dw += go * col^T: dot of contiguous rows.
                {
                    let gw = &mut self.grads[w];
                    for co in 0..cout {
                        let gor = &go[co * tout..(co + 1) * tout];
                        for key in 0..cin * k {
                            gw[co * cin * k + key] += dot(gor, &col[key * tout..(key + 1) * tout]);
                        }
                    }
                }
                // dcol = w^T * go, then scattered back to dx (col2im).
                let mut dcol = vec![T::ZERO; cin * k * tout];
                let wt = transpose_buf(&self.nodes[w].data, cout, cin * k);
                matmul_acc(&wt, go, &mut dcol, cin * k, cout, tout);
                let gx = &mut self.grads[x];
                for ci in 0..cin {
                    for kk in 0..k {
                        let off = (kk * dilation) as isize - pad_left as isize;
                        let drow = &dcol[(ci * k + kk) * tout..(ci * k + kk + 1) * tout];
                        for (ti, &g) in drow.iter().enumerate() {
                            let xi = (ti * stride) as isize + off;
                            if xi >= 0 && (xi as usize) < t {
                                gx[ci * t + xi as usize] += g;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (m, n) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
                let inv_n = T::from_f64(1.0 / n as f64);
                for r in 0..m {
                    let mu = self.nodes[i].aux[2 * r];
                    let rstd = self.nodes[i].aux[2 * r + 1];
                    let gor = &go[r * n..(r + 1) * n];
                    let mut m1 = T::ZERO;
                    let mut m2 = T::ZERO;
                    for j in 0..n {
                        let xhat = (self.nodes[x].data[r * n + j] - mu) * rstd;
                        let dxhat = gor[j] * self.nodes[gamma].data[j];
                        m1 += dxhat;
                        m2 += dxhat * xhat;
                        self.grads[gamma][j] += gor[j] * xhat;
                        self.grads[beta][j] += gor[j];
                    }
                    m1 *= inv_n;
                    m2 *= inv_n;
                    for j in 0..n {
                        let xhat = (self.nodes[x].data[r * n + j] - mu) * rstd;
                        let dxhat = gor[j] * self.nodes[gamma].data[j];
                        self.grads[x][r * n + j] += rstd * (dxhat - m1 - xhat * m2);
                    }
                }
            }
            Op::Gelu { x } => {
                let c = T::from_f64(GELU_C);
                let a = T::from_f64(GELU_A);
                let half = T::from_f64(0.5);
                let three = T::from_f64(3.0);
                for (j, &g) in go.iter().enumerate() {
                    let v = self.nodes[x].data[j];
                    let u = c * (v + a * v * v * v);
                    let th = u.tanh();
                    let du = c * (T::ONE + three * a * v * v);
                    let dy = half * (T::ONE + th) + half * v * (T::ONE - th * th) * du;
                    self.grads[x][j] += g * dy;
                }
            }
            Op::SoftmaxRows { x } => {
                let (m, n) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                for r in 0..m {
                    let yr = &self.nodes[i].data[r * n..(r + 1) * n];
                    let gor = &go[r * n..(r + 1) * n];
                    let s = dot(gor, yr);
                    for j in 0..n {
                        self.grads[x][r * n + j] += yr[j] * (gor[j] - s);
                    }
                }
            }
            Op::Embedding { table, indices } => {
                let d = self.nodes[i].shape[1];
                for (r, &idx) in indices.iter().enumerate() {
                    axpy(
                        &mut self.grads[table][idx * d..(idx + 1) * d],
                        &go[r * d..(r + 1) * d],
                        T::ONE,
                    );
                }
            }
            Op::TemporalInterp { x, pos } => {
                let tin = self.nodes[x].shape[0];
                let d = self.nodes[x].shape[1];
                for (j, &p) in pos.iter().enumerate() {
                    let (i0, i1, f) = interp_anchor(p, tin);
                    let gr = &go[j * d..(j + 1) * d];
                    axpy(&mut self.grads[x][i0 * d..(i0 + 1) * d], gr, T::from_f64(1.0 - f));
                    axpy(&mut self.grads[x][i1 * d..(i1 + 1) * d], gr, T::from_f64(f));
                }
            }
            Op::SliceCols { x, start } => {
                let n = self.nodes[x].shape[1];
                let (m, len) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                for r in 0..m {
                    axpy(
                        &mut self.grads[x][r * n + start..r * n + start + len],
                        &go[r * len..(r + 1) * len],
                        T::ONE,
                    );
                }
            }
            Op::SliceRows { x, start } => {
                let n = self.nodes[x].shape[1];
                let len = self.nodes[i].shape[0];
                axpy(&mut self.grads[x][start * n..(start + len) * n], go, T::ONE);
            }
            Op::ConcatRows { xs } => {
                let mut offset = 0;
                for v in xs {
                    let sz = self.grads[v].len();
                    axpy(&mut self.grads[v], &go[offset..offset + sz], T::ONE);
                    offset += sz;
                }
            }
            Op::ConcatCols { xs } => {
                let m = self.nodes[i].shape[0];
                let total = self.nodes[i].shape[1];
                let mut offset = 0;
                for v in xs {
                    let nv = self.nodes[v].shape[1];
                    for r in 0..m {
                        axpy(
                            &mut self.grads[v][r * nv..(r + 1) * nv],
                            &go[r * total + offset..r * total + offset + nv],
                            T::ONE,
                        );
                    }
                    offset += nv;
                }
            }
            Op::SumAll { x } => {
                let g = go[0];
                for gv in self.grads[x].iter_mut() {
                    *gv += g;
                }
            }
            Op::MeanAll { x } => {
                let g = go[0] * T::from_f64(1.0 / self.nodes[x].data.len() as f64);
                for gv in self.grads[x].iter_mut() {
                    *gv += g;
                }
            }
            Op::RotCoeffSin { x } => {
                for (j, &g) in go.iter().enumerate() {
                    self.grads[x][j] += g * rot_sin_deriv(self.nodes[x].data[j]);
                }
            }
            Op::RotCoeffVers { x } => {
                for (j, &g) in go.iter().enumerate() {
                    self.grads[x][j] += g * rot_vers_deriv(self.nodes[x].data[j]);
                }
            }
            Op::Reshape { x } => {
                axpy(&mut self.grads[x], go, T::ONE);
            }
        }
    }
}

/// Output positions (in input-frame units) for endpoint-preserving linear
/// resampling of `t_in` frames to `t_out`. Exact identity when rates match.
pub fn interp_positions(t_in: usize, t_out: usize) -> Vec<f64> {
    if t_out <= 1 || t_in <= 1 {
        return vec![0.0; t_out.max(1)];
    }
    let step = (t_in - 1) as f64 / (t_out - 1) as f64;
    (0..t_out).map(|j| j as f64 * step).collect()
}

fn interp_anchor(p: f64, t_in: usize) -> (usize, usize, f64) {
    let clamped = p.clamp(0.0, (t_in - 1) as f64);
    let i0 = (clamped.floor() as usize).min(t_in - 1);
    let i1 = (i0 + 1).min(t_in - 1);
    let f = if i1 == i0 { 0.0 } else { clamped - i0 as f64 };
    (i0, i1, f)
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::ZERO;
    for (x, y) in a.iter().zip(b) {
        s += *x * *y;
    }
    s
}

fn axpy<T: Real>(dst: &mut [T], src: &[T], factor: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s * factor;
    }
}

fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let or = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::ZERO {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for j in 0..n {
                or[j] += av * br[j];
            }
        }
    }
}

fn transpose_buf<T: Real>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = src[i * cols + j];
        }
    }
    out
}

/// Unrolled convolution patches: `col[(ci*k + kk), t] = x[ci, t*stride + kk*dilation - pad]`
/// with zeros outside the input.
fn im2col<T: Real>(
    x: &[T],
    cin: usize,
    t: usize,
    k: usize,
    tout: usize,
    stride: usize,
    dilation: usize,
    pad_left: usize,
) -> Vec<T> {
    let mut col = vec![T::ZERO; cin * k * tout];
    for ci in 0..cin {
        let xr = &x[ci * t..(ci + 1) * t];
        for kk in 0..k {
            let off = (kk * dilation) as isize - pad_left as isize;
            let crow = &mut col[(ci * k + kk) * tout..(ci * k + kk + 1) * tout];
            if stride == 1 {
                let lo = (-off).max(0) as usize;
                let hi = tout.min(((t as isize) - off).max(0) as usize);
                for ti in lo..hi {
                    crow[ti] = xr[(ti as isize + off) as usize];
                }
            } else {
                for (ti, cv) in crow.iter_mut().enumerate() {
                    let xi = (ti * stride) as isize + off;
                    if xi >= 0 && (xi as usize) < t {
                        *cv = xr[xi as usize];
                    }
                }
            }
        }
    }
    col
}

const ROT_SERIES_CUTOFF: f64 = 1e-6;

fn rot_sin_val<T: Real>(u: T) -> T {
    let uf = u.to_f64();
    if uf.abs() < ROT_SERIES_CUTOFF {
        T::from_f64(1.0 - uf / 6.0 + uf * uf / 120.0)
    } else {
        let s = uf.sqrt();
        T::from_f64(s.sin() / s)
    }
}

fn rot_sin_deriv<T: Real>(u: T) -> T {
    let uf = u.to_f64();
    if uf.abs() < ROT_SERIES_CUTOFF {
        T::from_f64(-1.0 / 6.0 + uf / 60.0 - uf * uf / 1680.0)
    } else {
        let s = uf.sqrt();
        T::from_f64((s * s.cos() - s.sin()) / (2.0 * s * s * s))
    }
}

fn rot_vers_val<T: Real>(u: T) -> T {
    let uf = u.to_f64();
    if uf.abs() < ROT_SERIES_CUTOFF {
        T::from_f64(0.5 - uf / 24.0 + uf * uf / 720.0)
    } else {
        // (1 - cos s)/u written as 2 sin^2(s/2)/u to avoid cancellation.
        let s = uf.sqrt();
        let half = (s / 2.0).sin();
        T::from_f64(2.0 * half * half / uf)
    }
}

fn rot_vers_deriv<T: Real>(u: T) -> T {
    let uf = u.to_f64();
    if uf.abs() < ROT_SERIES_CUTOFF {
        T::from_f64(-1.0 / 24.0 + uf / 360.0 - uf * uf / 13440.0)
    } else {
        let s = uf.sqrt();
        let half = (s / 2.0).sin();
        T::from_f64((s * s.sin() / 2.0 - 2.0 * half * half) / (uf * uf))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn linear_with_identity_weight_and_zero_bias_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf_owned(t2(&[&[1.0, 2.0], &[3.0, -4.0]]));
        let w = g.leaf_owned(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = g.leaf_owned(Tensor::zeros(vec![2]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0, 3.0, -4.0]);
    }

    #[test]
    fn conv1d_unit_kernel_stride_two_decimates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf_owned(Tensor::new(vec![1, 10], (0..10).map(f64::from).collect()).unwrap());
        let w = g.leaf_owned(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
        let b = g.leaf_owned(Tensor::zeros(vec![1]));
        let y = g.conv1d(x, w, b, 2, 1, Padding::Valid).unwrap();
        assert_eq!(g.shape_of(y), &[1, 5]);
        assert_eq!(g.value(y), &[0.0, 2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn conv1d_same_padding_keeps_length() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf_owned(Tensor::new(vec![1, 7], vec![1.0; 7]).unwrap());
        let w = g.leaf_owned(Tensor::new(vec![1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap());
        let b = g.leaf_owned(Tensor::zeros(vec![1]));
        for dilation in [1, 2, 4] {
            let y = g.conv1d(x, w, b, 1, dilation, Padding::Same).unwrap();
            assert_eq!(g.shape_of(y), &[1, 7], "dilation {dilation}");
        }
    }

    #[test]
    fn conv1d_shorter_than_kernel_span_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf_owned(Tensor::new(vec![1, 3], vec![1.0; 3]).unwrap());
        let w = g.leaf_owned(Tensor::new(vec![1, 1, 3], vec![1.0; 3]).unwrap());
        let b = g.leaf_owned(Tensor::zeros(vec![1]));
        let err = g.conv1d(x, w, b, 1, 2, Padding::Valid).unwrap_err();
        assert!(err.to_string().contains("conv1d"));
    }

    #[test]
    fn gelu_at_zero_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf_owned(Tensor::new(vec![1, 1], vec![0.0]).unwrap());
        let y = g.gelu(x);
        assert_eq!(g.value(y), &[0.0]);
    }

    #[test]
    fn layer_norm_of_constant_vector_is_zero_before_affine() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf_owned(Tensor::new(vec![1, 4], vec![3.7; 4]).unwrap());
        let gamma = g.leaf_owned(Tensor::full(vec![4], 1.0));
        let beta = g.leaf_owned(Tensor::zeros(vec![4]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        for &v in g.value(y) {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn square_gradient_at_three_is_six() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf_owned(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x), &[6.0]);
    }

    #[test]
    fn linear_form_gradient_is_the_fixed_vector() {
        // f(w) = sum(w . x) for fixed x -> grad = x.
        let mut g = Graph::<f64>::new();
        let w = g.leaf_owned(Tensor::new(vec![1, 3], vec![0.3, -1.0, 2.0]).unwrap());
        let x = g.leaf_owned(Tensor::new(vec![1, 3], vec![5.0, 7.0, -2.0]).unwrap());
        let prod = g.mul(w, x).unwrap();
        let s = g.sum_all(prod);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w), &[5.0, 7.0, -2.0]);
    }

    #[test]
    fn parameters_off_the_path_get_exactly_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf_owned(Tensor::scalar(2.0));
        let unused = g.leaf_owned(Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap());
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert!(g.grad(unused).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_output() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf_owned(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let y = g.add(x, x).unwrap();
        assert!(matches!(g.backward(y), Err(NumericsError::NonScalarOutput(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf_owned(t2(&[&[1.0, 2.0, 3.0], &[-5.0, 0.0, 5.0]]));
        let y = g.softmax_rows(x).unwrap();
        for i in 0..2 {
            let s: f64 = g.value(y)[i * 3..(i + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn interp_identity_when_rates_match() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf_owned(t2(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
        let pos = interp_positions(3, 3);
        let y = g.temporal_interp(x, &pos).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn interp_preserves_endpoints() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf_owned(Tensor::new(vec![10, 1], (0..10).map(f64::from).collect()).unwrap());
        let pos = interp_positions(10, 6);
        let y = g.temporal_interp(x, &pos).unwrap();
        let v = g.value(y);
        assert_eq!(v[0], 0.0);
        assert_eq!(v[5], 9.0);
    }

    #[test]
    fn shape_mismatch_error_names_the_layer_and_dimensions() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf_owned(Tensor::zeros(vec![2, 3]));
        let b = g.leaf_owned(Tensor::zeros(vec![4, 5]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains('3') && msg.contains('4'), "{msg}");
    }

    #[test]
    fn repeated_operand_accumulates_both_contributions() {
        // d/dx of (x*x) summed must be 2x even though both operands alias.
        let mut g = Graph::<f64>::new();
        let x = g.leaf_owned(Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum_all(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), &[2.0, -4.0, 1.0]);
    }
}
