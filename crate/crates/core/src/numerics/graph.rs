//! Reverse-mode tape.
//!
//! Every op appends a node whose inputs already exist, so the node vector is a
//! topological order and `backward` is a single reverse sweep. A `Graph` lives
//! for one forward/backward pass and is then dropped.

use super::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::{NumericsError, ParamId, ParamStore, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One row of an assembled matrix copied from a row of another node.
#[derive(Clone, Copy, Debug)]
pub struct RowSource {
    pub dest: usize,
    pub src: Var,
    pub src_row: usize,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    ParamRows { param: ParamId, rows: Vec<usize> },
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    SoftmaxRows(Var),
    SegmentSoftmax { x: Var, segments: Vec<usize>, nseg: usize },
    GatherRows { x: Var, rows: Vec<usize> },
    ScatterAddRows { x: Var, targets: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ScaleRows { x: Var, w: Var },
    MaskRows { x: Var, keep: Vec<bool> },
    Assemble(Vec<RowSource>),
    MeanRows { x: Var, rows: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64>, scale: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Computation tape recording primitive operations in execution order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(msg: impl Into<String>) -> NumericsError {
    NumericsError::Shape(msg.into())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

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

    pub fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![rows, cols], data).expect("internal shape")
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    /// Differentiable row lookup into a 2-D parameter table.
    pub fn param_rows(&mut self, store: &ParamStore, id: ParamId, rows: &[usize]) -> Result<Var, NumericsError> {
        let table = store.value(id);
        let (n, d) = table.dims2();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(shape_err(format!("row {r} out of range for table with {n} rows")));
            }
            data.extend_from_slice(table.row(r));
        }
        if rows.is_empty() {
            return Err(shape_err("empty row lookup"));
        }
        Ok(self.push(Self::mat(rows.len(), d, data), Op::ParamRows { param: id, rows: rows.to_vec() }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err(format!("matmul inner extents {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Self::mat(m, n, out), Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Self::mat(n, m, out), Op::Transpose(a))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), NumericsError> {
        if self.dims(a) != self.dims(b) {
            return Err(shape_err(format!("{what}: {:?} vs {:?}", self.dims(a), self.dims(b))));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (m, n) = self.dims(a);
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Self::mat(m, n, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b)))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// `x[n×d] + b[d]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var, NumericsError> {
        let (n, d) = self.dims(x);
        if self.value(b).len() != d {
            return Err(shape_err(format!("bias of {} for width {d}", self.value(b).len())));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for i in 0..n {
            for (o, bv) in out[i * d..(i + 1) * d].iter_mut().zip(bias) {
                *o += bv;
            }
        }
        Ok(self.push(Self::mat(n, d, out), Op::AddRow(x, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let (n, d) = self.dims(x);
        let data = self.value(x).data().iter().map(|v| v * s).collect();
        self.push(Self::mat(n, d, data), Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let (n, d) = self.dims(x);
        let data = self.value(x).data().iter().map(|v| v + s).collect();
        self.push(Self::mat(n, d, data), Op::AddScalar(x))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (n, d) = self.dims(x);
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        self.push(Self::mat(n, d, data), op)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    /// Row-wise layer normalization followed by `gain ∘ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NumericsError> {
        let (n, d) = self.dims(x);
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(shape_err("layer_norm gain/bias width"));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(Self::mat(n, d, out), Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    /// Row softmax; masked entries (`false`) are exactly zero and excluded from the denominator.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var, NumericsError> {
        let (n, k) = self.dims(x);
        if let Some(m) = mask {
            if m.len() != n * k {
                return Err(shape_err("softmax mask shape"));
            }
        }
        let out = softmax_rows_values(self.value(x).data(), n, k, mask)?;
        Ok(self.push(Self::mat(n, k, out), Op::SoftmaxRows(x)))
    }

    /// Softmax over groups of rows of a `[E×1]` score column. Masked entries are 0;
    /// a segment with no unmasked entry is all zeros.
    pub fn segment_softmax(
        &mut self,
        x: Var,
        segments: &[usize],
        nseg: usize,
        mask: &[bool],
    ) -> Result<Var, NumericsError> {
        let (e, c) = self.dims(x);
        if c != 1 || segments.len() != e || mask.len() != e {
            return Err(shape_err("segment_softmax expects [E×1] scores with per-edge segment and mask"));
        }
        if segments.iter().any(|&s| s >= nseg) {
            return Err(shape_err("segment id out of range"));
        }
        let xs = self.value(x).data();
        let mut maxes = vec![f64::NEG_INFINITY; nseg];
        for i in 0..e {
            if mask[i] {
                maxes[segments[i]] = maxes[segments[i]].max(xs[i]);
            }
        }
        let mut out = vec![0.0; e];
        let mut sums = vec![0.0; nseg];
        for i in 0..e {
            if mask[i] {
                out[i] = (xs[i] - maxes[segments[i]]).exp();
                sums[segments[i]] += out[i];
            }
        }
        for i in 0..e {
            if mask[i] {
                out[i] /= sums[segments[i]];
            }
        }
        Ok(self.push(Self::mat(e, 1, out), Op::SegmentSoftmax { x, segments: segments.to_vec(), nseg }))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, NumericsError> {
        let (n, d) = self.dims(x);
        if rows.is_empty() {
            return Err(shape_err("empty gather"));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(shape_err(format!("gather row {r} of {n}")));
            }
            data.extend_from_slice(self.value(x).row(r));
        }
        Ok(self.push(Self::mat(rows.len(), d, data), Op::GatherRows { x, rows: rows.to_vec() }))
    }

    /// Sum rows of `x[E×d]` into `n` output rows by target index.
    pub fn scatter_add_rows(&mut self, x: Var, targets: &[usize], n: usize) -> Result<Var, NumericsError> {
        let (e, d) = self.dims(x);
        if targets.len() != e || targets.iter().any(|&t| t >= n) {
            return Err(shape_err("scatter targets"));
        }
        let xs = self.value(x).data();
        let mut out = vec![0.0; n * d];
        for (i, &t) in targets.iter().enumerate() {
            for j in 0..d {
                out[t * d + j] += xs[i * d + j];
            }
        }
        Ok(self.push(Self::mat(n, d, out), Op::ScatterAddRows { x, targets: targets.to_vec() }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let (n, d) = self.dims(x);
        if start + len > d || len == 0 {
            return Err(shape_err(format!("slice {start}+{len} of width {d}")));
        }
        let xs = self.value(x).data();
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&xs[i * d + start..i * d + start + len]);
        }
        Ok(self.push(Self::mat(n, len, data), Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let n = self.dims(*parts.first().ok_or_else(|| shape_err("empty concat"))?).0;
        if parts.iter().any(|&p| self.dims(p).0 != n) {
            return Err(shape_err("concat_cols row mismatch"));
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        Ok(self.push(Self::mat(n, total, data), Op::ConcatCols(parts.to_vec())))
    }

    /// Multiply row `i` of `x[n×d]` by `w[i]` where `w` is `[n×1]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var, NumericsError> {
        let (n, d) = self.dims(x);
        if self.value(w).len() != n {
            return Err(shape_err("scale_rows weight length"));
        }
        let ws = self.value(w).data();
        let xs = self.value(x).data();
        let data = (0..n * d).map(|k| xs[k] * ws[k / d]).collect();
        Ok(self.push(Self::mat(n, d, data), Op::ScaleRows { x, w }))
    }

    /// Zero every row whose `keep` flag is false.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var, NumericsError> {
        let (n, d) = self.dims(x);
        if keep.len() != n {
            return Err(shape_err("mask_rows length"));
        }
        let xs = self.value(x).data();
        let data = (0..n * d).map(|k| if keep[k / d] { xs[k] } else { 0.0 }).collect();
        Ok(self.push(Self::mat(n, d, data), Op::MaskRows { x, keep: keep.to_vec() }))
    }

    /// Build an `[n×d]` matrix filled with `fill`, then overwrite rows from sources.
    pub fn assemble_rows(&mut self, n: usize, d: usize, fill: f64, sources: &[RowSource]) -> Result<Var, NumericsError> {
        let mut data = vec![fill; n * d];
        for s in sources {
            let (sr, sd) = self.dims(s.src);
            if sd != d || s.src_row >= sr || s.dest >= n {
                return Err(shape_err("assemble_rows source out of range"));
            }
            data[s.dest * d..(s.dest + 1) * d].copy_from_slice(self.value(s.src).row(s.src_row));
        }
        Ok(self.push(Self::mat(n, d, data), Op::Assemble(sources.to_vec())))
    }

    pub fn mean_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, NumericsError> {
        let (n, d) = self.dims(x);
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(shape_err("mean_rows selection"));
        }
        let mut out = vec![0.0; d];
        for &r in rows {
            for (o, v) in out.iter_mut().zip(self.value(x).row(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / rows.len() as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.push(Self::mat(1, d, out), Op::MeanRows { x, rows: rows.to_vec() }))
    }

    /// Inverted dropout with an explicit keep mask drawn by the caller.
    pub fn dropout<R: rand::Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let (n, d) = self.dims(x);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n * d).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let data = self.value(x).data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        self.push(Self::mat(n, d, data), Op::Dropout { x, mask })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Cross-entropy of row-wise softmax against integer targets, summed over rows and
    /// multiplied by `scale` (use `1/n` for a mean).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], scale: f64) -> Result<Var, NumericsError> {
        let (n, k) = self.dims(logits);
        if targets.len() != n || targets.iter().any(|&t| t >= k) {
            return Err(NumericsError::Contract(format!("cross-entropy targets out of range for [{n}×{k}]")));
        }
        let probs = softmax_rows_values(self.value(logits).data(), n, k, None)?;
        let xs = self.value(logits).data();
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &xs[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        Ok(self.push(
            Tensor::scalar(loss * scale),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, scale },
        ))
    }

    /// Reverse sweep from a scalar loss; parameter gradients accumulate into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<(), NumericsError> {
        if !self.value(loss).is_scalar() {
            return Err(NumericsError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads, store);
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>], store: &mut ParamStore) {
        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        let (n, d) = node.value.dims2();
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => store.accumulate(*id, g),
            Op::ParamRows { param, rows } => store.accumulate_rows(*param, rows, g),
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let (_, nn) = self.dims(*b);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                matmul_bt_acc(g, bv, acc(grads, *a, m * k), m, k, nn);
                matmul_at_acc(av, g, acc(grads, *b, k * nn), m, k, nn);
            }
            Op::Transpose(a) => {
                // node is [n×d] = aᵀ where a is [d×n]
                let ga = acc(grads, *a, n * d);
                for i in 0..n {
                    for j in 0..d {
                        ga[j * n + i] += g[i * d + j];
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(acc(grads, *a, g.len()), g);
                add_into(acc(grads, *b, g.len()), g);
            }
            Op::Sub(a, b) => {
                add_into(acc(grads, *a, g.len()), g);
                let gb = acc(grads, *b, g.len());
                for (o, v) in gb.iter_mut().zip(g) {
                    *o -= v;
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let ga = acc(grads, *a, g.len());
                for k in 0..g.len() {
                    ga[k] += g[k] * bv[k];
                }
                let gb = acc(grads, *b, g.len());
                for k in 0..g.len() {
                    gb[k] += g[k] * av[k];
                }
            }
            Op::AddRow(x, b) => {
                add_into(acc(grads, *x, g.len()), g);
                let gb = acc(grads, *b, d);
                for i in 0..n {
                    for j in 0..d {
                        gb[j] += g[i * d + j];
                    }
                }
            }
            Op::Scale(x, s) => {
                let gx = acc(grads, *x, g.len());
                for (o, v) in gx.iter_mut().zip(g) {
                    *o += v * s;
                }
            }
            Op::AddScalar(x) => add_into(acc(grads, *x, g.len()), g),
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let gx = acc(grads, *x, g.len());
                for k in 0..g.len() {
                    gx[k] += g[k] * gelu_grad(xv[k]);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let gx = acc(grads, *x, g.len());
                for k in 0..g.len() {
                    if xv[k] > 0.0 {
                        gx[k] += g[k];
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                let gx = acc(grads, *x, g.len());
                for k in 0..g.len() {
                    gx[k] += if xv[k] > 0.0 { g[k] } else { slope * g[k] };
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = self.value(*gain).data();
                let mut dx = vec![0.0; n * d];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for i in 0..n {
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..d {
                        let k = i * d + j;
                        let dh = g[k] * gv[j];
                        sum_dh += dh;
                        sum_dh_h += dh * xhat[k];
                        dgain[j] += g[k] * xhat[k];
                        dbias[j] += g[k];
                    }
                    let df = d as f64;
                    for j in 0..d {
                        let k = i * d + j;
                        let dh = g[k] * gv[j];
                        dx[k] = rstd[i] / df * (df * dh - sum_dh - xhat[k] * sum_dh_h);
                    }
                }
                add_into(acc(grads, *x, n * d), &dx);
                add_into(acc(grads, *gain, d), &dgain);
                add_into(acc(grads, *bias, d), &dbias);
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let gx = acc(grads, *x, n * d);
                for i in 0..n {
                    let dot: f64 = (0..d).map(|j| y[i * d + j] * g[i * d + j]).sum();
                    for j in 0..d {
                        let k = i * d + j;
                        gx[k] += y[k] * (g[k] - dot);
                    }
                }
            }
            Op::SegmentSoftmax { x, segments, nseg } => {
                let y = node.value.data();
                let mut dots = vec![0.0; *nseg];
                for (i, &s) in segments.iter().enumerate() {
                    dots[s] += y[i] * g[i];
                }
                let gx = acc(grads, *x, n);
                for (i, &s) in segments.iter().enumerate() {
                    gx[i] += y[i] * (g[i] - dots[s]);
                }
            }
            Op::GatherRows { x, rows } => {
                let (xn, _) = self.dims(*x);
                let gx = acc(grads, *x, xn * d);
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        gx[r * d + j] += g[k * d + j];
                    }
                }
            }
            Op::ScatterAddRows { x, targets } => {
                let gx = acc(grads, *x, targets.len() * d);
                for (i, &t) in targets.iter().enumerate() {
                    for j in 0..d {
                        gx[i * d + j] += g[t * d + j];
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (xn, xd) = self.dims(*x);
                let gx = acc(grads, *x, xn * xd);
                for i in 0..n {
                    for j in 0..d {
                        gx[i * xd + start + j] += g[i * d + j];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (_, pd) = self.dims(p);
                    let gp = acc(grads, p, n * pd);
                    for i in 0..n {
                        for j in 0..pd {
                            gp[i * pd + j] += g[i * d + offset + j];
                        }
                    }
                    offset += pd;
                }
            }
            Op::ScaleRows { x, w } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let gx = acc(grads, *x, n * d);
                for k in 0..n * d {
                    gx[k] += g[k] * wv[k / d];
                }
                let gw = acc(grads, *w, n);
                for k in 0..n * d {
                    gw[k / d] += g[k] * xv[k];
                }
            }
            Op::MaskRows { x, keep } => {
                let gx = acc(grads, *x, n * d);
                for k in 0..n * d {
                    if keep[k / d] {
                        gx[k] += g[k];
                    }
                }
            }
            Op::Assemble(sources) => {
                for s in sources {
                    let (sr, sd) = self.dims(s.src);
                    let gs = acc(grads, s.src, sr * sd);
                    for j in 0..d {
                        gs[s.src_row * d + j] += g[s.dest * d + j];
                    }
                }
            }
            Op::MeanRows { x, rows } => {
                let (xn, _) = self.dims(*x);
                let inv = 1.0 / rows.len() as f64;
                let gx = acc(grads, *x, xn * d);
                for &r in rows {
                    for j in 0..d {
                        gx[r * d + j] += g[j] * inv;
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let gx = acc(grads, *x, n * d);
                for k in 0..n * d {
                    gx[k] += g[k] * mask[k];
                }
            }
            Op::Sum(x) => {
                let len = self.value(*x).len();
                let gx = acc(grads, *x, len);
                gx.iter_mut().for_each(|o| *o += g[0]);
            }
            Op::CrossEntropy { logits, targets, probs, scale } => {
                let (ln, lk) = self.dims(*logits);
                let gl = acc(grads, *logits, ln * lk);
                let s = g[0] * scale;
                for (i, &t) in targets.iter().enumerate() {
                    for j in 0..lk {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        gl[i * lk + j] += s * (probs[i * lk + j] - onehot);
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

pub(crate) fn softmax_rows_values(x: &[f64], n: usize, k: usize, mask: Option<&[bool]>) -> Result<Vec<f64>, NumericsError> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let row = &x[i * k..(i + 1) * k];
        let keep = |j: usize| mask.is_none_or(|m| m[i * k + j]);
        let mut mx = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if keep(j) {
                mx = mx.max(v);
            }
        }
        if mx == f64::NEG_INFINITY {
            return Err(NumericsError::DegenerateRow(i));
        }
        let mut s = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if keep(j) {
                let e = (v - mx).exp();
                out[i * k + j] = e;
                s += e;
            }
        }
        for j in 0..k {
            out[i * k + j] /= s;
        }
    }
    Ok(out)
}
