//! Reverse-mode autodiff on a linear operation tape.
//!
//! Forward code records primitive operations onto a [`Tape`]; [`Tape::backward`]
//! replays them in exact reverse order, accumulating adjoints via the chain
//! rule. One tape is owned by exactly one thread; values are write-once.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::tensor::{
    matmul_acc, matmul_ta_acc, matmul_tb_acc, matvec_acc, matvec_t_acc, sigmoid_scalar, Tensor,
};

/// Handle to a value on a tape. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Val(usize);

/// Handle to a learnable tensor in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered registry of named learnable tensors.
///
/// Models hold `ParamId`s; the values themselves live here so the optimizer
/// can walk every parameter uniformly and checkpoints can name them.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(self.values.iter())
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar coordinates across all parameters.
    pub fn coordinate_count(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }
}

/// Boolean support mask for row-restricted softmax; `mask[i*n+j]` is true
/// when j is in vertex i's neighbor set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportMask {
    n: usize,
    mask: Vec<bool>,
}

impl SupportMask {
    pub fn new(n: usize, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), n * n);
        SupportMask { n, mask }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.n + j]
    }
}

#[derive(Debug, Clone)]
enum Op {
    MatMul { a: Val, b: Val, out: Val, m: usize, k: usize, n: usize },
    /// out = a · bᵀ with b stored n×k
    MatMulTb { a: Val, b: Val, out: Val, m: usize, k: usize, n: usize },
    MatVec { a: Val, x: Val, out: Val, m: usize, n: usize },
    Add { a: Val, b: Val, out: Val },
    Sub { a: Val, b: Val, out: Val },
    Mul { a: Val, b: Val, out: Val },
    Scale { a: Val, c: f64, out: Val },
    AddScalar { a: Val, out: Val },
    AddRowBroadcast { a: Val, bias: Val, out: Val, rows: usize, cols: usize },
    Sigmoid { a: Val, out: Val },
    Tanh { a: Val, out: Val },
    LeakyRelu { a: Val, slope: f64, out: Val },
    Abs { a: Val, out: Val },
    SumAll { a: Val, out: Val },
    /// (input, width) pairs; vectors count as width 1
    ConcatCols { inputs: Vec<(Val, usize)>, out: Val, rows: usize },
    SliceCol { a: Val, col: usize, out: Val, rows: usize, cols: usize },
    SliceRange { a: Val, offset: usize, len: usize, out: Val },
    Reshape { a: Val, out: Val },
    /// out[i] = a[idx[i]]
    Gather { a: Val, idx: Arc<Vec<usize>>, out: Val },
    OuterSum { col: Val, row: Val, out: Val, m: usize, n: usize },
    MaskedRowSoftmax { scores: Val, out: Val, support: Arc<SupportMask> },
    /// Value pass-through; no gradient flows back to the source.
    StopGradient,
}

struct Buf {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// The computation tape. Values are immutable once produced; `backward`
/// consumes recording and fills per-value adjoints.
#[derive(Default)]
pub struct Tape {
    bufs: Vec<Buf>,
    ops: Vec<Op>,
    bound_params: HashMap<usize, Val>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Val {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.bufs.push(Buf { shape, data });
        Val(self.bufs.len() - 1)
    }

    /// Register an input value. Gradients flow to it and can be read back
    /// with [`Tape::grad`], but it is not tied to any parameter.
    pub fn leaf(&mut self, t: &Tensor) -> Val {
        self.push(t.shape().to_vec(), t.data().to_vec())
    }

    /// Bind a parameter onto the tape (memoized: at most one leaf per
    /// parameter per tape, so adjoints from all uses accumulate together).
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Val {
        if let Some(&v) = self.bound_params.get(&id.index()) {
            return v;
        }
        let t = params.value(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec());
        self.bound_params.insert(id.index(), v);
        v
    }

    pub fn shape(&self, v: Val) -> &[usize] {
        &self.bufs[v.0].shape
    }

    pub fn value(&self, v: Val) -> &[f64] {
        &self.bufs[v.0].data
    }

    pub fn tensor(&self, v: Val) -> Tensor {
        Tensor::new(self.bufs[v.0].shape.clone(), self.bufs[v.0].data.clone())
    }

    fn dims2(&self, v: Val) -> (usize, usize) {
        let s = &self.bufs[v.0].shape;
        match s.len() {
            1 => (s[0], 1),
            2 => (s[0], s[1]),
            _ => (s[0], s[1..].iter().product()),
        }
    }

    fn dim_err(&self, op: &'static str, a: Val, b: Val) -> Error {
        Error::Dimension {
            op,
            left: self.bufs[a.0].shape.clone(),
            right: self.bufs[b.0].shape.clone(),
        }
    }

    // ---- recorded operations ------------------------------------------

    /// Matrix product a (m×k) · b (k×n).
    pub fn matmul(&mut self, a: Val, b: Val) -> Result<Val> {
        let (m, k) = self.dims2(a);
        let (kb, n) = self.dims2(b);
        if k != kb {
            return Err(self.dim_err("matmul", a, b));
        }
        let mut data = vec![0.0; m * n];
        matmul_acc(self.value(a), self.value(b), &mut data, m, k, n);
        let out = self.push(vec![m, n], data);
        self.ops.push(Op::MatMul { a, b, out, m, k, n });
        Ok(out)
    }

    /// a (m×k) · bᵀ with b stored n×k.
    pub fn matmul_tb(&mut self, a: Val, b: Val) -> Result<Val> {
        let (m, k) = self.dims2(a);
        let (n, kb) = self.dims2(b);
        if k != kb {
            return Err(self.dim_err("matmul_tb", a, b));
        }
        let mut data = vec![0.0; m * n];
        matmul_tb_acc(self.value(a), self.value(b), &mut data, m, k, n);
        let out = self.push(vec![m, n], data);
        self.ops.push(Op::MatMulTb { a, b, out, m, k, n });
        Ok(out)
    }

    /// Matrix-vector product a (m×n) · x (n) -> (m).
    pub fn matvec(&mut self, a: Val, x: Val) -> Result<Val> {
        let (m, n) = self.dims2(a);
        if self.bufs[x.0].data.len() != n {
            return Err(self.dim_err("matvec", a, x));
        }
        let mut data = vec![0.0; m];
        matvec_acc(self.value(a), self.value(x), &mut data, m, n);
        let out = self.push(vec![m], data);
        self.ops.push(Op::MatVec { a, x, out, m, n });
        Ok(out)
    }

    fn same_shape_op(
        &mut self,
        name: &'static str,
        a: Val,
        b: Val,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Val> {
        if self.bufs[a.0].shape != self.bufs[b.0].shape {
            return Err(self.dim_err(name, a, b));
        }
        let data: Vec<f64> = self.value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.bufs[a.0].shape.clone();
        Ok(self.push(shape, data))
    }

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        let out = self.same_shape_op("add", a, b, |x, y| x + y)?;
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Result<Val> {
        let out = self.same_shape_op("sub", a, b, |x, y| x - y)?;
        self.ops.push(Op::Sub { a, b, out });
        Ok(out)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val> {
        let out = self.same_shape_op("mul", a, b, |x, y| x * y)?;
        self.ops.push(Op::Mul { a, b, out });
        Ok(out)
    }

    pub fn scale(&mut self, a: Val, c: f64) -> Val {
        let data: Vec<f64> = self.value(a).iter().map(|&x| c * x).collect();
        let shape = self.bufs[a.0].shape.clone();
        let out = self.push(shape, data);
        self.ops.push(Op::Scale { a, c, out });
        out
    }

    pub fn add_scalar(&mut self, a: Val, c: f64) -> Val {
        let data: Vec<f64> = self.value(a).iter().map(|&x| x + c).collect();
        let shape = self.bufs[a.0].shape.clone();
        let out = self.push(shape, data);
        self.ops.push(Op::AddScalar { a, out });
        out
    }

    /// a (m×n) + bias (n) broadcast over rows.
    pub fn add_row_broadcast(&mut self, a: Val, bias: Val) -> Result<Val> {
        let (rows, cols) = self.dims2(a);
        if self.bufs[bias.0].data.len() != cols {
            return Err(self.dim_err("add_row_broadcast", a, bias));
        }
        let mut data = self.value(a).to_vec();
        let b = self.value(bias).to_vec();
        for r in 0..rows {
            for (o, &bv) in data[r * cols..(r + 1) * cols].iter_mut().zip(b.iter()) {
                *o += bv;
            }
        }
        let shape = self.bufs[a.0].shape.clone();
        let out = self.push(shape, data);
        self.ops.push(Op::AddRowBroadcast { a, bias, out, rows, cols });
        Ok(out)
    }

    pub fn sigmoid(&mut self, a: Val) -> Val {
        let data: Vec<f64> = self.value(a).iter().map(|&x| sigmoid_scalar(x)).collect();
        let shape = self.bufs[a.0].shape.clone();
        let out = self.push(shape, data);
        self.ops.push(Op::Sigmoid { a, out });
        out
    }

    pub fn tanh(&mut self, a: Val) -> Val {
        let data: Vec<f64> = self.value(a).iter().map(|&x| x.tanh()).collect();
        let shape = self.bufs[a.0].shape.clone();
        let out = self.push(shape, data);
        self.ops.push(Op::Tanh { a, out });
        out
    }

    /// Elementwise x if x > 0, slope·x if x ≤ 0. The derivative at exactly 0
    /// is `slope` (the x ≤ 0 branch).
    pub fn leaky_relu(&mut self, a: Val, slope: f64) -> Val {
        debug_assert!(slope > 0.0 && slope < 1.0);
        let data: Vec<f64> = self.value(a)
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let shape = self.bufs[a.0].shape.clone();
        let out = self.push(shape, data);
        self.ops.push(Op::LeakyRelu { a, slope, out });
        out
    }

    pub fn abs(&mut self, a: Val) -> Val {
        let data: Vec<f64> = self.value(a).iter().map(|&x| x.abs()).collect();
        let shape = self.bufs[a.0].shape.clone();
        let out = self.push(shape, data);
        self.ops.push(Op::Abs { a, out });
        out
    }

    /// Sum of all entries, as a scalar value.
    pub fn sum_all(&mut self, a: Val) -> Val {
        let s: f64 = self.value(a).iter().sum();
        let out = self.push(vec![1], vec![s]);
        self.ops.push(Op::SumAll { a, out });
        out
    }

    /// Horizontal concatenation. Inputs may be matrices (r×cᵢ) or vectors
    /// (r), which count as single columns.
    pub fn concat_cols(&mut self, inputs: &[Val]) -> Result<Val> {
        assert!(!inputs.is_empty(), "concat_cols needs at least one input");
        let (rows, _) = self.dims2(inputs[0]);
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let (r, c) = self.dims2(v);
            if r != rows {
                return Err(self.dim_err("concat_cols", inputs[0], v));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&v, &w) in inputs.iter().zip(widths.iter()) {
            let src = &self.bufs[v.0].data;
            for r in 0..rows {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let out = self.push(vec![rows, total], data);
        self.ops.push(Op::ConcatCols {
            inputs: inputs.iter().copied().zip(widths).collect(),
            out,
            rows,
        });
        Ok(out)
    }

    /// Column j of a matrix, as a vector.
    pub fn slice_col(&mut self, a: Val, col: usize) -> Result<Val> {
        let (rows, cols) = self.dims2(a);
        if col >= cols {
            return Err(Error::Contract(format!(
                "slice_col: column {col} out of range for {cols} columns"
            )));
        }
        let data: Vec<f64> = (0..rows).map(|r| self.bufs[a.0].data[r * cols + col]).collect();
        let out = self.push(vec![rows], data);
        self.ops.push(Op::SliceCol { a, col, out, rows, cols });
        Ok(out)
    }

    /// Contiguous range of a vector.
    pub fn slice_range(&mut self, a: Val, offset: usize, len: usize) -> Result<Val> {
        let total = self.bufs[a.0].data.len();
        if offset + len > total {
            return Err(Error::Contract(format!(
                "slice_range: {offset}..{} out of range for length {total}",
                offset + len
            )));
        }
        let data = self.bufs[a.0].data[offset..offset + len].to_vec();
        let out = self.push(vec![len], data);
        self.ops.push(Op::SliceRange { a, offset, len, out });
        Ok(out)
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, a: Val, shape: Vec<usize>) -> Result<Val> {
        if shape.iter().product::<usize>() != self.bufs[a.0].data.len() {
            return Err(Error::Contract(format!(
                "reshape: shape {:?} does not match value count {}",
                shape,
                self.bufs[a.0].data.len()
            )));
        }
        let data = self.bufs[a.0].data.clone();
        let out = self.push(shape, data);
        self.ops.push(Op::Reshape { a, out });
        Ok(out)
    }

    /// out[i] = a[idx[i]], flat indices.
    pub fn gather(&mut self, a: Val, idx: Arc<Vec<usize>>) -> Result<Val> {
        let src = &self.bufs[a.0].data;
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Contract(format!(
                "gather: index {bad} out of range for length {}",
                src.len()
            )));
        }
        let data: Vec<f64> = idx.iter().map(|&i| src[i]).collect();
        let out = self.push(vec![idx.len()], data);
        self.ops.push(Op::Gather { a, idx, out });
        Ok(out)
    }

    /// out[i,j] = col[i] + row[j].
    pub fn outer_sum(&mut self, col: Val, row: Val) -> Result<Val> {
        let m = self.bufs[col.0].data.len();
        let n = self.bufs[row.0].data.len();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let ci = self.bufs[col.0].data[i];
            for j in 0..n {
                data[i * n + j] = ci + self.bufs[row.0].data[j];
            }
        }
        let out = self.push(vec![m, n], data);
        self.ops.push(Op::OuterSum { col, row, out, m, n });
        Ok(out)
    }

    /// Row-wise softmax restricted to the support mask, with max-subtraction
    /// for overflow safety. Output is exactly 0 off support and each row sums
    /// to 1 over the support.
    pub fn masked_row_softmax(&mut self, scores: Val, support: &Arc<SupportMask>) -> Result<Val> {
        let (m, n) = self.dims2(scores);
        if m != support.n() || n != support.n() {
            return Err(Error::Dimension {
                op: "masked_row_softmax",
                left: self.bufs[scores.0].shape.clone(),
                right: vec![support.n(), support.n()],
            });
        }
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.bufs[scores.0].data[i * n..(i + 1) * n];
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                if support.contains(i, j) && row[j] > max {
                    max = row[j];
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::IsolatedVertex { row: i });
            }
            let mut denom = 0.0;
            for j in 0..n {
                if support.contains(i, j) {
                    let e = (row[j] - max).exp();
                    data[i * n + j] = e;
                    denom += e;
                }
            }
            for j in 0..n {
                if support.contains(i, j) {
                    data[i * n + j] /= denom;
                }
            }
        }
        let out = self.push(vec![m, n], data);
        self.ops.push(Op::MaskedRowSoftmax {
            scores,
            out,
            support: Arc::clone(support),
        });
        Ok(out)
    }

    /// Pass the value through, cutting the gradient path behind it.
    pub fn stop_gradient(&mut self, a: Val) -> Val {
        let shape = self.bufs[a.0].shape.clone();
        let data = self.bufs[a.0].data.clone();
        let out = self.push(shape, data);
        self.ops.push(Op::StopGradient);
        out
    }

    // ---- backward -------------------------------------------------------

    /// Replay the tape in reverse, accumulating adjoints of `loss` into every
    /// value. `loss` must be scalar.
    pub fn backward(&mut self, loss: Val) -> Result<()> {
        if self.bufs[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.bufs[loss.0].shape
            )));
        }
        self.grads = (0..self.bufs.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..self.ops.len()).rev() {
            let op = self.ops[i].clone();
            self.backward_op(&op);
        }
        Ok(())
    }

    fn acc(&mut self, v: Val, f: impl FnOnce(&mut [f64])) {
        if self.grads[v.0].is_none() {
            self.grads[v.0] = Some(vec![0.0; self.bufs[v.0].data.len()]);
        }
        f(self.grads[v.0].as_mut().unwrap());
    }

    fn take_out_grad(&self, out: Val) -> Option<Vec<f64>> {
        self.grads[out.0].clone()
    }

    fn backward_op(&mut self, op: &Op) {
        match op {
            Op::MatMul { a, b, out, m, k, n } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let b_data = self.bufs[b.0].data.clone();
                self.acc(*a, |da| matmul_tb_acc(&g, &b_data, da, *m, *n, *k));
                let a_data = self.bufs[a.0].data.clone();
                self.acc(*b, |db| matmul_ta_acc(&a_data, &g, db, *m, *k, *n));
            }
            Op::MatMulTb { a, b, out, m, k, n } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let b_data = self.bufs[b.0].data.clone();
                self.acc(*a, |da| matmul_acc(&g, &b_data, da, *m, *n, *k));
                let a_data = self.bufs[a.0].data.clone();
                self.acc(*b, |db| matmul_ta_acc(&g, &a_data, db, *m, *n, *k));
            }
            Op::MatVec { a, x, out, m, n } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let x_data = self.bufs[x.0].data.clone();
                self.acc(*a, |da| {
                    for i in 0..*m {
                        let gi = g[i];
                        if gi == 0.0 {
                            continue;
                        }
                        for j in 0..*n {
                            da[i * n + j] += gi * x_data[j];
                        }
                    }
                });
                let a_data = self.bufs[a.0].data.clone();
                self.acc(*x, |dx| matvec_t_acc(&a_data, &g, dx, *m, *n));
            }
            Op::Add { a, b, out } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                self.acc(*a, |da| for (d, &gv) in da.iter_mut().zip(g.iter()) { *d += gv });
                self.acc(*b, |db| for (d, &gv) in db.iter_mut().zip(g.iter()) { *d += gv });
            }
            Op::Sub { a, b, out } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                self.acc(*a, |da| for (d, &gv) in da.iter_mut().zip(g.iter()) { *d += gv });
                self.acc(*b, |db| for (d, &gv) in db.iter_mut().zip(g.iter()) { *d -= gv });
            }
            Op::Mul { a, b, out } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let b_data = self.bufs[b.0].data.clone();
                self.acc(*a, |da| {
                    for ((d, &gv), &bv) in da.iter_mut().zip(g.iter()).zip(b_data.iter()) {
                        *d += gv * bv;
                    }
                });
                let a_data = self.bufs[a.0].data.clone();
                self.acc(*b, |db| {
                    for ((d, &gv), &av) in db.iter_mut().zip(g.iter()).zip(a_data.iter()) {
                        *d += gv * av;
                    }
                });
            }
            Op::Scale { a, c, out } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let c = *c;
                self.acc(*a, |da| for (d, &gv) in da.iter_mut().zip(g.iter()) { *d += c * gv });
            }
            Op::AddScalar { a, out } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                self.acc(*a, |da| for (d, &gv) in da.iter_mut().zip(g.iter()) { *d += gv });
            }
            Op::AddRowBroadcast { a, bias, out, rows, cols } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                self.acc(*a, |da| for (d, &gv) in da.iter_mut().zip(g.iter()) { *d += gv });
                self.acc(*bias, |db| {
                    for r in 0..*rows {
                        for j in 0..*cols {
                            db[j] += g[r * cols + j];
                        }
                    }
                });
            }
            Op::Sigmoid { a, out } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let y = self.bufs[out.0].data.clone();
                self.acc(*a, |da| {
                    for ((d, &gv), &yv) in da.iter_mut().zip(g.iter()).zip(y.iter()) {
                        *d += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::Tanh { a, out } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let y = self.bufs[out.0].data.clone();
                self.acc(*a, |da| {
                    for ((d, &gv), &yv) in da.iter_mut().zip(g.iter()).zip(y.iter()) {
                        *d += gv * (1.0 - yv * yv);
                    }
                });
            }
            Op::LeakyRelu { a, slope, out } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let x = self.bufs[a.0].data.clone();
                let slope = *slope;
                self.acc(*a, |da| {
                    for ((d, &gv), &xv) in da.iter_mut().zip(g.iter()).zip(x.iter()) {
                        *d += gv * if xv > 0.0 { 1.0 } else { slope };
                    }
                });
            }
            Op::Abs { a, out } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let x = self.bufs[a.0].data.clone();
                self.acc(*a, |da| {
                    for ((d, &gv), &xv) in da.iter_mut().zip(g.iter()).zip(x.iter()) {
                        // subgradient 0 at the kink
                        *d += gv * if xv > 0.0 { 1.0 } else if xv < 0.0 { -1.0 } else { 0.0 };
                    }
                });
            }
            Op::SumAll { a, out } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let gv = g[0];
                self.acc(*a, |da| for d in da.iter_mut() { *d += gv });
            }
            Op::ConcatCols { inputs, out, rows } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let total: usize = inputs.iter().map(|&(_, w)| w).sum();
                let mut off = 0;
                for &(v, w) in inputs {
                    self.acc(v, |dv| {
                        for r in 0..*rows {
                            for j in 0..w {
                                dv[r * w + j] += g[r * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::SliceCol { a, col, out: _, rows, cols } => {
                let Some(g) = self.take_out_grad(op_out(op)) else { return };
                self.acc(*a, |da| {
                    for r in 0..*rows {
                        da[r * cols + col] += g[r];
                    }
                });
            }
            Op::SliceRange { a, offset, len, out: _ } => {
                let Some(g) = self.take_out_grad(op_out(op)) else { return };
                self.acc(*a, |da| {
                    for j in 0..*len {
                        da[offset + j] += g[j];
                    }
                });
            }
            Op::Reshape { a, out } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                self.acc(*a, |da| for (d, &gv) in da.iter_mut().zip(g.iter()) { *d += gv });
            }
            Op::Gather { a, idx, out } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let idx = Arc::clone(idx);
                self.acc(*a, |da| {
                    for (pos, &src) in idx.iter().enumerate() {
                        da[src] += g[pos];
                    }
                });
            }
            Op::OuterSum { col, row, out, m, n } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                self.acc(*col, |dc| {
                    for i in 0..*m {
                        let mut s = 0.0;
                        for j in 0..*n {
                            s += g[i * n + j];
                        }
                        dc[i] += s;
                    }
                });
                self.acc(*row, |dr| {
                    for j in 0..*n {
                        let mut s = 0.0;
                        for i in 0..*m {
                            s += g[i * n + j];
                        }
                        dr[j] += s;
                    }
                });
            }
            Op::MaskedRowSoftmax { scores, out, support } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let y = self.bufs[out.0].data.clone();
                let n = support.n();
                // Off-support entries have y = 0, so their adjoint is exactly 0.
                self.acc(*scores, |ds| {
                    for i in 0..n {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            ds[i * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::StopGradient => {}
        }
    }

    /// Adjoint of `loss` with respect to a value, if any flowed to it.
    /// Only meaningful after [`Tape::backward`].
    pub fn grad(&self, v: Val) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient per registered parameter, aligned with `params` order.
    /// Parameters the loss does not depend on get exact zeros.
    pub fn param_grads(&self, params: &ParamSet) -> Vec<Tensor> {
        params
            .ids()
            .map(|id| {
                let shape = params.value(id).shape().to_vec();
                match self.bound_params.get(&id.index()).and_then(|v| self.grad(*v)) {
                    Some(g) => Tensor::new(shape, g.to_vec()),
                    None => Tensor::zeros(shape),
                }
            })
            .collect()
    }
}

fn op_out(op: &Op) -> Val {
    match op {
        Op::SliceCol { out, .. } | Op::SliceRange { out, .. } => *out,
        _ => unreachable!(),
    }
}
