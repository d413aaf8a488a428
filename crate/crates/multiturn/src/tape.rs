//! Tape-based reverse-mode automatic differentiation.
//!
//! Operations are recorded onto a [`Tape`] during the forward pass and
//! replayed in reverse to accumulate gradients. One tape serves one
//! training instance; tapes are independent of each other.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a tape. Only valid for the tape that
/// created it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Value(pub(crate) usize);

enum Op<S> {
    Leaf,
    Matmul(Value, Value),
    Add(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    /// matrix + column vector, vector added to every column
    AddColVec(Value, Value),
    /// matrix + row vector, vector added to every row
    AddRowVec(Value, Value),
    /// matrix ∘ column vector, vector applied to every column
    MulColVec(Value, Value),
    Sigmoid(Value),
    Tanh(Value),
    Relu(Value),
    /// ln(max(x, 1e-12)); zero gradient where the clamp is active
    Log(Value),
    Scale(Value, S),
    AddConst(Value, S),
    Softmax {
        x: Value,
        axis: usize,
    },
    ConcatRows(Vec<Value>),
    ConcatCols(Vec<Value>),
    Col {
        x: Value,
        j: usize,
    },
    Slice {
        x: Value,
        from: usize,
    },
    Transpose(Value),
    MaxAxis {
        x: Value,
        axis: usize,
        argmax: Vec<usize>,
    },
    Gather {
        table: Value,
        idx: Vec<usize>,
    },
    SumAll(Value),
    Dot(Value, Value),
    Cosine(Value, Value),
    /// cosine(m[:,i], v) for every column i
    CosineCols {
        m: Value,
        v: Value,
    },
    ConvMaxPool {
        seq: Value,
        weight: Value,
        bias: Value,
        window: usize,
        argmax: Vec<usize>,
    },
    /// Convolution over positions whose inputs are sparse count vectors
    /// (not tape values); used by the trigram ranker towers.
    SparseConvMaxPool {
        weight: Value,
        bias: Value,
        words: Vec<Vec<(u32, S)>>,
        buckets: usize,
        window: usize,
        argmax: Vec<usize>,
    },
    Dropout {
        x: Value,
        inv_keep: S,
        mask: Vec<bool>,
    },
}

struct Node<S> {
    data: Tensor<S>,
    requires_grad: bool,
    op: Op<S>,
}

/// Gradients produced by one backward pass, indexed by leaf handle.
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Value) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Records a computation and runs reverse-mode differentiation over it.
///
/// The tape owns an RNG seeded at construction; stochastic ops (dropout)
/// draw their masks from it, so identical seeds reproduce identical
/// forward values and gradients.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    rng: ChaCha8Rng,
    seed: u64,
    spent: bool,
}

impl<S: Scalar> Tape<S> {
    pub fn new(seed: u64) -> Self {
        Tape {
            nodes: Vec::with_capacity(1024),
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
            spent: false,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input value. Its `requires_grad` flag decides whether
    /// backward will report a gradient for it.
    pub fn leaf(&mut self, t: Tensor<S>) -> Value {
        let rg = t.requires_grad;
        self.push(t, rg, Op::Leaf)
    }

    /// Record a non-differentiable constant.
    pub fn constant(&mut self, mut t: Tensor<S>) -> Value {
        t.requires_grad = false;
        self.push(t, false, Op::Leaf)
    }

    pub fn value(&self, v: Value) -> &Tensor<S> {
        &self.nodes[v.0].data
    }

    pub fn data(&self, v: Value) -> &[S] {
        self.nodes[v.0].data.data()
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        self.nodes[v.0].data.shape()
    }

    fn push(&mut self, data: Tensor<S>, requires_grad: bool, op: Op<S>) -> Value {
        self.nodes.push(Node {
            data,
            requires_grad,
            op,
        });
        Value(self.nodes.len() - 1)
    }

    fn rg(&self, v: Value) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// Matrix product. Accepts [p,q]×[q,r] → [p,r], [p,q]×[q] → [p]
    /// and [q]×[q,r] → [r] (vectors as column / row respectively).
    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (p, q, r, out_shape) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (sa[0], sa[1], sb[1], vec![sa[0], sb[1]]),
            (2, 1) if sa[1] == sb[0] => (sa[0], sa[1], 1, vec![sa[0]]),
            (1, 2) if sa[0] == sb[0] => (1, sa[0], sb[1], vec![sb[1]]),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: sa,
                    rhs: sb,
                })
            }
        };
        let mut out = vec![S::zero(); p * r];
        mm(self.data(a), self.data(b), p, q, r, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(out_shape, out)?, rg, Op::Matmul(a, b)))
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Hadamard product of same-shape tensors.
    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: Value,
        b: Value,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Value> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<S> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, rg, op))
    }

    fn col_vec_op(
        &mut self,
        name: &'static str,
        m: Value,
        v: Value,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Value> {
        let (sm, sv) = (self.shape(m).to_vec(), self.shape(v).to_vec());
        if sm.len() != 2 || sv.len() != 1 || sm[0] != sv[0] {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: sm,
                rhs: sv,
            });
        }
        let (rows, cols) = (sm[0], sm[1]);
        let (md, vd) = (self.data(m), self.data(v));
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let vi = vd[i];
            for j in 0..cols {
                out.push(f(md[i * cols + j], vi));
            }
        }
        let rg = self.rg(m) || self.rg(v);
        Ok(self.push(Tensor::new(sm, out)?, rg, op))
    }

    /// Column broadcast: `v` added to every column of `m`.
    pub fn add_col_vec(&mut self, m: Value, v: Value) -> Result<Value> {
        self.col_vec_op("add_col_vec", m, v, |x, y| x + y, Op::AddColVec(m, v))
    }

    /// Column broadcast: `v` hadamard-multiplied into every column of `m`.
    pub fn mul_col_vec(&mut self, m: Value, v: Value) -> Result<Value> {
        self.col_vec_op("mul_col_vec", m, v, |x, y| x * y, Op::MulColVec(m, v))
    }

    /// Row broadcast: `v` added to every row of `m`.
    pub fn add_row_vec(&mut self, m: Value, v: Value) -> Result<Value> {
        let (sm, sv) = (self.shape(m).to_vec(), self.shape(v).to_vec());
        if sm.len() != 2 || sv.len() != 1 || sm[1] != sv[0] {
            return Err(Error::ShapeMismatch {
                op: "add_row_vec",
                lhs: sm,
                rhs: sv,
            });
        }
        let (rows, cols) = (sm[0], sm[1]);
        let (md, vd) = (self.data(m), self.data(v));
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                out.push(md[i * cols + j] + vd[j]);
            }
        }
        let rg = self.rg(m) || self.rg(v);
        Ok(self.push(Tensor::new(sm, out)?, rg, Op::AddRowVec(m, v)))
    }

    fn unary(&mut self, x: Value, f: impl Fn(S) -> S, op: Op<S>) -> Value {
        let data: Vec<S> = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, data).expect("same shape"), rg, op)
    }

    pub fn sigmoid(&mut self, x: Value) -> Value {
        self.unary(x, sigmoid_stable, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Value) -> Value {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Value) -> Value {
        self.unary(x, |v| if v > S::zero() { v } else { S::zero() }, Op::Relu(x))
    }

    /// Natural log with the argument clamped at 1e-12.
    pub fn log(&mut self, x: Value) -> Value {
        let floor = S::from_f64(LOG_FLOOR);
        self.unary(x, |v| v.max(floor).ln(), Op::Log(x))
    }

    pub fn scale(&mut self, x: Value, c: S) -> Value {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_const(&mut self, x: Value, c: S) -> Value {
        self.unary(x, |v| v + c, Op::AddConst(x, c))
    }

    /// Numerically stable softmax along `axis`. Rank-1 tensors ignore
    /// the axis; rank-2 use 1 = within each row, 0 = within each column.
    pub fn softmax(&mut self, x: Value, axis: usize) -> Result<Value> {
        let shape = self.shape(x).to_vec();
        debug_assert!(
            self.data(x).iter().all(|v| v.is_finite()),
            "softmax input must be finite"
        );
        let data = softmax_forward(self.data(x), &shape, axis)?;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::Softmax { x, axis }))
    }

    /// Stack tensors vertically: vectors concatenate end to end, rank-2
    /// blocks with equal column counts stack as row blocks.
    pub fn concat_rows(&mut self, parts: &[Value]) -> Result<Value> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_rows"));
        }
        let first = self.shape(parts[0]).to_vec();
        let rank = first.len();
        let cols = if rank == 2 { first[1] } else { 1 };
        let mut rows = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != rank || (rank == 2 && s[1] != cols) {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            rows += s[0];
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.data(p));
        }
        let shape = if rank == 2 { vec![rows, cols] } else { vec![rows] };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::ConcatRows(parts.to_vec())))
    }

    /// Assemble equal-length vectors as the columns of a matrix.
    pub fn concat_cols(&mut self, parts: &[Value]) -> Result<Value> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_cols"));
        }
        let d = {
            let s = self.shape(parts[0]);
            if s.len() != 1 {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: s.to_vec(),
                    rhs: vec![],
                });
            }
            s[0]
        };
        for &p in parts {
            if self.shape(p) != [d] {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![d],
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let n = parts.len();
        let mut data = vec![S::zero(); d * n];
        for (t, &p) in parts.iter().enumerate() {
            for (r, &v) in self.data(p).iter().enumerate() {
                data[r * n + t] = v;
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![d, n], data)?, rg, Op::ConcatCols(parts.to_vec())))
    }

    /// Extract column `j` of a rank-2 value as a vector.
    pub fn col(&mut self, x: Value, j: usize) -> Result<Value> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || j >= s[1] {
            return Err(Error::IndexOutOfRange {
                what: "column",
                index: j,
                len: if s.len() == 2 { s[1] } else { 0 },
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let data: Vec<S> = (0..rows).map(|i| self.data(x)[i * cols + j]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::vector(data), rg, Op::Col { x, j }))
    }

    /// Contiguous sub-vector `[from, to)` of a rank-1 value.
    pub fn slice(&mut self, x: Value, from: usize, to: usize) -> Result<Value> {
        let s = self.shape(x).to_vec();
        if s.len() != 1 || from >= to || to > s[0] {
            return Err(Error::IndexOutOfRange {
                what: "slice",
                index: to,
                len: if s.len() == 1 { s[0] } else { 0 },
            });
        }
        let data = self.data(x)[from..to].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::vector(data), rg, Op::Slice { x, from }))
    }

    pub fn transpose(&mut self, x: Value) -> Result<Value> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: s,
                rhs: vec![],
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let xd = self.data(x);
        let mut data = vec![S::zero(); rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[j * rows + i] = xd[i * cols + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![cols, rows], data)?, rg, Op::Transpose(x)))
    }

    /// Max reduction over one axis of a rank-2 value with the argmax
    /// recorded; gradient routes to the first argmax element on ties.
    pub fn max_axis(&mut self, x: Value, axis: usize) -> Result<Value> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || axis > 1 {
            return Err(Error::ShapeMismatch {
                op: "max_axis",
                lhs: s,
                rhs: vec![axis],
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let xd = self.data(x);
        let (out_len, reduce_len) = if axis == 0 { (cols, rows) } else { (rows, cols) };
        let mut out = Vec::with_capacity(out_len);
        let mut argmax = Vec::with_capacity(out_len);
        for o in 0..out_len {
            let mut best = S::neg_infinity();
            let mut arg = 0usize;
            for k in 0..reduce_len {
                let v = if axis == 0 { xd[k * cols + o] } else { xd[o * cols + k] };
                if v > best {
                    best = v;
                    arg = k;
                }
            }
            out.push(best);
            argmax.push(arg);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::vector(out), rg, Op::MaxAxis { x, axis, argmax }))
    }

    /// Copy rows of `table` selected by `idx`; gradients route back
    /// additively (duplicate indices accumulate).
    pub fn gather(&mut self, table: Value, idx: &[usize]) -> Result<Value> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: s,
                rhs: vec![],
            });
        }
        let (rows, dim) = (s[0], s[1]);
        if idx.is_empty() {
            return Err(Error::EmptyInput("gather"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::IndexOutOfRange {
                what: "gather row",
                index: bad,
                len: rows,
            });
        }
        let td = self.data(table);
        let mut data = Vec::with_capacity(idx.len() * dim);
        for &i in idx {
            data.extend_from_slice(&td[i * dim..(i + 1) * dim]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![idx.len(), dim], data)?,
            rg,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn sum_all(&mut self, x: Value) -> Value {
        let total = self.data(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), rg, Op::SumAll(x))
    }

    pub fn dot(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 1 || sa != sb {
            return Err(Error::ShapeMismatch {
                op: "dot",
                lhs: sa,
                rhs: sb,
            });
        }
        let v = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(v), rg, Op::Dot(a, b)))
    }

    /// Cosine similarity of two vectors; defined as 0 when either has
    /// zero norm (with zero gradient there).
    pub fn cosine(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 1 || sa != sb {
            return Err(Error::ShapeMismatch {
                op: "cosine",
                lhs: sa,
                rhs: sb,
            });
        }
        let v = cosine_val(self.data(a), self.data(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(v), rg, Op::Cosine(a, b)))
    }

    /// Cosine similarity of every column of `m` against `v`.
    pub fn cosine_cols(&mut self, m: Value, v: Value) -> Result<Value> {
        let (sm, sv) = (self.shape(m).to_vec(), self.shape(v).to_vec());
        if sm.len() != 2 || sv.len() != 1 || sm[0] != sv[0] {
            return Err(Error::ShapeMismatch {
                op: "cosine_cols",
                lhs: sm,
                rhs: sv,
            });
        }
        let (rows, cols) = (sm[0], sm[1]);
        let (md, vd) = (self.data(m), self.data(v));
        let mut out = Vec::with_capacity(cols);
        let mut colbuf = vec![S::zero(); rows];
        for j in 0..cols {
            for i in 0..rows {
                colbuf[i] = md[i * cols + j];
            }
            out.push(cosine_val(&colbuf, vd));
        }
        let rg = self.rg(m) || self.rg(v);
        Ok(self.push(Tensor::vector(out), rg, Op::CosineCols { m, v }))
    }

    /// Valid-mode 1-D convolution over positions followed by a max over
    /// positions. `seq` is [e, L]; sequences shorter than the window are
    /// zero-padded up to it. `weight` is [k, e*window] (window columns
    /// flattened position-major), `bias` is [k]; the result is [k].
    pub fn conv1d_maxpool(
        &mut self,
        seq: Value,
        weight: Value,
        bias: Value,
        window: usize,
    ) -> Result<Value> {
        let ss = self.shape(seq).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if ss.len() != 2 || ws.len() != 2 || bs.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "conv1d_maxpool",
                lhs: ss,
                rhs: ws,
            });
        }
        let (e, len) = (ss[0], ss[1]);
        let (k, wcols) = (ws[0], ws[1]);
        if wcols != e * window || bs[0] != k || window == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv1d_maxpool",
                lhs: vec![e * window, k],
                rhs: vec![wcols, bs[0]],
            });
        }
        let padded = len.max(window);
        let positions = padded - window + 1;
        let sd = self.data(seq);
        let wd = self.data(weight);
        let bd = self.data(bias);
        let mut out = Vec::with_capacity(k);
        let mut argmax = Vec::with_capacity(k);
        for f in 0..k {
            let wrow = &wd[f * wcols..(f + 1) * wcols];
            let mut best = S::neg_infinity();
            let mut arg = 0usize;
            for p in 0..positions {
                let mut acc = bd[f];
                for o in 0..window {
                    let c = p + o;
                    if c >= len {
                        break; // zero padding contributes nothing
                    }
                    for r in 0..e {
                        acc += wrow[o * e + r] * sd[r * len + c];
                    }
                }
                if acc > best {
                    best = acc;
                    arg = p;
                }
            }
            out.push(best);
            argmax.push(arg);
        }
        let rg = self.rg(seq) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            Tensor::vector(out),
            rg,
            Op::ConvMaxPool {
                seq,
                weight,
                bias,
                window,
                argmax,
            },
        ))
    }

    /// Same convolution+maxpool, but each position's input is a sparse
    /// count vector over `buckets` ids instead of a tape value.
    pub fn sparse_conv_maxpool(
        &mut self,
        weight: Value,
        bias: Value,
        words: Vec<Vec<(u32, S)>>,
        buckets: usize,
        window: usize,
    ) -> Result<Value> {
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if ws.len() != 2 || ws[1] != buckets * window || bs.len() != 1 || bs[0] != ws[0] {
            return Err(Error::ShapeMismatch {
                op: "sparse_conv_maxpool",
                lhs: ws,
                rhs: vec![buckets * window, bs.first().copied().unwrap_or(0)],
            });
        }
        if words.is_empty() {
            return Err(Error::EmptyInput("sparse_conv_maxpool"));
        }
        let k = ws[0];
        let len = words.len();
        let padded = len.max(window);
        let positions = padded - window + 1;
        let wd = self.data(weight);
        let bd = self.data(bias);
        let mut out = Vec::with_capacity(k);
        let mut argmax = Vec::with_capacity(k);
        for f in 0..k {
            let wrow = &wd[f * ws[1]..(f + 1) * ws[1]];
            let mut best = S::neg_infinity();
            let mut arg = 0usize;
            for p in 0..positions {
                let mut acc = bd[f];
                for o in 0..window {
                    let c = p + o;
                    if c >= len {
                        break;
                    }
                    for &(id, cnt) in &words[c] {
                        acc += wrow[o * buckets + id as usize] * cnt;
                    }
                }
                if acc > best {
                    best = acc;
                    arg = p;
                }
            }
            out.push(best);
            argmax.push(arg);
        }
        let rg = self.rg(weight) || self.rg(bias);
        Ok(self.push(
            Tensor::vector(out),
            rg,
            Op::SparseConvMaxPool {
                weight,
                bias,
                words,
                buckets,
                window,
                argmax,
            },
        ))
    }

    /// Inverted dropout: during training each element is kept with
    /// probability 1−rate and scaled by 1/(1−rate); at inference the
    /// input passes through unchanged.
    pub fn dropout(&mut self, x: Value, rate: f64, training: bool) -> Result<Value> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let mask: Vec<bool> = (0..self.data(x).len())
            .map(|_| self.rng.random::<f64>() >= rate)
            .collect();
        let inv_keep = S::from_f64(1.0 / keep);
        let data: Vec<S> = self
            .data(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m { v * inv_keep } else { S::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, data)?,
            rg,
            Op::Dropout { x, inv_keep, mask },
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar root. Returns gradients for all
    /// `requires_grad` leaves. A tape can only run backward once.
    pub fn backward(&mut self, root: Value) -> Result<Gradients<S>> {
        if self.spent {
            return Err(Error::BackwardConsumed);
        }
        if self.nodes[root.0].data.numel() != 1 {
            return Err(Error::NonScalarRoot {
                shape: self.shape(root).to_vec(),
            });
        }
        self.spent = true;
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![S::one()]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<S>>], v: Value, f: impl FnOnce(&mut [S])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![S::zero(); self.nodes[v.0].data.numel()]);
        }
        f(slot.as_mut().unwrap());
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let out = self.nodes[i].data.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (p, q, r) = match (sa.len(), sb.len()) {
                    (2, 2) => (sa[0], sa[1], sb[1]),
                    (2, 1) => (sa[0], sa[1], 1),
                    (1, 2) => (1, sa[0], sb[1]),
                    _ => unreachable!(),
                };
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |ga| mm_nt(g, bd, p, r, q, ga));
                self.accumulate(grads, *b, |gb| mm_tn(ad, g, p, q, r, gb));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| axpy(ga, g, S::one()));
                self.accumulate(grads, *b, |gb| axpy(gb, g, S::one()));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| axpy(ga, g, S::one()));
                self.accumulate(grads, *b, |gb| axpy(gb, g, -S::one()));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |ga| {
                    for ((t, &gi), &bi) in ga.iter_mut().zip(g).zip(bd) {
                        *t += gi * bi;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((t, &gi), &ai) in gb.iter_mut().zip(g).zip(ad) {
                        *t += gi * ai;
                    }
                });
            }
            Op::AddColVec(m, v) => {
                let cols = self.shape(*m)[1];
                self.accumulate(grads, *m, |gm| axpy(gm, g, S::one()));
                self.accumulate(grads, *v, |gv| {
                    for (i, t) in gv.iter_mut().enumerate() {
                        for j in 0..cols {
                            *t += g[i * cols + j];
                        }
                    }
                });
            }
            Op::AddRowVec(m, v) => {
                let (rows, cols) = (self.shape(*m)[0], self.shape(*m)[1]);
                self.accumulate(grads, *m, |gm| axpy(gm, g, S::one()));
                self.accumulate(grads, *v, |gv| {
                    for (j, t) in gv.iter_mut().enumerate() {
                        for i in 0..rows {
                            *t += g[i * cols + j];
                        }
                    }
                });
            }
            Op::MulColVec(m, v) => {
                let cols = self.shape(*m)[1];
                let (md, vd) = (self.data(*m), self.data(*v));
                self.accumulate(grads, *m, |gm| {
                    for i in 0..vd.len() {
                        let vi = vd[i];
                        for j in 0..cols {
                            gm[i * cols + j] += g[i * cols + j] * vi;
                        }
                    }
                });
                self.accumulate(grads, *v, |gv| {
                    for (i, t) in gv.iter_mut().enumerate() {
                        for j in 0..cols {
                            *t += g[i * cols + j] * md[i * cols + j];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                self.accumulate(grads, *x, |gx| {
                    for ((t, &gi), &y) in gx.iter_mut().zip(g).zip(out) {
                        *t += gi * y * (S::one() - y);
                    }
                });
            }
            Op::Tanh(x) => {
                self.accumulate(grads, *x, |gx| {
                    for ((t, &gi), &y) in gx.iter_mut().zip(g).zip(out) {
                        *t += gi * (S::one() - y * y);
                    }
                });
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                self.accumulate(grads, *x, |gx| {
                    for ((t, &gi), &v) in gx.iter_mut().zip(g).zip(xd) {
                        if v > S::zero() {
                            *t += gi;
                        }
                    }
                });
            }
            Op::Log(x) => {
                let xd = self.data(*x);
                let floor = S::from_f64(LOG_FLOOR);
                self.accumulate(grads, *x, |gx| {
                    for ((t, &gi), &v) in gx.iter_mut().zip(g).zip(xd) {
                        if v > floor {
                            *t += gi / v;
                        }
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, |gx| axpy(gx, g, c));
            }
            Op::AddConst(x, _) => {
                self.accumulate(grads, *x, |gx| axpy(gx, g, S::one()));
            }
            Op::Softmax { x, axis } => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, |gx| softmax_backward(out, g, &shape, *axis, gx));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0usize;
                for &p in parts {
                    let n = self.nodes[p.0].data.numel();
                    let gp = &g[offset..offset + n];
                    self.accumulate(grads, p, |gslot| axpy(gslot, gp, S::one()));
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let n = parts.len();
                for (t, &p) in parts.iter().enumerate() {
                    self.accumulate(grads, p, |gv| {
                        for (r, slot) in gv.iter_mut().enumerate() {
                            *slot += g[r * n + t];
                        }
                    });
                }
            }
            Op::Col { x, j } => {
                let cols = self.shape(*x)[1];
                self.accumulate(grads, *x, |gx| {
                    for (i, &gi) in g.iter().enumerate() {
                        gx[i * cols + j] += gi;
                    }
                });
            }
            Op::Slice { x, from } => {
                self.accumulate(grads, *x, |gx| {
                    for (o, &gi) in g.iter().enumerate() {
                        gx[from + o] += gi;
                    }
                });
            }
            Op::Transpose(x) => {
                let (rows, cols) = (self.shape(*x)[0], self.shape(*x)[1]);
                self.accumulate(grads, *x, |gx| {
                    for i in 0..rows {
                        for j in 0..cols {
                            gx[i * cols + j] += g[j * rows + i];
                        }
                    }
                });
            }
            Op::MaxAxis { x, axis, argmax } => {
                let cols = self.shape(*x)[1];
                self.accumulate(grads, *x, |gx| {
                    for (o, (&arg, &gi)) in argmax.iter().zip(g).enumerate() {
                        let idx = if *axis == 0 { arg * cols + o } else { o * cols + arg };
                        gx[idx] += gi;
                    }
                });
            }
            Op::Gather { table, idx } => {
                let dim = self.shape(*table)[1];
                self.accumulate(grads, *table, |gt| {
                    for (row, &i) in idx.iter().enumerate() {
                        let src = &g[row * dim..(row + 1) * dim];
                        let dst = &mut gt[i * dim..(i + 1) * dim];
                        axpy(dst, src, S::one());
                    }
                });
            }
            Op::SumAll(x) => {
                let gi = g[0];
                self.accumulate(grads, *x, |gx| {
                    for t in gx.iter_mut() {
                        *t += gi;
                    }
                });
            }
            Op::Dot(a, b) => {
                let gi = g[0];
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |ga| axpy(ga, bd, gi));
                self.accumulate(grads, *b, |gb| axpy(gb, ad, gi));
            }
            Op::Cosine(a, b) => {
                let gi = g[0];
                let (ad, bd) = (self.data(*a), self.data(*b));
                let c = out[0];
                if let Some((na, nb)) = cosine_norms(ad, bd) {
                    self.accumulate(grads, *a, |ga| {
                        for (t, (&av, &bv)) in ga.iter_mut().zip(ad.iter().zip(bd)) {
                            *t += gi * (bv / (na * nb) - c * av / (na * na));
                        }
                    });
                    self.accumulate(grads, *b, |gb| {
                        for (t, (&av, &bv)) in gb.iter_mut().zip(ad.iter().zip(bd)) {
                            *t += gi * (av / (na * nb) - c * bv / (nb * nb));
                        }
                    });
                }
            }
            Op::CosineCols { m, v } => {
                let (rows, cols) = (self.shape(*m)[0], self.shape(*m)[1]);
                let (md, vd) = (self.data(*m), self.data(*v));
                let mut colbuf = vec![S::zero(); rows];
                for j in 0..cols {
                    for i in 0..rows {
                        colbuf[i] = md[i * cols + j];
                    }
                    let gi = g[j];
                    let c = out[j];
                    if let Some((nc, nv)) = cosine_norms(&colbuf, vd) {
                        let cb = &colbuf;
                        self.accumulate(grads, *m, |gm| {
                            for i in 0..rows {
                                gm[i * cols + j] += gi * (vd[i] / (nc * nv) - c * cb[i] / (nc * nc));
                            }
                        });
                        self.accumulate(grads, *v, |gv| {
                            for i in 0..rows {
                                gv[i] += gi * (cb[i] / (nc * nv) - c * vd[i] / (nv * nv));
                            }
                        });
                    }
                }
            }
            Op::ConvMaxPool {
                seq,
                weight,
                bias,
                window,
                argmax,
            } => {
                let (e, len) = (self.shape(*seq)[0], self.shape(*seq)[1]);
                let wcols = e * window;
                let (sd, wd) = (self.data(*seq), self.data(*weight));
                for (f, (&p, &gi)) in argmax.iter().zip(g).enumerate() {
                    if gi == S::zero() {
                        continue;
                    }
                    self.accumulate(grads, *bias, |gb| gb[f] += gi);
                    self.accumulate(grads, *weight, |gw| {
                        let grow = &mut gw[f * wcols..(f + 1) * wcols];
                        for o in 0..*window {
                            let c = p + o;
                            if c >= len {
                                break;
                            }
                            for r in 0..e {
                                grow[o * e + r] += gi * sd[r * len + c];
                            }
                        }
                    });
                    self.accumulate(grads, *seq, |gs| {
                        let wrow = &wd[f * wcols..(f + 1) * wcols];
                        for o in 0..*window {
                            let c = p + o;
                            if c >= len {
                                break;
                            }
                            for r in 0..e {
                                gs[r * len + c] += gi * wrow[o * e + r];
                            }
                        }
                    });
                }
            }
            Op::SparseConvMaxPool {
                weight,
                bias,
                words,
                buckets,
                window,
                argmax,
            } => {
                let wcols = buckets * window;
                let len = words.len();
                for (f, (&p, &gi)) in argmax.iter().zip(g).enumerate() {
                    if gi == S::zero() {
                        continue;
                    }
                    self.accumulate(grads, *bias, |gb| gb[f] += gi);
                    self.accumulate(grads, *weight, |gw| {
                        let grow = &mut gw[f * wcols..(f + 1) * wcols];
                        for o in 0..*window {
                            let c = p + o;
                            if c >= len {
                                break;
                            }
                            for &(id, cnt) in &words[c] {
                                grow[o * buckets + id as usize] += gi * cnt;
                            }
                        }
                    });
                }
            }
            Op::Dropout { x, inv_keep, mask } => {
                let ik = *inv_keep;
                self.accumulate(grads, *x, |gx| {
                    for ((t, &gi), &m) in gx.iter_mut().zip(g).zip(mask) {
                        if m {
                            *t += gi * ik;
                        }
                    }
                });
            }
        }
    }
}

const LOG_FLOOR: f64 = 1e-12;

fn sigmoid_stable<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// out += a·b for row-major a [p,q], b [q,r].
fn mm<S: Scalar>(a: &[S], b: &[S], p: usize, q: usize, r: usize, out: &mut [S]) {
    for i in 0..p {
        let orow = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            let brow = &b[k * r..(k + 1) * r];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// out += a·bᵀ for a [p,r], b [q,r], out [p,q].
fn mm_nt<S: Scalar>(a: &[S], b: &[S], p: usize, r: usize, q: usize, out: &mut [S]) {
    for i in 0..p {
        let arow = &a[i * r..(i + 1) * r];
        for k in 0..q {
            let brow = &b[k * r..(k + 1) * r];
            let mut acc = S::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            out[i * q + k] += acc;
        }
    }
}

/// out += aᵀ·c for a [p,q], c [p,r], out [q,r].
fn mm_tn<S: Scalar>(a: &[S], c: &[S], p: usize, q: usize, r: usize, out: &mut [S]) {
    for i in 0..p {
        let crow = &c[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            let orow = &mut out[k * r..(k + 1) * r];
            for (o, &cv) in orow.iter_mut().zip(crow) {
                *o += aik * cv;
            }
        }
    }
}

fn axpy<S: Scalar>(target: &mut [S], src: &[S], c: S) {
    for (t, &s) in target.iter_mut().zip(src) {
        *t += s * c;
    }
}

fn cosine_norms<S: Scalar>(a: &[S], b: &[S]) -> Option<(S, S)> {
    let na = a.iter().map(|&v| v * v).sum::<S>().sqrt();
    let nb = b.iter().map(|&v| v * v).sum::<S>().sqrt();
    if na == S::zero() || nb == S::zero() {
        None
    } else {
        Some((na, nb))
    }
}

fn cosine_val<S: Scalar>(a: &[S], b: &[S]) -> S {
    match cosine_norms(a, b) {
        None => S::zero(),
        Some((na, nb)) => {
            let dot = a.iter().zip(b).map(|(&x, &y)| x * y).sum::<S>();
            dot / (na * nb)
        }
    }
}

fn softmax_slice<S: Scalar>(xs: &[usize], src: &[S], out: &mut [S], indices: impl Fn(usize) -> usize) {
    let n = xs.len();
    let mut maxv = S::neg_infinity();
    for i in 0..n {
        maxv = maxv.max(src[indices(i)]);
    }
    let mut total = S::zero();
    for i in 0..n {
        let e = (src[indices(i)] - maxv).exp();
        out[indices(i)] = e;
        total += e;
    }
    for i in 0..n {
        out[indices(i)] /= total;
    }
}

fn softmax_forward<S: Scalar>(src: &[S], shape: &[usize], axis: usize) -> Result<Vec<S>> {
    let mut out = vec![S::zero(); src.len()];
    match shape.len() {
        1 => {
            let idx: Vec<usize> = (0..shape[0]).collect();
            softmax_slice(&idx, src, &mut out, |i| i);
        }
        2 => {
            let (rows, cols) = (shape[0], shape[1]);
            match axis {
                1 => {
                    for i in 0..rows {
                        let idx: Vec<usize> = (0..cols).collect();
                        softmax_slice(&idx, src, &mut out, |j| i * cols + j);
                    }
                }
                0 => {
                    for j in 0..cols {
                        let idx: Vec<usize> = (0..rows).collect();
                        softmax_slice(&idx, src, &mut out, |i| i * cols + j);
                    }
                }
                _ => {
                    return Err(Error::ShapeMismatch {
                        op: "softmax",
                        lhs: shape.to_vec(),
                        rhs: vec![axis],
                    })
                }
            }
        }
        _ => {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                lhs: shape.to_vec(),
                rhs: vec![axis],
            })
        }
    }
    Ok(out)
}

/// dx_j = y_j (g_j − Σ_i g_i y_i), per slice along the softmax axis.
fn softmax_backward<S: Scalar>(y: &[S], g: &[S], shape: &[usize], axis: usize, gx: &mut [S]) {
    let mut apply = |index: &dyn Fn(usize) -> usize, n: usize| {
        let mut inner = S::zero();
        for i in 0..n {
            let k = index(i);
            inner += g[k] * y[k];
        }
        for i in 0..n {
            let k = index(i);
            gx[k] += y[k] * (g[k] - inner);
        }
    };
    match shape.len() {
        1 => apply(&|i| i, shape[0]),
        2 => {
            let (rows, cols) = (shape[0], shape[1]);
            if axis == 1 {
                for i in 0..rows {
                    apply(&|j| i * cols + j, cols);
                }
            } else {
                for j in 0..cols {
                    apply(&|i| i * cols + j, rows);
                }
            }
        }
        _ => unreachable!(),
    }
}
