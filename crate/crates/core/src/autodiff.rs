//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! Every tensor lives on a [`Tape`] as a dense row-major `f64` array plus a
//! shape. Forward ops execute eagerly and append a node; [`Tape::grad`] walks
//! the tape in reverse and expresses each vector-Jacobian product *in terms of
//! tape ops*, so the backward pass is itself recorded and the returned
//! gradients can be differentiated again (double backprop).
//!
//! Conventions pinned here and by the tests below:
//! - rank-0 values have shape `[]` and data length 1
//! - `relu'(0) = 0`; `leaky_relu` slope below zero is the constructor argument
//! - `max` and `scatter_max` route their gradient to the first maximal element

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("{op}: index {index} out of bounds for {rows} rows")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        rows: usize,
    },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    BadLeaf {
        op: &'static str,
        len: usize,
        shape: Vec<usize>,
    },
    #[error("grad: output must be a scalar, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("grad: wrt value does not require gradients")]
    WrtNotDifferentiable,
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`]. Only valid on the tape that
/// created it; ops panic on a handle from another tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value {
    tape: u64,
    idx: u32,
}

impl Value {
    fn id(self) -> usize {
        self.idx as usize
    }
}

/// How relu backward behaves during [`Tape::grad_with`]. The non-standard
/// modes implement deconvolution and guided backpropagation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReluBackward {
    /// Gradient gated by the forward activation sign.
    Standard,
    /// Only positive upstream gradients pass; the forward activation is ignored.
    Deconv,
    /// Positive upstream gradient AND positive forward activation required.
    Guided,
}

#[derive(Debug, Clone, Copy)]
pub struct GradOptions {
    /// When true the returned gradients are themselves differentiable.
    pub create_record: bool,
    pub relu_mode: ReluBackward,
}

impl Default for GradOptions {
    fn default() -> Self {
        GradOptions {
            create_record: false,
            relu_mode: ReluBackward::Standard,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul,
    Transpose,
    Reshape,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar(f64),
    BroadcastTo,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Exp,
    Log,
    Sum,
    Mean,
    Max,
    IndexSelect(Arc<Vec<usize>>),
    ScatterSum(Arc<Vec<usize>>),
    ScatterMean(Arc<Vec<usize>>),
    ScatterMax(Arc<Vec<usize>>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<u32>,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

/// An append-only record of tensor operations, topologically ordered by
/// construction. Single-writer; independent tapes on different threads do not
/// interact.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    no_grad_depth: u32,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `(rows, cols)` view used by the row-indexed ops: a rank-1 value is treated
/// as `len` rows of width 1, rank-2 as `[rows, cols]`.
fn row_view(shape: &[usize]) -> Option<(usize, usize)> {
    match shape.len() {
        1 => Some((shape[0], 1)),
        2 => Some((shape[0], shape[1])),
        _ => None,
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            no_grad_depth: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Value) -> usize {
        assert_eq!(
            v.tape, self.id,
            "value belongs to a different tape (record generation mismatch)"
        );
        v.id()
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        &self.nodes[self.check(v)].shape
    }

    pub fn data(&self, v: Value) -> &[f64] {
        &self.nodes[self.check(v)].data
    }

    pub fn requires_grad(&self, v: Value) -> bool {
        self.nodes[self.check(v)].requires_grad
    }

    /// The single element of a rank-0 or one-element value.
    pub fn scalar_value(&self, v: Value) -> f64 {
        let n = &self.nodes[self.check(v)];
        debug_assert_eq!(n.data.len(), 1, "scalar_value on non-scalar");
        n.data[0]
    }

    fn push(&mut self, op: Op, inputs: Vec<u32>, shape: Vec<usize>, data: Vec<f64>) -> Value {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = self.no_grad_depth == 0
            && inputs
                .iter()
                .any(|&i| self.nodes[i as usize].requires_grad);
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            data,
            requires_grad,
        });
        Value { tape: self.id, idx }
    }

    // ---- leaves -----------------------------------------------------------

    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Value> {
        if data.len() != numel(shape) {
            return Err(AutodiffError::BadLeaf {
                op: "leaf",
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        let rg = requires_grad && self.no_grad_depth == 0;
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            shape: shape.to_vec(),
            data,
            requires_grad: rg,
        });
        Ok(Value { tape: self.id, idx })
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Value {
        self.leaf(data, shape, false).expect("constant shape/data mismatch")
    }

    pub fn scalar(&mut self, c: f64) -> Value {
        self.constant(vec![c], &[])
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Value {
        self.constant(vec![0.0; numel(shape)], shape)
    }

    pub fn ones(&mut self, shape: &[usize]) -> Value {
        self.constant(vec![1.0; numel(shape)], shape)
    }

    // ---- primitive forward ops -------------------------------------------

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ia, ib) = (self.check(a), self.check(b));
        let (sa, sb) = (&self.nodes[ia].shape, &self.nodes[ib].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                details: format!("{:?} x {:?}", sa, sb),
            });
        }
        let (r, k, c) = (sa[0], sa[1], sb[1]);
        let da = &self.nodes[ia].data;
        let db = &self.nodes[ib].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let arow = &da[i * k..(i + 1) * k];
            let orow = &mut out[i * c..(i + 1) * c];
            for (kk, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &db[kk * c..(kk + 1) * c];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        Ok(self.push(Op::Matmul, vec![a.idx, b.idx], vec![r, c], out))
    }

    pub fn transpose(&mut self, a: Value) -> Result<Value> {
        let ia = self.check(a);
        let s = &self.nodes[ia].shape;
        if s.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "transpose",
                details: format!("expected rank 2, got {:?}", s),
            });
        }
        let (r, c) = (s[0], s[1]);
        let d = &self.nodes[ia].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        Ok(self.push(Op::Transpose, vec![a.idx], vec![c, r], out))
    }

    pub fn reshape(&mut self, a: Value, shape: &[usize]) -> Result<Value> {
        let ia = self.check(a);
        if numel(&self.nodes[ia].shape) != numel(shape) {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                details: format!("{:?} -> {:?}", self.nodes[ia].shape, shape),
            });
        }
        let data = self.nodes[ia].data.clone();
        Ok(self.push(Op::Reshape, vec![a.idx], shape.to_vec(), data))
    }

    fn elementwise2(
        &mut self,
        op: Op,
        name: &'static str,
        a: Value,
        b: Value,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Value> {
        let (ia, ib) = (self.check(a), self.check(b));
        if self.nodes[ia].shape != self.nodes[ib].shape {
            return Err(AutodiffError::ShapeMismatch {
                op: name,
                details: format!("{:?} vs {:?}", self.nodes[ia].shape, self.nodes[ib].shape),
            });
        }
        let out: Vec<f64> = self.nodes[ia]
            .data
            .iter()
            .zip(&self.nodes[ib].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[ia].shape.clone();
        Ok(self.push(op, vec![a.idx, b.idx], shape, out))
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.elementwise2(Op::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.elementwise2(Op::Sub, "sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.elementwise2(Op::Mul, "mul", a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Value, b: Value) -> Result<Value> {
        self.elementwise2(Op::Div, "div", a, b, |x, y| x / y)
    }

    fn elementwise1(&mut self, op: Op, a: Value, f: impl Fn(f64) -> f64) -> Value {
        let ia = self.check(a);
        let out: Vec<f64> = self.nodes[ia].data.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[ia].shape.clone();
        self.push(op, vec![a.idx], shape, out)
    }

    pub fn neg(&mut self, a: Value) -> Value {
        self.elementwise1(Op::Neg, a, |x| -x)
    }

    pub fn scale(&mut self, a: Value, c: f64) -> Value {
        self.elementwise1(Op::Scale(c), a, |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Value, c: f64) -> Value {
        self.elementwise1(Op::AddScalar(c), a, |x| x + c)
    }

    pub fn relu(&mut self, a: Value) -> Value {
        self.elementwise1(Op::Relu, a, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, a: Value, slope: f64) -> Value {
        self.elementwise1(Op::LeakyRelu(slope), a, move |x| {
            if x > 0.0 {
                x
            } else {
                slope * x
            }
        })
    }

    pub fn sigmoid(&mut self, a: Value) -> Value {
        self.elementwise1(Op::Sigmoid, a, |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn exp(&mut self, a: Value) -> Value {
        self.elementwise1(Op::Exp, a, f64::exp)
    }

    pub fn log(&mut self, a: Value) -> Value {
        self.elementwise1(Op::Log, a, f64::ln)
    }

    /// Broadcast a one-element value to an arbitrary shape.
    pub fn broadcast_to(&mut self, a: Value, shape: &[usize]) -> Result<Value> {
        let ia = self.check(a);
        if self.nodes[ia].data.len() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "broadcast_to",
                details: format!("source must be scalar, got {:?}", self.nodes[ia].shape),
            });
        }
        let v = self.nodes[ia].data[0];
        Ok(self.push(
            Op::BroadcastTo,
            vec![a.idx],
            shape.to_vec(),
            vec![v; numel(shape)],
        ))
    }

    pub fn sum(&mut self, a: Value) -> Value {
        let ia = self.check(a);
        let s: f64 = self.nodes[ia].data.iter().sum();
        self.push(Op::Sum, vec![a.idx], vec![], vec![s])
    }

    pub fn mean(&mut self, a: Value) -> Value {
        let ia = self.check(a);
        let n = self.nodes[ia].data.len().max(1);
        let s: f64 = self.nodes[ia].data.iter().sum::<f64>() / n as f64;
        self.push(Op::Mean, vec![a.idx], vec![], vec![s])
    }

    /// Reduce to the maximum element; the gradient routes to the first
    /// maximal element on ties.
    pub fn max(&mut self, a: Value) -> Value {
        let ia = self.check(a);
        let m = self.nodes[ia]
            .data
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        self.push(Op::Max, vec![a.idx], vec![], vec![m])
    }

    /// Gather rows of `a` (rank 1 or 2) by `index`.
    pub fn index_select(&mut self, a: Value, index: &[usize]) -> Result<Value> {
        let arc = Arc::new(index.to_vec());
        self.index_select_arc(a, arc)
    }

    fn index_select_arc(&mut self, a: Value, index: Arc<Vec<usize>>) -> Result<Value> {
        let ia = self.check(a);
        let (rows, w) = row_view(&self.nodes[ia].shape).ok_or(AutodiffError::ShapeMismatch {
            op: "index_select",
            details: format!("expected rank 1 or 2, got {:?}", self.nodes[ia].shape),
        })?;
        let mut out = Vec::with_capacity(index.len() * w);
        for &i in index.iter() {
            if i >= rows {
                return Err(AutodiffError::IndexOutOfBounds {
                    op: "index_select",
                    index: i,
                    rows,
                });
            }
            out.extend_from_slice(&self.nodes[ia].data[i * w..(i + 1) * w]);
        }
        let shape = if self.nodes[ia].shape.len() == 1 {
            vec![index.len()]
        } else {
            vec![index.len(), w]
        };
        Ok(self.push(Op::IndexSelect(index), vec![a.idx], shape, out))
    }

    fn scatter_common(
        &mut self,
        name: &'static str,
        v: Value,
        index: &[usize],
        out_rows: usize,
    ) -> Result<(usize, usize, Vec<usize>)> {
        let iv = self.check(v);
        let (rows, w) = row_view(&self.nodes[iv].shape).ok_or(AutodiffError::ShapeMismatch {
            op: name,
            details: format!("expected rank 1 or 2, got {:?}", self.nodes[iv].shape),
        })?;
        if index.len() != rows {
            return Err(AutodiffError::ShapeMismatch {
                op: name,
                details: format!("index length {} vs {} rows", index.len(), rows),
            });
        }
        for &i in index {
            if i >= out_rows {
                return Err(AutodiffError::IndexOutOfBounds {
                    op: name,
                    index: i,
                    rows: out_rows,
                });
            }
        }
        let out_shape = if self.nodes[iv].shape.len() == 1 {
            vec![out_rows]
        } else {
            vec![out_rows, w]
        };
        Ok((rows, w, out_shape))
    }

    /// Sum rows of `v` into `out_rows` segments given by `index`.
    pub fn scatter_sum(&mut self, v: Value, index: &[usize], out_rows: usize) -> Result<Value> {
        let (rows, w, out_shape) = self.scatter_common("scatter_sum", v, index, out_rows)?;
        let iv = self.check(v);
        let mut out = vec![0.0; out_rows * w];
        for r in 0..rows {
            let seg = index[r];
            for j in 0..w {
                out[seg * w + j] += self.nodes[iv].data[r * w + j];
            }
        }
        let arc = Arc::new(index.to_vec());
        Ok(self.push(Op::ScatterSum(arc), vec![v.idx], out_shape, out))
    }

    /// Mean of rows per segment; empty segments yield zero.
    pub fn scatter_mean(&mut self, v: Value, index: &[usize], out_rows: usize) -> Result<Value> {
        let (rows, w, out_shape) = self.scatter_common("scatter_mean", v, index, out_rows)?;
        let iv = self.check(v);
        let mut out = vec![0.0; out_rows * w];
        let mut count = vec![0usize; out_rows];
        for r in 0..rows {
            let seg = index[r];
            count[seg] += 1;
            for j in 0..w {
                out[seg * w + j] += self.nodes[iv].data[r * w + j];
            }
        }
        for seg in 0..out_rows {
            if count[seg] > 0 {
                let inv = 1.0 / count[seg] as f64;
                for j in 0..w {
                    out[seg * w + j] *= inv;
                }
            }
        }
        let arc = Arc::new(index.to_vec());
        Ok(self.push(Op::ScatterMean(arc), vec![v.idx], out_shape, out))
    }

    /// Per-segment max; empty segments yield zero, gradient routes to the
    /// first maximal row of each segment.
    pub fn scatter_max(&mut self, v: Value, index: &[usize], out_rows: usize) -> Result<Value> {
        let (rows, w, out_shape) = self.scatter_common("scatter_max", v, index, out_rows)?;
        let iv = self.check(v);
        let mut out = vec![f64::NEG_INFINITY; out_rows * w];
        let mut seen = vec![false; out_rows];
        for r in 0..rows {
            let seg = index[r];
            seen[seg] = true;
            for j in 0..w {
                let x = self.nodes[iv].data[r * w + j];
                if x > out[seg * w + j] {
                    out[seg * w + j] = x;
                }
            }
        }
        for seg in 0..out_rows {
            if !seen[seg] {
                for j in 0..w {
                    out[seg * w + j] = 0.0;
                }
            }
        }
        let arc = Arc::new(index.to_vec());
        Ok(self.push(Op::ScatterMax(arc), vec![v.idx], out_shape, out))
    }

    // ---- composites --------------------------------------------------------

    /// Numerically-stable softmax over a rank-1 value.
    pub fn softmax(&mut self, z: Value) -> Result<Value> {
        let shape = self.shape(z).to_vec();
        let m = self.max(z);
        let mb = self.broadcast_to(m, &shape)?;
        let zs = self.sub(z, mb)?;
        let e = self.exp(zs);
        let s = self.sum(e);
        let sb = self.broadcast_to(s, &shape)?;
        self.div(e, sb)
    }

    /// Numerically-stable log-softmax over a rank-1 value.
    pub fn log_softmax(&mut self, z: Value) -> Result<Value> {
        let shape = self.shape(z).to_vec();
        let m = self.max(z);
        let mb = self.broadcast_to(m, &shape)?;
        let zs = self.sub(z, mb)?;
        let e = self.exp(zs);
        let s = self.sum(e);
        let lse = self.log(s);
        let lseb = self.broadcast_to(lse, &shape)?;
        self.sub(zs, lseb)
    }

    /// Concatenate two rank-2 values along columns.
    pub fn concat_cols(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ra, ca) = match *self.shape(a) {
            [r, c] => (r, c),
            _ => {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    details: format!("expected rank 2, got {:?}", self.shape(a)),
                })
            }
        };
        let (rb, cb) = match *self.shape(b) {
            [r, c] => (r, c),
            _ => {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    details: format!("expected rank 2, got {:?}", self.shape(b)),
                })
            }
        };
        if ra != rb {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat_cols",
                details: format!("row counts differ: {} vs {}", ra, rb),
            });
        }
        let total = ca + cb;
        let mut pa = vec![0.0; ca * total];
        for i in 0..ca {
            pa[i * total + i] = 1.0;
        }
        let mut pb = vec![0.0; cb * total];
        for i in 0..cb {
            pb[i * total + ca + i] = 1.0;
        }
        let pa = self.constant(pa, &[ca, total]);
        let pb = self.constant(pb, &[cb, total]);
        let left = self.matmul(a, pa)?;
        let right = self.matmul(b, pb)?;
        self.add(left, right)
    }

    /// Concatenate two rank-2 values along rows.
    pub fn concat_rows(&mut self, a: Value, b: Value) -> Result<Value> {
        let ta = self.transpose(a)?;
        let tb = self.transpose(b)?;
        let cat = self.concat_cols(ta, tb)?;
        self.transpose(cat)
    }

    /// Columns `[start, end)` of a rank-2 value.
    pub fn slice_cols(&mut self, a: Value, start: usize, end: usize) -> Result<Value> {
        let (_, c) = match *self.shape(a) {
            [r, c] if start <= end && end <= c => (r, c),
            _ => {
                return Err(AutodiffError::ShapeMismatch {
                    op: "slice_cols",
                    details: format!("[{start}, {end}) of {:?}", self.shape(a)),
                })
            }
        };
        let w = end - start;
        let mut sel = vec![0.0; c * w];
        for j in 0..w {
            sel[(start + j) * w + j] = 1.0;
        }
        let sel = self.constant(sel, &[c, w]);
        self.matmul(a, sel)
    }

    /// Mean over rows: `[n, d] -> [1, d]`.
    pub fn mean_rows(&mut self, a: Value) -> Result<Value> {
        let n = match *self.shape(a) {
            [r, _] => r,
            _ => {
                return Err(AutodiffError::ShapeMismatch {
                    op: "mean_rows",
                    details: format!("expected rank 2, got {:?}", self.shape(a)),
                })
            }
        };
        let ones = self.constant(vec![1.0 / n as f64; n], &[1, n]);
        self.matmul(ones, a)
    }

    /// Sum over columns: `[n, d] -> [n]`.
    pub fn sum_cols(&mut self, a: Value) -> Result<Value> {
        let (n, d) = match *self.shape(a) {
            [r, c] => (r, c),
            _ => {
                return Err(AutodiffError::ShapeMismatch {
                    op: "sum_cols",
                    details: format!("expected rank 2, got {:?}", self.shape(a)),
                })
            }
        };
        let ones = self.constant(vec![1.0; d], &[d, 1]);
        let s = self.matmul(a, ones)?;
        self.reshape(s, &[n])
    }

    /// Repeat a rank-1 value as columns: `[m] -> [m, d]`.
    pub fn broadcast_col(&mut self, v: Value, d: usize) -> Result<Value> {
        let m = match *self.shape(v) {
            [m] => m,
            _ => {
                return Err(AutodiffError::ShapeMismatch {
                    op: "broadcast_col",
                    details: format!("expected rank 1, got {:?}", self.shape(v)),
                })
            }
        };
        let col = self.reshape(v, &[m, 1])?;
        let ones = self.constant(vec![1.0; d], &[1, d]);
        self.matmul(col, ones)
    }

    /// Add a bias row vector to every row: `[n, d] + [d]`.
    pub fn add_bias(&mut self, a: Value, bias: Value) -> Result<Value> {
        let (n, d) = match *self.shape(a) {
            [r, c] => (r, c),
            _ => {
                return Err(AutodiffError::ShapeMismatch {
                    op: "add_bias",
                    details: format!("expected rank 2, got {:?}", self.shape(a)),
                })
            }
        };
        if *self.shape(bias) != [d] {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_bias",
                details: format!("bias {:?} vs width {}", self.shape(bias), d),
            });
        }
        let ones = self.constant(vec![1.0; n], &[n, 1]);
        let brow = self.reshape(bias, &[1, d])?;
        let tiled = self.matmul(ones, brow)?;
        self.add(a, tiled)
    }

    pub fn square(&mut self, a: Value) -> Result<Value> {
        self.mul(a, a)
    }

    // ---- backward -----------------------------------------------------------

    /// Gradients of a scalar `output` with respect to each of `wrt`.
    ///
    /// Unreachable `wrt` values get an exact zero gradient. With
    /// `create_record` the results stay differentiable.
    pub fn grad(&mut self, output: Value, wrt: &[Value], create_record: bool) -> Result<Vec<Value>> {
        self.grad_with(
            output,
            wrt,
            GradOptions {
                create_record,
                relu_mode: ReluBackward::Standard,
            },
        )
    }

    pub fn grad_with(&mut self, output: Value, wrt: &[Value], opts: GradOptions) -> Result<Vec<Value>> {
        let out_id = self.check(output);
        if numel(&self.nodes[out_id].shape) != 1 {
            return Err(AutodiffError::NonScalarOutput(
                self.nodes[out_id].shape.clone(),
            ));
        }
        for &w in wrt {
            let wi = self.check(w);
            if !self.nodes[wi].requires_grad {
                return Err(AutodiffError::WrtNotDifferentiable);
            }
        }

        // Nodes reachable from the output through grad-requiring inputs.
        let frontier_len = out_id + 1;
        let mut active = vec![false; frontier_len];
        if self.nodes[out_id].requires_grad {
            active[out_id] = true;
            for id in (0..=out_id).rev() {
                if !active[id] {
                    continue;
                }
                let inputs = self.nodes[id].inputs.clone();
                for i in inputs {
                    let i = i as usize;
                    if self.nodes[i].requires_grad {
                        active[i] = true;
                    }
                }
            }
        }

        if !opts.create_record {
            self.no_grad_depth += 1;
        }
        let result = self.backward_pass(out_id, &active, opts);
        if !opts.create_record {
            self.no_grad_depth -= 1;
        }
        let adjoint = result?;

        let mut grads = Vec::with_capacity(wrt.len());
        for &w in wrt {
            let wi = w.id();
            match adjoint.get(wi).copied().flatten() {
                Some(g) => grads.push(g),
                None => {
                    let shape = self.nodes[wi].shape.clone();
                    grads.push(self.zeros(&shape));
                }
            }
        }
        Ok(grads)
    }

    fn backward_pass(
        &mut self,
        out_id: usize,
        active: &[bool],
        opts: GradOptions,
    ) -> Result<Vec<Option<Value>>> {
        let mut adjoint: Vec<Option<Value>> = vec![None; out_id + 1];
        if !active[out_id] {
            return Ok(adjoint);
        }
        let out_shape = self.nodes[out_id].shape.clone();
        adjoint[out_id] = Some(self.constant(vec![1.0], &out_shape));

        for id in (0..=out_id).rev() {
            if !active[id] {
                continue;
            }
            let g = match adjoint[id] {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[id].op.clone();
            let inputs: Vec<u32> = self.nodes[id].inputs.clone();
            let this = Value {
                tape: self.id,
                idx: id as u32,
            };
            let input_vals: Vec<Value> = inputs
                .iter()
                .map(|&i| Value {
                    tape: self.id,
                    idx: i,
                })
                .collect();

            let contribs: Vec<(usize, Value)> = match op {
                Op::Leaf => vec![],
                Op::Matmul => {
                    let (a, b) = (input_vals[0], input_vals[1]);
                    let bt = self.transpose(b)?;
                    let at = self.transpose(a)?;
                    let ga = self.matmul(g, bt)?;
                    let gb = self.matmul(at, g)?;
                    vec![(0, ga), (1, gb)]
                }
                Op::Transpose => {
                    let ga = self.transpose(g)?;
                    vec![(0, ga)]
                }
                Op::Reshape => {
                    let shape = self.nodes[inputs[0] as usize].shape.clone();
                    let ga = self.reshape(g, &shape)?;
                    vec![(0, ga)]
                }
                Op::Add => vec![(0, g), (1, g)],
                Op::Sub => {
                    let gb = self.neg(g);
                    vec![(0, g), (1, gb)]
                }
                Op::Mul => {
                    let (a, b) = (input_vals[0], input_vals[1]);
                    let ga = self.mul(g, b)?;
                    let gb = self.mul(g, a)?;
                    vec![(0, ga), (1, gb)]
                }
                Op::Div => {
                    // d(a/b): da = g/b, db = -g*(a/b)/b
                    let (_, b) = (input_vals[0], input_vals[1]);
                    let ga = self.div(g, b)?;
                    let gout = self.mul(g, this)?;
                    let q = self.div(gout, b)?;
                    let gb = self.neg(q);
                    vec![(0, ga), (1, gb)]
                }
                Op::Neg => {
                    let ga = self.neg(g);
                    vec![(0, ga)]
                }
                Op::Scale(c) => {
                    let ga = self.scale(g, c);
                    vec![(0, ga)]
                }
                Op::AddScalar(_) => vec![(0, g)],
                Op::BroadcastTo => {
                    let s = self.sum(g);
                    let shape = self.nodes[inputs[0] as usize].shape.clone();
                    let ga = self.reshape(s, &shape)?;
                    vec![(0, ga)]
                }
                Op::Relu => {
                    let x = input_vals[0];
                    match opts.relu_mode {
                        ReluBackward::Standard => {
                            let mask = self.positive_mask(x);
                            let ga = self.mul(g, mask)?;
                            vec![(0, ga)]
                        }
                        ReluBackward::Deconv => {
                            let ga = self.relu(g);
                            vec![(0, ga)]
                        }
                        ReluBackward::Guided => {
                            let gp = self.relu(g);
                            let mask = self.positive_mask(x);
                            let ga = self.mul(gp, mask)?;
                            vec![(0, ga)]
                        }
                    }
                }
                Op::LeakyRelu(slope) => {
                    let ix = inputs[0] as usize;
                    let mask: Vec<f64> = self.nodes[ix]
                        .data
                        .iter()
                        .map(|&x| if x > 0.0 { 1.0 } else { slope })
                        .collect();
                    let shape = self.nodes[ix].shape.clone();
                    let mask = self.constant(mask, &shape);
                    let ga = self.mul(g, mask)?;
                    vec![(0, ga)]
                }
                Op::Sigmoid => {
                    // y' = y * (1 - y)
                    let negy = self.neg(this);
                    let onemy = self.add_scalar(negy, 1.0);
                    let dy = self.mul(this, onemy)?;
                    let ga = self.mul(g, dy)?;
                    vec![(0, ga)]
                }
                Op::Exp => {
                    let ga = self.mul(g, this)?;
                    vec![(0, ga)]
                }
                Op::Log => {
                    let ga = self.div(g, input_vals[0])?;
                    vec![(0, ga)]
                }
                Op::Sum => {
                    let shape = self.nodes[inputs[0] as usize].shape.clone();
                    let ga = self.broadcast_to(g, &shape)?;
                    vec![(0, ga)]
                }
                Op::Mean => {
                    let shape = self.nodes[inputs[0] as usize].shape.clone();
                    let n = numel(&shape).max(1);
                    let gb = self.broadcast_to(g, &shape)?;
                    let ga = self.scale(gb, 1.0 / n as f64);
                    vec![(0, ga)]
                }
                Op::Max => {
                    let ix = inputs[0] as usize;
                    let shape = self.nodes[ix].shape.clone();
                    let data = &self.nodes[ix].data;
                    let mut mask = vec![0.0; data.len()];
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = 0usize;
                    for (i, &x) in data.iter().enumerate() {
                        if x > best {
                            best = x;
                            arg = i;
                        }
                    }
                    if !data.is_empty() {
                        mask[arg] = 1.0;
                    }
                    let mask = self.constant(mask, &shape);
                    let gb = self.broadcast_to(g, &shape)?;
                    let ga = self.mul(gb, mask)?;
                    vec![(0, ga)]
                }
                Op::IndexSelect(index) => {
                    let rows = row_view(&self.nodes[inputs[0] as usize].shape)
                        .expect("recorded index_select input is row-shaped")
                        .0;
                    let ga = self.scatter_sum(g, &index, rows)?;
                    // keep the original rank for rank-1 inputs
                    let shape = self.nodes[inputs[0] as usize].shape.clone();
                    let ga = if self.shape(ga) != shape.as_slice() {
                        self.reshape(ga, &shape)?
                    } else {
                        ga
                    };
                    vec![(0, ga)]
                }
                Op::ScatterSum(index) => {
                    let ga = self.index_select_arc(g, index)?;
                    vec![(0, ga)]
                }
                Op::ScatterMean(index) => {
                    let iv = inputs[0] as usize;
                    let (rows, w) = row_view(&self.nodes[iv].shape).expect("row-shaped");
                    let out_rows = row_view(&self.nodes[id].shape).expect("row-shaped").0;
                    let mut count = vec![0usize; out_rows];
                    for &i in index.iter() {
                        count[i] += 1;
                    }
                    let mut inv = vec![0.0; rows * w];
                    for r in 0..rows {
                        let c = count[index[r]].max(1) as f64;
                        for j in 0..w {
                            inv[r * w + j] = 1.0 / c;
                        }
                    }
                    let shape = self.nodes[iv].shape.clone();
                    let inv = self.constant(inv, &shape);
                    let sel = self.index_select_arc(g, index)?;
                    let sel = if self.shape(sel) != shape.as_slice() {
                        self.reshape(sel, &shape)?
                    } else {
                        sel
                    };
                    let ga = self.mul(sel, inv)?;
                    vec![(0, ga)]
                }
                Op::ScatterMax(index) => {
                    let iv = inputs[0] as usize;
                    let (rows, w) = row_view(&self.nodes[iv].shape).expect("row-shaped");
                    let out_rows = row_view(&self.nodes[id].shape).expect("row-shaped").0;
                    // first maximal row per (segment, column) wins
                    let mut winner = vec![usize::MAX; out_rows * w];
                    let mut best = vec![f64::NEG_INFINITY; out_rows * w];
                    for r in 0..rows {
                        let seg = index[r];
                        for j in 0..w {
                            let x = self.nodes[iv].data[r * w + j];
                            if x > best[seg * w + j] {
                                best[seg * w + j] = x;
                                winner[seg * w + j] = r;
                            }
                        }
                    }
                    let mut mask = vec![0.0; rows * w];
                    for seg in 0..out_rows {
                        for j in 0..w {
                            let r = winner[seg * w + j];
                            if r != usize::MAX {
                                mask[r * w + j] = 1.0;
                            }
                        }
                    }
                    let shape = self.nodes[iv].shape.clone();
                    let mask = self.constant(mask, &shape);
                    let sel = self.index_select_arc(g, index)?;
                    let sel = if self.shape(sel) != shape.as_slice() {
                        self.reshape(sel, &shape)?
                    } else {
                        sel
                    };
                    let ga = self.mul(sel, mask)?;
                    vec![(0, ga)]
                }
            };

            for (slot, contrib) in contribs {
                let tgt = inputs[slot] as usize;
                if !active[tgt] {
                    continue;
                }
                adjoint[tgt] = Some(match adjoint[tgt] {
                    Some(prev) => self.add(prev, contrib)?,
                    None => contrib,
                });
            }
        }
        Ok(adjoint)
    }

    fn positive_mask(&mut self, x: Value) -> Value {
        let ix = self.check(x);
        let mask: Vec<f64> = self.nodes[ix]
            .data
            .iter()
            .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
            .collect();
        let shape = self.nodes[ix].shape.clone();
        self.constant(mask, &shape)
    }

    /// Recompute every non-leaf node from the current leaf data, in record
    /// order. Used to check that replaying a record is bit-identical.
    pub fn replay(&mut self) -> Result<()> {
        for id in 0..self.nodes.len() {
            let op = self.nodes[id].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            let inputs = self.nodes[id].inputs.clone();
            let get = |i: usize| -> &[f64] { &self.nodes[inputs[i] as usize].data };
            let data: Vec<f64> = match &op {
                Op::Leaf => unreachable!(),
                Op::Matmul => {
                    let sa = self.nodes[inputs[0] as usize].shape.clone();
                    let sb = self.nodes[inputs[1] as usize].shape.clone();
                    let (r, k, c) = (sa[0], sa[1], sb[1]);
                    let (da, db) = (get(0), get(1));
                    let mut out = vec![0.0; r * c];
                    for i in 0..r {
                        for (kk, &av) in da[i * k..(i + 1) * k].iter().enumerate() {
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..c {
                                out[i * c + j] += av * db[kk * c + j];
                            }
                        }
                    }
                    out
                }
                Op::Transpose => {
                    let s = self.nodes[inputs[0] as usize].shape.clone();
                    let (r, c) = (s[0], s[1]);
                    let d = get(0);
                    let mut out = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            out[j * r + i] = d[i * c + j];
                        }
                    }
                    out
                }
                Op::Reshape => get(0).to_vec(),
                Op::Add => get(0).iter().zip(get(1)).map(|(&x, &y)| x + y).collect(),
                Op::Sub => get(0).iter().zip(get(1)).map(|(&x, &y)| x - y).collect(),
                Op::Mul => get(0).iter().zip(get(1)).map(|(&x, &y)| x * y).collect(),
                Op::Div => get(0).iter().zip(get(1)).map(|(&x, &y)| x / y).collect(),
                Op::Neg => get(0).iter().map(|&x| -x).collect(),
                Op::Scale(c) => get(0).iter().map(|&x| x * c).collect(),
                Op::AddScalar(c) => get(0).iter().map(|&x| x + c).collect(),
                Op::BroadcastTo => vec![get(0)[0]; numel(&self.nodes[id].shape)],
                Op::Relu => get(0).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
                Op::LeakyRelu(s) => get(0)
                    .iter()
                    .map(|&x| if x > 0.0 { x } else { s * x })
                    .collect(),
                Op::Sigmoid => get(0).iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect(),
                Op::Exp => get(0).iter().map(|&x| x.exp()).collect(),
                Op::Log => get(0).iter().map(|&x| x.ln()).collect(),
                Op::Sum => vec![get(0).iter().sum()],
                Op::Mean => vec![get(0).iter().sum::<f64>() / get(0).len().max(1) as f64],
                Op::Max => vec![get(0).iter().copied().fold(f64::NEG_INFINITY, f64::max)],
                Op::IndexSelect(index) => {
                    let (_, w) = row_view(&self.nodes[inputs[0] as usize].shape).unwrap();
                    let d = get(0);
                    let mut out = Vec::with_capacity(index.len() * w);
                    for &i in index.iter() {
                        out.extend_from_slice(&d[i * w..(i + 1) * w]);
                    }
                    out
                }
                Op::ScatterSum(index) => {
                    let (rows, w) = row_view(&self.nodes[inputs[0] as usize].shape).unwrap();
                    let out_rows = row_view(&self.nodes[id].shape).unwrap().0;
                    let d = get(0);
                    let mut out = vec![0.0; out_rows * w];
                    for r in 0..rows {
                        for j in 0..w {
                            out[index[r] * w + j] += d[r * w + j];
                        }
                    }
                    out
                }
                Op::ScatterMean(index) => {
                    let (rows, w) = row_view(&self.nodes[inputs[0] as usize].shape).unwrap();
                    let out_rows = row_view(&self.nodes[id].shape).unwrap().0;
                    let d = get(0);
                    let mut out = vec![0.0; out_rows * w];
                    let mut count = vec![0usize; out_rows];
                    for r in 0..rows {
                        count[index[r]] += 1;
                        for j in 0..w {
                            out[index[r] * w + j] += d[r * w + j];
                        }
                    }
                    for seg in 0..out_rows {
                        if count[seg] > 0 {
                            for j in 0..w {
                                out[seg * w + j] /= count[seg] as f64;
                            }
                        }
                    }
                    out
                }
                Op::ScatterMax(index) => {
                    let (rows, w) = row_view(&self.nodes[inputs[0] as usize].shape).unwrap();
                    let out_rows = row_view(&self.nodes[id].shape).unwrap().0;
                    let d = get(0);
                    let mut out = vec![f64::NEG_INFINITY; out_rows * w];
                    let mut seen = vec![false; out_rows];
                    for r in 0..rows {
                        seen[index[r]] = true;
                        for j in 0..w {
                            let x = d[r * w + j];
                            if x > out[index[r] * w + j] {
                                out[index[r] * w + j] = x;
                            }
                        }
                    }
                    for seg in 0..out_rows {
                        if !seen[seg] {
                            for j in 0..w {
                                out[seg * w + j] = 0.0;
                            }
                        }
                    }
                    out
                }
            };
            self.nodes[id].data = data;
        }
        Ok(())
    }
}

/// Relative-error comparison of the analytic gradient of `f` at `x` against
/// central finite differences. Returns false on any NaN.
pub fn finite_difference_check<F>(f: F, x: &[f64], shape: &[usize], eps: f64, tol: f64) -> bool
where
    F: Fn(&mut Tape, Value) -> Result<Value>,
{
    assert!(eps > 0.0, "finite_difference_check: eps must be positive");
    let analytic = {
        let mut tape = Tape::new();
        let xv = match tape.leaf(x.to_vec(), shape, true) {
            Ok(v) => v,
            Err(_) => return false,
        };
        let y = match f(&mut tape, xv) {
            Ok(y) => y,
            Err(_) => return false,
        };
        let g = match tape.grad(y, &[xv], false) {
            Ok(g) => g,
            Err(_) => return false,
        };
        tape.data(g[0]).to_vec()
    };
    let eval = |pt: &[f64]| -> Option<f64> {
        let mut tape = Tape::new();
        let xv = tape.leaf(pt.to_vec(), shape, true).ok()?;
        let y = f(&mut tape, xv).ok()?;
        let v = tape.scalar_value(y);
        if v.is_nan() {
            None
        } else {
            Some(v)
        }
    };
    let mut worst = 0.0f64;
    let mut pt = x.to_vec();
    for i in 0..x.len() {
        let orig = pt[i];
        pt[i] = orig + eps;
        let fp = match eval(&pt) {
            Some(v) => v,
            None => return false,
        };
        pt[i] = orig - eps;
        let fm = match eval(&pt) {
            Some(v) => v,
            None => return false,
        };
        pt[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[i];
        if a.is_nan() || numeric.is_nan() {
            return false;
        }
        let denom = a.abs().max(numeric.abs()).max(1e-3);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst <= tol
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    }

    #[test]
    fn relu_definition() {
        let mut t = Tape::new();
        let x = t.constant(vec![-1.0, 2.0], &[2]);
        let y = t.relu(x);
        assert_eq!(t.data(y), &[0.0, 2.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let mut t = Tape::new();
        let x = t.constant(vec![0.0, 0.0], &[2]);
        let y = t.softmax(x).unwrap();
        assert_eq!(t.data(y), &[0.5, 0.5]);
    }

    #[test]
    fn scatter_sum_hand_count() {
        // hand-count oracle: out[0] = 1 + 2, out[1] = 3
        let mut t = Tape::new();
        let v = t.constant(vec![1.0, 2.0, 3.0], &[3]);
        let y = t.scatter_sum(v, &[0, 0, 1], 2).unwrap();
        assert_eq!(t.data(y), &[3.0, 3.0]);
    }

    #[test]
    fn square_gradient() {
        // f(x) = x^2 at x = 3 -> 6
        let mut t = Tape::new();
        let x = t.leaf(vec![3.0], &[], true).unwrap();
        let y = t.square(x).unwrap();
        let g = t.grad(y, &[x], false).unwrap();
        assert_eq!(t.data(g[0]), &[6.0]);
    }

    #[test]
    fn second_order_cubic() {
        // f(x) = x^3, g(x) = (df/dx)^2 = 9x^4, dg/dx = 36x^3 -> 36 at x = 1.
        // Symbolic oracle above; also checked against central differences of
        // the analytic first gradient below.
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0], &[], true).unwrap();
        let x2 = t.square(x).unwrap();
        let x3 = t.mul(x2, x).unwrap();
        let df = t.grad(x3, &[x], true).unwrap()[0];
        let g = t.square(df).unwrap();
        let dg = t.grad(g, &[x], false).unwrap()[0];
        assert!((t.scalar_value(dg) - 36.0).abs() < 1e-9);

        let fd = finite_difference_check(
            |t, x| {
                let x2 = t.square(x)?;
                let x3 = t.mul(x2, x)?;
                let df = t.grad(x3, &[x], true)?[0];
                t.square(df)
            },
            &[1.0],
            &[],
            1e-5,
            1e-6,
        );
        assert!(fd);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut t = Tape::new();
        let z = t.leaf(vec![0.3, -1.2, 2.0], &[3], true).unwrap();
        let sm = t.softmax(z).unwrap();
        let s = t.sum(sm);
        let g = t.grad(s, &[z], false).unwrap()[0];
        for &v in t.data(g) {
            assert!(v.abs() < 1e-12, "expected zero gradient, got {v}");
        }
    }

    #[test]
    fn unreachable_input_gets_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0], &[], true).unwrap();
        let y = t.leaf(vec![2.0], &[], true).unwrap();
        let out = t.square(x).unwrap();
        let g = t.grad(out, &[y], false).unwrap()[0];
        assert_eq!(t.data(g), &[0.0]);
    }

    #[test]
    fn non_scalar_output_is_an_error() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], &[2], true).unwrap();
        let y = t.relu(x);
        assert!(matches!(
            t.grad(y, &[x], false),
            Err(AutodiffError::NonScalarOutput(_))
        ));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut t = Tape::new();
        let a = t.constant(vec![1.0, 2.0], &[2]);
        let b = t.constant(vec![1.0, 2.0, 3.0], &[3]);
        let err = t.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add"), "{msg}");
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn fd_check_constant_function() {
        assert!(finite_difference_check(
            |t, _x| Ok(t.scalar(5.0)),
            &[0.7, -0.3],
            &[2],
            1e-5,
            1e-6,
        ));
    }

    #[test]
    fn fd_check_logistic_loss() {
        // logistic regression loss on fixed data, random parameter point
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_vec(&mut rng, 4, -2.0, 2.0);
        let ok = finite_difference_check(
            |t, w| {
                let feats = t.constant(vec![0.5, -1.0, 2.0, 0.25], &[1, 4]);
                let wc = t.reshape(w, &[4, 1])?;
                let z = t.matmul(feats, wc)?;
                let zs = t.reshape(z, &[])?;
                let p = t.sigmoid(zs);
                let lp = t.log(p);
                Ok(t.neg(lp))
            },
            &x,
            &[4],
            1e-5,
            1e-4,
        );
        assert!(ok);
    }

    #[test]
    fn fd_check_catches_wrong_backward() {
        // negative control: sabotaged "gradient" via a mismatched forward
        // (claims f = x^2 but computes gradient of x^3 path by construction)
        let ok = finite_difference_check(
            |t, x| {
                // analytic path: x^3 (grad 3x^2), numeric perturbations see the
                // same function, so this passes; flip tolerance to force the
                // negative control through a genuinely wrong derivative:
                let d = t.data(x).to_vec();
                let frozen = t.constant(d, &[]); // breaks the dependency
                let y = t.square(frozen)?;
                let zero = t.scalar(0.0);
                let z = t.mul(x, zero)?; // keeps x reachable with zero grad
                t.add(y, z)
            },
            &[1.5],
            &[],
            1e-5,
            1e-4,
        );
        // analytic gradient is 0 (dependency cut), numeric sees x^2: mismatch
        assert!(!ok);
    }

    /// Central-difference sweep over every primitive op on random inputs.
    #[test]
    fn all_ops_pass_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..6 {
            let seed_data = rand_vec(&mut rng, 6, -2.0, 2.0);
            // keep relu inputs away from the kink
            let relu_data: Vec<f64> = seed_data
                .iter()
                .map(|&v| if v.abs() < 0.1 { v + 0.2 } else { v })
                .collect();
            let pos_data: Vec<f64> = seed_data.iter().map(|&v| v.abs() + 0.5).collect();

            let cases: Vec<(&str, Box<dyn Fn(&mut Tape, Value) -> Result<Value>>, Vec<f64>, Vec<usize>)> = vec![
                (
                    "matmul",
                    Box::new(|t, x| {
                        let w = t.constant(vec![0.3, -0.7, 1.1, 0.2, -0.4, 0.9], &[3, 2]);
                        let y = t.matmul(x, w)?;
                        Ok(t.sum(y))
                    }),
                    seed_data.clone(),
                    vec![2, 3],
                ),
                (
                    "transpose",
                    Box::new(|t, x| {
                        let y = t.transpose(x)?;
                        let z = t.mul(y, y)?;
                        Ok(t.sum(z))
                    }),
                    seed_data.clone(),
                    vec![2, 3],
                ),
                (
                    "add_mul_sub_div",
                    Box::new(|t, x| {
                        let c = t.constant(vec![1.5, -0.5, 2.0, 0.7, -1.3, 0.4], &[6]);
                        let a = t.add(x, c)?;
                        let m = t.mul(a, x)?;
                        let s = t.sub(m, x)?;
                        let d = t.constant(vec![2.0, 3.0, 1.5, 2.5, 4.0, 1.2], &[6]);
                        let q = t.div(s, d)?;
                        Ok(t.sum(q))
                    }),
                    seed_data.clone(),
                    vec![6],
                ),
                (
                    "neg_scale_addscalar",
                    Box::new(|t, x| {
                        let n = t.neg(x);
                        let s = t.scale(n, 1.7);
                        let a = t.add_scalar(s, 0.3);
                        let sq = t.square(a)?;
                        Ok(t.sum(sq))
                    }),
                    seed_data.clone(),
                    vec![6],
                ),
                (
                    "relu",
                    Box::new(|t, x| {
                        let y = t.relu(x);
                        let z = t.mul(y, y)?;
                        Ok(t.sum(z))
                    }),
                    relu_data.clone(),
                    vec![6],
                ),
                (
                    "leaky_relu",
                    Box::new(|t, x| {
                        let y = t.leaky_relu(x, 0.01);
                        let z = t.mul(y, y)?;
                        Ok(t.sum(z))
                    }),
                    relu_data.clone(),
                    vec![6],
                ),
                (
                    "sigmoid_exp_log",
                    Box::new(|t, x| {
                        let s = t.sigmoid(x);
                        let e = t.exp(s);
                        let l = t.log(e);
                        let z = t.mul(l, s)?;
                        Ok(t.sum(z))
                    }),
                    seed_data.clone(),
                    vec![6],
                ),
                (
                    "log_positive",
                    Box::new(|t, x| {
                        let l = t.log(x);
                        Ok(t.sum(l))
                    }),
                    pos_data.clone(),
                    vec![6],
                ),
                (
                    "mean",
                    Box::new(|t, x| {
                        let m = t.mean(x);
                        Ok(t.square(m)?)
                    }),
                    seed_data.clone(),
                    vec![6],
                ),
                (
                    "max",
                    Box::new(|t, x| {
                        let m = t.max(x);
                        Ok(t.square(m)?)
                    }),
                    seed_data.clone(),
                    vec![6],
                ),
                (
                    "broadcast_to",
                    Box::new(|t, x| {
                        let s = t.sum(x);
                        let b = t.broadcast_to(s, &[2, 3])?;
                        let c = t.constant(vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6], &[2, 3]);
                        let z = t.mul(b, c)?;
                        Ok(t.sum(z))
                    }),
                    seed_data.clone(),
                    vec![6],
                ),
                (
                    "index_select",
                    Box::new(|t, x| {
                        let y = t.index_select(x, &[2, 0, 2, 1])?;
                        let z = t.mul(y, y)?;
                        Ok(t.sum(z))
                    }),
                    seed_data.clone(),
                    vec![3, 2],
                ),
                (
                    "scatter_sum",
                    Box::new(|t, x| {
                        let y = t.scatter_sum(x, &[1, 0, 1], 2)?;
                        let z = t.mul(y, y)?;
                        Ok(t.sum(z))
                    }),
                    seed_data.clone(),
                    vec![3, 2],
                ),
                (
                    "scatter_mean",
                    Box::new(|t, x| {
                        let y = t.scatter_mean(x, &[1, 0, 1], 3)?;
                        let z = t.mul(y, y)?;
                        Ok(t.sum(z))
                    }),
                    seed_data.clone(),
                    vec![3, 2],
                ),
                (
                    "scatter_max",
                    Box::new(|t, x| {
                        let y = t.scatter_max(x, &[1, 0, 1], 2)?;
                        let z = t.mul(y, y)?;
                        Ok(t.sum(z))
                    }),
                    seed_data.clone(),
                    vec![3, 2],
                ),
                (
                    "softmax",
                    Box::new(|t, x| {
                        let y = t.softmax(x)?;
                        let c = t.constant(vec![0.5, -1.0, 2.0, 0.3, 0.8, -0.2], &[6]);
                        let z = t.mul(y, c)?;
                        Ok(t.sum(z))
                    }),
                    seed_data.clone(),
                    vec![6],
                ),
                (
                    "log_softmax",
                    Box::new(|t, x| {
                        let y = t.log_softmax(x)?;
                        let c = t.constant(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0], &[6]);
                        let z = t.mul(y, c)?;
                        Ok(t.sum(z))
                    }),
                    seed_data.clone(),
                    vec![6],
                ),
                (
                    "concat_cols",
                    Box::new(|t, x| {
                        let c = t.constant(vec![1.0, -1.0, 0.5, 2.0], &[2, 2]);
                        let y = t.concat_cols(x, c)?;
                        let z = t.mul(y, y)?;
                        Ok(t.sum(z))
                    }),
                    seed_data.clone(),
                    vec![2, 3],
                ),
                (
                    "slice_and_bias",
                    Box::new(|t, x| {
                        let s = t.slice_cols(x, 1, 3)?;
                        let b = t.constant(vec![0.3, -0.6], &[2]);
                        let y = t.add_bias(s, b)?;
                        let z = t.mul(y, y)?;
                        Ok(t.sum(z))
                    }),
                    seed_data.clone(),
                    vec![2, 3],
                ),
            ];

            for (name, f, data, shape) in cases {
                assert!(
                    finite_difference_check(f.as_ref(), &data, &shape, 1e-5, 1e-4),
                    "op {name} failed finite-difference check on trial {trial}"
                );
            }
        }
    }

    #[test]
    fn second_order_matches_fd_of_first_gradient() {
        // For f(w) built from smooth ops, grad(grad(f)) is compared against
        // central differences of the analytic first gradient.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w0 = rand_vec(&mut rng, 3, -1.5, 1.5);

        let first_grad = |pt: &[f64]| -> Vec<f64> {
            let mut t = Tape::new();
            let w = t.leaf(pt.to_vec(), &[3], true).unwrap();
            let s = t.sigmoid(w);
            let q = t.mul(s, w).unwrap();
            let y = t.sum(q);
            let g = t.grad(y, &[w], false).unwrap()[0];
            t.data(g).to_vec()
        };

        // analytic second gradient of h(w) = sum(grad_f . grad_f) via double backprop
        let mut t = Tape::new();
        let w = t.leaf(w0.clone(), &[3], true).unwrap();
        let s = t.sigmoid(w);
        let q = t.mul(s, w).unwrap();
        let y = t.sum(q);
        let g = t.grad(y, &[w], true).unwrap()[0];
        let h = {
            let gg = t.mul(g, g).unwrap();
            t.sum(gg)
        };
        let hg = t.grad(h, &[w], false).unwrap()[0];
        let analytic = t.data(hg).to_vec();

        // numeric: d/dw_i sum_j grad_j(w)^2 by central differences
        let eps = 1e-5;
        for i in 0..3 {
            let mut wp = w0.clone();
            wp[i] += eps;
            let mut wm = w0.clone();
            wm[i] -= eps;
            let hp: f64 = first_grad(&wp).iter().map(|v| v * v).sum();
            let hm: f64 = first_grad(&wm).iter().map(|v| v * v).sum();
            let numeric = (hp - hm) / (2.0 * eps);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-3);
            assert!(
                ((analytic[i] - numeric) / denom).abs() < 1e-3,
                "component {i}: analytic {} vs numeric {numeric}",
                analytic[i]
            );
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut t = Tape::new();
        let x = t.leaf(vec![0.3, -1.4, 0.9, 2.2], &[2, 2], true).unwrap();
        let w = t.constant(vec![1.0, 0.5, -0.25, 2.0], &[2, 2]);
        let h = t.matmul(x, w).unwrap();
        let r = t.relu(h);
        let flat = t.reshape(r, &[4]).unwrap();
        let s = t.softmax(flat).unwrap();
        let out = t.sum(s);
        let before: Vec<f64> = t.data(out).to_vec();
        let snapshot: Vec<Vec<f64>> = (0..t.len())
            .map(|i| t.nodes[i].data.clone())
            .collect();
        t.replay().unwrap();
        assert_eq!(t.data(out), before.as_slice());
        for i in 0..t.len() {
            assert_eq!(t.nodes[i].data, snapshot[i], "node {i} changed on replay");
        }
    }

    #[test]
    fn cross_tape_use_panics() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let va = a.scalar(1.0);
        let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            let _ = b.neg(va);
        }));
        assert!(r.is_err());
    }

    #[test]
    fn max_ties_route_to_first() {
        let mut t = Tape::new();
        let x = t.leaf(vec![3.0, 3.0, 1.0], &[3], true).unwrap();
        let m = t.max(x);
        let g = t.grad(m, &[x], false).unwrap()[0];
        assert_eq!(t.data(g), &[1.0, 0.0, 0.0]);
    }
}
