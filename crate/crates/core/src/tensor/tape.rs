use std::sync::atomic::{AtomicU64, Ordering};

use super::{Real, Result, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Linear(usize, usize),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, f64),
    Concat(usize, usize),
    SliceCols { x: usize, start: usize },
    Tanh(usize),
    Silu(usize),
    Exp(usize),
    Abs(usize),
    NormSpatial(usize),
    ScaleVectors(usize, usize),
    Outer(usize, usize),
    Gather(usize, Vec<usize>),
    SegmentSum(usize, Vec<usize>),
    SegmentMean(usize, Vec<usize>, Vec<usize>),
    Sum(usize),
    Reshape(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Linear(..) => "linear",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::Concat(..) => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::Tanh(_) => "tanh",
            Op::Silu(_) => "silu",
            Op::Exp(_) => "exp",
            Op::Abs(_) => "abs",
            Op::NormSpatial(_) => "norm_spatial",
            Op::ScaleVectors(..) => "scale_vectors",
            Op::Outer(..) => "outer",
            Op::Gather(..) => "gather",
            Op::SegmentSum(..) => "segment_sum",
            Op::SegmentMean(..) => "segment_mean",
            Op::Sum(_) => "sum",
            Op::Reshape(_) => "reshape",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
    is_param: bool,
}

/// Operation record for one forward evaluation.
///
/// Every primitive stores its output value; nodes whose inputs carry
/// `requires_grad` also keep the op needed to propagate gradients. A tape is
/// single-use: [`Tape::backward`] consumes it.
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    strict: bool,
    fault: Option<&'static str>,
}

/// Gradients of a scalar output with respect to every parameter leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T: Real> {
    tape: u64,
    grads: Vec<(usize, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads
            .binary_search_by_key(&v.idx, |(i, _)| *i)
            .ok()
            .map(|k| &self.grads[k].1)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

fn last_dim(t: &[usize]) -> usize {
    t.last().copied().unwrap_or(1)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            strict: false,
            fault: None,
        }
    }

    /// A tape that rejects non-finite operands.
    pub fn strict() -> Self {
        let mut t = Self::new();
        t.strict = true;
        t
    }

    /// Scales the backward rule of the named op by 1.5. Only for exercising
    /// gradient checkers against a known-bad rule.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, op: &'static str) {
        self.fault = Some(op);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: gradients are reported for it by `backward`.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor<T>, param: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: param,
            is_param: param,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.idx)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn check_finite(&self, op: &'static str, inputs: &[usize]) -> Result<()> {
        if self.strict && inputs.iter().any(|&i| !self.nodes[i].value.all_finite()) {
            return Err(TensorError::NonFinite(op));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            is_param: false,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    /// `x · wᵀ` over the last axis of `x`: `[.., in] × [out, in] → [.., out]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        self.check_finite("linear", &[xi, wi])?;
        let xv = &self.nodes[xi].value;
        let wv = &self.nodes[wi].value;
        if wv.shape().len() != 2 || last_dim(xv.shape()) != wv.shape()[1] {
            return Err(shape_err(
                "linear",
                format!("x {:?} vs w {:?}", xv.shape(), wv.shape()),
            ));
        }
        let (out_f, in_f) = (wv.shape()[0], wv.shape()[1]);
        let rows = xv.len() / in_f.max(1);
        let xd = xv.data();
        let wd = wv.data();
        let mut out = vec![T::zero(); rows * out_f];
        for r in 0..rows {
            let xr = &xd[r * in_f..(r + 1) * in_f];
            let or = &mut out[r * out_f..(r + 1) * out_f];
            for (o, slot) in or.iter_mut().enumerate() {
                let wr = &wd[o * in_f..(o + 1) * in_f];
                let mut acc = T::zero();
                for k in 0..in_f {
                    acc += xr[k] * wr[k];
                }
                *slot = acc;
            }
        }
        let mut shape = xv.shape().to_vec();
        if let Some(l) = shape.last_mut() {
            *l = out_f;
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Linear(xi, wi), &[xi, wi]))
    }

    /// Plain 2-D matrix product `[n, k] × [k, m] → [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.check_finite("matmul", &[ai, bi])?;
        let av = &self.nodes[ai].value;
        let bv = &self.nodes[bi].value;
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); n * m];
        let (ad, bd) = (av.data(), bv.data());
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a_ip = ad[i * k + p];
                let brow = &bd[p * m..(p + 1) * m];
                for j in 0..m {
                    orow[j] += a_ip * brow[j];
                }
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::MatMul(ai, bi), &[ai, bi]))
    }

    fn zip(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<(usize, usize, Tensor<T>)> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.check_finite(name, &[ai, bi])?;
        let av = &self.nodes[ai].value;
        let bv = &self.nodes[bi].value;
        if av.shape() != bv.shape() {
            return Err(shape_err(
                name,
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((ai, bi, Tensor::new(av.shape().to_vec(), data)?))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, v) = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(ai, bi), &[ai, bi]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, v) = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(ai, bi), &[ai, bi]))
    }

    /// Hadamard product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, v) = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(ai, bi), &[ai, bi]))
    }

    /// Adds a `[f]` bias to every row of a `[.., f]` tensor.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xi, bi) = (self.idx(x)?, self.idx(b)?);
        self.check_finite("add_bias", &[xi, bi])?;
        let xv = &self.nodes[xi].value;
        let bv = &self.nodes[bi].value;
        let f = last_dim(xv.shape());
        if bv.len() != f {
            return Err(shape_err(
                "add_bias",
                format!("x {:?} vs bias {:?}", xv.shape(), bv.shape()),
            ));
        }
        let bd = bv.data();
        let data = xv
            .data()
            .chunks(f.max(1))
            .flat_map(|row| row.iter().zip(bd).map(|(&a, &b)| a + b))
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddBias(xi, bi), &[xi, bi]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        self.check_finite("scale", &[xi])?;
        let ct = T::from_f64(c);
        let xv = &self.nodes[xi].value;
        let data = xv.data().iter().map(|&v| v * ct).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Scale(xi, c), &[xi]))
    }

    /// Concatenation along the last (feature) axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.check_finite("concat", &[ai, bi])?;
        let av = &self.nodes[ai].value;
        let bv = &self.nodes[bi].value;
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(shape_err("concat", format!("{:?} ⊕ {:?}", sa, sb)));
        }
        let (fa, fb) = (last_dim(sa), last_dim(sb));
        let rows = av.len() / fa.max(1);
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for r in 0..rows {
            data.extend_from_slice(&av.data()[r * fa..(r + 1) * fa]);
            data.extend_from_slice(&bv.data()[r * fb..(r + 1) * fb]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = fa + fb;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat(ai, bi), &[ai, bi]))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        self.check_finite("slice_cols", &[xi])?;
        let xv = &self.nodes[xi].value;
        let f = last_dim(xv.shape());
        if start + len > f {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + len,
                limit: f,
            });
        }
        let data = xv
            .data()
            .chunks(f.max(1))
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::SliceCols { x: xi, start }, &[xi]))
    }

    fn map(&mut self, x: Var, name: &'static str, f: impl Fn(T) -> T) -> Result<(usize, Tensor<T>)> {
        let xi = self.idx(x)?;
        self.check_finite(name, &[xi])?;
        let xv = &self.nodes[xi].value;
        let data = xv.data().iter().map(|&v| f(v)).collect();
        Ok((xi, Tensor::new(xv.shape().to_vec(), data)?))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let (xi, v) = self.map(x, "tanh", |v| v.tanh())?;
        Ok(self.push(v, Op::Tanh(xi), &[xi]))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let (xi, v) = self.map(x, "silu", |v| v * sigmoid(v))?;
        Ok(self.push(v, Op::Silu(xi), &[xi]))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let (xi, v) = self.map(x, "exp", |v| v.exp())?;
        Ok(self.push(v, Op::Exp(xi), &[xi]))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let (xi, v) = self.map(x, "abs", |v| v.abs())?;
        Ok(self.push(v, Op::Abs(xi), &[xi]))
    }

    /// Euclidean norm over the spatial axis: `[n, 3, f] → [n, f]`.
    pub fn norm_spatial(&mut self, v: Var) -> Result<Var> {
        let vi = self.idx(v)?;
        self.check_finite("norm_spatial", &[vi])?;
        let vv = &self.nodes[vi].value;
        let s = vv.shape();
        if s.len() != 3 || s[1] != 3 {
            return Err(shape_err("norm_spatial", format!("expected [n,3,f], got {:?}", s)));
        }
        let (n, f) = (s[0], s[2]);
        let d = vv.data();
        let mut out = vec![T::zero(); n * f];
        for a in 0..n {
            for k in 0..f {
                let mut acc = T::zero();
                for c in 0..3 {
                    let x = d[(a * 3 + c) * f + k];
                    acc += x * x;
                }
                out[a * f + k] = acc.sqrt();
            }
        }
        let value = Tensor::new(vec![n, f], out)?;
        Ok(self.push(value, Op::NormSpatial(vi), &[vi]))
    }

    /// Broadcasts a `[n, f]` scalar gate over the spatial axis of `[n, 3, f]`.
    pub fn scale_vectors(&mut self, v: Var, s: Var) -> Result<Var> {
        let (vi, si) = (self.idx(v)?, self.idx(s)?);
        self.check_finite("scale_vectors", &[vi, si])?;
        let vv = &self.nodes[vi].value;
        let sv = &self.nodes[si].value;
        let (vs, ss) = (vv.shape(), sv.shape());
        if vs.len() != 3 || vs[1] != 3 || ss.len() != 2 || ss[0] != vs[0] || ss[1] != vs[2] {
            return Err(shape_err("scale_vectors", format!("{:?} ∘ {:?}", vs, ss)));
        }
        let (n, f) = (vs[0], vs[2]);
        let (vd, sd) = (vv.data(), sv.data());
        let mut out = vec![T::zero(); n * 3 * f];
        for a in 0..n {
            let srow = &sd[a * f..(a + 1) * f];
            for c in 0..3 {
                let base = (a * 3 + c) * f;
                for k in 0..f {
                    out[base + k] = vd[base + k] * srow[k];
                }
            }
        }
        let value = Tensor::new(vs.to_vec(), out)?;
        Ok(self.push(value, Op::ScaleVectors(vi, si), &[vi, si]))
    }

    /// Outer product of a `[n, f]` magnitude and a `[n, 3]` direction → `[n, 3, f]`.
    pub fn outer(&mut self, s: Var, dir: Var) -> Result<Var> {
        let (si, di) = (self.idx(s)?, self.idx(dir)?);
        self.check_finite("outer", &[si, di])?;
        let sv = &self.nodes[si].value;
        let dv = &self.nodes[di].value;
        let (ss, ds) = (sv.shape(), dv.shape());
        if ss.len() != 2 || ds.len() != 2 || ds[1] != 3 || ss[0] != ds[0] {
            return Err(shape_err("outer", format!("{:?} ⊗ {:?}", ss, ds)));
        }
        let (n, f) = (ss[0], ss[1]);
        let (sd, dd) = (sv.data(), dv.data());
        let mut out = vec![T::zero(); n * 3 * f];
        for a in 0..n {
            for c in 0..3 {
                let dc = dd[a * 3 + c];
                let base = (a * 3 + c) * f;
                for k in 0..f {
                    out[base + k] = sd[a * f + k] * dc;
                }
            }
        }
        let value = Tensor::new(vec![n, 3, f], out)?;
        Ok(self.push(value, Op::Outer(si, di), &[si, di]))
    }

    /// Selects rows along the first axis.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        self.check_finite("gather", &[xi])?;
        let xv = &self.nodes[xi].value;
        let (rows, rl) = (xv.rows(), xv.row_len());
        let mut data = Vec::with_capacity(index.len() * rl);
        for &r in index {
            if r >= rows {
                return Err(TensorError::Index {
                    op: "gather",
                    index: r,
                    limit: rows,
                });
            }
            data.extend_from_slice(&xv.data()[r * rl..(r + 1) * rl]);
        }
        let mut shape = xv.shape().to_vec();
        if shape.is_empty() {
            shape.push(index.len());
        } else {
            shape[0] = index.len();
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Gather(xi, index.to_vec()), &[xi]))
    }

    fn segment_accumulate(&self, xi: usize, segments: &[usize], n: usize) -> Result<Tensor<T>> {
        let xv = &self.nodes[xi].value;
        let (rows, rl) = (xv.rows(), xv.row_len());
        if segments.len() != rows {
            return Err(shape_err(
                "segment_sum",
                format!("{} segment ids for {} rows", segments.len(), rows),
            ));
        }
        let mut out = vec![T::zero(); n * rl];
        for (r, &s) in segments.iter().enumerate() {
            if s >= n {
                return Err(TensorError::Index {
                    op: "segment_sum",
                    index: s,
                    limit: n,
                });
            }
            let src = &xv.data()[r * rl..(r + 1) * rl];
            for (o, &v) in out[s * rl..(s + 1) * rl].iter_mut().zip(src) {
                *o += v;
            }
        }
        let mut shape = xv.shape().to_vec();
        if shape.is_empty() {
            shape.push(n);
        } else {
            shape[0] = n;
        }
        Tensor::new(shape, out)
    }

    /// Sums rows into `n` segments; rows are accumulated in input order.
    pub fn segment_sum(&mut self, x: Var, segments: &[usize], n: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        self.check_finite("segment_sum", &[xi])?;
        let value = self.segment_accumulate(xi, segments, n)?;
        Ok(self.push(value, Op::SegmentSum(xi, segments.to_vec()), &[xi]))
    }

    /// Mean of rows per segment. Every segment must be non-empty.
    pub fn segment_mean(&mut self, x: Var, segments: &[usize], n: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        self.check_finite("segment_mean", &[xi])?;
        let mut value = self.segment_accumulate(xi, segments, n)?;
        let mut counts = vec![0usize; n];
        for &s in segments {
            counts[s] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(TensorError::EmptySegment { segment: empty });
        }
        let rl = value.row_len();
        for (s, &c) in counts.iter().enumerate() {
            let inv = T::one() / T::from_f64(c as f64);
            for v in &mut value.data_mut()[s * rl..(s + 1) * rl] {
                *v = *v * inv;
            }
        }
        Ok(self.push(value, Op::SegmentMean(xi, segments.to_vec(), counts), &[xi]))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        self.check_finite("sum", &[xi])?;
        let total = self.nodes[xi].value.data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(total), Op::Sum(xi), &[xi]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(shape_err("mean", "empty tensor".into()));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = self.nodes[xi].value.clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(xi), &[xi]))
    }

    /// Reverse sweep from a one-element output. Returns gradients for every
    /// parameter leaf, zero-filled where the output does not depend on it.
    pub fn backward(self, output: Var) -> Result<Gradients<T>> {
        let out = self.idx(output)?;
        let out_shape = self.nodes[out].value.shape().to_vec();
        if self.nodes[out].value.len() != 1 {
            return Err(TensorError::NotScalar(out_shape));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[out] = Some(vec![T::one()]);

        let fault = self.fault;
        for idx in (0..=out).rev() {
            let node = &nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut gy) = grads[idx].take() else {
                continue;
            };
            if fault == Some(node.op.name()) {
                let k = T::from_f64(1.5);
                gy.iter_mut().for_each(|g| *g = *g * k);
            }
            propagate(&nodes, idx, &gy, &mut grads);
        }

        let mut out_grads = Vec::new();
        for (i, node) in nodes.into_iter().enumerate() {
            if node.is_param {
                let shape = node.value.shape().to_vec();
                let g = grads[i].take().unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                out_grads.push((i, Tensor::new(shape, g)?));
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads: out_grads,
        })
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn acc<'a, T: Real>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    i: usize,
) -> Option<&'a mut Vec<T>> {
    if !nodes[i].requires_grad {
        return None;
    }
    let n = nodes[i].value.len();
    Some(grads[i].get_or_insert_with(|| vec![T::zero(); n]))
}

fn propagate<T: Real>(nodes: &[Node<T>], idx: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
    let y = nodes[idx].value.data();
    match &nodes[idx].op {
        Op::Leaf => {}
        Op::Linear(xi, wi) => {
            let (xi, wi) = (*xi, *wi);
            let x = &nodes[xi].value;
            let w = &nodes[wi].value;
            let (out_f, in_f) = (w.shape()[0], w.shape()[1]);
            let rows = x.len() / in_f.max(1);
            let (xd, wd) = (x.data(), w.data());
            if let Some(gx) = acc(nodes, grads, xi) {
                for r in 0..rows {
                    let gxr = &mut gx[r * in_f..(r + 1) * in_f];
                    for o in 0..out_f {
                        let g = gy[r * out_f + o];
                        let wr = &wd[o * in_f..(o + 1) * in_f];
                        for k in 0..in_f {
                            gxr[k] += g * wr[k];
                        }
                    }
                }
            }
            if let Some(gw) = acc(nodes, grads, wi) {
                for r in 0..rows {
                    let xr = &xd[r * in_f..(r + 1) * in_f];
                    for o in 0..out_f {
                        let g = gy[r * out_f + o];
                        let gwr = &mut gw[o * in_f..(o + 1) * in_f];
                        for k in 0..in_f {
                            gwr[k] += g * xr[k];
                        }
                    }
                }
            }
        }
        Op::MatMul(ai, bi) => {
            let (ai, bi) = (*ai, *bi);
            let a = &nodes[ai].value;
            let b = &nodes[bi].value;
            let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let (ad, bd) = (a.data(), b.data());
            if let Some(ga) = acc(nodes, grads, ai) {
                for i in 0..n {
                    for p in 0..k {
                        let mut s = T::zero();
                        for j in 0..m {
                            s += gy[i * m + j] * bd[p * m + j];
                        }
                        ga[i * k + p] += s;
                    }
                }
            }
            if let Some(gb) = acc(nodes, grads, bi) {
                for i in 0..n {
                    for p in 0..k {
                        let a_ip = ad[i * k + p];
                        for j in 0..m {
                            gb[p * m + j] += a_ip * gy[i * m + j];
                        }
                    }
                }
            }
        }
        Op::Add(ai, bi) | Op::Sub(ai, bi) => {
            let sign = if matches!(nodes[idx].op, Op::Sub(..)) {
                -T::one()
            } else {
                T::one()
            };
            let (ai, bi) = (*ai, *bi);
            if let Some(ga) = acc(nodes, grads, ai) {
                ga.iter_mut().zip(gy).for_each(|(a, &g)| *a += g);
            }
            if let Some(gb) = acc(nodes, grads, bi) {
                gb.iter_mut().zip(gy).for_each(|(b, &g)| *b += sign * g);
            }
        }
        Op::Mul(ai, bi) => {
            let (ai, bi) = (*ai, *bi);
            let ad = nodes[ai].value.data();
            let bd = nodes[bi].value.data();
            if let Some(ga) = acc(nodes, grads, ai) {
                for k in 0..ga.len() {
                    ga[k] += gy[k] * bd[k];
                }
            }
            if let Some(gb) = acc(nodes, grads, bi) {
                for k in 0..gb.len() {
                    gb[k] += gy[k] * ad[k];
                }
            }
        }
        Op::AddBias(xi, bi) => {
            let (xi, bi) = (*xi, *bi);
            if let Some(gx) = acc(nodes, grads, xi) {
                gx.iter_mut().zip(gy).for_each(|(a, &g)| *a += g);
            }
            if let Some(gb) = acc(nodes, grads, bi) {
                let f = gb.len();
                for row in gy.chunks(f.max(1)) {
                    gb.iter_mut().zip(row).for_each(|(b, &g)| *b += g);
                }
            }
        }
        Op::Scale(xi, c) => {
            let c = T::from_f64(*c);
            if let Some(gx) = acc(nodes, grads, *xi) {
                gx.iter_mut().zip(gy).for_each(|(a, &g)| *a += c * g);
            }
        }
        Op::Concat(ai, bi) => {
            let (ai, bi) = (*ai, *bi);
            let fa = last_dim(nodes[ai].value.shape());
            let fb = last_dim(nodes[bi].value.shape());
            let rows = nodes[ai].value.len() / fa.max(1);
            if let Some(ga) = acc(nodes, grads, ai) {
                for r in 0..rows {
                    for k in 0..fa {
                        ga[r * fa + k] += gy[r * (fa + fb) + k];
                    }
                }
            }
            if let Some(gb) = acc(nodes, grads, bi) {
                for r in 0..rows {
                    for k in 0..fb {
                        gb[r * fb + k] += gy[r * (fa + fb) + fa + k];
                    }
                }
            }
        }
        Op::SliceCols { x, start } => {
            let f = last_dim(nodes[*x].value.shape());
            let len = last_dim(nodes[idx].value.shape());
            let start = *start;
            if let Some(gx) = acc(nodes, grads, *x) {
                let rows = gx.len() / f.max(1);
                for r in 0..rows {
                    for k in 0..len {
                        gx[r * f + start + k] += gy[r * len + k];
                    }
                }
            }
        }
        Op::Tanh(xi) => {
            if let Some(gx) = acc(nodes, grads, *xi) {
                for k in 0..gx.len() {
                    gx[k] += gy[k] * (T::one() - y[k] * y[k]);
                }
            }
        }
        Op::Silu(xi) => {
            let xd = nodes[*xi].value.data();
            if let Some(gx) = acc(nodes, grads, *xi) {
                for k in 0..gx.len() {
                    let s = sigmoid(xd[k]);
                    gx[k] += gy[k] * s * (T::one() + xd[k] * (T::one() - s));
                }
            }
        }
        Op::Exp(xi) => {
            if let Some(gx) = acc(nodes, grads, *xi) {
                for k in 0..gx.len() {
                    gx[k] += gy[k] * y[k];
                }
            }
        }
        Op::Abs(xi) => {
            let xd = nodes[*xi].value.data();
            if let Some(gx) = acc(nodes, grads, *xi) {
                for k in 0..gx.len() {
                    let x = xd[k];
                    if x > T::zero() {
                        gx[k] += gy[k];
                    } else if x < T::zero() {
                        gx[k] -= gy[k];
                    }
                }
            }
        }
        Op::NormSpatial(vi) => {
            let v = &nodes[*vi].value;
            let (n, f) = (v.shape()[0], v.shape()[2]);
            let vd = v.data();
            if let Some(gv) = acc(nodes, grads, *vi) {
                for a in 0..n {
                    for k in 0..f {
                        let norm = y[a * f + k];
                        if norm > T::zero() {
                            let g = gy[a * f + k] / norm;
                            for c in 0..3 {
                                let p = (a * 3 + c) * f + k;
                                gv[p] += g * vd[p];
                            }
                        }
                    }
                }
            }
        }
        Op::ScaleVectors(vi, si) => {
            let (vi, si) = (*vi, *si);
            let v = &nodes[vi].value;
            let (n, f) = (v.shape()[0], v.shape()[2]);
            let vd = v.data();
            let sd = nodes[si].value.data();
            if let Some(gv) = acc(nodes, grads, vi) {
                for a in 0..n {
                    for c in 0..3 {
                        let base = (a * 3 + c) * f;
                        for k in 0..f {
                            gv[base + k] += gy[base + k] * sd[a * f + k];
                        }
                    }
                }
            }
            if let Some(gs) = acc(nodes, grads, si) {
                for a in 0..n {
                    for c in 0..3 {
                        let base = (a * 3 + c) * f;
                        for k in 0..f {
                            gs[a * f + k] += gy[base + k] * vd[base + k];
                        }
                    }
                }
            }
        }
        Op::Outer(si, di) => {
            let (si, di) = (*si, *di);
            let s = &nodes[si].value;
            let (n, f) = (s.shape()[0], s.shape()[1]);
            let sd = s.data();
            let dd = nodes[di].value.data();
            if let Some(gs) = acc(nodes, grads, si) {
                for a in 0..n {
                    for c in 0..3 {
                        let dc = dd[a * 3 + c];
                        let base = (a * 3 + c) * f;
                        for k in 0..f {
                            gs[a * f + k] += gy[base + k] * dc;
                        }
                    }
                }
            }
            if let Some(gd) = acc(nodes, grads, di) {
                for a in 0..n {
                    for c in 0..3 {
                        let base = (a * 3 + c) * f;
                        let mut t = T::zero();
                        for k in 0..f {
                            t += gy[base + k] * sd[a * f + k];
                        }
                        gd[a * 3 + c] += t;
                    }
                }
            }
        }
        Op::Gather(xi, index) => {
            let rl = nodes[*xi].value.row_len();
            if let Some(gx) = acc(nodes, grads, *xi) {
                for (r, &src) in index.iter().enumerate() {
                    for k in 0..rl {
                        gx[src * rl + k] += gy[r * rl + k];
                    }
                }
            }
        }
        Op::SegmentSum(xi, seg) => {
            let rl = nodes[*xi].value.row_len();
            if let Some(gx) = acc(nodes, grads, *xi) {
                for (r, &s) in seg.iter().enumerate() {
                    for k in 0..rl {
                        gx[r * rl + k] += gy[s * rl + k];
                    }
                }
            }
        }
        Op::SegmentMean(xi, seg, counts) => {
            let rl = nodes[*xi].value.row_len();
            if let Some(gx) = acc(nodes, grads, *xi) {
                for (r, &s) in seg.iter().enumerate() {
                    let inv = T::one() / T::from_f64(counts[s] as f64);
                    for k in 0..rl {
                        gx[r * rl + k] += gy[s * rl + k] * inv;
                    }
                }
            }
        }
        Op::Sum(xi) => {
            if let Some(gx) = acc(nodes, grads, *xi) {
                let g = gy[0];
                gx.iter_mut().for_each(|a| *a += g);
            }
        }
        Op::Reshape(xi) => {
            if let Some(gx) = acc(nodes, grads, *xi) {
                gx.iter_mut().zip(gy).for_each(|(a, &g)| *a += g);
            }
        }
    }
}
