//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value, the indices of
//! its inputs and whatever it saved for the backward pass. Node indices are
//! therefore already a topological order and [`Tape::backward`] is a single
//! reverse sweep. Parameters are borrowed from a [`ParamStore`] rather than
//! copied; sliced operations read and write the leading region of the full
//! buffer in place, so a submodel's gradient lands directly in the shared
//! parameter's gradient.

use std::borrow::Cow;

use super::gemm::{gemm, Strides};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
        k_in: usize,
        k_out: usize,
        row_offset: usize,
    },
    Slice {
        src: usize,
        start: Vec<usize>,
    },
    Embed {
        table: usize,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: usize,
        w: usize,
        b: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    MulConst {
        x: usize,
        c: Vec<f64>,
    },
    AddConst {
        x: usize,
    },
    ScaleConst {
        x: usize,
        c: f64,
    },
    ScaleByScalar {
        x: usize,
        s: usize,
    },
    Relu {
        x: usize,
    },
    Softmax {
        x: usize,
    },
    LogClamp {
        x: usize,
        eps: f64,
    },
    SumAll {
        x: usize,
    },
    Pick {
        x: usize,
        idx: Vec<usize>,
    },
    ScaleRowBlocks {
        x: usize,
        s: usize,
        block: usize,
        s_index: Vec<usize>,
    },
    RowSelect {
        x: usize,
        rows: Vec<usize>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        layout: AttentionLayout,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
}

/// Shape bookkeeping for the fused causal attention op.
#[derive(Debug, Clone)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    /// One flag per row of the `[batch * seq, width]` inputs; `false` marks a
    /// padding position that may not be attended to.
    pub key_valid: Vec<bool>,
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    params: Option<&'p ParamStore>,
    bound: Vec<Option<Var>>,
    grad_enabled: bool,
    flops: u64,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn take_grad(nodes: &mut [Node<'_>], j: usize) -> Vec<f64> {
    nodes[j]
        .grad
        .take()
        .unwrap_or_else(|| vec![0.0; nodes[j].value.len()])
}

fn add_grad(nodes: &mut [Node<'_>], j: usize, contrib: Vec<f64>) {
    match &mut nodes[j].grad {
        Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contrib),
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            bound: Vec::new(),
            grad_enabled: true,
            flops: 0,
        }
    }

    /// Tape whose parameter leaves borrow from `params`.
    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            bound: vec![None; params.len()],
            ..Self::new()
        }
    }

    /// Tape that records values only; nothing on it requires a gradient.
    pub fn no_grad(params: &'p ParamStore) -> Self {
        Self {
            grad_enabled: false,
            ..Self::with_params(params)
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Floating-point operations executed by matrix products, attention and
    /// layer normalization since the tape was created.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn owned(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        self.push(Cow::Owned(value), op, inputs)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value: Cow::Owned(value),
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same var.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let store = self.params.expect("tape has no parameter store");
        self.nodes.push(Node {
            value: Cow::Borrowed(store.get(id)),
            grad: None,
            requires_grad: self.grad_enabled,
            op: Op::Leaf,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound[id.index()] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Gradient of every parameter bound on this tape, indexed by parameter.
    /// Parameters the loss never reached stay `None`.
    pub fn param_grads(&self) -> Vec<Option<Tensor>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| self.grad(v)))
            .collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Strides::row_major(k),
            self.value(b).data(),
            Strides::row_major(n),
            &mut out,
            Strides::row_major(n),
            0.0,
        );
        self.flops += 2 * (m * k * n) as u64;
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.owned(t, Op::MatMul { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    /// `x · w[:k_out, :k_in]ᵀ + b[:k_out]` where `w` is a full `[D_out, D_in]`
    /// weight and `x` is `[N, k_in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>, k_in: usize, k_out: usize) -> Result<Var> {
        self.linear_rows(x, w, b, k_in, 0, k_out)
    }

    /// Like [`Tape::linear`] but uses weight rows `row_offset..row_offset + k_out`.
    pub fn linear_rows(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        k_in: usize,
        row_offset: usize,
        k_out: usize,
    ) -> Result<Var> {
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 {
            return Err(dim_err("linear weight", &sw, &[k_out, k_in]));
        }
        let (d_out, d_in) = (sw[0], sw[1]);
        if k_in == 0 || k_in > d_in {
            return Err(Error::Slice {
                what: "linear input width",
                requested: k_in,
                limit: d_in,
            });
        }
        if k_out == 0 || row_offset + k_out > d_out {
            return Err(Error::Slice {
                what: "linear output width",
                requested: row_offset + k_out,
                limit: d_out,
            });
        }
        let sx = self.shape(x);
        if sx.len() != 2 || sx[1] != k_in {
            return Err(dim_err("linear", sx, &[k_out, k_in]));
        }
        let n = sx[0];
        if let Some(b) = b {
            let sb = self.shape(b);
            if sb.len() != 1 || sb[0] != d_out {
                return Err(dim_err("linear bias", sb, &[d_out]));
            }
        }
        let mut out = vec![0.0; n * k_out];
        let wd = &self.value(w).data()[row_offset * d_in..];
        gemm(
            n,
            k_in,
            k_out,
            self.value(x).data(),
            Strides::row_major(k_in),
            wd,
            Strides::transposed(d_in),
            &mut out,
            Strides::row_major(k_out),
            0.0,
        );
        if let Some(b) = b {
            let bias = &self.value(b).data()[row_offset..row_offset + k_out];
            for row in out.chunks_mut(k_out) {
                row.iter_mut().zip(bias).for_each(|(o, bi)| *o += bi);
            }
        }
        self.flops += 2 * (n * k_in * k_out) as u64;
        let t = Tensor::new(vec![n, k_out], out)?;
        let mut inputs = vec![x.0, w.0];
        inputs.extend(b.map(|b| b.0));
        Ok(self.owned(
            t,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                k_in,
                k_out,
                row_offset,
            },
            &inputs,
        ))
    }

    /// Copy of the block `[start[d], start[d] + len[d])` of a rank-1 or
    /// rank-2 tensor.
    pub fn slice(&mut self, src: Var, start: &[usize], len: &[usize]) -> Result<Var> {
        let s = self.shape(src).to_vec();
        if s.len() != start.len() || s.len() != len.len() || s.len() > 2 {
            return Err(dim_err("slice", &s, len));
        }
        for d in 0..s.len() {
            if len[d] == 0 || start[d] + len[d] > s[d] {
                return Err(Error::Slice {
                    what: "slice extent",
                    requested: start[d] + len[d],
                    limit: s[d],
                });
            }
        }
        let src_t = self.value(src);
        let data = if s.len() == 1 {
            src_t.data()[start[0]..start[0] + len[0]].to_vec()
        } else {
            let mut out = Vec::with_capacity(len[0] * len[1]);
            for r in start[0]..start[0] + len[0] {
                let row = src_t.row(r);
                out.extend_from_slice(&row[start[1]..start[1] + len[1]]);
            }
            out
        };
        let t = Tensor::new(len.to_vec(), data)?;
        Ok(self.owned(
            t,
            Op::Slice {
                src: src.0,
                start: start.to_vec(),
            },
            &[src.0],
        ))
    }

    /// Rows `ids` of `table`, truncated to the first `width` columns.
    pub fn embed(&mut self, table: Var, ids: &[usize], width: usize) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(dim_err("embed", &s, &[width]));
        }
        if width == 0 || width > s[1] {
            return Err(Error::Slice {
                what: "embedding width",
                requested: width,
                limit: s[1],
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(Error::Data(format!("id {bad} outside table of {} rows", s[0])));
        }
        let tt = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            out.extend_from_slice(&tt.row(i)[..width]);
        }
        let t = Tensor::new(vec![ids.len(), width], out)?;
        Ok(self.owned(
            t,
            Op::Embed {
                table: table.0,
                ids: ids.to_vec(),
            },
            &[table.0],
        ))
    }

    /// Per-row normalization over the `k` features of `x`, followed by the
    /// affine map with `w[:k]` and `b[:k]`.
    pub fn layer_norm(&mut self, x: Var, w: Var, b: Var, k: usize, eps: f64) -> Result<Var> {
        let d = self.shape(w)[0];
        if k == 0 || k > d {
            return Err(Error::Slice {
                what: "layer-norm width",
                requested: k,
                limit: d,
            });
        }
        let sx = self.shape(x);
        if sx.len() != 2 || sx[1] != k {
            return Err(dim_err("layer_norm", sx, &[k]));
        }
        let n = sx[0];
        let xv = self.value(x).data();
        let wv = &self.value(w).data()[..k];
        let bv = &self.value(b).data()[..k];
        let mut out = vec![0.0; n * k];
        let mut mean = vec![0.0; n];
        let mut rstd = vec![0.0; n];
        for r in 0..n {
            let row = &xv[r * k..(r + 1) * k];
            let mu = row.iter().sum::<f64>() / k as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / k as f64;
            let rs = 1.0 / (var + eps).sqrt();
            for c in 0..k {
                out[r * k + c] = (row[c] - mu) * rs * wv[c] + bv[c];
            }
            mean[r] = mu;
            rstd[r] = rs;
        }
        self.flops += 5 * (n * k) as u64;
        let t = Tensor::new(vec![n, k], out)?;
        Ok(self.owned(
            t,
            Op::LayerNorm {
                x: x.0,
                w: w.0,
                b: b.0,
                mean,
                rstd,
            },
            &[x.0, w.0, b.0],
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(x);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect()).expect("shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y);
        Ok(self.owned(t, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_map(a, b, |x, y| x - y);
        Ok(self.owned(t, Op::Sub { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_map(a, b, |x, y| x * y);
        Ok(self.owned(t, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(dim_err("mul_const", self.shape(x), c.shape()));
        }
        let v = self.value(x);
        let data = v.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.owned(
            t,
            Op::MulConst {
                x: x.0,
                c: c.data().to_vec(),
            },
            &[x.0],
        ))
    }

    /// A node holding `value` whose backward pass treats it as `x ⊙ c`.
    pub fn surrogate(&mut self, x: Var, value: Tensor, c: &Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() || self.shape(x) != value.shape() {
            return Err(dim_err("surrogate", self.shape(x), c.shape()));
        }
        Ok(self.owned(
            value,
            Op::MulConst {
                x: x.0,
                c: c.data().to_vec(),
            },
            &[x.0],
        ))
    }

    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(dim_err("add_const", self.shape(x), c.shape()));
        }
        let v = self.value(x);
        let data = v.data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.owned(t, Op::AddConst { x: x.0 }, &[x.0]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.map(x, |a| a * c);
        self.owned(t, Op::ScaleConst { x: x.0, c }, &[x.0])
    }

    /// `s · x` for a single-element `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(dim_err("scale_by", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).item();
        let t = self.map(x, |a| a * sv);
        Ok(self.owned(t, Op::ScaleByScalar { x: x.0, s: s.0 }, &[x.0, s.0]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |a| a.max(0.0));
        self.owned(t, Op::Relu { x: x.0 }, &[x.0])
    }

    /// Softmax along the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.data().iter().any(|a| !a.is_finite()) {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let c = v.cols();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.owned(t, Op::Softmax { x: x.0 }, &[x.0]))
    }

    /// `ln(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn log_clamp(&mut self, x: Var, eps: f64) -> Var {
        let t = self.map(x, |a| a.max(eps).ln());
        self.owned(t, Op::LogClamp { x: x.0, eps }, &[x.0])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.owned(Tensor::scalar(s), Op::SumAll { x: x.0 }, &[x.0])
    }

    /// `out[r] = x[r, idx[r]]` for a `[R, C]` input.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if v.shape().len() != 2 || v.rows() != idx.len() {
            return Err(dim_err("pick", v.shape(), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.cols()) {
            return Err(Error::Index {
                index: bad,
                len: v.cols(),
            });
        }
        let data = idx.iter().enumerate().map(|(r, &c)| v.at2(r, c)).collect();
        let t = Tensor::new(vec![idx.len()], data)?;
        Ok(self.owned(
            t,
            Op::Pick {
                x: x.0,
                idx: idx.to_vec(),
            },
            &[x.0],
        ))
    }

    /// Multiply row block `i` (rows `i*block .. (i+1)*block`) of `x` by
    /// `s[s_index[i]]`.
    pub fn scale_row_blocks(&mut self, x: Var, s: Var, block: usize, s_index: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if block == 0 || v.rows() != block * s_index.len() {
            return Err(dim_err("scale_row_blocks", v.shape(), &[block, s_index.len()]));
        }
        let sv = self.value(s).data();
        if let Some(&bad) = s_index.iter().find(|&&i| i >= sv.len()) {
            return Err(Error::Index {
                index: bad,
                len: sv.len(),
            });
        }
        let width = block * v.cols();
        let mut out = v.data().to_vec();
        for (chunk, &si) in out.chunks_mut(width).zip(s_index) {
            let f = sv[si];
            chunk.iter_mut().for_each(|a| *a *= f);
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.owned(
            t,
            Op::ScaleRowBlocks {
                x: x.0,
                s: s.0,
                block,
                s_index: s_index.to_vec(),
            },
            &[x.0, s.0],
        ))
    }

    /// Gather whole rows of a `[R, C]` tensor.
    pub fn rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if v.shape().len() != 2 {
            return Err(dim_err("rows", v.shape(), &[rows.len()]));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= v.rows()) {
            return Err(Error::Index {
                index: bad,
                len: v.rows(),
            });
        }
        let mut out = Vec::with_capacity(rows.len() * v.cols());
        for &r in rows {
            out.extend_from_slice(v.row(r));
        }
        let t = Tensor::new(vec![rows.len(), v.cols()], out)?;
        Ok(self.owned(
            t,
            Op::RowSelect {
                x: x.0,
                rows: rows.to_vec(),
            },
            &[x.0],
        ))
    }

    /// Multi-head scaled dot-product attention with a strictly causal mask.
    ///
    /// `q`, `k`, `v` are `[batch * seq, width]`; heads split the width into
    /// contiguous chunks of `width / heads`. Position `t` attends to keys
    /// `j <= t` that are not padding; a padding query always sees itself so
    /// that its row stays well defined.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        if self.shape(k) != sq.as_slice() || self.shape(v) != sq.as_slice() || sq.len() != 2 {
            return Err(dim_err("attention", &sq, self.shape(k)));
        }
        let (rows, width) = (sq[0], sq[1]);
        let AttentionLayout {
            batch, seq, heads, ..
        } = layout;
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "width {width} is not divisible by {heads} heads"
            )));
        }
        if rows != batch * seq || layout.key_valid.len() != rows {
            return Err(dim_err("attention layout", &sq, &[batch, seq]));
        }
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * width];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            let base = b * seq;
            for h in 0..heads {
                let off = h * dh;
                for t in 0..seq {
                    let qrow = &qd[(base + t) * width + off..][..dh];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let krow = &kd[(base + j) * width + off..][..dh];
                        *s = scale * dot(qrow, krow);
                    }
                    let p = &mut probs[((b * heads + h) * seq + t) * seq..][..seq];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..seq {
                        if allowed(&layout.key_valid, base, t, j) {
                            max = max.max(scores[j]);
                        }
                    }
                    let mut z = 0.0;
                    for j in 0..seq {
                        p[j] = if allowed(&layout.key_valid, base, t, j) {
                            (scores[j] - max).exp()
                        } else {
                            0.0
                        };
                        z += p[j];
                    }
                    p.iter_mut().for_each(|a| *a /= z);
                    let orow = &mut out[(base + t) * width + off..][..dh];
                    for j in 0..seq {
                        let vrow = &vd[(base + j) * width + off..][..dh];
                        let pj = p[j];
                        orow.iter_mut().zip(vrow).for_each(|(o, x)| *o += pj * x);
                    }
                }
            }
        }
        self.flops += 4 * (batch * seq * seq * width) as u64;
        let t = Tensor::new(vec![rows, width], out)?;
        Ok(self.owned(
            t,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                layout,
                probs,
            },
            &[q.0, k.0, v.0],
        ))
    }

    /// `Σ_r weights[r] · (−log softmax(logits[r])[targets[r]])` over a full
    /// softmax. Rows with zero weight are skipped entirely.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, c) = (lv.rows(), lv.cols());
        if lv.shape().len() != 2 || targets.len() != n || weights.len() != n {
            return Err(dim_err("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for r in 0..n {
            if weights[r] == 0.0 {
                continue;
            }
            let tgt = targets[r];
            if tgt >= c {
                return Err(Error::Index { index: tgt, len: c });
            }
            let row = lv.row(r);
            if row.iter().any(|a| !a.is_finite()) {
                return Err(Error::Numeric("non-finite logits".into()));
            }
            let p = &mut probs[r * c..(r + 1) * c];
            p.copy_from_slice(row);
            let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for a in p.iter_mut() {
                *a = (*a - max).exp();
                z += *a;
            }
            p.iter_mut().for_each(|a| *a /= z);
            total += weights[r] * (z.ln() + max - row[tgt]);
        }
        let saved = if self.grad_enabled { probs } else { Vec::new() };
        Ok(self.owned(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs: saved,
            },
            &[logits.0],
        ))
    }

    /// Populate gradients of every node reachable from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = node.grad.as_deref() else {
                continue;
            };
            backprop(before, node, g);
        }
        Ok(())
    }
}

fn allowed(key_valid: &[bool], base: usize, t: usize, j: usize) -> bool {
    j <= t && (j == t || key_valid[base + j])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for a in row.iter_mut() {
        *a = (*a - max).exp();
        z += *a;
    }
    row.iter_mut().for_each(|a| *a /= z);
}

fn needs(nodes: &[Node<'_>], j: usize) -> bool {
    nodes[j].requires_grad
}

fn backprop(nodes: &mut [Node<'_>], node: &Node<'_>, g: &[f64]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (a, b) = (*a, *b);
            let (m, k) = (nodes[a].value.shape()[0], nodes[a].value.shape()[1]);
            let n = nodes[b].value.shape()[1];
            if needs(nodes, a) {
                let mut ga = take_grad(nodes, a);
                gemm(
                    m,
                    n,
                    k,
                    g,
                    Strides::row_major(n),
                    nodes[b].value.data(),
                    Strides::transposed(n),
                    &mut ga,
                    Strides::row_major(k),
                    1.0,
                );
                nodes[a].grad = Some(ga);
            }
            if needs(nodes, b) {
                let mut gb = take_grad(nodes, b);
                gemm(
                    k,
                    m,
                    n,
                    nodes[a].value.data(),
                    Strides::transposed(k),
                    g,
                    Strides::row_major(n),
                    &mut gb,
                    Strides::row_major(n),
                    1.0,
                );
                nodes[b].grad = Some(gb);
            }
        }
        Op::Linear {
            x,
            w,
            b,
            k_in,
            k_out,
            row_offset,
        } => {
            let (x, w, k_in, k_out) = (*x, *w, *k_in, *k_out);
            let n = out.rows();
            let d_in = nodes[w].value.shape()[1];
            let w_off = row_offset * d_in;
            if needs(nodes, x) {
                let mut gx = take_grad(nodes, x);
                gemm(
                    n,
                    k_out,
                    k_in,
                    g,
                    Strides::row_major(k_out),
                    &nodes[w].value.data()[w_off..],
                    Strides::row_major(d_in),
                    &mut gx,
                    Strides::row_major(k_in),
                    1.0,
                );
                nodes[x].grad = Some(gx);
            }
            if needs(nodes, w) {
                let mut gw = take_grad(nodes, w);
                gemm(
                    k_out,
                    n,
                    k_in,
                    g,
                    Strides::transposed(k_out),
                    nodes[x].value.data(),
                    Strides::row_major(k_in),
                    &mut gw[w_off..],
                    Strides::row_major(d_in),
                    1.0,
                );
                nodes[w].grad = Some(gw);
            }
            if let Some(b) = *b {
                if needs(nodes, b) {
                    let mut gb = take_grad(nodes, b);
                    for row in g.chunks(k_out) {
                        gb[*row_offset..*row_offset + k_out]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(a, r)| *a += r);
                    }
                    nodes[b].grad = Some(gb);
                }
            }
        }
        Op::Slice { src, start } => {
            let src = *src;
            if needs(nodes, src) {
                let mut gs = take_grad(nodes, src);
                let shape = out.shape();
                if shape.len() == 1 {
                    gs[start[0]..start[0] + shape[0]]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, b)| *a += b);
                } else {
                    let cols = nodes[src].value.cols();
                    for (r, row) in g.chunks(shape[1]).enumerate() {
                        let o = (start[0] + r) * cols + start[1];
                        gs[o..o + shape[1]].iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
                nodes[src].grad = Some(gs);
            }
        }
        Op::Embed { table, ids } => {
            let table = *table;
            if needs(nodes, table) {
                let mut gt = take_grad(nodes, table);
                let cols = nodes[table].value.cols();
                let width = out.cols();
                for (row, &id) in g.chunks(width).zip(ids) {
                    gt[id * cols..id * cols + width]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(a, b)| *a += b);
                }
                nodes[table].grad = Some(gt);
            }
        }
        Op::LayerNorm {
            x,
            w,
            b,
            mean,
            rstd,
        } => {
            let (x, w, b) = (*x, *w, *b);
            let k = out.cols();
            let xv = nodes[x].value.data();
            let wv = &nodes[w].value.data()[..k];
            let mut gw = vec![0.0; k];
            let mut gb = vec![0.0; k];
            let mut gx = vec![0.0; xv.len()];
            let mut xhat = vec![0.0; k];
            let mut dxhat = vec![0.0; k];
            for r in 0..mean.len() {
                let row = &xv[r * k..(r + 1) * k];
                let gr = &g[r * k..(r + 1) * k];
                for c in 0..k {
                    xhat[c] = (row[c] - mean[r]) * rstd[r];
                    dxhat[c] = gr[c] * wv[c];
                    gw[c] += gr[c] * xhat[c];
                    gb[c] += gr[c];
                }
                let m1 = dxhat.iter().sum::<f64>() / k as f64;
                let m2 = dot(&dxhat, &xhat) / k as f64;
                for c in 0..k {
                    gx[r * k + c] = rstd[r] * (dxhat[c] - m1 - xhat[c] * m2);
                }
            }
            if needs(nodes, x) {
                add_grad(nodes, x, gx);
            }
            for (p, gp) in [(w, gw), (b, gb)] {
                if needs(nodes, p) {
                    let mut full = take_grad(nodes, p);
                    full[..k].iter_mut().zip(&gp).for_each(|(a, b)| *a += b);
                    nodes[p].grad = Some(full);
                }
            }
        }
        Op::Add { a, b } => {
            for j in [*a, *b] {
                if needs(nodes, j) {
                    add_grad(nodes, j, g.to_vec());
                }
            }
        }
        Op::Sub { a, b } => {
            if needs(nodes, *a) {
                add_grad(nodes, *a, g.to_vec());
            }
            if needs(nodes, *b) {
                add_grad(nodes, *b, g.iter().map(|v| -v).collect());
            }
        }
        Op::Mul { a, b } => {
            let (a, b) = (*a, *b);
            if needs(nodes, a) {
                let c = g.iter().zip(nodes[b].value.data()).map(|(x, y)| x * y).collect();
                add_grad(nodes, a, c);
            }
            if needs(nodes, b) {
                let c = g.iter().zip(nodes[a].value.data()).map(|(x, y)| x * y).collect();
                add_grad(nodes, b, c);
            }
        }
        Op::MulConst { x, c } => {
            if needs(nodes, *x) {
                add_grad(nodes, *x, g.iter().zip(c).map(|(a, b)| a * b).collect());
            }
        }
        Op::AddConst { x } => {
            if needs(nodes, *x) {
                add_grad(nodes, *x, g.to_vec());
            }
        }
        Op::ScaleConst { x, c } => {
            if needs(nodes, *x) {
                add_grad(nodes, *x, g.iter().map(|a| a * c).collect());
            }
        }
        Op::ScaleByScalar { x, s } => {
            let (x, s) = (*x, *s);
            if needs(nodes, x) {
                let sv = nodes[s].value.item();
                add_grad(nodes, x, g.iter().map(|a| a * sv).collect());
            }
            if needs(nodes, s) {
                let d = dot(g, nodes[x].value.data());
                add_grad(nodes, s, vec![d]);
            }
        }
        Op::Relu { x } => {
            if needs(nodes, *x) {
                let c = g
                    .iter()
                    .zip(nodes[*x].value.data())
                    .map(|(a, v)| if *v > 0.0 { *a } else { 0.0 })
                    .collect();
                add_grad(nodes, *x, c);
            }
        }
        Op::Softmax { x } => {
            if needs(nodes, *x) {
                let c = out.cols();
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.chunks(c).zip(out.data().chunks(c)).zip(gx.chunks_mut(c)) {
                    let s = dot(gr, yr);
                    for i in 0..c {
                        dr[i] = yr[i] * (gr[i] - s);
                    }
                }
                add_grad(nodes, *x, gx);
            }
        }
        Op::LogClamp { x, eps } => {
            if needs(nodes, *x) {
                let c = g
                    .iter()
                    .zip(nodes[*x].value.data())
                    .map(|(a, v)| if *v > *eps { a / v } else { 0.0 })
                    .collect();
                add_grad(nodes, *x, c);
            }
        }
        Op::SumAll { x } => {
            if needs(nodes, *x) {
                let n = nodes[*x].value.len();
                add_grad(nodes, *x, vec![g[0]; n]);
            }
        }
        Op::Pick { x, idx } => {
            if needs(nodes, *x) {
                let mut gx = take_grad(nodes, *x);
                let c = nodes[*x].value.cols();
                for (r, &i) in idx.iter().enumerate() {
                    gx[r * c + i] += g[r];
                }
                nodes[*x].grad = Some(gx);
            }
        }
        Op::ScaleRowBlocks {
            x,
            s,
            block,
            s_index,
        } => {
            let (x, s) = (*x, *s);
            let width = block * out.cols();
            if needs(nodes, x) {
                let sv = nodes[s].value.data();
                let mut gx = g.to_vec();
                for (chunk, &si) in gx.chunks_mut(width).zip(s_index) {
                    chunk.iter_mut().for_each(|a| *a *= sv[si]);
                }
                add_grad(nodes, x, gx);
            }
            if needs(nodes, s) {
                let mut gs = take_grad(nodes, s);
                let xv = nodes[x].value.data();
                for ((gc, xc), &si) in g.chunks(width).zip(xv.chunks(width)).zip(s_index) {
                    gs[si] += dot(gc, xc);
                }
                nodes[s].grad = Some(gs);
            }
        }
        Op::RowSelect { x, rows } => {
            if needs(nodes, *x) {
                let mut gx = take_grad(nodes, *x);
                let c = out.cols();
                for (gr, &r) in g.chunks(c).zip(rows) {
                    gx[r * c..(r + 1) * c].iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                }
                nodes[*x].grad = Some(gx);
            }
        }
        Op::Attention {
            q,
            k,
            v,
            layout,
            probs,
        } => {
            let (q, k, v) = (*q, *k, *v);
            let width = out.cols();
            let (batch, seq, heads) = (layout.batch, layout.seq, layout.heads);
            let dh = width / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let (qd, kd, vd) = (nodes[q].value.data(), nodes[k].value.data(), nodes[v].value.data());
            let mut gq = vec![0.0; qd.len()];
            let mut gk = vec![0.0; kd.len()];
            let mut gv = vec![0.0; vd.len()];
            let mut dp = vec![0.0; seq];
            for b in 0..batch {
                let base = b * seq;
                for h in 0..heads {
                    let off = h * dh;
                    for t in 0..seq {
                        let p = &probs[((b * heads + h) * seq + t) * seq..][..seq];
                        let go = &g[(base + t) * width + off..][..dh];
                        let mut s = 0.0;
                        for j in 0..=t {
                            if p[j] == 0.0 {
                                dp[j] = 0.0;
                                continue;
                            }
                            let vrow = &vd[(base + j) * width + off..][..dh];
                            dp[j] = dot(go, vrow);
                            s += p[j] * dp[j];
                            let gvr = &mut gv[(base + j) * width + off..][..dh];
                            gvr.iter_mut().zip(go).for_each(|(a, x)| *a += p[j] * x);
                        }
                        let qrow = &qd[(base + t) * width + off..][..dh];
                        for j in 0..=t {
                            if p[j] == 0.0 {
                                continue;
                            }
                            let ds = p[j] * (dp[j] - s) * scale;
                            let krow = &kd[(base + j) * width + off..][..dh];
                            let gqr = &mut gq[(base + t) * width + off..][..dh];
                            gqr.iter_mut().zip(krow).for_each(|(a, x)| *a += ds * x);
                            let gkr = &mut gk[(base + j) * width + off..][..dh];
                            gkr.iter_mut().zip(qrow).for_each(|(a, x)| *a += ds * x);
                        }
                    }
                }
            }
            for (j, gj) in [(q, gq), (k, gk), (v, gv)] {
                if needs(nodes, j) {
                    add_grad(nodes, j, gj);
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            weights,
            probs,
        } => {
            if needs(nodes, *logits) {
                let c = nodes[*logits].value.cols();
                let mut gl = take_grad(nodes, *logits);
                for (r, (&t, &wt)) in targets.iter().zip(weights).enumerate() {
                    if wt == 0.0 {
                        continue;
                    }
                    let f = g[0] * wt;
                    let p = &probs[r * c..(r + 1) * c];
                    let row = &mut gl[r * c..(r + 1) * c];
                    row.iter_mut().zip(p).for_each(|(a, pi)| *a += f * pi);
                    row[t] -= f;
                }
                nodes[*logits].grad = Some(gl);
            }
        }
    }
}
