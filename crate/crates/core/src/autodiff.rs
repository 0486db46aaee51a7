//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] borrows a [`ParamSet`]; parameters enter the graph through
//! [`Tape::param`] without being copied. Every primitive appends one node.
//! [`Tape::backward`] walks the nodes in reverse insertion order, which is a
//! reverse topological order because a node can only reference earlier nodes.
//! Gradients arriving from several consumers are summed.
//!
//! All 2-D primitives treat a tensor of shape `[.., c]` as a matrix with
//! `c` columns, and 1-D tensors as a single row.

use crate::error::TensorError;
use crate::params::ParamSet;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<F> {
    Constant,
    Param(usize),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    MatMulNt {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddRow {
        a: Var,
        row: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: F,
    },
    Gelu {
        a: Var,
        cdf: Vec<F>,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    LayerNorm {
        a: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Mean {
        a: Var,
        axis: usize,
    },
    Sum {
        a: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<F>,
    },
    SliceCols {
        a: Var,
        start: usize,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    GatherRows {
        a: Var,
        rows: Vec<usize>,
    },
}

struct Node<F> {
    op: Op<F>,
    value: Option<Tensor<F>>,
}

/// Per-parameter gradients, aligned with the [`ParamSet`] the tape borrowed.
#[derive(Clone, Debug)]
pub struct Gradients<F = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn zeros_like(params: &ParamSet<F>) -> Self {
        Self {
            names: params.names().to_vec(),
            tensors: params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn at(&self, i: usize) -> &Tensor<F> {
        &self.tensors[i]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Adds `other` element-wise. Both must come from the same parameter layout.
    pub fn accumulate(&mut self, other: &Gradients<F>) {
        debug_assert_eq!(self.names, other.names);
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    /// Name of the first tensor containing a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.iter().find(|(_, t)| !t.all_finite()).map(|(n, _)| n)
    }
}

pub struct Tape<'p, F: Scalar> {
    params: &'p ParamSet<F>,
    nodes: Vec<Node<F>>,
    param_vars: Vec<Option<Var>>,
}

fn mismatch(
    op: &'static str,
    lhs_name: &'static str,
    lhs: &[usize],
    rhs_name: &'static str,
    rhs: &[usize],
) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs_name,
        lhs: lhs.to_vec(),
        rhs_name,
        rhs: rhs.to_vec(),
    }
}

/// Iteration geometry for reducing a `[rows, cols]` matrix along `axis`:
/// returns (group count, group length, stride inside a group, group offset fn).
fn axis_groups(
    op: &'static str,
    shape: &[usize],
    axis: usize,
) -> Result<(usize, usize, usize, usize), TensorError> {
    let (rows, cols) = match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => {
            return Err(TensorError::Invalid {
                op,
                reason: format!("expected a 1-D or 2-D tensor, got shape {shape:?}"),
            })
        }
    };
    let last = shape.len() - 1;
    if axis > last {
        return Err(TensorError::InvalidAxis {
            op,
            axis,
            shape: shape.to_vec(),
        });
    }
    if axis == last {
        // groups are rows: offset(g) = g*cols, stride 1
        Ok((rows, cols, 1, cols))
    } else {
        // groups are columns: offset(g) = g, stride cols
        Ok((cols, rows, cols, 1))
    }
}

impl<'p, F: Scalar> Tape<'p, F> {
    pub fn new(params: &'p ParamSet<F>) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamSet<F> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        match &self.nodes[v.0].op {
            Op::Param(i) => self.params.at(*i),
            _ => self.nodes[v.0]
                .value
                .as_ref()
                .expect("non-param nodes own a value"),
        }
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(Op::Constant, value)
    }

    /// Leaf for parameter slot `i`. Repeated calls return the same node so
    /// fan-out gradients meet in one place.
    pub fn param_at(&mut self, i: usize) -> Var {
        if let Some(v) = self.param_vars[i] {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(i),
            value: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[i] = Some(v);
        v
    }

    pub fn param(&mut self, name: &str) -> Result<Var, TensorError> {
        let i = self.params.require(name)?;
        Ok(self.param_at(i))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        if bv.shape().len() != 2 || bv.shape()[0] != k {
            return Err(mismatch("matmul", "a", av.shape(), "b", bv.shape()));
        }
        let n = bv.shape()[1];
        let mut out = vec![F::zero(); m * n];
        gemm_nn(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul { a, b, m, k, n }, value))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        if bv.cols() != k {
            return Err(mismatch("matmul_nt", "a", av.shape(), "b", bv.shape()));
        }
        let n = bv.rows();
        let mut out = vec![F::zero(); m * n];
        gemm_nt(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMulNt { a, b, m, k, n }, value))
    }

    /// Element-wise sum of equal shapes, or a matrix plus a broadcast row.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
            let value = Tensor::new(av.shape().to_vec(), data)?;
            return Ok(self.push(Op::Add { a, b }, value));
        }
        if bv.shape().len() == 1 && bv.numel() == av.cols() {
            let c = av.cols();
            let mut data = av.data().to_vec();
            for row in data.chunks_mut(c) {
                for (x, &y) in row.iter_mut().zip(bv.data()) {
                    *x += y;
                }
            }
            let value = Tensor::new(av.shape().to_vec(), data)?;
            return Ok(self.push(Op::AddRow { a, row: b }, value));
        }
        Err(mismatch("add", "a", av.shape(), "b", bv.shape()))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("mul", "a", av.shape(), "b", bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(Op::Mul { a, b }, value))
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x * factor).collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(Op::Scale { a, factor }, value)
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let half = F::lit(0.5);
        let inv_sqrt2 = F::lit(std::f64::consts::FRAC_1_SQRT_2);
        let cdf: Vec<F> = av
            .data()
            .iter()
            .map(|&x| half * (F::one() + (x * inv_sqrt2).erf()))
            .collect();
        let data = av.data().iter().zip(&cdf).map(|(&x, &c)| x * c).collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(Op::Gelu { a, cdf }, value)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.softmax_masked(a, axis, None)
    }

    /// Softmax along `axis`. Positions where `keep[j]` is false (indexed
    /// within each group) receive probability exactly zero.
    pub fn softmax_masked(&mut self, a: Var, axis: usize, keep: Option<&[bool]>) -> Result<Var, TensorError> {
        let av = self.value(a);
        let (groups, glen, stride, goff) = axis_groups("softmax", av.shape(), axis)?;
        if let Some(k) = keep {
            if k.len() != glen {
                return Err(mismatch("softmax", "x", av.shape(), "mask", &[k.len()]));
            }
            if !k.iter().any(|&b| b) {
                return Err(TensorError::Invalid {
                    op: "softmax",
                    reason: "mask excludes every position".into(),
                });
            }
        }
        let x = av.data();
        let mut out = vec![F::zero(); x.len()];
        for g in 0..groups {
            let base = g * goff;
            let kept = |t: usize| keep.is_none_or(|k| k[t]);
            let mut max = F::neg_infinity();
            for t in 0..glen {
                if kept(t) {
                    max = max.max(x[base + t * stride]);
                }
            }
            let mut total = F::zero();
            for t in 0..glen {
                if kept(t) {
                    let e = (x[base + t * stride] - max).exp();
                    out[base + t * stride] = e;
                    total += e;
                }
            }
            for t in 0..glen {
                out[base + t * stride] /= total;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        Ok(self.push(Op::Softmax { a, axis }, value))
    }

    /// Layer normalization over the last axis with population variance.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let (av, gv, bv) = (self.value(a), self.value(gamma), self.value(beta));
        let c = av.cols();
        if gv.numel() != c {
            return Err(mismatch("layer_norm", "x", av.shape(), "gamma", gv.shape()));
        }
        if bv.numel() != c {
            return Err(mismatch("layer_norm", "x", av.shape(), "beta", bv.shape()));
        }
        let eps = F::lit(LAYER_NORM_EPS);
        let nf = F::from_usize(c).unwrap();
        let rows = av.rows();
        let mut xhat = vec![F::zero(); av.numel()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); av.numel()];
        for r in 0..rows {
            let row = av.row(r);
            let mut mean = F::zero();
            for &v in row {
                mean += v;
            }
            mean /= nf;
            let mut var = F::zero();
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var /= nf;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        Ok(self.push(
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                rstd,
            },
            value,
        ))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(TensorError::Invalid {
                op: "embedding",
                reason: format!("table must be 2-D, got {:?}", tv.shape()),
            });
        }
        let (v, h) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(vec![ids.len(), h], out)?;
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            value,
        ))
    }

    /// Mean along `axis`; the reduced axis is removed.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let av = self.value(a);
        let (groups, glen, stride, goff) = axis_groups("mean", av.shape(), axis)?;
        let nf = F::from_usize(glen).unwrap();
        let x = av.data();
        let mut out = vec![F::zero(); groups];
        for (g, o) in out.iter_mut().enumerate() {
            let base = g * goff;
            let mut acc = F::zero();
            for t in 0..glen {
                acc += x[base + t * stride];
            }
            *o = acc / nf;
        }
        let value = Tensor::from_vec(out);
        Ok(self.push(Op::Mean { a, axis }, value))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Op::Sum { a }, Tensor::scalar(s))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let lv = self.value(logits);
        let (rows, c) = (lv.rows(), lv.cols());
        if labels.len() != rows {
            return Err(mismatch(
                "cross_entropy",
                "logits",
                lv.shape(),
                "labels",
                &[labels.len()],
            ));
        }
        let mut probs = vec![F::zero(); rows * c];
        let mut loss = F::zero();
        for (r, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: label,
                    bound: c,
                });
            }
            let row = lv.row(r);
            let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let mut total = F::zero();
            for &v in row {
                total += (v - max).exp();
            }
            let log_z = max + total.ln();
            loss += log_z - row[label];
            for j in 0..c {
                probs[r * c + j] = (row[j] - log_z).exp();
            }
        }
        loss /= F::from_usize(rows).unwrap();
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let av = self.value(a);
        let c = av.cols();
        if start + len > c {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: c,
            });
        }
        let rows = av.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let value = Tensor::new(vec![rows, len], out)?;
        Ok(self.push(Op::SliceCols { a, start }, value))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat_cols",
            reason: "no inputs".into(),
        })?;
        let rows = self.value(*first).rows();
        let mut total = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(mismatch(
                    "concat_cols",
                    "first",
                    self.value(*first).shape(),
                    "part",
                    pv.shape(),
                ));
            }
            total += pv.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], out)?;
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            value,
        ))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let av = self.value(a);
        let (n, c) = (av.rows(), av.cols());
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: r,
                    bound: n,
                });
            }
            out.extend_from_slice(av.row(r));
        }
        let value = Tensor::new(vec![rows.len(), c], out)?;
        Ok(self.push(
            Op::GatherRows {
                a,
                rows: rows.to_vec(),
            },
            value,
        ))
    }

    /// Vector-Jacobian products from a scalar `loss` back to every parameter.
    /// Parameters the loss does not depend on get zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>, TensorError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<F>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::filled(lv.shape(), F::one()));
        let mut out = Gradients::zeros_like(self.params);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let gd = g.data();
            match &self.nodes[i].op {
                Op::Constant => {}
                Op::Param(p) => out.tensors[*p].add_assign(&g),
                Op::MatMul { a, b, m, k, n } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    self.acc(&mut grads, &mut out, *a, |da| {
                        gemm_nt(gd, bv.data(), da, *m, *n, *k)
                    });
                    self.acc(&mut grads, &mut out, *b, |db| {
                        gemm_tn(av.data(), gd, db, *k, *m, *n)
                    });
                }
                Op::MatMulNt { a, b, m, k, n } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    // out[m,n] = a[m,k] · b[n,k]ᵀ
                    self.acc(&mut grads, &mut out, *a, |da| {
                        gemm_nn(gd, bv.data(), da, *m, *n, *k)
                    });
                    self.acc(&mut grads, &mut out, *b, |db| {
                        gemm_tn(gd, av.data(), db, *n, *m, *k)
                    });
                }
                Op::Add { a, b } => {
                    self.acc(&mut grads, &mut out, *a, |da| add_into(da, gd));
                    self.acc(&mut grads, &mut out, *b, |db| add_into(db, gd));
                }
                Op::AddRow { a, row } => {
                    self.acc(&mut grads, &mut out, *a, |da| add_into(da, gd));
                    self.acc(&mut grads, &mut out, *row, |dr| {
                        let c = dr.len();
                        for chunk in gd.chunks(c) {
                            add_into(dr, chunk);
                        }
                    });
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    self.acc(&mut grads, &mut out, *a, |da| {
                        for ((d, &gv), &y) in da.iter_mut().zip(gd).zip(bv.data()) {
                            *d += gv * y;
                        }
                    });
                    self.acc(&mut grads, &mut out, *b, |db| {
                        for ((d, &gv), &x) in db.iter_mut().zip(gd).zip(av.data()) {
                            *d += gv * x;
                        }
                    });
                }
                Op::Scale { a, factor } => {
                    self.acc(&mut grads, &mut out, *a, |da| {
                        for (d, &gv) in da.iter_mut().zip(gd) {
                            *d += gv * *factor;
                        }
                    });
                }
                Op::Gelu { a, cdf } => {
                    let av = self.value(*a);
                    let half = F::lit(0.5);
                    let inv_sqrt_2pi = F::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                    self.acc(&mut grads, &mut out, *a, |da| {
                        for (((d, &gv), &x), &c) in da.iter_mut().zip(gd).zip(av.data()).zip(cdf) {
                            let pdf = (-half * x * x).exp() * inv_sqrt_2pi;
                            *d += gv * (c + x * pdf);
                        }
                    });
                }
                Op::Softmax { a, axis } => {
                    let y = self.nodes[i].value.as_ref().unwrap();
                    let (groups, glen, stride, goff) =
                        axis_groups("softmax", y.shape(), *axis).expect("validated forward");
                    let yd = y.data();
                    self.acc(&mut grads, &mut out, *a, |da| {
                        for g in 0..groups {
                            let base = g * goff;
                            let mut dot = F::zero();
                            for t in 0..glen {
                                let j = base + t * stride;
                                dot += gd[j] * yd[j];
                            }
                            for t in 0..glen {
                                let j = base + t * stride;
                                da[j] += yd[j] * (gd[j] - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    a,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let gv = self.value(*gamma);
                    let c = gv.numel();
                    let rows = rstd.len();
                    let nf = F::from_usize(c).unwrap();
                    self.acc(&mut grads, &mut out, *gamma, |dg| {
                        for r in 0..rows {
                            for j in 0..c {
                                dg[j] += gd[r * c + j] * xhat[r * c + j];
                            }
                        }
                    });
                    self.acc(&mut grads, &mut out, *beta, |db| {
                        for chunk in gd.chunks(c) {
                            add_into(db, chunk);
                        }
                    });
                    self.acc(&mut grads, &mut out, *a, |da| {
                        let mut dxhat = vec![F::zero(); c];
                        for r in 0..rows {
                            let mut sum_d = F::zero();
                            let mut sum_dx = F::zero();
                            for j in 0..c {
                                let d = gd[r * c + j] * gv.data()[j];
                                dxhat[j] = d;
                                sum_d += d;
                                sum_dx += d * xhat[r * c + j];
                            }
                            let scale = rstd[r] / nf;
                            for j in 0..c {
                                da[r * c + j] += scale * (nf * dxhat[j] - sum_d - xhat[r * c + j] * sum_dx);
                            }
                        }
                    });
                }
                Op::Embedding { table, ids } => {
                    let h = self.value(*table).cols();
                    self.acc(&mut grads, &mut out, *table, |dt| {
                        for (r, &id) in ids.iter().enumerate() {
                            add_into(&mut dt[id * h..(id + 1) * h], &gd[r * h..(r + 1) * h]);
                        }
                    });
                }
                Op::Mean { a, axis } => {
                    let av = self.value(*a);
                    let (groups, glen, stride, goff) =
                        axis_groups("mean", av.shape(), *axis).expect("validated forward");
                    let nf = F::from_usize(glen).unwrap();
                    self.acc(&mut grads, &mut out, *a, |da| {
                        for (g, &gv) in gd.iter().enumerate().take(groups) {
                            let base = g * goff;
                            let share = gv / nf;
                            for t in 0..glen {
                                da[base + t * stride] += share;
                            }
                        }
                    });
                }
                Op::Sum { a } => {
                    let gv = gd[0];
                    self.acc(&mut grads, &mut out, *a, |da| {
                        for d in da.iter_mut() {
                            *d += gv;
                        }
                    });
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let c = self.value(*logits).cols();
                    let scale = gd[0] / F::from_usize(labels.len()).unwrap();
                    self.acc(&mut grads, &mut out, *logits, |dl| {
                        for (r, &label) in labels.iter().enumerate() {
                            for j in 0..c {
                                let onehot = if j == label { F::one() } else { F::zero() };
                                dl[r * c + j] += scale * (probs[r * c + j] - onehot);
                            }
                        }
                    });
                }
                Op::SliceCols { a, start } => {
                    let c = self.value(*a).cols();
                    let len = g.cols();
                    self.acc(&mut grads, &mut out, *a, |da| {
                        for (r, chunk) in gd.chunks(len).enumerate() {
                            add_into(&mut da[r * c + start..r * c + start + len], chunk);
                        }
                    });
                }
                Op::ConcatCols { parts } => {
                    let total = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.value(p).cols();
                        self.acc(&mut grads, &mut out, p, |dp| {
                            for (r, chunk) in dp.chunks_mut(pc).enumerate() {
                                add_into(chunk, &gd[r * total + offset..r * total + offset + pc]);
                            }
                        });
                        offset += pc;
                    }
                }
                Op::GatherRows { a, rows } => {
                    let c = g.cols();
                    self.acc(&mut grads, &mut out, *a, |da| {
                        for (k, &r) in rows.iter().enumerate() {
                            add_into(&mut da[r * c..(r + 1) * c], &gd[k * c..(k + 1) * c]);
                        }
                    });
                }
            }
        }
        Ok(out)
    }

    /// Adds into the gradient of `v`: parameters accumulate straight into
    /// `out`, other nodes into a lazily allocated buffer.
    fn acc(&self, grads: &mut [Option<Tensor<F>>], out: &mut Gradients<F>, v: Var, f: impl FnOnce(&mut [F])) {
        if let Op::Param(p) = self.nodes[v.0].op {
            f(out.tensors[p].data_mut());
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Free-function form of [`Tape::backward`].
pub fn backward<F: Scalar>(tape: &Tape<'_, F>, loss: Var) -> Result<Gradients<F>, TensorError> {
    tape.backward(loss)
}
