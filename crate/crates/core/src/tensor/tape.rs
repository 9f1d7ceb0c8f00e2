//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward operation appends a node holding its output value and
//! enough information to run its local backward rule. Nodes are stored in
//! creation order, which is already a topological order, so `backward`
//! walks the tape once from the loss towards the leaves.

use super::kernels::{self, gemm};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{contract, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Swap01(Var),
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
        count: usize,
    },
    BceWithLogits {
        logit: Var,
        target: f64,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        pad: usize,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
    grad: Option<Vec<f64>>,
}

/// The recording tape. Create one per forward pass.
#[derive(Default, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            param: None,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            s => contract(format!("expected a matrix, got shape {s:?}")),
        }
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Copies a node's value out as a tensor (without gradient).
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    // ── leaves ──────────────────────────────────────────────────────────

    /// Records a leaf; it tracks gradients if the tensor requires them.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return shape_err("constant", &shape, &[data.len()]);
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    /// Binds a stored parameter. Only `trainable` bindings receive gradients.
    pub fn param(&mut self, store: &ParamStore, id: ParamId, trainable: bool) -> Var {
        let t = store.get(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, trainable);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub(crate) fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.nodes.iter().filter_map(|n| match (&n.param, &n.grad) {
            (Some(id), Some(g)) if n.requires_grad => Some((*id, g.as_slice())),
            _ => None,
        })
    }

    // ── linear algebra ──────────────────────────────────────────────────

    /// Matrix product `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return shape_err("matmul", &self.nodes[a.0].shape, &self.nodes[b.0].shape);
        }
        let out = kernels::matmul(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// Matrix product `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return shape_err("matmul_bt", &self.nodes[a.0].shape, &self.nodes[b.0].shape);
        }
        let out = kernels::matmul_bt(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMulBt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let src = &self.nodes[a.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), rg))
    }

    // ── elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return shape_err("add", sa, sb);
        }
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(sa.clone(), out, Op::Add(a, b), rg))
    }

    /// Adds a row vector `b` (length n) to every row of `a` (m×n).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if self.nodes[b.0].value.len() != n {
            return shape_err("add_row", &self.nodes[a.0].shape, &self.nodes[b.0].shape);
        }
        let bias = &self.nodes[b.0].value;
        let mut out = self.nodes[a.0].value.clone();
        for row in out.chunks_mut(n.max(1)).take(m) {
            add_into(row, bias);
        }
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::AddRow(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return shape_err("mul", sa, sb);
        }
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(sa.clone(), out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        let (shape, rg) = (self.nodes[a.0].shape.clone(), self.rg(a));
        self.push(shape, out, Op::Scale(a, c), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let (shape, rg) = (self.nodes[a.0].shape.clone(), self.rg(a));
        self.push(shape, out, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, kernels::sigmoid, Op::Sigmoid(a))
    }

    // ── normalisation ───────────────────────────────────────────────────

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return contract(format!("softmax axis {axis} out of range for {shape:?}"));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let mut out = self.nodes[x.0].value.clone();
        let mut buf = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                for k in 0..n {
                    buf[k] = out[(o * n + k) * inner + i];
                }
                kernels::softmax_in_place(&mut buf);
                for k in 0..n {
                    out[(o * n + k) * inner + i] = buf[k];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax { x, axis }, rg))
    }

    /// Row-wise layer normalisation of an m×n matrix.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.nodes[gamma.0].value.len() != n || self.nodes[beta.0].value.len() != n {
            return shape_err("layer_norm", &self.nodes[x.0].shape, &self.nodes[gamma.0].shape);
        }
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = g[j] * h + b[j];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    // ── indexing and shape ──────────────────────────────────────────────

    /// Gathers rows of `table` (V×d) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table)?;
        let mut out = Vec::with_capacity(ids.len() * d);
        let tv = &self.nodes[table.0].value;
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return contract("concat_rows of nothing");
        };
        let (_, n) = self.dims2(first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if c != n {
                return shape_err("concat_rows", &self.nodes[first.0].shape, &self.nodes[p.0].shape);
            }
            rows += r;
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, n], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return contract("concat_cols of nothing");
        };
        let (m, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != m {
                return shape_err("concat_cols", &self.nodes[first.0].shape, &self.nodes[p.0].shape);
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = &self.nodes[p.0].value;
            for i in 0..m {
                out[i * total + off..i * total + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![m, total], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if start + len > m {
            return Err(Error::Index {
                what: "row slice end",
                index: start + len,
                size: m,
            });
        }
        let out = self.nodes[x.0].value[start * n..(start + len) * n].to_vec();
        let rg = self.rg(x);
        Ok(self.push(vec![len, n], out, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if start + len > n {
            return Err(Error::Index {
                what: "column slice end",
                index: start + len,
                size: n,
            });
        }
        let src = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![m, len], out, Op::SliceCols { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.nodes[x.0].value.len() {
            return shape_err("reshape", &self.nodes[x.0].shape, &shape);
        }
        let out = self.nodes[x.0].value.clone();
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Reshape(x), rg))
    }

    /// Swaps the first two axes of a 3-D tensor: `[a, b, c] → [b, a, c]`.
    pub fn swap01(&mut self, x: Var) -> Result<Var> {
        let [a, b, c] = self.nodes[x.0].shape[..] else {
            return contract(format!("swap01 needs 3 axes, got {:?}", self.nodes[x.0].shape));
        };
        let src = &self.nodes[x.0].value;
        let mut out = vec![0.0; a * b * c];
        for i in 0..a {
            for j in 0..b {
                out[(j * a + i) * c..(j * a + i + 1) * c]
                    .copy_from_slice(&src[(i * b + j) * c..(i * b + j + 1) * c]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![b, a, c], out, Op::Swap01(x), rg))
    }

    // ── reductions and losses ───────────────────────────────────────────

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::MeanAll(x), rg)
    }

    /// Column means of an m×n matrix, as a 1×n row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if m == 0 {
            return contract("mean over zero rows");
        }
        let mut out = vec![0.0; n];
        for row in self.nodes[x.0].value.chunks(n) {
            add_into(&mut out, row);
        }
        out.iter_mut().for_each(|v| *v /= m as f64);
        let rg = self.rg(x);
        Ok(self.push(vec![1, n], out, Op::MeanRows(x), rg))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (n×V). Positions whose target equals `ignore` are excluded.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: Option<usize>) -> Result<Var> {
        let (n, v) = self.dims2(logits)?;
        if targets.len() != n {
            return shape_err("cross_entropy", &self.nodes[logits.0].shape, &[targets.len()]);
        }
        let lv = &self.nodes[logits.0].value;
        let mut probs = vec![0.0; n * v];
        let mut total = 0.0;
        let mut count = 0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::Index {
                    what: "target vocabulary",
                    index: t,
                    size: v,
                });
            }
            let row = &lv[i * v..(i + 1) * v];
            let lse = kernels::log_sum_exp(row);
            for j in 0..v {
                probs[i * v + j] = (row[j] - lse).exp();
            }
            if Some(t) != ignore {
                total += lse - row[t];
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.iter().map(|&t| if Some(t) == ignore { usize::MAX } else { t }).collect(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Binary cross-entropy of `sigmoid(logit)` against `target ∈ [0,1]`.
    pub fn bce_with_logits(&mut self, logit: Var, target: f64) -> Result<Var> {
        if self.nodes[logit.0].value.len() != 1 {
            return shape_err("bce_with_logits", &self.nodes[logit.0].shape, &[1]);
        }
        let z = self.nodes[logit.0].value[0];
        let loss = z.max(0.0) - z * target + (-z.abs()).exp().ln_1p();
        let rg = self.rg(logit);
        Ok(self.push(vec![1], vec![loss], Op::BceWithLogits { logit, target }, rg))
    }

    // ── convolution ─────────────────────────────────────────────────────

    /// 2-D convolution, stride 1, zero padding `pad`.
    /// `x: [cin, h, w]`, `w: [cout, cin, k, k]`, `b: [cout]` → `[cout, h', w']`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        let (&[cin, h, wd], &[cout, cin2, k, k2]) = (xs.as_slice(), ws.as_slice()) else {
            return shape_err("conv2d", &xs, &ws);
        };
        if cin != cin2 || k != k2 || self.nodes[b.0].value.len() != cout {
            return shape_err("conv2d", &xs, &ws);
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return shape_err("conv2d input smaller than kernel", &xs, &ws);
        }
        let (oh, ow) = (h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = bv[co];
                    for ci in 0..cin {
                        for u in 0..k {
                            let Some(r) = (i + u).checked_sub(pad).filter(|&r| r < h) else {
                                continue;
                            };
                            for v in 0..k {
                                let Some(c) = (j + v).checked_sub(pad).filter(|&c| c < wd) else {
                                    continue;
                                };
                                s += wv[((co * cin + ci) * k + u) * k + v] * xv[(ci * h + r) * wd + c];
                            }
                        }
                    }
                    out[(co * oh + i) * ow + j] = s;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(vec![cout, oh, ow], out, Op::Conv2d { x, w, b, pad }, rg))
    }

    /// Non-overlapping `size×size` max pooling over `[c, h, w]`; trailing
    /// rows/columns that do not fill a window are dropped.
    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let [c, h, w] = self.nodes[x.0].shape[..] else {
            return contract(format!("max_pool2d needs 3 axes, got {:?}", self.nodes[x.0].shape));
        };
        let (oh, ow) = (h / size, w / size);
        if oh == 0 || ow == 0 {
            return shape_err("max_pool2d", &[c, h, w], &[size, size]);
        }
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = vec![0; c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = usize::MAX;
                    for u in 0..size {
                        for v in 0..size {
                            let idx = (ch * h + i * size + u) * w + j * size + v;
                            if best == usize::MAX || xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    let o = (ch * oh + i) * ow + j;
                    out[o] = xv[best];
                    argmax[o] = best;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, oh, ow], out, Op::MaxPool2d { x, argmax }, rg))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Back-propagates from a scalar `loss`. Leaf gradients accumulate
    /// across calls until the tape is dropped.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(acc) => add_into(acc, &g),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.backward_node(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        // Gradient slot for `v`, allocated as zeros on first use.
        fn slot_of<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]))
        }
        macro_rules! slot {
            ($v:expr) => {
                slot_of(nodes, grads, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a).unwrap();
                let n = node.shape[1];
                if let Some(ga) = slot!(*a) {
                    gemm(g, false, &nodes[b.0].value, true, ga, m, n, k, 1.0);
                }
                if let Some(gb) = slot!(*b) {
                    gemm(&nodes[a.0].value, true, g, false, gb, k, m, n, 1.0);
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = self.dims2(*a).unwrap();
                let n = node.shape[1];
                if let Some(ga) = slot!(*a) {
                    gemm(g, false, &nodes[b.0].value, false, ga, m, n, k, 1.0);
                }
                if let Some(gb) = slot!(*b) {
                    gemm(g, true, &nodes[a.0].value, false, gb, n, m, k, 1.0);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.dims2(*a).unwrap();
                if let Some(ga) = slot!(*a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot!(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot!(*b) {
                    add_into(gb, g);
                }
            }
            Op::AddRow(a, b) => {
                if let Some(ga) = slot!(*a) {
                    add_into(ga, g);
                }
                let n = nodes[b.0].value.len();
                if let Some(gb) = slot!(*b) {
                    for row in g.chunks(n.max(1)) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = slot!(*a) {
                    for ((d, gi), bv) in ga.iter_mut().zip(g).zip(&nodes[b.0].value) {
                        *d += gi * bv;
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for ((d, gi), av) in gb.iter_mut().zip(g).zip(&nodes[a.0].value) {
                        *d += gi * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * c);
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = slot!(*a) {
                    for ((d, gi), x) in ga.iter_mut().zip(g).zip(&nodes[a.0].value) {
                        if *x > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = slot!(*a) {
                    for ((d, gi), y) in ga.iter_mut().zip(g).zip(&node.value) {
                        *d += gi * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = slot!(*a) {
                    for ((d, gi), y) in ga.iter_mut().zip(g).zip(&node.value) {
                        *d += gi * y * (1.0 - y);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(&node.shape, *axis);
                let y = &node.value;
                if let Some(gx) = slot!(*x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * n + k) * inner + i;
                            let dotp: f64 = (0..n).map(|k| y[at(k)] * g[at(k)]).sum();
                            for k in 0..n {
                                gx[at(k)] += y[at(k)] * (g[at(k)] - dotp);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = *node.shape.last().unwrap();
                let m = node.value.len() / n.max(1);
                if let Some(gg) = slot!(*gamma) {
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if let Some(gb) = slot!(*beta) {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
                let gam = &nodes[gamma.0].value;
                if let Some(gx) = slot!(*x) {
                    for i in 0..m {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            let d = g[i * n + j] * gam[j];
                            mean_d += d;
                            mean_dx += d * xhat[i * n + j];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for j in 0..n {
                            let d = g[i * n + j] * gam[j];
                            gx[i * n + j] += rstd[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = node.shape[1];
                if let Some(gt) = slot!(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    if let Some(gp) = slot!(p) {
                        add_into(gp, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (node.shape[0], node.shape[1]);
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p.0].value.len() / m.max(1);
                    if let Some(gp) = slot!(p) {
                        for i in 0..m {
                            add_into(&mut gp[i * w..(i + 1) * w], &g[i * total + off..i * total + off + w]);
                        }
                    }
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                let n = node.shape[1];
                if let Some(gx) = slot!(*x) {
                    add_into(&mut gx[start * n..start * n + g.len()], g);
                }
            }
            Op::SliceCols { x, start } => {
                let (m, len) = (node.shape[0], node.shape[1]);
                let n = nodes[x.0].value.len() / m.max(1);
                if let Some(gx) = slot!(*x) {
                    for i in 0..m {
                        add_into(&mut gx[i * n + start..i * n + start + len], &g[i * len..(i + 1) * len]);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = slot!(*x) {
                    add_into(gx, g);
                }
            }
            Op::Swap01(x) => {
                let [b, a, c] = node.shape[..] else { unreachable!() };
                if let Some(gx) = slot!(*x) {
                    for i in 0..a {
                        for j in 0..b {
                            add_into(
                                &mut gx[(i * b + j) * c..(i * b + j + 1) * c],
                                &g[(j * a + i) * c..(j * a + i + 1) * c],
                            );
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::MeanAll(x) => {
                let n = nodes[x.0].value.len().max(1) as f64;
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::MeanRows(x) => {
                let n = node.shape[1];
                let m = nodes[x.0].value.len() / n.max(1);
                if let Some(gx) = slot!(*x) {
                    for row in gx.chunks_mut(n) {
                        row.iter_mut().zip(g).for_each(|(d, gi)| *d += gi / m as f64);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let v = probs.len() / targets.len().max(1);
                let scale = g[0] / *count as f64;
                if let Some(gl) = slot!(*logits) {
                    for (i, &t) in targets.iter().enumerate() {
                        if t == usize::MAX {
                            continue;
                        }
                        for j in 0..v {
                            gl[i * v + j] += scale * probs[i * v + j];
                        }
                        gl[i * v + t] -= scale;
                    }
                }
            }
            Op::BceWithLogits { logit, target } => {
                let z = nodes[logit.0].value[0];
                if let Some(gl) = slot!(*logit) {
                    gl[0] += g[0] * (kernels::sigmoid(z) - target);
                }
            }
            Op::Conv2d { x, w, b, pad } => {
                let [cin, h, wd] = nodes[x.0].shape[..] else { unreachable!() };
                let [cout, _, k, _] = nodes[w.0].shape[..] else { unreachable!() };
                let (oh, ow) = (node.shape[1], node.shape[2]);
                let xv = &nodes[x.0].value;
                let wv = &nodes[w.0].value;
                if let Some(gb) = slot!(*b) {
                    for co in 0..cout {
                        gb[co] += g[co * oh * ow..(co + 1) * oh * ow].iter().sum::<f64>();
                    }
                }
                let taps = |f: &mut dyn FnMut(usize, usize, usize)| {
                    for co in 0..cout {
                        for i in 0..oh {
                            for j in 0..ow {
                                let go = (co * oh + i) * ow + j;
                                for ci in 0..cin {
                                    for u in 0..k {
                                        let Some(r) = (i + u).checked_sub(*pad).filter(|&r| r < h) else {
                                            continue;
                                        };
                                        for v in 0..k {
                                            let Some(c) = (j + v).checked_sub(*pad).filter(|&c| c < wd)
                                            else {
                                                continue;
                                            };
                                            f(go, ((co * cin + ci) * k + u) * k + v, (ci * h + r) * wd + c);
                                        }
                                    }
                                }
                            }
                        }
                    }
                };
                if let Some(gw) = slot!(*w) {
                    taps(&mut |go, wi, xi| gw[wi] += g[go] * xv[xi]);
                }
                if let Some(gx) = slot!(*x) {
                    taps(&mut |go, wi, xi| gx[xi] += g[go] * wv[wi]);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if let Some(gx) = slot!(*x) {
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g[o];
                    }
                }
            }
        }
    }
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut t = Tape::new();
        let i = t.constant(&mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = t.constant(&mat(&[&[3.0, 4.0], &[5.0, 6.0]]));
        let c = t.matmul(i, b).unwrap();
        assert_eq!(t.value(c), &[3.0, 4.0, 5.0, 6.0]);

        let a = t.constant(&mat(&[&[1.0, 2.0]]));
        let b = t.constant(&mat(&[&[3.0], &[4.0]]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(c), &[1, 1]);
        assert_eq!(t.value(c), &[11.0]);
    }

    #[test]
    fn matmul_gradient_of_sum() {
        let mut t = Tape::new();
        let a = t.leaf(&mat(&[&[1.0, 2.0]]).with_requires_grad(true));
        let b = t.constant(&mat(&[&[3.0], &[4.0]]));
        let c = t.matmul(a, b).unwrap();
        let s = t.sum_all(c);
        t.backward(s).unwrap();
        assert_eq!(t.grad(a), Some(&[3.0, 4.0][..]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(&Tensor::zeros(&[2, 3]));
        let b = t.constant(&Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = t.constant(&Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = t.softmax(x, 0).unwrap();
        for p in t.value(y) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = t.constant(&Tensor::vector(vec![1000.0, 1000.0]));
        let y = t.softmax(x, 0).unwrap();
        assert_eq!(t.value(y), &[0.5, 0.5]);
        let x = t.constant(&Tensor::vector(vec![1.0, 2.0]));
        let y = t.softmax(x, 0).unwrap();
        let want = 1.0 / (1.0 + 1f64.exp());
        assert!((t.value(y)[0] - want).abs() < 1e-12);
        assert!((t.value(y)[0] - 0.2689).abs() < 1e-4);
        assert!((t.value(y)[1] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn softmax_over_leading_axis() {
        let mut t = Tape::new();
        let x = t.constant(&mat(&[&[0.0, 5.0], &[0.0, -5.0]]));
        let y = t.softmax(x, 0).unwrap();
        let v = t.value(y);
        assert!((v[0] - 0.5).abs() < 1e-15 && (v[2] - 0.5).abs() < 1e-15);
        assert!((v[1] + v[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut t = Tape::new();
        let logits = t.constant(&mat(&[&[-1e3, 1e3, -1e3]]));
        let l = t.cross_entropy(logits, &[1], None).unwrap();
        assert!(t.scalar(l).abs() < 1e-12);

        let logits = t.constant(&Tensor::zeros(&[3, 7]));
        let l = t.cross_entropy(logits, &[0, 4, 6], None).unwrap();
        assert!((t.scalar(l) - 7f64.ln()).abs() < 1e-12);

        let logits = t.constant(&mat(&[&[0.0, 3f64.ln()]]));
        let l = t.cross_entropy(logits, &[1], None).unwrap();
        assert!((t.scalar(l) - (4.0f64 / 3.0).ln()).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_excludes_padding_and_checks_range() {
        let mut t = Tape::new();
        let logits = t.constant(&mat(&[&[0.0, 3f64.ln()], &[9.0, -9.0]]));
        let l = t.cross_entropy(logits, &[1, 0], Some(0)).unwrap();
        assert!((t.scalar(l) - (4.0f64 / 3.0).ln()).abs() < 1e-12);
        let err = t.cross_entropy(logits, &[1, 2], None).unwrap_err();
        assert!(matches!(err, Error::Index { index: 2, size: 2, .. }));
    }

    #[test]
    fn backward_simple_cases() {
        let mut t = Tape::new();
        let w = t.leaf(&Tensor::vector(vec![0.3, -1.0, 2.0]).with_requires_grad(true));
        let s = t.sum_all(w);
        t.backward(s).unwrap();
        assert_eq!(t.grad(w), Some(&[1.0, 1.0, 1.0][..]));

        let mut t = Tape::new();
        let w = t.leaf(&Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true));
        let sq = t.mul(w, w).unwrap();
        let s = t.sum_all(sq);
        t.backward(s).unwrap();
        assert_eq!(t.grad(w), Some(&[2.0, 4.0][..]));
        // a second call accumulates
        t.backward(s).unwrap();
        assert_eq!(t.grad(w), Some(&[4.0, 8.0][..]));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let w = t.leaf(&Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true));
        assert!(matches!(t.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_subexpression_matches_unshared() {
        // f(x) = sum(tanh(x) * tanh(x)), once with a shared node and once
        // with two independent tanh nodes.
        let x0 = Tensor::vector(vec![0.2, -0.7, 1.3]).with_requires_grad(true);
        let mut t1 = Tape::new();
        let x = t1.leaf(&x0);
        let h = t1.tanh(x);
        let p = t1.mul(h, h).unwrap();
        let s = t1.sum_all(p);
        t1.backward(s).unwrap();

        let mut t2 = Tape::new();
        let x2 = t2.leaf(&x0);
        let h1 = t2.tanh(x2);
        let h2 = t2.tanh(x2);
        let p = t2.mul(h1, h2).unwrap();
        let s2 = t2.sum_all(p);
        t2.backward(s2).unwrap();
        assert_eq!(t1.grad(x), t2.grad(x2));
        assert_eq!(t1.scalar(s), t2.scalar(s2));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let a = t.constant(&Tensor::vector(vec![1.0, 2.0]));
        let w = t.leaf(&Tensor::vector(vec![3.0, 4.0]).with_requires_grad(true));
        let p = t.mul(a, w).unwrap();
        let s = t.sum_all(p);
        t.backward(s).unwrap();
        assert_eq!(t.grad(a), None);
        assert_eq!(t.grad(w), Some(&[1.0, 2.0][..]));
    }

    #[test]
    fn param_gradients_flow_into_store() {
        let mut store = ParamStore::new();
        let id = store.add("g.w", Tensor::vector(vec![1.0, -1.0])).unwrap();
        store.zero_grad();
        let mut t = Tape::new();
        let w = t.param(&store, id, true);
        let sq = t.mul(w, w).unwrap();
        let s = t.sum_all(sq);
        t.backward(s).unwrap();
        store.accumulate_from(&t);
        assert_eq!(store.get(id).grad(), Some(&[2.0, -2.0][..]));

        let mut t = Tape::new();
        let w = t.param(&store, id, false);
        let s = t.sum_all(w);
        t.backward(s).unwrap();
        store.accumulate_from(&t);
        assert_eq!(store.get(id).grad(), Some(&[2.0, -2.0][..]));
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let mut t = Tape::new();
        let x = t.leaf(
            &Tensor::new(vec![1, 2, 2], vec![0.1, 0.9, 0.4, 0.2])
                .unwrap()
                .with_requires_grad(true),
        );
        let y = t.max_pool2d(x, 2).unwrap();
        assert_eq!(t.value(y), &[0.9]);
        let s = t.sum_all(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x), Some(&[0.0, 1.0, 0.0, 0.0][..]));
    }
}
