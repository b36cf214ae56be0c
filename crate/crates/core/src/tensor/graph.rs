use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, LN_EPS};
use super::Tensor;
use crate::error::{Error, Result};
use crate::params::{ModelState, ParamId};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One attention group: the query rows attend only to the listed key rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnGroup {
    pub queries: Vec<usize>,
    pub keys: Vec<usize>,
}

impl AttnGroup {
    pub fn full(n_queries: usize, n_keys: usize) -> Self {
        Self {
            queries: (0..n_queries).collect(),
            keys: (0..n_keys).collect(),
        }
    }

    pub fn symmetric(rows: Vec<usize>) -> Self {
        Self {
            keys: rows.clone(),
            queries: rows,
        }
    }
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    Softplus(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    IndexRows(usize, Vec<usize>),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    Pick(usize, Vec<usize>),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        groups: Rc<Vec<AttnGroup>>,
        heads: usize,
        probs: Vec<Vec<f64>>,
    },
    CoxNll {
        h: usize,
        grad: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a differentiable computation.
///
/// Parameters enter through [`Graph::param`]; frozen parameters, and all
/// parameters on an [`Graph::inference`] graph, become constants.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, Var>>,
    track_params: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            track_params: true,
        }
    }

    /// A graph on which no parameter requires a gradient.
    pub fn inference() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient but is not tied to a parameter.
    pub fn variable(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// The graph leaf for a parameter; repeated calls return the same node.
    pub fn param(&self, state: &ModelState, id: ParamId) -> Var {
        if let Some(&v) = self.params.borrow().get(&id) {
            return v;
        }
        let requires = self.track_params && !state.is_frozen(id);
        let v = self.push(state.value(id).clone(), Op::Leaf, requires);
        self.params.borrow_mut().insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    /// Matrix product. `b` is either a matrix applied to every trailing
    /// `m x k` slice of `a`, or a batch of matrices with the same leading
    /// extents as `a`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (out, _) = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let plan = MatmulPlan::new(av.shape(), bv.shape())?;
            let mut out = vec![0.0; plan.out_len()];
            plan.forward(av.data(), bv.data(), &mut out);
            (Tensor::new(plan.out_shape.clone(), out)?, plan)
        };
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::MatMul(a.0, b.0), rg))
    }

    /// Transpose of a matrix.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = {
            let av = self.value(a);
            if av.shape().len() != 2 {
                return Err(Error::Dimension {
                    op: "transpose",
                    lhs: av.shape().to_vec(),
                    rhs: vec![],
                });
            }
            let (m, n) = (av.shape()[0], av.shape()[1]);
            let d = av.data();
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = d[i * n + j];
                }
            }
            Tensor::matrix(n, m, out)
        };
        let rg = self.rg(&[a.0]);
        Ok(self.push(out, Op::Transpose(a.0), rg))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let nodes = self.nodes.borrow();
        let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(Error::Dimension {
                op,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a.0, b.0), self.rg(&[a.0, b.0])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a.0, b.0), self.rg(&[a.0, b.0])))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a.0, b.0), self.rg(&[a.0, b.0])))
    }

    fn row_broadcast(&self, op: &'static str, a: Var, row: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let nodes = self.nodes.borrow();
        let (av, rv) = (&nodes[a.0].value, &nodes[row.0].value);
        if rv.len() != av.cols() {
            return Err(Error::Dimension {
                op,
                lhs: av.shape().to_vec(),
                rhs: rv.shape().to_vec(),
            });
        }
        let c = av.cols();
        let r = rv.data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, r[i % c]))
            .collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    /// Adds a row vector (bias) to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast("add_row", a, row, |x, r| x + r)?;
        Ok(self.push(out, Op::AddRow(a.0, row.0), self.rg(&[a.0, row.0])))
    }

    /// Multiplies every row of `a` elementwise by a row vector, i.e. `a * diag(row)`.
    pub fn mul_row(&self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast("mul_row", a, row, |x, r| x * r)?;
        Ok(self.push(out, Op::MulRow(a.0, row.0), self.rg(&[a.0, row.0])))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let out = self.map(a, |x| x * s);
        self.push(out, Op::Scale(a.0, s), self.rg(&[a.0]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Var {
        let out = self.map(a, kernels::gelu);
        self.push(out, Op::Gelu(a.0), self.rg(&[a.0]))
    }

    pub fn softplus(&self, a: Var) -> Var {
        let out = self.map(a, kernels::softplus);
        self.push(out, Op::Softplus(a.0), self.rg(&[a.0]))
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        let out = {
            let mut t = self.value(a).clone();
            let c = t.cols();
            for row in t.data_mut().chunks_mut(c) {
                kernels::softmax_in_place(row);
            }
            t
        };
        self.push(out, Op::SoftmaxRows(a.0), self.rg(&[a.0]))
    }

    pub fn log_softmax_rows(&self, a: Var) -> Var {
        let out = {
            let mut t = self.value(a).clone();
            let c = t.cols();
            for row in t.data_mut().chunks_mut(c) {
                let lse = kernels::log_sum_exp(row);
                row.iter_mut().for_each(|v| *v -= lse);
            }
            t
        };
        self.push(out, Op::LogSoftmaxRows(a.0), self.rg(&[a.0]))
    }

    /// Row-wise layer normalization with affine gain and bias.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (out, xhat, rstd) = {
            let nodes = self.nodes.borrow();
            let (xv, gv, bv) = (&nodes[x.0].value, &nodes[gain.0].value, &nodes[bias.0].value);
            let c = xv.cols();
            if gv.len() != c || bv.len() != c {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: xv.shape().to_vec(),
                    rhs: gv.shape().to_vec(),
                });
            }
            let mut out = vec![0.0; xv.len()];
            let mut xhat = vec![0.0; xv.len()];
            let mut rstd = Vec::with_capacity(xv.rows());
            for (r, row) in xv.data().chunks(c).enumerate() {
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let rs = 1.0 / (var + LN_EPS).sqrt();
                rstd.push(rs);
                for j in 0..c {
                    let xh = (row[j] - mean) * rs;
                    xhat[r * c + j] = xh;
                    out[r * c + j] = xh * gv.data()[j] + bv.data()[j];
                }
            }
            (Tensor::new(xv.shape().to_vec(), out)?, xhat, rstd)
        };
        let rg = self.rg(&[x.0, gain.0, bias.0]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0), self.rg(&[a.0]))
    }

    pub fn mean(&self, a: Var) -> Var {
        let s = {
            let av = self.value(a);
            av.data().iter().sum::<f64>() / av.len() as f64
        };
        self.push(Tensor::scalar(s), Op::Mean(a.0), self.rg(&[a.0]))
    }

    /// Column means over all rows, as a `1 x cols` row.
    pub fn mean_rows(&self, a: Var) -> Var {
        let out = {
            let av = self.value(a);
            let (r, c) = (av.rows(), av.cols());
            let mut out = vec![0.0; c];
            for row in av.data().chunks(c) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|v| *v /= r as f64);
            Tensor::matrix(1, c, out)
        };
        self.push(out, Op::MeanRows(a.0), self.rg(&[a.0]))
    }

    /// Gathers rows (repeats allowed) into a new matrix.
    pub fn index_rows(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let out = {
            let av = self.value(a);
            if let Some(&bad) = idx.iter().find(|&&i| i >= av.rows()) {
                return Err(Error::Contract(format!(
                    "row index {bad} out of range for {} rows",
                    av.rows()
                )));
            }
            if idx.is_empty() {
                return Err(Error::Contract("index_rows with empty index".into()));
            }
            av.select_rows(idx)
        };
        Ok(self.push(out, Op::IndexRows(a.0, idx.to_vec()), self.rg(&[a.0])))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let c = nodes[parts[0].0].value.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let t = &nodes[p.0].value;
                if t.cols() != c {
                    return Err(Error::Dimension {
                        op: "concat_rows",
                        lhs: nodes[parts[0].0].value.shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
                rows += t.rows();
                data.extend_from_slice(t.data());
            }
            Tensor::matrix(rows, c, data)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(out, Op::ConcatRows(ids), rg))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let r = nodes[parts[0].0].value.rows();
            let widths: Vec<usize> = parts.iter().map(|p| nodes[p.0].value.cols()).collect();
            let total: usize = widths.iter().sum();
            let mut data = vec![0.0; r * total];
            let mut off = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                let t = &nodes[p.0].value;
                if t.rows() != r {
                    return Err(Error::Dimension {
                        op: "concat_cols",
                        lhs: nodes[parts[0].0].value.shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
                for i in 0..r {
                    data[i * total + off..i * total + off + w].copy_from_slice(t.row(i));
                }
                off += w;
            }
            Tensor::matrix(r, total, data)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(out, Op::ConcatCols(ids), rg))
    }

    /// Picks flat elements into a `len x 1` column.
    pub fn pick(&self, a: Var, flat: &[usize]) -> Result<Var> {
        let out = {
            let av = self.value(a);
            let mut data = Vec::with_capacity(flat.len());
            for &i in flat {
                data.push(*av.data().get(i).ok_or_else(|| {
                    Error::Contract(format!("pick index {i} out of range for {} elements", av.len()))
                })?);
            }
            Tensor::matrix(flat.len(), 1, data)
        };
        Ok(self.push(out, Op::Pick(a.0, flat.to_vec()), self.rg(&[a.0])))
    }

    /// Multi-head scaled dot-product attention restricted to groups.
    ///
    /// `q` is `Tq x c`, `k` and `v` are `Tk x c`. Each query row must belong to
    /// exactly one group; rows of `q` outside every group produce zeros.
    pub fn attention(&self, q: Var, k: Var, v: Var, groups: Rc<Vec<AttnGroup>>, heads: usize) -> Result<Var> {
        let (out, probs) = {
            let nodes = self.nodes.borrow();
            let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
            let c = qv.cols();
            if kv.cols() != c || vv.cols() != c || kv.rows() != vv.rows() {
                return Err(Error::Dimension {
                    op: "attention",
                    lhs: qv.shape().to_vec(),
                    rhs: kv.shape().to_vec(),
                });
            }
            if heads == 0 || c % heads != 0 {
                return Err(Error::Config(format!("{c} channels not divisible into {heads} heads")));
            }
            for g in groups.iter() {
                if g.keys.is_empty() && !g.queries.is_empty() {
                    return Err(Error::Contract("attention group with queries but no keys".into()));
                }
                if g.queries.iter().any(|&i| i >= qv.rows()) || g.keys.iter().any(|&i| i >= kv.rows()) {
                    return Err(Error::Contract("attention group index out of range".into()));
                }
            }
            attention_forward(qv, kv, vv, &groups, heads)
        };
        let rg = self.rg(&[q.0, k.0, v.0]);
        Ok(self.push(
            out,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                groups,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Mean negative Cox partial log-likelihood (Breslow ties) of the risk
    /// scores in `h`.
    pub fn cox_nll(&self, h: Var, times: &[f64], events: &[bool]) -> Result<Var> {
        let (loss, grad) = {
            let hv = self.value(h);
            if hv.len() != times.len() || times.len() != events.len() {
                return Err(Error::Dimension {
                    op: "cox_nll",
                    lhs: hv.shape().to_vec(),
                    rhs: vec![times.len(), events.len()],
                });
            }
            if !events.iter().any(|&e| e) {
                return Err(Error::Contract(
                    "Cox loss needs at least one event in the batch; resample the batch".into(),
                ));
            }
            kernels::cox_nll(hv.data(), times, events)
        };
        let rg = self.rg(&[h.0]);
        Ok(self.push(Tensor::scalar(loss), Op::CoxNll { h: h.0, grad }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                propagate(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }

        let params = self
            .params
            .borrow()
            .iter()
            .filter_map(|(&pid, &v)| grads[v.0].clone().map(|g| (pid, g)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Gradients from one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter that took part in the computation.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(p, g)| (*p, g.as_slice()))
    }
}

struct MatmulPlan {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
    out_shape: Vec<usize>,
}

impl MatmulPlan {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let err = || Error::Dimension {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        };
        if a.len() < 2 || b.len() < 2 {
            return Err(err());
        }
        let k = a[a.len() - 1];
        if b.len() == 2 {
            if b[0] != k {
                return Err(err());
            }
            let m: usize = a[..a.len() - 1].iter().product();
            let mut out_shape = a[..a.len() - 1].to_vec();
            out_shape.push(b[1]);
            return Ok(Self {
                batch: 1,
                m,
                k,
                n: b[1],
                b_batched: false,
                out_shape,
            });
        }
        if a.len() != b.len() || a[..a.len() - 2] != b[..b.len() - 2] || b[b.len() - 2] != k {
            return Err(err());
        }
        let batch: usize = a[..a.len() - 2].iter().product();
        let (m, n) = (a[a.len() - 2], b[b.len() - 1]);
        let mut out_shape = a[..a.len() - 2].to_vec();
        out_shape.extend([m, n]);
        Ok(Self {
            batch,
            m,
            k,
            n,
            b_batched: true,
            out_shape,
        })
    }

    fn out_len(&self) -> usize {
        self.batch * self.m * self.n
    }

    fn slices(&self, bi: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>, std::ops::Range<usize>) {
        let (m, k, n) = (self.m, self.k, self.n);
        let b = if self.b_batched { bi * k * n..(bi + 1) * k * n } else { 0..k * n };
        (bi * m * k..(bi + 1) * m * k, b, bi * m * n..(bi + 1) * m * n)
    }

    fn forward(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        for bi in 0..self.batch {
            let (ra, rb, ro) = self.slices(bi);
            kernels::matmul_acc(&a[ra], &b[rb], &mut out[ro], self.m, self.k, self.n);
        }
    }
}

fn attention_forward(q: &Tensor, k: &Tensor, v: &Tensor, groups: &[AttnGroup], heads: usize) -> (Tensor, Vec<Vec<f64>>) {
    let c = q.cols();
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; q.rows() * c];
    let mut probs = Vec::with_capacity(groups.len() * heads);
    for g in groups {
        let (nq, nk) = (g.queries.len(), g.keys.len());
        for h in 0..heads {
            let off = h * dh;
            let mut p = vec![0.0; nq * nk];
            for (a, &qi) in g.queries.iter().enumerate() {
                let qrow = &q.row(qi)[off..off + dh];
                let prow = &mut p[a * nk..(a + 1) * nk];
                for (b, &kj) in g.keys.iter().enumerate() {
                    let krow = &k.row(kj)[off..off + dh];
                    prow[b] = scale * qrow.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>();
                }
                kernels::softmax_in_place(prow);
                let orow = &mut out[qi * c + off..qi * c + off + dh];
                for (b, &kj) in g.keys.iter().enumerate() {
                    let w = prow[b];
                    for (o, vv) in orow.iter_mut().zip(&v.row(kj)[off..off + dh]) {
                        *o += w * vv;
                    }
                }
            }
            probs.push(p);
        }
    }
    (Tensor::matrix(q.rows(), c, out), probs)
}

fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let buf = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(buf);
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let plan = MatmulPlan::new(av.shape(), bv.shape()).expect("validated in forward");
            acc(grads, nodes, *a, |ga| {
                for bi in 0..plan.batch {
                    let (ra, rb, ro) = plan.slices(bi);
                    kernels::matmul_bt_acc(&g[ro], &bv.data()[rb], &mut ga[ra], plan.m, plan.k, plan.n);
                }
            });
            acc(grads, nodes, *b, |gb| {
                for bi in 0..plan.batch {
                    let (ra, rb, ro) = plan.slices(bi);
                    kernels::matmul_at_acc(&av.data()[ra], &g[ro], &mut gb[rb], plan.m, plan.k, plan.n);
                }
            });
        }
        Op::Transpose(a) => {
            let (m, n) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
            acc(grads, nodes, *a, |ga| {
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            });
        }
        Op::Add(a, b) => {
            acc(grads, nodes, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            acc(grads, nodes, *b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
        }
        Op::Sub(a, b) => {
            acc(grads, nodes, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            acc(grads, nodes, *b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            acc(grads, nodes, *a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
            });
            acc(grads, nodes, *b, |gb| {
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            });
        }
        Op::AddRow(a, r) => {
            let c = out.cols();
            acc(grads, nodes, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            acc(grads, nodes, *r, |gr| {
                for (i, gv) in g.iter().enumerate() {
                    gr[i % c] += gv;
                }
            });
        }
        Op::MulRow(a, r) => {
            let c = out.cols();
            let (av, rv) = (nodes[*a].value.data(), nodes[*r].value.data());
            acc(grads, nodes, *a, |ga| {
                for (i, gv) in g.iter().enumerate() {
                    ga[i] += gv * rv[i % c];
                }
            });
            acc(grads, nodes, *r, |gr| {
                for (i, gv) in g.iter().enumerate() {
                    gr[i % c] += gv * av[i];
                }
            });
        }
        Op::Scale(a, s) => {
            acc(grads, nodes, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y));
        }
        Op::Gelu(a) => {
            let av = nodes[*a].value.data();
            acc(grads, nodes, *a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * kernels::gelu_grad(av[i]);
                }
            });
        }
        Op::Softplus(a) => {
            let av = nodes[*a].value.data();
            acc(grads, nodes, *a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * kernels::sigmoid(av[i]);
                }
            });
        }
        Op::SoftmaxRows(a) => {
            let c = out.cols();
            acc(grads, nodes, *a, |ga| {
                for ((gy, y), gx) in g.chunks(c).zip(out.data().chunks(c)).zip(ga.chunks_mut(c)) {
                    let dot: f64 = gy.iter().zip(y).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        gx[j] += y[j] * (gy[j] - dot);
                    }
                }
            });
        }
        Op::LogSoftmaxRows(a) => {
            let c = out.cols();
            acc(grads, nodes, *a, |ga| {
                for ((gy, y), gx) in g.chunks(c).zip(out.data().chunks(c)).zip(ga.chunks_mut(c)) {
                    let total: f64 = gy.iter().sum();
                    for j in 0..c {
                        gx[j] += gy[j] - y[j].exp() * total;
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let c = out.cols();
            let gv = nodes[*gain].value.data();
            acc(grads, nodes, *gain, |gg| {
                for (i, gy) in g.iter().enumerate() {
                    gg[i % c] += gy * xhat[i];
                }
            });
            acc(grads, nodes, *bias, |gb| {
                for (i, gy) in g.iter().enumerate() {
                    gb[i % c] += gy;
                }
            });
            acc(grads, nodes, *x, |gx| {
                for (r, rs) in rstd.iter().enumerate() {
                    let row = r * c..(r + 1) * c;
                    let dxhat: Vec<f64> = (0..c).map(|j| g[row.start + j] * gv[j]).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                    let mean_dx = dxhat
                        .iter()
                        .zip(&xhat[row.clone()])
                        .map(|(d, h)| d * h)
                        .sum::<f64>()
                        / c as f64;
                    for j in 0..c {
                        gx[row.start + j] += rs * (dxhat[j] - mean_d - xhat[row.start + j] * mean_dx);
                    }
                }
            });
        }
        Op::Sum(a) => {
            acc(grads, nodes, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0]));
        }
        Op::Mean(a) => {
            let n = nodes[*a].value.len() as f64;
            acc(grads, nodes, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
        }
        Op::MeanRows(a) => {
            let av = &nodes[*a].value;
            let (r, c) = (av.rows(), av.cols());
            acc(grads, nodes, *a, |ga| {
                for (i, x) in ga.iter_mut().enumerate() {
                    *x += g[i % c] / r as f64;
                }
            });
        }
        Op::IndexRows(a, idx) => {
            let c = out.cols();
            acc(grads, nodes, *a, |ga| {
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        ga[src * c + j] += g[r * c + j];
                    }
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = nodes[p].value.len();
                acc(grads, nodes, p, |gp| gp.iter_mut().zip(&g[off..off + n]).for_each(|(x, y)| *x += y));
                off += n;
            }
        }
        Op::ConcatCols(parts) => {
            let (r, total) = (out.rows(), out.cols());
            let mut off = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                acc(grads, nodes, p, |gp| {
                    for i in 0..r {
                        for j in 0..w {
                            gp[i * w + j] += g[i * total + off + j];
                        }
                    }
                });
                off += w;
            }
        }
        Op::Pick(a, flat) => {
            acc(grads, nodes, *a, |ga| {
                for (r, &i) in flat.iter().enumerate() {
                    ga[i] += g[r];
                }
            });
        }
        Op::Attention {
            q,
            k,
            v,
            groups,
            heads,
            probs,
        } => attention_backward(nodes, grads, g, (*q, *k, *v), groups, *heads, probs),
        Op::CoxNll { h, grad } => {
            acc(grads, nodes, *h, |gh| gh.iter_mut().zip(grad).for_each(|(x, y)| *x += g[0] * y));
        }
    }
}

fn attention_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    g: &[f64],
    (q, k, v): (usize, usize, usize),
    groups: &[AttnGroup],
    heads: usize,
    probs: &[Vec<f64>],
) {
    let (qv, kv, vv) = (&nodes[q].value, &nodes[k].value, &nodes[v].value);
    let c = qv.cols();
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = vec![0.0; qv.len()];
    let mut gk = vec![0.0; kv.len()];
    let mut gvv = vec![0.0; vv.len()];
    let mut pi = 0;
    for grp in groups {
        let nk = grp.keys.len();
        for h in 0..heads {
            let off = h * dh;
            let p = &probs[pi];
            pi += 1;
            for (a, &qi) in grp.queries.iter().enumerate() {
                let go = &g[qi * c + off..qi * c + off + dh];
                let prow = &p[a * nk..(a + 1) * nk];
                // dP = dO V^T, then softmax backward.
                let dp: Vec<f64> = grp
                    .keys
                    .iter()
                    .map(|&kj| go.iter().zip(&vv.row(kj)[off..off + dh]).map(|(x, y)| x * y).sum())
                    .collect();
                let dot: f64 = dp.iter().zip(prow).map(|(x, y)| x * y).sum();
                for (b, &kj) in grp.keys.iter().enumerate() {
                    let w = prow[b];
                    for d in 0..dh {
                        gvv[kj * c + off + d] += w * go[d];
                    }
                    let ds = w * (dp[b] - dot) * scale;
                    if ds != 0.0 {
                        for d in 0..dh {
                            gq[qi * c + off + d] += ds * kv.data()[kj * c + off + d];
                            gk[kj * c + off + d] += ds * qv.data()[qi * c + off + d];
                        }
                    }
                }
            }
        }
    }
    for (id, buf) in [(q, gq), (k, gk), (v, gvv)] {
        acc(grads, nodes, id, |gx| gx.iter_mut().zip(&buf).for_each(|(x, y)| *x += y));
    }
}
