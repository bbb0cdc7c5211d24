use super::kernels::{matmul_acc, matmul_acc_seq, transpose};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::par;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddTiled(usize, usize),
    MulTiled(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    BatchMatMul {
        a: usize,
        b: usize,
        transpose_b: bool,
        groups: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Gelu(usize),
    Softplus(usize),
    Sigmoid(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        inv_std: Vec<f64>,
    },
    Reshape(usize),
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    GatherRows {
        x: usize,
        index: Vec<usize>,
    },
    Concat(Vec<usize>),
    SliceCols {
        x: usize,
        start: usize,
    },
    Sum(usize),
    Mean(usize),
    MeanTokens {
        x: usize,
        tokens: usize,
    },
    FeatureEmbed {
        x: usize,
        w: usize,
        b: usize,
    },
    Pinball {
        pred: usize,
        target: Vec<f64>,
        tau: f64,
    },
    PseudoHuber {
        pred: usize,
        target: Vec<f64>,
        delta: f64,
    },
    Huber {
        pred: usize,
        target: Vec<f64>,
        delta: f64,
    },
    Bce {
        prob: usize,
        target: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        classes: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Eagerly evaluated computation graph.
///
/// Nodes are appended in creation order, which is also a valid topological
/// order, so [`Graph::backward`] is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    // accumulated gradients of leaves and params, indexed by node
    leaf_grads: Vec<Option<Vec<f64>>>,
}

pub(crate) const LN_EPS: f64 = 1e-5;
pub(crate) const BCE_CLAMP: f64 = 1e-7;

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let nd = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return (out, out_shape);
    }
    let inner = out_shape[nd - 1];
    let inner_stride = strides[nd - 1];
    let mut counter = vec![0usize; nd];
    loop {
        let base: usize = (0..nd - 1).map(|d| counter[d] * strides[d]).sum();
        for j in 0..inner {
            out.push(data[base + j * inner_stride]);
        }
        // advance odometer over the leading axes
        let mut d = nd - 1;
        loop {
            if d == 0 {
                return (out, out_shape);
            }
            d -= 1;
            counter[d] += 1;
            if counter[d] < out_shape[d] {
                break;
            }
            counter[d] = 0;
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Leaf whose gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Parameter node; repeated calls with the same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if id.0 >= self.param_nodes.len() {
            self.param_nodes.resize(id.0 + 1, None);
        }
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.val(v)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.val(v).shape()
    }

    /// Accumulated gradient of a leaf or parameter node.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    /// Gradients for every parameter of `store`, zeros where the graph did
    /// not touch a parameter.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Vec<f64>> {
        store
            .ids()
            .map(|id| {
                self.param_nodes
                    .get(id.0)
                    .copied()
                    .flatten()
                    .and_then(|v| self.leaf_grads[v.0].clone())
                    .unwrap_or_else(|| vec![0.0; store.get(id).len()])
            })
            .collect()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- elementwise -------------------------------------------------

    fn binary_same(&mut self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.val(a).shape() != self.val(b).shape() {
            return shape_err(format!(
                "{name}: {:?} vs {:?}",
                self.val(a).shape(),
                self.val(b).shape()
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "add")?;
        let data = self.val(a).data().iter().zip(self.val(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.val(a).shape().to_vec(), data)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(t, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "sub")?;
        let data = self.val(a).data().iter().zip(self.val(b).data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(self.val(a).shape().to_vec(), data)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(t, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "mul")?;
        let data = self.val(a).data().iter().zip(self.val(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.val(a).shape().to_vec(), data)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(t, Op::Mul(a.0, b.0), rg))
    }

    fn tiled_check(&self, a: Var, b: Var, name: &str) -> Result<usize> {
        let (la, lb) = (self.val(a).len(), self.val(b).len());
        if lb == 0 || la % lb != 0 {
            return shape_err(format!("{name}: {la} values cannot tile {lb}"));
        }
        Ok(lb)
    }

    /// `a + b`, with `b` repeated over the leading part of `a`
    /// (bias add, positional tables).
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Result<Var> {
        let lb = self.tiled_check(a, b, "add_tiled")?;
        let bd = self.val(b).data();
        let data = self.val(a).data().iter().enumerate().map(|(i, x)| x + bd[i % lb]).collect();
        let t = Tensor::new(self.val(a).shape().to_vec(), data)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(t, Op::AddTiled(a.0, b.0), rg))
    }

    /// `a * b`, with `b` repeated over the leading part of `a`.
    pub fn mul_tiled(&mut self, a: Var, b: Var) -> Result<Var> {
        let lb = self.tiled_check(a, b, "mul_tiled")?;
        let bd = self.val(b).data();
        let data = self.val(a).data().iter().enumerate().map(|(i, x)| x * bd[i % lb]).collect();
        let t = Tensor::new(self.val(a).shape().to_vec(), data)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(t, Op::MulTiled(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.val(a).data().iter().map(|x| x * c).collect();
        let t = Tensor::new(self.val(a).shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a.0);
        self.push(t, Op::Scale(a.0, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let data = self.val(a).data().iter().map(|x| x + c).collect();
        let t = Tensor::new(self.val(a).shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a.0);
        self.push(t, Op::AddScalar(a.0), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.val(a).data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(self.val(a).shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a.0);
        self.push(t, op, rg)
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a.0))
    }

    // ---- row-wise ----------------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.val(a);
        let c = x.cols();
        if c == 0 || x.is_empty() {
            return Err(Error::Domain("softmax over an empty axis".into()));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a.0);
        Ok(self.push(t, Op::Softmax(a.0), rg))
    }

    /// Normalisation over the last axis without gain or bias.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let x = self.val(a);
        let c = x.cols();
        if c == 0 {
            return Err(Error::Domain("layer norm over an empty axis".into()));
        }
        let mut data = x.data().to_vec();
        let mut inv_std = Vec::with_capacity(x.rows());
        for row in data.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let t = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a.0);
        Ok(self.push(t, Op::LayerNorm { x: a.0, inv_std }, rg))
    }

    // ---- products ----------------------------------------------------

    /// `a[..., k] @ b[k, n]`; leading axes of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (xa, xb) = (self.val(a), self.val(b));
        if xb.shape().len() != 2 || xa.shape().is_empty() || xa.cols() != xb.shape()[0] {
            return shape_err(format!("matmul: {:?} x {:?}", xa.shape(), xb.shape()));
        }
        let (m, k, n) = (xa.rows(), xa.cols(), xb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(xa.data(), xb.data(), m, k, n, &mut out);
        let mut shape = xa.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(t, Op::MatMul(a.0, b.0), rg))
    }

    /// Batched product over matching leading axes:
    /// `a[..., m, k] @ b[..., k, n]`, or `a @ b^T` with `b[..., n, k]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (xa, xb) = (self.val(a), self.val(b));
        let (sa, sb) = (xa.shape(), xb.shape());
        if sa.len() < 2 || sb.len() != sa.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return shape_err(format!("batch_matmul: {sa:?} x {sb:?}"));
        }
        let nd = sa.len();
        let (m, k) = (sa[nd - 2], sa[nd - 1]);
        let (kb, n) = if transpose_b {
            (sb[nd - 1], sb[nd - 2])
        } else {
            (sb[nd - 2], sb[nd - 1])
        };
        if kb != k {
            return shape_err(format!("batch_matmul inner dims: {sa:?} x {sb:?}"));
        }
        let groups: usize = sa[..nd - 2].iter().product();
        let mut out = vec![0.0; groups * m * n];
        let (ad, bd) = (xa.data(), xb.data());
        par::for_each_chunk_mut(&mut out, m * n, groups * m * k * n, |g, chunk| {
            let ag = &ad[g * m * k..(g + 1) * m * k];
            let bg = &bd[g * k * n..(g + 1) * k * n];
            if transpose_b {
                let bt = transpose(bg, n, k);
                matmul_acc_seq(ag, &bt, m, k, n, chunk);
            } else {
                matmul_acc_seq(ag, bg, m, k, n, chunk);
            }
        });
        let mut shape = sa[..nd - 2].to_vec();
        shape.extend([m, n]);
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(
            t,
            Op::BatchMatMul {
                a: a.0,
                b: b.0,
                transpose_b,
                groups,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// Per-position affine embedding of scalar features:
    /// `out[i, p, :] = x[i, p] * w[p, :] + b[p, :]`.
    pub fn feature_embed(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xx, xw, xb) = (self.val(x), self.val(w), self.val(b));
        if xx.shape().len() != 2
            || xw.shape().len() != 2
            || xw.shape() != xb.shape()
            || xw.shape()[0] != xx.shape()[1]
        {
            return shape_err(format!(
                "feature_embed: x {:?}, w {:?}, b {:?}",
                xx.shape(),
                xw.shape(),
                xb.shape()
            ));
        }
        let (n, p, d) = (xx.shape()[0], xx.shape()[1], xw.shape()[1]);
        let mut out = Vec::with_capacity(n * p * d);
        for i in 0..n {
            for j in 0..p {
                let xv = xx.data()[i * p + j];
                let wr = &xw.data()[j * d..(j + 1) * d];
                let br = &xb.data()[j * d..(j + 1) * d];
                out.extend(wr.iter().zip(br).map(|(wv, bv)| xv * wv + bv));
            }
        }
        let t = Tensor::new(vec![n, p, d], out)?;
        let rg = self.rg(x.0) || self.rg(w.0) || self.rg(b.0);
        Ok(self.push(
            t,
            Op::FeatureEmbed {
                x: x.0,
                w: w.0,
                b: b.0,
            },
            rg,
        ))
    }

    // ---- layout ------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.val(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a.0);
        Ok(self.push(t, Op::Reshape(a.0), rg))
    }

    /// General axis permutation; output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let x = self.val(a);
        let nd = x.shape().len();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return shape_err(format!("permute {perm:?} on {:?}", x.shape()));
        }
        let (data, shape) = permute_data(x.data(), x.shape(), perm);
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(a.0);
        Ok(self.push(
            t,
            Op::Permute {
                x: a.0,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Select entries of the first axis (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let x = self.val(a);
        let Some(&r) = x.shape().first() else {
            return shape_err("gather_rows on a scalar".into());
        };
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return shape_err(format!("gather_rows index {bad} out of {r}"));
        }
        let row = x.len() / r.max(1);
        let mut out = Vec::with_capacity(index.len() * row);
        for &i in index {
            out.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = index.len();
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(a.0);
        Ok(self.push(
            t,
            Op::GatherRows {
                x: a.0,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenate along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return shape_err("concat of nothing".into());
        };
        let rows = self.val(*first).rows();
        let lead = self.val(*first).shape()[..self.val(*first).shape().len().saturating_sub(1)].to_vec();
        let mut total = 0;
        for p in parts {
            let t = self.val(*p);
            if t.rows() != rows || t.shape().is_empty() {
                return shape_err(format!("concat rows mismatch: {:?}", t.shape()));
            }
            total += t.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.val(*p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor::new(shape, out)?;
        let rg = parts.iter().any(|p| self.rg(p.0));
        Ok(self.push(t, Op::Concat(parts.iter().map(|p| p.0).collect()), rg))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.val(a);
        let c = x.cols();
        if start >= end || end > c || x.shape().is_empty() {
            return shape_err(format!("slice {start}..{end} of {:?}", x.shape()));
        }
        let mut out = Vec::with_capacity(x.rows() * (end - start));
        for r in 0..x.rows() {
            out.extend_from_slice(&x.row(r)[start..end]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = end - start;
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(a.0);
        Ok(self.push(t, Op::SliceCols { x: a.0, start }, rg))
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).data().iter().sum();
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.val(a);
        let s = x.data().iter().sum::<f64>() / x.len().max(1) as f64;
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(s), Op::Mean(a.0), rg)
    }

    /// Mean over axis 1 of a `[a, t, b]` tensor.
    pub fn mean_tokens(&mut self, a: Var) -> Result<Var> {
        let x = self.val(a);
        if x.shape().len() != 3 || x.shape()[1] == 0 {
            return shape_err(format!("mean_tokens on {:?}", x.shape()));
        }
        let (na, nt, nb) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = vec![0.0; na * nb];
        for i in 0..na {
            let o = &mut out[i * nb..(i + 1) * nb];
            for t in 0..nt {
                let base = (i * nt + t) * nb;
                for (ov, v) in o.iter_mut().zip(&x.data()[base..base + nb]) {
                    *ov += v;
                }
            }
            o.iter_mut().for_each(|v| *v /= nt as f64);
        }
        let t = Tensor::new(vec![na, nb], out)?;
        let rg = self.rg(a.0);
        Ok(self.push(t, Op::MeanTokens { x: a.0, tokens: nt }, rg))
    }

    // ---- losses (scalar batch means) ---------------------------------

    fn target_check(&self, pred: Var, target: &[f64], name: &str) -> Result<()> {
        if self.val(pred).len() != target.len() || target.is_empty() {
            return shape_err(format!(
                "{name}: {} predictions vs {} targets",
                self.val(pred).len(),
                target.len()
            ));
        }
        Ok(())
    }

    /// Mean check loss `tau*max(y-p,0) + (1-tau)*max(p-y,0)`.
    pub fn pinball(&mut self, pred: Var, target: &[f64], tau: f64) -> Result<Var> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::Domain(format!("pinball tau {tau} outside (0,1)")));
        }
        self.target_check(pred, target, "pinball")?;
        let v = super::loss::pinball(target, self.val(pred).data(), tau)?;
        let rg = self.rg(pred.0);
        Ok(self.push(
            Tensor::scalar(v),
            Op::Pinball {
                pred: pred.0,
                target: target.to_vec(),
                tau,
            },
            rg,
        ))
    }

    pub fn pseudo_huber(&mut self, pred: Var, target: &[f64], delta: f64) -> Result<Var> {
        self.target_check(pred, target, "pseudo_huber")?;
        let v = super::loss::pseudo_huber(target, self.val(pred).data(), delta)?;
        let rg = self.rg(pred.0);
        Ok(self.push(
            Tensor::scalar(v),
            Op::PseudoHuber {
                pred: pred.0,
                target: target.to_vec(),
                delta,
            },
            rg,
        ))
    }

    pub fn huber(&mut self, pred: Var, target: &[f64], delta: f64) -> Result<Var> {
        self.target_check(pred, target, "huber")?;
        let v = super::loss::huber(target, self.val(pred).data(), delta)?;
        let rg = self.rg(pred.0);
        Ok(self.push(
            Tensor::scalar(v),
            Op::Huber {
                pred: pred.0,
                target: target.to_vec(),
                delta,
            },
            rg,
        ))
    }

    /// Binary cross entropy on probabilities, clamped to `[1e-7, 1-1e-7]`.
    pub fn bce(&mut self, prob: Var, target: &[f64]) -> Result<Var> {
        self.target_check(prob, target, "bce")?;
        let v = super::loss::binary_cross_entropy(target, self.val(prob).data())?;
        let rg = self.rg(prob.0);
        Ok(self.push(
            Tensor::scalar(v),
            Op::Bce {
                prob: prob.0,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Softmax cross entropy of `[n, c]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, classes: &[usize]) -> Result<Var> {
        let x = self.val(logits);
        let c = x.cols();
        if x.rows() != classes.len() || classes.is_empty() {
            return shape_err(format!("cross_entropy: {} rows vs {} classes", x.rows(), classes.len()));
        }
        if let Some(&bad) = classes.iter().find(|&&k| k >= c) {
            return Err(Error::Label(format!("class {bad} outside 0..{c}")));
        }
        let mut probs = x.data().to_vec();
        let mut total = 0.0;
        for (row, &k) in probs.chunks_mut(c).zip(classes) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[k];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let v = total / classes.len() as f64;
        let rg = self.rg(logits.0);
        Ok(self.push(
            Tensor::scalar(v),
            Op::CrossEntropy {
                logits: logits.0,
                classes: classes.to_vec(),
                probs,
            },
            rg,
        ))
    }

    // ---- backward ----------------------------------------------------

    /// Accumulate d(loss)/d(leaf) into every leaf and parameter that
    /// requires a gradient. Repeated calls add up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.val(loss).len() != 1 {
            return Err(Error::Domain(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf | Op::Param) {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let acc = |idx: usize, grads: &mut [Option<Vec<f64>>]| -> Option<usize> {
            if nodes[idx].requires_grad {
                if grads[idx].is_none() {
                    grads[idx] = Some(vec![0.0; nodes[idx].value.len()]);
                }
                Some(idx)
            } else {
                None
            }
        };
        macro_rules! buf {
            ($idx:expr) => {
                grads[$idx].as_mut().unwrap()
            };
        }
        match &nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(a) = acc(*a, grads) {
                    buf!(a).iter_mut().zip(g).for_each(|(x, v)| *x += v);
                }
                if let Some(b) = acc(*b, grads) {
                    buf!(b).iter_mut().zip(g).for_each(|(x, v)| *x += sign * v);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                if let Some(ai) = acc(*a, grads) {
                    for ((x, v), bv) in buf!(ai).iter_mut().zip(g).zip(vb) {
                        *x += v * bv;
                    }
                }
                if let Some(bi) = acc(*b, grads) {
                    for ((x, v), av) in buf!(bi).iter_mut().zip(g).zip(va) {
                        *x += v * av;
                    }
                }
            }
            Op::AddTiled(a, b) => {
                if let Some(a) = acc(*a, grads) {
                    buf!(a).iter_mut().zip(g).for_each(|(x, v)| *x += v);
                }
                if let Some(b) = acc(*b, grads) {
                    let gb = buf!(b);
                    let lb = gb.len();
                    for (j, v) in g.iter().enumerate() {
                        gb[j % lb] += v;
                    }
                }
            }
            Op::MulTiled(a, b) => {
                let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                let lb = vb.len();
                if let Some(ai) = acc(*a, grads) {
                    for (j, (x, v)) in buf!(ai).iter_mut().zip(g).enumerate() {
                        *x += v * vb[j % lb];
                    }
                }
                if let Some(bi) = acc(*b, grads) {
                    let gb = buf!(bi);
                    for (j, v) in g.iter().enumerate() {
                        gb[j % lb] += v * va[j];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(a) = acc(*a, grads) {
                    buf!(a).iter_mut().zip(g).for_each(|(x, v)| *x += c * v);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(a) = acc(*a, grads) {
                    buf!(a).iter_mut().zip(g).for_each(|(x, v)| *x += v);
                }
            }
            Op::MatMul(a, b) => {
                let (xa, xb) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k, n) = (xa.rows(), xa.cols(), xb.shape()[1]);
                if let Some(ai) = acc(*a, grads) {
                    let bt = transpose(xb.data(), k, n);
                    matmul_acc(g, &bt, m, n, k, buf!(ai));
                }
                if let Some(bi) = acc(*b, grads) {
                    let at = transpose(xa.data(), m, k);
                    matmul_acc(&at, g, k, m, n, buf!(bi));
                }
            }
            Op::BatchMatMul {
                a,
                b,
                transpose_b,
                groups,
                m,
                k,
                n,
            } => {
                let (m, k, n, groups, tb) = (*m, *k, *n, *groups, *transpose_b);
                let (ad, bd) = (nodes[*a].value.data(), nodes[*b].value.data());
                let work = groups * m * k * n;
                if let Some(ai) = acc(*a, grads) {
                    par::for_each_chunk_mut(buf!(ai), m * k, work, |gi, ga| {
                        let gg = &g[gi * m * n..(gi + 1) * m * n];
                        let bg = &bd[gi * k * n..(gi + 1) * k * n];
                        if tb {
                            // out = a b^T, b is [n,k]: ga = g b
                            matmul_acc_seq(gg, bg, m, n, k, ga);
                        } else {
                            let bt = transpose(bg, k, n);
                            matmul_acc_seq(gg, &bt, m, n, k, ga);
                        }
                    });
                }
                if let Some(bi) = acc(*b, grads) {
                    par::for_each_chunk_mut(buf!(bi), k * n, work, |gi, gb| {
                        let gg = &g[gi * m * n..(gi + 1) * m * n];
                        let ag = &ad[gi * m * k..(gi + 1) * m * k];
                        if tb {
                            // gb[n,k] = g^T a
                            let gt = transpose(gg, m, n);
                            matmul_acc_seq(&gt, ag, n, m, k, gb);
                        } else {
                            let at = transpose(ag, m, k);
                            matmul_acc_seq(&at, gg, k, m, n, gb);
                        }
                    });
                }
            }
            Op::Gelu(a) => {
                let xa = nodes[*a].value.data();
                if let Some(ai) = acc(*a, grads) {
                    for ((x, v), xv) in buf!(ai).iter_mut().zip(g).zip(xa) {
                        *x += v * gelu_grad(*xv);
                    }
                }
            }
            Op::Softplus(a) => {
                let xa = nodes[*a].value.data();
                if let Some(ai) = acc(*a, grads) {
                    for ((x, v), xv) in buf!(ai).iter_mut().zip(g).zip(xa) {
                        *x += v * sigmoid(*xv);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ai) = acc(*a, grads) {
                    for ((x, v), s) in buf!(ai).iter_mut().zip(g).zip(out.data()) {
                        *x += v * s * (1.0 - s);
                    }
                }
            }
            Op::Softmax(a) => {
                if let Some(ai) = acc(*a, grads) {
                    let c = out.cols();
                    let ga = buf!(ai);
                    for ((gr, yr), xr) in g.chunks(c).zip(out.data().chunks(c)).zip(ga.chunks_mut(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for ((x, gv), y) in xr.iter_mut().zip(gr).zip(yr) {
                            *x += y * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x: a, inv_std } => {
                if let Some(ai) = acc(*a, grads) {
                    let c = out.cols();
                    let ga = buf!(ai);
                    for (r, ((gr, yr), xr)) in g
                        .chunks(c)
                        .zip(out.data().chunks(c))
                        .zip(ga.chunks_mut(c))
                        .enumerate()
                    {
                        let mg = gr.iter().sum::<f64>() / c as f64;
                        let mgy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / c as f64;
                        for ((x, gv), y) in xr.iter_mut().zip(gr).zip(yr) {
                            *x += inv_std[r] * (gv - mg - y * mgy);
                        }
                    }
                }
            }
            Op::Permute { x: a, perm } => {
                if let Some(ai) = acc(*a, grads) {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let (back, _) = permute_data(g, out.shape(), &inv);
                    buf!(ai).iter_mut().zip(&back).for_each(|(x, v)| *x += v);
                }
            }
            Op::GatherRows { x: a, index } => {
                if let Some(ai) = acc(*a, grads) {
                    let row = if index.is_empty() { 0 } else { g.len() / index.len() };
                    let ga = buf!(ai);
                    for (r, &src) in index.iter().enumerate() {
                        for (x, v) in ga[src * row..(src + 1) * row].iter_mut().zip(&g[r * row..(r + 1) * row]) {
                            *x += v;
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let total = out.cols();
                let rows = out.rows();
                let mut off = 0;
                for &p in parts {
                    let c = nodes[p].value.cols();
                    if let Some(pi) = acc(p, grads) {
                        let gp = buf!(pi);
                        for r in 0..rows {
                            for (x, v) in gp[r * c..(r + 1) * c]
                                .iter_mut()
                                .zip(&g[r * total + off..r * total + off + c])
                            {
                                *x += v;
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::SliceCols { x: a, start } => {
                if let Some(ai) = acc(*a, grads) {
                    let c = nodes[*a].value.cols();
                    let w = out.cols();
                    let ga = buf!(ai);
                    for r in 0..out.rows() {
                        for (x, v) in ga[r * c + start..r * c + start + w].iter_mut().zip(&g[r * w..(r + 1) * w]) {
                            *x += v;
                        }
                    }
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                if let Some(ai) = acc(*a, grads) {
                    let ga = buf!(ai);
                    let f = if matches!(nodes[i].op, Op::Mean(_)) {
                        g[0] / ga.len().max(1) as f64
                    } else {
                        g[0]
                    };
                    ga.iter_mut().for_each(|x| *x += f);
                }
            }
            Op::MeanTokens { x: a, tokens } => {
                if let Some(ai) = acc(*a, grads) {
                    let nb = out.cols();
                    let ga = buf!(ai);
                    let inv = 1.0 / *tokens as f64;
                    for (r, gr) in g.chunks(nb).enumerate() {
                        for t in 0..*tokens {
                            let base = (r * tokens + t) * nb;
                            for (x, v) in ga[base..base + nb].iter_mut().zip(gr) {
                                *x += v * inv;
                            }
                        }
                    }
                }
            }
            Op::FeatureEmbed { x, w, b } => {
                let (xx, xw) = (&nodes[*x].value, &nodes[*w].value);
                let (n, p) = (xx.shape()[0], xx.shape()[1]);
                let d = xw.shape()[1];
                if let Some(xi) = acc(*x, grads) {
                    let gx = buf!(xi);
                    for r in 0..n {
                        for j in 0..p {
                            let gr = &g[(r * p + j) * d..(r * p + j + 1) * d];
                            let wr = &xw.data()[j * d..(j + 1) * d];
                            gx[r * p + j] += gr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if let Some(wi) = acc(*w, grads) {
                    let gw = buf!(wi);
                    for r in 0..n {
                        for j in 0..p {
                            let xv = xx.data()[r * p + j];
                            let gr = &g[(r * p + j) * d..(r * p + j + 1) * d];
                            for (o, v) in gw[j * d..(j + 1) * d].iter_mut().zip(gr) {
                                *o += xv * v;
                            }
                        }
                    }
                }
                if let Some(bi) = acc(*b, grads) {
                    let gb = buf!(bi);
                    let pd = p * d;
                    for (j, v) in g.iter().enumerate() {
                        gb[j % pd] += v;
                    }
                }
            }
            Op::Pinball { pred, target, tau } => {
                if let Some(pi) = acc(*pred, grads) {
                    let pv = nodes[*pred].value.data();
                    let scale = g[0] / target.len() as f64;
                    for ((x, p), y) in buf!(pi).iter_mut().zip(pv).zip(target) {
                        let d = if y > p {
                            -tau
                        } else if p > y {
                            1.0 - tau
                        } else {
                            0.0
                        };
                        *x += scale * d;
                    }
                }
            }
            Op::PseudoHuber { pred, target, delta } => {
                if let Some(pi) = acc(*pred, grads) {
                    let pv = nodes[*pred].value.data();
                    let scale = g[0] / target.len() as f64;
                    for ((x, p), y) in buf!(pi).iter_mut().zip(pv).zip(target) {
                        let r = y - p;
                        *x += scale * (-r / (1.0 + (r / delta).powi(2)).sqrt());
                    }
                }
            }
            Op::Huber { pred, target, delta } => {
                if let Some(pi) = acc(*pred, grads) {
                    let pv = nodes[*pred].value.data();
                    let scale = g[0] / target.len() as f64;
                    for ((x, p), y) in buf!(pi).iter_mut().zip(pv).zip(target) {
                        let r = y - p;
                        let d = if r.abs() <= *delta { -r } else { -delta * r.signum() };
                        *x += scale * d;
                    }
                }
            }
            Op::Bce { prob, target } => {
                if let Some(pi) = acc(*prob, grads) {
                    let pv = nodes[*prob].value.data();
                    let scale = g[0] / target.len() as f64;
                    for ((x, &p), &y) in buf!(pi).iter_mut().zip(pv).zip(target) {
                        if p > BCE_CLAMP && p < 1.0 - BCE_CLAMP {
                            *x += scale * (-y / p + (1.0 - y) / (1.0 - p));
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, classes, probs } => {
                if let Some(li) = acc(*logits, grads) {
                    let c = probs.len() / classes.len();
                    let scale = g[0] / classes.len() as f64;
                    let gl = buf!(li);
                    for (r, &k) in classes.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == k { 1.0 } else { 0.0 };
                            gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}
