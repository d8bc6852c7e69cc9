//! Reverse-mode automatic differentiation over matrix-valued nodes.
//!
//! A [`Graph`] records every operation of one forward pass; [`Graph::backward`]
//! walks the record in reverse and returns gradients for every parameter of
//! the [`ParamStore`] the graph was built against.

use super::tensor::gemm;
use super::{Gradients, ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const UNIT_EPS: f64 = 1e-24;

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Tanh(Var),
    Softplus(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        tokens: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    RepeatRows(Var, usize),
    Reshape(Var),
    Mse(Var, Tensor),
    UnitPairs(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.count()],
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param(id));
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ar, bc) = (self.value(a).rows, self.value(b).cols);
        let mut out = Tensor::zeros(ar, bc);
        gemm(self.value(a), false, self.value(b), false, &mut out, 0.0);
        self.push(out, Op::MatMul(a, b))
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows, 1);
        let mut out = self.value(a).clone();
        assert_eq!(out.cols, b.cols, "bias width");
        for r in 0..out.rows {
            for (o, bv) in out.data[r * out.cols..(r + 1) * out.cols].iter_mut().zip(&b.data) {
                *o += bv;
            }
        }
        self.push(out, Op::AddBias(a, bias))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect();
        let out = Tensor::from_vec(x.rows, x.cols, data);
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a))
    }

    /// Row-wise layer normalization with a learned `1×c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let mut out = Tensor::zeros(rows, cols);
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = inv;
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat[r * cols + c] = h;
                out.data[r * cols + c] = h * g[c] + b[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Multi-head scaled dot-product self-attention over `batch` independent
    /// sequences of `tokens` rows each. `q`, `k`, `v` are `(batch·tokens)×d`
    /// with `d` divisible by `heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, tokens: usize, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols;
        assert_eq!(qv.rows, batch * tokens, "attention rows");
        assert_eq!(d % heads, 0, "model width must divide into heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(batch * tokens, d);
        let mut probs = vec![0.0; batch * heads * tokens * tokens];
        let mut scores = vec![0.0; tokens];
        for b in 0..batch {
            for h in 0..heads {
                let pbase = (b * heads + h) * tokens * tokens;
                for i in 0..tokens {
                    let qi = &qv.row(b * tokens + i)[h * dh..(h + 1) * dh];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &kv.row(b * tokens + j)[h * dh..(h + 1) * dh];
                        *s = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                        max = max.max(*s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let orow = b * tokens + i;
                    for (j, s) in scores.iter().enumerate() {
                        let p = s / z;
                        probs[pbase + i * tokens + j] = p;
                        let vj = &vv.row(b * tokens + j)[h * dh..(h + 1) * dh];
                        let o = &mut out.data[orow * d + h * dh..orow * d + (h + 1) * dh];
                        for (ov, vvv) in o.iter_mut().zip(vj) {
                            *ov += p * vvv;
                        }
                    }
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                tokens,
                heads,
                probs,
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.data[r * cols + at..r * cols + at + t.cols].copy_from_slice(t.row(r));
            }
            at += t.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&t.data);
        }
        let out = Tensor::from_vec(data.len() / cols.max(1), cols, data);
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.cols, "slice_cols out of range");
        let mut out = Tensor::zeros(t.rows, len);
        for r in 0..t.rows {
            out.data[r * len..(r + 1) * len].copy_from_slice(&t.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    /// Gathers rows by index; indices may repeat.
    pub fn select_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(idx.len(), t.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.data[o * t.cols..(o + 1) * t.cols].copy_from_slice(t.row(i));
        }
        self.push(out, Op::SelectRows(a, idx))
    }

    /// Tiles `a` vertically `times` times.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let t = self.value(a);
        let mut data = Vec::with_capacity(t.len() * times);
        for _ in 0..times {
            data.extend_from_slice(&t.data);
        }
        let out = Tensor::from_vec(t.rows * times, t.cols, data);
        self.push(out, Op::RepeatRows(a, times))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.len(), rows * cols, "reshape size");
        let out = Tensor::from_vec(rows, cols, t.data.clone());
        self.push(out, Op::Reshape(a))
    }

    /// Mean squared error against a constant target, as a `1×1` node.
    pub fn mse(&mut self, pred: Var, target: Tensor) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "mse shape");
        let n = p.len().max(1) as f64;
        let s: f64 = p.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).sum();
        self.push(Tensor::scalar(s / n), Op::Mse(pred, target))
    }

    /// Normalizes every row of an `n×2` node to unit length.
    pub fn unit_pairs(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert_eq!(t.cols, 2, "unit_pairs expects two columns");
        let mut out = t.clone();
        for r in 0..t.rows {
            let (x, y) = (t.get(r, 0), t.get(r, 1));
            let n = (x * x + y * y + UNIT_EPS).sqrt();
            out.set(r, 0, x / n);
            out.set(r, 1, y / n);
        }
        self.push(out, Op::UnitPairs(a))
    }

    /// Gradients of the scalar node `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = self.params.zeros_like();

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.tensors[id.0].add_assign(&dy),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = Tensor::zeros(av.rows, av.cols);
                    gemm(&dy, false, bv, true, &mut da, 0.0);
                    let mut db = Tensor::zeros(bv.rows, bv.cols);
                    gemm(av, true, &dy, false, &mut db, 0.0);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::AddBias(a, bias) => {
                    let mut db = Tensor::zeros(1, dy.cols);
                    for r in 0..dy.rows {
                        for (d, g) in db.data.iter_mut().zip(dy.row(r)) {
                            *d += g;
                        }
                    }
                    acc(&mut grads, *bias, db);
                    acc(&mut grads, *a, dy);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, dy.clone());
                    acc(&mut grads, *a, dy);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, dy.map(|v| -v));
                    acc(&mut grads, *a, dy);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = dy.clone();
                    for (d, y) in da.data.iter_mut().zip(&bv.data) {
                        *d *= y;
                    }
                    let mut db = dy;
                    for (d, x) in db.data.iter_mut().zip(&av.data) {
                        *d *= x;
                    }
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, dy.map(|v| v * s)),
                Op::Silu(a) => {
                    let x = self.value(*a);
                    let mut d = dy;
                    for (g, &xv) in d.data.iter_mut().zip(&x.data) {
                        let s = sigmoid(xv);
                        *g *= s + xv * s * (1.0 - s);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let mut d = dy;
                    for (g, &yv) in d.data.iter_mut().zip(&node.value.data) {
                        *g *= 1.0 - yv * yv;
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Softplus(a) => {
                    let x = self.value(*a);
                    let mut d = dy;
                    for (g, &xv) in d.data.iter_mut().zip(&x.data) {
                        *g *= sigmoid(xv);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let (rows, cols) = dy.shape();
                    let g = &self.value(*gain).data;
                    let mut dx = Tensor::zeros(rows, cols);
                    let mut dg = Tensor::zeros(1, cols);
                    let mut db = Tensor::zeros(1, cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let dyr = dy.row(r);
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for c in 0..cols {
                            dg.data[c] += dyr[c] * xh[c];
                            db.data[c] += dyr[c];
                            let dxh = dyr[c] * g[c];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh[c];
                        }
                        for c in 0..cols {
                            let dxh = dyr[c] * g[c];
                            dx.data[r * cols + c] = inv_std[r] / n * (n * dxh - sum_dxh - xh[c] * sum_dxh_xh);
                        }
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gain, dg);
                    acc(&mut grads, *bias, db);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    batch,
                    tokens,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (tokens, heads) = (*tokens, *heads);
                    let d = qv.cols;
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Tensor::zeros(qv.rows, d);
                    let mut dk = Tensor::zeros(kv.rows, d);
                    let mut dv = Tensor::zeros(vv.rows, d);
                    let mut dp = vec![0.0; tokens];
                    for b in 0..*batch {
                        for h in 0..heads {
                            let pbase = (b * heads + h) * tokens * tokens;
                            let cols = h * dh..(h + 1) * dh;
                            for i in 0..tokens {
                                let orow = b * tokens + i;
                                let dout = &dy.row(orow)[cols.clone()];
                                let p = &probs[pbase + i * tokens..pbase + (i + 1) * tokens];
                                let mut dot = 0.0;
                                for j in 0..tokens {
                                    let jr = b * tokens + j;
                                    let vj = &vv.row(jr)[cols.clone()];
                                    dp[j] = dout.iter().zip(vj).map(|(a, c)| a * c).sum();
                                    dot += dp[j] * p[j];
                                    let dvj = &mut dv.data[jr * d + h * dh..jr * d + (h + 1) * dh];
                                    for (x, o) in dvj.iter_mut().zip(dout) {
                                        *x += p[j] * o;
                                    }
                                }
                                for j in 0..tokens {
                                    let ds = p[j] * (dp[j] - dot) * scale;
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    let jr = b * tokens + j;
                                    for c in cols.clone() {
                                        dq.data[orow * d + c] += ds * kv.data[jr * d + c];
                                        dk.data[jr * d + c] += ds * qv.data[orow * d + c];
                                    }
                                }
                            }
                        }
                    }
                    acc(&mut grads, *q, dq);
                    acc(&mut grads, *k, dk);
                    acc(&mut grads, *v, dv);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let w = self.value(p).cols;
                        let mut dp = Tensor::zeros(dy.rows, w);
                        for r in 0..dy.rows {
                            dp.data[r * w..(r + 1) * w].copy_from_slice(&dy.row(r)[at..at + w]);
                        }
                        at += w;
                        acc(&mut grads, p, dp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        let t = self.value(p);
                        acc(
                            &mut grads,
                            p,
                            Tensor::from_vec(t.rows, t.cols, dy.data[at..at + n].to_vec()),
                        );
                        at += n;
                    }
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut da = Tensor::zeros(src.rows, src.cols);
                    for r in 0..dy.rows {
                        da.data[r * src.cols + start..r * src.cols + start + dy.cols].copy_from_slice(dy.row(r));
                    }
                    acc(&mut grads, *a, da);
                }
                Op::SelectRows(a, idx) => {
                    let src = self.value(*a);
                    let mut da = Tensor::zeros(src.rows, src.cols);
                    for (o, &i) in idx.iter().enumerate() {
                        for (x, g) in da.data[i * src.cols..(i + 1) * src.cols].iter_mut().zip(dy.row(o)) {
                            *x += g;
                        }
                    }
                    acc(&mut grads, *a, da);
                }
                Op::RepeatRows(a, times) => {
                    let src = self.value(*a);
                    let mut da = Tensor::zeros(src.rows, src.cols);
                    let n = src.len();
                    for t in 0..*times {
                        for (x, g) in da.data.iter_mut().zip(&dy.data[t * n..(t + 1) * n]) {
                            *x += g;
                        }
                    }
                    acc(&mut grads, *a, da);
                }
                Op::Reshape(a) => {
                    let src = self.value(*a);
                    acc(&mut grads, *a, Tensor::from_vec(src.rows, src.cols, dy.data));
                }
                Op::Mse(pred, target) => {
                    let p = self.value(*pred);
                    let n = p.len().max(1) as f64;
                    let g = dy.data[0];
                    let data = p
                        .data
                        .iter()
                        .zip(&target.data)
                        .map(|(a, b)| 2.0 * (a - b) / n * g)
                        .collect();
                    acc(&mut grads, *pred, Tensor::from_vec(p.rows, p.cols, data));
                }
                Op::UnitPairs(a) => {
                    let src = self.value(*a);
                    let mut da = Tensor::zeros(src.rows, 2);
                    for r in 0..src.rows {
                        let (x, y) = (src.get(r, 0), src.get(r, 1));
                        let n2 = x * x + y * y + UNIT_EPS;
                        let n = n2.sqrt();
                        let (gx, gy) = (dy.get(r, 0), dy.get(r, 1));
                        let vd = x * gx + y * gy;
                        da.set(r, 0, gx / n - x * vd / (n2 * n));
                        da.set(r, 1, gy / n - y * vd / (n2 * n));
                    }
                    acc(&mut grads, *a, da);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of every parameter for a graph-building closure.
    fn check(store: &mut ParamStore, f: impl Fn(&mut Graph) -> Var) {
        let g = {
            let mut graph = Graph::new(store);
            let l = f(&mut graph);
            graph.backward(l).flat()
        };
        let base = store.flat();
        let h = 1e-5;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += h;
            store.set_flat(&p);
            let up = {
                let mut graph = Graph::new(store);
                let l = f(&mut graph);
                graph.value(l).data[0]
            };
            p[i] -= 2.0 * h;
            store.set_flat(&p);
            let down = {
                let mut graph = Graph::new(store);
                let l = f(&mut graph);
                graph.value(l).data[0]
            };
            store.set_flat(&base);
            let num = (up - down) / (2.0 * h);
            let rel = (num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-6);
            assert!(rel < 1e-5, "param {i}: analytic {} numeric {num}", g[i]);
        }
    }

    #[test]
    fn dense_ops_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let w = store.add("w", rand_tensor(&mut rng, 3, 4));
        let b = store.add("b", rand_tensor(&mut rng, 1, 4));
        let w2 = store.add("w2", rand_tensor(&mut rng, 4, 4));
        let x = rand_tensor(&mut rng, 5, 3);
        let target = rand_tensor(&mut rng, 5, 4);
        check(&mut store, |g| {
            let xv = g.constant(x.clone());
            let wv = g.param(w);
            let bv = g.param(b);
            let h = g.matmul(xv, wv);
            let h = g.add_bias(h, bv);
            let a = g.silu(h);
            let t = g.tanh(h);
            let m = g.mul(a, t);
            let s = g.softplus(m);
            let w2v = g.param(w2);
            let z = g.matmul(s, w2v);
            let z = g.sub(z, a);
            let z = g.scale(z, 0.7);
            g.mse(z, target.clone())
        });
    }

    #[test]
    fn layer_norm_attention_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let (batch, tokens, d) = (2, 3, 4);
        let x = store.add("x", rand_tensor(&mut rng, batch * tokens, d));
        let wq = store.add("wq", rand_tensor(&mut rng, d, d));
        let wk = store.add("wk", rand_tensor(&mut rng, d, d));
        let wv = store.add("wv", rand_tensor(&mut rng, d, d));
        let gain = store.add("gain", rand_tensor(&mut rng, 1, d));
        let bias = store.add("bias", rand_tensor(&mut rng, 1, d));
        let target = rand_tensor(&mut rng, batch, d);
        check(&mut store, |g| {
            let xv = g.param(x);
            let (gn, bn) = (g.param(gain), g.param(bias));
            let n = g.layer_norm(xv, gn, bn);
            let (a, b, c) = (g.param(wq), g.param(wk), g.param(wv));
            let q = g.matmul(n, a);
            let k = g.matmul(n, b);
            let v = g.matmul(n, c);
            let o = g.attention(q, k, v, batch, tokens, 2);
            let o = g.add(o, xv);
            let last = g.select_rows(o, vec![2, 5]);
            g.mse(last, target.clone())
        });
    }

    #[test]
    fn shape_ops_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let a = store.add("a", rand_tensor(&mut rng, 2, 3));
        let b = store.add("b", rand_tensor(&mut rng, 2, 2));
        let target = rand_tensor(&mut rng, 4, 5);
        let t2 = rand_tensor(&mut rng, 6, 2);
        check(&mut store, |g| {
            let (av, bv) = (g.param(a), g.param(b));
            let c = g.concat_cols(&[av, bv]);
            let c = g.repeat_rows(c, 2);
            let s = g.slice_cols(c, 1, 2);
            let u = g.unit_pairs(s);
            let l1 = g.mse(c, target.clone());
            let r = g.reshape(c, 10, 2);
            let r = g.select_rows(r, vec![0, 3, 3, 7, 9, 1]);
            let l2 = g.mse(r, t2.clone());
            let su = g.mse(u, Tensor::zeros(4, 2));
            let stacked = g.concat_rows(&[bv, s, u]);
            let l3 = g.mse(stacked, Tensor::zeros(10, 2).map(|_| 0.3));
            let l = g.add(l1, l2);
            let l = g.add(l, l3);
            g.add(l, su)
        });
    }

    #[test]
    fn unused_params_have_zero_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(2.0));
        store.add("unused", Tensor::scalar(5.0));
        let mut g = Graph::new(&store);
        let av = g.param(a);
        let l = g.mse(av, Tensor::scalar(0.0));
        let grads = g.backward(l).flat();
        assert_eq!(grads, vec![4.0, 0.0]);
    }
}
