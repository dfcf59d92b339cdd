use ndarray::{s, Array2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore};

const LN_EPS: f64 = 1e-5;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Linear { x: Var, w: ParamId, b: ParamId },
    Add(Var, Var),
    Silu(Var),
    Relu(Var),
    Concat(Vec<Var>),
    LayerNorm { x: Var, gamma: ParamId, beta: ParamId, xhat: Array2<f64>, inv_std: Vec<f64> },
    Dropout { x: Var, mask: Array2<f64> },
    Attention { q: Var, k: Var, v: Var, seq: usize, heads: usize, probs: Vec<f64> },
    Stack(Vec<Var>),
    Reshape(Var),
    Substitute { x: Var, token: ParamId, mask: Vec<bool> },
    Gather { x: Var, index: Vec<usize> },
    MaxPool { x: Var, argmax: Array2<usize> },
    MaskedMse { pred: Var, target: Array2<f64>, mask: Array2<f64> },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Reverse-mode tape over row-major `f64` matrices (rows are batch items).
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    dropout: Option<ChaCha8Rng>,
}

pub struct Gradients {
    params: Vec<Option<Array2<f64>>>,
    nodes: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.params[id].as_ref()
    }

    pub fn node(&self, v: Var) -> Option<&Array2<f64>> {
        self.nodes[v.0].as_ref()
    }

    /// Weighted sum of the parameter gradients of several tapes, folded in
    /// order. Node gradients are dropped.
    pub fn combine(parts: &[(Gradients, f64)]) -> Gradients {
        let n = parts.iter().map(|(g, _)| g.params.len()).max().unwrap_or(0);
        let mut params: Vec<Option<Array2<f64>>> = (0..n).map(|_| None).collect();
        for (g, w) in parts {
            for (slot, p) in params.iter_mut().zip(&g.params) {
                if let Some(p) = p {
                    accumulate(slot, p * *w);
                }
            }
        }
        Gradients { params, nodes: Vec::new() }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl<'s> Graph<'s> {
    /// Evaluation mode: dropout is the identity.
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            dropout: None,
        }
    }

    pub fn training(store: &'s ParamStore, rng: ChaCha8Rng) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            dropout: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Input)
    }

    /// `x·W + b` with `W` stored as (in, out) and `b` as (1, out).
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let mut y = self.value(x).dot(self.store.get(w));
        y += self.store.get(b);
        self.push(y, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) + self.value(b);
        self.push(y, Op::Add(a, b))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| v * sigmoid(v));
        self.push(y, Op::Silu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| v.max(0.0));
        self.push(y, Op::Relu(x))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let y = ndarray::concatenate(Axis(1), &views).expect("concat row counts differ");
        self.push(y, Op::Concat(parts.to_vec()))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let y = &xhat * self.store.get(gamma) + self.store.get(beta);
        self.push(y, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    /// Inverted dropout; a no-op outside training.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        let Some(rng) = self.dropout.as_mut() else { return x };
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let shape = self.nodes[x.0].value.raw_dim();
        let mask = Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < p { 0.0 } else { keep });
        let y = self.value(x) * &mask;
        self.push(y, Op::Dropout { x, mask })
    }

    /// Multi-head scaled dot-product attention within consecutive groups of
    /// `seq` rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qv.dim();
        assert!(rows % seq == 0 && d % heads == 0);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let groups = rows / seq;
        let mut out = Array2::zeros((rows, d));
        let mut probs = vec![0.0; groups * heads * seq * seq];
        let mut scores = vec![0.0; seq];
        for g in 0..groups {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..seq {
                    let qi = qv.slice(s![g * seq + i, cols.clone()]);
                    for (j, sc) in scores.iter_mut().enumerate() {
                        *sc = qi.dot(&kv.slice(s![g * seq + j, cols.clone()])) * scale;
                    }
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for sc in scores.iter_mut() {
                        *sc = (*sc - max).exp();
                        sum += *sc;
                    }
                    let base = ((g * heads + h) * seq + i) * seq;
                    for j in 0..seq {
                        let p = scores[j] / sum;
                        probs[base + j] = p;
                        let vj = vv.slice(s![g * seq + j, cols.clone()]);
                        out.slice_mut(s![g * seq + i, cols.clone()]).scaled_add(p, &vj);
                    }
                }
            }
        }
        self.push(out, Op::Attention { q, k, v, seq, heads, probs })
    }

    /// Interleaves per-sample tokens: row `b·S + s` is row `b` of `tokens[s]`.
    pub fn stack(&mut self, tokens: &[Var]) -> Var {
        let s_len = tokens.len();
        let (b, d) = self.value(tokens[0]).dim();
        let mut y = Array2::zeros((b * s_len, d));
        for (s_i, t) in tokens.iter().enumerate() {
            let tv = self.value(*t);
            for r in 0..b {
                y.row_mut(r * s_len + s_i).assign(&tv.row(r));
            }
        }
        self.push(y, Op::Stack(tokens.to_vec()))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let xv = self.value(x);
        let flat: Vec<f64> = xv.iter().copied().collect();
        let y = Array2::from_shape_vec((rows, cols), flat).expect("reshape size mismatch");
        self.push(y, Op::Reshape(x))
    }

    /// Replaces the rows flagged in `mask` by the (1, d) parameter `token`.
    pub fn substitute(&mut self, x: Var, token: ParamId, mask: &[bool]) -> Var {
        let mut y = self.value(x).clone();
        let t = self.store.get(token);
        for (r, &m) in mask.iter().enumerate() {
            if m {
                y.row_mut(r).assign(&t.row(0));
            }
        }
        self.push(y, Op::Substitute { x, token, mask: mask.to_vec() })
    }

    pub fn gather(&mut self, x: Var, index: &[usize]) -> Var {
        let y = self.value(x).select(Axis(0), index);
        self.push(y, Op::Gather { x, index: index.to_vec() })
    }

    /// Column-wise max over consecutive groups of `group` rows.
    pub fn max_pool(&mut self, x: Var, group: usize) -> Var {
        let xv = self.value(x);
        let (rows, d) = xv.dim();
        assert!(group > 0 && rows % group == 0);
        let n = rows / group;
        let mut y = Array2::from_elem((n, d), f64::NEG_INFINITY);
        let mut argmax = Array2::zeros((n, d));
        for r in 0..rows {
            let g = r / group;
            for c in 0..d {
                let v = xv[(r, c)];
                if v > y[(g, c)] {
                    y[(g, c)] = v;
                    argmax[(g, c)] = r;
                }
            }
        }
        self.push(y, Op::MaxPool { x, argmax })
    }

    /// `Σ mask·(pred − target)² / len`, a (1, 1) node.
    pub fn masked_mse(&mut self, pred: Var, target: Array2<f64>, mask: Array2<f64>) -> Var {
        let p = self.value(pred);
        let n = p.len() as f64;
        let mut total = 0.0;
        Zip::from(p).and(&target).and(&mask).for_each(|&p, &t, &m| total += m * (p - t) * (p - t));
        self.push(Array2::from_elem((1, 1), total / n), Op::MaskedMse { pred, target, mask })
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[(0, 0)]
    }

    /// Reverse pass from a (1, 1) node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut node_grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Option<Array2<f64>>> = (0..self.store.len()).map(|_| None).collect();
        node_grads[loss.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let Some(gy) = node_grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    accumulate(&mut param_grads[*w], xv.t().dot(&gy));
                    accumulate(&mut param_grads[*b], gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut node_grads[x.0], gy.dot(&self.store.get(*w).t()));
                }
                Op::Add(a, b) => {
                    accumulate(&mut node_grads[a.0], gy.clone());
                    accumulate(&mut node_grads[b.0], gy.clone());
                }
                Op::Silu(x) => {
                    let mut g = gy.clone();
                    Zip::from(&mut g).and(self.value(*x)).for_each(|g, &v| {
                        let s = sigmoid(v);
                        *g *= s * (1.0 + v * (1.0 - s));
                    });
                    accumulate(&mut node_grads[x.0], g);
                }
                Op::Relu(x) => {
                    let mut g = gy.clone();
                    Zip::from(&mut g).and(self.value(*x)).for_each(|g, &v| {
                        if v <= 0.0 {
                            *g = 0.0;
                        }
                    });
                    accumulate(&mut node_grads[x.0], g);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        accumulate(&mut node_grads[p.0], gy.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let gm = self.store.get(*gamma);
                    accumulate(&mut param_grads[*gamma], (&gy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut param_grads[*beta], gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let gxhat = &gy * gm;
                    let d = xhat.ncols() as f64;
                    let mut gx = Array2::zeros(xhat.raw_dim());
                    for r in 0..xhat.nrows() {
                        let gr = gxhat.row(r);
                        let xr = xhat.row(r);
                        let m1 = gr.sum() / d;
                        let m2 = gr.dot(&xr) / d;
                        let is = inv_std[r];
                        for c in 0..xhat.ncols() {
                            gx[(r, c)] = is * (gr[c] - m1 - xr[c] * m2);
                        }
                    }
                    accumulate(&mut node_grads[x.0], gx);
                }
                Op::Dropout { x, mask } => accumulate(&mut node_grads[x.0], &gy * mask),
                Op::Attention { q, k, v, seq, heads, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (rows, d) = qv.dim();
                    let (seq, heads) = (*seq, *heads);
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Array2::zeros((rows, d));
                    let mut gk = Array2::zeros((rows, d));
                    let mut gv = Array2::zeros((rows, d));
                    let mut dp = vec![0.0; seq];
                    for g in 0..rows / seq {
                        for h in 0..heads {
                            let cols = h * dh..(h + 1) * dh;
                            for i in 0..seq {
                                let base = ((g * heads + h) * seq + i) * seq;
                                let p = &probs[base..base + seq];
                                let go = gy.slice(s![g * seq + i, cols.clone()]);
                                for j in 0..seq {
                                    dp[j] = go.dot(&vv.slice(s![g * seq + j, cols.clone()]));
                                    gv.slice_mut(s![g * seq + j, cols.clone()]).scaled_add(p[j], &go);
                                }
                                let inner: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                                for j in 0..seq {
                                    let ds = p[j] * (dp[j] - inner) * scale;
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    let kj = kv.slice(s![g * seq + j, cols.clone()]);
                                    gq.slice_mut(s![g * seq + i, cols.clone()]).scaled_add(ds, &kj);
                                    let qi = qv.slice(s![g * seq + i, cols.clone()]);
                                    gk.slice_mut(s![g * seq + j, cols.clone()]).scaled_add(ds, &qi);
                                }
                            }
                        }
                    }
                    accumulate(&mut node_grads[q.0], gq);
                    accumulate(&mut node_grads[k.0], gk);
                    accumulate(&mut node_grads[v.0], gv);
                }
                Op::Stack(tokens) => {
                    let s_len = tokens.len();
                    for (s_i, t) in tokens.iter().enumerate() {
                        let b = self.value(*t).nrows();
                        let rows: Vec<usize> = (0..b).map(|r| r * s_len + s_i).collect();
                        accumulate(&mut node_grads[t.0], gy.select(Axis(0), &rows));
                    }
                }
                Op::Reshape(x) => {
                    let flat: Vec<f64> = gy.iter().copied().collect();
                    let g = Array2::from_shape_vec(self.value(*x).raw_dim(), flat).unwrap();
                    accumulate(&mut node_grads[x.0], g);
                }
                Op::Substitute { x, token, mask } => {
                    let mut gx = gy.clone();
                    let mut gt = Array2::zeros((1, gy.ncols()));
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            gt.row_mut(0).scaled_add(1.0, &gy.row(r));
                            gx.row_mut(r).fill(0.0);
                        }
                    }
                    if mask.iter().any(|&m| m) {
                        accumulate(&mut param_grads[*token], gt);
                    }
                    accumulate(&mut node_grads[x.0], gx);
                }
                Op::Gather { x, index } => {
                    let mut gx = Array2::zeros(self.value(*x).raw_dim());
                    for (r, &src) in index.iter().enumerate() {
                        gx.row_mut(src).scaled_add(1.0, &gy.row(r));
                    }
                    accumulate(&mut node_grads[x.0], gx);
                }
                Op::MaxPool { x, argmax } => {
                    let mut gx = Array2::zeros(self.value(*x).raw_dim());
                    for ((g, c), &r) in argmax.indexed_iter() {
                        gx[(r, c)] += gy[(g, c)];
                    }
                    accumulate(&mut node_grads[x.0], gx);
                }
                Op::MaskedMse { pred, target, mask } => {
                    let p = self.value(*pred);
                    let scale = 2.0 * gy[(0, 0)] / p.len() as f64;
                    let mut g = p - target;
                    g *= mask;
                    g *= scale;
                    accumulate(&mut node_grads[pred.0], g);
                }
            }
            node_grads[idx] = Some(gy);
        }
        Gradients {
            params: param_grads,
            nodes: node_grads,
        }
    }
}
