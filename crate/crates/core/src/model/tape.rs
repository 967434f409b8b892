//! Reverse-mode automatic differentiation over 2-D `f64` tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! read straight from a borrowed [`ParamStore`], so building a tape never
//! copies weights. [`Tape::backward`] walks the record in reverse and returns
//! gradients keyed by parameter.

use std::collections::HashMap;

use super::attention::{self, AttentionShape};
use super::mask::AttentionMask;
use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;
use super::ModelError;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Embedding {
        table: NodeId,
        rows: Vec<usize>,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Add(NodeId, NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        shape: AttentionShape,
        probs: Vec<f64>,
    },
    ConcatRows(Vec<NodeId>),
    SelectRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Scale(NodeId, f64),
    SumAll(NodeId),
    WeightedSum {
        x: NodeId,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

const C_GELU: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const A_GELU: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (C_GELU * (x + A_GELU * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (C_GELU * (x + A_GELU * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C_GELU * (1.0 + 3.0 * A_GELU * x * x)
}

fn shape_err(msg: String) -> ModelError {
    ModelError::Shape(msg)
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match (&self.nodes[id.0].value, &self.nodes[id.0].op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.params.get(*p),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Constant)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(id, n);
        n
    }

    /// Gathers `rows` of a `[vocab, width]` table.
    pub fn embedding(&mut self, table: NodeId, rows: &[usize]) -> Result<NodeId, ModelError> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(shape_err("embedding table must be 2-D".into()));
        }
        let (vocab, w) = (t.rows(), t.cols());
        if let Some(&r) = rows.iter().find(|&&r| r >= vocab) {
            return Err(shape_err(format!("embedding row {r} out of {vocab}")));
        }
        let mut data = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            data.extend_from_slice(t.row(r));
        }
        let out = Tensor::matrix(rows.len(), w, data)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                rows: rows.to_vec(),
            },
        ))
    }

    /// `x W + b` with `x: [n, a]`, `W: [a, b]`, `b: [b]`.
    pub fn linear(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    ) -> Result<NodeId, ModelError> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.shape().len() != 2 || xv.cols() != wv.rows() {
            return Err(shape_err(format!(
                "linear: input {:?} vs weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (n, a, o) = (xv.rows(), wv.rows(), wv.cols());
        let mut data = vec![0.0; n * o];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != o {
                return Err(shape_err(format!(
                    "linear: bias {:?} for width {o}",
                    bv.shape()
                )));
            }
            for row in data.chunks_exact_mut(o) {
                row.copy_from_slice(bv.data());
            }
        }
        let (xd, wd) = (xv.data(), wv.data());
        for i in 0..n {
            let yi = &mut data[i * o..(i + 1) * o];
            for k in 0..a {
                let xik = xd[i * a + k];
                if xik != 0.0 {
                    for (y, wk) in yi.iter_mut().zip(&wd[k * o..(k + 1) * o]) {
                        *y += xik * wk;
                    }
                }
            }
        }
        let out = Tensor::matrix(n, o, data)?;
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, ModelError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(format!(
                "add: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, ModelError> {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        let (g, b) = (self.value(gain), self.value(bias));
        if g.len() != c || b.len() != c {
            return Err(shape_err(format!(
                "layer_norm: width {c} vs gain {:?}",
                g.shape()
            )));
        }
        let mut xhat = vec![0.0; n * c];
        let mut rstd = vec![0.0; n];
        let mut data = vec![0.0; n * c];
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = r;
            for j in 0..c {
                let h = (row[j] - mean) * r;
                xhat[i * c + j] = h;
                data[i * c + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId, ModelError> {
        let xv = self.value(x);
        let out = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|&v| gelu(v)).collect(),
        )?;
        Ok(self.push(out, Op::Gelu(x)))
    }

    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        mask: &AttentionMask,
        heads: usize,
        kv_heads: usize,
    ) -> Result<NodeId, ModelError> {
        let shape = AttentionShape::infer(
            self.value(q),
            self.value(k),
            self.value(v),
            mask,
            heads,
            kv_heads,
        )?;
        let (out, probs) = attention::forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            mask,
            shape,
        );
        let out = Tensor::matrix(shape.queries, heads * shape.head_dim, out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, ModelError> {
        if parts.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        let c = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.cols() != c {
                return Err(shape_err(format!("concat: width {} vs {c}", v.cols())));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::matrix(rows, c, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId, ModelError> {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        if let Some(&r) = rows.iter().find(|&&r| r >= n) {
            return Err(shape_err(format!("select_rows: row {r} of {n}")));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(xv.row(r));
        }
        let out = Tensor::matrix(rows.len(), c, data)?;
        Ok(self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Summed (not averaged) cross-entropy of each logit row against its
    /// target class, in nats.
    pub fn cross_entropy_sum(
        &mut self,
        logits: NodeId,
        targets: &[usize],
    ) -> Result<NodeId, ModelError> {
        let lv = self.value(logits);
        let (n, c) = (lv.rows(), lv.cols());
        if targets.len() != n {
            return Err(shape_err(format!(
                "cross_entropy: {} targets for {n} rows",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(shape_err(format!(
                "cross_entropy: target {t} of {c} classes"
            )));
        }
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[i * c..(i + 1) * c];
            let mut z = 0.0;
            for (pj, &l) in p.iter_mut().zip(row) {
                *pj = (l - max).exp();
                z += *pj;
            }
            p.iter_mut().for_each(|v| *v /= z);
            total += z.ln() + max - row[t];
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId, ModelError> {
        let xv = self.value(x);
        let out = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|v| v * c).collect(),
        )?;
        Ok(self.push(out, Op::Scale(x, c)))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    /// `sum(x * weights)` for fixed weights; scalarizes a tensor output for
    /// gradient checks.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Vec<f64>) -> Result<NodeId, ModelError> {
        let xv = self.value(x);
        if weights.len() != xv.len() {
            return Err(shape_err(format!(
                "weighted_sum: {} weights for {} elements",
                weights.len(),
                xv.len()
            )));
        }
        let s = xv.data().iter().zip(&weights).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }))
    }

    /// Gradients of the scalar `root` with respect to every parameter used.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, ModelError> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(shape_err(format!(
                "backward from non-scalar {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        let mut param_grads = vec![None; self.params.len()];

        fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, delta: Vec<f64>) {
            match &mut grads[id.0] {
                Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(delta),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Constant => {}
                Op::Param(p) => param_grads[p.0] = Some(dy),
                Op::Embedding { table, rows } => {
                    let tv = self.value(*table);
                    let w = tv.cols();
                    let mut d = vec![0.0; tv.len()];
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..w {
                            d[r * w + j] += dy[i * w + j];
                        }
                    }
                    acc(&mut grads, *table, d);
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (n, a, o) = (xv.rows(), wv.rows(), wv.cols());
                    let (xd, wd) = (xv.data(), wv.data());
                    let mut dx = vec![0.0; n * a];
                    let mut dw = vec![0.0; a * o];
                    for i in 0..n {
                        let dyi = &dy[i * o..(i + 1) * o];
                        for k in 0..a {
                            let wk = &wd[k * o..(k + 1) * o];
                            dx[i * a + k] = dyi.iter().zip(wk).map(|(p, q)| p * q).sum();
                            let xik = xd[i * a + k];
                            if xik != 0.0 {
                                for (dwk, g) in dw[k * o..(k + 1) * o].iter_mut().zip(dyi) {
                                    *dwk += xik * g;
                                }
                            }
                        }
                    }
                    if let Some(b) = b {
                        let mut db = vec![0.0; o];
                        for row in dy.chunks_exact(o) {
                            db.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                        }
                        acc(&mut grads, *b, db);
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, dy.clone());
                    acc(&mut grads, *b, dy);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let g = self.value(*gain).data();
                    let c = g.len();
                    let n = rstd.len();
                    let mut dx = vec![0.0; n * c];
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for i in 0..n {
                        let (dyi, hi) = (&dy[i * c..(i + 1) * c], &xhat[i * c..(i + 1) * c]);
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..c {
                            let dh = dyi[j] * g[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hi[j];
                            dg[j] += dyi[j] * hi[j];
                            db[j] += dyi[j];
                        }
                        mean_dh /= c as f64;
                        mean_dh_h /= c as f64;
                        for j in 0..c {
                            let dh = dyi[j] * g[j];
                            dx[i * c + j] = rstd[i] * (dh - mean_dh - hi[j] * mean_dh_h);
                        }
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gain, dg);
                    acc(&mut grads, *bias, db);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let dx = xv
                        .data()
                        .iter()
                        .zip(&dy)
                        .map(|(&v, g)| g * gelu_grad(v))
                        .collect();
                    acc(&mut grads, *x, dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    shape,
                    probs,
                } => {
                    let (dq, dk, dv) = attention::backward(
                        self.value(*q).data(),
                        self.value(*k).data(),
                        self.value(*v).data(),
                        probs,
                        &dy,
                        *shape,
                    );
                    acc(&mut grads, *q, dq);
                    acc(&mut grads, *k, dk);
                    acc(&mut grads, *v, dv);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        acc(&mut grads, p, dy[offset..offset + n].to_vec());
                        offset += n;
                    }
                }
                Op::SelectRows { x, rows } => {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let mut dx = vec![0.0; xv.len()];
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            dx[r * c + j] += dy[i * c + j];
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let c = self.value(*logits).cols();
                    let g = dy[0];
                    let mut dl: Vec<f64> = probs.iter().map(|p| p * g).collect();
                    for (i, &t) in targets.iter().enumerate() {
                        dl[i * c + t] -= g;
                    }
                    acc(&mut grads, *logits, dl);
                }
                Op::Scale(x, c) => {
                    acc(&mut grads, *x, dy.iter().map(|g| g * c).collect());
                }
                Op::SumAll(x) => {
                    let n = self.value(*x).len();
                    acc(&mut grads, *x, vec![dy[0]; n]);
                }
                Op::WeightedSum { x, weights } => {
                    acc(&mut grads, *x, weights.iter().map(|w| w * dy[0]).collect());
                }
            }
        }
        Ok(Gradients::from_parts(param_grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(entries: &[(&str, Vec<usize>, Vec<f64>)]) -> ParamStore {
        let mut p = ParamStore::new();
        for (n, s, d) in entries {
            p.add(*n, Tensor::new(s.clone(), d.clone()).unwrap())
                .unwrap();
        }
        p
    }

    #[test]
    fn linear_forward_and_backward() {
        let p = store(&[
            ("x", vec![1, 2], vec![1.0, 2.0]),
            ("w", vec![2, 2], vec![1.0, 0.0, 0.5, -1.0]),
            ("b", vec![2], vec![0.25, 0.0]),
        ]);
        let mut t = Tape::new(&p);
        let (x, w, b) = (
            t.param(ParamId(0)),
            t.param(ParamId(1)),
            t.param(ParamId(2)),
        );
        let y = t.linear(x, w, Some(b)).unwrap();
        assert_eq!(t.value(y).data(), &[2.25, -2.0]);
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap(), &[1.0, -0.5]);
        assert_eq!(g.get(ParamId(1)).unwrap(), &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(g.get(ParamId(2)).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn param_nodes_are_shared() {
        let p = store(&[("a", vec![1], vec![3.0])]);
        let mut t = Tape::new(&p);
        let a1 = t.param(ParamId(0));
        let a2 = t.param(ParamId(0));
        assert_eq!(a1, a2);
        let s = t.add(a1, a2).unwrap();
        assert_eq!(t.backward(s).unwrap().get(ParamId(0)).unwrap(), &[2.0]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let p = store(&[("l", vec![2, 4], vec![0.0; 8])]);
        let mut t = Tape::new(&p);
        let l = t.param(ParamId(0));
        let ce = t.cross_entropy_sum(l, &[1, 3]).unwrap();
        assert!((t.value(ce).data()[0] - 2.0 * 4f64.ln()).abs() < 1e-12);
        let g = t.backward(ce).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap()[1], 0.25 - 1.0);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let p = store(&[("a", vec![2], vec![1.0, 2.0])]);
        let mut t = Tape::new(&p);
        let a = t.param(ParamId(0));
        assert!(t.backward(a).is_err());
    }

    #[test]
    fn gelu_matches_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_191_990_607_477).abs() < 1e-12);
        let h = 1e-6;
        for x in [-2.0, -0.3, 0.0, 0.7, 3.0] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
