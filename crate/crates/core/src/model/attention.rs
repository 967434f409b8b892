//! Grouped-query scaled dot-product attention.
//!
//! Query head `h` reads key/value head `h / (heads / kv_heads)`. Masked keys
//! are skipped entirely rather than pushed to a large negative score, so an
//! output row never reads a value from a disallowed position.

use super::mask::AttentionMask;
use super::tensor::Tensor;
use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionShape {
    pub queries: usize,
    pub keys: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

impl AttentionShape {
    pub fn infer(
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        mask: &AttentionMask,
        heads: usize,
        kv_heads: usize,
    ) -> Result<Self, ModelError> {
        if heads == 0 || kv_heads == 0 || !heads.is_multiple_of(kv_heads) {
            return Err(ModelError::Config(format!(
                "kv_heads {kv_heads} must divide heads {heads}"
            )));
        }
        if q.shape().len() != 2 || k.shape().len() != 2 || v.shape().len() != 2 {
            return Err(ModelError::Shape("attention inputs must be 2-D".into()));
        }
        if !q.cols().is_multiple_of(heads) {
            return Err(ModelError::Shape(format!(
                "query width {} not divisible by {heads} heads",
                q.cols()
            )));
        }
        let head_dim = q.cols() / heads;
        if k.cols() != kv_heads * head_dim || v.cols() != kv_heads * head_dim {
            return Err(ModelError::Shape(format!(
                "key/value width {}/{} != {kv_heads} kv heads x {head_dim}",
                k.cols(),
                v.cols()
            )));
        }
        if k.rows() != v.rows() {
            return Err(ModelError::Shape(format!(
                "{} keys but {} values",
                k.rows(),
                v.rows()
            )));
        }
        if mask.rows() != q.rows() || mask.cols() != k.rows() {
            return Err(ModelError::Shape(format!(
                "mask {}x{} for {} queries and {} keys",
                mask.rows(),
                mask.cols(),
                q.rows(),
                k.rows()
            )));
        }
        if !mask.is_well_formed() {
            return Err(ModelError::Shape(
                "mask has a row with no attendable key".into(),
            ));
        }
        Ok(Self {
            queries: q.rows(),
            keys: k.rows(),
            heads,
            kv_heads,
            head_dim,
        })
    }

    pub fn group(&self) -> usize {
        self.heads / self.kv_heads
    }
}

/// Returns the concatenated head outputs `[queries, heads * head_dim]` and the
/// attention probabilities `[heads, queries, keys]` (zero where masked).
pub(crate) fn forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    mask: &AttentionMask,
    s: AttentionShape,
) -> (Vec<f64>, Vec<f64>) {
    let d = s.head_dim;
    let qw = s.heads * d;
    let kw = s.kv_heads * d;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; s.queries * qw];
    let mut probs = vec![0.0; s.heads * s.queries * s.keys];
    let mut scores = vec![0.0; s.keys];
    for h in 0..s.heads {
        let g = h / s.group();
        for i in 0..s.queries {
            let qi = &q[i * qw + h * d..i * qw + (h + 1) * d];
            let mut max = f64::NEG_INFINITY;
            for j in 0..s.keys {
                if mask.allows(i, j) {
                    let kj = &k[j * kw + g * d..j * kw + (g + 1) * d];
                    let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                    scores[j] = dot * scale;
                    max = max.max(scores[j]);
                }
            }
            let p = &mut probs[(h * s.queries + i) * s.keys..(h * s.queries + i + 1) * s.keys];
            let mut total = 0.0;
            for j in 0..s.keys {
                if mask.allows(i, j) {
                    p[j] = (scores[j] - max).exp();
                    total += p[j];
                }
            }
            let o = &mut out[i * qw + h * d..i * qw + (h + 1) * d];
            for j in 0..s.keys {
                if mask.allows(i, j) {
                    p[j] /= total;
                    let vj = &v[j * kw + g * d..j * kw + (g + 1) * d];
                    for (oc, vc) in o.iter_mut().zip(vj) {
                        *oc += p[j] * vc;
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Gradients `(dq, dk, dv)` given the cached probabilities and `dout`.
pub(crate) fn backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    s: AttentionShape,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = s.head_dim;
    let qw = s.heads * d;
    let kw = s.kv_heads * d;
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; s.keys];
    for h in 0..s.heads {
        let g = h / s.group();
        for i in 0..s.queries {
            let p = &probs[(h * s.queries + i) * s.keys..(h * s.queries + i + 1) * s.keys];
            let doi = &dout[i * qw + h * d..i * qw + (h + 1) * d];
            let mut weighted = 0.0;
            for j in 0..s.keys {
                if p[j] != 0.0 {
                    let vj = &v[j * kw + g * d..j * kw + (g + 1) * d];
                    dp[j] = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    weighted += p[j] * dp[j];
                    let dvj = &mut dv[j * kw + g * d..j * kw + (g + 1) * d];
                    for (dvc, doc) in dvj.iter_mut().zip(doi) {
                        *dvc += p[j] * doc;
                    }
                }
            }
            for j in 0..s.keys {
                if p[j] != 0.0 {
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    for c in 0..d {
                        dq[i * qw + h * d + c] += ds * k[j * kw + g * d + c];
                        dk[j * kw + g * d + c] += ds * q[i * qw + h * d + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

/// `softmax(Q K^T / sqrt(d_head) + mask) V` per head, heads concatenated.
///
/// `q` is `[n, heads * d_head]`; `k` and `v` are `[m, kv_heads * d_head]`;
/// `mask` is `[n, m]`. The output projection lives in the transformer block.
pub fn gqa_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &AttentionMask,
    heads: usize,
    kv_heads: usize,
) -> Result<Tensor, ModelError> {
    let s = AttentionShape::infer(q, k, v, mask, heads, kv_heads)?;
    let (out, _) = forward(q.data(), k.data(), v.data(), mask, s);
    Tensor::matrix(s.queries, s.heads * s.head_dim, out)
}

/// Attention probabilities `[heads, queries, keys]`.
pub fn attention_weights(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &AttentionMask,
    heads: usize,
    kv_heads: usize,
) -> Result<Tensor, ModelError> {
    let s = AttentionShape::infer(q, k, v, mask, heads, kv_heads)?;
    let (_, probs) = forward(q.data(), k.data(), v.data(), mask, s);
    Tensor::new(vec![s.heads, s.queries, s.keys], probs)
}
