//! Per-head token scoring: attention importance, max-pooled importance,
//! key redundancy and the combined selection score.
//!
//! Key and query tensors are laid out `(tokens, heads, head_dim)`. Every
//! scoring function returns one vector per key head.

use crate::error::{invalid_input, Error, Result};
use crate::numerics::{dot, maxpool1d, softmax_in_place, Tensor};

/// Per-head score vectors, one entry per key head.
pub type HeadScores = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionScores {
    pub importance: HeadScores,
    pub pooled_importance: HeadScores,
    pub redundancy: HeadScores,
    pub combined: HeadScores,
}

impl SelectionScores {
    pub fn compute(
        queries: &Tensor,
        keys: &Tensor,
        lambda: f64,
        pool_kernel: usize,
        query_window: usize,
    ) -> Result<Self> {
        let importance = importance(queries, keys, query_window)?;
        let pooled_importance = pooled_importance(&importance, pool_kernel)?;
        let redundancy = redundancy_fast(keys)?;
        let combined = combined_score(&pooled_importance, &redundancy, lambda)?;
        Ok(Self {
            importance,
            pooled_importance,
            redundancy,
            combined,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct Dims {
    tokens: usize,
    heads: usize,
    dim: usize,
}

fn dims(t: &Tensor, what: &str) -> Result<Dims> {
    match *t.shape() {
        [tokens, heads, dim] => Ok(Dims { tokens, heads, dim }),
        ref other => Err(invalid_input(format!(
            "{what} must be (tokens, heads, head_dim), got shape {other:?}"
        ))),
    }
}

/// Row `token` of head `head`.
fn row(t: &Tensor, d: Dims, token: usize, head: usize) -> &[f64] {
    let at = (token * d.heads + head) * d.dim;
    &t.data()[at..at + d.dim]
}

/// Attention mass each key receives, averaged over the trailing
/// `query_window` query rows and over the contiguous block of query heads
/// grouped onto each key head.
pub fn importance(queries: &Tensor, keys: &Tensor, query_window: usize) -> Result<HeadScores> {
    let qd = dims(queries, "queries")?;
    let kd = dims(keys, "keys")?;
    if qd.dim != kd.dim {
        return Err(invalid_input(format!(
            "query head_dim {} != key head_dim {}",
            qd.dim, kd.dim
        )));
    }
    if qd.heads % kd.heads != 0 {
        return Err(invalid_input(format!(
            "{} query heads cannot be grouped onto {} key heads",
            qd.heads, kd.heads
        )));
    }
    if query_window == 0 {
        return Err(invalid_input("query_window must be at least 1"));
    }
    let group = qd.heads / kd.heads;
    let first_row = qd.tokens.saturating_sub(query_window);
    let rows = (qd.tokens - first_row) * group;
    let scale = 1.0 / (kd.dim as f64).sqrt();
    let mut out = Vec::with_capacity(kd.heads);
    let mut logits = vec![0.0; kd.tokens];
    for h in 0..kd.heads {
        let mut acc = vec![0.0; kd.tokens];
        for g in h * group..(h + 1) * group {
            for r in first_row..qd.tokens {
                let q = row(queries, qd, r, g);
                for (j, l) in logits.iter_mut().enumerate() {
                    *l = dot(q, row(keys, kd, j, h)) * scale;
                }
                softmax_in_place(&mut logits);
                for (a, p) in acc.iter_mut().zip(&logits) {
                    *a += p;
                }
            }
        }
        for a in acc.iter_mut() {
            *a /= rows as f64;
        }
        out.push(acc);
    }
    Ok(out)
}

/// Max-pools each head's importance along the token axis.
pub fn pooled_importance(importance: &[Vec<f64>], kernel: usize) -> Result<HeadScores> {
    importance.iter().map(|h| maxpool1d(h, kernel)).collect()
}

fn check_redundancy_input(keys: &Tensor) -> Result<Dims> {
    let d = dims(keys, "keys")?;
    if d.tokens < 2 {
        return Err(invalid_input(format!(
            "redundancy needs at least 2 keys, got {}",
            d.tokens
        )));
    }
    Ok(d)
}

fn key_norm(k: &[f64], token: usize, head: usize) -> Result<f64> {
    let n = dot(k, k).sqrt();
    if n == 0.0 {
        return Err(Error::DegenerateInput(format!(
            "key {token} of head {head} has zero norm"
        )));
    }
    Ok(n)
}

/// Reference redundancy: explicit cosine-similarity matrix with a zeroed
/// diagonal, column means over `i`, softmax over `j`.
pub fn redundancy_naive(keys: &Tensor) -> Result<HeadScores> {
    let d = check_redundancy_input(keys)?;
    let l = d.tokens;
    let mut out = Vec::with_capacity(d.heads);
    for h in 0..d.heads {
        let mut normed = Vec::with_capacity(l * d.dim);
        for j in 0..l {
            let k = row(keys, d, j, h);
            let n = key_norm(k, j, h)?;
            normed.extend(k.iter().map(|v| v / n));
        }
        let unit = |i: usize| &normed[i * d.dim..(i + 1) * d.dim];
        let mut sim = vec![0.0; l * l];
        for i in 0..l {
            for j in i + 1..l {
                let s = dot(unit(i), unit(j));
                sim[i * l + j] = s;
                sim[j * l + i] = s;
            }
        }
        let mut means: Vec<f64> = (0..l)
            .map(|j| (0..l).map(|i| sim[i * l + j]).sum::<f64>() / l as f64)
            .collect();
        softmax_in_place(&mut means);
        out.push(means);
    }
    Ok(out)
}

/// Redundancy without the `L x L` similarity matrix.
///
/// The column mean of the zero-diagonal cosine matrix is
/// `(sum_i k_i / |k_i|) . k_j / |k_j| / L - 1 / L`, so one pass builds the
/// summed unit key and a second pass scores each token.
pub fn redundancy_fast(keys: &Tensor) -> Result<HeadScores> {
    let d = check_redundancy_input(keys)?;
    let l = d.tokens;
    let inv_l = 1.0 / l as f64;
    let mut out = Vec::with_capacity(d.heads);
    let mut total = vec![0.0; d.dim];
    for h in 0..d.heads {
        let mut norms = Vec::with_capacity(l);
        total.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..l {
            let k = row(keys, d, j, h);
            let n = key_norm(k, j, h)?;
            for (t, v) in total.iter_mut().zip(k) {
                *t += v / n;
            }
            norms.push(n);
        }
        // reuse the norm buffer for the scores
        for (j, slot) in norms.iter_mut().enumerate() {
            let k = row(keys, d, j, h);
            *slot = dot(&total, k) / *slot * inv_l - inv_l;
        }
        softmax_in_place(&mut norms);
        out.push(norms);
    }
    Ok(out)
}

/// `lambda * pooled_importance - (1 - lambda) * redundancy`, per head.
pub fn combined_score(pooled: &[Vec<f64>], redundancy: &[Vec<f64>], lambda: f64) -> Result<HeadScores> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(invalid_input(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    if pooled.len() != redundancy.len() {
        return Err(invalid_input(format!(
            "{} importance heads vs {} redundancy heads",
            pooled.len(),
            redundancy.len()
        )));
    }
    pooled
        .iter()
        .zip(redundancy)
        .map(|(p, r)| {
            if p.len() != r.len() {
                return Err(invalid_input(format!(
                    "head length mismatch: {} vs {}",
                    p.len(),
                    r.len()
                )));
            }
            Ok(p.iter()
                .zip(r)
                .map(|(a, b)| lambda * a - (1.0 - lambda) * b)
                .collect())
        })
        .collect()
}
