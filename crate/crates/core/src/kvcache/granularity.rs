//! Token, frame and chunk level selection.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, Result};
use crate::numerics::{stable_topk, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryGranularity {
    #[default]
    Token,
    /// One mean-pooled query per frame.
    Frame,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyGranularity {
    #[default]
    Token,
    Frame,
    Chunk,
}

/// Scores averaged over contiguous token groups.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedScores {
    pub scores: Vec<f64>,
    pub group_size: usize,
}

impl GroupedScores {
    /// Member token positions of `groups`, ascending when `groups` is.
    pub fn expand(&self, groups: &[usize]) -> Vec<usize> {
        groups
            .iter()
            .flat_map(|g| g * self.group_size..(g + 1) * self.group_size)
            .collect()
    }

    /// Whole groups that fit in `budget_tokens`.
    pub fn group_budget(&self, budget_tokens: usize) -> usize {
        budget_tokens / self.group_size
    }
}

pub fn group_size(granularity: KeyGranularity, frame_size: usize, chunk_size: usize) -> usize {
    match granularity {
        KeyGranularity::Token => 1,
        KeyGranularity::Frame => frame_size,
        KeyGranularity::Chunk => chunk_size,
    }
}

pub fn granularity_aggregate(
    scores: &[f64],
    granularity: KeyGranularity,
    frame_size: usize,
    chunk_size: usize,
) -> Result<GroupedScores> {
    let size = group_size(granularity, frame_size, chunk_size);
    if size == 0 || !scores.len().is_multiple_of(size) {
        return Err(invalid_config(format!(
            "{} tokens do not split into {granularity:?} groups of {size}",
            scores.len()
        )));
    }
    Ok(GroupedScores {
        scores: scores
            .chunks(size)
            .map(|g| g.iter().sum::<f64>() / size as f64)
            .collect(),
        group_size: size,
    })
}

/// Token positions kept under `budget_tokens`, ascending.
pub fn select_tokens(
    scores: &[f64],
    budget_tokens: usize,
    granularity: KeyGranularity,
    frame_size: usize,
    chunk_size: usize,
) -> Result<Vec<usize>> {
    if budget_tokens >= scores.len() {
        return Ok((0..scores.len()).collect());
    }
    if granularity == KeyGranularity::Token {
        return stable_topk(scores, budget_tokens);
    }
    let grouped = granularity_aggregate(scores, granularity, frame_size, chunk_size)?;
    let groups = stable_topk(&grouped.scores, grouped.group_budget(budget_tokens))?;
    Ok(grouped.expand(&groups))
}

/// Mean-pools `(tokens, heads, d)` queries over consecutive `frame_size` rows.
pub fn pool_queries_by_frame(queries: &Tensor, frame_size: usize) -> Result<Tensor> {
    let shape = queries.shape();
    if shape.len() != 3 || frame_size == 0 || !shape[0].is_multiple_of(frame_size) {
        return Err(invalid_config(format!(
            "queries {shape:?} do not split into frames of {frame_size} tokens"
        )));
    }
    let row = shape[1] * shape[2];
    let frames = shape[0] / frame_size;
    let mut out = vec![0.0; frames * row];
    for (t, src) in queries.data().chunks(row).enumerate() {
        let dst = &mut out[(t / frame_size) * row..(t / frame_size + 1) * row];
        for (o, v) in dst.iter_mut().zip(src) {
            *o += v / frame_size as f64;
        }
    }
    Tensor::new(vec![frames, shape[1], shape[2]], out)
}
