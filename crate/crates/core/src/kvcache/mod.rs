//! Two-region KV buffer with budgeted compression of clean-chunk tokens.
//!
//! The buffer holds `B_total = B_budget + B_active` tokens per key head. The
//! active region reserves slots for chunks that are still denoising; their
//! keys are recomputed every step and are never stored here. When a chunk
//! turns clean its keys and values move into the clean region. Until that
//! region would overflow `B_budget` tokens are simply appended; from the
//! first overflow on, every arrival triggers a per-head top-`B` selection
//! over the clean region plus the new tokens.

mod granularity;
mod scores;
mod tokens;

use serde::{Deserialize, Serialize};

use crate::armodel::{LatentShape, SceneConfig};
use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::numerics::{dot, softmax_in_place, Tensor};

pub use granularity::{
    granularity_aggregate, group_size, pool_queries_by_frame, select_tokens, GroupedScores,
    KeyGranularity, QueryGranularity,
};
pub use scores::{
    combined_score, importance, pooled_importance, redundancy_fast, redundancy_naive, HeadScores,
    SelectionScores,
};
pub use tokens::TokenProjector;

pub const DEFAULT_LAMBDA: f64 = 0.07;
pub const DEFAULT_POOL_KERNEL: usize = 5;
pub const DEFAULT_QUERY_WINDOW: usize = 50;

/// KV settings of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KvConfig {
    pub key_heads: usize,
    pub query_heads: usize,
    pub head_dim: usize,
    /// Clean-region capacity in chunks; `None` keeps every clean token.
    pub budget_chunks: Option<usize>,
    pub lambda: f64,
    pub pool_kernel: usize,
    pub query_window: usize,
    pub query_granularity: QueryGranularity,
    pub key_granularity: KeyGranularity,
}

impl Default for KvConfig {
    fn default() -> Self {
        Self {
            key_heads: 2,
            query_heads: 4,
            head_dim: 16,
            budget_chunks: None,
            lambda: DEFAULT_LAMBDA,
            pool_kernel: DEFAULT_POOL_KERNEL,
            query_window: DEFAULT_QUERY_WINDOW,
            query_granularity: QueryGranularity::Token,
            key_granularity: KeyGranularity::Token,
        }
    }
}

impl KvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.key_heads == 0 || self.head_dim == 0 {
            return Err(invalid_config("kv.key_heads and kv.head_dim must be positive"));
        }
        if self.query_heads == 0 || !self.query_heads.is_multiple_of(self.key_heads) {
            return Err(invalid_config(format!(
                "kv.query_heads ({}) must be a positive multiple of kv.key_heads ({})",
                self.query_heads, self.key_heads
            )));
        }
        if self.budget_chunks == Some(0) {
            return Err(invalid_config("kv.budget_chunks must be at least 1"));
        }
        self.compression_params(1).validate()
    }

    /// Buffer layout for `scene`.
    pub fn layout(&self, scene: &SceneConfig) -> KvLayout {
        KvLayout {
            key_heads: self.key_heads,
            head_dim: self.head_dim,
            frame_tokens: scene.shape.frame_tokens(),
            chunk_tokens: scene.shape.tokens(),
        }
    }

    pub fn budget_tokens(&self, shape: LatentShape) -> Option<usize> {
        self.budget_chunks.map(|b| b * shape.tokens())
    }

    /// Compression settings, or `None` when the budget is unbounded.
    pub fn compression(&self, shape: LatentShape) -> Option<CompressionConfig> {
        self.budget_tokens(shape)
            .map(|b| self.compression_params(b))
    }

    fn compression_params(&self, budget_tokens: usize) -> CompressionConfig {
        CompressionConfig {
            lambda: self.lambda,
            pool_kernel: self.pool_kernel,
            query_window: self.query_window,
            query_granularity: self.query_granularity,
            key_granularity: self.key_granularity,
            budget_tokens,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressionConfig {
    pub lambda: f64,
    pub pool_kernel: usize,
    pub query_window: usize,
    pub query_granularity: QueryGranularity,
    pub key_granularity: KeyGranularity,
    /// Tokens kept per head.
    pub budget_tokens: usize,
}

impl CompressionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(invalid_config(format!("kv.lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if self.pool_kernel == 0 || self.pool_kernel.is_multiple_of(2) {
            return Err(invalid_config(format!(
                "kv.pool_kernel must be odd and positive, got {}",
                self.pool_kernel
            )));
        }
        if self.query_window == 0 {
            return Err(invalid_config("kv.query_window must be at least 1"));
        }
        if self.budget_tokens == 0 {
            return Err(invalid_config("compression budget must be at least 1 token"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KvLayout {
    pub key_heads: usize,
    pub head_dim: usize,
    pub frame_tokens: usize,
    pub chunk_tokens: usize,
}

/// Keys and values of one clean chunk, `(tokens, key_heads, head_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvBlock {
    pub chunk: usize,
    pub ids: Vec<usize>,
    pub keys: Tensor,
    pub values: Tensor,
}

impl KvBlock {
    /// Block for chunk `index` with ids numbered globally across chunks.
    pub fn for_chunk(index: usize, keys: Tensor, values: Tensor) -> Result<Self> {
        keys.check_same_shape(&values)?;
        let tokens = keys.shape()[0];
        let start = (index - 1) * tokens;
        Ok(Self {
            chunk: index,
            ids: (start..start + tokens).collect(),
            keys,
            values,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct HeadStore {
    ids: Vec<usize>,
    keys: Vec<f64>,
    values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub retained_ids: Vec<usize>,
    pub evicted_count: usize,
    pub score_min: f64,
    pub score_max: f64,
    pub score_mean: f64,
    /// Mean relative L1 change of the windowed attention output after eviction.
    pub attention_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    /// `false` when everything fit and nothing was scored.
    pub compressed: bool,
    pub available_tokens: usize,
    pub budget_tokens: usize,
    pub heads: Vec<HeadReport>,
}

impl CompressionReport {
    pub fn evicted_tokens(&self) -> usize {
        self.heads.iter().map(|h| h.evicted_count).sum()
    }

    pub fn mean_attention_error(&self) -> f64 {
        if self.heads.is_empty() {
            return 0.0;
        }
        self.heads.iter().map(|h| h.attention_error).sum::<f64>() / self.heads.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvBuffer {
    layout: KvLayout,
    budget_tokens: Option<usize>,
    active_capacity: usize,
    heads: Vec<HeadStore>,
    active: Vec<(usize, usize)>,
    compressing: bool,
}

impl KvBuffer {
    pub fn new(layout: KvLayout, budget_tokens: Option<usize>, active_capacity: usize) -> Result<Self> {
        if layout.key_heads == 0 || layout.head_dim == 0 {
            return Err(invalid_input("buffer needs at least one head of positive width"));
        }
        Ok(Self {
            layout,
            budget_tokens,
            active_capacity,
            heads: vec![HeadStore::default(); layout.key_heads],
            active: Vec::new(),
            compressing: false,
        })
    }

    pub fn layout(&self) -> KvLayout {
        self.layout
    }

    pub fn budget_capacity(&self) -> Option<usize> {
        self.budget_tokens
    }

    pub fn active_capacity(&self) -> usize {
        self.active_capacity
    }

    /// `B_budget + B_active`, unbounded without a budget.
    pub fn total_capacity(&self) -> Option<usize> {
        self.budget_tokens.map(|b| b + self.active_capacity)
    }

    pub fn clean_len(&self, head: usize) -> usize {
        self.heads[head].ids.len()
    }

    pub fn clean_ids(&self, head: usize) -> &[usize] {
        &self.heads[head].ids
    }

    pub fn active_len(&self) -> usize {
        self.active.iter().map(|(_, n)| n).sum()
    }

    /// Clean plus active tokens for every head.
    pub fn resident_tokens(&self) -> Vec<usize> {
        let active = self.active_len();
        self.heads.iter().map(|h| h.ids.len() + active).collect()
    }

    pub fn is_compressing(&self) -> bool {
        self.compressing
    }

    /// Reserves active-region slots for a chunk entering the window.
    pub fn reserve_active(&mut self, chunk: usize, tokens: usize) -> Result<()> {
        if self.active.iter().any(|(c, _)| *c == chunk) {
            return Err(invalid_input(format!("chunk {chunk} already holds active slots")));
        }
        if self.active_len() + tokens > self.active_capacity {
            return Err(invalid_input(format!(
                "active region full: {} + {tokens} > {}",
                self.active_len(),
                self.active_capacity
            )));
        }
        self.active.push((chunk, tokens));
        Ok(())
    }

    /// Moves newly clean chunks into the clean region, appending while the
    /// budget allows and compressing from the first overflow on.
    pub fn admit_clean(
        &mut self,
        blocks: Vec<KvBlock>,
        queries: &Tensor,
        config: Option<&CompressionConfig>,
    ) -> Result<Option<CompressionReport>> {
        let incoming: usize = blocks.iter().map(|b| b.ids.len()).sum();
        let fits = |budget: usize| {
            self.heads.iter().all(|h| h.ids.len() + incoming <= budget)
        };
        match (config, self.budget_tokens) {
            (Some(cfg), Some(budget)) if self.compressing || !fits(budget) => {
                self.compressing = true;
                self.compress(blocks, queries, cfg).map(Some)
            }
            (Some(_), None) => Err(invalid_input("compression requested on an unbounded buffer")),
            _ => {
                self.release(&blocks)?;
                for block in &blocks {
                    self.append(block)?;
                }
                Ok(None)
            }
        }
    }

    /// Merges `newly_clean` into the clean region and keeps, per head, the
    /// `budget_tokens` best tokens by combined score.
    pub fn compress(
        &mut self,
        newly_clean: Vec<KvBlock>,
        queries: &Tensor,
        config: &CompressionConfig,
    ) -> Result<CompressionReport> {
        config.validate()?;
        if let Some(b) = self.budget_tokens {
            if config.budget_tokens > b {
                return Err(invalid_config(format!(
                    "compression budget {} exceeds clean capacity {b}",
                    config.budget_tokens
                )));
            }
        }
        self.release(&newly_clean)?;
        for block in &newly_clean {
            self.append(block)?;
        }
        let available = self.heads[0].ids.len();
        if available <= config.budget_tokens {
            return Ok(CompressionReport {
                compressed: false,
                available_tokens: available,
                budget_tokens: config.budget_tokens,
                heads: self
                    .heads
                    .iter()
                    .map(|h| HeadReport {
                        retained_ids: h.ids.clone(),
                        evicted_count: 0,
                        score_min: 0.0,
                        score_max: 0.0,
                        score_mean: 0.0,
                        attention_error: 0.0,
                    })
                    .collect(),
            });
        }

        let (hk, d) = (self.layout.key_heads, self.layout.head_dim);
        let mut keys = vec![0.0; available * hk * d];
        for (h, store) in self.heads.iter().enumerate() {
            for j in 0..available {
                keys[(j * hk + h) * d..(j * hk + h + 1) * d]
                    .copy_from_slice(&store.keys[j * d..(j + 1) * d]);
            }
        }
        let keys = Tensor::new(vec![available, hk, d], keys)?;
        let queries = match config.query_granularity {
            QueryGranularity::Token => queries.clone(),
            QueryGranularity::Frame => pool_queries_by_frame(queries, self.layout.frame_tokens)?,
        };
        let scores = SelectionScores::compute(
            &queries,
            &keys,
            config.lambda,
            config.pool_kernel,
            config.query_window,
        )?;

        let mut reports = Vec::with_capacity(hk);
        for (h, score) in scores.combined.iter().enumerate() {
            let keep = select_tokens(
                score,
                config.budget_tokens,
                config.key_granularity,
                self.layout.frame_tokens,
                self.layout.chunk_tokens,
            )?;
            let attention_error = attention_error(&queries, &keys, &self.heads[h], h, &keep, config.query_window);
            let store = &mut self.heads[h];
            let mut next = HeadStore::default();
            for &j in &keep {
                next.ids.push(store.ids[j]);
                next.keys.extend_from_slice(&store.keys[j * d..(j + 1) * d]);
                next.values.extend_from_slice(&store.values[j * d..(j + 1) * d]);
            }
            *store = next;
            let (min, max, sum) = score.iter().fold((f64::INFINITY, f64::NEG_INFINITY, 0.0), |a, s| {
                (a.0.min(*s), a.1.max(*s), a.2 + s)
            });
            reports.push(HeadReport {
                retained_ids: store.ids.clone(),
                evicted_count: available - keep.len(),
                score_min: min,
                score_max: max,
                score_mean: sum / available as f64,
                attention_error,
            });
        }
        Ok(CompressionReport {
            compressed: true,
            available_tokens: available,
            budget_tokens: config.budget_tokens,
            heads: reports,
        })
    }

    fn release(&mut self, blocks: &[KvBlock]) -> Result<()> {
        for block in blocks {
            let pos = self
                .active
                .iter()
                .position(|(c, _)| *c == block.chunk)
                .ok_or_else(|| Error::Internal(format!("chunk {} has no active slots", block.chunk)))?;
            self.active.remove(pos);
        }
        Ok(())
    }

    fn append(&mut self, block: &KvBlock) -> Result<()> {
        let (hk, d) = (self.layout.key_heads, self.layout.head_dim);
        let tokens = block.ids.len();
        if block.keys.shape() != [tokens, hk, d] || block.values.shape() != [tokens, hk, d] {
            return Err(invalid_input(format!(
                "block of chunk {} has shape {:?}, expected {:?}",
                block.chunk,
                block.keys.shape(),
                [tokens, hk, d]
            )));
        }
        for (h, store) in self.heads.iter_mut().enumerate() {
            if let Some(last) = store.ids.last() {
                if block.ids.first().is_some_and(|f| f <= last) {
                    return Err(Error::Internal(format!(
                        "token ids of chunk {} are not newer than the clean region",
                        block.chunk
                    )));
                }
            }
            store.ids.extend_from_slice(&block.ids);
            for j in 0..tokens {
                let at = (j * hk + h) * d;
                store.keys.extend_from_slice(&block.keys.data()[at..at + d]);
                store.values.extend_from_slice(&block.values.data()[at..at + d]);
            }
        }
        Ok(())
    }
}

/// Relative L1 difference between windowed attention outputs over all
/// tokens of `store` and over the `keep` subset, averaged over query rows.
fn attention_error(
    queries: &Tensor,
    keys: &Tensor,
    store: &HeadStore,
    head: usize,
    keep: &[usize],
    query_window: usize,
) -> f64 {
    let (lq, hq, d) = (queries.shape()[0], queries.shape()[1], queries.shape()[2]);
    let (lk, hk) = (keys.shape()[0], keys.shape()[1]);
    let group = hq / hk;
    let scale = 1.0 / (d as f64).sqrt();
    let key = |j: usize| &keys.data()[(j * hk + head) * d..(j * hk + head + 1) * d];
    let value = |j: usize| &store.values[j * d..(j + 1) * d];
    let attend = |q: &[f64], subset: &mut dyn Iterator<Item = usize>| -> Vec<f64> {
        let idx: Vec<usize> = subset.collect();
        let mut w: Vec<f64> = idx.iter().map(|&j| dot(q, key(j)) * scale).collect();
        softmax_in_place(&mut w);
        let mut out = vec![0.0; d];
        for (&j, p) in idx.iter().zip(&w) {
            for (o, v) in out.iter_mut().zip(value(j)) {
                *o += p * v;
            }
        }
        out
    };
    let mut total = 0.0;
    let mut rows = 0usize;
    for g in head * group..(head + 1) * group {
        for r in lq.saturating_sub(query_window)..lq {
            let q = &queries.data()[(r * hq + g) * d..(r * hq + g + 1) * d];
            let full = attend(q, &mut (0..lk));
            let kept = attend(q, &mut keep.iter().copied());
            let norm: f64 = full.iter().map(|v| v.abs()).sum();
            let diff: f64 = full.iter().zip(&kept).map(|(a, b)| (a - b).abs()).sum();
            if norm > 0.0 {
                total += diff / norm;
            }
            rows += 1;
        }
    }
    if rows == 0 {
        0.0
    } else {
        total / rows as f64
    }
}
