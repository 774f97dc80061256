//! Reference runs and comparisons shared by `run` and `sweep`.

use flowcache_core::armodel::ChunkState;
use flowcache_core::chunkcache::PolicyConfig;
use flowcache_core::metrics::{speedup, RunTrace};
use flowcache_core::{run_denoise_with_latents, RunOutcome, RunSetup};

use crate::error::Result;

/// Same setup with a zero threshold: every step computes, KV settings kept.
pub fn zero_epsilon(setup: &RunSetup) -> RunSetup {
    let warmup = match setup.policy {
        PolicyConfig::FlowCache { warmup, .. } => warmup,
        PolicyConfig::Disabled => 0,
    };
    RunSetup {
        policy: PolicyConfig::FlowCache { epsilon: 0.0, warmup },
        ..*setup
    }
}

/// No reuse and no KV budget.
pub fn vanilla(setup: &RunSetup) -> RunSetup {
    let mut s = *setup;
    s.policy = PolicyConfig::Disabled;
    s.kv.budget_chunks = None;
    s
}

/// Largest per-chunk `||a - b||_1 / ||b||_1` over final latents.
pub fn max_relative_l1(run: &[ChunkState], reference: &[ChunkState]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (a, b) in run.iter().zip(reference) {
        let err = a.latent.sub(&b.latent)?.l1_norm()? / b.latent.l1_norm()?;
        worst = worst.max(err);
    }
    Ok(worst)
}

pub fn mean_attention_error(trace: &RunTrace) -> f64 {
    let events: Vec<f64> = trace
        .compressions
        .iter()
        .filter(|e| e.report.compressed)
        .map(|e| e.report.mean_attention_error())
        .collect();
    if events.is_empty() {
        0.0
    } else {
        events.iter().sum::<f64>() / events.len() as f64
    }
}

/// A run together with its zero-threshold and vanilla references.
pub struct Comparison {
    pub run: RunOutcome,
    pub final_error: f64,
    pub speedup: f64,
    pub speedup_vs_vanilla: f64,
}

pub fn compare(setup: &RunSetup) -> Result<Comparison> {
    let run = run_denoise_with_latents(setup)?;
    let reference = if zero_epsilon(setup) == *setup {
        run.clone()
    } else {
        run_denoise_with_latents(&zero_epsilon(setup))?
    };
    let plain = run_denoise_with_latents(&vanilla(setup))?;
    Ok(Comparison {
        final_error: max_relative_l1(&run.chunks, &reference.chunks)?,
        speedup: speedup(&run.trace, &reference.trace)?,
        speedup_vs_vanilla: speedup(&run.trace, &plain.trace)?,
        run,
    })
}
