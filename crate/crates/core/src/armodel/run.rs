//! The global denoising loop.

use serde::{Deserialize, Serialize};

use super::{
    active_window, total_global_steps, ChunkState, ChunkStatus, CostModel, SceneConfig,
    VelocityModel,
};
use crate::chunkcache::{compute_step, Action, PolicyConfig, ReuseAccumulator};
use crate::error::{invalid_config, Result};
use crate::kvcache::{KvBlock, KvBuffer, KvConfig, TokenProjector};
use crate::metrics::{
    latent_digest, ChunkStepRecord, ChunkSummary, CompressionEvent, RunTrace, StepRecord,
};
use crate::schedule::PowerLawSchedule;

/// Everything a run depends on. Serialized verbatim into the trace.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSetup {
    pub scene: SceneConfig,
    pub schedule: PowerLawSchedule,
    pub policy: PolicyConfig,
    pub velocity: VelocityModel,
    pub kv: KvConfig,
    pub cost: CostModel,
}

impl RunSetup {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.schedule.validate()?;
        self.policy.validate()?;
        if !(self.velocity.noise_scale.is_finite() && self.velocity.noise_scale >= 0.0) {
            return Err(invalid_config(format!(
                "velocity.noise_scale must be nonnegative, got {}",
                self.velocity.noise_scale
            )));
        }
        self.kv.validate()?;
        self.cost.validate()?;
        total_global_steps(&self.schedule, &self.scene)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trace: RunTrace,
    /// Final state of every chunk, in index order.
    pub chunks: Vec<ChunkState>,
}

pub fn run_denoise(setup: &RunSetup) -> Result<RunTrace> {
    Ok(run_denoise_with_latents(setup)?.trace)
}

/// Drives every chunk from noise to clean under the sliding window.
///
/// Per global step: chunks whose window opens become active and reserve KV
/// slots; each active chunk in index order decides, updates its latent and
/// advances; chunks that just finished hand their keys and values to the
/// buffer, which appends or compresses.
pub fn run_denoise_with_latents(setup: &RunSetup) -> Result<RunOutcome> {
    setup.validate()?;
    let RunSetup {
        scene,
        schedule,
        policy,
        velocity,
        kv,
        cost,
    } = *setup;
    let tokens = scene.shape.tokens();

    let mut chunks = (1..=scene.chunks)
        .map(|i| ChunkState::generate(&scene, i))
        .collect::<Result<Vec<_>>>()?;
    let starts = (1..=scene.chunks)
        .map(|i| active_window(i, &schedule, &scene).map(|w| w.start))
        .collect::<Result<Vec<_>>>()?;
    let mut policy_state = match policy {
        PolicyConfig::Disabled => None,
        PolicyConfig::FlowCache { .. } => Some(ReuseAccumulator::for_policy(&policy, scene.chunks)?),
    };
    let projector = TokenProjector::new(scene.seed, scene.shape, kv.key_heads, kv.query_heads, kv.head_dim)?;
    let mut buffer = KvBuffer::new(kv.layout(&scene), kv.budget_tokens(scene.shape), scene.window * tokens)?;
    let compression = kv.compression(scene.shape);

    let total = total_global_steps(&schedule, &scene)?;
    let mut steps = Vec::with_capacity(total);
    let mut compressions = Vec::new();

    for global_step in 0..total {
        for (chunk, start) in chunks.iter_mut().zip(&starts) {
            if *start == global_step {
                chunk.status = ChunkStatus::Active;
                buffer.reserve_active(chunk.index, tokens)?;
            }
        }
        let resident = buffer.resident_tokens();
        let attended = resident.iter().copied().max().unwrap_or(0);

        let mut records = Vec::with_capacity(scene.window);
        let mut flops = 0.0;
        let mut finished = Vec::new();
        for chunk in chunks.iter_mut().filter(|c| c.status == ChunkStatus::Active) {
            let local_step = chunk.local_step;
            let t = schedule.time_at_local_step(local_step);
            let dt = schedule.dt_at_local_step(local_step);
            let model = |c: &ChunkState| velocity.evaluate(c, &schedule, t, scene.seed);
            let (action, metric, estimate, accumulator) = match policy_state.as_mut() {
                None => {
                    let (_, metric) = compute_step(chunk, dt, model)?;
                    (Action::Compute, metric, None, 0.0)
                }
                Some(acc) => {
                    let estimate = acc.estimate_metric(chunk, dt)?;
                    let decision = acc.decide(chunk, estimate)?;
                    let applied = acc.apply(&decision, chunk, dt, model)?;
                    (applied.action, applied.metric, Some(estimate), decision.accumulator)
                }
            };
            if action == Action::Compute {
                flops += cost.forward_flops(tokens, attended);
            }
            records.push(ChunkStepRecord {
                chunk: chunk.index,
                local_step,
                t,
                action,
                metric,
                estimate,
                accumulator,
            });
            chunk.advance(schedule.steps)?;
            if chunk.status == ChunkStatus::Clean {
                finished.push(chunk.index);
            }
        }

        let mut evicted = 0;
        if !finished.is_empty() {
            let mut blocks = Vec::with_capacity(finished.len());
            for &i in &finished {
                let (k, v) = projector.keys_values(&chunks[i - 1].latent, i)?;
                blocks.push(KvBlock::for_chunk(i, k, v)?);
            }
            // queries come from the newest chunk still denoising
            let source = chunks
                .iter()
                .rev()
                .find(|c| c.status == ChunkStatus::Active)
                .unwrap_or(&chunks[finished[finished.len() - 1] - 1]);
            let queries = projector.queries(&source.latent, source.index)?;
            if let Some(report) = buffer.admit_clean(blocks, &queries, compression.as_ref())? {
                evicted = report.evicted_tokens();
                compressions.push(CompressionEvent {
                    global_step,
                    chunk: finished[finished.len() - 1],
                    report,
                });
            }
        }

        let resident_bytes = resident.iter().map(|r| *r as f64).sum::<f64>() * cost.bytes_per_kv_token;
        steps.push(StepRecord {
            global_step,
            chunks: records,
            flops,
            resident_kv_tokens: resident,
            resident_bytes,
            evicted_tokens: evicted,
        });
    }

    let summaries = chunks
        .iter()
        .map(|c| {
            let (computed, reused) = steps
                .iter()
                .flat_map(|s| &s.chunks)
                .filter(|r| r.chunk == c.index)
                .fold((0, 0), |(a, b), r| match r.action {
                    Action::Compute => (a + 1, b),
                    Action::Reuse => (a, b + 1),
                });
            Ok(ChunkSummary {
                chunk: c.index,
                computed,
                reused,
                final_error: c.latent.sub(&c.x0)?.l1_norm()? / c.x0.l1_norm()?,
                latent_digest: latent_digest(&c.latent),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(RunOutcome {
        trace: RunTrace::build(*setup, steps, summaries, compressions),
        chunks,
    })
}
