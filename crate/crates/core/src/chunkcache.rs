//! Per-chunk velocity reuse.
//!
//! Each chunk keeps its own accumulator `f`. On every local step past the
//! warmup the chunk estimates the relative change `L1_rel` it would see,
//! adds it to `f`, and reuses its cached velocity while the running total
//! stays at or below `epsilon`. Crossing the threshold forces a fresh model
//! call and resets `f` to zero.
//!
//! The estimate is the cached velocity measured against the current latent,
//! `||v_cached||_1 * dt / ||x_t||_1`, so it needs no model call.

use serde::{Deserialize, Serialize};

use crate::armodel::ChunkState;
use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::numerics::Tensor;
use crate::schedule::euler_step;

/// `||v||_1 * dt / ||x||_1`.
pub fn relative_l1(velocity: &Tensor, dt: f64, latent: &Tensor) -> Result<f64> {
    velocity.check_same_shape(latent)?;
    if !(dt.is_finite() && dt > 0.0) {
        return Err(invalid_input(format!("dt must be positive, got {dt}")));
    }
    let denom = latent.l1_norm()?;
    if denom == 0.0 {
        return Err(Error::DegenerateInput("latent has zero L1 norm".into()));
    }
    Ok(velocity.l1_norm()? * dt / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PolicyConfig {
    /// Every chunk computes every step.
    Disabled,
    FlowCache {
        /// Accumulated-change threshold; `"inf"` reuses after warmup until the cache is stale forever.
        #[serde(with = "crate::serde_ext::extended_f64")]
        epsilon: f64,
        /// Local steps that always compute.
        warmup: usize,
    },
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig::FlowCache {
            epsilon: 0.01,
            warmup: 5,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if let PolicyConfig::FlowCache { epsilon, .. } = self {
            if epsilon.is_nan() || *epsilon < 0.0 {
                return Err(invalid_config(format!(
                    "policy.epsilon must be nonnegative, got {epsilon}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Compute,
    Reuse,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDecision {
    pub action: Action,
    /// Estimated `L1_rel` fed to the rule; `+inf` when no cache exists.
    pub estimate: f64,
    /// Accumulator value after the decision.
    pub accumulator: f64,
}

/// Outcome of applying a decision to a chunk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AppliedStep {
    pub action: Action,
    /// Measured `L1_rel` on compute, the estimate on reuse.
    pub metric: f64,
}

#[derive(Debug, Clone, Default)]
struct Slot {
    accumulator: f64,
    cached_velocity: Option<Tensor>,
    cached_l1rel: Option<f64>,
}

/// Independent reuse state for every chunk of a run.
#[derive(Debug, Clone)]
pub struct ReuseAccumulator {
    epsilon: f64,
    warmup: usize,
    slots: Vec<Slot>,
}

impl ReuseAccumulator {
    pub fn new(epsilon: f64, warmup: usize, chunks: usize) -> Result<Self> {
        PolicyConfig::FlowCache { epsilon, warmup }.validate()?;
        Ok(Self {
            epsilon,
            warmup,
            slots: vec![Slot::default(); chunks],
        })
    }

    /// Accumulator for a run configured with `policy`; `Disabled` never reuses.
    pub fn for_policy(policy: &PolicyConfig, chunks: usize) -> Result<Self> {
        match *policy {
            PolicyConfig::Disabled => Self::new(0.0, usize::MAX, chunks),
            PolicyConfig::FlowCache { epsilon, warmup } => Self::new(epsilon, warmup, chunks),
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn warmup(&self) -> usize {
        self.warmup
    }

    pub fn accumulator(&self, chunk: usize) -> Result<f64> {
        Ok(self.slot(chunk)?.accumulator)
    }

    pub fn cached_velocity(&self, chunk: usize) -> Result<Option<&Tensor>> {
        Ok(self.slot(chunk)?.cached_velocity.as_ref())
    }

    /// `L1_rel` of the last computed velocity, as measured when it was computed.
    pub fn cached_l1rel(&self, chunk: usize) -> Result<Option<f64>> {
        Ok(self.slot(chunk)?.cached_l1rel)
    }

    /// Estimated `L1_rel` for the chunk's next step, `+inf` without a cache.
    pub fn estimate_metric(&self, chunk: &ChunkState, dt: f64) -> Result<f64> {
        match &self.slot(chunk.index)?.cached_velocity {
            Some(v) => relative_l1(v, dt, &chunk.latent),
            None => Ok(f64::INFINITY),
        }
    }

    pub fn decide(&mut self, chunk: &ChunkState, estimate: f64) -> Result<StepDecision> {
        if estimate.is_nan() || estimate < 0.0 {
            return Err(invalid_input(format!("estimate must be nonnegative, got {estimate}")));
        }
        let (epsilon, warmup) = (self.epsilon, self.warmup);
        let slot = self.slot_mut(chunk.index)?;
        let action = if chunk.local_step < warmup
            || slot.cached_velocity.is_none()
            || !estimate.is_finite()
        {
            Action::Compute
        } else {
            let total = slot.accumulator + estimate;
            if total > epsilon || total <= 0.0 {
                Action::Compute
            } else {
                slot.accumulator = total;
                Action::Reuse
            }
        };
        if action == Action::Compute {
            slot.accumulator = 0.0;
        }
        Ok(StepDecision {
            action,
            estimate,
            accumulator: slot.accumulator,
        })
    }

    /// Advances `chunk.latent` by one Euler step of size `dt`, calling `model`
    /// only when the decision is `Compute`.
    pub fn apply<F>(
        &mut self,
        decision: &StepDecision,
        chunk: &mut ChunkState,
        dt: f64,
        model: F,
    ) -> Result<AppliedStep>
    where
        F: FnOnce(&ChunkState) -> Result<Tensor>,
    {
        match decision.action {
            Action::Compute => {
                let (velocity, metric) = compute_step(chunk, dt, model)?;
                let slot = self.slot_mut(chunk.index)?;
                slot.cached_velocity = Some(velocity);
                slot.cached_l1rel = Some(metric);
                Ok(AppliedStep {
                    action: Action::Compute,
                    metric,
                })
            }
            Action::Reuse => {
                let slot = self.slot(chunk.index)?;
                let velocity = slot.cached_velocity.as_ref().ok_or_else(|| {
                    Error::Internal(format!("chunk {} reused without a cache", chunk.index))
                })?;
                chunk.latent = euler_step(&chunk.latent, velocity, dt)?;
                Ok(AppliedStep {
                    action: Action::Reuse,
                    metric: decision.estimate,
                })
            }
        }
    }

    fn slot(&self, chunk: usize) -> Result<&Slot> {
        chunk
            .checked_sub(1)
            .and_then(|i| self.slots.get(i))
            .ok_or_else(|| invalid_input(format!("no reuse slot for chunk {chunk}")))
    }

    fn slot_mut(&mut self, chunk: usize) -> Result<&mut Slot> {
        chunk
            .checked_sub(1)
            .and_then(|i| self.slots.get_mut(i))
            .ok_or_else(|| invalid_input(format!("no reuse slot for chunk {chunk}")))
    }
}

/// Fresh model call plus Euler update; returns the velocity and its `L1_rel`
/// against the pre-step latent.
pub(crate) fn compute_step<F>(chunk: &mut ChunkState, dt: f64, model: F) -> Result<(Tensor, f64)>
where
    F: FnOnce(&ChunkState) -> Result<Tensor>,
{
    let velocity = model(chunk)?;
    let metric = relative_l1(&velocity, dt, &chunk.latent)?;
    chunk.latent = euler_step(&chunk.latent, &velocity, dt)?;
    Ok((velocity, metric))
}
