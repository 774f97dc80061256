//! `verify`: fixed-seed property suites with measured slack per check.

use std::fmt;
use std::str::FromStr;

use flowcache_core::armodel::{LatentShape, SceneConfig};
use flowcache_core::chunkcache::{relative_l1, Action, PolicyConfig, ReuseAccumulator};
use flowcache_core::kvcache::{importance, redundancy_fast, redundancy_naive, KvConfig};
use flowcache_core::metrics::l1rel_curves;
use flowcache_core::numerics::{maxpool1d, stable_topk};
use flowcache_core::{run_denoise, PowerLawSchedule, RunSetup, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Theorem,
    Corollary,
    Kernels,
    Policy,
    Kvequiv,
}

pub const SUITES: [&str; 5] = ["theorem", "corollary", "kernels", "policy", "kvequiv"];

impl FromStr for Suite {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "theorem" => Ok(Suite::Theorem),
            "corollary" => Ok(Suite::Corollary),
            "kernels" => Ok(Suite::Kernels),
            "policy" => Ok(Suite::Policy),
            "kvequiv" => Ok(Suite::Kvequiv),
            other => Err(CliError::Usage(format!(
                "unknown suite {other:?}; expected one of {}",
                SUITES.join(", ")
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    AtMost,
    Below,
    Above,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub bound: Bound,
    pub tolerance: f64,
}

impl Check {
    pub fn at_most(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Self { name: name.into(), measured, bound: Bound::AtMost, tolerance }
    }

    pub fn below(name: impl Into<String>, measured: f64, limit: f64) -> Self {
        Self { name: name.into(), measured, bound: Bound::Below, tolerance: limit }
    }

    pub fn above(name: impl Into<String>, measured: f64, threshold: f64) -> Self {
        Self { name: name.into(), measured, bound: Bound::Above, tolerance: threshold }
    }

    pub fn passed(&self) -> bool {
        match self.bound {
            Bound::AtMost => self.measured <= self.tolerance,
            Bound::Below => self.measured < self.tolerance,
            Bound::Above => self.measured > self.tolerance,
        }
    }

    /// Distance to the bound, positive when the check holds.
    pub fn slack(&self) -> f64 {
        match self.bound {
            Bound::AtMost | Bound::Below => self.tolerance - self.measured,
            Bound::Above => self.measured - self.tolerance,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.bound {
            Bound::AtMost => "<=",
            Bound::Below => "<",
            Bound::Above => ">",
        };
        write!(
            f,
            "[{}] {}: measured {:.3e}, required {op} {:.1e}, slack {:+.3e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance,
            self.slack()
        )
    }
}

pub fn run_suite(suite: Suite) -> Result<Vec<Check>> {
    match suite {
        Suite::Theorem => theorem(),
        Suite::Corollary => corollary(),
        Suite::Kernels => kernels(),
        Suite::Policy => policy(),
        Suite::Kvequiv => kvequiv(),
    }
}

fn ideal_setup(power: f64, steps: usize, chunks: usize) -> Result<RunSetup> {
    Ok(RunSetup {
        scene: SceneConfig {
            chunks,
            window: 4,
            shape: LatentShape::default(),
            seed: 0,
            norm_spread: 0.5,
        },
        schedule: PowerLawSchedule::new(power, 1.0, steps)?,
        policy: PolicyConfig::Disabled,
        kv: KvConfig::default(),
        ..RunSetup::default()
    })
}

/// Largest drop between consecutive metric values of any chunk.
pub fn max_decrease(setup: &RunSetup) -> Result<f64> {
    let trace = run_denoise(setup)?;
    Ok(l1rel_curves(&trace)
        .iter()
        .flat_map(|c| c.points.windows(2).map(|w| w[0].metric - w[1].metric))
        .fold(0.0, f64::max))
}

fn theorem() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for power in [1.0, 2.0, 0.5] {
        for steps in [64, 256] {
            let drop = max_decrease(&ideal_setup(power, steps, 16)?)?;
            checks.push(Check::at_most(
                format!("theorem p={power} steps={steps} chunks=16 max metric decrease"),
                drop,
                1e-9,
            ));
        }
    }
    Ok(checks)
}

/// Smallest relative metric gap at equal `t` between chunks whose clean
/// norms differ by at least 5%.
pub fn min_cross_chunk_gap(setup: &RunSetup) -> Result<f64> {
    let trace = run_denoise(setup)?;
    let curves = l1rel_curves(&trace);
    let scene = &setup.scene;
    let mut worst = f64::INFINITY;
    for a in &curves {
        for b in curves.iter().filter(|b| b.chunk > a.chunk) {
            let (na, nb) = (scene.target_l1(a.chunk), scene.target_l1(b.chunk));
            if (na - nb).abs() / na.min(nb) < 0.05 {
                continue;
            }
            for (pa, pb) in a.points.iter().zip(&b.points).skip(1) {
                let gap = (pa.metric - pb.metric).abs() / pa.metric.max(pb.metric);
                worst = worst.min(gap);
            }
        }
    }
    Ok(worst)
}

fn corollary() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for power in [0.5, 1.0, 2.0] {
        let gap = min_cross_chunk_gap(&ideal_setup(power, 64, 10)?)?;
        checks.push(Check::above(
            format!("corollary p={power} min relative gap, clean-norm gap >= 5%"),
            gap,
            1e-6,
        ));
    }
    Ok(checks)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 3]) -> Result<Tensor> {
    let n = shape.iter().product();
    Ok(Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?)
}

fn kernels() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let at = |t: &Tensor, l: usize, h: usize, e: usize| {
        let s = t.shape();
        t.data()[(l * s[1] + h) * s[2] + e]
    };

    let mut imp_err: f64 = 0.0;
    for _ in 0..20 {
        let (lq, lk, h, d) = (8, 16, 2, 4);
        let q = random_tensor(&mut rng, [lq, h, d])?;
        let k = random_tensor(&mut rng, [lk, h, d])?;
        let got = importance(&q, &k, 50)?;
        for head in 0..h {
            let mut expect = vec![0.0; lk];
            for r in 0..lq {
                let logits: Vec<f64> = (0..lk)
                    .map(|j| (0..d).map(|e| at(&q, r, head, e) * at(&k, j, head, e)).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let z: f64 = logits.iter().map(|x| x.exp()).sum();
                for j in 0..lk {
                    expect[j] += logits[j].exp() / z / lq as f64;
                }
            }
            for j in 0..lk {
                imp_err = imp_err.max((got[head][j] - expect[j]).abs());
            }
        }
    }

    let mut red_err: f64 = 0.0;
    for _ in 0..5 {
        let k = random_tensor(&mut rng, [64, 1, 8])?;
        let got = redundancy_naive(&k)?;
        let cos = |i: usize, j: usize| {
            let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
            for e in 0..8 {
                let (x, y) = (at(&k, i, 0, e), at(&k, j, 0, e));
                ab += x * y;
                aa += x * x;
                bb += y * y;
            }
            ab / (aa.sqrt() * bb.sqrt())
        };
        let means: Vec<f64> = (0..64)
            .map(|j| (0..64).filter(|&i| i != j).map(|i| cos(i, j)).sum::<f64>() / 64.0)
            .collect();
        let z: f64 = means.iter().map(|m| m.exp()).sum();
        for j in 0..64 {
            red_err = red_err.max((got[0][j] - means[j].exp() / z).abs());
        }
    }

    let mut pool_err: f64 = 0.0;
    let mut topk_mismatch = 0usize;
    let mut rel_err: f64 = 0.0;
    for _ in 0..50 {
        let n: usize = rng.random_range(1..200);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..16) as f64).collect();
        let pooled = maxpool1d(&x, 5)?;
        for j in 0..n {
            let lo = j.saturating_sub(2);
            let hi = (j + 2).min(n - 1);
            let best = x[lo..=hi].iter().cloned().fold(f64::MIN, f64::max);
            pool_err = pool_err.max((pooled[j] - best).abs());
        }
        let k = rng.random_range(0..=n);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| x[b].partial_cmp(&x[a]).unwrap().then(a.cmp(&b)));
        let mut expect = order[..k].to_vec();
        expect.sort();
        if stable_topk(&x, k)? != expect {
            topk_mismatch += 1;
        }
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let l: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let dt = rng.random_range(0.001..0.5);
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..n {
            num += v[i].abs();
            den += l[i].abs();
        }
        let got = relative_l1(&Tensor::from_vec(v)?, dt, &Tensor::from_vec(l)?)?;
        rel_err = rel_err.max((got - num * dt / den).abs());
    }

    Ok(vec![
        Check::at_most("kernels importance vs three-loop attention", imp_err, 1e-10),
        Check::at_most("kernels redundancy_naive vs pairwise cosine loop", red_err, 1e-10),
        Check::at_most("kernels maxpool1d vs window scan", pool_err, 0.0),
        Check::at_most("kernels stable_topk mismatches vs full sort", topk_mismatch as f64, 0.0),
        Check::at_most("kernels relative_l1 vs scalar loop", rel_err, 1e-12),
    ])
}

/// Direct reading of the threshold rule: warmup computes, otherwise reuse
/// while the running sum stays within `epsilon`.
pub fn interpret_policy(metrics: &[f64], epsilon: f64, warmup: usize) -> Vec<(Action, f64)> {
    let mut f = 0.0;
    metrics
        .iter()
        .enumerate()
        .map(|(step, &x)| {
            if step < warmup || f + x > epsilon {
                f = 0.0;
                (Action::Compute, f)
            } else {
                f += x;
                (Action::Reuse, f)
            }
        })
        .collect()
}

/// Decision stream of the engine on a single chunk fed `metrics` as estimates.
pub fn engine_policy(metrics: &[f64], epsilon: f64, warmup: usize) -> Result<Vec<(Action, f64)>> {
    let mut acc = ReuseAccumulator::new(epsilon, warmup, 1)?;
    let one = Tensor::from_vec(vec![1.0])?;
    let mut chunk = flowcache_core::armodel::ChunkState::from_parts(1, one.clone(), one)?;
    let mut out = Vec::with_capacity(metrics.len());
    for (step, &x) in metrics.iter().enumerate() {
        chunk.local_step = step;
        let d = acc.decide(&chunk, x)?;
        acc.apply(&d, &mut chunk, 1e-3, |_| Tensor::from_vec(vec![0.5]))?;
        out.push((d.action, d.accumulator));
    }
    Ok(out)
}

fn policy() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatched = 0usize;
    let mut reuses = 0usize;
    for _ in 0..1000 {
        let len = rng.random_range(1..=128);
        let epsilon = if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.0..0.2) };
        let warmup = rng.random_range(1..=10);
        let metrics: Vec<f64> = (0..len).map(|_| rng.random_range(1e-6..0.05)).collect();
        let expect = interpret_policy(&metrics, epsilon, warmup);
        let got = engine_policy(&metrics, epsilon, warmup)?;
        if got != expect {
            mismatched += 1;
        }
        reuses += got.iter().filter(|d| d.0 == Action::Reuse).count();
    }
    Ok(vec![
        Check::at_most("policy streams differing from the direct interpreter (of 1000)", mismatched as f64, 0.0),
        Check::above("policy reuse decisions exercised", reuses as f64, 0.0),
    ])
}

fn kvequiv() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let l = rng.random_range(2..=512);
        let d = rng.random_range(1..=64);
        let h = rng.random_range(1..=8);
        let k = random_tensor(&mut rng, [l, h, d])?;
        let a = redundancy_naive(&k)?;
        let b = redundancy_fast(&k)?;
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(vec![Check::below("kvequiv max |fast - naive| over 100 instances", worst, 1e-9)])
}
