//! `sweep`: one isolated run per axis value, optionally in parallel.

use std::io::Write;
use std::str::FromStr;

use flowcache_core::chunkcache::PolicyConfig;
use flowcache_core::kvcache::{KeyGranularity, QueryGranularity};
use flowcache_core::RunSetup;
use rayon::prelude::*;
use serde::Serialize;

use crate::compare::{compare, mean_attention_error};
use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const THREADS_ENV: &str = "FLOWCACHE_SIM_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Lambda,
    Budget,
    Granularity,
    Epsilon,
}

impl FromStr for Axis {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(Axis::Lambda),
            "budget" => Ok(Axis::Budget),
            "granularity" => Ok(Axis::Granularity),
            "epsilon" => Ok(Axis::Epsilon),
            other => Err(CliError::Usage(format!(
                "unknown axis {other:?}; expected lambda, budget, granularity or epsilon"
            ))),
        }
    }
}

impl Axis {
    /// Values used when none are given.
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Axis::Lambda => &["0.03", "0.07", "0.15", "0.2"],
            Axis::Budget => &["8", "7", "6", "5"],
            Axis::Granularity => &["token:token", "frame:token", "token:frame", "frame:frame", "token:chunk"],
            Axis::Epsilon => &["0", "0.01", "0.015", "0.05", "0.1"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// `base` with the axis set to `value`.
    pub fn apply(self, base: &RunSetup, value: &str) -> Result<RunSetup> {
        let mut s = *base;
        match self {
            Axis::Lambda => s.kv.lambda = number(value)?,
            Axis::Budget => s.kv.budget_chunks = Some(number(value)?),
            Axis::Epsilon => {
                let epsilon = number(value)?;
                let warmup = match s.policy {
                    PolicyConfig::FlowCache { warmup, .. } => warmup,
                    PolicyConfig::Disabled => 0,
                };
                s.policy = PolicyConfig::FlowCache { epsilon, warmup };
            }
            Axis::Granularity => {
                let (q, k) = value.split_once(':').ok_or_else(|| {
                    CliError::Usage(format!("granularity values look like query:key, got {value:?}"))
                })?;
                s.kv.query_granularity = match q {
                    "token" => QueryGranularity::Token,
                    "frame" => QueryGranularity::Frame,
                    other => return Err(CliError::Usage(format!("unknown query granularity {other:?}"))),
                };
                s.kv.key_granularity = match k {
                    "token" => KeyGranularity::Token,
                    "frame" => KeyGranularity::Frame,
                    "chunk" => KeyGranularity::Chunk,
                    other => return Err(CliError::Usage(format!("unknown key granularity {other:?}"))),
                };
            }
        }
        s.validate()?;
        Ok(s)
    }
}

fn number<T: FromStr>(value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("cannot parse axis value {value:?}")))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub reuse_fraction: f64,
    /// Largest per-chunk final-latent L1-relative error vs the zero-threshold run.
    pub final_l1_err: f64,
    /// Flops ratio vs the zero-threshold run with the same KV settings.
    pub speedup: f64,
    /// Flops ratio vs a run without reuse or KV budget.
    pub speedup_vs_vanilla: f64,
    pub peak_kv_tokens: usize,
    pub kv_attn_err: f64,
}

/// Worker count from `FLOWCACHE_SIM_THREADS`, defaulting to all cores.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

/// Runs every axis point; rows come back in the order of `values`.
pub fn sweep(base: &RunSetup, axis: Axis, values: &[String], threads: Option<usize>) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(CliError::Usage("sweep needs at least one axis value".into()));
    }
    // every point is checked before any run starts
    let setups = values
        .iter()
        .map(|v| axis.apply(base, v))
        .collect::<Result<Vec<_>>>()?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        pool = pool.num_threads(n.min(values.len()));
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
    pool.install(|| {
        setups
            .par_iter()
            .zip(values.par_iter())
            .map(|(setup, value)| {
                let cmp = compare(setup)?;
                let totals = &cmp.run.trace.totals;
                Ok(SweepRow {
                    value: value.clone(),
                    reuse_fraction: totals.reuse_fraction(),
                    final_l1_err: cmp.final_error,
                    speedup: cmp.speedup,
                    speedup_vs_vanilla: cmp.speedup_vs_vanilla,
                    peak_kv_tokens: totals.peak_resident_tokens,
                    kv_attn_err: mean_attention_error(&cmp.run.trace),
                })
            })
            .collect()
    })
}

pub fn write_rows<W: Write>(axis: &str, rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| CliError::Core(e.into());
    w.write_record([
        axis,
        "reuse_fraction",
        "final_l1_err",
        "speedup",
        "speedup_vs_vanilla",
        "peak_kv_tokens",
        "kv_attn_err",
    ])
    .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.value.clone(),
            r.reuse_fraction.to_string(),
            r.final_l1_err.to_string(),
            r.speedup.to_string(),
            r.speedup_vs_vanilla.to_string(),
            r.peak_kv_tokens.to_string(),
            r.kv_attn_err.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::Core(e.into()))?;
    Ok(())
}

/// Resolves the axis, runs the sweep and writes `<out>/sweep_<axis>.csv`.
/// Returns the CSV text.
pub fn cmd_sweep(cfg: &RunConfig, axis: &str, values: &[String]) -> Result<String> {
    let parsed: Axis = axis.parse()?;
    let values = if values.is_empty() { parsed.default_values() } else { values.to_vec() };
    let rows = sweep(&cfg.setup, parsed, &values, thread_cap()?)?;
    let mut text = Vec::new();
    write_rows(axis, &rows, &mut text)?;
    let dir = &cfg.output.dir;
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let path = dir.join(format!("sweep_{axis}.csv"));
    std::fs::write(&path, &text).map_err(|e| CliError::io(&path, e))?;
    Ok(String::from_utf8(text).expect("csv output is utf-8"))
}
