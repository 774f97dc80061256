//! Run traces, cost totals, speedup and curve export.
//!
//! A [`RunTrace`] is the complete record of one simulation. Its content hash
//! covers every decision, metric, cost and KV figure plus a digest of each
//! final latent. It leaves out the config snapshot and the diagnostic
//! estimates, so two runs that behave identically hash identically even if
//! they were configured through different policy paths.

use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::armodel::RunSetup;
use crate::chunkcache::Action;
use crate::error::{invalid_input, Error, Result};
use crate::kvcache::CompressionReport;
use crate::numerics::Tensor;
use crate::serde_ext::parse_extended;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkStepRecord {
    pub chunk: usize,
    /// Local step index before the update.
    pub local_step: usize,
    pub t: f64,
    pub action: Action,
    /// True `L1_rel` on computed steps, the estimate on reused steps.
    pub metric: f64,
    /// Estimate fed to the policy; absent when no policy runs.
    #[serde(with = "crate::serde_ext::opt_extended_f64")]
    pub estimate: Option<f64>,
    pub accumulator: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub global_step: usize,
    pub chunks: Vec<ChunkStepRecord>,
    pub flops: f64,
    /// Clean plus active tokens per key head during the step.
    pub resident_kv_tokens: Vec<usize>,
    pub resident_bytes: f64,
    /// Tokens evicted by compression at the end of the step, over all heads.
    pub evicted_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub computed_steps: usize,
    pub reused_steps: usize,
    pub total_flops: f64,
    pub peak_resident_tokens: usize,
    pub peak_resident_bytes: f64,
    pub evicted_tokens: usize,
}

impl Totals {
    pub fn reuse_fraction(&self) -> f64 {
        let all = self.computed_steps + self.reused_steps;
        if all == 0 {
            0.0
        } else {
            self.reused_steps as f64 / all as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkSummary {
    pub chunk: usize,
    pub computed: usize,
    pub reused: usize,
    /// `||x_final - x0||_1 / ||x0||_1`.
    pub final_error: f64,
    /// SHA-256 of the final latent's little-endian `f64` bytes.
    pub latent_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionEvent {
    pub global_step: usize,
    pub chunk: usize,
    pub report: CompressionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub schema_version: u32,
    pub config: RunSetup,
    pub steps: Vec<StepRecord>,
    pub totals: Totals,
    pub chunks: Vec<ChunkSummary>,
    pub compressions: Vec<CompressionEvent>,
    pub hash: String,
}

impl RunTrace {
    /// Assembles a trace, deriving totals and the content hash.
    pub fn build(
        config: RunSetup,
        steps: Vec<StepRecord>,
        chunks: Vec<ChunkSummary>,
        compressions: Vec<CompressionEvent>,
    ) -> Self {
        let totals = totals_of(&steps);
        let mut trace = Self {
            schema_version: SCHEMA_VERSION,
            config,
            steps,
            totals,
            chunks,
            compressions,
            hash: String::new(),
        };
        trace.hash = trace.content_hash();
        trace
    }

    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        let mut put = |bytes: &[u8]| h.update(bytes);
        for s in &self.steps {
            put(&(s.global_step as u64).to_le_bytes());
            for c in &s.chunks {
                put(&(c.chunk as u64).to_le_bytes());
                put(&(c.local_step as u64).to_le_bytes());
                put(&c.t.to_bits().to_le_bytes());
                put(&[matches!(c.action, Action::Reuse) as u8]);
                put(&c.metric.to_bits().to_le_bytes());
                put(&c.accumulator.to_bits().to_le_bytes());
            }
            put(&s.flops.to_bits().to_le_bytes());
            for r in &s.resident_kv_tokens {
                put(&(*r as u64).to_le_bytes());
            }
            put(&s.resident_bytes.to_bits().to_le_bytes());
            put(&(s.evicted_tokens as u64).to_le_bytes());
        }
        for c in &self.chunks {
            put(&(c.chunk as u64).to_le_bytes());
            put(c.latent_digest.as_bytes());
        }
        for e in &self.compressions {
            put(&(e.global_step as u64).to_le_bytes());
            for head in &e.report.heads {
                put(&(head.retained_ids.len() as u64).to_le_bytes());
                for id in &head.retained_ids {
                    put(&(*id as u64).to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    /// `true` when the stored hash matches the content.
    pub fn verify_hash(&self) -> bool {
        self.hash == self.content_hash()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write_json<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(self.to_json()?.as_bytes())?;
        out.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_json<R: Read>(mut input: R) -> Result<Self> {
        let mut text = String::new();
        input.read_to_string(&mut text)?;
        Self::from_json(&text)
    }

    /// One row per (step, chunk). Everything not row-shaped travels in a
    /// `# meta` comment line as JSON.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let meta = CsvMeta {
            schema_version: self.schema_version,
            config: self.config,
            totals: self.totals.clone(),
            chunks: self.chunks.clone(),
            compressions: self.compressions.clone(),
            hash: self.hash.clone(),
        };
        writeln!(out, "# flowcache trace csv")?;
        writeln!(out, "# meta {}", serde_json::to_string(&meta)?)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_COLUMNS)?;
        for s in &self.steps {
            let resident = s
                .resident_kv_tokens
                .iter()
                .map(|r| r.to_string())
                .collect::<Vec<_>>()
                .join(";");
            for c in &s.chunks {
                w.write_record([
                    s.global_step.to_string(),
                    c.chunk.to_string(),
                    c.local_step.to_string(),
                    c.t.to_string(),
                    action_name(c.action).to_string(),
                    c.metric.to_string(),
                    c.estimate.map(|e| e.to_string()).unwrap_or_default(),
                    c.accumulator.to_string(),
                    s.flops.to_string(),
                    resident.clone(),
                    s.resident_bytes.to_string(),
                    s.evicted_tokens.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut meta: Option<CsvMeta> = None;
        let mut body = String::new();
        for line in BufReader::new(input).lines() {
            let line = line?;
            if let Some(rest) = line.strip_prefix("# meta ") {
                meta = Some(serde_json::from_str(rest)?);
            } else if !line.starts_with('#') {
                body.push_str(&line);
                body.push('\n');
            }
        }
        let meta = meta.ok_or_else(|| invalid_input("csv trace has no meta line"))?;
        let mut reader = csv::Reader::from_reader(body.as_bytes());
        let mut steps: Vec<StepRecord> = Vec::new();
        for row in reader.records() {
            let row = row?;
            if row.len() != CSV_COLUMNS.len() {
                return Err(invalid_input(format!("csv row has {} fields", row.len())));
            }
            let global_step: usize = parse(&row[0])?;
            let record = ChunkStepRecord {
                chunk: parse(&row[1])?,
                local_step: parse(&row[2])?,
                t: parse_f64(&row[3])?,
                action: match &row[4] {
                    "compute" => Action::Compute,
                    "reuse" => Action::Reuse,
                    other => return Err(invalid_input(format!("unknown action {other:?}"))),
                },
                metric: parse_f64(&row[5])?,
                estimate: if row[6].is_empty() { None } else { Some(parse_f64(&row[6])?) },
                accumulator: parse_f64(&row[7])?,
            };
            if steps.last().map(|s| s.global_step) != Some(global_step) {
                steps.push(StepRecord {
                    global_step,
                    chunks: Vec::new(),
                    flops: parse_f64(&row[8])?,
                    resident_kv_tokens: row[9]
                        .split(';')
                        .filter(|s| !s.is_empty())
                        .map(parse)
                        .collect::<Result<_>>()?,
                    resident_bytes: parse_f64(&row[10])?,
                    evicted_tokens: parse(&row[11])?,
                });
            }
            steps.last_mut().expect("step pushed above").chunks.push(record);
        }
        Ok(Self {
            schema_version: meta.schema_version,
            config: meta.config,
            steps,
            totals: meta.totals,
            chunks: meta.chunks,
            compressions: meta.compressions,
            hash: meta.hash,
        })
    }
}

const CSV_COLUMNS: [&str; 12] = [
    "global_step",
    "chunk",
    "local_step",
    "t",
    "action",
    "metric",
    "estimate",
    "accumulator",
    "step_flops",
    "resident_kv_tokens",
    "resident_bytes",
    "evicted_tokens",
];

#[derive(Serialize, Deserialize)]
struct CsvMeta {
    schema_version: u32,
    config: RunSetup,
    totals: Totals,
    chunks: Vec<ChunkSummary>,
    compressions: Vec<CompressionEvent>,
    hash: String,
}

fn parse<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| invalid_input(format!("cannot parse {s:?}")))
}

fn parse_f64(s: &str) -> Result<f64> {
    parse_extended(s).map_or_else(|| parse(s), Ok)
}

fn action_name(a: Action) -> &'static str {
    match a {
        Action::Compute => "compute",
        Action::Reuse => "reuse",
    }
}

pub fn totals_of(steps: &[StepRecord]) -> Totals {
    let mut t = Totals {
        computed_steps: 0,
        reused_steps: 0,
        total_flops: 0.0,
        peak_resident_tokens: 0,
        peak_resident_bytes: 0.0,
        evicted_tokens: 0,
    };
    for s in steps {
        for c in &s.chunks {
            match c.action {
                Action::Compute => t.computed_steps += 1,
                Action::Reuse => t.reused_steps += 1,
            }
        }
        t.total_flops += s.flops;
        let peak = s.resident_kv_tokens.iter().copied().max().unwrap_or(0);
        t.peak_resident_tokens = t.peak_resident_tokens.max(peak);
        t.peak_resident_bytes = t.peak_resident_bytes.max(s.resident_bytes);
        t.evicted_tokens += s.evicted_tokens;
    }
    t
}

pub fn latent_digest(latent: &Tensor) -> String {
    let mut h = Sha256::new();
    for v in latent.data() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// `baseline.total_flops / trace.total_flops`.
pub fn speedup(trace: &RunTrace, baseline: &RunTrace) -> Result<f64> {
    if trace.config.scene != baseline.config.scene || trace.config.schedule != baseline.config.schedule {
        return Err(Error::InvalidComparison(
            "traces use different scene or schedule configs".into(),
        ));
    }
    if !(trace.totals.total_flops > 0.0 && baseline.totals.total_flops > 0.0) {
        return Err(Error::InvalidComparison("a trace has zero total flops".into()));
    }
    Ok(baseline.totals.total_flops / trace.totals.total_flops)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub local_step: usize,
    pub global_step: usize,
    /// `local_step / steps * 100`.
    pub progress: f64,
    pub t: f64,
    pub metric: f64,
    pub estimate: Option<f64>,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkCurve {
    pub chunk: usize,
    pub points: Vec<CurvePoint>,
}

/// Per-chunk metric series over denoising progress, ordered by chunk.
pub fn l1rel_curves(trace: &RunTrace) -> Vec<ChunkCurve> {
    let steps = trace.config.schedule.steps as f64;
    let mut curves: Vec<ChunkCurve> = (1..=trace.config.scene.chunks)
        .map(|chunk| ChunkCurve {
            chunk,
            points: Vec::new(),
        })
        .collect();
    for s in &trace.steps {
        for c in &s.chunks {
            if let Some(curve) = curves.get_mut(c.chunk - 1) {
                curve.points.push(CurvePoint {
                    local_step: c.local_step,
                    global_step: s.global_step,
                    progress: c.local_step as f64 / steps * 100.0,
                    t: c.t,
                    metric: c.metric,
                    estimate: c.estimate,
                    action: c.action,
                });
            }
        }
    }
    curves.retain(|c| !c.points.is_empty());
    curves
}

pub fn write_curves_csv<W: Write>(curves: &[ChunkCurve], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["chunk", "local_step", "global_step", "progress", "t", "metric", "estimate", "action"])?;
    for c in curves {
        for p in &c.points {
            w.write_record([
                c.chunk.to_string(),
                p.local_step.to_string(),
                p.global_step.to_string(),
                p.progress.to_string(),
                p.t.to_string(),
                p.metric.to_string(),
                p.estimate.map(|e| e.to_string()).unwrap_or_default(),
                action_name(p.action).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
