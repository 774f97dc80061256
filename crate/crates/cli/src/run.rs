//! `run`: one simulation plus its reference runs, written to disk.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use flowcache_core::metrics::{l1rel_curves, write_curves_csv};
use serde::Serialize;

use crate::compare::{compare, mean_attention_error};
use crate::config::RunConfig;
use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub profile: String,
    pub hash: String,
    pub computed_steps: usize,
    pub reused_steps: usize,
    pub reuse_fraction: f64,
    pub total_flops: f64,
    pub speedup: f64,
    pub speedup_vs_vanilla: f64,
    pub final_error_vs_baseline: f64,
    pub peak_kv_tokens: usize,
    pub kv_capacity: Option<usize>,
    pub peak_resident_bytes: f64,
    pub compressions: usize,
    pub mean_attention_error: f64,
}

impl RunReport {
    pub fn render(&self) -> String {
        let capacity = self
            .kv_capacity
            .map_or_else(|| "unbounded".to_string(), |c| c.to_string());
        format!(
            "profile               {}\n\
             trace hash            {}\n\
             computed steps        {}\n\
             reused steps          {}\n\
             reuse fraction        {:.4}\n\
             total flops           {:.6e}\n\
             speedup (eps=0)       {:.4}\n\
             speedup (vanilla)     {:.4}\n\
             final error vs eps=0  {:.6e}\n\
             peak kv tokens/head   {} of {}\n\
             peak resident bytes   {:.0}\n\
             compressions          {}\n\
             mean attention error  {:.6e}\n",
            self.profile,
            self.hash,
            self.computed_steps,
            self.reused_steps,
            self.reuse_fraction,
            self.total_flops,
            self.speedup,
            self.speedup_vs_vanilla,
            self.final_error_vs_baseline,
            self.peak_kv_tokens,
            capacity,
            self.peak_resident_bytes,
            self.compressions,
            self.mean_attention_error,
        )
    }
}

pub fn cmd_run(cfg: &RunConfig) -> Result<RunReport> {
    let cmp = compare(&cfg.setup)?;
    let trace = &cmp.run.trace;
    let setup = &cfg.setup;
    let report = RunReport {
        profile: cfg.profile.clone(),
        hash: trace.hash.clone(),
        computed_steps: trace.totals.computed_steps,
        reused_steps: trace.totals.reused_steps,
        reuse_fraction: trace.totals.reuse_fraction(),
        total_flops: trace.totals.total_flops,
        speedup: cmp.speedup,
        speedup_vs_vanilla: cmp.speedup_vs_vanilla,
        final_error_vs_baseline: cmp.final_error,
        peak_kv_tokens: trace.totals.peak_resident_tokens,
        kv_capacity: setup
            .kv
            .budget_tokens(setup.scene.shape)
            .map(|b| b + setup.scene.window * setup.scene.shape.tokens()),
        peak_resident_bytes: trace.totals.peak_resident_bytes,
        compressions: trace.compressions.iter().filter(|e| e.report.compressed).count(),
        mean_attention_error: mean_attention_error(trace),
    };

    let dir = &cfg.output.dir;
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    trace.write_json(create(&dir.join("trace.json"))?)?;
    trace.write_csv(create(&dir.join("trace.csv"))?)?;
    write_curves_csv(&l1rel_curves(trace), create(&dir.join("curves.csv"))?)?;
    let path = dir.join("report.txt");
    fs::write(&path, report.render()).map_err(|e| CliError::io(&path, e))?;
    Ok(report)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}
