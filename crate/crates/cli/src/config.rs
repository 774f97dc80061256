//! Run configuration: named profiles, JSON files and flag overrides.
//!
//! Resolution order is profile, then config file, then flags. The file may
//! set any subset of fields; objects are merged key by key onto the profile.
//! The merged document is deserialized strictly and validated before any
//! simulation starts.

use std::path::{Path, PathBuf};

use flowcache_core::armodel::{LatentShape, SceneConfig};
use flowcache_core::chunkcache::PolicyConfig;
use flowcache_core::kvcache::KvConfig;
use flowcache_core::{PowerLawSchedule, RunSetup};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, Result};

pub const DEFAULT_PROFILE: &str = "magi-fast";
pub const DEFAULT_OUT_DIR: &str = "flowcache-out";

pub const PROFILES: [&str; 5] = [
    "baseline",
    "magi-slow",
    "magi-fast",
    "skyreels-slow",
    "skyreels-fast",
];

const SECTIONS: [&str; 6] = ["scene", "schedule", "policy", "velocity", "kv", "cost"];

/// MAGI-like scene: 10 chunks of 64 steps, 4 denoising at once, 5-chunk KV budget.
fn magi(epsilon: f64) -> RunSetup {
    RunSetup {
        scene: SceneConfig {
            chunks: 10,
            window: 4,
            shape: LatentShape::default(),
            seed: 0,
            norm_spread: 0.5,
        },
        schedule: PowerLawSchedule::default(),
        policy: PolicyConfig::FlowCache { epsilon, warmup: 5 },
        kv: KvConfig {
            budget_chunks: Some(5),
            ..KvConfig::default()
        },
        ..RunSetup::default()
    }
}

fn skyreels(epsilon: f64) -> RunSetup {
    let mut s = magi(epsilon);
    s.scene.chunks = 2;
    s.scene.window = 2;
    s.schedule.steps = 50;
    s.policy = PolicyConfig::FlowCache { epsilon, warmup: 4 };
    s
}

pub fn profile(name: &str) -> Result<RunSetup> {
    Ok(match name {
        "baseline" => {
            let mut s = magi(0.0);
            s.kv.budget_chunks = None;
            s
        }
        "magi-slow" => magi(0.01),
        "magi-fast" => magi(0.015),
        "skyreels-slow" => skyreels(0.1),
        "skyreels-fast" => skyreels(0.15),
        other => {
            return Err(CliError::Usage(format!(
                "unknown profile {other:?}; expected one of {}",
                PROFILES.join(", ")
            )))
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

/// Fully resolved configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub profile: String,
    #[serde(flatten)]
    pub setup: RunSetup,
    pub output: OutputConfig,
}

/// Command-line overrides applied after the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub profile: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let doc = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                serde_json::from_str::<Value>(&text).map_err(|e| CliError::Config {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?
            }
            None => Value::Object(Map::new()),
        };
        Self::resolve_value(doc, overrides)
    }

    pub fn resolve_value(doc: Value, overrides: &Overrides) -> Result<Self> {
        let Value::Object(mut doc) = doc else {
            return Err(config_error("", "config must be a JSON object"));
        };
        for key in doc.keys() {
            if !SECTIONS.contains(&key.as_str()) && key != "profile" && key != "output" {
                return Err(config_error(key, "unknown field"));
            }
        }
        let name = match (&overrides.profile, doc.remove("profile")) {
            (Some(p), _) => p.clone(),
            (None, Some(Value::String(p))) => p,
            (None, Some(_)) => return Err(config_error("profile", "expected a string")),
            (None, None) => DEFAULT_PROFILE.to_string(),
        };
        let base = profile(&name)?;
        let mut merged = serde_json::to_value(base).expect("setup serializes");
        for section in SECTIONS {
            if let Some(v) = doc.remove(section) {
                merge(&mut merged[section], v);
            }
        }
        if let Some(seed) = overrides.seed {
            merged["scene"]["seed"] = Value::from(seed);
        }
        let setup: RunSetup = serde_path_to_error::deserialize(merged).map_err(|e| {
            config_error(&e.path().to_string(), &e.inner().to_string())
        })?;
        setup.validate().map_err(|e| config_error(&field_of(&e), &e.to_string()))?;

        let mut output = match doc.remove("output") {
            Some(v) => serde_path_to_error::deserialize::<_, OutputConfig>(v).map_err(|e| {
                config_error(&format!("output.{}", e.path()), &e.inner().to_string())
            })?,
            None => OutputConfig {
                dir: PathBuf::from(DEFAULT_OUT_DIR),
            },
        };
        if let Some(out) = &overrides.out {
            output.dir = out.clone();
        }
        Ok(Self {
            profile: name,
            setup,
            output,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Recursive object merge; a differing `kind` tag replaces the object.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            let retag = matches!((b.get("kind"), o.get("kind")), (Some(x), Some(y)) if x != y);
            if retag {
                *b = o;
                return;
            }
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn config_error(path: &str, message: &str) -> CliError {
    CliError::Config {
        path: if path.is_empty() { ".".into() } else { path.into() },
        message: message.into(),
    }
}

/// Field path named in a validation message, e.g. `kv.lambda`.
fn field_of(e: &flowcache_core::Error) -> String {
    let text = e.to_string();
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric() && c != '.' && c != '_'))
        .find(|w| SECTIONS.iter().any(|s| w.starts_with(&format!("{s}."))))
        .unwrap_or("")
        .to_string()
}
