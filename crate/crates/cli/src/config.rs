//! Flat `key = value` run configuration. Every default lives in
//! [`Settings::default`]; the table of keys is that value flattened with
//! dotted names. Later sources override earlier ones: defaults, a config
//! file, `--set key=value`, then dedicated flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use routegan_core::data::DatasetConfig;
use routegan_core::planners::{PlannerKind, PlannerSettings};
use routegan_core::routegan::RouteGanConfig;
use routegan_core::sim::SimConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "ROUTEGAN_OUT";
/// Output root used when the environment variable is unset.
pub const DEFAULT_OUT_ROOT: &str = "runs";
/// File name of the resolved-config snapshot written with every run.
pub const SNAPSHOT_NAME: &str = "resolved_config.txt";

/// Model keys owned by other sections: the global seed and the dataset's
/// stride and timestep.
const DERIVED_KEYS: [&str; 3] = ["routegan.seed", "routegan.stride", "routegan.dt"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSettings {
    /// Dataset directory read by `train`; empty means `<root>/gen-data`.
    pub dir: String,
    pub safe: usize,
    pub critical: usize,
    #[serde(flatten)]
    pub dataset: DatasetConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    /// Render a sample rollout every this many steps; 0 disables.
    pub sample_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub episodes: usize,
    pub q_values: Vec<f64>,
    /// Added to the global seed for held-out evaluation scenarios.
    pub seed_offset: u64,
    /// Held-out rollouts for the style reconstruction check; 0 disables.
    pub reconstruction: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerSection {
    /// Comma-separated tested planners.
    pub kind: Vec<String>,
    #[serde(flatten)]
    pub settings: PlannerSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    /// The two style dimensions swept.
    pub dims: Vec<usize>,
    /// Index of the held-out evaluation episode used as the scenario.
    pub episode: usize,
    /// Drive both vehicles with the generator, sweeping each one's q1.
    pub joint: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderSettings {
    /// Episode JSONL file.
    pub input: String,
    /// 1-based record number within `input`.
    pub line: usize,
    /// Side length of one rendered scene in SVG units.
    pub size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub seed: u64,
    pub workers: usize,
    /// Output location; empty means `<root>/<command>`.
    pub out: String,
    /// Checkpoint read by `eval` and `sweep`; empty means `<root>/train/checkpoint.json`.
    pub checkpoint: String,
    pub data: DataSettings,
    pub routegan: RouteGanConfig,
    pub train: TrainSettings,
    pub eval: EvalSettings,
    pub planner: PlannerSection,
    pub sim: SimConfig,
    pub sweep: SweepSettings,
    pub render: RenderSettings,
}

impl Default for Settings {
    fn default() -> Self {
        let routegan = RouteGanConfig {
            steps: 4000,
            ..RouteGanConfig::default()
        };
        Self {
            seed: 0,
            workers: 1,
            out: String::new(),
            checkpoint: String::new(),
            data: DataSettings {
                dir: String::new(),
                safe: 500,
                critical: 500,
                dataset: DatasetConfig::default(),
            },
            routegan,
            train: TrainSettings { sample_every: 0 },
            eval: EvalSettings {
                episodes: 200,
                q_values: vec![-2.0, -1.0, 0.0, 1.0, 2.0],
                seed_offset: 1000,
                reconstruction: 200,
            },
            planner: PlannerSection {
                kind: PlannerKind::ALL.iter().map(|k| k.to_string().to_lowercase()).collect(),
                settings: PlannerSettings::default(),
            },
            sim: SimConfig::default(),
            sweep: SweepSettings {
                dims: vec![0, 1],
                episode: 0,
                joint: false,
            },
            render: RenderSettings {
                input: String::new(),
                line: 1,
                size: 480.0,
            },
        }
    }
}

impl Settings {
    /// Seed of the held-out evaluation scenarios.
    pub fn eval_seed(&self) -> u64 {
        self.seed.wrapping_add(self.eval.seed_offset)
    }

    pub fn planner_kinds(&self) -> Result<Vec<PlannerKind>> {
        if self.planner.kind.is_empty() {
            return Err(CliError::usage("planner.kind lists no planners"));
        }
        self.planner
            .kind
            .iter()
            .map(|k| k.parse::<PlannerKind>().map_err(CliError::from))
            .collect()
    }

    pub fn sweep_dims(&self) -> Result<(usize, usize)> {
        match self.sweep.dims[..] {
            [i, j] => Ok((i, j)),
            _ => Err(CliError::usage("sweep.dims needs exactly two dimensions")),
        }
    }
}

fn flatten_into(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, child, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

fn render_scalar(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

fn render_value(v: &Value) -> String {
    match v {
        Value::Array(items) => items.iter().map(render_scalar).collect::<Vec<_>>().join(","),
        other => render_scalar(other),
    }
}

/// Parses `raw` into the JSON type of `like`.
fn parse_like(key: &str, like: &Value, raw: &str) -> Result<Value> {
    let bad = || CliError::usage(format!("bad value {raw:?} for {key}"));
    let raw = raw.trim();
    Ok(match like {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
        Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| bad())?),
        Value::Number(n) if n.is_i64() => Value::from(raw.parse::<i64>().map_err(|_| bad())?),
        Value::Number(_) => {
            let x: f64 = raw.parse().map_err(|_| bad())?;
            serde_json::Number::from_f64(x).map(Value::Number).ok_or_else(bad)?
        }
        Value::Array(items) => {
            let elem = items.first().cloned().unwrap_or(Value::from(0.0));
            if raw.is_empty() {
                Value::Array(Vec::new())
            } else {
                Value::Array(raw.split(',').map(|s| parse_like(key, &elem, s)).collect::<Result<_>>()?)
            }
        }
        _ => Value::String(raw.to_string()),
    })
}

/// Settings as a flat, ordered table of dotted keys.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigTable {
    entries: BTreeMap<String, Value>,
}

impl Default for ConfigTable {
    fn default() -> Self {
        Self {
            entries: default_entries().clone(),
        }
    }
}

/// The defaults table; also the type reference for parsing values.
fn default_entries() -> &'static BTreeMap<String, Value> {
    static DEFAULTS: OnceLock<BTreeMap<String, Value>> = OnceLock::new();
    DEFAULTS.get_or_init(|| {
        ConfigTable::from_settings(&Settings::default())
            .expect("defaults serialize")
            .entries
    })
}

impl ConfigTable {
    pub fn from_settings(s: &Settings) -> Result<Self> {
        let mut entries = BTreeMap::new();
        flatten_into("", &serde_json::to_value(s).map_err(routegan_core::Error::from)?, &mut entries);
        for k in DERIVED_KEYS {
            entries.remove(k);
        }
        Ok(Self { entries })
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.entries.get(key).map(render_value)
    }

    /// Overrides one key; unknown keys and mistyped values are usage errors.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let key = key.trim();
        let like = default_entries()
            .get(key)
            .ok_or_else(|| CliError::usage(format!("unknown config key {key:?}")))?;
        let value = parse_like(key, like, raw)?;
        self.entries.insert(key.to_string(), value);
        Ok(())
    }

    /// Applies a `key=value` assignment.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("expected key=value, got {pair:?}")))?;
        self.set(k, v)
    }

    /// Applies a config file: `key = value` lines, `#` comments, blank lines.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.set_pair(line)
                .map_err(|e| CliError::usage(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        self.apply_text(&text)
    }

    pub fn settings(&self) -> Result<Settings> {
        let mut root = serde_json::to_value(Settings::default()).map_err(routegan_core::Error::from)?;
        for (key, v) in &self.entries {
            let mut node = &mut root;
            for part in key.split('.') {
                node = node
                    .get_mut(part)
                    .ok_or_else(|| CliError::usage(format!("config key {key:?} has no slot")))?;
            }
            *node = v.clone();
        }
        serde_json::from_value(root).map_err(|e| CliError::usage(format!("invalid configuration: {e}")))
    }

    /// `key = value` lines in key order.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {}\n", render_value(v)))
            .collect()
    }
}

/// Output root from the environment, else [`DEFAULT_OUT_ROOT`].
pub fn out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT))
}

/// Fills empty path keys from the output root so the snapshot names
/// concrete locations.
pub fn resolve_paths(table: &mut ConfigTable, default_out: PathBuf) -> Result<()> {
    let root = out_root();
    let fill = |table: &mut ConfigTable, key: &str, value: PathBuf| -> Result<()> {
        if table.get(key).unwrap_or_default().is_empty() {
            table.set(key, &value.to_string_lossy())?;
        }
        Ok(())
    };
    fill(table, "out", default_out)?;
    fill(table, "data.dir", root.join("gen-data"))?;
    fill(table, "checkpoint", root.join("train").join("checkpoint.json"))?;
    Ok(())
}

/// Writes the resolved snapshot as a config file that reproduces the run.
pub fn write_snapshot(table: &ConfigTable, command: &str, dir: &Path) -> Result<PathBuf> {
    let path = dir.join(SNAPSHOT_NAME);
    let text = format!("# routegan {command} --config {SNAPSHOT_NAME}\n{}", table.to_text());
    std::fs::write(&path, text).map_err(CliError::io(&path))?;
    Ok(path)
}
