//! JSON configs with command-line overrides.
//!
//! A config file is read as a JSON object, flags are written over its keys,
//! and the merged object is deserialized. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use gmrfsel::benchmark::{ExperimentConfig, LatticeConfig, TruthSpec};

use crate::error::{CliError, CliResult};
use crate::{BenchmarkArgs, SimulateArgs};

/// JSON schema of the benchmark config.
#[cfg(test)]
pub const EXPERIMENT_SCHEMA: &str = include_str!("../schema/experiment_config.schema.json");
/// JSON schema of the simulate config.
#[cfg(test)]
pub const SIMULATE_SCHEMA: &str = include_str!("../schema/simulate_config.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub lattice: LatticeConfig,
    #[serde(default = "one")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    pub truth: TruthSpec,
}

fn one() -> usize {
    1
}

/// Truth and geometry written next to a simulated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar {
    pub lattice: LatticeConfig,
    pub n: usize,
    pub seed: u64,
    pub truth: Value,
}

pub fn sidecar_path(data: &Path) -> PathBuf {
    let mut s = data.as_os_str().to_owned();
    s.push(".truth.json");
    PathBuf::from(s)
}

fn read_object(path: Option<&Path>) -> CliResult<Map<String, Value>> {
    let Some(path) = path else {
        return Ok(Map::new());
    };
    match serde_json::from_str(&std::fs::read_to_string(path)?)? {
        Value::Object(m) => Ok(m),
        _ => Err(CliError::Config(format!("{} must hold a JSON object", path.display()))),
    }
}

fn set<T: Serialize>(map: &mut Map<String, Value>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        map.insert(key.into(), serde_json::to_value(v).expect("plain values serialize"));
    }
}

fn object<'a>(map: &'a mut Map<String, Value>, key: &str) -> CliResult<&'a mut Map<String, Value>> {
    map.entry(key).or_insert_with(|| json!({}))
        .as_object_mut()
        .ok_or_else(|| CliError::Config(format!("'{key}' must be an object")))
}

fn deserialize<T: serde::de::DeserializeOwned>(map: Map<String, Value>) -> CliResult<T> {
    serde_json::from_value(Value::Object(map)).map_err(|e| CliError::Config(e.to_string()))
}

pub fn simulate_config(a: &SimulateArgs) -> CliResult<SimulateConfig> {
    let mut map = read_object(a.config.as_deref())?;
    set(&mut map, "n", a.n);
    set(&mut map, "seed", a.seed);
    if a.p1.is_some() || a.p2.is_some() || a.toroidal {
        let lattice = object(&mut map, "lattice")?;
        set(lattice, "p1", a.p1.or(a.p2));
        set(lattice, "p2", a.p2.or(a.p1));
        if a.toroidal {
            lattice.insert("toroidal".into(), Value::Bool(true));
        }
    }
    if let Some(phi) = a.phi {
        map.insert("truth".into(), json!({"kind": "theta_phi", "phi": phi}));
    }
    let field_flags = a.family.is_some()
        || a.range.is_some()
        || a.kappa.is_some()
        || a.variance.is_some()
        || a.aniso_ratio.is_some()
        || a.aniso_rotation.is_some();
    if field_flags {
        let truth = object(&mut map, "truth")?;
        truth.insert("kind".into(), json!("field"));
        let model = object(truth, "model")?;
        set(model, "family", a.family.as_deref());
        set(model, "range", a.range);
        set(model, "kappa", a.kappa);
        set(model, "variance", a.variance);
        if a.aniso_ratio.is_some() || a.aniso_rotation.is_some() {
            let aniso = object(truth, "aniso")?;
            set(aniso, "ratio", a.aniso_ratio);
            set(aniso, "rotation", a.aniso_rotation);
        }
    }
    deserialize(map)
}

pub fn benchmark_config(a: &BenchmarkArgs) -> CliResult<ExperimentConfig> {
    let mut map = read_object(a.config.as_deref())?;
    set(&mut map, "experiment", a.experiment.as_deref().map(str::to_ascii_lowercase));
    set(&mut map, "reps", a.reps);
    set(&mut map, "seed", a.seed);
    set(&mut map, "p", a.p);
    set(&mut map, "n", a.n);
    set(&mut map, "output_dir", a.output_dir.as_deref().map(|p| p.display().to_string()));
    if !map.contains_key("experiment") {
        return Err(CliError::Config("no experiment given; pass --experiment or set it in the config".into()));
    }
    let cfg: ExperimentConfig = deserialize(map)?;
    cfg.validate()?;
    Ok(cfg)
}
