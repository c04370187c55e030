//! Run configuration: built-in defaults, then a JSON config file, then
//! `key=value` overrides, then explicit command-line flags.

use std::path::{Path, PathBuf};

use attnlab::backbone::BackboneConfig;
use attnlab::blocks::AttentionKind;
use attnlab::cost::BenchConfig;
use attnlab::data::{Normalization, SyntheticConfig};
use attnlab::eval::Metric;
use attnlab::nas::SpeedModel;
use attnlab::training::TrainConfig;
use attnlab::SCHEMA_VERSION;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Base seed for model initialization, training and benchmark input.
    pub seed: u64,
    /// Insertion plan, e.g. `cnl@6,8,14` or `se@3+nl@9`.
    pub plan: String,
    pub backbone: BackboneConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    pub eval: EvalConfig,
    pub search: SearchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synthetic = SyntheticConfig::default();
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            plan: "none".into(),
            backbone: BackboneConfig::desk(synthetic.n_train_ids),
            data: DataConfig::default(),
            train: TrainConfig::desk(),
            bench: BenchConfig::default(),
            eval: EvalConfig::default(),
            search: SearchConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Image folder with a manifest; the synthetic generator is used when unset.
    pub folder: Option<PathBuf>,
    /// Manifest path, defaulting to the manifest inside `folder`.
    pub manifest: Option<PathBuf>,
    pub normalization: Normalization,
    pub synthetic: SyntheticConfig,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Query and gallery must share identities.
    #[default]
    Standard,
    /// Additionally, train and test identities are disjoint and every test
    /// identity is seen by at least two cameras.
    RoreasShape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub metric: Metric,
    pub batch_size: usize,
    pub protocol: Protocol,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metric: Metric::Cosine,
            batch_size: 64,
            protocol: Protocol::Standard,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeedSource {
    /// Batches/sec derived from the MAC count; reproducible.
    #[default]
    Analytic,
    /// Wall-clock benchmark with the `bench` settings.
    Measured,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub kinds: Vec<AttentionKind>,
    /// Positions to sweep; every position of the backbone when unset.
    pub positions: Option<Vec<usize>>,
    pub reduction: usize,
    pub max_blocks: usize,
    pub seeds: Vec<u64>,
    /// Cap on trained combinations.
    pub budget: Option<usize>,
    pub speed: SpeedSource,
    pub macs_per_second: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        let SpeedModel::Analytic { macs_per_second, .. } = SpeedModel::default() else {
            unreachable!("analytic speed model is the default")
        };
        Self {
            kinds: AttentionKind::ALL.to_vec(),
            positions: None,
            // the desk stem has 8 channels
            reduction: 8,
            max_blocks: 3,
            seeds: vec![0, 1, 2],
            budget: None,
            speed: SpeedSource::Analytic,
            macs_per_second,
        }
    }
}

/// Merge `over` into `base`, refusing keys that `base` does not have.
fn merge(base: &mut Value, over: Value, path: &str) -> Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &here)?,
                    None => return Err(CliError::Usage(format!("unknown config key {here:?}"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// `a.b.c=value` as a nested object. The value is read as JSON when it
/// parses, and as a plain string otherwise.
fn override_value(spec: &str) -> Result<Value> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override {spec:?} is not KEY=VALUE")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Usage(format!("override {spec:?} has an empty key")));
    }
    let mut v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    for part in key.rsplit('.') {
        let mut m = serde_json::Map::new();
        m.insert(part.to_string(), v);
        v = Value::Object(m);
    }
    Ok(v)
}

impl RunConfig {
    /// Layer a config file and overrides on top of the defaults.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut v = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let doc: Value =
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            merge(&mut v, doc, "")?;
        }
        for o in overrides {
            merge(&mut v, override_value(o)?, "")?;
        }
        let cfg: RunConfig = serde_json::from_value(v).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::Usage(format!(
                "config schema_version {} unsupported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }
}
