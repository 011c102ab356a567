use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use conceptrol::control::{AdapterMode, ConceptrolConfig};
use conceptrol::engine::{EngineSpec, NoiseSchedule};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    TextOnly,
    Vanilla,
    Conceptrol,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::TextOnly => "text_only",
            Variant::Vanilla => "vanilla",
            Variant::Conceptrol => "conceptrol",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Conceptrol knobs; unset entries fall back to per-mode defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConceptrolSettings {
    /// Also the scale of the `vanilla` variant.
    pub lambda: f64,
    pub warmup_ratio: Option<f64>,
    pub suppression_epsilon: f64,
    pub concept_block: Option<usize>,
}

impl Default for ConceptrolSettings {
    fn default() -> Self {
        Self {
            lambda: ConceptrolConfig::DEFAULT_LAMBDA,
            warmup_ratio: None,
            suppression_epsilon: ConceptrolConfig::DEFAULT_SUPPRESSION_EPSILON,
            concept_block: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmitConfig {
    pub images: bool,
    pub traces: bool,
    pub csv: bool,
}

impl Default for EmitConfig {
    fn default() -> Self {
        Self {
            images: true,
            traces: true,
            csv: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub threshold: f64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self { threshold: 0.95 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: AdapterMode,
    pub engine: EngineSpec,
    pub schedule: ScheduleConfig,
    pub conceptrol: ConceptrolSettings,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
    pub emit: EmitConfig,
    pub transfer: TransferConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: AdapterMode::Direct,
            engine: EngineSpec::default(),
            schedule: ScheduleConfig::default(),
            conceptrol: ConceptrolSettings::default(),
            variants: vec![Variant::TextOnly, Variant::Vanilla, Variant::Conceptrol],
            seeds: vec![0],
            output_dir: None,
            emit: EmitConfig::default(),
            transfer: TransferConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults, then the JSON file, then each `key=value` override in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut value = serde_json::to_value(Self::default()).expect("default config serializes");
        if let Some(path) = path {
            let text = fs::read_to_string(path).map_err(|e| CliError::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            let file: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::config("config", format!("{}: {e}", path.display())))?;
            merge(&mut value, file);
        }
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| CliError::config(item, "override must look like key=value"))?;
            set_path(&mut value, key.trim(), parse_scalar(raw.trim()))?;
        }
        serde_json::from_value(value).map_err(|e| CliError::config("config", e.to_string()))
    }

    pub fn concept_block(&self) -> usize {
        self.conceptrol
            .concept_block
            .unwrap_or(self.engine.planted_block)
    }

    pub fn conceptrol_config(&self) -> ConceptrolConfig {
        let mut cfg = ConceptrolConfig::for_mode(self.mode, self.concept_block());
        cfg.lambda = self.conceptrol.lambda;
        cfg.suppression_epsilon = self.conceptrol.suppression_epsilon;
        if let Some(w) = self.conceptrol.warmup_ratio {
            cfg.warmup_ratio = w;
        }
        cfg
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule, CliError> {
        NoiseSchedule::linear(
            self.schedule.steps,
            self.schedule.beta_start,
            self.schedule.beta_end,
        )
        .map_err(|e| CliError::config("schedule", e.to_string()))
    }

    /// Checks every module precondition, naming the first offending key.
    pub fn validate(&self) -> Result<(), CliError> {
        self.engine
            .validate()
            .map_err(|(key, msg)| CliError::config(format!("engine.{key}"), msg))?;
        if self.schedule.steps == 0 {
            return Err(CliError::config("schedule.steps", "must be at least 1"));
        }
        let (b0, b1) = (self.schedule.beta_start, self.schedule.beta_end);
        if !(b0 > 0.0 && b0 < 1.0) {
            return Err(CliError::config(
                "schedule.beta_start",
                format!("must lie in (0, 1), got {b0}"),
            ));
        }
        if !(b1 >= b0 && b1 < 1.0) {
            return Err(CliError::config(
                "schedule.beta_end",
                format!("must lie in [beta_start, 1), got {b1}"),
            ));
        }
        self.conceptrol_config()
            .validate()
            .map_err(|(key, msg)| CliError::config(format!("conceptrol.{key}"), msg))?;
        if self.concept_block() >= self.engine.blocks {
            return Err(CliError::config(
                "conceptrol.concept_block",
                format!("must be < engine.blocks ({})", self.engine.blocks),
            ));
        }
        if self.seeds.is_empty() {
            return Err(CliError::config("seeds", "need at least one seed"));
        }
        if self.variants.is_empty() {
            return Err(CliError::config("variants", "need at least one variant"));
        }
        if !self.transfer.threshold.is_finite() {
            return Err(CliError::config("transfer.threshold", "must be finite"));
        }
        Ok(())
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
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

/// JSON literal if it parses as one, otherwise a bare string.
fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(key, "empty path segment"));
    }
    for part in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::config(key, format!("`{part}` is not a section")))?;
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| CliError::config(key, "parent is not a section"))?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// `1,2,5` or a half-open range `0..5`.
pub fn parse_seeds(raw: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::config("seeds", format!("cannot parse `{raw}`"));
    if let Some((a, b)) = raw.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        return Ok((a..b).collect());
    }
    raw.split(',')
        .map(|s| s.trim().parse().map_err(|_| bad()))
        .collect()
}
