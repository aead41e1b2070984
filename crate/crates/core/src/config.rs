//! TOML scenario configuration.
//!
//! A config is looked up as a literal path first, then inside the directory
//! named by `CQKD_CONFIG_DIR`, then among the bundled configs by stem
//! (`desktop_mu05`, `desktop_mu005`, `fiber1km_mu05`, `fiber1km_mu10`).
//! Overrides use dotted keys, `detectors.efficiency=0.2`, and are applied to
//! the parsed document before it is checked against the schema.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::adversary::AdversarySpec;
use crate::devices::{DetectorSpec, SwitchSpec};
use crate::error::{Error, Result};
use crate::feedback::{LockSettings, PiControllerSpec};
use crate::optics::{ArmLosses, InterferenceSpec, SplitterSpec};
use crate::protocol::{
    FeedbackMode, LiveLock, RunSettings, Scenario, SystemParams, DEFAULT_BLOCK_SLOTS,
    DEFAULT_REP_RATE_HZ,
};

pub const CONFIG_DIR_ENV: &str = "CQKD_CONFIG_DIR";

pub const BUNDLED: &[(&str, &str)] = &[
    ("desktop_mu05", include_str!("../configs/desktop_mu05.toml")),
    (
        "desktop_mu005",
        include_str!("../configs/desktop_mu005.toml"),
    ),
    (
        "fiber1km_mu05",
        include_str!("../configs/fiber1km_mu05.toml"),
    ),
    (
        "fiber1km_mu10",
        include_str!("../configs/fiber1km_mu10.toml"),
    ),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trials_csv: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace_csv: Option<PathBuf>,
    /// Keep every n-th lock sample in the trace file.
    pub trace_stride: usize,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            report: None,
            trials_csv: None,
            trace_csv: None,
            trace_stride: 100,
        }
    }
}

fn default_rep_rate() -> f64 {
    DEFAULT_REP_RATE_HZ
}

fn default_block_slots() -> u64 {
    DEFAULT_BLOCK_SLOTS
}

fn default_interference() -> InterferenceSpec {
    InterferenceSpec {
        static_visibility: 0.98,
        phase_error: 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub mu: f64,
    #[serde(default = "default_rep_rate")]
    pub rep_rate_hz: f64,
    pub n_slots: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub feedback_mode: FeedbackMode,
    /// Worker threads; 0 picks the machine default. Results do not depend on it.
    #[serde(default)]
    pub threads: usize,
    /// Slots per random stream. Results depend on it.
    #[serde(default = "default_block_slots")]
    pub block_slots: u64,
    #[serde(default)]
    pub splitter: SplitterSpec,
    /// Scenario defaults when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub losses: Option<ArmLosses>,
    #[serde(default = "default_interference")]
    pub interference: InterferenceSpec,
    #[serde(default)]
    pub detectors: DetectorSpec,
    #[serde(default)]
    pub switch: SwitchSpec,
    #[serde(default)]
    pub adversary: AdversarySpec,
    #[serde(default)]
    pub lock: LockSettings,
    #[serde(default)]
    pub controller: PiControllerSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario, mu: f64, n_slots: u64) -> Self {
        ScenarioConfig {
            scenario,
            mu,
            rep_rate_hz: DEFAULT_REP_RATE_HZ,
            n_slots,
            seed: 0,
            feedback_mode: FeedbackMode::Ideal,
            threads: 0,
            block_slots: DEFAULT_BLOCK_SLOTS,
            splitter: SplitterSpec::default(),
            losses: None,
            interference: default_interference(),
            detectors: DetectorSpec::default(),
            switch: SwitchSpec::default(),
            adversary: AdversarySpec::none(),
            lock: LockSettings::default(),
            controller: PiControllerSpec::default(),
            output: OutputSpec::default(),
        }
    }

    pub fn bundled(name: &str) -> Result<Self> {
        let text = BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| *t)
            .ok_or_else(|| Error::ConfigNotFound(PathBuf::from(name)))?;
        Self::from_toml_str(text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_table(parse_table(text)?)
    }

    pub fn from_table(table: Table) -> Result<Self> {
        let cfg: ScenarioConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::ConfigSchema(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::ConfigSchema(e.to_string()))
    }

    /// Resolves, parses and overrides a config in one go.
    pub fn load(name: &str, overrides: &[String]) -> Result<Self> {
        let mut table = parse_table(&read_config_text(name)?)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut table = Table::try_from(self).map_err(|e| Error::ConfigSchema(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn validate(&self) -> Result<()> {
        self.system_params().validate()?;
        self.adversary.validate()?;
        self.lock.validate()?;
        self.controller.validate()?;
        // TOML integers are signed 64-bit.
        for (name, v) in [
            ("seed", self.seed),
            ("n_slots", self.n_slots),
            ("block_slots", self.block_slots),
        ] {
            if v > i64::MAX as u64 {
                return Err(Error::param(
                    name,
                    format!("{v} exceeds the config integer range"),
                ));
            }
        }
        if self.block_slots == 0 {
            return Err(Error::param("block_slots", "must be positive"));
        }
        if self.output.trace_stride == 0 {
            return Err(Error::param("output.trace_stride", "must be positive"));
        }
        Ok(())
    }

    pub fn system_params(&self) -> SystemParams {
        SystemParams {
            mu: self.mu,
            rep_rate_hz: self.rep_rate_hz,
            splitter: self.splitter,
            losses: self
                .losses
                .unwrap_or_else(|| self.scenario.default_losses()),
            interference: self.interference,
            detectors: self.detectors,
            switch: self.switch,
            scenario: self.scenario,
        }
    }

    pub fn run_settings(&self) -> RunSettings {
        RunSettings {
            n_slots: self.n_slots,
            seed: self.seed,
            feedback: self.feedback_mode,
            block_slots: self.block_slots,
            threads: self.threads,
        }
    }

    pub fn live_lock(&self) -> LiveLock {
        LiveLock {
            controller: self.controller,
            settings: self.lock,
        }
    }
}

fn parse_table(text: &str) -> Result<Table> {
    text.parse::<Table>()
        .map_err(|e| Error::ConfigSchema(e.to_string()))
}

pub fn read_config_text(name: &str) -> Result<String> {
    let literal = Path::new(name);
    if literal.is_file() {
        return std::fs::read_to_string(literal).map_err(|e| Error::io(literal, e));
    }
    if let Some(dir) = std::env::var_os(CONFIG_DIR_ENV) {
        let dir = PathBuf::from(dir);
        for candidate in [dir.join(name), dir.join(format!("{name}.toml"))] {
            if candidate.is_file() {
                return std::fs::read_to_string(&candidate).map_err(|e| Error::io(candidate, e));
            }
        }
    }
    // Bundled lookup only for bare names, never for a path that went missing.
    let bare = literal.components().count() == 1;
    let stem = literal.file_stem().and_then(|s| s.to_str()).unwrap_or(name);
    BUNDLED
        .iter()
        .find(|(n, _)| bare && *n == stem)
        .map(|(_, t)| t.to_string())
        .ok_or_else(|| Error::ConfigNotFound(literal.to_path_buf()))
}

fn parse_override_value(raw: &str) -> Value {
    let raw = raw.trim();
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Applies `a.b.c=value`. The value is read as a TOML literal and falls back
/// to a bare string. An integer written over a float stays a float.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let bad = |why: &str| Error::Override(spec.to_string(), why.to_string());
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| bad("expected key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').map(str::trim).collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(bad("empty key segment"));
    }
    let (last, parents) = parts
        .split_last()
        .expect("split yields at least one segment");
    let mut node = table;
    for p in parents {
        node = match node
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
        {
            Value::Table(t) => t,
            _ => return Err(bad(&format!("`{p}` is not a section"))),
        };
    }
    let mut value = parse_override_value(raw);
    if let (Some(Value::Float(_)), Value::Integer(i)) = (node.get(*last), &value) {
        value = Value::Float(*i as f64);
    }
    node.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_configs_parse() {
        for (name, _) in BUNDLED {
            let c = ScenarioConfig::bundled(name).unwrap();
            assert!(c.n_slots > 0, "{name}");
        }
        let c = ScenarioConfig::bundled("fiber1km_mu10").unwrap();
        assert_eq!(c.scenario, Scenario::Fiber1km);
        assert_eq!(c.mu, 1.0);
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = ScenarioConfig::from_toml_str(
            "scenario = \"desktop\"\nmu = 0.5\nn_slots = 10\ncolour = 1\n",
        )
        .unwrap_err();
        assert!(matches!(e, Error::ConfigSchema(_)));
        let e = ScenarioConfig::from_toml_str(
            "scenario = \"desktop\"\nmu = 0.5\nn_slots = 10\n[detectors]\nefficacy = 1.0\n",
        )
        .unwrap_err();
        assert!(matches!(e, Error::ConfigSchema(_)));
    }

    #[test]
    fn overrides() {
        let c = ScenarioConfig::bundled("desktop_mu05").unwrap();
        let o = c
            .with_overrides(&[
                "mu=0".into(),
                "detectors.efficiency=1".into(),
                "adversary.kind=intercept_resend".into(),
            ])
            .unwrap();
        assert_eq!(o.mu, 0.0);
        assert_eq!(o.detectors.efficiency, 1.0);
        assert_eq!(
            o.adversary.kind,
            crate::adversary::AttackKind::InterceptResend
        );
        assert!(matches!(
            c.with_overrides(&["mu".into()]),
            Err(Error::Override(..))
        ));
        assert!(matches!(
            c.with_overrides(&["mu.x=1".into()]),
            Err(Error::Override(..))
        ));
        assert!(matches!(
            c.with_overrides(&["mu=-1".into()]),
            Err(Error::Parameter { .. })
        ));
    }

    #[test]
    fn missing_config() {
        assert!(matches!(
            ScenarioConfig::load("/nonexistent/nowhere.toml", &[]),
            Err(Error::ConfigNotFound(_))
        ));
    }
}
