//! Resolved run configurations. Each command starts from its defaults,
//! overlays an optional TOML or JSON file, then command-line flags. The
//! resolved value is written next to the outputs and can be passed back
//! with `--config` to rerun the command.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use vardecomp::data::ColumnSchema;
use vardecomp::simulation::{Estimator, MechanismMode, SimConfig};
use vardecomp::{AssignmentStructure, OutcomeKind};

pub const SEED_ENV: &str = "VARDECOMP_SEED";
pub const DEFAULT_SEED: u64 = 1;

/// Reads a config file into a JSON object (TOML unless the extension is `.json`).
pub fn read_file(path: &Path) -> Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let value: Value = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        serde_json::from_str(&text).with_context(|| format!("parsing JSON config {}", path.display()))?
    } else {
        toml::from_str(&text).with_context(|| format!("parsing TOML config {}", path.display()))?
    };
    match value {
        Value::Object(map) => Ok(map),
        _ => bail!("config {} must be a table", path.display()),
    }
}

/// File values, then flags; the seed falls back to `VARDECOMP_SEED` when
/// neither sets it.
pub fn resolve<T: DeserializeOwned>(file: Option<&Path>, flags: Vec<(&str, Value)>) -> Result<T> {
    let mut map = match file {
        Some(p) => read_file(p)?,
        None => Map::new(),
    };
    for (key, value) in flags {
        map.insert(key.to_string(), value);
    }
    if !map.contains_key("seed") {
        let seed = match std::env::var(SEED_ENV) {
            Ok(s) => s.trim().parse::<u64>().with_context(|| format!("{SEED_ENV} must be an unsigned integer"))?,
            Err(_) => DEFAULT_SEED,
        };
        map.insert("seed".into(), Value::from(seed));
    }
    serde_json::from_value(Value::Object(map)).context("invalid configuration")
}

/// Collects `Some` flag values as overrides.
#[derive(Default)]
pub struct Flags(pub Vec<(&'static str, Value)>);

impl Flags {
    pub fn set<V: Serialize>(&mut self, key: &'static str, v: Option<V>) -> &mut Self {
        if let Some(v) = v {
            self.0.push((key, serde_json::to_value(v).expect("flag values serialise")));
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub n: usize,
    pub m: usize,
    pub q: usize,
    pub seed: u64,
    pub outcome: OutcomeKind,
    pub effect_sd_hospital: f64,
    pub effect_sd_surgeon: f64,
    pub assign_intercept_sd: f64,
    pub assign_coef_sd: f64,
    pub intercept: f64,
    pub beta: [f64; 2],
    /// Monte Carlo sample size for the true components; 0 skips them.
    pub n_mc: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        let s = SimConfig::default();
        Self {
            n: s.n,
            m: s.m,
            q: s.q,
            seed: DEFAULT_SEED,
            outcome: s.outcome_kind,
            effect_sd_hospital: s.effect_sd_hospital,
            effect_sd_surgeon: s.effect_sd_surgeon,
            assign_intercept_sd: s.assign_intercept_sd,
            assign_coef_sd: s.assign_coef_sd,
            intercept: s.intercept,
            beta: s.beta,
            n_mc: 200_000,
        }
    }
}

impl SimulateConfig {
    pub fn sim(&self) -> SimConfig {
        SimConfig {
            n: self.n,
            m: self.m,
            q: self.q,
            seed: self.seed,
            effect_sd_hospital: self.effect_sd_hospital,
            effect_sd_surgeon: self.effect_sd_surgeon,
            assign_intercept_sd: self.assign_intercept_sd,
            assign_coef_sd: self.assign_coef_sd,
            intercept: self.intercept,
            beta: self.beta,
            outcome_kind: self.outcome,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum MethodChoice {
    /// Model-based four-way decomposition.
    Model,
    /// Semi-parametric four-way decomposition of the empirical variance.
    Semi,
    /// Three-way decomposition (no surgeon component).
    Threeway,
    /// Four-way decomposition under a hypothetical assignment.
    Hypothetical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TargetChoice {
    Uniform,
    VolumePreserving,
    Observed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ResidualChoice {
    ModelBased,
    BySubtraction,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecomposeConfig {
    pub data: String,
    pub seed: u64,
    pub columns: ColumnSchema,
    pub methods: Vec<MethodChoice>,
    pub target: TargetChoice,
    /// Residual estimator for the model-based and three-way decompositions.
    pub residual: ResidualChoice,
    pub assignment: AssignmentStructure,
    pub reml: bool,
    /// Posterior draws for intervals; 0 skips them.
    pub bootstrap: usize,
    pub level: f64,
    /// Redraw random effects in the parametric bootstrap.
    pub redraw_effects: bool,
    pub ridge: f64,
}

impl Default for DecomposeConfig {
    fn default() -> Self {
        Self {
            data: String::new(),
            seed: DEFAULT_SEED,
            columns: ColumnSchema::default(),
            methods: vec![MethodChoice::Model],
            target: TargetChoice::Uniform,
            residual: ResidualChoice::ModelBased,
            assignment: AssignmentStructure::Joint,
            reml: false,
            bootstrap: 0,
            level: 0.95,
            redraw_effects: true,
            ridge: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub n: usize,
    pub m: usize,
    pub q: usize,
}

impl Scenario {
    pub fn label(&self) -> String {
        format!("n{}_m{}_q{}", self.n, self.m, self.q)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplicateConfig {
    pub seed: u64,
    pub replications: usize,
    pub scenarios: Vec<Scenario>,
    pub estimators: Vec<Estimator>,
    pub mechanism: MechanismMode,
    pub n_mc: usize,
    pub assignment: AssignmentStructure,
    pub outcome: OutcomeKind,
    pub effect_sd_hospital: f64,
    pub effect_sd_surgeon: f64,
    pub assign_intercept_sd: f64,
    pub assign_coef_sd: f64,
    pub intercept: f64,
    pub beta: [f64; 2],
}

impl Default for ReplicateConfig {
    fn default() -> Self {
        let s = SimConfig::default();
        Self {
            seed: DEFAULT_SEED,
            replications: 200,
            scenarios: vec![
                Scenario { n: 2000, m: 5, q: 25 },
                Scenario { n: 5000, m: 5, q: 25 },
                Scenario { n: 2000, m: 5, q: 50 },
            ],
            estimators: vec![Estimator::FourWay, Estimator::ThreeWay, Estimator::SemiParametric],
            mechanism: MechanismMode::Fixed,
            n_mc: 200_000,
            assignment: AssignmentStructure::Joint,
            outcome: s.outcome_kind,
            effect_sd_hospital: s.effect_sd_hospital,
            effect_sd_surgeon: s.effect_sd_surgeon,
            assign_intercept_sd: s.assign_intercept_sd,
            assign_coef_sd: s.assign_coef_sd,
            intercept: s.intercept,
            beta: s.beta,
        }
    }
}

impl ReplicateConfig {
    pub fn sim(&self, sc: &Scenario) -> SimConfig {
        SimConfig {
            n: sc.n,
            m: sc.m,
            q: sc.q,
            seed: self.seed,
            effect_sd_hospital: self.effect_sd_hospital,
            effect_sd_surgeon: self.effect_sd_surgeon,
            assign_intercept_sd: self.assign_intercept_sd,
            assign_coef_sd: self.assign_coef_sd,
            intercept: self.intercept,
            beta: self.beta,
            outcome_kind: self.outcome,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub seed: u64,
    /// Directory of instance files; empty uses the bundled fixtures.
    pub fixtures: String,
    pub tolerance: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { seed: DEFAULT_SEED, fixtures: String::new(), tolerance: 1e-10 }
    }
}
