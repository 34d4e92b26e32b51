//! Run configuration: TOML file, `--seed`, then dotted `--key value` overrides.

use std::fs;
use std::path::Path;

use dmsva_core::evaluator::{EvalOptions, MIN_PROBES};
use dmsva_core::synthgen::{mode_counts, DEFAULT_MODE_MIX, DEFAULT_N_SAMPLES};
use dmsva_core::verify::{GradcheckOptions, LossComponent};
use dmsva_core::{TrainConfig, WorldSpec};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::Failure;

pub const ECHO_FILE: &str = "resolved_config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub world: WorldSpec,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub ablate: AblateConfig,
    pub gradcheck: GradcheckConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Signed so that a negative count is reported as a config error rather than a parse error.
    pub n_samples: i64,
    /// Proportions of standard, same-character and different-character pairs.
    pub mode_mix: [f64; 3],
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_samples: DEFAULT_N_SAMPLES as i64, mode_mix: DEFAULT_MODE_MIX, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub n_values: Vec<usize>,
    /// Any of `dmsva`, `attn_fusion`, `concat_fusion`. Concat fusion has no slots and runs once.
    pub models: Vec<String>,
}

pub const ABLATE_MODELS: [&str; 3] = ["dmsva", "attn_fusion", "concat_fusion"];

impl Default for AblateConfig {
    fn default() -> Self {
        Self { n_values: vec![32, 64, 128, 256], models: ABLATE_MODELS.map(String::from).to_vec() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub trials: usize,
    pub seed: u64,
    pub temperature: f64,
    pub detach_teacher: bool,
    /// Loss component whose analytic gradient is negated, e.g. `"L_align"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fault: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        let d = GradcheckOptions::default();
        Self { trials: d.trials, seed: d.seed, temperature: d.temperature, detach_teacher: d.detach_teacher, fault: None }
    }
}

impl GradcheckConfig {
    pub fn options(&self, train: &TrainConfig) -> GradcheckOptions {
        GradcheckOptions {
            trials: self.trials,
            seed: self.seed,
            temperature: self.temperature,
            detach_teacher: self.detach_teacher,
            weights: train.loss_weights,
            fault: self.fault.as_deref().and_then(LossComponent::parse),
            ..GradcheckOptions::default()
        }
    }
}

impl RunConfig {
    /// Merges the optional file, the common seed and the dotted overrides, then validates.
    pub fn resolve(file: Option<&Path>, seed: Option<u64>, overrides: &[(String, String)]) -> Result<Self, Failure> {
        let mut table = match file {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Failure::Input(format!("cannot read config {}: {e}", path.display())))?;
                text.parse::<Table>().map_err(|e| Failure::Input(format!("config {}: {e}", path.display())))?
            }
            None => Table::new(),
        };
        if let Some(seed) = seed {
            let seed = i64::try_from(seed).map_err(|_| Failure::Input(format!("--seed {seed} does not fit a TOML integer")))?;
            for key in ["world.seed", "data.seed", "train.seed", "gradcheck.seed"] {
                set_path(&mut table, key, Value::Integer(seed))?;
            }
        }
        for (key, raw) in overrides {
            set_path(&mut table, key, parse_value(raw))?;
        }
        let cfg: RunConfig = Value::Table(table).try_into().map_err(|e: toml::de::Error| Failure::Input(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        let field = |name: &str, reason: String| Failure::Input(format!("invalid config field `{name}`: {reason}"));
        self.world.validate().map_err(|e| Failure::Input(format!("world: {e}")))?;
        self.train.validate().map_err(|e| Failure::Input(format!("train: {e}")))?;
        if self.data.n_samples < 1 {
            return Err(field("data.n_samples", format!("must be at least 1, got {}", self.data.n_samples)));
        }
        mode_counts(self.data.n_samples as usize, self.data.mode_mix).map_err(|e| field("data.mode_mix", e.to_string()))?;
        if self.eval.n_probe < MIN_PROBES {
            return Err(field("eval.n_probe", format!("must be at least {MIN_PROBES}, got {}", self.eval.n_probe)));
        }
        if self.ablate.n_values.is_empty() || self.ablate.n_values.contains(&0) {
            return Err(field("ablate.n_values", "needs at least one slot count, each at least 1".into()));
        }
        if let Some(m) = self.ablate.models.iter().find(|m| !ABLATE_MODELS.contains(&m.as_str())) {
            return Err(field("ablate.models", format!("unknown model `{m}`, expected one of {ABLATE_MODELS:?}")));
        }
        let g = &self.gradcheck;
        if g.trials == 0 {
            return Err(field("gradcheck.trials", "must be at least 1".into()));
        }
        if !(g.temperature.is_finite() && g.temperature > 0.0) {
            return Err(field("gradcheck.temperature", format!("must be positive, got {}", g.temperature)));
        }
        if let Some(name) = &g.fault {
            if LossComponent::parse(name).is_none() {
                return Err(field("gradcheck.fault", format!("unknown loss component `{name}`")));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Writes the resolved configuration into `out` before any work starts.
    pub fn echo(&self, out: &Path) -> Result<(), Failure> {
        fs::create_dir_all(out).map_err(|e| Failure::Input(format!("cannot create {}: {e}", out.display())))?;
        fs::write(out.join(ECHO_FILE), self.to_toml()).map_err(|e| Failure::Input(format!("cannot write config echo: {e}")))
    }
}

/// TOML literal if it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<(), Failure> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Failure::Input(format!("malformed override key `{key}`")));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut node = table;
    for p in parents {
        let entry = node.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Failure::Input(format!("override `{key}`: `{p}` is not a section")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}
