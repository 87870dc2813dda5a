//! The TOML run configuration.
//!
//! Unknown keys are rejected so that typos fail loudly; parse errors carry the
//! line and column reported by the `toml` crate.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer};
use skul_core::toy_transformer::{check_disjoint, SyntheticSkillSpec};
use skul_core::{RankMode, ToyConfig, DEFAULT_ABSTENTION_MESSAGE, DEFAULT_STD_FLOOR};

use crate::error::{CliError, Result};

pub const DEFAULT_OUT_DIR: &str = "skul-out";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Output root, relative to the config file.
    pub out_dir: Option<PathBuf>,
    /// Seed of the Neuron Adjust RNG.
    #[serde(default)]
    pub seed: u64,
    pub model: Option<ToyConfig>,
    pub forget: Source,
    pub retain: Source,
    #[serde(default)]
    pub unlearn: UnlearnSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub analyze: AnalyzeSection,
}

/// A probing source: a synthetic skill run through the toy model, or dumps
/// captured elsewhere.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Source {
    pub label: Option<String>,
    pub toy: Option<ToySource>,
    pub dumps: Option<DumpSource>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySource {
    pub alphabet_start: u32,
    pub alphabet_end: u32,
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    pub seed: u64,
    #[serde(default = "default_probe_queries")]
    pub probe_queries: usize,
    #[serde(default = "default_held_out_queries")]
    pub held_out_queries: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpSource {
    pub preact: Option<PathBuf>,
    pub keyvec: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaSpec {
    Auto,
    Fixed(f64),
}

impl fmt::Display for AlphaSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlphaSpec::Auto => f.write_str("auto"),
            AlphaSpec::Fixed(a) => write!(f, "{a}"),
        }
    }
}

impl std::str::FromStr for AlphaSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "auto" {
            return Ok(AlphaSpec::Auto);
        }
        s.parse::<f64>()
            .map(AlphaSpec::Fixed)
            .map_err(|_| format!("expected a number or \"auto\", got `{s}`"))
    }
}

impl<'de> Deserialize<'de> for AlphaSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(a) => Ok(AlphaSpec::Fixed(a)),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnlearnSection {
    pub beta: f64,
    pub alpha: AlphaSpec,
    /// Layers guarded by KSD; defaults to the last layer.
    pub monitored_layers: Option<Vec<usize>>,
    pub rank_mode: RankMode,
    pub std_floor: f64,
    pub abstention_message: String,
}

impl Default for UnlearnSection {
    fn default() -> Self {
        Self {
            beta: 0.015,
            alpha: AlphaSpec::Auto,
            monitored_layers: None,
            rank_mode: RankMode::Signed,
            std_floor: DEFAULT_STD_FLOOR,
            abstention_message: DEFAULT_ABSTENTION_MESSAGE.to_owned(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub max_steps: usize,
    pub repeats: usize,
    /// Per-token guard overhead allowed before the timing report flags it.
    pub overhead_budget_ns: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            max_steps: 16,
            repeats: 1,
            overhead_budget_ns: 1.0e6,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeSection {
    pub alpha_grid: Option<Vec<f64>>,
    pub histogram_bins: usize,
    /// Top-ranked neurons to histogram.
    pub histogram_neurons: usize,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        Self {
            alpha_grid: None,
            histogram_bins: 20,
            histogram_neurons: 4,
        }
    }
}

fn default_min_len() -> usize {
    8
}
fn default_max_len() -> usize {
    16
}
fn default_probe_queries() -> usize {
    500
}
fn default_held_out_queries() -> usize {
    200
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Forget,
    Retain,
}

impl Role {
    pub const BOTH: [Role; 2] = [Role::Forget, Role::Retain];

    pub fn key(self) -> &'static str {
        match self {
            Role::Forget => "forget",
            Role::Retain => "retain",
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub beta: Option<f64>,
    pub alpha: Option<AlphaSpec>,
    pub seed: Option<u64>,
    pub repeats: Option<usize>,
}

/// A validated configuration together with where it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub cfg: RunConfig,
    pub path: PathBuf,
    pub bytes: Vec<u8>,
}

impl LoadedConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| CliError::Config(format!("{}: not UTF-8: {e}", path.display())))?;
        let mut cfg =
            parse(text).map_err(|m| CliError::Config(format!("{}: {m}", path.display())))?;
        cfg.apply(overrides);
        cfg.validate()
            .map_err(|m| CliError::Config(format!("{}: {m}", path.display())))?;
        Ok(Self {
            cfg,
            path: path.to_owned(),
            bytes,
        })
    }

    pub fn dir(&self) -> &Path {
        self.path.parent().unwrap_or(Path::new("."))
    }

    /// Resolves a path written in the config relative to the config file.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_owned()
        } else {
            self.dir().join(p)
        }
    }

    pub fn source(&self, role: Role) -> &Source {
        match role {
            Role::Forget => &self.cfg.forget,
            Role::Retain => &self.cfg.retain,
        }
    }

    pub fn label(&self, role: Role) -> String {
        self.source(role)
            .label
            .clone()
            .unwrap_or_else(|| role.key().to_owned())
    }
}

impl ToySource {
    pub fn spec(&self, label: String) -> SyntheticSkillSpec {
        SyntheticSkillSpec {
            skill_label: label,
            alphabet_start: self.alphabet_start,
            alphabet_end: self.alphabet_end,
            min_len: self.min_len,
            max_len: self.max_len,
            seed: self.seed,
        }
    }
}

pub fn parse(text: &str) -> Result<RunConfig, String> {
    toml::from_str(text).map_err(|e| e.to_string().trim_end().to_owned())
}

impl RunConfig {
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(b) = o.beta {
            self.unlearn.beta = b;
        }
        if let Some(a) = o.alpha {
            self.unlearn.alpha = a;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(r) = o.repeats {
            self.eval.repeats = r;
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let mut toy_specs = Vec::new();
        for (key, src) in [("forget", &self.forget), ("retain", &self.retain)] {
            match (&src.toy, &src.dumps) {
                (Some(t), None) => {
                    if t.probe_queries == 0 {
                        return Err(format!("[{key}].toy.probe_queries must be at least 1"));
                    }
                    let label = src.label.clone().unwrap_or_else(|| key.to_owned());
                    toy_specs.push(t.spec(label));
                }
                (None, Some(d)) => {
                    if d.preact.is_none() && d.keyvec.is_none() {
                        return Err(format!(
                            "[{key}].dumps needs at least one of `preact` or `keyvec`"
                        ));
                    }
                }
                _ => return Err(format!("[{key}] must set exactly one of `toy` or `dumps`")),
            }
            if let Some(l) = &src.label {
                if l.is_empty() || l.contains(['/', '\\']) || l.starts_with('.') {
                    return Err(format!("[{key}].label `{l}` is not a valid file stem"));
                }
            }
        }
        if self.forget.label.as_deref().unwrap_or("forget")
            == self.retain.label.as_deref().unwrap_or("retain")
        {
            return Err("forget and retain labels must differ".into());
        }
        if !toy_specs.is_empty() {
            let model = self
                .model
                .as_ref()
                .ok_or("[model] is required when a source uses `toy`")?;
            model.validate().map_err(|e| format!("[model]: {e}"))?;
            for s in &toy_specs {
                if s.alphabet_end > model.vocab_size as u32 {
                    return Err(format!(
                        "`{}` alphabet ends at {} but the vocabulary has {} tokens",
                        s.skill_label, s.alphabet_end, model.vocab_size
                    ));
                }
                if s.max_len > model.max_positions {
                    return Err(format!(
                        "`{}` max_len {} exceeds model max_positions {}",
                        s.skill_label, s.max_len, model.max_positions
                    ));
                }
                skul_core::make_skill_dataset(s, 0).map_err(|e| e.to_string())?;
            }
            check_disjoint(&toy_specs).map_err(|e| e.to_string())?;
        }
        let u = &self.unlearn;
        if !(u.beta > 0.0 && u.beta <= 1.0) {
            return Err(format!("[unlearn].beta must lie in (0, 1], got {}", u.beta));
        }
        if let AlphaSpec::Fixed(a) = u.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(format!("[unlearn].alpha must be > 0 or \"auto\", got {a}"));
            }
        }
        if !(u.std_floor > 0.0 && u.std_floor.is_finite()) {
            return Err(format!(
                "[unlearn].std_floor must be > 0, got {}",
                u.std_floor
            ));
        }
        if let (Some(layers), Some(m)) = (&u.monitored_layers, &self.model) {
            if layers.is_empty() {
                return Err("[unlearn].monitored_layers is empty".into());
            }
            if let Some(&l) = layers.iter().find(|&&l| l >= m.num_layers) {
                return Err(format!(
                    "[unlearn].monitored_layers: layer {l} does not exist (model has {})",
                    m.num_layers
                ));
            }
        }
        if self.eval.max_steps == 0 {
            return Err("[eval].max_steps must be at least 1".into());
        }
        if self.eval.repeats == 0 {
            return Err("[eval].repeats must be at least 1".into());
        }
        if let Some(g) = &self.analyze.alpha_grid {
            if g.is_empty()
                || g.iter().any(|a| !(*a >= 0.0 && a.is_finite()))
                || g.windows(2)
                    .any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less))
            {
                return Err(
                    "[analyze].alpha_grid must be non-negative and strictly increasing".into(),
                );
            }
        }
        if self.analyze.histogram_bins == 0 {
            return Err("[analyze].histogram_bins must be at least 1".into());
        }
        Ok(())
    }
}
