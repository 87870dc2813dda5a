//! Neuron Adjust: inference-time probabilistic reflection of selected
//! neurons' pre-activations from the forgetting Gaussian onto the retaining
//! Gaussian.
//!
//! For a selected neuron with retaining `N(mu_r, sigma_r)` and forgetting
//! `N(mu_f, sigma_f)`, a pre-activation `v` is left alone when
//! `p_r = pdf(v; mu_r, sigma_r) >= p_f = pdf(v; mu_f, sigma_f)`. Otherwise,
//! with probability `p_adj = p_f / (p_r + p_f)`, it is replaced by
//!
//! ```text
//! 2 mu_r - ((v - mu_f) / sigma_f * sigma_r + mu_r)
//! ```
//!
//! i.e. its forgetting z-score is mapped onto the retaining distribution and
//! mirrored about `mu_r`. Draws come from [`crate::rng::CounterRng`] keyed by
//! `(seed, stream, step, layer, neuron)`, so a profile replays identically.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussian_stats::{
    check_paired, gaussian_pdf, rank_neurons, NeuronRef, RankMode, SkillDistribution, StatsError,
    DEFAULT_STD_FLOOR,
};
use crate::rng::CounterRng;

pub const NAPROF_SCHEMA: &str = "naprof/1";
pub const NAPROF_EXTENSION: &str = "naprof.json";

#[derive(Debug, Error)]
pub enum AdjustError {
    #[error("ratio must lie in (0, 1], got {0}")]
    InvalidRatio(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Stats(StatsError),
    #[error("invalid profile file: {0}")]
    Schema(String),
}

impl From<StatsError> for AdjustError {
    fn from(e: StatsError) -> Self {
        match e {
            StatsError::InvalidRatio(r) => AdjustError::InvalidRatio(r),
            StatsError::ShapeMismatch(m) => AdjustError::ShapeMismatch(m),
            other => AdjustError::Stats(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronAdjustParams {
    pub mu_r: f64,
    pub sigma_r: f64,
    pub mu_f: f64,
    pub sigma_f: f64,
}

impl NeuronAdjustParams {
    /// Builds parameters with both stds raised to at least `std_floor`.
    pub fn new(mu_r: f64, sigma_r: f64, mu_f: f64, sigma_f: f64, std_floor: f64) -> Self {
        Self {
            mu_r,
            sigma_r: sigma_r.max(std_floor),
            mu_f,
            sigma_f: sigma_f.max(std_floor),
        }
    }

    /// `(p_r, p_f, p_adj)` for a pre-activation value.
    pub fn probabilities(&self, v: f64) -> (f64, f64, f64) {
        let p_r = gaussian_pdf(v, self.mu_r, self.sigma_r);
        let p_f = gaussian_pdf(v, self.mu_f, self.sigma_f);
        let total = p_r + p_f;
        // an underflowed total means both tails are negligible: no-op
        let p_adj = if p_r < p_f && total > 0.0 {
            p_f / total
        } else {
            0.0
        };
        (p_r, p_f, p_adj)
    }

    /// The reflected value the adjustment writes when it fires.
    pub fn reflect(&self, v: f64) -> f64 {
        2.0 * self.mu_r - ((v - self.mu_f) / self.sigma_f * self.sigma_r + self.mu_r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdjustDecision {
    /// `1 - p_adj`.
    pub kept_probability: f64,
    pub p_r: f64,
    pub p_f: f64,
    pub adjusted: bool,
    pub value_out: f64,
}

/// One Neuron Adjust step for a single value, given a uniform draw
/// `u` in `[0, 1)`. Fires iff `u < p_adj`.
pub fn adjust_value(v: f64, params: &NeuronAdjustParams, u: f64) -> AdjustDecision {
    let (p_r, p_f, p_adj) = params.probabilities(v);
    let adjusted = p_adj > 0.0 && u < p_adj;
    AdjustDecision {
        kept_probability: 1.0 - p_adj,
        p_r,
        p_f,
        adjusted,
        value_out: if adjusted { params.reflect(v) } else { v },
    }
}

/// Frequency with which [`adjust_value`] fires over `trials` independent
/// draws. Panics if `trials == 0`.
pub fn empirical_adjust_rate(params: &NeuronAdjustParams, v: f64, trials: u64, seed: u64) -> f64 {
    assert!(trials >= 1, "trials must be >= 1");
    let rng = CounterRng::new(seed);
    let fired = (0..trials)
        .filter(|&t| adjust_value(v, params, rng.uniform(&[0, t, 0, 0])).adjusted)
        .count();
    fired as f64 / trials as f64
}

/// Identifies one position of one inference stream in the RNG key.
/// Concurrent streams must use distinct `stream` values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RngKey {
    pub stream: u64,
    pub step: u64,
}

impl RngKey {
    pub fn new(stream: u64, step: u64) -> Self {
        Self { stream, step }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AdjustStats {
    /// Selected neurons visited.
    pub considered: usize,
    /// Neurons whose value was replaced.
    pub fired: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileOptions {
    pub std_floor: f64,
    pub rank_mode: RankMode,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self {
            std_floor: DEFAULT_STD_FLOOR,
            rank_mode: RankMode::Signed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuronAdjustProfile {
    pub ratio: f64,
    pub seed: u64,
    pub std_floor: f64,
    pub rank_mode: RankMode,
    layer_widths: BTreeMap<usize, usize>,
    selected: BTreeMap<NeuronRef, NeuronAdjustParams>,
}

#[derive(Serialize, Deserialize)]
struct ProfileNeuron {
    layer: usize,
    index: usize,
    #[serde(flatten)]
    params: NeuronAdjustParams,
}

#[derive(Serialize, Deserialize)]
struct ProfileFile {
    schema: String,
    beta: f64,
    seed: u64,
    std_floor: f64,
    rank_mode: RankMode,
    layer_widths: BTreeMap<usize, usize>,
    neurons: Vec<ProfileNeuron>,
}

/// Selects the top `ratio` neurons by mean difference and records both
/// Gaussians for each.
pub fn build_profile(
    forget: &[SkillDistribution],
    retain: &[SkillDistribution],
    ratio: f64,
    seed: u64,
) -> Result<NeuronAdjustProfile, AdjustError> {
    build_profile_with(forget, retain, ratio, seed, ProfileOptions::default())
}

pub fn build_profile_with(
    forget: &[SkillDistribution],
    retain: &[SkillDistribution],
    ratio: f64,
    seed: u64,
    options: ProfileOptions,
) -> Result<NeuronAdjustProfile, AdjustError> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(AdjustError::InvalidRatio(ratio));
    }
    check_paired(forget, retain)?;
    let chosen = rank_neurons(forget, retain, ratio, options.rank_mode)?;
    let by_layer: BTreeMap<usize, (&SkillDistribution, &SkillDistribution)> = forget
        .iter()
        .zip(retain)
        .map(|(f, r)| (f.layer, (f, r)))
        .collect();
    let selected = chosen
        .into_iter()
        .map(|n| {
            let (f, r) = by_layer[&n.layer];
            let params = NeuronAdjustParams::new(
                r.mean[n.index],
                r.std[n.index],
                f.mean[n.index],
                f.std[n.index],
                options.std_floor,
            );
            (n, params)
        })
        .collect();
    Ok(NeuronAdjustProfile {
        ratio,
        seed,
        std_floor: options.std_floor,
        rank_mode: options.rank_mode,
        layer_widths: forget.iter().map(|f| (f.layer, f.width())).collect(),
        selected,
    })
}

impl NeuronAdjustProfile {
    /// A profile that selects nothing; every adjustment is a no-op.
    pub fn empty(seed: u64) -> Self {
        Self {
            ratio: 0.0,
            seed,
            std_floor: DEFAULT_STD_FLOOR,
            rank_mode: RankMode::Signed,
            layer_widths: BTreeMap::new(),
            selected: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn selected(&self) -> impl Iterator<Item = (&NeuronRef, &NeuronAdjustParams)> {
        self.selected.iter()
    }

    pub fn params(&self, neuron: NeuronRef) -> Option<&NeuronAdjustParams> {
        self.selected.get(&neuron)
    }

    /// Returns the same profile with a different seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn layer_entries(
        &self,
        layer: usize,
    ) -> impl Iterator<Item = (&NeuronRef, &NeuronAdjustParams)> {
        self.selected.range(
            NeuronRef { layer, index: 0 }..=NeuronRef {
                layer,
                index: usize::MAX,
            },
        )
    }

    fn check_width(&self, layer: usize, got: usize) -> Result<(), AdjustError> {
        match self.layer_widths.get(&layer) {
            Some(&w) if w != got => Err(AdjustError::ShapeMismatch(format!(
                "layer {layer} has width {w}, got vector of length {got}"
            ))),
            _ => Ok(()),
        }
    }

    /// Uniform draw used for `(layer, neuron)` at `key`.
    pub fn draw(&self, layer: usize, neuron: usize, key: RngKey) -> f64 {
        CounterRng::new(self.seed).uniform(&[key.stream, key.step, layer as u64, neuron as u64])
    }

    /// Decision for one selected neuron, or `None` if it is not selected.
    pub fn decide(&self, neuron: NeuronRef, v: f64, key: RngKey) -> Option<AdjustDecision> {
        self.selected
            .get(&neuron)
            .map(|p| adjust_value(v, p, self.draw(neuron.layer, neuron.index, key)))
    }

    /// Adjusts one layer's pre-activations in place. Only selected neurons
    /// can change.
    pub fn adjust_in_place(
        &self,
        layer: usize,
        pre_activations: &mut [f64],
        key: RngKey,
    ) -> Result<AdjustStats, AdjustError> {
        self.check_width(layer, pre_activations.len())?;
        let rng = CounterRng::new(self.seed);
        let mut stats = AdjustStats::default();
        let len = pre_activations.len();
        for (n, params) in self.layer_entries(layer) {
            let slot = pre_activations.get_mut(n.index).ok_or_else(|| {
                AdjustError::ShapeMismatch(format!(
                    "neuron {} outside vector of length {len}",
                    n.index
                ))
            })?;
            let u = rng.uniform(&[key.stream, key.step, layer as u64, n.index as u64]);
            let d = adjust_value(*slot, params, u);
            stats.considered += 1;
            if d.adjusted {
                stats.fired += 1;
                *slot = d.value_out;
            }
        }
        Ok(stats)
    }

    pub fn adjust_vector(
        &self,
        layer: usize,
        pre_activations: &[f64],
        key: RngKey,
    ) -> Result<Vec<f64>, AdjustError> {
        let mut out = pre_activations.to_vec();
        self.adjust_in_place(layer, &mut out, key)?;
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        let file = ProfileFile {
            schema: NAPROF_SCHEMA.into(),
            beta: self.ratio,
            seed: self.seed,
            std_floor: self.std_floor,
            rank_mode: self.rank_mode,
            layer_widths: self.layer_widths.clone(),
            neurons: self
                .selected
                .iter()
                .map(|(n, p)| ProfileNeuron {
                    layer: n.layer,
                    index: n.index,
                    params: *p,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("profile serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, AdjustError> {
        let file: ProfileFile =
            serde_json::from_str(s).map_err(|e| AdjustError::Schema(e.to_string()))?;
        if file.schema != NAPROF_SCHEMA {
            return Err(AdjustError::Schema(format!(
                "expected schema {NAPROF_SCHEMA}, found {}",
                file.schema
            )));
        }
        let mut selected = BTreeMap::new();
        for n in file.neurons {
            let width = file.layer_widths.get(&n.layer).copied().ok_or_else(|| {
                AdjustError::Schema(format!("neuron in unknown layer {}", n.layer))
            })?;
            if n.index >= width {
                return Err(AdjustError::Schema(format!(
                    "neuron index {} >= layer {} width {width}",
                    n.index, n.layer
                )));
            }
            if !(n.params.sigma_r >= file.std_floor && n.params.sigma_f >= file.std_floor) {
                return Err(AdjustError::Schema(format!(
                    "neuron ({}, {}) has std below std_floor",
                    n.layer, n.index
                )));
            }
            selected.insert(
                NeuronRef {
                    layer: n.layer,
                    index: n.index,
                },
                n.params,
            );
        }
        Ok(Self {
            ratio: file.beta,
            seed: file.seed,
            std_floor: file.std_floor,
            rank_mode: file.rank_mode,
            layer_widths: file.layer_widths,
            selected,
        })
    }
}
