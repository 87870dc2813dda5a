//! Key Space Detection (KSD): hypercube abstention in FFL key space.
//!
//! A skill is summarized by the mean `mu` and population std `sigma` of its
//! probing queries' last-token key vectors at one FFL. The open hypercube
//! `{u | mu - alpha*sigma < u < mu + alpha*sigma}` (strict, element-wise) is
//! registered in a [`KsdProfile`]; during generation every step's last-token
//! key vector at each monitored layer is tested before the step's token is
//! emitted, and the first hit replaces the whole output with the abstention
//! message.

use std::collections::BTreeSet;
use std::error::Error as StdError;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussian_stats::{SkillDistribution, DEFAULT_STD_FLOOR};

pub const DEFAULT_ABSTENTION_MESSAGE: &str = "Your query is not valid.";
pub const KSDPROF_SCHEMA: &str = "ksdprof/1";
pub const KSDPROF_EXTENSION: &str = "ksdprof.json";

pub type EngineError = Box<dyn StdError + Send + Sync>;

#[derive(Debug, Error)]
pub enum KsdError {
    #[error("alpha must be > 0, got {0}")]
    InvalidAlpha(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no alpha gap: forget set needs alpha > {lo}, retain set is entered above alpha {hi}")]
    NoGap { lo: f64, hi: f64 },
    #[error("probe set `{0}` is empty")]
    EmptyProbeSet(&'static str),
    #[error("monitored layer {layer}: cube width {expected}, model key width {got:?}")]
    ModelWidthMismatch {
        layer: usize,
        expected: usize,
        got: Option<usize>,
    },
    #[error("generation engine failed: {0}")]
    Engine(EngineError),
    #[error("invalid KSD profile: {0}")]
    Schema(String),
}

/// Axis-aligned open box `lower < u < upper` in one layer's key space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypercube {
    pub layer: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub alpha: f64,
    #[serde(rename = "label")]
    pub skill_label: String,
}

impl Hypercube {
    pub fn width(&self) -> usize {
        self.lower.len()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (l + u))
            .collect()
    }

    /// Strict membership. Errors if widths differ.
    pub fn contains<T: Copy + Into<f64>>(&self, v: &[T]) -> Result<bool, KsdError> {
        if v.len() != self.width() {
            return Err(KsdError::ShapeMismatch(format!(
                "cube at layer {} has width {}, vector has {}",
                self.layer,
                self.width(),
                v.len()
            )));
        }
        Ok(self.contains_unchecked(v))
    }

    #[inline]
    pub(crate) fn contains_unchecked<T: Copy + Into<f64>>(&self, v: &[T]) -> bool {
        self.lower
            .iter()
            .zip(&self.upper)
            .zip(v)
            .all(|((&lo, &hi), &x)| {
                let x: f64 = x.into();
                lo < x && x < hi
            })
    }
}

/// Strict membership test: `lower_i < v_i < upper_i` for every `i`.
pub fn contains<T: Copy + Into<f64>>(cube: &Hypercube, v: &[T]) -> Result<bool, KsdError> {
    cube.contains(v)
}

/// `mu +/- alpha * max(sigma, floor)` with the default floor.
pub fn build_hypercube(dist: &SkillDistribution, alpha: f64) -> Result<Hypercube, KsdError> {
    build_hypercube_with_floor(dist, alpha, DEFAULT_STD_FLOOR)
}

pub fn build_hypercube_with_floor(
    dist: &SkillDistribution,
    alpha: f64,
    std_floor: f64,
) -> Result<Hypercube, KsdError> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(KsdError::InvalidAlpha(alpha));
    }
    Ok(cube_for_alpha(dist, alpha, std_floor))
}

/// Same as [`build_hypercube_with_floor`] but accepts `alpha == 0` (an empty
/// open cube), as containment sweeps start at zero.
pub(crate) fn cube_for_alpha(dist: &SkillDistribution, alpha: f64, std_floor: f64) -> Hypercube {
    let (lower, upper) = dist
        .mean
        .iter()
        .zip(&dist.std)
        .map(|(&m, &s)| {
            let half = alpha * s.max(std_floor);
            (m - half, m + half)
        })
        .unzip();
    Hypercube {
        layer: dist.layer,
        lower,
        upper,
        alpha,
        skill_label: dist.dataset_label.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detection {
    pub hit: bool,
    pub skill_label: Option<String>,
    pub layer: usize,
    pub step: usize,
}

impl Detection {
    fn miss(layer: usize, step: usize) -> Self {
        Self {
            hit: false,
            skill_label: None,
            layer,
            step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KsdProfile {
    pub cubes: Vec<Hypercube>,
    pub monitored_layers: BTreeSet<usize>,
    pub abstention_message: String,
}

impl Default for KsdProfile {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Serialize, Deserialize)]
struct ProfileFile {
    schema: String,
    #[serde(flatten)]
    profile: KsdProfile,
}

impl KsdProfile {
    pub fn new() -> Self {
        Self {
            cubes: Vec::new(),
            monitored_layers: BTreeSet::new(),
            abstention_message: DEFAULT_ABSTENTION_MESSAGE.to_owned(),
        }
    }

    /// Adds a cube and monitors its layer. Registration order decides which
    /// label is reported when cubes overlap.
    pub fn register(&mut self, cube: Hypercube) -> &mut Self {
        self.monitored_layers.insert(cube.layer);
        self.cubes.push(cube);
        self
    }

    pub fn with_cube(mut self, cube: Hypercube) -> Self {
        self.register(cube);
        self
    }

    pub fn with_message(mut self, message: impl Into<String>) -> Self {
        self.abstention_message = message.into();
        self
    }

    pub fn cubes_at(&self, layer: usize) -> impl Iterator<Item = &Hypercube> {
        self.cubes.iter().filter(move |c| c.layer == layer)
    }

    pub fn check(&self) -> Result<(), KsdError> {
        for (i, c) in self.cubes.iter().enumerate() {
            if !self.monitored_layers.contains(&c.layer) {
                return Err(KsdError::Schema(format!(
                    "cube {i} is at unmonitored layer {}",
                    c.layer
                )));
            }
            if c.lower.len() != c.upper.len() {
                return Err(KsdError::Schema(format!("cube {i} bound lengths differ")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ProfileFile {
            schema: KSDPROF_SCHEMA.into(),
            profile: self.clone(),
        })
        .expect("profile serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, KsdError> {
        let file: ProfileFile =
            serde_json::from_str(s).map_err(|e| KsdError::Schema(e.to_string()))?;
        if file.schema != KSDPROF_SCHEMA {
            return Err(KsdError::Schema(format!(
                "expected schema {KSDPROF_SCHEMA}, found {}",
                file.schema
            )));
        }
        file.profile.check()?;
        Ok(file.profile)
    }
}

/// Tests one key vector against every cube registered at `layer`.
pub fn detect<T: Copy + Into<f64>>(
    profile: &KsdProfile,
    layer: usize,
    v_key: &[T],
    step: usize,
) -> Result<Detection, KsdError> {
    if !profile.monitored_layers.contains(&layer) {
        return Ok(Detection::miss(layer, step));
    }
    for cube in profile.cubes_at(layer) {
        if cube.contains(v_key)? {
            return Ok(Detection {
                hit: true,
                skill_label: Some(cube.skill_label.clone()),
                layer,
                step,
            });
        }
    }
    Ok(Detection::miss(layer, step))
}

/// Logical OR of [`detect`] over several profiles; the first hitting profile
/// (in slice order) supplies the label. Cost is linear in the number of cubes.
pub fn multi_skill_detect<T: Copy + Into<f64>>(
    profiles: &[KsdProfile],
    layer: usize,
    v_key: &[T],
    step: usize,
) -> Result<Detection, KsdError> {
    for p in profiles {
        let d = detect(p, layer, v_key, step)?;
        if d.hit {
            return Ok(d);
        }
    }
    Ok(Detection::miss(layer, step))
}

/// Result of an alpha gap measurement; any alpha in `(lo, hi]` contains every
/// forget vector and no retain vector. `alpha` is the midpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaGap {
    pub lo: f64,
    pub hi: f64,
    pub alpha: f64,
}

/// Smallest `alpha` at which `v` is *not yet* strictly inside the cube:
/// `max_i |v_i - mu_i| / max(sigma_i, floor)`. `v` is contained iff
/// `alpha > containment_radius(v)`.
pub fn containment_radius<T: Copy + Into<f64>>(
    dist: &SkillDistribution,
    v: &[T],
    std_floor: f64,
) -> Result<f64, KsdError> {
    if v.len() != dist.width() {
        return Err(KsdError::ShapeMismatch(format!(
            "distribution width {}, vector has {}",
            dist.width(),
            v.len()
        )));
    }
    Ok(dist
        .mean
        .iter()
        .zip(&dist.std)
        .zip(v)
        .map(|((&m, &s), &x)| (x.into() - m).abs() / s.max(std_floor))
        .fold(0.0, f64::max))
}

/// Recommends alpha at the midpoint of the empirical gap between "every
/// forget vector inside" and "first retain vector inside".
pub fn recommend_alpha<V, T>(
    forget_dist: &SkillDistribution,
    forget_vectors: &[V],
    retain_vectors: &[V],
    std_floor: f64,
) -> Result<AlphaGap, KsdError>
where
    V: AsRef<[T]>,
    T: Copy + Into<f64>,
{
    if forget_vectors.is_empty() {
        return Err(KsdError::EmptyProbeSet("forget"));
    }
    if retain_vectors.is_empty() {
        return Err(KsdError::EmptyProbeSet("retain"));
    }
    let mut lo = 0.0f64;
    for v in forget_vectors {
        lo = lo.max(containment_radius(forget_dist, v.as_ref(), std_floor)?);
    }
    let mut hi = f64::INFINITY;
    for v in retain_vectors {
        hi = hi.min(containment_radius(forget_dist, v.as_ref(), std_floor)?);
    }
    if lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) || !hi.is_finite() {
        return Err(KsdError::NoGap { lo, hi });
    }
    Ok(AlphaGap {
        lo,
        hi,
        alpha: 0.5 * (lo + hi),
    })
}

/// Something that can be driven one token at a time and exposes the current
/// last-token key vector of every FFL.
pub trait KeyVectorStepper {
    /// Key-space width at `layer`, or `None` if the layer does not exist.
    fn key_width(&self, layer: usize) -> Option<usize>;
    /// Consumes the prompt; afterwards the state reflects its last token.
    fn prefill(&mut self, prompt: &[u32]) -> Result<(), EngineError>;
    /// Key vector of the most recent token at `layer`.
    fn last_key(&self, layer: usize) -> &[f64];
    /// Greedy choice of the next token from the current state.
    fn next_token(&self) -> u32;
    /// Appends `token` and runs one decoding step.
    fn advance(&mut self, token: u32) -> Result<(), EngineError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum GenerationOutcome {
    Completed {
        tokens: Vec<u32>,
    },
    Abstained {
        message: String,
        halt_step: usize,
        detection: Detection,
    },
}

impl GenerationOutcome {
    pub fn abstained(&self) -> bool {
        matches!(self, GenerationOutcome::Abstained { .. })
    }

    pub fn tokens(&self) -> Option<&[u32]> {
        match self {
            GenerationOutcome::Completed { tokens } => Some(tokens),
            GenerationOutcome::Abstained { .. } => None,
        }
    }
}

fn check_widths<E: KeyVectorStepper + ?Sized>(
    engine: &E,
    profiles: &[KsdProfile],
) -> Result<(), KsdError> {
    for cube in profiles.iter().flat_map(|p| &p.cubes) {
        let got = engine.key_width(cube.layer);
        if got != Some(cube.width()) {
            return Err(KsdError::ModelWidthMismatch {
                layer: cube.layer,
                expected: cube.width(),
                got,
            });
        }
    }
    Ok(())
}

/// Greedy generation with KSD abstention against one profile.
pub fn guarded_generate<E: KeyVectorStepper + ?Sized>(
    engine: &mut E,
    prompt: &[u32],
    profile: &KsdProfile,
    max_steps: usize,
) -> Result<GenerationOutcome, KsdError> {
    guarded_generate_multi(engine, prompt, std::slice::from_ref(profile), max_steps)
}

/// Greedy generation guarded by several skill profiles at once.
pub fn guarded_generate_multi<E: KeyVectorStepper + ?Sized>(
    engine: &mut E,
    prompt: &[u32],
    profiles: &[KsdProfile],
    max_steps: usize,
) -> Result<GenerationOutcome, KsdError> {
    check_widths(engine, profiles)?;
    let layers: BTreeSet<usize> = profiles
        .iter()
        .flat_map(|p| p.monitored_layers.iter().copied())
        .collect();
    engine.prefill(prompt).map_err(KsdError::Engine)?;
    let mut tokens = Vec::with_capacity(max_steps);
    for step in 0..max_steps {
        for &layer in &layers {
            if engine.key_width(layer).is_none() {
                continue;
            }
            for p in profiles {
                let d = detect(p, layer, engine.last_key(layer), step)?;
                if d.hit {
                    return Ok(GenerationOutcome::Abstained {
                        message: p.abstention_message.clone(),
                        halt_step: step,
                        detection: d,
                    });
                }
            }
        }
        let token = engine.next_token();
        tokens.push(token);
        if step + 1 < max_steps {
            engine.advance(token).map_err(KsdError::Engine)?;
        }
    }
    Ok(GenerationOutcome::Completed { tokens })
}
