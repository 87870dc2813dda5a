//! # skul-core
//!
//! Training-free skill unlearning for decoder-only transformers, operating on
//! feed-forward layer (FFL) activations.
//!
//! Two interventions are provided:
//!
//! - **Neuron Adjust** ([`neuron_adjust`]): for a small set of neurons whose
//!   pre-activation means differ most between a forgetting and a retaining
//!   dataset, probabilistically reflect inference-time pre-activations from
//!   the forgetting Gaussian onto the retaining Gaussian.
//! - **Key Space Detection** ([`key_space_detection`]): bound the forgetting
//!   dataset's last-token key vectors with an axis-aligned hypercube
//!   `{mu +/- alpha * sigma}` and abstain from generating whenever an
//!   inference-time key vector falls inside it.
//!
//! Supporting modules:
//!
//! - [`activation_stream`]: the `.skuldmp` binary dump format that decouples
//!   activation capture from analysis.
//! - [`gaussian_stats`]: streaming, mergeable per-neuron mean/std fitting and
//!   neuron ranking.
//! - [`geometry_analysis`]: containment sweeps, enclosing cubes, volume
//!   ratios, center distances and pre-activation histograms.
//! - [`toy_transformer`]: a small seeded decoder-only model with capture and
//!   intervention hooks at every FFL, used as the in-repo substrate.
//! - [`rng`]: counter-based deterministic uniforms keyed by
//!   `(seed, stream, step, layer, neuron)`.

#![forbid(unsafe_code)]

pub mod activation_stream;
pub mod gaussian_stats;
pub mod geometry_analysis;
pub mod key_space_detection;
pub mod neuron_adjust;
pub mod rng;
pub mod toy_transformer;

pub use activation_stream::{
    read_dump, validate_dump, write_dump, ActivationRecord, CaptureKind, DumpError, DumpHeader,
    DumpReader, DumpWriter, ValidationReport,
};
pub use gaussian_stats::{
    fit_streaming, fit_twopass, gaussian_pdf, merge_moments, rank_neurons, NeuronRef, RankMode,
    RunningMoments, SkillDistribution, StatsError, DEFAULT_STD_FLOOR,
};
pub use geometry_analysis::{
    center_distances, containment_sweep, log_volume_ratio, preactivation_histogram,
    smallest_enclosing_hypercube, CenterDistances, ContainmentCurve, EnclosingCube, GeometryError,
    Histogram, LayerGeometry,
};
pub use key_space_detection::{
    build_hypercube, detect, guarded_generate, multi_skill_detect, recommend_alpha, AlphaGap,
    Detection, GenerationOutcome, Hypercube, KsdError, KsdProfile, DEFAULT_ABSTENTION_MESSAGE,
};
pub use neuron_adjust::{
    adjust_value, build_profile, empirical_adjust_rate, AdjustDecision, AdjustError,
    NeuronAdjustParams, NeuronAdjustProfile, RngKey,
};
pub use toy_transformer::{
    make_skill_dataset, Activation, FflKind, ModelError, SyntheticSkillSpec, ToyConfig, ToyModel,
};
