//! Per-neuron Gaussian statistics.
//!
//! Means and standard deviations use the population convention (divisor
//! `|D|`), accumulated in `f64` with Welford updates so fitting is a single
//! streaming pass with constant memory per neuron. Partial accumulators from
//! shards combine with [`merge_moments`].

use std::borrow::Borrow;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activation_stream::{ActivationRecord, DumpError, DumpHeader};

/// Standard deviations below this are replaced by it before computing
/// densities or hypercube sides.
pub const DEFAULT_STD_FLOOR: f64 = 1e-6;

pub const SKULDIST_SCHEMA: &str = "skuldist/1";
pub const SKULDIST_EXTENSION: &str = "skuldist.json";

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("layer {layer} has no records")]
    EmptyLayer { layer: usize },
    #[error("non-finite value in record {record_index} (layer {layer}, neuron {neuron})")]
    NonFiniteInput {
        record_index: u64,
        layer: usize,
        neuron: usize,
    },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("ratio must lie in (0, 1], got {0}")]
    InvalidRatio(f64),
    #[error(transparent)]
    Dump(#[from] DumpError),
    #[error("invalid distribution file: {0}")]
    Schema(String),
}

/// Fitted per-layer Gaussian: mean and population std of each neuron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillDistribution {
    pub layer: usize,
    #[serde(rename = "means")]
    pub mean: Vec<f64>,
    #[serde(rename = "stds")]
    pub std: Vec<f64>,
    #[serde(rename = "count")]
    pub sample_count: u64,
    #[serde(rename = "label")]
    pub dataset_label: String,
}

#[derive(Serialize, Deserialize)]
struct DistributionFile {
    schema: String,
    #[serde(flatten)]
    dist: SkillDistribution,
}

impl SkillDistribution {
    pub fn width(&self) -> usize {
        self.mean.len()
    }

    /// Std of neuron `i` with the floor applied.
    pub fn floored_std(&self, i: usize, floor: f64) -> f64 {
        self.std[i].max(floor)
    }

    pub fn check(&self) -> Result<(), StatsError> {
        if self.mean.len() != self.std.len() {
            return Err(StatsError::LengthMismatch {
                expected: self.mean.len(),
                got: self.std.len(),
            });
        }
        if self.sample_count == 0 {
            return Err(StatsError::Schema("sample_count must be >= 1".into()));
        }
        if let Some(i) = self.std.iter().position(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(StatsError::Schema(format!(
                "std[{i}] must be finite and >= 0"
            )));
        }
        if let Some(i) = self.mean.iter().position(|m| !m.is_finite()) {
            return Err(StatsError::Schema(format!("mean[{i}] must be finite")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&DistributionFile {
            schema: SKULDIST_SCHEMA.into(),
            dist: self.clone(),
        })
        .expect("distribution serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, StatsError> {
        let file: DistributionFile =
            serde_json::from_str(s).map_err(|e| StatsError::Schema(e.to_string()))?;
        if file.schema != SKULDIST_SCHEMA {
            return Err(StatsError::Schema(format!(
                "expected schema {SKULDIST_SCHEMA}, found {}",
                file.schema
            )));
        }
        file.dist.check()?;
        Ok(file.dist)
    }
}

/// Welford accumulator over fixed-width vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningMoments {
    pub count: u64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl RunningMoments {
    pub fn new(width: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; width],
            m2: vec![0.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn push<T: Copy + Into<f64>>(&mut self, values: &[T]) -> Result<(), StatsError> {
        if values.len() != self.width() {
            return Err(StatsError::LengthMismatch {
                expected: self.width(),
                got: values.len(),
            });
        }
        self.count += 1;
        let n = self.count as f64;
        for ((m, m2), &x) in self.mean.iter_mut().zip(&mut self.m2).zip(values) {
            let x: f64 = x.into();
            let delta = x - *m;
            *m += delta / n;
            *m2 += delta * (x - *m);
        }
        Ok(())
    }

    /// Population variance of each component (`m2 / count`).
    pub fn variance(&self) -> Vec<f64> {
        let n = self.count as f64;
        self.m2.iter().map(|m2| (m2 / n).max(0.0)).collect()
    }

    pub fn finalize(&self, layer: usize, label: &str) -> Result<SkillDistribution, StatsError> {
        if self.count == 0 {
            return Err(StatsError::EmptyLayer { layer });
        }
        Ok(SkillDistribution {
            layer,
            mean: self.mean.clone(),
            std: self.variance().into_iter().map(f64::sqrt).collect(),
            sample_count: self.count,
            dataset_label: label.to_owned(),
        })
    }
}

/// Combines two accumulators as if their streams had been concatenated.
pub fn merge_moments(a: &RunningMoments, b: &RunningMoments) -> Result<RunningMoments, StatsError> {
    if a.width() != b.width() {
        return Err(StatsError::LengthMismatch {
            expected: a.width(),
            got: b.width(),
        });
    }
    if b.count == 0 {
        return Ok(a.clone());
    }
    if a.count == 0 {
        return Ok(b.clone());
    }
    let na = a.count as f64;
    let nb = b.count as f64;
    let n = na + nb;
    let mut out = RunningMoments::new(a.width());
    out.count = a.count + b.count;
    for i in 0..a.width() {
        let delta = b.mean[i] - a.mean[i];
        out.mean[i] = (na * a.mean[i] + nb * b.mean[i]) / n;
        out.m2[i] = a.m2[i] + b.m2[i] + delta * delta * (na * nb / n);
    }
    Ok(out)
}

fn check_record(
    header: &DumpHeader,
    rec: &ActivationRecord,
    index: u64,
) -> Result<usize, StatsError> {
    let layer = rec.layer as usize;
    let width = header.width(layer).ok_or_else(|| {
        StatsError::ShapeMismatch(format!("record {index} has layer {layer} outside header"))
    })?;
    if rec.values.len() != width {
        return Err(StatsError::LengthMismatch {
            expected: width,
            got: rec.values.len(),
        });
    }
    if let Some(neuron) = rec.values.iter().position(|v| !v.is_finite()) {
        return Err(StatsError::NonFiniteInput {
            record_index: index,
            layer,
            neuron,
        });
    }
    Ok(layer)
}

/// Single-pass fit of every header layer. Accepts the stream produced by
/// [`crate::activation_stream::DumpReader`] or any iterator of
/// `Result<record, DumpError>`.
pub fn fit_streaming<I, B>(
    header: &DumpHeader,
    records: I,
) -> Result<Vec<SkillDistribution>, StatsError>
where
    I: IntoIterator<Item = Result<B, DumpError>>,
    B: Borrow<ActivationRecord>,
{
    let mut acc: Vec<RunningMoments> = header
        .neurons_per_layer
        .iter()
        .map(|&k| RunningMoments::new(k as usize))
        .collect();
    for (index, rec) in records.into_iter().enumerate() {
        let rec = rec?;
        let rec = rec.borrow();
        let layer = check_record(header, rec, index as u64)?;
        acc[layer].push(&rec.values)?;
    }
    acc.iter()
        .enumerate()
        .map(|(layer, m)| m.finalize(layer, &header.dataset_label))
        .collect()
}

/// Literal two-pass evaluation of the population mean/std formulas. Kept as
/// the reference the streaming fit is checked against.
pub fn fit_twopass(
    header: &DumpHeader,
    records: &[ActivationRecord],
) -> Result<Vec<SkillDistribution>, StatsError> {
    let layers = header.num_layers();
    let mut sums: Vec<Vec<f64>> = header
        .neurons_per_layer
        .iter()
        .map(|&k| vec![0.0; k as usize])
        .collect();
    let mut counts = vec![0u64; layers];
    for (index, rec) in records.iter().enumerate() {
        let layer = check_record(header, rec, index as u64)?;
        counts[layer] += 1;
        for (s, &v) in sums[layer].iter_mut().zip(&rec.values) {
            *s += v as f64;
        }
    }
    if let Some(layer) = counts.iter().position(|&c| c == 0) {
        return Err(StatsError::EmptyLayer { layer });
    }
    let means: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| s.iter().map(|x| x / n as f64).collect())
        .collect();
    let mut sq: Vec<Vec<f64>> = means.iter().map(|m| vec![0.0; m.len()]).collect();
    for rec in records {
        let layer = rec.layer as usize;
        for ((acc, &v), &m) in sq[layer].iter_mut().zip(&rec.values).zip(&means[layer]) {
            let d = v as f64 - m;
            *acc += d * d;
        }
    }
    Ok((0..layers)
        .map(|layer| SkillDistribution {
            layer,
            mean: means[layer].clone(),
            std: sq[layer]
                .iter()
                .map(|s| (s / counts[layer] as f64).sqrt())
                .collect(),
            sample_count: counts[layer],
            dataset_label: header.dataset_label.clone(),
        })
        .collect())
}

/// Normal density with the default std floor.
pub fn gaussian_pdf(v: f64, mean: f64, std: f64) -> f64 {
    gaussian_pdf_with_floor(v, mean, std, DEFAULT_STD_FLOOR)
}

pub fn gaussian_pdf_with_floor(v: f64, mean: f64, std: f64, floor: f64) -> f64 {
    let s = std.max(floor);
    let z = (v - mean) / s;
    (-0.5 * z * z).exp() / (s * (2.0 * PI).sqrt())
}

/// A neuron addressed by FFL layer and index within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronRef {
    pub layer: usize,
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMode {
    /// Descending `mu_forget - mu_retain`.
    #[default]
    Signed,
    /// Descending `|mu_forget - mu_retain|`, for ablations.
    Absolute,
}

/// Number of neurons selected at `ratio` out of `total`: `ceil(ratio * total)`.
///
/// Products that land within 1e-9 of an integer are treated as that integer,
/// so decimal ratios like 0.015 are not bumped up by representation error.
pub fn selection_count(ratio: f64, total: usize) -> Result<usize, StatsError> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(StatsError::InvalidRatio(ratio));
    }
    let exact = ratio * total as f64;
    let nearest = exact.round();
    let k = if (exact - nearest).abs() < 1e-9 {
        nearest
    } else {
        exact.ceil()
    };
    Ok((k as usize).min(total))
}

pub(crate) fn check_paired(
    forget: &[SkillDistribution],
    retain: &[SkillDistribution],
) -> Result<(), StatsError> {
    if forget.len() != retain.len() {
        return Err(StatsError::ShapeMismatch(format!(
            "forget has {} layers, retain has {}",
            forget.len(),
            retain.len()
        )));
    }
    for (f, r) in forget.iter().zip(retain) {
        if f.layer != r.layer || f.width() != r.width() {
            return Err(StatsError::ShapeMismatch(format!(
                "forget layer {} (width {}) paired with retain layer {} (width {})",
                f.layer,
                f.width(),
                r.layer,
                r.width()
            )));
        }
    }
    Ok(())
}

/// Ranks every neuron by mean difference and returns the top
/// `ceil(ratio * total)`; ties go to the smaller `(layer, index)`.
pub fn rank_neurons(
    forget: &[SkillDistribution],
    retain: &[SkillDistribution],
    ratio: f64,
    mode: RankMode,
) -> Result<Vec<NeuronRef>, StatsError> {
    check_paired(forget, retain)?;
    let mut scored: Vec<(f64, NeuronRef)> = forget
        .iter()
        .zip(retain)
        .flat_map(|(f, r)| {
            f.mean
                .iter()
                .zip(&r.mean)
                .enumerate()
                .map(move |(i, (mf, mr))| {
                    let diff = mf - mr;
                    let score = match mode {
                        RankMode::Signed => diff,
                        RankMode::Absolute => diff.abs(),
                    };
                    (
                        score,
                        NeuronRef {
                            layer: f.layer,
                            index: i,
                        },
                    )
                })
        })
        .collect();
    let k = selection_count(ratio, scored.len())?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(k).map(|(_, n)| n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation_stream::CaptureKind;

    fn one_neuron(values: &[f32]) -> (DumpHeader, Vec<ActivationRecord>) {
        let header = DumpHeader::new("t", vec![1], CaptureKind::KeyVectorLastToken, "d").unwrap();
        let recs = values
            .iter()
            .enumerate()
            .map(|(i, &v)| ActivationRecord {
                sample_id: i as u64,
                token_index: 0,
                layer: 0,
                values: vec![v],
            })
            .collect();
        (header, recs)
    }

    fn dist(layer: usize, mean: Vec<f64>) -> SkillDistribution {
        let k = mean.len();
        SkillDistribution {
            layer,
            mean,
            std: vec![1.0; k],
            sample_count: 10,
            dataset_label: "x".into(),
        }
    }

    #[test]
    fn population_std_of_one_two_three() {
        let (h, recs) = one_neuron(&[1.0, 2.0, 3.0]);
        let s = &fit_streaming(&h, recs.iter().map(Ok)).unwrap()[0];
        let t = &fit_twopass(&h, &recs).unwrap()[0];
        let want = (2.0f64 / 3.0).sqrt();
        assert!((s.mean[0] - 2.0).abs() < 1e-15);
        assert!((s.std[0] - want).abs() < 1e-15);
        assert!((t.std[0] - want).abs() < 1e-15);
        assert!((s.std[0] - 0.81650).abs() < 1e-5);
        // guards against the n-1 convention
        assert!((s.std[0] * s.std[0] - 2.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn zero_variance_and_single_observation() {
        let (h, recs) = one_neuron(&[5.0, 5.0, 5.0]);
        let s = &fit_streaming(&h, recs.iter().map(Ok)).unwrap()[0];
        assert_eq!((s.mean[0], s.std[0]), (5.0, 0.0));
        let (h, recs) = one_neuron(&[7.0]);
        let s = &fit_streaming(&h, recs.iter().map(Ok)).unwrap()[0];
        assert_eq!((s.mean[0], s.std[0], s.sample_count), (7.0, 0.0, 1));
        let t = &fit_twopass(&h, &recs).unwrap()[0];
        assert_eq!(t.std[0], 0.0);
    }

    #[test]
    fn empty_layer_is_an_error() {
        let header =
            DumpHeader::new("t", vec![1, 1], CaptureKind::KeyVectorLastToken, "d").unwrap();
        let recs = vec![ActivationRecord {
            sample_id: 0,
            token_index: 0,
            layer: 0,
            values: vec![1.0],
        }];
        assert!(matches!(
            fit_streaming(&header, recs.iter().map(Ok)),
            Err(StatsError::EmptyLayer { layer: 1 })
        ));
        assert!(matches!(
            fit_twopass(&header, &recs),
            Err(StatsError::EmptyLayer { layer: 1 })
        ));
    }

    #[test]
    fn non_finite_reports_record_index() {
        let (h, recs) = one_neuron(&[1.0, 2.0, f32::NAN]);
        assert!(matches!(
            fit_streaming(&h, recs.iter().map(Ok)),
            Err(StatsError::NonFiniteInput {
                record_index: 2,
                ..
            })
        ));
    }

    #[test]
    fn merge_matches_concatenation() {
        let mut a = RunningMoments::new(1);
        a.push(&[1.0f64]).unwrap();
        a.push(&[2.0f64]).unwrap();
        let mut b = RunningMoments::new(1);
        b.push(&[3.0f64]).unwrap();
        let m = merge_moments(&a, &b).unwrap();
        assert_eq!(m.count, 3);
        assert!((m.mean[0] - 2.0).abs() < 1e-15);
        assert!((m.variance()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(merge_moments(&a, &RunningMoments::new(1)).unwrap(), a);
        assert_eq!(merge_moments(&RunningMoments::new(1), &a).unwrap(), a);
        assert!(matches!(
            merge_moments(&a, &RunningMoments::new(2)),
            Err(StatsError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn pdf_closed_forms() {
        assert!((gaussian_pdf(0.0, 0.0, 1.0) - 0.39894).abs() < 1e-5);
        assert!((gaussian_pdf(4.0, 4.0, 2.0) - 0.19947).abs() < 1e-5);
        assert_eq!(gaussian_pdf(3.5, 2.0, 0.7), gaussian_pdf(0.5, 2.0, 0.7));
        // zero std is floored, not a division by zero
        let p = gaussian_pdf(1.0, 1.0, 0.0);
        assert!(p.is_finite() && p > 0.0);
    }

    #[test]
    fn ranking_picks_largest_signed_difference() {
        let f = vec![dist(0, vec![5.0, 0.0, 2.0])];
        let r = vec![dist(0, vec![1.0, 0.0, 4.0])];
        let top = rank_neurons(&f, &r, 1.0 / 3.0, RankMode::Signed).unwrap();
        assert_eq!(top, vec![NeuronRef { layer: 0, index: 0 }]);
        let all = rank_neurons(&f, &r, 1.0, RankMode::Signed).unwrap();
        let idx: Vec<_> = all.iter().map(|n| n.index).collect();
        assert_eq!(idx, vec![0, 1, 2]);
        let abs = rank_neurons(&f, &r, 1.0, RankMode::Absolute).unwrap();
        let idx: Vec<_> = abs.iter().map(|n| n.index).collect();
        assert_eq!(idx, vec![0, 2, 1]);
    }

    #[test]
    fn ranking_ties_break_by_layer_then_index() {
        let f = vec![dist(0, vec![1.0, 1.0]), dist(1, vec![1.0])];
        let r = vec![dist(0, vec![0.0, 0.0]), dist(1, vec![0.0])];
        let all = rank_neurons(&f, &r, 1.0, RankMode::Signed).unwrap();
        assert_eq!(
            all,
            vec![
                NeuronRef { layer: 0, index: 0 },
                NeuronRef { layer: 0, index: 1 },
                NeuronRef { layer: 1, index: 0 },
            ]
        );
    }

    #[test]
    fn ranking_rejects_bad_ratio_and_shape() {
        let f = vec![dist(0, vec![1.0, 2.0])];
        let r = vec![dist(0, vec![1.0])];
        assert!(matches!(
            rank_neurons(&f, &r, 0.5, RankMode::Signed),
            Err(StatsError::ShapeMismatch(_))
        ));
        assert!(matches!(
            rank_neurons(&f, &f, 0.0, RankMode::Signed),
            Err(StatsError::InvalidRatio(_))
        ));
        assert!(matches!(
            rank_neurons(&f, &f, 1.5, RankMode::Signed),
            Err(StatsError::InvalidRatio(_))
        ));
    }

    #[test]
    fn selection_counts() {
        assert_eq!(selection_count(0.015, 13824).unwrap(), 208);
        assert_eq!(selection_count(0.015, 1000).unwrap(), 15);
        assert_eq!(selection_count(1.0 / 3.0, 3).unwrap(), 1);
        assert_eq!(selection_count(0.005, 1024).unwrap(), 6);
        assert_eq!(selection_count(1.0, 7).unwrap(), 7);
    }

    #[test]
    fn distribution_json_round_trip() {
        let d = dist(2, vec![0.25, -1.0]);
        let s = d.to_json();
        assert!(s.contains("\"schema\": \"skuldist/1\""));
        assert!(s.contains("\"means\""));
        assert_eq!(SkillDistribution::from_json(&s).unwrap(), d);
        let bad = s.replace("skuldist/1", "skuldist/9");
        assert!(SkillDistribution::from_json(&bad).is_err());
    }
}
