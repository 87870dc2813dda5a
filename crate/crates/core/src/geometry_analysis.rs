//! Observational analyses of FFL activation geometry: alpha containment
//! sweeps, smallest enclosing cubes and their log-volume ratios across
//! layers, distances between skill centers, and per-neuron pre-activation
//! histograms.
//!
//! Volumes are only ever handled as sums of log side lengths; a product of
//! thousands of sides over- or underflows immediately.

use std::borrow::Borrow;
use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activation_stream::{ActivationRecord, DumpError, DumpHeader};
use crate::gaussian_stats::{NeuronRef, SkillDistribution, DEFAULT_STD_FLOOR};
use crate::key_space_detection::{cube_for_alpha, Hypercube};

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("empty vector set")]
    EmptySet,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("cosine distance undefined for a zero vector")]
    ZeroVector,
    #[error("invalid alpha grid: {0}")]
    InvalidGrid(String),
    #[error("neuron (layer {}, index {}) is not in the dump", .0.layer, .0.index)]
    NeuronNotInDump(NeuronRef),
    #[error("invalid binning: {0}")]
    InvalidBins(String),
    #[error(transparent)]
    Dump(#[from] DumpError),
}

/// Axis-aligned box with explicit bounds.
pub trait AxisBox {
    fn lower(&self) -> &[f64];
    fn upper(&self) -> &[f64];

    fn dim(&self) -> usize {
        self.lower().len()
    }

    /// Side lengths, each raised to at least `floor`.
    fn sides(&self, floor: f64) -> Vec<f64> {
        self.lower()
            .iter()
            .zip(self.upper())
            .map(|(l, u)| (u - l).max(floor))
            .collect()
    }

    fn log_volume(&self, floor: f64) -> f64 {
        self.sides(floor).iter().map(|s| s.ln()).sum()
    }
}

impl AxisBox for Hypercube {
    fn lower(&self) -> &[f64] {
        &self.lower
    }
    fn upper(&self) -> &[f64] {
        &self.upper
    }
}

/// Tightest closed box around a vector set: `lower <= v <= upper`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnclosingCube {
    pub layer: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl AxisBox for EnclosingCube {
    fn lower(&self) -> &[f64] {
        &self.lower
    }
    fn upper(&self) -> &[f64] {
        &self.upper
    }
}

impl EnclosingCube {
    pub fn contains_closed<T: Copy + Into<f64>>(&self, v: &[T]) -> bool {
        v.len() == self.lower.len()
            && self
                .lower
                .iter()
                .zip(&self.upper)
                .zip(v)
                .all(|((&lo, &hi), &x)| {
                    let x: f64 = x.into();
                    lo <= x && x <= hi
                })
    }
}

pub fn smallest_enclosing_hypercube<V, T>(
    vectors: &[V],
    layer: usize,
) -> Result<EnclosingCube, GeometryError>
where
    V: AsRef<[T]>,
    T: Copy + Into<f64>,
{
    let first = vectors.first().ok_or(GeometryError::EmptySet)?.as_ref();
    let mut lower: Vec<f64> = first.iter().map(|&x| x.into()).collect();
    let mut upper = lower.clone();
    for v in &vectors[1..] {
        let v = v.as_ref();
        if v.len() != lower.len() {
            return Err(GeometryError::DimensionMismatch(format!(
                "expected {} dimensions, got {}",
                lower.len(),
                v.len()
            )));
        }
        for ((lo, hi), &x) in lower.iter_mut().zip(&mut upper).zip(v) {
            let x: f64 = x.into();
            *lo = lo.min(x);
            *hi = hi.max(x);
        }
    }
    Ok(EnclosingCube {
        layer,
        lower,
        upper,
    })
}

/// `log(vol(a) / vol(b))` as a sum of per-dimension log side ratios, with
/// degenerate sides floored at the default std floor.
pub fn log_volume_ratio<A: AxisBox, B: AxisBox>(a: &A, b: &B) -> Result<f64, GeometryError> {
    log_volume_ratio_with_floor(a, b, DEFAULT_STD_FLOOR)
}

pub fn log_volume_ratio_with_floor<A: AxisBox, B: AxisBox>(
    a: &A,
    b: &B,
    floor: f64,
) -> Result<f64, GeometryError> {
    if a.dim() != b.dim() {
        return Err(GeometryError::DimensionMismatch(format!(
            "{} vs {} dimensions",
            a.dim(),
            b.dim()
        )));
    }
    Ok(a.sides(floor)
        .iter()
        .zip(b.sides(floor))
        .map(|(sa, sb)| sa.ln() - sb.ln())
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGeometry {
    pub layer: usize,
    pub log_volume: f64,
    pub center: Vec<f64>,
}

/// Enclosing cube and mean of one layer's vector set.
pub fn layer_geometry<V, T>(
    vectors: &[V],
    layer: usize,
) -> Result<(EnclosingCube, LayerGeometry), GeometryError>
where
    V: AsRef<[T]>,
    T: Copy + Into<f64>,
{
    let cube = smallest_enclosing_hypercube(vectors, layer)?;
    let mut center = vec![0.0; cube.dim()];
    for v in vectors {
        for (c, &x) in center.iter_mut().zip(v.as_ref()) {
            *c += x.into();
        }
    }
    let n = vectors.len() as f64;
    center.iter_mut().for_each(|c| *c /= n);
    let geometry = LayerGeometry {
        layer,
        log_volume: cube.log_volume(DEFAULT_STD_FLOOR),
        center,
    };
    Ok((cube, geometry))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterDistances {
    pub euclidean: f64,
    pub manhattan: f64,
    /// `1 - cos(a, b)`, in `[0, 2]`.
    pub cosine: f64,
}

pub fn center_distances(a: &[f64], b: &[f64]) -> Result<CenterDistances, GeometryError> {
    if a.len() != b.len() {
        return Err(GeometryError::DimensionMismatch(format!(
            "{} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (mut sq, mut abs, mut dot, mut na, mut nb) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        sq += d * d;
        abs += d.abs();
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(GeometryError::ZeroVector);
    }
    let cos = (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0);
    Ok(CenterDistances {
        euclidean: sq.sqrt(),
        manhattan: abs,
        cosine: 1.0 - cos,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainmentCurve {
    pub alphas: Vec<f64>,
    pub fraction_in: Vec<f64>,
    pub fraction_out: Vec<f64>,
    /// First and last grid alpha with every in-skill vector contained and no
    /// out-skill vector contained.
    pub gap: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContainmentRow {
    pub alpha: f64,
    pub fraction_in: f64,
    pub fraction_out: f64,
}

impl ContainmentCurve {
    pub fn rows(&self) -> Vec<ContainmentRow> {
        self.alphas
            .iter()
            .zip(&self.fraction_in)
            .zip(&self.fraction_out)
            .map(|((&alpha, &fraction_in), &fraction_out)| ContainmentRow {
                alpha,
                fraction_in,
                fraction_out,
            })
            .collect()
    }
}

/// Fraction of in- and out-skill vectors strictly inside
/// `{mu +/- alpha sigma}` for every alpha of a strictly increasing,
/// non-negative grid.
pub fn containment_sweep<V, T>(
    dist: &SkillDistribution,
    in_vectors: &[V],
    out_vectors: &[V],
    alpha_grid: &[f64],
) -> Result<ContainmentCurve, GeometryError>
where
    V: AsRef<[T]>,
    T: Copy + Into<f64>,
{
    if alpha_grid.is_empty() {
        return Err(GeometryError::InvalidGrid("empty grid".into()));
    }
    if alpha_grid.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
        return Err(GeometryError::InvalidGrid(
            "alphas must be finite and >= 0".into(),
        ));
    }
    if alpha_grid
        .windows(2)
        .any(|w| w[0].partial_cmp(&w[1]) != Some(Ordering::Less))
    {
        return Err(GeometryError::InvalidGrid(
            "grid must be strictly increasing".into(),
        ));
    }
    for v in in_vectors.iter().chain(out_vectors) {
        if v.as_ref().len() != dist.width() {
            return Err(GeometryError::DimensionMismatch(format!(
                "distribution width {}, vector has {}",
                dist.width(),
                v.as_ref().len()
            )));
        }
    }
    let fraction = |cube: &Hypercube, set: &[V]| {
        if set.is_empty() {
            return 0.0;
        }
        let n = set
            .iter()
            .filter(|v| cube.contains_unchecked(v.as_ref()))
            .count();
        n as f64 / set.len() as f64
    };
    let mut fraction_in = Vec::with_capacity(alpha_grid.len());
    let mut fraction_out = Vec::with_capacity(alpha_grid.len());
    for &alpha in alpha_grid {
        let cube = cube_for_alpha(dist, alpha, DEFAULT_STD_FLOOR);
        fraction_in.push(fraction(&cube, in_vectors));
        fraction_out.push(fraction(&cube, out_vectors));
    }
    let separating: Vec<f64> = alpha_grid
        .iter()
        .zip(fraction_in.iter().zip(&fraction_out))
        .filter(|(_, (fin, fout))| **fin == 1.0 && **fout == 0.0)
        .map(|(a, _)| *a)
        .collect();
    let gap = separating
        .first()
        .zip(separating.last())
        .map(|(a, b)| (*a, *b));
    Ok(ContainmentCurve {
        alphas: alpha_grid.to_vec(),
        fraction_in,
        fraction_out,
        gap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Binning {
    /// `n` equal-width bins spanning the observed `[min, max]`.
    Uniform(usize),
    /// Explicit strictly increasing edges; values outside are counted as
    /// underflow/overflow.
    Edges(Vec<f64>),
}

/// Counts per bin. Bins are right-closed `(e_{k-1}, e_k]`, except the first,
/// which also includes its left edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub neuron: NeuronRef,
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
    pub total: u64,
}

/// Bins `values` over `edges` (length >= 2, nondecreasing).
pub fn bin_counts(values: &[f64], edges: &[f64]) -> (Vec<u64>, u64, u64) {
    let bins = edges.len() - 1;
    let mut counts = vec![0u64; bins];
    let (mut under, mut over) = (0u64, 0u64);
    let (first, last) = (edges[0], edges[bins]);
    for &v in values {
        if v < first {
            under += 1;
        } else if v > last {
            over += 1;
        } else {
            // first edge index k >= 1 with v <= edges[k]
            let k = edges[1..].partition_point(|&e| e < v);
            counts[k.min(bins - 1)] += 1;
        }
    }
    (counts, under, over)
}

/// Histogram of one neuron's values over every record of its layer.
pub fn preactivation_histogram<I, B>(
    header: &DumpHeader,
    records: I,
    neuron: NeuronRef,
    binning: &Binning,
) -> Result<Histogram, GeometryError>
where
    I: IntoIterator<Item = Result<B, DumpError>>,
    B: Borrow<ActivationRecord>,
{
    match header.width(neuron.layer) {
        Some(w) if neuron.index < w => {}
        _ => return Err(GeometryError::NeuronNotInDump(neuron)),
    }
    match binning {
        Binning::Uniform(0) => return Err(GeometryError::InvalidBins("zero bins".into())),
        Binning::Edges(e)
            if e.len() < 2
                || e.windows(2)
                    .any(|w| w[0].partial_cmp(&w[1]) != Some(Ordering::Less)) =>
        {
            return Err(GeometryError::InvalidBins(
                "edges must be strictly increasing with at least two entries".into(),
            ))
        }
        _ => {}
    }
    let mut values = Vec::new();
    for rec in records {
        let rec = rec?;
        let rec = rec.borrow();
        if rec.layer as usize == neuron.layer {
            let v = rec.values.get(neuron.index).ok_or_else(|| {
                GeometryError::DimensionMismatch(format!(
                    "record width {} at layer {}",
                    rec.values.len(),
                    rec.layer
                ))
            })?;
            values.push(*v as f64);
        }
    }
    if values.is_empty() {
        return Err(GeometryError::NeuronNotInDump(neuron));
    }
    let edges = match binning {
        Binning::Edges(e) => e.clone(),
        Binning::Uniform(n) => {
            let min = values.iter().copied().fold(f64::INFINITY, f64::min);
            let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w = (max - min) / *n as f64;
            let mut e: Vec<f64> = (0..*n).map(|k| min + k as f64 * w).collect();
            e.push(max);
            e
        }
    };
    let (counts, underflow, overflow) = bin_counts(&values, &edges);
    Ok(Histogram {
        neuron,
        edges,
        counts,
        underflow,
        overflow,
        total: values.len() as u64,
    })
}
