//! Containment curves, cluster geometry, center distances and
//! pre-activation histograms, each as JSON and CSV.

use std::path::Path;

use serde::Serialize;
use serde_json::json;
use skul_core::geometry_analysis::{bin_counts, layer_geometry};
use skul_core::{
    center_distances, containment_sweep, log_volume_ratio, rank_neurons, CaptureKind,
    CenterDistances, ContainmentCurve, Histogram, NeuronRef,
};

use super::{open_dump, Ctx};
use crate::config::Role;
use crate::error::{CliError, Result};
use crate::layout::{to_json, Recorder};

pub const ANALYSIS_SCHEMA: &str = "skul-analysis/1";

/// `0` followed by four points per decade from 1e-2 to 1e7.
pub fn default_alpha_grid() -> Vec<f64> {
    std::iter::once(0.0)
        .chain((-8..=28).map(|k| 10f64.powf(k as f64 / 4.0)))
        .collect()
}

#[derive(Serialize)]
struct Doc<T> {
    schema: &'static str,
    forget: String,
    retain: String,
    layers: Vec<T>,
}

#[derive(Serialize)]
struct ContainmentLayer {
    layer: usize,
    #[serde(flatten)]
    curve: ContainmentCurve,
}

#[derive(Serialize)]
struct ContainmentCsv {
    layer: usize,
    alpha: f64,
    fraction_in: f64,
    fraction_out: f64,
}

#[derive(Serialize)]
struct SetGeometry {
    records: usize,
    log_volume: f64,
    center: Vec<f64>,
}

#[derive(Serialize)]
struct GeometryLayer {
    layer: usize,
    forget: SetGeometry,
    retain: SetGeometry,
    /// `log(vol(forget) / vol(retain))` of the enclosing cubes.
    log_volume_ratio: f64,
    /// `None` when a center is the zero vector.
    distances: Option<CenterDistances>,
}

#[derive(Serialize)]
struct GeometryCsv {
    layer: usize,
    forget_log_volume: f64,
    retain_log_volume: f64,
    log_volume_ratio: f64,
    euclidean: Option<f64>,
    manhattan: Option<f64>,
    cosine: Option<f64>,
}

#[derive(Serialize)]
struct LabeledHistogram {
    label: String,
    #[serde(flatten)]
    histogram: Histogram,
}

#[derive(Serialize)]
struct HistogramCsv<'a> {
    label: &'a str,
    layer: usize,
    index: usize,
    bin: usize,
    lower: f64,
    upper: f64,
    count: u64,
}

fn csv_bytes<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| CliError::Config(format!("csv encoding failed: {e}")))?;
    }
    w.into_inner()
        .map_err(|e| CliError::Config(format!("csv encoding failed: {e}")))
}

/// `result[layer]` holds that layer's records in dump order.
fn vectors_by_layer(path: &Path) -> Result<Vec<Vec<Vec<f32>>>> {
    let reader = open_dump(path)?;
    let mut out = vec![Vec::new(); reader.header().num_layers()];
    for rec in reader {
        let rec = rec.map_err(|e| CliError::dump(path, e))?;
        out[rec.layer as usize].push(rec.values);
    }
    Ok(out)
}

/// Values of `neurons` across every record of the dump, in `neurons` order.
fn neuron_values(path: &Path, neurons: &[NeuronRef]) -> Result<Vec<Vec<f64>>> {
    let reader = open_dump(path)?;
    for n in neurons {
        if !matches!(reader.header().width(n.layer), Some(w) if n.index < w) {
            return Err(CliError::geometry(
                path.display().to_string(),
                skul_core::GeometryError::NeuronNotInDump(*n),
            ));
        }
    }
    let mut out = vec![Vec::new(); neurons.len()];
    for rec in reader {
        let rec = rec.map_err(|e| CliError::dump(path, e))?;
        for (dst, n) in out.iter_mut().zip(neurons) {
            if rec.layer as usize == n.layer {
                dst.push(f64::from(rec.values[n.index]));
            }
        }
    }
    Ok(out)
}

fn uniform_edges(values: &[&[f64]], bins: usize) -> Vec<f64> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values
        .iter()
        .flat_map(|v| v.iter())
        .filter(|v| v.is_finite())
    {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    if !lo.is_finite() {
        (lo, hi) = (0.0, 0.0);
    }
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let step = (hi - lo) / bins as f64;
    let mut edges: Vec<f64> = (0..bins).map(|k| lo + step * k as f64).collect();
    edges.push(hi);
    edges
}

pub fn run(ctx: &Ctx) -> Result<()> {
    let mut rec = Recorder::new(&ctx.layout);
    let cfg = &ctx.config.cfg.analyze;
    let (fl, rl) = (ctx.label(Role::Forget), ctx.label(Role::Retain));
    let key = CaptureKind::KeyVectorLastToken;

    let dists = ctx.load_dists(Role::Forget, key, &mut rec)?;
    let fpath = ctx.require_dump(Role::Forget, key)?;
    let rpath = ctx.require_dump(Role::Retain, key)?;
    rec.input(&fpath)?;
    rec.input(&rpath)?;
    let fv = vectors_by_layer(&fpath)?;
    let rv = vectors_by_layer(&rpath)?;
    if fv.len() != dists.len() || rv.len() != dists.len() {
        return Err(CliError::MissingInput(format!(
            "layer counts differ: {} distributions, {} forget and {} retain dump layers",
            dists.len(),
            fv.len(),
            rv.len()
        )));
    }
    let grid = cfg.alpha_grid.clone().unwrap_or_else(default_alpha_grid);

    let mut containment = Vec::new();
    let mut geometry = Vec::new();
    for (layer, dist) in dists.iter().enumerate() {
        let ctx_name = format!("layer {layer}");
        let curve = containment_sweep(dist, &fv[layer], &rv[layer], &grid)
            .map_err(|e| CliError::geometry(&ctx_name, e))?;
        containment.push(ContainmentLayer { layer, curve });

        let (fc, fg) =
            layer_geometry(&fv[layer], layer).map_err(|e| CliError::geometry(&ctx_name, e))?;
        let (rc, rg) =
            layer_geometry(&rv[layer], layer).map_err(|e| CliError::geometry(&ctx_name, e))?;
        let ratio = log_volume_ratio(&fc, &rc).map_err(|e| CliError::geometry(&ctx_name, e))?;
        let distances = match center_distances(&fg.center, &rg.center) {
            Ok(d) => Some(d),
            Err(skul_core::GeometryError::ZeroVector) => None,
            Err(e) => return Err(CliError::geometry(&ctx_name, e)),
        };
        geometry.push(GeometryLayer {
            layer,
            forget: SetGeometry {
                records: fv[layer].len(),
                log_volume: fg.log_volume,
                center: fg.center,
            },
            retain: SetGeometry {
                records: rv[layer].len(),
                log_volume: rg.log_volume,
                center: rg.center,
            },
            log_volume_ratio: ratio,
            distances,
        });
    }

    let containment_csv = csv_bytes(containment.iter().flat_map(|c| {
        c.curve.rows().into_iter().map(move |r| ContainmentCsv {
            layer: c.layer,
            alpha: r.alpha,
            fraction_in: r.fraction_in,
            fraction_out: r.fraction_out,
        })
    }))?;
    let geometry_csv = csv_bytes(geometry.iter().map(|g| GeometryCsv {
        layer: g.layer,
        forget_log_volume: g.forget.log_volume,
        retain_log_volume: g.retain.log_volume,
        log_volume_ratio: g.log_volume_ratio,
        euclidean: g.distances.map(|d| d.euclidean),
        manhattan: g.distances.map(|d| d.manhattan),
        cosine: g.distances.map(|d| d.cosine),
    }))?;
    let doc = |layers| Doc {
        schema: ANALYSIS_SCHEMA,
        forget: fl.clone(),
        retain: rl.clone(),
        layers,
    };
    rec.write(
        &ctx.layout.analysis("containment.json"),
        to_json(&doc(containment)).as_bytes(),
    )?;
    rec.write(&ctx.layout.analysis("containment.csv"), &containment_csv)?;
    rec.write(
        &ctx.layout.analysis("geometry.json"),
        to_json(&Doc {
            schema: ANALYSIS_SCHEMA,
            forget: fl.clone(),
            retain: rl.clone(),
            layers: geometry,
        })
        .as_bytes(),
    )?;
    rec.write(&ctx.layout.analysis("geometry.csv"), &geometry_csv)?;

    let pre = CaptureKind::PreActivationAllTokens;
    let have_pre = ctx.dump_path(Role::Forget, pre).is_some_and(|p| p.exists())
        && ctx.dump_path(Role::Retain, pre).is_some_and(|p| p.exists());
    let mut histogram_count = 0;
    if have_pre && cfg.histogram_neurons > 0 {
        let fd = ctx.load_dists(Role::Forget, pre, &mut rec)?;
        let rd = ctx.load_dists(Role::Retain, pre, &mut rec)?;
        let total: usize = fd.iter().map(|d| d.width()).sum();
        let ratio = (cfg.histogram_neurons as f64 / total as f64).min(1.0);
        let mut neurons = rank_neurons(&fd, &rd, ratio, ctx.config.cfg.unlearn.rank_mode)
            .map_err(|e| CliError::stats("histogram neuron ranking", e))?;
        neurons.truncate(cfg.histogram_neurons);
        let fpre = ctx.require_dump(Role::Forget, pre)?;
        let rpre = ctx.require_dump(Role::Retain, pre)?;
        rec.input(&fpre)?;
        rec.input(&rpre)?;
        let fvals = neuron_values(&fpre, &neurons)?;
        let rvals = neuron_values(&rpre, &neurons)?;
        let mut hists = Vec::new();
        for ((n, f), r) in neurons.iter().zip(&fvals).zip(&rvals) {
            let edges = uniform_edges(&[f, r], cfg.histogram_bins);
            for (label, values) in [(&fl, f), (&rl, r)] {
                let (counts, underflow, overflow) = bin_counts(values, &edges);
                hists.push(LabeledHistogram {
                    label: label.clone(),
                    histogram: Histogram {
                        neuron: *n,
                        edges: edges.clone(),
                        counts,
                        underflow,
                        overflow,
                        total: values.len() as u64,
                    },
                });
            }
        }
        histogram_count = hists.len();
        let csv = csv_bytes(hists.iter().flat_map(|h| {
            let g = &h.histogram;
            g.counts
                .iter()
                .enumerate()
                .map(move |(bin, &count)| HistogramCsv {
                    label: &h.label,
                    layer: g.neuron.layer,
                    index: g.neuron.index,
                    bin,
                    lower: g.edges[bin],
                    upper: g.edges[bin + 1],
                    count,
                })
        }))?;
        rec.write(
            &ctx.layout.analysis("histograms.json"),
            to_json(&json!({ "schema": ANALYSIS_SCHEMA, "histograms": hists })).as_bytes(),
        )?;
        rec.write(&ctx.layout.analysis("histograms.csv"), &csv)?;
    }

    for o in rec.outputs() {
        println!("wrote {}", o.path);
    }
    ctx.finish(
        rec,
        "analyze",
        json!({
            "alpha_grid": grid,
            "histogram_bins": cfg.histogram_bins,
            "histograms": histogram_count,
        }),
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_is_increasing_and_spans_decades() {
        let g = default_alpha_grid();
        assert_eq!(g[0], 0.0);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert!((g[1] - 0.01).abs() < 1e-15);
        assert!((g[g.len() - 1] - 1e7).abs() < 1e-6);
    }

    #[test]
    fn uniform_edges_cover_both_sets() {
        let e = uniform_edges(&[&[0.0, 1.0], &[3.0]], 3);
        assert_eq!(e, vec![0.0, 1.0, 2.0, 3.0]);
        let e = uniform_edges(&[&[2.0], &[2.0]], 2);
        assert_eq!(e, vec![1.5, 2.0, 2.5]);
    }
}
