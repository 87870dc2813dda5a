//! Independent reference computations for the derived quantities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skul_core::geometry_analysis::{bin_counts, log_volume_ratio, AxisBox, Binning};
use skul_core::toy_transformer::{ffl_glu, ffl_regular, forward, FflWeights, Matrix};
use skul_core::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn records(layer_vals: &[(u32, Vec<f32>)]) -> Vec<ActivationRecord> {
    layer_vals
        .iter()
        .enumerate()
        .map(|(i, (l, v))| ActivationRecord {
            sample_id: i as u64,
            token_index: 0,
            layer: *l,
            values: v.clone(),
        })
        .collect()
}

#[test]
fn streaming_fit_of_integer_ramp() {
    // x = 0, 1, ..., 99_999: mean (n-1)/2, population variance (n^2-1)/12.
    let n = 100_000u32;
    let h = DumpHeader::new("m", vec![1], CaptureKind::PreActivationAllTokens, "ramp").unwrap();
    let recs = records(&(0..n).map(|i| (0, vec![i as f32])).collect::<Vec<_>>());
    let s = fit_streaming(&h, recs.iter().map(Ok)).unwrap();
    let t = fit_twopass(&h, &recs).unwrap();
    assert_eq!(s[0].mean[0], 49_999.5);
    assert!((s[0].std[0] - 28_867.513_458_037_913).abs() < 1e-7);
    assert!((t[0].std[0] - 28_867.513_458_037_913).abs() < 1e-7);
    assert_eq!(s[0].sample_count, 100_000);
}

#[test]
fn streaming_fit_with_large_offset() {
    // Shifted ramp 1e4 + k/8: cancellation-prone for naive sum-of-squares.
    let h = DumpHeader::new("m", vec![1], CaptureKind::PreActivationAllTokens, "x").unwrap();
    let recs = records(
        &(0..4096)
            .map(|k| (0, vec![10_000.0f32 + (k % 16) as f32 / 8.0]))
            .collect::<Vec<_>>(),
    );
    let s = fit_streaming(&h, recs.iter().map(Ok)).unwrap();
    // values k/8, k = 0..15 uniformly: mean 15/16, var (16^2 - 1)/12 / 64
    assert!((s[0].mean[0] - (10_000.0 + 15.0 / 16.0)).abs() < 1e-9);
    let want = ((256.0 - 1.0) / 12.0 / 64.0f64).sqrt();
    assert!((s[0].std[0] - want).abs() < 1e-12, "{}", s[0].std[0]);
}

fn naive_rank(
    forget: &[SkillDistribution],
    retain: &[SkillDistribution],
    ratio: f64,
    abs: bool,
) -> Vec<NeuronRef> {
    let mut all = Vec::new();
    for (f, r) in forget.iter().zip(retain) {
        for i in 0..f.mean.len() {
            let d = f.mean[i] - r.mean[i];
            all.push((if abs { d.abs() } else { d }, f.layer, i));
        }
    }
    // descending score, then ascending (layer, index)
    all.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let total = all.len() as f64;
    let mut k = (ratio * total).ceil() as usize;
    if ((ratio * total) - (ratio * total).round()).abs() < 1e-9 {
        k = (ratio * total).round() as usize;
    }
    all.into_iter()
        .take(k.max(1))
        .map(|(_, layer, index)| NeuronRef { layer, index })
        .collect()
}

#[test]
fn rank_matches_full_sort() {
    let mut g = rng(3);
    for case in 0..200 {
        let layers = g.random_range(1..4);
        let width = g.random_range(1..40);
        let dist = |g: &mut ChaCha8Rng, layer| SkillDistribution {
            layer,
            // coarse grid so ties are common
            mean: (0..width)
                .map(|_| g.random_range(-4..5) as f64 * 0.5)
                .collect(),
            std: vec![1.0; width],
            sample_count: 1,
            dataset_label: "x".into(),
        };
        let f: Vec<_> = (0..layers).map(|l| dist(&mut g, l)).collect();
        let r: Vec<_> = (0..layers).map(|l| dist(&mut g, l)).collect();
        let ratio = [0.005, 0.015, 0.03, 0.25, 1.0][case % 5];
        for (mode, abs) in [(RankMode::Signed, false), (RankMode::Absolute, true)] {
            let got = rank_neurons(&f, &r, ratio, mode).unwrap();
            let mut got_sorted = got.clone();
            let mut want = naive_rank(&f, &r, ratio, abs);
            got_sorted.sort();
            want.sort();
            assert_eq!(got_sorted, want, "case {case}");
        }
    }
}

#[test]
#[allow(clippy::needless_range_loop)] // the oracle is the literal per-coordinate loop
fn contains_matches_coordinate_loop() {
    let mut g = rng(4);
    for _ in 0..2000 {
        let k = g.random_range(1..10);
        let dist = SkillDistribution {
            layer: 0,
            mean: (0..k).map(|_| g.random_range(-3.0..3.0)).collect(),
            std: (0..k).map(|_| g.random_range(0.0..2.0)).collect(),
            sample_count: 5,
            dataset_label: "c".into(),
        };
        let alpha = g.random_range(0.01..4.0);
        let cube = build_hypercube(&dist, alpha).unwrap();
        let v: Vec<f64> = (0..k)
            .map(|i| match g.random_range(0..4) {
                0 => cube.lower[i],
                1 => cube.upper[i],
                _ => g.random_range(-8.0..8.0),
            })
            .collect();
        let mut inside = true;
        for i in 0..k {
            let s = dist.std[i].max(DEFAULT_STD_FLOOR);
            let lo = dist.mean[i] - alpha * s;
            let hi = dist.mean[i] + alpha * s;
            if !(lo < v[i] && v[i] < hi) {
                inside = false;
            }
        }
        assert_eq!(cube.contains(&v).unwrap(), inside);
    }
}

#[test]
fn enclosing_cube_is_coordinate_min_max() {
    let mut g = rng(5);
    for _ in 0..300 {
        let k = g.random_range(1..12);
        let n = g.random_range(1..30);
        let vs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..k).map(|_| g.random_range(-5.0..5.0)).collect())
            .collect();
        let c = smallest_enclosing_hypercube(&vs, 0).unwrap();
        for i in 0..k {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for v in &vs {
                if v[i] < lo {
                    lo = v[i];
                }
                if v[i] > hi {
                    hi = v[i];
                }
            }
            assert_eq!((c.lower[i], c.upper[i]), (lo, hi));
        }
    }
}

/// ln(prod a_i / b_i) with the running product kept as mantissa * 2^exp.
fn log_ratio_by_product(a: &[f64], b: &[f64]) -> f64 {
    let mut m = 1.0f64;
    let mut e: i64 = 0;
    for (x, y) in a.iter().zip(b) {
        m *= x / y;
        let bits = m.to_bits();
        let exp = ((bits >> 52) & 0x7ff) as i64 - 1023;
        m = f64::from_bits((bits & !(0x7ff << 52)) | (1023u64 << 52));
        e += exp;
    }
    m.ln() + e as f64 * std::f64::consts::LN_2
}

#[test]
fn log_volume_ratio_in_4096_dimensions() {
    let mut g = rng(6);
    let k = 4096;
    let mk = |g: &mut ChaCha8Rng, scale: f64| EnclosingCube {
        layer: 0,
        lower: vec![0.0; k],
        upper: (0..k).map(|_| g.random_range(0.01..1.0) * scale).collect(),
    };
    let a = mk(&mut g, 1.0);
    let b = mk(&mut g, 3.0);
    // The raw volumes under/overflow f64; only the log form is usable.
    assert_eq!(a.upper.iter().product::<f64>(), 0.0);
    let got = log_volume_ratio(&a, &b).unwrap();
    let want = log_ratio_by_product(&a.sides(0.0), &b.sides(0.0));
    assert!(((got - want) / want).abs() < 1e-9, "{got} vs {want}");
    // all-equal sides: exactly k * ln(2 / 5)
    let c = EnclosingCube {
        layer: 0,
        lower: vec![0.0; k],
        upper: vec![2.0; k],
    };
    let d = EnclosingCube {
        layer: 0,
        lower: vec![-1.0; k],
        upper: vec![4.0; k],
    };
    let exact = 4096.0 * (0.4f64).ln();
    assert!((log_volume_ratio(&c, &d).unwrap() - exact).abs() < 1e-9);
}

#[test]
fn center_distances_hand_example() {
    let d = center_distances(&[1.0, 2.0, 3.0], &[4.0, 6.0, 3.0]).unwrap();
    assert_eq!(d.euclidean, 5.0);
    assert_eq!(d.manhattan, 7.0);
    // 1 - 25 / (sqrt(14) sqrt(61))
    assert!(
        (d.cosine - 0.144_517_611_463_556_35).abs() < 1e-12,
        "{}",
        d.cosine
    );
    let same = center_distances(&[2.0, -1.0], &[4.0, -2.0]).unwrap();
    assert!(same.cosine.abs() < 1e-15);
}

fn naive_bins(values: &[f64], edges: &[f64]) -> (Vec<u64>, u64, u64) {
    let bins = edges.len() - 1;
    let mut counts = vec![0; bins];
    let (mut under, mut over) = (0, 0);
    for &v in values {
        if v < edges[0] {
            under += 1;
            continue;
        }
        if v > edges[bins] {
            over += 1;
            continue;
        }
        for k in 0..bins {
            let left_ok = if k == 0 { v >= edges[0] } else { v > edges[k] };
            if left_ok && v <= edges[k + 1] {
                counts[k] += 1;
                break;
            }
        }
    }
    (counts, under, over)
}

#[test]
fn histogram_matches_naive_binning() {
    let mut g = rng(7);
    for _ in 0..500 {
        let bins = g.random_range(1..8);
        let mut edges: Vec<f64> = (0..=bins).map(|_| g.random_range(-4..5) as f64).collect();
        edges.sort_by(f64::total_cmp);
        edges.dedup();
        if edges.len() < 2 {
            continue;
        }
        let values: Vec<f64> = (0..50)
            .map(|_| match g.random_range(0..3) {
                0 => edges[g.random_range(0..edges.len())],
                _ => g.random_range(-6.0..6.0),
            })
            .collect();
        assert_eq!(bin_counts(&values, &edges), naive_bins(&values, &edges));
    }
}

#[test]
fn uniform_histogram_example() {
    let h = DumpHeader::new("m", vec![1], CaptureKind::PreActivationAllTokens, "x").unwrap();
    let recs = records(&[(0, vec![0.0]), (0, vec![0.5]), (0, vec![1.0])]);
    let hist = preactivation_histogram(
        &h,
        recs.iter().map(Ok),
        NeuronRef { layer: 0, index: 0 },
        &Binning::Uniform(2),
    )
    .unwrap();
    assert_eq!(hist.edges, vec![0.0, 0.5, 1.0]);
    assert_eq!(hist.counts, vec![2, 1]);
    assert_eq!(hist.total, 3);
}

fn random_matrix(g: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix {
        rows,
        cols,
        data: (0..rows * cols)
            .map(|_| g.random_range(-1.0..1.0))
            .collect(),
    }
}

fn naive_matvec(m: &Matrix, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.rows];
    for (r, o) in out.iter_mut().enumerate() {
        for (c, xc) in x.iter().enumerate() {
            *o += m.data[r * m.cols + c] * xc;
        }
    }
    out
}

#[test]
fn ffl_matches_naive_matmul() {
    let mut g = rng(8);
    for act in [Activation::Relu, Activation::Gelu, Activation::Silu] {
        for _ in 0..20 {
            let z: Vec<f64> = (0..8).map(|_| g.random_range(-2.0..2.0)).collect();
            let up = random_matrix(&mut g, 16, 8);
            let gate = random_matrix(&mut g, 16, 8);
            let down = random_matrix(&mut g, 8, 16);

            let pre = naive_matvec(&up, &z);
            let key: Vec<f64> = pre.iter().map(|&p| act.apply(p)).collect();
            let want = naive_matvec(&down, &key);
            let w = FflWeights {
                up: up.clone(),
                gate: None,
                down: down.clone(),
            };
            let got = ffl_regular(&z, &w, act).unwrap();
            for (a, b) in got.output.iter().zip(&want) {
                assert!((a - b).abs() < 1e-6);
            }

            let gp = naive_matvec(&gate, &z);
            let key: Vec<f64> = gp
                .iter()
                .zip(&pre)
                .map(|(&g, &u)| act.apply(g) * u)
                .collect();
            let want = naive_matvec(&down, &key);
            let w = FflWeights {
                up,
                gate: Some(gate),
                down,
            };
            let got = ffl_glu(&z, &w, act).unwrap();
            for (a, b) in got.output.iter().zip(&want) {
                assert!((a - b).abs() < 1e-6);
            }
            for (a, b) in got.pre_activation.iter().zip(&gp) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn captured_key_vectors_recompute() {
    for (kind, act) in [
        (FflKind::Glu, Activation::Silu),
        (FflKind::Glu, Activation::Relu),
        (FflKind::Regular, Activation::Gelu),
    ] {
        let cfg = ToyConfig {
            ffl_kind: kind,
            activation: act,
            seed: 21,
            ..ToyConfig::default()
        };
        let m = ToyModel::init(cfg).unwrap();
        let toks: Vec<u32> = (0..12).map(|i| (i * 37 % 256) as u32).collect();
        let cap = forward(&m, &toks, true, None).unwrap().capture.unwrap();
        assert_eq!(cap.len(), 12 * 4);
        for e in &cap.entries {
            let recomputed: Vec<f64> = match &e.up {
                Some(up) => e
                    .pre_activation
                    .iter()
                    .zip(up)
                    .map(|(&g, &u)| act.apply(g) * u)
                    .collect(),
                None => e.pre_activation.iter().map(|&p| act.apply(p)).collect(),
            };
            for (a, b) in recomputed.iter().zip(&e.key) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn intervened_capture_shows_adjusted_values() {
    // A profile that always fires on neuron 0 of layer 0 at the captured
    // value turns the capture into the reflected value.
    let m = ToyModel::init(ToyConfig::default()).unwrap();
    let toks = [5u32, 9, 200];
    let plain = forward(&m, &toks, true, None).unwrap().capture.unwrap();
    let v = plain.get(0, 0).unwrap().pre_activation[0];
    let retain = SkillDistribution {
        layer: 0,
        mean: vec![0.0; 256],
        std: vec![1.0; 256],
        sample_count: 2,
        dataset_label: "r".into(),
    };
    let mut retain = retain;
    retain.mean[0] = v - 5.0;
    let mut forget = retain.clone();
    forget.mean[0] = v;
    forget.std[0] = 0.01;
    let mut f = vec![forget];
    let mut r = vec![retain];
    for l in 1..4 {
        let mut a = f[0].clone();
        a.layer = l;
        a.mean[0] = 0.0;
        a.std[0] = 1.0;
        f.push(a);
        let mut b = r[0].clone();
        b.layer = l;
        b.mean[0] = 0.0;
        r.push(b);
    }
    let prof = build_profile(&f, &r, 1.0 / 1024.0, 0).unwrap();
    assert_eq!(prof.len(), 1);
    let params = prof.params(NeuronRef { layer: 0, index: 0 }).unwrap();
    let adj = forward(&m, &toks, true, Some(&prof))
        .unwrap()
        .capture
        .unwrap();
    let got = adj.get(0, 0).unwrap().pre_activation[0];
    let d = prof
        .decide(NeuronRef { layer: 0, index: 0 }, v, RngKey::new(0, 0))
        .unwrap();
    assert!(d.adjusted);
    assert_eq!(got, d.value_out);
    assert_eq!(got, params.reflect(v));
    // untouched neurons keep their values
    assert_eq!(
        adj.get(0, 0).unwrap().pre_activation[1..],
        plain.get(0, 0).unwrap().pre_activation[1..]
    );
}
