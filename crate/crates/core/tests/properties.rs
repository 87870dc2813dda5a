mod common;

use common::{arb_dist, arb_vectors};
use proptest::collection::vec;
use proptest::prelude::*;
use skul_core::geometry_analysis::AxisBox;
use skul_core::key_space_detection::containment_radius;
use skul_core::neuron_adjust::ProfileOptions;
use skul_core::toy_transformer::{forward, generate};
use skul_core::*;

fn moments(rows: &[Vec<f64>], width: usize) -> RunningMoments {
    let mut m = RunningMoments::new(width);
    for r in rows {
        m.push(r).unwrap();
    }
    m
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

proptest! {
    #[test]
    fn merge_equals_concatenation(
        rows in arb_vectors(4, 1..60),
        split in 0usize..60,
    ) {
        let split = split.min(rows.len());
        let (a, b) = rows.split_at(split);
        let merged = merge_moments(&moments(a, 4), &moments(b, 4)).unwrap();
        let whole = moments(&rows, 4);
        prop_assert_eq!(merged.count, whole.count);
        for i in 0..4 {
            prop_assert!(close(merged.mean[i], whole.mean[i], 1e-12));
            prop_assert!(close(merged.variance()[i], whole.variance()[i], 1e-9));
        }
    }

    #[test]
    fn fitted_mean_is_bracketed(rows in arb_vectors(3, 1..40)) {
        let d = moments(&rows, 3).finalize(0, "x").unwrap();
        for i in 0..3 {
            let lo = rows.iter().map(|r| r[i]).fold(f64::INFINITY, f64::min);
            let hi = rows.iter().map(|r| r[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(d.std[i] >= 0.0);
            prop_assert!(lo - 1e-9 <= d.mean[i] && d.mean[i] <= hi + 1e-9);
            prop_assert!(d.std[i] <= (hi - lo) + 1e-9);
        }
    }

    #[test]
    fn neuron_adjust_is_noop_when_retain_more_likely(
        mu_r in -5.0f64..5.0, s_r in 0.1f64..3.0,
        mu_f in -5.0f64..5.0, s_f in 0.1f64..3.0,
        v in -20.0f64..20.0, u in 0.0f64..1.0,
    ) {
        let p = NeuronAdjustParams::new(mu_r, s_r, mu_f, s_f, DEFAULT_STD_FLOOR);
        let d = adjust_value(v, &p, u);
        if d.p_r >= d.p_f {
            prop_assert!(!d.adjusted);
            prop_assert_eq!(d.value_out.to_bits(), v.to_bits());
        }
        if d.adjusted {
            prop_assert!(d.p_r < d.p_f);
            let lhs = (mu_r - d.value_out) / s_r;
            let rhs = (v - mu_f) / s_f;
            prop_assert!((lhs - rhs).abs() < 1e-9);
        } else {
            prop_assert_eq!(d.value_out.to_bits(), v.to_bits());
        }
        prop_assert!((0.0..=1.0).contains(&d.kept_probability));
    }

    #[test]
    fn profile_touches_only_selected_neurons(
        fm in vec(-3.0f64..3.0, 32), rm in vec(-3.0f64..3.0, 32),
        v in vec(-6.0f64..6.0, 32), step in 0u64..1000,
        ratio in 0.01f64..1.0,
    ) {
        let dist = |m: Vec<f64>| SkillDistribution {
            layer: 0, mean: m, std: vec![1.0; 32], sample_count: 3, dataset_label: "x".into(),
        };
        let p = build_profile(&[dist(fm)], &[dist(rm)], ratio, 9).unwrap();
        let out = p.adjust_vector(0, &v, RngKey::new(0, step)).unwrap();
        for i in 0..32 {
            if p.params(NeuronRef { layer: 0, index: i }).is_none() {
                prop_assert_eq!(out[i].to_bits(), v[i].to_bits());
            }
        }
        // same key, same result
        prop_assert_eq!(out, p.adjust_vector(0, &v, RngKey::new(0, step)).unwrap());
    }

    #[test]
    fn selection_size_is_ceiling(width in 1usize..300, layers in 1usize..4, ratio in 0.001f64..1.0) {
        let dist = |l| SkillDistribution {
            layer: l, mean: vec![0.0; width], std: vec![1.0; width], sample_count: 1,
            dataset_label: "x".into(),
        };
        let f: Vec<_> = (0..layers).map(dist).collect();
        let n = rank_neurons(&f, &f, ratio, RankMode::Signed).unwrap().len();
        let exact = ratio * (width * layers) as f64;
        prop_assert!(n as f64 >= exact - 1e-9 && (n as f64) < exact + 1.0);
    }

    #[test]
    fn containment_iff_radius_below_alpha(
        d in arb_dist(6), v in vec(-80.0f64..80.0, 6), alpha in 0.01f64..20.0,
    ) {
        let cube = build_hypercube(&d, alpha).unwrap();
        let r = containment_radius(&d, &v, DEFAULT_STD_FLOOR).unwrap();
        // equality is measure-zero; skip rounding-level ties
        prop_assume!((r - alpha).abs() > 1e-9 * alpha.max(1.0));
        prop_assert_eq!(cube.contains(&v).unwrap(), alpha > r);
    }

    #[test]
    fn recommended_alpha_separates_probe_sets(
        f in arb_vectors(5, 2..30), r in arb_vectors(5, 1..30),
    ) {
        let d = moments(&f, 5).finalize(0, "f").unwrap();
        match recommend_alpha(&d, &f, &r, DEFAULT_STD_FLOOR) {
            Ok(g) => {
                prop_assert!(g.lo < g.alpha && g.alpha < g.hi);
                let cube = build_hypercube(&d, g.alpha).unwrap();
                for v in &f {
                    prop_assert!(cube.contains(v).unwrap());
                }
                for v in &r {
                    prop_assert!(!cube.contains(v).unwrap());
                }
            }
            Err(KsdError::NoGap { lo, hi }) => prop_assert!(lo >= hi),
            Err(e) => prop_assert!(false, "{}", e),
        }
    }

    #[test]
    fn multi_detect_is_or_of_single(
        d1 in arb_dist(4), d2 in arb_dist(4), v in vec(-60.0f64..60.0, 4),
        a1 in 0.1f64..10.0, a2 in 0.1f64..10.0,
    ) {
        let p1 = KsdProfile::new().with_cube(build_hypercube(&d1, a1).unwrap());
        let mut c2 = build_hypercube(&d2, a2).unwrap();
        c2.skill_label = "second".into();
        let p2 = KsdProfile::new().with_cube(c2);
        let h1 = detect(&p1, 0, &v, 0).unwrap().hit;
        let h2 = detect(&p2, 0, &v, 0).unwrap().hit;
        let m = multi_skill_detect(&[p1, p2], 0, &v, 0).unwrap();
        prop_assert_eq!(m.hit, h1 || h2);
        if h1 {
            prop_assert_eq!(m.skill_label.as_deref(), Some("d"));
        } else if h2 {
            prop_assert_eq!(m.skill_label.as_deref(), Some("second"));
        }
    }

    #[test]
    fn enclosing_cube_volume_bounds_subsets(vs in arb_vectors(3, 2..20)) {
        let all = smallest_enclosing_hypercube(&vs, 0).unwrap();
        let part = smallest_enclosing_hypercube(&vs[..vs.len() / 2 + 1], 0).unwrap();
        prop_assert!(part.log_volume(1e-6) <= all.log_volume(1e-6) + 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn observation_and_empty_intervention_are_transparent(
        toks in vec(0u32..32, 1..12), seed in 0u64..1000,
    ) {
        let m = ToyModel::init(ToyConfig {
            vocab_size: 32, hidden_dim: 8, ffl_dim: 16, num_layers: 2, num_heads: 2,
            ffl_kind: FflKind::Glu, activation: Activation::Gelu, max_positions: 32, seed,
        }).unwrap();
        let a = forward(&m, &toks, false, None).unwrap();
        let b = forward(&m, &toks, true, None).unwrap();
        let empty = NeuronAdjustProfile::empty(seed);
        let c = forward(&m, &toks, false, Some(&empty)).unwrap();
        let bits = |o: &toy_transformer::ForwardOutput| -> Vec<u64> {
            o.logits.iter().flatten().map(|x| x.to_bits()).collect()
        };
        prop_assert_eq!(bits(&a), bits(&b));
        prop_assert_eq!(bits(&a), bits(&c));
    }

    #[test]
    fn unreachable_guard_does_not_interfere(toks in vec(0u32..32, 1..8), seed in 0u64..1000) {
        let m = ToyModel::init(ToyConfig {
            vocab_size: 32, hidden_dim: 8, ffl_dim: 16, num_layers: 2, num_heads: 1,
            ffl_kind: FflKind::Regular, activation: Activation::Relu, max_positions: 32, seed,
        }).unwrap();
        // a cube far from any reachable key (ReLU keys are >= 0)
        let d = SkillDistribution {
            layer: 1, mean: vec![-1e6; 16], std: vec![1.0; 16], sample_count: 1,
            dataset_label: "far".into(),
        };
        let guard = KsdProfile::new().with_cube(build_hypercube(&d, 3.0).unwrap());
        let g = generate(&m, &toks, 8, None, Some(&guard)).unwrap();
        let plain = generate(&m, &toks, 8, None, None).unwrap();
        prop_assert_eq!(g, plain);
    }
}

#[test]
fn profile_options_change_ranking_mode() {
    let d = |m: Vec<f64>| SkillDistribution {
        layer: 0,
        mean: m,
        std: vec![1.0; 3],
        sample_count: 1,
        dataset_label: "x".into(),
    };
    let f = [d(vec![0.0, 1.0, -5.0])];
    let r = [d(vec![0.0, 0.0, 0.0])];
    let signed =
        neuron_adjust::build_profile_with(&f, &r, 0.3, 0, ProfileOptions::default()).unwrap();
    let abs = neuron_adjust::build_profile_with(
        &f,
        &r,
        0.3,
        0,
        ProfileOptions {
            rank_mode: RankMode::Absolute,
            ..ProfileOptions::default()
        },
    )
    .unwrap();
    let idx = |p: &NeuronAdjustProfile| p.selected().map(|(n, _)| n.index).collect::<Vec<_>>();
    assert_eq!(idx(&signed), vec![1]);
    assert_eq!(idx(&abs), vec![2]);
}
