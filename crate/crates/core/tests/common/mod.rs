//! Strategies and helpers shared by the integration test targets.
#![allow(dead_code)]

use proptest::collection::vec;
use proptest::prelude::*;
use skul_core::{ActivationRecord, CaptureKind, DumpHeader, SkillDistribution};

pub fn arb_kind() -> impl Strategy<Value = CaptureKind> {
    prop_oneof![
        Just(CaptureKind::PreActivationAllTokens),
        Just(CaptureKind::KeyVectorLastToken)
    ]
}

pub fn arb_header() -> impl Strategy<Value = DumpHeader> {
    (
        "[a-z0-9-]{0,12}",
        vec(1u32..9, 1..5),
        arb_kind(),
        "[a-zA-Z _]{0,10}",
    )
        .prop_map(|(id, widths, kind, label)| DumpHeader::new(id, widths, kind, label).unwrap())
}

/// Any f32 bit pattern, NaN payloads included.
pub fn arb_f32_bits() -> impl Strategy<Value = f32> {
    any::<u32>().prop_map(f32::from_bits)
}

pub fn arb_dump() -> impl Strategy<Value = (DumpHeader, Vec<ActivationRecord>)> {
    arb_header().prop_flat_map(|h| {
        let widths = h.neurons_per_layer.clone();
        let key = h.capture_kind == CaptureKind::KeyVectorLastToken;
        let rec = (0..widths.len(), any::<u64>(), any::<u32>()).prop_flat_map(move |(l, s, t)| {
            vec(arb_f32_bits(), widths[l] as usize).prop_map(move |values| ActivationRecord {
                sample_id: s,
                token_index: if key { 0 } else { t },
                layer: l as u32,
                values,
            })
        });
        (Just(h), vec(rec, 0..24))
    })
}

pub fn arb_dist(width: usize) -> impl Strategy<Value = SkillDistribution> {
    (vec(-50.0f64..50.0, width), vec(0.0f64..10.0, width)).prop_map(|(mean, std)| {
        SkillDistribution {
            layer: 0,
            mean,
            std,
            sample_count: 10,
            dataset_label: "d".into(),
        }
    })
}

pub fn arb_vectors(
    width: usize,
    n: std::ops::Range<usize>,
) -> impl Strategy<Value = Vec<Vec<f64>>> {
    vec(vec(-100.0f64..100.0, width), n)
}
