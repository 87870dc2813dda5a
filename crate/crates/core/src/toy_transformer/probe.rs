//! Probing a model into `.skuldmp` records.

use std::io::Write;

use super::{ModelError, ToyModel};
use crate::activation_stream::{ActivationRecord, CaptureKind, DumpHeader, DumpWriter};

fn header(model: &ToyModel, kind: CaptureKind, label: &str) -> Result<DumpHeader, ModelError> {
    let cfg = model.config();
    Ok(DumpHeader::new(
        cfg.model_id(),
        vec![cfg.ffl_dim as u32; cfg.num_layers],
        kind,
        label,
    )?)
}

/// Runs every query and emits its records in (sample, token, layer) order.
fn for_each_record<F>(
    model: &ToyModel,
    queries: &[Vec<u32>],
    kind: CaptureKind,
    mut emit: F,
) -> Result<(), ModelError>
where
    F: FnMut(ActivationRecord) -> Result<(), ModelError>,
{
    let mut s = model.session();
    for (sample, q) in queries.iter().enumerate() {
        if q.is_empty() {
            return Err(ModelError::EmptyPrompt);
        }
        s.reset();
        for (pos, &t) in q.iter().enumerate() {
            s.step(t)?;
            let last = pos + 1 == q.len();
            if kind == CaptureKind::KeyVectorLastToken && !last {
                continue;
            }
            for layer in 0..model.num_layers() {
                let src = match kind {
                    CaptureKind::PreActivationAllTokens => s.last_pre_activation(layer),
                    CaptureKind::KeyVectorLastToken => s.last_key_vector(layer),
                };
                emit(ActivationRecord {
                    sample_id: sample as u64,
                    token_index: match kind {
                        CaptureKind::PreActivationAllTokens => pos as u32,
                        CaptureKind::KeyVectorLastToken => 0,
                    },
                    layer: layer as u32,
                    values: src.iter().map(|&v| v as f32).collect(),
                })?;
            }
        }
    }
    Ok(())
}

/// Streams a dump of `queries` into `sink`; returns the bytes written.
pub fn probe_dump<W: Write>(
    model: &ToyModel,
    queries: &[Vec<u32>],
    kind: CaptureKind,
    dataset_label: &str,
    sink: W,
) -> Result<u64, ModelError> {
    let mut w = DumpWriter::new(sink, header(model, kind, dataset_label)?)?;
    for_each_record(model, queries, kind, |r| Ok(w.write_record(&r)?))?;
    Ok(w.finish()?.1)
}

/// In-memory variant of [`probe_dump`].
pub fn probe_records(
    model: &ToyModel,
    queries: &[Vec<u32>],
    kind: CaptureKind,
    dataset_label: &str,
) -> Result<(DumpHeader, Vec<ActivationRecord>), ModelError> {
    let h = header(model, kind, dataset_label)?;
    let mut out = Vec::new();
    for_each_record(model, queries, kind, |r| {
        out.push(r);
        Ok(())
    })?;
    Ok((h, out))
}

/// Full-precision last-token key vectors, `result[layer][query]`.
pub fn last_token_keys(
    model: &ToyModel,
    queries: &[Vec<u32>],
) -> Result<Vec<Vec<Vec<f64>>>, ModelError> {
    let mut out = vec![Vec::with_capacity(queries.len()); model.num_layers()];
    let mut s = model.session();
    for q in queries {
        if q.is_empty() {
            return Err(ModelError::EmptyPrompt);
        }
        s.reset();
        for &t in q {
            s.step(t)?;
        }
        for (layer, dst) in out.iter_mut().enumerate() {
            dst.push(s.last_key_vector(layer).to_vec());
        }
    }
    Ok(out)
}
