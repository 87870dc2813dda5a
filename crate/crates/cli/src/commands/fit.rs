use serde_json::json;
use skul_core::fit_streaming;

use super::{open_dump, Ctx, KINDS};
use crate::config::Role;
use crate::error::{CliError, Result};
use crate::layout::Recorder;

/// Fits per-layer Gaussians for every available dump.
pub fn run(ctx: &Ctx) -> Result<()> {
    let mut rec = Recorder::new(&ctx.layout);
    let mut fitted = Vec::new();
    for role in Role::BOTH {
        let label = ctx.label(role);
        for kind in KINDS {
            if ctx.dump_path(role, kind).is_none() {
                continue;
            }
            let path = ctx.require_dump(role, kind)?;
            let reader = open_dump(&path)?;
            let header = reader.header().clone();
            let dists = fit_streaming(&header, reader)
                .map_err(|e| CliError::stats(path.display().to_string(), e))?;
            rec.input(&path)?;
            for d in &dists {
                // the file name carries the configured label, the content the dump's
                let out = ctx.layout.dist(&label, kind, d.layer);
                rec.write(&out, d.to_json().as_bytes())?;
            }
            fitted.push(json!({
                "role": role.key(),
                "kind": kind.short_name(),
                "layers": dists.len(),
                "records": dists.iter().map(|d| d.sample_count).collect::<Vec<_>>(),
            }));
        }
    }
    println!("fitted {} distributions", rec.outputs().len());
    ctx.finish(rec, "fit", json!({ "fitted": fitted }))?;
    Ok(())
}
