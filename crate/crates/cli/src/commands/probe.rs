use std::io::Write;

use serde_json::json;
use skul_core::toy_transformer::probe_dump;

use super::{open_dump, Ctx, KINDS};
use crate::config::Role;
use crate::error::{CliError, Result};
use crate::layout::Recorder;

/// Writes both capture kinds for every synthetic source and checks that
/// external dumps are readable.
pub fn run(ctx: &Ctx) -> Result<()> {
    let mut rec = Recorder::new(&ctx.layout);
    let mut model = None;
    let mut counts = serde_json::Map::new();
    for role in Role::BOTH {
        let label = ctx.label(role);
        if ctx.config.source(role).toy.is_some() {
            if model.is_none() {
                model = Some(ctx.model()?);
            }
            let model = model.as_ref().expect("initialized above");
            let (probe, _) = ctx.queries(role)?;
            for kind in KINDS {
                let path = ctx.layout.dump(&label, kind);
                rec.write_with(&path, |w| {
                    probe_dump(model, &probe, kind, &label, &mut *w)?;
                    w.flush().map_err(|e| CliError::io(&path, e))
                })?;
            }
            counts.insert(role.key().to_owned(), json!(probe.len()));
        } else {
            for kind in KINDS {
                if let Some(path) = ctx.dump_path(role, kind) {
                    if !path.exists() {
                        return Err(CliError::MissingInput(path.display().to_string()));
                    }
                    let reader = open_dump(&path)?;
                    if reader.header().capture_kind != kind {
                        return Err(CliError::Config(format!(
                            "{} holds {} records but is configured as `{}`",
                            path.display(),
                            reader.header().capture_kind.short_name(),
                            kind.short_name()
                        )));
                    }
                    rec.input(&path)?;
                }
            }
        }
    }
    for o in rec.outputs() {
        println!("wrote {}", o.path);
    }
    let model_id = model.as_ref().map(|m| m.config().model_id());
    ctx.finish(
        rec,
        "probe",
        json!({ "model_id": model_id, "probe_queries": counts }),
    )?;
    Ok(())
}
