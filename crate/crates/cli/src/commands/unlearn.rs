use serde::Serialize;
use serde_json::json;
use skul_core::key_space_detection::build_hypercube_with_floor;
use skul_core::neuron_adjust::{build_profile_with, ProfileOptions};
use skul_core::{recommend_alpha, CaptureKind, KsdProfile};

use super::{layer_vectors, monitored_layers, Ctx, Method};
use crate::config::{AlphaSpec, Role};
use crate::error::{CliError, Result};
use crate::layout::Recorder;

#[derive(Debug, Serialize)]
struct ResolvedAlpha {
    layer: usize,
    alpha: f64,
    /// Measured gap `(lo, hi]` when alpha was chosen automatically.
    gap: Option<(f64, f64)>,
}

pub fn run(ctx: &Ctx, method: Method) -> Result<()> {
    let mut rec = Recorder::new(&ctx.layout);
    let u = &ctx.config.cfg.unlearn;
    let forget_label = ctx.label(Role::Forget);
    let mut params = serde_json::Map::new();
    params.insert("method".into(), json!(method));

    if method.na() {
        let kind = CaptureKind::PreActivationAllTokens;
        let forget = ctx.load_dists(Role::Forget, kind, &mut rec)?;
        let retain = ctx.load_dists(Role::Retain, kind, &mut rec)?;
        let options = ProfileOptions {
            std_floor: u.std_floor,
            rank_mode: u.rank_mode,
        };
        let profile = build_profile_with(&forget, &retain, u.beta, ctx.config.cfg.seed, options)?;
        let total: usize = forget.iter().map(|d| d.width()).sum();
        rec.write(
            &ctx.layout.na_profile(&forget_label),
            profile.to_json().as_bytes(),
        )?;
        println!(
            "neuron adjust: {} of {total} neurons selected (beta {})",
            profile.len(),
            u.beta
        );
        params.insert(
            "na".into(),
            json!({
                "beta": u.beta,
                "rank_mode": u.rank_mode,
                "std_floor": u.std_floor,
                "total_neurons": total,
                "selected_neurons": profile.len(),
            }),
        );
    }

    if method.ksd() {
        let kind = CaptureKind::KeyVectorLastToken;
        let forget = ctx.load_dists(Role::Forget, kind, &mut rec)?;
        let layers = monitored_layers(ctx, forget.len())?;
        let mut profile = KsdProfile::new().with_message(u.abstention_message.clone());
        let mut resolved = Vec::new();
        let dumps = match u.alpha {
            AlphaSpec::Auto => {
                let f = ctx.require_dump(Role::Forget, kind)?;
                let r = ctx.require_dump(Role::Retain, kind)?;
                rec.input(&f)?;
                rec.input(&r)?;
                Some((f, r))
            }
            AlphaSpec::Fixed(_) => None,
        };
        for &layer in &layers {
            let dist = &forget[layer];
            let (alpha, gap) = match (&dumps, u.alpha) {
                (Some((f, r)), _) => {
                    let (_, fv) = layer_vectors(f, layer)?;
                    let (_, rv) = layer_vectors(r, layer)?;
                    let g = recommend_alpha(dist, &fv, &rv, u.std_floor)
                        .map_err(|source| CliError::Ksd { layer, source })?;
                    (g.alpha, Some((g.lo, g.hi)))
                }
                (None, AlphaSpec::Fixed(a)) => (a, None),
                (None, AlphaSpec::Auto) => unreachable!("auto alpha always has dumps"),
            };
            let cube = build_hypercube_with_floor(dist, alpha, u.std_floor)
                .map_err(|source| CliError::Ksd { layer, source })?;
            profile.register(cube);
            match gap {
                Some((lo, hi)) => {
                    println!("key space detection: layer {layer} alpha {alpha} (gap ({lo}, {hi}])")
                }
                None => println!("key space detection: layer {layer} alpha {alpha}"),
            }
            resolved.push(ResolvedAlpha { layer, alpha, gap });
        }
        rec.write(
            &ctx.layout.ksd_profile(&forget_label),
            profile.to_json().as_bytes(),
        )?;
        params.insert(
            "ksd".into(),
            json!({
                "alpha": u.alpha.to_string(),
                "std_floor": u.std_floor,
                "monitored_layers": layers,
                "resolved": resolved,
            }),
        );
    }

    ctx.finish(rec, "unlearn", serde_json::Value::Object(params))?;
    Ok(())
}
