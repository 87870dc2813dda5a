//! Guarded and adjusted generation on held-out queries.
//!
//! `eval.json` is a pure function of config and seeds. Wall-clock numbers go
//! to `eval.timing.json`, which is left out of the manifest.

use std::time::Instant;

use serde::Serialize;
use serde_json::json;
use skul_core::key_space_detection::guarded_generate_multi;
use skul_core::toy_transformer::{Session, TimedStepper};
use skul_core::{GenerationOutcome, KsdProfile, NeuronAdjustProfile, ToyModel};

use super::{Ctx, Method};
use crate::config::Role;
use crate::error::{CliError, Result};
use crate::layout::{to_json, write_atomic, Recorder};

pub const EVAL_SCHEMA: &str = "skul-eval/1";
pub const TIMING_SCHEMA: &str = "skul-eval-timing/1";

#[derive(Debug, Serialize)]
struct Report {
    schema: &'static str,
    model_id: String,
    max_steps: usize,
    families: Vec<Family>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ksd: Option<KsdSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    na: Option<NaSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    both: Option<BothSummary>,
    queries: Vec<QueryOutcome>,
}

#[derive(Debug, Serialize)]
struct Family {
    role: &'static str,
    label: String,
    queries: usize,
}

#[derive(Debug, Serialize)]
struct KsdSummary {
    monitored_layers: Vec<usize>,
    forget: KsdRates,
    retain: KsdRates,
}

#[derive(Debug, Default, Serialize)]
struct KsdRates {
    abstention_rate: f64,
    abstained: usize,
    completed: usize,
    /// Completed generations equal to the unguarded baseline.
    completed_identical_rate: f64,
}

#[derive(Debug, Serialize)]
struct NaSummary {
    beta: f64,
    selected_neurons: usize,
    runs: Vec<NaRun>,
    /// Run maximizing `forget.changed_rate - retain.changed_rate`; the
    /// earliest wins ties.
    best_run: usize,
}

#[derive(Debug, Serialize)]
struct NaRun {
    run: usize,
    seed: u64,
    forget: NaRates,
    retain: NaRates,
    score: f64,
}

#[derive(Debug, Default, Serialize)]
struct NaRates {
    /// Generations that differ from the baseline.
    changed_rate: f64,
    noop_rate: f64,
    considered: usize,
    fired: usize,
    fire_rate: f64,
}

#[derive(Debug, Serialize)]
struct BothSummary {
    seed: u64,
    forget: BothRates,
    retain: BothRates,
}

#[derive(Debug, Default, Serialize)]
struct BothRates {
    abstention_rate: f64,
    /// Completed generations that differ from the baseline.
    changed_rate: f64,
}

#[derive(Debug, Serialize)]
struct QueryOutcome {
    role: &'static str,
    index: usize,
    prompt: Vec<u32>,
    baseline: Vec<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ksd: Option<GenerationOutcome>,
    /// Per NA run, whether the output differs from the baseline.
    #[serde(skip_serializing_if = "Option::is_none")]
    na_changed: Option<Vec<bool>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    both: Option<GenerationOutcome>,
}

#[derive(Debug, Serialize)]
struct Timing {
    schema: &'static str,
    queries: usize,
    baseline_ns_per_token: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    guard_ns_per_token: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    adjust_ns_per_token: Option<f64>,
    budget_ns_per_token: f64,
    within_budget: bool,
}

fn rate(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

fn generate(
    model: &ToyModel,
    prompt: &[u32],
    steps: usize,
    na: Option<(&NeuronAdjustProfile, u64)>,
    guards: &[KsdProfile],
) -> Result<(GenerationOutcome, skul_core::neuron_adjust::AdjustStats)> {
    let mut s = Session::new(model);
    if let Some((p, stream)) = na {
        s.set_interventions(p, stream);
    }
    let out = guarded_generate_multi(&mut s, prompt, guards, steps)
        .map_err(skul_core::ModelError::from)?;
    Ok((out, s.adjust_totals()))
}

fn read_profile<T, E: std::fmt::Display>(
    path: &std::path::Path,
    rec: &mut Recorder<'_>,
    parse: impl FnOnce(&str) -> std::result::Result<T, E>,
) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    rec.input(path)?;
    parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn run(ctx: &Ctx, method: Option<Method>) -> Result<()> {
    let mut rec = Recorder::new(&ctx.layout);
    let forget_label = ctx.label(Role::Forget);
    let na_path = ctx.layout.na_profile(&forget_label);
    let ksd_path = ctx.layout.ksd_profile(&forget_label);
    let (want_na, want_ksd) = match method {
        Some(m) => (m.na(), m.ksd()),
        None => (na_path.exists(), ksd_path.exists()),
    };
    if !want_na && !want_ksd {
        return Err(CliError::MissingInput(format!(
            "no profiles under {} (run `skul unlearn` first)",
            ctx.layout.root().join("profiles").display()
        )));
    }
    for (want, path) in [(want_na, &na_path), (want_ksd, &ksd_path)] {
        if want && !path.exists() {
            return Err(CliError::MissingInput(format!(
                "{} (run `skul unlearn` first)",
                path.display()
            )));
        }
    }
    let na = if want_na {
        Some(read_profile(
            &na_path,
            &mut rec,
            NeuronAdjustProfile::from_json,
        )?)
    } else {
        None
    };
    let ksd = if want_ksd {
        Some(read_profile(&ksd_path, &mut rec, KsdProfile::from_json)?)
    } else {
        None
    };

    let model = ctx.model()?;
    let cfg = &ctx.config.cfg;
    let steps = cfg.eval.max_steps;
    let repeats = cfg.eval.repeats;
    let guards: &[KsdProfile] = ksd.as_slice();

    let mut families = Vec::new();
    let mut queries = Vec::new();
    let mut ksd_rates: [KsdRates; 2] = Default::default();
    let mut na_rates: Vec<[NaRates; 2]> = (0..repeats).map(|_| Default::default()).collect();
    let mut both_rates: [BothRates; 2] = Default::default();
    let na_runs: Vec<NeuronAdjustProfile> = na
        .iter()
        .flat_map(|p| (0..repeats).map(move |r| p.clone().with_seed(p.seed.wrapping_add(r as u64))))
        .collect();

    for (fi, role) in Role::BOTH.into_iter().enumerate() {
        let (_, held_out) = ctx.queries(role)?;
        families.push(Family {
            role: role.key(),
            label: ctx.label(role),
            queries: held_out.len(),
        });
        let (mut ksd_same, mut both_changed) = (0usize, 0usize);
        for (index, prompt) in held_out.into_iter().enumerate() {
            let stream = index as u64;
            let (base, _) = generate(&model, &prompt, steps, None, &[])?;
            let baseline = base
                .tokens()
                .expect("unguarded generation completes")
                .to_vec();
            let mut q = QueryOutcome {
                role: role.key(),
                index,
                prompt: prompt.clone(),
                baseline: baseline.clone(),
                ksd: None,
                na_changed: None,
                both: None,
            };
            if ksd.is_some() {
                let (out, _) = generate(&model, &prompt, steps, None, guards)?;
                let r = &mut ksd_rates[fi];
                match out.tokens() {
                    Some(t) => {
                        r.completed += 1;
                        ksd_same += usize::from(t == baseline.as_slice());
                    }
                    None => r.abstained += 1,
                }
                q.ksd = Some(out);
            }
            if !na_runs.is_empty() {
                let mut changed = Vec::with_capacity(repeats);
                for (run, p) in na_runs.iter().enumerate() {
                    let (out, stats) = generate(&model, &prompt, steps, Some((p, stream)), &[])?;
                    let c = out.tokens() != Some(baseline.as_slice());
                    let r = &mut na_rates[run][fi];
                    r.changed_rate += f64::from(u8::from(c));
                    r.considered += stats.considered;
                    r.fired += stats.fired;
                    changed.push(c);
                }
                q.na_changed = Some(changed);
            }
            if let (Some(p), true) = (na_runs.first(), ksd.is_some()) {
                let (out, _) = generate(&model, &prompt, steps, Some((p, stream)), guards)?;
                let r = &mut both_rates[fi];
                match out.tokens() {
                    Some(t) => both_changed += usize::from(t != baseline.as_slice()),
                    None => r.abstention_rate += 1.0,
                }
                q.both = Some(out);
            }
            queries.push(q);
        }
        let n = families[fi].queries;
        let k = &mut ksd_rates[fi];
        k.abstention_rate = rate(k.abstained, n);
        k.completed_identical_rate = rate(ksd_same, k.completed);
        for runs in &mut na_rates {
            let r = &mut runs[fi];
            r.changed_rate /= n.max(1) as f64;
            r.noop_rate = 1.0 - r.changed_rate;
            r.fire_rate = rate(r.fired, r.considered);
        }
        let b = &mut both_rates[fi];
        let abstained = b.abstention_rate as usize;
        b.abstention_rate = rate(abstained, n);
        b.changed_rate = rate(both_changed, n - abstained);
    }

    let ksd_summary = ksd.as_ref().map(|p| {
        let [forget, retain] = std::mem::take(&mut ksd_rates);
        KsdSummary {
            monitored_layers: p.monitored_layers.iter().copied().collect(),
            forget,
            retain,
        }
    });
    let na_summary = na.as_ref().map(|p| {
        let runs: Vec<NaRun> = na_rates
            .into_iter()
            .zip(&na_runs)
            .enumerate()
            .map(|(run, ([forget, retain], prof))| NaRun {
                run,
                seed: prof.seed,
                score: forget.changed_rate - retain.changed_rate,
                forget,
                retain,
            })
            .collect();
        let best_run =
            runs.iter().enumerate().fold(
                0,
                |best, (i, r)| if r.score > runs[best].score { i } else { best },
            );
        NaSummary {
            beta: p.ratio,
            selected_neurons: p.len(),
            runs,
            best_run,
        }
    });
    let both_summary = (na.is_some() && ksd.is_some()).then(|| {
        let [forget, retain] = both_rates;
        BothSummary {
            seed: na_runs[0].seed,
            forget,
            retain,
        }
    });

    let report = Report {
        schema: EVAL_SCHEMA,
        model_id: model.config().model_id(),
        max_steps: steps,
        families,
        ksd: ksd_summary,
        na: na_summary,
        both: both_summary,
        queries,
    };
    rec.write(&ctx.layout.report("eval.json"), to_json(&report).as_bytes())?;
    print_summary(&report);

    let timing = measure(ctx, &model, na_runs.first(), ksd.as_ref())?;
    write_atomic(
        &ctx.layout.report("eval.timing.json"),
        to_json(&timing).as_bytes(),
    )?;
    if let Some(g) = timing.guard_ns_per_token {
        println!(
            "guard overhead {g:.0} ns/token (budget {:.0})",
            timing.budget_ns_per_token
        );
    }

    ctx.finish(
        rec,
        "eval",
        json!({
            "max_steps": steps,
            "repeats": repeats,
            "methods": { "na": want_na, "ksd": want_ksd },
        }),
    )?;
    Ok(())
}

fn print_summary(r: &Report) {
    if let Some(k) = &r.ksd {
        println!(
            "ksd abstention: forget {:.3}, retain {:.3}",
            k.forget.abstention_rate, k.retain.abstention_rate
        );
    }
    if let Some(n) = &r.na {
        let b = &n.runs[n.best_run];
        println!(
            "na changed (best of {}): forget {:.3}, retain {:.3}",
            n.runs.len(),
            b.forget.changed_rate,
            b.retain.changed_rate
        );
    }
}

/// Per-token wall-clock cost of the guard and of Neuron Adjust, measured
/// over the retain held-out queries (which run all steps under a guard).
fn measure(
    ctx: &Ctx,
    model: &ToyModel,
    na: Option<&NeuronAdjustProfile>,
    ksd: Option<&KsdProfile>,
) -> Result<Timing> {
    let (_, prompts) = ctx.queries(Role::Retain)?;
    let steps = ctx.config.cfg.eval.max_steps;
    let budget = ctx.config.cfg.eval.overhead_budget_ns;
    let mut s = Session::new(model);
    let started = Instant::now();
    let mut tokens = 0usize;
    for p in &prompts {
        let out =
            guarded_generate_multi(&mut s, p, &[], steps).map_err(skul_core::ModelError::from)?;
        tokens += p.len() + out.tokens().map_or(0, <[u32]>::len);
    }
    let baseline = started.elapsed().as_nanos() as f64 / tokens.max(1) as f64;

    let guard = match ksd {
        Some(k) => {
            let (mut time, mut checked) = (0u128, 0usize);
            for p in &prompts {
                let mut t = TimedStepper::new(&mut s);
                guarded_generate_multi(&mut t, p, std::slice::from_ref(k), steps)
                    .map_err(skul_core::ModelError::from)?;
                time += t.guard_time().as_nanos();
                checked += t.checked_steps();
            }
            Some(time as f64 / checked.max(1) as f64)
        }
        None => None,
    };
    let adjust = match na {
        Some(p) => {
            let mut s = Session::new(model);
            s.set_interventions(p, 0);
            s.set_timing(true);
            let mut tokens = 0usize;
            for q in &prompts {
                let out = guarded_generate_multi(&mut s, q, &[], steps)
                    .map_err(skul_core::ModelError::from)?;
                tokens += q.len() + out.tokens().map_or(0, <[u32]>::len);
            }
            Some(s.intervention_time().as_nanos() as f64 / tokens.max(1) as f64)
        }
        None => None,
    };
    let worst = guard.unwrap_or(0.0).max(adjust.unwrap_or(0.0));
    Ok(Timing {
        schema: TIMING_SCHEMA,
        queries: prompts.len(),
        baseline_ns_per_token: baseline,
        guard_ns_per_token: guard,
        adjust_ns_per_token: adjust,
        budget_ns_per_token: budget,
        within_budget: worst < budget,
    })
}
