//! Incremental decoding with a per-layer key/value cache.
//!
//! Each [`Session::step`] processes exactly one new token, so the work done
//! by interventions and guards per token does not grow with the sequence.

use std::cell::Cell;
use std::time::{Duration, Instant};

use super::ffl::ffl_forward;
use super::{ModelError, ToyModel};
use crate::key_space_detection::{EngineError, KeyVectorStepper};
use crate::neuron_adjust::{AdjustStats, NeuronAdjustProfile, RngKey};

#[derive(Debug, Clone, PartialEq)]
pub struct Capture {
    pub position: usize,
    pub layer: usize,
    pub pre_activation: Vec<f64>,
    pub up: Option<Vec<f64>>,
    pub key: Vec<f64>,
}

/// Captured FFL internals, ordered by position then layer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CaptureBundle {
    pub num_layers: usize,
    pub entries: Vec<Capture>,
}

impl CaptureBundle {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, position: usize, layer: usize) -> Option<&Capture> {
        if layer >= self.num_layers {
            return None;
        }
        self.entries.get(position * self.num_layers + layer)
    }
}

pub struct Session<'m> {
    model: &'m ToyModel,
    interventions: Option<(&'m NeuronAdjustProfile, u64)>,
    capture: Option<CaptureBundle>,
    k_cache: Vec<Vec<f64>>,
    v_cache: Vec<Vec<f64>>,
    tokens: Vec<u32>,
    logits: Vec<f64>,
    last_keys: Vec<Vec<f64>>,
    last_pre: Vec<Vec<f64>>,
    adjust_totals: AdjustStats,
    timing: bool,
    intervention_time: Duration,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m ToyModel) -> Self {
        let l = model.num_layers();
        Self {
            model,
            interventions: None,
            capture: None,
            k_cache: vec![Vec::new(); l],
            v_cache: vec![Vec::new(); l],
            tokens: Vec::new(),
            logits: Vec::new(),
            last_keys: vec![Vec::new(); l],
            last_pre: vec![Vec::new(); l],
            adjust_totals: AdjustStats::default(),
            timing: false,
            intervention_time: Duration::ZERO,
        }
    }

    /// Applies `profile` to every FFL pre-activation from now on, keyed by
    /// `(stream, position)`.
    pub fn set_interventions(&mut self, profile: &'m NeuronAdjustProfile, stream: u64) {
        self.interventions = Some((profile, stream));
    }

    pub fn clear_interventions(&mut self) {
        self.interventions = None;
    }

    pub fn set_capture(&mut self, on: bool) {
        self.capture = on.then(|| CaptureBundle {
            num_layers: self.model.num_layers(),
            entries: Vec::new(),
        });
    }

    pub fn take_capture(&mut self) -> CaptureBundle {
        self.capture
            .as_mut()
            .map(std::mem::take)
            .map(|mut b| {
                b.num_layers = self.model.num_layers();
                b
            })
            .unwrap_or_default()
    }

    /// Accumulate wall time spent inside Neuron Adjust.
    pub fn set_timing(&mut self, on: bool) {
        self.timing = on;
    }

    pub fn intervention_time(&self) -> Duration {
        self.intervention_time
    }

    pub fn adjust_totals(&self) -> AdjustStats {
        self.adjust_totals
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn last_pre_activation(&self, layer: usize) -> &[f64] {
        &self.last_pre[layer]
    }

    pub fn last_key_vector(&self, layer: usize) -> &[f64] {
        &self.last_keys[layer]
    }

    /// Drops all cached state; settings (interventions, capture, timing) stay.
    pub fn reset(&mut self) {
        for c in self.k_cache.iter_mut().chain(self.v_cache.iter_mut()) {
            c.clear();
        }
        self.tokens.clear();
        self.logits.clear();
        for v in self.last_keys.iter_mut().chain(self.last_pre.iter_mut()) {
            v.clear();
        }
        if let Some(c) = &mut self.capture {
            c.entries.clear();
        }
    }

    /// Appends one token and runs it through every layer.
    pub fn step(&mut self, token: u32) -> Result<(), ModelError> {
        let model = self.model;
        let cfg = model.config();
        if token as usize >= cfg.vocab_size {
            return Err(ModelError::TokenOutOfRange {
                token,
                vocab_size: cfg.vocab_size,
            });
        }
        let pos = self.tokens.len();
        if pos >= cfg.max_positions {
            return Err(ModelError::SequenceTooLong {
                max_positions: cfg.max_positions,
            });
        }
        let h = cfg.hidden_dim;
        let dh = h / cfg.num_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let t = pos + 1;

        let mut x: Vec<f64> = model
            .embed
            .row(token as usize)
            .iter()
            .zip(model.pos.row(pos))
            .map(|(a, b)| a + b)
            .collect();
        let mut scores = vec![0.0; t];

        for (l, b) in model.blocks.iter().enumerate() {
            let z = b.ln1.apply(&x);
            let q = b.wq.matvec(&z);
            self.k_cache[l].extend(b.wk.matvec(&z));
            self.v_cache[l].extend(b.wv.matvec(&z));
            let (kc, vc) = (&self.k_cache[l], &self.v_cache[l]);

            let mut att = vec![0.0; h];
            for head in 0..cfg.num_heads {
                let r = head * dh..(head + 1) * dh;
                let qh = &q[r.clone()];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &kc[j * h + r.start..j * h + r.end];
                    *s = qh.iter().zip(kj).fold(0.0, |a, (x, y)| a + x * y) * scale;
                }
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - m).exp();
                    sum += *s;
                }
                for (j, s) in scores.iter().enumerate() {
                    let w = s / sum;
                    let vj = &vc[j * h + r.start..j * h + r.end];
                    for (a, v) in att[r.clone()].iter_mut().zip(vj) {
                        *a += w * v;
                    }
                }
            }
            for (xi, o) in x.iter_mut().zip(b.wo.matvec(&att)) {
                *xi += o;
            }

            let z2 = b.ln2.apply(&x);
            let interventions = self.interventions;
            let timing = self.timing;
            let mut stats = AdjustStats::default();
            let mut spent = Duration::ZERO;
            let out = ffl_forward(&z2, &b.ffl, cfg.activation, |pre| {
                if let Some((p, stream)) = interventions {
                    let start = timing.then(Instant::now);
                    stats = p.adjust_in_place(l, pre, RngKey::new(stream, pos as u64))?;
                    if let Some(s) = start {
                        spent = s.elapsed();
                    }
                }
                Ok(())
            })?;
            self.adjust_totals.considered += stats.considered;
            self.adjust_totals.fired += stats.fired;
            self.intervention_time += spent;

            for (xi, o) in x.iter_mut().zip(&out.output) {
                *xi += o;
            }
            if let Some(c) = &mut self.capture {
                c.entries.push(Capture {
                    position: pos,
                    layer: l,
                    pre_activation: out.pre_activation.clone(),
                    up: out.up.clone(),
                    key: out.key.clone(),
                });
            }
            self.last_keys[l] = out.key;
            self.last_pre[l] = out.pre_activation;
        }

        let xf = model.ln_f.apply(&x);
        self.logits = model.lm_head.matvec(&xf);
        self.tokens.push(token);
        Ok(())
    }

    pub fn greedy_token(&self) -> u32 {
        argmax(&self.logits)
    }
}

/// Index of the first maximum.
pub(crate) fn argmax(xs: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best as u32
}

impl KeyVectorStepper for Session<'_> {
    fn key_width(&self, layer: usize) -> Option<usize> {
        (layer < self.model.num_layers()).then(|| self.model.config().ffl_dim)
    }

    fn prefill(&mut self, prompt: &[u32]) -> Result<(), EngineError> {
        if prompt.is_empty() {
            return Err(Box::new(ModelError::EmptyPrompt));
        }
        self.reset();
        for &t in prompt {
            self.step(t).map_err(Box::new)?;
        }
        Ok(())
    }

    fn last_key(&self, layer: usize) -> &[f64] {
        &self.last_keys[layer]
    }

    fn next_token(&self) -> u32 {
        self.greedy_token()
    }

    fn advance(&mut self, token: u32) -> Result<(), EngineError> {
        self.step(token).map_err(|e| Box::new(e) as EngineError)
    }
}

/// Wraps a stepper and measures the time the guard spends between reading
/// the first key vector of a step and choosing the token.
pub struct TimedStepper<'a, S: KeyVectorStepper + ?Sized> {
    inner: &'a mut S,
    started: Cell<Option<Instant>>,
    guard_time: Cell<Duration>,
    checked_steps: Cell<usize>,
}

impl<'a, S: KeyVectorStepper + ?Sized> TimedStepper<'a, S> {
    pub fn new(inner: &'a mut S) -> Self {
        Self {
            inner,
            started: Cell::new(None),
            guard_time: Cell::new(Duration::ZERO),
            checked_steps: Cell::new(0),
        }
    }

    pub fn guard_time(&self) -> Duration {
        self.guard_time.get()
    }

    /// Steps at which at least one key vector was read.
    pub fn checked_steps(&self) -> usize {
        self.checked_steps.get()
    }

    pub fn inner(&self) -> &S {
        self.inner
    }
}

impl<S: KeyVectorStepper + ?Sized> KeyVectorStepper for TimedStepper<'_, S> {
    fn key_width(&self, layer: usize) -> Option<usize> {
        self.inner.key_width(layer)
    }

    fn prefill(&mut self, prompt: &[u32]) -> Result<(), EngineError> {
        self.started.set(None);
        self.inner.prefill(prompt)
    }

    fn last_key(&self, layer: usize) -> &[f64] {
        if self.started.get().is_none() {
            self.started.set(Some(Instant::now()));
        }
        self.inner.last_key(layer)
    }

    fn next_token(&self) -> u32 {
        if let Some(s) = self.started.take() {
            self.guard_time.set(self.guard_time.get() + s.elapsed());
            self.checked_steps.set(self.checked_steps.get() + 1);
        }
        self.inner.next_token()
    }

    fn advance(&mut self, token: u32) -> Result<(), EngineError> {
        self.started.set(None);
        self.inner.advance(token)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{forward, Activation, FflKind, ToyConfig};
    use super::*;

    fn model() -> ToyModel {
        ToyModel::init(ToyConfig {
            vocab_size: 20,
            hidden_dim: 8,
            ffl_dim: 12,
            num_layers: 3,
            num_heads: 2,
            ffl_kind: FflKind::Regular,
            activation: Activation::Gelu,
            max_positions: 32,
            seed: 11,
        })
        .unwrap()
    }

    #[test]
    fn incremental_matches_fresh_sessions() {
        // Step-by-step logits equal those of a fresh session fed each prefix.
        let m = model();
        let toks = [1u32, 5, 9, 2, 2, 19];
        let mut s = m.session();
        for (i, &t) in toks.iter().enumerate() {
            s.step(t).unwrap();
            let mut fresh = m.session();
            fresh.prefill(&toks[..=i]).unwrap();
            assert_eq!(s.logits(), fresh.logits());
        }
    }

    #[test]
    fn capture_layout() {
        let m = model();
        let f = forward(&m, &[3, 4, 5], true, None).unwrap();
        let c = f.capture.unwrap();
        assert_eq!(c.len(), 9);
        let e = c.get(2, 1).unwrap();
        assert_eq!((e.position, e.layer), (2, 1));
        assert_eq!(e.pre_activation.len(), 12);
        assert!(c.get(0, 3).is_none());
    }

    #[test]
    fn prefill_resets_state() {
        let m = model();
        let mut s = m.session();
        s.prefill(&[1, 2, 3]).unwrap();
        let a = s.logits().to_vec();
        s.prefill(&[1, 2, 3]).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.logits(), &a[..]);
    }

    #[test]
    fn argmax_first_max() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[-1.0]), 0);
    }
}
