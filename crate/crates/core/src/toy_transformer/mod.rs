//! A small deterministic decoder-only transformer.
//!
//! Pre-norm blocks (`x += attn(ln1(x)); x += ffl(ln2(x))`), learned token and
//! position embeddings, causal multi-head attention, and either a regular FFL
//! `W_down act(W_up z)` or a gated one `W_down(act(W_gate z) * W_up z)`.
//! Every FFL exposes its pre-activation (`W_up z` or `W_gate z`) and key
//! vector (the input of `W_down`) for capture and intervention.
//!
//! Weights are never stored: they are regenerated from [`ToyConfig`] (which
//! includes the seed). Initialization draws standard normals from a ChaCha8
//! stream in a fixed order:
//!
//! 1. token embedding `V x H`, std 1
//! 2. position embedding `P x H`, std 0.1
//! 3. per layer: `W_q, W_k, W_v, W_o` (`H x H`), then `W_gate` (GLU only),
//!    `W_up` (`K x H`), `W_down` (`H x K`); each scaled by `1/sqrt(fan_in)`
//! 4. LM head `V x H`, scaled by `1/sqrt(H)`
//!
//! Layer-norm gains start at 1 and biases at 0 (they consume no draws).

mod dataset;
mod ffl;
mod probe;
mod session;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::key_space_detection::{guarded_generate_multi, GenerationOutcome, KsdError, KsdProfile};
use crate::neuron_adjust::{AdjustError, NeuronAdjustProfile};

pub use dataset::{check_disjoint, make_skill_dataset, make_skill_datasets, SyntheticSkillSpec};
pub use ffl::{ffl_glu, ffl_regular, Activation, FflOutput, FflWeights};
pub use probe::{last_token_keys, probe_dump, probe_records};
pub use session::{Capture, CaptureBundle, Session, TimedStepper};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("token {token} out of range (vocab size {vocab_size})")]
    TokenOutOfRange { token: u32, vocab_size: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sequence exceeds max_positions = {max_positions}")]
    SequenceTooLong { max_positions: usize },
    #[error("prompt must not be empty")]
    EmptyPrompt,
    #[error("skills `{a}` and `{b}` share token ids")]
    AlphabetOverlap { a: String, b: String },
    #[error("invalid dataset spec: {0}")]
    InvalidDataset(String),
    #[error(transparent)]
    Adjust(#[from] AdjustError),
    #[error(transparent)]
    Guard(KsdError),
    #[error(transparent)]
    Dump(#[from] crate::activation_stream::DumpError),
}

impl From<KsdError> for ModelError {
    fn from(e: KsdError) -> Self {
        match e {
            KsdError::Engine(inner) => match inner.downcast::<ModelError>() {
                Ok(m) => *m,
                Err(other) => ModelError::Guard(KsdError::Engine(other)),
            },
            other => ModelError::Guard(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FflKind {
    Regular,
    Glu,
}

/// Missing fields take their [`Default`] values when deserialized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub ffl_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffl_kind: FflKind,
    pub activation: Activation,
    pub max_positions: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            hidden_dim: 64,
            ffl_dim: 256,
            num_layers: 4,
            num_heads: 2,
            ffl_kind: FflKind::Regular,
            activation: Activation::Relu,
            max_positions: 1024,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_owned()));
        if self.vocab_size == 0 {
            return bad("vocab_size must be >= 1");
        }
        if self.hidden_dim == 0 || self.num_heads == 0 {
            return bad("hidden_dim and num_heads must be >= 1");
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return bad("hidden_dim must be divisible by num_heads");
        }
        if self.ffl_dim == 0 {
            return bad("ffl_dim must be >= 1");
        }
        if self.num_layers == 0 {
            return bad("num_layers must be >= 1");
        }
        if self.max_positions == 0 {
            return bad("max_positions must be >= 1");
        }
        Ok(())
    }

    /// Closed-form parameter count for this configuration.
    pub fn parameter_count(&self) -> usize {
        let (v, h, k, p) = (
            self.vocab_size,
            self.hidden_dim,
            self.ffl_dim,
            self.max_positions,
        );
        let ffl = match self.ffl_kind {
            FflKind::Regular => 2 * h * k,
            FflKind::Glu => 3 * h * k,
        };
        let per_layer = 2 * h + 4 * h * h + 2 * h + ffl;
        v * h + p * h + self.num_layers * per_layer + 2 * h + v * h
    }

    pub fn model_id(&self) -> String {
        format!(
            "toy-{}-{}-v{}-h{}-k{}-l{}-n{}-s{}",
            match self.ffl_kind {
                FflKind::Regular => "regular",
                FflKind::Glu => "glu",
            },
            self.activation.name(),
            self.vocab_size,
            self.hidden_dim,
            self.ffl_dim,
            self.num_layers,
            self.num_heads,
            self.seed
        )
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    fn random(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * scale
            })
            .collect();
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out = self * x`, accumulated left to right.
    pub fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o = row.iter().zip(x).fold(0.0, |acc, (w, v)| acc + w * v);
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.matvec_into(x, &mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    fn new(h: usize) -> Self {
        Self {
            gamma: vec![1.0; h],
            beta: vec![0.0; h],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        x.iter()
            .zip(&self.gamma)
            .zip(&self.beta)
            .map(|((v, g), b)| (v - mean) * inv * g + b)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2: LayerNorm,
    pub ffl: FflWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    config: ToyConfig,
    pub(crate) embed: Matrix,
    pub(crate) pos: Matrix,
    pub(crate) blocks: Vec<Block>,
    pub(crate) ln_f: LayerNorm,
    pub(crate) lm_head: Matrix,
}

impl ToyModel {
    /// Deterministically initializes every weight from `config.seed`.
    pub fn init(config: ToyConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let (v, h, k, p) = (
            config.vocab_size,
            config.hidden_dim,
            config.ffl_dim,
            config.max_positions,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let embed = Matrix::random(v, h, 1.0, &mut rng);
        let pos = Matrix::random(p, h, 0.1, &mut rng);
        let sh = 1.0 / (h as f64).sqrt();
        let sk = 1.0 / (k as f64).sqrt();
        let blocks = (0..config.num_layers)
            .map(|_| {
                let wq = Matrix::random(h, h, sh, &mut rng);
                let wk = Matrix::random(h, h, sh, &mut rng);
                let wv = Matrix::random(h, h, sh, &mut rng);
                let wo = Matrix::random(h, h, sh, &mut rng);
                let gate = match config.ffl_kind {
                    FflKind::Glu => Some(Matrix::random(k, h, sh, &mut rng)),
                    FflKind::Regular => None,
                };
                let up = Matrix::random(k, h, sh, &mut rng);
                let down = Matrix::random(h, k, sk, &mut rng);
                Block {
                    ln1: LayerNorm::new(h),
                    wq,
                    wk,
                    wv,
                    wo,
                    ln2: LayerNorm::new(h),
                    ffl: FflWeights { up, gate, down },
                }
            })
            .collect();
        let lm_head = Matrix::random(v, h, sh, &mut rng);
        Ok(Self {
            config,
            embed,
            pos,
            blocks,
            ln_f: LayerNorm::new(h),
            lm_head,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, layer: usize) -> &Block {
        &self.blocks[layer]
    }

    /// Number of scalars actually held by the model.
    pub fn parameter_count(&self) -> usize {
        let ln = |l: &LayerNorm| l.gamma.len() + l.beta.len();
        let m = |m: &Matrix| m.data.len();
        let blocks: usize = self
            .blocks
            .iter()
            .map(|b| {
                ln(&b.ln1)
                    + m(&b.wq)
                    + m(&b.wk)
                    + m(&b.wv)
                    + m(&b.wo)
                    + ln(&b.ln2)
                    + m(&b.ffl.up)
                    + b.ffl.gate.as_ref().map_or(0, m)
                    + m(&b.ffl.down)
            })
            .sum();
        m(&self.embed) + m(&self.pos) + blocks + ln(&self.ln_f) + m(&self.lm_head)
    }

    /// Order-sensitive 64-bit digest of every weight's bit pattern.
    pub fn weights_checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut feed = |xs: &[f64]| {
            for x in xs {
                for b in x.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        };
        feed(&self.embed.data);
        feed(&self.pos.data);
        for b in &self.blocks {
            for l in [&b.ln1, &b.ln2] {
                feed(&l.gamma);
                feed(&l.beta);
            }
            for m in [&b.wq, &b.wk, &b.wv, &b.wo, &b.ffl.up, &b.ffl.down] {
                feed(&m.data);
            }
            if let Some(g) = &b.ffl.gate {
                feed(&g.data);
            }
        }
        feed(&self.ln_f.gamma);
        feed(&self.ln_f.beta);
        feed(&self.lm_head.data);
        h
    }

    pub fn session(&self) -> Session<'_> {
        Session::new(self)
    }
}

/// Output of a full causal pass over a token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Logits after each position.
    pub logits: Vec<Vec<f64>>,
    pub capture: Option<CaptureBundle>,
}

/// Causal pass over `tokens`. With `interventions`, Neuron Adjust is applied
/// to every FFL pre-activation (RNG stream 0, step = position) and captures
/// show post-intervention values.
pub fn forward(
    model: &ToyModel,
    tokens: &[u32],
    capture: bool,
    interventions: Option<&NeuronAdjustProfile>,
) -> Result<ForwardOutput, ModelError> {
    let mut s = model.session();
    s.set_capture(capture);
    if let Some(p) = interventions {
        s.set_interventions(p, 0);
    }
    let mut logits = Vec::with_capacity(tokens.len());
    for &t in tokens {
        s.step(t)?;
        logits.push(s.logits().to_vec());
    }
    Ok(ForwardOutput {
        logits,
        capture: capture.then(|| s.take_capture()),
    })
}

/// Greedy generation of up to `max_steps` tokens, optionally with Neuron
/// Adjust interventions and a KSD guard.
pub fn generate(
    model: &ToyModel,
    prompt: &[u32],
    max_steps: usize,
    interventions: Option<&NeuronAdjustProfile>,
    guard: Option<&KsdProfile>,
) -> Result<GenerationOutcome, ModelError> {
    let mut s = model.session();
    if let Some(p) = interventions {
        s.set_interventions(p, 0);
    }
    let guards = guard.map(std::slice::from_ref).unwrap_or(&[]);
    Ok(guarded_generate_multi(&mut s, prompt, guards, max_steps)?)
}

/// [`generate`] against several KSD profiles at once.
pub fn generate_multi(
    model: &ToyModel,
    prompt: &[u32],
    max_steps: usize,
    interventions: Option<&NeuronAdjustProfile>,
    guards: &[KsdProfile],
) -> Result<GenerationOutcome, ModelError> {
    let mut s = model.session();
    if let Some(p) = interventions {
        s.set_interventions(p, 0);
    }
    Ok(guarded_generate_multi(&mut s, prompt, guards, max_steps)?)
}
