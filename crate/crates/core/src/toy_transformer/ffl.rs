//! Feed-forward layers.

use serde::{Deserialize, Serialize};

use super::{Matrix, ModelError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// Tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    Gelu,
    /// `x / (1 + exp(-x))`.
    Silu,
}

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => {
                0.5 * x * (1.0 + (GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
            }
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Silu => "silu",
        }
    }
}

/// `up`/`gate` are `K x H`, `down` is `H x K`. `gate` is present for GLU FFLs.
#[derive(Debug, Clone, PartialEq)]
pub struct FflWeights {
    pub up: Matrix,
    pub gate: Option<Matrix>,
    pub down: Matrix,
}

impl FflWeights {
    pub fn hidden_dim(&self) -> usize {
        self.up.cols
    }

    pub fn ffl_dim(&self) -> usize {
        self.up.rows
    }

    fn check(&self, z: &[f64]) -> Result<(), ModelError> {
        if z.len() != self.hidden_dim() {
            return Err(ModelError::ShapeMismatch(format!(
                "FFL input has {} values, weights expect {}",
                z.len(),
                self.hidden_dim()
            )));
        }
        if self.down.cols != self.ffl_dim() {
            return Err(ModelError::ShapeMismatch(
                "down projection width differs from up projection".into(),
            ));
        }
        if let Some(g) = &self.gate {
            if (g.rows, g.cols) != (self.up.rows, self.up.cols) {
                return Err(ModelError::ShapeMismatch(
                    "gate and up projections differ in shape".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FflOutput {
    pub output: Vec<f64>,
    /// `W_up z` (regular) or `W_gate z` (GLU), after any intervention.
    pub pre_activation: Vec<f64>,
    /// `W_up z` for GLU layers.
    pub up: Option<Vec<f64>>,
    /// Input of the down projection.
    pub key: Vec<f64>,
}

/// Runs one FFL; `adjust` may rewrite the pre-activation before the
/// nonlinearity.
pub(crate) fn ffl_forward<F>(
    z: &[f64],
    w: &FflWeights,
    act: Activation,
    adjust: F,
) -> Result<FflOutput, ModelError>
where
    F: FnOnce(&mut [f64]) -> Result<(), ModelError>,
{
    w.check(z)?;
    let (mut pre, up) = match &w.gate {
        Some(gate) => (gate.matvec(z), Some(w.up.matvec(z))),
        None => (w.up.matvec(z), None),
    };
    adjust(&mut pre)?;
    let key: Vec<f64> = match &up {
        Some(u) => pre.iter().zip(u).map(|(&g, &u)| act.apply(g) * u).collect(),
        None => pre.iter().map(|&p| act.apply(p)).collect(),
    };
    let output = w.down.matvec(&key);
    Ok(FflOutput {
        output,
        pre_activation: pre,
        up,
        key,
    })
}

/// `W_down act(W_up z)`.
pub fn ffl_regular(z: &[f64], w: &FflWeights, act: Activation) -> Result<FflOutput, ModelError> {
    if w.gate.is_some() {
        return Err(ModelError::ShapeMismatch("regular FFL given a gate".into()));
    }
    ffl_forward(z, w, act, |_| Ok(()))
}

/// `W_down (act(W_gate z) * W_up z)`.
pub fn ffl_glu(z: &[f64], w: &FflWeights, act: Activation) -> Result<FflOutput, ModelError> {
    if w.gate.is_none() {
        return Err(ModelError::ShapeMismatch("GLU FFL without a gate".into()));
    }
    ffl_forward(z, w, act, |_| Ok(()))
}
