//! Forward-pass context and the small parameterized layers shared by the
//! attention blocks, the encoder heads and the autoencoder.

use alloc::format;

use crate::numerics::{dropout_mask, glorot_uniform, ParamId, ParamStore, Tape, Tensor, Var};
use crate::{Result, Rng};

pub enum Mode<'r> {
    Eval,
    Train(&'r mut Rng),
}

/// One forward pass: a fresh tape bound to a parameter store.
pub struct Forward<'s, 'r> {
    pub tape: Tape,
    pub store: &'s ParamStore,
    mode: Mode<'r>,
}

impl<'s, 'r> Forward<'s, 'r> {
    pub fn new(store: &'s ParamStore, mode: Mode<'r>) -> Self {
        Self { tape: Tape::new(), store, mode }
    }

    pub fn eval(store: &'s ParamStore) -> Self {
        Self::new(store, Mode::Eval)
    }

    pub fn train(store: &'s ParamStore, rng: &'r mut Rng) -> Self {
        Self::new(store, Mode::Train(rng))
    }

    pub fn is_training(&self) -> bool {
        matches!(self.mode, Mode::Train(_))
    }

    pub fn rng(&mut self) -> Option<&mut Rng> {
        match &mut self.mode {
            Mode::Train(rng) => Some(rng),
            Mode::Eval => None,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        self.tape.param(self.store, id)
    }

    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.tape.constant(t)
    }

    /// Inverted dropout; identity in eval mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(crate::Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let len = self.tape.value(x).len();
        let Some(rng) = self.rng() else { return Ok(x) };
        let mask = dropout_mask(len, rate, rng);
        self.tape.mul_const(x, mask)
    }
}

/// `y = x·W + b` applied to every row of `x`. With a per-timestep input this
/// is also the pointwise (kernel size 1) convolution.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), glorot_uniform(inputs, outputs, rng))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]))?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, fwd: &mut Forward, x: Var) -> Result<Var> {
        let w = fwd.param(self.weight)?;
        let b = fwd.param(self.bias)?;
        let y = fwd.tape.matmul(x, w)?;
        fwd.tape.add_bias(y, b)
    }

    pub fn param_count(inputs: usize, outputs: usize) -> usize {
        inputs * outputs + outputs
    }
}

/// Two dense layers with ReLU in between, applied per row.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub hidden: Dense,
    pub output: Dense,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, inputs: usize, hidden: usize, outputs: usize) -> Result<Self> {
        Ok(Self {
            hidden: Dense::new(store, rng, &format!("{name}.ff1"), inputs, hidden)?,
            output: Dense::new(store, rng, &format!("{name}.ff2"), hidden, outputs)?,
        })
    }

    pub fn forward(&self, fwd: &mut Forward, x: Var) -> Result<Var> {
        let h = self.hidden.forward(fwd, x)?;
        let h = fwd.tape.relu(h)?;
        self.output.forward(fwd, h)
    }

    pub fn param_count(inputs: usize, hidden: usize, outputs: usize) -> usize {
        Dense::param_count(inputs, hidden) + Dense::param_count(hidden, outputs)
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled(&[dim], 1.0))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, fwd: &mut Forward, x: Var) -> Result<Var> {
        let g = fwd.param(self.gamma)?;
        let b = fwd.param(self.beta)?;
        fwd.tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}
