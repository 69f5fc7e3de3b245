//! Parameterized building blocks and the forward-pass context.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::init::kaiming_uniform;
use crate::ops::{BatchStats, ConvSpec, Mode, RunningStats};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mutable state threaded through one forward pass.
pub struct Forward<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub params: &'a ParamStore<T>,
    pub running: &'a [RunningStats<T>],
    pub mode: Mode,
    /// Batch statistics gathered in train mode, keyed by norm-layer index.
    pub batch_stats: Vec<(usize, BatchStats<T>)>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, params: &'a ParamStore<T>, running: &'a [RunningStats<T>], mode: Mode) -> Self {
        Forward { tape, params, running, mode, batch_stats: Vec::new() }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.params, id)
    }
}

/// Registers parameters and running statistics while a model is built.
pub struct Builder<'a, T: Scalar, R: Rng> {
    pub params: &'a mut ParamStore<T>,
    pub running: &'a mut Vec<RunningStats<T>>,
    pub norm_names: &'a mut Vec<String>,
    pub rng: &'a mut R,
}

impl<T: Scalar, R: Rng> Builder<'_, T, R> {
    fn kaiming(&mut self, name: String, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let value = kaiming_uniform(shape, fan_in, self.rng);
        self.params.register(name, value)
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> Result<ParamId> {
        self.params.register(name, Tensor::zeros(shape.to_vec()))
    }

    fn ones(&mut self, name: String, shape: &[usize]) -> Result<ParamId> {
        self.params.register(name, Tensor::ones(shape.to_vec()))
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    transposed: bool,
}

impl Conv {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        let fan_in = spec.in_channels * spec.kernel * spec.kernel;
        let weight = b.kaiming(format!("{name}.weight"), &spec.weight_shape(), fan_in)?;
        let bias = if spec.has_bias { Some(b.zeros(format!("{name}.bias"), &[spec.out_channels])?) } else { None };
        Ok(Conv { spec, weight, bias, transposed: false })
    }

    /// Transposed convolution; fan-in follows the `(C_in, C_out, E, E)`
    /// weight layout's second axis.
    pub fn transposed<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        let fan_in = spec.out_channels * spec.kernel * spec.kernel;
        let weight = b.kaiming(format!("{name}.weight"), &spec.transposed_weight_shape(), fan_in)?;
        let bias = if spec.has_bias { Some(b.zeros(format!("{name}.bias"), &[spec.out_channels])?) } else { None };
        Ok(Conv { spec, weight, bias, transposed: true })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        let b = self.bias.map(|id| f.param(id));
        if self.transposed {
            f.tape.conv_transpose2d(x, w, b, &self.spec)
        } else {
            f.tape.conv2d(x, w, b, &self.spec)
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    /// Index into the model's running statistics.
    pub index: usize,
}

impl BatchNorm {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, channels: usize) -> Result<Self> {
        let gamma = b.ones(format!("{name}.gamma"), &[channels])?;
        let beta = b.zeros(format!("{name}.beta"), &[channels])?;
        let index = b.running.len();
        b.running.push(RunningStats::new(channels));
        b.norm_names.push(name.to_string());
        Ok(BatchNorm { gamma, beta, index })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (f.param(self.gamma), f.param(self.beta));
        let running = f.running.get(self.index).ok_or_else(|| Error::invalid("missing running statistics"))?;
        let (y, stats) = f.tape.batchnorm2d(x, g, b, running, f.mode)?;
        if let Some(stats) = stats {
            f.batch_stats.push((self.index, stats));
        }
        Ok(y)
    }
}

/// conv → batch norm → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub norm: BatchNorm,
}

impl ConvBnRelu {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, spec: ConvSpec) -> Result<Self> {
        let conv = Conv::new(b, &format!("{name}.conv"), spec)?;
        let norm = BatchNorm::new(b, &format!("{name}.bn"), spec.out_channels)?;
        Ok(ConvBnRelu { conv, norm })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(f, x)?;
        let y = self.norm.forward(f, y)?;
        Ok(f.tape.relu(y))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let weight = b.kaiming(format!("{name}.weight"), &[in_dim, out_dim], in_dim)?;
        let bias = if bias { Some(b.zeros(format!("{name}.bias"), &[out_dim])?) } else { None };
        Ok(Linear { weight, bias, in_dim, out_dim })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        let b = self.bias.map(|id| f.param(id));
        f.tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm { gamma: b.ones(format!("{name}.gamma"), &[dim])?, beta: b.zeros(format!("{name}.beta"), &[dim])? })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (f.param(self.gamma), f.param(self.beta));
        f.tape.layernorm(x, g, b)
    }
}
