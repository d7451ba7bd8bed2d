//! Trainable parameters and the small layers built from them.

use crate::error::{shape, Result};
use crate::rng::Rng;
use crate::tensorops::ops::{self, LayerNormCache};
use crate::tensorops::Tensor;

/// A named trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }

    pub fn accumulate(&mut self, g: &Tensor) {
        debug_assert_eq!(
            g.shape(),
            self.value.shape(),
            "gradient shape for {}",
            self.name
        );
        for (a, b) in self.grad.data_mut().iter_mut().zip(g.data()) {
            *a += b;
        }
    }
}

/// Anything owning parameters, visited in a fixed order.
pub trait Module {
    fn params(&self) -> Vec<&Parameter>;
    fn params_mut(&mut self) -> Vec<&mut Parameter>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

/// `y = x . W + b` on the last axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn new(name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        Self {
            weight: Parameter::new(
                format!("{name}.weight"),
                Tensor::glorot(fan_in, fan_out, rng),
            ),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn from_tensors(name: &str, weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.len() != weight.shape()[1] {
            return Err(shape(format!(
                "linear {name}: {:?} / {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: Parameter::new(format!("{name}.bias"), bias),
        })
    }

    pub fn fan_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::linear(x, &self.weight.value, &self.bias.value)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let (dx, dw, db) = ops::linear_backward(x, &self.weight.value, dy);
        self.weight.accumulate(&dw);
        self.bias.accumulate(&db);
        dx
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Two affine layers with a GELU between them, applied to every row.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    input: Tensor,
    pre: Tensor,
    hidden: Tensor,
}

impl Mlp {
    pub fn new(name: &str, fan_in: usize, hidden: usize, fan_out: usize, rng: &mut Rng) -> Self {
        Self {
            fc1: Linear::new(&format!("{name}.fc1"), fan_in, hidden, rng),
            fc2: Linear::new(&format!("{name}.fc2"), hidden, fan_out, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, MlpCache)> {
        let pre = self.fc1.forward(x)?;
        let hidden = ops::gelu(&pre);
        let y = self.fc2.forward(&hidden)?;
        Ok((
            y,
            MlpCache {
                input: x.clone(),
                pre,
                hidden,
            },
        ))
    }

    pub fn backward(&mut self, cache: &MlpCache, dy: &Tensor) -> Tensor {
        let dh = self.fc2.backward(&cache.hidden, dy);
        let dpre = ops::gelu_backward(&cache.pre, &dh);
        self.fc1.backward(&cache.input, &dpre)
    }
}

/// Free-function form of [`Mlp::forward`].
pub fn mlp_forward(x: &Tensor, mlp: &Mlp) -> Result<Tensor> {
    mlp.forward(x).map(|(y, _)| y)
}

impl Module for Mlp {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = self.fc1.params();
        v.extend(self.fc2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.fc1.params_mut();
        v.extend(self.fc2.params_mut());
        v
    }
}

/// Layer normalization over the last axis with learned gain and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Parameter,
    pub bias: Parameter,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            gain: Parameter::new(format!("{name}.gain"), Tensor::filled(&[dim], 1.0)),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, LayerNormCache)> {
        ops::layer_norm(x, &self.gain.value, &self.bias.value)
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: &Tensor) -> Tensor {
        let (dx, dg, db) = ops::layer_norm_backward(cache, &self.gain.value, dy);
        self.gain.accumulate(&dg);
        self.bias.accumulate(&db);
        dx
    }
}

impl Module for LayerNorm {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.gain, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.gain, &mut self.bias]
    }
}
