use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::init::{init_parameters, LayerKind};
use super::params::{Mode, ParamId, ParamKind, ParamStore, Session};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::ConvSpec;
use crate::tensor::{Scalar, Tensor};

/// `y = x W + b` with `x: [n, d]`, `W: [d, m]`, `b: [m]`.
pub fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add_bias(y, b),
        None => Ok(y),
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: ConvSpec,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let weight = store.add(
            format!("{name}.weight"),
            init_parameters(LayerKind::Conv, &spec.weight_shape(), rng),
            ParamKind::Weight,
        )?;
        let bias = if bias {
            Some(store.add(
                format!("{name}.bias"),
                init_parameters(LayerKind::Bias, &[spec.out_channels], rng),
                ParamKind::Weight,
            )?)
        } else {
            None
        };
        Ok(Conv2d { spec, weight, bias })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.graph.conv2d(x, w, b, &self.spec)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if in_features == 0 || out_features == 0 {
            return Err(Error::invalid("linear", format!("{in_features} -> {out_features}")));
        }
        let weight = store.add(
            format!("{name}.weight"),
            init_parameters(LayerKind::Linear, &[in_features, out_features], rng),
            ParamKind::Weight,
        )?;
        let bias = store.add(
            format!("{name}.bias"),
            init_parameters(LayerKind::Bias, &[out_features], rng),
            ParamKind::Weight,
        )?;
        Ok(Linear {
            in_features,
            out_features,
            weight,
            bias,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        linear(s.graph, x, w, Some(b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Per-channel batch normalization over axis 1.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub channels: usize,
    pub config: BatchNormConfig,
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        config: BatchNormConfig,
    ) -> Result<Self> {
        if !(config.eps > 0.0) || !(0.0..=1.0).contains(&config.momentum) {
            return Err(Error::invalid("batchnorm", format!("{config:?}")));
        }
        let shape = [channels];
        // Batch-norm initialization is constant; the stream is never drawn from.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        Ok(BatchNorm {
            channels,
            config,
            scale: store.add(
                format!("{name}.scale"),
                init_parameters(LayerKind::BatchNormScale, &shape, &mut rng),
                ParamKind::Weight,
            )?,
            shift: store.add(
                format!("{name}.shift"),
                init_parameters(LayerKind::BatchNormShift, &shape, &mut rng),
                ParamKind::Weight,
            )?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&shape), ParamKind::Buffer)?,
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::full(&shape, T::one()),
                ParamKind::Buffer,
            )?,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let scale = s.param(self.scale);
        let shift = s.param(self.shift);
        let eps = T::lit(self.config.eps);
        match s.mode() {
            Mode::Train => {
                let (y, mean, var) = s.graph.batch_norm_train(x, scale, shift, eps)?;
                let shape = s.graph.shape(x).to_vec();
                let count = shape[0] * shape[2..].iter().product::<usize>();
                let m = T::lit(self.config.momentum);
                let unbias = if count > 1 {
                    T::lit(count as f64 / (count - 1) as f64)
                } else {
                    T::one()
                };
                let rm = s.buffer(self.running_mean).data();
                let rv = s.buffer(self.running_var).data();
                let new_mean: Vec<T> = rm
                    .iter()
                    .zip(&mean)
                    .map(|(&r, &b)| (T::one() - m) * r + m * b)
                    .collect();
                let new_var: Vec<T> = rv
                    .iter()
                    .zip(&var)
                    .map(|(&r, &b)| (T::one() - m) * r + m * b * unbias)
                    .collect();
                s.record_stat(self.running_mean, Tensor::from_parts(vec![self.channels], new_mean));
                s.record_stat(self.running_var, Tensor::from_parts(vec![self.channels], new_var));
                Ok(y)
            }
            Mode::Eval => {
                let rm = s.buffer(self.running_mean).data().to_vec();
                let rv = s.buffer(self.running_var).data().to_vec();
                s.graph.batch_norm_eval(x, scale, shift, &rm, &rv, eps)
            }
        }
    }
}

/// Convolution (no bias) followed by batch normalization and, optionally, relu.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm,
    pub relu: bool,
}

impl ConvBn {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: ConvSpec,
        relu: bool,
        bn: BatchNormConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(ConvBn {
            conv: Conv2d::build(store, &format!("{name}.conv"), spec, false, rng)?,
            bn: BatchNorm::build(store, &format!("{name}.bn"), spec.out_channels, bn)?,
            relu,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        let y = self.bn.forward(s, y)?;
        if self.relu {
            s.graph.relu(y)
        } else {
            Ok(y)
        }
    }
}

/// Inverted dropout; the identity in eval mode or when `p == 0`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Dropout {
    pub p: f64,
}

impl Dropout {
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        if s.mode() == Mode::Eval || self.p == 0.0 {
            return Ok(x);
        }
        let mut rng = s.rng().clone();
        let y = s.graph.dropout(x, self.p, &mut rng)?;
        *s.rng() = rng;
        Ok(y)
    }
}
