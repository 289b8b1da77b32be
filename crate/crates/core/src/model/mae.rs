use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{BatchNormConfig, ConvBn, ConvSpec, Linear, ParamStore, Session};
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaeConfig {
    /// Hidden width per attribute is `expansion * P_m`.
    pub expansion: usize,
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub batch_norm: BatchNormConfig,
}

impl Default for MaeConfig {
    fn default() -> Self {
        MaeConfig {
            expansion: 10,
            channels: vec![8, 64, 128],
            kernels: vec![1, 3, 5],
            batch_norm: BatchNormConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MaeTrace {
    /// `[n, 1, A, A]` map with one row per attribute.
    pub map: Var,
    pub output: Var,
}

/// Attribute encoder: embeds each attribute's probabilities into a row of an
/// `A x A` map, convolves it and pools to a fixed-length code.
#[derive(Debug, Clone)]
pub struct Mae {
    pub config: MaeConfig,
    sizes: Vec<usize>,
    embed: Vec<(Linear, Linear)>,
    convs: Vec<ConvBn>,
}

impl Mae {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        config: MaeConfig,
        sizes: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if config.channels.is_empty() || config.channels.len() != config.kernels.len() || config.expansion == 0 {
            return Err(Error::invalid("mae", format!("{config:?}")));
        }
        if let Some(k) = config.kernels.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::invalid("mae", format!("kernel {k} is even")));
        }
        let a = sizes.len();
        let embed = sizes
            .iter()
            .enumerate()
            .map(|(m, &p)| {
                let hidden = config.expansion * p;
                Ok((
                    Linear::build(store, &format!("{name}.attr{m}.expand"), p, hidden, rng)?,
                    Linear::build(store, &format!("{name}.attr{m}.squeeze"), hidden, a, rng)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut convs = Vec::new();
        let mut in_ch = 1;
        for (i, (&c, &k)) in config.channels.iter().zip(&config.kernels).enumerate() {
            convs.push(ConvBn::build(
                store,
                &format!("{name}.conv{i}"),
                ConvSpec::same(in_ch, c, k, 1),
                true,
                config.batch_norm,
                rng,
            )?);
            in_ch = c;
        }
        Ok(Mae {
            config,
            sizes: sizes.to_vec(),
            embed,
            convs,
        })
    }

    pub fn output_dim(&self) -> usize {
        *self.config.channels.last().expect("validated at build")
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, probs: &[Var]) -> Result<Var> {
        Ok(self.trace(s, probs)?.output)
    }

    /// Encodes per-attribute `[n, P_m]` probabilities.
    pub fn trace<T: Scalar>(&self, s: &mut Session<'_, T>, probs: &[Var]) -> Result<MaeTrace> {
        if probs.len() != self.sizes.len() {
            return Err(Error::invalid(
                "mae",
                format!("expected {} attribute inputs, got {}", self.sizes.len(), probs.len()),
            ));
        }
        let n = s.graph.shape(probs[0])[0];
        let a = self.sizes.len();
        let mut rows = Vec::with_capacity(a);
        for ((&p, &size), (expand, squeeze)) in probs.iter().zip(&self.sizes).zip(&self.embed) {
            let shape = s.graph.shape(p);
            if shape != [n, size] {
                let got = shape.to_vec();
                return Err(Error::shape("mae", &got, &[n, size]));
            }
            let h = expand.forward(s, p)?;
            let h = s.graph.sigmoid(h)?;
            rows.push(squeeze.forward(s, h)?);
        }
        let flat = s.graph.concat(&rows, 1)?;
        let map = s.graph.reshape(flat, &[n, 1, a, a])?;
        let mut y = map;
        for c in &self.convs {
            y = c.forward(s, y)?;
        }
        let output = s.graph.global_avg_pool(y)?;
        Ok(MaeTrace { map, output })
    }
}
