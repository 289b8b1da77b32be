//! Channel attention over a multi-kernel pyramid (EPSA) and a spatial
//! attention mask (SA).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{ConvSpec, Conv2d, Linear, ParamStore, Session};
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpsaSpec {
    pub channels: usize,
    pub branches: usize,
    pub kernels: Vec<usize>,
    /// Requested group count per branch; reduced to the largest divisor of
    /// the branch width that does not exceed it.
    pub groups: Vec<usize>,
    pub reduction: usize,
}

impl EpsaSpec {
    /// Four branches with kernels 3/5/7/9 and groups 1/4/8/16.
    pub fn new(channels: usize, reduction: usize) -> Self {
        EpsaSpec {
            channels,
            branches: 4,
            kernels: vec![3, 5, 7, 9],
            groups: vec![1, 4, 8, 16],
            reduction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::invalid("epsa", msg));
        if self.branches == 0 || self.channels == 0 || self.reduction == 0 {
            return err(format!("{self:?}: sizes must be positive"));
        }
        if self.channels % self.branches != 0 {
            return err(format!(
                "channels {} not divisible by {} branches",
                self.channels, self.branches
            ));
        }
        if self.kernels.len() != self.branches || self.groups.len() != self.branches {
            return err(format!(
                "{} branches need as many kernels and groups, got {} and {}",
                self.branches,
                self.kernels.len(),
                self.groups.len()
            ));
        }
        if let Some(k) = self.kernels.iter().find(|&&k| k % 2 == 0) {
            return err(format!("kernel {k} is even"));
        }
        if self.groups.contains(&0) {
            return err("group count 0".into());
        }
        Ok(())
    }

    pub fn branch_width(&self) -> usize {
        self.channels / self.branches
    }

    /// Group count actually used by `branch`.
    pub fn effective_groups(&self, branch: usize) -> usize {
        let width = self.branch_width();
        let cap = self.groups[branch].min(width);
        (1..=cap).rev().find(|g| width % g == 0).unwrap_or(1)
    }

    pub fn hidden_width(&self) -> usize {
        (self.branch_width() / self.reduction).max(1)
    }
}

/// Squeeze-excitation descriptor: pool, bottleneck MLP, sigmoid.
#[derive(Debug, Clone)]
pub struct SqueezeExcite {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SqueezeExcite {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(SqueezeExcite {
            fc1: Linear::build(store, &format!("{name}.fc1"), channels, hidden, rng)?,
            fc2: Linear::build(store, &format!("{name}.fc2"), hidden, channels, rng)?,
        })
    }

    /// `[n, c, h, w] -> [n, c]` gate values in (0, 1).
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let z = s.graph.global_avg_pool(x)?;
        let z = self.fc1.forward(s, z)?;
        let z = s.graph.relu(z)?;
        let z = self.fc2.forward(s, z)?;
        s.graph.sigmoid(z)
    }
}

/// Intermediate values of one EPSA pass.
#[derive(Debug, Clone, Copy)]
pub struct EpsaTrace {
    pub output: Var,
    /// Per-branch convolution outputs concatenated, before weighting.
    pub features: Var,
    /// Sigmoid descriptors, `[n, branches, branch_width]`.
    pub descriptors: Var,
    /// Cross-branch softmax of the descriptors, `[n, branches, branch_width]`.
    pub weights: Var,
}

#[derive(Debug, Clone)]
pub struct Epsa {
    pub spec: EpsaSpec,
    pub convs: Vec<Conv2d>,
    pub se: SqueezeExcite,
}

impl Epsa {
    pub fn build<T: Scalar>(store: &mut ParamStore<T>, name: &str, spec: EpsaSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let width = spec.branch_width();
        let convs = (0..spec.branches)
            .map(|i| {
                let conv = ConvSpec::same(width, width, spec.kernels[i], spec.effective_groups(i));
                Conv2d::build(store, &format!("{name}.branch{i}"), conv, false, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let se = SqueezeExcite::build(store, &format!("{name}.se"), width, spec.hidden_width(), rng)?;
        Ok(Epsa { spec, convs, se })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        Ok(self.trace(s, x)?.output)
    }

    pub fn trace<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<EpsaTrace> {
        let shape = s.graph.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.spec.channels {
            return Err(Error::shape("epsa", &shape, &[0, self.spec.channels, 0, 0]));
        }
        let n = shape[0];
        let (branches, width) = (self.spec.branches, self.spec.branch_width());
        let mut feats = Vec::with_capacity(branches);
        let mut descs = Vec::with_capacity(branches);
        for (i, conv) in self.convs.iter().enumerate() {
            let part = s.graph.narrow(x, 1, i * width, width)?;
            let f = conv.forward(s, part)?;
            descs.push(self.se.forward(s, f)?);
            feats.push(f);
        }
        let features = s.graph.concat(&feats, 1)?;
        let d = s.graph.concat(&descs, 1)?;
        let descriptors = s.graph.reshape(d, &[n, branches, width])?;
        let (output, weights) = weigh_branches(s.graph, features, descriptors)?;
        Ok(EpsaTrace {
            output,
            features,
            descriptors,
            weights,
        })
    }
}

/// Normalizes `descriptors: [n, branches, width]` with a softmax across
/// branches and scales the matching channels of `features: [n, branches * width, h, w]`.
/// Returns `(weighted features, weights)`.
pub fn weigh_branches<T: Scalar>(g: &mut Graph<T>, features: Var, descriptors: Var) -> Result<(Var, Var)> {
    let ds = g.shape(descriptors).to_vec();
    let fs = g.shape(features).to_vec();
    if ds.len() != 3 || fs.len() != 4 || fs[0] != ds[0] || fs[1] != ds[1] * ds[2] {
        return Err(Error::shape("epsa", &fs, &ds));
    }
    let weights = g.softmax(descriptors, 1)?;
    let flat = g.reshape(weights, &[ds[0], ds[1] * ds[2]])?;
    let output = g.channel_scale(features, flat)?;
    Ok((output, weights))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaSpec {
    pub kernel: usize,
}

impl Default for SaSpec {
    fn default() -> Self {
        SaSpec { kernel: 7 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SaTrace {
    pub output: Var,
    /// `[n, 1, h, w]` mask in (0, 1).
    pub mask: Var,
}

/// Spatial mask from channel-mean and channel-max maps.
#[derive(Debug, Clone)]
pub struct Sa {
    pub spec: SaSpec,
    pub conv: Conv2d,
}

impl Sa {
    pub fn build<T: Scalar>(store: &mut ParamStore<T>, name: &str, spec: SaSpec, rng: &mut impl Rng) -> Result<Self> {
        if spec.kernel % 2 == 0 {
            return Err(Error::invalid("sa", format!("kernel {} is even", spec.kernel)));
        }
        let conv = Conv2d::build(store, &format!("{name}.mask"), ConvSpec::same(2, 1, spec.kernel, 1), true, rng)?;
        Ok(Sa { spec, conv })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        Ok(self.trace(s, x)?.output)
    }

    pub fn trace<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<SaTrace> {
        let avg = s.graph.channel_mean(x)?;
        let max = s.graph.channel_max(x)?;
        let pooled = s.graph.concat(&[avg, max], 1)?;
        let logits = self.conv.forward(s, pooled)?;
        let mask = s.graph.sigmoid(logits)?;
        let output = s.graph.spatial_mask(x, mask)?;
        Ok(SaTrace { output, mask })
    }
}

#[cfg(test)]
mod tests;
