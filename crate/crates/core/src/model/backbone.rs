use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{Epsa, EpsaSpec, Sa, SaSpec};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, BatchNormConfig, ConvBn, ConvSpec, Linear, ParamStore, Session};
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stem_width: usize,
    pub stem_stride: usize,
    /// Middle width of the bottlenecks in each stage.
    pub widths: Vec<usize>,
    pub blocks: Vec<usize>,
    /// Bottleneck output width is `width * expansion`.
    pub expansion: usize,
    /// Side length of the (square) input images.
    pub input_size: usize,
    pub feature_dim: usize,
    pub epsa: bool,
    pub sa: bool,
    pub epsa_branches: usize,
    pub epsa_kernels: Vec<usize>,
    pub epsa_groups: Vec<usize>,
    pub epsa_reduction: usize,
    pub sa_kernel: usize,
    pub batch_norm: BatchNormConfig,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            stem_width: 16,
            stem_stride: 2,
            widths: vec![16, 32, 64],
            blocks: vec![2, 2, 2],
            expansion: 2,
            input_size: 56,
            feature_dim: 64,
            epsa: true,
            sa: true,
            epsa_branches: 4,
            epsa_kernels: vec![3, 5, 7, 9],
            epsa_groups: vec![1, 4, 8, 16],
            epsa_reduction: 2,
            sa_kernel: 7,
            batch_norm: BatchNormConfig::default(),
        }
    }
}

impl BackboneConfig {
    /// The residual baseline with both attention blocks off.
    pub fn plain() -> Self {
        BackboneConfig {
            epsa: false,
            sa: false,
            ..Default::default()
        }
    }

    /// Tiny geometry for gradient checks and fast tests.
    pub fn tiny() -> Self {
        BackboneConfig {
            stem_width: 4,
            widths: vec![4, 8],
            blocks: vec![1, 1],
            input_size: 8,
            feature_dim: 5,
            epsa_kernels: vec![1, 3, 3, 5],
            ..Default::default()
        }
    }

    pub fn epsa_spec(&self, channels: usize) -> EpsaSpec {
        EpsaSpec {
            channels,
            branches: self.epsa_branches,
            kernels: self.epsa_kernels.clone(),
            groups: self.epsa_groups.clone(),
            reduction: self.epsa_reduction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("backbone", msg));
        if self.widths.is_empty() || self.widths.len() != self.blocks.len() {
            return bad(format!(
                "{} stage widths vs {} block counts",
                self.widths.len(),
                self.blocks.len()
            ));
        }
        if self.feature_dim == 0 || self.in_channels == 0 || self.stem_width == 0 || self.expansion == 0 {
            return bad("sizes must be positive".into());
        }
        if self.blocks.contains(&0) || self.widths.contains(&0) {
            return bad("every stage needs a positive width and at least one block".into());
        }
        if self.epsa {
            for &w in &self.widths {
                self.epsa_spec(w).validate()?;
            }
        }
        if self.sa && self.sa_kernel % 2 == 0 {
            return bad(format!("sa kernel {} is even", self.sa_kernel));
        }
        ConvSpec::new(self.in_channels, self.stem_width, 3, self.stem_stride, 1)
            .output_hw(self.input_size, self.input_size)?;
        Ok(())
    }

    pub fn output_channels(&self) -> usize {
        self.widths.last().copied().unwrap_or(0) * self.expansion
    }
}

/// Middle transform of a bottleneck: EPSA or a plain 3x3 conv.
#[derive(Debug, Clone)]
enum Middle {
    Epsa { epsa: Epsa, bn: BatchNorm },
    Conv(ConvBn),
}

/// 1x1 reduce (carrying the stride), middle transform, optional spatial
/// attention, 1x1 expand, residual add, relu.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    reduce: ConvBn,
    middle: Middle,
    sa: Option<Sa>,
    expand: ConvBn,
    shortcut: Option<ConvBn>,
}

impl Bottleneck {
    fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &BackboneConfig,
        in_ch: usize,
        width: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bn = cfg.batch_norm;
        let out_ch = width * cfg.expansion;
        let reduce = ConvBn::build(
            store,
            &format!("{name}.reduce"),
            ConvSpec::new(in_ch, width, 1, stride, 0),
            true,
            bn,
            rng,
        )?;
        let middle = if cfg.epsa {
            Middle::Epsa {
                epsa: Epsa::build(store, &format!("{name}.epsa"), cfg.epsa_spec(width), rng)?,
                bn: BatchNorm::build(store, &format!("{name}.epsa_bn"), width, bn)?,
            }
        } else {
            Middle::Conv(ConvBn::build(
                store,
                &format!("{name}.conv"),
                ConvSpec::same(width, width, 3, 1),
                true,
                bn,
                rng,
            )?)
        };
        let sa = if cfg.sa {
            Some(Sa::build(store, &format!("{name}.sa"), SaSpec { kernel: cfg.sa_kernel }, rng)?)
        } else {
            None
        };
        let expand = ConvBn::build(
            store,
            &format!("{name}.expand"),
            ConvSpec::new(width, out_ch, 1, 1, 0),
            false,
            bn,
            rng,
        )?;
        let shortcut = if stride != 1 || in_ch != out_ch {
            Some(ConvBn::build(
                store,
                &format!("{name}.shortcut"),
                ConvSpec::new(in_ch, out_ch, 1, stride, 0),
                false,
                bn,
                rng,
            )?)
        } else {
            None
        };
        Ok(Bottleneck {
            reduce,
            middle,
            sa,
            expand,
            shortcut,
        })
    }

    fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.reduce.forward(s, x)?;
        let y = match &self.middle {
            Middle::Epsa { epsa, bn } => {
                let y = epsa.forward(s, y)?;
                let y = bn.forward(s, y)?;
                s.graph.relu(y)?
            }
            Middle::Conv(c) => c.forward(s, y)?,
        };
        let y = match &self.sa {
            Some(sa) => sa.forward(s, y)?,
            None => y,
        };
        let y = self.expand.forward(s, y)?;
        let skip = match &self.shortcut {
            Some(c) => c.forward(s, x)?,
            None => x,
        };
        let y = s.graph.add(y, skip)?;
        s.graph.relu(y)
    }
}

/// Residual network of bottleneck stages ending in a linear projection of
/// the pooled features.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    stem: ConvBn,
    blocks: Vec<Bottleneck>,
    head: Linear,
}

impl Backbone {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        config: BackboneConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let stem = ConvBn::build(
            store,
            &format!("{name}.stem"),
            ConvSpec::new(config.in_channels, config.stem_width, 3, config.stem_stride, 1),
            true,
            config.batch_norm,
            rng,
        )?;
        let mut blocks = Vec::new();
        let mut in_ch = config.stem_width;
        for (stage, (&width, &count)) in config.widths.iter().zip(&config.blocks).enumerate() {
            for b in 0..count {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                let block = Bottleneck::build(
                    store,
                    &format!("{name}.stage{stage}.block{b}"),
                    &config,
                    in_ch,
                    width,
                    stride,
                    rng,
                )?;
                blocks.push(block);
                in_ch = width * config.expansion;
            }
        }
        let head = Linear::build(store, &format!("{name}.head"), in_ch, config.feature_dim, rng)?;
        Ok(Backbone {
            config,
            stem,
            blocks,
            head,
        })
    }

    /// `[n, in_channels, h, w] -> [n, feature_dim]`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x);
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            let got = shape.to_vec();
            return Err(Error::shape("backbone", &got, &[0, self.config.in_channels, 0, 0]));
        }
        let mut y = self.stem.forward(s, x)?;
        for b in &self.blocks {
            y = b.forward(s, y)?;
        }
        let pooled = s.graph.global_avg_pool(y)?;
        self.head.forward(s, pooled)
    }
}
