use rand::Rng;
use serde::{Deserialize, Serialize};

use super::backbone::{Backbone, BackboneConfig};
use super::schema::AttributeSchema;
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Linear, ParamStore, Session};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapConfig {
    pub backbone: BackboneConfig,
    pub num_classes: usize,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig {
            backbone: BackboneConfig::plain(),
            num_classes: 5,
        }
    }
}

/// Graph variables produced by one attribute-predictor pass.
#[derive(Debug, Clone)]
pub struct MapOutput {
    /// One `[n, P_m]` logit block per attribute.
    pub attribute_logits: Vec<Var>,
    /// Auxiliary `[n, K]` class logits.
    pub class_logits: Var,
    /// Shared `[n, feature_dim]` backbone feature.
    pub feature: Var,
}

/// Attribute predictor: a backbone feeding one linear head per attribute
/// plus an auxiliary class head.
#[derive(Debug, Clone)]
pub struct MapNet {
    pub config: MapConfig,
    pub schema: AttributeSchema,
    backbone: Backbone,
    heads: Vec<Linear>,
    aux: Linear,
}

pub const MAP_PREFIX: &str = "map";

impl MapNet {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        config: MapConfig,
        schema: AttributeSchema,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        schema.validate()?;
        if config.num_classes < 2 {
            return Err(Error::invalid("map", format!("{} classes", config.num_classes)));
        }
        let backbone = Backbone::build(store, &format!("{MAP_PREFIX}.backbone"), config.backbone.clone(), rng)?;
        let d = config.backbone.feature_dim;
        let heads = schema
            .sizes()
            .iter()
            .enumerate()
            .map(|(m, &p)| Linear::build(store, &format!("{MAP_PREFIX}.head{m}"), d, p, rng))
            .collect::<Result<Vec<_>>>()?;
        let aux = Linear::build(store, &format!("{MAP_PREFIX}.aux"), d, config.num_classes, rng)?;
        Ok(MapNet {
            config,
            schema,
            backbone,
            heads,
            aux,
        })
    }

    pub fn heads(&self) -> &[Linear] {
        &self.heads
    }

    pub fn aux_head(&self) -> &Linear {
        &self.aux
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<MapOutput> {
        let feature = self.backbone.forward(s, x)?;
        let attribute_logits = self
            .heads
            .iter()
            .map(|h| h.forward(s, feature))
            .collect::<Result<Vec<_>>>()?;
        let class_logits = self.aux.forward(s, feature)?;
        Ok(MapOutput {
            attribute_logits,
            class_logits,
            feature,
        })
    }

    /// Per-attribute softmax probabilities.
    pub fn probabilities<T: Scalar>(&self, s: &mut Session<'_, T>, out: &MapOutput) -> Result<Vec<Var>> {
        out.attribute_logits.iter().map(|&l| s.graph.softmax(l, 1)).collect()
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-sample attribute labels from per-attribute `[n, P_m]` logits or
/// probabilities.
pub fn map_predict<T: Scalar>(heads: &[Tensor<T>]) -> Result<Vec<Vec<usize>>> {
    let n = match heads.first() {
        Some(h) => h.shape()[0],
        None => return Ok(Vec::new()),
    };
    for h in heads {
        if h.shape().len() != 2 || h.shape()[0] != n {
            return Err(Error::shape("map_predict", h.shape(), &[n, 0]));
        }
    }
    Ok((0..n).map(|i| heads.iter().map(|h| argmax(h.row(i))).collect()).collect())
}
