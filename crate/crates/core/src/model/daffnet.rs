use rand::Rng;
use serde::{Deserialize, Serialize};

use super::backbone::{Backbone, BackboneConfig};
use super::mae::{Mae, MaeConfig};
use super::map::{MapConfig, MapNet, MAP_PREFIX};
use super::schema::AttributeSchema;
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Linear, ParamStore, Session};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DaffConfig {
    pub backbone: BackboneConfig,
    pub map: MapConfig,
    pub mae: MaeConfig,
    pub num_classes: usize,
    /// Use the attribute branch at all.
    pub use_mfe: bool,
    /// Encode attribute probabilities with the encoder; otherwise feed the
    /// zero-padded probabilities to the decoder directly.
    pub use_mae: bool,
}

impl Default for DaffConfig {
    fn default() -> Self {
        DaffConfig {
            backbone: BackboneConfig::default(),
            map: MapConfig::default(),
            mae: MaeConfig::default(),
            num_classes: 5,
            use_mfe: true,
            use_mae: true,
        }
    }
}

impl DaffConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("daffnet", format!("{} classes", self.num_classes)));
        }
        if self.use_mfe && self.map.num_classes != self.num_classes {
            return Err(Error::invalid(
                "daffnet",
                format!(
                    "attribute predictor has {} classes, classifier {}",
                    self.map.num_classes, self.num_classes
                ),
            ));
        }
        if self.use_mae && !self.use_mfe {
            return Err(Error::invalid("daffnet", "the attribute encoder needs the attribute branch"));
        }
        if self.map.backbone.input_size != self.backbone.input_size {
            return Err(Error::invalid("daffnet", "both backbones must share the input size"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DaffOutput {
    pub semantic: Var,
    /// Attribute-branch feature fed to the decoder, if any.
    pub morphological: Option<Var>,
    /// `[n, 1, A, A]` encoder map, when the encoder runs.
    pub attribute_map: Option<Var>,
    pub fused: Var,
    pub logits: Var,
    pub probs: Var,
}

/// Dual-branch classifier: semantic backbone features concatenated with
/// encoded attribute predictions, then a linear decoder and softmax. The
/// attribute predictor runs frozen.
#[derive(Debug, Clone)]
pub struct DaffNet {
    pub config: DaffConfig,
    pub schema: AttributeSchema,
    backbone: Backbone,
    map: Option<MapNet>,
    mae: Option<Mae>,
    decoder: Linear,
}

pub const DAFF_PREFIX: &str = "daff";

impl DaffNet {
    /// Builds the network; attribute-predictor parameters are stored frozen
    /// under the same names a standalone predictor uses.
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        config: DaffConfig,
        schema: AttributeSchema,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        schema.validate()?;
        let map = if config.use_mfe {
            let m = MapNet::build(store, config.map.clone(), schema.clone(), rng)?;
            store.freeze_prefix(&format!("{MAP_PREFIX}."));
            Some(m)
        } else {
            None
        };
        let backbone = Backbone::build(store, &format!("{DAFF_PREFIX}.backbone"), config.backbone.clone(), rng)?;
        let mae = if config.use_mae {
            Some(Mae::build(store, &format!("{DAFF_PREFIX}.mae"), config.mae.clone(), &schema.sizes(), rng)?)
        } else {
            None
        };
        let morph_dim = match (&mae, config.use_mfe) {
            (Some(m), _) => m.output_dim(),
            (None, true) => schema.len() * schema.max_categories(),
            (None, false) => 0,
        };
        let decoder = Linear::build(
            store,
            &format!("{DAFF_PREFIX}.decoder"),
            config.backbone.feature_dim + morph_dim,
            config.num_classes,
            rng,
        )?;
        Ok(DaffNet {
            config,
            schema,
            backbone,
            map,
            mae,
            decoder,
        })
    }

    pub fn map(&self) -> Option<&MapNet> {
        self.map.as_ref()
    }

    pub fn decoder(&self) -> &Linear {
        &self.decoder
    }

    pub fn fused_dim(&self) -> usize {
        self.decoder.in_features
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<DaffOutput> {
        let semantic = self.backbone.forward(s, x)?;
        let mut attribute_map = None;
        let morphological = match &self.map {
            Some(map) => {
                let probs = s.frozen(|s| {
                    let out = map.forward(s, x)?;
                    map.probabilities(s, &out)
                })?;
                Some(match &self.mae {
                    Some(mae) => {
                        let t = mae.trace(s, &probs)?;
                        attribute_map = Some(t.map);
                        t.output
                    }
                    None => self.padded(s, &probs)?,
                })
            }
            None => None,
        };
        let fused = match morphological {
            Some(m) => s.graph.concat(&[semantic, m], 1)?,
            None => semantic,
        };
        let logits = self.decoder.forward(s, fused)?;
        let probs = s.graph.softmax(logits, 1)?;
        Ok(DaffOutput {
            semantic,
            morphological,
            attribute_map,
            fused,
            logits,
            probs,
        })
    }

    /// Concatenates per-attribute probabilities, each zero-padded to the
    /// largest category count.
    fn padded<T: Scalar>(&self, s: &mut Session<'_, T>, probs: &[Var]) -> Result<Var> {
        let width = self.schema.max_categories();
        let mut parts = Vec::with_capacity(probs.len() * 2);
        for &p in probs {
            let [n, k] = [s.graph.shape(p)[0], s.graph.shape(p)[1]];
            parts.push(p);
            if k < width {
                parts.push(s.graph.constant(Tensor::zeros(&[n, width - k])));
            }
        }
        s.graph.concat(&parts, 1)
    }
}
