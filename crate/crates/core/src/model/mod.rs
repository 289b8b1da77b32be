//! Network assembly: residual backbone, attribute predictor, attribute
//! encoder, the fused classifier, and checkpoint I/O.

mod backbone;
mod checkpoint;
mod daffnet;
mod mae;
mod map;
mod schema;

pub use backbone::{Backbone, BackboneConfig, Bottleneck};
pub use checkpoint::{
    Checkpoint, Manifest, Model, ModelSpec, Normalization, ParamRecord, MANIFEST_FILE, PARAMS_FILE,
};
pub use daffnet::{DaffConfig, DaffNet, DaffOutput, DAFF_PREFIX};
pub use mae::{Mae, MaeConfig, MaeTrace};
pub use map::{argmax, map_predict, MapConfig, MapNet, MapOutput, MAP_PREFIX};
pub use schema::{Attribute, AttributeSchema};
