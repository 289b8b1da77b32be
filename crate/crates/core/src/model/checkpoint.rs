use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::daffnet::{DaffConfig, DaffNet};
use super::map::{MapConfig, MapNet};
use super::schema::AttributeSchema;
use crate::error::{Error, Result};
use crate::nn::{ParamKind, ParamStore};
use crate::tensor::{DType, Scalar, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
const FORMAT_VERSION: u32 = 1;

/// Which network a checkpoint holds, with its configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    Map(MapConfig),
    Daffnet(DaffConfig),
}

impl ModelSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelSpec::Map(_) => "map",
            ModelSpec::Daffnet(_) => "daffnet",
        }
    }

    pub fn input_size(&self) -> usize {
        match self {
            ModelSpec::Map(c) => c.backbone.input_size,
            ModelSpec::Daffnet(c) => c.backbone.input_size,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Model {
    Map(MapNet),
    Daffnet(DaffNet),
}

impl Model {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        spec: &ModelSpec,
        schema: &AttributeSchema,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        Ok(match spec {
            ModelSpec::Map(c) => Model::Map(MapNet::build(store, c.clone(), schema.clone(), rng)?),
            ModelSpec::Daffnet(c) => Model::Daffnet(DaffNet::build(store, c.clone(), schema.clone(), rng)?),
        })
    }
}

/// Per-channel input standardization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Standardizes a planar `[c, h, w]` image in place.
    pub fn apply(&self, planar: &mut [f32]) {
        let plane = planar.len() / self.mean.len();
        for (c, chunk) in planar.chunks_mut(plane).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            for v in chunk {
                *v = (*v - m) / s;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelSpec,
    pub schema: AttributeSchema,
    pub classes: Vec<String>,
    pub normalization: Normalization,
    pub seed: u64,
    pub params: Vec<ParamRecord>,
}

/// A trained network with everything needed to run it again.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelSpec,
    pub schema: AttributeSchema,
    pub classes: Vec<String>,
    pub normalization: Normalization,
    pub seed: u64,
    pub store: ParamStore<f32>,
}

impl Checkpoint {
    /// Rebuilds the network structure over this checkpoint's parameters.
    pub fn instantiate(&self) -> Result<Model> {
        let (model, fresh) = skeleton(&self.model, &self.schema)?;
        check_layout(&fresh, &records(&self.store))?;
        Ok(model)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION,
            model: self.model.clone(),
            schema: self.schema.clone(),
            classes: self.classes.clone(),
            normalization: self.normalization.clone(),
            seed: self.seed,
            params: records(&self.store),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = serde_json::to_string_pretty(&self.manifest())?;
        let mpath = dir.join(MANIFEST_FILE);
        fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
        let mut buf = Vec::new();
        for (_, e) in self.store.entries() {
            for v in e.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let ppath = dir.join(PARAMS_FILE);
        fs::write(&ppath, buf).map_err(|e| Error::io(&ppath, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest = parse_manifest(&text)?;
        let ppath = dir.join(PARAMS_FILE);
        let bytes = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
        Self::from_parts(manifest, &bytes)
    }

    pub fn from_parts(manifest: Manifest, bytes: &[u8]) -> Result<Self> {
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }
        if manifest.params.is_empty() {
            return Err(Error::Checkpoint("manifest lists no parameters".into()));
        }
        manifest.schema.validate()?;
        let (_, mut store) = skeleton(&manifest.model, &manifest.schema)?;
        check_layout(&store, &manifest.params)?;
        let mut offset = 0;
        for (id, rec) in store.ids().collect::<Vec<_>>().into_iter().zip(&manifest.params) {
            if rec.dtype != DType::F32 {
                return Err(Error::Checkpoint(format!("parameter `{}`: dtype must be f32", rec.name)));
            }
            let need = rec.shape.iter().product::<usize>() * 4;
            let have = bytes.len() - offset;
            if have < need {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}`: buffer holds {have} bytes, expected {need}",
                    rec.name
                )));
            }
            let data: Vec<f32> = bytes[offset..offset + need]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            *store.value_mut(id) = Tensor::new(rec.shape.clone(), data)?;
            offset += need;
        }
        if offset != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last parameter",
                bytes.len() - offset
            )));
        }
        Ok(Checkpoint {
            model: manifest.model,
            schema: manifest.schema,
            classes: manifest.classes,
            normalization: manifest.normalization,
            seed: manifest.seed,
            store,
        })
    }

    /// Errors unless this checkpoint was trained with `schema`.
    pub fn expect_schema(&self, schema: &AttributeSchema) -> Result<()> {
        if &self.schema != schema {
            return Err(Error::Schema(format!(
                "checkpoint schema [{}] does not match [{}]",
                self.schema.names().join(", "),
                schema.names().join(", ")
            )));
        }
        Ok(())
    }
}

fn parse_manifest(text: &str) -> Result<Manifest> {
    let raw: serde_json::Value = serde_json::from_str(text)?;
    let kind = raw
        .get("model")
        .and_then(|m| m.get("kind"))
        .and_then(|k| k.as_str())
        .ok_or_else(|| Error::Checkpoint("manifest has no model kind".into()))?;
    if kind != "map" && kind != "daffnet" {
        return Err(Error::Checkpoint(format!("unknown model kind `{kind}`")));
    }
    Ok(serde_json::from_value(raw)?)
}

fn records<T: Scalar>(store: &ParamStore<T>) -> Vec<ParamRecord> {
    store
        .entries()
        .map(|(_, e)| ParamRecord {
            name: e.name.clone(),
            shape: e.value.shape().to_vec(),
            dtype: DType::F32,
            kind: e.kind,
        })
        .collect()
}

/// The structure described by `spec`, with throwaway initial values.
fn skeleton(spec: &ModelSpec, schema: &AttributeSchema) -> Result<(Model, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = Model::build(&mut store, spec, schema, &mut rng)?;
    Ok((model, store))
}

fn check_layout(store: &ParamStore<f32>, params: &[ParamRecord]) -> Result<()> {
    if store.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "model has {} parameters, manifest lists {}",
            store.len(),
            params.len()
        )));
    }
    for ((_, e), rec) in store.entries().zip(params) {
        if e.name != rec.name || e.value.shape() != rec.shape.as_slice() || e.kind != rec.kind {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` {:?} does not match manifest entry `{}` {:?}",
                e.name,
                e.value.shape(),
                rec.name,
                rec.shape
            )));
        }
    }
    Ok(())
}
