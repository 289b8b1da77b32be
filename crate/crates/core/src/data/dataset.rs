use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::image::{crop, CropMode, Image, CHANNELS};
use crate::error::{Error, Result};
use crate::model::{AttributeSchema, Normalization};
use crate::tensor::Tensor;

pub const ATTRIBUTES_FILE: &str = "attributes.csv";
pub const PSEUDO_FILE: &str = "attributes.pseudo.csv";
pub const SCHEMA_FILE: &str = "schema.json";
pub const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

pub const DEFAULT_CLASSES: [&str; 5] = ["Basophil", "Eosinophil", "Lymphocyte", "Monocyte", "Neutrophil"];

/// Whether attribute labels came from an annotator or from a trained predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    True,
    Pseudo,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::True => "true",
            Provenance::Pseudo => "pseudo",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "true" => Ok(Provenance::True),
            "pseudo" => Ok(Provenance::Pseudo),
            other => Err(Error::Data(format!("unknown provenance `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    /// Path on disk.
    pub file: PathBuf,
    /// Path relative to the dataset root with `/` separators; the CSV join key.
    pub name: String,
    pub class: usize,
    pub attributes: Option<Vec<usize>>,
    pub provenance: Provenance,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub schema: AttributeSchema,
    pub source: String,
    pub records: Vec<Record>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Same dataset metadata over a different record list.
    pub fn with_records(&self, records: Vec<Record>) -> Self {
        DatasetManifest {
            root: self.root.clone(),
            classes: self.classes.clone(),
            schema: self.schema.clone(),
            source: self.source.clone(),
            records,
        }
    }

    pub fn labeled(&self) -> usize {
        self.records.iter().filter(|r| r.attributes.is_some()).count()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for r in &self.records {
            counts[r.class] += 1;
        }
        counts
    }

    /// Appends the records of `other`, which must share classes and schema.
    pub fn merge(&mut self, other: &DatasetManifest) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Data(format!(
                "cannot merge `{}` into `{}`: class lists differ",
                other.source, self.source
            )));
        }
        if other.schema != self.schema {
            return Err(Error::Schema(format!(
                "cannot merge `{}` into `{}`: attribute schemas differ",
                other.source, self.source
            )));
        }
        self.records.extend(other.records.iter().cloned());
        Ok(())
    }

    /// Decodes every record's image, in record order.
    pub fn load_images(&self) -> Result<Vec<Image>> {
        self.records.par_iter().map(|r| Image::read(&r.file)).collect()
    }

    /// Joins an attribute CSV onto the records. Rows may carry a trailing
    /// `provenance` column; without it labels are taken as true. Records
    /// already holding true labels are never overwritten. Returns the number
    /// of records updated.
    pub fn apply_attribute_csv(&mut self, path: &Path) -> Result<usize> {
        let rows = read_attribute_csv(path, &self.schema)?;
        let index: HashMap<&str, usize> =
            self.records.iter().enumerate().map(|(i, r)| (r.name.as_str(), i)).collect();
        let mut seen = HashSet::new();
        let mut updates = Vec::new();
        for row in rows {
            let i = *index.get(row.name.as_str()).ok_or_else(|| {
                Error::Data(format!("{}: unknown file `{}`", path.display(), row.name))
            })?;
            if !seen.insert(i) {
                return Err(Error::Data(format!("{}: duplicate row for `{}`", path.display(), row.name)));
            }
            updates.push((i, row));
        }
        let mut applied = 0;
        for (i, row) in updates {
            let rec = &mut self.records[i];
            if rec.attributes.is_some() && rec.provenance == Provenance::True {
                continue;
            }
            rec.attributes = Some(row.labels);
            rec.provenance = row.provenance;
            applied += 1;
        }
        Ok(applied)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeRow {
    pub name: String,
    pub labels: Vec<usize>,
    pub provenance: Provenance,
}

/// Reads `filename,<attributes...>[,provenance]`. An empty file has no rows.
pub fn read_attribute_csv(path: &Path, schema: &AttributeSchema) -> Result<Vec<AttributeRow>> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.iter().all(|b| b.is_ascii_whitespace()) {
        return Ok(Vec::new());
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes.as_slice());
    let header: Vec<String> = reader.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let mut expected = vec!["filename".to_string()];
    expected.extend(schema.names().into_iter().map(String::from));
    let with_provenance = header.len() == expected.len() + 1 && header.last().map(String::as_str) == Some("provenance");
    if header[..header.len() - with_provenance as usize] != expected[..] {
        return Err(Error::Schema(format!(
            "{}: header `{}` does not match `{}`",
            path.display(),
            header.join(","),
            expected.join(",")
        )));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let name = record[0].trim().to_string();
        let labels = (0..schema.len())
            .map(|m| {
                schema.category_index(m, record[m + 1].trim()).map_err(|e| {
                    Error::Data(format!("{}: row `{name}`: {e}", path.display()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let provenance = if with_provenance {
            Provenance::parse(record[schema.len() + 1].trim())?
        } else {
            Provenance::True
        };
        rows.push(AttributeRow { name, labels, provenance });
    }
    Ok(rows)
}

/// Writes the labeled records; `with_provenance` appends the provenance column.
pub fn write_attribute_csv(
    path: &Path,
    schema: &AttributeSchema,
    records: &[Record],
    with_provenance: bool,
) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["filename"];
    header.extend(schema.names());
    if with_provenance {
        header.push("provenance");
    }
    writer.write_record(&header).map_err(csv_err)?;
    for r in records {
        let Some(labels) = &r.attributes else { continue };
        let mut row = vec![r.name.as_str()];
        row.extend(labels.iter().enumerate().map(|(m, &t)| schema.category_name(m, t)));
        if with_provenance {
            row.push(r.provenance.as_str());
        }
        writer.write_record(&row).map_err(csv_err)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Registers `root/<class>/<image>` files and joins `root/attributes.csv` if present.
/// Classes are the sorted subdirectory names.
pub fn load_dataset(root: &Path, schema: &AttributeSchema) -> Result<DatasetManifest> {
    schema.validate()?;
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset root `{}` does not exist", root.display())));
    }
    let mut classes = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().is_dir() {
            classes.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    classes.sort();
    if classes.is_empty() {
        return Err(Error::Data(format!("`{}` has no class subdirectories", root.display())));
    }
    let mut records = Vec::new();
    for (class, name) in classes.iter().enumerate() {
        let dir = root.join(name);
        let mut files = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            let ext = path
                .extension()
                .map(|e| e.to_string_lossy().to_ascii_lowercase())
                .unwrap_or_default();
            if path.is_file() && IMAGE_EXTENSIONS.contains(&ext.as_str()) {
                files.push(path);
            }
        }
        files.sort();
        for file in files {
            let fname = file.file_name().unwrap_or_default().to_string_lossy().into_owned();
            records.push(Record {
                name: format!("{name}/{fname}"),
                file,
                class,
                attributes: None,
                provenance: Provenance::True,
                source: source_tag(root),
            });
        }
    }
    records.par_iter().try_for_each(|r| {
        image::image_dimensions(&r.file)
            .map(|_| ())
            .map_err(|source| Error::Image {
                path: r.file.clone(),
                source,
            })
    })?;
    let mut manifest = DatasetManifest {
        root: root.to_path_buf(),
        classes,
        schema: schema.clone(),
        source: source_tag(root),
        records,
    };
    let csv = root.join(ATTRIBUTES_FILE);
    if csv.is_file() {
        manifest.apply_attribute_csv(&csv)?;
    }
    Ok(manifest)
}

fn source_tag(root: &Path) -> String {
    root.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| root.display().to_string())
}

/// Per-channel mean and standard deviation of `[0, 1]` pixel values.
pub fn channel_stats(images: &[Image]) -> Result<Normalization> {
    if images.is_empty() {
        return Err(Error::Data("no images to compute statistics over".into()));
    }
    let mut sum = [0f64; CHANNELS];
    let mut sq = [0f64; CHANNELS];
    let mut count = 0f64;
    for img in images {
        let plane = img.height() * img.width();
        for (c, chunk) in img.data().chunks(plane).enumerate() {
            for &v in chunk {
                let v = v as f64 / 255.0;
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        count += plane as f64;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| ((s / count - m * m).max(0.0)).sqrt().max(1e-6) as f32)
        .collect();
    Ok(Normalization {
        mean: mean.into_iter().map(|m| m as f32).collect(),
        std,
    })
}

/// Crops, scales to `[0, 1]` and standardizes images into an `[n, 3, size, size]` tensor.
pub fn batch_tensor(
    images: &[&Image],
    mode: CropMode,
    size: usize,
    norm: &Normalization,
    rng: &mut impl Rng,
) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(images.len() * CHANNELS * size * size);
    for img in images {
        let mut planar = crop(img, mode, size, rng)?.to_unit();
        norm.apply(&mut planar);
        data.extend(planar);
    }
    Tensor::new(vec![images.len(), CHANNELS, size, size], data)
}
