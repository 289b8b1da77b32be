use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{DatasetManifest, Record};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    /// Train, validation and test fractions.
    pub ratios: [f64; 3],
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            ratios: [0.6, 0.2, 0.2],
            seed: 0,
            stratified: true,
        }
    }
}

impl SplitSpec {
    pub fn with_seed(seed: u64) -> Self {
        SplitSpec {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().any(|&r| !(r > 0.0)) || (self.ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Data(format!(
                "split ratios {:?} must be positive and sum to 1",
                self.ratios
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: DatasetManifest,
}

/// Largest-remainder apportionment of `n` items; ties go to the earlier part.
pub fn apportion(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Seeded train/validation/test partition, stratified by class unless disabled.
/// Records are sorted by name before shuffling, so input order does not matter.
pub fn split_622(manifest: &DatasetManifest, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    if manifest.is_empty() {
        return Err(Error::Data(format!("dataset `{}` is empty", manifest.source)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut parts: [Vec<Record>; 3] = Default::default();
    let groups: Vec<Vec<Record>> = if spec.stratified {
        (0..manifest.classes.len())
            .map(|k| manifest.records.iter().filter(|r| r.class == k).cloned().collect())
            .collect()
    } else {
        vec![manifest.records.clone()]
    };
    for (k, mut group) in groups.into_iter().enumerate() {
        if group.is_empty() {
            continue;
        }
        if spec.stratified && group.len() < 3 {
            return Err(Error::Data(format!(
                "class `{}` has {} samples, at least 3 are needed to stratify",
                manifest.classes[k],
                group.len()
            )));
        }
        group.sort_by(|a, b| a.name.cmp(&b.name));
        group.shuffle(&mut rng);
        let counts = apportion(group.len(), &spec.ratios);
        let mut rest = group.into_iter();
        for (part, n) in parts.iter_mut().zip(counts) {
            part.extend(rest.by_ref().take(n));
        }
    }
    let [train, val, test] = parts.map(|mut p| {
        p.sort_by(|a, b| (a.class, &a.name).cmp(&(b.class, &b.name)));
        manifest.with_records(p)
    });
    Ok(Splits { train, val, test })
}
