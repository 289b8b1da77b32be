use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub categories: Vec<String>,
}

/// Ordered morphological attributes with their category names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub attributes: Vec<Attribute>,
}

impl Default for AttributeSchema {
    fn default() -> Self {
        let attr = |name: &str, cats: &[&str]| Attribute {
            name: name.into(),
            categories: cats.iter().map(|c| c.to_string()).collect(),
        };
        AttributeSchema {
            attributes: vec![
                attr("cell_size", &["big", "small"]),
                attr("cell_shape", &["round", "irregular"]),
                attr(
                    "nucleus_shape",
                    &[
                        "unsegmented-round",
                        "unsegmented-indented",
                        "segmented-bilobed",
                        "segmented-multilobed",
                        "irregular",
                    ],
                ),
                attr("nc_ratio", &["high", "low"]),
                attr("chromatin_density", &["densely", "loosely"]),
                attr("cytoplasm_vacuole", &["yes", "no"]),
                attr("cytoplasm_texture", &["clear", "frosted"]),
                attr("cytoplasm_color", &["light blue", "blue", "purple blue"]),
                attr("granule_type", &["nil", "small", "round"]),
                attr("granule_color", &["nil", "pink", "red", "purple"]),
                attr("granularity", &["yes", "no"]),
            ],
        }
    }
}

impl AttributeSchema {
    pub fn new(attributes: Vec<Attribute>) -> Result<Self> {
        let s = AttributeSchema { attributes };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.attributes.is_empty() {
            return Err(Error::Schema("no attributes".into()));
        }
        let mut names = HashSet::new();
        for a in &self.attributes {
            if !names.insert(a.name.as_str()) {
                return Err(Error::Schema(format!("duplicate attribute `{}`", a.name)));
            }
            if a.name.is_empty() || a.name == "filename" || a.name.contains(',') {
                return Err(Error::Schema(format!("invalid attribute name `{}`", a.name)));
            }
            if a.categories.len() < 2 {
                return Err(Error::Schema(format!("attribute `{}` needs at least 2 categories", a.name)));
            }
            let mut cats = HashSet::new();
            for c in &a.categories {
                if c.is_empty() || c.contains(',') || !cats.insert(c.as_str()) {
                    return Err(Error::Schema(format!("attribute `{}`: bad category `{c}`", a.name)));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    /// Category count per attribute.
    pub fn sizes(&self) -> Vec<usize> {
        self.attributes.iter().map(|a| a.categories.len()).collect()
    }

    pub fn max_categories(&self) -> usize {
        self.sizes().into_iter().max().unwrap_or(0)
    }

    pub fn names(&self) -> Vec<&str> {
        self.attributes.iter().map(|a| a.name.as_str()).collect()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    pub fn category_index(&self, attribute: usize, category: &str) -> Result<usize> {
        let a = &self.attributes[attribute];
        a.categories
            .iter()
            .position(|c| c == category)
            .ok_or_else(|| Error::Schema(format!("unknown category `{category}` for attribute `{}`", a.name)))
    }

    pub fn category_name(&self, attribute: usize, index: usize) -> &str {
        &self.attributes[attribute].categories[index]
    }

    /// Checks that `labels` has one valid category index per attribute.
    pub fn check_labels(&self, labels: &[usize]) -> Result<()> {
        if labels.len() != self.len() {
            return Err(Error::Schema(format!(
                "expected {} attribute labels, got {}",
                self.len(),
                labels.len()
            )));
        }
        for (a, &l) in self.attributes.iter().zip(labels) {
            if l >= a.categories.len() {
                return Err(Error::Schema(format!("label {l} out of range for attribute `{}`", a.name)));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: AttributeSchema = serde_json::from_str(&text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
