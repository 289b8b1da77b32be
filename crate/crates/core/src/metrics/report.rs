use serde::{Deserialize, Serialize};

use super::classification::{auc_ovr, confusion, weighted_metrics, ClassScores, ConfusionMatrix};
use super::multilabel::{hamming_loss, jaccard_similarity, subset_accuracy, MultiLabelEval};
use crate::error::{Error, Result};
use crate::model::AttributeSchema;

/// One row of a report table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub support: u64,
}

impl ScoreRow {
    fn new(name: &str, s: &ClassScores, auc: Option<f64>, support: u64) -> Self {
        ScoreRow {
            name: name.to_string(),
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
            specificity: s.specificity,
            accuracy: s.accuracy,
            auc,
            support,
        }
    }

    fn cells(&self) -> Vec<String> {
        let pct = |v: f64| format!("{:.2}", 100.0 * v);
        vec![
            self.name.clone(),
            pct(self.precision),
            pct(self.recall),
            pct(self.f1),
            pct(self.specificity),
            pct(self.accuracy),
            self.auc.map(pct).unwrap_or_else(|| "-".into()),
            self.support.to_string(),
        ]
    }
}

const HEADER: [&str; 8] = ["", "Prec", "Rec", "F1", "Spec", "Acc", "AUC", "Support"];

/// Left-aligned first column, right-aligned numeric columns.
pub fn format_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let mut out = String::new();
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            if i == 0 {
                out.push_str(&format!("{cell:<w$}"));
            } else {
                out.push_str(&format!("  {cell:>w$}"));
            }
        }
        out.trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    out
}

/// Per-attribute scores plus the whole-vector multi-label scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeReport {
    pub samples: usize,
    pub rows: Vec<ScoreRow>,
    /// Unweighted mean of the attribute rows.
    pub overall: ScoreRow,
    pub subset_accuracy: f64,
    pub hamming_loss: f64,
    pub jaccard_similarity: f64,
    pub confusion: Vec<ConfusionMatrix>,
    pub warnings: Vec<String>,
}

/// Builds the attribute report. Each attribute row holds the support-weighted
/// scores of that attribute's confusion matrix; `probs[m]` are the predicted
/// distributions for attribute `m` and feed its AUC.
pub fn attribute_report(
    schema: &AttributeSchema,
    e: &MultiLabelEval,
    probs: Option<&[Vec<Vec<f64>>]>,
) -> Result<AttributeReport> {
    if e.q() != schema.len() {
        return Err(Error::Schema(format!(
            "evaluation has {} attributes, schema has {}",
            e.q(),
            schema.len()
        )));
    }
    if let Some(p) = probs {
        if p.len() != schema.len() {
            return Err(Error::Schema(format!(
                "{} probability blocks for {} attributes",
                p.len(),
                schema.len()
            )));
        }
    }
    let mut rows = Vec::new();
    let mut matrices = Vec::new();
    let mut warnings = Vec::new();
    for (m, attr) in schema.attributes.iter().enumerate() {
        let (truth, pred) = e.attribute(m);
        let cm = confusion(&truth, &pred, attr.categories.len())?;
        let scores = weighted_metrics(&cm)?;
        let auc = match probs {
            Some(p) => {
                let r = auc_ovr(&truth, &p[m], attr.categories.len())?;
                warnings.extend(r.warnings.iter().map(|w| format!("{}: {w}", attr.name)));
                r.weighted
            }
            None => None,
        };
        rows.push(ScoreRow::new(&attr.name, &scores.weighted, auc, cm.total()));
        matrices.push(cm);
    }
    let mean = |f: fn(&ScoreRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    let aucs: Vec<f64> = rows.iter().filter_map(|r| r.auc).collect();
    let overall = ScoreRow {
        name: "overall".into(),
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        f1: mean(|r| r.f1),
        specificity: mean(|r| r.specificity),
        accuracy: mean(|r| r.accuracy),
        auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
        support: e.len() as u64,
    };
    Ok(AttributeReport {
        samples: e.len(),
        rows,
        overall,
        subset_accuracy: subset_accuracy(e),
        hamming_loss: hamming_loss(e),
        jaccard_similarity: jaccard_similarity(e),
        confusion: matrices,
        warnings,
    })
}

impl AttributeReport {
    pub fn to_text(&self) -> String {
        let mut cells: Vec<Vec<String>> = self.rows.iter().map(ScoreRow::cells).collect();
        cells.push(self.overall.cells());
        let mut header = HEADER;
        header[0] = "attribute";
        let mut out = format_table(&header, &cells);
        out.push_str(&format!(
            "\nSAcc {:.2}%  HL {:.2}%  JS {:.2}%  ({} samples)\n",
            100.0 * self.subset_accuracy,
            100.0 * self.hamming_loss,
            100.0 * self.jaccard_similarity,
            self.samples
        ));
        out
    }
}

/// Per-class and weighted classification scores with the confusion matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub samples: usize,
    pub classes: Vec<String>,
    pub rows: Vec<ScoreRow>,
    /// Support-weighted scores; accuracy is trace / total.
    pub weighted: ScoreRow,
    pub confusion: ConfusionMatrix,
    pub warnings: Vec<String>,
}

pub fn classification_report(
    classes: &[String],
    truth: &[usize],
    pred: &[usize],
    probs: &[Vec<f64>],
) -> Result<ClassificationReport> {
    let k = classes.len();
    let cm = confusion(truth, pred, k)?;
    let scores = weighted_metrics(&cm)?;
    let auc = auc_ovr(truth, probs, k)?;
    let rows = (0..k)
        .map(|c| ScoreRow::new(&classes[c], &scores.per_class[c], auc.per_class[c], scores.support[c]))
        .collect();
    Ok(ClassificationReport {
        samples: truth.len(),
        classes: classes.to_vec(),
        rows,
        weighted: ScoreRow::new("weighted", &scores.weighted, auc.weighted, cm.total()),
        confusion: cm,
        warnings: auc.warnings,
    })
}

impl ClassificationReport {
    pub fn accuracy(&self) -> f64 {
        self.weighted.accuracy
    }

    pub fn to_text(&self) -> String {
        let mut cells: Vec<Vec<String>> = self.rows.iter().map(ScoreRow::cells).collect();
        cells.push(self.weighted.cells());
        let mut header = HEADER;
        header[0] = "class";
        let mut out = format_table(&header, &cells);
        out.push_str("\nconfusion (rows true, columns predicted)\n");
        let mut head = vec![""];
        head.extend(self.classes.iter().map(String::as_str));
        let body: Vec<Vec<String>> = self
            .classes
            .iter()
            .zip(&self.confusion.counts)
            .map(|(name, row)| {
                let mut r = vec![name.clone()];
                r.extend(row.iter().map(|c| c.to_string()));
                r
            })
            .collect();
        out.push_str(&format_table(&head, &body));
        out
    }
}
