//! Classification and multi-label evaluation: confusion matrices, weighted
//! one-vs-rest scores, midrank AUC, subset accuracy, Hamming loss, Jaccard
//! similarity and tabular reports.

mod classification;
mod multilabel;
mod report;

pub use classification::{
    auc_ovr, binary_auc, confusion, midranks, weighted_metrics, AucReport, ClassScores, ConfusionMatrix,
    WeightedMetrics,
};
pub use multilabel::{hamming_loss, jaccard_similarity, subset_accuracy, MultiLabelEval};
pub use report::{
    attribute_report, classification_report, format_table, AttributeReport, ClassificationReport, ScoreRow,
};

#[cfg(test)]
mod tests;
