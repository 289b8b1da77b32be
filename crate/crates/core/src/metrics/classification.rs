use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Counts indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

pub fn confusion(truth: &[usize], pred: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::invalid(
            "confusion",
            format!("{} truths against {} predictions", truth.len(), pred.len()),
        ));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (i, (&t, &p)) in truth.iter().zip(pred).enumerate() {
        if t >= k || p >= k {
            return Err(Error::invalid(
                "confusion",
                format!("sample {i}: label ({t}, {p}) outside 0..{k}"),
            ));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

impl ConfusionMatrix {
    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        self.counts.iter().map(|row| row[class]).sum()
    }

    /// Comma-separated matrix with a header row of predicted labels.
    pub fn to_csv(&self, labels: &[String]) -> String {
        let mut out = String::from("true\\predicted");
        for l in labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (l, row) in labels.iter().zip(&self.counts) {
            out.push_str(l);
            for c in row {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

/// One-vs-rest scores for a single class, or their weighted average.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedMetrics {
    pub per_class: Vec<ClassScores>,
    pub support: Vec<u64>,
    /// Support-weighted averages; `accuracy` is trace / total.
    pub weighted: ClassScores,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class one-vs-rest scores and their support-weighted average.
/// Any score whose denominator is zero is 0.
pub fn weighted_metrics(cm: &ConfusionMatrix) -> Result<WeightedMetrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::invalid("weighted_metrics", "confusion matrix is empty"));
    }
    let mut per_class = Vec::with_capacity(cm.k());
    let mut support = Vec::with_capacity(cm.k());
    for c in 0..cm.k() {
        let tp = cm.counts[c][c];
        let fp = cm.predicted(c) - tp;
        let fn_ = cm.support(c) - tp;
        let tn = total - tp - fp - fn_;
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassScores {
            precision,
            recall,
            f1,
            specificity: ratio(tn, tn + fp),
            accuracy: ratio(tp + tn, total),
        });
        support.push(cm.support(c));
    }
    let weigh = |f: fn(&ClassScores) -> f64| -> f64 {
        per_class
            .iter()
            .zip(&support)
            .map(|(s, &n)| f(s) * n as f64)
            .sum::<f64>()
            / total as f64
    };
    let weighted = ClassScores {
        precision: weigh(|s| s.precision),
        recall: weigh(|s| s.recall),
        f1: weigh(|s| s.f1),
        specificity: weigh(|s| s.specificity),
        accuracy: ratio(cm.trace(), total),
    };
    Ok(WeightedMetrics {
        per_class,
        support,
        weighted,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    /// `None` where the class has no positive or no negative sample.
    pub per_class: Vec<Option<f64>>,
    /// Support-weighted mean over the defined classes.
    pub weighted: Option<f64>,
    pub warnings: Vec<String>,
}

/// Midranks of `scores`, 1-based; tied values share the mean of their ranks.
pub fn midranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Binary AUC by the rank-sum (Mann-Whitney U) formula.
pub fn binary_auc(positive: &[bool], scores: &[f64]) -> Option<f64> {
    let ranks = midranks(scores);
    let p = positive.iter().filter(|&&b| b).count();
    let n = positive.len() - p;
    if p == 0 || n == 0 {
        return None;
    }
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &b)| b).map(|(r, _)| r).sum();
    let u = rank_sum - (p * (p + 1)) as f64 / 2.0;
    Some(u / (p as f64 * n as f64))
}

/// One-vs-rest AUC per class from probability rows, averaged by class support.
pub fn auc_ovr(truth: &[usize], probs: &[Vec<f64>], k: usize) -> Result<AucReport> {
    if truth.len() != probs.len() {
        return Err(Error::invalid(
            "auc_ovr",
            format!("{} truths against {} probability rows", truth.len(), probs.len()),
        ));
    }
    for (i, row) in probs.iter().enumerate() {
        if row.len() != k || row.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("auc_ovr", format!("row {i} is not {k} finite values")));
        }
        if truth[i] >= k {
            return Err(Error::invalid("auc_ovr", format!("sample {i}: label {} outside 0..{k}", truth[i])));
        }
    }
    let mut per_class = Vec::with_capacity(k);
    let mut warnings = Vec::new();
    let (mut acc, mut weight) = (0.0, 0usize);
    for c in 0..k {
        let positive: Vec<bool> = truth.iter().map(|&t| t == c).collect();
        let scores: Vec<f64> = probs.iter().map(|row| row[c]).collect();
        let auc = binary_auc(&positive, &scores);
        let support = positive.iter().filter(|&&b| b).count();
        match auc {
            Some(a) => {
                acc += a * support as f64;
                weight += support;
            }
            None => warnings.push(format!(
                "AUC undefined for class {c} ({support} of {} samples positive); excluded from the average",
                truth.len()
            )),
        }
        per_class.push(auc);
    }
    Ok(AucReport {
        per_class,
        weighted: (weight > 0).then(|| acc / weight as f64),
        warnings,
    })
}
