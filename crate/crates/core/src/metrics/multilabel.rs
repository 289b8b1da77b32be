use crate::error::{Error, Result};

/// Paired true and predicted attribute vectors, one category index per attribute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiLabelEval {
    truth: Vec<Vec<usize>>,
    pred: Vec<Vec<usize>>,
    q: usize,
}

impl MultiLabelEval {
    pub fn new(truth: Vec<Vec<usize>>, pred: Vec<Vec<usize>>) -> Result<Self> {
        if truth.is_empty() || truth.len() != pred.len() {
            return Err(Error::invalid(
                "multilabel",
                format!("{} truth vectors against {} predictions", truth.len(), pred.len()),
            ));
        }
        let q = truth[0].len();
        if q == 0 {
            return Err(Error::invalid("multilabel", "label vectors are empty"));
        }
        for (i, (t, p)) in truth.iter().zip(&pred).enumerate() {
            if t.len() != q || p.len() != q {
                return Err(Error::invalid(
                    "multilabel",
                    format!("sample {i}: lengths {} and {} (expected {q})", t.len(), p.len()),
                ));
            }
        }
        Ok(MultiLabelEval { truth, pred, q })
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn truth(&self) -> &[Vec<usize>] {
        &self.truth
    }

    pub fn pred(&self) -> &[Vec<usize>] {
        &self.pred
    }

    /// Column `j` of the truths and predictions.
    pub fn attribute(&self, j: usize) -> (Vec<usize>, Vec<usize>) {
        (
            self.truth.iter().map(|t| t[j]).collect(),
            self.pred.iter().map(|p| p[j]).collect(),
        )
    }

    fn correct(&self, i: usize) -> usize {
        self.truth[i].iter().zip(&self.pred[i]).filter(|(t, p)| t == p).count()
    }
}

/// Fraction of samples whose whole vector is predicted exactly.
pub fn subset_accuracy(e: &MultiLabelEval) -> f64 {
    let exact = (0..e.len()).filter(|&i| e.correct(i) == e.q).count();
    exact as f64 / e.len() as f64
}

/// Fraction of individual attribute slots predicted wrongly.
pub fn hamming_loss(e: &MultiLabelEval) -> f64 {
    let wrong: usize = (0..e.len()).map(|i| e.q - e.correct(i)).sum();
    wrong as f64 / (e.len() * e.q) as f64
}

/// Mean intersection-over-union of the (attribute, category) pair sets.
/// With one category per attribute and `c` of `q` correct this is `c / (2q - c)`.
pub fn jaccard_similarity(e: &MultiLabelEval) -> f64 {
    let sum: f64 = (0..e.len())
        .map(|i| {
            let c = e.correct(i);
            c as f64 / (2 * e.q - c) as f64
        })
        .sum();
    sum / e.len() as f64
}
