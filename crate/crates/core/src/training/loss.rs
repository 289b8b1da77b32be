use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::Provenance;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Probabilities are clamped to this floor before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the attribute-prediction term.
    pub lambda_ap: f64,
    /// Weight of the auxiliary class term.
    pub lambda_cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ap: 0.8,
            lambda_cls: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_ap >= 0.0 && self.lambda_cls >= 0.0) || !self.lambda_ap.is_finite() || !self.lambda_cls.is_finite()
        {
            return Err(Error::invalid(
                "loss_weights",
                format!("weights ({}, {}) must be finite and non-negative", self.lambda_ap, self.lambda_cls),
            ));
        }
        Ok(())
    }
}

/// One-hot targets for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelBatch<T> {
    /// One `[n, P_m]` one-hot block per attribute.
    pub attributes: Vec<Tensor<T>>,
    /// `[n, K]` one-hot class targets.
    pub classes: Tensor<T>,
    pub provenance: Vec<Provenance>,
}

pub fn one_hot<T: Scalar>(labels: &[usize], width: usize) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros(&[labels.len(), width]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= width {
            return Err(Error::invalid("one_hot", format!("label {l} outside 0..{width}")));
        }
        t.data_mut()[i * width + l] = T::one();
    }
    Ok(t)
}

impl<T: Scalar> LabelBatch<T> {
    /// `attributes[i]` is sample `i`'s category per attribute.
    pub fn new(
        sizes: &[usize],
        num_classes: usize,
        attributes: &[Vec<usize>],
        classes: &[usize],
        provenance: Vec<Provenance>,
    ) -> Result<Self> {
        let n = classes.len();
        if attributes.len() != n || provenance.len() != n {
            return Err(Error::invalid(
                "label_batch",
                format!("{n} classes, {} attribute rows, {} provenance flags", attributes.len(), provenance.len()),
            ));
        }
        if let Some(row) = attributes.iter().find(|r| r.len() != sizes.len()) {
            return Err(Error::invalid(
                "label_batch",
                format!("attribute row of length {} for {} attributes", row.len(), sizes.len()),
            ));
        }
        let blocks = sizes
            .iter()
            .enumerate()
            .map(|(m, &p)| one_hot(&attributes.iter().map(|r| r[m]).collect::<Vec<_>>(), p))
            .collect::<Result<Vec<_>>>()?;
        Ok(LabelBatch {
            attributes: blocks,
            classes: one_hot(classes, num_classes)?,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.classes.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sum over the batch of `y * ln(max(p, floor))`.
fn log_likelihood<T: Scalar>(g: &mut Graph<T>, probs: Var, target: &Tensor<T>, op: &'static str) -> Result<Var> {
    if g.shape(probs) != target.shape() {
        return Err(Error::shape(op, g.shape(probs), target.shape()));
    }
    let logp = g.ln_clamped(probs, T::lit(PROB_FLOOR));
    let y = g.constant(target.clone());
    let picked = g.mul(logp, y)?;
    Ok(g.sum(picked))
}

/// Deep-supervision loss, averaged over the batch:
/// `-[lambda_ap * (sum_m sum_t y log2 p_m) / A + lambda_cls * sum_c y log2 q]`.
pub fn loss_eq1<T: Scalar>(
    g: &mut Graph<T>,
    attribute_probs: &[Var],
    class_probs: Var,
    labels: &LabelBatch<T>,
    w: LossWeights,
) -> Result<Var> {
    w.validate()?;
    let a = labels.attributes.len();
    if attribute_probs.len() != a || a == 0 {
        return Err(Error::invalid(
            "loss_eq1",
            format!("{} attribute outputs for {a} label blocks", attribute_probs.len()),
        ));
    }
    let n = labels.len() as f64;
    let mut attr = None;
    for (&p, y) in attribute_probs.iter().zip(&labels.attributes) {
        let term = log_likelihood(g, p, y, "loss_eq1")?;
        attr = Some(match attr {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    let attr = g.scale(attr.expect("at least one attribute"), T::lit(-w.lambda_ap / (a as f64 * n * LN_2)));
    let cls = log_likelihood(g, class_probs, &labels.classes, "loss_eq1")?;
    let cls = g.scale(cls, T::lit(-w.lambda_cls / (n * LN_2)));
    g.add(attr, cls)
}

/// Mean over the batch of `-sum_c y ln p`. Rows of `probs` must sum to 1.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, probs: Var, targets: &Tensor<T>) -> Result<Var> {
    let shape = g.shape(probs).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::invalid("cross_entropy", format!("expected [n, K] probabilities, got {shape:?}")));
    }
    for (i, row) in g.value(probs).data().chunks(shape[1]).enumerate() {
        let s: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (s - 1.0).abs() > 1e-4 {
            return Err(Error::invalid("cross_entropy", format!("row {i} sums to {s}")));
        }
    }
    let ll = log_likelihood(g, probs, targets, "cross_entropy")?;
    Ok(g.scale(ll, T::lit(-1.0 / shape[0] as f64)))
}
