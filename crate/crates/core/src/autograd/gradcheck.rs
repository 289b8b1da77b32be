use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Relative error is `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Probe at most this many elements per input (chosen by `seed`).
    pub max_probes: Option<usize>,
    pub seed: u64,
    /// Op whose backward rule is deliberately broken in the analytic pass.
    pub corrupt: Option<&'static str>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            eps: 1e-4,
            tol: 1e-4,
            floor: 1e-3,
            max_probes: None,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InputReport {
    pub input: usize,
    pub probes: usize,
    /// Probes within `eps` of a kink (e.g. relu at 0), excluded from the error.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub eps: f64,
    pub tol: f64,
    pub inputs: Vec<InputReport>,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn evaluate<F>(f: &F, values: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares the tape gradient of scalar `f` with central differences
/// `(f(x + eps) - f(x - eps)) / (2 eps)` for every (or a sampled subset of
/// every) input element.
///
/// A probe is treated as sitting within `eps` of a kink, and skipped, when
/// either the central differences at `eps` and `eps / 2` disagree, or the
/// second differences at those steps fail to scale linearly with the step,
/// by more than a tenth of the tolerance. On smooth functions both hold to
/// `O(eps^2)`; the second test catches kinks exactly at the probe point.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Sync,
{
    if !(opts.eps > 0.0) {
        return Err(Error::invalid("gradcheck", "eps must be positive"));
    }
    let mut g = Graph::new();
    if let Some(op) = opts.corrupt {
        g.corrupt_backward(op)?;
    }
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| match grads.get(*v) {
            Some(gr) => gr.data().to_vec(),
            None => vec![0.0; t.numel()],
        })
        .collect();

    let f0 = evaluate(&f, inputs)?;
    let mut reports = Vec::with_capacity(inputs.len());
    for (k, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let probes: Vec<usize> = match opts.max_probes {
            Some(m) if m < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(k as u64));
                let mut idx = sample(&mut rng, n, m).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        };
        let results: Vec<Result<(usize, f64, f64, bool)>> = probes
            .par_iter()
            .map(|&i| {
                let probe = |delta: f64| -> Result<f64> {
                    let mut vals = inputs.to_vec();
                    vals[k].data_mut()[i] += delta;
                    let y = evaluate(&f, &vals)?;
                    if !y.is_finite() {
                        return Err(Error::NonFinite {
                            op: "gradcheck",
                            input: k,
                            index: i,
                        });
                    }
                    Ok(y)
                };
                let e = opts.eps;
                let (fp, fm) = (probe(e)?, probe(-e)?);
                let (hp, hm) = (probe(e / 2.0)?, probe(-e / 2.0)?);
                let full = (fp - fm) / (2.0 * e);
                let half = (hp - hm) / e;
                let bend_full = (fp - 2.0 * f0 + fm) / e;
                let bend_half = (hp - 2.0 * f0 + hm) / (e / 2.0);
                let a = analytic[k][i];
                let scale = a.abs().max(full.abs()).max(opts.floor);
                let limit = 0.1 * opts.tol * scale;
                let kink = (full - half).abs() > limit || (bend_full - 2.0 * bend_half).abs() > limit;
                Ok((i, a, full, kink))
            })
            .collect();

        let mut report = InputReport {
            input: k,
            probes: probes.len(),
            skipped: 0,
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for r in results {
            let (i, a, num, kink) = r?;
            if kink {
                report.skipped += 1;
                continue;
            }
            let err = (a - num).abs() / a.abs().max(num.abs()).max(opts.floor);
            if err > report.max_rel_err || report.max_rel_err.is_nan() {
                report.max_rel_err = err;
                report.worst_index = i;
                report.analytic = a;
                report.numeric = num;
            }
        }
        reports.push(report);
    }
    let max_rel_err = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        eps: opts.eps,
        tol: opts.tol,
        passed: max_rel_err < opts.tol,
        max_rel_err,
        inputs: reports,
    })
}
