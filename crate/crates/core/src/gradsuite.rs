use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{Epsa, EpsaSpec, Sa, SaSpec};
use crate::autograd::{gradcheck, GradcheckOptions, GradcheckReport, Graph, Var};
use crate::data::Provenance;
use crate::error::Result;
use crate::kernels::{ConvSpec, PoolKind};
use crate::model::{Backbone, BackboneConfig, Mae, MaeConfig};
use crate::nn::{gradcheck_module, projected_sum, BatchNorm, BatchNormConfig, Conv2d, Linear, Mode, ParamStore};
use crate::tensor::Tensor;
use crate::training::{cross_entropy, loss_eq1, one_hot, LabelBatch, LossWeights};

/// Outcome of one gradient-check case.
#[derive(Debug, Clone, Serialize)]
pub struct CaseReport {
    pub name: String,
    pub max_rel_err: f64,
    pub probes: usize,
    pub skipped: usize,
    pub passed: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub eps: f64,
    pub tol: f64,
    pub corrupted: Option<String>,
    pub cases: Vec<CaseReport>,
    pub passed: bool,
}

impl SuiteReport {
    pub fn failures(&self) -> impl Iterator<Item = &CaseReport> {
        self.cases.iter().filter(|c| !c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("gradcheck eps={:e} tol={:e}\n", self.eps, self.tol);
        for c in &self.cases {
            out.push_str(&format!(
                "{:<4} {:<28} max_rel_err={:.3e} probes={} skipped={}\n",
                if c.passed { "ok" } else { "FAIL" },
                c.name,
                c.max_rel_err,
                c.probes,
                c.skipped
            ));
        }
        let failed: Vec<&str> = self.failures().map(|c| c.name.as_str()).collect();
        if failed.is_empty() {
            out.push_str(&format!("all {} cases passed\n", self.cases.len()));
        } else {
            out.push_str(&format!("failed: {}\n", failed.join(", ")));
        }
        out
    }
}

type Case = Box<dyn Fn(&GradcheckOptions) -> Result<GradcheckReport>>;

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn op_case<F>(shapes: &[&[usize]], seed: u64, build: F) -> Case
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Sync + Copy + 'static,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random(s, &mut rng)).collect();
    Box::new(move |opts| {
        gradcheck(
            |g, v| {
                let y = build(g, v)?;
                projected_sum(g, y, seed)
            },
            &inputs,
            opts,
        )
    })
}

fn primitive_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("add", op_case(&[&[2, 3], &[2, 3]], 1, |g, v| g.add(v[0], v[1]))),
        ("sub", op_case(&[&[2, 3], &[2, 3]], 2, |g, v| g.sub(v[0], v[1]))),
        ("mul", op_case(&[&[2, 3], &[2, 3]], 3, |g, v| g.mul(v[0], v[1]))),
        ("scale", op_case(&[&[4]], 4, |g, v| Ok(g.scale(v[0], -2.5)))),
        ("add_scalar", op_case(&[&[4]], 5, |g, v| Ok(g.add_scalar(v[0], 0.7)))),
        ("matmul", op_case(&[&[3, 4], &[4, 2]], 6, |g, v| g.matmul(v[0], v[1]))),
        ("add_bias", op_case(&[&[2, 3, 2, 2], &[3]], 7, |g, v| g.add_bias(v[0], v[1]))),
        ("channel_scale", op_case(&[&[2, 3, 2, 2], &[2, 3]], 8, |g, v| g.channel_scale(v[0], v[1]))),
        ("spatial_mask", op_case(&[&[2, 3, 2, 2], &[2, 1, 2, 2]], 9, |g, v| g.spatial_mask(v[0], v[1]))),
        (
            "conv2d",
            op_case(&[&[2, 4, 5, 5], &[6, 2, 3, 3], &[6]], 10, |g, v| {
                g.conv2d(v[0], v[1], Some(v[2]), &ConvSpec::new(4, 6, 3, 2, 1).with_groups(2))
            }),
        ),
        (
            "batchnorm",
            op_case(&[&[3, 2, 2, 2], &[2], &[2]], 11, |g, v| Ok(g.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0)),
        ),
        ("relu", op_case(&[&[10]], 12, |g, v| g.relu(v[0]))),
        ("sigmoid", op_case(&[&[10]], 13, |g, v| g.sigmoid(v[0]))),
        ("softmax", op_case(&[&[3, 4]], 14, |g, v| g.softmax(v[0], 1))),
        (
            "ln",
            op_case(&[&[5]], 15, |g, v| {
                let s = g.sigmoid(v[0])?;
                Ok(g.ln_clamped(s, 1e-12))
            }),
        ),
        ("max_pool2d", op_case(&[&[1, 2, 4, 4]], 16, |g, v| g.pool2d(v[0], PoolKind::Max, 2, 2))),
        ("avg_pool2d", op_case(&[&[1, 2, 5, 5]], 17, |g, v| g.pool2d(v[0], PoolKind::Avg, 3, 2))),
        ("global_avg_pool", op_case(&[&[2, 3, 3, 2]], 18, |g, v| g.global_avg_pool(v[0]))),
        ("channel_mean", op_case(&[&[2, 3, 2, 2]], 19, |g, v| g.channel_mean(v[0]))),
        ("channel_max", op_case(&[&[2, 3, 2, 2]], 20, |g, v| g.channel_max(v[0]))),
        ("concat", op_case(&[&[2, 1, 2], &[2, 3, 2]], 21, |g, v| g.concat(&[v[0], v[1]], 1))),
        ("narrow", op_case(&[&[2, 5, 2]], 22, |g, v| g.narrow(v[0], 1, 1, 3))),
        ("reshape", op_case(&[&[2, 6]], 23, |g, v| g.reshape(v[0], &[3, 4]))),
        ("sum", op_case(&[&[2, 3]], 24, |g, v| Ok(g.sum(v[0])))),
        ("mean", op_case(&[&[2, 3]], 25, |g, v| Ok(g.mean(v[0])))),
        (
            "dropout",
            op_case(&[&[4, 5]], 26, |g, v| g.dropout(v[0], 0.3, &mut ChaCha8Rng::seed_from_u64(26))),
        ),
    ]
}

fn layer_cases() -> Vec<(&'static str, Case)> {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut conv_store = ParamStore::<f64>::new();
    let conv = Conv2d::build(
        &mut conv_store,
        "conv",
        ConvSpec::new(4, 6, 3, 2, 1).with_groups(2),
        true,
        &mut rng,
    )
    .expect("valid conv");
    let conv_x = random(&[2, 4, 6, 5], &mut rng);

    let mut bn_store = ParamStore::<f64>::new();
    let bn = BatchNorm::build(&mut bn_store, "bn", 3, BatchNormConfig::default()).expect("valid batchnorm");
    let bn_x = random(&[4, 3, 3, 2], &mut rng);

    let mut fc_store = ParamStore::<f64>::new();
    let fc = Linear::build(&mut fc_store, "fc", 5, 4, &mut rng).expect("valid linear");
    let fc_x = random(&[3, 5], &mut rng);

    vec![
        (
            "layer/conv2d",
            Box::new(move |opts: &GradcheckOptions| {
                gradcheck_module(&conv_store, &[conv_x.clone()], Mode::Train, opts, |s, v| conv.forward(s, v[0]))
            }) as Case,
        ),
        (
            "layer/batchnorm_train",
            Box::new({
                let (bn, bn_store, bn_x) = (bn.clone(), bn_store.clone(), bn_x.clone());
                move |opts: &GradcheckOptions| {
                    gradcheck_module(&bn_store, &[bn_x.clone()], Mode::Train, opts, |s, v| bn.forward(s, v[0]))
                }
            }),
        ),
        (
            "layer/batchnorm_eval",
            Box::new(move |opts: &GradcheckOptions| {
                gradcheck_module(&bn_store, &[bn_x.clone()], Mode::Eval, opts, |s, v| bn.forward(s, v[0]))
            }),
        ),
        (
            "layer/linear",
            Box::new(move |opts: &GradcheckOptions| {
                gradcheck_module(&fc_store, &[fc_x.clone()], Mode::Train, opts, |s, v| fc.forward(s, v[0]))
            }),
        ),
    ]
}

fn probed(opts: &GradcheckOptions, max: usize) -> GradcheckOptions {
    GradcheckOptions {
        max_probes: Some(opts.max_probes.map_or(max, |m| m.min(max))),
        ..*opts
    }
}

fn block_cases() -> Vec<(&'static str, Case)> {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let mut epsa_store = ParamStore::<f64>::new();
    let epsa = Epsa::build(&mut epsa_store, "epsa", EpsaSpec::new(8, 2), &mut rng).expect("valid epsa");
    let epsa_x = random(&[2, 8, 5, 5], &mut rng);

    let mut sa_store = ParamStore::<f64>::new();
    let sa = Sa::build(&mut sa_store, "sa", SaSpec::default(), &mut rng).expect("valid sa");
    let sa_x = random(&[2, 3, 4, 5], &mut rng);

    let mut bb_store = ParamStore::<f64>::new();
    let bb = Backbone::build(&mut bb_store, "bb", BackboneConfig::tiny(), &mut rng).expect("valid backbone");
    let bb_x = random(&[2, 3, 8, 8], &mut rng);

    let sizes = [2, 3, 2, 4];
    let mut mae_store = ParamStore::<f64>::new();
    let mae_cfg = MaeConfig {
        expansion: 3,
        channels: vec![2, 3, 4],
        ..Default::default()
    };
    let mae = Mae::build(&mut mae_store, "mae", mae_cfg, &sizes, &mut rng).expect("valid mae");
    let mae_x: Vec<Tensor<f64>> = sizes
        .iter()
        .map(|&p| {
            let mut t = Tensor::from_fn(&[3, p], |_| rng.gen_range(0.05..1.0));
            for row in t.data_mut().chunks_mut(p) {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            t
        })
        .collect();

    vec![
        (
            "block/epsa",
            Box::new(move |opts: &GradcheckOptions| {
                gradcheck_module(&epsa_store, &[epsa_x.clone()], Mode::Train, &probed(opts, 60), |s, v| {
                    epsa.forward(s, v[0])
                })
            }) as Case,
        ),
        (
            "block/sa",
            Box::new(move |opts: &GradcheckOptions| {
                gradcheck_module(&sa_store, &[sa_x.clone()], Mode::Train, opts, |s, v| sa.forward(s, v[0]))
            }),
        ),
        (
            "block/residual_backbone",
            Box::new(move |opts: &GradcheckOptions| {
                gradcheck_module(&bb_store, &[bb_x.clone()], Mode::Train, &probed(opts, 6), |s, v| {
                    bb.forward(s, v[0])
                })
            }),
        ),
        (
            "block/mae",
            Box::new(move |opts: &GradcheckOptions| {
                gradcheck_module(&mae_store, &mae_x, Mode::Train, &probed(opts, 12), |s, v| mae.forward(s, v))
            }),
        ),
    ]
}

fn loss_cases() -> Vec<(&'static str, Case)> {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let sizes = [3, 2];
    let labels = LabelBatch::<f64>::new(
        &sizes,
        4,
        &[vec![2, 0], vec![1, 1]],
        &[3, 0],
        vec![Provenance::True; 2],
    )
    .expect("valid labels");
    let logits: Vec<Tensor<f64>> = [3, 2, 4].iter().map(|&k| random(&[2, k], &mut rng)).collect();
    let ce_logits = random(&[3, 5], &mut rng);
    let ce_targets = one_hot::<f64>(&[4, 0, 2], 5).expect("valid targets");
    vec![
        (
            "loss/deep_supervision",
            Box::new(move |opts: &GradcheckOptions| {
                gradcheck(
                    |g, x| {
                        let p0 = g.softmax(x[0], 1)?;
                        let p1 = g.softmax(x[1], 1)?;
                        let q = g.softmax(x[2], 1)?;
                        loss_eq1(g, &[p0, p1], q, &labels, LossWeights::default())
                    },
                    &logits,
                    opts,
                )
            }) as Case,
        ),
        (
            "loss/cross_entropy",
            Box::new(move |opts: &GradcheckOptions| {
                gradcheck(
                    |g, x| {
                        let p = g.softmax(x[0], 1)?;
                        cross_entropy(g, p, &ce_targets)
                    },
                    &[ce_logits.clone()],
                    opts,
                )
            }),
        ),
    ]
}

/// Gradient-checks every primitive op, layer, attention block, the attribute
/// encoder and both losses in f64.
pub fn run_gradient_suite(opts: &GradcheckOptions) -> Result<SuiteReport> {
    let mut cases = Vec::new();
    let all = primitive_cases()
        .into_iter()
        .chain(layer_cases())
        .chain(block_cases())
        .chain(loss_cases());
    for (name, case) in all {
        let start = Instant::now();
        let r = case(opts)?;
        cases.push(CaseReport {
            name: name.to_string(),
            max_rel_err: r.max_rel_err,
            probes: r.inputs.iter().map(|i| i.probes).sum(),
            skipped: r.inputs.iter().map(|i| i.skipped).sum(),
            passed: r.passed,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(SuiteReport {
        eps: opts.eps,
        tol: opts.tol,
        corrupted: opts.corrupt.map(str::to_string),
        passed: cases.iter().all(|c| c.passed),
        cases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_suite_passes() {
        let report = run_gradient_suite(&GradcheckOptions::default()).unwrap();
        assert!(report.passed, "{}", report.to_text());
        assert!(report.cases.len() > 30);
    }

    #[test]
    fn corrupted_rule_fails_its_own_case() {
        for op in ["sigmoid", "conv2d", "batchnorm", "softmax"] {
            let opts = GradcheckOptions {
                corrupt: Some(op),
                ..Default::default()
            };
            let report = run_gradient_suite(&opts).unwrap();
            assert!(!report.passed);
            let own = report.cases.iter().find(|c| c.name == op).unwrap();
            assert!(!own.passed, "{op}");
            assert!(report.to_text().contains(&format!("FAIL {op}")));
        }
    }
}
