use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::{GradcheckOptions, Graph};
use crate::nn::{gradcheck_module, Mode, ParamStore, Session};
use crate::tensor::Tensor;

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn zero_prefix(store: &mut ParamStore<f64>, prefix: &str) {
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with(prefix)).collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::zeros(&shape);
    }
}

#[test]
fn spec_validation() {
    assert!(EpsaSpec::new(16, 2).validate().is_ok());
    assert!(EpsaSpec::new(10, 2).validate().is_err());
    let mut even = EpsaSpec::new(8, 2);
    even.kernels[1] = 4;
    assert!(even.validate().is_err());
    let mut short = EpsaSpec::new(8, 2);
    short.groups.pop();
    assert!(short.validate().is_err());
    let mut store = ParamStore::<f64>::new();
    assert!(Sa::build(&mut store, "sa", SaSpec { kernel: 6 }, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn groups_are_capped_to_divisors_of_branch_width() {
    let spec = EpsaSpec::new(16, 2);
    assert_eq!((0..4).map(|i| spec.effective_groups(i)).collect::<Vec<_>>(), vec![1, 4, 4, 4]);
    let spec = EpsaSpec::new(24, 2);
    assert_eq!((0..4).map(|i| spec.effective_groups(i)).collect::<Vec<_>>(), vec![1, 3, 6, 6]);
    let spec = EpsaSpec::new(256, 4);
    assert_eq!((0..4).map(|i| spec.effective_groups(i)).collect::<Vec<_>>(), vec![1, 4, 8, 16]);
}

#[test]
fn epsa_preserves_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (c, h, w) in [(4, 1, 1), (8, 5, 7), (16, 6, 6), (32, 3, 9)] {
        let mut store = ParamStore::<f64>::new();
        let epsa = Epsa::build(&mut store, "epsa", EpsaSpec::new(c, 2), &mut rng).unwrap();
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &store, Mode::Train);
        let x = s.graph.constant(random(&[2, c, h, w], &mut rng));
        let y = epsa.forward(&mut s, x).unwrap();
        assert_eq!(s.graph.shape(y), &[2, c, h, w]);
    }
}

#[test]
fn epsa_rejects_wrong_channel_count() {
    let mut store = ParamStore::<f64>::new();
    let epsa = Epsa::build(&mut store, "epsa", EpsaSpec::new(8, 2), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut g = Graph::new();
    let mut s = Session::new(&mut g, &store, Mode::Eval);
    let x = s.graph.constant(Tensor::zeros(&[1, 4, 3, 3]));
    assert!(epsa.forward(&mut s, x).is_err());
}

#[test]
fn branch_weights_form_a_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f64>::new();
    let epsa = Epsa::build(&mut store, "epsa", EpsaSpec::new(16, 2), &mut rng).unwrap();
    for _ in 0..100 {
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &store, Mode::Eval);
        let x = s.graph.constant(random(&[2, 16, 4, 4], &mut rng).map(|v| 3.0 * v));
        let t = epsa.trace(&mut s, x).unwrap();
        let wv = s.graph.value(t.weights);
        let (branches, width) = (4, 4);
        for n in 0..2 {
            for ch in 0..width {
                let col: Vec<f64> = (0..branches).map(|b| wv.data()[(n * branches + b) * width + ch]).collect();
                assert!(col.iter().all(|&v| v > 0.0));
                assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn equal_descriptors_give_uniform_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let epsa = Epsa::build(&mut store, "epsa", EpsaSpec::new(8, 2), &mut rng).unwrap();
    zero_prefix(&mut store, "epsa.se.fc2");
    let mut g = Graph::new();
    let mut s = Session::new(&mut g, &store, Mode::Eval);
    let x = s.graph.constant(Tensor::full(&[1, 8, 3, 3], 0.7));
    let t = epsa.trace(&mut s, x).unwrap();
    assert!(s.graph.value(t.weights).data().iter().all(|&v| v == 0.25));
}

#[test]
fn single_branch_reduces_to_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let spec = EpsaSpec {
        channels: 6,
        branches: 1,
        kernels: vec![3],
        groups: vec![1],
        reduction: 2,
    };
    let mut store = ParamStore::<f64>::new();
    let epsa = Epsa::build(&mut store, "epsa", spec, &mut rng).unwrap();
    for _ in 0..10 {
        let x = random(&[2, 6, 5, 5], &mut rng);
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &store, Mode::Eval);
        let xv = s.graph.constant(x.clone());
        let t = epsa.trace(&mut s, xv).unwrap();
        assert!(s.graph.value(t.weights).data().iter().all(|&v| v == 1.0));

        // Softmax over one branch is exactly 1, so the SE gate leaves the conv output as is.
        let mut g2 = Graph::new();
        let mut s2 = Session::new(&mut g2, &store, Mode::Eval);
        let xv = s2.graph.constant(x);
        let f = epsa.convs[0].forward(&mut s2, xv).unwrap();
        assert_eq!(s.graph.value(t.output), s2.graph.value(f));
    }
}

#[test]
fn two_branch_hand_softmax() {
    let mut g = Graph::<f64>::new();
    // C = 4, two branches of width 2, 1x1 spatial.
    let features = g.constant(Tensor::from_slice(&[1, 4, 1, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let descriptors = g.constant(Tensor::from_slice(&[1, 2, 2], &[2.0, 2.0, 1.0, 1.0]).unwrap());
    let (out, weights) = weigh_branches(&mut g, features, descriptors).unwrap();
    let e = std::f64::consts::E;
    let hi = e / (e + 1.0);
    let lo = 1.0 / (e + 1.0);
    let w = g.value(weights).data();
    for (got, want) in w.iter().zip([hi, hi, lo, lo]) {
        assert!((got - want).abs() < 1e-15);
    }
    let o = g.value(out).data();
    for (got, want) in o.iter().zip([hi, 2.0 * hi, 3.0 * lo, 4.0 * lo]) {
        assert!((got - want).abs() < 1e-15);
    }
}

fn sa_with(bias: f64, zero_weight: bool, rng: &mut ChaCha8Rng) -> (ParamStore<f64>, Sa) {
    let mut store = ParamStore::new();
    let sa = Sa::build(&mut store, "sa", SaSpec::default(), rng).unwrap();
    if zero_weight {
        zero_prefix(&mut store, "sa.mask.weight");
    }
    *store.value_mut(sa.conv.bias.unwrap()) = Tensor::full(&[1], bias);
    (store, sa)
}

fn run_sa(store: &ParamStore<f64>, sa: &Sa, x: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let mut g = Graph::new();
    let mut s = Session::new(&mut g, store, Mode::Eval);
    let xv = s.graph.constant(x.clone());
    let t = sa.trace(&mut s, xv).unwrap();
    (s.graph.value(t.output).clone(), s.graph.value(t.mask).clone())
}

#[test]
fn zero_mask_logits_halve_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (store, sa) = sa_with(0.0, true, &mut rng);
    let x = random(&[2, 3, 6, 6], &mut rng);
    let (y, _) = run_sa(&store, &sa, &x);
    for (a, b) in y.data().iter().zip(x.data()) {
        assert_eq!(*a, 0.5 * b);
    }
}

#[test]
fn saturated_mask_passes_input_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (store, sa) = sa_with(100.0, true, &mut rng);
    let x = random(&[2, 3, 6, 6], &mut rng);
    let (y, _) = run_sa(&store, &sa, &x);
    for (a, b) in y.data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn mask_matches_direct_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (store, sa) = sa_with(0.1, false, &mut rng);
    let (n, c, h, w) = (2, 5, 6, 4);
    let x = random(&[n, c, h, w], &mut rng);
    let (y, mask) = run_sa(&store, &sa, &x);
    let wt = store.value(sa.conv.weight).data();
    let bias = store.value(sa.conv.bias.unwrap()).item();
    let at = |i: usize, ch: usize, r: usize, col: usize| x.data()[((i * c + ch) * h + r) * w + col];
    for i in 0..n {
        let mut pooled = vec![[0.0f64; 2]; h * w];
        for r in 0..h {
            for col in 0..w {
                let vals: Vec<f64> = (0..c).map(|ch| at(i, ch, r, col)).collect();
                pooled[r * w + col] = [
                    vals.iter().sum::<f64>() / c as f64,
                    vals.iter().cloned().fold(f64::MIN, f64::max),
                ];
            }
        }
        for r in 0..h as i64 {
            for col in 0..w as i64 {
                let mut z = bias;
                for k in 0..2 {
                    for dr in 0..7i64 {
                        for dc in 0..7i64 {
                            let (rr, cc) = (r + dr - 3, col + dc - 3);
                            if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                                continue;
                            }
                            z += wt[(k * 7 + dr as usize) * 7 + dc as usize]
                                * pooled[rr as usize * w + cc as usize][k];
                        }
                    }
                }
                let m = 1.0 / (1.0 + (-z).exp());
                let p = r as usize * w + col as usize;
                assert!((mask.data()[i * h * w + p] - m).abs() < 1e-12);
                for ch in 0..c {
                    let idx = ((i * c + ch) * h) * w + p;
                    assert!((y.data()[idx] - x.data()[idx] * m).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn masked_output_never_grows() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let (store, sa) = sa_with(rng.gen_range(-3.0..3.0), false, &mut rng);
        let x = random(&[2, 4, 5, 5], &mut rng).map(|v| 10.0 * v);
        let (y, mask) = run_sa(&store, &sa, &x);
        assert!(mask.data().iter().all(|&m| m > 0.0 && m < 1.0));
        assert!(y.data().iter().zip(x.data()).all(|(a, b)| a.abs() <= b.abs()));
    }
}

#[test]
fn epsa_passes_gradcheck() {
    let opts = GradcheckOptions {
        max_probes: Some(60),
        ..Default::default()
    };
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let epsa = Epsa::build(&mut store, "epsa", EpsaSpec::new(8, 2), &mut rng).unwrap();
        let x = random(&[2, 8, 5, 5], &mut rng);
        let report = gradcheck_module(&store, &[x], Mode::Train, &opts, |s, v| epsa.forward(s, v[0])).unwrap();
        assert!(report.passed, "seed {seed}: {report:?}");
    }
}

#[test]
fn sa_passes_gradcheck() {
    let opts = GradcheckOptions::default();
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let sa = Sa::build(&mut store, "sa", SaSpec::default(), &mut rng).unwrap();
        let x = random(&[2, 3, 4, 5], &mut rng);
        let report = gradcheck_module(&store, &[x], Mode::Train, &opts, |s, v| sa.forward(s, v[0])).unwrap();
        assert!(report.passed, "seed {seed}: {report:?}");
    }
}
