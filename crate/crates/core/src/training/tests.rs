use std::f64::consts::LN_2;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::{gradcheck, GradcheckOptions, Graph, Var};
use crate::data::synth::{render, synth_plan, SynthConfig};
use crate::data::{channel_stats, DatasetManifest, Provenance, Record};
use crate::error::Error;
use crate::model::{
    AttributeSchema, BackboneConfig, Checkpoint, DaffConfig, DaffNet, MaeConfig, MapConfig, MapNet, ModelSpec,
    Normalization,
};
use crate::nn::{ParamKind, ParamStore};
use crate::tensor::Tensor;

fn random_probs(n: usize, k: usize, rng: &mut impl Rng) -> Tensor<f64> {
    let mut t = Tensor::from_fn(&[n, k], |_| rng.gen_range(0.01..1.0));
    for row in t.data_mut().chunks_mut(k) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    t
}

fn labels_for(sizes: &[usize], k: usize, n: usize, rng: &mut impl Rng) -> (Vec<Vec<usize>>, Vec<usize>) {
    let attrs = (0..n).map(|_| sizes.iter().map(|&p| rng.gen_range(0..p)).collect()).collect();
    let classes = (0..n).map(|_| rng.gen_range(0..k)).collect();
    (attrs, classes)
}

fn eval_loss(probs: &[Tensor<f64>], q: &Tensor<f64>, labels: &LabelBatch<f64>, w: LossWeights) -> f64 {
    let mut g = Graph::new();
    let p: Vec<Var> = probs.iter().map(|t| g.constant(t.clone())).collect();
    let q = g.constant(q.clone());
    let l = loss_eq1(&mut g, &p, q, labels, w).unwrap();
    g.value(l).item()
}

/// Written straight from the definition with explicit base-2 logarithms.
fn direct_loss(probs: &[Tensor<f64>], q: &Tensor<f64>, attrs: &[Vec<usize>], classes: &[usize], w: LossWeights) -> f64 {
    let n = classes.len();
    let a = probs.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut attr = 0.0;
        for (m, p) in probs.iter().enumerate() {
            attr += p.row(i)[attrs[i][m]].max(PROB_FLOOR).log2();
        }
        let cls = q.row(i)[classes[i]].max(PROB_FLOOR).log2();
        total += -(w.lambda_ap * attr / a as f64 + w.lambda_cls * cls);
    }
    total / n as f64
}

#[test]
fn loss_is_zero_for_perfect_predictions() {
    let sizes = [2, 3];
    let attrs = vec![vec![1, 2], vec![0, 0]];
    let classes = vec![1, 0];
    let labels = LabelBatch::<f64>::new(&sizes, 2, &attrs, &classes, vec![Provenance::True; 2]).unwrap();
    let probs = labels.attributes.clone();
    let loss = eval_loss(&probs, &labels.classes, &labels, LossWeights::default());
    assert_eq!(loss, 0.0);
}

#[test]
fn loss_is_one_bit_for_uniform_binary_predictions() {
    let sizes = [2, 2];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (attrs, classes) = labels_for(&sizes, 2, 4, &mut rng);
    let labels = LabelBatch::<f64>::new(&sizes, 2, &attrs, &classes, vec![Provenance::True; 4]).unwrap();
    let half = Tensor::full(&[4, 2], 0.5);
    let loss = eval_loss(&[half.clone(), half.clone()], &half, &labels, LossWeights::default());
    assert!((loss - 1.0).abs() <= 4.0 * f64::EPSILON, "loss {loss}");
}

#[test]
fn loss_matches_direct_formula_on_random_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let a = rng.gen_range(1..6);
        let sizes: Vec<usize> = (0..a).map(|_| rng.gen_range(2..6)).collect();
        let k = rng.gen_range(2..7);
        let n = rng.gen_range(1..9);
        let w = LossWeights {
            lambda_ap: rng.gen_range(0.0..1.0),
            lambda_cls: rng.gen_range(0.0..1.0),
        };
        let (attrs, classes) = labels_for(&sizes, k, n, &mut rng);
        let probs: Vec<Tensor<f64>> = sizes.iter().map(|&p| random_probs(n, p, &mut rng)).collect();
        let q = random_probs(n, k, &mut rng);
        let labels = LabelBatch::new(&sizes, k, &attrs, &classes, vec![Provenance::True; n]).unwrap();
        let got = eval_loss(&probs, &q, &labels, w);
        let want = direct_loss(&probs, &q, &attrs, &classes, w);
        worst = worst.max((got - want).abs());
    }
    assert!(worst < 1e-9, "worst deviation {worst}");
}

#[test]
fn attribute_free_loss_is_base2_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sizes = [3, 2];
    let (attrs, classes) = labels_for(&sizes, 5, 6, &mut rng);
    let labels = LabelBatch::<f64>::new(&sizes, 5, &attrs, &classes, vec![Provenance::True; 6]).unwrap();
    let probs: Vec<Tensor<f64>> = sizes.iter().map(|&p| random_probs(6, p, &mut rng)).collect();
    let q = random_probs(6, 5, &mut rng);
    let w = LossWeights {
        lambda_ap: 0.0,
        lambda_cls: 1.0,
    };
    let got = eval_loss(&probs, &q, &labels, w);
    let mut g = Graph::new();
    let qv = g.constant(q);
    let ce = cross_entropy(&mut g, qv, &labels.classes).unwrap();
    let want = g.value(ce).item() / LN_2;
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

proptest! {
    #[test]
    fn loss_scales_linearly_with_both_weights(seed in 0u64..1000, c in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes = [2, 4, 3];
        let (attrs, classes) = labels_for(&sizes, 3, 5, &mut rng);
        let labels = LabelBatch::<f64>::new(&sizes, 3, &attrs, &classes, vec![Provenance::True; 5]).unwrap();
        let probs: Vec<Tensor<f64>> = sizes.iter().map(|&p| random_probs(5, p, &mut rng)).collect();
        let q = random_probs(5, 3, &mut rng);
        let w = LossWeights { lambda_ap: rng.gen_range(0.0..1.0), lambda_cls: rng.gen_range(0.0..1.0) };
        let scaled = LossWeights { lambda_ap: c * w.lambda_ap, lambda_cls: c * w.lambda_cls };
        let base = eval_loss(&probs, &q, &labels, w);
        let big = eval_loss(&probs, &q, &labels, scaled);
        prop_assert!((big - c * base).abs() <= 1e-12 * (1.0 + big.abs()));
    }
}

#[test]
fn loss_rejects_mismatched_arity_and_bad_weights() {
    let sizes = [2, 2];
    let labels = LabelBatch::<f64>::new(&sizes, 2, &[vec![0, 1]], &[1], vec![Provenance::True]).unwrap();
    let half = Tensor::full(&[1, 2], 0.5);
    let mut g = Graph::new();
    let p = g.constant(half.clone());
    assert!(loss_eq1(&mut g, &[p], p, &labels, LossWeights::default()).is_err());
    let w = LossWeights {
        lambda_ap: -0.1,
        lambda_cls: 1.0,
    };
    assert!(loss_eq1(&mut g, &[p, p], p, &labels, w).is_err());
    assert!(LabelBatch::<f64>::new(&sizes, 2, &[vec![0, 2]], &[1], vec![Provenance::True]).is_err());
}

#[test]
fn loss_gradient_passes_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sizes = [3, 2];
    let (attrs, classes) = labels_for(&sizes, 4, 2, &mut rng);
    let labels = LabelBatch::<f64>::new(&sizes, 4, &attrs, &classes, vec![Provenance::True; 2]).unwrap();
    let logits: Vec<Tensor<f64>> = [3, 2, 4]
        .iter()
        .map(|&k| Tensor::from_fn(&[2, k], |_| rng.gen_range(-1.0..1.0)))
        .collect();
    let report = gradcheck(
        |g, x| {
            let p0 = g.softmax(x[0], 1)?;
            let p1 = g.softmax(x[1], 1)?;
            let q = g.softmax(x[2], 1)?;
            loss_eq1(g, &[p0, p1], q, &labels, LossWeights::default())
        },
        &logits,
        &GradcheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn cross_entropy_of_uniform_prediction_is_ln_k() {
    let mut g = Graph::new();
    let p = g.constant(Tensor::full(&[3, 5], 0.2));
    let y = one_hot::<f64>(&[0, 3, 4], 5).unwrap();
    let ce = cross_entropy(&mut g, p, &y).unwrap();
    assert!((g.value(ce).item() - 5f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_logit_gradient_is_prediction_minus_target() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = Tensor::<f64>::from_fn(&[4, 3], |_| rng.gen_range(-2.0..2.0));
    let y = one_hot::<f64>(&[2, 0, 1, 1], 3).unwrap();
    let mut g = Graph::new();
    let zv = g.leaf(z, true);
    let p = g.softmax(zv, 1).unwrap();
    let ce = cross_entropy(&mut g, p, &y).unwrap();
    let grads = g.backward(ce).unwrap();
    let dz = grads.get(zv).unwrap();
    for ((d, pv), yv) in dz.data().iter().zip(g.value(p).data()).zip(y.data()) {
        assert!((d - (pv - yv) / 4.0).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_rejects_unnormalized_rows() {
    let mut g = Graph::new();
    let p = g.constant(Tensor::full(&[1, 2], 0.3));
    let y = one_hot::<f64>(&[0], 2).unwrap();
    assert!(cross_entropy(&mut g, p, &y).is_err());
}

fn scalar_store(values: &[f64]) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    for (i, &v) in values.iter().enumerate() {
        store.add(format!("p{i}"), Tensor::full(&[2], v), ParamKind::Weight).unwrap();
    }
    store
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut store = scalar_store(&[1.0]);
    let id = store.find("p0").unwrap();
    let mut adam = Adam::new(AdamConfig {
        lr: 0.1,
        ..Default::default()
    })
    .unwrap();
    adam.step(&mut store, &[(id, Tensor::from_slice(&[2], &[3.0, -0.5]).unwrap())]).unwrap();
    let p = store.value(id).data();
    assert!((p[0] - 0.9).abs() < 1e-7 && (p[1] - 1.1).abs() < 1e-7, "{p:?}");
    assert_eq!(adam.steps(), 1);
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut store = scalar_store(&[0.7]);
    let id = store.find("p0").unwrap();
    let mut adam = Adam::new(AdamConfig::default()).unwrap();
    for _ in 0..3 {
        adam.step(&mut store, &[(id, Tensor::zeros(&[2]))]).unwrap();
    }
    assert_eq!(store.value(id).data(), &[0.7, 0.7]);
}

#[test]
fn adam_non_finite_gradient_names_the_parameter_and_changes_nothing() {
    let mut store = scalar_store(&[1.0, 2.0]);
    let ids: Vec<_> = store.ids().collect();
    let mut adam = Adam::new(AdamConfig::default()).unwrap();
    let before = store.clone();
    let err = adam
        .step(
            &mut store,
            &[(ids[0], Tensor::full(&[2], 1.0)), (ids[1], Tensor::from_slice(&[2], &[0.0, f64::NAN]).unwrap())],
        )
        .unwrap_err();
    assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "p1"), "{err}");
    for id in ids {
        assert_eq!(store.value(id), before.value(id));
    }
    assert_eq!(adam.steps(), 0);
}

#[test]
fn adam_skips_frozen_parameters_and_is_deterministic() {
    let run = || {
        let mut store = scalar_store(&[1.0, 1.0]);
        store.freeze_prefix("p1");
        let ids: Vec<_> = store.ids().collect();
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..5 {
            let grads: Vec<_> = ids.iter().map(|&id| (id, Tensor::from_fn(&[2], |_| rng.gen_range(-1.0..1.0)))).collect();
            adam.step(&mut store, &grads).unwrap();
        }
        store
    };
    let (a, b) = (run(), run());
    let ids: Vec<_> = a.ids().collect();
    assert_eq!(a.value(ids[0]), b.value(ids[0]));
    assert_ne!(a.value(ids[0]).data(), &[1.0, 1.0]);
    assert_eq!(a.value(ids[1]).data(), &[1.0, 1.0]);
}

#[test]
fn adam_rejects_bad_settings() {
    for cfg in [
        AdamConfig { lr: 0.0, ..Default::default() },
        AdamConfig { beta1: 1.0, ..Default::default() },
        AdamConfig { eps: 0.0, ..Default::default() },
    ] {
        assert!(Adam::<f64>::new(cfg).is_err());
    }
}

#[test]
fn zero_patience_stops_after_first_non_improving_epoch() {
    let mut s = EarlyStopping::new(Monitor::ValLoss, 0);
    assert!(s.update(0, 1.0));
    assert!(!s.should_stop());
    assert!(!s.update(1, 1.0));
    assert!(s.should_stop());
    assert_eq!(s.best(), Some((0, 1.0)));
}

#[test]
fn patience_counts_consecutive_non_improving_epochs() {
    let mut s = EarlyStopping::new(Monitor::ValAccuracy, 2);
    let values = [0.5, 0.4, 0.6, 0.6, 0.55, f64::NAN];
    let mut stopped = None;
    for (e, &v) in values.iter().enumerate() {
        s.update(e, v);
        if s.should_stop() {
            stopped = Some(e);
            break;
        }
    }
    assert_eq!(stopped, Some(5));
    assert_eq!(s.best(), Some((2, 0.6)));
}

#[test]
fn train_config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let bad = [
        TrainConfig { epochs: 0, patience: 0, ..Default::default() },
        TrainConfig { epochs: 3, patience: 4, ..Default::default() },
        TrainConfig { batch_size: 1, ..Default::default() },
    ];
    for cfg in bad {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
}

const SIZE: usize = 20;
const CROP: usize = 16;

/// In-memory synthetic set, `per_class` images per class.
fn synth_samples(per_class: usize, seed: u64) -> Samples {
    let cfg = SynthConfig {
        image_size: SIZE,
        per_class,
        seed,
        ..Default::default()
    };
    let (_, plan) = synth_plan(&cfg).unwrap();
    Samples {
        images: plan.iter().map(|s| render(&s.params)).collect(),
        classes: plan.iter().map(|s| s.class).collect(),
        attributes: plan.iter().map(|s| Some(s.params.attributes.clone())).collect(),
        provenance: vec![Provenance::True; plan.len()],
    }
}

fn small_backbone() -> BackboneConfig {
    BackboneConfig {
        input_size: CROP,
        feature_dim: 16,
        ..BackboneConfig::tiny()
    }
}

fn map_config() -> MapConfig {
    MapConfig {
        backbone: BackboneConfig {
            epsa: false,
            sa: false,
            ..small_backbone()
        },
        num_classes: 5,
    }
}

fn build_map(seed: u64) -> (MapNet, ParamStore<f32>) {
    let mut store = ParamStore::new();
    let map = MapNet::build(&mut store, map_config(), AttributeSchema::default(), &mut ChaCha8Rng::seed_from_u64(seed))
        .unwrap();
    (map, store)
}

fn input_for(train: &Samples) -> InputSpec {
    InputSpec {
        size: CROP,
        norm: channel_stats(&train.images).unwrap(),
    }
}

fn quick_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        patience: epochs,
        batch_size: 16,
        adam: AdamConfig {
            lr: 3e-3,
            ..Default::default()
        },
        seed: 11,
        freeze: Vec::new(),
    }
}

fn assert_same_store(a: &ParamStore<f32>, b: &ParamStore<f32>, prefix: &str) -> usize {
    let mut n = 0;
    for (id, e) in a.entries() {
        if e.name.starts_with(prefix) {
            let other = b.find(&e.name).unwrap();
            assert_eq!(a.value(id).data(), b.value(other).data(), "{}", e.name);
            n += 1;
        }
    }
    n
}

#[test]
fn map_training_lowers_loss_and_restores_best_epoch() {
    let train = synth_samples(40, 1);
    let val = synth_samples(6, 2);
    let input = input_for(&train);
    let (map, mut store) = build_map(0);
    let w = LossWeights::default();
    let history = train_map_dsl(&map, &mut store, &train, &val, &quick_config(4), w, &input).unwrap();
    assert_eq!(history.monitor, Monitor::ValLoss);
    assert_eq!(history.epochs.len(), 4);
    let first = &history.epochs[0];
    let last = history.epochs.last().unwrap();
    assert!(last.train_loss < first.train_loss, "{history:?}");
    let argmin = history
        .epochs
        .iter()
        .min_by(|a, b| a.val_loss.total_cmp(&b.val_loss))
        .unwrap()
        .epoch;
    assert_eq!(history.best_epoch, argmin);
    assert_eq!(history.best_value, history.best().val_loss);
    let (_, loss) = predict_map(&map, &store, &val, &input, Some(w)).unwrap();
    assert_eq!(loss.unwrap(), history.best().val_loss);
}

#[test]
fn map_training_is_deterministic() {
    let train = synth_samples(4, 1);
    let val = synth_samples(2, 2);
    let input = input_for(&train);
    let run = || {
        let (map, mut store) = build_map(0);
        let h = train_map_dsl(&map, &mut store, &train, &val, &quick_config(2), LossWeights::default(), &input).unwrap();
        (h, store)
    };
    let (h1, s1) = run();
    let (h2, s2) = run();
    assert_eq!(assert_same_store(&s1, &s2, ""), s1.len());
    let losses = |h: &History| h.epochs.iter().map(|e| (e.train_loss, e.val_loss)).collect::<Vec<_>>();
    assert_eq!(losses(&h1), losses(&h2));
}

#[test]
fn ssl_without_pseudo_samples_equals_dsl() {
    let train = synth_samples(4, 1);
    let val = synth_samples(2, 2);
    let input = input_for(&train);
    let cfg = quick_config(2);
    let w = LossWeights::default();
    let (map, mut dsl) = build_map(3);
    let h_dsl = train_map_dsl(&map, &mut dsl, &train, &val, &cfg, w, &input).unwrap();
    let (map, mut ssl) = build_map(3);
    let empty = Samples::default();
    let h_ssl = train_map_ssl(&map, &mut ssl, &train, &[&empty], &val, &cfg, w, &input).unwrap();
    assert_eq!(assert_same_store(&dsl, &ssl, ""), dsl.len());
    assert_eq!(h_dsl.best_epoch, h_ssl.best_epoch);
    assert_eq!(h_dsl.best_value, h_ssl.best_value);
}

#[test]
fn map_training_rejects_unlabeled_or_empty_data() {
    let mut train = synth_samples(2, 1);
    let val = synth_samples(1, 2);
    let input = input_for(&train);
    let (map, mut store) = build_map(0);
    let w = LossWeights::default();
    let empty = Samples::default();
    assert!(train_map_dsl(&map, &mut store, &empty, &val, &quick_config(1), w, &input).is_err());
    assert!(train_map_dsl(&map, &mut store, &train, &empty, &quick_config(1), w, &input).is_err());
    train.attributes[3] = None;
    let err = train_map_dsl(&map, &mut store, &train, &val, &quick_config(1), w, &input).unwrap_err();
    assert!(err.to_string().contains("sample 3"), "{err}");
}

#[test]
fn unknown_freeze_prefix_is_rejected() {
    let train = synth_samples(2, 1);
    let input = input_for(&train);
    let (map, mut store) = build_map(0);
    let cfg = TrainConfig {
        freeze: vec!["nothing.here".into()],
        ..quick_config(1)
    };
    assert!(train_map_dsl(&map, &mut store, &train, &train, &cfg, LossWeights::default(), &input).is_err());
}

#[test]
fn frozen_prefix_stays_fixed_during_training() {
    let train = synth_samples(2, 1);
    let input = input_for(&train);
    let (map, mut store) = build_map(0);
    let before = store.clone();
    let cfg = TrainConfig {
        freeze: vec!["map.backbone.".into()],
        ..quick_config(1)
    };
    train_map_dsl(&map, &mut store, &train, &train, &cfg, LossWeights::default(), &input).unwrap();
    assert!(assert_same_store(&before, &store, "map.backbone.") > 0);
}

fn manifest_for(samples: &Samples, labeled: &[bool]) -> DatasetManifest {
    let classes: Vec<String> = ["Basophil", "Eosinophil", "Lymphocyte", "Monocyte", "Neutrophil"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let records = (0..samples.len())
        .map(|i| Record {
            file: format!("/nowhere/{i}.png").into(),
            name: format!("{}/{i}.png", classes[samples.classes[i]]),
            class: samples.classes[i],
            attributes: labeled[i].then(|| samples.attributes[i].clone().unwrap()),
            provenance: Provenance::True,
            source: "test".into(),
        })
        .collect();
    DatasetManifest {
        root: "/nowhere".into(),
        classes,
        schema: AttributeSchema::default(),
        source: "test".into(),
        records,
    }
}

#[test]
fn pseudo_labels_fill_only_missing_rows() {
    let samples = synth_samples(2, 5);
    let labeled: Vec<bool> = (0..samples.len()).map(|i| i % 3 == 0).collect();
    let manifest = manifest_for(&samples, &labeled);
    let (map, store) = build_map(0);
    let out = pseudo_label(&map, &store, &manifest, &samples, &input_for(&samples)).unwrap();
    assert_eq!(out.records.len(), manifest.records.len());
    for ((r, before), &was_labeled) in out.records.iter().zip(&manifest.records).zip(&labeled) {
        if was_labeled {
            assert_eq!(r, before);
        } else {
            assert_eq!(r.provenance, Provenance::Pseudo);
            let row = r.attributes.as_ref().unwrap();
            AttributeSchema::default().check_labels(row).unwrap();
        }
    }
}

#[test]
fn pseudo_labels_match_predictor_argmax() {
    let samples = synth_samples(1, 5);
    let manifest = manifest_for(&samples, &vec![false; samples.len()]);
    let (map, store) = build_map(0);
    let input = input_for(&samples);
    let out = pseudo_label(&map, &store, &manifest, &samples, &input).unwrap();
    let (pred, _) = predict_map(&map, &store, &samples, &input, None).unwrap();
    let got: Vec<Vec<usize>> = out.records.iter().map(|r| r.attributes.clone().unwrap()).collect();
    assert_eq!(got, pred.attributes);
}

fn daff_config(use_mfe: bool, use_mae: bool) -> DaffConfig {
    DaffConfig {
        backbone: small_backbone(),
        map: map_config(),
        mae: MaeConfig {
            expansion: 2,
            channels: vec![2, 3, 4],
            ..Default::default()
        },
        num_classes: 5,
        use_mfe,
        use_mae,
    }
}

fn map_checkpoint(store: ParamStore<f32>) -> Checkpoint {
    Checkpoint {
        model: ModelSpec::Map(map_config()),
        schema: AttributeSchema::default(),
        classes: Vec::new(),
        normalization: Normalization::identity(3),
        seed: 0,
        store,
    }
}

#[test]
fn daffnet_training_keeps_attribute_predictor_bitwise_fixed() {
    let train = synth_samples(4, 1);
    let val = synth_samples(2, 2);
    let input = input_for(&train);
    let (_, map_store) = build_map(9);
    let ckpt = map_checkpoint(map_store.clone());
    let mut store = ParamStore::new();
    let net = DaffNet::build(&mut store, daff_config(true, true), AttributeSchema::default(), &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap();
    let before = store.clone();
    let h = train_daffnet(&net, &mut store, Some(&ckpt), &train, &val, &quick_config(2), &input).unwrap();
    assert_eq!(h.monitor, Monitor::ValAccuracy);
    assert_eq!(assert_same_store(&map_store, &store, "map."), map_store.len());
    let changed = before
        .entries()
        .any(|(id, e)| e.name.starts_with("daff.") && before.value(id) != store.value(store.find(&e.name).unwrap()));
    assert!(changed);
    let argmax = h
        .epochs
        .iter()
        .fold(&h.epochs[0], |best, e| if e.val_metric > best.val_metric { e } else { best });
    assert_eq!(h.best_epoch, argmax.epoch);
}

#[test]
fn daffnet_requires_a_matching_predictor_checkpoint() {
    let train = synth_samples(2, 1);
    let input = input_for(&train);
    let mut store = ParamStore::new();
    let net = DaffNet::build(&mut store, daff_config(true, false), AttributeSchema::default(), &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap();
    let cfg = quick_config(1);
    assert!(matches!(
        train_daffnet(&net, &mut store, None, &train, &train, &cfg, &input),
        Err(Error::Checkpoint(_))
    ));
    let (_, map_store) = build_map(0);
    let mut ckpt = map_checkpoint(map_store);
    ckpt.model = ModelSpec::Map(MapConfig {
        num_classes: 4,
        ..map_config()
    });
    assert!(matches!(
        train_daffnet(&net, &mut store, Some(&ckpt), &train, &train, &cfg, &input),
        Err(Error::Checkpoint(_))
    ));
}

#[test]
fn semantic_only_daffnet_trains_without_checkpoint() {
    let train = synth_samples(2, 1);
    let input = input_for(&train);
    let mut store = ParamStore::new();
    let net = DaffNet::build(&mut store, daff_config(false, false), AttributeSchema::default(), &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap();
    let h = train_daffnet(&net, &mut store, None, &train, &train, &quick_config(1), &input).unwrap();
    assert_eq!(h.epochs.len(), 1);
    let (probs, _) = predict_daffnet(&net, &store, &train, &input).unwrap();
    for row in probs {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    }
}
