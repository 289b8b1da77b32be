use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::AttributeSchema;

fn brute_confusion(truth: &[usize], pred: &[usize], k: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0; k]; k];
    for t in 0..k {
        for p in 0..k {
            m[t][p] = truth.iter().zip(pred).filter(|&(&a, &b)| a == t && b == p).count() as u64;
        }
    }
    m
}

/// Direct evaluation from label lists, one pass per class.
fn brute_weighted(truth: &[usize], pred: &[usize], k: usize) -> (Vec<[f64; 4]>, [f64; 4], f64) {
    let n = truth.len();
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let mut per = Vec::new();
    let mut weighted = [0.0; 4];
    for c in 0..k {
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (&t, &p) in truth.iter().zip(pred) {
            match (t == c, p == c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        let prec = frac(tp, tp + fp);
        let rec = frac(tp, tp + fn_);
        let f1 = if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
        let spec = frac(tn, tn + fp);
        let row = [prec, rec, f1, spec];
        for (w, v) in weighted.iter_mut().zip(row) {
            *w += v * (tp + fn_) as f64;
        }
        per.push(row);
    }
    let weighted = weighted.map(|w| w / n as f64);
    let acc = truth.iter().zip(pred).filter(|(t, p)| t == p).count() as f64 / n as f64;
    (per, weighted, acc)
}

fn pairwise_auc(positive: &[bool], scores: &[f64]) -> Option<f64> {
    let mut wins = 0.0;
    let (mut p, mut n) = (0usize, 0usize);
    for i in 0..scores.len() {
        if positive[i] {
            p += 1;
        } else {
            n += 1;
        }
    }
    if p == 0 || n == 0 {
        return None;
    }
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if positive[i] && !positive[j] {
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    Some(wins / (p * n) as f64)
}

fn set_jaccard(truth: &[Vec<usize>], pred: &[Vec<usize>]) -> f64 {
    let mut sum = 0.0;
    for (t, p) in truth.iter().zip(pred) {
        let a: HashSet<(usize, usize)> = t.iter().copied().enumerate().collect();
        let b: HashSet<(usize, usize)> = p.iter().copied().enumerate().collect();
        sum += a.intersection(&b).count() as f64 / a.union(&b).count() as f64;
    }
    sum / truth.len() as f64
}

fn random_labels(rng: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..k)).collect()
}

/// Coarse scores so that ties are common.
fn random_scores(rng: &mut impl Rng, n: usize, k: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..k).map(|_| rng.gen_range(0..6) as f64 / 5.0).collect())
        .collect()
}

#[test]
fn confusion_examples() {
    let cm = confusion(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
    assert_eq!(cm.counts, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]);
    let cm = confusion(&[0, 1], &[1, 0], 2).unwrap();
    assert_eq!(cm.counts, vec![vec![0, 1], vec![1, 0]]);
    assert!(confusion(&[0, 3], &[0, 0], 3).is_err());
    assert!(confusion(&[0], &[0, 1], 3).is_err());
}

#[test]
fn weighted_metrics_hand_case() {
    let cm = ConfusionMatrix {
        counts: vec![vec![5, 0], vec![1, 4]],
    };
    let w = weighted_metrics(&cm).unwrap();
    assert_eq!(w.per_class[0].precision, 5.0 / 6.0);
    assert_eq!(w.per_class[0].recall, 1.0);
    assert_eq!(w.per_class[1].precision, 1.0);
    assert_eq!(w.per_class[1].recall, 0.8);
    assert!((w.weighted.precision - 11.0 / 12.0).abs() < 1e-15);
    assert_eq!(w.weighted.accuracy, 0.9);
}

#[test]
fn diagonal_matrix_scores_one_and_empty_prediction_scores_zero() {
    let cm = ConfusionMatrix {
        counts: vec![vec![3, 0, 0], vec![0, 2, 0], vec![0, 0, 4]],
    };
    let w = weighted_metrics(&cm).unwrap();
    for s in w.per_class.iter().chain([&w.weighted]) {
        assert_eq!([s.precision, s.recall, s.f1, s.specificity, s.accuracy], [1.0; 5]);
    }
    let cm = ConfusionMatrix {
        counts: vec![vec![2, 0], vec![3, 0]],
    };
    let w = weighted_metrics(&cm).unwrap();
    assert_eq!(w.per_class[1].precision, 0.0);
    assert_eq!(w.per_class[1].f1, 0.0);
    assert!(weighted_metrics(&ConfusionMatrix { counts: vec![vec![0]] }).is_err());
}

#[test]
fn multilabel_examples() {
    let t = vec![vec![0; 11]; 3];
    let mut p = t.clone();
    let e = MultiLabelEval::new(t.clone(), p.clone()).unwrap();
    assert_eq!((subset_accuracy(&e), hamming_loss(&e), jaccard_similarity(&e)), (1.0, 0.0, 1.0));
    p[1][4] = 1;
    let e = MultiLabelEval::new(t.clone(), p).unwrap();
    assert_eq!(subset_accuracy(&e), 2.0 / 3.0);
    assert_eq!(hamming_loss(&e), 1.0 / 33.0);
    let mut one = vec![vec![0; 11]];
    one[0][0] = 1;
    let e = MultiLabelEval::new(vec![vec![0; 11]], one).unwrap();
    assert_eq!(jaccard_similarity(&e), 10.0 / 12.0);
    let e = MultiLabelEval::new(t.clone(), vec![vec![1; 11]; 3]).unwrap();
    assert_eq!((hamming_loss(&e), jaccard_similarity(&e), subset_accuracy(&e)), (1.0, 0.0, 0.0));
    assert!(MultiLabelEval::new(t.clone(), vec![vec![0; 10]; 3]).is_err());
    assert!(MultiLabelEval::new(vec![], vec![]).is_err());
}

#[test]
fn auc_examples() {
    let truth = [0, 0, 1, 1];
    let sep = vec![vec![0.9, 0.1], vec![0.8, 0.2], vec![0.3, 0.7], vec![0.2, 0.8]];
    let r = auc_ovr(&truth, &sep, 2).unwrap();
    assert_eq!(r.per_class, vec![Some(1.0), Some(1.0)]);
    let flat = vec![vec![0.5, 0.5]; 4];
    assert_eq!(auc_ovr(&truth, &flat, 2).unwrap().weighted, Some(0.5));
    let r = auc_ovr(&[0, 0, 1], &vec![vec![0.6, 0.3, 0.1]; 3], 3).unwrap();
    assert_eq!(r.per_class[2], None);
    assert_eq!(r.weighted, Some(0.5));
    assert_eq!(r.warnings.len(), 1);
    assert!(auc_ovr(&truth, &vec![vec![f64::NAN, 0.0]; 4], 2).is_err());
}

#[test]
fn midranks_average_ties() {
    assert_eq!(midranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
}

#[test]
fn metrics_match_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..1000 {
        let n = rng.gen_range(1..=50);
        let k = rng.gen_range(2..=5);
        let truth = random_labels(&mut rng, n, k);
        let pred = random_labels(&mut rng, n, k);
        let cm = confusion(&truth, &pred, k).unwrap();
        assert_eq!(cm.counts, brute_confusion(&truth, &pred, k));
        let w = weighted_metrics(&cm).unwrap();
        let (per, weighted, acc) = brute_weighted(&truth, &pred, k);
        for (s, b) in w.per_class.iter().zip(&per) {
            assert_eq!([s.precision, s.recall, s.f1, s.specificity], *b);
        }
        let got = [w.weighted.precision, w.weighted.recall, w.weighted.f1, w.weighted.specificity];
        assert_eq!(got, weighted);
        assert_eq!(w.weighted.accuracy, acc);

        let probs = random_scores(&mut rng, n, k);
        let r = auc_ovr(&truth, &probs, k).unwrap();
        for c in 0..k {
            let pos: Vec<bool> = truth.iter().map(|&t| t == c).collect();
            let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            match (r.per_class[c], pairwise_auc(&pos, &scores)) {
                (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-12, "{a} vs {b}"),
                (a, b) => assert_eq!(a, b),
            }
        }

        let q = rng.gen_range(1..=11);
        let cats: Vec<usize> = (0..q).map(|_| rng.gen_range(2..=4)).collect();
        let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<usize>> {
            (0..n).map(|_| cats.iter().map(|&c| rng.gen_range(0..c)).collect()).collect()
        };
        let t = draw(&mut rng);
        let mut p = draw(&mut rng);
        for i in 0..n {
            if rng.gen_bool(0.3) {
                p[i] = t[i].clone();
            }
        }
        let e = MultiLabelEval::new(t.clone(), p.clone()).unwrap();
        let exact = t.iter().zip(&p).filter(|(a, b)| a == b).count();
        assert_eq!(subset_accuracy(&e), exact as f64 / n as f64);
        let wrong: usize = t.iter().zip(&p).map(|(a, b)| a.iter().zip(b).filter(|(x, y)| x != y).count()).sum();
        assert_eq!(hamming_loss(&e), wrong as f64 / (n * q) as f64);
        assert_eq!(jaccard_similarity(&e), set_jaccard(&t, &p));
    }
}

fn eval_strategy() -> impl Strategy<Value = (Vec<Vec<usize>>, Vec<Vec<usize>>)> {
    (1usize..30, 1usize..12).prop_flat_map(|(n, q)| {
        let vecs = prop::collection::vec(prop::collection::vec(0usize..3, q), n);
        (vecs.clone(), vecs)
    })
}

proptest! {
    #[test]
    fn multilabel_scores_are_ordered((t, p) in eval_strategy()) {
        let e = MultiLabelEval::new(t, p).unwrap();
        let (s, h, j) = (subset_accuracy(&e), hamming_loss(&e), jaccard_similarity(&e));
        prop_assert!(1.0 - s <= h * e.q() as f64 + 1e-12);
        prop_assert!(j >= s - 1e-12);
        prop_assert_eq!(h == 0.0, s == 1.0);
        prop_assert_eq!(s == 1.0, j == 1.0);
    }

    #[test]
    fn multilabel_scores_ignore_sample_order((t, p) in eval_strategy(), seed in any::<u64>()) {
        let e = MultiLabelEval::new(t.clone(), p.clone()).unwrap();
        let mut order: Vec<usize> = (0..t.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
        let f = MultiLabelEval::new(
            order.iter().map(|&i| t[i].clone()).collect(),
            order.iter().map(|&i| p[i].clone()).collect(),
        ).unwrap();
        prop_assert_eq!(subset_accuracy(&e), subset_accuracy(&f));
        prop_assert_eq!(hamming_loss(&e), hamming_loss(&f));
        prop_assert!((jaccard_similarity(&e) - jaccard_similarity(&f)).abs() < 1e-12);
    }

    #[test]
    fn weighted_recall_is_accuracy(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60),
        seed in any::<u64>(),
    ) {
        let (truth, pred): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let w = weighted_metrics(&confusion(&truth, &pred, 4).unwrap()).unwrap();
        prop_assert!((w.weighted.recall - w.weighted.accuracy).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probs = random_scores(&mut rng, truth.len(), 4);
        let mut order: Vec<usize> = (0..truth.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let a = auc_ovr(&truth, &probs, 4).unwrap();
        let b = auc_ovr(
            &order.iter().map(|&i| truth[i]).collect::<Vec<_>>(),
            &order.iter().map(|&i| probs[i].clone()).collect::<Vec<_>>(),
            4,
        ).unwrap();
        for (x, y) in a.per_class.iter().zip(&b.per_class) {
            match (x, y) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
                _ => prop_assert_eq!(x, y),
            }
        }
    }
}

#[test]
fn attribute_report_lists_schema_rows() {
    let schema = AttributeSchema::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let sizes = schema.sizes();
    let truth: Vec<Vec<usize>> = (0..40).map(|_| sizes.iter().map(|&p| rng.gen_range(0..p)).collect()).collect();
    let e = MultiLabelEval::new(truth.clone(), truth.clone()).unwrap();
    let probs: Vec<Vec<Vec<f64>>> = sizes
        .iter()
        .enumerate()
        .map(|(m, &p)| {
            truth
                .iter()
                .map(|t| (0..p).map(|c| if c == t[m] { 1.0 } else { 0.0 }).collect())
                .collect()
        })
        .collect();
    let r = attribute_report(&schema, &e, Some(&probs)).unwrap();
    let names: Vec<&str> = r.rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, schema.names());
    for row in r.rows.iter().chain([&r.overall]) {
        assert_eq!([row.precision, row.recall, row.f1, row.specificity, row.accuracy], [1.0; 5]);
        assert_eq!(row.auc, Some(1.0));
    }
    assert_eq!(r.hamming_loss, 0.0);
    assert_eq!(r.subset_accuracy, 1.0);
    assert!(r.to_text().contains("granularity"));
    assert!(attribute_report(&schema, &MultiLabelEval::new(vec![vec![0]], vec![vec![0]]).unwrap(), None).is_err());
}

#[test]
fn overall_row_is_unweighted_mean_of_attribute_rows() {
    let schema = AttributeSchema::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let sizes = schema.sizes();
    let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<usize>> {
        (0..30).map(|_| sizes.iter().map(|&p| rng.gen_range(0..p)).collect()).collect()
    };
    let e = MultiLabelEval::new(draw(&mut rng), draw(&mut rng)).unwrap();
    let r = attribute_report(&schema, &e, None).unwrap();
    let mean = |f: fn(&ScoreRow) -> f64| r.rows.iter().map(f).sum::<f64>() / 11.0;
    assert_eq!(r.overall.precision, mean(|x| x.precision));
    assert_eq!(r.overall.recall, mean(|x| x.recall));
    assert_eq!(r.overall.f1, mean(|x| x.f1));
    assert_eq!(r.overall.accuracy, mean(|x| x.accuracy));
    assert_eq!(r.overall.auc, None);
}

#[test]
fn classification_report_has_class_and_weighted_rows() {
    let classes: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
    let truth = [0, 1, 2, 2, 1, 0];
    let pred = [0, 1, 2, 1, 1, 0];
    let probs: Vec<Vec<f64>> = pred.iter().map(|&p| (0..3).map(|c| if c == p { 0.8 } else { 0.1 }).collect()).collect();
    let r = classification_report(&classes, &truth, &pred, &probs).unwrap();
    assert_eq!(r.rows.len(), 3);
    assert_eq!(r.accuracy(), 5.0 / 6.0);
    assert_eq!(r.confusion.counts[2], vec![0, 1, 1]);
    let text = r.to_text();
    assert!(text.contains("weighted") && text.contains("Prec"));
    assert_eq!(r.confusion.to_csv(&classes).lines().nth(3), Some("c,0,1,1"));
    let json = serde_json::to_string(&r).unwrap();
    assert_eq!(serde_json::from_str::<ClassificationReport>(&json).unwrap(), r);
}

#[test]
fn format_table_aligns_columns() {
    let t = format_table(&["name", "v"], &[vec!["a".into(), "1.00".into()], vec!["long".into(), "10.00".into()]]);
    assert_eq!(t, "name      v\na      1.00\nlong  10.00\n");
}
