mod common;

use aqs_tensor::{Tape, Tensor};
use aqsnet::data::{Batch, SqaTriplet};
use aqsnet::loss::{combine_terms, combined_loss, segmentation_loss, LossConfig};
use aqsnet::metrics::{confusion_counts, f1, ConfusionCounts, MetricsReport, Tally, CSV_HEADER};
use aqsnet::train::{evaluate, AllBackground, Predictor};
use aqsnet::AqsError;
use common::rng;
use proptest::prelude::*;
use rand::Rng;

fn loss_of(logits: Tensor<f64>, labels: &[u8]) -> (f64, f64, f64) {
    let mut tape = Tape::new();
    let x = tape.input(logits);
    let l = segmentation_loss(&mut tape, x, labels, &LossConfig::default()).unwrap();
    (tape.data(l.ce)[0], tape.data(l.dice)[0], tape.data(l.total)[0])
}

fn scaled_one_hot(labels: &[u8], b: usize, h: usize, w: usize, scale: f64) -> Tensor<f64> {
    let mut t = aqsnet::loss::one_hot::<f64>(labels, b, h, w).unwrap();
    t.data_mut().iter_mut().for_each(|v| *v *= scale);
    t
}

#[test]
fn perfect_prediction_has_near_zero_loss() {
    let mut r = rng(0);
    let labels: Vec<u8> = (0..2 * 8 * 8).map(|_| r.random_range(0..3)).collect();
    let mut tape = Tape::<f64>::new();
    let x = tape.input(scaled_one_hot(&labels, 2, 8, 8, 1e6));
    let a = tape.input(scaled_one_hot(&labels, 2, 8, 8, 1e6));
    let l = combined_loss(&mut tape, x, Some(a), &labels, &labels, &LossConfig::default()).unwrap();
    assert!(tape.data(l.total)[0] < 1e-3);
}

#[test]
fn uniform_logits_give_ln3_cross_entropy() {
    let labels: Vec<u8> = (0..3 * 5 * 4).map(|i| (i % 3) as u8).collect();
    let (ce, _, _) = loss_of(Tensor::full(vec![3, 3, 5, 4], 0.7), &labels);
    assert!((ce - 3f64.ln()).abs() < 1e-6, "{ce}");
}

#[test]
fn weighting_of_the_two_terms() {
    let mut tape = Tape::<f64>::new();
    let ce = tape.input(Tensor::scalar(0.4));
    let dice = tape.input(Tensor::scalar(0.2));
    let l = combine_terms(&mut tape, ce, dice, &LossConfig::default()).unwrap();
    assert!((tape.data(l)[0] - 0.3).abs() < 1e-12);
    let d = LossConfig::default();
    assert_eq!((d.ce_weight, d.dice_weight, d.aux_weight, d.dice_eps), (0.5, 0.5, 0.4, 1.0));
}

#[test]
fn aux_term_is_weighted_by_lambda() {
    let mut r = rng(3);
    let labels: Vec<u8> = (0..16).map(|_| r.random_range(0..3)).collect();
    let (_, _, main) = loss_of(Tensor::randn(vec![1, 3, 4, 4], 1.0, &mut rng(1)), &labels);
    let (_, _, aux) = loss_of(Tensor::randn(vec![1, 3, 4, 4], 1.0, &mut rng(2)), &labels);
    let mut tape = Tape::<f64>::new();
    let x = tape.input(Tensor::randn(vec![1, 3, 4, 4], 1.0, &mut rng(1)));
    let a = tape.input(Tensor::randn(vec![1, 3, 4, 4], 1.0, &mut rng(2)));
    let l = combined_loss(&mut tape, x, Some(a), &labels, &labels, &LossConfig::default()).unwrap();
    assert!((tape.data(l.total)[0] - (main + 0.4 * aux)).abs() < 1e-12);
}

#[test]
fn labels_outside_three_classes_are_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(Tensor::zeros(vec![1, 3, 2, 2]));
    let err = segmentation_loss(&mut tape, x, &[0, 1, 3, 2], &LossConfig::default()).unwrap_err();
    assert!(matches!(err, AqsError::Validation(_)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn loss_terms_are_in_range(seed in any::<u64>(), scale in 0.1f64..20.0) {
        let mut r = rng(seed);
        let labels: Vec<u8> = (0..2 * 4 * 3).map(|_| r.random_range(0..3)).collect();
        let (ce, dice, total) = loss_of(Tensor::randn(vec![2, 3, 4, 3], scale, &mut r), &labels);
        prop_assert!(ce >= 0.0);
        prop_assert!((0.0..=1.0).contains(&dice));
        prop_assert!(total >= 0.0);
    }
}

#[test]
fn confusion_counts_identities() {
    let gt = [0u8, 1, 2, 1, 0, 0, 2, 1];
    let c = confusion_counts(&gt, &gt, 1).unwrap();
    assert_eq!((c.fp, c.fn_), (0, 0));
    let c = confusion_counts(&[0; 8], &gt, 1).unwrap();
    assert_eq!(c, ConfusionCounts { tp: 0, fp: 0, tn: 5, fn_: 3 });
    assert!(confusion_counts(&[0; 7], &gt, 1).is_err());
}

#[test]
fn confusion_counts_match_per_pixel_oracle() {
    let mut r = rng(11);
    for _ in 0..100 {
        let pred: Vec<u8> = (0..32 * 32).map(|_| r.random_range(0..3)).collect();
        let gt: Vec<u8> = (0..32 * 32).map(|_| r.random_range(0..3)).collect();
        for class in 0..3u8 {
            let mut o = [0u64; 4];
            for i in 0..pred.len() {
                let k = match (pred[i] == class, gt[i] == class) {
                    (true, true) => 0,
                    (true, false) => 1,
                    (false, false) => 2,
                    (false, true) => 3,
                };
                o[k] += 1;
            }
            let c = confusion_counts(&pred, &gt, class).unwrap();
            assert_eq!([c.tp, c.fp, c.tn, c.fn_], o);
            assert_eq!(c.total(), 1024);
        }
    }
}

#[test]
fn harmonic_mean_of_equal_values_is_exact() {
    let mut r = rng(2);
    for _ in 0..10_000 {
        let x: f64 = r.random_range(0.0..100.0);
        assert_eq!(f1(x, x), x);
    }
    assert_eq!(f1(0.0, 0.0), 0.0);
}

#[test]
fn zero_denominators_give_zero() {
    let m = MetricsReport::from_counts(Default::default());
    assert_eq!((m.missed.precision, m.missed.recall, m.missed.f1, m.oa), (0.0, 0.0, 0.0, 0.0));
}

fn tally_of(pairs: &[(&[u8], &[u8])]) -> MetricsReport {
    let mut t = Tally::default();
    for (p, g) in pairs {
        t.add(p, g).unwrap();
    }
    t.report()
}

#[test]
fn pooled_metrics_equal_those_of_the_concatenated_image() {
    let mut r = rng(5);
    for _ in 0..50 {
        let (n1, n2) = (r.random_range(1..200), r.random_range(1..200));
        let gen = |r: &mut rand_chacha::ChaCha8Rng, n| -> Vec<u8> { (0..n).map(|_| r.random_range(0..3)).collect() };
        let (p1, g1, p2, g2) = (gen(&mut r, n1), gen(&mut r, n1), gen(&mut r, n2), gen(&mut r, n2));
        let cat_p: Vec<u8> = p1.iter().chain(&p2).copied().collect();
        let cat_g: Vec<u8> = g1.iter().chain(&g2).copied().collect();
        assert_eq!(tally_of(&[(&p1, &g1), (&p2, &g2)]), tally_of(&[(&cat_p, &cat_g)]));
        assert_eq!(tally_of(&[(&p1, &g1)]).counts.missed, confusion_counts(&p1, &g1, 1).unwrap());
    }
}

#[test]
fn overall_accuracy_counts_all_three_classes() {
    let m = tally_of(&[(&[0, 1, 2, 2, 1], &[0, 1, 1, 2, 0])]);
    assert_eq!(m.counts.correct, 3);
    assert!((m.oa - 60.0).abs() < 1e-12);
    assert!((m.missed.precision - 50.0).abs() < 1e-12);
    assert!((m.missed.recall - 50.0).abs() < 1e-12);
    assert!((m.mistaken.precision - 50.0).abs() < 1e-12);
    assert!((m.mistaken.recall - 100.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn metrics_are_invariant_to_pixel_order(seed in any::<u64>(), n in 1usize..300) {
        use rand::seq::SliceRandom;
        let mut r = rng(seed);
        let mut pairs: Vec<(u8, u8)> = (0..n).map(|_| (r.random_range(0..3), r.random_range(0..3))).collect();
        let (p, g): (Vec<u8>, Vec<u8>) = pairs.iter().copied().unzip();
        let before = tally_of(&[(&p, &g)]);
        pairs.shuffle(&mut r);
        let (p, g): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let after = tally_of(&[(&p, &g)]);
        prop_assert_eq!(before, after);
        prop_assert!((0.0..=100.0).contains(&after.oa));
        for c in [after.missed, after.mistaken] {
            prop_assert!((0.0..=100.0).contains(&c.f1));
            prop_assert!((c.f1 - f1(c.precision, c.recall)).abs() < 1e-12);
        }
    }
}

fn scene(labels: Vec<u8>) -> SqaTriplet {
    let n = labels.len();
    let gt = aqsnet::data::Mask::new(n, 1, labels.iter().map(|&l| (l == 1) as u8).collect()).unwrap();
    let seg = aqsnet::data::Mask::new(n, 1, labels.iter().map(|&l| (l == 2) as u8).collect()).unwrap();
    SqaTriplet::from_parts(n, 1, vec![0; 3 * n], seg, gt).unwrap()
}

#[test]
fn all_background_predictor_scores_zero_f1() {
    let data = vec![scene(vec![0, 1, 2, 0, 0, 1]), scene(vec![0, 0, 2, 2, 0, 0])];
    let m = evaluate(&AllBackground, &data, 2).unwrap();
    assert_eq!((m.missed.f1, m.mistaken.f1), (0.0, 0.0));
    assert!((m.oa - 100.0 * 7.0 / 12.0).abs() < 1e-12);
}

struct Oracle;

impl Predictor for Oracle {
    fn predict(&self, batch: &Batch) -> aqsnet::Result<Vec<u8>> {
        Ok(batch.labels.clone())
    }
}

#[test]
fn evaluation_of_one_image_equals_its_own_metrics() {
    let s = scene(vec![0, 1, 2, 0, 1, 1]);
    let m = evaluate(&Oracle, std::slice::from_ref(&s), 4).unwrap();
    assert_eq!(m, tally_of(&[(&s.labels, &s.labels)]));
    assert_eq!((m.missed.f1, m.mistaken.f1, m.oa), (100.0, 100.0, 100.0));
}

#[test]
fn empty_dataset_is_a_usage_error() {
    assert!(matches!(evaluate(&AllBackground, &[], 4), Err(AqsError::Usage(_))));
}

#[test]
fn report_serialization_layout() {
    let m = tally_of(&[(&[0, 1, 2, 2, 1], &[0, 1, 1, 2, 0])]);
    let v: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
    for key in ["missed", "mistaken"] {
        for field in ["precision", "recall", "f1"] {
            assert!(v[key][field].is_number());
        }
    }
    assert!(v["oa"].is_number());
    assert_eq!(v["counts"]["missed"]["fn"], 1);
    let csv = m.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    assert_eq!(lines.next(), Some("50.000,50.000,50.000,50.000,100.000,66.667,60.000"));
}

#[test]
fn reference_precision_recall_pairs_reproduce_their_f1() {
    let rows = [
        (34.940, 70.326, 46.685),
        (64.691, 52.308, 57.844),
        (51.196, 62.748, 56.386),
        (55.497, 60.698, 57.981),
        (51.376, 63.734, 56.892),
        (59.383, 61.132, 60.245),
    ];
    for (p, r, expected) in rows {
        assert!((f1(p, r) - expected).abs() <= 0.005, "({p}, {r}) -> {}", f1(p, r));
    }
}
