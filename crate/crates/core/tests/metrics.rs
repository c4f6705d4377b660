mod common;

use std::collections::BTreeSet;

use common::rng;
use proptest::prelude::*;
use rand::Rng;
use scattnet::data::LabelMap;
use scattnet::metrics::{
    compute_report, format_csv, format_table, ConfusionMatrix, MetricReport, OaScope,
};
use scattnet::Error;

fn random_map(h: usize, w: usize, k: u8, seed: u64) -> LabelMap {
    let mut r = rng(seed);
    LabelMap::new(w, h, (0..h * w).map(|_| r.gen_range(0..k)).collect()).unwrap()
}

/// Scores straight from pixel sets: IoU = |P∩G| / |P∪G|, F1 = 2|P∩G| / (|P|+|G|).
struct Oracle {
    iou: Vec<f64>,
    f1: Vec<f64>,
    oa: f64,
}

fn oracle(pairs: &[(&LabelMap, &LabelMap)], k: usize) -> Oracle {
    let (mut inter, mut union, mut p_size, mut g_size) =
        (vec![0u64; k], vec![0u64; k], vec![0u64; k], vec![0u64; k]);
    let (mut hit, mut total) = (0u64, 0u64);
    for (pred, gt) in pairs {
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            for c in 0..k as u8 {
                let (in_p, in_g) = (p == c, g == c);
                inter[c as usize] += (in_p && in_g) as u64;
                union[c as usize] += (in_p || in_g) as u64;
                p_size[c as usize] += in_p as u64;
                g_size[c as usize] += in_g as u64;
            }
            hit += (p == g) as u64;
            total += 1;
        }
    }
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Oracle {
        iou: (0..k).map(|c| ratio(inter[c], union[c])).collect(),
        f1: (0..k)
            .map(|c| ratio(2 * inter[c], p_size[c] + g_size[c]))
            .collect(),
        oa: ratio(hit, total),
    }
}

fn report(cm: &ConfusionMatrix, excluded: &[usize]) -> MetricReport {
    compute_report(cm, &excluded.iter().copied().collect(), OaScope::AllPixels).unwrap()
}

#[test]
fn perfect_prediction_is_purely_diagonal() {
    let gt = random_map(8, 8, 6, 1);
    let mut cm = ConfusionMatrix::new(6);
    cm.accumulate(&gt, &gt).unwrap();
    for g in 0..6 {
        for p in 0..6 {
            if g != p {
                assert_eq!(cm.get(g, p), 0);
            }
        }
    }
    assert_eq!(cm.trace(), 64);
    let r = report(&cm, &[]);
    assert_eq!(r.oa, 1.0);
    for (c, s) in r.per_class.iter().enumerate() {
        if !s.empty {
            assert_eq!((s.iou, s.f1), (1.0, 1.0), "class {c}");
        }
    }
}

#[test]
fn random_pair_matches_pixel_counting_exactly() {
    for seed in 0..20 {
        let pred = random_map(8, 8, 5, seed);
        let gt = random_map(8, 8, 5, seed + 1000);
        let mut cm = ConfusionMatrix::new(5);
        cm.accumulate(&pred, &gt).unwrap();
        for g in 0..5u8 {
            for p in 0..5u8 {
                let n = pred
                    .labels()
                    .iter()
                    .zip(gt.labels())
                    .filter(|&(&a, &b)| a == p && b == g)
                    .count() as u64;
                assert_eq!(cm.get(g as usize, p as usize), n);
            }
        }
        assert_eq!(cm.total(), 64);
    }
}

#[test]
fn accumulating_two_images_equals_their_concatenation() {
    let (pa, ga) = (random_map(5, 7, 4, 1), random_map(5, 7, 4, 2));
    let (pb, gb) = (random_map(3, 7, 4, 3), random_map(3, 7, 4, 4));
    let mut split = ConfusionMatrix::new(4);
    split.accumulate(&pa, &ga).unwrap();
    split.accumulate(&pb, &gb).unwrap();
    let cat = |a: &LabelMap, b: &LabelMap| {
        LabelMap::new(7, 8, [a.labels(), b.labels()].concat()).unwrap()
    };
    let mut joined = ConfusionMatrix::new(4);
    joined.accumulate(&cat(&pa, &pb), &cat(&ga, &gb)).unwrap();
    assert_eq!(split, joined);
    assert_eq!(report(&split, &[1]), report(&joined, &[1]));
}

#[test]
fn merge_is_commutative_and_associative() {
    let cms: Vec<ConfusionMatrix> = (0..3)
        .map(|i| {
            let mut cm = ConfusionMatrix::new(3);
            cm.accumulate(&random_map(4, 4, 3, i), &random_map(4, 4, 3, i + 9))
                .unwrap();
            cm
        })
        .collect();
    let merged = |order: [usize; 3]| {
        let mut cm = ConfusionMatrix::new(3);
        for i in order {
            cm.merge(&cms[i]).unwrap();
        }
        cm
    };
    assert_eq!(merged([0, 1, 2]), merged([2, 0, 1]));
    let mut ab = cms[0].clone();
    ab.merge(&cms[1]).unwrap();
    ab.merge(&cms[2]).unwrap();
    let mut bc = cms[1].clone();
    bc.merge(&cms[2]).unwrap();
    let mut a_bc = cms[0].clone();
    a_bc.merge(&bc).unwrap();
    assert_eq!(ab, a_bc);
    assert!(ConfusionMatrix::new(3)
        .merge(&ConfusionMatrix::new(4))
        .is_err());
}

#[test]
fn out_of_range_label_reports_its_pixel() {
    let mut gt = LabelMap::filled(4, 3, 0);
    gt.set(2, 1, 7);
    let mut cm = ConfusionMatrix::new(3);
    let err = cm.accumulate(&LabelMap::filled(4, 3, 0), &gt).unwrap_err();
    assert!(err.to_string().contains("(y=2, x=1)"), "{err}");
    assert_eq!(cm.total(), 0, "nothing is counted from a rejected pair");
    assert!(cm
        .accumulate(&LabelMap::filled(4, 3, 0), &LabelMap::filled(3, 4, 0))
        .is_err());
}

#[test]
fn two_class_hand_example() {
    let cm = ConfusionMatrix::from_counts(2, vec![3, 1, 2, 4]).unwrap();
    let r = report(&cm, &[]);
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    assert!(close(r.per_class[0].iou, 3.0 / 6.0));
    assert!(close(r.per_class[0].f1, 6.0 / 9.0));
    assert!(close(r.per_class[1].iou, 4.0 / 7.0));
    assert!(close(r.per_class[1].f1, 8.0 / 11.0));
    assert!(close(r.oa, 0.7));
    assert!(close(r.miou, (0.5 + 4.0 / 7.0) / 2.0));
    assert!(close(r.af, (6.0 / 9.0 + 8.0 / 11.0) / 2.0));

    let ex = report(&cm, &[1]);
    assert_eq!(ex.miou, ex.per_class[0].iou);
    assert_eq!(ex.af, ex.per_class[0].f1);
    assert_eq!(ex.oa, r.oa, "exclusion does not touch overall accuracy");
}

#[test]
fn reported_only_scope_drops_excluded_ground_truth() {
    // Ground-truth class 2 pixels: 5, all mispredicted.
    let cm = ConfusionMatrix::from_counts(3, vec![4, 0, 0, 1, 3, 0, 2, 3, 0]).unwrap();
    let excluded: BTreeSet<usize> = [2].into();
    let all = compute_report(&cm, &excluded, OaScope::AllPixels).unwrap();
    let reported = compute_report(&cm, &excluded, OaScope::ReportedClasses).unwrap();
    assert!((all.oa - 7.0 / 13.0).abs() < 1e-12);
    assert!((reported.oa - 7.0 / 8.0).abs() < 1e-12);
}

#[test]
fn zero_support_class_scores_zero_and_is_flagged() {
    let cm = ConfusionMatrix::from_counts(3, vec![2, 1, 0, 1, 2, 0, 0, 0, 0]).unwrap();
    let r = report(&cm, &[]);
    assert!(r.per_class[2].empty);
    assert_eq!((r.per_class[2].iou, r.per_class[2].f1), (0.0, 0.0));
    assert!(!r.per_class[0].empty);
    assert!(r.miou.is_finite() && r.af.is_finite());
}

#[test]
fn degenerate_inputs_are_errors() {
    let cm = ConfusionMatrix::from_counts(2, vec![1, 0, 0, 1]).unwrap();
    assert!(matches!(
        compute_report(&cm, &[0, 1].into(), OaScope::AllPixels),
        Err(Error::Config(_))
    ));
    assert!(compute_report(
        &ConfusionMatrix::new(2),
        &BTreeSet::new(),
        OaScope::AllPixels
    )
    .is_err());
    assert!(ConfusionMatrix::from_counts(2, vec![1, 2, 3]).is_err());
}

fn names(k: usize) -> Vec<String> {
    (0..k).map(|c| format!("class{c}")).collect()
}

#[test]
fn table_examples() {
    let perfect = report(
        &ConfusionMatrix::from_counts(2, vec![5, 0, 0, 5]).unwrap(),
        &[],
    );
    let t = format_table(&[("A".into(), perfect)], &names(2));
    let row = t.lines().nth(1).unwrap();
    assert_eq!(row.matches("100.00/100.00").count(), 2, "{t}");
    assert!(row.trim_end().ends_with("100.00  100.00  100.00"), "{t}");

    let hand = report(
        &ConfusionMatrix::from_counts(2, vec![3, 1, 2, 4]).unwrap(),
        &[],
    );
    let t = format_table(&[("B".into(), hand.clone())], &names(2));
    assert!(t.contains("50.00/66.67"), "{t}");
    assert!(t.contains("57.14/72.73"), "{t}");
    let header: Vec<&str> = t.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header, ["Model", "class0", "class1", "MIoU", "AF", "OA"]);

    let empty = format_table(&[], &names(2));
    assert_eq!(empty.lines().count(), 1);
    assert!(empty.starts_with("Model"));

    let csv = format_csv(&[("B".into(), hand)], &names(2));
    assert_eq!(
        csv.lines().next().unwrap(),
        "model,class0_iou,class0_f1,class1_iou,class1_f1,miou,af,oa"
    );
}

#[test]
fn table_omits_excluded_columns() {
    let cm = ConfusionMatrix::from_counts(3, vec![2, 1, 0, 1, 2, 0, 0, 1, 1]).unwrap();
    let t = format_table(&[("m".into(), report(&cm, &[2]))], &names(3));
    assert!(!t.contains("class2"));
    assert!(t.contains("class1"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn report_matches_the_set_oracle(
        h in 1usize..=16,
        w in 1usize..=16,
        k in 2usize..=6,
        seed in any::<u64>(),
        exclude_last in any::<bool>(),
    ) {
        let pred = random_map(h, w, k as u8, seed);
        let gt = random_map(h, w, k as u8, seed ^ 0xabc);
        let mut cm = ConfusionMatrix::new(k);
        cm.accumulate(&pred, &gt).unwrap();
        let excluded: Vec<usize> = if exclude_last { vec![k - 1] } else { vec![] };
        let r = report(&cm, &excluded);
        let o = oracle(&[(&pred, &gt)], k);
        for c in 0..k {
            prop_assert!((r.per_class[c].iou - o.iou[c]).abs() <= 1e-9);
            prop_assert!((r.per_class[c].f1 - o.f1[c]).abs() <= 1e-9);
            let i = r.per_class[c].iou;
            prop_assert!((r.per_class[c].f1 - 2.0 * i / (1.0 + i)).abs() <= 1e-9);
            prop_assert!(r.per_class[c].f1 >= i);
            for v in [r.per_class[c].iou, r.per_class[c].f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
        let kept: Vec<usize> = (0..k).filter(|c| !excluded.contains(c)).collect();
        let miou = kept.iter().map(|&c| o.iou[c]).sum::<f64>() / kept.len() as f64;
        let af = kept.iter().map(|&c| o.f1[c]).sum::<f64>() / kept.len() as f64;
        prop_assert!((r.miou - miou).abs() <= 1e-9);
        prop_assert!((r.af - af).abs() <= 1e-9);
        prop_assert!((r.oa - o.oa).abs() <= 1e-9);
    }
}
