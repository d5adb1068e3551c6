mod common;

use proptest::prelude::*;
use tsc_core::dataio::LabelSchema;
use tsc_core::metrics::*;

use common::naive_metrics;

fn schema(k: usize) -> LabelSchema {
    match k {
        2 => LabelSchema::stage1(),
        3 => LabelSchema::stage2(),
        _ => LabelSchema::multiclass4(),
    }
}

fn labels() -> impl Strategy<Value = (usize, Vec<usize>, Vec<usize>)> {
    (2usize..=4).prop_flat_map(|k| {
        (1usize..200).prop_flat_map(move |n| {
            (Just(k), prop::collection::vec(0..k, n), prop::collection::vec(0..k, n))
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn matches_counting_oracle((k, t, p) in labels()) {
        let cm = confusion_matrix_indices(&t, &p, &schema(k)).unwrap();
        let o = naive_metrics(&t, &p, k);
        prop_assert_eq!(&cm.counts, &o.counts);
        let rows = precision_recall_f1_support::<f64>(&cm);
        for (i, r) in rows.iter().enumerate() {
            prop_assert!((r.precision - o.precision[i]).abs() <= 1e-12);
            prop_assert!((r.recall - o.recall[i]).abs() <= 1e-12);
            prop_assert!((r.f1 - o.f1[i]).abs() <= 1e-12);
            prop_assert_eq!(r.support, o.support[i]);
        }
        prop_assert!((accuracy::<f64>(&cm).unwrap() - o.accuracy).abs() <= 1e-12);
    }

    #[test]
    fn micro_average_is_accuracy((k, t, p) in labels()) {
        let cm = confusion_matrix_indices(&t, &p, &schema(k)).unwrap();
        let (mp, mr, mf) = micro_average::<f64>(&cm);
        let acc = accuracy::<f64>(&cm).unwrap();
        prop_assert!((mp - acc).abs() <= 1e-12);
        prop_assert!((mr - acc).abs() <= 1e-12);
        prop_assert!((mf - acc).abs() <= 1e-12);
    }

    #[test]
    fn permutation_invariant((k, t, p) in labels(), rot in 0usize..1000) {
        let n = t.len();
        let t2: Vec<usize> = (0..n).map(|i| t[(i + rot) % n]).collect();
        let p2: Vec<usize> = (0..n).map(|i| p[(i + rot) % n]).collect();
        let s = schema(k);
        prop_assert_eq!(confusion_matrix_indices(&t, &p, &s).unwrap(), confusion_matrix_indices(&t2, &p2, &s).unwrap());
    }

    #[test]
    fn csv_roundtrip((k, t, p) in labels()) {
        let cm = confusion_matrix_indices(&t, &p, &schema(k)).unwrap();
        let raw = parse_confusion_csv(&cm.to_csv_string()).unwrap();
        prop_assert_eq!(raw.counts, cm.counts.clone());
    }

    #[test]
    fn report_averages((k, t, p) in labels()) {
        let cm = confusion_matrix_indices(&t, &p, &schema(k)).unwrap();
        let rep = classification_report::<f64>(&cm).unwrap();
        let o = naive_metrics(&t, &p, k);
        let macro_p = o.precision.iter().sum::<f64>() / k as f64;
        let weighted_r = o.recall.iter().zip(&o.support).map(|(r, s)| r * *s as f64).sum::<f64>() / t.len() as f64;
        prop_assert!((rep.macro_avg.precision - macro_p).abs() <= 1e-12);
        prop_assert!((rep.weighted_avg.recall - weighted_r).abs() <= 1e-12);
        // weighted recall equals accuracy
        prop_assert!((rep.weighted_avg.recall - rep.accuracy).abs() <= 1e-12);
    }
}

#[test]
fn f32_and_f64_agree() {
    let t = [0, 1, 2, 3, 3, 2, 1, 0, 0, 0];
    let p = [0, 1, 1, 3, 2, 2, 1, 0, 3, 0];
    let cm = confusion_matrix_indices(&t, &p, &LabelSchema::multiclass4()).unwrap();
    let a = precision_recall_f1_support::<f32>(&cm);
    let b = precision_recall_f1_support::<f64>(&cm);
    for (x, y) in a.iter().zip(&b) {
        assert!((f64::from(x.f1) - y.f1).abs() < 1e-6);
    }
}
