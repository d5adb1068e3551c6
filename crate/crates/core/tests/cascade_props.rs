mod common;

use proptest::prelude::*;
use tsc_core::cascade::*;
use tsc_core::dataio::{DatasetManifest, LabelSchema};

use common::{analytic_cascade_matrix, manifest_with, oracle_tables};

fn cascade(test: &DatasetManifest, policy: RoutingPolicy) -> CascadeModel {
    let (t1, t2) = oracle_tables(test);
    CascadeModel::builder().stage1(t1).stage2(t2).policy(policy).build().unwrap()
}

#[test]
fn composition_sums_to_one_on_grid() {
    for i in 0..100 {
        let p = i as f64 / 99.0;
        for j in 0..100 {
            let a = j as f64 / 99.0;
            let b = (1.0 - a) * 0.3;
            let p2 = [a, b, 1.0 - a - b];
            let d = compose_probabilities(p, &p2).unwrap();
            assert!((d.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            assert!(d.iter().all(|&v| v >= 0.0));
            assert_eq!(d[0], 1.0 - p);
        }
    }
}

#[test]
fn composition_rejects_bad_inputs() {
    assert!(compose_probabilities(1.5, &[0.2, 0.3, 0.5]).is_err());
    assert!(compose_probabilities(0.5, &[0.2, 0.3]).is_err());
    assert!(compose_probabilities(0.5, &[0.2, 0.3, 0.6]).is_err());
    assert!(compose_probabilities(f64::NAN, &[0.2, 0.3, 0.5]).is_err());
}

#[test]
fn analytic_confusion_matrix() {
    let test = manifest_with(&LabelSchema::multiclass4(), &[1500; 4]);
    let eval = cascade(&test, RoutingPolicy::default()).evaluate(&test).unwrap();
    let expected = analytic_cascade_matrix(1500);
    let got: Vec<Vec<u64>> = eval.end_to_end.confusion.counts.clone();
    assert_eq!(got, expected.iter().map(|r| r.to_vec()).collect::<Vec<_>>());
    // stage 1 sees 150 misses out of each class
    assert_eq!(eval.stage1.confusion.total(), 6000);
    let oracle = eval.stage2_oracle_routed.unwrap();
    assert_eq!(oracle.confusion.total(), 4500);
    assert_eq!(oracle.confusion.trace(), 3 * 1200);
    let piped = eval.stage2_pipeline_routed.unwrap();
    assert_eq!(piped.confusion.total(), 4500 - 450);
}

#[test]
fn oracle_models_give_perfect_accuracy() {
    let test = manifest_with(&LabelSchema::multiclass4(), &[20; 4]);
    let mut t1 = TableClassifier::new(LabelSchema::stage1());
    let mut t2 = TableClassifier::new(LabelSchema::stage2());
    for s in test.iter() {
        if s.label == "normal" {
            t1.insert_label(s.id.clone(), "normal");
            t2.insert_label(s.id.clone(), "covid");
        } else {
            t1.insert_label(s.id.clone(), "disease");
            t2.insert_label(s.id.clone(), &s.label);
        }
    }
    for policy in [RoutingPolicy::default(), RoutingPolicy::soft()] {
        let m = CascadeModel::builder().stage1(t1.clone()).stage2(t2.clone()).policy(policy).build().unwrap();
        assert_eq!(m.evaluate(&test).unwrap().end_to_end.report.accuracy, 1.0);
    }
}

#[test]
fn stage_schemas_are_checked() {
    let t = TableClassifier::new(LabelSchema::multiclass4());
    let r = CascadeModel::builder().stage1(t).stage2(TableClassifier::new(LabelSchema::stage2())).build();
    assert!(matches!(r, Err(CascadeError::StageSchema { .. })));
    let r = CascadeModel::builder().stage1(TableClassifier::new(LabelSchema::stage1())).build();
    assert!(matches!(r, Err(CascadeError::UnfittedStage(_))));
}

#[test]
fn table_json_roundtrip() {
    let test = manifest_with(&LabelSchema::multiclass4(), &[3; 4]);
    let (t1, _) = oracle_tables(&test);
    let back = TableClassifier::from_json(&t1.to_json()).unwrap();
    assert_eq!(back, t1);
}

fn random_tables(n: usize, ps: &[f64], p2s: &[[f64; 3]]) -> (DatasetManifest, TableClassifier, TableClassifier) {
    let test = manifest_with(&LabelSchema::multiclass4(), &[n; 4]);
    let s1 = LabelSchema::stage1();
    let di = s1.index_of("disease").unwrap();
    let mut t1 = TableClassifier::new(s1);
    let mut t2 = TableClassifier::new(LabelSchema::stage2());
    for (i, s) in test.iter().enumerate() {
        let p = ps[i % ps.len()];
        let mut d = vec![0.0; 2];
        d[di] = p;
        d[1 - di] = 1.0 - p;
        t1.insert(s.id.clone(), d);
        t2.insert(s.id.clone(), p2s[i % p2s.len()].to_vec());
    }
    (test, t1, t2)
}

fn p2_strategy() -> impl Strategy<Value = [f64; 3]> {
    (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0).prop_map(|(a, b, c)| {
        let s = a + b + c + 1e-9;
        [a / s, b / s, 1.0 - a / s - b / s]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Soft and hard labels differ exactly when stage 1 leans disease but
    /// the normal mass still beats every composed disease entry.
    #[test]
    fn soft_and_hard_disagree_by_predicate(
        ps in prop::collection::vec(0.0f64..=1.0, 1..20),
        p2s in prop::collection::vec(p2_strategy(), 1..20),
    ) {
        let (test, t1, t2) = random_tables(5, &ps, &p2s);
        let hard = CascadeModel::builder().stage1(t1.clone()).stage2(t2.clone()).build().unwrap().predict(&test).unwrap();
        let soft = CascadeModel::builder().stage1(t1).stage2(t2).policy(RoutingPolicy::soft()).build().unwrap().predict(&test).unwrap();
        for (i, (h, s)) in hard.iter().zip(&soft).enumerate() {
            let p = ps[i % ps.len()];
            let p2 = p2s[i % p2s.len()];
            let max2 = p2.iter().copied().fold(f64::MIN, f64::max);
            let predicate = p > 0.5 && 1.0 - p >= p * max2;
            prop_assert_eq!(h.label != s.label, predicate, "p={} p2={:?}", p, p2);
            let argmax = (0..4).fold(0, |b, k| if s.distribution[k] > s.distribution[b] { k } else { b });
            prop_assert_eq!(&s.label, &["normal", "covid", "opacity", "pneumonia"][argmax]);
        }
    }

    #[test]
    fn raising_threshold_never_loses_normals(
        ps in prop::collection::vec(0.0f64..=1.0, 1..30),
        p2s in prop::collection::vec(p2_strategy(), 1..10),
        t_lo in 0.05f64..0.5, dt in 0.0f64..0.45,
    ) {
        let (test, t1, t2) = random_tables(4, &ps, &p2s);
        let normals = |t: f64| {
            CascadeModel::builder().stage1(t1.clone()).stage2(t2.clone()).policy(RoutingPolicy::hard(t)).build().unwrap()
                .predict(&test).unwrap().iter().filter(|p| p.label == "normal").count()
        };
        prop_assert!(normals(t_lo + dt) >= normals(t_lo));
    }
}

#[test]
fn threshold_tie_stays_normal() {
    let (test, t1, t2) = random_tables(1, &[0.5], &[[0.2, 0.5, 0.3]]);
    let preds = CascadeModel::builder().stage1(t1).stage2(t2).build().unwrap().predict(&test).unwrap();
    assert!(preds.iter().all(|p| p.label == "normal" && !p.routed_to_disease));
}
