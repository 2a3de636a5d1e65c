mod common;

use common::{masked, reduction_gap, scene, small_model, unlabelled_head_max_grad};
use mtpsl::params::Session;
use mtpsl::task::{LabelMask, Sample};
use mtpsl::tensor::Tensor;
use mtpsl::xtask::{cross_task_loss_value, make_condition, map_to_joint, Direction, Strategy};
use proptest::prelude::*;

#[test]
fn unlabelled_head_receives_no_gradient() {
    for t in 0..3 {
        assert!(unlabelled_head_max_grad(t) <= 1e-8, "head {t}");
    }
}

#[test]
fn full_objective_reduces_to_supervised_on_full_labels() {
    for strategy in [Strategy::Ours, Strategy::OursNoCond, Strategy::OursNoReg] {
        let (gap, terms) = reduction_gap(strategy);
        assert_eq!(terms, 0, "{strategy}");
        assert!(gap <= 1e-12, "{strategy}: {gap}");
    }
}

fn two_task(sample: Sample, labelled: usize) -> Sample {
    let mut s = sample;
    s.labels.truncate(2);
    s.mask = LabelMask::full(2);
    masked(s, &[labelled], 2)
}

#[test]
fn one_label_pair_gives_one_consistency_and_two_regularizer_terms() {
    let m = small_model(Strategy::Ours, 2, 0);
    for labelled in 0..2 {
        let sample = two_task(scene(16, 16, 4), labelled);
        let mut s = Session::new(&m.store);
        let obj = m.objective(&mut s, &[&sample], &[]).unwrap();
        assert_eq!((obj.report.ct_terms, obj.report.reg_terms), (1, 2));
    }
    let m = small_model(Strategy::OursNoReg, 2, 0);
    let sample = two_task(scene(16, 16, 4), 0);
    let mut s = Session::new(&m.store);
    let obj = m.objective(&mut s, &[&sample], &[]).unwrap();
    assert_eq!((obj.report.ct_terms, obj.report.reg_terms, obj.report.regularizer), (1, 0, 0.0));
}

#[test]
fn pair_conditions_are_one_hot_off_diagonal() {
    for k in 2..=5 {
        for s in 0..k {
            assert!(make_condition(s, s, Direction::Source, k).is_err());
            for t in (0..k).filter(|&t| t != s) {
                for dir in [Direction::Source, Direction::Target] {
                    let m = make_condition(s, t, dir, k).unwrap().matrix();
                    let ones: usize = m.iter().flatten().map(|&v| v as usize).sum();
                    assert_eq!(ones, 1);
                    assert!((0..k).all(|i| m[i][i] == 0));
                }
            }
        }
        assert!(make_condition(0, k, Direction::Source, k).is_err());
    }
}

#[test]
fn conditioning_separates_pairs_and_identity_merges_them() {
    let mut m = small_model(Strategy::Ours, 3, 3);
    let input = Tensor::from_vec(&[1, 16, 16], (0..256).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let embed = |m: &mtpsl::model::ModelState, pair, dir| {
        let mut s = Session::new(&m.store);
        let x = s.graph.constant(input.clone());
        let e = map_to_joint(m.mapping.as_ref().unwrap(), &mut s, x, pair, dir).unwrap();
        s.graph.value(e).clone()
    };
    let a = embed(&m, (1, 0), Direction::Source);
    let b = embed(&m, (1, 2), Direction::Source);
    assert!(a.max_abs_diff(&b) > 1e-6);
    let mapping = m.mapping.clone().unwrap();
    mapping.reset_conditioner_to_identity(&mut m.store);
    let a = embed(&m, (1, 0), Direction::Source);
    let b = embed(&m, (1, 2), Direction::Source);
    assert_eq!(a, b);
}

fn tensor(v: Vec<f64>) -> Tensor {
    Tensor::from_vec(&[v.len()], v).unwrap()
}

#[test]
fn cosine_distance_exact_cases() {
    let a = tensor(vec![1.0, 2.0, -3.0, 0.5]);
    let close = |x: f64, y: f64| (x - y).abs() < 1e-12;
    assert!(close(cross_task_loss_value(&a, &a).unwrap(), 0.0));
    assert!(close(cross_task_loss_value(&a, &a.map(|v| 3.0 * v)).unwrap(), 0.0));
    assert!(close(cross_task_loss_value(&a, &a.map(|v| -v)).unwrap(), 2.0));
    let b = tensor(vec![2.0, -1.0, 0.0, 0.0]);
    assert!(close(cross_task_loss_value(&a, &b).unwrap(), 1.0));
}

proptest! {
    #[test]
    fn cosine_distance_bounded(pairs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..32)) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let d = cross_task_loss_value(&tensor(a), &tensor(b)).unwrap();
        prop_assert!((0.0..=2.0).contains(&d));
    }
}
