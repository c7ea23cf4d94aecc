//! Switching off the extra terms recovers the plain objectives.

use instlabel_core::distill::{soften, student_loss, DistillState};
use instlabel_core::loss::binary_cross_entropy;
use instlabel_core::model::{softmax, FeatureExtractorSpec, MilModel, ModelSpec};
use instlabel_core::rng::{substream, Stream};
use instlabel_core::types::{Bag, DistillConfig, Instance, InstanceShape, StudentInit, VatConfig};
use instlabel_core::vat::{vat_loss, ValueRange};
use rand::Rng as _;

const SHAPE: InstanceShape = InstanceShape { channels: 1, height: 8, width: 8 };

fn model(seed: u64) -> MilModel {
    MilModel::new(ModelSpec::new(FeatureExtractorSpec::lenet5(SHAPE, 16)), &mut substream(seed, Stream::Init)).unwrap()
}

fn bags() -> Vec<Bag> {
    let mut rng = substream(11, Stream::Data);
    (0..12)
        .map(|i| {
            let k = 1 + i % 6;
            let instances = (0..k)
                .map(|_| Instance::from_vec(SHAPE, (0..64).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap())
                .collect();
            let labels: Vec<bool> = (0..k).map(|_| rng.random_bool(0.3)).collect();
            let label = labels.iter().any(|&l| l);
            Bag::new(format!("r{i}"), instances, label, Some(labels)).unwrap()
        })
        .collect()
}

fn y(b: &Bag) -> f64 {
    if b.label() {
        1.0
    } else {
        0.0
    }
}

#[test]
fn vat_without_regularizers_is_bce() {
    let m = model(1);
    let cfg = VatConfig { lambda_n: 0.0, lambda_delta: 0.0, lambda_e: 0.0, ..VatConfig::colon() };
    for b in bags() {
        let loss = vat_loss(&m, b.view(), &cfg, ValueRange::unit(), &mut substream(3, Stream::Perturbation)).unwrap();
        let bce = binary_cross_entropy(y(&b), m.predict_bag(b.view()).unwrap().positive_prob()).unwrap();
        assert!((loss.total - bce).abs() < 1e-9, "{} vs {bce}", loss.total);
    }
}

#[test]
fn student_without_distillation_is_bce() {
    let teacher = model(1);
    let student = model(2);
    let cfg = DistillConfig { gamma_c: 1.0, gamma_b: 0.0, gamma_i: 0.0, gamma_e: 0.0, ..DistillConfig::default() };
    for b in bags() {
        let loss = student_loss(&teacher, &student, b.view(), &cfg).unwrap();
        let bce = binary_cross_entropy(y(&b), student.predict_bag(b.view()).unwrap().positive_prob()).unwrap();
        assert!((loss.total - bce).abs() < 1e-9);
    }
}

#[test]
fn unit_temperature_is_softmax() {
    for logits in [vec![2.0, 0.0], vec![-3.5, 1.25, 0.0], vec![700.0, -700.0]] {
        for (a, b) in soften(&logits, 1.0).unwrap().iter().zip(softmax(&logits)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn student_copied_from_teacher_has_no_distillation_loss() {
    let teacher = model(5);
    let cfg = DistillConfig { student_init: StudentInit::FromTeacher, ..DistillConfig::default() };
    let state = DistillState::new(&teacher, cfg, 9).unwrap();
    for b in bags() {
        let loss = state.student_loss(b.view()).unwrap();
        assert!(loss.bag_kd.abs() < 1e-9);
        assert!(loss.instance_kd.abs() < 1e-9);
    }
}
