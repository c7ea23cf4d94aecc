use instlabel_core::checkpoint::parameter_hash;
use instlabel_core::data::{bundled_digits, generate_mnist_bags, MnistBagsSpec};
use instlabel_core::distill::train_student;
use instlabel_core::eval::suite::views;
use instlabel_core::model::{FeatureExtractorSpec, ModelSpec};
use instlabel_core::train::{train_teacher, TrainConfig};
use instlabel_core::types::{Bag, DistillConfig, VatConfig};

fn setup() -> (ModelSpec, Vec<Bag>) {
    let pool = bundled_digits().unwrap();
    let bags = generate_mnist_bags(&MnistBagsSpec::new(100, 10.0, 21), &pool).unwrap();
    (ModelSpec::new(FeatureExtractorSpec::lenet5(pool.shape().unwrap(), 64)), bags)
}

fn moving_average(xs: &[f64], w: usize) -> Vec<f64> {
    xs.windows(w).map(|v| v.iter().sum::<f64>() / w as f64).collect()
}

#[test]
fn student_loss_curve_settles() {
    let (spec, bags) = setup();
    let refs: Vec<&Bag> = bags.iter().collect();
    let train = views(&refs);
    let cfg = TrainConfig { epochs: 8, seed: 1, ..TrainConfig::mnist_bags() };
    let teacher = train_teacher(&spec, &train, &[], &VatConfig::mnist_bags(), &cfg).unwrap();
    let before = parameter_hash(&teacher.model);

    let cfg = TrainConfig { epochs: 20, seed: 1, ..TrainConfig::histopathology() };
    let student = train_student(&teacher.model, &train, &[], &DistillConfig::default(), &cfg).unwrap();
    assert_eq!(parameter_hash(&teacher.model), before);
    let totals = student.history.totals();
    assert_eq!(totals.len(), 20);
    assert!(totals.iter().all(|t| t.is_finite()));
    let ma = moving_average(&totals, 5);
    for pair in ma.windows(2) {
        assert!(pair[1] <= pair[0], "moving average rose: {ma:?}");
    }
    for r in &student.history.records {
        let g = DistillConfig::default();
        let t = |name: &str| r.terms[name];
        let sum = g.gamma_c * t("supervised") + g.gamma_b * t("bag_kd") + g.gamma_i * t("instance_kd") + g.gamma_e * t("instance_entropy");
        assert!((sum - r.total).abs() <= 1e-9 * r.total.abs().max(1.0), "{sum} vs {}", r.total);
    }
}

#[test]
fn zero_epochs_return_the_initial_student() {
    let (spec, bags) = setup();
    let refs: Vec<&Bag> = bags.iter().collect();
    let train = views(&refs);
    let cfg = TrainConfig { epochs: 1, seed: 2, ..TrainConfig::mnist_bags() };
    let teacher = train_teacher(&spec, &train, &[], &VatConfig::baseline(), &cfg).unwrap();
    let student = train_student(&teacher.model, &train, &[], &DistillConfig::default(), &TrainConfig { epochs: 0, ..cfg }).unwrap();
    assert_eq!(student.model, teacher.model);
    assert!(student.history.records.is_empty());
}

#[test]
fn training_is_deterministic_given_seed() {
    let (spec, bags) = setup();
    let refs: Vec<&Bag> = bags[..40].iter().collect();
    let train = views(&refs);
    let cfg = TrainConfig { epochs: 2, seed: 5, ..TrainConfig::mnist_bags() };
    let a = train_teacher(&spec, &train, &[], &VatConfig::mnist_bags(), &cfg).unwrap();
    let b = train_teacher(&spec, &train, &[], &VatConfig::mnist_bags(), &cfg).unwrap();
    assert_eq!(parameter_hash(&a.model), parameter_hash(&b.model));
    assert_eq!(a.history, b.history);
}
