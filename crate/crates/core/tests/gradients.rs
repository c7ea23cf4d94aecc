use instlabel_core::distill::{student_loss_and_grad, teacher_targets};
use instlabel_core::model::{ConvBlockSpec, FeatureExtractorSpec, MilModel, ModelSpec};
use instlabel_core::rng::{substream, Stream};
use instlabel_core::types::{Bag, DistillConfig, Instance, InstanceShape, NoiseCount, StudentInit, VatConfig};
use instlabel_core::loss::binary_cross_entropy;
use instlabel_core::vat::{conditional_entropy, perturb, vat_loss_and_grad, ValueRange};
use ndarray::Array2;
use rand::Rng as _;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn micro_spec() -> ModelSpec {
    ModelSpec {
        extractor: FeatureExtractorSpec {
            name: "micro".into(),
            input: InstanceShape::new(1, 4, 4),
            conv_blocks: vec![ConvBlockSpec { out_channels: 2, kernel: 3, padding: 1, pool: 2 }],
            fc_widths: vec![5, 4],
        },
        attention_hidden: 3,
    }
}

fn micro_model(seed: u64) -> MilModel {
    let mut m = MilModel::new(micro_spec(), &mut substream(seed, Stream::Init)).unwrap();
    // Jitter every parameter so zero-initialised biases are not all equal.
    let mut rng = substream(seed, Stream::Data);
    for t in m.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    m
}

fn micro_bag(k: usize, seed: u64, label: bool) -> Bag {
    let mut rng = substream(seed, Stream::Data);
    let instances = (0..k)
        .map(|_| Instance::from_vec(InstanceShape::new(1, 4, 4), (0..16).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap())
        .collect();
    Bag::new(format!("g{seed}"), instances, label, None).unwrap()
}

/// Largest element-wise relative error between the analytic gradient and
/// central differences of `loss`, over every parameter of `model`.
fn check(model: &MilModel, analytic: &MilModel, loss: impl Fn(&MilModel) -> f64) -> f64 {
    let mut worst = 0.0f64;
    let mut probe = model.clone();
    let grads: Vec<Vec<f64>> = analytic.tensors().iter().map(|t| t.to_vec()).collect();
    let sizes: Vec<usize> = grads.iter().map(Vec::len).collect();
    for (ti, &n) in sizes.iter().enumerate() {
        for j in 0..n {
            let orig = probe.tensors()[ti][j];
            probe.tensors_mut()[ti][j] = orig + STEP;
            let up = loss(&probe);
            probe.tensors_mut()[ti][j] = orig - STEP;
            let down = loss(&probe);
            probe.tensors_mut()[ti][j] = orig;
            let fd = (up - down) / (2.0 * STEP);
            let an = grads[ti][j];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn attention_head_gradient() {
    let model = micro_model(1);
    let bag = micro_bag(3, 2, true);
    let coeffs = [0.7, -1.3];
    let loss = |m: &MilModel| {
        let f = m.infer_batch(bag.instances()).unwrap();
        let (z, _) = m.head_forward(&f, &[0, 1, 2]).unwrap();
        coeffs[0] * z[0] + coeffs[1] * z[1]
    };
    let mut grads = model.zeros_like();
    let (features, cache) = model.extract_batch(bag.instances()).unwrap();
    let (_, head) = model.head_forward(&features, &[0, 1, 2]).unwrap();
    let mut df = Array2::zeros(features.dim());
    model.head_backward(&head, coeffs, &mut df, &mut grads);
    model.extractor_backward(&cache, df, &mut grads);
    let err = check(&model, &grads, loss);
    assert!(err < TOL, "relative error {err}");
}

fn vat_cfg() -> VatConfig {
    VatConfig {
        noise_count: NoiseCount::Range { min: 2, max: 2 },
        entropy_realizations: 3,
        delta: 0.2,
        ..VatConfig::colon()
    }
}

#[test]
fn teacher_objective_gradient() {
    for (seed, label) in [(3, true), (4, false)] {
        let model = micro_model(seed);
        let bag = micro_bag(4, seed + 10, label);
        let cfg = vat_cfg();
        let set = perturb(bag.view(), &cfg, ValueRange::unit(), &mut substream(seed, Stream::Perturbation)).unwrap();
        let mut grads = model.zeros_like();
        vat_loss_and_grad(&model, bag.view(), Some(&set), &cfg, &mut grads).unwrap();
        // The clean prediction is a fixed target in the consistency terms.
        let target = model.predict_bag(bag.view()).unwrap().positive_prob();
        let y = if label { 1.0 } else { 0.0 };
        let loss = |m: &MilModel| {
            let p = |b: &Bag| m.predict_bag(b.view()).unwrap().positive_prob();
            let entropy = set.pruned.iter().map(|r| conditional_entropy(p(&r.bag)).unwrap()).sum::<f64>() / set.pruned.len() as f64;
            cfg.lambda_c * binary_cross_entropy(y, p(&bag)).unwrap()
                + cfg.lambda_n * binary_cross_entropy(target, p(&set.noisy)).unwrap()
                + cfg.lambda_delta * binary_cross_entropy(target, p(&set.jittered)).unwrap()
                + cfg.lambda_e * entropy
        };
        let err = check(&model, &grads, loss);
        assert!(err < TOL, "label {label}: relative error {err}");
    }
}

#[test]
fn student_objective_gradient() {
    let teacher = micro_model(5);
    let student = micro_model(6);
    for (k, label) in [(3, true), (5, false)] {
        let bag = micro_bag(k, 20 + k as u64, label);
        let cfg = DistillConfig {
            student_init: StudentInit::FromScratch,
            ..DistillConfig::default()
        };
        let targets = teacher_targets(&teacher, bag.view(), cfg.tau).unwrap();
        let mut rng = substream(0, Stream::Perturbation);
        let mut grads = student.zeros_like();
        student_loss_and_grad(&student, &targets, bag.view(), &cfg, &mut rng, &mut grads).unwrap();
        let loss = |m: &MilModel| {
            let mut scratch = m.zeros_like();
            student_loss_and_grad(m, &targets, bag.view(), &cfg, &mut substream(0, Stream::Perturbation), &mut scratch)
                .unwrap()
                .total
        };
        let err = check(&student, &grads, loss);
        assert!(err < TOL, "K={k}: relative error {err}");
    }
}
