//! Distilling a trained teacher into an instance-level student.
//!
//! The student is trained on bags, but its objective also asks it to match
//! the teacher's temperature-softened prediction for every instance on its
//! own (a bag of size one), and to be confident on those instances.

use ndarray::Array2;
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{binary_cross_entropy, check_prob, clamp_prob, cross_entropy_grad, entropy_grad, logit_grad, positive_prob, xlogy};
use crate::model::{softmax, MilModel};
use crate::rng::{substream, Rng, Stream};
use crate::train::{run_epochs, Stage, StepTerms, TrainConfig, Trained};
use crate::types::{BagView, DistillConfig, StudentInit};
use crate::vat::conditional_entropy;

/// `softmax(logits / tau)`.
pub fn soften(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("temperature must be > 0, got {tau}")));
    }
    if logits.is_empty() {
        return Err(Error::Empty("logits"));
    }
    let scaled: Vec<f64> = logits.iter().map(|z| z / tau).collect();
    Ok(softmax(&scaled))
}

/// KL divergence between Bernoulli(p) and Bernoulli(q), with `0 ln 0 = 0`.
/// Both arguments are clamped away from 0 and 1, so equal inputs always give 0.
pub fn bernoulli_kl(p: f64, q: f64) -> Result<f64> {
    check_prob("p", p)?;
    check_prob("q", q)?;
    let (p, q) = (clamp_prob(p), clamp_prob(q));
    let kl = xlogy(p, p / q) + xlogy(1.0 - p, (1.0 - p) / (1.0 - q));
    // Rounding can leave a tiny negative value when p == q.
    Ok(kl.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StudentLoss {
    /// Bag cross entropy against the ground-truth label.
    pub supervised: f64,
    /// Bag-level KL between softened teacher and student.
    pub bag_kd: f64,
    /// Sum over instances of the softened instance-level KL.
    pub instance_kd: f64,
    /// Sum over instances of the student's instance entropy.
    pub instance_entropy: f64,
    pub total: f64,
}

impl StudentLoss {
    pub fn weighted_terms(&self, cfg: &DistillConfig) -> [f64; 4] {
        [
            cfg.gamma_c * self.supervised,
            cfg.gamma_b * self.bag_kd,
            cfg.gamma_i * self.instance_kd,
            cfg.gamma_e * self.instance_entropy,
        ]
    }

    pub fn named(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("supervised", self.supervised),
            ("bag_kd", self.bag_kd),
            ("instance_kd", self.instance_kd),
            ("instance_entropy", self.instance_entropy),
        ]
    }
}

/// Softened teacher probabilities for one bag: the bag as a whole and every
/// instance as a bag of size one.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTargets {
    pub bag: f64,
    pub instances: Vec<f64>,
}

pub fn teacher_targets(teacher: &MilModel, bag: BagView<'_>, tau: f64) -> Result<TeacherTargets> {
    let feats = teacher.infer_batch(bag.instances)?;
    let rows: Vec<usize> = (0..feats.nrows()).collect();
    let (logits, _) = teacher.head_forward(&feats, &rows)?;
    let inst = teacher.instance_logits(&feats, &rows);
    Ok(TeacherTargets {
        bag: positive_prob(logits, tau),
        instances: inst.rows().into_iter().map(|r| positive_prob([r[0], r[1]], tau)).collect(),
    })
}

/// Frozen teacher, the student being trained, and the objective weights.
#[derive(Debug, Clone)]
pub struct DistillState<'t> {
    pub teacher: &'t MilModel,
    pub student: MilModel,
    pub cfg: DistillConfig,
}

impl<'t> DistillState<'t> {
    pub fn new(teacher: &'t MilModel, cfg: DistillConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let student = match cfg.student_init {
            StudentInit::FromTeacher => teacher.clone(),
            StudentInit::FromScratch => MilModel::new(teacher.spec().clone(), &mut substream(seed, Stream::Init))?,
        };
        Ok(Self { teacher, student, cfg })
    }

    pub fn student_loss(&self, bag: BagView<'_>) -> Result<StudentLoss> {
        student_loss(self.teacher, &self.student, bag, &self.cfg)
    }
}

/// Student objective for one bag (value only, all instances used).
pub fn student_loss(teacher: &MilModel, student: &MilModel, bag: BagView<'_>, cfg: &DistillConfig) -> Result<StudentLoss> {
    cfg.validate()?;
    if teacher.spec() != student.spec() {
        return Err(Error::config("teacher and student architectures differ"));
    }
    let targets = teacher_targets(teacher, bag, cfg.tau)?;
    evaluate(student, &targets, bag, cfg, None, None)
}

/// Student objective for one bag against precomputed teacher targets; the
/// gradient is added into `grads`. `rng` is only used when the bag exceeds
/// `cfg.instance_cap`.
pub fn student_loss_and_grad(
    student: &MilModel,
    targets: &TeacherTargets,
    bag: BagView<'_>,
    cfg: &DistillConfig,
    rng: &mut Rng,
    grads: &mut MilModel,
) -> Result<StudentLoss> {
    evaluate(student, targets, bag, cfg, Some(rng), Some(grads))
}

fn evaluate(
    student: &MilModel,
    targets: &TeacherTargets,
    bag: BagView<'_>,
    cfg: &DistillConfig,
    rng: Option<&mut Rng>,
    grads: Option<&mut MilModel>,
) -> Result<StudentLoss> {
    let k = bag.len();
    if k == 0 {
        return Err(Error::Empty("bag"));
    }
    if targets.instances.len() != k {
        return Err(Error::shape(format!("{k} teacher instance targets"), targets.instances.len()));
    }
    let tau = cfg.tau;
    let (features, cache) = student.extract_batch(bag.instances)?;
    let all: Vec<usize> = (0..k).collect();
    let (bag_logits, head) = student.head_forward(&features, &all)?;
    let y = if bag.label { 1.0 } else { 0.0 };
    let p_s = positive_prob(bag_logits, 1.0);
    let p_s_tau = positive_prob(bag_logits, tau);

    let mut out = StudentLoss {
        supervised: binary_cross_entropy(y, p_s)?,
        bag_kd: bernoulli_kl(targets.bag, p_s_tau)?,
        ..StudentLoss::default()
    };
    let bag_du = cfg.gamma_c * cross_entropy_grad(y, p_s, 1.0) + cfg.gamma_b * cross_entropy_grad(targets.bag, p_s_tau, tau);

    let use_instances = cfg.gamma_i > 0.0 || cfg.gamma_e > 0.0;
    let (rows, weight) = match (cfg.instance_cap, rng) {
        (Some(cap), Some(rng)) if k > cap => {
            let mut r = index::sample(rng, k, cap).into_vec();
            r.sort_unstable();
            (r, k as f64 / cap as f64)
        }
        _ => (all, 1.0),
    };
    let mut inst_du = Vec::new();
    let mut inst_logits = Array2::zeros((0, 2));
    if use_instances {
        inst_logits = student.instance_logits(&features, &rows);
        for (j, &r) in rows.iter().enumerate() {
            let z = [inst_logits[[j, 0]], inst_logits[[j, 1]]];
            let p = positive_prob(z, 1.0);
            let p_tau = positive_prob(z, tau);
            let t = targets.instances[r];
            out.instance_kd += weight * bernoulli_kl(t, p_tau)?;
            out.instance_entropy += weight * conditional_entropy(p)?;
            inst_du.push(weight * (cfg.gamma_i * cross_entropy_grad(t, p_tau, tau) + cfg.gamma_e * entropy_grad(z[1] - z[0], p)));
        }
    }
    out.total = out.weighted_terms(cfg).iter().sum();

    if let Some(grads) = grads {
        let mut dfeatures = Array2::<f64>::zeros(features.dim());
        student.head_backward(&head, logit_grad(bag_du), &mut dfeatures, grads);
        if use_instances {
            let mut dl = Array2::<f64>::zeros(inst_logits.dim());
            for (j, du) in inst_du.iter().enumerate() {
                dl[[j, 0]] = -du;
                dl[[j, 1]] = *du;
            }
            student.instance_backward(&features, &rows, &dl, &mut dfeatures, grads);
        }
        student.extractor_backward(&cache, dfeatures, grads);
    }
    Ok(out)
}

/// Distils `teacher` into a student of the same architecture. The teacher is
/// only read; its softened targets are computed once up front.
pub fn train_student(
    teacher: &MilModel,
    train: &[BagView<'_>],
    valid: &[BagView<'_>],
    cfg: &DistillConfig,
    train_cfg: &TrainConfig,
) -> Result<Trained> {
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let state = DistillState::new(teacher, cfg.clone(), train_cfg.seed)?;
    let targets: Vec<TeacherTargets> = train
        .par_iter()
        .map(|b| teacher_targets(teacher, *b, cfg.tau))
        .collect::<Result<_>>()?;
    run_epochs(state.student, train.len(), valid, train_cfg, Stage::Student, |student, i, rng, grads| {
        let loss = student_loss_and_grad(student, &targets[i], train[i], cfg, rng, grads)?;
        Ok(StepTerms {
            terms: loss.named(),
            total: loss.total,
        })
    })
}
