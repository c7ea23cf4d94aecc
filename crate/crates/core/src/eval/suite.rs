//! Training and scoring the three compared models on one split.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{Level, MetricReport, ModelTag};
use crate::distill::train_student;
use crate::error::{Error, Result};
use crate::model::{MilModel, ModelSpec};
use crate::train::{train_teacher, TrainConfig, Trained};
use crate::types::{Bag, BagView, DistillConfig, VatConfig};

/// Everything needed to train baseline, teacher and student.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub model: ModelSpec,
    pub vat: VatConfig,
    pub distill: DistillConfig,
    pub teacher: TrainConfig,
    pub student: TrainConfig,
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.extractor.validate()?;
        self.vat.validate()?;
        self.distill.validate()?;
        self.teacher.validate()?;
        self.student.validate()
    }
}

#[derive(Debug, Clone)]
pub struct ModelSuite {
    pub baseline: Trained,
    pub teacher: Trained,
    pub student: Trained,
}

impl ModelSuite {
    pub fn model(&self, tag: ModelTag) -> &MilModel {
        match tag {
            ModelTag::Baseline => &self.baseline.model,
            ModelTag::Teacher => &self.teacher.model,
            ModelTag::Student => &self.student.model,
        }
    }
}

pub fn views<'a>(bags: &[&'a Bag]) -> Vec<BagView<'a>> {
    bags.iter().map(|b| b.view()).collect()
}

/// Trains the plain attention-MIL baseline and the regularized teacher from
/// the same initialisation and shuffling seed, then distils the teacher.
pub fn train_suite(train: &[&Bag], valid: &[&Bag], cfg: &SuiteConfig, seed: u64) -> Result<ModelSuite> {
    cfg.validate()?;
    let (train, valid) = (views(train), views(valid));
    let teacher_cfg = TrainConfig { seed, ..cfg.teacher.clone() };
    let student_cfg = TrainConfig { seed, ..cfg.student.clone() };
    let baseline = train_teacher(&cfg.model, &train, &valid, &VatConfig::baseline(), &teacher_cfg)?;
    let teacher = train_teacher(&cfg.model, &train, &valid, &cfg.vat, &teacher_cfg)?;
    let student = train_student(&teacher.model, &train, &valid, &cfg.distill, &student_cfg)?;
    Ok(ModelSuite { baseline, teacher, student })
}

/// Positive-class bag probabilities and bag labels.
pub fn bag_level(model: &MilModel, bags: &[&Bag]) -> Result<(Vec<f64>, Vec<bool>)> {
    let scores = bags
        .par_iter()
        .map(|b| model.predict_bag(b.view()).map(|p| p.positive_prob()))
        .collect::<Result<Vec<_>>>()?;
    Ok((scores, bags.iter().map(|b| b.label()).collect()))
}

/// Positive-class probabilities of every instance seen as a bag of size one,
/// paired with the ground-truth instance labels.
pub fn instance_level(model: &MilModel, bags: &[&Bag]) -> Result<(Vec<f64>, Vec<bool>)> {
    let per_bag = bags
        .par_iter()
        .map(|b| {
            let labels = b
                .instance_labels()
                .ok_or_else(|| Error::invalid(format!("bag '{}' has no instance labels; instance-level evaluation needs them", b.id())))?;
            let out = model.predict_bag_and_instances(b.view())?;
            let probs = out.instance_probs.expect("instance probabilities requested");
            Ok((probs.iter().map(|p| p[1]).collect::<Vec<_>>(), labels.to_vec()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (scores, labels): (Vec<Vec<f64>>, Vec<Vec<bool>>) = per_bag.into_iter().unzip();
    Ok((scores.concat(), labels.concat()))
}

pub fn score(model: &MilModel, bags: &[&Bag], level: Level) -> Result<(Vec<f64>, Vec<bool>)> {
    match level {
        Level::Bag => bag_level(model, bags),
        Level::Instance => instance_level(model, bags),
    }
}

pub fn evaluate_suite(suite: &ModelSuite, test: &[&Bag], levels: &[Level], fold: usize, seed: u64) -> Result<Vec<MetricReport>> {
    let mut out = Vec::new();
    for &level in levels {
        for tag in ModelTag::ALL {
            let (scores, labels) = score(suite.model(tag), test, level)?;
            out.push(MetricReport::from_scores(fold, seed, tag, level, &scores, &labels)?);
        }
    }
    Ok(out)
}
