//! Training loops for the teacher and the shared epoch machinery.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::metrics;
use crate::loss::binary_cross_entropy;
use crate::model::{MilModel, ModelSpec};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::{substream, Rng, Stream};
use crate::types::{BagView, VatConfig};
use crate::vat::{self, ValueRange};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Bags per optimizer step; gradients are averaged over the batch.
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many epochs without validation improvement. `None`
    /// trains for all epochs and keeps the final parameters.
    pub patience: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::histopathology()
    }
}

impl TrainConfig {
    /// Adam, learning rate 1e-4, one bag per step.
    pub fn histopathology() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-4,
            batch_size: 1,
            epochs: 30,
            patience: None,
            seed: 0,
        }
    }

    /// RMSprop on the digit bags.
    pub fn mnist_bags() -> Self {
        Self {
            optimizer: OptimizerKind::Rmsprop,
            learning_rate: 5e-4,
            ..Self::histopathology()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Teacher,
    Student,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Teacher => "teacher",
            Stage::Student => "student",
        })
    }
}

/// Mean loss terms over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub terms: BTreeMap<String, f64>,
    pub total: f64,
    pub valid_auroc: Option<f64>,
    pub valid_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub stage: Stage,
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were returned (0 = initialisation).
    pub selected_epoch: usize,
}

impl TrainHistory {
    pub fn totals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.total).collect()
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: MilModel,
    pub history: TrainHistory,
}

/// Loss terms produced by one bag.
pub(crate) struct StepTerms {
    pub terms: Vec<(&'static str, f64)>,
    pub total: f64,
}

/// Positive-class bag probabilities, evaluated in parallel.
pub fn bag_scores(model: &MilModel, bags: &[BagView<'_>]) -> Result<Vec<f64>> {
    bags.par_iter()
        .map(|b| model.predict_bag(*b).map(|p| p.positive_prob()))
        .collect()
}

/// Validation bag AUROC (if both classes are present) and mean bag BCE.
fn validate(model: &MilModel, valid: &[BagView<'_>]) -> Result<(Option<f64>, Option<f64>)> {
    if valid.is_empty() {
        return Ok((None, None));
    }
    let scores = bag_scores(model, valid)?;
    let labels: Vec<bool> = valid.iter().map(|b| b.label).collect();
    let auroc = match metrics::auroc(&scores, &labels) {
        Ok(a) => Some(a),
        Err(Error::SingleClass) => None,
        Err(e) => return Err(e),
    };
    let mut loss = 0.0;
    for (s, &y) in scores.iter().zip(&labels) {
        loss += binary_cross_entropy(if y { 1.0 } else { 0.0 }, *s)?;
    }
    Ok((auroc, Some(loss / valid.len() as f64)))
}

/// Shared epoch loop. `step` evaluates one training bag (by index), adds its
/// gradient into the accumulator and returns its loss terms.
pub(crate) fn run_epochs<F>(
    mut model: MilModel,
    train_len: usize,
    valid: &[BagView<'_>],
    cfg: &TrainConfig,
    stage: Stage,
    mut step: F,
) -> Result<Trained>
where
    F: FnMut(&MilModel, usize, &mut Rng, &mut MilModel) -> Result<StepTerms>,
{
    cfg.validate()?;
    if train_len == 0 {
        return Err(Error::Empty("training set"));
    }
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, &model);
    let mut shuffle_rng = substream(cfg.seed, Stream::Shuffle);
    let mut perturb_rng = substream(cfg.seed, Stream::Perturbation);
    let mut grads = model.zeros_like();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<((f64, f64), usize, MilModel)> = None;
    let mut since_best = 0usize;
    let mut order: Vec<usize> = (0..train_len).collect();

    for epoch in 1..=cfg.epochs {
        if crate::interrupted() {
            return Err(Error::Interrupted);
        }
        order.shuffle(&mut shuffle_rng);
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.fill_zero();
            for &i in batch {
                let t = step(&model, i, &mut perturb_rng, &mut grads)?;
                if !t.total.is_finite() {
                    return Err(Error::Training(format!("{stage} loss became non-finite at epoch {epoch}")));
                }
                total += t.total;
                for (name, v) in t.terms {
                    *sums.entry(name.to_string()).or_default() += v;
                }
            }
            if batch.len() > 1 {
                grads.scale(1.0 / batch.len() as f64);
            }
            optimizer.step(&mut model, &grads);
        }
        let n = train_len as f64;
        sums.values_mut().for_each(|v| *v /= n);
        let (valid_auroc, valid_loss) = validate(&model, valid)?;
        log::debug!("{stage} epoch {epoch}: loss {:.5} valid auroc {valid_auroc:?}", total / n);
        records.push(EpochRecord {
            stage,
            epoch,
            terms: sums,
            total: total / n,
            valid_auroc,
            valid_loss,
        });

        if let (Some(patience), Some(vl)) = (cfg.patience, valid_loss) {
            // Rank by validation AUROC, ties broken by lower validation loss.
            let key = (valid_auroc.unwrap_or(0.0), -vl);
            let improved = best.as_ref().is_none_or(|(k, _, _)| key > *k);
            if improved {
                best = Some((key, epoch, model.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    break;
                }
            }
        }
    }

    let (model, selected_epoch) = match best {
        Some((_, epoch, m)) => (m, epoch),
        None => {
            let last = records.last().map_or(0, |r| r.epoch);
            (model, last)
        }
    };
    Ok(Trained {
        model,
        history: TrainHistory {
            stage,
            records,
            selected_epoch,
        },
    })
}

/// Trains an attention MIL teacher with the bag-level regularizer. With only
/// `lambda_c` active this is plain attention MIL.
pub fn train_teacher(
    spec: &ModelSpec,
    train: &[BagView<'_>],
    valid: &[BagView<'_>],
    vat_cfg: &VatConfig,
    cfg: &TrainConfig,
) -> Result<Trained> {
    vat_cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let init = MilModel::new(spec.clone(), &mut substream(cfg.seed, Stream::Init))?;
    let range = ValueRange::of_bags(train.iter().copied())?;
    run_epochs(init, train.len(), valid, cfg, Stage::Teacher, |model, i, rng, grads| {
        let bag = train[i];
        let set = vat::sampled_set(bag, vat_cfg, range, rng)?;
        let loss = vat::vat_loss_and_grad(model, bag, set.as_ref(), vat_cfg, grads)?;
        Ok(StepTerms {
            terms: loss.named(),
            total: loss.total,
        })
    })
}
