use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability threshold used to turn positive-class scores into labels.
pub const DECISION_THRESHOLD: f64 = 0.5;

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{a} labels"), b));
    }
    if a == 0 {
        return Err(Error::Empty("labels"));
    }
    Ok(())
}

pub fn binarize(scores: &[f64]) -> Vec<bool> {
    scores.iter().map(|&s| s >= DECISION_THRESHOLD).collect()
}

pub fn accuracy(preds: &[bool], labels: &[bool]) -> Result<f64> {
    check_lengths(labels.len(), preds.len())?;
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Harmonic mean of precision and recall; 0 when both are undefined or zero.
pub fn f1_score(preds: &[bool], labels: &[bool]) -> Result<f64> {
    check_lengths(labels.len(), preds.len())?;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &y) in preds.iter().zip(labels) {
        match (p, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    if tp == 0 || denom == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / denom as f64)
}

/// Area under the ROC curve as the normalised Mann-Whitney statistic, with
/// tied scores counted as half a win. Fails with [`Error::SingleClass`] when
/// only one class is present.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(labels.len(), scores.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("scores contain NaN"));
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Midranks over tie groups (1-based).
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                pos_rank_sum += rank;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    let u = pos_rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Bag,
    Instance,
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Level::Bag => "bag",
            Level::Instance => "instance",
        })
    }
}

impl std::str::FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "bag" => Ok(Level::Bag),
            "instance" => Ok(Level::Instance),
            other => Err(format!("unknown level '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelTag {
    Baseline,
    Teacher,
    Student,
}

impl ModelTag {
    pub const ALL: [ModelTag; 3] = [ModelTag::Baseline, ModelTag::Teacher, ModelTag::Student];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelTag::Baseline => "baseline",
            ModelTag::Teacher => "teacher",
            ModelTag::Student => "student",
        }
    }
}

impl std::fmt::Display for ModelTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fold: usize,
    pub seed: u64,
    pub model: ModelTag,
    pub level: Level,
    pub accuracy: f64,
    pub f1: f64,
    /// `None` when the evaluated set holds a single class.
    pub auroc: Option<f64>,
    pub count: usize,
}

impl MetricReport {
    /// Scores are positive-class probabilities, thresholded at
    /// [`DECISION_THRESHOLD`] for accuracy and F1.
    pub fn from_scores(fold: usize, seed: u64, model: ModelTag, level: Level, scores: &[f64], labels: &[bool]) -> Result<Self> {
        let preds = binarize(scores);
        let auroc = match auroc(scores, labels) {
            Ok(a) => Some(a),
            Err(Error::SingleClass) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            fold,
            seed,
            model,
            level,
            accuracy: accuracy(&preds, labels)?,
            f1: f1_score(&preds, labels)?,
            auroc,
            count: labels.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        let y = [true, true, false, false];
        assert_eq!(accuracy(&y, &y).unwrap(), 1.0);
        let not: Vec<bool> = y.iter().map(|v| !v).collect();
        assert_eq!(accuracy(&not, &y).unwrap(), 0.0);
        assert_eq!(accuracy(&[true, false, false, false], &y).unwrap(), 0.75);
        assert!(accuracy(&[true], &y).is_err());
    }

    #[test]
    fn f1_examples() {
        let y = [true, true, false, false];
        assert_eq!(f1_score(&y, &y).unwrap(), 1.0);
        assert_eq!(f1_score(&[false; 4], &y).unwrap(), 0.0);
        assert_eq!(f1_score(&[true, false, true, false], &y).unwrap(), 0.5);
    }

    #[test]
    fn auroc_examples() {
        let y = [false, false, true, true];
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &y).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 4], &y).unwrap(), 0.5);
        assert!((auroc(&[0.1, 0.4, 0.35, 0.8], &y).unwrap() - 0.75).abs() < 1e-12);
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(Error::SingleClass)));
        assert_eq!(Error::SingleClass.code(), "E_SINGLE_CLASS");
    }

    #[test]
    fn report_skips_auroc_for_one_class() {
        let r = MetricReport::from_scores(0, 1, ModelTag::Teacher, Level::Instance, &[0.7, 0.2], &[false, false]).unwrap();
        assert_eq!(r.auroc, None);
        assert_eq!(r.accuracy, 0.5);
    }
}
