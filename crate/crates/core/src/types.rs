//! Value types shared across the toolkit.
//!
//! A [`Bag`] carries its per-instance ground truth only for evaluation. Every
//! training entry point takes a [`BagView`] instead, which has no way to reach
//! those labels.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when checking that probability-like vectors sum to one.
pub const PROB_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InstanceShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InstanceShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for InstanceShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// One element of a bag: a `(channels, height, width)` array of finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    data: Array3<f64>,
}

impl Instance {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Empty("instance data"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("instance contains non-finite values"));
        }
        Ok(Self { data })
    }

    pub fn from_vec(shape: InstanceShape, values: Vec<f64>) -> Result<Self> {
        let data = Array3::from_shape_vec((shape.channels, shape.height, shape.width), values)
            .map_err(|e| Error::shape(shape, e))?;
        Self::new(data)
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn shape(&self) -> InstanceShape {
        let (c, h, w) = self.data.dim();
        InstanceShape::new(c, h, w)
    }

    /// Values laid out height-major, then width, then channel.
    pub fn to_hwc(&self) -> Vec<f64> {
        let (c, h, w) = self.data.dim();
        let mut out = Vec::with_capacity(c * h * w);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out.push(self.data[[ch, y, x]]);
                }
            }
        }
        out
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// A labelled set of instances. Storage order carries no meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    id: String,
    instances: Vec<Instance>,
    label: bool,
    instance_labels: Option<Vec<bool>>,
}

impl Bag {
    pub fn new(
        id: impl Into<String>,
        instances: Vec<Instance>,
        label: bool,
        instance_labels: Option<Vec<bool>>,
    ) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::Empty("bag must contain at least one instance"));
        }
        let shape = instances[0].shape();
        if let Some(bad) = instances.iter().find(|x| x.shape() != shape) {
            return Err(Error::shape(shape, bad.shape()));
        }
        if let Some(labels) = &instance_labels {
            if labels.len() != instances.len() {
                return Err(Error::shape(
                    format!("{} instance labels", instances.len()),
                    labels.len(),
                ));
            }
        }
        Ok(Self {
            id: id.into(),
            instances,
            label,
            instance_labels,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn label(&self) -> bool {
        self.label
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn instance_shape(&self) -> InstanceShape {
        self.instances[0].shape()
    }

    /// Ground-truth instance labels. Evaluation only.
    pub fn instance_labels(&self) -> Option<&[bool]> {
        self.instance_labels.as_deref()
    }

    /// The weakly supervised view handed to training code.
    pub fn view(&self) -> BagView<'_> {
        BagView {
            id: &self.id,
            instances: &self.instances,
            label: self.label,
        }
    }

    /// Same bag with instances reordered by `order` (a permutation of `0..K`).
    pub fn permuted(&self, order: &[usize]) -> Result<Bag> {
        let k = self.len();
        let mut seen = vec![false; k];
        if order.len() != k || order.iter().any(|&i| i >= k || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::invalid("order is not a permutation of the bag"));
        }
        Ok(Bag {
            id: self.id.clone(),
            instances: order.iter().map(|&i| self.instances[i].clone()).collect(),
            label: self.label,
            instance_labels: self
                .instance_labels
                .as_ref()
                .map(|l| order.iter().map(|&i| l[i]).collect()),
        })
    }
}

/// Borrowed bag without instance-level ground truth.
#[derive(Debug, Clone, Copy)]
pub struct BagView<'a> {
    pub id: &'a str,
    pub instances: &'a [Instance],
    pub label: bool,
}

impl BagView<'_> {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// Per-instance latent vectors, one row per instance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBag {
    features: Array2<f64>,
}

impl FeatureBag {
    pub fn new(features: Array2<f64>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::Empty("feature bag"));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite feature value"));
        }
        Ok(Self { features })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.features
    }
}

/// Gated attention parameters: `w` (L), `u` and `v` (L x d).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub w: Array1<f64>,
    pub u: Array2<f64>,
    pub v: Array2<f64>,
}

impl AttentionParams {
    pub fn new(w: Array1<f64>, u: Array2<f64>, v: Array2<f64>) -> Result<Self> {
        let params = Self { w, u, v };
        params.validate()?;
        Ok(params)
    }

    pub fn zeros(hidden: usize, feature_dim: usize) -> Self {
        Self {
            w: Array1::zeros(hidden),
            u: Array2::zeros((hidden, feature_dim)),
            v: Array2::zeros((hidden, feature_dim)),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.u.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.w.len();
        if l == 0 {
            return Err(Error::config("attention hidden width must be positive"));
        }
        if self.u.dim() != self.v.dim() || self.u.nrows() != l {
            return Err(Error::shape(
                format!("u, v of shape ({l}, d)"),
                format!("u {:?}, v {:?}", self.u.dim(), self.v.dim()),
            ));
        }
        let all = self.w.iter().chain(self.u.iter()).chain(self.v.iter());
        if all.copied().any(|x: f64| !x.is_finite()) {
            return Err(Error::invalid("non-finite attention parameter"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionOutput {
    pub bag_logits: [f64; 2],
    pub bag_probs: [f64; 2],
    pub attention_weights: Vec<f64>,
    /// Probabilities of each instance evaluated as a bag of size one.
    pub instance_probs: Option<Vec<[f64; 2]>>,
}

impl PredictionOutput {
    pub fn positive_prob(&self) -> f64 {
        self.bag_probs[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PerturbNorm {
    #[default]
    L2,
    Linf,
}

/// How many noise instances to append to a bag of size K.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NoiseCount {
    /// Uniform in `[1, ceil(K/2)]`.
    #[default]
    HalfBag,
    /// Uniform in `[min, max]`.
    Range { min: usize, max: usize },
}

impl NoiseCount {
    pub fn bounds(&self, bag_len: usize) -> (usize, usize) {
        match *self {
            NoiseCount::HalfBag => (1, bag_len.div_ceil(2).max(1)),
            NoiseCount::Range { min, max } => (min, max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VatConfig {
    pub lambda_c: f64,
    pub lambda_n: f64,
    pub lambda_delta: f64,
    pub lambda_e: f64,
    /// Radius of the per-instance norm ball, in instance value units.
    pub delta: f64,
    pub norm: PerturbNorm,
    pub noise_count: NoiseCount,
    pub drop_fraction: f64,
    /// Number of pruned bags whose entropies are averaged.
    pub entropy_realizations: usize,
}

impl Default for VatConfig {
    fn default() -> Self {
        Self::colon()
    }
}

impl VatConfig {
    /// Weights used for the colon histopathology set.
    pub fn colon() -> Self {
        Self {
            lambda_c: 1.0,
            lambda_n: 0.5,
            lambda_delta: 0.3,
            lambda_e: 0.3,
            delta: 0.05,
            norm: PerturbNorm::L2,
            noise_count: NoiseCount::HalfBag,
            drop_fraction: 0.3,
            entropy_realizations: 1,
        }
    }

    /// Weights used for the breast histopathology set (five pruned realizations).
    pub fn breast() -> Self {
        Self {
            lambda_c: 0.8,
            lambda_n: 0.8,
            entropy_realizations: 5,
            ..Self::colon()
        }
    }

    /// Settings for the synthetic 8×8 digit bags: a per-pixel jitter ball and
    /// a light entropy weight.
    pub fn mnist_bags() -> Self {
        Self {
            lambda_c: 1.0,
            lambda_n: 0.5,
            lambda_delta: 0.5,
            lambda_e: 0.05,
            delta: 0.3,
            norm: PerturbNorm::Linf,
            ..Self::colon()
        }
    }

    /// Plain attention MIL: only the supervised term is active.
    pub fn baseline() -> Self {
        Self {
            lambda_c: 1.0,
            lambda_n: 0.0,
            lambda_delta: 0.0,
            lambda_e: 0.0,
            ..Self::colon()
        }
    }

    pub fn is_baseline(&self) -> bool {
        self.lambda_n == 0.0 && self.lambda_delta == 0.0 && self.lambda_e == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("lambda_c", self.lambda_c),
            ("lambda_n", self.lambda_n),
            ("lambda_delta", self.lambda_delta),
            ("lambda_e", self.lambda_e),
        ];
        for (name, w) in weights {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(Error::config(format!("delta must be > 0, got {}", self.delta)));
        }
        if !(self.drop_fraction > 0.0 && self.drop_fraction < 1.0) {
            return Err(Error::config(format!(
                "drop_fraction must lie in (0, 1), got {}",
                self.drop_fraction
            )));
        }
        if self.entropy_realizations == 0 {
            return Err(Error::config("entropy_realizations must be >= 1"));
        }
        if let NoiseCount::Range { min, max } = self.noise_count {
            if min == 0 || max < min {
                return Err(Error::config(format!(
                    "noise_count range must satisfy 1 <= min <= max, got [{min}, {max}]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    #[default]
    FromTeacher,
    FromScratch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub gamma_c: f64,
    pub gamma_b: f64,
    pub gamma_i: f64,
    pub gamma_e: f64,
    /// Softmax temperature applied to both models in the distillation terms.
    pub tau: f64,
    pub student_init: StudentInit,
    /// Upper bound on instances used by the instance-level terms per step;
    /// larger bags are uniformly subsampled.
    pub instance_cap: Option<usize>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            gamma_c: 0.3,
            gamma_b: 0.5,
            gamma_i: 0.5,
            gamma_e: 0.1,
            tau: 2.0,
            student_init: StudentInit::FromTeacher,
            instance_cap: None,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("gamma_c", self.gamma_c),
            ("gamma_b", self.gamma_b),
            ("gamma_i", self.gamma_i),
            ("gamma_e", self.gamma_e),
        ];
        for (name, w) in weights {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.instance_cap == Some(0) {
            return Err(Error::config("instance_cap must be >= 1 when set"));
        }
        Ok(())
    }
}
