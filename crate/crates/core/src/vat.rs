//! Bag-level consistency regularization for the teacher.
//!
//! Three perturbed copies of each training bag are built: one with extra
//! uniform-noise instances, one with every instance jittered inside a small
//! norm ball, and one or more with a random subset of instances removed. The
//! teacher loss combines supervised cross entropy on the clean bag with
//! cross entropy between the clean prediction (held fixed) and the noisy and
//! jittered predictions, plus the Bernoulli entropy of the pruned predictions.

use ndarray::{Array2, Array3};
use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{self, binary_cross_entropy, check_prob, cross_entropy_grad, entropy_grad, logit_grad, positive_prob, xlogy};
use crate::model::MilModel;
use crate::rng::Rng;
use crate::types::{Bag, BagView, Instance, PerturbNorm, VatConfig};

/// Closed interval of instance values, taken over the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueRange {
    pub lo: f64,
    pub hi: f64,
}

impl ValueRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::invalid(format!("invalid value range [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn unit() -> Self {
        Self { lo: 0.0, hi: 1.0 }
    }

    /// Smallest range covering every instance of every bag.
    pub fn of_bags<'a>(bags: impl IntoIterator<Item = BagView<'a>>) -> Result<Self> {
        let (lo, hi) = bags
            .into_iter()
            .flat_map(|b| b.instances.iter())
            .map(Instance::min_max)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (a, b)| (lo.min(a), hi.max(b)));
        Self::new(lo, hi)
    }
}

fn derived_id(bag: BagView<'_>, suffix: &str) -> String {
    format!("{}#{suffix}", bag.id)
}

/// Appends `count` instances with every element drawn i.i.d. from
/// `U[range.lo, range.hi]`. The first K instances are the originals.
pub fn inject_noise_instances(bag: BagView<'_>, count: usize, range: ValueRange, rng: &mut Rng) -> Result<Bag> {
    if count < 1 {
        return Err(Error::invalid("noise instance count must be >= 1"));
    }
    if bag.is_empty() {
        return Err(Error::Empty("bag"));
    }
    let shape = bag.instances[0].data().dim();
    let mut instances = bag.instances.to_vec();
    for _ in 0..count {
        let data = if range.lo == range.hi {
            Array3::from_elem(shape, range.lo)
        } else {
            Array3::from_shape_simple_fn(shape, || rng.random_range(range.lo..=range.hi))
        };
        instances.push(Instance::new(data)?);
    }
    Bag::new(derived_id(bag, "noise"), instances, bag.label, None)
}

/// One random offset with norm at most `delta`.
///
/// L2: a uniformly random direction scaled by a radius drawn from
/// `U[0, delta]`. Linf: every element from `U[-delta, delta]`.
pub fn sample_offset(len: usize, delta: f64, norm: PerturbNorm, rng: &mut Rng) -> Vec<f64> {
    match norm {
        PerturbNorm::Linf => (0..len).map(|_| rng.random_range(-delta..=delta)).collect(),
        PerturbNorm::L2 => {
            let mut dir: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
            let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let radius = rng.random_range(0.0..=delta);
            if n == 0.0 {
                return vec![0.0; len];
            }
            dir.iter_mut().for_each(|v| *v *= radius / n);
            dir
        }
    }
}

/// Adds an independent norm-ball offset to every instance, then clips into
/// `range`. Clipping can only move a value back towards the original, so the
/// final offset still lies inside the ball.
pub fn jitter_instances(bag: BagView<'_>, delta: f64, norm: PerturbNorm, range: ValueRange, rng: &mut Rng) -> Result<Bag> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::invalid(format!("delta must be > 0, got {delta}")));
    }
    let instances = bag
        .instances
        .iter()
        .map(|x| {
            let offset = sample_offset(x.data().len(), delta, norm, rng);
            let mut data = x.data().clone();
            for (v, o) in data.iter_mut().zip(offset) {
                *v = (*v + o).clamp(range.lo.min(*v), range.hi.max(*v));
            }
            Instance::new(data)
        })
        .collect::<Result<Vec<_>>>()?;
    Bag::new(derived_id(bag, "jitter"), instances, bag.label, None)
}

/// A bag restricted to a random subset of its instances.
#[derive(Debug, Clone)]
pub struct PrunedBag {
    pub bag: Bag,
    /// Source indices of the kept instances, ascending.
    pub kept: Vec<usize>,
    /// Set when the source had a single instance and nothing was dropped.
    pub unchanged: bool,
}

/// Number of instances kept when dropping `drop_fraction` of `k`.
pub fn pruned_size(k: usize, drop_fraction: f64) -> usize {
    let target = (k as f64 * (1.0 - drop_fraction)).round() as usize;
    target.clamp(1, k.saturating_sub(1).max(1))
}

pub fn drop_instances(bag: BagView<'_>, drop_fraction: f64, rng: &mut Rng) -> Result<PrunedBag> {
    if !(drop_fraction > 0.0 && drop_fraction < 1.0) {
        return Err(Error::invalid(format!("drop_fraction must lie in (0, 1), got {drop_fraction}")));
    }
    let k = bag.len();
    if k == 0 {
        return Err(Error::Empty("bag"));
    }
    if k == 1 {
        return Ok(PrunedBag {
            bag: Bag::new(derived_id(bag, "pruned"), bag.instances.to_vec(), bag.label, None)?,
            kept: vec![0],
            unchanged: true,
        });
    }
    let keep = pruned_size(k, drop_fraction);
    let mut kept = index::sample(rng, k, keep).into_vec();
    kept.sort_unstable();
    let instances = kept.iter().map(|&i| bag.instances[i].clone()).collect();
    Ok(PrunedBag {
        bag: Bag::new(derived_id(bag, "pruned"), instances, bag.label, None)?,
        kept,
        unchanged: false,
    })
}

/// Bernoulli entropy `-p ln p - (1 - p) ln(1 - p)` with `0 ln 0 = 0`.
pub fn conditional_entropy(p: f64) -> Result<f64> {
    check_prob("p", p)?;
    Ok(-xlogy(p, p) - xlogy(1.0 - p, 1.0 - p))
}

/// The three perturbed versions of one source bag.
#[derive(Debug, Clone)]
pub struct PerturbedBagSet {
    /// Source instances followed by noise instances.
    pub noisy: Bag,
    pub jittered: Bag,
    pub pruned: Vec<PrunedBag>,
    pub source_len: usize,
}

impl PerturbedBagSet {
    pub fn noise_count(&self) -> usize {
        self.noisy.len() - self.source_len
    }
}

pub fn perturb(bag: BagView<'_>, cfg: &VatConfig, range: ValueRange, rng: &mut Rng) -> Result<PerturbedBagSet> {
    cfg.validate()?;
    let (min, max) = cfg.noise_count.bounds(bag.len());
    let count = rng.random_range(min..=max);
    let noisy = inject_noise_instances(bag, count, range, rng)?;
    let jittered = jitter_instances(bag, cfg.delta, cfg.norm, range, rng)?;
    let pruned = (0..cfg.entropy_realizations)
        .map(|_| drop_instances(bag, cfg.drop_fraction, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(PerturbedBagSet {
        noisy,
        jittered,
        pruned,
        source_len: bag.len(),
    })
}

/// Unweighted term values and the weighted total of the teacher objective.
/// Terms whose weight is zero are not evaluated and read as zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VatLoss {
    pub supervised: f64,
    pub noise: f64,
    pub jitter: f64,
    pub entropy: f64,
    pub total: f64,
}

impl VatLoss {
    pub fn weighted_terms(&self, cfg: &VatConfig) -> [f64; 4] {
        [
            cfg.lambda_c * self.supervised,
            cfg.lambda_n * self.noise,
            cfg.lambda_delta * self.jitter,
            cfg.lambda_e * self.entropy,
        ]
    }

    pub fn named(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("supervised", self.supervised),
            ("noise", self.noise),
            ("jitter", self.jitter),
            ("entropy", self.entropy),
        ]
    }
}

/// Teacher objective for one bag, sampling fresh perturbations from `rng`.
pub fn vat_loss(teacher: &MilModel, bag: BagView<'_>, cfg: &VatConfig, range: ValueRange, rng: &mut Rng) -> Result<VatLoss> {
    let set = sampled_set(bag, cfg, range, rng)?;
    evaluate(teacher, bag, set.as_ref(), cfg, None)
}

/// Teacher objective for one bag with precomputed perturbations, adding its
/// parameter gradient into `grads`.
pub fn vat_loss_and_grad(
    teacher: &MilModel,
    bag: BagView<'_>,
    set: Option<&PerturbedBagSet>,
    cfg: &VatConfig,
    grads: &mut MilModel,
) -> Result<VatLoss> {
    evaluate(teacher, bag, set, cfg, Some(grads))
}

/// Perturbations for one bag; `None` when every regularization weight is zero.
pub fn sampled_set(bag: BagView<'_>, cfg: &VatConfig, range: ValueRange, rng: &mut Rng) -> Result<Option<PerturbedBagSet>> {
    cfg.validate()?;
    if cfg.is_baseline() {
        return Ok(None);
    }
    perturb(bag, cfg, range, rng).map(Some)
}

fn evaluate(
    teacher: &MilModel,
    bag: BagView<'_>,
    set: Option<&PerturbedBagSet>,
    cfg: &VatConfig,
    grads: Option<&mut MilModel>,
) -> Result<VatLoss> {
    cfg.validate()?;
    let k = bag.len();
    if k == 0 {
        return Err(Error::Empty("bag"));
    }
    let use_noise = cfg.lambda_n > 0.0;
    let use_jitter = cfg.lambda_delta > 0.0;
    let use_entropy = cfg.lambda_e > 0.0;
    if (use_noise || use_jitter || use_entropy) && set.is_none() {
        return Err(Error::config("regularization weights are set but no perturbations were supplied"));
    }
    if let Some(s) = set {
        if s.source_len != k {
            return Err(Error::shape(format!("perturbations of a {k}-instance bag"), s.source_len));
        }
    }

    // One extractor pass over [clean | noise | jittered]; the pruned bags
    // reuse clean rows since the extractor is applied per instance.
    let mut stacked: Vec<Instance> = bag.instances.to_vec();
    let noise_rows = match (use_noise, set) {
        (true, Some(s)) => {
            let start = stacked.len();
            stacked.extend_from_slice(&s.noisy.instances()[k..]);
            let mut rows: Vec<usize> = (0..k).collect();
            rows.extend(start..stacked.len());
            Some(rows)
        }
        _ => None,
    };
    let jitter_rows = match (use_jitter, set) {
        (true, Some(s)) => {
            let start = stacked.len();
            stacked.extend_from_slice(s.jittered.instances());
            Some((start..stacked.len()).collect::<Vec<_>>())
        }
        _ => None,
    };

    let (features, ext_cache) = teacher.extract_batch(&stacked)?;
    let clean_rows: Vec<usize> = (0..k).collect();
    let mut heads = Vec::new();

    let (clean_logits, clean_cache) = teacher.head_forward(&features, &clean_rows)?;
    let p_clean = positive_prob(clean_logits, 1.0);
    let y = if bag.label { 1.0 } else { 0.0 };
    let mut out = VatLoss {
        supervised: binary_cross_entropy(y, p_clean)?,
        ..VatLoss::default()
    };
    heads.push((clean_cache, cfg.lambda_c * cross_entropy_grad(y, p_clean, 1.0)));

    if let Some(rows) = &noise_rows {
        let (logits, cache) = teacher.head_forward(&features, rows)?;
        let q = positive_prob(logits, 1.0);
        out.noise = binary_cross_entropy(p_clean, q)?;
        heads.push((cache, cfg.lambda_n * cross_entropy_grad(p_clean, q, 1.0)));
    }
    if let Some(rows) = &jitter_rows {
        let (logits, cache) = teacher.head_forward(&features, rows)?;
        let q = positive_prob(logits, 1.0);
        out.jitter = binary_cross_entropy(p_clean, q)?;
        heads.push((cache, cfg.lambda_delta * cross_entropy_grad(p_clean, q, 1.0)));
    }
    if let (true, Some(s)) = (use_entropy, set) {
        let r = s.pruned.len() as f64;
        let mut acc = 0.0;
        for pruned in &s.pruned {
            let (logits, cache) = teacher.head_forward(&features, &pruned.kept)?;
            let p = positive_prob(logits, 1.0);
            acc += conditional_entropy(p)?;
            let u = logits[1] - logits[0];
            heads.push((cache, cfg.lambda_e * entropy_grad(u, p) / r));
        }
        out.entropy = acc / r;
    }
    out.total = out.weighted_terms(cfg).iter().sum();

    if let Some(grads) = grads {
        let mut dfeatures = Array2::<f64>::zeros(features.dim());
        for (cache, du) in &heads {
            if *du != 0.0 {
                teacher.head_backward(cache, logit_grad(*du), &mut dfeatures, grads);
            }
        }
        teacher.extractor_backward(&ext_cache, dfeatures, grads);
    }
    Ok(out)
}

/// Loss terms evaluated from explicit output probabilities; mirrors
/// [`vat_loss`] for callers that already hold predictions.
pub fn combine_terms(cfg: &VatConfig, label: bool, p_clean: f64, p_noisy: f64, p_jitter: f64, p_pruned: &[f64]) -> Result<VatLoss> {
    let y = if label { 1.0 } else { 0.0 };
    let mut out = VatLoss {
        supervised: binary_cross_entropy(y, p_clean)?,
        noise: loss::binary_cross_entropy(p_clean, p_noisy)?,
        jitter: loss::binary_cross_entropy(p_clean, p_jitter)?,
        entropy: 0.0,
        total: 0.0,
    };
    if !p_pruned.is_empty() {
        let mut acc = 0.0;
        for &p in p_pruned {
            acc += conditional_entropy(p)?;
        }
        out.entropy = acc / p_pruned.len() as f64;
    }
    out.total = out.weighted_terms(cfg).iter().sum();
    Ok(out)
}
