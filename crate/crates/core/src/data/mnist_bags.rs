//! Synthetic digit bags: a bag is positive when it holds at least one image of
//! the positive digit.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::digits::DigitPool;
use crate::error::{Error, Result};
use crate::rng::{keyed, Stream};
use crate::types::Bag;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MnistBagsSpec {
    pub num_bags: usize,
    pub mean_bag_size: f64,
    /// Variance (not standard deviation) of the bag-size distribution.
    pub bag_size_variance: f64,
    pub positive_digit: u8,
    pub seed: u64,
}

impl Default for MnistBagsSpec {
    fn default() -> Self {
        Self {
            num_bags: 100,
            mean_bag_size: 10.0,
            bag_size_variance: 5.0,
            positive_digit: 9,
            seed: 0,
        }
    }
}

impl MnistBagsSpec {
    pub fn new(num_bags: usize, mean_bag_size: f64, seed: u64) -> Self {
        Self {
            num_bags,
            mean_bag_size,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_bags == 0 {
            return Err(Error::config("num_bags must be >= 1"));
        }
        if !(self.mean_bag_size >= 1.0 && self.mean_bag_size.is_finite()) {
            return Err(Error::config(format!("mean_bag_size must be >= 1, got {}", self.mean_bag_size)));
        }
        if !(self.bag_size_variance >= 0.0 && self.bag_size_variance.is_finite()) {
            return Err(Error::config("bag_size_variance must be >= 0"));
        }
        if self.positive_digit > 9 {
            return Err(Error::config("positive_digit must be 0..=9"));
        }
        Ok(())
    }
}

pub fn bag_id(seed: u64, index: usize) -> String {
    format!("mnist-s{seed}-{index:05}")
}

/// Draws `spec.num_bags` bags from `pool`. Bag sizes follow
/// `round(Normal(K, variance))` clamped to at least 1 and instances are drawn
/// uniformly with replacement. Each bag uses its own random stream, keyed by
/// the bag id.
pub fn generate_mnist_bags(spec: &MnistBagsSpec, pool: &DigitPool) -> Result<Vec<Bag>> {
    spec.validate()?;
    if pool.is_empty() {
        return Err(Error::Empty("digit pool"));
    }
    let size_dist = Normal::new(spec.mean_bag_size, spec.bag_size_variance.sqrt()).map_err(|e| Error::config(e.to_string()))?;
    (0..spec.num_bags)
        .into_par_iter()
        .map(|i| {
            let id = bag_id(spec.seed, i);
            let mut rng = keyed(spec.seed, Stream::Data, &id);
            let k = size_dist.sample(&mut rng).round().max(1.0) as usize;
            let picks: Vec<usize> = (0..k).map(|_| rng.random_range(0..pool.len())).collect();
            let labels: Vec<bool> = picks.iter().map(|&p| pool.digit(p) == spec.positive_digit).collect();
            let instances = picks.iter().map(|&p| pool.image(p).clone()).collect();
            let label = labels.iter().any(|&l| l);
            Bag::new(id, instances, label, Some(labels))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::digits::bundled_digits;

    #[test]
    fn labels_follow_positive_digit() {
        let pool = bundled_digits().unwrap();
        let bags = generate_mnist_bags(&MnistBagsSpec::new(200, 10.0, 1), &pool).unwrap();
        assert_eq!(bags.len(), 200);
        for b in &bags {
            let inst = b.instance_labels().unwrap();
            assert_eq!(b.label(), inst.iter().any(|&l| l));
        }
        let no_nines = pool.filter(|d| d != 9);
        let bags = generate_mnist_bags(&MnistBagsSpec::new(50, 10.0, 1), &no_nines).unwrap();
        assert!(bags.iter().all(|b| !b.label()));
    }

    #[test]
    fn generation_is_reproducible() {
        let pool = bundled_digits().unwrap();
        let spec = MnistBagsSpec::new(30, 10.0, 7);
        assert_eq!(generate_mnist_bags(&spec, &pool).unwrap(), generate_mnist_bags(&spec, &pool).unwrap());
    }

    #[test]
    fn empty_pool_is_rejected() {
        let pool = DigitPool::new(vec![], vec![]).unwrap();
        assert!(generate_mnist_bags(&MnistBagsSpec::default(), &pool).is_err());
    }
}
