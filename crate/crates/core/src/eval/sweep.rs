//! Teacher bag AUROC with and without the regularizer over a grid of
//! training-set sizes and mean bag sizes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::auroc;
use super::suite::{bag_level, views};
use super::{worker_pool, Provenance};
use crate::data::{generate_mnist_bags, DigitPool, MnistBagsSpec};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::rng::derive_seed;
use crate::train::{train_teacher, TrainConfig};
use crate::types::{Bag, VatConfig};

pub const SERIES_FILE: &str = "sweep_series.tsv";
pub const POINTS_FILE: &str = "sweep_points.tsv";
pub const POINTS_DIR: &str = "points";

#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    pub workers: usize,
    /// Directory for per-run results and the final series. Saved runs with a
    /// matching config hash are reused.
    pub out_dir: Option<PathBuf>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub bag_counts: Vec<usize>,
    pub mean_bag_sizes: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Size of the fixed evaluation set shared by every grid point.
    pub validation_bags: usize,
    pub validation_mean_bag_size: f64,
    /// Share of the digit pool reserved for the evaluation bags.
    pub held_out_fraction: f64,
    pub bag_size_variance: f64,
    pub positive_digit: u8,
    pub data_seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            bag_counts: vec![50, 75, 100, 200, 500],
            mean_bag_sizes: vec![10.0, 20.0],
            seeds: vec![1, 2, 3],
            validation_bags: 1000,
            validation_mean_bag_size: 10.0,
            held_out_fraction: 0.4,
            bag_size_variance: 5.0,
            positive_digit: 9,
            data_seed: 0,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bag_counts.is_empty() || self.mean_bag_sizes.is_empty() || self.seeds.is_empty() {
            return Err(Error::config("sweep needs at least one bag count, mean bag size and seed"));
        }
        if self.validation_bags == 0 {
            return Err(Error::config("validation_bags must be >= 1"));
        }
        if !(self.held_out_fraction > 0.0 && self.held_out_fraction < 1.0) {
            return Err(Error::config("held_out_fraction must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Vat,
    NoVat,
}

impl Condition {
    pub fn as_str(&self) -> &'static str {
        match self {
            Condition::Vat => "vat",
            Condition::NoVat => "no_vat",
        }
    }
}

impl std::str::FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "vat" => Ok(Condition::Vat),
            "no_vat" => Ok(Condition::NoVat),
            other => Err(format!("unknown condition '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SavedPoint {
    config_hash: String,
    point: SweepPoint,
}

fn point_path(dir: &Path, n: usize, k: f64, seed: u64, condition: Condition) -> PathBuf {
    dir.join(POINTS_DIR).join(format!("n{n}_k{k}_seed{seed}_{}.json", condition.as_str()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub num_bags: usize,
    pub mean_bag_size: f64,
    pub seed: u64,
    pub condition: Condition,
    pub auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub mean_bag_size: f64,
    pub condition: Condition,
    pub num_bags: usize,
    pub mean_auroc: f64,
    pub std_auroc: f64,
    pub runs: usize,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub summary: Vec<SweepSummary>,
    /// Identifiers of the shared evaluation bags.
    pub validation_ids: Vec<String>,
}

impl SweepResult {
    pub fn mean(&self, num_bags: usize, mean_bag_size: f64, condition: Condition) -> Option<f64> {
        self.summary
            .iter()
            .find(|s| s.num_bags == num_bags && s.mean_bag_size == mean_bag_size && s.condition == condition)
            .map(|s| s.mean_auroc)
    }

    /// Plot-ready series: one line per (K, condition, N).
    pub fn series_tsv(&self, prov: &Provenance) -> String {
        let mut out = format!("# config_hash={} code_version={}\n", prov.config_hash, prov.code_version);
        out.push_str("mean_bag_size\tcondition\tnum_bags\tmean_auroc\tstd_auroc\truns\n");
        for s in &self.summary {
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}\t{}", s.mean_bag_size, s.condition.as_str(), s.num_bags, s.mean_auroc, s.std_auroc, s.runs);
        }
        out
    }

    pub fn points_tsv(&self, prov: &Provenance) -> String {
        let mut out = String::from("config_hash\tcode_version\tmean_bag_size\tnum_bags\tseed\tcondition\tauroc\n");
        for p in &self.points {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                prov.config_hash,
                prov.code_version,
                p.mean_bag_size,
                p.num_bags,
                p.seed,
                p.condition.as_str(),
                p.auroc
            );
        }
        out
    }

    pub fn write(&self, dir: &Path, prov: &Provenance) -> Result<()> {
        for (name, text) in [(SERIES_FILE, self.series_tsv(prov)), (POINTS_FILE, self.points_tsv(prov))] {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

fn summarize(points: &[SweepPoint]) -> Vec<SweepSummary> {
    let mut keys: Vec<(u64, Condition, usize)> = points.iter().map(|p| (p.mean_bag_size.to_bits(), p.condition, p.num_bags)).collect();
    keys.sort_by(|a, b| f64::from_bits(a.0).total_cmp(&f64::from_bits(b.0)).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    keys.dedup();
    keys.into_iter()
        .map(|(k, condition, n)| {
            let vals: Vec<f64> = points
                .iter()
                .filter(|p| p.mean_bag_size.to_bits() == k && p.condition == condition && p.num_bags == n)
                .map(|p| p.auroc)
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
            SweepSummary {
                mean_bag_size: f64::from_bits(k),
                condition,
                num_bags: n,
                mean_auroc: m,
                std_auroc: var.sqrt(),
                runs: vals.len(),
            }
        })
        .collect()
}

/// The shared evaluation bags, drawn from the held-out part of the pool.
pub fn validation_set(cfg: &SweepConfig, held_out: &DigitPool) -> Result<Vec<Bag>> {
    let spec = MnistBagsSpec {
        num_bags: cfg.validation_bags,
        mean_bag_size: cfg.validation_mean_bag_size,
        bag_size_variance: cfg.bag_size_variance,
        positive_digit: cfg.positive_digit,
        seed: derive_seed(cfg.data_seed, "sweep-validation"),
    };
    generate_mnist_bags(&spec, held_out)
}

/// For each grid point and seed trains one teacher with `vat` and one with
/// only the supervised term, and scores both on the shared evaluation set.
pub fn run_vat_sweep(
    cfg: &SweepConfig,
    pool: &DigitPool,
    model: &ModelSpec,
    vat: &VatConfig,
    train: &TrainConfig,
    opts: &SweepOptions,
) -> Result<SweepResult> {
    cfg.validate()?;
    vat.validate()?;
    if let Some(dir) = &opts.out_dir {
        let d = dir.join(POINTS_DIR);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let hash = &opts.provenance.config_hash;
    let (train_pool, held_out) = pool.split(cfg.held_out_fraction, cfg.data_seed)?;
    let valid = validation_set(cfg, &held_out)?;
    let valid_refs: Vec<&Bag> = valid.iter().collect();

    let mut jobs = Vec::new();
    for &k in &cfg.mean_bag_sizes {
        for &n in &cfg.bag_counts {
            for &seed in &cfg.seeds {
                for condition in [Condition::Vat, Condition::NoVat] {
                    jobs.push((k, n, seed, condition));
                }
            }
        }
    }
    let run = |&(k, n, seed, condition): &(f64, usize, u64, Condition)| -> Result<SweepPoint> {
        let saved = opts.out_dir.as_ref().map(|d| point_path(d, n, k, seed, condition));
        if let Some(text) = saved.as_ref().and_then(|p| std::fs::read_to_string(p).ok()) {
            if let Ok(s) = serde_json::from_str::<SavedPoint>(&text) {
                if &s.config_hash == hash {
                    return Ok(s.point);
                }
            }
        }
        if crate::interrupted() {
            return Err(Error::Interrupted);
        }
        let key = format!("sweep-n{n}-k{k}");
        let spec = MnistBagsSpec {
            num_bags: n,
            mean_bag_size: k,
            bag_size_variance: cfg.bag_size_variance,
            positive_digit: cfg.positive_digit,
            seed: derive_seed(seed, &format!("{key}-data")),
        };
        let bags = generate_mnist_bags(&spec, &train_pool)?;
        let refs: Vec<&Bag> = bags.iter().collect();
        let vat_cfg = match condition {
            Condition::Vat => vat.clone(),
            Condition::NoVat => VatConfig::baseline(),
        };
        let train_cfg = TrainConfig {
            seed: derive_seed(seed, &format!("{key}-train")),
            ..train.clone()
        };
        let teacher = train_teacher(model, &views(&refs), &[], &vat_cfg, &train_cfg)?;
        let (scores, labels) = bag_level(&teacher.model, &valid_refs)?;
        log::info!("sweep K={k} N={n} seed={seed} {}: done", condition.as_str());
        let point = SweepPoint {
            num_bags: n,
            mean_bag_size: k,
            seed,
            condition,
            auroc: auroc(&scores, &labels)?,
        };
        if let Some(p) = saved {
            let s = SavedPoint { config_hash: hash.clone(), point: point.clone() };
            std::fs::write(&p, serde_json::to_string_pretty(&s).expect("points serialize")).map_err(|e| Error::io(&p, e))?;
        }
        Ok(point)
    };
    let outcomes: Vec<Result<SweepPoint>> = worker_pool(opts.workers)?.install(|| jobs.par_iter().map(run).collect());
    let points = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    let result = SweepResult {
        summary: summarize(&points),
        points,
        validation_ids: valid.iter().map(|b| b.id().to_string()).collect(),
    };
    if let Some(dir) = &opts.out_dir {
        result.write(dir, &opts.provenance)?;
    }
    Ok(result)
}
