//! k-fold cross-validation of baseline, teacher and student.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{Level, MetricReport};
use super::suite::{evaluate_suite, train_suite, SuiteConfig};
use super::table::{build_table, reports_tsv, CvTable};
use super::{worker_pool, Provenance};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::train::TrainHistory;

pub const FOLDS_DIR: &str = "folds";
pub const REPORTS_FILE: &str = "metrics.tsv";

#[derive(Debug, Clone)]
pub struct CvOptions {
    pub levels: Vec<Level>,
    pub seeds: Vec<u64>,
    pub workers: usize,
    /// Directory for per-fold results and final tables. Existing fold files
    /// with a matching config hash are reused.
    pub out_dir: Option<PathBuf>,
    pub provenance: Provenance,
}

/// Persisted outcome of one (seed, fold) job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub config_hash: String,
    pub seed: u64,
    pub fold: usize,
    pub reports: Vec<MetricReport>,
    pub histories: Vec<TrainHistory>,
}

#[derive(Debug, Clone)]
pub struct CvResult {
    pub reports: Vec<MetricReport>,
    pub tables: Vec<CvTable>,
    pub folds: Vec<FoldResult>,
}

fn fold_path(dir: &Path, seed: u64, fold: usize) -> PathBuf {
    dir.join(FOLDS_DIR).join(format!("seed{seed}_fold{fold}.json"))
}

fn load_cached(path: &Path, hash: &str) -> Option<FoldResult> {
    let text = std::fs::read_to_string(path).ok()?;
    let r: FoldResult = serde_json::from_str(&text).ok()?;
    (r.config_hash == hash).then_some(r)
}

fn run_fold(dataset: &Dataset, cfg: &SuiteConfig, opts: &CvOptions, seed: u64, fold: usize) -> Result<FoldResult> {
    if let Some(dir) = &opts.out_dir {
        if let Some(r) = load_cached(&fold_path(dir, seed, fold), &opts.provenance.config_hash) {
            log::info!("seed {seed} fold {fold}: reusing saved result");
            return Ok(r);
        }
    }
    if crate::interrupted() {
        return Err(Error::Interrupted);
    }
    let split = dataset.manifest.fold_split(fold)?;
    let job_seed = derive_seed(seed, &format!("fold-{fold}"));
    let suite = train_suite(&dataset.select(&split.train), &dataset.select(&split.valid), cfg, job_seed)?;
    let reports = evaluate_suite(&suite, &dataset.select(&split.test), &opts.levels, fold, seed)?;
    let result = FoldResult {
        config_hash: opts.provenance.config_hash.clone(),
        seed,
        fold,
        reports,
        histories: vec![suite.baseline.history, suite.teacher.history, suite.student.history],
    };
    if let Some(dir) = &opts.out_dir {
        let path = fold_path(dir, seed, fold);
        let json = serde_json::to_string_pretty(&result).expect("fold results serialize");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    }
    log::info!("seed {seed} fold {fold}: done");
    Ok(result)
}

/// Runs every (seed, fold) job, at most `opts.workers` at a time, and builds
/// one table per requested level. Jobs that finish are saved even when
/// another job fails.
pub fn run_cross_validation(dataset: &Dataset, cfg: &SuiteConfig, opts: &CvOptions) -> Result<CvResult> {
    cfg.validate()?;
    if opts.seeds.is_empty() {
        return Err(Error::config("at least one seed is required"));
    }
    if opts.levels.contains(&Level::Instance) && !dataset.manifest.has_instance_labels() {
        return Err(Error::invalid("instance-level evaluation requested but the dataset has no instance labels"));
    }
    let k = dataset.manifest.header.folds;
    if let Some(dir) = &opts.out_dir {
        let d = dir.join(FOLDS_DIR);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let jobs: Vec<(u64, usize)> = opts.seeds.iter().flat_map(|&s| (0..k).map(move |f| (s, f))).collect();
    let outcomes: Vec<Result<FoldResult>> =
        worker_pool(opts.workers)?.install(|| jobs.par_iter().map(|&(s, f)| run_fold(dataset, cfg, opts, s, f)).collect());
    let mut folds = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        folds.push(o?);
    }
    let reports: Vec<MetricReport> = folds.iter().flat_map(|f| f.reports.iter().cloned()).collect();
    let tables: Vec<CvTable> = opts.levels.iter().map(|&l| build_table(&reports, l, k)).collect();
    if let Some(dir) = &opts.out_dir {
        write_outputs(dir, &reports, &tables, &opts.provenance)?;
    }
    Ok(CvResult { reports, tables, folds })
}

pub fn write_outputs(dir: &Path, reports: &[MetricReport], tables: &[CvTable], prov: &Provenance) -> Result<()> {
    let write = |name: String, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write(REPORTS_FILE.to_string(), reports_tsv(reports, prov))?;
    for t in tables {
        write(format!("table_{}.tsv", t.level), t.to_tsv())?;
        write(format!("table_{}.txt", t.level), t.render_text(prov))?;
    }
    Ok(())
}
