use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use instlabel_core::checkpoint::{Checkpoint, CheckpointMeta};
use instlabel_core::config::{ExperimentConfig, RESOLVED_FILE};
use instlabel_core::data::{load_digit_pool, Dataset, DatasetSource, DigitSource};
use instlabel_core::distill::train_student;
use instlabel_core::eval::crossval::{self, CvOptions};
use instlabel_core::eval::suite::{score, views};
use instlabel_core::eval::sweep::{SweepOptions, POINTS_DIR, SERIES_FILE};
use instlabel_core::eval::table::reports_tsv;
use instlabel_core::eval::{run_cross_validation, run_vat_sweep, worker_pool, Level, MetricReport, ModelTag, Provenance, CODE_VERSION};
use instlabel_core::train::{train_teacher, Stage, TrainConfig, Trained};
use instlabel_core::{Error, InstanceShape};

use crate::{Common, LevelArg, MissingInput, Refused, StageArg};

pub const RUNS_DIR: &str = "runs";
pub const DATA_DIR: &str = "data";
pub const EVAL_DIR: &str = "evaluation";
pub const CROSSVAL_DIR: &str = "crossval";
pub const SWEEP_DIR: &str = "sweep";

struct Setup {
    cfg: ExperimentConfig,
    hash: String,
}

impl Setup {
    fn new(common: &Common) -> Result<Self> {
        let mut cfg = ExperimentConfig::load(&common.config)?;
        if let Some(out) = &common.out {
            cfg.output_dir = out.clone();
        }
        if !common.seed.is_empty() {
            cfg.training.seeds = common.seed.clone();
        }
        let hash = cfg.hash();
        Ok(Self { cfg, hash })
    }

    fn out(&self, sub: &str) -> PathBuf {
        self.cfg.output_dir.join(sub)
    }

    fn provenance(&self) -> Provenance {
        Provenance {
            config_hash: self.hash.clone(),
            seeds: self.cfg.training.seeds.clone(),
            code_version: CODE_VERSION.to_string(),
        }
    }

    fn dataset(&self) -> Result<Dataset> {
        let path = self.cfg.manifest_path();
        if !path.exists() {
            return Err(MissingInput { what: "dataset manifest (run `prepare` first)", path }.into());
        }
        Ok(Dataset::load(&path)?)
    }

    fn write_resolved(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        let text = format!("# config_hash = \"{}\"\n# code_version = \"{CODE_VERSION}\"\n{}", self.hash, self.cfg.to_toml()?);
        write(&dir.join(RESOLVED_FILE), text)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn refuse_existing(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Refused(path.to_path_buf()).into());
    }
    Ok(())
}

fn instance_shape(dataset: &Dataset) -> Result<InstanceShape> {
    Ok(dataset.bags.first().ok_or(Error::Empty("dataset"))?.instance_shape())
}

/// Requested levels; without `--level`, instance level is included only when
/// the data carries instance labels.
fn resolve_levels(level: Option<LevelArg>, dataset: &Dataset) -> Result<Vec<Level>> {
    let has_labels = dataset.manifest.has_instance_labels();
    match level {
        Some(l) => {
            let levels = l.levels();
            if levels.contains(&Level::Instance) && !has_labels {
                return Err(Error::invalid(
                    "instance-level evaluation requested, but the dataset has no instance labels; use --level bag",
                )
                .into());
            }
            Ok(levels)
        }
        None if has_labels => Ok(vec![Level::Bag, Level::Instance]),
        None => {
            log::warn!("dataset has no instance labels; evaluating bag level only");
            Ok(vec![Level::Bag])
        }
    }
}

pub fn prepare(common: &Common) -> Result<()> {
    let setup = Setup::new(common)?;
    let source = setup
        .cfg
        .dataset
        .source
        .as_ref()
        .ok_or_else(|| Error::config("prepare needs a [dataset.source] section"))?;
    let dir = setup.out(DATA_DIR);
    let manifest = dir.join(instlabel_core::data::MANIFEST_FILE);
    refuse_existing(&manifest, common.force)?;
    let d = &setup.cfg.dataset;
    let dataset = worker_pool(common.workers)?.install(|| Dataset::build(source, d.folds, d.fold_seed, d.split))?;
    let path = dataset.save(&dir)?;
    setup.write_resolved(&setup.cfg.output_dir)?;
    let m = &dataset.manifest;
    println!(
        "prepared {} bags (positive fraction {:.3}, mean bag size {:.2}, instance labels: {}) -> {}",
        m.records.len(),
        m.positive_fraction(),
        m.mean_bag_size(),
        if m.has_instance_labels() { "yes" } else { "no" },
        path.display()
    );
    Ok(())
}

fn run_dir(setup: &Setup, seed: u64) -> PathBuf {
    setup.out(RUNS_DIR).join(format!("seed{seed}"))
}

fn checkpoint_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("{stage}.json"))
}

fn log_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("{stage}_log.jsonl"))
}

fn save_trained(dir: &Path, trained: &Trained, meta: CheckpointMeta) -> Result<Checkpoint> {
    let stage = meta.stage;
    let ck = Checkpoint::new(&trained.model, meta);
    ck.save(&checkpoint_path(dir, stage))?;
    write(&log_path(dir, stage), trained.history.to_jsonl())?;
    Ok(ck)
}

pub fn train(common: &Common, stage: StageArg, fold: usize) -> Result<()> {
    let setup = Setup::new(common)?;
    let dataset = setup.dataset()?;
    let split = dataset.manifest.fold_split(fold)?;
    let train = dataset.select(&split.train);
    let valid = dataset.select(&split.valid);
    let (train, valid) = (views(&train), views(&valid));
    let spec = setup.cfg.model_spec(instance_shape(&dataset)?)?;
    let pool = worker_pool(common.workers)?;
    let stages: Vec<Stage> = match stage {
        StageArg::Teacher => vec![Stage::Teacher],
        StageArg::Student => vec![Stage::Student],
        StageArg::Both => vec![Stage::Teacher, Stage::Student],
    };
    for &seed in &setup.cfg.training.seeds {
        let dir = run_dir(&setup, seed);
        for &s in &stages {
            refuse_existing(&checkpoint_path(&dir, s), common.force)?;
        }
        let teacher_path = checkpoint_path(&dir, Stage::Teacher);
        if !stages.contains(&Stage::Teacher) && !teacher_path.exists() {
            return Err(MissingInput { what: "teacher checkpoint (train --stage teacher first)", path: teacher_path }.into());
        }
        setup.write_resolved(&dir)?;
        let meta = |stage, epoch, teacher_hash, temperature| CheckpointMeta {
            stage,
            seed,
            epoch,
            config_hash: setup.hash.clone(),
            code_version: CODE_VERSION.to_string(),
            teacher_hash,
            temperature,
        };
        for &s in &stages {
            match s {
                Stage::Teacher => {
                    let cfg = TrainConfig { seed, ..setup.cfg.training.teacher.clone() };
                    let t = pool.install(|| train_teacher(&spec, &train, &valid, &setup.cfg.vat, &cfg))?;
                    let ck = save_trained(&dir, &t, meta(Stage::Teacher, t.history.selected_epoch, None, None))?;
                    println!("seed {seed}: teacher {} (epoch {})", ck.parameter_hash, t.history.selected_epoch);
                }
                Stage::Student => {
                    let teacher_ck = Checkpoint::load(&teacher_path)?;
                    let teacher = teacher_ck.model()?;
                    let cfg = TrainConfig { seed, ..setup.cfg.training.student.clone() };
                    let distill = &setup.cfg.distill;
                    let t = pool.install(|| train_student(&teacher, &train, &valid, distill, &cfg))?;
                    let m = meta(Stage::Student, t.history.selected_epoch, Some(teacher_ck.parameter_hash.clone()), Some(distill.tau));
                    let ck = save_trained(&dir, &t, m)?;
                    println!("seed {seed}: student {} from teacher {}", ck.parameter_hash, teacher_ck.parameter_hash);
                }
            }
        }
    }
    Ok(())
}

fn tag_of(stage: Stage) -> ModelTag {
    match stage {
        Stage::Teacher => ModelTag::Teacher,
        Stage::Student => ModelTag::Student,
    }
}

fn render_reports(reports: &[MetricReport], prov: &Provenance) -> String {
    let mut out = format!(
        "evaluation (threshold 0.5; config {}, seeds {:?}, version {})\n",
        prov.config_hash, prov.seeds, prov.code_version
    );
    let _ = writeln!(out, "{:>6} {:<9} {:<9} {:>8} {:>8} {:>8} {:>8}", "seed", "model", "level", "count", "Accuracy", "F1", "AUROC");
    for r in reports {
        let auc = r.auroc.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(
            out,
            "{:>6} {:<9} {:<9} {:>8} {:>8.4} {:>8.4} {:>8}",
            r.seed,
            r.model.as_str(),
            r.level.to_string(),
            r.count,
            r.accuracy,
            r.f1,
            auc
        );
    }
    out
}

pub fn evaluate(common: &Common, checkpoint: Option<&Path>, level: Option<LevelArg>, fold: usize) -> Result<()> {
    let setup = Setup::new(common)?;
    let dataset = setup.dataset()?;
    let levels = resolve_levels(level, &dataset)?;
    let split = dataset.manifest.fold_split(fold)?;
    let test = dataset.select(&split.test);
    let paths: Vec<PathBuf> = match checkpoint {
        Some(p) => vec![p.to_path_buf()],
        None => setup
            .cfg
            .training
            .seeds
            .iter()
            .flat_map(|&s| [Stage::Teacher, Stage::Student].map(|st| checkpoint_path(&run_dir(&setup, s), st)))
            .filter(|p| p.exists())
            .collect(),
    };
    if paths.is_empty() {
        return Err(MissingInput { what: "checkpoints (run `train` first)", path: setup.out(RUNS_DIR) }.into());
    }
    let pool = worker_pool(common.workers)?;
    let mut reports = Vec::new();
    let mut seeds = Vec::new();
    for path in &paths {
        if !path.exists() {
            return Err(MissingInput { what: "checkpoint", path: path.clone() }.into());
        }
        let ck = Checkpoint::load(path)?;
        if ck.meta.config_hash != setup.hash {
            log::warn!("{} was trained with config {}, current config is {}", path.display(), ck.meta.config_hash, setup.hash);
        }
        let model = ck.model()?;
        seeds.push(ck.meta.seed);
        for &l in &levels {
            let (scores, labels) = pool.install(|| score(&model, &test, l))?;
            reports.push(MetricReport::from_scores(fold, ck.meta.seed, tag_of(ck.meta.stage), l, &scores, &labels)?);
        }
    }
    seeds.dedup();
    let prov = Provenance { seeds, ..setup.provenance() };
    let dir = setup.out(EVAL_DIR);
    create_dir(&dir)?;
    write(&dir.join("metrics.tsv"), reports_tsv(&reports, &prov))?;
    let text = render_reports(&reports, &prov);
    write(&dir.join("metrics.txt"), &text)?;
    print!("{text}");
    Ok(())
}

pub fn crossval(common: &Common, level: Option<LevelArg>) -> Result<()> {
    let setup = Setup::new(common)?;
    let dataset = setup.dataset()?;
    let levels = resolve_levels(level, &dataset)?;
    let dir = setup.out(CROSSVAL_DIR);
    refuse_existing(&dir.join(crossval::REPORTS_FILE), common.force)?;
    if common.force {
        remove_dir(&dir.join(crossval::FOLDS_DIR))?;
    }
    setup.write_resolved(&dir)?;
    let suite = setup.cfg.suite(instance_shape(&dataset)?)?;
    let opts = CvOptions {
        levels,
        seeds: setup.cfg.training.seeds.clone(),
        workers: common.workers,
        out_dir: Some(dir.clone()),
        provenance: setup.provenance(),
    };
    let result = run_cross_validation(&dataset, &suite, &opts).context("cross-validation stopped; finished folds are saved")?;
    for t in &result.tables {
        println!("{}", t.render_text(&opts.provenance));
    }
    println!("tables written to {}", dir.display());
    Ok(())
}

fn remove_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

pub fn sweep(common: &Common) -> Result<()> {
    let setup = Setup::new(common)?;
    let cfg = &setup.cfg;
    let digits = match &cfg.dataset.source {
        Some(DatasetSource::MnistBags { digits, .. }) => digits.clone(),
        _ => DigitSource::Bundled,
    };
    let pool = load_digit_pool(&digits)?;
    let spec = cfg.model_spec(pool.shape().ok_or(Error::Empty("digit pool"))?)?;
    let dir = setup.out(SWEEP_DIR);
    refuse_existing(&dir.join(SERIES_FILE), common.force)?;
    if common.force {
        remove_dir(&dir.join(POINTS_DIR))?;
    }
    setup.write_resolved(&dir)?;
    let prov = Provenance { seeds: cfg.sweep.seeds.clone(), ..setup.provenance() };
    let opts = SweepOptions {
        workers: common.workers,
        out_dir: Some(dir.clone()),
        provenance: prov,
    };
    let result = run_vat_sweep(&cfg.sweep, &pool, &spec, &cfg.vat, &cfg.training.teacher, &opts)
        .context("sweep stopped; finished runs are saved")?;
    println!("{:>6} {:>8} {:>7} {:>10} {:>8}", "K", "cond", "N", "AUROC", "std");
    for s in &result.summary {
        println!("{:>6} {:>8} {:>7} {:>10.4} {:>8.4}", s.mean_bag_size, s.condition.as_str(), s.num_bags, s.mean_auroc, s.std_auroc);
    }
    println!("series written to {}", dir.join(SERIES_FILE).display());
    Ok(())
}
