//! Line-oriented dataset manifests.
//!
//! The first line is a JSON header; every following line is one JSON bag
//! record. The header's `checksum` is the hex SHA-256 of all record lines,
//! each terminated by `\n`, exactly as they appear in the file.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::archive;
use super::folds::{fold_split, make_folds, FoldSplit, SplitFractions};
use super::mnist_bags::MnistBagsSpec;
use super::patches::PatchSpec;
use crate::error::{Error, Result};
use crate::types::Bag;

pub const FORMAT: &str = "instlabel-manifest/1";

/// Where the digit images for synthetic bags come from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DigitSource {
    /// The 8×8 digit set compiled into the crate.
    #[default]
    Bundled,
    Idx { images: PathBuf, labels: PathBuf },
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    MnistBags {
        spec: MnistBagsSpec,
        #[serde(default)]
        digits: DigitSource,
    },
    Histopathology {
        root: PathBuf,
        patch: PatchSpec,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub format: String,
    pub source: DatasetSource,
    pub split: SplitFractions,
    pub folds: usize,
    pub fold_seed: u64,
    pub bags: usize,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub bag_id: String,
    /// Image path for slide bags, `seed=<s>;index=<i>` for synthetic bags.
    pub source: String,
    pub label: bool,
    pub instances: usize,
    pub has_instance_labels: bool,
    /// Annotation file the instance labels were derived from, if any.
    pub annotations: Option<String>,
    /// Archive path relative to the manifest's directory.
    pub archive: String,
    pub fold: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub records: Vec<ManifestRecord>,
}

fn record_lines(records: &[ManifestRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
        .collect()
}

fn checksum(lines: &str) -> String {
    hex::encode(Sha256::digest(lines.as_bytes()))
}

impl DatasetManifest {
    /// Builds a manifest and assigns stratified folds.
    pub fn new(source: DatasetSource, mut records: Vec<ManifestRecord>, folds: usize, fold_seed: u64, split: SplitFractions) -> Result<Self> {
        split.validate()?;
        let labels: Vec<bool> = records.iter().map(|r| r.label).collect();
        let assignment = make_folds(&labels, folds, fold_seed)?;
        for (r, f) in records.iter_mut().zip(assignment) {
            r.fold = f;
        }
        let header = ManifestHeader {
            format: FORMAT.to_string(),
            source,
            split,
            folds,
            fold_seed,
            bags: records.len(),
            checksum: checksum(&record_lines(&records)),
        };
        Ok(Self { header, records })
    }

    pub fn labels(&self) -> Vec<bool> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn fold_assignments(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.fold).collect()
    }

    pub fn fold_split(&self, fold: usize) -> Result<FoldSplit> {
        fold_split(&self.fold_assignments(), &self.labels(), fold, &self.header.split, self.header.fold_seed)
    }

    pub fn positive_fraction(&self) -> f64 {
        self.records.iter().filter(|r| r.label).count() as f64 / self.records.len().max(1) as f64
    }

    pub fn mean_bag_size(&self) -> f64 {
        self.records.iter().map(|r| r.instances as f64).sum::<f64>() / self.records.len().max(1) as f64
    }

    pub fn has_instance_labels(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.has_instance_labels)
    }

    pub fn to_text(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        out.push_str(&record_lines(&self.records));
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_text().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::parse(path, 1, "empty manifest"))?
            .map_err(|e| Error::io(path, e))?;
        let header: ManifestHeader = serde_json::from_str(&first).map_err(|e| Error::parse(path, 1, e.to_string()))?;
        if header.format != FORMAT {
            return Err(Error::parse(path, 1, format!("unsupported manifest format '{}'", header.format)));
        }
        let mut body = String::new();
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 2, e.to_string()))?;
            if rec.fold >= header.folds {
                return Err(Error::parse(path, i + 2, format!("fold {} out of range", rec.fold)));
            }
            body.push_str(&line);
            body.push('\n');
            records.push(rec);
        }
        if records.len() != header.bags {
            return Err(Error::parse(path, 1, format!("header lists {} bags, found {}", header.bags, records.len())));
        }
        if checksum(&body) != header.checksum {
            return Err(Error::parse(path, 1, "checksum mismatch"));
        }
        Ok(Self { header, records })
    }

    /// Loads every bag archive, resolving paths against `base` (normally the
    /// manifest's directory), and checks them against their records.
    pub fn load_bags(&self, base: &Path) -> Result<Vec<Bag>> {
        use rayon::prelude::*;
        self.records
            .par_iter()
            .map(|r| {
                let path = base.join(&r.archive);
                let bag = archive::load_bag(&path)?;
                if bag.id() != r.bag_id || bag.label() != r.label || bag.len() != r.instances {
                    return Err(Error::invalid(format!("archive {} does not match its manifest record", path.display())));
                }
                Ok(bag)
            })
            .collect()
    }
}
