//! Bag datasets: synthetic digit bags and tiled slide images.

pub mod archive;
pub mod digits;
pub mod folds;
pub mod histo;
pub mod manifest;
pub mod mnist_bags;
pub mod patches;

use std::path::{Path, PathBuf};

pub use digits::{bundled_digits, load_mnist_idx, DigitPool};
pub use folds::{fold_split, make_folds, FoldSplit, SplitFractions};
pub use manifest::{DatasetManifest, DatasetSource, DigitSource, ManifestRecord};
pub use mnist_bags::{generate_mnist_bags, MnistBagsSpec};
pub use patches::{extract_patches, white_fraction, PatchSpec};

use crate::error::{Error, Result};
use crate::types::Bag;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const BAGS_DIR: &str = "bags";

pub fn load_digit_pool(source: &DigitSource) -> Result<DigitPool> {
    match source {
        DigitSource::Bundled => bundled_digits(),
        DigitSource::Idx { images, labels } => load_mnist_idx(images, labels),
    }
}

/// A dataset held in memory together with its manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub bags: Vec<Bag>,
}

impl Dataset {
    /// Builds the bags described by `source` and assigns folds, without
    /// touching the filesystem beyond reading inputs.
    pub fn build(source: &DatasetSource, folds: usize, fold_seed: u64, split: SplitFractions) -> Result<Self> {
        let (bags, records): (Vec<Bag>, Vec<ManifestRecord>) = match source {
            DatasetSource::MnistBags { spec, digits } => {
                let pool = load_digit_pool(digits)?;
                let bags = generate_mnist_bags(spec, &pool)?;
                bags.into_iter()
                    .enumerate()
                    .map(|(i, b)| {
                        let rec = record(&b, format!("seed={};index={i}", spec.seed), None);
                        (b, rec)
                    })
                    .unzip()
            }
            DatasetSource::Histopathology { root, patch } => histo::ingest_directory(root, patch)?
                .into_iter()
                .map(|s| {
                    let rec = record(
                        &s.bag,
                        s.entry.image.display().to_string(),
                        s.entry.annotations.as_ref().map(|a| a.display().to_string()),
                    );
                    (s.bag, rec)
                })
                .unzip(),
        };
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = records.iter().find(|r| !seen.insert(r.bag_id.as_str())) {
            return Err(Error::invalid(format!("duplicate bag id '{}'", dup.bag_id)));
        }
        let manifest = DatasetManifest::new(source.clone(), records, folds, fold_seed, split)?;
        Ok(Self { manifest, bags })
    }

    /// Writes the manifest and one archive per bag under `out_dir`.
    pub fn save(&self, out_dir: &Path) -> Result<PathBuf> {
        let bag_dir = out_dir.join(BAGS_DIR);
        std::fs::create_dir_all(&bag_dir).map_err(|e| Error::io(&bag_dir, e))?;
        for (bag, rec) in self.bags.iter().zip(&self.manifest.records) {
            archive::save_bag(bag, &out_dir.join(&rec.archive))?;
        }
        let path = out_dir.join(MANIFEST_FILE);
        self.manifest.write(&path)?;
        Ok(path)
    }

    /// Reads a manifest and its bag archives (paths relative to the manifest).
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let bags = manifest.load_bags(base)?;
        Ok(Self { manifest, bags })
    }

    pub fn select(&self, idx: &[usize]) -> Vec<&Bag> {
        idx.iter().map(|&i| &self.bags[i]).collect()
    }
}

fn record(bag: &Bag, source: String, annotations: Option<String>) -> ManifestRecord {
    ManifestRecord {
        bag_id: bag.id().to_string(),
        source,
        label: bag.label(),
        instances: bag.len(),
        has_instance_labels: bag.instance_labels().is_some(),
        annotations,
        archive: format!("{BAGS_DIR}/{}.{}", bag.id(), archive::EXTENSION),
        fold: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_and_load_round_trip() {
        let source = DatasetSource::MnistBags {
            spec: MnistBagsSpec::new(12, 5.0, 4),
            digits: DigitSource::Bundled,
        };
        let ds = Dataset::build(&source, 3, 1, SplitFractions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = ds.save(dir.path()).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back.manifest, ds.manifest);
        assert_eq!(back.bags, ds.bags);
    }
}
