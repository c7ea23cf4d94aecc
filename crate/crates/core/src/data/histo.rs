//! Slide-image datasets supplied as a directory.
//!
//! `<root>/labels.csv` lists one image per line as `image,label[,annotations]`
//! with an optional header row. `image` and `annotations` are paths relative
//! to `<root>`; `label` is `0` or `1`. An annotation file holds one `x,y`
//! nucleus centre (pixel coordinates) per line. A patch is a positive
//! instance when it contains at least one centre.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::patches::{extract_patches_with_origin, load_image, PatchSpec};
use crate::error::{Error, Result};
use crate::types::Bag;

pub const LABELS_FILE: &str = "labels.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct SlideEntry {
    pub image: PathBuf,
    pub label: bool,
    pub annotations: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct SlideBag {
    pub bag: Bag,
    pub entry: SlideEntry,
}

pub fn read_labels(root: &Path) -> Result<Vec<SlideEntry>> {
    let path = root.join(LABELS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if i == 0 && fields.get(1).is_some_and(|f| *f == "label") {
            continue;
        }
        if !(2..=3).contains(&fields.len()) {
            return Err(Error::parse(&path, i + 1, "expected image,label[,annotations]"));
        }
        let label = match fields[1] {
            "0" => false,
            "1" => true,
            other => return Err(Error::parse(&path, i + 1, format!("label must be 0 or 1, got '{other}'"))),
        };
        out.push(SlideEntry {
            image: PathBuf::from(fields[0]),
            label,
            annotations: fields.get(2).filter(|f| !f.is_empty()).map(PathBuf::from),
        });
    }
    if out.is_empty() {
        return Err(Error::Empty("labels.csv lists no images"));
    }
    Ok(out)
}

/// Nucleus centres as `(x, y)` pairs.
pub fn read_centres(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split(',').map(|f| f.trim().parse::<f64>());
        match (it.next(), it.next(), it.next()) {
            (Some(Ok(x)), Some(Ok(y)), None) => out.push((x, y)),
            _ if i == 0 => continue,
            _ => return Err(Error::parse(path, i + 1, "expected two numbers x,y")),
        }
    }
    Ok(out)
}

fn bag_id(image: &Path) -> String {
    image.file_stem().map_or_else(|| image.display().to_string(), |s| s.to_string_lossy().into_owned())
}

pub fn ingest_slide(root: &Path, entry: &SlideEntry, spec: &PatchSpec) -> Result<SlideBag> {
    let image = load_image(&root.join(&entry.image))?;
    let patches = extract_patches_with_origin(&image, spec)?;
    if patches.is_empty() {
        return Err(Error::invalid(format!("{}: every patch was filtered as background", entry.image.display())));
    }
    let instance_labels = match &entry.annotations {
        Some(a) => {
            let centres = read_centres(&root.join(a))?;
            Some(
                patches
                    .iter()
                    .map(|p| centres.iter().any(|&(x, y)| p.contains(y, x, spec.patch_size)))
                    .collect(),
            )
        }
        None => None,
    };
    let bag = Bag::new(bag_id(&entry.image), patches.into_iter().map(|p| p.instance).collect(), entry.label, instance_labels)?;
    Ok(SlideBag { bag, entry: entry.clone() })
}

/// Tiles every listed slide, in parallel, preserving the listing order.
pub fn ingest_directory(root: &Path, spec: &PatchSpec) -> Result<Vec<SlideBag>> {
    spec.validate()?;
    let entries = read_labels(root)?;
    entries.par_iter().map(|e| ingest_slide(root, e, spec)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slide_directory_ingestion() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = image::RgbImage::from_pixel(60, 54, image::Rgb([255, 255, 255]));
        for y in 0..27 {
            for x in 0..54 {
                img.put_pixel(x, y, image::Rgb([120, 40, 90]));
            }
        }
        img.save(dir.path().join("s1.png")).unwrap();
        std::fs::write(dir.path().join("s1.csv"), "x,y\n30.5,3\n").unwrap();
        std::fs::write(dir.path().join(LABELS_FILE), "image,label,annotations\ns1.png,1,s1.csv\n").unwrap();
        let bags = ingest_directory(dir.path(), &PatchSpec::colon()).unwrap();
        assert_eq!(bags.len(), 1);
        let b = &bags[0].bag;
        assert_eq!(b.id(), "s1");
        assert_eq!(b.len(), 2);
        assert_eq!(b.instance_labels(), Some(&[false, true][..]));
    }

    #[test]
    fn bad_label_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(LABELS_FILE), "a.png,1\nb.png,yes\n").unwrap();
        assert!(matches!(read_labels(dir.path()), Err(Error::Parse { line: 2, .. })));
    }
}
