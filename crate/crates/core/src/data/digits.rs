//! Labelled digit images used to build synthetic bags.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{keyed, Stream};
use crate::types::{Instance, InstanceShape};

static BUNDLED_DIGITS: &[u8] = include_bytes!("../../data/digits.csv.gz");

/// Digit images with their class, all sharing one shape and scaled to [0, 1].
#[derive(Debug, Clone)]
pub struct DigitPool {
    images: Vec<Instance>,
    digits: Vec<u8>,
}

impl DigitPool {
    pub fn new(images: Vec<Instance>, digits: Vec<u8>) -> Result<Self> {
        if images.len() != digits.len() {
            return Err(Error::shape(format!("{} digit labels", images.len()), digits.len()));
        }
        if let Some(first) = images.first() {
            let shape = first.shape();
            if let Some(bad) = images.iter().find(|i| i.shape() != shape) {
                return Err(Error::shape(shape, bad.shape()));
            }
        }
        Ok(Self { images, digits })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn shape(&self) -> Option<InstanceShape> {
        self.images.first().map(Instance::shape)
    }

    pub fn image(&self, i: usize) -> &Instance {
        &self.images[i]
    }

    pub fn digit(&self, i: usize) -> u8 {
        self.digits[i]
    }

    pub fn count_digit(&self, digit: u8) -> usize {
        self.digits.iter().filter(|&&d| d == digit).count()
    }

    /// Keeps the images whose digit satisfies `keep`.
    pub fn filter(&self, keep: impl Fn(u8) -> bool) -> Self {
        let (images, digits) = self
            .images
            .iter()
            .zip(&self.digits)
            .filter(|(_, &d)| keep(d))
            .map(|(i, &d)| (i.clone(), d))
            .unzip();
        Self { images, digits }
    }

    /// Deterministic disjoint split; the second pool receives
    /// `round(len * held_out_fraction)` images.
    pub fn split(&self, held_out_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&held_out_fraction) {
            return Err(Error::config(format!("held-out fraction must lie in [0, 1), got {held_out_fraction}")));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut keyed(seed, Stream::Split, "digit-pool"));
        let n_held = (self.len() as f64 * held_out_fraction).round() as usize;
        let take = |idx: &[usize]| Self {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            digits: idx.iter().map(|&i| self.digits[i]).collect(),
        };
        Ok((take(&order[n_held..]), take(&order[..n_held])))
    }
}

/// The 8×8 handwritten digits set (1797 images) shipped with the crate.
pub fn bundled_digits() -> Result<DigitPool> {
    read_digits_csv(GzDecoder::new(BUNDLED_DIGITS), Path::new("<bundled digits>"), 8, 16.0)
}

/// Reads comma-separated rows of `side * side` pixel values followed by the
/// digit class. Pixels are divided by `max_value`.
pub fn read_digits_csv(reader: impl Read, origin: &Path, side: usize, max_value: f64) -> Result<DigitPool> {
    let shape = InstanceShape::new(1, side, side);
    let mut images = Vec::new();
    let mut digits = Vec::new();
    for (n, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::io(origin, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != shape.len() + 1 {
            return Err(Error::parse(origin, n + 1, format!("expected {} fields, found {}", shape.len() + 1, fields.len())));
        }
        let mut pixels = Vec::with_capacity(shape.len());
        for f in &fields[..shape.len()] {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| Error::parse(origin, n + 1, format!("bad pixel value '{f}'")))?;
            pixels.push((v / max_value).clamp(0.0, 1.0));
        }
        let digit: u8 = fields[shape.len()]
            .trim()
            .parse()
            .ok()
            .filter(|d| *d <= 9)
            .ok_or_else(|| Error::parse(origin, n + 1, "digit label must be 0..=9"))?;
        images.push(Instance::from_vec(shape, pixels)?);
        digits.push(digit);
    }
    DigitPool::new(images, digits)
}

fn open_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::parse(path, 1, "truncated IDX header"))
}

/// Loads an MNIST-style IDX image/label file pair (optionally gzipped).
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<DigitPool> {
    let img = open_maybe_gz(images_path)?;
    let lab = open_maybe_gz(labels_path)?;
    if be_u32(&img, 0, images_path)? != 0x0803 {
        return Err(Error::parse(images_path, 1, "not an IDX image file (magic 0x00000803)"));
    }
    if be_u32(&lab, 0, labels_path)? != 0x0801 {
        return Err(Error::parse(labels_path, 1, "not an IDX label file (magic 0x00000801)"));
    }
    let n = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let n_labels = be_u32(&lab, 4, labels_path)? as usize;
    if n != n_labels {
        return Err(Error::shape(format!("{n} labels"), n_labels));
    }
    let px = rows * cols;
    if img.len() < 16 + n * px || lab.len() < 8 + n {
        return Err(Error::parse(images_path, 1, "IDX payload shorter than its header claims"));
    }
    let shape = InstanceShape::new(1, rows, cols);
    let mut images = Vec::with_capacity(n);
    let mut digits = Vec::with_capacity(n);
    for i in 0..n {
        let start = 16 + i * px;
        let pixels = img[start..start + px].iter().map(|&b| b as f64 / 255.0).collect();
        images.push(Instance::from_vec(shape, pixels)?);
        digits.push(lab[8 + i]);
    }
    DigitPool::new(images, digits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_set_loads() {
        let pool = bundled_digits().unwrap();
        assert_eq!(pool.len(), 1797);
        assert_eq!(pool.shape(), Some(InstanceShape::new(1, 8, 8)));
        assert!((170..190).contains(&pool.count_digit(9)));
        let (lo, hi) = (0..pool.len()).map(|i| pool.image(i).min_max()).fold((1.0f64, 0.0f64), |a, b| (a.0.min(b.0), a.1.max(b.1)));
        assert_eq!((lo, hi), (0.0, 1.0));
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let pool = bundled_digits().unwrap();
        let (a, b) = pool.split(0.4, 3).unwrap();
        assert_eq!(a.len() + b.len(), pool.len());
        assert_eq!(b.len(), 719);
        let (a2, _) = pool.split(0.4, 3).unwrap();
        assert_eq!(a.images, a2.images);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let text = "0,0,0,0,1\n0,0,x,0,1\n";
        match read_digits_csv(text.as_bytes(), Path::new("t.csv"), 2, 1.0) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        img.extend([0, 255, 51, 0, 255, 255, 255, 255]);
        let lab = vec![0, 0, 8, 1, 0, 0, 0, 2, 9, 4];
        std::fs::write(dir.path().join("i"), img).unwrap();
        std::fs::write(dir.path().join("l"), lab).unwrap();
        let pool = load_mnist_idx(&dir.path().join("i"), &dir.path().join("l")).unwrap();
        assert_eq!(pool.len(), 2);
        assert_eq!(pool.digit(0), 9);
        assert_eq!(pool.image(0).data()[[0, 1, 0]], 0.2);
    }
}
