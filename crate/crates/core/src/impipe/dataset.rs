//! Train/val/test splitting and the on-disk phantom dataset.
//!
//! Layout: `<root>/<split>/<id>_{composite,clean,mask}.pgm` plus
//! `<root>/manifest.csv` with columns `id,split,seed`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;

use super::phantom::{generate_phantom, PhantomConfig};
use super::pgm::{read_mask, read_pgm, write_mask, write_pgm};
use super::RawImage;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, indexed_seed, substream};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train: 0.8, val: 0.1, test: 0.1, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle, then round(train*n) / round(val*n) / remainder.
pub fn split_dataset(n_items: usize, spec: &SplitSpec) -> Result<SplitIndices> {
    let fr = [spec.train, spec.val, spec.test];
    if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!("split fractions {fr:?} must be in [0, 1] and sum to 1")));
    }
    let n_train = ((spec.train * n_items as f64).round() as usize).min(n_items);
    let n_val = ((spec.val * n_items as f64).round() as usize).min(n_items - n_train);
    let mut order: Vec<usize> = (0..n_items).collect();
    order.shuffle(&mut substream(spec.seed, "split"));
    let take = |range: std::ops::Range<usize>| {
        let mut v = order[range].to_vec();
        v.sort_unstable();
        v
    };
    Ok(SplitIndices { train: take(0..n_train), val: take(n_train..n_train + n_val), test: take(n_train + n_val..n_items) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Split::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| Error::Invalid(format!("unknown split {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: String,
    pub split: Split,
    pub seed: u64,
}

const MANIFEST: &str = "manifest.csv";

fn sample_path(root: &Path, split: Split, id: &str, kind: &str) -> PathBuf {
    root.join(split.as_str()).join(format!("{id}_{kind}.pgm"))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Generates `count` phantoms of side `size` under `root`.
pub fn write_dataset(root: &Path, count: usize, size: usize, seed: u64, cfg: &PhantomConfig) -> Result<Vec<ManifestRow>> {
    if count == 0 {
        return Err(Error::Invalid("phantom count must be positive".into()));
    }
    let split = split_dataset(count, &SplitSpec { seed: derive_seed(seed, "split"), ..SplitSpec::default() })?;
    let mut which = vec![Split::Train; count];
    for &i in &split.val {
        which[i] = Split::Val;
    }
    for &i in &split.test {
        which[i] = Split::Test;
    }
    for s in Split::ALL {
        create_dir(&root.join(s.as_str()))?;
    }
    let data_seed = derive_seed(seed, "data");
    let mut rows = Vec::with_capacity(count);
    for (i, &split) in which.iter().enumerate() {
        let id = format!("{i:05}");
        let pseed = indexed_seed(data_seed, i as u64);
        let p = generate_phantom(pseed, size, cfg)?;
        write_pgm(sample_path(root, split, &id, "composite"), &p.composite)?;
        write_pgm(sample_path(root, split, &id, "clean"), &p.clean)?;
        write_mask(sample_path(root, split, &id, "mask"), size, size, &p.roi_mask)?;
        rows.push(ManifestRow { id, split, seed: pseed });
    }
    let path = root.join(MANIFEST);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    w.write_record(["id", "split", "seed"]).map_err(|e| csv_error(&path, e))?;
    for r in &rows {
        w.write_record([r.id.as_str(), r.split.as_str(), &r.seed.to_string()]).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestRow>> {
    let path = root.join(MANIFEST);
    let mut r = csv::Reader::from_path(&path).map_err(|e| csv_error(&path, e))?;
    let headers = r.headers().map_err(|e| csv_error(&path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "split", "seed"] {
        return Err(Error::format(&path, format!("expected header id,split,seed, found {}", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(&path, e))?;
        let split = rec[1].parse::<Split>().map_err(|e| Error::format(&path, e.to_string()))?;
        let seed = rec[2].parse::<u64>().map_err(|e| Error::format(&path, format!("bad seed {:?}: {e}", &rec[2])))?;
        rows.push(ManifestRow { id: rec[0].to_string(), split, seed });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub split: Split,
    pub composite: RawImage,
    pub clean: RawImage,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, which: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == which).collect()
    }

    /// Side length shared by every image.
    pub fn size(&self) -> Option<usize> {
        self.samples.first().map(|s| s.composite.width)
    }
}

/// Loads every sample listed in the manifest and checks that shapes agree.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::io(root, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found")));
    }
    let rows = read_manifest(root)?;
    let mut samples = Vec::with_capacity(rows.len());
    for row in rows {
        let composite = read_pgm(sample_path(root, row.split, &row.id, "composite"))?;
        let clean = read_pgm(sample_path(root, row.split, &row.id, "clean"))?;
        let mpath = sample_path(root, row.split, &row.id, "mask");
        let (mw, mh, mask) = read_mask(&mpath)?;
        let (w, h) = (composite.width, composite.height);
        if (clean.width, clean.height) != (w, h) || (mw, mh) != (w, h) {
            return Err(Error::format(mpath, format!("sample {} has mismatched image sizes", row.id)));
        }
        if let Some(first) = samples.first().map(|s: &Sample| (s.composite.width, s.composite.height)) {
            if first != (w, h) {
                return Err(Error::format(root.join(MANIFEST), format!("sample {} is {w}x{h}, expected {}x{}", row.id, first.0, first.1)));
            }
        }
        samples.push(Sample { id: row.id, split: row.split, composite, clean, mask });
    }
    Ok(Dataset { samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_and_partition() {
        let s = split_dataset(10, &SplitSpec::default()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(s, split_dataset(10, &SplitSpec::default()).unwrap());
        assert_ne!(s, split_dataset(10, &SplitSpec { seed: 9, ..SplitSpec::default() }).unwrap());
        let s = split_dataset(200, &SplitSpec::default()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (160, 20, 20));
        assert!(split_dataset(10, &SplitSpec { train: 0.9, ..SplitSpec::default() }).is_err());
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = write_dataset(dir.path(), 10, 16, 3, &PhantomConfig::default()).unwrap();
        assert_eq!(read_manifest(dir.path()).unwrap(), rows);
        let text = std::fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
        assert!(text.starts_with("id,split,seed\n00000,"));
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.samples.len(), 10);
        assert_eq!((ds.split(Split::Train).len(), ds.split(Split::Val).len(), ds.split(Split::Test).len()), (8, 1, 1));
        let r = &rows[4];
        let p = generate_phantom(r.seed, 16, &PhantomConfig::default()).unwrap();
        let s = ds.samples.iter().find(|s| s.id == r.id).unwrap();
        assert_eq!(s.composite, p.composite);
        assert_eq!(s.clean, p.clean);
        assert_eq!(s.mask, p.roi_mask);
        assert!(dir.path().join(r.split.as_str()).join(format!("{}_composite.pgm", r.id)).is_file());
    }

    #[test]
    fn dataset_is_byte_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_dataset(a.path(), 6, 16, 11, &PhantomConfig::default()).unwrap();
        write_dataset(b.path(), 6, 16, 11, &PhantomConfig::default()).unwrap();
        assert_eq!(std::fs::read(a.path().join("manifest.csv")).unwrap(), std::fs::read(b.path().join("manifest.csv")).unwrap());
        for row in read_manifest(a.path()).unwrap() {
            for kind in ["composite", "clean", "mask"] {
                let rel = format!("{}/{}_{kind}.pgm", row.split, row.id);
                assert_eq!(std::fs::read(a.path().join(&rel)).unwrap(), std::fs::read(b.path().join(&rel)).unwrap());
            }
        }
    }

    #[test]
    fn missing_pieces_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let e = load_dataset(&dir.path().join("nope")).unwrap_err();
        assert!(e.to_string().contains("nope"));
        assert!(load_dataset(dir.path()).unwrap_err().to_string().contains("manifest.csv"));
        assert!(write_dataset(dir.path(), 0, 16, 1, &PhantomConfig::default()).is_err());
        assert!(write_dataset(dir.path(), 3, 15, 1, &PhantomConfig::default()).is_err());
    }
}
