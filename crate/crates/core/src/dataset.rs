//! Labelled event datasets: balanced synthetic generation, the on-disk layout
//! (`.bin` event files plus `manifest.csv`), and content hashing.
//!
//! On disk a dataset is a directory holding `manifest.csv` with the columns
//! `path,label,width,height` and one event file per row. Paths are relative to
//! the directory; their first component (`train/` or `test/`) names the split.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::codec::{decode_stream, encode_stream};
use crate::error::{Error, Result};
use crate::events::{halve_frequency, normalize_times, EventStream};
use crate::net::Sample;
use crate::seed::derive_seed;
use crate::synth::{synth_sample, SceneConfig, ShapeClass};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const MANIFEST_HEADER: &str = "path,label,width,height";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Size and scene settings of a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub train: usize,
    pub test: usize,
    /// Template for every scene; the shape class is overwritten per sample.
    pub scene: SceneConfig,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train: 500,
            test: 200,
            scene: SceneConfig::default(),
            seed: 0,
        }
    }
}

/// A labelled stream with raw microsecond timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSample {
    pub stream: EventStream,
    pub label: usize,
}

/// Both splits of a dataset in memory, with raw timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub train: Vec<RawSample>,
    pub test: Vec<RawSample>,
}

/// Both splits, time-normalized and ready for a classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Content hash of the encoded dataset (see [`RawDataset::hash`]).
    pub hash: String,
}

/// Class-balanced synthetic dataset: sample `i` of a split shows shape class
/// `i mod 4`, and each sample has its own derived seed.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<RawDataset> {
    cfg.scene.validate()?;
    let classes = ShapeClass::ALL.len();
    let make = |offset: usize, count: usize| -> Result<Vec<RawSample>> {
        (0..count)
            .into_par_iter()
            .map(|i| {
                let scene = SceneConfig {
                    shape_class: ShapeClass::ALL[i % classes],
                    ..cfg.scene.clone()
                };
                let (stream, label) = synth_sample(&scene, derive_seed(cfg.seed, (offset + i) as u64))?;
                Ok(RawSample { stream, label })
            })
            .collect()
    };
    Ok(RawDataset {
        train: make(0, cfg.train)?,
        test: make(cfg.train, cfg.test)?,
    })
}

fn named_rows(split: Split, samples: &[RawSample]) -> impl Iterator<Item = (String, &RawSample)> {
    samples
        .iter()
        .enumerate()
        .map(move |(i, s)| (format!("{}/{i:05}.bin", split.dir()), s))
}

impl RawDataset {
    fn rows(&self) -> impl Iterator<Item = (String, &RawSample)> {
        named_rows(Split::Train, &self.train).chain(named_rows(Split::Test, &self.test))
    }

    fn manifest(&self) -> String {
        let mut out = format!("{MANIFEST_HEADER}\n");
        for (path, s) in self.rows() {
            writeln!(out, "{path},{},{},{}", s.label, s.stream.width, s.stream.height).unwrap();
        }
        out
    }

    /// SHA-256 over the manifest followed by every encoded event file, in
    /// manifest order; equal to [`hash_dataset_dir`] of the written directory.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.manifest().as_bytes());
        for (_, s) in self.rows() {
            h.update(encode_stream(&s.stream)?);
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Writes the event files and manifest under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for split in [Split::Train, Split::Test] {
            fs::create_dir_all(dir.join(split.dir()))?;
        }
        for (path, s) in self.rows() {
            fs::write(dir.join(&path), encode_stream(&s.stream)?)?;
        }
        fs::write(dir.join(MANIFEST_FILE), self.manifest())?;
        Ok(())
    }

    /// Normalizes every stream's timestamps.
    pub fn normalized(&self) -> Result<Dataset> {
        let norm = |samples: &[RawSample]| -> Result<Vec<Sample>> {
            samples
                .par_iter()
                .map(|s| {
                    Ok(Sample {
                        stream: normalize_times(&s.stream)?,
                        label: s.label,
                    })
                })
                .collect()
        };
        Ok(Dataset {
            train: norm(&self.train)?,
            test: norm(&self.test)?,
            hash: self.hash()?,
        })
    }
}

/// One row of `manifest.csv`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
    pub width: u16,
    pub height: u16,
}

impl ManifestEntry {
    pub fn split(&self) -> Option<Split> {
        match self.path.components().next()?.as_os_str().to_str()? {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
        return Err(Error::Format(format!("manifest must start with `{MANIFEST_HEADER}`")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = || Error::Format(format!("manifest line {}: `{line}`", i + 2));
            let cols: Vec<&str> = line.trim().split(',').collect();
            let [path, label, width, height] = cols.as_slice() else {
                return Err(bad());
            };
            Ok(ManifestEntry {
                path: PathBuf::from(path),
                label: label.parse().map_err(|_| bad())?,
                width: width.parse().map_err(|_| bad())?,
                height: height.parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    parse_manifest(&fs::read_to_string(dir.join(MANIFEST_FILE))?)
}

/// Reads one split of a dataset directory with raw timestamps.
pub fn read_split(dir: &Path, split: Split) -> Result<Vec<RawSample>> {
    read_manifest(dir)?
        .into_par_iter()
        .filter(|e| e.split() == Some(split))
        .map(|e| {
            let stream = decode_stream(&fs::read(dir.join(&e.path))?, e.width, e.height)?;
            Ok(RawSample { stream, label: e.label })
        })
        .collect()
}

pub fn read_dataset(dir: &Path) -> Result<RawDataset> {
    Ok(RawDataset {
        train: read_split(dir, Split::Train)?,
        test: read_split(dir, Split::Test)?,
    })
}

/// SHA-256 over `manifest.csv` and the listed files in manifest order.
pub fn hash_dataset_dir(dir: &Path) -> Result<String> {
    let manifest = fs::read(dir.join(MANIFEST_FILE))?;
    let entries = parse_manifest(std::str::from_utf8(&manifest).map_err(|_| Error::Format("manifest is not UTF-8".into()))?)?;
    let mut h = Sha256::new();
    h.update(&manifest);
    for e in entries {
        h.update(fs::read(dir.join(&e.path))?);
    }
    Ok(hex::encode(h.finalize()))
}

/// The same samples with the first half of each window stretched to the full
/// window (half the relative motion frequency). Samples with no events in the
/// first half are dropped.
pub fn halve_dataset(samples: &[Sample]) -> Vec<Sample> {
    samples
        .iter()
        .filter_map(|s| {
            halve_frequency(&s.stream).ok().map(|stream| Sample {
                stream,
                label: s.label,
            })
        })
        .collect()
}
