//! On-disk dataset layout: `manifest.json`, `domains.jsonl` and one JSON Lines
//! file per split.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BenchmarkConfig, DatasetSplits, DomainParams, SPLIT_NAMES};
use crate::domain::{validate_sample, BBox, DomainId, FeatureGrid, Sample};
use crate::scalar::Scalar;

const MANIFEST: &str = "manifest.json";
const DOMAINS: &str = "domains.jsonl";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {message}")]
    Schema { file: PathBuf, line: usize, message: String },
}

impl DatasetError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DatasetError::Io { path: path.to_path_buf(), source }
    }

    fn schema(file: &Path, line: usize, message: impl Into<String>) -> Self {
        DatasetError::Schema { file: file.to_path_buf(), line, message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    pub file: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: Option<BenchmarkConfig>,
    /// Declared feature shape `[G, G, F]`.
    pub shape: [usize; 3],
    pub domains: String,
    pub splits: BTreeMap<String, SplitEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Scalar")]
struct SampleRecord<T> {
    image_id: u64,
    domain: usize,
    /// One entry per cell, row-major; each entry holds `F` values.
    features: Vec<Vec<T>>,
    gt_boxes: Vec<BBox<T>>,
}

fn create(path: &Path) -> Result<BufWriter<File>, DatasetError> {
    File::create(path).map(BufWriter::new).map_err(|e| DatasetError::io(path, e))
}

fn write_line<S: Serialize>(w: &mut impl Write, path: &Path, value: &S) -> Result<(), DatasetError> {
    serde_json::to_writer(&mut *w, value).map_err(|e| DatasetError::io(path, std::io::Error::other(e)))?;
    w.write_all(b"\n").map_err(|e| DatasetError::io(path, e))
}

/// Writes every split of `splits` below `dir`, creating it if needed.
pub fn write_dataset<T: Scalar>(
    splits: &DatasetSplits<T>,
    config: Option<&BenchmarkConfig>,
    dir: &Path,
) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(|e| DatasetError::io(dir, e))?;
    let shape = infer_shape(splits);

    let domains_path = dir.join(DOMAINS);
    let mut w = create(&domains_path)?;
    for p in &splits.domain_registry {
        write_line(&mut w, &domains_path, p)?;
    }
    w.flush().map_err(|e| DatasetError::io(&domains_path, e))?;

    let mut entries = BTreeMap::new();
    for name in SPLIT_NAMES {
        let samples = splits.split(name).expect("known split");
        let file = format!("{name}.jsonl");
        let path = dir.join(&file);
        let mut w = create(&path)?;
        for s in samples {
            let rec = SampleRecord {
                image_id: s.image_id,
                domain: s.domain.index,
                features: (0..s.features.cells()).map(|c| s.features.cell(c).to_vec()).collect(),
                gt_boxes: s.gt_boxes.clone(),
            };
            write_line(&mut w, &path, &rec)?;
        }
        w.flush().map_err(|e| DatasetError::io(&path, e))?;
        entries.insert(name.to_string(), SplitEntry { file, count: samples.len() });
    }

    let manifest = Manifest { config: config.cloned(), shape, domains: DOMAINS.to_string(), splits: entries };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| DatasetError::io(&path, e))
}

fn infer_shape<T: Scalar>(splits: &DatasetSplits<T>) -> [usize; 3] {
    SPLIT_NAMES
        .iter()
        .flat_map(|n| splits.split(n).unwrap_or(&[]).first())
        .map(|s| [s.features.grid(), s.features.grid(), s.features.dim()])
        .next()
        .unwrap_or_else(|| {
            let f = splits.domain_registry.first().map_or(0, |p| p.feature_bias.len());
            [0, 0, f]
        })
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>, DatasetError> {
    let f = File::open(path).map_err(|e| DatasetError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| DatasetError::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

/// Reads a dataset written by [`write_dataset`], checking every record.
pub fn read_dataset<T: Scalar>(dir: &Path) -> Result<(DatasetSplits<T>, Manifest), DatasetError> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| DatasetError::io(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| DatasetError::schema(&mpath, e.line(), e.to_string()))?;
    let [g, g2, f] = manifest.shape;
    if g != g2 {
        return Err(DatasetError::schema(&mpath, 1, format!("non-square shape {:?}", manifest.shape)));
    }

    let dpath = dir.join(&manifest.domains);
    let mut registry: Vec<DomainParams<T>> = Vec::new();
    let mut ids: BTreeMap<usize, DomainId> = BTreeMap::new();
    for (line, text) in read_lines(&dpath)? {
        let p: DomainParams<T> =
            serde_json::from_str(&text).map_err(|e| DatasetError::schema(&dpath, line, e.to_string()))?;
        if p.domain.label.is_empty() {
            return Err(DatasetError::schema(&dpath, line, "empty domain label"));
        }
        if ids.insert(p.domain.index, p.domain.clone()).is_some() {
            return Err(DatasetError::schema(&dpath, line, format!("duplicate domain {}", p.domain.index)));
        }
        registry.push(p);
    }

    let mut splits = DatasetSplits {
        official_train: Vec::new(),
        official_val_ood: Vec::new(),
        official_test_ood: Vec::new(),
        id_holdout: Vec::new(),
        mixed_train: Vec::new(),
        mixed_test: Vec::new(),
        domain_registry: registry,
    };
    for name in SPLIT_NAMES {
        let entry = manifest
            .splits
            .get(name)
            .ok_or_else(|| DatasetError::schema(&mpath, 1, format!("missing split {name}")))?;
        let path = dir.join(&entry.file);
        let lines = read_lines(&path)?;
        let mut seen = BTreeSet::new();
        let out = splits.split_mut(name).expect("known split");
        for (line, text) in &lines {
            let rec: SampleRecord<T> =
                serde_json::from_str(text).map_err(|e| DatasetError::schema(&path, *line, e.to_string()))?;
            let domain = ids
                .get(&rec.domain)
                .cloned()
                .ok_or_else(|| DatasetError::schema(&path, *line, format!("unknown domain {}", rec.domain)))?;
            if !seen.insert(rec.image_id) {
                return Err(DatasetError::schema(&path, *line, format!("duplicate image_id {}", rec.image_id)));
            }
            if rec.features.len() != g * g || rec.features.iter().any(|c| c.len() != f) {
                return Err(DatasetError::schema(&path, *line, format!("features do not match shape [{g},{g},{f}]")));
            }
            let features =
                FeatureGrid::from_vec(g, f, rec.features.into_iter().flatten().collect()).expect("shape checked");
            let s = Sample { domain, image_id: rec.image_id, features, gt_boxes: rec.gt_boxes };
            validate_sample(&s, g, f).map_err(|v| DatasetError::schema(&path, *line, v.to_string()))?;
            out.push(s);
        }
        if lines.len() != entry.count {
            return Err(DatasetError::schema(
                &path,
                lines.last().map_or(0, |l| l.0),
                format!("expected {} records, found {} (truncated?)", entry.count, lines.len()),
            ));
        }
    }
    Ok((splits, manifest))
}
