//! Dataset directory format: `features.bin` (magic + version + rows + dim
//! + f32 payload), `labels.bin` (version + rows + u32 class ids aligned
//! with feature rows), and `splits.txt` (`<class_id> <base|novel_val|
//! novel_test>` lines). Values are stored as float32 and widened to double
//! on load; `load_features` inverts `save_features` exactly at the byte
//! level.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;
use wdae_core::dataset::{ClassRecord, DatasetError, FeatureDataset, SplitTag};
use wdae_core::tensor::Matrix;

use crate::binio::{narrow, widen, BinError, Reader, Writer};

pub const FEATURES_FILE: &str = "features.bin";
pub const LABELS_FILE: &str = "labels.bin";
pub const SPLITS_FILE: &str = "splits.txt";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Bin(#[from] BinError),
    #[error("{path}: row count {features} in features.bin does not match {labels} in labels.bin")]
    RowCountMismatch {
        path: PathBuf,
        features: u32,
        labels: u32,
    },
    #[error("{path}: non-finite feature value at row {row}")]
    NonFinite { path: PathBuf, row: usize },
    #[error("{path} line {line}: malformed split entry {entry:?}")]
    BadSplitLine {
        path: PathBuf,
        line: usize,
        entry: String,
    },
    #[error("class {class_id} has feature rows but no entry in splits.txt")]
    MissingSplit { class_id: u32 },
    #[error("class {class_id} appears in splits.txt but has no feature rows")]
    OrphanSplit { class_id: u32 },
    #[error("dataset validation failed: {0}")]
    Dataset(#[from] DatasetError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Write a dataset directory (creating it if needed). Rows are emitted
/// class by class in dataset order, so save -> load -> save is
/// byte-identical.
pub fn save_features(dataset: &FeatureDataset, dir: &Path) -> Result<(), StoreError> {
    std::fs::create_dir_all(dir).map_err(|source| StoreError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let total_rows: usize = dataset.classes().iter().map(|c| c.features.rows()).sum();
    let dim = dataset.dim();

    let mut features = Writer::new();
    features
        .magic()
        .u32(crate::binio::FORMAT_VERSION)
        .u32(total_rows as u32)
        .u32(dim as u32);
    let mut labels = Writer::new();
    labels
        .u32(crate::binio::FORMAT_VERSION)
        .u32(total_rows as u32);
    let mut class_ids: Vec<u32> = Vec::with_capacity(total_rows);
    for class in dataset.classes() {
        features.f32_slice(&narrow(class.features.data()));
        class_ids.extend(std::iter::repeat_n(class.class_id, class.features.rows()));
    }
    labels.u32_slice(&class_ids);
    features.write_to(&dir.join(FEATURES_FILE))?;
    labels.write_to(&dir.join(LABELS_FILE))?;

    let mut splits = String::new();
    for class in dataset.classes() {
        splits.push_str(&format!("{} {}\n", class.class_id, class.split.as_str()));
    }
    std::fs::write(dir.join(SPLITS_FILE), splits).map_err(|source| StoreError::Io {
        path: dir.join(SPLITS_FILE),
        source,
    })?;
    Ok(())
}

/// Load and validate a dataset directory. Classes keep the order of first
/// appearance in `labels.bin`; rejects NaN/Inf payloads and any
/// feature/label/split inconsistency.
pub fn load_features(dir: &Path) -> Result<FeatureDataset, StoreError> {
    let fpath = dir.join(FEATURES_FILE);
    let mut fr = Reader::open(&fpath)?;
    fr.expect_magic()?;
    fr.expect_version()?;
    let rows = fr.read_u32()?;
    let dim = fr.read_u32()?;
    let values = fr.read_f32_slice(rows as usize * dim as usize)?;
    fr.expect_end()?;

    let lpath = dir.join(LABELS_FILE);
    let mut lr = Reader::open(&lpath)?;
    lr.expect_version()?;
    let label_rows = lr.read_u32()?;
    if label_rows != rows {
        return Err(StoreError::RowCountMismatch {
            path: dir.to_path_buf(),
            features: rows,
            labels: label_rows,
        });
    }
    let class_of_row = lr.read_u32_slice(rows as usize)?;
    lr.expect_end()?;

    let values = widen(&values);
    for (row, chunk) in values.chunks_exact(dim as usize).enumerate() {
        if chunk.iter().any(|v| !v.is_finite()) {
            return Err(StoreError::NonFinite { path: fpath, row });
        }
    }

    let splits = load_splits(&dir.join(SPLITS_FILE))?;

    // Group rows per class, preserving first-appearance order.
    let mut order: Vec<u32> = Vec::new();
    let mut rows_by_class: BTreeMap<u32, Vec<&[f64]>> = BTreeMap::new();
    for (row, &cid) in class_of_row.iter().enumerate() {
        let chunk = &values[row * dim as usize..(row + 1) * dim as usize];
        if !rows_by_class.contains_key(&cid) {
            order.push(cid);
        }
        rows_by_class.entry(cid).or_default().push(chunk);
    }

    for cid in splits.keys() {
        if !rows_by_class.contains_key(cid) {
            return Err(StoreError::OrphanSplit { class_id: *cid });
        }
    }

    let mut classes = Vec::with_capacity(order.len());
    for cid in order {
        let split = *splits
            .get(&cid)
            .ok_or(StoreError::MissingSplit { class_id: cid })?;
        let class_rows = &rows_by_class[&cid];
        let mut m = Matrix::zeros(class_rows.len(), dim as usize);
        for (i, r) in class_rows.iter().enumerate() {
            m.row_mut(i).copy_from_slice(r);
        }
        classes.push(ClassRecord {
            class_id: cid,
            split,
            features: m,
        });
    }
    Ok(FeatureDataset::new(dim as usize, classes)?)
}

fn load_splits(path: &Path) -> Result<BTreeMap<u32, SplitTag>, StoreError> {
    let text = std::fs::read_to_string(path).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = || StoreError::BadSplitLine {
            path: path.to_path_buf(),
            line: i + 1,
            entry: line.to_string(),
        };
        let mut parts = line.split_whitespace();
        let id: u32 = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let tag = SplitTag::parse(parts.next().ok_or_else(bad)?).ok_or_else(bad)?;
        if parts.next().is_some() {
            return Err(bad());
        }
        out.insert(id, tag);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use wdae_core::dataset::{generate_synthetic, SyntheticConfig};

    fn sample() -> FeatureDataset {
        generate_synthetic(&SyntheticConfig {
            num_base: 2,
            num_novel_val: 1,
            num_novel_test: 1,
            dim: 4,
            examples_per_class: 3,
            cluster_spread: 0.2,
            seed: 1,
        })
        .unwrap()
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        let ds = sample();
        save_features(&ds, &a).unwrap();
        let loaded = load_features(&a).unwrap();
        assert_eq!(loaded.dim(), 4);
        assert_eq!(loaded.classes().len(), 4);
        save_features(&loaded, &b).unwrap();
        for f in [FEATURES_FILE, LABELS_FILE, SPLITS_FILE] {
            assert_eq!(
                std::fs::read(a.join(f)).unwrap(),
                std::fs::read(b.join(f)).unwrap(),
                "{f} differs"
            );
        }
        // values survive the second round-trip bitwise
        let again = load_features(&b).unwrap();
        for (ca, cb) in loaded.classes().iter().zip(again.classes()) {
            assert_eq!(ca.features, cb.features);
            assert_eq!(ca.split, cb.split);
        }
    }

    #[test]
    fn truncation_names_byte_counts() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample();
        save_features(&ds, dir.path()).unwrap();
        let fpath = dir.path().join(FEATURES_FILE);
        let bytes = std::fs::read(&fpath).unwrap();
        std::fs::write(&fpath, &bytes[..bytes.len() - 7]).unwrap();
        match load_features(dir.path()) {
            Err(StoreError::Bin(BinError::Truncated { expected, actual, .. })) => {
                assert_eq!(expected, bytes.len());
                assert_eq!(actual, bytes.len() - 7);
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample();
        save_features(&ds, dir.path()).unwrap();
        let fpath = dir.path().join(FEATURES_FILE);
        let mut bytes = std::fs::read(&fpath).unwrap();
        bytes[0] = b'X';
        std::fs::write(&fpath, bytes).unwrap();
        assert!(matches!(
            load_features(dir.path()),
            Err(StoreError::Bin(BinError::MagicMismatch { .. }))
        ));
    }

    #[test]
    fn non_finite_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample();
        save_features(&ds, dir.path()).unwrap();
        let fpath = dir.path().join(FEATURES_FILE);
        let mut bytes = std::fs::read(&fpath).unwrap();
        bytes[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&fpath, bytes).unwrap();
        assert!(matches!(
            load_features(dir.path()),
            Err(StoreError::NonFinite { row: 0, .. })
        ));
    }

    #[test]
    fn split_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample();
        save_features(&ds, dir.path()).unwrap();
        let spath = dir.path().join(SPLITS_FILE);

        std::fs::write(&spath, "0 base\n1 base\n2 novel_val\n").unwrap();
        assert!(matches!(
            load_features(dir.path()),
            Err(StoreError::MissingSplit { class_id: 3 })
        ));

        std::fs::write(&spath, "0 base\n1 base\n2 novel_val\n3 novel_test\n9 base\n").unwrap();
        assert!(matches!(
            load_features(dir.path()),
            Err(StoreError::OrphanSplit { class_id: 9 })
        ));

        std::fs::write(&spath, "0 base\n1 nonsense\n2 novel_val\n3 novel_test\n").unwrap();
        assert!(matches!(
            load_features(dir.path()),
            Err(StoreError::BadSplitLine { line: 2, .. })
        ));
    }

    #[test]
    fn missing_file_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_features(dir.path()),
            Err(StoreError::Bin(BinError::MissingFile { .. }))
        ));
    }

    #[test]
    fn version_mismatch_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample();
        save_features(&ds, dir.path()).unwrap();
        let fpath = dir.path().join(FEATURES_FILE);
        let mut bytes = std::fs::read(&fpath).unwrap();
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        std::fs::write(&fpath, bytes).unwrap();
        assert!(matches!(
            load_features(dir.path()),
            Err(StoreError::Bin(BinError::VersionMismatch { found: 9, .. }))
        ));
    }
}
