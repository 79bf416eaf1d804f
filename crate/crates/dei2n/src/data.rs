//! On-disk sample format: newline-delimited JSON records plus a manifest.
//!
//! A dataset is a pair of `.jsonl` files (train/test) whose lines each hold
//! one [`RawSample`], and a `manifest.json` with counts and the generator
//! config hash. Loading validates per-record invariants and reports the
//! 1-based line number of the first offending record.

use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// An item as referenced by a trigger or recommendation candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItemRef {
    pub item_id: u64,
    pub category_id: u64,
    pub company_id: u64,
}

/// One historical interaction: an item plus the click timestamp (seconds).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Behavior {
    pub item_id: u64,
    pub category_id: u64,
    pub company_id: u64,
    pub ts: i64,
}

impl Behavior {
    pub fn item(&self) -> ItemRef {
        ItemRef {
            item_id: self.item_id,
            category_id: self.category_id,
            company_id: self.company_id,
        }
    }
}

/// One impression: a user with behavior history, the trigger item they just
/// clicked, a recommended target, and whether the target was clicked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSample {
    pub user_id: u64,
    pub country_id: u64,
    /// Past clicks, ascending by `ts`, all at or before the sample's `ts`.
    pub behaviors: Vec<Behavior>,
    pub trigger: ItemRef,
    pub target: ItemRef,
    /// 1-based result page the target was shown on.
    pub page: u32,
    /// Recommendation timestamp (seconds).
    pub ts: i64,
    /// 1 if the target was clicked.
    pub label: u8,
}

impl RawSample {
    /// Checks the record invariants the rest of the pipeline relies on.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.label > 1 {
            return Err(format!("label must be 0 or 1, got {}", self.label));
        }
        if self.page == 0 {
            return Err("page numbers are 1-based, got 0".into());
        }
        let mut prev = i64::MIN;
        for (i, b) in self.behaviors.iter().enumerate() {
            if b.ts < prev {
                return Err(format!(
                    "behaviors must be sorted ascending by ts; position {i} has ts {} after {}",
                    b.ts, prev
                ));
            }
            if b.ts > self.ts {
                return Err(format!(
                    "behavior at position {i} has ts {} later than the sample ts {}",
                    b.ts, self.ts
                ));
            }
            prev = b.ts;
        }
        Ok(())
    }
}

/// Counts and provenance for a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_users: u64,
    pub n_items: u64,
    pub n_categories: u64,
    pub n_samples: u64,
    pub n_train: u64,
    pub n_test: u64,
    pub positive_rate: f64,
    /// Sessions at or after this timestamp went to the test split.
    pub split_ts: i64,
    /// Hash of the generator config that produced the files.
    pub config_hash: String,
}

/// Writes one JSON record per line.
pub fn save_dataset(path: &Path, samples: &[RawSample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads and validates a `.jsonl` dataset. Errors carry the 1-based line
/// number of the first bad record.
pub fn load_dataset(path: &Path) -> Result<Vec<RawSample>> {
    let f = File::open(path).map_err(|e| {
        Error::data(None, format!("cannot open {}: {e}", path.display()))
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: RawSample = serde_json::from_str(&line)
            .map_err(|e| Error::data(Some(lineno), format!("malformed record: {e}")))?;
        sample
            .validate()
            .map_err(|msg| Error::data(Some(lineno), msg))?;
        out.push(sample);
    }
    Ok(out)
}

pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, manifest)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let f = File::open(path).map_err(|e| {
        Error::data(None, format!("cannot open {}: {e}", path.display()))
    })?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RawSample {
        RawSample {
            user_id: 3,
            country_id: 1,
            behaviors: vec![
                Behavior { item_id: 10, category_id: 2, company_id: 5, ts: 100 },
                Behavior { item_id: 11, category_id: 3, company_id: 6, ts: 200 },
            ],
            trigger: ItemRef { item_id: 12, category_id: 2, company_id: 5 },
            target: ItemRef { item_id: 13, category_id: 2, company_id: 7 },
            page: 1,
            ts: 500,
            label: 1,
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let samples = vec![sample(), { let mut s = sample(); s.label = 0; s.page = 2; s }];
        save_dataset(&path, &samples).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded, samples);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let good = serde_json::to_string(&sample()).unwrap();
        std::fs::write(&path, format!("{good}\n{{not json\n")).unwrap();
        match load_dataset(&path).unwrap_err() {
            Error::Data { line, .. } => assert_eq!(line, Some(2)),
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn unsorted_behaviors_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let mut s = sample();
        s.behaviors.reverse(); // descending ts now
        save_dataset(&path, &[s]).unwrap();
        match load_dataset(&path).unwrap_err() {
            Error::Data { line, detail } => {
                assert_eq!(line, Some(1));
                assert!(detail.contains("ascending"), "{detail}");
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn behavior_after_sample_ts_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let mut s = sample();
        s.behaviors[1].ts = s.ts + 1;
        save_dataset(&path, &[s]).unwrap();
        assert!(matches!(
            load_dataset(&path).unwrap_err(),
            Error::Data { line: Some(1), .. }
        ));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let m = DatasetManifest {
            n_users: 10,
            n_items: 100,
            n_categories: 5,
            n_samples: 1000,
            n_train: 900,
            n_test: 100,
            positive_rate: 0.31,
            split_ts: 123456,
            config_hash: "deadbeef".into(),
        };
        save_manifest(&path, &m).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), m);
    }
}
