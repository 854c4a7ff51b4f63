//! Dataset manifests (JSON lines) and subject-level train/test splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::NoiseRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    TestInternal,
    TestExternal,
    /// QA-failed record of a training subject; belongs to no split.
    Excluded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QaStatus {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub subject: String,
    pub path: String,
    pub dataset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    pub qa_status: QaStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qa_reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn new(records: Vec<ManifestRecord>) -> Self {
        Self { records }
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { records })
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e: csv::Error| Error::Malformed {
            what: "manifest CSV",
            detail: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        w.write_record([
            "subject",
            "path",
            "dataset",
            "split",
            "qa_status",
            "qa_reason",
            "mask_path",
        ])
        .map_err(io)?;
        for r in &self.records {
            let split = r.split.map(|s| {
                serde_json::to_value(s)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_owned))
                    .unwrap_or_default()
            });
            let qa = match r.qa_status {
                QaStatus::Pass => "pass",
                QaStatus::Fail => "fail",
            };
            w.write_record([
                r.subject.as_str(),
                r.path.as_str(),
                r.dataset.as_str(),
                split.as_deref().unwrap_or(""),
                qa,
                r.qa_reason.as_deref().unwrap_or(""),
                r.mask_path.as_deref().unwrap_or(""),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == Some(split))
    }

    /// Checks the split invariants: each (dataset, subject) lands in exactly
    /// one of train / test-internal / test-external, and no QA-failed record
    /// is in train.
    pub fn check_splits(&self) -> Result<()> {
        let mut seen: BTreeMap<(&str, &str), Split> = BTreeMap::new();
        for r in &self.records {
            let Some(split) = r.split else {
                return Err(Error::InvalidParameter(format!("record {} has no split", r.path)));
            };
            if split == Split::Train && r.qa_status == QaStatus::Fail {
                return Err(Error::InvalidParameter(format!(
                    "QA-failed record {} is in train",
                    r.path
                )));
            }
            if split == Split::Excluded {
                continue;
            }
            let key = (r.dataset.as_str(), r.subject.as_str());
            if let Some(prev) = seen.insert(key, split) {
                if prev != split {
                    return Err(Error::InvalidParameter(format!(
                        "subject {} of {} straddles {prev:?} and {split:?}",
                        r.subject, r.dataset
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub test_fraction: f64,
    /// Datasets assigned to test-external wholesale.
    pub withheld: Vec<String>,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.10,
            withheld: vec!["AIBL".into(), "SLEEP".into()],
            seed: 0,
        }
    }
}

fn stream_id(name: &str) -> u64 {
    // FNV-1a keeps each dataset's shuffle independent of the others.
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Assigns every record a split at the subject level. Within each
/// non-withheld dataset, `round(test_fraction * subjects)` randomly chosen
/// subjects go to test-internal and the rest to train; QA-failed records of
/// training subjects are marked excluded.
pub fn split_subjects(manifest: &Manifest, cfg: &SplitConfig) -> Result<Manifest> {
    if !(0.0..=1.0).contains(&cfg.test_fraction) {
        return Err(Error::InvalidParameter(format!(
            "test fraction {} outside [0, 1]",
            cfg.test_fraction
        )));
    }
    if let Some(r) = manifest.records.iter().find(|r| r.subject.is_empty()) {
        return Err(Error::InvalidParameter(format!(
            "record {} has an empty subject id",
            r.path
        )));
    }
    let withheld: BTreeSet<&str> = cfg.withheld.iter().map(String::as_str).collect();
    let mut subjects: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for r in &manifest.records {
        subjects.entry(&r.dataset).or_default().insert(&r.subject);
    }

    let mut assignment: BTreeMap<(&str, &str), Split> = BTreeMap::new();
    for (dataset, subs) in &subjects {
        if withheld.contains(dataset) {
            for s in subs {
                assignment.insert((dataset, s), Split::TestExternal);
            }
            continue;
        }
        let mut order: Vec<&str> = subs.iter().copied().collect();
        NoiseRng::derive(cfg.seed, stream_id(dataset)).shuffle(&mut order);
        let n_test = (cfg.test_fraction * order.len() as f64).round() as usize;
        for (i, s) in order.into_iter().enumerate() {
            let split = if i < n_test { Split::TestInternal } else { Split::Train };
            assignment.insert((dataset, s), split);
        }
    }

    let records = manifest
        .records
        .iter()
        .map(|r| {
            let mut split = assignment[&(r.dataset.as_str(), r.subject.as_str())];
            if split == Split::Train && r.qa_status == QaStatus::Fail {
                split = Split::Excluded;
            }
            ManifestRecord {
                split: Some(split),
                ..r.clone()
            }
        })
        .collect();
    Ok(Manifest { records })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(dataset: &str, subject: &str, idx: usize) -> ManifestRecord {
        ManifestRecord {
            subject: subject.into(),
            path: format!("{dataset}/{subject}_{idx}.nii"),
            dataset: dataset.into(),
            split: None,
            qa_status: QaStatus::Pass,
            qa_reason: None,
            mask_path: None,
        }
    }

    #[test]
    fn ten_percent_of_hundred_subjects() {
        let m = Manifest::new((0..100).map(|i| record("ADNI", &format!("s{i}"), 0)).collect());
        let out = split_subjects(&m, &SplitConfig::default()).unwrap();
        assert_eq!(out.in_split(Split::TestInternal).count(), 10);
        assert_eq!(out.in_split(Split::Train).count(), 90);
        out.check_splits().unwrap();
    }

    #[test]
    fn multi_volume_subject_stays_together() {
        let mut records = Vec::new();
        for i in 0..30 {
            let visits = if i == 0 { 5 } else { 1 };
            for v in 0..visits {
                records.push(record("OASIS", &format!("s{i}"), v));
            }
        }
        for seed in 0..20 {
            let out = split_subjects(
                &Manifest::new(records.clone()),
                &SplitConfig {
                    seed,
                    ..Default::default()
                },
            )
            .unwrap();
            let splits: BTreeSet<_> = out
                .records
                .iter()
                .filter(|r| r.subject == "s0")
                .map(|r| r.split)
                .collect();
            assert_eq!(splits.len(), 1);
            out.check_splits().unwrap();
        }
    }

    #[test]
    fn withheld_dataset_has_no_train_records() {
        let mut records: Vec<_> = (0..20).map(|i| record("AIBL", &format!("a{i}"), 0)).collect();
        records.extend((0..20).map(|i| record("SLEEP", &format!("b{i}"), 0)));
        records.extend((0..20).map(|i| record("ADNI", &format!("c{i}"), 0)));
        let out = split_subjects(&Manifest::new(records), &SplitConfig::default()).unwrap();
        for r in &out.records {
            if r.dataset == "AIBL" || r.dataset == "SLEEP" {
                assert_eq!(r.split, Some(Split::TestExternal));
            }
        }
        assert_eq!(out.in_split(Split::Train).count(), 18);
    }

    #[test]
    fn qa_failures_never_train() {
        let mut records: Vec<_> = (0..40).map(|i| record("ADNI", &format!("s{i}"), 0)).collect();
        for r in records.iter_mut().step_by(3) {
            r.qa_status = QaStatus::Fail;
            r.qa_reason = Some("Motion artifacts".into());
        }
        let out = split_subjects(&Manifest::new(records), &SplitConfig::default()).unwrap();
        assert!(out.in_split(Split::Train).all(|r| r.qa_status == QaStatus::Pass));
        assert!(out.in_split(Split::Excluded).count() > 0);
        out.check_splits().unwrap();
    }

    #[test]
    fn split_is_deterministic_per_seed() {
        let m = Manifest::new((0..50).map(|i| record("X", &format!("s{i}"), 0)).collect());
        let cfg = SplitConfig::default();
        assert_eq!(split_subjects(&m, &cfg).unwrap(), split_subjects(&m, &cfg).unwrap());
    }

    #[test]
    fn jsonl_schema() {
        let mut r = record("ADNI", "s1", 0);
        r.split = Some(Split::TestInternal);
        r.mask_path = Some("m.nii".into());
        let m = Manifest::new(vec![r]);
        let text = m.to_jsonl().unwrap();
        assert_eq!(
            text.trim(),
            r#"{"subject":"s1","path":"ADNI/s1_0.nii","dataset":"ADNI","split":"test-internal","qa_status":"pass","mask_path":"m.nii"}"#
        );
        assert_eq!(Manifest::from_jsonl(&text).unwrap(), m);
    }

    #[test]
    fn check_detects_straddling() {
        let mut a = record("X", "s", 0);
        a.split = Some(Split::Train);
        let mut b = record("X", "s", 1);
        b.split = Some(Split::TestInternal);
        assert!(Manifest::new(vec![a, b]).check_splits().is_err());
    }
}
