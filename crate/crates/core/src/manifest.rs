//! Line-oriented dataset catalog: one JSON object per line with the fields
//! `id`, `path`, `label`, `source`, `split`. Paths are relative to the
//! directory holding the manifest file.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const REAL: u8 = 1;
pub const FAKE: u8 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Source {
    RealOrig,
    RealOfflineAug,
    /// Fake produced by artifact injector `k` (1-based).
    FakeMethod(u8),
    FakeGenerated,
}

impl Source {
    pub fn is_real(self) -> bool {
        matches!(self, Source::RealOrig | Source::RealOfflineAug)
    }

    pub fn label(self) -> u8 {
        if self.is_real() {
            REAL
        } else {
            FAKE
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::RealOrig => f.write_str("real-orig"),
            Source::RealOfflineAug => f.write_str("real-offline-aug"),
            Source::FakeMethod(k) => write!(f, "fake-method-{k}"),
            Source::FakeGenerated => f.write_str("fake-generated"),
        }
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real-orig" => Ok(Source::RealOrig),
            "real-offline-aug" => Ok(Source::RealOfflineAug),
            "fake-generated" => Ok(Source::FakeGenerated),
            _ => s
                .strip_prefix("fake-method-")
                .and_then(|k| k.parse::<u8>().ok())
                .filter(|&k| k >= 1)
                .map(Source::FakeMethod)
                .ok_or_else(|| Error::InvalidInput(format!("unknown source `{s}`"))),
        }
    }
}

impl Serialize for Source {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Source {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    pub path: String,
    pub label: u8,
    pub source: Source,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    /// Directory that record paths are relative to.
    pub root: PathBuf,
    pub records: Vec<Record>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<Record>) -> Self {
        Self {
            root: root.into(),
            records,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|source| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                source,
            })?;
            records.push(rec);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, records })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, record: &Record) -> PathBuf {
        self.root.join(&record.path)
    }

    /// Unique ids and label/source agreement; with `check_files`, every
    /// image must also exist.
    pub fn validate(&self, check_files: bool) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate id `{}`", r.id)));
            }
            if r.label != r.source.label() {
                return Err(Error::InvalidInput(format!(
                    "`{}`: label {} disagrees with source {}",
                    r.id, r.label, r.source
                )));
            }
            if check_files && !self.resolve(r).is_file() {
                return Err(Error::InvalidInput(format!(
                    "`{}`: missing file {}",
                    r.id,
                    self.resolve(r).display()
                )));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, pred: impl Fn(&Record) -> bool) -> usize {
        self.records.iter().filter(|r| pred(r)).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn source_strings_round_trip() {
        for s in [
            Source::RealOrig,
            Source::RealOfflineAug,
            Source::FakeMethod(3),
            Source::FakeGenerated,
        ] {
            assert_eq!(s.to_string().parse::<Source>().unwrap(), s);
            assert_eq!(s.is_real(), s.to_string().starts_with("real"));
        }
        assert!("fake-method-0".parse::<Source>().is_err());
        assert!("real".parse::<Source>().is_err());
    }

    #[test]
    fn record_field_names() {
        let r = Record {
            id: "a".into(),
            path: "images/a.png".into(),
            label: 0,
            source: Source::FakeMethod(2),
            split: Split::Val,
        };
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            r#"{"id":"a","path":"images/a.png","label":0,"source":"fake-method-2","split":"val"}"#
        );
    }

    #[test]
    fn validate_catches_duplicates_and_label_mismatch() {
        let rec = |id: &str, label, source| Record {
            id: id.into(),
            path: format!("{id}.png"),
            label,
            source,
            split: Split::Train,
        };
        let m = DatasetManifest::new("", vec![rec("a", 1, Source::RealOrig), rec("a", 1, Source::RealOrig)]);
        assert!(m.validate(false).is_err());
        let m = DatasetManifest::new("", vec![rec("a", 0, Source::RealOrig)]);
        assert!(m.validate(false).is_err());
        let m = DatasetManifest::new("", vec![rec("a", 0, Source::FakeGenerated)]);
        assert!(m.validate(false).is_ok());
    }
}
