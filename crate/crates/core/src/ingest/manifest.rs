//! Line-delimited JSON manifests.
//!
//! One record per line:
//!
//! ```text
//! {"id":"img-001","date_text":"1950s day dress","split":"train","path":"img/001.ppm"}
//! {"id":"img-002","year":1965,"split":"test","collection":"ss05-acme","grayscale":true}
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected so that typos surface as errors instead of missing labels.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dates::{quantize, BinIndex, DateParser, TemporalBinning, YearRange};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    date_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    title: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tags: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    year: Option<i32>,
    #[serde(default)]
    split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    collection: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    grayscale: bool,
}

/// One manifest entry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Sample {
    pub id: String,
    pub date_text: Option<String>,
    pub title: Option<String>,
    pub description: Option<String>,
    pub tags: Option<String>,
    pub label_year: Option<i32>,
    pub label_bin: Option<BinIndex>,
    pub split: Split,
    pub collection_id: Option<String>,
    pub path: Option<PathBuf>,
    pub grayscale: bool,
}

/// Resolved supervision for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Label {
    pub year: i32,
    pub bin: BinIndex,
}

impl Sample {
    pub fn new(id: impl Into<String>) -> Self {
        Sample {
            id: id.into(),
            ..Default::default()
        }
    }

    /// Free-text date fields in priority order: explicit date text, then
    /// title, description and tags.
    pub fn date_fields(&self) -> Vec<&str> {
        [&self.date_text, &self.title, &self.description, &self.tags]
            .into_iter()
            .flatten()
            .map(String::as_str)
            .collect()
    }

    /// Label year and bin. An explicit year wins over the date text; parsed
    /// ranges contribute their midpoint year and midpoint bin.
    pub fn label(&self, parser: &DateParser, binning: &TemporalBinning) -> Result<Label> {
        if let Some(year) = self.label_year {
            return Ok(Label {
                year,
                bin: binning.bin_of_year(year)?,
            });
        }
        let range = parser.parse_fields(&self.date_fields(), binning.window())?;
        Ok(Label {
            year: range.midpoint(),
            bin: quantize(range, binning)?,
        })
    }

    pub fn parsed_range(&self, parser: &DateParser, window: YearRange) -> Result<YearRange> {
        if let Some(year) = self.label_year {
            let r = YearRange::single(year);
            return r.intersection(&window).ok_or(Error::OutOfWindow {
                start: year,
                end: year,
                window_start: window.start(),
                window_end: window.end(),
            });
        }
        parser.parse_fields(&self.date_fields(), window)
    }

    fn from_record(r: Record) -> Self {
        Sample {
            id: r.id,
            date_text: r.date_text,
            title: r.title,
            description: r.description,
            tags: r.tags,
            label_year: r.year,
            label_bin: None,
            split: r.split,
            collection_id: r.collection,
            path: r.path,
            grayscale: r.grayscale,
        }
    }

    fn to_record(&self) -> Record {
        Record {
            id: self.id.clone(),
            date_text: self.date_text.clone(),
            title: self.title.clone(),
            description: self.description.clone(),
            tags: self.tags.clone(),
            year: self.label_year,
            split: self.split,
            collection: self.collection_id.clone(),
            path: self.path.clone(),
            grayscale: self.grayscale,
        }
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    read_manifest(BufReader::new(File::open(path)?))
}

pub fn read_manifest<R: BufRead>(reader: R) -> Result<Vec<Sample>> {
    let mut seen = HashSet::new();
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::MalformedManifest {
            line: line_no,
            reason: e.to_string(),
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let record: Record =
            serde_json::from_str(trimmed).map_err(|e| Error::MalformedManifest {
                line: line_no,
                reason: e.to_string(),
            })?;
        if record.id.is_empty() {
            return Err(Error::MalformedManifest {
                line: line_no,
                reason: "empty id".into(),
            });
        }
        if !seen.insert(record.id.clone()) {
            return Err(Error::DuplicateId {
                line: line_no,
                id: record.id,
            });
        }
        samples.push(Sample::from_record(record));
    }
    Ok(samples)
}

pub fn write_manifest<W: Write>(mut writer: W, samples: &[Sample]) -> Result<()> {
    for s in samples {
        let line = serde_json::to_string(&s.to_record())
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

/// Fill `label_year`/`label_bin` from explicit years or parsed date text.
/// Samples whose labels cannot be resolved are returned with their error and
/// left untouched.
pub fn label_samples(
    samples: &mut [Sample],
    parser: &DateParser,
    binning: &TemporalBinning,
) -> Vec<(usize, Error)> {
    let mut failures = Vec::new();
    for (i, s) in samples.iter_mut().enumerate() {
        match s.label(parser, binning) {
            Ok(label) => {
                s.label_year = Some(label.year);
                s.label_bin = Some(label.bin);
            }
            Err(e) => failures.push((i, e)),
        }
    }
    failures
}
