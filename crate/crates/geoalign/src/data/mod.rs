//! Dataset records, their JSONL serialization, and the rule-based corpus
//! pipeline: procedural scene synthesis, quality filtering, hard-negative
//! synthesis, and train/test leakage analysis.
//!
//! The JSONL schema is part of the external interface: one record per line,
//! field names exactly `id`, `image`, `brief_caption`, `detail_caption`,
//! `regions[{bbox, phrase, hard_negatives[{text, kind}]}]`, `split`.

mod leakage;
mod negatives;
mod ppm;
mod quality;
mod scene;

pub use leakage::{leakage_check, LeakageConfig, LeakageReport, LexicalPair};
pub use negatives::{synth_hard_negatives, Lexicons};
pub use ppm::{
    canonical_ppm_bytes, parse_ppm, read_image, write_pgm, write_ppm, RgbImage,
};
pub use quality::{
    calibrate_thresholds, quality_filter, QualityReport, QualityThresholds, RejectReason, Verdict,
};
pub use scene::{render_scene, synth_scene, SceneConfig, DEFAULT_CATEGORIES, DEFAULT_COLORS};

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::region::BBox;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed JSON: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error("{path}: invalid image: {message}")]
    Image { path: PathBuf, message: String },
    #[error("record {id}: schema violations: {}", format_violations(.violations))]
    Invalid {
        id: String,
        violations: Vec<Violation>,
    },
    #[error("{0}")]
    Config(String),
}

fn format_violations(vs: &[Violation]) -> String {
    vs.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

/// One schema invariant violation, named by the field that breaks it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeKind {
    Attribute,
    Orientation,
    Category,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardNegative {
    pub text: String,
    pub kind: NegativeKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionAnnotation {
    pub bbox: BBox,
    pub phrase: String,
    #[serde(default)]
    pub hard_negatives: Vec<HardNegative>,
}

/// A placed object, sufficient to re-render the scene exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub category: String,
    pub color: String,
    /// Pixel bbox `[x0, y0, x1, y1]`, end-exclusive.
    pub bbox_px: [usize; 4],
}

/// Inline procedural image: background noise keyed by `seed` plus a list of
/// placed objects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub size: usize,
    pub objects: Vec<ObjectSpec>,
}

/// Image payload of a record: a path relative to the dataset file, or an
/// inline procedural spec rendered on demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageRef {
    Path(String),
    Procedural(SceneSpec),
}

/// One image-text training unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image: ImageRef,
    pub brief_caption: String,
    pub detail_caption: String,
    pub regions: Vec<RegionAnnotation>,
    pub split: Split,
}

pub(crate) fn words_of(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_owned)
        .collect()
}

impl SampleRecord {
    /// Load the record's pixels: read the referenced file or render the
    /// inline spec. Paths resolve relative to `base_dir`.
    pub fn load_image(&self, base_dir: &Path) -> Result<RgbImage, DataError> {
        match &self.image {
            ImageRef::Path(rel) => read_image(&base_dir.join(rel)),
            ImageRef::Procedural(spec) => Ok(render_scene(spec)),
        }
    }
}

/// Check every schema invariant; an empty list means the record is valid.
pub fn schema_validate(record: &SampleRecord) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut fail = |field: &str, message: String| {
        out.push(Violation {
            field: field.to_owned(),
            message,
        });
    };
    if record.id.is_empty() {
        fail("id", "empty".into());
    }
    let brief_wc = words_of(&record.brief_caption).len();
    let detail_wc = words_of(&record.detail_caption).len();
    if brief_wc == 0 {
        fail("brief_caption", "caption empty".into());
    }
    if detail_wc == 0 {
        fail("detail_caption", "caption empty".into());
    }
    if brief_wc > detail_wc {
        fail(
            "detail_caption",
            format!("brief caption ({brief_wc} words) longer than detail ({detail_wc} words)"),
        );
    }
    if let ImageRef::Path(p) = &record.image {
        if p.is_empty() {
            fail("image", "empty path".into());
        }
    }
    for (i, region) in record.regions.iter().enumerate() {
        let field = format!("regions[{i}]");
        if let Err(e) = region.bbox.validate(crate::region::DEFAULT_MIN_AREA) {
            fail(&format!("{field}.bbox"), e.to_string());
        }
        if words_of(&region.phrase).is_empty() {
            fail(&format!("{field}.phrase"), "phrase empty".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for (j, neg) in region.hard_negatives.iter().enumerate() {
            if neg.text == region.phrase {
                fail(
                    &format!("{field}.hard_negatives[{j}]"),
                    "negative equals the positive phrase".into(),
                );
            }
            if !seen.insert(neg.text.clone()) {
                fail(
                    &format!("{field}.hard_negatives[{j}]"),
                    format!("duplicate negative text {:?}", neg.text),
                );
            }
        }
    }
    out
}

/// Write records as UTF-8 JSONL, one record per line, in input order.
pub fn write_jsonl(path: &Path, records: &[SampleRecord]) -> Result<(), DataError> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = std::io::BufWriter::new(fs::File::create(path).map_err(io_err)?);
    for record in records {
        let line = serde_json::to_string(record).expect("record serializes");
        file.write_all(line.as_bytes()).map_err(io_err)?;
        file.write_all(b"\n").map_err(io_err)?;
    }
    file.flush().map_err(io_err)
}

/// Read a JSONL dataset. Malformed lines report their 1-based line number.
pub fn read_jsonl(path: &Path) -> Result<Vec<SampleRecord>, DataError> {
    let file = fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord =
            serde_json::from_str(&line).map_err(|source| DataError::Json {
                path: path.to_path_buf(),
                line: i + 1,
                source,
            })?;
        records.push(record);
    }
    Ok(records)
}

/// Read and validate; any invalid record aborts with its violation list.
pub fn read_jsonl_validated(path: &Path) -> Result<Vec<SampleRecord>, DataError> {
    let records = read_jsonl(path)?;
    for record in &records {
        let violations = schema_validate(record);
        if !violations.is_empty() {
            return Err(DataError::Invalid {
                id: record.id.clone(),
                violations,
            });
        }
    }
    Ok(records)
}

#[cfg(test)]
#[path = "data_tests.rs"]
mod tests;
