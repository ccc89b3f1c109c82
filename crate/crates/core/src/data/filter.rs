//! Dataset curation: manifest records and the discard rules.

use std::fmt;
use std::path::PathBuf;

use serde::Serialize;

use crate::error::{Error, Result};

use super::volume::Modality;

pub const MIN_FOV_MM: f64 = 50.0;
pub const MAX_SPACING_MM: f64 = 6.5;
pub const MIN_FILE_BYTES: u64 = 200 * 1024;

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub file_size: u64,
    pub modality: Modality,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    Fov,
    Spacing,
    FileSize,
    Modality,
}

impl fmt::Display for DiscardReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DiscardReason::Fov => "fov",
            DiscardReason::Spacing => "spacing",
            DiscardReason::FileSize => "file_size",
            DiscardReason::Modality => "modality",
        })
    }
}

/// First rule that fires, checked in the order FOV, spacing, size, modality.
/// All thresholds are strict, so boundary values are kept.
pub fn discard_reason(r: &ManifestRecord) -> Option<DiscardReason> {
    let fov_min = (0..3).map(|a| r.dims[a] as f64 * r.spacing[a]).fold(f64::INFINITY, f64::min);
    if fov_min < MIN_FOV_MM {
        return Some(DiscardReason::Fov);
    }
    if r.spacing.iter().any(|&s| s > MAX_SPACING_MM) {
        return Some(DiscardReason::Spacing);
    }
    if r.file_size < MIN_FILE_BYTES {
        return Some(DiscardReason::FileSize);
    }
    if !r.modality.is_whitelisted() {
        return Some(DiscardReason::Modality);
    }
    None
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<ManifestRecord>,
    pub discarded: Vec<(ManifestRecord, DiscardReason)>,
}

pub fn filter_dataset(records: &[ManifestRecord]) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for r in records {
        match discard_reason(r) {
            None => out.kept.push(r.clone()),
            Some(why) => out.discarded.push((r.clone(), why)),
        }
    }
    out
}

fn triple<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || Error::Config(format!("manifest line {line}: bad {what} `{s}`"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(p.parse().map_err(|_| bad())?);
    }
    out.try_into().map_err(|_| bad())
}

/// Parses a tab-separated manifest: `path  D,H,W  sz,sy,sx  bytes  modality`.
/// Blank lines and lines starting with `#` are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(Error::Config(format!("manifest line {line_no}: expected 5 tab-separated columns, got {}", cols.len())));
        }
        out.push(ManifestRecord {
            path: PathBuf::from(cols[0]),
            dims: triple(cols[1], line_no, "dims")?,
            spacing: triple(cols[2], line_no, "spacing")?,
            file_size: cols[3]
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("manifest line {line_no}: bad byte count `{}`", cols[3])))?,
            modality: cols[4].trim().parse().expect("infallible"),
        });
    }
    Ok(out)
}

pub fn format_record(r: &ManifestRecord) -> String {
    let [d, h, w] = r.dims;
    let [a, b, c] = r.spacing;
    format!("{}\t{d},{h},{w}\t{a},{b},{c}\t{}\t{}", r.path.display(), r.file_size, r.modality)
}
