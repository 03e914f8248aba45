use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use super::{
    decode_image, normalize, DatasetManifest, Flag, Preprocessing, SampleRecord,
    DEFAULT_VALIDATION_FRACTION, MANIFEST_SCHEMA_VERSION, NEAR_BLACK_THRESHOLD, SUPPORTED_EXTENSIONS,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanOptions {
    pub split_seed: u64,
    pub validation_fraction: f64,
    pub preprocessing: Preprocessing,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self {
            split_seed: 0,
            validation_fraction: DEFAULT_VALIDATION_FRACTION,
            preprocessing: Preprocessing::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnreadableFile {
    pub path: String,
    pub error: String,
}

/// Everything the scan noticed besides the manifest itself.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub records: usize,
    pub unreadable: Vec<UnreadableFile>,
    /// Files without a supported image extension.
    pub ignored: Vec<String>,
    pub multi_channel: Vec<String>,
    pub near_black: Vec<String>,
    /// Records whose preprocessed size differs from the manifest target size.
    pub shape_mismatches: Vec<String>,
    /// Mean normalized intensity of every record, by id.
    pub mean_intensity: BTreeMap<String, f64>,
}

fn relative_id(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

fn inspect(root: &Path, path: &Path) -> std::result::Result<SampleRecord, String> {
    let raw = decode_image(path).map_err(|e| e.to_string())?;
    if raw.channels != 1 && raw.channels != 3 {
        return Err(format!("{} channels are not supported", raw.channels));
    }
    let img = normalize(&raw, path).map_err(|e| e.to_string())?;
    let mean_intensity = if img.is_empty() {
        0.0
    } else {
        img.data().iter().map(|&v| v as f64).sum::<f64>() / img.len() as f64
    };
    let mut flags = BTreeSet::new();
    if raw.channels > 1 {
        flags.insert(Flag::MultiChannel);
    }
    if mean_intensity < NEAR_BLACK_THRESHOLD {
        flags.insert(Flag::NearBlack);
    }
    Ok(SampleRecord {
        id: relative_id(root, path),
        source_path: path.strip_prefix(root).unwrap_or(path).to_path_buf(),
        raw_shape: raw.shape(),
        raw_dtype: raw.dtype,
        flags,
        mean_intensity,
    })
}

/// Indexes every decodable image under `root`. Undecodable files are reported, not fatal.
pub fn scan_corpus(root: &Path, options: &ScanOptions) -> Result<(DatasetManifest, ScanReport)> {
    let root = root.canonicalize().map_err(|e| Error::io(root, e))?;
    let mut candidates: Vec<PathBuf> = Vec::new();
    let mut report = ScanReport::default();
    for entry in WalkDir::new(&root).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().map(Path::to_path_buf).unwrap_or_else(|| root.clone());
            Error::io(path, e.into())
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let supported = entry
            .path()
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| SUPPORTED_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if supported {
            candidates.push(entry.into_path());
        } else {
            report.ignored.push(relative_id(&root, entry.path()));
        }
    }

    let results: Vec<_> = candidates.par_iter().map(|p| (p, inspect(&root, p))).collect();
    let mut records = Vec::new();
    for (path, result) in results {
        match result {
            Ok(r) => records.push(r),
            Err(error) => report.unreadable.push(UnreadableFile {
                path: relative_id(&root, path),
                error,
            }),
        }
    }
    if records.is_empty() {
        return Err(Error::Data {
            path: root,
            message: "corpus contains no decodable images".into(),
        });
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));

    let mut preprocessing = options.preprocessing.clone();
    let sizes: Vec<(usize, usize)> = records
        .iter()
        .map(|r| preprocessing.output_size(r.raw_shape.1, r.raw_shape.2))
        .collect();
    let target = match preprocessing.target_size {
        Some(t) => t,
        None => {
            // Most common size; ties go to the size seen first in id order.
            let mut counts: Vec<((usize, usize), usize)> = Vec::new();
            for s in &sizes {
                match counts.iter_mut().find(|(k, _)| k == s) {
                    Some((_, n)) => *n += 1,
                    None => counts.push((*s, 1)),
                }
            }
            let best = counts.iter().map(|(_, n)| *n).max().unwrap_or(0);
            counts.iter().find(|(_, n)| *n == best).map(|(k, _)| *k).expect("non-empty")
        }
    };
    preprocessing.target_size = Some(target);

    for (r, size) in records.iter().zip(&sizes) {
        if *size != target {
            report.shape_mismatches.push(r.id.clone());
        }
        if r.has(Flag::MultiChannel) {
            report.multi_channel.push(r.id.clone());
        }
        if r.has(Flag::NearBlack) {
            report.near_black.push(r.id.clone());
        }
        report.mean_intensity.insert(r.id.clone(), r.mean_intensity);
    }
    report.records = records.len();
    for u in &report.unreadable {
        log::warn!("skipping unreadable file {}: {}", u.path, u.error);
    }

    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        root,
        records,
        split_seed: options.split_seed,
        validation_fraction: options.validation_fraction,
        preprocessing,
    };
    manifest.validate()?;
    Ok((manifest, report))
}
