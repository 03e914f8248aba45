//! Corpus ingestion: manifest types, decoding and normalization, preprocessing
//! transforms, and deterministic train/validation splitting.

mod image_io;
mod preprocess;
mod scan;
mod split;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::{read_json, write_json};

pub use image_io::{decode_image, write_pfm, RawImage, SUPPORTED_EXTENSIONS};
pub use preprocess::{load_normalized, normalize, reflect_pad_to, resize_bilinear};
pub use scan::{scan_corpus, ScanOptions, ScanReport, UnreadableFile};
pub use split::{batch_iterator, batch_order, split, Split};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
/// Records whose mean normalized intensity falls below this are flagged `near_black`.
pub const NEAR_BLACK_THRESHOLD: f64 = 0.02;
pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.2;

/// Element type of the file on disk; decides how values are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RawDtype {
    /// Divided by 255.
    Uint8,
    /// Divided by 65535.
    Uint16,
    /// Must already lie in `[0, 1]`.
    Float,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    MultiChannel,
    NearBlack,
    Excluded,
    UserFlagged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Path relative to the corpus root with `/` separators; unique in a manifest.
    pub id: String,
    pub source_path: PathBuf,
    /// `(channels, height, width)` as decoded; channels is 1 or 3.
    pub raw_shape: (usize, usize, usize),
    pub raw_dtype: RawDtype,
    pub flags: BTreeSet<Flag>,
    /// Mean of the normalized, channel-averaged pixels.
    pub mean_intensity: f64,
}

impl SampleRecord {
    pub fn has(&self, flag: Flag) -> bool {
        self.flags.contains(&flag)
    }
}

/// How multi-channel files become single-channel training samples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    /// Average the channels.
    #[default]
    Average,
    /// Every channel of a multi-channel file is its own grayscale sample.
    ChannelsAsSamples,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Transform {
    /// Mirror-pads on the bottom and right up to the given size.
    ReflectPadTo { height: usize, width: usize },
    /// Bilinear resample to the given size; aspect ratio may change.
    Resize { height: usize, width: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preprocessing {
    #[serde(default)]
    pub channel_mode: ChannelMode,
    #[serde(default)]
    pub transforms: Vec<Transform>,
    /// `(height, width)` every sample must have after the transforms.
    pub target_size: Option<(usize, usize)>,
}

impl Preprocessing {
    /// Spatial size of a `height x width` image after the transforms.
    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        self.transforms.iter().fold((height, width), |_, t| match *t {
            Transform::ReflectPadTo { height, width } | Transform::Resize { height, width } => {
                (height, width)
            }
        })
    }
}

/// One training/inspection sample: a record, or one channel of a record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRef {
    pub id: String,
    pub record: usize,
    pub channel: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    /// Corpus root the record paths are relative to.
    pub root: PathBuf,
    /// Sorted by id.
    pub records: Vec<SampleRecord>,
    pub split_seed: u64,
    pub validation_fraction: f64,
    pub preprocessing: Preprocessing,
}

/// Separator between a record id and a channel index in channel-as-sample ids.
pub const CHANNEL_SEPARATOR: &str = "#c";

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "manifest schema version {} is not supported (expected {MANIFEST_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation_fraction must be in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        for pair in self.records.windows(2) {
            if pair[0].id >= pair[1].id {
                return Err(Error::Config(format!(
                    "manifest records must have unique ids in sorted order ({} / {})",
                    pair[0].id, pair[1].id
                )));
            }
        }
        for r in &self.records {
            if r.raw_shape.0 != 1 && r.raw_shape.0 != 3 {
                return Err(Error::Config(format!(
                    "record {} has {} channels",
                    r.id, r.raw_shape.0
                )));
            }
        }
        Ok(())
    }

    pub fn record(&self, id: &str) -> Option<&SampleRecord> {
        self.records
            .binary_search_by(|r| r.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.records[i])
    }

    /// Non-excluded samples, sorted by sample id.
    pub fn samples(&self) -> Vec<SampleRef> {
        let mut out = Vec::new();
        for (i, r) in self.records.iter().enumerate() {
            if r.has(Flag::Excluded) {
                continue;
            }
            match self.preprocessing.channel_mode {
                ChannelMode::ChannelsAsSamples if r.raw_shape.0 > 1 => {
                    for c in 0..r.raw_shape.0 {
                        out.push(SampleRef {
                            id: format!("{}{CHANNEL_SEPARATOR}{c}", r.id),
                            record: i,
                            channel: Some(c),
                        });
                    }
                }
                _ => out.push(SampleRef {
                    id: r.id.clone(),
                    record: i,
                    channel: None,
                }),
            }
        }
        out.sort_by(|a, b| a.id.cmp(&b.id));
        out
    }

    /// The record a sample id belongs to.
    pub fn record_for_sample(&self, sample_id: &str) -> Option<&SampleRecord> {
        self.record(sample_id).or_else(|| {
            let (base, channel) = sample_id.rsplit_once(CHANNEL_SEPARATOR)?;
            channel.parse::<usize>().ok()?;
            self.record(base)
        })
    }

    /// Model input shape `(1, H, W)`.
    pub fn target_shape(&self) -> Result<(usize, usize, usize)> {
        self.preprocessing
            .target_size
            .map(|(h, w)| (1, h, w))
            .ok_or_else(|| Error::Config("manifest has no target size".into()))
    }

    /// Marks the records owning `sample_ids` as excluded. Unknown ids are returned.
    pub fn apply_exclusions<'a>(&mut self, sample_ids: impl IntoIterator<Item = &'a str>) -> Vec<String> {
        let mut unknown = Vec::new();
        for id in sample_ids {
            let Some(rec) = self.record_for_sample(id).map(|r| r.id.clone()) else {
                unknown.push(id.to_string());
                continue;
            };
            let idx = self
                .records
                .binary_search_by(|r| r.id.cmp(&rec))
                .expect("record exists");
            self.records[idx].flags.insert(Flag::Excluded);
        }
        unknown
    }

    pub fn count_flag(&self, flag: Flag) -> usize {
        self.records.iter().filter(|r| r.has(flag)).count()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let manifest: Self = read_json(path)?;
        manifest.validate()?;
        Ok(manifest)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn record(id: &str, channels: usize) -> SampleRecord {
        SampleRecord {
            id: id.to_string(),
            source_path: PathBuf::from(id),
            raw_shape: (channels, 4, 4),
            raw_dtype: RawDtype::Uint8,
            flags: if channels > 1 {
                [Flag::MultiChannel].into()
            } else {
                BTreeSet::new()
            },
            mean_intensity: 0.5,
        }
    }

    pub(crate) fn manifest(ids: &[&str]) -> DatasetManifest {
        let mut records: Vec<_> = ids.iter().map(|id| record(id, 1)).collect();
        records.sort_by(|a, b| a.id.cmp(&b.id));
        DatasetManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            root: PathBuf::from("/corpus"),
            records,
            split_seed: 0,
            validation_fraction: DEFAULT_VALIDATION_FRACTION,
            preprocessing: Preprocessing {
                target_size: Some((4, 4)),
                ..Default::default()
            },
        }
    }

    #[test]
    fn channels_as_samples_expands_rgb() {
        let mut m = manifest(&["a.png", "b.png"]);
        m.records[1] = record("b.png", 3);
        m.preprocessing.channel_mode = ChannelMode::ChannelsAsSamples;
        let ids: Vec<_> = m.samples().into_iter().map(|s| s.id).collect();
        assert_eq!(ids, ["a.png", "b.png#c0", "b.png#c1", "b.png#c2"]);
        assert_eq!(m.record_for_sample("b.png#c2").unwrap().id, "b.png");
        assert!(m.record_for_sample("c.png#c0").is_none());
    }

    #[test]
    fn exclusions_are_idempotent_and_hide_samples() {
        let mut m = manifest(&["a", "b", "c"]);
        let unknown = m.apply_exclusions(["b", "zzz"]);
        assert_eq!(unknown, ["zzz"]);
        let once = m.clone();
        m.apply_exclusions(["b", "zzz"]);
        assert_eq!(m, once);
        let ids: Vec<_> = m.samples().into_iter().map(|s| s.id).collect();
        assert_eq!(ids, ["a", "c"]);
    }

    #[test]
    fn validate_catches_bad_fraction_and_duplicates() {
        let mut m = manifest(&["a", "b"]);
        m.validation_fraction = 1.0;
        assert!(m.validate().is_err());
        let mut m = manifest(&["a", "b"]);
        m.records[1].id = "a".into();
        assert!(m.validate().is_err());
    }

    #[test]
    fn manifest_json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let m = manifest(&["x", "y"]);
        m.save(&path).unwrap();
        assert_eq!(DatasetManifest::load(&path).unwrap(), m);
    }
}
