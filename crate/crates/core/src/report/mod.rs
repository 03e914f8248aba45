//! Inspection bundle, thumbnails, extreme montages and the exclusion workflow.

mod server;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, DatasetManifest};
use crate::error::{Error, Result};
use crate::io_util::{read_file, read_json, write_atomic, write_json};
use crate::pca::{self, ComponentReport, PcaModel, Projection};
use crate::pipeline::{self, PcaSummary, RunDir};
use crate::plot::{draw_text, encode_png, format_value, text_height, text_width};
use crate::tensor::{bilinear_resize, Tensor};

pub use server::{router, serve, AppState, ServeOptions, API_PREFIX, API_VERSION};

pub const THUMB_MAX_SIDE: usize = 128;
pub const CELL: u32 = 128;
const GAP: u32 = 4;
const MARGIN: u32 = 8;
const LABEL_H: u32 = 14;
pub const DEFAULT_FLAG: &str = "exclude";

fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

/// Thumbnail file for a sample id.
pub fn thumb_path(run: &RunDir, sample_id: &str) -> PathBuf {
    run.thumbs().join(format!("{}.png", &sha256_hex(&[sample_id.as_bytes()])[..20]))
}

/// The preprocessed sample scaled so its long side is at most [`THUMB_MAX_SIDE`].
pub fn make_thumbnail(manifest: &DatasetManifest, sample_id: &str) -> Result<GrayImage> {
    let sample = manifest
        .samples()
        .into_iter()
        .find(|s| s.id == sample_id)
        .ok_or_else(|| Error::NotFound(format!("sample {sample_id} is not an included manifest sample")))?;
    let record = &manifest.records[sample.record];
    let img: Tensor<f32> = data::load_normalized(&manifest.root, record, &manifest.preprocessing, sample.channel)?;
    let (_, h, w) = img.chw()?;
    let scale = THUMB_MAX_SIDE as f64 / h.max(w) as f64;
    let img = if scale < 1.0 {
        let th = ((h as f64 * scale).round() as usize).max(1);
        let tw = ((w as f64 * scale).round() as usize).max(1);
        bilinear_resize(&img, th, tw)?
    } else {
        img
    };
    let (_, h, w) = img.chw()?;
    Ok(GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = img.data()[y as usize * w + x as usize];
        Luma([(v * 255.0).round().clamp(0.0, 255.0) as u8])
    }))
}

/// Returns the cached thumbnail bytes, rendering the file first if it is missing.
pub fn ensure_thumbnail(run: &RunDir, manifest: &DatasetManifest, sample_id: &str) -> Result<Vec<u8>> {
    let path = thumb_path(run, sample_id);
    if path.exists() {
        return read_file(&path);
    }
    let img = make_thumbnail(manifest, sample_id)?;
    let rgb = image::DynamicImage::ImageLuma8(img).to_rgb8();
    let bytes = encode_png(&rgb)?;
    std::fs::create_dir_all(run.thumbs()).map_err(|e| Error::io(run.thumbs(), e))?;
    write_atomic(&path, &bytes)?;
    Ok(bytes)
}

fn paste_letterboxed(canvas: &mut RgbImage, thumb: &RgbImage, x0: u32, y0: u32) {
    for y in 0..CELL {
        for x in 0..CELL {
            canvas.put_pixel(x0 + x, y0 + y, Rgb([0, 0, 0]));
        }
    }
    // Small samples are enlarged by a whole factor, nearest neighbour.
    let zoom = (CELL / thumb.width().max(thumb.height()).max(1)).max(1);
    let (tw, th) = ((thumb.width() * zoom).min(CELL), (thumb.height() * zoom).min(CELL));
    let (ox, oy) = (x0 + (CELL - tw) / 2, y0 + (CELL - th) / 2);
    for y in 0..th {
        for x in 0..tw {
            canvas.put_pixel(ox + x, oy + y, *thumb.get_pixel(x / zoom, y / zoom));
        }
    }
}

/// Two-row grid: top row the lowest values, bottom row the highest, both
/// ascending left to right, with the component number and value range in the caption.
pub fn render_montage(run: &RunDir, manifest: &DatasetManifest, report: &ComponentReport) -> Result<Vec<u8>> {
    let m = report.extremes_per_side() as u32;
    if m == 0 {
        return Err(Error::Config("component report has no extremes to show".into()));
    }
    let header_h = 2 * text_height(1) + 10;
    let white = Rgb([235, 235, 235]);

    let lo = report.sorted.first().map_or(0.0, |s| s.value);
    let hi = report.sorted.last().map_or(0.0, |s| s.value);
    let title = format!(
        "PC{}  VAR {}  VALUES {} .. {}",
        report.component_index + 1,
        format_value(report.explained_variance),
        format_value(lo),
        format_value(hi)
    );
    let sub = format!("TOP: {m} LOWEST   BOTTOM: {m} HIGHEST   (ASCENDING LEFT TO RIGHT)");
    let grid_w = m * CELL + (m - 1) * GAP;
    let width = 2 * MARGIN + grid_w.max(text_width(&title, 1)).max(text_width(&sub, 1));
    let height = MARGIN + header_h + 2 * (CELL + LABEL_H) + GAP + MARGIN;
    let mut canvas = RgbImage::from_pixel(width, height, Rgb([32, 32, 32]));
    draw_text(&mut canvas, MARGIN, MARGIN, &title, 1, white);
    draw_text(&mut canvas, MARGIN, MARGIN + text_height(1) + 4, &sub, 1, Rgb([170, 170, 170]));

    for (row, items) in [&report.low_extremes, &report.high_extremes].into_iter().enumerate() {
        let y0 = MARGIN + header_h + row as u32 * (CELL + LABEL_H + GAP);
        for (col, item) in items.iter().enumerate() {
            let x0 = MARGIN + col as u32 * (CELL + GAP);
            let bytes = ensure_thumbnail(run, manifest, &item.sample_id)?;
            let thumb = image::load_from_memory(&bytes)
                .map_err(|e| Error::format(thumb_path(run, &item.sample_id), e.to_string()))?
                .to_rgb8();
            paste_letterboxed(&mut canvas, &thumb, x0, y0);
            let label = format_value(item.value);
            let lx = x0 + (CELL.saturating_sub(text_width(&label, 1))) / 2;
            draw_text(&mut canvas, lx, y0 + CELL + 4, &label, 1, white);
        }
    }
    encode_png(&canvas)
}

/// Curator-made state that survives regeneration of the run directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UserState {
    /// Sample id to flag names.
    pub flags: BTreeMap<String, BTreeSet<String>>,
    /// 0-based component index to free-text label.
    pub labels: BTreeMap<usize, String>,
}

impl UserState {
    pub fn load(run: &RunDir) -> Result<Self> {
        let flags = if run.flags().exists() { read_json(&run.flags())? } else { BTreeMap::new() };
        let labels = if run.labels().exists() { read_json(&run.labels())? } else { BTreeMap::new() };
        Ok(Self { flags, labels })
    }

    pub fn save_flags(&self, run: &RunDir) -> Result<()> {
        std::fs::create_dir_all(run.user()).map_err(|e| Error::io(run.user(), e))?;
        write_json(&run.flags(), &self.flags)
    }

    pub fn save_labels(&self, run: &RunDir) -> Result<()> {
        std::fs::create_dir_all(run.user()).map_err(|e| Error::io(run.user(), e))?;
        write_json(&run.labels(), &self.labels)
    }

    /// Returns whether anything changed.
    pub fn set_flag(&mut self, sample_id: &str, flag: &str, on: bool) -> bool {
        if on {
            self.flags.entry(sample_id.to_string()).or_default().insert(flag.to_string())
        } else {
            let Some(set) = self.flags.get_mut(sample_id) else {
                return false;
            };
            let changed = set.remove(flag);
            if set.is_empty() {
                self.flags.remove(sample_id);
            }
            changed
        }
    }

    pub fn flags_of(&self, sample_id: &str) -> Vec<String> {
        self.flags.get(sample_id).map(|s| s.iter().cloned().collect()).unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExclusionList {
    /// Sorted.
    pub sample_ids: Vec<String>,
    pub reasons: BTreeMap<String, String>,
    /// Hash of the bundle (manifest, latents, PCA) the flags were made on.
    pub created_from: String,
}

impl ExclusionList {
    pub fn to_json(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("exclusion list serializes");
        bytes.push(b'\n');
        bytes
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_json())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let list: Self = read_json(path)?;
        if list.sample_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::format(path, "sample_ids must be sorted and unique"));
        }
        Ok(list)
    }

    /// Marks the owning records excluded; returns ids the manifest does not know.
    pub fn apply(&self, manifest: &mut DatasetManifest) -> Vec<String> {
        manifest.apply_exclusions(self.sample_ids.iter().map(String::as_str))
    }
}

/// Every flagged sample, with its flag names as the reason.
pub fn exclusion_list(user: &UserState, bundle_hash: &str) -> ExclusionList {
    ExclusionList {
        sample_ids: user.flags.keys().cloned().collect(),
        reasons: user
            .flags
            .iter()
            .map(|(id, f)| (id.clone(), f.iter().cloned().collect::<Vec<_>>().join(",")))
            .collect(),
        created_from: bundle_hash.to_string(),
    }
}

/// Computed inspection artifacts of a run, loaded once.
#[derive(Debug, Clone)]
pub struct InspectionBundle {
    pub run: RunDir,
    pub manifest: DatasetManifest,
    pub pca: PcaModel,
    pub summary: PcaSummary,
    pub projection: Projection,
    pub reports: Vec<ComponentReport>,
    pub hash: String,
    rows: HashMap<String, usize>,
}

impl InspectionBundle {
    pub fn load(run: &RunDir, extremes: usize) -> Result<Self> {
        let manifest = run.load_manifest()?;
        let pca_model = run.load_pca()?;
        let latents = run.load_latents()?;
        let summary = pipeline::load_pca_summary(run)?;
        for id in &latents.sample_ids {
            if manifest.record_for_sample(id).is_none() {
                return Err(Error::format(
                    run.latents(),
                    format!("sample {id} is not in the manifest; re-run `encode`"),
                ));
            }
        }
        let projection = pca::transform(&pca_model, &latents)?;
        let reports = (0..pca_model.k())
            .map(|c| pca::component_report(&pca_model, &projection, c, extremes))
            .collect::<Result<Vec<_>>>()?;
        let hash = sha256_hex(&[
            &read_file(&run.manifest())?,
            &read_file(&run.latents())?,
            &read_file(&run.pca())?,
        ]);
        let rows = projection.sample_ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        Ok(Self {
            run: run.clone(),
            manifest,
            pca: pca_model,
            summary,
            projection,
            reports,
            hash,
            rows,
        })
    }

    pub fn row_of(&self, sample_id: &str) -> Option<usize> {
        self.rows.get(sample_id).copied()
    }

    pub fn variance_share(&self, component: usize) -> f64 {
        let total = self.summary.total_variance;
        if total > 0.0 {
            self.pca.explained_variance[component] / total
        } else {
            0.0
        }
    }
}

/// Writes the exclusion list made from the run's user flags to `out`.
pub fn export_exclusion_list(bundle: &InspectionBundle, user: &UserState, out: &Path) -> Result<ExclusionList> {
    let list = exclusion_list(user, &bundle.hash);
    list.save(out)?;
    Ok(list)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests::manifest;

    #[test]
    fn flags_are_idempotent_and_cleaned_up() {
        let mut s = UserState::default();
        assert!(s.set_flag("a", DEFAULT_FLAG, true));
        assert!(!s.set_flag("a", DEFAULT_FLAG, true));
        assert!(s.set_flag("a", DEFAULT_FLAG, false));
        assert!(!s.set_flag("a", DEFAULT_FLAG, false));
        assert!(s.flags.is_empty());
    }

    #[test]
    fn exclusion_list_from_flags_and_apply() {
        let mut s = UserState::default();
        assert!(exclusion_list(&s, "h").sample_ids.is_empty());
        for id in ["c", "a", "b"] {
            s.set_flag(id, DEFAULT_FLAG, true);
        }
        s.set_flag("a", "edge_case", true);
        let list = exclusion_list(&s, "h");
        assert_eq!(list.sample_ids, ["a", "b", "c"]);
        assert_eq!(list.reasons["a"], "edge_case,exclude");

        let mut m = manifest(&["a", "b", "c", "d", "e", "f", "g", "h", "i"]);
        assert!(list.apply(&mut m).is_empty());
        let once = m.clone();
        list.apply(&mut m);
        assert_eq!(m, once);
        let split = data::split(&m).unwrap();
        for id in ["a", "b", "c"] {
            assert!(!split.train.iter().chain(&split.validation).any(|s| s == id));
        }
    }

    #[test]
    fn exclusion_list_roundtrip_rejects_unsorted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.json");
        let list = ExclusionList {
            sample_ids: vec!["a".into(), "b".into()],
            reasons: BTreeMap::new(),
            created_from: "h".into(),
        };
        list.save(&path).unwrap();
        assert_eq!(ExclusionList::load(&path).unwrap(), list);
        std::fs::write(&path, r#"{"sample_ids":["b","a"],"reasons":{},"created_from":""}"#).unwrap();
        assert!(ExclusionList::load(&path).is_err());
    }

    #[test]
    fn user_state_persists() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path());
        let mut s = UserState::default();
        s.set_flag("x.png", DEFAULT_FLAG, true);
        s.labels.insert(2, "cutoff".into());
        s.save_flags(&run).unwrap();
        s.save_labels(&run).unwrap();
        assert_eq!(UserState::load(&run).unwrap(), s);
    }
}
