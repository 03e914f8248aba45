//! Run-directory layout, run configuration, and the pipeline steps the CLI exposes.
//!
//! ```text
//! run/
//!   manifest.json  scan_report.json
//!   checkpoints/   train_log.csv  train_log.png
//!   latents.bin    latents.ids.json
//!   pca.bin        reports/
//!   thumbs/        exclusions.json
//!   user/          flags.json  labels.json
//! ```
//!
//! Everything except `user/` is regenerable from the corpus, config and seeds.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, DatasetManifest, Preprocessing, ScanOptions, ScanReport, DEFAULT_VALIDATION_FRACTION};
use crate::error::{Error, Result};
use crate::io_util::{read_json, write_json};
use crate::model::{build_model, load_checkpoint, AutoencoderConfig, AutoencoderModel, LatentTap};
use crate::pca::{self, EncodeScope, LatentMatrix, PcaModel, Projection};
use crate::report::{self, ExclusionList};
use crate::tensor::Dtype;
use crate::train::{self, TrainConfig, TrainLog, FINAL_CHECKPOINT};

/// Bottleneck size used when the config names no architecture.
pub const DEFAULT_TARGET_LATENT: usize = 8192;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn scan_report(&self) -> PathBuf {
        self.root.join("scan_report.json")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn final_checkpoint(&self) -> PathBuf {
        self.checkpoints().join(FINAL_CHECKPOINT)
    }
    pub fn train_log(&self) -> PathBuf {
        self.root.join("train_log.csv")
    }
    pub fn latents(&self) -> PathBuf {
        self.root.join("latents.bin")
    }
    pub fn pca(&self) -> PathBuf {
        self.root.join("pca.bin")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn pca_summary(&self) -> PathBuf {
        self.reports().join("pca_summary.json")
    }
    /// `index` is 0-based; files are numbered from 1.
    pub fn component_report(&self, index: usize) -> PathBuf {
        self.reports().join(format!("pc{:03}.json", index + 1))
    }
    pub fn montage(&self, index: usize) -> PathBuf {
        self.reports().join(format!("montage_pc{:03}.png", index + 1))
    }
    pub fn value_curves(&self) -> PathBuf {
        self.reports().join("value_curves.csv")
    }
    pub fn thumbs(&self) -> PathBuf {
        self.root.join("thumbs")
    }
    pub fn exclusions(&self) -> PathBuf {
        self.root.join("exclusions.json")
    }
    pub fn user(&self) -> PathBuf {
        self.root.join("user")
    }
    pub fn flags(&self) -> PathBuf {
        self.user().join("flags.json")
    }
    pub fn labels(&self) -> PathBuf {
        self.user().join("labels.json")
    }

    /// `path` must exist; otherwise the error names it and the step that creates it.
    pub fn require(&self, path: &Path, producer: &str) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: format!("run `{producer}` first"),
            })
        }
    }

    pub fn load_manifest(&self) -> Result<DatasetManifest> {
        self.require(&self.manifest(), "scan")?;
        DatasetManifest::load(&self.manifest())
    }

    pub fn load_model(&self) -> Result<AutoencoderModel<f32>> {
        self.require(&self.final_checkpoint(), "train")?;
        Ok(load_checkpoint::<f32>(&self.final_checkpoint())?.model)
    }

    pub fn load_latents(&self) -> Result<LatentMatrix> {
        self.require(&self.latents(), "encode")?;
        LatentMatrix::load(&self.latents())
    }

    pub fn load_pca(&self) -> Result<PcaModel> {
        self.require(&self.pca(), "pca")?;
        PcaModel::load(&self.pca())
    }
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanSection {
    pub validation_fraction: f64,
    /// Defaults to the run seed.
    pub split_seed: Option<u64>,
    pub preprocessing: Preprocessing,
}

impl Default for ScanSection {
    fn default() -> Self {
        Self {
            validation_fraction: DEFAULT_VALIDATION_FRACTION,
            split_seed: None,
            preprocessing: Preprocessing::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub depth: Option<usize>,
    pub base_channels: Option<usize>,
    /// Used when depth and base_channels are not both given.
    pub target_latent_size: Option<usize>,
    pub kernel_size: usize,
    pub residual_blocks_per_stage: usize,
    pub latent_tap: LatentTap,
    /// Weight-initialization seed; defaults to the run seed.
    pub init_seed: Option<u64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            depth: None,
            base_channels: None,
            target_latent_size: None,
            kernel_size: 3,
            residual_blocks_per_stage: 2,
            latent_tap: LatentTap::PostActivation,
            init_seed: None,
        }
    }
}

impl ModelSection {
    pub fn config(&self, input_shape: (usize, usize, usize)) -> Result<AutoencoderConfig> {
        let mut cfg = match (self.depth, self.base_channels) {
            (Some(d), Some(b)) => AutoencoderConfig {
                target_latent_size: self.target_latent_size,
                ..AutoencoderConfig::new(input_shape, d, b)
            },
            _ => AutoencoderConfig::for_latent_size(input_shape, self.target_latent_size.unwrap_or(DEFAULT_TARGET_LATENT))?,
        };
        cfg.kernel_size = self.kernel_size;
        cfg.residual_blocks_per_stage = self.residual_blocks_per_stage;
        cfg.latent_tap = self.latent_tap;
        cfg.resolve()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcaSection {
    /// Defaults to `min(N - 1, 64, D)`.
    pub k: Option<usize>,
    /// Which rows the PCA is fitted on; every sample is always projected.
    pub fit_scope: EncodeScope,
    /// Components included in the value-curve export.
    pub curves: usize,
}

impl Default for PcaSection {
    fn default() -> Self {
        Self {
            k: None,
            fit_scope: EncodeScope::All,
            curves: pca::DEFAULT_CURVES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// Extremes shown per side.
    pub top: usize,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self { top: pca::DEFAULT_EXTREMES }
    }
}

/// Contents of the `--config` TOML file. Every section and key is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Run seed: split, weight init and batch shuffling unless set individually.
    pub seed: Option<u64>,
    pub scan: ScanSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub pca: PcaSection,
    pub report: ReportSection,
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    /// Applies an explicit seed (e.g. from the command line) over the file's.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if seed.is_some() {
            self.seed = seed;
        }
        if let Some(s) = self.seed {
            self.train.seed = s;
        }
        self
    }

    pub fn base_seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn scan_options(&self) -> ScanOptions {
        ScanOptions {
            split_seed: self.scan.split_seed.unwrap_or(self.base_seed()),
            validation_fraction: self.scan.validation_fraction,
            preprocessing: self.scan.preprocessing.clone(),
        }
    }

    pub fn init_seed(&self) -> u64 {
        self.model.init_seed.unwrap_or(self.base_seed())
    }
}

/// Scans `corpus` into `run/manifest.json`, re-applying `run/exclusions.json` if present.
pub fn scan(corpus: &Path, run: &RunDir, config: &RunConfig) -> Result<(DatasetManifest, ScanReport)> {
    let (mut manifest, report) = data::scan_corpus(corpus, &config.scan_options())?;
    if run.exclusions().exists() {
        let list = ExclusionList::load(&run.exclusions())?;
        let unknown = manifest.apply_exclusions(list.sample_ids.iter().map(String::as_str));
        for id in unknown {
            log::warn!("exclusion list names unknown sample {id}");
        }
    }
    mkdir(&run.root)?;
    manifest.save(&run.manifest())?;
    write_json(&run.scan_report(), &report)?;
    Ok((manifest, report))
}

/// Trains from scratch, or continues from `resume`, writing checkpoints and the loss curves.
pub fn train(run: &RunDir, config: &RunConfig, resume: Option<&Path>) -> Result<TrainLog> {
    let manifest = run.load_manifest()?;
    let ckpt_dir = run.checkpoints();
    let (_, log) = match resume {
        Some(path) => {
            run.require(path, "train")?;
            train::resume(path, &manifest, &config.train, Some(&ckpt_dir))?
        }
        None => {
            let model_cfg = config.model.config(manifest.target_shape()?)?;
            let model = build_model(&model_cfg, config.init_seed())?;
            train::train(model, &manifest, &config.train, Some(&ckpt_dir))?
        }
    };
    train::export_loss_curves(&log, &run.train_log())?;
    Ok(log)
}

/// Encodes the corpus with the final checkpoint into `latents.bin`.
pub fn encode(run: &RunDir, scope: EncodeScope) -> Result<LatentMatrix> {
    let manifest = run.load_manifest()?;
    let model = run.load_model()?;
    let latents = pca::encode_corpus(&model, &manifest, scope)?;
    latents.save(&run.latents(), Dtype::F32)?;
    Ok(latents)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaSummary {
    pub k: usize,
    pub fit_scope: EncodeScope,
    pub fitted_samples: usize,
    pub projected_samples: usize,
    pub latent_dim: usize,
    pub explained_variance: Vec<f64>,
    /// Sum of all per-dimension variances of the fitted latents.
    pub total_variance: f64,
}

fn total_variance(latents: &LatentMatrix) -> f64 {
    let n = latents.rows();
    if n < 2 {
        return 0.0;
    }
    (0..latents.dim)
        .map(|j| {
            let mean = (0..n).map(|i| latents.row(i)[j]).sum::<f64>() / n as f64;
            (0..n).map(|i| (latents.row(i)[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        })
        .sum()
}

fn subset(latents: &LatentMatrix, ids: &[String]) -> Result<LatentMatrix> {
    let keep: HashSet<&str> = ids.iter().map(String::as_str).collect();
    let mut sample_ids = Vec::new();
    let mut values = Vec::new();
    for (i, id) in latents.sample_ids.iter().enumerate() {
        if keep.contains(id.as_str()) {
            sample_ids.push(id.clone());
            values.extend_from_slice(latents.row(i));
        }
    }
    LatentMatrix::new(sample_ids, latents.dim, values)
}

/// Fits PCA, writes `pca.bin`, one report per component and the value curves.
pub fn fit(run: &RunDir, config: &RunConfig) -> Result<(PcaModel, Projection)> {
    let latents = run.load_latents()?;
    let manifest = run.load_manifest()?;
    let fit_rows = match config.pca.fit_scope {
        EncodeScope::All => latents.clone(),
        EncodeScope::TrainOnly => subset(&latents, &data::split(&manifest)?.train)?,
    };
    let k = config.pca.k.unwrap_or_else(|| pca::default_k(fit_rows.rows(), fit_rows.dim));
    let model = pca::fit_pca(&fit_rows, k)?;
    let projection = pca::transform(&model, &latents)?;
    model.save(&run.pca())?;

    let reports = run.reports();
    mkdir(&reports)?;
    for c in 0..model.k() {
        let r = pca::component_report(&model, &projection, c, config.report.top)?;
        pca::save_report(&r, &run.component_report(c))?;
    }
    pca::export_value_curves(&projection, config.pca.curves.min(model.k()), &run.value_curves())?;
    let summary = PcaSummary {
        k: model.k(),
        fit_scope: config.pca.fit_scope,
        fitted_samples: fit_rows.rows(),
        projected_samples: projection.rows(),
        latent_dim: model.dim(),
        explained_variance: model.explained_variance.clone(),
        total_variance: total_variance(&fit_rows),
    };
    write_json(&run.pca_summary(), &summary)?;
    Ok((model, projection))
}

pub fn load_pca_summary(run: &RunDir) -> Result<PcaSummary> {
    run.require(&run.pca_summary(), "pca")?;
    read_json(&run.pca_summary())
}

/// Renders the montage for a 0-based component, regenerating any missing thumbnails.
pub fn report(run: &RunDir, component: usize, top: usize) -> Result<(PathBuf, pca::ComponentReport)> {
    let manifest = run.load_manifest()?;
    let model = run.load_pca()?;
    let latents = run.load_latents()?;
    if component >= model.k() {
        return Err(Error::NotFound(format!(
            "component {} does not exist; the PCA has {} components",
            component + 1,
            model.k()
        )));
    }
    let projection = pca::transform(&model, &latents)?;
    let r = pca::component_report(&model, &projection, component, top)?;
    let png = report::render_montage(run, &manifest, &r)?;
    let path = run.montage(component);
    crate::io_util::write_atomic(&path, &png)?;
    Ok((path, r))
}
