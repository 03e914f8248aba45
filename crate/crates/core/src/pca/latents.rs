use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, DatasetManifest};
use crate::error::{Error, Result};
use crate::io_util::{read_file, read_json, write_atomic, write_json};
use crate::model::AutoencoderModel;
use crate::tensor::{Dtype, Scalar, Tensor};
use crate::train::{ManifestSamples, SampleSource};

const MAGIC: &[u8; 8] = b"LAUDLATN";
const VERSION: u32 = 1;

/// Flattened encodings, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMatrix {
    pub sample_ids: Vec<String>,
    /// Row length D.
    pub dim: usize,
    /// Row-major `N x D`.
    pub values: Vec<f64>,
}

/// Which samples to encode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodeScope {
    #[default]
    All,
    TrainOnly,
}

impl LatentMatrix {
    pub fn new(sample_ids: Vec<String>, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != sample_ids.len() * dim {
            return Err(Error::Shape(format!(
                "latent matrix of {} rows x {dim} needs {} values, got {}",
                sample_ids.len(),
                sample_ids.len() * dim,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "latent value for sample {} is not finite",
                sample_ids[i / dim.max(1)]
            )));
        }
        Ok(Self { sample_ids, dim, values })
    }

    pub fn rows(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Writes `path` and the id list to `path` with extension `ids.json`.
    pub fn save(&self, path: &Path, dtype: Dtype) -> Result<()> {
        let mut out = Vec::with_capacity(32 + self.values.len() * dtype.size());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        out.extend_from_slice(&dtype.code().to_le_bytes());
        for &v in &self.values {
            match dtype {
                Dtype::F32 => (v as f32).write_le(&mut out),
                Dtype::F64 => v.write_le(&mut out),
            }
        }
        write_atomic(path, &out)?;
        write_json(&ids_path(path), &self.sample_ids)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let bad = |m: &str| Error::format(path, m);
        if bytes.len() < 32 || &bytes[..8] != MAGIC {
            return Err(bad("not a latent matrix (bad magic)"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap()) as usize;
        if u32_at(8) != VERSION {
            return Err(bad("unsupported latent matrix version"));
        }
        let (n, d) = (u64_at(12), u64_at(20));
        let dtype = Dtype::from_code(u32_at(28)).ok_or_else(|| bad("unknown dtype"))?;
        let payload = &bytes[32..];
        if n.checked_mul(d).and_then(|c| c.checked_mul(dtype.size())) != Some(payload.len()) {
            return Err(bad(&format!("payload size does not match {n} x {d} {dtype:?}")));
        }
        let values = payload.chunks_exact(dtype.size()).map(|c| dtype.decode(c)).collect();
        let ids: Vec<String> = read_json(&ids_path(path))?;
        if ids.len() != n {
            return Err(bad(&format!("{} ids in sidecar for {n} rows", ids.len())));
        }
        Self::new(ids, d, values)
    }
}

pub fn ids_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("ids.json")
}

/// Encodes `images` in parallel; row `i` is image `i`'s flattened latent.
pub fn encode_source(
    model: &AutoencoderModel<f32>,
    source: &dyn SampleSource,
    sample_ids: Vec<String>,
) -> Result<LatentMatrix> {
    let dim = model.config.latent_size()?;
    let rows: Vec<Vec<f32>> = (0..source.len())
        .into_par_iter()
        .map(|i| {
            let x: Tensor<f32> = source.load(i)?;
            Ok(model.encode(&x)?.into_data())
        })
        .collect::<Result<_>>()?;
    let values = rows.into_iter().flatten().map(f64::from).collect();
    LatentMatrix::new(sample_ids, dim, values)
}

/// Latents of the manifest's included samples, in sample-id order.
pub fn encode_corpus(model: &AutoencoderModel<f32>, manifest: &DatasetManifest, scope: EncodeScope) -> Result<LatentMatrix> {
    let target = manifest.target_shape()?;
    if model.config.input_shape != target {
        return Err(Error::Shape(format!(
            "model input {:?} does not match preprocessing output {:?}",
            model.config.input_shape, target
        )));
    }
    let source = match scope {
        EncodeScope::All => ManifestSamples::all(manifest),
        EncodeScope::TrainOnly => ManifestSamples::for_ids(manifest, &data::split(manifest)?.train)?,
    };
    let ids = source.ids();
    encode_source(model, &source, ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("latents.bin");
        let m = LatentMatrix::new(vec!["a".into(), "b".into()], 3, vec![0.5, 1.0, -2.0, 3.25, 0.0, 8.0]).unwrap();
        m.save(&path, Dtype::F32).unwrap();
        assert_eq!(LatentMatrix::load(&path).unwrap(), m);
        m.save(&path, Dtype::F64).unwrap();
        assert_eq!(LatentMatrix::load(&path).unwrap(), m);
        std::fs::write(&path, b"junk").unwrap();
        assert!(matches!(LatentMatrix::load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn rejects_non_finite_and_bad_shape() {
        assert!(LatentMatrix::new(vec!["a".into()], 2, vec![1.0]).is_err());
        assert!(LatentMatrix::new(vec!["a".into()], 1, vec![f64::NAN]).is_err());
    }
}
