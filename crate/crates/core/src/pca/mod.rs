//! PCA over latent matrices, per-component sorting and extreme extraction.

mod latents;

use std::path::{Path, PathBuf};

use image::Rgb;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::{read_file, read_json, write_atomic, write_json};
use crate::plot::{save_png, LineChart, Series};
use crate::tensor::Scalar;

pub use latents::{encode_corpus, encode_source, ids_path, EncodeScope, LatentMatrix};

pub const DEFAULT_MAX_COMPONENTS: usize = 64;
pub const DEFAULT_EXTREMES: usize = 10;
pub const DEFAULT_CURVES: usize = 15;

const MAGIC: &[u8; 8] = b"LAUDPCA\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    /// Column means, length D.
    pub mean: Vec<f64>,
    /// Row-major `K x D`, orthonormal rows.
    pub components: Vec<f64>,
    /// Descending, `sigma^2 / (N - 1)`.
    pub explained_variance: Vec<f64>,
    /// Rows the model was fitted on.
    pub n_samples: usize,
}

/// Which decomposition computes the components.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcaMethod {
    /// Gram route when `N < D`, SVD otherwise.
    Auto,
    /// Thin SVD of the centered `N x D` matrix.
    Svd,
    /// Eigendecomposition of the `N x N` Gram matrix.
    Gram,
}

/// `min(N - 1, 64, D)`.
pub fn default_k(n: usize, d: usize) -> usize {
    n.saturating_sub(1).min(DEFAULT_MAX_COMPONENTS).min(d)
}

impl PcaModel {
    pub fn k(&self) -> usize {
        self.explained_variance.len()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn component(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.components[i * d..(i + 1) * d]
    }

    pub fn total_variance_share(&self, total_variance: f64) -> Vec<f64> {
        self.explained_variance
            .iter()
            .map(|v| if total_variance > 0.0 { v / total_variance } else { 0.0 })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (k, d) = (self.k(), self.dim());
        let mut out = Vec::with_capacity(40 + 8 * (d + k + k * d));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [self.n_samples, d, k] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&f64::DTYPE.code().to_le_bytes());
        for &v in self.mean.iter().chain(&self.explained_variance).chain(&self.components) {
            v.write_le(&mut out);
        }
        write_atomic(path, &out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let bad = |m: &str| Error::format(path, m);
        if bytes.len() < 40 || &bytes[..8] != MAGIC {
            return Err(bad("not a PCA model (bad magic)"));
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap()) as usize;
        if u32::from_le_bytes(bytes[8..12].try_into().unwrap()) != VERSION {
            return Err(bad("unsupported PCA model version"));
        }
        let (n_samples, d, k) = (u64_at(12), u64_at(20), u64_at(28));
        if u32::from_le_bytes(bytes[36..40].try_into().unwrap()) != f64::DTYPE.code() {
            return Err(bad("PCA payload must be f64"));
        }
        let payload = &bytes[40..];
        let count = d + k + k * d;
        if payload.len() != count * 8 {
            return Err(bad(&format!("payload size does not match D={d}, K={k}")));
        }
        let vals: Vec<f64> = payload.chunks_exact(8).map(f64::read_le).collect();
        Ok(Self {
            mean: vals[..d].to_vec(),
            explained_variance: vals[d..d + k].to_vec(),
            components: vals[d + k..].to_vec(),
            n_samples,
        })
    }

    /// Largest deviation of `C Cᵀ` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let k = self.k();
        let mut worst = 0.0f64;
        for i in 0..k {
            for j in i..k {
                let dot: f64 = self.component(i).iter().zip(self.component(j)).map(|(a, b)| a * b).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }
}

fn centered(latents: &LatentMatrix) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = (latents.rows(), latents.dim);
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(latents.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let x = DMatrix::from_fn(n, d, |i, j| latents.values[i * d + j] - mean[j]);
    (mean, x)
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// Removes the projections onto `basis` (twice, for numerical safety) and normalizes.
fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) -> f64 {
    for _ in 0..2 {
        for b in basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
    }
    normalize(v)
}

/// Flips `v` so its largest-magnitude entry (first one on ties) is positive.
fn canonical_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// One-sided Jacobi SVD of a square matrix: `(singular values, V)` with `V` column-major.
fn jacobi_svd(a: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = a.ncols();
    let m = a.nrows();
    let mut u = a.as_slice().to_vec();
    let mut v = vec![0.0; n * n];
    for j in 0..n {
        v[j * n + j] = 1.0;
    }
    let rotate = |buf: &mut [f64], len: usize, p: usize, q: usize, c: f64, s: f64| {
        let (lo, hi) = buf.split_at_mut(q * len);
        let cp = &mut lo[p * len..(p + 1) * len];
        let cq = &mut hi[..len];
        for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
            let (a, b) = (*x, *y);
            *x = c * a - s * b;
            *y = s * a + c * b;
        }
    };
    for _ in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (cp, cq) = (&u[p * m..(p + 1) * m], &u[q * m..(q + 1) * m]);
                let alpha: f64 = cp.iter().map(|x| x * x).sum();
                let beta: f64 = cq.iter().map(|x| x * x).sum();
                let gamma: f64 = cp.iter().zip(cq).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut u, m, p, q, c, s);
                rotate(&mut v, n, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let sigmas = (0..n).map(|j| u[j * m..(j + 1) * m].iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    (sigmas, v)
}

/// Singular values (descending) and matching right singular vectors, possibly fewer than k.
///
/// QR of the tall orientation, then one-sided Jacobi on the square `R`,
/// which stays accurate when the centered data is rank deficient.
fn svd_route(x: &DMatrix<f64>) -> Vec<(f64, Vec<f64>)> {
    let wide = x.nrows() < x.ncols();
    let tall = if wide { x.transpose() } else { x.clone() };
    let qr = tall.qr();
    let r = qr.r();
    let k = r.ncols();
    let mut pairs: Vec<(f64, Vec<f64>)> = if wide {
        // x = Rᵀ Qᵀ and Rᵀ = U Σ Wᵀ, so x = U Σ (Q W)ᵀ.
        let (sigmas, w) = jacobi_svd(&r.transpose());
        let w = DMatrix::from_column_slice(k, k, &w);
        let qw = qr.q() * w;
        sigmas
            .into_iter()
            .enumerate()
            .map(|(j, s)| (s, qw.column(j).iter().copied().collect()))
            .collect()
    } else {
        let (sigmas, v) = jacobi_svd(&r);
        sigmas
            .into_iter()
            .enumerate()
            .map(|(j, s)| (s, v[j * k..(j + 1) * k].to_vec()))
            .collect()
    };
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    pairs
}

fn gram_route(x: &DMatrix<f64>) -> Vec<(f64, Vec<f64>)> {
    let gram = x * x.transpose();
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    order
        .into_iter()
        .filter_map(|i| {
            let lambda = eig.eigenvalues[i].max(0.0);
            let sigma = lambda.sqrt();
            // Directions with negligible singular value are left to the completion step.
            if lambda <= scale * 1e-13 || sigma == 0.0 {
                return None;
            }
            let u = eig.eigenvectors.column(i);
            let v: Vec<f64> = (x.transpose() * u).iter().map(|c| c / sigma).collect();
            Some((sigma, v))
        })
        .collect()
}

/// Fits the top-`k` principal directions of `latents`.
pub fn fit_pca(latents: &LatentMatrix, k: usize) -> Result<PcaModel> {
    fit_pca_with(latents, k, PcaMethod::Auto)
}

pub fn fit_pca_with(latents: &LatentMatrix, k: usize, method: PcaMethod) -> Result<PcaModel> {
    let (n, d) = (latents.rows(), latents.dim);
    if n < 2 {
        return Err(Error::Config(format!("PCA needs at least 2 samples, have {n}")));
    }
    let max_k = (n - 1).min(d);
    if k < 1 || k > max_k {
        return Err(Error::Config(format!("k must be in 1..={max_k} for N={n}, D={d}; got {k}")));
    }
    let (mean, x) = centered(latents);
    let use_gram = match method {
        PcaMethod::Auto => n < d,
        PcaMethod::Svd => false,
        PcaMethod::Gram => true,
    };
    let pairs = if use_gram { gram_route(&x) } else { svd_route(&x) };
    let sigma_max = pairs.first().map_or(0.0, |p| p.0);

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for (sigma, mut v) in pairs.into_iter().take(k) {
        // Rank-deficient directions carry no signal; let the completion step choose them.
        if sigma <= sigma_max * 1e-12 || sigma == 0.0 {
            break;
        }
        if orthogonalize(&mut v, &basis) < 0.5 {
            break;
        }
        basis.push(v);
        variances.push(sigma * sigma / (n - 1) as f64);
    }
    // Complete with standard basis vectors so the rows stay orthonormal.
    let mut e = 0;
    while basis.len() < k && e < d {
        let mut v = vec![0.0; d];
        v[e] = 1.0;
        e += 1;
        if orthogonalize(&mut v, &basis) > 1e-6 {
            basis.push(v);
            variances.push(0.0);
        }
    }
    for v in &mut basis {
        canonical_sign(v);
    }
    let model = PcaModel {
        mean,
        components: basis.concat(),
        explained_variance: variances,
        n_samples: n,
    };
    if model.orthonormality_error() > 1e-8 {
        return Err(Error::Numeric(format!(
            "PCA components lost orthonormality (error {:.3e})",
            model.orthonormality_error()
        )));
    }
    Ok(model)
}

/// Component values of every sample: `(x - mean) Cᵀ`, row-major `N x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub sample_ids: Vec<String>,
    pub k: usize,
    pub values: Vec<f64>,
}

impl Projection {
    pub fn rows(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.k..(i + 1) * self.k]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows()).map(|i| self.values[i * self.k + c]).collect()
    }
}

pub fn transform(pca: &PcaModel, latents: &LatentMatrix) -> Result<Projection> {
    if latents.dim != pca.dim() {
        return Err(Error::Shape(format!(
            "latents have dimension {}, PCA was fitted on {}",
            latents.dim,
            pca.dim()
        )));
    }
    let k = pca.k();
    let mut values = Vec::with_capacity(latents.rows() * k);
    let mut centered = vec![0.0; pca.dim()];
    for i in 0..latents.rows() {
        for ((c, x), m) in centered.iter_mut().zip(latents.row(i)).zip(&pca.mean) {
            *c = x - m;
        }
        for j in 0..k {
            values.push(centered.iter().zip(pca.component(j)).map(|(a, b)| a * b).sum());
        }
    }
    Ok(Projection {
        sample_ids: latents.sample_ids.clone(),
        k,
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedSample {
    pub sample_id: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    /// 0-based.
    pub component_index: usize,
    pub explained_variance: f64,
    /// Ascending by value, ties by sample id.
    pub sorted: Vec<RankedSample>,
    /// First `m` of `sorted`.
    pub low_extremes: Vec<RankedSample>,
    /// Last `m` of `sorted`, still ascending.
    pub high_extremes: Vec<RankedSample>,
    /// Every sample has the same value; extremes are decided by id alone.
    pub degenerate: bool,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl ComponentReport {
    pub fn extremes_per_side(&self) -> usize {
        self.low_extremes.len()
    }
}

/// Sorts every sample by one component and cuts the `m` lowest and highest.
///
/// When `2m > N`, `m` is reduced to `N / 2` so the extremes stay disjoint.
pub fn component_report(pca: &PcaModel, projection: &Projection, component_index: usize, m: usize) -> Result<ComponentReport> {
    if component_index >= pca.k() || component_index >= projection.k {
        return Err(Error::NotFound(format!(
            "component {component_index} (0-based) out of range, model has {} components",
            pca.k()
        )));
    }
    if m == 0 {
        return Err(Error::Config("m must be >= 1".into()));
    }
    let n = projection.rows();
    let mut sorted: Vec<RankedSample> = (0..n)
        .map(|i| RankedSample {
            sample_id: projection.sample_ids[i].clone(),
            value: projection.values[i * projection.k + component_index],
        })
        .collect();
    sorted.sort_by(|a, b| a.value.total_cmp(&b.value).then_with(|| a.sample_id.cmp(&b.sample_id)));

    let mut warnings = Vec::new();
    let per_side = if 2 * m > n {
        let clamped = n / 2;
        let msg = format!("requested {m} extremes per side but only {n} samples; showing {clamped}");
        log::warn!("{msg}");
        warnings.push(msg);
        clamped
    } else {
        m
    };
    let degenerate = match (sorted.first(), sorted.last()) {
        (Some(a), Some(b)) => {
            let scale = a.value.abs().max(b.value.abs()).max(1.0);
            b.value - a.value <= 1e-12 * scale
        }
        _ => true,
    };
    if degenerate {
        warnings.push("all samples share one value; extremes are ordered by id only".into());
    }
    Ok(ComponentReport {
        component_index,
        explained_variance: pca.explained_variance[component_index],
        low_extremes: sorted[..per_side].to_vec(),
        high_extremes: sorted[n - per_side..].to_vec(),
        sorted,
        degenerate,
        warnings,
    })
}

pub fn save_report(report: &ComponentReport, path: &Path) -> Result<()> {
    write_json(path, report)
}

pub fn load_report(path: &Path) -> Result<ComponentReport> {
    read_json(path)
}

/// Writes `<stem>.csv` with one sorted column per component and `<stem>.png` overlaying them.
///
/// Curve brightness increases with the component number.
pub fn export_value_curves(projection: &Projection, first_n: usize, csv_path: &Path) -> Result<PathBuf> {
    if first_n < 1 || first_n > projection.k {
        return Err(Error::Config(format!(
            "first_n must be in 1..={}, got {first_n}",
            projection.k
        )));
    }
    let columns: Vec<Vec<f64>> = (0..first_n)
        .map(|c| {
            let mut col = projection.column(c);
            col.sort_by(f64::total_cmp);
            col
        })
        .collect();
    let mut csv = String::from("rank");
    for c in 0..first_n {
        csv.push_str(&format!(",pc{}", c + 1));
    }
    csv.push('\n');
    for r in 0..projection.rows() {
        csv.push_str(&r.to_string());
        for col in &columns {
            csv.push_str(&format!(",{}", col[r]));
        }
        csv.push('\n');
    }
    write_atomic(csv_path, csv.as_bytes())?;

    let n = projection.rows().max(2) as f64 - 1.0;
    let series = columns
        .iter()
        .enumerate()
        .map(|(c, col)| {
            let t = if first_n > 1 { c as f64 / (first_n - 1) as f64 } else { 0.0 };
            let level = (20.0 + t * 200.0).round() as u8;
            Series {
                points: col.iter().enumerate().map(|(r, &v)| (r as f64 / n, v)).collect(),
                color: Rgb([level, level, level.saturating_add(30)]),
            }
        })
        .collect();
    let chart = LineChart {
        width: 480,
        height: 320,
        title: format!("SORTED VALUES, PC1-PC{first_n}"),
        series,
    };
    let png = csv_path.with_extension("png");
    save_png(&chart.render(), &png)?;
    Ok(png)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matrix(n: usize, d: usize, f: impl Fn(usize, usize) -> f64) -> LatentMatrix {
        let ids = (0..n).map(|i| format!("s{i:03}")).collect();
        let values = (0..n * d).map(|x| f(x / d, x % d)).collect();
        LatentMatrix::new(ids, d, values).unwrap()
    }

    fn random(n: usize, d: usize, seed: u64) -> LatentMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        matrix(n, d, |i, j| vals[i * d + j])
    }

    /// Cyclic Jacobi eigenvalue iteration on the sample covariance.
    fn covariance_eigen(m: &LatentMatrix) -> Vec<(f64, Vec<f64>)> {
        let (n, d) = (m.rows(), m.dim);
        let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| m.row(i)[j]).sum::<f64>() / n as f64).collect();
        let mut a = vec![vec![0.0; d]; d];
        for (p, row) in a.iter_mut().enumerate() {
            for (q, cell) in row.iter_mut().enumerate() {
                *cell = (0..n).map(|i| (m.row(i)[p] - mean[p]) * (m.row(i)[q] - mean[q])).sum::<f64>() / (n - 1) as f64;
            }
        }
        let mut v: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| (i == j) as u8 as f64).collect()).collect();
        for _ in 0..100 {
            let off: f64 = (0..d).flat_map(|p| (0..d).filter(move |&q| q != p).map(move |q| (p, q))).map(|(p, q)| a[p][q] * a[p][q]).sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..d {
                for q in p + 1..d {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..d {
                        let (akp, akq) = (a[k][p], a[k][q]);
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..d {
                        let (apk, aqk) = (a[p][k], a[q][k]);
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                    for row in v.iter_mut() {
                        let (vp, vq) = (row[p], row[q]);
                        row[p] = c * vp - s * vq;
                        row[q] = s * vp + c * vq;
                    }
                }
            }
        }
        let mut pairs: Vec<(f64, Vec<f64>)> = (0..d).map(|j| (a[j][j], (0..d).map(|i| v[i][j]).collect())).collect();
        pairs.sort_by(|x, y| y.0.total_cmp(&x.0));
        pairs
    }

    #[test]
    fn line_y_equals_x() {
        let m = matrix(5, 2, |i, _| i as f64 - 2.0);
        let pca = fit_pca(&m, 1).unwrap();
        let s = 0.5f64.sqrt();
        assert!((pca.component(0)[0] - s).abs() < 1e-12 && (pca.component(0)[1] - s).abs() < 1e-12);
        let full = fit_pca_with(&matrix(5, 2, |i, _| i as f64), 1, PcaMethod::Svd).unwrap();
        assert!((full.explained_variance[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn second_direction_of_a_line_has_no_variance() {
        let m = matrix(3, 2, |i, _| i as f64);
        let pca = fit_pca(&matrix(4, 3, |i, j| if j < 2 { i as f64 } else { 0.0 }), 2).unwrap();
        assert!(pca.explained_variance[1].abs() < 1e-12);
        assert!(pca.orthonormality_error() < 1e-12);
        assert_eq!(fit_pca(&m, 1).unwrap().k(), 1);
    }

    #[test]
    fn identical_rows_give_zero_variance_orthonormal_basis() {
        let m = matrix(6, 4, |_, j| j as f64);
        for method in [PcaMethod::Svd, PcaMethod::Gram] {
            let pca = fit_pca_with(&m, 3, method).unwrap();
            assert!(pca.explained_variance.iter().all(|&v| v == 0.0));
            assert!(pca.orthonormality_error() < 1e-12);
        }
    }

    #[test]
    fn k_out_of_range_is_rejected() {
        let m = random(5, 3, 0);
        assert!(fit_pca(&m, 0).is_err());
        assert!(fit_pca(&m, 4).is_err());
        assert!(fit_pca(&random(1, 3, 0), 1).is_err());
        assert_eq!(default_k(5, 3), 3);
        assert_eq!(default_k(200, 8192), 64);
    }

    #[test]
    fn random_20x7_matches_covariance_eigen() {
        let m = random(20, 7, 42);
        let oracle = covariance_eigen(&m);
        for method in [PcaMethod::Svd, PcaMethod::Gram] {
            let pca = fit_pca_with(&m, 7, method).unwrap();
            for (i, (lambda, vec)) in oracle.iter().enumerate() {
                assert!((pca.explained_variance[i] - lambda).abs() < 1e-10);
                let dot: f64 = pca.component(i).iter().zip(vec).map(|(a, b)| a * b).sum();
                assert!(dot.abs() > 1.0 - 1e-8, "{method:?} component {i}: {dot}");
            }
        }
    }

    #[test]
    fn transform_properties() {
        let m = random(30, 6, 7);
        let pca = fit_pca(&m, 5).unwrap();
        let mean_row = LatentMatrix::new(vec!["mean".into()], 6, pca.mean.clone()).unwrap();
        assert!(transform(&pca, &mean_row).unwrap().values.iter().all(|v| v.abs() < 1e-12));

        let p = transform(&pca, &m).unwrap();
        for c in 0..5 {
            let col = p.column(c);
            let mu = col.iter().sum::<f64>() / 30.0;
            let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 29.0;
            assert!((var - pca.explained_variance[c]).abs() <= 1e-6 * pca.explained_variance[c]);
        }

        let full = fit_pca(&m, 6).unwrap();
        let p = transform(&full, &m).unwrap();
        for i in 0..30 {
            for j in 0..6 {
                let back: f64 = (0..6).map(|c| p.row(i)[c] * full.component(c)[j]).sum();
                assert!((back - (m.row(i)[j] - full.mean[j])).abs() < 1e-8);
            }
        }
        assert!(transform(&pca, &random(3, 4, 0)).is_err());
    }

    #[test]
    fn canonical_sign_is_positive_on_largest_entry() {
        let pca = fit_pca(&random(25, 5, 3), 4).unwrap();
        for c in 0..4 {
            let comp = pca.component(c);
            let big = comp.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(big > 0.0);
        }
    }

    #[test]
    fn report_extremes_and_order() {
        let m = random(100, 8, 11);
        let pca = fit_pca(&m, 4).unwrap();
        let p = transform(&pca, &m).unwrap();
        let r = component_report(&pca, &p, 0, 10).unwrap();
        assert_eq!((r.low_extremes.len(), r.high_extremes.len()), (10, 10));
        assert!(r.sorted.windows(2).all(|w| w[0].value <= w[1].value));
        let mut ids: Vec<_> = r.sorted.iter().map(|s| s.sample_id.clone()).collect();
        ids.sort();
        assert_eq!(ids, p.sample_ids);
        let median = (r.sorted[49].value + r.sorted[50].value) / 2.0;
        assert!(r.low_extremes.iter().all(|s| s.value <= median));
        assert!(r.high_extremes.iter().all(|s| s.value >= median));
        assert!(r.low_extremes.iter().all(|l| r.high_extremes.iter().all(|h| h.sample_id != l.sample_id)));
        assert_eq!(component_report(&pca, &p, 0, 10).unwrap(), r);
        assert!(component_report(&pca, &p, 4, 10).is_err());
    }

    #[test]
    fn report_ties_and_clamp() {
        let m = matrix(6, 2, |_, j| j as f64);
        let pca = fit_pca(&m, 1).unwrap();
        let p = transform(&pca, &m).unwrap();
        let r = component_report(&pca, &p, 0, 10).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.extremes_per_side(), 3);
        let low: Vec<_> = r.low_extremes.iter().map(|s| s.sample_id.as_str()).collect();
        assert_eq!(low, ["s000", "s001", "s002"]);
        assert!(!r.warnings.is_empty());
    }

    #[test]
    fn model_save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pca.bin");
        let pca = fit_pca(&random(10, 4, 1), 3).unwrap();
        pca.save(&path).unwrap();
        assert_eq!(PcaModel::load(&path).unwrap(), pca);
    }

    #[test]
    fn value_curves_are_sorted_with_n_rows() {
        let dir = tempfile::tempdir().unwrap();
        let m = random(40, 20, 5);
        let pca = fit_pca(&m, 16).unwrap();
        let p = transform(&pca, &m).unwrap();
        let csv = dir.path().join("values.csv");
        let png = export_value_curves(&p, DEFAULT_CURVES, &csv).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        let rows: Vec<Vec<f64>> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 40);
        assert_eq!(rows[0].len(), 15);
        for c in 0..15 {
            assert!(rows.windows(2).all(|w| w[0][c] <= w[1][c]));
        }
        assert!(std::fs::metadata(png).unwrap().len() > 0);
        assert!(export_value_curves(&p, 17, &csv).is_err());
    }
}
