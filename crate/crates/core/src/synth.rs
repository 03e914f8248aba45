//! Disk phantoms with known factors of variation, and rank-correlation scoring
//! of how well principal components recover them.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::{read_file, write_atomic};
use crate::pca::Projection;

pub const TRUTH_FILE: &str = "truth.csv";
const BACKGROUND: f64 = 0.05;
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    /// Disk center column, pixels.
    XPosition,
    /// Disk center row, pixels.
    YPosition,
    /// Pixels.
    Radius,
    /// Disk intensity in `[0, 1]`.
    Brightness,
    /// Std-dev of additive Gaussian noise, intensity units.
    NoiseSigma,
    /// Fraction of rows blanked from the bottom.
    VerticalCutoff,
}

impl Factor {
    pub const ALL: [Factor; 6] = [
        Factor::XPosition,
        Factor::YPosition,
        Factor::Radius,
        Factor::Brightness,
        Factor::NoiseSigma,
        Factor::VerticalCutoff,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Factor::XPosition => "x_position",
            Factor::YPosition => "y_position",
            Factor::Radius => "radius",
            Factor::Brightness => "brightness",
            Factor::NoiseSigma => "noise_sigma",
            Factor::VerticalCutoff => "vertical_cutoff",
        }
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Factor {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Factor::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown factor {s}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorRange {
    pub factor: Factor,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    /// `(height, width)`.
    pub image_size: (usize, usize),
    /// Factors sampled uniformly per image; the rest stay at their defaults.
    pub factors: Vec<FactorRange>,
    pub count: usize,
    pub seed: u64,
    /// This many images (picked by seed) are written as near-black RGB files.
    #[serde(default)]
    pub near_black_rgb: usize,
}

/// Values of every factor for one image.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Params {
    x: f64,
    y: f64,
    radius: f64,
    brightness: f64,
    noise_sigma: f64,
    cutoff: f64,
}

impl Params {
    fn defaults(h: usize, w: usize) -> Self {
        Self {
            x: w as f64 / 2.0,
            y: h as f64 / 2.0,
            radius: h.min(w) as f64 / 5.0,
            brightness: 0.9,
            noise_sigma: 0.0,
            cutoff: 0.0,
        }
    }

    fn get(&self, f: Factor) -> f64 {
        match f {
            Factor::XPosition => self.x,
            Factor::YPosition => self.y,
            Factor::Radius => self.radius,
            Factor::Brightness => self.brightness,
            Factor::NoiseSigma => self.noise_sigma,
            Factor::VerticalCutoff => self.cutoff,
        }
    }

    fn set(&mut self, f: Factor, v: f64) {
        match f {
            Factor::XPosition => self.x = v,
            Factor::YPosition => self.y = v,
            Factor::Radius => self.radius = v,
            Factor::Brightness => self.brightness = v,
            Factor::NoiseSigma => self.noise_sigma = v,
            Factor::VerticalCutoff => self.cutoff = v,
        }
    }
}

impl FactorSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h == 0 || w == 0 {
            return Err(Error::Config(format!("image size {h}x{w} is empty")));
        }
        let mut seen = Vec::new();
        for r in &self.factors {
            if seen.contains(&r.factor) {
                return Err(Error::Config(format!("factor {} listed twice", r.factor)));
            }
            seen.push(r.factor);
            if !(r.min.is_finite() && r.max.is_finite() && r.min <= r.max) {
                return Err(Error::Config(format!("factor {} has range [{}, {}]", r.factor, r.min, r.max)));
            }
        }
        if self.near_black_rgb > self.count {
            return Err(Error::Config("near_black_rgb exceeds count".into()));
        }
        // The disk must fit on the canvas at every corner of the factor box.
        let d = Params::defaults(h, w);
        let range = |f: Factor| {
            self.factors
                .iter()
                .find(|r| r.factor == f)
                .map_or((d.get(f), d.get(f)), |r| (r.min, r.max))
        };
        let (x, y, r) = (range(Factor::XPosition), range(Factor::YPosition), range(Factor::Radius));
        if r.0 <= 0.0 || x.0 - r.1 < 0.0 || x.1 + r.1 > w as f64 || y.0 - r.1 < 0.0 || y.1 + r.1 > h as f64 {
            return Err(Error::Config(format!(
                "disk ranges x {x:?}, y {y:?}, radius {r:?} leave the {h}x{w} canvas"
            )));
        }
        let unit = |f: Factor, lo: f64, hi: f64| -> Result<()> {
            let (a, b) = range(f);
            if a < lo || b > hi {
                return Err(Error::Config(format!("factor {f} must stay in [{lo}, {hi}]")));
            }
            Ok(())
        };
        unit(Factor::Brightness, 0.0, 1.0)?;
        unit(Factor::NoiseSigma, 0.0, 1.0)?;
        unit(Factor::VerticalCutoff, 0.0, 1.0)?;
        Ok(())
    }
}

fn image_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Intensities in `[0, 1]`, row-major.
fn render(h: usize, w: usize, p: &Params, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    let s = SUPERSAMPLE as f64;
    for yy in 0..h {
        for xx in 0..w {
            let mut inside = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = xx as f64 + (sx as f64 + 0.5) / s;
                    let py = yy as f64 + (sy as f64 + 0.5) / s;
                    if (px - p.x).powi(2) + (py - p.y).powi(2) <= p.radius * p.radius {
                        inside += 1;
                    }
                }
            }
            let cover = inside as f64 / (s * s);
            out[yy * w + xx] = BACKGROUND + cover * (p.brightness - BACKGROUND);
        }
    }
    if p.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, p.noise_sigma).expect("sigma validated");
        for v in &mut out {
            *v += normal.sample(rng);
        }
    }
    let first_cut = ((1.0 - p.cutoff) * h as f64).round() as usize;
    for v in &mut out[first_cut.min(h) * w..] {
        *v = 0.0;
    }
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    out
}

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Per-sample true factor values.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthTable {
    pub factors: Vec<Factor>,
    pub ids: Vec<String>,
    /// `values[i][f]` is factor `f` of sample `i`.
    pub values: Vec<Vec<f64>>,
}

impl TruthTable {
    pub fn column(&self, f: usize) -> Vec<f64> {
        self.values.iter().map(|r| r[f]).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id");
        for f in &self.factors {
            out.push(',');
            out.push_str(f.name());
        }
        out.push('\n');
        for (id, row) in self.ids.iter().zip(&self.values) {
            out.push_str(id);
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = String::from_utf8_lossy(&read_file(path)?).into_owned();
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::format(path, "empty truth table"))?;
        let mut cols = header.split(',');
        if cols.next() != Some("id") {
            return Err(Error::format(path, "truth table must start with an id column"));
        }
        let factors = cols.map(Factor::from_str).collect::<Result<Vec<_>>>()?;
        let (mut ids, mut values) = (Vec::new(), Vec::new());
        for line in lines.filter(|l| !l.is_empty()) {
            let mut f = line.split(',');
            ids.push(f.next().unwrap_or_default().to_string());
            let row = f
                .map(|v| v.parse::<f64>().map_err(|_| Error::format(path, format!("bad value in `{line}`"))))
                .collect::<Result<Vec<_>>>()?;
            if row.len() != factors.len() {
                return Err(Error::format(path, format!("wrong column count in `{line}`")));
            }
            values.push(row);
        }
        Ok(Self { factors, ids, values })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub image_paths: Vec<PathBuf>,
    pub truth: TruthTable,
    pub truth_path: PathBuf,
    /// Ids written as near-black three-channel images.
    pub near_black_rgb: Vec<String>,
}

/// Renders `spec.count` PNGs into `out_dir` plus `truth.csv`.
///
/// Each image draws from its own seeded stream, so output is identical
/// regardless of thread count.
pub fn generate(spec: &FactorSpec, out_dir: &Path) -> Result<Generated> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (h, w) = spec.image_size;
    let width = spec.count.saturating_sub(1).to_string().len().max(5);
    let ids: Vec<String> = (0..spec.count).map(|i| format!("img_{i:0width$}.png")).collect();

    let mut order: Vec<usize> = (0..spec.count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(image_seed(spec.seed, usize::MAX - 1)));
    let mut anomalous = vec![false; spec.count];
    for &i in &order[..spec.near_black_rgb] {
        anomalous[i] = true;
    }

    let rows: Vec<Vec<f64>> = (0..spec.count)
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let mut rng = ChaCha8Rng::seed_from_u64(image_seed(spec.seed, i));
            let mut p = Params::defaults(h, w);
            for r in &spec.factors {
                let v = if r.max > r.min { rng.random_range(r.min..=r.max) } else { r.min };
                p.set(r.factor, v);
            }
            let pixels = render(h, w, &p, &mut rng);
            let path = out_dir.join(&ids[i]);
            let mut png = std::io::Cursor::new(Vec::new());
            let encoded = if anomalous[i] {
                // Scaled far below the near-black threshold, one tint per channel.
                let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
                    let v = pixels[y as usize * w + x as usize] * 0.015;
                    Rgb([to_u8(v), to_u8(v * 0.5), to_u8(v * 0.25)])
                });
                img.write_to(&mut png, image::ImageFormat::Png)
            } else {
                let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(pixels[y as usize * w + x as usize])]));
                img.write_to(&mut png, image::ImageFormat::Png)
            };
            encoded.map_err(|e| Error::Numeric(format!("png encoding failed: {e}")))?;
            write_atomic(&path, &png.into_inner())?;
            Ok(spec.factors.iter().map(|r| p.get(r.factor)).collect())
        })
        .collect::<Result<_>>()?;

    let truth = TruthTable {
        factors: spec.factors.iter().map(|r| r.factor).collect(),
        ids: ids.clone(),
        values: rows,
    };
    let truth_path = out_dir.join(TRUTH_FILE);
    write_atomic(&truth_path, truth.to_csv().as_bytes())?;
    Ok(Generated {
        image_paths: ids.iter().map(|id| out_dir.join(id)).collect(),
        near_black_rgb: ids.iter().zip(&anomalous).filter(|(_, &a)| a).map(|(id, _)| id.clone()).collect(),
        truth,
        truth_path,
    })
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation, or `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho with average ranks for ties; `None` if either input is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("spearman on {} vs {} values", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Ok(None);
    }
    Ok(pearson(&average_ranks(a), &average_ranks(b)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorScore {
    pub factor: Factor,
    /// Spearman rho with each scored component; 0 where undefined.
    pub rho: Vec<f64>,
    /// The factor is constant, so every rho is reported as 0.
    pub degenerate: bool,
    pub max_abs_rho: f64,
    /// 0-based component reaching `max_abs_rho`.
    pub best_component: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryScores {
    pub components: usize,
    pub factors: Vec<FactorScore>,
}

/// Rank correlation of every truth factor against the first `first_k` components.
///
/// Samples are matched by id; both sides must contain the same ids.
pub fn score_factor_recovery(projection: &Projection, truth: &TruthTable, first_k: usize) -> Result<RecoveryScores> {
    if projection.rows() != truth.ids.len() {
        return Err(Error::Shape(format!(
            "{} projected samples but {} truth rows",
            projection.rows(),
            truth.ids.len()
        )));
    }
    let k = first_k.min(projection.k);
    let index: HashMap<&str, usize> = truth.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let rows = projection
        .sample_ids
        .iter()
        .map(|id| index.get(id.as_str()).copied().ok_or_else(|| Error::NotFound(format!("sample {id} has no truth row"))))
        .collect::<Result<Vec<_>>>()?;
    let columns: Vec<Vec<f64>> = (0..k).map(|c| projection.column(c)).collect();
    let factors = truth
        .factors
        .iter()
        .enumerate()
        .map(|(f, &factor)| -> Result<FactorScore> {
            let t: Vec<f64> = rows.iter().map(|&r| truth.values[r][f]).collect();
            let degenerate = t.iter().all(|&v| v == t[0]);
            let rho = columns
                .iter()
                .map(|c| Ok(spearman(&t, c)?.unwrap_or(0.0)))
                .collect::<Result<Vec<f64>>>()?;
            let (best_component, max_abs_rho) = rho
                .iter()
                .enumerate()
                .fold((0, 0.0f64), |(bi, bv), (i, &r)| if r.abs() > bv { (i, r.abs()) } else { (bi, bv) });
            Ok(FactorScore {
                factor,
                rho,
                degenerate,
                max_abs_rho,
                best_component,
            })
        })
        .collect::<Result<_>>()?;
    Ok(RecoveryScores { components: k, factors })
}

/// Null distribution of `max |rho|` over `components` columns when the truth
/// column is randomly permuted; one entry per trial.
pub fn permutation_null(truth: &[f64], components: &[Vec<f64>], trials: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ranked: Vec<Vec<f64>> = components.iter().map(|c| average_ranks(c)).collect();
    let mut t = average_ranks(truth);
    let mut out = Vec::with_capacity(trials);
    for _ in 0..trials {
        t.shuffle(&mut rng);
        let mut best = 0.0f64;
        for c in &ranked {
            if c.len() != t.len() {
                return Err(Error::Shape("component and truth lengths differ".into()));
            }
            best = best.max(pearson(&t, c).unwrap_or(0.0).abs());
        }
        out.push(best);
    }
    Ok(out)
}

/// The `q` quantile (nearest rank) of `values`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let idx = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
    v[idx]
}
