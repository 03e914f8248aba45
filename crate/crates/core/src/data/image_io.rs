use std::path::Path;

use image::{DynamicImage, ImageReader};

use super::RawDtype;
use crate::error::{Error, Result};
use crate::io_util::{read_file, write_atomic};

/// Lower-case file extensions the scanner tries to decode.
pub const SUPPORTED_EXTENSIONS: &[&str] = &["png", "bmp", "pgm", "ppm", "pnm", "tif", "tiff", "pfm"];

/// A decoded image, channel-major, values in the file's native range.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub dtype: RawDtype,
    pub data: Vec<f32>,
}

impl RawImage {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
}

pub fn decode_image(path: &Path) -> Result<RawImage> {
    let is_pfm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pfm"));
    if is_pfm {
        return decode_pfm(path);
    }
    let data_err = |message: String| Error::Data {
        path: path.to_path_buf(),
        message,
    };
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| data_err(format!("cannot decode: {e}")))?;
    let (width, height) = (img.width() as usize, img.height() as usize);

    // Alpha is dropped; gray+alpha is gray and RGBA is RGB.
    let (channels, dtype, interleaved): (usize, RawDtype, Vec<f32>) = match img {
        DynamicImage::ImageLuma8(b) => (1, RawDtype::Uint8, b.pixels().map(|p| p.0[0] as f32).collect()),
        DynamicImage::ImageLumaA8(b) => (1, RawDtype::Uint8, b.pixels().map(|p| p.0[0] as f32).collect()),
        DynamicImage::ImageRgb8(b) => (3, RawDtype::Uint8, b.pixels().flat_map(|p| p.0.map(f32::from)).collect()),
        DynamicImage::ImageRgba8(b) => (
            3,
            RawDtype::Uint8,
            b.pixels().flat_map(|p| [p.0[0], p.0[1], p.0[2]].map(f32::from)).collect(),
        ),
        DynamicImage::ImageLuma16(b) => (1, RawDtype::Uint16, b.pixels().map(|p| p.0[0] as f32).collect()),
        DynamicImage::ImageLumaA16(b) => (1, RawDtype::Uint16, b.pixels().map(|p| p.0[0] as f32).collect()),
        DynamicImage::ImageRgb16(b) => (3, RawDtype::Uint16, b.pixels().flat_map(|p| p.0.map(f32::from)).collect()),
        DynamicImage::ImageRgba16(b) => (
            3,
            RawDtype::Uint16,
            b.pixels().flat_map(|p| [p.0[0], p.0[1], p.0[2]].map(f32::from)).collect(),
        ),
        DynamicImage::ImageRgb32F(b) => (3, RawDtype::Float, b.pixels().flat_map(|p| p.0).collect()),
        DynamicImage::ImageRgba32F(b) => (
            3,
            RawDtype::Float,
            b.pixels().flat_map(|p| [p.0[0], p.0[1], p.0[2]]).collect(),
        ),
        other => return Err(data_err(format!("unsupported pixel layout {:?}", other.color()))),
    };
    Ok(RawImage {
        channels,
        height,
        width,
        dtype,
        data: deinterleave(&interleaved, channels),
    })
}

fn deinterleave(data: &[f32], channels: usize) -> Vec<f32> {
    if channels == 1 {
        return data.to_vec();
    }
    let n = data.len() / channels;
    let mut out = vec![0.0; data.len()];
    for (i, px) in data.chunks_exact(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            out[c * n + i] = v;
        }
    }
    out
}

/// Portable float map: `Pf`/`PF` header, width height, scale (negative = little-endian),
/// then rows from bottom to top.
fn decode_pfm(path: &Path) -> Result<RawImage> {
    let bytes = read_file(path)?;
    let bad = |m: &str| Error::Data {
        path: path.to_path_buf(),
        message: format!("invalid PFM: {m}"),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1; // single whitespace byte before the raster
    let channels = match fields[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        _ => return Err(bad("bad magic")),
    };
    let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f32 = fields[3].parse().map_err(|_| bad("bad scale"))?;
    let little = scale < 0.0;
    let count = width * height * channels;
    let raster = bytes.get(pos..pos + count * 4).ok_or_else(|| bad("truncated raster"))?;
    let mut interleaved = vec![0.0f32; count];
    for (i, c) in raster.chunks_exact(4).enumerate() {
        let b: [u8; 4] = c.try_into().unwrap();
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, rest) = (i / (width * channels), i % (width * channels));
        interleaved[(height - 1 - row) * width * channels + rest] = v;
    }
    Ok(RawImage {
        channels,
        height,
        width,
        dtype: RawDtype::Float,
        data: deinterleave(&interleaved, channels),
    })
}

/// Writes channel-major `data` (1 or 3 channels) as a little-endian PFM.
pub fn write_pfm(path: &Path, channels: usize, height: usize, width: usize, data: &[f32]) -> Result<()> {
    if (channels != 1 && channels != 3) || data.len() != channels * height * width {
        return Err(Error::Shape(format!(
            "PFM needs 1 or 3 channels and {} values",
            channels * height * width
        )));
    }
    let mut out = format!("{}\n{width} {height}\n-1.0\n", if channels == 1 { "Pf" } else { "PF" }).into_bytes();
    let n = height * width;
    for row in (0..height).rev() {
        for x in 0..width {
            for c in 0..channels {
                out.extend_from_slice(&data[c * n + row * width + x].to_le_bytes());
            }
        }
    }
    write_atomic(path, &out)
}
