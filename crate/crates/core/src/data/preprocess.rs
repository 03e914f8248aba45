use std::path::Path;

use super::{decode_image, ChannelMode, Preprocessing, RawDtype, RawImage, SampleRecord, Transform};
use crate::error::{Error, Result};
use crate::tensor::{bilinear_resize, conv::reflect_index, Tensor};

/// Maps raw values into `[0, 1]` according to the declared dtype.
///
/// Integer files are divided by their full-scale value; float files are passed
/// through and must already be in range, so a float file is never divided again.
pub fn normalize(raw: &RawImage, path: &Path) -> Result<Tensor<f32>> {
    let scale = match raw.dtype {
        RawDtype::Uint8 => 255.0,
        RawDtype::Uint16 => 65535.0,
        RawDtype::Float => 1.0,
    };
    let data: Vec<f32> = raw.data.iter().map(|&v| (v as f64 / scale) as f32).collect();
    if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Data {
            path: path.to_path_buf(),
            message: format!("pixel value {bad} is outside [0, 1] after normalization"),
        });
    }
    Tensor::new([raw.channels, raw.height, raw.width], data)
}

fn reduce_channels(img: &Tensor<f32>, channel: Option<usize>) -> Result<Tensor<f32>> {
    let (c, h, w) = img.chw()?;
    let n = h * w;
    if let Some(ch) = channel {
        if ch >= c {
            return Err(Error::Shape(format!("channel {ch} requested from a {c}-channel image")));
        }
        return Tensor::new([1, h, w], img.data()[ch * n..(ch + 1) * n].to_vec());
    }
    if c == 1 {
        return Ok(img.clone());
    }
    let data = (0..n)
        .map(|i| {
            let sum: f64 = (0..c).map(|ch| img.data()[ch * n + i] as f64).sum();
            (sum / c as f64) as f32
        })
        .collect();
    Tensor::new([1, h, w], data)
}

/// Extends the image to `height x width` by mirroring on the bottom and right,
/// without repeating the edge pixel: padded column `j >= W` copies column `2W - 2 - j`.
pub fn reflect_pad_to(img: &Tensor<f32>, height: usize, width: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = img.chw()?;
    if height < h || width < w {
        return Err(Error::Config(format!(
            "reflect padding cannot shrink {h}x{w} to {height}x{width}"
        )));
    }
    if height - h > h.saturating_sub(1) || width - w > w.saturating_sub(1) {
        return Err(Error::Config(format!(
            "reflect padding {h}x{w} -> {height}x{width} needs more than one mirror image"
        )));
    }
    let src = img.data();
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        for y in 0..height {
            let sy = reflect_index(y as isize, h);
            let row = &src[(ch * h + sy) * w..(ch * h + sy + 1) * w];
            out.extend((0..width).map(|x| row[reflect_index(x as isize, w)]));
        }
    }
    Tensor::new([c, height, width], out)
}

/// Bilinear resampling with the same half-pixel convention as the network's upsampling.
pub fn resize_bilinear(img: &Tensor<f32>, height: usize, width: usize) -> Result<Tensor<f32>> {
    if height < 1 || width < 1 {
        return Err(Error::Config(format!("cannot resize to {height}x{width}")));
    }
    bilinear_resize(img, height, width)
}

fn apply(img: Tensor<f32>, transforms: &[Transform]) -> Result<Tensor<f32>> {
    transforms.iter().try_fold(img, |img, t| match *t {
        Transform::ReflectPadTo { height, width } => reflect_pad_to(&img, height, width),
        Transform::Resize { height, width } => resize_bilinear(&img, height, width),
    })
}

/// Decodes and preprocesses one sample into a `[1, H, W]` tensor in `[0, 1]`.
///
/// `channel` selects a single channel (channel-as-sample mode); otherwise
/// multi-channel files are averaged.
pub fn load_normalized(
    root: &Path,
    record: &SampleRecord,
    preprocessing: &Preprocessing,
    channel: Option<usize>,
) -> Result<Tensor<f32>> {
    let path = root.join(&record.source_path);
    let raw = decode_image(&path)?;
    let channel = match preprocessing.channel_mode {
        ChannelMode::Average => None,
        ChannelMode::ChannelsAsSamples => channel,
    };
    let img = apply(reduce_channels(&normalize(&raw, &path)?, channel)?, &preprocessing.transforms)?;
    if let Some((h, w)) = preprocessing.target_size {
        if img.shape() != [1, h, w] {
            return Err(Error::Data {
                path,
                message: format!(
                    "preprocessed shape {:?} does not match target {:?}",
                    img.shape(),
                    [1, h, w]
                ),
            });
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::bilinear_upsample;

    fn raw(dtype: RawDtype, channels: usize, h: usize, w: usize, data: Vec<f32>) -> RawImage {
        RawImage { channels, height: h, width: w, dtype, data }
    }

    #[test]
    fn uint8_is_divided_by_255() {
        let t = normalize(&raw(RawDtype::Uint8, 1, 1, 2, vec![255.0, 0.0]), Path::new("x")).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0]);
    }

    #[test]
    fn float_passes_through_and_is_range_checked() {
        let t = normalize(&raw(RawDtype::Float, 1, 1, 2, vec![0.25, 1.0]), Path::new("x")).unwrap();
        assert_eq!(t.data(), &[0.25, 1.0]);
        let err = normalize(&raw(RawDtype::Float, 1, 1, 2, vec![0.5, 3.0]), Path::new("bad.pfm")).unwrap_err();
        assert!(err.to_string().contains("bad.pfm"));
    }

    #[test]
    fn identical_channels_reduce_to_gray_twin() {
        let gray = Tensor::from_fn([1, 3, 3], |i| i as f32 / 9.0);
        let mut rgb = gray.data().to_vec();
        rgb.extend_from_slice(gray.data());
        rgb.extend_from_slice(gray.data());
        let rgb = Tensor::new([3, 3, 3], rgb).unwrap();
        assert_eq!(reduce_channels(&rgb, None).unwrap(), gray);
        assert_eq!(reduce_channels(&rgb, Some(2)).unwrap(), gray);
    }

    #[test]
    fn oct_width_padding_mirrors_columns() {
        let (h, w) = (4, 1000);
        let img = Tensor::from_fn([1, h, w], |i| (i % w) as f32);
        let out = reflect_pad_to(&img, h, 1024).unwrap();
        assert_eq!(out.shape(), &[1, 4, 1024]);
        for y in 0..h {
            let row = &out.data()[y * 1024..(y + 1) * 1024];
            for j in 0..w {
                assert_eq!(row[j], j as f32);
            }
            for j in 1000..1024 {
                // Independent formula: distance past the last column, reflected.
                let mirrored = 999 - (j - 999);
                assert_eq!(row[j], mirrored as f32);
            }
            assert_eq!(row[1000], 998.0);
            assert_eq!(row[1023], 975.0);
        }
    }

    #[test]
    fn reflect_pad_rejects_shrink_and_overflow() {
        let img = Tensor::<f32>::zeros([1, 4, 4]);
        assert!(reflect_pad_to(&img, 3, 4).is_err());
        assert!(reflect_pad_to(&img, 4, 8).is_err());
        assert!(reflect_pad_to(&img, 7, 7).is_ok());
    }

    #[test]
    fn resize_matches_upsample_and_keeps_constants() {
        let img = Tensor::from_fn([1, 2, 2], |i| i as f32);
        assert_eq!(resize_bilinear(&img, 4, 4).unwrap(), bilinear_upsample(&img, 2).unwrap());
        let c = Tensor::full([1, 5, 3], 0.4f32);
        let r = resize_bilinear(&c, 8, 8).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.4).abs() < 1e-6));
        assert!(resize_bilinear(&c, 0, 8).is_err());
    }
}
