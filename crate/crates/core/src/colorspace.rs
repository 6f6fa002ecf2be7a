//! Color-space conversion and model-input normalization.
//!
//! Every [`ImageTensor`] keeps three channels in `[0, 1]`, interleaved in
//! height-major order. Hue is stored as a fraction of a turn so that all
//! three spaces share the same domain before normalization.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Per-channel normalization mean applied to every color space.
pub const NORM_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
/// Per-channel normalization standard deviation applied to every color space.
pub const NORM_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorSpace {
    Rgb,
    YCbCr,
    Hsv,
}

impl ColorSpace {
    pub const ALL: [ColorSpace; 3] = [ColorSpace::Rgb, ColorSpace::YCbCr, ColorSpace::Hsv];

    pub fn name(self) -> &'static str {
        match self {
            ColorSpace::Rgb => "rgb",
            ColorSpace::YCbCr => "ycbcr",
            ColorSpace::Hsv => "hsv",
        }
    }
}

impl fmt::Display for ColorSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ColorSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rgb" => Ok(ColorSpace::Rgb),
            "ycbcr" => Ok(ColorSpace::YCbCr),
            "hsv" => Ok(ColorSpace::Hsv),
            other => Err(Error::Spec(format!(
                "unknown color space {other:?} (expected rgb, ycbcr or hsv)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
    space: ColorSpace,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>, space: ColorSpace) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("image extents must be positive, got {height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Parameter(format!("channel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
            space,
        })
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
            ColorSpace::Rgb,
        )
    }

    pub fn constant(height: usize, width: usize, pixel: [f64; 3], space: ColorSpace) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| pixel).collect();
        Self::new(height, width, data, space)
    }

    /// Decodes a PNG or JPEG file into an RGB image.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let decoded = image::ImageReader::open(path)
            .map_err(|e| Error::Decode {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?
            .with_guessed_format()
            .map_err(|e| Error::Decode {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?
            .decode()
            .map_err(|e| Error::Decode {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = decoded.dimensions();
        Self::from_rgb8(h as usize, w as usize, decoded.as_raw())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn space(&self) -> ColorSpace {
        self.space
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let p = (y * self.width + x) * 3;
        [self.data[p], self.data[p + 1], self.data[p + 2]]
    }

    /// Builds a same-space image from a per-pixel function.
    pub(crate) fn map_pixels(&self, space: ColorSpace, f: impl Fn([f64; 3]) -> [f64; 3]) -> Self {
        let data = self
            .data
            .chunks_exact(3)
            .flat_map(|p| f([p[0], p[1], p[2]]))
            .collect();
        Self {
            height: self.height,
            width: self.width,
            data,
            space,
        }
    }

    pub(crate) fn from_parts(height: usize, width: usize, data: Vec<f64>, space: ColorSpace) -> Self {
        debug_assert_eq!(data.len(), height * width * 3);
        Self {
            height,
            width,
            data,
            space,
        }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

fn require_rgb(img: &ImageTensor) -> Result<()> {
    if img.space != ColorSpace::Rgb {
        return Err(Error::ColorSpaceTag {
            expected: ColorSpace::Rgb.name(),
            actual: img.space.name(),
        });
    }
    Ok(())
}

/// Full-range BT.601 on the `[0, 1]` domain.
pub fn rgb_to_ycbcr_pixel([r, g, b]: [f64; 3]) -> [f64; 3] {
    let y = 0.299 * r + 0.587 * g + 0.114 * b;
    let cb = 0.5 - 0.168736 * r - 0.331264 * g + 0.5 * b;
    let cr = 0.5 + 0.5 * r - 0.418688 * g - 0.081312 * b;
    [y.clamp(0.0, 1.0), cb.clamp(0.0, 1.0), cr.clamp(0.0, 1.0)]
}

/// Hexcone model with hue as a fraction of a turn in `[0, 1)`; gray pixels
/// get hue 0.
pub fn rgb_to_hsv_pixel([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    // rem_euclid can round up to exactly one turn for tiny negative inputs
    let h = if h >= 1.0 { 0.0 } else { h };
    [h, s, max]
}

pub fn rgb_to_ycbcr(img: &ImageTensor) -> Result<ImageTensor> {
    require_rgb(img)?;
    Ok(img.map_pixels(ColorSpace::YCbCr, rgb_to_ycbcr_pixel))
}

pub fn rgb_to_hsv(img: &ImageTensor) -> Result<ImageTensor> {
    require_rgb(img)?;
    Ok(img.map_pixels(ColorSpace::Hsv, rgb_to_hsv_pixel))
}

/// Converts an RGB image into `target`.
pub fn convert(img: &ImageTensor, target: ColorSpace) -> Result<ImageTensor> {
    match target {
        ColorSpace::Rgb => {
            require_rgb(img)?;
            Ok(img.clone())
        }
        ColorSpace::YCbCr => rgb_to_ycbcr(img),
        ColorSpace::Hsv => rgb_to_hsv(img),
    }
}

fn check_std(std: &[f64; 3]) -> Result<()> {
    if std.iter().any(|&s| s == 0.0 || !s.is_finite()) {
        return Err(Error::Parameter(format!("normalization std {std:?} has a zero or non-finite entry")));
    }
    Ok(())
}

/// `(v − mean_c) / std_c`, transposed to channel-major `[3, H, W]`.
pub fn normalize<T: Scalar>(img: &ImageTensor, mean: [f64; 3], std: [f64; 3]) -> Result<Tensor<T>> {
    check_std(&std)?;
    let plane = img.height * img.width;
    let mut out = vec![T::zero(); plane * 3];
    for (i, px) in img.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * plane + i] = T::from_f64_lossy((px[c] - mean[c]) / std[c]);
        }
    }
    Tensor::new(vec![3, img.height, img.width], out)
}

/// Inverse of [`normalize`]; values are clamped back into `[0, 1]`.
pub fn denormalize<T: Scalar>(
    tensor: &Tensor<T>,
    mean: [f64; 3],
    std: [f64; 3],
    space: ColorSpace,
) -> Result<ImageTensor> {
    check_std(&std)?;
    let shape = tensor.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Shape(format!("expected [3, H, W], got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let plane = h * w;
    let v = tensor.data();
    let mut data = Vec::with_capacity(plane * 3);
    for i in 0..plane {
        for c in 0..3 {
            data.push((v[c * plane + i].to_f64_lossy() * std[c] + mean[c]).clamp(0.0, 1.0));
        }
    }
    ImageTensor::new(h, w, data, space)
}

/// Separable bilinear resampling with half-pixel centers.
pub fn resize_bilinear(img: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Parameter(format!("resize target {out_h}x{out_w} must be positive")));
    }
    if out_h == img.height && out_w == img.width {
        return Ok(img.clone());
    }
    let rows = axis_weights(img.height, out_h);
    let cols = axis_weights(img.width, out_w);
    let mut data = Vec::with_capacity(out_h * out_w * 3);
    for &(y0, y1, fy) in &rows {
        for &(x0, x1, fx) in &cols {
            let p00 = img.pixel(y0, x0);
            let p01 = img.pixel(y0, x1);
            let p10 = img.pixel(y1, x0);
            let p11 = img.pixel(y1, x1);
            for c in 0..3 {
                let top = p00[c] + (p01[c] - p00[c]) * fx;
                let bottom = p10[c] + (p11[c] - p10[c]) * fx;
                data.push((top + (bottom - top) * fy).clamp(0.0, 1.0));
            }
        }
    }
    Ok(ImageTensor::from_parts(out_h, out_w, data, img.space))
}

fn axis_weights(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ycbcr_anchors() {
        let close = |a: [f64; 3], b: [f64; 3]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(rgb_to_ycbcr_pixel([1.0, 1.0, 1.0]), [1.0, 0.5, 0.5]));
        assert!(close(rgb_to_ycbcr_pixel([0.0, 0.0, 0.0]), [0.0, 0.5, 0.5]));
    }

    #[test]
    fn hsv_anchors() {
        assert_eq!(rgb_to_hsv_pixel([1.0, 0.0, 0.0]), [0.0, 1.0, 1.0]);
        assert_eq!(rgb_to_hsv_pixel([0.0, 1.0, 0.0]), [1.0 / 3.0, 1.0, 1.0]);
        assert_eq!(rgb_to_hsv_pixel([0.0, 0.0, 0.0]), [0.0, 0.0, 0.0]);
        assert_eq!(rgb_to_hsv_pixel([0.4, 0.4, 0.4]), [0.0, 0.0, 0.4]);
    }

    #[test]
    fn conversions_require_rgb_input() {
        let img = ImageTensor::constant(2, 2, [0.2, 0.3, 0.4], ColorSpace::Hsv).unwrap();
        assert!(matches!(rgb_to_ycbcr(&img), Err(Error::ColorSpaceTag { .. })));
        assert!(matches!(rgb_to_hsv(&img), Err(Error::ColorSpaceTag { .. })));
    }

    #[test]
    fn normalize_channel_zero_of_white() {
        let img = ImageTensor::constant(1, 1, [1.0, 1.0, 1.0], ColorSpace::Rgb).unwrap();
        let t = normalize::<f64>(&img, NORM_MEAN, NORM_STD).unwrap();
        assert!((t.data()[0] - 2.2489).abs() < 1e-4);
        assert_eq!(t.data()[0], (1.0 - 0.485) / 0.229);
    }

    #[test]
    fn normalize_mean_pixel_is_zero() {
        let img = ImageTensor::constant(3, 2, NORM_MEAN, ColorSpace::YCbCr).unwrap();
        let t = normalize::<f32>(&img, NORM_MEAN, NORM_STD).unwrap();
        assert_eq!(t.shape(), &[3, 3, 2]);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_std_is_rejected() {
        let img = ImageTensor::constant(1, 1, [0.5; 3], ColorSpace::Rgb).unwrap();
        assert!(matches!(
            normalize::<f32>(&img, NORM_MEAN, [0.2, 0.0, 0.2]),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn resize_identity_and_constant() {
        let data: Vec<f64> = (0..5 * 7 * 3).map(|i| (i % 11) as f64 / 10.0).collect();
        let img = ImageTensor::new(5, 7, data, ColorSpace::Rgb).unwrap();
        assert_eq!(resize_bilinear(&img, 5, 7).unwrap(), img);
        let flat = ImageTensor::constant(4, 6, [0.25, 0.5, 0.75], ColorSpace::Rgb).unwrap();
        for (h, w) in [(1, 1), (3, 9), (16, 16)] {
            let r = resize_bilinear(&flat, h, w).unwrap();
            assert!(r.data().chunks(3).all(|p| p == [0.25, 0.5, 0.75]));
        }
    }

    #[test]
    fn resize_ramp_half_pixel() {
        // v(y, x) = (x + 4y) / 15; 2x downsampling samples at source 0.5 and 2.5.
        let data: Vec<f64> = (0..16).flat_map(|i| [i as f64 / 15.0; 3]).collect();
        let img = ImageTensor::new(4, 4, data, ColorSpace::Rgb).unwrap();
        let r = resize_bilinear(&img, 2, 2).unwrap();
        let expect = |y: f64, x: f64| (x + 4.0 * y) / 15.0;
        let want = [expect(0.5, 0.5), expect(0.5, 2.5), expect(2.5, 0.5), expect(2.5, 2.5)];
        for (i, w) in want.iter().enumerate() {
            assert!((r.data()[i * 3] - w).abs() < 1e-12, "{i}: {} vs {w}", r.data()[i * 3]);
        }
    }

    proptest! {
        #[test]
        fn conversions_stay_in_unit_cube(r in 0.0f64..=1.0, g in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            for px in [rgb_to_ycbcr_pixel([r, g, b]), rgb_to_hsv_pixel([r, g, b])] {
                prop_assert!(px.iter().all(|v| (0.0..=1.0).contains(v)));
            }
            prop_assert!(rgb_to_hsv_pixel([r, g, b])[0] < 1.0);
        }
    }
}
