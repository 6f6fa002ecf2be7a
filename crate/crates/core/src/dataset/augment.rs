use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::colorspace::{resize_bilinear, ImageTensor};
use crate::error::{Error, Result};

/// Label-preserving geometric transforms. No color jitter: color statistics
/// are the signal under study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentOp {
    HFlip,
    VFlip,
    /// Clockwise quarter turn.
    Rot90,
    Rot180,
    Rot270,
    /// Random crop of `scale` times each side, resized back to full size.
    CropResize { scale: f64 },
}

impl AugmentOp {
    pub const CROP_MIN: f64 = 0.8;

    /// Ops cycled through by balancing; the crop scale is drawn separately.
    pub fn round_robin(k: usize, rng: &mut impl Rng) -> Self {
        match k % 6 {
            0 => AugmentOp::HFlip,
            1 => AugmentOp::VFlip,
            2 => AugmentOp::Rot90,
            3 => AugmentOp::Rot180,
            4 => AugmentOp::Rot270,
            _ => AugmentOp::CropResize {
                scale: rng.random_range(Self::CROP_MIN..=1.0),
            },
        }
    }
}

impl fmt::Display for AugmentOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AugmentOp::HFlip => f.write_str("hflip"),
            AugmentOp::VFlip => f.write_str("vflip"),
            AugmentOp::Rot90 => f.write_str("rot90"),
            AugmentOp::Rot180 => f.write_str("rot180"),
            AugmentOp::Rot270 => f.write_str("rot270"),
            AugmentOp::CropResize { scale } => write!(f, "crop{scale}"),
        }
    }
}

impl FromStr for AugmentOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "hflip" => AugmentOp::HFlip,
            "vflip" => AugmentOp::VFlip,
            "rot90" => AugmentOp::Rot90,
            "rot180" => AugmentOp::Rot180,
            "rot270" => AugmentOp::Rot270,
            _ => {
                let scale: f64 = s
                    .strip_prefix("crop")
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Input(format!("unknown augmentation {s:?}")))?;
                if !(AugmentOp::CROP_MIN..=1.0).contains(&scale) {
                    return Err(Error::Input(format!("crop scale {scale} outside [0.8, 1]")));
                }
                AugmentOp::CropResize { scale }
            }
        })
    }
}

fn remap(img: &ImageTensor, out_h: usize, out_w: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> ImageTensor {
    let mut data = Vec::with_capacity(out_h * out_w * 3);
    for y in 0..out_h {
        for x in 0..out_w {
            let (sy, sx) = src(y, x);
            data.extend_from_slice(&img.pixel(sy, sx));
        }
    }
    ImageTensor::from_parts(out_h, out_w, data, img.space())
}

/// Applies `op`; only the crop position depends on `seed`.
pub fn augment(img: &ImageTensor, op: AugmentOp, seed: u64) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    match op {
        AugmentOp::HFlip => remap(img, h, w, |y, x| (y, w - 1 - x)),
        AugmentOp::VFlip => remap(img, h, w, |y, x| (h - 1 - y, x)),
        AugmentOp::Rot90 => remap(img, w, h, |y, x| (h - 1 - x, y)),
        AugmentOp::Rot180 => remap(img, h, w, |y, x| (h - 1 - y, w - 1 - x)),
        AugmentOp::Rot270 => remap(img, w, h, |y, x| (x, w - 1 - y)),
        AugmentOp::CropResize { scale } => crop_resize(img, scale, seed),
    }
}

/// Crops a `scale`-sized window at a seeded offset and resizes it back.
pub fn crop_resize(img: &ImageTensor, scale: f64, seed: u64) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    let ch = ((h as f64 * scale).round() as usize).clamp(1, h);
    let cw = ((w as f64 * scale).round() as usize).clamp(1, w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y0 = rng.random_range(0..=h - ch);
    let x0 = rng.random_range(0..=w - cw);
    let cropped = remap(img, ch, cw, |y, x| (y0 + y, x0 + x));
    resize_bilinear(&cropped, h, w).expect("crop extents are positive")
}
