//! Procedural two-class corpus used as a test fixture and for desk-scale
//! experiments. "cgi" images are flat-shaded geometric primitives in a warm,
//! saturated palette; "real" images are smooth noise textures in a cool,
//! muted palette.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Label, ManifestRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthOptions {
    pub per_class: usize,
    pub seed: u64,
    /// Side length of the square images.
    pub size: usize,
    /// Swap the class palettes (cgi cool/muted, real warm/saturated).
    pub palette_swap: bool,
    /// Render both classes with the noise texture so that only the palette
    /// separates them.
    pub shared_texture: bool,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            per_class: 20,
            seed: 0,
            size: 64,
            palette_swap: false,
            shared_texture: false,
        }
    }
}

#[derive(Clone, Copy)]
enum Palette {
    Warm,
    Cool,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn draw_color(rng: &mut ChaCha8Rng, palette: Palette) -> [f64; 3] {
    match palette {
        Palette::Warm => hsv_to_rgb(
            rng.random_range(0.0..0.12),
            rng.random_range(0.55..0.95),
            rng.random_range(0.55..0.95),
        ),
        Palette::Cool => hsv_to_rgb(
            rng.random_range(0.5..0.68),
            rng.random_range(0.15..0.45),
            rng.random_range(0.35..0.75),
        ),
    }
}

fn render_flat(rng: &mut ChaCha8Rng, size: usize, palette: Palette) -> Vec<[f64; 3]> {
    let mut px = vec![draw_color(rng, palette); size * size];
    let n = size as f64;
    for _ in 0..rng.random_range(3..=6) {
        let color = draw_color(rng, palette);
        let (cx, cy) = (rng.random_range(0.0..n), rng.random_range(0.0..n));
        let (rx, ry) = (rng.random_range(0.1 * n..0.35 * n), rng.random_range(0.1 * n..0.35 * n));
        let kind = rng.random_range(0..3);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
                let inside = match kind {
                    0 => dx.abs() <= 1.0 && dy.abs() <= 1.0,
                    1 => dx * dx + dy * dy <= 1.0,
                    _ => dy <= 1.0 && dy >= -1.0 + 2.0 * dx.abs(),
                };
                if inside {
                    px[y * size + x] = color;
                }
            }
        }
    }
    px
}

fn render_noise(rng: &mut ChaCha8Rng, size: usize, palette: Palette) -> Vec<[f64; 3]> {
    let base = draw_color(rng, palette);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..4.0),
                rng.random_range(0.5..4.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.03..0.08),
            )
        })
        .collect();
    let noise = Normal::new(0.0, 0.05).expect("valid sigma");
    let mut px = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
            let shade: f64 = waves
                .iter()
                .map(|&(fx, fy, ph, amp)| amp * (std::f64::consts::TAU * (fx * u + fy * v) + ph).sin())
                .sum();
            let mut c = base;
            for ch in &mut c {
                *ch = (*ch + shade + noise.sample(rng)).clamp(0.0, 1.0);
            }
            px.push(c);
        }
    }
    px
}

/// Writes `<root>/cgi/cgi_NNNN.png` and `<root>/real/real_NNNN.png` and
/// returns their manifest (source tag `source`). Every image depends only
/// on `(seed, class, index)`.
pub fn synth_corpus(root: impl AsRef<Path>, source: &str, opts: &SynthOptions) -> Result<Vec<ManifestRecord>> {
    let root = root.as_ref();
    if opts.size < 4 {
        return Err(Error::Spec(format!("synthetic image size {} < 4", opts.size)));
    }
    let mut records = Vec::with_capacity(2 * opts.per_class);
    for label in Label::BOTH {
        let dir = root.join(label.dir_name());
        fs::create_dir_all(&dir)?;
        let palette = match (label, opts.palette_swap) {
            (Label::Cgi, false) | (Label::Real, true) => Palette::Warm,
            _ => Palette::Cool,
        };
        for i in 0..opts.per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(((label.index() as u64) << 32) | i as u64);
            let px = if label == Label::Cgi && !opts.shared_texture {
                render_flat(&mut rng, opts.size, palette)
            } else {
                render_noise(&mut rng, opts.size, palette)
            };
            let bytes: Vec<u8> = px
                .iter()
                .flat_map(|c| c.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
                .collect();
            let path = dir.join(format!("{}_{i:04}.png", label.dir_name()));
            let img = image::RgbImage::from_raw(opts.size as u32, opts.size as u32, bytes)
                .expect("buffer matches extents");
            img.save(&path).map_err(|e| Error::Decode {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            records.push(ManifestRecord::original(path, label, source));
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_sectors() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        assert_eq!(hsv_to_rgb(0.0, 0.0, 0.5), [0.5, 0.5, 0.5]);
        let g = hsv_to_rgb(1.0 / 3.0, 1.0, 1.0);
        assert!((g[1] - 1.0).abs() < 1e-12 && g[0].abs() < 1e-12);
    }

    #[test]
    fn generation_is_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let opts = SynthOptions {
            per_class: 3,
            size: 16,
            ..Default::default()
        };
        let ra = synth_corpus(a.path(), "S", &opts).unwrap();
        synth_corpus(b.path(), "S", &opts).unwrap();
        assert_eq!(ra.len(), 6);
        for r in &ra {
            let rel = r.path.strip_prefix(a.path()).unwrap();
            assert_eq!(fs::read(&r.path).unwrap(), fs::read(b.path().join(rel)).unwrap());
        }
    }
}
