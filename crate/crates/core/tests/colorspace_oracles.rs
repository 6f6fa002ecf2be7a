mod common;

use proptest::prelude::*;
use rand::Rng;
use swinforensics::colorspace::{
    convert, denormalize, normalize, resize_bilinear, rgb_to_hsv_pixel, rgb_to_ycbcr_pixel, ColorSpace, ImageTensor,
    NORM_MEAN, NORM_STD,
};
use swinforensics::Error;

/// Textbook hexcone inverse with hue in turns.
fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h * 6.0;
    let sector = h6.floor() as i64 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn close(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
    a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn ycbcr_anchor_values() {
    assert!(close(rgb_to_ycbcr_pixel([1.0, 1.0, 1.0]), [1.0, 0.5, 0.5], 1e-7));
    assert!(close(rgb_to_ycbcr_pixel([0.0, 0.0, 0.0]), [0.0, 0.5, 0.5], 1e-7));
    let (r, g, b) = (0.2, 0.5, 0.7);
    let expected = [
        0.299 * r + 0.587 * g + 0.114 * b,
        0.5 - 0.168736 * r - 0.331264 * g + 0.5 * b,
        0.5 + 0.5 * r - 0.418688 * g - 0.081312 * b,
    ];
    assert!(close(rgb_to_ycbcr_pixel([r, g, b]), expected, 1e-7));
}

#[test]
fn hexcone_anchor_values() {
    let cases = [
        ([1.0, 0.0, 0.0], [0.0, 1.0, 1.0]),
        ([0.0, 1.0, 0.0], [1.0 / 3.0, 1.0, 1.0]),
        ([0.0, 0.0, 1.0], [2.0 / 3.0, 1.0, 1.0]),
        ([1.0, 1.0, 0.0], [1.0 / 6.0, 1.0, 1.0]),
        ([0.0, 1.0, 1.0], [0.5, 1.0, 1.0]),
        ([1.0, 0.0, 1.0], [5.0 / 6.0, 1.0, 1.0]),
        ([0.5, 0.25, 0.25], [0.0, 0.5, 0.5]),
    ];
    for (rgb, hsv) in cases {
        assert!(close(rgb_to_hsv_pixel(rgb), hsv, 1e-7), "{rgb:?}");
    }
}

#[test]
fn gray_ramp_is_achromatic() {
    for k in 0..=16 {
        let v = k as f64 / 16.0;
        let y = rgb_to_ycbcr_pixel([v, v, v]);
        assert!((y[0] - v).abs() < 1e-7 && (y[1] - 0.5).abs() < 1e-7 && (y[2] - 0.5).abs() < 1e-7);
        assert_eq!(rgb_to_hsv_pixel([v, v, v]), [0.0, 0.0, v]);
    }
}

#[test]
fn hsv_roundtrip_on_random_pixels() {
    let mut r = common::rng(17);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let px = [r.random::<f64>(), r.random::<f64>(), r.random::<f64>()];
        let back = hsv_to_rgb(rgb_to_hsv_pixel(px));
        for c in 0..3 {
            worst = worst.max((back[c] - px[c]).abs());
        }
    }
    assert!(worst < 1e-5, "{worst}");
}

#[test]
fn normalize_then_denormalize_is_identity() {
    let mut r = common::rng(3);
    let (h, w) = (13, 7);
    let data: Vec<f64> = (0..h * w * 3).map(|_| r.random()).collect();
    for space in ColorSpace::ALL {
        let img = ImageTensor::new(h, w, data.clone(), space).unwrap();
        let t = normalize::<f64>(&img, NORM_MEAN, NORM_STD).unwrap();
        assert_eq!(t.shape(), &[3, h, w]);
        let back = denormalize(&t, NORM_MEAN, NORM_STD, space).unwrap();
        assert_eq!(back.space(), space);
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
    // f32 model inputs meet the same bound.
    let img = ImageTensor::new(h, w, data, ColorSpace::Rgb).unwrap();
    let t = normalize::<f32>(&img, NORM_MEAN, NORM_STD).unwrap();
    let back = denormalize(&t, NORM_MEAN, NORM_STD, ColorSpace::Rgb).unwrap();
    for (a, b) in back.data().iter().zip(img.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn normalize_is_channel_major() {
    let img = ImageTensor::new(1, 2, vec![1.0, 0.456, 0.406, 0.485, 0.456, 0.406], ColorSpace::Rgb).unwrap();
    let t = normalize::<f64>(&img, NORM_MEAN, NORM_STD).unwrap();
    assert!((t.data()[0] - (1.0 - 0.485) / 0.229).abs() < 1e-12);
    assert!((t.data()[0] - 2.2489).abs() < 1e-4);
    assert_eq!(&t.data()[1..], &[0.0; 5]);
}

#[test]
fn ramp_downsample_by_hand() {
    // 4×4 horizontal ramp to 2×2: output column j samples source x = 2j + 0.5,
    // midway between columns 2j and 2j+1.
    let values = [0.0, 0.2, 0.6, 1.0];
    let mut data = Vec::new();
    for _ in 0..4 {
        for v in values {
            data.extend([v, v, v]);
        }
    }
    let img = ImageTensor::new(4, 4, data, ColorSpace::Rgb).unwrap();
    let out = resize_bilinear(&img, 2, 2).unwrap();
    for y in 0..2 {
        assert!((out.pixel(y, 0)[0] - 0.1).abs() < 1e-12);
        assert!((out.pixel(y, 1)[0] - 0.8).abs() < 1e-12);
    }
}

#[test]
fn non_rgb_input_is_a_tag_error() {
    let img = ImageTensor::constant(2, 2, [0.5; 3], ColorSpace::Hsv).unwrap();
    assert!(matches!(convert(&img, ColorSpace::YCbCr), Err(Error::ColorSpaceTag { .. })));
    assert!(convert(&img, ColorSpace::Rgb).is_err());
}

proptest! {
    #[test]
    fn conversions_preserve_shape_and_range(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let data: Vec<f64> = (0..h * w * 3).map(|_| r.random()).collect();
        let img = ImageTensor::new(h, w, data, ColorSpace::Rgb).unwrap();
        for space in ColorSpace::ALL {
            let out = convert(&img, space).unwrap();
            prop_assert_eq!((out.height(), out.width(), out.space()), (h, w, space));
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn hue_stays_below_one_turn(r in 0.0f64..=1.0, g in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let [h, _, _] = rgb_to_hsv_pixel([r, g, b]);
        prop_assert!((0.0..1.0).contains(&h));
    }
}
