//! Colour overlays of segmentations on grayscale slices.

use crate::model::{Class, Image, LabelMask};

pub const CEL_COLOR: [u8; 3] = [0, 255, 0];
pub const LVC_COLOR: [u8; 3] = [0, 0, 255];
pub const TZ_COLOR: [u8; 3] = [255, 255, 0];

pub fn class_color(class: Class) -> Option<[u8; 3]> {
    match class {
        Class::Background => None,
        Class::Cel => Some(CEL_COLOR),
        Class::Lvc => Some(LVC_COLOR),
        Class::Tz => Some(TZ_COLOR),
    }
}

/// Grayscale window spanning the image's own intensity range.
pub fn to_gray8(image: &Image) -> Vec<u8> {
    let (lo, hi) = image
        .as_slice()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = (hi - lo).max(f32::EPSILON);
    image
        .as_slice()
        .iter()
        .map(|&v| (((v - lo) / range) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// RGB buffer: each labelled pixel is `opacity·tint + (1 − opacity)·gray`.
pub fn render_overlay(image: &Image, mask: &LabelMask, opacity: f32) -> Vec<u8> {
    assert_eq!(image.dims(), mask.dims(), "overlay needs aligned image and mask");
    let gray = to_gray8(image);
    let a = opacity.clamp(0.0, 1.0);
    let mut rgb = Vec::with_capacity(gray.len() * 3);
    for (&g, &label) in gray.iter().zip(mask.labels()) {
        let tint = Class::from_id(label).and_then(class_color);
        match tint {
            Some(c) => rgb.extend(c.iter().map(|&t| (a * t as f32 + (1.0 - a) * g as f32).round() as u8)),
            None => rgb.extend([g, g, g]),
        }
    }
    rgb
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Grid;

    #[test]
    fn colours_follow_class() {
        let img = Grid::from_vec(2, 2, vec![0.0, 100.0, 50.0, 100.0]).unwrap();
        let mask = LabelMask::from_vec(2, 2, vec![0, 1, 2, 3]).unwrap();
        let rgb = render_overlay(&img, &mask, 1.0);
        assert_eq!(&rgb[0..3], &[0, 0, 0]);
        assert_eq!(&rgb[3..6], &CEL_COLOR);
        assert_eq!(&rgb[6..9], &LVC_COLOR);
        assert_eq!(&rgb[9..12], &TZ_COLOR);
        let half = render_overlay(&img, &mask, 0.5);
        // TZ over white: (255 + 255) / 2 and (0 + 255) / 2.
        assert_eq!(&half[9..12], &[255, 255, 128]);
    }
}
