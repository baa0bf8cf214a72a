//! Range-image graymaps and label overlays as binary PGM / PPM.

use stdenoise::projection::OrderedPointCloud;
use stdenoise::scan_io::Class;

const NOISE_RGB: [u8; 3] = [255, 32, 32];

/// Gray level per pixel: 0 for empty pixels, brighter when closer.
pub fn gray_levels(opc: &OrderedPointCloud, max_range: f64) -> Vec<u8> {
    (0..opc.pixels())
        .map(|p| {
            if !opc.is_valid(p) {
                return 0;
            }
            let r = opc.range_at(p).min(max_range).max(0.0);
            1 + (254.0 * (1.0 - r / max_range)).round() as u8
        })
        .collect()
}

pub fn pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

/// Gray base image with noise pixels painted over.
pub fn overlay_ppm(width: usize, height: usize, gray: &[u8], pixel_classes: Option<&[Class]>) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for (i, &g) in gray.iter().enumerate() {
        let noisy = pixel_classes.is_some_and(|c| c[i].is_noise()) && g > 0;
        out.extend_from_slice(&if noisy { NOISE_RGB } else { [g, g, g] });
    }
    out
}
