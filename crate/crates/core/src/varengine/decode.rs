use crate::error::{Error, Result};
use crate::matgrid::FeatureMap;
use crate::numcore::gaussian_matrix;

/// Seed of the fixed `d -> 3` colour map.
pub const DECODER_SEED: u64 = 0xdec0de;
/// Value used for a channel with no spread (including the zero feature).
pub const MID_GRAY: u8 = 128;

/// 8-bit RGB image, row-major, three bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Raster {
    /// Binary PPM (`P6`, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// Toy image decoder: a seeded linear map to three channels, then each
/// channel is min-max rescaled to `[0, 255]`. A constant channel maps to
/// [`MID_GRAY`].
pub fn decode_to_image(f: &FeatureMap) -> Result<Raster> {
    let d = f.channels();
    if d < 3 {
        return Err(Error::InvalidShape(format!("decoder needs at least 3 channels, got {d}")));
    }
    let map = gaussian_matrix(d, 3, DECODER_SEED, 1.0 / (d as f64).sqrt());
    let rgb = f.data().dot(&map);
    let mut pixels = vec![0u8; rgb.len()];
    for c in 0..3 {
        let col = rgb.column(c);
        let lo = col.fold(f64::INFINITY, |a, &b| a.min(b));
        let hi = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        for (i, &v) in col.iter().enumerate() {
            pixels[3 * i + c] = if hi > lo {
                ((v - lo) / (hi - lo) * 255.0).round() as u8
            } else {
                MID_GRAY
            };
        }
    }
    let grid = f.grid();
    Ok(Raster {
        height: grid.h,
        width: grid.w,
        pixels,
    })
}
