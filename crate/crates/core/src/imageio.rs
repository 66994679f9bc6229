//! Binary PPM (P6) and PGM (P5) writers for `[3, H, W]` images in `[-1, 1]`.

use std::fs;
use std::path::Path;

use crate::error::{invalid, Result};
use crate::numerics::{Float, Tensor};

fn to_byte(x: f64) -> u8 {
    (((x.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

pub fn encode_ppm<F: Float>(image: &Tensor<F>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(invalid(format!("PPM needs [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(to_byte(d[c * h * w + y * w + x].as_f64()));
            }
        }
    }
    Ok(out)
}

pub fn write_ppm<F: Float>(path: impl AsRef<Path>, image: &Tensor<F>) -> Result<()> {
    fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

/// Boolean mask as a black/white PGM.
pub fn write_pgm(path: impl AsRef<Path>, mask: &[bool], width: usize) -> Result<()> {
    let height = mask.len() / width.max(1);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(mask.iter().map(|&m| if m { 255u8 } else { 0 }));
    fs::write(path, out)?;
    Ok(())
}
