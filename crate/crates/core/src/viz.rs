//! Filter images as binary PGM (P5) or PPM (P6).

use std::fs;
use std::path::{Path, PathBuf};

use crate::em::PatchMixtureModel;
use crate::error::{Error, Result};

/// Min-max scales values to `0..=255`; a constant input maps to 128.
pub fn scale_to_bytes(values: &[f32]) -> Vec<u8> {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if hi <= lo {
        return vec![128; values.len()];
    }
    let range = (hi - lo) as f64;
    values
        .iter()
        .map(|&v| ((v - lo) as f64 / range * 255.0).round() as u8)
        .collect()
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

type Encoder = fn(usize, usize, &[u8]) -> Vec<u8>;

/// `pixels` is interleaved RGB.
pub fn encode_ppm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), 3 * width * height);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Planar `C x L x L` bytes to interleaved.
fn interleave(planar: &[u8], channels: usize) -> Vec<u8> {
    let plane = planar.len() / channels;
    (0..plane)
        .flat_map(|p| (0..channels).map(move |c| planar[c * plane + p]))
        .collect()
}

/// Writes one image per filter plus `grid.pgm`/`grid.ppm` tiling all filters
/// row-major with a one-pixel black border. Returns the written paths.
pub fn write_filter_images(model: &PatchMixtureModel, dir: &Path) -> Result<Vec<PathBuf>> {
    let channels = model.channels();
    let (ext, encode): (&str, Encoder) = match channels {
        1 => ("pgm", encode_pgm),
        3 => ("ppm", encode_ppm),
        c => {
            return Err(Error::Config(format!(
                "can only visualize 1- or 3-channel filters, got {c}"
            )))
        }
    };
    fs::create_dir_all(dir)?;
    let k = model.num_patches();
    let l = model.patch_size();
    let cols = (k as f64).sqrt().ceil() as usize;
    let rows = k.div_ceil(cols);
    let (gw, gh) = (cols * (l + 1) + 1, rows * (l + 1) + 1);
    let mut grid = vec![0u8; gw * gh * channels];
    let mut written = Vec::with_capacity(k + 1);
    for f in 0..k {
        let pixels = interleave(&scale_to_bytes(model.filter(f)), channels);
        let path = dir.join(format!("filter_{f:03}.{ext}"));
        fs::write(&path, encode(l, l, &pixels))?;
        written.push(path);
        let (ox, oy) = ((f % cols) * (l + 1) + 1, (f / cols) * (l + 1) + 1);
        for y in 0..l {
            let src = &pixels[y * l * channels..(y + 1) * l * channels];
            let start = ((oy + y) * gw + ox) * channels;
            grid[start..start + l * channels].copy_from_slice(src);
        }
    }
    let path = dir.join(format!("grid.{ext}"));
    fs::write(&path, encode(gw, gh, &grid))?;
    written.push(path);
    Ok(written)
}
