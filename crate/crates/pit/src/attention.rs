//! Attention-map export.
//!
//! Each branch gets `<branch>.map`, a text grid of class-token attention
//! over the `h x w` patch tokens:
//!
//! ```text
//! # pit-attention 1
//! branch = vertical_1
//! height = 21
//! width = 10
//! <w values>        one line per grid row, f64 shortest round-trip
//! ```
//!
//! and `<branch>.product.<pgm|ppm>`: the input image multiplied by the map
//! upsampled to pixels (each pixel sums the attention of every patch whose
//! kernel window covers it, scaled so the largest value is 1).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use pit_core::data::Image;
use pit_core::model::{AttentionMap, PitModel};

use crate::error::{io_err, Result};
use crate::pnm;

pub const ATTENTION_HEADER: &str = "# pit-attention 1";

pub fn render_map(map: &AttentionMap) -> String {
    let mut s = format!("{ATTENTION_HEADER}\n");
    let _ = writeln!(s, "branch = {}", map.label);
    let _ = writeln!(s, "height = {}", map.height);
    let _ = writeln!(s, "width = {}", map.width);
    for row in map.values.chunks(map.width) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(s, "{}", cells.join(" "));
    }
    s
}

/// Pixel-level attention `[H * W]`, normalised to a maximum of 1.
pub fn upsample(map: &AttentionMap, height: usize, width: usize, kernel: usize, stride: usize) -> Vec<f64> {
    let mut up = vec![0.0; height * width];
    for r in 0..map.height {
        for q in 0..map.width {
            let a = map.values[r * map.width + q];
            for y in r * stride..r * stride + kernel {
                for x in q * stride..q * stride + kernel {
                    up[y * width + x] += a;
                }
            }
        }
    }
    let max = up.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        up.iter_mut().for_each(|v| *v /= max);
    }
    up
}

pub fn product(image: &Image, up: &[f64]) -> Result<Image> {
    let plane = image.height() * image.width();
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v * up[i % plane])
        .collect();
    Ok(Image::new(image.channels(), image.height(), image.width(), data)?)
}

/// Writes the map and product image of every branch into `out`.
pub fn export(model: &PitModel, image: &Image, camera: usize, out: &Path) -> Result<Vec<PathBuf>> {
    let maps = model.attention_maps(image, camera)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let cfg = &model.config;
    let ext = pnm::extension(image.channels())?;
    let mut written = Vec::new();
    for map in &maps {
        let path = out.join(format!("{}.map", map.label));
        fs::write(&path, render_map(map)).map_err(io_err(&path))?;
        written.push(path);
        let up = upsample(map, image.height(), image.width(), cfg.kernel, cfg.stride);
        let path = out.join(format!("{}.product.{ext}", map.label));
        pnm::write(&path, &product(image, &up)?)?;
        written.push(path);
    }
    Ok(written)
}
