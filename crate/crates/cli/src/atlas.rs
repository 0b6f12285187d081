//! Renders a learned filter bank as a tiled raster image.
//!
//! Each filter row (planar channel-major layout, 3 color channels) becomes a
//! W x W RGB tile. Values are linearly stretched per filter, jointly across
//! its three channels, so that [min, max] maps to [0, 255]; a filter whose
//! entries are all equal renders mid-gray. Tiles are ordered by final-epoch
//! win count (descending, ties by row index) and separated by 1-pixel black
//! gutters.

use std::path::Path;

use image::{ImageBuffer, Rgb};
use nnl_core::dataset::CHANNELS;
use nnl_core::hebbian::FilterBank;
use nnl_core::{Error, Result};

/// Stretches one filter row into interleaved RGB bytes (row-major pixels).
fn stretch_tile(values: &[f32], window: usize) -> Vec<u8> {
    let area = window * window;
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    let mut tile = vec![0u8; area * CHANNELS];
    for px in 0..area {
        for ch in 0..CHANNELS {
            let v = values[ch * area + px];
            let byte = if span > 0.0 {
                (f64::from(v - lo) / f64::from(span) * 255.0).round() as u8
            } else {
                128
            };
            tile[px * CHANNELS + ch] = byte;
        }
    }
    tile
}

/// Orders filter indices by win count descending; ties keep row order.
fn display_order(bank: &FilterBank) -> Vec<usize> {
    let mut order: Vec<usize> = (0..bank.channels()).collect();
    order.sort_by(|&a, &b| bank.win_counts[b].cmp(&bank.win_counts[a]).then(a.cmp(&b)));
    order
}

/// Renders the atlas to an in-memory RGB image.
pub fn render_atlas(bank: &FilterBank, columns: usize) -> Result<ImageBuffer<Rgb<u8>, Vec<u8>>> {
    if columns == 0 {
        return Err(Error::config("atlas column count must be positive"));
    }
    let k = bank.channels();
    if k == 0 {
        return Err(Error::config("cannot render an empty filter bank"));
    }
    let w = bank.window;
    if bank.patch_len() != w * w * CHANNELS {
        return Err(Error::config(format!(
            "filter length {} does not match window {w} with {CHANNELS} channels",
            bank.patch_len()
        )));
    }
    let cols = columns.min(k);
    let rows = k.div_ceil(cols);
    let width = (cols * w + (cols - 1)) as u32;
    let height = (rows * w + (rows - 1)) as u32;
    let mut img = ImageBuffer::from_pixel(width, height, Rgb([0u8, 0, 0]));
    for (slot, &f) in display_order(bank).iter().enumerate() {
        let tile = stretch_tile(bank.m.row(f), w);
        let x0 = (slot % cols) * (w + 1);
        let y0 = (slot / cols) * (w + 1);
        for py in 0..w {
            for px in 0..w {
                let t = (py * w + px) * CHANNELS;
                img.put_pixel(
                    (x0 + px) as u32,
                    (y0 + py) as u32,
                    Rgb([tile[t], tile[t + 1], tile[t + 2]]),
                );
            }
        }
    }
    Ok(img)
}

/// Renders the atlas and writes it as a PNG file.
pub fn export_filter_atlas(bank: &FilterBank, columns: usize, path: &Path) -> Result<()> {
    let img = render_atlas(bank, columns)?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}
