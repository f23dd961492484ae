//! PNG output for score maps, label maps and detection overlays.

use std::io::Write;
use std::path::Path;

use crate::boxes::BoxXyxy;
use crate::error::{Error, Result};
use crate::raster::Image;

/// Distinct colors for label maps and overlays; indices wrap around.
pub const PALETTE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [170, 110, 40],
];

/// `round(255 · p)` per cell, clamped to `[0, 255]`.
pub fn heatmap_pixels(values: &[f64]) -> Vec<u8> {
    values.iter().map(|p| (255.0 * p).round().clamp(0.0, 255.0) as u8).collect()
}

fn upscale<T: Copy>(pixels: &[T], w: usize, h: usize, scale: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(w * h * scale * scale);
    for y in 0..h * scale {
        for x in 0..w * scale {
            out.push(pixels[(y / scale) * w + x / scale]);
        }
    }
    out
}

fn encoder<W: Write>(out: W, w: usize, h: usize) -> png::Encoder<'static, W> {
    png::Encoder::new(out, w as u32, h as u32)
}

/// Grayscale PNG of one score channel laid out row-major over `w × h` cells,
/// each cell drawn as a `scale × scale` block.
pub fn write_heatmap(out: impl Write, values: &[f64], w: usize, h: usize, scale: usize) -> Result<()> {
    if values.len() != w * h || scale == 0 {
        return Err(Error::shape(format!("{} values for a {w}x{h} map at scale {scale}", values.len())));
    }
    let px = upscale(&heatmap_pixels(values), w, h, scale);
    let mut enc = encoder(out, w * scale, h * scale);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut wr = enc.write_header()?;
    wr.write_image_data(&px)?;
    wr.finish()?;
    Ok(())
}

/// Indexed-color PNG whose pixel indices are the labels.
pub fn write_label_map(out: impl Write, labels: &[usize], w: usize, h: usize, scale: usize) -> Result<()> {
    if labels.len() != w * h || scale == 0 {
        return Err(Error::shape(format!("{} labels for a {w}x{h} map at scale {scale}", labels.len())));
    }
    let max = labels.iter().copied().max().unwrap_or(0);
    if max > 255 {
        return Err(Error::arg(format!("label {max} does not fit an 8-bit palette")));
    }
    let px: Vec<u8> = upscale(labels, w, h, scale).into_iter().map(|l| l as u8).collect();
    let palette: Vec<u8> = (0..=max).flat_map(|i| PALETTE[i % PALETTE.len()]).collect();
    let mut enc = encoder(out, w * scale, h * scale);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(palette);
    let mut wr = enc.write_header()?;
    wr.write_image_data(&px)?;
    wr.finish()?;
    Ok(())
}

/// Copy of `image` with each box outlined in its label's palette color.
pub fn draw_boxes(image: &Image, boxes: &[(BoxXyxy, usize)]) -> Image {
    let mut out = image.clone();
    let (w, h) = (image.width(), image.height());
    for (b, label) in boxes {
        let c = PALETTE[label % PALETTE.len()].map(|v| v as f32 / 255.0);
        let x0 = (b.x1 * w as f64).floor().clamp(0.0, (w - 1) as f64) as usize;
        let x1 = (b.x2 * w as f64).ceil().clamp(1.0, w as f64) as usize - 1;
        let y0 = (b.y1 * h as f64).floor().clamp(0.0, (h - 1) as f64) as usize;
        let y1 = (b.y2 * h as f64).ceil().clamp(1.0, h as f64) as usize - 1;
        for x in x0..=x1.max(x0) {
            out.set(x, y0, c);
            out.set(x, y1.max(y0), c);
        }
        for y in y0..=y1.max(y0) {
            out.set(x0, y, c);
            out.set(x1.max(x0), y, c);
        }
    }
    out
}

pub fn save_rgb(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    image.to_rgb8().save(path)?;
    Ok(())
}

pub fn save_heatmap(path: impl AsRef<Path>, values: &[f64], w: usize, h: usize, scale: usize) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_heatmap(f, values, w, h, scale)
}

pub fn save_label_map(path: impl AsRef<Path>, labels: &[usize], w: usize, h: usize, scale: usize) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_label_map(f, labels, w, h, scale)
}
