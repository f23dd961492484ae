use std::path::Path;

use crate::error::{Error, Result};

/// RGB image with channel values in `[0, 1]`, row-major, interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, fill: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&fill);
        }
        Image { width, height, data }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape(format!("{width}x{height} RGB image needs {} values", width * height * 3)));
        }
        Ok(Image { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn hflip(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(self.width - 1 - x, y, self.get(x, y));
            }
        }
        out
    }

    /// Pixel crop `[x0, x1) × [y0, y1)`, clamped to the image.
    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Image {
        let x1 = x1.min(self.width).max(x0 + 1);
        let y1 = y1.min(self.height).max(y0 + 1);
        let (w, h) = (x1 - x0, y1 - y0);
        let mut out = Image::new(w, h, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                out.set(x, y, self.get((x0 + x).min(self.width - 1), (y0 + y).min(self.height - 1)));
            }
        }
        out
    }

    pub fn to_rgb8(&self) -> ::image::RgbImage {
        let bytes = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        ::image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes).expect("buffer size matches")
    }

    pub fn from_rgb8(img: &::image::RgbImage) -> Image {
        let data = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        Image { width: img.width() as usize, height: img.height() as usize, data }
    }

    /// Load any supported image file and resize it to a `side × side` square.
    pub fn load_square(path: impl AsRef<Path>, side: usize) -> Result<Image> {
        let img = ::image::open(path)?.to_rgb8();
        let resized = ::image::imageops::resize(&img, side as u32, side as u32, ::image::imageops::FilterType::Triangle);
        Ok(Image::from_rgb8(&resized))
    }
}
