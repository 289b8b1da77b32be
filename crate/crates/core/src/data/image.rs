use std::path::Path;

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// An 8-bit RGB image stored planar, `[3, height, width]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != CHANNELS * height * width || height == 0 || width == 0 {
            return Err(Error::invalid(
                "image",
                format!("{} bytes for a {height}x{width} RGB image", data.len()),
            ));
        }
        Ok(Image { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn from_rgb(rgb: &RgbImage) -> Self {
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut data = vec![0u8; CHANNELS * h * w];
        for (x, y, p) in rgb.enumerate_pixels() {
            for c in 0..CHANNELS {
                data[(c * h + y as usize) * w + x as usize] = p.0[c];
            }
        }
        Image { height: h, width: w, data }
    }

    pub fn to_rgb(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            image::Rgb([self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)])
        })
    }

    /// Decodes any supported format, converting to 8-bit RGB.
    pub fn read(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Image::from_rgb(&img.to_rgb8()))
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        self.to_rgb()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    /// Pixel values scaled to `[0, 1]`, planar.
    pub fn to_unit(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32 / 255.0).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropMode {
    Random,
    Center,
}

/// Square window of side `size`; random mode draws the top-left corner uniformly.
pub fn crop(image: &Image, mode: CropMode, size: usize, rng: &mut impl Rng) -> Result<Image> {
    let (h, w) = (image.height, image.width);
    if size == 0 || size > h || size > w {
        return Err(Error::invalid("crop", format!("crop {size} does not fit a {h}x{w} image")));
    }
    let (top, left) = match mode {
        CropMode::Center => ((h - size) / 2, (w - size) / 2),
        CropMode::Random => (rng.gen_range(0..=h - size), rng.gen_range(0..=w - size)),
    };
    Ok(window(image, top, left, size))
}

pub(crate) fn window(image: &Image, top: usize, left: usize, size: usize) -> Image {
    let mut data = Vec::with_capacity(CHANNELS * size * size);
    for c in 0..CHANNELS {
        for y in top..top + size {
            let start = (c * image.height + y) * image.width + left;
            data.extend_from_slice(&image.data[start..start + size]);
        }
    }
    Image {
        height: size,
        width: size,
        data,
    }
}
