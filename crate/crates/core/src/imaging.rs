//! Image decoding and the fixed preprocessing used for training and inference.

use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, GenericImageView};
use serde::{Deserialize, Serialize};

/// Height, width and channel count of an image tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct Shape3 {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape3 {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Shape3 { height, width, channels }
    }

    pub const fn flat(n: usize) -> Self {
        Shape3 { height: 1, width: 1, channels: n }
    }

    pub fn size(&self) -> usize {
        self.height * self.width * self.channels
    }
}

impl std::fmt::Display for Shape3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

pub fn load_image(path: &Path) -> Result<DynamicImage, image::ImageError> {
    image::ImageReader::open(path)?.with_guessed_format()?.decode()
}

/// Number of color channels, alpha excluded. Grayscale images count as one.
pub fn color_channels(img: &DynamicImage) -> usize {
    if img.color().has_color() {
        3
    } else {
        1
    }
}

/// Native-resolution pixels as `[0,1]` values, HWC order, alpha dropped.
pub fn normalized_pixels(img: &DynamicImage) -> (Shape3, Vec<f64>) {
    let (w, h) = img.dimensions();
    let shape = Shape3::new(h as usize, w as usize, color_channels(img));
    let data = if shape.channels == 1 {
        img.to_luma32f().into_raw().into_iter().map(f64::from).collect()
    } else {
        img.to_rgb32f().into_raw().into_iter().map(f64::from).collect()
    };
    (shape, data)
}

/// Resizes to `shape`, scales to `[0,1]`, and converts the channel count:
/// grayscale is replicated to three channels, color is reduced to luma.
pub fn to_tensor(img: &DynamicImage, shape: Shape3) -> Vec<f32> {
    let (w, h) = img.dimensions();
    let resized;
    let img = if (w as usize, h as usize) == (shape.width, shape.height) {
        img
    } else {
        resized = img.resize_exact(shape.width as u32, shape.height as u32, FilterType::Triangle);
        &resized
    };
    match shape.channels {
        1 => img.to_luma32f().into_raw(),
        3 => img.to_rgb32f().into_raw(),
        c => panic!("unsupported channel count {c}"),
    }
}
