//! Pattern-stamped grayscale corpora for desk-scale end-to-end runs.
//!
//! Every image has a random background level plus uniform noise. Disease
//! classes carry one class-specific stamp at a random position:
//! `covid` a filled disk, `opacity` two horizontal bars, `pneumonia` a plus
//! sign. `normal` images carry no stamp.

use std::io;
use std::path::Path;

use image::{GrayImage, Luma};

use crate::dataio::{COVID, NORMAL, OPACITY, PNEUMONIA};
use crate::rng::{below, derive_seed, rng_from_seed, unit_f64, Rng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    pub n_per_class: usize,
    pub side: u32,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig { n_per_class: 500, side: 64, noise: 0.15, seed: 0 }
    }
}

pub const CLASSES: [&str; 4] = [NORMAL, COVID, OPACITY, PNEUMONIA];

/// One image of `class` drawn from `rng`.
pub fn stamp_image(class: &str, side: u32, noise: f64, rng: &mut Rng) -> GrayImage {
    let s = side as i64;
    let bg = 0.2 + 0.2 * unit_f64(rng);
    let mut px = vec![bg; (side * side) as usize];
    let fg = 0.75 + 0.2 * unit_f64(rng);
    let r = (s / 8).max(2);
    let margin = r + 2;
    let span = (s - 2 * margin).max(1) as u64;
    let cx = margin + below(rng, span) as i64;
    let cy = margin + below(rng, span) as i64;
    let mut set = |x: i64, y: i64| {
        if (0..s).contains(&x) && (0..s).contains(&y) {
            px[(y * s + x) as usize] = fg;
        }
    };
    match class {
        COVID => {
            for y in cy - r..=cy + r {
                for x in cx - r..=cx + r {
                    if (x - cx).pow(2) + (y - cy).pow(2) <= r * r {
                        set(x, y);
                    }
                }
            }
        }
        OPACITY => {
            for dy in [-r / 2 - 1, r / 2] {
                for t in 0..2 {
                    for x in cx - r - 1..=cx + r + 1 {
                        set(x, cy + dy + t);
                    }
                }
            }
        }
        PNEUMONIA => {
            for t in -1..=0 {
                for d in -r - 1..=r + 1 {
                    set(cx + d, cy + t);
                    set(cx + t, cy + d);
                }
            }
        }
        _ => {}
    }
    let data = px
        .iter()
        .map(|&v| {
            let n = (2.0 * unit_f64(rng) - 1.0) * noise;
            ((v + n).clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    GrayImage::from_raw(side, side, data).expect("buffer size")
}

/// Writes `root/<class>/<class>_NNNN.png` for the four classes.
pub fn write_corpus(root: &Path, config: &SyntheticConfig) -> io::Result<()> {
    for class in CLASSES {
        let dir = root.join(class);
        std::fs::create_dir_all(&dir)?;
        let mut rng = rng_from_seed(derive_seed(config.seed, &format!("synthetic/{class}")));
        for i in 0..config.n_per_class {
            let img = stamp_image(class, config.side, config.noise, &mut rng);
            img.save(dir.join(format!("{class}_{i:04}.png"))).map_err(io::Error::other)?;
        }
    }
    Ok(())
}

/// A constant image, handy for statistics tests.
pub fn constant_image(side: u32, value: u8) -> GrayImage {
    GrayImage::from_pixel(side, side, Luma([value]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stamps_are_deterministic_and_distinct() {
        let a = stamp_image(COVID, 64, 0.1, &mut rng_from_seed(1));
        let b = stamp_image(COVID, 64, 0.1, &mut rng_from_seed(1));
        assert_eq!(a, b);
        let bright = |img: &GrayImage| img.pixels().filter(|p| p.0[0] > 170).count();
        let normal = stamp_image(NORMAL, 64, 0.1, &mut rng_from_seed(1));
        assert_eq!(bright(&normal), 0);
        for class in [COVID, OPACITY, PNEUMONIA] {
            assert!(bright(&stamp_image(class, 64, 0.1, &mut rng_from_seed(2))) > 20, "{class}");
        }
    }
}
