//! Inputs to a network: raw pixels or features from a frozen extractor.
//!
//! Large pretrained backbones are not rebuilt here. Anything that turns an
//! image into a fixed-width vector can implement [`FeatureExtractor`]; the
//! crate ships [`RandomProjection`], a fixed random map used as a toy
//! backbone in tests and desk-scale runs.

use image::DynamicImage;
use serde::{Deserialize, Serialize};

use crate::imaging::{to_tensor, Shape3};
use crate::rng::{rng_from_seed, unit_f64};

/// Turns a batch of images into one vector per image, all of the same width.
pub trait FeatureExtractor: Send + Sync {
    fn feature_dim(&self) -> usize;

    fn extract_batch(&self, images: &[DynamicImage]) -> Vec<Vec<f32>>;

    fn extract(&self, image: &DynamicImage) -> Vec<f32> {
        self.extract_batch(std::slice::from_ref(image)).pop().expect("one row per image")
    }
}

/// Resize-and-scale pixel input, HWC order.
#[derive(Debug, Clone, Copy)]
pub struct PixelInput {
    pub shape: Shape3,
}

impl FeatureExtractor for PixelInput {
    fn feature_dim(&self) -> usize {
        self.shape.size()
    }

    fn extract_batch(&self, images: &[DynamicImage]) -> Vec<Vec<f32>> {
        images.iter().map(|img| to_tensor(img, self.shape)).collect()
    }
}

/// Serializable description of a built-in backbone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneSpec {
    RandomProjection { input_side: usize, feature_dim: usize, seed: u64 },
}

impl BackboneSpec {
    pub fn feature_dim(&self) -> usize {
        match *self {
            BackboneSpec::RandomProjection { feature_dim, .. } => feature_dim,
        }
    }

    pub fn build(&self) -> Box<dyn FeatureExtractor> {
        match *self {
            BackboneSpec::RandomProjection { input_side, feature_dim, seed } => {
                Box::new(RandomProjection::new(input_side, feature_dim, seed))
            }
        }
    }
}

/// Grayscale `side x side` pixels, mean-centered, through a fixed Gaussian
/// projection and a ReLU.
#[derive(Debug, Clone)]
pub struct RandomProjection {
    side: usize,
    dim: usize,
    // dim rows of side*side weights
    weights: Vec<f32>,
}

impl RandomProjection {
    pub fn new(side: usize, dim: usize, seed: u64) -> Self {
        assert!(side > 0 && dim > 0, "projection needs positive sizes");
        let n = side * side;
        let mut rng = rng_from_seed(seed);
        let scale = (1.0 / n as f64).sqrt();
        let weights = (0..n * dim)
            .map(|_| {
                // Box-Muller
                let u1 = unit_f64(&mut rng).max(f64::MIN_POSITIVE);
                let u2 = unit_f64(&mut rng);
                ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos() * scale) as f32
            })
            .collect();
        RandomProjection { side, dim, weights }
    }
}

impl FeatureExtractor for RandomProjection {
    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn extract_batch(&self, images: &[DynamicImage]) -> Vec<Vec<f32>> {
        let n = self.side * self.side;
        images
            .iter()
            .map(|img| {
                let mut px = to_tensor(img, Shape3::new(self.side, self.side, 1));
                let mean = px.iter().sum::<f32>() / n as f32;
                px.iter_mut().for_each(|p| *p -= mean);
                self.weights
                    .chunks_exact(n)
                    .map(|row| row.iter().zip(&px).map(|(w, p)| w * p).sum::<f32>().max(0.0) * 4.0)
                    .collect()
            })
            .collect()
    }
}
