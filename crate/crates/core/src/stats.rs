//! Exploratory statistics: class distribution and per-image channel moments.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::DatasetManifest;
use crate::imaging::{load_image, normalized_pixels};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("image has no pixels")]
    EmptyImage,
    #[error("cannot decode sample '{id}': {message}")]
    Decode { id: String, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-channel mean and population standard deviation of one image, with
/// intensities normalized to `[0,1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageStats {
    pub sample_id: String,
    pub label: String,
    pub channel_mean: Vec<f64>,
    pub channel_std: Vec<f64>,
}

/// Two-pass per-channel mean and population std over interleaved pixels.
pub fn channel_moments<S: Scalar>(pixels: &[S], channels: usize) -> Result<(Vec<S>, Vec<S>), StatsError> {
    if channels == 0 || pixels.is_empty() || !pixels.len().is_multiple_of(channels) {
        return Err(StatsError::EmptyImage);
    }
    let n = S::from_usize_lossy(pixels.len() / channels);
    let mut mean = vec![S::zero(); channels];
    for px in pixels.chunks_exact(channels) {
        for (m, &v) in mean.iter_mut().zip(px) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![S::zero(); channels];
    for px in pixels.chunks_exact(channels) {
        for ((acc, &v), &m) in var.iter_mut().zip(px).zip(&mean) {
            let d = v - m;
            *acc += d * d;
        }
    }
    let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
    Ok((mean, std))
}

/// Moments of a decoded image at native resolution. Grayscale images
/// produce one channel.
pub fn image_channel_stats(image: &image::DynamicImage) -> Result<(Vec<f64>, Vec<f64>), StatsError> {
    let (shape, pixels) = normalized_pixels(image);
    channel_moments(&pixels, shape.channels)
}

/// Exact per-class counts, every schema class present.
pub fn class_distribution(manifest: &DatasetManifest) -> BTreeMap<String, usize> {
    manifest.class_counts()
}

/// One [`ImageStats`] row per sample, in manifest order.
pub fn scatter_table(manifest: &DatasetManifest) -> Result<Vec<ImageStats>, StatsError> {
    manifest
        .samples()
        .par_iter()
        .map(|s| {
            let img = load_image(&s.path).map_err(|e| StatsError::Decode { id: s.id.clone(), message: e.to_string() })?;
            let (channel_mean, channel_std) = image_channel_stats(&img)
                .map_err(|e| StatsError::Decode { id: s.id.clone(), message: e.to_string() })?;
            Ok(ImageStats { sample_id: s.id.clone(), label: s.label.clone(), channel_mean, channel_std })
        })
        .collect()
}

/// `id,label,mean_c0[,mean_c1,mean_c2],std_c0[,std_c1,std_c2]`. The column
/// count follows the widest image; narrower rows leave the extra cells empty.
pub fn write_scatter_csv(rows: &[ImageStats], path: &Path) -> Result<(), StatsError> {
    let channels = rows.iter().map(|r| r.channel_mean.len()).max().unwrap_or(1);
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..channels).map(|c| format!("mean_c{c}")));
    header.extend((0..channels).map(|c| format!("std_c{c}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.sample_id.clone(), r.label.clone()];
        for values in [&r.channel_mean, &r.channel_std] {
            rec.extend((0..channels).map(|c| values.get(c).map(|v| format!("{v:.6}")).unwrap_or_default()));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// `label,count`.
pub fn write_distribution_csv(dist: &BTreeMap<String, usize>, path: &Path) -> Result<(), StatsError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    w.write_record(["label", "count"])?;
    for (label, count) in dist {
        w.write_record([label.as_str(), &count.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
