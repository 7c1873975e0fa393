use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::Hook;
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::intervention::{extract_vector, ActivationVector, GridSpec};
use crate::ops::cosine_similarity;
use crate::rng::{derive_seed, SplitMix64};
use crate::scalar::Scalar;

use super::{l1_distance, stream, visualize, Background, Pipeline};

/// Full-vs-grid comparison of one extracted vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileabilityRecord {
    /// Position in the sample sequence.
    pub index: usize,
    pub seed: u64,
    pub vector: ActivationVector,
    pub cosine_similarity: f64,
    pub l1_distance: f64,
    pub full_image: String,
    pub grid_image: String,
}

#[derive(Debug, Clone)]
pub struct ScanSample {
    pub record: TileabilityRecord,
    pub full: RgbImage,
    pub grid: RgbImage,
}

/// Samples sorted ascending by cosine similarity.
#[derive(Debug, Clone)]
pub struct ScanOutput {
    pub grid_size: usize,
    pub samples: Vec<ScanSample>,
}

impl ScanOutput {
    pub fn records(&self) -> impl Iterator<Item = &TileabilityRecord> {
        self.samples.iter().map(|s| &s.record)
    }

    /// The `k` most tileable samples, highest similarity first.
    pub fn top(&self, k: usize) -> Vec<&ScanSample> {
        self.samples.iter().rev().take(k).collect()
    }

    /// The `k` least tileable samples, lowest similarity first.
    pub fn bottom(&self, k: usize) -> Vec<&ScanSample> {
        self.samples.iter().take(k).collect()
    }
}

/// Sorts ascending by cosine similarity; ties keep sample order.
pub fn rank_records<R>(items: &mut [R], key: impl Fn(&R) -> (f64, usize)) {
    items.sort_by(|a, b| {
        let (ca, ia) = key(a);
        let (cb, ib) = key(b);
        ca.partial_cmp(&cb).unwrap_or(Ordering::Equal).then(ia.cmp(&ib))
    });
}

fn scan_one<T: Scalar>(pipe: &Pipeline<'_, T>, grid: GridSpec, index: usize, seed: u64) -> Result<ScanSample> {
    let s = derive_seed(seed, index as u64);
    let layer = &pipe.layer_x;
    let (_, trace) = pipe.generator.forward_seed(s, &[Hook::capture(&layer.name)])?;
    let mut rng = SplitMix64::new(derive_seed(s, stream::PIXEL));
    let (x, y) = (rng.below(layer.width), rng.below(layer.height));
    let vector = extract_vector(&trace, layer, x, y)?;

    let full = visualize(pipe.generator, layer, &vector, GridSpec::FULL, Background::Original, s)?;
    let gridded = visualize(pipe.generator, layer, &vector, grid, Background::Original, s)?;
    // Both branches pool with the grid mask so the vectors are comparable.
    let full_vec = pipe.masked_feature_vector(&full.image, &gridded.mask)?;
    let grid_vec = pipe.masked_feature_vector(&gridded.image, &gridded.mask)?;
    let record = TileabilityRecord {
        index,
        seed: s,
        vector,
        cosine_similarity: cosine_similarity(&full_vec, &grid_vec)?,
        l1_distance: l1_distance(&full_vec, &grid_vec)?,
        full_image: format!("images/{index:05}_full.png"),
        grid_image: format!("images/{index:05}_grid.png"),
    };
    Ok(ScanSample {
        record,
        full: RgbImage::from_tensor(&full.image)?,
        grid: RgbImage::from_tensor(&gridded.image)?,
    })
}

/// Extracts one random LayerX pixel per sample, visualizes it fully and on
/// the grid, and ranks samples by the similarity of the two masked feature
/// vectors. Runs on the current rayon pool; output order never depends on
/// scheduling.
pub fn tileability_scan<T: Scalar>(
    pipe: &Pipeline<'_, T>,
    n_samples: usize,
    grid: GridSpec,
    seed: u64,
) -> Result<ScanOutput> {
    if n_samples == 0 {
        return Err(Error::Precondition("n_samples must be at least 1".into()));
    }
    let mut samples = (0..n_samples)
        .into_par_iter()
        .map(|i| scan_one(pipe, grid, i, seed))
        .collect::<Result<Vec<_>>>()?;
    rank_records(&mut samples, |s| (s.record.cosine_similarity, s.record.index));
    Ok(ScanOutput {
        grid_size: grid.grid_size,
        samples,
    })
}
