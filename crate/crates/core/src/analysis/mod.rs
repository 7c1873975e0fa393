//! Quantitative pipelines: tileability scans, two-vector inversion and
//! grid-size sweeps, plus the report bundles they write.

mod invert;
mod report;
mod scan;
mod sweep;
mod visualize;

pub use invert::{invert, FeatureTarget, InversionObjective, InversionResult, InversionSpec};
pub use report::{write_scan_report, write_sweep_report, ReportFiles};
pub use scan::{rank_records, tileability_scan, ScanOutput, ScanSample, TileabilityRecord};
pub use sweep::{grid_size_sweep, SweepOutput, SweepRow, SweepRun, SweepSpec, TargetMode};
pub use visualize::{masked_feature_vector, visualize, visualize_sizes, Background, Visualization};

use crate::bundle::{LayerRef, ModelBundle, Role};
use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Seed streams for the independent random choices made per sample.
pub(crate) mod stream {
    pub const PIXEL: u64 = 1;
    pub const BACKGROUND: u64 = 2;
    pub const INIT: u64 = 3;
    pub const TARGET: u64 = 4;
}

/// A generator layer to intervene on paired with an extractor layer to
/// measure at.
#[derive(Debug, Clone)]
pub struct Pipeline<'a, T: Scalar = f32> {
    pub generator: &'a ModelBundle<T>,
    pub layer_x: LayerRef,
    pub extractor: &'a ModelBundle<T>,
    pub layer_y: LayerRef,
}

impl<'a, T: Scalar> Pipeline<'a, T> {
    pub fn new(
        generator: &'a ModelBundle<T>,
        layer_x: &str,
        extractor: &'a ModelBundle<T>,
        layer_y: &str,
    ) -> Result<Self> {
        if generator.role() != Role::Generator {
            return Err(Error::Precondition(format!("`{}` is not a generator", generator.name())));
        }
        if extractor.role() != Role::FeatureExtractor {
            return Err(Error::Precondition(format!(
                "`{}` is not a feature extractor",
                extractor.name()
            )));
        }
        let image = extractor.image_input()?;
        match (generator.output_shape(), image.shape.as_slice()) {
            ([1, 3, _, _], [1, 3, _, _]) => {}
            (out, inp) => {
                return Err(Error::shape(
                    "pipeline",
                    format!("generator output {out:?} cannot feed extractor input {inp:?}"),
                ))
            }
        }
        Ok(Self {
            layer_x: generator.layer(layer_x)?,
            layer_y: extractor.layer(layer_y)?,
            generator,
            extractor,
        })
    }

    /// Extractor input size as `(height, width)`.
    pub fn extractor_extent(&self) -> (usize, usize) {
        extractor_extent(self.extractor).expect("checked in new")
    }

    /// LayerY activations of a generated image.
    pub fn features(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        extractor_features(image, self.extractor, &self.layer_y)
    }

    /// Unweighted spatial mean of the LayerY activations.
    pub fn pooled_features(&self, image: &Tensor<T>) -> Result<Vec<T>> {
        let act = self.features(image)?;
        ops::masked_channel_mean(&act, &vec![T::one(); self.layer_y.height * self.layer_y.width])
    }

    /// Grid mask at LayerX resolution pooled at LayerY.
    pub fn masked_feature_vector(&self, image: &Tensor<T>, mask: &[bool]) -> Result<Vec<T>> {
        let extent = (self.layer_x.height, self.layer_x.width);
        masked_feature_vector(image, mask, extent, self.extractor, &self.layer_y)
    }
}

fn extractor_extent<T: Scalar>(extractor: &ModelBundle<T>) -> Result<(usize, usize)> {
    let s = &extractor.image_input()?.shape;
    Ok((s[2], s[3]))
}

/// Resizes `image` to the extractor input by nearest neighbour and runs the
/// extractor up to `layer`.
pub fn extractor_features<T: Scalar>(image: &Tensor<T>, extractor: &ModelBundle<T>, layer: &LayerRef) -> Result<Tensor<T>> {
    let (h, w) = extractor_extent(extractor)?;
    let (_, _, ih, iw) = image.dims4("extractor_input")?;
    if (ih, iw) == (h, w) {
        extractor.features(image, layer)
    } else {
        extractor.features(&ops::resize_nearest(image, h, w)?, layer)
    }
}

/// Mean absolute difference.
pub fn l1_distance<T: Scalar>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("l1_distance", format!("{} vs {}", a.len(), b.len())));
    }
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x.to_f64_lossy() - y.to_f64_lossy()).abs())
        .sum();
    Ok(sum / a.len() as f64)
}
