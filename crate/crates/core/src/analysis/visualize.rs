use serde::{Deserialize, Serialize};

use crate::bundle::{Hook, LayerRef, ModelBundle};
use crate::error::{Error, Result};
use crate::intervention::{extract_vector, ActivationVector, GridSpec, InterventionMask, LabelGrid};
use crate::ops::{self, nearest_index};
use crate::rng::{derive_seed, SplitMix64};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{extractor_features, stream};

/// What fills the grid gaps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    /// Keep the unmodified activations of the seed's image.
    #[default]
    Original,
    /// One randomly extracted vector of the same image.
    Random,
}

impl std::str::FromStr for Background {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Self::Original),
            "random" => Ok(Self::Random),
            other => Err(Error::invalid("background", format!("`{other}` (expected original|random)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Visualization<T: Scalar = f32> {
    pub image: Tensor<T>,
    /// Positions of the layer set to the vector.
    pub mask: Vec<bool>,
}

/// Generates the image for `seed` with `vector` written into `layer` on the
/// grid (every position for `g = 0`).
pub fn visualize<T: Scalar>(
    generator: &ModelBundle<T>,
    layer: &LayerRef,
    vector: &ActivationVector,
    grid: GridSpec,
    background: Background,
    seed: u64,
) -> Result<Visualization<T>> {
    vector.check_layer(layer)?;
    let (h, w) = (layer.height, layer.width);
    let mask = grid.mask(h, w);
    let mut labels = LabelGrid::from_mask(&mask, h, w, 1)?;
    let mut intervention = InterventionMask::single(&mask, h, w, vector.clone())?;
    if background == Background::Random && grid.grid_size > 0 {
        let (_, trace) = generator.forward_seed(seed, &[Hook::capture(&layer.name)])?;
        let mut rng = SplitMix64::new(derive_seed(seed, stream::BACKGROUND));
        let (bx, by) = (rng.below(w), rng.below(h));
        let bg = extract_vector(&trace, layer, bx, by)?;
        for l in labels.labels.iter_mut().filter(|l| **l == 0) {
            *l = 2;
        }
        intervention.labels = labels;
        intervention.palette.insert(2, bg);
    }
    let patch = intervention.resolve::<T>(layer)?;
    let (image, _) = generator.forward_seed(seed, &[Hook::paint(&layer.name, patch)])?;
    Ok(Visualization { image, mask })
}

/// One visualization per grid size, in the order given.
pub fn visualize_sizes<T: Scalar>(
    generator: &ModelBundle<T>,
    layer: &LayerRef,
    vector: &ActivationVector,
    sizes: &[usize],
    background: Background,
    seed: u64,
) -> Result<Vec<(usize, Visualization<T>)>> {
    if sizes.is_empty() {
        return Err(Error::invalid("visualize", "no grid sizes given"));
    }
    sizes
        .iter()
        .map(|&g| Ok((g, visualize(generator, layer, vector, GridSpec::new(g), background, seed)?)))
        .collect()
}

/// Mask-weighted spatial mean of the extractor activations at `layer_y`.
///
/// `mask` is row-major at `mask_extent` (LayerX) resolution and is resized
/// to the layer by nearest neighbour.
pub fn masked_feature_vector<T: Scalar>(
    image: &Tensor<T>,
    mask: &[bool],
    mask_extent: (usize, usize),
    extractor: &ModelBundle<T>,
    layer_y: &LayerRef,
) -> Result<Vec<T>> {
    let (mh, mw) = mask_extent;
    if mask.len() != mh * mw || mh == 0 || mw == 0 {
        return Err(Error::shape(
            "masked_feature_vector",
            format!("mask has {} cells for {mh}x{mw}", mask.len()),
        ));
    }
    let act = extractor_features(image, extractor, layer_y)?;
    let weights = resize_mask::<T>(mask, mask_extent, (layer_y.height, layer_y.width));
    if weights.iter().all(|w| w.is_zero()) {
        return Err(Error::DegenerateMask(format!(
            "mask is empty after resizing to {}x{}",
            layer_y.height, layer_y.width
        )));
    }
    ops::masked_channel_mean(&act, &weights)
}

pub(crate) fn resize_mask<T: Scalar>(mask: &[bool], from: (usize, usize), to: (usize, usize)) -> Vec<T> {
    let mut out = Vec::with_capacity(to.0 * to.1);
    for i in 0..to.0 {
        let si = nearest_index(i, from.0, to.0);
        for j in 0..to.1 {
            let on = mask[si * from.1 + nearest_index(j, from.1, to.1)];
            out.push(if on { T::one() } else { T::zero() });
        }
    }
    out
}
