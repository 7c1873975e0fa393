//! Activation vectors, grid masks, label-mask painting and the vector library.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bundle::{ExecutionTrace, LayerRef};
use crate::error::{Error, Result};
use crate::image::{Rgb, RgbImage};
use crate::ops::nearest_index;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Where an activation vector came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Extracted { seed: u64, x: usize, y: usize },
    Optimized,
    Imported,
}

/// Channel vector taken at one pixel of a named layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationVector {
    pub id: String,
    pub name: String,
    pub layer: String,
    pub provenance: Provenance,
    pub values: Vec<f32>,
}

impl ActivationVector {
    pub fn check_layer(&self, layer: &LayerRef) -> Result<()> {
        if self.layer != layer.name {
            return Err(Error::MixedLayers {
                first: self.layer.clone(),
                second: layer.name.clone(),
            });
        }
        if self.values.len() != layer.channels {
            return Err(Error::shape(
                "activation_vector",
                format!(
                    "vector `{}` has {} channels, layer `{}` has {}",
                    self.id,
                    self.values.len(),
                    layer.name,
                    layer.channels
                ),
            ));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "activation_vector" });
        }
        Ok(())
    }

    pub fn values_as<T: Scalar>(&self) -> Vec<T> {
        self.values.iter().map(|&v| T::from_f32_lossy(v)).collect()
    }
}

/// Reads the channel vector at `(x, y)` of a captured layer.
pub fn extract_vector<T: Scalar>(
    trace: &ExecutionTrace<T>,
    layer: &LayerRef,
    x: usize,
    y: usize,
) -> Result<ActivationVector> {
    if x >= layer.width || y >= layer.height {
        return Err(Error::OutOfRange(format!(
            "(x={x}, y={y}) outside layer `{}` of size {}x{}",
            layer.name, layer.width, layer.height
        )));
    }
    let act = trace.activation(&layer.name)?;
    let values = act.pixel(0, y, x)?.into_iter().map(|v| v.to_f32_lossy()).collect();
    let seed = trace.seed.unwrap_or(0);
    Ok(ActivationVector {
        id: format!("{}@{seed}:{x},{y}", layer.name),
        name: format!("{} ({x}, {y}) seed {seed}", layer.name),
        layer: layer.name.clone(),
        provenance: Provenance::Extracted { seed, x, y },
        values,
    })
}

/// Grid of `g×g` blocks separated by one-pixel gaps, anchored at (0, 0).
/// `g = 0` denotes full replication.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSpec {
    pub grid_size: usize,
}

impl GridSpec {
    pub const FULL: GridSpec = GridSpec { grid_size: 0 };

    pub fn new(grid_size: usize) -> Self {
        Self { grid_size }
    }

    pub fn mask(&self, height: usize, width: usize) -> Vec<bool> {
        grid_mask(self.grid_size, height, width)
    }
}

/// Row-major `H×W` mask; `true` marks positions that receive the vector.
pub fn grid_mask(g: usize, height: usize, width: usize) -> Vec<bool> {
    let on = |i: usize| g == 0 || i % (g + 1) < g;
    let mut mask = Vec::with_capacity(height * width);
    for i in 0..height {
        for j in 0..width {
            mask.push(on(i) && on(j));
        }
    }
    mask
}

/// Integer label grid; 0 keeps the original activation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelGrid {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl LabelGrid {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(
                "label_grid",
                format!("{} labels for {height}x{width}", labels.len()),
            ));
        }
        Ok(Self { height, width, labels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![0; height * width],
        }
    }

    pub fn from_mask(mask: &[bool], height: usize, width: usize, label: u32) -> Result<Self> {
        Self::new(height, width, mask.iter().map(|&m| if m { label } else { 0 }).collect())
    }

    /// Parses a JSON array of rows.
    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        if height == 0 || width == 0 || rows.iter().any(|r| r.len() != width) {
            return Err(Error::shape("label_grid", "rows must be non-empty and equally long"));
        }
        Self::new(height, width, rows.concat())
    }

    pub fn rows(&self) -> Vec<Vec<u32>> {
        self.labels.chunks(self.width).map(<[u32]>::to_vec).collect()
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }
}

/// Nearest-neighbour resampling of labels using pixel centers:
/// `out[i, j] = src[floor((i + 0.5)·H₀/H), floor((j + 0.5)·W₀/W)]`.
pub fn downsample_labels(src: &LabelGrid, height: usize, width: usize) -> Result<LabelGrid> {
    if height == 0 || width == 0 || height > src.height || width > src.width {
        return Err(Error::invalid(
            "downsample_labels",
            format!("target {height}x{width} must be within source {}x{}", src.height, src.width),
        ));
    }
    Ok(resample_labels(src, height, width))
}

/// Same index rule as [`downsample_labels`] without the size restriction.
pub fn resample_labels(src: &LabelGrid, height: usize, width: usize) -> LabelGrid {
    let mut labels = Vec::with_capacity(height * width);
    for i in 0..height {
        let si = nearest_index(i, src.height, height);
        for j in 0..width {
            labels.push(src.get(si, nearest_index(j, src.width, width)));
        }
    }
    LabelGrid { height, width, labels }
}

/// Resolved pixel replacement for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelPatch<T: Scalar = f32> {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub vectors: BTreeMap<u32, Vec<T>>,
}

impl<T: Scalar> LabelPatch<T> {
    /// Replaces labelled pixels of a `C×H×W` or `N×C×H×W` tensor.
    pub fn apply(&self, act: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = match act.shape()[..] {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::shape("apply_mask_replace", format!("{:?}", act.shape()))),
        };
        if (h, w) != (self.height, self.width) {
            return Err(Error::shape(
                "apply_mask_replace",
                format!("labels {}x{} vs activations {h}x{w}", self.height, self.width),
            ));
        }
        for (&label, v) in &self.vectors {
            if v.len() != c {
                return Err(Error::shape(
                    "apply_mask_replace",
                    format!("vector for label {label} has {} channels, layer has {c}", v.len()),
                ));
            }
        }
        let mut data = act.data().to_vec();
        for (pos, &label) in self.labels.iter().enumerate() {
            if label == 0 {
                continue;
            }
            let v = self.vectors.get(&label).ok_or(Error::DanglingLabel { label })?;
            for b in 0..n {
                for (ch, &val) in v.iter().enumerate() {
                    data[(b * c + ch) * h * w + pos] = val;
                }
            }
        }
        Tensor::new(act.shape(), data)
    }
}

/// Label grid plus the palette of vectors the labels refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct InterventionMask {
    pub labels: LabelGrid,
    pub palette: BTreeMap<u32, ActivationVector>,
}

impl InterventionMask {
    /// Single vector painted wherever `mask` is set.
    pub fn single(mask: &[bool], height: usize, width: usize, vector: ActivationVector) -> Result<Self> {
        Ok(Self {
            labels: LabelGrid::from_mask(mask, height, width, 1)?,
            palette: BTreeMap::from([(1, vector)]),
        })
    }

    /// The layer all palette vectors share.
    pub fn layer_name(&self) -> Result<Option<&str>> {
        let mut layers = self.palette.values().map(|v| v.layer.as_str());
        let Some(first) = layers.next() else { return Ok(None) };
        if let Some(other) = layers.find(|l| *l != first) {
            return Err(Error::MixedLayers {
                first: first.to_string(),
                second: other.to_string(),
            });
        }
        Ok(Some(first))
    }

    /// Checks palette consistency against `layer` and builds the pixel patch.
    pub fn resolve<T: Scalar>(&self, layer: &LayerRef) -> Result<LabelPatch<T>> {
        self.layer_name()?;
        if (self.labels.height, self.labels.width) != (layer.height, layer.width) {
            return Err(Error::shape(
                "intervention_mask",
                format!(
                    "labels {}x{} vs layer `{}` {}x{}",
                    self.labels.height, self.labels.width, layer.name, layer.height, layer.width
                ),
            ));
        }
        for v in self.palette.values() {
            v.check_layer(layer)?;
        }
        if let Some(&label) = self
            .labels
            .labels
            .iter()
            .find(|&&l| l != 0 && !self.palette.contains_key(&l))
        {
            return Err(Error::DanglingLabel { label });
        }
        Ok(LabelPatch {
            height: layer.height,
            width: layer.width,
            labels: self.labels.labels.clone(),
            vectors: self
                .palette
                .iter()
                .map(|(&k, v)| (k, v.values_as::<T>()))
                .collect(),
        })
    }
}

/// Replaces the pixels of `act` selected by `mask` with palette vectors.
pub fn apply_mask_replace<T: Scalar>(act: &Tensor<T>, mask: &InterventionMask, layer: &LayerRef) -> Result<Tensor<T>> {
    mask.resolve::<T>(layer)?.apply(act)
}

pub const PALETTE_TOLERANCE: u8 = 8;

/// Maps each pixel to the label of the nearest palette color (or 0 for the
/// keep color) within an L∞ distance of [`PALETTE_TOLERANCE`].
pub fn palette_decode(image: &RgbImage, palette: &[(Rgb, u32)], keep: Rgb) -> Result<LabelGrid> {
    let mut entries: Vec<(Rgb, u32)> = vec![(keep, 0)];
    entries.extend_from_slice(palette);
    let dist = |a: Rgb, b: Rgb| (0..3).map(|i| a[i].abs_diff(b[i])).max().unwrap_or(0);
    let mut labels = Vec::with_capacity(image.width * image.height);
    for y in 0..image.height {
        for x in 0..image.width {
            let px = image.get(x, y);
            let (d, label) = entries
                .iter()
                .map(|&(c, l)| (dist(px, c), l))
                .min_by_key(|&(d, _)| d)
                .expect("keep color present");
            if d > PALETTE_TOLERANCE {
                return Err(Error::UnmatchedColor {
                    x,
                    y,
                    r: px[0],
                    g: px[1],
                    b: px[2],
                });
            }
            labels.push(label);
        }
    }
    LabelGrid::new(image.height, image.width, labels)
}

/// Renders a label grid with the given colors (keep color for 0).
pub fn palette_encode(labels: &LabelGrid, palette: &[(Rgb, u32)], keep: Rgb) -> Result<RgbImage> {
    let mut img = RgbImage::filled(labels.width, labels.height, keep);
    for y in 0..labels.height {
        for x in 0..labels.width {
            let l = labels.get(y, x);
            if l == 0 {
                continue;
            }
            let &(c, _) = palette
                .iter()
                .find(|&&(_, pl)| pl == l)
                .ok_or(Error::DanglingLabel { label: l })?;
            img.put(x, y, c);
        }
    }
    Ok(img)
}

/// Named activation vectors persisted as JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VectorLibrary {
    pub vectors: Vec<ActivationVector>,
}

impl VectorLibrary {
    pub fn get(&self, id: &str) -> Result<&ActivationVector> {
        self.vectors
            .iter()
            .find(|v| v.id == id)
            .ok_or_else(|| Error::UnknownVector(id.to_string()))
    }

    /// Inserts or replaces by id.
    pub fn insert(&mut self, vector: ActivationVector) {
        match self.vectors.iter_mut().find(|v| v.id == vector.id) {
            Some(slot) => *slot = vector,
            None => self.vectors.push(vector),
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let lib: Self = serde_json::from_str(text)?;
        let mut seen = std::collections::BTreeSet::new();
        for v in &lib.vectors {
            if !seen.insert(v.id.as_str()) {
                return Err(Error::invalid("vector_library", format!("duplicate id `{}`", v.id)));
            }
        }
        Ok(lib)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Writes via a temporary sibling file and an atomic rename.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}
