//! Spatial influence of layer pixels on downstream nodes.
//!
//! Propagates a boolean footprint through the graph using only kernel
//! extents, strides, padding and upsampling factors; any output pixel
//! outside the footprint cannot depend on the seeded pixels.

use crate::error::{Error, Result};
use crate::ops::PaddingMode;
use crate::scalar::Scalar;

use super::{LayerRef, ModelBundle, Op};

/// Boolean H×W footprint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Footprint {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<bool>,
}

impl Footprint {
    fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            cells: vec![false; height * width],
        }
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        self.cells[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

fn spatial(shape: &[usize]) -> (usize, usize) {
    match shape {
        [_, _, h, w] => (*h, *w),
        _ => (1, 1),
    }
}

fn wrap(i: isize, n: usize, mode: PaddingMode) -> Option<usize> {
    match mode {
        PaddingMode::Circular => Some(i.rem_euclid(n as isize) as usize),
        PaddingMode::Zeros if i >= 0 && (i as usize) < n => Some(i as usize),
        PaddingMode::Zeros => None,
    }
}

impl<T: Scalar> ModelBundle<T> {
    /// Footprint on the output of the given pixels `(y, x)` of `layer`.
    pub fn receptive_footprint(&self, layer: &LayerRef, pixels: &[(usize, usize)]) -> Result<Footprint> {
        let mut prints: Vec<Option<Footprint>> = vec![None; self.nodes().len()];
        let mut seed = Footprint::empty(layer.height, layer.width);
        for &(y, x) in pixels {
            if y >= layer.height || x >= layer.width {
                return Err(Error::OutOfRange(format!(
                    "pixel (y={y}, x={x}) outside {}x{}",
                    layer.height, layer.width
                )));
            }
            seed.cells[y * layer.width + x] = true;
        }
        prints[layer.node] = Some(seed);

        for node in &self.nodes()[layer.node + 1..] {
            let (h, w) = spatial(self.node_shape(node.id));
            let mut out = Footprint::empty(h, w);
            let mut touched = false;
            for &src in &node.inputs {
                let Some(fp) = &prints[src] else { continue };
                touched = true;
                match &node.op {
                    Op::Conv2d {
                        weight,
                        stride,
                        padding,
                        ..
                    } => {
                        let (kh, kw) = (weight.shape()[2], weight.shape()[3]);
                        let p = padding.width as isize;
                        for oy in 0..h {
                            for ox in 0..w {
                                'taps: for ky in 0..kh {
                                    let Some(iy) = wrap((oy * stride + ky) as isize - p, fp.height, padding.mode)
                                    else {
                                        continue;
                                    };
                                    for kx in 0..kw {
                                        let Some(ix) =
                                            wrap((ox * stride + kx) as isize - p, fp.width, padding.mode)
                                        else {
                                            continue;
                                        };
                                        if fp.contains(iy, ix) {
                                            out.cells[oy * w + ox] = true;
                                            break 'taps;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    Op::ConvTranspose2d {
                        weight,
                        stride,
                        padding,
                        ..
                    } => {
                        let (kh, kw) = (weight.shape()[2], weight.shape()[3]);
                        let p = padding.width as isize;
                        for iy in 0..fp.height {
                            for ix in 0..fp.width {
                                if !fp.contains(iy, ix) {
                                    continue;
                                }
                                for ky in 0..kh {
                                    let Some(oy) = wrap((iy * stride + ky) as isize - p, h, padding.mode) else {
                                        continue;
                                    };
                                    for kx in 0..kw {
                                        if let Some(ox) = wrap((ix * stride + kx) as isize - p, w, padding.mode) {
                                            out.cells[oy * w + ox] = true;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    Op::UpsampleNearest { factor } => {
                        for y in 0..h {
                            for x in 0..w {
                                if fp.contains(y / factor, x / factor) {
                                    out.cells[y * w + x] = true;
                                }
                            }
                        }
                    }
                    Op::ReplicateSpatial { .. } => {
                        if fp.count() > 0 {
                            out.cells.fill(true);
                        }
                    }
                    Op::Activation(_) | Op::AffineChannel { .. } | Op::ConcatChannels => {
                        for (o, &c) in out.cells.iter_mut().zip(&fp.cells) {
                            *o |= c;
                        }
                    }
                    Op::Input { .. } => {}
                }
            }
            if touched {
                prints[node.id] = Some(out);
            }
        }
        let (h, w) = spatial(self.output_shape());
        Ok(prints[self.output_node()]
            .take()
            .unwrap_or_else(|| Footprint::empty(h, w)))
    }

    /// Cumulative upsampling factor from `layer` to the output; fails when
    /// the output extent is not an integer multiple of the layer extent.
    pub fn upsampling_factor(&self, layer: &LayerRef) -> Result<usize> {
        let (h, w) = spatial(self.output_shape());
        if h % layer.height != 0 || w % layer.width != 0 || h / layer.height != w / layer.width {
            return Err(Error::invalid(
                "upsampling_factor",
                format!("output {h}x{w} is not a uniform multiple of {}x{}", layer.height, layer.width),
            ));
        }
        Ok(h / layer.height)
    }
}
